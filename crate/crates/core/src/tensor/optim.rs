//! Minimal SGD with classical momentum.

use super::{Result, Tensor, TensorError};

/// Stochastic gradient descent over an explicit parameter list.
///
/// Each step applies `v <- momentum * v + g; p <- p - lr * v` and clears the
/// gradients of every registered parameter. Parameters whose gradient was
/// not populated by the last backward pass are left untouched.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f64, momentum: f64) -> Result<Sgd> {
        for p in &params {
            if !p.requires_grad() {
                return Err(TensorError::Invalid {
                    op: "sgd",
                    msg: "registered parameter does not require gradients".into(),
                });
            }
        }
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Sgd { lr, momentum, params, velocity })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update. Errors if no registered parameter has a gradient.
    pub fn step(&mut self) -> Result<()> {
        if self.params.iter().all(|p| p.grad().is_none()) {
            return Err(TensorError::StepBeforeBackward);
        }
        for (p, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let mut data = p.to_vec();
            for ((d, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g;
                *d -= self.lr * *v;
            }
            p.set_data(&data);
        }
        self.zero_grad();
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_matches_definition() {
        // lr=0.1, m=0, p=1.0, g=2.0 -> p=0.8
        let p = Tensor::param_from_vec(vec![1.0], &[]).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.1, 0.0).unwrap();
        let loss = p.scale(2.0);
        loss.backward().unwrap();
        opt.step().unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // two steps, m=0.9, g=1 constant, lr=1, p0=0: p = -1, then -1 - 1.9 = -2.9
        let p = Tensor::param_from_vec(vec![0.0], &[]).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 1.0, 0.9).unwrap();
        for _ in 0..2 {
            let loss = p.mul(&Tensor::scalar(1.0)).unwrap();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((p.item() - (-2.9)).abs() < 1e-12, "{}", p.item());
    }

    #[test]
    fn converges_on_a_quadratic() {
        // 200 steps on f(p) = (p-3)^2 from p0=0, lr=0.05 -> |p-3| < 1e-3.
        let p = Tensor::param_from_vec(vec![0.0], &[]).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.05, 0.0).unwrap();
        for _ in 0..200 {
            let shift = p.add(&Tensor::scalar(-3.0)).unwrap();
            let loss = shift.mul(&shift).unwrap();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-3, "{}", p.item());
    }

    #[test]
    fn step_before_backward_errors() {
        let p = Tensor::param_from_vec(vec![1.0], &[]).unwrap();
        let mut opt = Sgd::new(vec![p], 0.1, 0.0).unwrap();
        assert!(matches!(opt.step(), Err(TensorError::StepBeforeBackward)));
    }

    #[test]
    fn constant_tensors_cannot_be_registered() {
        let c = Tensor::scalar(1.0);
        assert!(Sgd::new(vec![c], 0.1, 0.0).is_err());
    }
}
