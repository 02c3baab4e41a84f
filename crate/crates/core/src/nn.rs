//! Small trainable building blocks: convolutions, linear layers, layer norm.
//!
//! Weights initialize from uniform(-s, s) with s = sqrt(1/fan_in); biases
//! start at zero. Every block exposes its parameters under a stable
//! dot-separated name so optimizers and checkpoints see one flat list.

use crate::rng;
use crate::tensor::{Result, Tensor};

/// Flat list of (name, parameter) pairs in registration order.
pub type NamedParams = Vec<(String, Tensor)>;

/// Stride-1, same-padding convolution with optional bias.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(rng: &mut rng::Stream, c_in: usize, c_out: usize, k: usize, bias: bool) -> Conv2d {
        let fan_in = (c_in * k * k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let mut w = vec![0.0; c_out * c_in * k * k];
        rng::fill_uniform(rng, &mut w, bound);
        let weight = Tensor::param_from_vec(w, &[c_out, c_in, k, k]).expect("weight shape");
        let bias = bias.then(|| Tensor::param_from_vec(vec![0.0; c_out], &[1, c_out, 1, 1]).expect("bias shape"));
        Conv2d { weight, bias }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Dense layer over the last axis; weight is stored `[in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut rng::Stream, c_in: usize, c_out: usize, bias: bool) -> Linear {
        let bound = (1.0 / c_in as f64).sqrt();
        let mut w = vec![0.0; c_in * c_out];
        rng::fill_uniform(rng, &mut w, bound);
        let weight = Tensor::param_from_vec(w, &[c_in, c_out]).expect("weight shape");
        let bias = bias.then(|| Tensor::param_from_vec(vec![0.0; c_out], &[c_out]).expect("bias shape"));
        Linear { weight, bias }
    }

    /// Apply to `[.., in]`; accepts `[m,in]` and `[b,m,in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Layer normalization over the trailing axis with learnable affine.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param_from_vec(vec![1.0; dim], &[dim]).expect("gamma"),
            beta: Tensor::param_from_vec(vec![0.0; dim], &[dim]).expect("beta"),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// `[B,C,H,W] -> [B,H*W,C]` token view for attention blocks.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let t = x.permute(&[0, 2, 3, 1])?;
    t.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`] for a known spatial size.
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = tokens.shape();
    let t = tokens.reshape(&[s[0], h, w, s[2]])?;
    t.permute(&[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn conv_bias_broadcasts_per_channel() {
        let mut r = rng::stream(1, "t");
        let conv = Conv2d::new(&mut r, 2, 3, 1, true);
        conv.bias.as_ref().unwrap().set_data(&[1.0, 2.0, 3.0]);
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let y = conv.forward(&x).unwrap();
        let v = y.to_vec();
        for c in 0..3 {
            for s in 0..4 {
                assert_eq!(v[c * 4 + s], (c + 1) as f64);
            }
        }
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64).collect(), &[2, 3, 2, 2]).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), vec![2, 4, 3]);
        let back = from_tokens(&t, 2, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn linear_applies_to_batched_tokens() {
        let mut r = rng::stream(2, "t");
        let lin = Linear::new(&mut r, 3, 2, true);
        let x = Tensor::from_vec((0..12).map(|i| i as f64 * 0.1).collect(), &[2, 2, 3]).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 2]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let w1 = Conv2d::new(&mut rng::stream(5, "init"), 4, 8, 3, true).weight.to_vec();
        let w2 = Conv2d::new(&mut rng::stream(5, "init"), 4, 8, 3, true).weight.to_vec();
        assert_eq!(w1, w2);
    }
}
