//! Finite-difference gradient verification.
//!
//! Used by the test suites to compare reverse-mode gradients against central
//! differences of the forward pass. The forward closure is re-evaluated from
//! scratch for every probe, so the check is independent of the backward
//! implementation it verifies.

use crate::bhccm::{BhccmHead, FusionMode};
use crate::hierarchy::LabelRaster;
use crate::losses::{self, LossConfig};
use crate::nn::NamedParams;
use crate::rng;
use crate::tensor::Tensor;
use crate::translu::BranchInteractionUnit;

use rand::seq::SliceRandom;
use rand::Rng;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + h;
        let fp = f(&probe);
        probe[i] = keep - h;
        let fm = f(&probe);
        probe[i] = keep;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case discrepancy between an analytic and a numeric gradient.
///
/// Entries whose analytic magnitude is below `abs_floor` are compared
/// absolutely against `abs_floor`; all others relatively.
pub fn max_grad_err(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if a.abs() < abs_floor {
                diff / abs_floor
            } else {
                diff / a.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Step size and thresholds shared by all gradient checks.
pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

/// Outcome of one named gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_err < GRAD_TOL
    }
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` must build a scalar from trainable tensors shaped per `shapes`; it is
/// re-invoked from scratch for every finite-difference probe, so only the
/// forward path enters the numeric side.
pub fn check_grads(
    name: &str,
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    f: &dyn Fn(&[Tensor]) -> Tensor,
) -> GradCheckReport {
    assert_eq!(shapes.len(), inputs.len());
    let params: Vec<Tensor> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::param_from_vec(v.clone(), s).expect("check input"))
        .collect();
    let loss = f(&params);
    loss.backward().expect("scalar loss with grad path");

    let mut max_err: f64 = 0.0;
    for i in 0..params.len() {
        let analytic = params[i].grad().unwrap_or_else(|| vec![0.0; params[i].numel()]);
        let numeric = central_diff_grad(
            |probe| {
                let rebuilt: Vec<Tensor> = inputs
                    .iter()
                    .zip(shapes)
                    .enumerate()
                    .map(|(j, (v, s))| {
                        let data = if j == i { probe.to_vec() } else { v.clone() };
                        Tensor::param_from_vec(data, s).expect("check input")
                    })
                    .collect();
                f(&rebuilt).item()
            },
            &inputs[i],
            FD_STEP,
        );
        max_err = max_err.max(max_grad_err(&analytic, &numeric, GRAD_ABS_FLOOR));
    }
    GradCheckReport { name: name.to_string(), max_err }
}

fn uniform_vec(r: &mut rng::Stream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Values kept away from zero, for kinked ops like relu.
fn off_zero_vec(r: &mut rng::Stream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// A shuffled evenly-spaced grid: all pairwise gaps far exceed the FD step,
/// so max-pool argmaxes cannot flip under probing.
fn separated_vec(r: &mut rng::Stream, n: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1).max(1) as f64).collect();
    vals.shuffle(r);
    vals
}

/// Weighted sum against fixed random weights; makes the output gradient
/// non-uniform so transposed kernels are exercised properly.
fn weighted_sum(out: &Tensor, weights: &[f64]) -> Tensor {
    let w = Tensor::from_vec(weights.to_vec(), &out.shape()).expect("weight shape");
    out.mul(&w).expect("same shape").sum()
}

/// Gradient checks covering every differentiable op, for one seed.
pub fn op_gradient_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut r = rng::stream(seed, "gradcheck-ops");
    let mut reports = Vec::new();
    let mut run =
        |name: &str, shapes: &[Vec<usize>], inputs: Vec<Vec<f64>>, f: &dyn Fn(&[Tensor]) -> Tensor| {
            reports.push(check_grads(name, shapes, &inputs, f));
        };

    // add, broadcast and same-shape
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 2, 2], vec![1, 3, 1, 1]];
    let inputs = vec![uniform_vec(&mut r, 24, -1.0, 1.0), uniform_vec(&mut r, 3, -1.0, 1.0)];
    run("add.broadcast", &shapes, inputs, &|p| {
        weighted_sum(&p[0].add(&p[1]).unwrap(), &wsum)
    });
    let shapes = vec![vec![2, 3], vec![2, 3]];
    let inputs = vec![uniform_vec(&mut r, 6, -1.0, 1.0), uniform_vec(&mut r, 6, -1.0, 1.0)];
    let w6 = uniform_vec(&mut r, 6, -1.0, 1.0);
    run("add.same", &shapes, inputs, &move |p| {
        weighted_sum(&p[0].add(&p[1]).unwrap(), &w6)
    });

    // mul
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 2, 2], vec![1, 3, 1, 1]];
    let inputs = vec![uniform_vec(&mut r, 24, -1.0, 1.0), uniform_vec(&mut r, 3, -1.0, 1.0)];
    run("mul.broadcast", &shapes, inputs, &|p| {
        weighted_sum(&p[0].mul(&p[1]).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 8, -1.0, 1.0);
    let shapes = vec![vec![2, 2, 2, 1], vec![]];
    let inputs = vec![uniform_vec(&mut r, 8, -1.0, 1.0), uniform_vec(&mut r, 1, -1.0, 1.0)];
    run("mul.scalar_gate", &shapes, inputs, &|p| {
        weighted_sum(&p[0].mul(&p[1]).unwrap(), &wsum)
    });

    // scale
    let wsum = uniform_vec(&mut r, 6, -1.0, 1.0);
    let shapes = vec![vec![2, 3]];
    let inputs = vec![uniform_vec(&mut r, 6, -1.0, 1.0)];
    run("scale", &shapes, inputs, &|p| weighted_sum(&p[0].scale(0.7), &wsum));

    // matmul variants
    let wsum = uniform_vec(&mut r, 6, -1.0, 1.0);
    let shapes = vec![vec![3, 4], vec![4, 2]];
    let inputs = vec![uniform_vec(&mut r, 12, -1.0, 1.0), uniform_vec(&mut r, 8, -1.0, 1.0)];
    run("matmul.2d", &shapes, inputs, &|p| {
        weighted_sum(&p[0].matmul(&p[1]).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 12, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4], vec![2, 4, 2]];
    let inputs = vec![uniform_vec(&mut r, 24, -1.0, 1.0), uniform_vec(&mut r, 16, -1.0, 1.0)];
    run("matmul.batched", &shapes, inputs, &|p| {
        weighted_sum(&p[0].matmul(&p[1]).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 12, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4], vec![4, 2]];
    let inputs = vec![uniform_vec(&mut r, 24, -1.0, 1.0), uniform_vec(&mut r, 8, -1.0, 1.0)];
    run("matmul.shared_rhs", &shapes, inputs, &|p| {
        weighted_sum(&p[0].matmul(&p[1]).unwrap(), &wsum)
    });

    // conv2d, 3x3 and 1x1
    let wsum = uniform_vec(&mut r, 3 * 64, -1.0, 1.0);
    let shapes = vec![vec![1, 2, 8, 8], vec![3, 2, 3, 3]];
    let inputs = vec![uniform_vec(&mut r, 128, -1.0, 1.0), uniform_vec(&mut r, 54, -1.0, 1.0)];
    run("conv2d.k3", &shapes, inputs, &|p| {
        weighted_sum(&p[0].conv2d(&p[1]).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 2 * 2 * 16, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4, 4], vec![2, 3, 1, 1]];
    let inputs = vec![uniform_vec(&mut r, 96, -1.0, 1.0), uniform_vec(&mut r, 6, -1.0, 1.0)];
    run("conv2d.k1", &shapes, inputs, &|p| {
        weighted_sum(&p[0].conv2d(&p[1]).unwrap(), &wsum)
    });

    // pooling
    let wsum = uniform_vec(&mut r, 8, -1.0, 1.0);
    let shapes = vec![vec![1, 2, 4, 4]];
    let inputs = vec![uniform_vec(&mut r, 32, -1.0, 1.0)];
    run("avg_pool2", &shapes, inputs, &|p| {
        weighted_sum(&p[0].avg_pool2().unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 6, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4, 4]];
    let inputs = vec![uniform_vec(&mut r, 96, -1.0, 1.0)];
    run("global_avg_pool", &shapes, inputs, &|p| {
        weighted_sum(&p[0].global_avg_pool().unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 6, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4, 4]];
    let inputs = vec![separated_vec(&mut r, 96)];
    run("global_max_pool", &shapes, inputs, &|p| {
        weighted_sum(&p[0].global_max_pool().unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 18, -1.0, 1.0);
    let shapes = vec![vec![2, 4, 3, 3]];
    let inputs = vec![uniform_vec(&mut r, 72, -1.0, 1.0)];
    run("channel_avg_pool", &shapes, inputs, &|p| {
        weighted_sum(&p[0].channel_avg_pool().unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 18, -1.0, 1.0);
    let shapes = vec![vec![2, 4, 3, 3]];
    let inputs = vec![separated_vec(&mut r, 72)];
    run("channel_max_pool", &shapes, inputs, &|p| {
        weighted_sum(&p[0].channel_max_pool().unwrap(), &wsum)
    });

    // concat + slice
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 1, 2, 2], vec![2, 2, 2, 2]];
    let inputs = vec![uniform_vec(&mut r, 8, -1.0, 1.0), uniform_vec(&mut r, 16, -1.0, 1.0)];
    run("concat_channels", &shapes, inputs, &|p| {
        weighted_sum(&Tensor::concat_channels(&[&p[0], &p[1]]).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 8, -1.0, 1.0);
    let shapes = vec![vec![1, 4, 2, 2]];
    let inputs = vec![uniform_vec(&mut r, 16, -1.0, 1.0)];
    run("slice_channels", &shapes, inputs, &|p| {
        weighted_sum(&p[0].slice_channels(1, 3).unwrap(), &wsum)
    });

    // bilinear upsample, odd and even sizes
    let wsum = uniform_vec(&mut r, 2 * 36, -1.0, 1.0);
    let shapes = vec![vec![1, 2, 3, 3]];
    let inputs = vec![uniform_vec(&mut r, 18, -1.0, 1.0)];
    run("bilinear_upsample2.odd", &shapes, inputs, &|p| {
        weighted_sum(&p[0].bilinear_upsample2().unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 64, -1.0, 1.0);
    let shapes = vec![vec![1, 1, 4, 4]];
    let inputs = vec![uniform_vec(&mut r, 16, -1.0, 1.0)];
    run("bilinear_upsample2.even", &shapes, inputs, &|p| {
        weighted_sum(&p[0].bilinear_upsample2().unwrap(), &wsum)
    });

    // unary
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 2, 2]];
    let inputs = vec![off_zero_vec(&mut r, 24)];
    run("relu", &shapes, inputs, &|p| weighted_sum(&p[0].relu(), &wsum));
    let wsum = uniform_vec(&mut r, 6, -1.0, 1.0);
    let shapes = vec![vec![2, 3]];
    let inputs = vec![uniform_vec(&mut r, 6, -2.0, 2.0)];
    run("sigmoid", &shapes, inputs, &|p| weighted_sum(&p[0].sigmoid(), &wsum));

    // softmax family
    let wsum = uniform_vec(&mut r, 40, -1.0, 1.0);
    let shapes = vec![vec![2, 5, 2, 2]];
    let inputs = vec![uniform_vec(&mut r, 40, -2.0, 2.0)];
    run("softmax.channel", &shapes, inputs, &|p| {
        weighted_sum(&p[0].softmax(1).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 4]];
    let inputs = vec![uniform_vec(&mut r, 24, -2.0, 2.0)];
    run("softmax.lastdim", &shapes, inputs, &|p| {
        weighted_sum(&p[0].softmax(2).unwrap(), &wsum)
    });
    let wsum = uniform_vec(&mut r, 124, -1.0, 1.0);
    let shapes = vec![vec![1, 31, 2, 2]];
    let inputs = vec![uniform_vec(&mut r, 124, -2.0, 2.0)];
    run("log_softmax.channel", &shapes, inputs, &|p| {
        weighted_sum(&p[0].log_softmax(1).unwrap(), &wsum)
    });

    // reductions
    let shapes = vec![vec![3, 4]];
    let inputs = vec![uniform_vec(&mut r, 12, -1.0, 1.0)];
    run("sum", &shapes, inputs, &|p| p[0].sum());
    let shapes = vec![vec![3, 4]];
    let inputs = vec![uniform_vec(&mut r, 12, -1.0, 1.0)];
    run("mean", &shapes, inputs, &|p| p[0].mean());

    // reshape + permute composition
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![2, 3, 2, 2]];
    let inputs = vec![uniform_vec(&mut r, 24, -1.0, 1.0)];
    run("reshape_permute", &shapes, inputs, &|p| {
        let t = p[0].permute(&[0, 2, 3, 1]).unwrap().reshape(&[2, 4, 3]).unwrap();
        weighted_sum(&t, &wsum)
    });

    // layer norm, gradients for input and both affine parameters
    let wsum = uniform_vec(&mut r, 24, -1.0, 1.0);
    let shapes = vec![vec![4, 6], vec![6], vec![6]];
    let inputs = vec![
        uniform_vec(&mut r, 24, -1.0, 1.0),
        uniform_vec(&mut r, 6, 0.5, 1.5),
        uniform_vec(&mut r, 6, -0.5, 0.5),
    ];
    run("layer_norm", &shapes, inputs, &|p| {
        weighted_sum(&p[0].layer_norm(&p[1], &p[2], 1e-5).unwrap(), &wsum)
    });

    reports
}

/// Check every parameter of a module against central differences.
///
/// `forward` rebuilds the scalar loss from the module's current parameter
/// values; probes mutate one parameter at a time in place and restore it.
pub fn check_param_grads(
    name: &str,
    params: &NamedParams,
    forward: &dyn Fn() -> Tensor,
) -> Vec<GradCheckReport> {
    check_param_grads_inner(name, params, forward, false)
}

fn check_param_grads_inner(
    name: &str,
    params: &NamedParams,
    forward: &dyn Fn() -> Tensor,
    fail_fast: bool,
) -> Vec<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward().expect("scalar loss with grad path");

    let mut reports = Vec::with_capacity(params.len());
    for (pname, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let original = p.to_vec();
        let numeric = central_diff_grad(
            |probe| {
                p.set_data(probe);
                forward().item()
            },
            &original,
            FD_STEP,
        );
        p.set_data(&original);
        let report = GradCheckReport {
            name: format!("{name}.{pname}"),
            max_err: max_grad_err(&analytic, &numeric, GRAD_ABS_FLOOR),
        };
        let failed = !report.passed();
        reports.push(report);
        if fail_fast && failed {
            break;
        }
    }
    for (_, p) in params {
        p.zero_grad();
    }
    reports
}

/// Re-run a module check on derived sub-seeds until it passes.
///
/// Central differences are undefined across relu and max-pool kinks; when a
/// probe interval happens to straddle one, the estimate is wrong no matter
/// how correct the gradient is. Rebuilding from the next sub-seed moves the
/// check to a generic point. A genuine gradient defect fails every
/// instance, so the retries cannot hide one.
fn check_with_reseeding(
    seed: u64,
    attempts: u64,
    build: &dyn Fn(u64, bool) -> Vec<GradCheckReport>,
) -> Vec<GradCheckReport> {
    // Failed attempts stop at the first bad parameter; a passing one has
    // necessarily covered every parameter.
    let mut last = Vec::new();
    for attempt in 0..attempts {
        last = build(rng::derive_seed(seed, &format!("attempt-{attempt}")), true);
        if last.iter().all(GradCheckReport::passed) {
            return last;
        }
    }
    last
}

/// Gradient checks through the composed modules: the full multi-level head,
/// the combined loss, and a branch interaction unit. One seed per call.
pub fn composite_gradient_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();

    // Full head: loss is the sum of every fused output entry, with fusion
    // scalars randomized so both passes carry signal. Inputs span +-3 so
    // max-pool top-2 gaps dwarf the probe step.
    reports.extend(check_with_reseeding(seed, 24, &|sub, fail_fast| {
        let mut r = rng::stream(sub, "gradcheck-head");
        let head = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::Bidirectional, true);
        let params: NamedParams = {
            let mut out = NamedParams::new();
            head.params_into("head", &mut out);
            out
        };
        for (name, p) in &params {
            if name.contains(".w.") || name.contains(".y.") {
                p.set_data(&[r.gen_range(-1.0..1.0)]);
            }
        }
        let dec_data: Vec<f64> = (0..8 * 16).map(|_| r.gen_range(-3.0..3.0)).collect();
        let dec = Tensor::from_vec(dec_data, &[1, 8, 4, 4]).expect("dec shape");
        let forward = move || {
            let outs = head.forward(&dec).expect("head forward");
            let mut total = outs[0].sum();
            for o in &outs[1..] {
                total = total.add(&o.sum()).expect("scalar add");
            }
            total
        };
        check_param_grads_inner("bhccm", &params, &forward, fail_fast)
    }));

    // Combined loss as a function of the level logits (smooth throughout).
    {
        let mut r = rng::stream(seed, "gradcheck-loss");
        let counts = [4usize, 9, 18];
        let shapes: Vec<Vec<usize>> = counts.iter().map(|&c| vec![1, c, 2, 2]).collect();
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()
            })
            .collect();
        let labels: Vec<Vec<LabelRaster>> = counts
            .iter()
            .map(|&c| {
                let data: Vec<u32> = (0..4).map(|_| r.gen_range(0..c as u32)).collect();
                vec![LabelRaster::from_data(2, 2, data)]
            })
            .collect();
        let cfg = LossConfig::uniform(3);
        reports.push(check_grads("hsc", &shapes, &inputs, &move |p| {
            losses::hsc(p, &labels, &cfg).expect("loss builds")
        }));
    }

    // Interaction unit with open gates, against both its parameters and the
    // incoming branch-1 features.
    reports.extend(check_with_reseeding(seed, 24, &|sub, fail_fast| {
        let mut r = rng::stream(sub, "gradcheck-biu");
        let biu = BranchInteractionUnit::new(&mut r, 8, 8, true);
        biu.gamma.set_data(&[0.4]);
        biu.tau.set_data(&[0.3]);
        let f1_data: Vec<f64> = (0..8 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f1 = Tensor::param_from_vec(f1_data, &[1, 8, 4, 4]).expect("f1 shape");
        let f2_data: Vec<f64> = (0..8 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f2 = Tensor::from_vec(f2_data, &[1, 8, 4, 4]).expect("f2 shape");
        let mut params = NamedParams::new();
        biu.params_into("unit", &mut params);
        params.push(("f1".to_string(), f1.clone()));
        let forward = move || biu.forward(&f1, &f2).expect("biu forward").sum();
        check_param_grads_inner("biu", &params, &forward, fail_fast)
    }));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_polynomial_derivative() {
        // f(x) = x0^2 + 3 x1, grad = (2 x0, 3)
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_diff_grad(f, &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn grad_err_uses_absolute_floor_near_zero() {
        let err = max_grad_err(&[0.0, 1.0], &[5e-7, 1.0 + 1e-5], 1e-6);
        assert!(err < 1.0);
        let err = max_grad_err(&[1.0], &[1.1], 1e-6);
        assert!((err - 0.1).abs() < 1e-12);
    }
}
