//! Training losses: per-level cross-entropy, the weighted hierarchical
//! cross-entropy, the hierarchical path-consistency term, and their
//! combination.
//!
//! The path-consistency term concatenates the per-level logits into one
//! vector per pixel, takes a log-softmax over it, and measures the KL
//! divergence from the concatenated one-hot ground-truth path, in the
//! target-vs-prediction direction KL(target || softmax(concat)). In
//! `normalized_path_target` mode (the default) the concatenated target is
//! divided by the level count so it is a proper distribution and the loss
//! has minimum 0; raw mode keeps the unscaled target for sensitivity
//! studies.
//!
//! All means run over non-ignore pixels only, jointly across the batch. A
//! pixel enters the path term only when it is labeled at every level.

use thiserror::Error;

use crate::hierarchy::LabelRaster;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("all pixels ignored; mean undefined")]
    AllIgnored,
    #[error("{got} logit levels for {want} label levels")]
    LevelCount { got: usize, want: usize },
    #[error("{got} rasters for batch size {want}")]
    BatchSize { got: usize, want: usize },
    #[error("raster {index} is {got_h}x{got_w}, logits are {h}x{w}")]
    RasterSize { index: usize, got_h: usize, got_w: usize, h: usize, w: usize },
    #[error("pixel ({x},{y}) of raster {index} holds {value}, outside 0..{classes}")]
    BadLabel { index: usize, x: usize, y: usize, value: u32, classes: usize },
    #[error("level weights: {got} entries for {want} levels")]
    WeightCount { got: usize, want: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights and modes for the hierarchical losses.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Per-level cross-entropy weights.
    pub level_weights: Vec<f64>,
    /// Weight of the path-consistency term inside [`hsc`].
    pub alpha: f64,
    /// Label value excluded from every mean.
    pub ignore: u32,
    /// Divide the concatenated one-hot target by the level count.
    pub normalized_path_target: bool,
}

impl LossConfig {
    pub fn uniform(levels: usize) -> LossConfig {
        LossConfig {
            level_weights: vec![1.0; levels],
            alpha: 1.0,
            ignore: crate::hierarchy::DEFAULT_IGNORE,
            normalized_path_target: true,
        }
    }
}

fn check_batch(
    logits_shape: &[usize],
    labels: &[LabelRaster],
    classes: usize,
    ignore: u32,
) -> Result<()> {
    let (b, h, w) = (logits_shape[0], logits_shape[2], logits_shape[3]);
    if labels.len() != b {
        return Err(LossError::BatchSize { got: labels.len(), want: b });
    }
    for (i, r) in labels.iter().enumerate() {
        if r.height != h || r.width != w {
            return Err(LossError::RasterSize {
                index: i,
                got_h: r.height,
                got_w: r.width,
                h,
                w,
            });
        }
        for y in 0..h {
            for x in 0..w {
                let v = r.get(y, x);
                if v != ignore && v as usize >= classes {
                    return Err(LossError::BadLabel { index: i, x, y, value: v, classes });
                }
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy of one level over non-ignore pixels.
pub fn ce_level(logits: &Tensor, labels: &[LabelRaster], ignore: u32) -> Result<Tensor> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 4, "ce_level expects [B,C,H,W] logits");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    check_batch(&shape, labels, c, ignore)?;

    // One-hot selector over valid pixels.
    let mut onehot = vec![0.0; b * c * h * w];
    let mut valid = 0usize;
    for (bi, raster) in labels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = raster.get(y, x);
                if v == ignore {
                    continue;
                }
                valid += 1;
                onehot[((bi * c + v as usize) * h + y) * w + x] = 1.0;
            }
        }
    }
    if valid == 0 {
        return Err(LossError::AllIgnored);
    }
    let selector = Tensor::from_vec(onehot, &shape).expect("selector shape");
    let logp = logits.log_softmax(1)?;
    Ok(logp.mul(&selector)?.sum().scale(-1.0 / valid as f64))
}

fn check_levels(logits: &[Tensor], labels: &[Vec<LabelRaster>], cfg: &LossConfig) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(LossError::LevelCount { got: logits.len(), want: labels.len() });
    }
    if cfg.level_weights.len() != logits.len() {
        return Err(LossError::WeightCount { got: cfg.level_weights.len(), want: logits.len() });
    }
    Ok(())
}

/// Hierarchical cross-entropy: the weighted sum of per-level terms.
pub fn hce(logits: &[Tensor], labels: &[Vec<LabelRaster>], cfg: &LossConfig) -> Result<Tensor> {
    check_levels(logits, labels, cfg)?;
    let mut total: Option<Tensor> = None;
    for (i, (lg, lb)) in logits.iter().zip(labels).enumerate() {
        let term = ce_level(lg, lb, cfg.ignore)?.scale(cfg.level_weights[i]);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Hierarchical path-consistency loss over concatenated level logits.
pub fn hpc(logits: &[Tensor], labels: &[Vec<LabelRaster>], cfg: &LossConfig) -> Result<Tensor> {
    if logits.len() != labels.len() {
        return Err(LossError::LevelCount { got: logits.len(), want: labels.len() });
    }
    let levels = logits.len();
    let shape = logits[0].shape();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut class_counts = Vec::with_capacity(levels);
    for (lg, lb) in logits.iter().zip(labels) {
        let s = lg.shape();
        check_batch(&s, lb, s[1], cfg.ignore)?;
        class_counts.push(s[1]);
    }
    let c_total: usize = class_counts.iter().sum();

    // A pixel participates only when labeled at every level.
    let mut valid = vec![true; b * h * w];
    for lb in labels {
        for (bi, raster) in lb.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if raster.get(y, x) == cfg.ignore {
                        valid[(bi * h + y) * w + x] = false;
                    }
                }
            }
        }
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(LossError::AllIgnored);
    }

    let target_value = if cfg.normalized_path_target { 1.0 / levels as f64 } else { 1.0 };
    let mut target = vec![0.0; b * c_total * h * w];
    let mut c_offset = 0;
    for (li, lb) in labels.iter().enumerate() {
        for (bi, raster) in lb.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if !valid[(bi * h + y) * w + x] {
                        continue;
                    }
                    let class = raster.get(y, x) as usize + c_offset;
                    target[((bi * c_total + class) * h + y) * w + x] = target_value;
                }
            }
        }
        c_offset += class_counts[li];
    }

    let refs: Vec<&Tensor> = logits.iter().collect();
    let concat = Tensor::concat_channels(&refs)?;
    let logp = concat.log_softmax(1)?;
    let target_t = Tensor::from_vec(target, &[b, c_total, h, w]).expect("target shape");
    // KL(t || p) = sum t log t - sum t log p; the first term is constant.
    let entropy_per_pixel = if cfg.normalized_path_target {
        -(levels as f64).ln()
    } else {
        0.0 // entries are exactly 1, and 0 log 0 = 0
    };
    let cross = logp.mul(&target_t)?.sum().scale(-1.0 / n_valid as f64);
    Ok(Tensor::scalar(entropy_per_pixel).add(&cross)?)
}

/// The combined objective: `hce + alpha * hpc`.
pub fn hsc(logits: &[Tensor], labels: &[Vec<LabelRaster>], cfg: &LossConfig) -> Result<Tensor> {
    let ce = hce(logits, labels, cfg)?;
    if cfg.alpha == 0.0 {
        return Ok(ce);
    }
    let pc = hpc(logits, labels, cfg)?;
    Ok(ce.add(&pc.scale(cfg.alpha))?)
}
