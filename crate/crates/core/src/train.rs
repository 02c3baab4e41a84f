//! Training loops and model evaluation over generated datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bhccm::{HeadSpec, ModelError, SegNetConfig, ToySegNet};
use crate::datagen::Dataset;
use crate::decode::{self, DecodeError, ScoreMode};
use crate::hierarchy::{aggregate_flat_prediction, HierarchyError, LabelRaster};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::rng;
use crate::tensor::{Sgd, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    NumericalFailure { iteration: usize, loss: f64 },
    #[error("dataset has no samples")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Cross-entropy at the finest level only.
    Ce,
    /// Weighted per-level cross-entropy.
    Hce,
    /// Per-level cross-entropy plus the path-consistency term.
    #[default]
    Hsc,
}

impl LossMode {
    pub fn parse(s: &str) -> Option<LossMode> {
        match s {
            "ce" => Some(LossMode::Ce),
            "hce" => Some(LossMode::Hce),
            "hsc" => Some(LossMode::Hsc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Hce => "hce",
            LossMode::Hsc => "hsc",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossMode,
    pub loss_cfg: LossConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(levels: usize, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch: 2,
            lr: 0.05,
            momentum: 0.9,
            loss: LossMode::Hsc,
            loss_cfg: LossConfig::uniform(levels),
            seed,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// (iteration, loss) rows at the logging cadence plus the final step.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: Option<f64>,
}

/// Stack dataset samples into one `[B,C,H,W]` tensor and per-level labels.
pub fn batch_of(ds: &Dataset, indices: &[usize]) -> (Tensor, Vec<Vec<LabelRaster>>) {
    let n = ds.spec.size;
    let c = ds.spec.channels;
    let levels = ds.hierarchy.num_levels();
    let mut image = Vec::with_capacity(indices.len() * c * n * n);
    for &i in indices {
        image.extend_from_slice(&ds.samples[i].image);
    }
    let image = Tensor::from_vec(image, &[indices.len(), c, n, n]).expect("batch shape");
    let labels: Vec<Vec<LabelRaster>> = (0..levels)
        .map(|l| indices.iter().map(|&i| ds.samples[i].labels[l].clone()).collect())
        .collect();
    (image, labels)
}

/// The training objective for one batch of level logits.
pub fn batch_loss(
    logits: &[Tensor],
    labels: &[Vec<LabelRaster>],
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let fine = logits.len() - 1;
    Ok(match mode {
        LossMode::Ce => losses::ce_level(&logits[fine], &labels[fine], cfg.ignore)?,
        LossMode::Hce => losses::hce(logits, labels, cfg)?,
        LossMode::Hsc => losses::hsc(logits, labels, cfg)?,
    })
}

/// Train a fresh network on a dataset.
///
/// The parameter init stream and the batch-sampling stream both derive from
/// `cfg.seed`, so a (config, seed) pair fully pins the run.
pub fn train_stage1(
    ds: &Dataset,
    net_cfg: SegNetConfig,
    head: &HeadSpec,
    cfg: &TrainConfig,
) -> Result<(ToySegNet, TrainLog)> {
    let net = ToySegNet::new(&mut rng::stream(cfg.seed, "init"), net_cfg, head);
    let log = train_existing(&net, ds, cfg)?;
    Ok((net, log))
}

/// Continue training an existing network's trainable parameters.
pub fn train_existing(net: &ToySegNet, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if ds.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params: Vec<Tensor> = net.params().into_iter().map(|(_, p)| p).collect();
    let mut opt = Sgd::new(params, cfg.lr, cfg.momentum)?;
    let mut batches = rng::stream(cfg.seed, "batches");
    let mut log = TrainLog::default();

    for it in 0..cfg.iterations {
        let indices: Vec<usize> =
            (0..cfg.batch).map(|_| batches.gen_range(0..ds.samples.len())).collect();
        let (image, labels) = batch_of(ds, &indices);
        let logits = net.forward_levels(&image)?;
        let loss = if logits.len() == 1 {
            // Flat head: supervise against the finest-level labels.
            losses::ce_level(&logits[0], labels.last().expect("levels"), cfg.loss_cfg.ignore)?
        } else {
            batch_loss(&logits, &labels, cfg.loss, &cfg.loss_cfg)?
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NumericalFailure { iteration: it, loss: value });
        }
        loss.backward()?;
        opt.step()?;
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            log.losses.push((it, value));
        }
        log.final_loss = Some(value);
    }
    Ok(log)
}

/// How logits become label rasters during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Argmax,
    Jsps,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Option<DecodeMode> {
        match s {
            "argmax" => Some(DecodeMode::Argmax),
            "jsps" => Some(DecodeMode::Jsps),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Argmax => "argmax",
            DecodeMode::Jsps => "jsps",
        }
    }
}

/// Per-level scores plus the cross-level consistency rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub levels: Vec<LevelReport>,
    pub consistency_rate: f64,
    pub decode: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: String,
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl EvalReport {
    /// Finest-level mean IoU, the headline number.
    pub fn fine_miou(&self) -> f64 {
        self.levels.last().expect("at least one level").miou
    }
}

/// Decode a model's logits for one image batch into per-level rasters.
pub fn decode_logits(
    logits: &[Tensor],
    ds: &Dataset,
    mode: DecodeMode,
) -> Result<Vec<Vec<LabelRaster>>> {
    let h = &ds.hierarchy;
    if logits.len() == 1 && h.num_levels() > 1 {
        // Flat model: argmax at the finest level, ancestors by aggregation.
        let fine = decode::argmax_per_level(logits)?.remove(0);
        let mut out: Vec<Vec<LabelRaster>> = vec![Vec::new(); h.num_levels()];
        for raster in fine {
            let all = aggregate_flat_prediction(h, &raster, h.num_levels() - 1)?;
            for (l, r) in all.into_iter().enumerate() {
                out[l].push(r);
            }
        }
        return Ok(out);
    }
    Ok(match mode {
        DecodeMode::Argmax => decode::argmax_per_level(logits)?,
        DecodeMode::Jsps => decode::jsps_decode(logits, h, ScoreMode::Sigmoid)?,
    })
}

/// Score any per-image forward function over a dataset.
///
/// `forward` maps a `[1,C,H,W]` image to per-level logits (a single level
/// for flat models, which then evaluate through ancestor aggregation).
pub fn evaluate_with(
    forward: &mut dyn FnMut(&Tensor) -> Result<Vec<Tensor>>,
    ds: &Dataset,
    mode: DecodeMode,
) -> Result<EvalReport> {
    let h = &ds.hierarchy;
    let levels = h.num_levels();
    let mut cms: Vec<ConfusionMatrix> =
        (0..levels).map(|l| ConfusionMatrix::new(h.class_count(l))).collect();
    let mut consistent = 0.0;
    let mut batches = 0usize;
    let mut flat = false;

    for i in 0..ds.samples.len() {
        let (image, labels) = batch_of(ds, &[i]);
        let logits = forward(&image)?;
        flat = logits.len() == 1 && levels > 1;
        let pred = decode_logits(&logits, ds, mode)?;
        for l in 0..levels {
            cms[l].accumulate(&pred[l][0], &labels[l][0])?;
        }
        consistent += decode::consistency_rate(&pred, h)?;
        batches += 1;
    }
    if batches == 0 {
        return Err(TrainError::EmptyDataset);
    }

    let mut reports = Vec::with_capacity(levels);
    for (l, cm) in cms.iter().enumerate() {
        reports.push(LevelReport {
            level: h.level_name(l).to_string(),
            miou: cm.miou()?,
            macc: cm.macc()?,
            per_class_iou: cm.per_class_iou(),
        });
    }
    Ok(EvalReport {
        levels: reports,
        consistency_rate: consistent / batches as f64,
        decode: if flat { "aggregate".to_string() } else { mode.as_str().to_string() },
    })
}

/// Run a network over every sample and score per-level confusion matrices.
pub fn evaluate(net: &ToySegNet, ds: &Dataset, mode: DecodeMode) -> Result<EvalReport> {
    evaluate_with(&mut |img| Ok(net.forward_levels(img)?), ds, mode)
}
