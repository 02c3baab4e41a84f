//! Dual-branch cross-domain transfer.
//!
//! Branch 2 is a frozen, already-trained hierarchical model; Branch 1
//! shares its architecture, carries the target task's hierarchy, and
//! trains. Two mechanisms connect them:
//!
//! **Knowledge sharing** — after every encoder stage a branch interaction
//! unit lets Branch 1 query Branch 2's features through cross-attention:
//!
//! ```text
//! f_hat   = f1 + gamma * Attn(norm(f1), norm(FC(f2)))
//! f_tilde = f_hat + tau * FFN(norm(f_hat))
//! ```
//!
//! `gamma` and `tau` start at zero, so a fresh unit is the identity on
//! Branch 1 features and training opens the cross-branch flow gradually.
//! The interacted features then fuse with Branch 2's by learnable scalars
//! `w1 * f_tilde + w2 * f2`, initialized to (1, 0).
//!
//! **Semantic alignment** — a mapping table ties shared concepts across the
//! two label systems. For each mapped node, Branch 2's softmax probability
//! for its class becomes a soft ROI mask that multiplies exactly the mapped
//! channel of Branch 1's head inputs; all other channels pass through
//! untouched, and the finest level never participates.

use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::bhccm::{Head, ModelError, ToySegNet};
use crate::hierarchy::Hierarchy;
use crate::nn::{from_tokens, to_tokens, LayerNorm, Linear, NamedParams};
use crate::rng;
use crate::tensor::{Sgd, Tensor, TensorError};
use crate::train::{TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("branches have {b1} and {b2} encoder stages; they must match")]
    StageCount { b1: usize, b2: usize },
    #[error("knowledge sharing requires equal stage widths, got {b1:?} vs {b2:?}")]
    StageWidths { b1: Vec<usize>, b2: Vec<usize> },
    #[error("branch {branch} needs a hierarchical head")]
    FlatBranch { branch: u8 },
    #[error("branch interaction expects matching spatial grids, got {got:?} vs {want:?}")]
    TokenCount { got: Vec<usize>, want: Vec<usize> },
    #[error("mapping: {0}")]
    Mapping(String),
    #[error("optimizer would train a frozen-branch parameter: {name}")]
    FrozenParamInOptimizer { name: String },
    #[error("branch 2 must be frozen before transfer training")]
    Branch2NotFrozen,
}

pub type Result<T> = std::result::Result<T, TransferError>;

/// Sample mapping documents shipped with the crate.
pub mod samples {
    /// Ties the crop tree's vegetation/cropland nodes to the land-use model.
    pub const CROP_MAPPING_JSON: &str = include_str!("../../../data/mappings/crop_mapping.json");
}

// ---------------------------------------------------------------------------
// Branch interaction unit
// ---------------------------------------------------------------------------

/// Gated single-head cross-attention from Branch 1 onto Branch 2 features.
pub struct BranchInteractionUnit {
    c1: usize,
    fc: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    ffn_fc1: Linear,
    ffn_fc2: Linear,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    norm_ffn: LayerNorm,
    pub gamma: Tensor,
    pub tau: Tensor,
}

impl fmt::Debug for BranchInteractionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BranchInteractionUnit").field("c1", &self.c1).finish()
    }
}

impl BranchInteractionUnit {
    /// `c1`/`c2` are the Branch 1 / Branch 2 channel widths at this stage.
    pub fn new(r: &mut rng::Stream, c1: usize, c2: usize, bias: bool) -> BranchInteractionUnit {
        BranchInteractionUnit {
            c1,
            fc: Linear::new(r, c2, c1, bias),
            wq: Linear::new(r, c1, c1, bias),
            wk: Linear::new(r, c1, c1, bias),
            wv: Linear::new(r, c1, c1, bias),
            ffn_fc1: Linear::new(r, c1, 2 * c1, bias),
            ffn_fc2: Linear::new(r, 2 * c1, c1, bias),
            norm_q: LayerNorm::new(c1),
            norm_kv: LayerNorm::new(c1),
            norm_ffn: LayerNorm::new(c1),
            gamma: Tensor::param_scalar(0.0),
            tau: Tensor::param_scalar(0.0),
        }
    }

    fn attention(&self, q_tokens: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(q_tokens)?;
        let k = self.wk.forward(kv_tokens)?;
        let v = self.wv.forward(kv_tokens)?;
        let scale = 1.0 / (self.c1 as f64).sqrt();
        let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(scale);
        let attn = scores.softmax(2)?;
        Ok(attn.matmul(&v)?)
    }

    /// Apply the unit: `f1` and `f2` are `[B,C,H,W]` with equal grids.
    pub fn forward(&self, f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
        let (s1, s2) = (f1.shape(), f2.shape());
        if s1[2] != s2[2] || s1[3] != s2[3] || s1[0] != s2[0] {
            return Err(TransferError::TokenCount { got: s2, want: s1 });
        }
        let (h, w) = (s1[2], s1[3]);

        let t1 = to_tokens(f1)?;
        let t2 = self.fc.forward(&to_tokens(f2)?)?;
        let attn =
            self.attention(&self.norm_q.forward(&t1)?, &self.norm_kv.forward(&t2)?)?;
        let f_hat = f1.add(&self.gamma.mul(&from_tokens(&attn, h, w)?)?)?;

        let hat_tokens = self.norm_ffn.forward(&to_tokens(&f_hat)?)?;
        let ffn = self.ffn_fc2.forward(&self.ffn_fc1.forward(&hat_tokens)?.relu())?;
        Ok(f_hat.add(&self.tau.mul(&from_tokens(&ffn, h, w)?)?)?)
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        self.fc.params_into(&format!("{prefix}.fc"), out);
        self.wq.params_into(&format!("{prefix}.wq"), out);
        self.wk.params_into(&format!("{prefix}.wk"), out);
        self.wv.params_into(&format!("{prefix}.wv"), out);
        self.ffn_fc1.params_into(&format!("{prefix}.ffn_fc1"), out);
        self.ffn_fc2.params_into(&format!("{prefix}.ffn_fc2"), out);
        self.norm_q.params_into(&format!("{prefix}.norm_q"), out);
        self.norm_kv.params_into(&format!("{prefix}.norm_kv"), out);
        self.norm_ffn.params_into(&format!("{prefix}.norm_ffn"), out);
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.tau"), self.tau.clone()));
    }
}

// ---------------------------------------------------------------------------
// Cross-domain mapping
// ---------------------------------------------------------------------------

/// One aligned concept: a Branch 2 (level, class) that constrains a
/// Branch 1 (level, class).
#[derive(Debug, Clone)]
pub struct CdsaEntry {
    pub node: String,
    pub branch2_level: usize,
    pub branch2_class: usize,
    pub branch1_level: usize,
    pub branch1_class: usize,
}

#[derive(Debug, Clone)]
pub struct CdsaMapping {
    pub entries: Vec<CdsaEntry>,
}

#[derive(Deserialize)]
struct MappingDoc {
    node: String,
    branch2_level: String,
    branch2_class: String,
    branch1_level: String,
    branch1_class: String,
}

impl CdsaMapping {
    /// Parse and resolve a mapping document against both hierarchies.
    pub fn from_json(src: &str, branch2: &Hierarchy, branch1: &Hierarchy) -> Result<CdsaMapping> {
        let docs: Vec<MappingDoc> = serde_json::from_str(src)
            .map_err(|e| TransferError::Mapping(format!("parse error: {e}")))?;
        let mut entries = Vec::with_capacity(docs.len());
        for d in docs {
            let resolve = |h: &Hierarchy, level: &str, class: &str, side: &str| -> Result<(usize, usize)> {
                let li = h.level_index(level).ok_or_else(|| {
                    TransferError::Mapping(format!("{side} level {level:?} not found"))
                })?;
                let ci = h.class_index(li, class).ok_or_else(|| {
                    TransferError::Mapping(format!("{side} class {class:?} not at level {level}"))
                })?;
                Ok((li, ci))
            };
            let (b2l, b2c) = resolve(branch2, &d.branch2_level, &d.branch2_class, "branch2")?;
            let (b1l, b1c) = resolve(branch1, &d.branch1_level, &d.branch1_class, "branch1")?;
            if entries.iter().any(|e: &CdsaEntry| e.node == d.node) {
                return Err(TransferError::Mapping(format!(
                    "node {:?} mapped more than once",
                    d.node
                )));
            }
            if b1l + 1 == branch1.num_levels() {
                return Err(TransferError::Mapping(format!(
                    "node {:?} targets the finest level, which always passes through",
                    d.node
                )));
            }
            entries.push(CdsaEntry {
                node: d.node,
                branch2_level: b2l,
                branch2_class: b2c,
                branch1_level: b1l,
                branch1_class: b1c,
            });
        }
        Ok(CdsaMapping { entries })
    }
}

/// Soft ROI masks from frozen-branch logits, one `[B,1,H,W]` per entry.
///
/// Each mask is the softmax probability (over the mapped level's classes)
/// of the mapped class.
pub fn cdsa_masks(branch2_logits: &[Tensor], mapping: &CdsaMapping) -> Result<Vec<Tensor>> {
    let mut masks = Vec::with_capacity(mapping.entries.len());
    for e in &mapping.entries {
        let logits = branch2_logits.get(e.branch2_level).ok_or_else(|| {
            TransferError::Mapping(format!("node {:?}: branch2 level out of range", e.node))
        })?;
        let c = logits.shape()[1];
        if e.branch2_class >= c {
            return Err(TransferError::Mapping(format!(
                "node {:?}: class {} out of {c} channels",
                e.node, e.branch2_class
            )));
        }
        let probs = logits.softmax(1)?;
        masks.push(probs.slice_channels(e.branch2_class, e.branch2_class + 1)?);
    }
    Ok(masks)
}

/// Multiply each mapped channel of the head inputs by its soft mask.
///
/// Unmapped channels and unmapped levels (always including the finest) are
/// returned bit-for-bit unchanged.
pub fn cdsa_fuse(
    z_in: &[Tensor],
    masks: &[Tensor],
    mapping: &CdsaMapping,
) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = z_in.to_vec();
    for (e, mask) in mapping.entries.iter().zip(masks) {
        let z = &out[e.branch1_level];
        let c = z.shape()[1];
        if e.branch1_class >= c {
            return Err(TransferError::Mapping(format!(
                "node {:?}: branch1 class {} out of {c} channels",
                e.node, e.branch1_class
            )));
        }
        let gated = z
            .slice_channels(e.branch1_class, e.branch1_class + 1)?
            .mul(mask)?;
        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        if e.branch1_class > 0 {
            parts.push(z.slice_channels(0, e.branch1_class)?);
        }
        parts.push(gated);
        if e.branch1_class + 1 < c {
            parts.push(z.slice_channels(e.branch1_class + 1, c)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        out[e.branch1_level] = Tensor::concat_channels(&refs)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The dual-branch model
// ---------------------------------------------------------------------------

pub struct TransLuModel {
    /// Trainable target-task branch.
    pub branch1: ToySegNet,
    /// Frozen source-task branch.
    pub branch2: ToySegNet,
    bius: Vec<BranchInteractionUnit>,
    /// Per-stage fusion scalars (w1, w2), initialized to (1, 0).
    fusion: Vec<(Tensor, Tensor)>,
    pub cdks: bool,
    pub cdsa: Option<CdsaMapping>,
}

impl TransLuModel {
    /// Assemble the dual-branch model. Branch 2 is frozen here; both
    /// branches must be hierarchical and share the encoder stage layout
    /// when knowledge sharing is on.
    pub fn new(
        r: &mut rng::Stream,
        branch1: ToySegNet,
        branch2: ToySegNet,
        cdks: bool,
        cdsa: Option<CdsaMapping>,
        biu_bias: bool,
    ) -> Result<TransLuModel> {
        if matches!(branch1.head, Head::Flat(_)) {
            return Err(TransferError::FlatBranch { branch: 1 });
        }
        if matches!(branch2.head, Head::Flat(_)) {
            return Err(TransferError::FlatBranch { branch: 2 });
        }
        let (w1, w2) = (&branch1.config().widths, &branch2.config().widths);
        if w1.len() != w2.len() {
            return Err(TransferError::StageCount { b1: w1.len(), b2: w2.len() });
        }
        if cdks && w1 != w2 {
            return Err(TransferError::StageWidths { b1: w1.clone(), b2: w2.clone() });
        }
        let bius = w1
            .iter()
            .zip(w2)
            .map(|(&c1, &c2)| BranchInteractionUnit::new(r, c1, c2, biu_bias))
            .collect();
        let fusion = w1
            .iter()
            .map(|_| (Tensor::param_scalar(1.0), Tensor::param_scalar(0.0)))
            .collect();
        branch2.set_frozen(true);
        Ok(TransLuModel { branch1, branch2, bius, fusion, cdks, cdsa })
    }

    pub fn interaction_units(&self) -> &[BranchInteractionUnit] {
        &self.bius
    }

    pub fn fusion_scalars(&self) -> &[(Tensor, Tensor)] {
        &self.fusion
    }

    /// Frozen-branch logits for an input.
    pub fn branch2_logits(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.branch2.forward_hiera(img)?)
    }

    /// Full dual-branch forward: `(branch1 logits, branch2 logits)`.
    pub fn forward(&self, img: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let f2_stages = self.branch2.encode(img)?;
        let b2_feat = self.branch2.decode(f2_stages.last().expect("stages"))?;
        let b2_logits = match &self.branch2.head {
            Head::Hiera(head) => head.forward(&b2_feat)?,
            Head::Flat(_) => unreachable!("validated hierarchical at construction"),
        };

        let mut x = img.clone();
        for (stage, f2) in f2_stages.iter().enumerate() {
            x = self.branch1.encode_stage(stage, &x)?;
            if self.cdks {
                x = self.bius[stage].forward(&x, f2)?;
                let (w1, w2) = &self.fusion[stage];
                x = w1.mul(&x)?.add(&w2.mul(f2)?)?;
            }
        }
        let feat = self.branch1.decode(&x)?;
        let head = match &self.branch1.head {
            Head::Hiera(head) => head,
            Head::Flat(_) => unreachable!("validated hierarchical at construction"),
        };
        let mut z_in = head.project(&feat)?;
        if let Some(mapping) = &self.cdsa {
            let masks = cdsa_masks(&b2_logits, mapping)?;
            z_in = cdsa_fuse(&z_in, &masks, mapping)?;
        }
        let b1_logits = head.fuse(&z_in)?;
        Ok((b1_logits, b2_logits))
    }

    /// Parameters the transfer optimizer trains: Branch 1, the interaction
    /// units, and the fusion scalars. Errors if any of them aliases a
    /// frozen-branch parameter or if Branch 2 is not fully frozen.
    pub fn trainable_params(&self) -> Result<NamedParams> {
        if !self.branch2.is_frozen() {
            return Err(TransferError::Branch2NotFrozen);
        }
        let mut out = NamedParams::new();
        for (name, p) in self.branch1.params() {
            out.push((format!("branch1.{name}"), p));
        }
        for (i, biu) in self.bius.iter().enumerate() {
            biu.params_into(&format!("biu.{i}"), &mut out);
        }
        for (i, (w1, w2)) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.{i}.w1"), w1.clone()));
            out.push((format!("fusion.{i}.w2"), w2.clone()));
        }
        for (name, p) in &out {
            for (_, frozen) in self.branch2.params() {
                if p.same_storage(&frozen) {
                    return Err(TransferError::FrozenParamInOptimizer { name: name.clone() });
                }
            }
        }
        Ok(out)
    }
}

/// Train Branch 1 (plus interaction units and fusion scalars) on a target
/// dataset; Branch 2 stays untouched.
pub fn transfer_train(
    model: &TransLuModel,
    ds: &crate::datagen::Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    use rand::Rng;

    if ds.samples.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let params = model.trainable_params()?;
    let tensors: Vec<Tensor> = params.into_iter().map(|(_, p)| p).collect();
    let mut opt = Sgd::new(tensors, cfg.lr, cfg.momentum)?;
    let mut batches = rng::stream(cfg.seed, "transfer-batches");
    let mut log = TrainLog::default();

    for it in 0..cfg.iterations {
        let indices: Vec<usize> =
            (0..cfg.batch).map(|_| batches.gen_range(0..ds.samples.len())).collect();
        let (image, labels) = crate::train::batch_of(ds, &indices);
        let (logits, _) = model.forward(&image)?;
        let loss = crate::train::batch_loss(&logits, &labels, cfg.loss, &cfg.loss_cfg)
            .map_err(TransferError::Train)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NumericalFailure { iteration: it, loss: value }.into());
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

/// Build a Branch 1 network for the target hierarchy, copying the source
/// network's encoder and decoder weights. The head cannot transfer (its
/// widths follow the target tree) and initializes fresh from `r`.
pub fn branch1_from_branch2(
    branch2: &ToySegNet,
    target: &Hierarchy,
    fusion: crate::bhccm::FusionMode,
    r: &mut rng::Stream,
) -> ToySegNet {
    let head = crate::bhccm::HeadSpec::for_hierarchy(target, fusion);
    let branch1 = ToySegNet::new(r, branch2.config().clone(), &head);
    let source: std::collections::BTreeMap<String, Tensor> =
        branch2.params().into_iter().collect();
    for (name, p) in branch1.params() {
        if name.starts_with("enc.") || name.starts_with("dec.") {
            if let Some(src) = source.get(&name) {
                p.set_data(&src.to_vec());
            }
        }
    }
    branch1
}

/// Score the dual-branch model's Branch 1 predictions on a dataset.
pub fn evaluate_translu(
    model: &TransLuModel,
    ds: &crate::datagen::Dataset,
    mode: crate::train::DecodeMode,
) -> Result<crate::train::EvalReport> {
    let mut failure: Option<TransferError> = None;
    let report = crate::train::evaluate_with(
        &mut |img| match model.forward(img) {
            Ok((logits, _)) => Ok(logits),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(TrainError::Tensor(TensorError::Invalid {
                    op: "translu_forward",
                    msg,
                }))
            }
        },
        ds,
        mode,
    );
    match (report, failure) {
        (Ok(r), _) => Ok(r),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bhccm::{FusionMode, HeadSpec, SegNetConfig};
    use crate::datagen::{generate, make_crop_target, SceneSpec};
    use crate::hierarchy::samples as hdocs;
    use crate::train::{evaluate, DecodeMode, TrainConfig};
    use rand::Rng;

    fn mm5b() -> Hierarchy {
        Hierarchy::from_json(hdocs::MM5B_JSON).unwrap()
    }

    fn crop_tree() -> Hierarchy {
        Hierarchy::from_json(hdocs::CROP_JSON).unwrap()
    }

    fn random_input(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::stream(seed, "translu-test");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    fn small_cfg() -> SegNetConfig {
        SegNetConfig { in_channels: 4, widths: vec![6, 12], c_dim: 8, dec_kernel: 1 }
    }

    fn small_branch(seed: u64, h: &Hierarchy) -> ToySegNet {
        ToySegNet::new(
            &mut rng::stream(seed, "branch"),
            small_cfg(),
            &HeadSpec::for_hierarchy(h, FusionMode::Bidirectional),
        )
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn fresh_unit_is_the_identity_on_branch1() {
        let mut r = rng::stream(1, "biu");
        let biu = BranchInteractionUnit::new(&mut r, 8, 8, true);
        let f1 = random_input(2, &[2, 8, 4, 4]);
        let f2 = random_input(3, &[2, 8, 4, 4]);
        let out = biu.forward(&f1, &f2).unwrap();
        assert_eq!(bits(&out.to_vec()), bits(&f1.to_vec()));
    }

    #[test]
    fn zero_branch2_features_contribute_nothing_without_biases() {
        let mut r = rng::stream(4, "biu");
        let biu = BranchInteractionUnit::new(&mut r, 8, 8, false);
        biu.gamma.set_data(&[1.0]);
        let f1 = random_input(5, &[1, 8, 4, 4]);
        let f2 = Tensor::zeros(&[1, 8, 4, 4]);
        let out = biu.forward(&f1, &f2).unwrap();
        // Values are all zero, so the attention output vanishes and the
        // residual returns f1 exactly (tau stays 0).
        assert_eq!(bits(&out.to_vec()), bits(&f1.to_vec()));
    }

    #[test]
    fn unit_matches_a_scalar_reimplementation() {
        let mut r = rng::stream(6, "biu");
        let c = 16;
        let biu = BranchInteractionUnit::new(&mut r, c, c, true);
        biu.gamma.set_data(&[0.5]);
        biu.tau.set_data(&[0.5]);
        let f1 = random_input(7, &[1, c, 4, 4]);
        let f2 = random_input(8, &[1, c, 4, 4]);
        let got = biu.forward(&f1, &f2).unwrap().to_vec();

        // Scalar re-derivation of the two gated residual steps.
        let t = 16usize; // tokens
        let tokens_of = |x: &Tensor| -> Vec<Vec<f64>> {
            let d = x.to_vec();
            (0..t)
                .map(|tok| (0..c).map(|ch| d[ch * t + tok]).collect())
                .collect()
        };
        let lin = |w: &Linear, x: &[f64]| -> Vec<f64> {
            let wd = w.weight.to_vec();
            let (ci, co) = (w.weight.shape()[0], w.weight.shape()[1]);
            let mut out = vec![0.0; co];
            for o in 0..co {
                for i in 0..ci {
                    out[o] += x[i] * wd[i * co + o];
                }
                if let Some(b) = &w.bias {
                    out[o] += b.to_vec()[o];
                }
            }
            out
        };
        let ln = |n: &LayerNorm, x: &[f64]| -> Vec<f64> {
            let g = n.gamma.to_vec();
            let b = n.beta.to_vec();
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (var + n.eps).sqrt();
            x.iter().enumerate().map(|(i, v)| (v - mu) * inv * g[i] + b[i]).collect()
        };

        let t1 = tokens_of(&f1);
        let t2 = tokens_of(&f2);
        let q_in: Vec<Vec<f64>> = t1.iter().map(|v| ln(&biu.norm_q, v)).collect();
        let kv_in: Vec<Vec<f64>> =
            t2.iter().map(|v| ln(&biu.norm_kv, &lin(&biu.fc, v))).collect();
        let qs: Vec<Vec<f64>> = q_in.iter().map(|v| lin(&biu.wq, v)).collect();
        let ks: Vec<Vec<f64>> = kv_in.iter().map(|v| lin(&biu.wk, v)).collect();
        let vs: Vec<Vec<f64>> = kv_in.iter().map(|v| lin(&biu.wv, v)).collect();
        let scale = 1.0 / (c as f64).sqrt();
        let mut f_hat = vec![vec![0.0; c]; t];
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..c {
                let attn: f64 = (0..t).map(|j| exps[j] / z * vs[j][ch]).sum();
                f_hat[i][ch] = t1[i][ch] + 0.5 * attn;
            }
        }
        let mut want = vec![0.0; c * t];
        for i in 0..t {
            let hidden = lin(&biu.ffn_fc1, &ln(&biu.norm_ffn, &f_hat[i]));
            let hidden: Vec<f64> = hidden.iter().map(|v| v.max(0.0)).collect();
            let ffn = lin(&biu.ffn_fc2, &hidden);
            for ch in 0..c {
                want[ch * t + i] = f_hat[i][ch] + 0.5 * ffn[ch];
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn unit_rejects_grid_mismatch() {
        let mut r = rng::stream(9, "biu");
        let biu = BranchInteractionUnit::new(&mut r, 4, 4, true);
        let f1 = Tensor::zeros(&[1, 4, 4, 4]);
        let f2 = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(matches!(biu.forward(&f1, &f2), Err(TransferError::TokenCount { .. })));
    }

    #[test]
    fn mapping_parses_and_validates() {
        let b2 = mm5b();
        let b1 = crop_tree();
        let m = CdsaMapping::from_json(samples::CROP_MAPPING_JSON, &b2, &b1).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].node, "vegetation");
        assert_eq!(m.entries[0].branch2_level, 0);
        assert_eq!(m.entries[1].branch1_level, 1);

        // Unknown class name.
        let bad = r#"[{"node":"x","branch2_level":"L1","branch2_class":"nope",
                       "branch1_level":"L1","branch1_class":"vegetation"}]"#;
        assert!(CdsaMapping::from_json(bad, &b2, &b1).is_err());

        // Mapping the finest level is rejected.
        let bad = r#"[{"node":"rice","branch2_level":"L3","branch2_class":"paddy field",
                       "branch1_level":"L3","branch1_class":"rice"}]"#;
        assert!(CdsaMapping::from_json(bad, &b2, &b1).is_err());
    }

    #[test]
    fn masks_follow_softmax_saturation_and_symmetry() {
        let b2 = mm5b();
        let b1 = crop_tree();
        let mapping = CdsaMapping::from_json(samples::CROP_MAPPING_JSON, &b2, &b1).unwrap();
        let veg = b2.class_index(0, "vegetation").unwrap();

        // +20 on vegetation everywhere: mask saturates toward 1.
        let mut l1 = vec![0.0; 4 * 4];
        for s in 0..4 {
            l1[veg * 4 + s] = 20.0;
        }
        let logits = vec![
            Tensor::from_vec(l1, &[1, 4, 2, 2]).unwrap(),
            Tensor::zeros(&[1, 9, 2, 2]),
            Tensor::zeros(&[1, 18, 2, 2]),
        ];
        let masks = cdsa_masks(&logits, &mapping).unwrap();
        assert!(masks[0].to_vec().iter().all(|&v| v > 1.0 - 1e-6));

        // All-zero level-1 logits: mask is exactly 1/4.
        let zeros = vec![
            Tensor::zeros(&[1, 4, 2, 2]),
            Tensor::zeros(&[1, 9, 2, 2]),
            Tensor::zeros(&[1, 18, 2, 2]),
        ];
        let masks = cdsa_masks(&zeros, &mapping).unwrap();
        for &v in masks[0].to_vec().iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        // Random logits: mask equals a scalar softmax oracle channel.
        let rnd = random_input(10, &[1, 4, 3, 3]);
        let logits = vec![
            rnd.clone(),
            Tensor::zeros(&[1, 9, 3, 3]),
            Tensor::zeros(&[1, 18, 3, 3]),
        ];
        let masks = cdsa_masks(&logits, &mapping).unwrap();
        let d = rnd.to_vec();
        let got = masks[0].to_vec();
        for s in 0..9 {
            let vals: Vec<f64> = (0..4).map(|ch| d[ch * 9 + s]).collect();
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
            let want = (vals[veg] - mx).exp() / z;
            assert!((got[s] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_touches_only_mapped_channels() {
        let b2 = mm5b();
        let b1 = crop_tree();
        let mapping = CdsaMapping::from_json(samples::CROP_MAPPING_JSON, &b2, &b1).unwrap();
        let z_in = vec![
            random_input(11, &[1, 2, 3, 3]),
            random_input(12, &[1, 2, 3, 3]),
            random_input(13, &[1, 4, 3, 3]),
        ];
        let veg_b1 = b1.class_index(0, "vegetation").unwrap();

        // Mask of ones: identity.
        let ones = vec![Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::full(&[1, 1, 3, 3], 1.0)];
        let fused = cdsa_fuse(&z_in, &ones, &mapping).unwrap();
        for (a, b) in fused.iter().zip(&z_in) {
            assert_eq!(bits(&a.to_vec()), bits(&b.to_vec()));
        }

        // Mask of zeros on vegetation: that channel dies, others untouched.
        let zeros = vec![Tensor::zeros(&[1, 1, 3, 3]), Tensor::full(&[1, 1, 3, 3], 1.0)];
        let fused = cdsa_fuse(&z_in, &zeros, &mapping).unwrap();
        let got = fused[0].to_vec();
        let src = z_in[0].to_vec();
        for s in 0..9 {
            assert_eq!(got[veg_b1 * 9 + s], 0.0);
            let other = 1 - veg_b1;
            assert_eq!(got[other * 9 + s].to_bits(), src[other * 9 + s].to_bits());
        }
        // The finest level is always untouched.
        assert_eq!(bits(&fused[2].to_vec()), bits(&z_in[2].to_vec()));

        // Random masks: per-channel recomposition oracle.
        let m0 = random_input(14, &[1, 1, 3, 3]).sigmoid();
        let m1 = random_input(15, &[1, 1, 3, 3]).sigmoid();
        let fused = cdsa_fuse(&z_in, &[m0.clone(), m1.clone()], &mapping).unwrap();
        let (md0, src0) = (m0.to_vec(), z_in[0].to_vec());
        let got = fused[0].to_vec();
        for s in 0..9 {
            let want = src0[veg_b1 * 9 + s] * md0[s];
            assert!((got[veg_b1 * 9 + s] - want).abs() < 1e-12);
        }
        let (md1, src1) = (m1.to_vec(), z_in[1].to_vec());
        let got = fused[1].to_vec();
        let crop_b1 = b1.class_index(1, "cropland").unwrap();
        for s in 0..9 {
            let want = src1[crop_b1 * 9 + s] * md1[s];
            assert!((got[crop_b1 * 9 + s] - want).abs() < 1e-12);
        }
    }

    fn crop_task(images: usize, seed: u64) -> crate::datagen::Dataset {
        let src_h = mm5b();
        let crop_h = crop_tree();
        let mut spec = SceneSpec::for_hierarchy(&src_h);
        spec.size = 16;
        spec.regions = 6;
        make_crop_target(&src_h, &spec, &crop_h, 0.6, images, seed).unwrap()
    }

    fn pretrained_branch2(seed: u64) -> ToySegNet {
        let h = mm5b();
        let mut spec = SceneSpec::for_hierarchy(&h);
        spec.size = 16;
        spec.regions = 6;
        let ds = generate(&h, &spec, 4, seed).unwrap();
        let cfg = TrainConfig::new(h.num_levels(), 30, seed);
        let head = HeadSpec::for_hierarchy(&h, FusionMode::Bidirectional);
        let (net, _) = crate::train::train_stage1(&ds, small_cfg(), &head, &cfg).unwrap();
        net
    }

    #[test]
    fn zero_init_model_reproduces_standalone_branch1() {
        let b2 = pretrained_branch2(100);
        let b1 = small_branch(101, &crop_tree());
        let img = random_input(102, &[1, 4, 16, 16]);
        let standalone = b1.forward_hiera(&img).unwrap();

        let model = TransLuModel::new(
            &mut rng::stream(103, "translu"),
            b1,
            b2,
            true,
            None,
            true,
        )
        .unwrap();
        let (with_cdks, _) = model.forward(&img).unwrap();
        for (a, b) in with_cdks.iter().zip(&standalone) {
            assert_eq!(bits(&a.to_vec()), bits(&b.to_vec()));
        }

        // CDKS off takes a different code path but the same values.
        let b1_again = small_branch(101, &crop_tree());
        let model_off = TransLuModel::new(
            &mut rng::stream(104, "translu"),
            b1_again,
            pretrained_branch2(100),
            false,
            None,
            true,
        )
        .unwrap();
        let (without_cdks, _) = model_off.forward(&img).unwrap();
        for (a, b) in with_cdks.iter().zip(&without_cdks) {
            assert_eq!(bits(&a.to_vec()), bits(&b.to_vec()));
        }
    }

    #[test]
    fn gradients_skip_branch2_and_reach_the_units() {
        let model = TransLuModel::new(
            &mut rng::stream(105, "translu"),
            small_branch(106, &crop_tree()),
            pretrained_branch2(107),
            true,
            None,
            true,
        )
        .unwrap();
        let ds = crop_task(4, 108);
        let (image, labels) = crate::train::batch_of(&ds, &[0, 1]);
        let (logits, _) = model.forward(&image).unwrap();
        let cfg = TrainConfig::new(3, 1, 109);
        let loss =
            crate::train::batch_loss(&logits, &labels, cfg.loss, &cfg.loss_cfg).unwrap();
        loss.backward().unwrap();

        for (name, p) in model.branch2.params() {
            assert!(p.grad().is_none(), "frozen parameter {name} received a gradient");
        }
        let mut any_biu_grad = false;
        for (i, biu) in model.interaction_units().iter().enumerate() {
            let mut params = NamedParams::new();
            biu.params_into(&format!("biu.{i}"), &mut params);
            for (_, p) in params {
                if let Some(g) = p.grad() {
                    if g.iter().any(|&v| v != 0.0) {
                        any_biu_grad = true;
                    }
                }
            }
        }
        assert!(any_biu_grad, "no interaction-unit parameter received a gradient");
    }

    #[test]
    fn transfer_training_leaves_branch2_bit_identical() {
        let model = TransLuModel::new(
            &mut rng::stream(110, "translu"),
            small_branch(111, &crop_tree()),
            pretrained_branch2(112),
            true,
            Some(
                CdsaMapping::from_json(samples::CROP_MAPPING_JSON, &mm5b(), &crop_tree())
                    .unwrap(),
            ),
            true,
        )
        .unwrap();
        let held_out = random_input(113, &[1, 4, 16, 16]);
        let before: Vec<Vec<u64>> = model
            .branch2_logits(&held_out)
            .unwrap()
            .iter()
            .map(|t| bits(&t.to_vec()))
            .collect();

        let ds = crop_task(4, 114);
        let mut cfg = TrainConfig::new(3, 25, 115);
        cfg.lr = 0.05;
        let log = transfer_train(&model, &ds, &cfg).unwrap();
        assert_eq!(log.losses.first().map(|l| l.0), Some(0));

        let after: Vec<Vec<u64>> = model
            .branch2_logits(&held_out)
            .unwrap()
            .iter()
            .map(|t| bits(&t.to_vec()))
            .collect();
        assert_eq!(before, after);

        // Zero-iteration runs change nothing and log nothing.
        let before_params: Vec<Vec<f64>> =
            model.branch1.params().iter().map(|(_, p)| p.to_vec()).collect();
        let cfg0 = TrainConfig::new(3, 0, 116);
        let log0 = transfer_train(&model, &ds, &cfg0).unwrap();
        assert!(log0.losses.is_empty());
        let after_params: Vec<Vec<f64>> =
            model.branch1.params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before_params, after_params);
    }

    #[test]
    fn unfrozen_branch2_is_a_hard_error() {
        let model = TransLuModel::new(
            &mut rng::stream(117, "translu"),
            small_branch(118, &crop_tree()),
            pretrained_branch2(119),
            true,
            None,
            true,
        )
        .unwrap();
        model.branch2.set_frozen(false);
        assert!(matches!(model.trainable_params(), Err(TransferError::Branch2NotFrozen)));
        let ds = crop_task(2, 120);
        let cfg = TrainConfig::new(3, 1, 121);
        assert!(transfer_train(&model, &ds, &cfg).is_err());
    }

    #[test]
    fn cdsa_changes_the_forward_but_keeps_shapes() {
        let mapping =
            CdsaMapping::from_json(samples::CROP_MAPPING_JSON, &mm5b(), &crop_tree()).unwrap();
        let b1 = small_branch(122, &crop_tree());
        let b2 = pretrained_branch2(123);
        let img = random_input(124, &[1, 4, 16, 16]);

        let model = TransLuModel::new(
            &mut rng::stream(125, "translu"),
            b1,
            b2,
            true,
            Some(mapping),
            true,
        )
        .unwrap();
        let (logits, b2_logits) = model.forward(&img).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(logits[0].shape(), vec![1, 2, 16, 16]);
        assert_eq!(logits[2].shape(), vec![1, 4, 16, 16]);
        assert_eq!(b2_logits.len(), 3);
        assert_eq!(b2_logits[2].shape(), vec![1, 18, 16, 16]);

        let report = evaluate_translu(&model, &crop_task(3, 126), DecodeMode::Jsps).unwrap();
        assert_eq!(report.consistency_rate, 1.0);
        assert_eq!(report.levels.len(), 3);
        // Branch 1 standalone still evaluates (sanity on the harness).
        let standalone = evaluate(&model.branch1, &crop_task(3, 126), DecodeMode::Jsps).unwrap();
        assert_eq!(standalone.levels.len(), 3);
    }
}
