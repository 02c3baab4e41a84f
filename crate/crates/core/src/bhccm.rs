//! The bidirectional hierarchical consistency head and its host network.
//!
//! The head replaces a flat classifier's final projection. Per-level 1x1
//! convolutions first map decoder features to one logit map per hierarchy
//! level. A coarse-to-fine pass then mixes each level with merged versions
//! of all coarser levels, and a fine-to-coarse pass mixes each level with
//! merged versions of all finer ones:
//!
//! ```text
//! mid[0] = in[0]
//! mid[j] = sum_{i<j} W[i][j] * MB(in[i])  + W[j][j] * in[j]
//! out[L-1] = mid[L-1]
//! out[i]   = sum_{j>i} Y[j][i] * MB(mid[j]) + Y[i][i] * mid[i]
//! ```
//!
//! Merging blocks (MB) carry features across channel widths: a shared
//! two-layer perceptron over global average- and max-pooled vectors forms a
//! channel attention map at the target width, channel-wise pooling plus a
//! 3x3 convolution forms a spatial attention map, and a 1x1 alignment
//! convolution brings the features themselves to the target width before
//! both gates multiply in.
//!
//! Cross weights start at zero and self weights at one, so a freshly built
//! head is exactly the stack of flat per-level projections.

use thiserror::Error;

use crate::hierarchy::Hierarchy;
use crate::nn::{Conv2d, Linear, NamedParams};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("head expects {want} decoder channels, got {got}")]
    DecoderChannels { got: usize, want: usize },
    #[error("head has {got} levels, hierarchy defines {want}")]
    LevelCount { got: usize, want: usize },
    #[error("input has {got} channels, network expects {want}")]
    InputChannels { got: usize, want: usize },
    #[error("{head} head does not provide this forward pass")]
    WrongHead { head: &'static str },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which cross-level connections a head carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Independent per-level projections only.
    None,
    /// Coarse levels feed finer ones.
    CoarseToFine,
    /// Fine levels feed coarser ones.
    FineToCoarse,
    /// Both directions.
    #[default]
    Bidirectional,
}

impl FusionMode {
    pub fn coarse_to_fine(self) -> bool {
        matches!(self, FusionMode::CoarseToFine | FusionMode::Bidirectional)
    }

    pub fn fine_to_coarse(self) -> bool {
        matches!(self, FusionMode::FineToCoarse | FusionMode::Bidirectional)
    }

    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "none" => Some(FusionMode::None),
            "c2f" => Some(FusionMode::CoarseToFine),
            "f2c" => Some(FusionMode::FineToCoarse),
            "bidirectional" | "bidir" => Some(FusionMode::Bidirectional),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::CoarseToFine => "c2f",
            FusionMode::FineToCoarse => "f2c",
            FusionMode::Bidirectional => "bidirectional",
        }
    }
}

/// Channel + spatial attention unit that also aligns channel widths.
pub struct MergingBlock {
    pub c_src: usize,
    pub c_tgt: usize,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
    spatial: Conv2d,
    align: Conv2d,
}

impl MergingBlock {
    pub fn new(r: &mut rng::Stream, c_src: usize, c_tgt: usize, bias: bool) -> MergingBlock {
        let hidden = (c_src / 2).max(4);
        MergingBlock {
            c_src,
            c_tgt,
            mlp_fc1: Linear::new(r, c_src, hidden, bias),
            mlp_fc2: Linear::new(r, hidden, c_tgt, bias),
            spatial: Conv2d::new(r, 2, 1, 3, bias),
            align: Conv2d::new(r, c_src, c_tgt, 1, bias),
        }
    }

    fn mlp(&self, pooled: &Tensor) -> Result<Tensor> {
        // [B,C,1,1] -> [B,C] -> perceptron -> [B,C_tgt,1,1]
        let b = pooled.shape()[0];
        let flat = pooled.reshape(&[b, self.c_src])?;
        let hidden = self.mlp_fc1.forward(&flat)?.relu();
        let out = self.mlp_fc2.forward(&hidden)?;
        Ok(out.reshape(&[b, self.c_tgt, 1, 1])?)
    }

    /// Gate aligned features by channel and spatial attention.
    pub fn merge(&self, x: &Tensor) -> Result<Tensor> {
        let got = x.shape()[1];
        if got != self.c_src {
            return Err(ModelError::DecoderChannels { got, want: self.c_src });
        }
        let ca_pre = self.mlp(&x.global_avg_pool()?)?.add(&self.mlp(&x.global_max_pool()?)?)?;
        let channel_attn = ca_pre.sigmoid();
        let pooled =
            Tensor::concat_channels(&[&x.channel_avg_pool()?, &x.channel_max_pool()?])?;
        let spatial_attn = self.spatial.forward(&pooled)?.sigmoid();
        let aligned = self.align.forward(x)?;
        Ok(aligned.mul(&channel_attn)?.mul(&spatial_attn)?)
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        self.mlp_fc1.params_into(&format!("{prefix}.mlp_fc1"), out);
        self.mlp_fc2.params_into(&format!("{prefix}.mlp_fc2"), out);
        self.spatial.params_into(&format!("{prefix}.spatial"), out);
        self.align.params_into(&format!("{prefix}.align"), out);
    }
}

/// The multi-level prediction head.
pub struct BhccmHead {
    class_counts: Vec<usize>,
    c_dim: usize,
    fusion: FusionMode,
    proj: Vec<Conv2d>,
    /// Coarse-to-fine blocks and weights, keyed (src, tgt) with src < tgt.
    mb_c2f: Vec<((usize, usize), MergingBlock)>,
    w_cross: Vec<((usize, usize), Tensor)>,
    /// W[j][j] for j >= 1.
    w_self: Vec<Tensor>,
    /// Fine-to-coarse blocks and weights, keyed (src, tgt) with src > tgt.
    mb_f2c: Vec<((usize, usize), MergingBlock)>,
    y_cross: Vec<((usize, usize), Tensor)>,
    /// Y[i][i] for i <= L-2.
    y_self: Vec<Tensor>,
}

impl BhccmHead {
    /// Build a head for the given level sizes. Cross weights start at zero,
    /// self weights at one; `mb_bias` toggles bias terms inside the blocks.
    pub fn new(
        r: &mut rng::Stream,
        c_dim: usize,
        class_counts: &[usize],
        fusion: FusionMode,
        mb_bias: bool,
    ) -> BhccmHead {
        let levels = class_counts.len();
        let proj =
            class_counts.iter().map(|&c| Conv2d::new(r, c_dim, c, 1, true)).collect();

        let mut mb_c2f = Vec::new();
        let mut w_cross = Vec::new();
        let mut w_self = Vec::new();
        if fusion.coarse_to_fine() {
            for j in 1..levels {
                for i in 0..j {
                    mb_c2f.push((
                        (i, j),
                        MergingBlock::new(r, class_counts[i], class_counts[j], mb_bias),
                    ));
                    w_cross.push(((i, j), Tensor::param_scalar(0.0)));
                }
                w_self.push(Tensor::param_scalar(1.0));
            }
        }

        let mut mb_f2c = Vec::new();
        let mut y_cross = Vec::new();
        let mut y_self = Vec::new();
        if fusion.fine_to_coarse() {
            for i in 0..levels.saturating_sub(1) {
                for j in i + 1..levels {
                    mb_f2c.push((
                        (j, i),
                        MergingBlock::new(r, class_counts[j], class_counts[i], mb_bias),
                    ));
                    y_cross.push(((j, i), Tensor::param_scalar(0.0)));
                }
                y_self.push(Tensor::param_scalar(1.0));
            }
        }

        BhccmHead {
            class_counts: class_counts.to_vec(),
            c_dim,
            fusion,
            proj,
            mb_c2f,
            w_cross,
            w_self,
            mb_f2c,
            y_cross,
            y_self,
        }
    }

    pub fn levels(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    /// Count of merging blocks over both directions.
    pub fn cross_block_count(&self) -> usize {
        self.mb_c2f.len() + self.mb_f2c.len()
    }

    fn c2f_block(&self, i: usize, j: usize) -> &MergingBlock {
        &self.mb_c2f.iter().find(|(k, _)| *k == (i, j)).expect("c2f block exists").1
    }

    fn f2c_block(&self, j: usize, i: usize) -> &MergingBlock {
        &self.mb_f2c.iter().find(|(k, _)| *k == (j, i)).expect("f2c block exists").1
    }

    fn w(&self, i: usize, j: usize) -> &Tensor {
        &self.w_cross.iter().find(|(k, _)| *k == (i, j)).expect("cross weight exists").1
    }

    fn y(&self, j: usize, i: usize) -> &Tensor {
        &self.y_cross.iter().find(|(k, _)| *k == (j, i)).expect("cross weight exists").1
    }

    /// Per-level projections of the decoder features (the head inputs).
    pub fn project(&self, dec: &Tensor) -> Result<Vec<Tensor>> {
        let got = dec.shape()[1];
        if got != self.c_dim {
            return Err(ModelError::DecoderChannels { got, want: self.c_dim });
        }
        self.proj.iter().map(|p| Ok(p.forward(dec)?)).collect()
    }

    /// Run the two fusion passes over already-projected level features.
    pub fn fuse(&self, f_in: &[Tensor]) -> Result<Vec<Tensor>> {
        let levels = self.levels();
        if f_in.len() != levels {
            return Err(ModelError::LevelCount { got: f_in.len(), want: levels });
        }

        let mut mid: Vec<Tensor> = Vec::with_capacity(levels);
        for j in 0..levels {
            if j == 0 || !self.fusion.coarse_to_fine() {
                mid.push(f_in[j].clone());
                continue;
            }
            let mut acc: Option<Tensor> = None;
            for i in 0..j {
                let term = self.w(i, j).mul(&self.c2f_block(i, j).merge(&f_in[i])?)?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            let self_term = self.w_self[j - 1].mul(&f_in[j])?;
            mid.push(acc.expect("j > 0 has cross terms").add(&self_term)?);
        }

        let mut out: Vec<Tensor> = Vec::with_capacity(levels);
        for i in 0..levels {
            if i == levels - 1 || !self.fusion.fine_to_coarse() {
                out.push(mid[i].clone());
                continue;
            }
            let mut acc: Option<Tensor> = None;
            for j in i + 1..levels {
                let term = self.y(j, i).mul(&self.f2c_block(j, i).merge(&mid[j])?)?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            let self_term = self.y_self[i].mul(&mid[i])?;
            out.push(acc.expect("i < L-1 has cross terms").add(&self_term)?);
        }
        Ok(out)
    }

    /// Full head: projection then fusion.
    pub fn forward(&self, dec: &Tensor) -> Result<Vec<Tensor>> {
        let f_in = self.project(dec)?;
        self.fuse(&f_in)
    }

    pub fn params_into(&self, prefix: &str, out: &mut NamedParams) {
        for (i, p) in self.proj.iter().enumerate() {
            p.params_into(&format!("{prefix}.proj.{i}"), out);
        }
        for ((i, j), mb) in &self.mb_c2f {
            mb.params_into(&format!("{prefix}.c2f.{i}_{j}"), out);
        }
        for ((i, j), w) in &self.w_cross {
            out.push((format!("{prefix}.w.{i}_{j}"), w.clone()));
        }
        for (j, w) in self.w_self.iter().enumerate() {
            out.push((format!("{prefix}.w.{0}_{0}", j + 1), w.clone()));
        }
        for ((j, i), mb) in &self.mb_f2c {
            mb.params_into(&format!("{prefix}.f2c.{j}_{i}"), out);
        }
        for ((j, i), y) in &self.y_cross {
            out.push((format!("{prefix}.y.{j}_{i}"), y.clone()));
        }
        for (i, y) in self.y_self.iter().enumerate() {
            out.push((format!("{prefix}.y.{0}_{0}", i), y.clone()));
        }
    }
}

/// Head variants a [`ToySegNet`] can carry.
pub enum Head {
    /// Single projection to the finest level's class count.
    Flat(Conv2d),
    Hiera(BhccmHead),
}

/// Architecture knobs for the toy encoder/decoder.
#[derive(Debug, Clone)]
pub struct SegNetConfig {
    pub in_channels: usize,
    /// Encoder stage widths; each stage downsamples 2x.
    pub widths: Vec<usize>,
    /// Decoder output channels fed to the head.
    pub c_dim: usize,
    /// Decoder convolution kernel (1 or 3).
    pub dec_kernel: usize,
}

impl Default for SegNetConfig {
    fn default() -> SegNetConfig {
        SegNetConfig { in_channels: 4, widths: vec![16, 32, 64], c_dim: 32, dec_kernel: 3 }
    }
}

/// What sits on top of the decoder.
#[derive(Debug, Clone)]
pub enum HeadSpec {
    Flat { classes: usize },
    Hiera { class_counts: Vec<usize>, fusion: FusionMode, mb_bias: bool },
}

impl HeadSpec {
    pub fn for_hierarchy(h: &Hierarchy, fusion: FusionMode) -> HeadSpec {
        HeadSpec::Hiera { class_counts: h.class_counts(), fusion, mb_bias: true }
    }
}

/// A small conv encoder/decoder hosting either head.
///
/// Encoder: per stage, 3x3 conv + relu + 2x2 mean pool. Decoder: per stage,
/// bilinear 2x upsample + conv + relu, ending at `c_dim` channels and the
/// input resolution.
pub struct ToySegNet {
    cfg: SegNetConfig,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    pub head: Head,
}

impl ToySegNet {
    pub fn new(r: &mut rng::Stream, cfg: SegNetConfig, head: &HeadSpec) -> ToySegNet {
        let mut enc = Vec::with_capacity(cfg.widths.len());
        let mut c_prev = cfg.in_channels;
        for &wd in &cfg.widths {
            enc.push(Conv2d::new(r, c_prev, wd, 3, true));
            c_prev = wd;
        }
        let mut dec = Vec::with_capacity(cfg.widths.len());
        for s in 0..cfg.widths.len() {
            let c_out =
                if s + 1 == cfg.widths.len() { cfg.c_dim } else { cfg.widths[cfg.widths.len() - 2 - s] };
            dec.push(Conv2d::new(r, c_prev, c_out, cfg.dec_kernel, true));
            c_prev = c_out;
        }
        let head = match head {
            HeadSpec::Flat { classes } => Head::Flat(Conv2d::new(r, cfg.c_dim, *classes, 1, true)),
            HeadSpec::Hiera { class_counts, fusion, mb_bias } => {
                Head::Hiera(BhccmHead::new(r, cfg.c_dim, class_counts, *fusion, *mb_bias))
            }
        };
        ToySegNet { cfg, enc, dec, head }
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn stages(&self) -> usize {
        self.enc.len()
    }

    /// One encoder stage: conv, relu, 2x downsample.
    pub fn encode_stage(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.enc[stage].forward(x)?.relu().avg_pool2()?)
    }

    fn check_input(&self, img: &Tensor) -> Result<()> {
        let got = img.shape()[1];
        if got != self.cfg.in_channels {
            return Err(ModelError::InputChannels { got, want: self.cfg.in_channels });
        }
        Ok(())
    }

    /// All encoder stage outputs, coarse resolution last.
    pub fn encode(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(img)?;
        let mut outs = Vec::with_capacity(self.enc.len());
        let mut x = img.clone();
        for stage in 0..self.enc.len() {
            x = self.encode_stage(stage, &x)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Decode the last stage back to input resolution at `c_dim` channels.
    pub fn decode(&self, last_stage: &Tensor) -> Result<Tensor> {
        let mut x = last_stage.clone();
        for conv in &self.dec {
            x = conv.forward(&x.bilinear_upsample2()?)?.relu();
        }
        Ok(x)
    }

    /// Decoder features for an input image.
    pub fn features(&self, img: &Tensor) -> Result<Tensor> {
        let stages = self.encode(img)?;
        self.decode(stages.last().expect("at least one stage"))
    }

    /// Logits per level: one tensor for a flat head, L for a hierarchical one.
    pub fn forward_levels(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let feat = self.features(img)?;
        match &self.head {
            Head::Flat(proj) => Ok(vec![proj.forward(&feat)?]),
            Head::Hiera(head) => head.forward(&feat),
        }
    }

    /// Single-level logits from a flat head.
    pub fn forward_flat(&self, img: &Tensor) -> Result<Tensor> {
        match &self.head {
            Head::Flat(_) => Ok(self.forward_levels(img)?.remove(0)),
            Head::Hiera(_) => Err(ModelError::WrongHead { head: "hierarchical" }),
        }
    }

    /// Per-level logits from a hierarchical head.
    pub fn forward_hiera(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        match &self.head {
            Head::Flat(_) => Err(ModelError::WrongHead { head: "flat" }),
            Head::Hiera(_) => self.forward_levels(img),
        }
    }

    pub fn params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            c.params_into(&format!("enc.{i}"), &mut out);
        }
        for (i, c) in self.dec.iter().enumerate() {
            c.params_into(&format!("dec.{i}"), &mut out);
        }
        match &self.head {
            Head::Flat(p) => p.params_into("head.flat", &mut out),
            Head::Hiera(h) => h.params_into("head", &mut out),
        }
        out
    }

    /// Mark every parameter frozen (or trainable again).
    pub fn set_frozen(&self, frozen: bool) {
        for (_, p) in self.params() {
            p.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|(_, p)| !p.requires_grad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_input(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::stream(seed, "bhccm-test");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    fn identity_conv1x1(c: usize) -> Vec<f64> {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        w
    }

    #[test]
    fn merge_of_zero_is_zero_without_bias() {
        let mut r = rng::stream(1, "mb");
        let mb = MergingBlock::new(&mut r, 4, 6, false);
        let x = Tensor::zeros(&[1, 4, 3, 3]);
        let y = mb.merge(&x).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_attention_with_identity_alignment_passes_through() {
        let mut r = rng::stream(2, "mb");
        let mb = MergingBlock::new(&mut r, 4, 4, true);
        // Zero the perceptron output layer and drive its bias far positive;
        // same for the spatial conv. Both sigmoids then give exactly 1.0.
        mb.mlp_fc2.weight.set_data(&vec![0.0; 4 * 4]);
        mb.mlp_fc2.bias.as_ref().unwrap().set_data(&[40.0; 4]);
        mb.spatial.weight.set_data(&vec![0.0; 2 * 9]);
        mb.spatial.bias.as_ref().unwrap().set_data(&[40.0]);
        mb.align.weight.set_data(&identity_conv1x1(4));
        mb.align.bias.as_ref().unwrap().set_data(&[0.0; 4]);

        let x = random_input(3, &[2, 4, 5, 5]);
        let y = mb.merge(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn merge_is_bounded_by_its_alignment() {
        let mut r = rng::stream(4, "mb");
        let mb = MergingBlock::new(&mut r, 9, 18, true);
        let x = random_input(5, &[1, 9, 8, 8]);
        let y = mb.merge(&x).unwrap();
        let aligned = mb.align.forward(&x).unwrap();
        for (&m, &a) in y.to_vec().iter().zip(aligned.to_vec().iter()) {
            assert!(m.abs() <= a.abs(), "{m} exceeds {a}");
        }
    }

    #[test]
    fn default_head_collapses_to_flat_projections() {
        // Cross weights are zero-initialized and self weights one, so the
        // fused outputs must equal the projections bit for bit.
        let mut r = rng::stream(6, "head");
        let head = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::Bidirectional, true);
        assert_eq!(head.cross_block_count(), 6);
        let dec = random_input(7, &[2, 8, 4, 4]);
        let f_in = head.project(&dec).unwrap();
        let f_out = head.forward(&dec).unwrap();
        for (a, b) in f_in.iter().zip(&f_out) {
            let (av, bv) = (a.to_vec(), b.to_vec());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn single_level_head_degenerates_to_projection() {
        let mut r = rng::stream(8, "head");
        let head = BhccmHead::new(&mut r, 8, &[5], FusionMode::Bidirectional, true);
        assert_eq!(head.cross_block_count(), 0);
        let dec = random_input(9, &[1, 8, 4, 4]);
        let out = head.forward(&dec).unwrap();
        let proj = head.project(&dec).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to_vec(), proj[0].to_vec());
    }

    #[test]
    fn mid_stage_recomposes_from_merge_calls() {
        // Independent recomposition of the level-2 mid feature:
        // mid[1] = W(0,1) * MB(in[0]) + W(1,1) * in[1].
        let mut r = rng::stream(10, "head");
        let head = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::Bidirectional, true);
        let mut wr = rng::stream(11, "weights");
        for (_, w) in &head.w_cross {
            w.set_data(&[wr.gen_range(-1.0..1.0)]);
        }
        for w in &head.w_self {
            w.set_data(&[wr.gen_range(-1.0..1.0)]);
        }

        let dec = random_input(12, &[1, 8, 4, 4]);
        let f_in = head.project(&dec).unwrap();

        let w01 = head.w(0, 1).item();
        let w11 = head.w_self[0].item();
        let merged = head.c2f_block(0, 1).merge(&f_in[0]).unwrap();
        let want: Vec<f64> = merged
            .to_vec()
            .iter()
            .zip(f_in[1].to_vec())
            .map(|(&m, s)| w01 * m + w11 * s)
            .collect();

        // mid[1] equals out-stage input for level 1 only when the
        // fine-to-coarse pass is disabled; recompute through fuse with a
        // c2f-only head sharing the same blocks is intrusive, so read the
        // mid value off the bidirectional pass at the finest level instead:
        // out[2] == mid[2] by construction, and mid[1] is reachable by
        // zeroing the y weights.
        for (_, y) in &head.y_cross {
            y.set_data(&[0.0]);
        }
        for y in &head.y_self {
            y.set_data(&[1.0]);
        }
        let out = head.forward(&dec).unwrap();
        let got = out[1].to_vec();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn fusion_mode_gates_which_blocks_exist() {
        let mut r = rng::stream(13, "head");
        let none = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::None, true);
        assert_eq!(none.cross_block_count(), 0);
        let c2f = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::CoarseToFine, true);
        assert_eq!(c2f.cross_block_count(), 3);
        let f2c = BhccmHead::new(&mut r, 8, &[4, 9, 18], FusionMode::FineToCoarse, true);
        assert_eq!(f2c.cross_block_count(), 3);
    }

    #[test]
    fn segnet_shapes_follow_the_hierarchy() {
        let mut r = rng::stream(14, "net");
        let cfg = SegNetConfig { in_channels: 4, widths: vec![8, 16, 32], c_dim: 16, dec_kernel: 3 };
        let head = HeadSpec::Hiera {
            class_counts: vec![4, 9, 18],
            fusion: FusionMode::Bidirectional,
            mb_bias: true,
        };
        let net = ToySegNet::new(&mut r, cfg, &head);
        let img = random_input(15, &[1, 4, 32, 32]);
        let logits = net.forward_hiera(&img).unwrap();
        assert_eq!(logits.len(), 3);
        for (lg, want_c) in logits.iter().zip([4, 9, 18]) {
            assert_eq!(lg.shape(), vec![1, want_c, 32, 32]);
        }
        assert!(net.forward_flat(&img).is_err());
    }

    #[test]
    fn flat_segnet_emits_single_level() {
        let mut r = rng::stream(16, "net");
        let cfg = SegNetConfig { in_channels: 4, widths: vec![8, 16], c_dim: 12, dec_kernel: 1 };
        let net = ToySegNet::new(&mut r, cfg, &HeadSpec::Flat { classes: 18 });
        let img = random_input(17, &[1, 4, 32, 32]);
        let logits = net.forward_flat(&img).unwrap();
        assert_eq!(logits.shape(), vec![1, 18, 32, 32]);
        assert!(net.forward_hiera(&img).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_logits() {
        let build = || {
            let mut r = rng::stream(42, "net-det");
            let cfg =
                SegNetConfig { in_channels: 4, widths: vec![8, 16], c_dim: 12, dec_kernel: 3 };
            ToySegNet::new(&mut r, cfg, &HeadSpec::Flat { classes: 7 })
        };
        let img = random_input(18, &[2, 4, 16, 16]);
        let a = build().forward_flat(&img).unwrap().to_vec();
        let b = build().forward_flat(&img).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn frozen_nets_build_constant_graphs() {
        let mut r = rng::stream(19, "net");
        let cfg = SegNetConfig { in_channels: 2, widths: vec![4], c_dim: 4, dec_kernel: 1 };
        let net = ToySegNet::new(&mut r, cfg, &HeadSpec::Flat { classes: 3 });
        net.set_frozen(true);
        assert!(net.is_frozen());
        let img = random_input(20, &[1, 2, 4, 4]);
        let logits = net.forward_flat(&img).unwrap();
        assert!(!logits.requires_grad());
        net.set_frozen(false);
        let logits = net.forward_flat(&img).unwrap();
        assert!(logits.requires_grad());
    }

    #[test]
    fn wrong_decoder_width_is_reported() {
        let mut r = rng::stream(21, "head");
        let head = BhccmHead::new(&mut r, 8, &[4, 9], FusionMode::Bidirectional, true);
        let dec = Tensor::zeros(&[1, 7, 4, 4]);
        assert!(matches!(
            head.forward(&dec),
            Err(ModelError::DecoderChannels { got: 7, want: 8 })
        ));
    }
}
