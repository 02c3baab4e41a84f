//! Forward and backward implementations for every tensor op.
//!
//! Each op validates shapes up front, computes its value eagerly, and (when
//! recorded on the tape) knows how to turn the output gradient into parent
//! gradients. Elementwise binary ops broadcast with NumPy's right-aligned
//! rule; their backward sums the incoming gradient over broadcast axes.

use super::kernels;
use super::{shape_str, Result, Tensor, TensorError};

pub(crate) struct BackwardCtx<'a> {
    pub grad_out: &'a [f64],
    pub out_data: &'a [f64],
    pub parents: &'a [Tensor],
}

pub(crate) trait BackwardOp {
    /// Gradient for each parent, in parent order. `None` marks a parent that
    /// receives no gradient from this op.
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>>;
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: shape_str(a),
                    rhs: shape_str(b),
                })
            }
        };
    }
    Ok(out)
}

/// Row-major strides of `src` aligned to `out`, with 0 on broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - src.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..src.len()).rev() {
        strides[offset + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visit every output index of `shape` along with two mapped source offsets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    let nd = shape.len();
    if nd == 0 {
        if total == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..total {
        f(lin, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
        }
    }
}

fn walk1(shape: &[usize], s: &[usize], mut f: impl FnMut(usize, usize)) {
    walk2(shape, s, &vec![0; shape.len()], |lin, o, _| f(lin, o));
}

/// Sum `grad` (shaped `out_shape`) down to `src_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], src_shape: &[usize]) -> Vec<f64> {
    if out_shape == src_shape {
        return grad.to_vec();
    }
    let numel: usize = src_shape.iter().product();
    let mut acc = vec![0.0; numel];
    let s = aligned_strides(src_shape, out_shape);
    walk1(out_shape, &s, |lin, o| acc[o] += grad[lin]);
    acc
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

struct AddBack {
    lhs_shape: Vec<usize>,
    rhs_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl BackwardOp for AddBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        vec![
            Some(reduce_to(ctx.grad_out, &self.out_shape, &self.lhs_shape)),
            Some(reduce_to(ctx.grad_out, &self.out_shape, &self.rhs_shape)),
        ]
    }
}

struct MulBack {
    lhs_shape: Vec<usize>,
    rhs_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl BackwardOp for MulBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let a = ctx.parents[0].data();
        let b = ctx.parents[1].data();
        let sa = aligned_strides(&self.lhs_shape, &self.out_shape);
        let sb = aligned_strides(&self.rhs_shape, &self.out_shape);
        let mut ga = vec![0.0; ctx.grad_out.len()];
        let mut gb = vec![0.0; ctx.grad_out.len()];
        walk2(&self.out_shape, &sa, &sb, |lin, oa, ob| {
            ga[lin] = ctx.grad_out[lin] * b[ob];
            gb[lin] = ctx.grad_out[lin] * a[oa];
        });
        vec![
            Some(reduce_to(&ga, &self.out_shape, &self.lhs_shape)),
            Some(reduce_to(&gb, &self.out_shape, &self.rhs_shape)),
        ]
    }
}

struct ScaleBack {
    factor: f64,
}

impl BackwardOp for ScaleBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_out.iter().map(|g| g * self.factor).collect())]
    }
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

enum MatmulKind {
    /// [m,k] @ [k,n]
    Plain,
    /// [b,m,k] @ [b,k,n]
    Batched,
    /// [b,m,k] @ [k,n], rhs shared across the batch
    BatchedShared,
}

struct MatmulBack {
    kind: MatmulKind,
    b: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardOp for MatmulBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let a = ctx.parents[0].data();
        let w = ctx.parents[1].data();
        let (b, m, k, n) = (self.b, self.m, self.k, self.n);
        let mut ga = vec![0.0; a.len()];
        let mut gw = vec![0.0; w.len()];
        for bi in 0..b {
            let go = &ctx.grad_out[bi * m * n..(bi + 1) * m * n];
            let a_b = &a[bi * m * k..(bi + 1) * m * k];
            let w_b = match self.kind {
                MatmulKind::Batched => &w[bi * k * n..(bi + 1) * k * n],
                _ => &w[..],
            };
            // dA = gO @ W^T ; dW += A^T @ gO
            kernels::mm_nt(go, w_b, m, n, k, &mut ga[bi * m * k..(bi + 1) * m * k]);
            let gw_b = match self.kind {
                MatmulKind::Batched => &mut gw[bi * k * n..(bi + 1) * k * n],
                _ => &mut gw[..],
            };
            kernels::mm_tn(a_b, go, k, m, n, gw_b);
        }
        vec![Some(ga), Some(gw)]
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dBack {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Conv2dBack {
    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

impl BackwardOp for Conv2dBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let wt = ctx.parents[1].data();
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        let ckk = self.ckk();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        let mut col = vec![0.0; ckk * hw];
        let mut gcol = vec![0.0; ckk * hw];
        for bi in 0..self.batch {
            let x_b = &x[bi * self.c_in * hw..(bi + 1) * self.c_in * hw];
            let go_b = &ctx.grad_out[bi * self.c_out * hw..(bi + 1) * self.c_out * hw];
            let gx_b = &mut gx[bi * self.c_in * hw..(bi + 1) * self.c_in * hw];
            if k == 1 {
                kernels::mm_nt(go_b, x_b, self.c_out, hw, self.c_in, &mut gw);
                kernels::mm_tn(&wt, go_b, self.c_in, self.c_out, hw, gx_b);
            } else {
                kernels::im2col(x_b, self.c_in, h, w, k, k, &mut col);
                kernels::mm_nt(go_b, &col, self.c_out, hw, ckk, &mut gw);
                gcol.fill(0.0);
                kernels::mm_tn(&wt, go_b, ckk, self.c_out, hw, &mut gcol);
                kernels::col2im_add(&gcol, self.c_in, h, w, k, k, gx_b);
            }
        }
        vec![Some(gx), Some(gw)]
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

struct AvgPool2Back {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
}

impl BackwardOp for AvgPool2Back {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (h / 2, w / 2);
        let mut gx = vec![0.0; self.batch * self.channels * h * w];
        for p in 0..self.batch * self.channels {
            let go = &ctx.grad_out[p * oh * ow..(p + 1) * oh * ow];
            let gxp = &mut gx[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let g = go[y * ow + x] * 0.25;
                    gxp[(2 * y) * w + 2 * x] += g;
                    gxp[(2 * y) * w + 2 * x + 1] += g;
                    gxp[(2 * y + 1) * w + 2 * x] += g;
                    gxp[(2 * y + 1) * w + 2 * x + 1] += g;
                }
            }
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgPoolBack {
    spatial: usize,
    in_len: usize,
}

impl BackwardOp for GlobalAvgPoolBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.spatial as f64;
        let mut gx = vec![0.0; self.in_len];
        for (p, &g) in ctx.grad_out.iter().enumerate() {
            let gs = g * inv;
            for v in &mut gx[p * self.spatial..(p + 1) * self.spatial] {
                *v = gs;
            }
        }
        vec![Some(gx)]
    }
}

/// Max pools route the gradient to the first maximal element in scan order.
struct MaxRouteBack {
    argmax: Vec<usize>,
    in_len: usize,
}

impl BackwardOp for MaxRouteBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.in_len];
        for (&i, &g) in self.argmax.iter().zip(ctx.grad_out) {
            gx[i] += g;
        }
        vec![Some(gx)]
    }
}

struct ChannelAvgPoolBack {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl BackwardOp for ChannelAvgPoolBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.channels as f64;
        let mut gx = vec![0.0; self.batch * self.channels * self.spatial];
        for b in 0..self.batch {
            let go = &ctx.grad_out[b * self.spatial..(b + 1) * self.spatial];
            for c in 0..self.channels {
                let gxp = &mut gx[(b * self.channels + c) * self.spatial..][..self.spatial];
                for (v, &g) in gxp.iter_mut().zip(go) {
                    *v = g * inv;
                }
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// Concat / slice over the channel axis
// ---------------------------------------------------------------------------

struct ConcatChannelsBack {
    batch: usize,
    channels: Vec<usize>,
    spatial: usize,
}

impl BackwardOp for ConcatChannelsBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let c_total: usize = self.channels.iter().sum();
        let mut grads: Vec<Option<Vec<f64>>> = self
            .channels
            .iter()
            .map(|&c| Some(vec![0.0; self.batch * c * self.spatial]))
            .collect();
        for b in 0..self.batch {
            let mut c_off = 0;
            for (pi, &c) in self.channels.iter().enumerate() {
                let src =
                    &ctx.grad_out[(b * c_total + c_off) * self.spatial..][..c * self.spatial];
                let dst = grads[pi].as_mut().expect("allocated above");
                dst[b * c * self.spatial..(b + 1) * c * self.spatial].copy_from_slice(src);
                c_off += c;
            }
        }
        grads
    }
}

struct SliceChannelsBack {
    batch: usize,
    c_in: usize,
    c0: usize,
    c1: usize,
    spatial: usize,
}

impl BackwardOp for SliceChannelsBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let c_sel = self.c1 - self.c0;
        let mut gx = vec![0.0; self.batch * self.c_in * self.spatial];
        for b in 0..self.batch {
            let src = &ctx.grad_out[b * c_sel * self.spatial..(b + 1) * c_sel * self.spatial];
            let dst = &mut gx[(b * self.c_in + self.c0) * self.spatial..][..c_sel * self.spatial];
            dst.copy_from_slice(src);
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (factor 2, align_corners = false)
// ---------------------------------------------------------------------------

fn up2_taps(size: usize) -> Vec<(usize, usize, f64)> {
    // Output index -> (lo index, hi index, hi weight).
    (0..2 * size)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct BilinearUp2Back {
    batch_channels: usize,
    h: usize,
    w: usize,
}

impl BackwardOp for BilinearUp2Back {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (2 * h, 2 * w);
        let ty = up2_taps(h);
        let tx = up2_taps(w);
        let mut gx = vec![0.0; self.batch_channels * h * w];
        for p in 0..self.batch_channels {
            let go = &ctx.grad_out[p * oh * ow..(p + 1) * oh * ow];
            let gxp = &mut gx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = go[oy * ow + ox];
                    gxp[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    gxp[y0 * w + x1] += g * (1.0 - fy) * fx;
                    gxp[y1 * w + x0] += g * fy * (1.0 - fx);
                    gxp[y1 * w + x1] += g * fy * fx;
                }
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

struct ReluBack;

impl BackwardOp for ReluBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        vec![Some(
            ctx.grad_out
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        )]
    }
}

struct SigmoidBack;

impl BackwardOp for SigmoidBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            ctx.grad_out
                .iter()
                .zip(ctx.out_data.iter())
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect(),
        )]
    }
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(/*base*/ usize, /*stride*/ usize, /*len*/ usize),
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

struct SoftmaxBack {
    shape: Vec<usize>,
    axis: usize,
}

impl BackwardOp for SoftmaxBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; ctx.grad_out.len()];
        for_each_lane(&self.shape, self.axis, |base, stride, len| {
            let mut dot = 0.0;
            for j in 0..len {
                let idx = base + j * stride;
                dot += ctx.grad_out[idx] * ctx.out_data[idx];
            }
            for j in 0..len {
                let idx = base + j * stride;
                gx[idx] = ctx.out_data[idx] * (ctx.grad_out[idx] - dot);
            }
        });
        vec![Some(gx)]
    }
}

struct LogSoftmaxBack {
    shape: Vec<usize>,
    axis: usize,
}

impl BackwardOp for LogSoftmaxBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; ctx.grad_out.len()];
        for_each_lane(&self.shape, self.axis, |base, stride, len| {
            let mut gsum = 0.0;
            for j in 0..len {
                gsum += ctx.grad_out[base + j * stride];
            }
            for j in 0..len {
                let idx = base + j * stride;
                gx[idx] = ctx.grad_out[idx] - ctx.out_data[idx].exp() * gsum;
            }
        });
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// Reductions, reshape, permute, layer norm
// ---------------------------------------------------------------------------

struct SumBack {
    in_len: usize,
    scale: f64,
}

impl BackwardOp for SumBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![ctx.grad_out[0] * self.scale; self.in_len])]
    }
}

struct ReshapeBack;

impl BackwardOp for ReshapeBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_out.to_vec())]
    }
}

struct PermuteBack {
    in_shape: Vec<usize>,
    perm: Vec<usize>,
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    walk1(&out_shape, &src_strides, |lin, src| out[lin] = data[src]);
    out
}

impl BackwardOp for PermuteBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let out_shape: Vec<usize> = self.perm.iter().map(|&p| self.in_shape[p]).collect();
        let mut inverse = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(permute_data(ctx.grad_out, &out_shape, &inverse))]
    }
}

struct LayerNormBack {
    rows: usize,
    cols: usize,
    // Saved per-row statistics from the forward pass.
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BackwardOp for LayerNormBack {
    fn backward(&self, ctx: &BackwardCtx) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let gamma = ctx.parents[1].data();
        let c = self.cols;
        let mut gx = vec![0.0; x.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for r in 0..self.rows {
            let xr = &x[r * c..(r + 1) * c];
            let gr = &ctx.grad_out[r * c..(r + 1) * c];
            let (mu, is) = (self.mean[r], self.inv_std[r]);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..c {
                let xhat = (xr[j] - mu) * is;
                let dxhat = gr[j] * gamma[j];
                ggamma[j] += gr[j] * xhat;
                gbeta[j] += gr[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= c as f64;
            mean_dxhat_xhat /= c as f64;
            let gxr = &mut gx[r * c..(r + 1) * c];
            for j in 0..c {
                let xhat = (xr[j] - mu) * is;
                let dxhat = gr[j] * gamma[j];
                gxr[j] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }
}

// ---------------------------------------------------------------------------
// Public op surface
// ---------------------------------------------------------------------------

impl Tensor {
    fn require_4d(&self, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected a 4-d tensor, got {}", shape_str(&s)),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape("add", &sa, &sb)?;
        let stra = aligned_strides(&sa, &out_shape);
        let strb = aligned_strides(&sb, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let a = self.data();
            let b = other.data();
            if sa == sb {
                for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = x + y;
                }
            } else {
                walk2(&out_shape, &stra, &strb, |lin, oa, ob| out[lin] = a[oa] + b[ob]);
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(AddBack { lhs_shape: sa, rhs_shape: sb, out_shape }),
        ))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape("mul", &sa, &sb)?;
        let stra = aligned_strides(&sa, &out_shape);
        let strb = aligned_strides(&sb, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let a = self.data();
            let b = other.data();
            if sa == sb {
                for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = x * y;
                }
            } else {
                walk2(&out_shape, &stra, &strb, |lin, oa, ob| out[lin] = a[oa] * b[ob]);
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(MulBack { lhs_shape: sa, rhs_shape: sb, out_shape }),
        ))
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(out, self.shape(), vec![self.clone()], Box::new(ScaleBack { factor }))
    }

    /// Matrix product. Accepts `[m,k] @ [k,n]`, `[b,m,k] @ [b,k,n]`, and
    /// `[b,m,k] @ [k,n]` (shared right operand).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: shape_str(&sa),
            rhs: shape_str(&sb),
        };
        let (kind, b, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (MatmulKind::Plain, 1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (MatmulKind::Batched, sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(mismatch());
                }
                (MatmulKind::BatchedShared, sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; b * m * n];
        {
            let a = self.data();
            let w = other.data();
            for bi in 0..b {
                let a_b = &a[bi * m * k..(bi + 1) * m * k];
                let w_b = match kind {
                    MatmulKind::Batched => &w[bi * k * n..(bi + 1) * k * n],
                    _ => &w[..],
                };
                kernels::mm_nn(a_b, w_b, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(MatmulBack { kind, b, m, k, n }),
        ))
    }

    /// 2-d convolution with stride 1 and same padding.
    ///
    /// `self` is `[B,C,H,W]`, `weight` is `[O,C,k,k]` with k in {1, 3}.
    /// Bias, when wanted, is a separate broadcast [`Tensor::add`].
    pub fn conv2d(&self, weight: &Tensor) -> Result<Tensor> {
        let [batch, c_in, h, w] = self.require_4d("conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: shape_str(&self.shape()),
                rhs: shape_str(&ws),
            });
        }
        let k = ws[2];
        if k != 1 && k != 3 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("unsupported kernel size {k} (expected 1 or 3)"),
            });
        }
        let c_out = ws[0];
        let hw = h * w;
        let ckk = c_in * k * k;
        let mut out = vec![0.0; batch * c_out * hw];
        {
            let x = self.data();
            let wt = weight.data();
            let mut col = vec![0.0; ckk * hw];
            for bi in 0..batch {
                let x_b = &x[bi * c_in * hw..(bi + 1) * c_in * hw];
                let out_b = &mut out[bi * c_out * hw..(bi + 1) * c_out * hw];
                if k == 1 {
                    kernels::mm_nn(&wt, x_b, c_out, c_in, hw, out_b);
                } else {
                    kernels::im2col(x_b, c_in, h, w, k, k, &mut col);
                    kernels::mm_nn(&wt, &col, c_out, ckk, hw, out_b);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c_out, h, w],
            vec![self.clone(), weight.clone()],
            Box::new(Conv2dBack { batch, c_in, c_out, h, w, k }),
        ))
    }

    /// 2x2 mean pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; batch * channels * oh * ow];
        {
            let x = self.data();
            for p in 0..batch * channels {
                let xp = &x[p * h * w..(p + 1) * h * w];
                let op_ = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        op_[y * ow + xx] = 0.25
                            * (xp[(2 * y) * w + 2 * xx]
                                + xp[(2 * y) * w + 2 * xx + 1]
                                + xp[(2 * y + 1) * w + 2 * xx]
                                + xp[(2 * y + 1) * w + 2 * xx + 1]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, channels, oh, ow],
            vec![self.clone()],
            Box::new(AvgPool2Back { batch, channels, h, w }),
        ))
    }

    /// Mean over the spatial dims: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("global_avg_pool")?;
        let spatial = h * w;
        let mut out = vec![0.0; batch * channels];
        {
            let x = self.data();
            for (p, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &v in &x[p * spatial..(p + 1) * spatial] {
                    acc += v;
                }
                *o = acc / spatial as f64;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, channels, 1, 1],
            vec![self.clone()],
            Box::new(GlobalAvgPoolBack { spatial, in_len: batch * channels * spatial }),
        ))
    }

    /// Max over the spatial dims: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_max_pool(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("global_max_pool")?;
        let spatial = h * w;
        let mut out = vec![0.0; batch * channels];
        let mut argmax = vec![0usize; batch * channels];
        {
            let x = self.data();
            for p in 0..batch * channels {
                let xp = &x[p * spatial..(p + 1) * spatial];
                let (mut best, mut best_i) = (xp[0], 0usize);
                for (i, &v) in xp.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[p] = best;
                argmax[p] = p * spatial + best_i;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, channels, 1, 1],
            vec![self.clone()],
            Box::new(MaxRouteBack { argmax, in_len: batch * channels * spatial }),
        ))
    }

    /// Mean over the channel dim: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn channel_avg_pool(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("channel_avg_pool")?;
        let spatial = h * w;
        let mut out = vec![0.0; batch * spatial];
        {
            let x = self.data();
            for b in 0..batch {
                let ob = &mut out[b * spatial..(b + 1) * spatial];
                for c in 0..channels {
                    let xp = &x[(b * channels + c) * spatial..][..spatial];
                    for (o, &v) in ob.iter_mut().zip(xp) {
                        *o += v;
                    }
                }
                for o in ob.iter_mut() {
                    *o /= channels as f64;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, 1, h, w],
            vec![self.clone()],
            Box::new(ChannelAvgPoolBack { batch, channels, spatial }),
        ))
    }

    /// Max over the channel dim: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn channel_max_pool(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("channel_max_pool")?;
        let spatial = h * w;
        let mut out = vec![0.0; batch * spatial];
        let mut argmax = vec![0usize; batch * spatial];
        {
            let x = self.data();
            for b in 0..batch {
                for s in 0..spatial {
                    let mut best = x[b * channels * spatial + s];
                    let mut best_c = 0usize;
                    for c in 1..channels {
                        let v = x[(b * channels + c) * spatial + s];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    out[b * spatial + s] = best;
                    argmax[b * spatial + s] = (b * channels + best_c) * spatial + s;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, 1, h, w],
            vec![self.clone()],
            Box::new(MaxRouteBack { argmax, in_len: batch * channels * spatial }),
        ))
    }

    /// Concatenate 4-d tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_channels", msg: "no inputs".into() });
        }
        let [batch, _, h, w] = parts[0].require_4d("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [b2, c, h2, w2] = p.require_4d("concat_channels")?;
            if b2 != batch || h2 != h || w2 != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: shape_str(&parts[0].shape()),
                    rhs: shape_str(&p.shape()),
                });
            }
            channels.push(c);
        }
        let c_total: usize = channels.iter().sum();
        let spatial = h * w;
        let mut out = vec![0.0; batch * c_total * spatial];
        for b in 0..batch {
            let mut c_off = 0;
            for (p, &c) in parts.iter().zip(&channels) {
                let src = p.data();
                let chunk = &src[b * c * spatial..(b + 1) * c * spatial];
                out[(b * c_total + c_off) * spatial..][..c * spatial].copy_from_slice(chunk);
                c_off += c;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c_total, h, w],
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(ConcatChannelsBack { batch, channels, spatial }),
        ))
    }

    /// Select channels `[c0, c1)` of a 4-d tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let [batch, c_in, h, w] = self.require_4d("slice_channels")?;
        if c0 >= c1 || c1 > c_in {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                msg: format!("range {c0}..{c1} out of {c_in} channels"),
            });
        }
        let spatial = h * w;
        let c_sel = c1 - c0;
        let mut out = vec![0.0; batch * c_sel * spatial];
        {
            let x = self.data();
            for b in 0..batch {
                let src = &x[(b * c_in + c0) * spatial..][..c_sel * spatial];
                out[b * c_sel * spatial..(b + 1) * c_sel * spatial].copy_from_slice(src);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c_sel, h, w],
            vec![self.clone()],
            Box::new(SliceChannelsBack { batch, c_in, c0, c1, spatial }),
        ))
    }

    /// Bilinear 2x upsampling (align_corners = false).
    pub fn bilinear_upsample2(&self) -> Result<Tensor> {
        let [batch, channels, h, w] = self.require_4d("bilinear_upsample2")?;
        let ty = up2_taps(h);
        let tx = up2_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; batch * channels * oh * ow];
        {
            let x = self.data();
            for p in 0..batch * channels {
                let xp = &x[p * h * w..(p + 1) * h * w];
                let op_ = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = xp[y0 * w + x0] * (1.0 - fx) + xp[y0 * w + x1] * fx;
                        let bot = xp[y1 * w + x0] * (1.0 - fx) + xp[y1 * w + x1] * fx;
                        op_[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, channels, oh, ow],
            vec![self.clone()],
            Box::new(BilinearUp2Back { batch_channels: batch * channels, h, w }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(out, self.shape(), vec![self.clone()], Box::new(ReluBack))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op(out, self.shape(), vec![self.clone()], Box::new(SigmoidBack))
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {}", shape_str(&shape)),
            });
        }
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for_each_lane(&shape, axis, |base, stride, len| {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[base + j * stride]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let idx = base + j * stride;
                    let e = (x[idx] - mx).exp();
                    out[idx] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * stride] /= z;
                }
            });
        }
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(SoftmaxBack { shape, axis }),
        ))
    }

    /// Log-softmax along `axis` via a shifted log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: format!("axis {axis} out of range for {}", shape_str(&shape)),
            });
        }
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for_each_lane(&shape, axis, |base, stride, len| {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[base + j * stride]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    z += (x[base + j * stride] - mx).exp();
                }
                let lse = mx + z.ln();
                for j in 0..len {
                    let idx = base + j * stride;
                    out[idx] = x[idx] - lse;
                }
            });
        }
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(LogSoftmaxBack { shape, axis }),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(SumBack { in_len: self.numel(), scale: 1.0 }),
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![total / n as f64],
            vec![],
            vec![self.clone()],
            Box::new(SumBack { in_len: n, scale: 1.0 / n as f64 }),
        )
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!(
                    "cannot view {} as {}",
                    shape_str(&self.shape()),
                    shape_str(shape)
                ),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(ReshapeBack),
        ))
    }

    /// Reorder axes by `perm` (a permutation of `0..ndim`).
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of 0..{nd}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(&self.data(), &shape, perm);
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(PermuteBack { in_shape: shape, perm: perm.to_vec() }),
        ))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape_str(&shape),
                rhs: shape_str(&gamma.shape()),
            });
        }
        let rows = self.numel() / cols;
        let mut out = vec![0.0; self.numel()];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                let mu = xr.iter().sum::<f64>() / cols as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                let or = &mut out[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    or[j] = (xr[j] - mu) * is * g[j] + b[j];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(LayerNormBack { rows, cols, mean, inv_std }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn matmul_identity_is_identity() {
        let a = Tensor::from_vec((0..16).map(|i| i as f64 * 0.5 - 3.0).collect(), &[4, 4]).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let id = Tensor::from_vec(eye, &[4, 4]).unwrap();
        let out = a.matmul(&id).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::zeros(&[1, 4, 1, 1]);
        let y = x.softmax(1).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcasting_add_matches_loop() {
        let a = Tensor::from_vec((0..24).map(|i| i as f64).collect(), &[2, 3, 2, 2]).unwrap();
        let bias = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[1, 3, 1, 1]).unwrap();
        let out = a.add(&bias).unwrap();
        let av = a.to_vec();
        let ov = out.to_vec();
        for b in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    let i = (b * 3 + c) * 4 + s;
                    assert_eq!(ov[i], av[i] + 10.0 * (c + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn broadcast_grad_reduces_over_expanded_axes() {
        let a = Tensor::param_from_vec(vec![1.0, 2.0], &[1, 2, 1, 1]).unwrap();
        let x = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let y = a.mul(&x).unwrap().sum();
        y.backward().unwrap();
        // d/da_c = sum of x over the c-th channel
        assert_eq!(a.grad().unwrap(), vec![0.0 + 1.0 + 2.0 + 3.0, 4.0 + 5.0 + 6.0 + 7.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let b = Tensor::from_vec((8..12).map(|i| i as f64).collect(), &[1, 1, 2, 2]).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), vec![1, 3, 2, 2]);
        let back = cat.slice_channels(0, 2).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        let tail = cat.slice_channels(2, 3).unwrap();
        assert_eq!(tail.to_vec(), b.to_vec());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2x3]"), "{msg}");
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64).collect(), &[2, 3, 4]).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn forward_passes_are_bit_identical() {
        let data: Vec<f64> = (0..32).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let run = || {
            let x = Tensor::from_vec(data.clone(), &[1, 2, 4, 4]).unwrap();
            let w = Tensor::from_vec((0..18).map(|i| (i as f64).sin()).collect(), &[1, 2, 3, 3])
                .unwrap();
            x.conv2d(&w).unwrap().sigmoid().sum().item()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
