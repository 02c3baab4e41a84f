//! Sequential f64 kernels backing the tensor ops.
//!
//! Everything here runs in a fixed order so forward and backward passes are
//! bit-identical across runs.

/// out += a @ b, with a: [m,k], b: [k,n], out: [m,n], all row-major.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out += a @ b^T, with a: [m,k], b: [n,k], out: [m,n].
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b, with a: [k,m], b: [k,n], out: [m,n].
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// Expand one [c,h,w] image into a [c*kh*kw, h*w] patch matrix with zero
/// padding chosen so that a stride-1 convolution keeps the spatial size.
pub fn im2col(img: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (ph, pw) = (kh / 2, kw / 2);
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * h * w);
    let mut row = 0;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut col[row * h * w..(row + 1) * h * w];
                row += 1;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dx as isize - pw as isize;
                    for (x, d) in dst_row.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`]: fold a [c*kh*kw, h*w] patch
/// gradient back onto a [c,h,w] image gradient.
pub fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, img: &mut [f64]) {
    let (ph, pw) = (kh / 2, kw / 2);
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * h * w);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &col[row * h * w..(row + 1) * h * w];
                row += 1;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let shift = dx as isize - pw as isize;
                    for (x, &s) in src_row.iter().enumerate() {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn mm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut got);
        assert_eq!(got, want);

        // b^T stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut got = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut got);
        assert_eq!(got, want);

        // a^T stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut got = vec![0.0; m * n];
        mm_tn(&at, &b, m, k, n, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    fn im2col_col2im_are_transposes() {
        // <col2im(g), x-patches> == <g, im2col(x)> for random g, x.
        let (c, h, w, kh, kw) = (2, 5, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..c * kh * kw * h * w).map(|i| (i as f64 * 0.3).cos()).collect();

        let mut col = vec![0.0; c * kh * kw * h * w];
        im2col(&x, c, h, w, kh, kw, &mut col);
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();

        let mut folded = vec![0.0; c * h * w];
        col2im_add(&g, c, h, w, kh, kw, &mut folded);
        let rhs: f64 = folded.iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
