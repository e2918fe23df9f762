//! Dense compute kernels shared by forward evaluation and backprop.
//!
//! Convolutions are im2col + GEMM. Batch items are processed by rayon;
//! each output element is produced by exactly one task in a fixed order,
//! so results are bitwise identical regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Layout of the im2col patch matrix: `K x N` with `K = cin*kh*kw` rows
/// and `N = ho*wo` columns.
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let n = ho * wo;
    debug_assert_eq!(out.len(), cin * kh * kw * n);
    let mut row = 0usize;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut out[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy + ki;
                    let base = oy * wo;
                    if iy < pad || iy >= h + pad {
                        dst[base..base + wo].iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + kj;
                        dst[base + ox] = if ix < pad || ix >= w + pad {
                            T::zero()
                        } else {
                            xc[iy * w + ix - pad]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back into an image.
pub fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let n = ho * wo;
    debug_assert_eq!(out.len(), cin * h * w);
    let mut row = 0usize;
    for c in 0..cin {
        let oc = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + kj;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        oc[iy * w + ix - pad] += src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn ho(&self) -> usize {
        self.h + 2 * self.pad - self.kh + 1
    }
    pub fn wo(&self) -> usize {
        self.w + 2 * self.pad - self.kw + 1
    }
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn in_stride(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_stride(&self) -> usize {
        self.cout * self.ho() * self.wo()
    }
}

/// y[b] = w @ im2col(x[b]) + bias, batched.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims, y: &mut [T]) {
    let n = d.ho() * d.wo();
    let k = d.k();
    y.par_chunks_mut(d.out_stride())
        .zip(x.par_chunks(d.in_stride()))
        .for_each(|(yb, xb)| {
            let mut col = vec![T::zero(); k * n];
            im2col(xb, d.cin, d.h, d.w, d.kh, d.kw, d.pad, &mut col);
            T::gemm(d.cout, k, n, w, &col, yb);
            if let Some(bias) = bias {
                for (o, &bv) in bias.iter().enumerate() {
                    yb[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
}

/// gx[b] = col2im(w^T @ gy[b]), batched. Shared by conv backprop and the
/// `Conv2dInputGrad` forward op.
pub fn conv2d_input_grad<T: Scalar>(gy: &[T], w: &[T], d: &ConvDims, gx: &mut [T]) {
    let n = d.ho() * d.wo();
    let k = d.k();
    gx.par_chunks_mut(d.in_stride())
        .zip(gy.par_chunks(d.out_stride()))
        .for_each(|(gxb, gyb)| {
            let mut col = vec![T::zero(); k * n];
            // w viewed transposed: K x Cout
            T::gemm_strided(
                k,
                d.cout,
                n,
                T::one(),
                w,
                1,
                k as isize,
                gyb,
                n as isize,
                1,
                T::zero(),
                &mut col,
            );
            gxb.iter_mut().for_each(|v| *v = T::zero());
            col2im_add(&col, d.cin, d.h, d.w, d.kh, d.kw, d.pad, gxb);
        });
}

/// dw += sum_b gy[b] @ im2col(x[b])^T; db += per-channel sums of gy.
/// Sequential over the batch so accumulation order is fixed.
pub fn conv2d_param_grad<T: Scalar>(
    x: &[T],
    gy: &[T],
    d: &ConvDims,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) {
    let n = d.ho() * d.wo();
    let k = d.k();
    let mut col = vec![T::zero(); k * n];
    for b in 0..d.batch {
        let xb = &x[b * d.in_stride()..(b + 1) * d.in_stride()];
        let gyb = &gy[b * d.out_stride()..(b + 1) * d.out_stride()];
        im2col(xb, d.cin, d.h, d.w, d.kh, d.kw, d.pad, &mut col);
        // dw (Cout x K) += gy[b] (Cout x N) @ col^T (N x K)
        T::gemm_strided(
            d.cout,
            n,
            k,
            T::one(),
            gyb,
            n as isize,
            1,
            &col,
            1,
            n as isize,
            T::one(),
            dw,
        );
        if let Some(db) = db.as_deref_mut() {
            for o in 0..d.cout {
                let s = gyb[o * n..(o + 1) * n]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                db[o] += s;
            }
        }
    }
}

/// y = x @ w^T + bias with x `[B,in]`, w `[out,in]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    y: &mut [T],
) {
    T::gemm_strided(
        batch,
        in_dim,
        out_dim,
        T::one(),
        x,
        in_dim as isize,
        1,
        w,
        1,
        in_dim as isize,
        T::zero(),
        y,
    );
    if let Some(bias) = bias {
        for row in y.chunks_mut(out_dim) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    }
}

pub fn avg_pool_2x2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let quarter = T::of(0.25);
    let (ho, wo) = (h / 2, w / 2);
    for img in 0..bc {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * ho * wo..(img + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
}

/// Adjoint of [`avg_pool_2x2`]: each value is spread /4 over its 2x2 block.
pub fn avg_unpool_2x2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let quarter = T::of(0.25);
    let (ho, wo) = (h * 2, w * 2);
    for img in 0..bc {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * ho * wo..(img + 1) * ho * wo];
        for iy in 0..h {
            for ix in 0..w {
                let v = src[iy * w + ix] * quarter;
                let o = 2 * iy * wo + 2 * ix;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + wo] = v;
                dst[o + wo + 1] = v;
            }
        }
    }
}

/// First-max-wins argmax within each 2x2 window (ties resolved in scan
/// order), so backprop routing is deterministic.
pub fn max_pool_2x2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    for img in 0..bc {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * ho * wo..(img + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                let mut best = src[i];
                for &cand in &[src[i + 1], src[i + w], src[i + w + 1]] {
                    if cand > best {
                        best = cand;
                    }
                }
                dst[oy * wo + ox] = best;
            }
        }
    }
}

pub fn max_pool_2x2_backward<T: Scalar>(
    x: &[T],
    gy: &[T],
    bc: usize,
    h: usize,
    w: usize,
    gx: &mut [T],
) {
    let (ho, wo) = (h / 2, w / 2);
    for img in 0..bc {
        let src = &x[img * h * w..(img + 1) * h * w];
        let g = &gy[img * ho * wo..(img + 1) * ho * wo];
        let dst = &mut gx[img * h * w..(img + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                let idx = [i, i + 1, i + w, i + w + 1];
                let mut best = 0usize;
                for (slot, &j) in idx.iter().enumerate().skip(1) {
                    if src[j] > src[idx[best]] {
                        best = slot;
                    }
                }
                dst[idx[best]] += g[oy * wo + ox];
            }
        }
    }
}

pub fn upsample_nearest_2x<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let (ho, wo) = (h * 2, w * 2);
    for img in 0..bc {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * ho * wo..(img + 1) * ho * wo];
        for iy in 0..h {
            for ix in 0..w {
                let v = src[iy * w + ix];
                let o = 2 * iy * wo + 2 * ix;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + wo] = v;
                dst[o + wo + 1] = v;
            }
        }
    }
}

pub fn upsample_nearest_2x_backward<T: Scalar>(
    gy: &[T],
    bc: usize,
    h: usize,
    w: usize,
    gx: &mut [T],
) {
    let (ho, wo) = (h * 2, w * 2);
    for img in 0..bc {
        let g = &gy[img * ho * wo..(img + 1) * ho * wo];
        let dst = &mut gx[img * h * w..(img + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let o = 2 * iy * wo + 2 * ix;
                dst[iy * w + ix] += g[o] + g[o + 1] + g[o + wo] + g[o + wo + 1];
            }
        }
    }
}
