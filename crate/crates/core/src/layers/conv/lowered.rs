//! Lowering to GEMM: chunks of output slices are unrolled into a column
//! matrix `[(c, kz, ky, kx), (z, y, x)]`. Chunking bounds the scratch buffer,
//! so large volumes never need a whole-volume column matrix.

use rayon::prelude::*;

use super::{Geometry, KERNEL};
use crate::tensor::{gemm, Scalar};

/// Upper bound on column-matrix elements per chunk.
const COLUMN_BUDGET: usize = 1 << 18;

pub(super) fn forward<T: Scalar>(g: &Geometry, weight: &[T], bias: &[T], padded: &[T]) -> Vec<T> {
    let out = g.out;
    let k = g.rows();
    let per_sample = out.c * out.spatial();
    let mut y = vec![T::zero(); out.numel()];
    y.par_chunks_mut(per_sample).enumerate().for_each(|(n, y_n)| {
        for (o, plane) in y_n.chunks_mut(out.spatial()).enumerate() {
            plane.fill(bias[o]);
        }
        let xp = g.sample(padded, n);
        let mut col = Vec::new();
        for (z0, z1) in g.chunks() {
            let p = g.im2col(xp, z0, z1, &mut col);
            let off = z0 * out.h * out.w;
            gemm(
                out.c,
                k,
                p,
                T::one(),
                (weight, k, 1),
                (&col, p, 1),
                T::one(),
                &mut y_n[off..],
                out.spatial(),
                1,
            );
        }
    });
    y
}

/// Returns `(grad_weight, grad_padded)`.
pub(super) fn backward<T: Scalar>(g: &Geometry, weight: &[T], grad_y: &[T], padded: &[T]) -> (Vec<T>, Vec<T>) {
    let out = g.out;
    let k = g.rows();
    let per_sample = out.c * out.spatial();
    let padded_per_sample = g.padded_len();

    // Per-sample partial weight gradients, reduced below in sample order
    // so the result does not depend on scheduling.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..out.n)
        .into_par_iter()
        .map(|n| {
            let xp = g.sample(padded, n);
            let gy = &grad_y[n * per_sample..(n + 1) * per_sample];
            let mut gw = vec![T::zero(); out.c * k];
            let mut gxp = vec![T::zero(); padded_per_sample];
            let mut col = Vec::new();
            let mut gcol = Vec::new();
            for (z0, z1) in g.chunks() {
                let p = g.im2col(xp, z0, z1, &mut col);
                let off = z0 * out.h * out.w;
                // gw[o, r] += gy[o, q] * col[r, q]
                gemm(
                    out.c,
                    p,
                    k,
                    T::one(),
                    (&gy[off..], out.spatial(), 1),
                    (&col, 1, p),
                    T::one(),
                    &mut gw,
                    k,
                    1,
                );
                // gcol[r, q] = w[o, r] * gy[o, q]
                gcol.clear();
                gcol.resize(k * p, T::zero());
                gemm(
                    k,
                    out.c,
                    p,
                    T::one(),
                    (weight, 1, k),
                    (&gy[off..], out.spatial(), 1),
                    T::zero(),
                    &mut gcol,
                    p,
                    1,
                );
                g.col2im(&gcol, z0, z1, &mut gxp);
            }
            (gw, gxp)
        })
        .collect();

    let mut grad_w = vec![T::zero(); out.c * k];
    let mut grad_xp = Vec::with_capacity(out.n * padded_per_sample);
    for (gw, gxp) in partials {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        grad_xp.extend(gxp);
    }
    (grad_w, grad_xp)
}

impl Geometry {
    fn padded_len(&self) -> usize {
        self.input.c * self.pd * self.ph * self.pw
    }

    fn sample<'a, T>(&self, padded: &'a [T], n: usize) -> &'a [T] {
        let len = self.padded_len();
        &padded[n * len..(n + 1) * len]
    }

    /// Output-slice ranges whose column matrix fits the budget.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let slice_cols = self.out.h * self.out.w;
        let per_chunk = (COLUMN_BUDGET / (self.rows() * slice_cols)).max(1);
        let d = self.out.d;
        (0..d).step_by(per_chunk).map(move |z0| (z0, (z0 + per_chunk).min(d)))
    }

    /// Fills the column matrix for output slices `z0..z1`; returns the
    /// column count.
    fn im2col<T: Scalar>(&self, xp: &[T], z0: usize, z1: usize, col: &mut Vec<T>) -> usize {
        let (oh, ow, s) = (self.out.h, self.out.w, self.stride);
        let p = (z1 - z0) * oh * ow;
        col.clear();
        col.resize(self.rows() * p, T::zero());
        let mut row = 0;
        for c in 0..self.input.c {
            let base_c = c * self.pd * self.ph * self.pw;
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let dst = &mut col[row * p..(row + 1) * p];
                        let mut q = 0;
                        for z in z0..z1 {
                            for y in 0..oh {
                                let src = base_c + ((z * s + kz) * self.ph + y * s + ky) * self.pw + kx;
                                if s == 1 {
                                    dst[q..q + ow].copy_from_slice(&xp[src..src + ow]);
                                } else {
                                    for (x, d) in dst[q..q + ow].iter_mut().enumerate() {
                                        *d = xp[src + x * s];
                                    }
                                }
                                q += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        p
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds columns into the padded gradient.
    fn col2im<T: Scalar>(&self, gcol: &[T], z0: usize, z1: usize, gxp: &mut [T]) {
        let (oh, ow, s) = (self.out.h, self.out.w, self.stride);
        let p = (z1 - z0) * oh * ow;
        let mut row = 0;
        for c in 0..self.input.c {
            let base_c = c * self.pd * self.ph * self.pw;
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let src = &gcol[row * p..(row + 1) * p];
                        let mut q = 0;
                        for z in z0..z1 {
                            for y in 0..oh {
                                let dst = base_c + ((z * s + kz) * self.ph + y * s + ky) * self.pw + kx;
                                for (x, &g) in src[q..q + ow].iter().enumerate() {
                                    gxp[dst + x * s] += g;
                                }
                                q += ow;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}
