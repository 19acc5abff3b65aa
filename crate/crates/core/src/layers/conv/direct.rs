//! Row-wise direct convolution.
//!
//! Each output row accumulates three shifted input rows per `(in_ch, kz, ky)`
//! tap pair, which keeps the working set to a couple of rows. For stride 2,
//! padded rows are first split into even and odd phases so the three taps
//! become contiguous reads as well.

use rayon::prelude::*;

use super::{Geometry, KERNEL, TAPS};
use crate::tensor::Scalar;

/// Lane count of the fixed-width dot-product accumulators.
const LANES: usize = 8;

impl Geometry {
    /// Offsets of the `kx = 0, 1, 2` taps inside a (phased) padded row.
    fn taps(&self) -> [usize; 3] {
        if self.stride == 1 {
            [0, 1, 2]
        } else {
            let even = self.pw.div_ceil(2);
            [0, even, 1]
        }
    }

    fn row<'a, T>(&self, plane: &'a [T], z: usize, y: usize) -> &'a [T] {
        let at = (z * self.ph + y) * self.pw;
        &plane[at..at + self.pw]
    }

    fn padded_plane(&self) -> usize {
        self.pd * self.ph * self.pw
    }
}

/// Reorders every padded row as `[x0, x2, x4, .., x1, x3, ..]`.
fn phase<T: Scalar>(g: &Geometry, padded: &[T]) -> Vec<T> {
    if g.stride == 1 {
        return padded.to_vec();
    }
    let even = g.pw.div_ceil(2);
    let mut out = vec![T::zero(); padded.len()];
    for (src, dst) in padded.chunks_exact(g.pw).zip(out.chunks_exact_mut(g.pw)) {
        for (x, &v) in src.iter().enumerate() {
            dst[if x % 2 == 0 { x / 2 } else { even + x / 2 }] = v;
        }
    }
    out
}

fn unphase<T: Scalar>(g: &Geometry, phased: Vec<T>) -> Vec<T> {
    if g.stride == 1 {
        return phased;
    }
    let even = g.pw.div_ceil(2);
    let mut out = vec![T::zero(); phased.len()];
    for (src, dst) in phased.chunks_exact(g.pw).zip(out.chunks_exact_mut(g.pw)) {
        for (x, d) in dst.iter_mut().enumerate() {
            *d = src[if x % 2 == 0 { x / 2 } else { even + x / 2 }];
        }
    }
    out
}

pub(super) fn forward<T: Scalar>(g: &Geometry, weight: &[T], bias: &[T], padded: &[T]) -> Vec<T> {
    let (inp, out, s) = (g.input, g.out, g.stride);
    let xs = phase(g, padded);
    let [t0, t1, t2] = g.taps();
    let plane_in = g.padded_plane();
    let ow = out.w;
    let mut y = vec![T::zero(); out.numel()];
    y.par_chunks_mut(out.spatial()).enumerate().for_each(|(idx, plane)| {
        let (n, o) = (idx / out.c, idx % out.c);
        plane.fill(bias[o]);
        for (zo, slice) in plane.chunks_exact_mut(out.h * ow).enumerate() {
            for i in 0..inp.c {
                let src = &xs[(n * inp.c + i) * plane_in..][..plane_in];
                let w = &weight[(o * inp.c + i) * TAPS..][..TAPS];
                for kz in 0..KERNEL {
                    for ky in 0..KERNEL {
                        let k = (kz * KERNEL + ky) * KERNEL;
                        let (w0, w1, w2) = (w[k], w[k + 1], w[k + 2]);
                        for (yo, dst) in slice.chunks_exact_mut(ow).enumerate() {
                            let row = g.row(src, zo * s + kz, yo * s + ky);
                            let (a, b, c) = (&row[t0..t0 + ow], &row[t1..t1 + ow], &row[t2..t2 + ow]);
                            for (((d, &a), &b), &c) in dst.iter_mut().zip(a).zip(b).zip(c) {
                                *d += w0 * a + w1 * b + w2 * c;
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Adds `g·a`, `g·b`, `g·c` into three lane-wise accumulators.
#[inline]
fn dot3<T: Scalar>(g: &[T], a: &[T], b: &[T], c: &[T], acc: &mut [[T; LANES]; 3]) {
    let n = g.len();
    let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
    let full = n - n % LANES;
    for j in (0..full).step_by(LANES) {
        let (gj, aj, bj, cj) = (&g[j..j + LANES], &a[j..j + LANES], &b[j..j + LANES], &c[j..j + LANES]);
        for l in 0..LANES {
            acc[0][l] += gj[l] * aj[l];
            acc[1][l] += gj[l] * bj[l];
            acc[2][l] += gj[l] * cj[l];
        }
    }
    for j in full..n {
        acc[0][0] += g[j] * a[j];
        acc[1][0] += g[j] * b[j];
        acc[2][0] += g[j] * c[j];
    }
}

/// Returns `(grad_weight, grad_padded)`; the padded gradient is in natural
/// (unphased) row order.
pub(super) fn backward<T: Scalar>(g: &Geometry, weight: &[T], grad_y: &[T], padded: &[T]) -> (Vec<T>, Vec<T>) {
    let (inp, out, s) = (g.input, g.out, g.stride);
    let xs = phase(g, padded);
    let [t0, t1, t2] = g.taps();
    let plane_in = g.padded_plane();
    let (ow, osp) = (out.w, out.spatial());

    // One task per output channel; samples are folded in order inside it.
    let mut grad_w = vec![T::zero(); out.c * inp.c * TAPS];
    grad_w.par_chunks_mut(inp.c * TAPS).enumerate().for_each(|(o, gw)| {
        for i in 0..inp.c {
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    let mut acc = [[T::zero(); LANES]; 3];
                    for n in 0..out.n {
                        let src = &xs[(n * inp.c + i) * plane_in..][..plane_in];
                        let gplane = &grad_y[(n * out.c + o) * osp..][..osp];
                        for (zo, gslice) in gplane.chunks_exact(out.h * ow).enumerate() {
                            for (yo, grow) in gslice.chunks_exact(ow).enumerate() {
                                let row = g.row(src, zo * s + kz, yo * s + ky);
                                dot3(grow, &row[t0..], &row[t1..], &row[t2..], &mut acc);
                            }
                        }
                    }
                    let k = i * TAPS + (kz * KERNEL + ky) * KERNEL;
                    for (t, lanes) in acc.iter().enumerate() {
                        gw[k + t] = lanes.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
        }
    });

    let mut gxs = vec![T::zero(); xs.len()];
    gxs.par_chunks_mut(plane_in).enumerate().for_each(|(idx, gplane_x)| {
        let (n, i) = (idx / inp.c, idx % inp.c);
        for o in 0..out.c {
            let w = &weight[(o * inp.c + i) * TAPS..][..TAPS];
            let gplane = &grad_y[(n * out.c + o) * osp..][..osp];
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    let k = (kz * KERNEL + ky) * KERNEL;
                    let (w0, w1, w2) = (w[k], w[k + 1], w[k + 2]);
                    for (zo, gslice) in gplane.chunks_exact(out.h * ow).enumerate() {
                        for (yo, grow) in gslice.chunks_exact(ow).enumerate() {
                            let at = ((zo * s + kz) * g.ph + yo * s + ky) * g.pw;
                            let row = &mut gplane_x[at..at + g.pw];
                            for (d, &v) in row[t0..t0 + ow].iter_mut().zip(grow) {
                                *d += w0 * v;
                            }
                            for (d, &v) in row[t1..t1 + ow].iter_mut().zip(grow) {
                                *d += w1 * v;
                            }
                            for (d, &v) in row[t2..t2 + ow].iter_mut().zip(grow) {
                                *d += w2 * v;
                            }
                        }
                    }
                }
            }
        }
    });
    (grad_w, unphase(g, gxs))
}
