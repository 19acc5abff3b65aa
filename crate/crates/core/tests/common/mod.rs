//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxres::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-scale..scale))).collect()).unwrap()
}

/// `Σ y·r`: a scalar probe whose gradient with respect to `y` is `r`.
pub fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Central-difference step.
pub const H: f64 = 1e-4;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates whose ±h probe straddles a ReLU kink.
    pub skipped: usize,
    pub worst: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic[i]` against the central difference of `f(i, δ)`,
/// the loss with coordinate `i` shifted by `δ`.
///
/// The loss is also sampled at `±h/2`. On a smooth stretch the step-`h` and
/// step-`h/2` quotients agree to `O(h²)`, and the second differences scale
/// by exactly 4. When either pair disagrees by more than
/// `kink` (relative) a ReLU boundary lies inside the probe interval, no
/// difference quotient is meaningful there, and the coordinate is skipped.
pub fn fd_check(
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    f: impl Fn(usize, f64) -> f64,
    floor: f64,
    kink: f64,
) -> FdStats {
    let mut s = FdStats::default();
    let h2 = H / 2.0;
    for i in coords {
        let zero = f(i, 0.0);
        let (p1, m1, p2, m2) = (f(i, H), f(i, -H), f(i, h2), f(i, -h2));
        let central = (p1 - m1) / (2.0 * H);
        let half = (p2 - m2) / (2.0 * h2);
        let bend = ((p1 - 2.0 * zero + m1) - 4.0 * (p2 - 2.0 * zero + m2)) / H;
        let scale = central.abs().max(floor).max(1e-3);
        if (central - half).abs() > kink * scale || bend.abs() > kink * scale {
            s.skipped += 1;
            continue;
        }
        s.checked += 1;
        s.worst = s.worst.max(rel_err(analytic[i], central, floor));
    }
    s
}

/// Textbook seven-loop 3×3×3 convolution with one voxel of zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, ci, d, h, wd] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let co = w.shape()[0];
    let (od, oh, ow) = (d.div_ceil(stride), h.div_ceil(stride), wd.div_ceil(stride));
    let xv = |bn: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[(((bn * ci + c) * d + z as usize) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; n * co * od * oh * ow];
    for bn in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for k in 0..27 {
                                let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
                                let wv = w.data()[(o * ci + c) * 27 + k];
                                acc += wv
                                    * xv(
                                        bn,
                                        c,
                                        (z * stride + kz) as isize - 1,
                                        (y * stride + ky) as isize - 1,
                                        (xx * stride + kx) as isize - 1,
                                    );
                            }
                        }
                        out[(((bn * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, od, oh, ow], out).unwrap()
}

/// Brute-force Mann–Whitney pair count.
pub fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// One randomized convolution case checked against [`naive_conv`]: returns
/// a description and the worst per-element error relative to
/// `max(|oracle|, 1)`.
pub fn conv_oracle_case(seed: u64, algo: voxres::layers::Algorithm) -> (String, f64) {
    use voxres::layers::{Conv3d, Stride};
    let mut r = rng(seed);
    let n = r.random_range(1..=2);
    let ci = r.random_range(1..=5);
    let co = r.random_range(1..=4);
    let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=9));
    let stride = if r.random_bool(0.5) { Stride::Two } else { Stride::One };
    let x: Tensor<f32> = random_tensor(&[n, ci, dims[0], dims[1], dims[2]], &mut r, 1.0);
    let w: Tensor<f32> = random_tensor(&[co, ci, 3, 3, 3], &mut r, 0.5);
    let b: Tensor<f32> = random_tensor(&[co], &mut r, 0.5);
    let conv = Conv3d::new(w.clone(), b.clone(), stride).unwrap();
    let (y, _) = conv.forward_with(&x, algo).unwrap();
    let want = naive_conv(&x.cast(), &w.cast(), &b.cast(), stride.get());
    assert_eq!(y.shape(), want.shape(), "seed {seed}");
    let worst = y
        .data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| rel_err(a as f64, b, 1.0))
        .fold(0.0, f64::max);
    (
        format!("n={n} ci={ci} co={co} dims={dims:?} stride={}", stride.get()),
        worst,
    )
}
