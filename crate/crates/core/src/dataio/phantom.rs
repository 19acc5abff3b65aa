//! Synthetic lung phantoms with a known disease label.
//!
//! A noisy ellipsoidal "lung" sits on a zero background. Dark spherical
//! blobs are carved into it; the label is 1 exactly when the carved share
//! of lung voxels exceeds `tau`. Each phantom first draws an intended class
//! and then places blobs so the fraction lands at least `margin·tau` away
//! from the threshold when the blob budget allows, which keeps the two
//! classes separable and the class balance near `positive_rate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Intensity, MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Blobs scattered uniformly through the lung.
    A,
    /// Blobs gathered around one random focus.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `(z, y, x)` voxels.
    pub extent: [usize; 3],
    /// Voxel spacing recorded on the volume, in mm.
    pub spacing: [f32; 3],
    pub mu_lung: f32,
    pub noise_sigma: f32,
    /// Lung semi-axis as a fraction of the extent on each axis.
    pub lung_fraction: f64,
    /// Relative per-phantom jitter of the semi-axes.
    pub lung_jitter: f64,
    /// Inclusive range.
    pub blob_count: [usize; 2],
    /// Inclusive range, in voxels.
    pub blob_radius: [f64; 2],
    pub blob_intensity: f32,
    pub tau: f64,
    pub margin: f64,
    pub positive_rate: f64,
    /// Task B focus spread, as a fraction of the lung semi-axes.
    pub cluster_spread: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            extent: [64, 64, 64],
            spacing: [1.0; 3],
            mu_lung: 0.6,
            noise_sigma: 0.04,
            lung_fraction: 0.42,
            lung_jitter: 0.04,
            blob_count: [2, 30],
            blob_radius: [3.0, 6.0],
            blob_intensity: 0.12,
            tau: 0.06,
            margin: 0.3,
            positive_rate: 0.5,
            cluster_spread: 0.5,
            task: Task::A,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.extent.contains(&0) {
            return bad(format!("phantom extent {:?} must be positive", self.extent));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("phantom spacing {:?} must be positive", self.spacing));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} must lie in (0, 1)", self.tau));
        }
        let [r0, r1] = self.blob_radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad(format!(
                "blob radius range {:?} needs 1 <= min <= max",
                self.blob_radius
            ));
        }
        let smallest = *self.extent.iter().min().expect("three axes") as f64;
        if 2.0 * r1 > smallest {
            return bad(format!("blob radius {r1} does not fit extent {:?}", self.extent));
        }
        if self.blob_count[0] > self.blob_count[1] {
            return bad(format!("blob count range {:?} is inverted", self.blob_count));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) || !(0.0..1.0).contains(&self.margin) {
            return bad("positive_rate must be in [0, 1] and margin in [0, 1)".into());
        }
        if !(self.lung_fraction > 0.0 && self.lung_fraction <= 0.5) || !(0.0..0.5).contains(&self.lung_jitter) {
            return bad("lung_fraction must be in (0, 0.5] and lung_jitter in [0, 0.5)".into());
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.mu_lung) || !unit.contains(&self.blob_intensity) || !(self.noise_sigma >= 0.0) {
            return bad("intensities must be in [0, 1] and noise_sigma >= 0".into());
        }
        if !(self.cluster_spread > 0.0) {
            return bad("cluster_spread must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    /// Lung ellipsoid.
    pub mask: MaskVolume,
    pub label: u8,
    /// Carved lung voxels over lung voxels.
    pub blob_fraction: f64,
    pub blobs: usize,
}

/// Lattice points within `radius` of a lattice point.
pub fn sphere_voxel_count(radius: f64) -> usize {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut n = 0;
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                if ((z * z + y * y + x * x) as f64) <= r2 {
                    n += 1;
                }
            }
        }
    }
    n
}

struct Lung {
    centre: [f64; 3],
    semi: [f64; 3],
}

impl Lung {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn uniform_point(&self, rng: &mut impl Rng) -> [f64; 3] {
        loop {
            let u: [f64; 3] = [(); 3].map(|_| rng.random_range(-1.0..=1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                return [0, 1, 2].map(|a| self.centre[a] + u[a] * self.semi[a]);
            }
        }
    }
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let dims = cfg.extent;
    let [d, h, w] = dims;

    let lung = Lung {
        centre: dims.map(|e| (e as f64 - 1.0) / 2.0),
        semi: dims.map(|e| {
            let j = 1.0 + cfg.lung_jitter * rng.random_range(-1.0..=1.0);
            (cfg.lung_fraction * e as f64 * j).max(1.0)
        }),
    };
    let mut in_lung = vec![false; d * h * w];
    let mut lung_voxels = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if lung.contains([z as f64, y as f64, x as f64]) {
                    in_lung[(z * h + y) * w + x] = true;
                    lung_voxels += 1;
                }
            }
        }
    }
    if lung_voxels == 0 {
        return Err(Error::config(format!("lung ellipsoid is empty at extent {dims:?}")));
    }

    let positive = rng.random_bool(cfg.positive_rate);
    let budget = rng.random_range(cfg.blob_count[0]..=cfg.blob_count[1]);
    let (lo, hi) = (cfg.tau * (1.0 - cfg.margin), cfg.tau * (1.0 + cfg.margin));
    let focus = lung.uniform_point(&mut rng);
    let spread = Normal::new(0.0, cfg.cluster_spread).expect("spread validated");

    let mut carved = vec![false; d * h * w];
    let mut carved_count = 0usize;
    let mut blobs = 0usize;
    let max_blobs = if positive { cfg.blob_count[1] } else { budget };
    // Bounded so a negative phantom whose budget cannot be placed below
    // the threshold still terminates.
    let mut attempts = 0;
    while blobs < max_blobs && attempts < 8 * cfg.blob_count[1].max(1) {
        attempts += 1;
        if positive && blobs >= budget && carved_count as f64 / lung_voxels as f64 > hi {
            break;
        }
        let radius = rng.random_range(cfg.blob_radius[0]..=cfg.blob_radius[1]);
        let centre = match cfg.task {
            Task::A => lung.uniform_point(&mut rng),
            Task::B => loop {
                let p = [0, 1, 2].map(|a| focus[a] + spread.sample(&mut rng) * lung.semi[a]);
                if lung.contains(p) {
                    break p;
                }
            },
        };
        let sphere = sphere_voxels(centre, radius, dims, &in_lung);
        let added = sphere.iter().filter(|&&i| !carved[i]).count();
        if !positive && (carved_count + added) as f64 / lung_voxels as f64 > lo {
            continue;
        }
        for i in sphere {
            carved[i] = true;
        }
        carved_count += added;
        blobs += 1;
    }
    let blob_fraction = carved_count as f64 / lung_voxels as f64;

    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(f32::MIN_POSITIVE)).expect("sigma validated");
    let mut data = vec![0.0f32; d * h * w];
    for (i, v) in data.iter_mut().enumerate() {
        if in_lung[i] {
            let base = if carved[i] { cfg.blob_intensity } else { cfg.mu_lung };
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            *v = (base + n).clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        volume: Volume::new(data, dims, cfg.spacing, Intensity::Normalized)?,
        mask: MaskVolume::new(in_lung.iter().map(|&b| u8::from(b)).collect(), dims)?,
        label: u8::from(blob_fraction > cfg.tau),
        blob_fraction,
        blobs,
    })
}

/// Flat indices of lung voxels within `radius` of `centre`.
fn sphere_voxels(centre: [f64; 3], radius: f64, dims: [usize; 3], in_lung: &[bool]) -> Vec<usize> {
    let [_, h, w] = dims;
    let range = |a: usize| {
        let lo = (centre[a] - radius).ceil().max(0.0) as usize;
        let hi = ((centre[a] + radius).floor().max(0.0) as usize).min(dims[a] - 1);
        lo..=hi
    };
    let r2 = radius * radius;
    let mut out = Vec::new();
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let d2 = [z, y, x]
                    .iter()
                    .zip(centre)
                    .map(|(&p, c)| (p as f64 - c).powi(2))
                    .sum::<f64>();
                let i = (z * h + y) * w + x;
                if d2 <= r2 && in_lung[i] {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Phantoms for `indices`, generated in parallel, returned in index order.
pub fn generate_phantoms(cfg: &PhantomConfig, indices: std::ops::Range<u64>) -> Result<Vec<Phantom>> {
    cfg.validate()?;
    indices.into_par_iter().map(|i| generate_phantom(cfg, i)).collect()
}
