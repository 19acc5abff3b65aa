use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{lerp, resample_axis, Volume};

/// A fixed augmentation attached to a manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Augment {
    /// Mirror along x.
    Flip,
    /// In-plane rotation about the slice centre.
    Rotate { degrees: f64 },
    /// Keep `fraction` of every axis, placed by `offset` (0 = low edge,
    /// 1 = high edge), then resize back to the original extent.
    Crop { fraction: f64, offset: [f64; 3] },
}

/// Sampling ranges for randomized directives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub min_crop_fraction: f64,
    /// Crop offsets are drawn from `0.5 ± crop_jitter`.
    pub crop_jitter: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation_deg: 15.0,
            min_crop_fraction: 0.85,
            crop_jitter: 0.25,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.max_rotation_deg)
            || !(self.min_crop_fraction > 0.0 && self.min_crop_fraction <= 1.0)
            || !(0.0..=0.5).contains(&self.crop_jitter)
        {
            return Err(Error::config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    /// Draws one of the three families uniformly, then its parameters.
    pub fn sample(&self, rng: &mut impl Rng) -> Augment {
        match rng.random_range(0..3) {
            0 => Augment::Flip,
            1 => Augment::Rotate {
                degrees: rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg),
            },
            _ => Augment::Crop {
                fraction: rng.random_range(self.min_crop_fraction..=1.0),
                offset: [(); 3].map(|_| rng.random_range(0.5 - self.crop_jitter..=0.5 + self.crop_jitter)),
            },
        }
    }

    pub fn contains(&self, a: &Augment) -> bool {
        match *a {
            Augment::Flip => true,
            Augment::Rotate { degrees } => degrees.abs() <= self.max_rotation_deg,
            Augment::Crop { fraction, offset } => {
                (self.min_crop_fraction..=1.0).contains(&fraction)
                    && offset.iter().all(|o| (o - 0.5).abs() <= self.crop_jitter + 1e-12)
            }
        }
    }
}

/// Applies `a`; the output always has the input's extents, and every value
/// lies between the input's minimum and maximum.
pub fn augment(v: &Volume, a: &Augment) -> Result<Volume> {
    match *a {
        Augment::Flip => Ok(flip_x(v)),
        Augment::Rotate { degrees } => {
            if !degrees.is_finite() {
                return Err(Error::config(format!("rotation angle {degrees} is not finite")));
            }
            Ok(rotate_yx(v, degrees))
        }
        Augment::Crop { fraction, offset } => {
            if !(fraction > 0.0 && fraction <= 1.0) || offset.iter().any(|o| !(0.0..=1.0).contains(o)) {
                return Err(Error::config(format!(
                    "crop fraction {fraction} must be in (0, 1] and offsets {offset:?} in [0, 1]"
                )));
            }
            crop_resize(v, fraction, offset)
        }
    }
}

fn flip_x(v: &Volume) -> Volume {
    let w = v.dims()[2];
    let mut out = v.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

fn rotate_yx(v: &Volume, degrees: f64) -> Volume {
    let [_, h, w] = v.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = v.data();
    let mut out = v.clone();
    for (z, slice) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let plane = &src[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = (cos * dy + sin * dx + cy).clamp(0.0, (h - 1) as f64);
                let sx = (-sin * dy + cos * dx + cx).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                slice[y * w + x] = lerp(top, bottom, ty);
            }
        }
    }
    out
}

fn crop_resize(v: &Volume, fraction: f64, offset: [f64; 3]) -> Result<Volume> {
    let dims = v.dims();
    let mut data = v.data().to_vec();
    let mut cur = dims;
    for a in 0..3 {
        let e = dims[a] as f64;
        let keep = fraction * e;
        let start = offset[a] * (e - keep);
        let scale = keep / e;
        (data, cur) = resample_axis(&data, cur, a, dims[a], |j| start + (j as f64 + 0.5) * scale - 0.5);
    }
    Volume::new(data, cur, v.spacing(), v.unit())
}
