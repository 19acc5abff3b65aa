//! CT volume preprocessing: masking, isotropic resampling, in-plane
//! resizing, slice-bin averaging and intensity windowing.
//!
//! Interpolation is separable: a trilinear resample is three 1-D linear
//! passes, which gives the same values as the 8-corner formula while
//! touching each voxel once per axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AIR_HU: f32 = -1000.0;
pub const DEFAULT_TARGET_SHAPE: [usize; 3] = [110, 200, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intensity {
    Hu,
    Normalized,
}

/// Scalar grid indexed `(z, y, x)` with x fastest; spacing is mm per voxel
/// in the same axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: [usize; 3],
    spacing: [f32; 3],
    unit: Intensity,
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidShape(dims.to_vec()));
    }
    Ok(())
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: [usize; 3], spacing: [f32; 3], unit: Intensity) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::DegenerateVolume(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Volume {
            data,
            dims,
            spacing,
            unit,
        })
    }

    pub fn full(dims: [usize; 3], spacing: [f32; 3], value: f32, unit: Intensity) -> Result<Self> {
        check_dims(dims)?;
        Self::new(vec![value; dims.iter().product()], dims, spacing, unit)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        unit: Intensity,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(data, dims, spacing, unit)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn unit(&self) -> Intensity {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Single-sample, single-channel network input `[1, 1, z, y, x]`.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::from_vec(&[1, 1, d, h, w], self.data.clone()).expect("volume extents are valid")
    }
}

/// Binary grid paired with a [`Volume`] of the same extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    data: Vec<u8>,
    dims: [usize; 3],
}

impl MaskVolume {
    pub fn new(data: Vec<u8>, dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("mask {dims:?} has {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(MaskVolume { data, dims })
    }

    pub fn ones(dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        Self::new(vec![1; dims.iter().product()], dims)
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self::new(data, dims)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

pub fn apply_mask(v: &Volume, m: &MaskVolume, fill: f32) -> Result<Volume> {
    if v.dims != m.dims {
        return Err(Error::shape(format!(
            "mask {:?} does not match volume {:?}",
            m.dims, v.dims
        )));
    }
    let data = v
        .data
        .iter()
        .zip(&m.data)
        .map(|(&x, &keep)| if keep == 1 { x } else { fill })
        .collect();
    Ok(Volume { data, ..v.clone_meta() })
}

impl Volume {
    fn clone_meta(&self) -> Volume {
        Volume {
            data: Vec::new(),
            dims: self.dims,
            spacing: self.spacing,
            unit: self.unit,
        }
    }
}

/// Linear sampling plan for one output index: two source indices and the
/// weight of the second.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f64,
}

/// Clamps `pos` to `[0, len - 1]` and splits it into neighbours.
fn tap(pos: f64, len: usize) -> Tap {
    let last = (len - 1) as f64;
    let p = pos.clamp(0.0, last);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    Tap {
        i0,
        i1,
        t: p - i0 as f64,
    }
}

/// Never leaves `[min(a, b), max(a, b)]` and is exact when `a == b`.
pub(crate) fn lerp(a: f32, b: f32, t: f64) -> f32 {
    let a64 = f64::from(a);
    (a64 + (f64::from(b) - a64) * t) as f32
}

/// Linearly resamples one axis of a `(z, y, x)` grid. `pos(j)` is the
/// fractional source index for output index `j`.
pub(crate) fn resample_axis(
    data: &[f32],
    dims: [usize; 3],
    axis: usize,
    len: usize,
    pos: impl Fn(usize) -> f64,
) -> (Vec<f32>, [usize; 3]) {
    let taps: Vec<Tap> = (0..len).map(|j| tap(pos(j), dims[axis])).collect();
    let mut out_dims = dims;
    out_dims[axis] = len;
    let [_, oh, ow] = out_dims;
    let [_, h, w] = dims;
    let mut out = vec![0.0f32; out_dims.iter().product()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(z, slice)| {
        for y in 0..oh {
            for x in 0..ow {
                let v = match axis {
                    0 => {
                        let k = taps[z];
                        lerp(data[(k.i0 * h + y) * w + x], data[(k.i1 * h + y) * w + x], k.t)
                    }
                    1 => {
                        let k = taps[y];
                        lerp(data[(z * h + k.i0) * w + x], data[(z * h + k.i1) * w + x], k.t)
                    }
                    _ => {
                        let k = taps[x];
                        let row = (z * h + y) * w;
                        lerp(data[row + k.i0], data[row + k.i1], k.t)
                    }
                };
                slice[y * ow + x] = v;
            }
        }
    });
    (out, out_dims)
}

/// Resamples to `target` mm isotropic spacing with trilinear interpolation.
///
/// Output voxel `j` sits at physical offset `j·target` from the first input
/// voxel centre; positions past the last centre clamp to the edge.
pub fn resample_isotropic(v: &Volume, target: f32) -> Result<Volume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::config(format!("target spacing must be positive, got {target}")));
    }
    let mut ext = [0usize; 3];
    for a in 0..3 {
        let e = (v.dims[a] as f64 * f64::from(v.spacing[a]) / f64::from(target)).round();
        if e < 1.0 {
            return Err(Error::DegenerateVolume(format!(
                "axis {a} of {:?} at spacing {:?} resamples to {e} voxels",
                v.dims, v.spacing
            )));
        }
        ext[a] = e as usize;
    }
    let mut data = v.data.clone();
    let mut dims = v.dims;
    for a in 0..3 {
        if dims[a] == ext[a] && v.spacing[a] == target {
            continue;
        }
        let step = f64::from(target) / f64::from(v.spacing[a]);
        (data, dims) = resample_axis(&data, dims, a, ext[a], |j| j as f64 * step);
    }
    Ok(Volume {
        data,
        dims,
        spacing: [target; 3],
        unit: v.unit,
    })
}

/// Resizes every z-slice to `target_y × target_x` with bilinear sampling at
/// pixel centres (`src = (dst + 0.5)·in/out − 0.5`, clamped).
pub fn downsample_xy(v: &Volume, target_y: usize, target_x: usize) -> Result<Volume> {
    if target_y < 1 || target_x < 1 {
        return Err(Error::config(format!(
            "in-plane target {target_y}×{target_x} must be >= 1"
        )));
    }
    let [_, h, w] = v.dims;
    if h < 2 || w < 2 {
        return Err(Error::DegenerateVolume(format!("in-plane extent {h}×{w} is below 2×2")));
    }
    let centre = |len_in: usize, len_out: usize| {
        let r = len_in as f64 / len_out as f64;
        move |j: usize| (j as f64 + 0.5) * r - 0.5
    };
    let mut data = v.data.clone();
    let mut dims = v.dims;
    let mut spacing = v.spacing;
    if target_y != h {
        (data, dims) = resample_axis(&data, dims, 1, target_y, centre(h, target_y));
        spacing[1] *= h as f32 / target_y as f32;
    }
    if target_x != w {
        (data, dims) = resample_axis(&data, dims, 2, target_x, centre(w, target_x));
        spacing[2] *= w as f32 / target_x as f32;
    }
    Ok(Volume {
        data,
        dims,
        spacing,
        unit: v.unit,
    })
}

/// Bin boundaries `k_i = round(i·n/bins)` with halves rounded up.
pub fn z_bin_edges(n: usize, bins: usize) -> Vec<usize> {
    (0..=bins).map(|i| (2 * i * n + bins) / (2 * bins)).collect()
}

/// Averages contiguous slice bins down to `target_z` slices.
pub fn reduce_z_average(v: &Volume, target_z: usize) -> Result<Volume> {
    let [n, h, w] = v.dims;
    if target_z < 1 {
        return Err(Error::config("target slice count must be >= 1"));
    }
    if n < target_z {
        return Err(Error::InsufficientSlices {
            have: n,
            need: target_z,
        });
    }
    let edges = z_bin_edges(n, target_z);
    let plane = h * w;
    let mut data = vec![0.0f32; target_z * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(i, out)| {
        let (k0, k1) = (edges[i], edges[i + 1]);
        let mut acc = vec![0.0f64; plane];
        for z in k0..k1 {
            for (a, &x) in acc.iter_mut().zip(&v.data[z * plane..(z + 1) * plane]) {
                *a += f64::from(x);
            }
        }
        let count = (k1 - k0) as f64;
        for (o, a) in out.iter_mut().zip(acc) {
            *o = (a / count) as f32;
        }
    });
    let mut spacing = v.spacing;
    spacing[0] *= n as f32 / target_z as f32;
    Ok(Volume {
        data,
        dims: [target_z, h, w],
        spacing,
        unit: v.unit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Window {
    fn default() -> Self {
        Window { lo: AIR_HU, hi: 0.0 }
    }
}

impl Window {
    fn check(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::config(format!(
                "intensity window needs lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Clamps to the window and maps it onto `[0, 1]`.
    pub fn map(&self, hu: f32) -> f32 {
        let lo = f64::from(self.lo);
        let hi = f64::from(self.hi);
        ((f64::from(hu).clamp(lo, hi) - lo) / (hi - lo)) as f32
    }
}

/// Windows HU values into `[0, 1]`. Volumes already tagged normalized pass
/// through unchanged.
pub fn normalize_intensity(v: &Volume, window: Window) -> Result<Volume> {
    window.check()?;
    if v.unit == Intensity::Normalized {
        return Ok(v.clone());
    }
    Ok(Volume {
        data: v.data.iter().map(|&x| window.map(x)).collect(),
        unit: Intensity::Normalized,
        ..v.clone_meta()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Value written outside the lung mask, in HU.
    pub fill_hu: f32,
    pub target_spacing: f32,
    /// `(z, y, x)` output extent.
    pub target_shape: [usize; 3],
    pub window: Window,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            fill_hu: AIR_HU,
            target_spacing: 1.0,
            target_shape: DEFAULT_TARGET_SHAPE,
            window: Window::default(),
        }
    }
}

/// mask → isotropic resample → in-plane resize → slice averaging → window.
pub fn preprocess_pipeline(v: &Volume, m: &MaskVolume, config: &PreprocessConfig) -> Result<Volume> {
    config.window.check()?;
    let fill = match v.unit {
        Intensity::Hu => config.fill_hu,
        Intensity::Normalized => config.window.map(config.fill_hu),
    };
    let [tz, ty, tx] = config.target_shape;
    let masked = apply_mask(v, m, fill)?;
    let iso = resample_isotropic(&masked, config.target_spacing)?;
    let planar = downsample_xy(&iso, ty, tx)?;
    let reduced = reduce_z_average(&planar, tz)?;
    normalize_intensity(&reduced, config.window)
}
