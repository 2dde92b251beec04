//! Volumes, masks and geometric resampling.
//!
//! A [`Volume`] is a dense 3-D scalar field with per-axis physical spacing.
//! Axis order is `(depth, height, width)` with depth slowest: the value at
//! `(z, y, x)` lives at linear index `(z * height + y) * width + x`. Values
//! are single precision; statistical reductions run in double precision.
//!
//! Resampling is voxel-center aligned: voxel `i` along an axis with spacing
//! `s` is centred at physical coordinate `(i + 0.5) * s`, and samples outside
//! the grid clamp to the nearest edge voxel rather than reading zeros.

use crate::error::{Error, Result};

/// Dense 3-D scalar field with physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f32>,
}

impl Volume {
    /// Builds a volume, validating geometry and buffer length.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!("non-positive spacing {spacing:?}")));
        }
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|p| p.checked_mul(dims[2]))
            .ok_or_else(|| Error::Geometry(format!("dims overflow {dims:?}")))?;
        if values.len() != len {
            return Err(Error::Geometry(format!(
                "buffer length {} does not match dims {:?} ({} voxels)",
                values.len(),
                dims,
                len
            )));
        }
        Ok(Volume { dims, spacing, values })
    }

    /// All-zero volume of the given geometry.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|p| p.checked_mul(dims[2]))
            .ok_or_else(|| Error::Geometry(format!("dims overflow {dims:?}")))?;
        Volume::new(dims, spacing, vec![0.0; len])
    }

    /// `(depth, height, width)` in voxels.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Per-axis voxel spacing in millimetres, `(depth, height, width)` order.
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Linear index of `(z, y, x)`.
    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.idx(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(z, y, x);
        self.values[i] = v;
    }

    /// Population mean and variance, accumulated in double precision.
    pub fn mean_var(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mut sum = 0.0f64;
        for &v in &self.values {
            sum += f64::from(v);
        }
        let mean = sum / n;
        let mut ss = 0.0f64;
        for &v in &self.values {
            let d = f64::from(v) - mean;
            ss += d * d;
        }
        (mean, ss / n)
    }

    /// Shifts to zero mean and scales to unit variance.
    ///
    /// Constant volumes carry no contrast to normalize and are rejected.
    pub fn znormalize(&self) -> Result<Volume> {
        let (mean, var) = self.mean_var();
        if var == 0.0 {
            return Err(Error::Geometry(
                "cannot z-normalize a constant volume (zero variance)".into(),
            ));
        }
        let inv_sd = 1.0 / var.sqrt();
        let values = self
            .values
            .iter()
            .map(|&v| ((f64::from(v) - mean) * inv_sd) as f32)
            .collect();
        Volume::new(self.dims, self.spacing, values)
    }

    /// Resamples onto `target_spacing` with trilinear interpolation.
    ///
    /// Output dims are `round(extent / target_spacing)` per axis (minimum 1),
    /// preserving physical extent. Sampling clamps to the edge voxels.
    pub fn resample_trilinear(&self, target_spacing: [f64; 3]) -> Result<Volume> {
        let out_dims = output_dims(self.dims, self.spacing, target_spacing)?;
        let mut out = Volume::zeros(out_dims, target_spacing)?;
        let [od, oh, ow] = out_dims;
        for z in 0..od {
            let (z0, z1, fz) = axis_weights(z, target_spacing[0], self.spacing[0], self.dims[0]);
            for y in 0..oh {
                let (y0, y1, fy) = axis_weights(y, target_spacing[1], self.spacing[1], self.dims[1]);
                for x in 0..ow {
                    let (x0, x1, fx) =
                        axis_weights(x, target_spacing[2], self.spacing[2], self.dims[2]);
                    let c000 = f64::from(self.get(z0, y0, x0));
                    let c001 = f64::from(self.get(z0, y0, x1));
                    let c010 = f64::from(self.get(z0, y1, x0));
                    let c011 = f64::from(self.get(z0, y1, x1));
                    let c100 = f64::from(self.get(z1, y0, x0));
                    let c101 = f64::from(self.get(z1, y0, x1));
                    let c110 = f64::from(self.get(z1, y1, x0));
                    let c111 = f64::from(self.get(z1, y1, x1));
                    let c00 = c000 + (c001 - c000) * fx;
                    let c01 = c010 + (c011 - c010) * fx;
                    let c10 = c100 + (c101 - c100) * fx;
                    let c11 = c110 + (c111 - c110) * fx;
                    let c0 = c00 + (c01 - c00) * fy;
                    let c1 = c10 + (c11 - c10) * fy;
                    let v = c0 + (c1 - c0) * fz;
                    out.set(z, y, x, v as f32);
                }
            }
        }
        Ok(out)
    }

    /// Extracts the sub-volume at `origin` with the given dims.
    pub fn crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + dims[a] > self.dims[a] {
                return Err(Error::Geometry(format!(
                    "crop origin {origin:?} + dims {dims:?} exceeds volume dims {:?}",
                    self.dims
                )));
            }
        }
        let mut out = Volume::zeros(dims, self.spacing)?;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let src = self.idx(origin[0] + z, origin[1] + y, origin[2]);
                let dst = out.idx(z, y, 0);
                out.values[dst..dst + dims[2]]
                    .copy_from_slice(&self.values[src..src + dims[2]]);
            }
        }
        Ok(out)
    }
}

/// Binary segmentation volume; every voxel is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    vol: Volume,
}

impl Mask {
    /// Validates that the volume is strictly binary.
    pub fn from_volume(vol: Volume) -> Result<Self> {
        for (i, &v) in vol.values().iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryMask { index: i, value: v });
            }
        }
        Ok(Mask { vol })
    }

    /// Thresholds a probability (or intensity) volume at `thr`: `v >= thr`
    /// becomes foreground.
    pub fn threshold(vol: &Volume, thr: f32) -> Mask {
        let values = vol.values().iter().map(|&v| f32::from(v >= thr)).collect();
        Mask {
            vol: Volume::new(vol.dims(), vol.spacing(), values).expect("same geometry"),
        }
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Ok(Mask { vol: Volume::zeros(dims, spacing)? })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.vol.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.vol.spacing()
    }

    pub fn as_volume(&self) -> &Volume {
        &self.vol
    }

    pub fn into_volume(self) -> Volume {
        self.vol
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.vol.get(z, y, x) != 0.0
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, fg: bool) {
        self.vol.set(z, y, x, f32::from(fg));
    }

    /// Number of foreground voxels.
    pub fn fg_count(&self) -> usize {
        self.vol.values().iter().filter(|&&v| v != 0.0).count()
    }

    /// Foreground volume in cubic millimetres.
    pub fn physical_volume(&self) -> f64 {
        let s = self.vol.spacing();
        self.fg_count() as f64 * s[0] * s[1] * s[2]
    }

    pub fn crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<Mask> {
        Ok(Mask { vol: self.vol.crop(origin, dims)? })
    }

    /// Resamples onto `target_spacing` with nearest-neighbour lookup.
    ///
    /// Each output voxel takes the value of the input voxel whose centre is
    /// closest; exact ties go to the lower index.
    pub fn resample_nearest(&self, target_spacing: [f64; 3]) -> Result<Mask> {
        let dims = self.vol.dims();
        let spacing = self.vol.spacing();
        let out_dims = output_dims(dims, spacing, target_spacing)?;
        let mut out = Mask::zeros(out_dims, target_spacing)?;
        let nearest = |i: usize, axis: usize| -> usize {
            let u = source_coord(i, target_spacing[axis], spacing[axis]);
            // ceil(u - 0.5) sends half-way ties to the lower index, matching
            // a first-minimum scan over voxel centres.
            let j = (u - 0.5).ceil();
            (j.max(0.0) as usize).min(dims[axis] - 1)
        };
        for z in 0..out_dims[0] {
            let sz = nearest(z, 0);
            for y in 0..out_dims[1] {
                let sy = nearest(y, 1);
                for x in 0..out_dims[2] {
                    let sx = nearest(x, 2);
                    out.set(z, y, x, self.get(sz, sy, sx));
                }
            }
        }
        Ok(out)
    }
}

/// Continuous source-grid coordinate of output voxel `i` (voxel-center model).
#[inline]
fn source_coord(i: usize, out_spacing: f64, in_spacing: f64) -> f64 {
    ((i as f64 + 0.5) * out_spacing) / in_spacing - 0.5
}

/// Floor/ceil neighbour indices and fractional weight along one axis,
/// clamped to the grid.
#[inline]
fn axis_weights(i: usize, out_spacing: f64, in_spacing: f64, n: usize) -> (usize, usize, f64) {
    let u = source_coord(i, out_spacing, in_spacing);
    if u <= 0.0 {
        return (0, 0, 0.0);
    }
    let hi = (n - 1) as f64;
    if u >= hi {
        return (n - 1, n - 1, 0.0);
    }
    let lo = u.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - lo)
}

fn output_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Geometry(format!("non-positive target spacing {target:?}")));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing[a];
        out[a] = ((extent / target[a]).round() as usize).max(1);
    }
    Ok(out)
}
