//! Training-time sampling and test-time sliding-window inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Sub-volume size drawn for each training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub dims: [usize; 3],
}

impl CropSpec {
    pub fn desk() -> Self {
        CropSpec { dims: [8, 32, 32] }
    }

    pub fn full() -> Self {
        CropSpec { dims: [16, 96, 96] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("crop dims {:?} contain zero", self.dims)));
        }
        Ok(())
    }
}

/// Window and stride for overlapped inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl WindowSpec {
    pub fn desk() -> Self {
        WindowSpec { window: [8, 32, 32], stride: [4, 16, 16] }
    }

    pub fn full() -> Self {
        WindowSpec { window: [16, 96, 96], stride: [8, 48, 48] }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.window[a] {
                return Err(Error::Config(format!(
                    "window spec axis {a}: stride {} outside (0, window {}]",
                    self.stride[a], self.window[a]
                )));
            }
        }
        Ok(())
    }
}

/// Uniformly placed congruent crop of image and mask. Origins are drawn in
/// z, y, x order.
pub fn random_crop(
    vol: &Volume,
    mask: &Mask,
    spec: &CropSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Mask, [usize; 3])> {
    spec.validate()?;
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "random_crop: image {:?} vs mask {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let (d, c) = (vol.dims()[a], spec.dims[a]);
        if c > d {
            return Err(Error::Geometry(format!(
                "crop axis {a}: {c} exceeds volume extent {d}"
            )));
        }
        origin[a] = rng.random_range(0..=d - c);
    }
    Ok((vol.crop(origin, spec.dims)?, mask.crop(origin, spec.dims)?, origin))
}

/// One sampled spatial transform: `quarter_turns` CCW rotations in the
/// (height, width) plane followed by per-axis flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub quarter_turns: u8,
    pub flip: [bool; 3],
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { quarter_turns: 0, flip: [false; 3] };

    /// The transform that undoes this one (also rotation-then-flips form).
    pub fn inverse(&self) -> AugmentDraw {
        // Rotation and an in-plane flip anti-commute; an odd number of
        // in-plane flips therefore conjugates the rotation back to itself.
        let k = if self.flip[1] ^ self.flip[2] {
            self.quarter_turns % 4
        } else {
            (4 - self.quarter_turns % 4) % 4
        };
        AugmentDraw { quarter_turns: k, flip: self.flip }
    }
}

/// Samples rotation then z/y/x flips, in that order.
pub fn draw_augment(rng: &mut ChaCha8Rng) -> AugmentDraw {
    let quarter_turns = rng.random_range(0u8..4);
    let flip = [rng.random::<bool>(), rng.random::<bool>(), rng.random::<bool>()];
    AugmentDraw { quarter_turns, flip }
}

fn rotate_quarter(vol: &Volume) -> Volume {
    let [d, h, w] = vol.dims();
    let sp = vol.spacing();
    let mut out = Volume::zeros([d, w, h], [sp[0], sp[2], sp[1]]).expect("valid dims");
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                out.set(z, y, x, vol.get(z, x, w - 1 - y));
            }
        }
    }
    out
}

fn flip_axis(vol: &Volume, axis: usize) -> Volume {
    let dims = vol.dims();
    let mut out = Volume::zeros(dims, vol.spacing()).expect("valid dims");
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let src = match axis {
                    0 => [dims[0] - 1 - z, y, x],
                    1 => [z, dims[1] - 1 - y, x],
                    _ => [z, y, dims[2] - 1 - x],
                };
                out.set(z, y, x, vol.get(src[0], src[1], src[2]));
            }
        }
    }
    out
}

fn transform_volume(vol: &Volume, d: &AugmentDraw) -> Volume {
    let mut v = vol.clone();
    for _ in 0..d.quarter_turns % 4 {
        v = rotate_quarter(&v);
    }
    for (axis, &f) in d.flip.iter().enumerate() {
        if f {
            v = flip_axis(&v, axis);
        }
    }
    v
}

/// Applies the same transform to image and mask.
pub fn apply_augment(vol: &Volume, mask: &Mask, d: &AugmentDraw) -> Result<(Volume, Mask)> {
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "augment: image {:?} vs mask {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    let v = transform_volume(vol, d);
    let m = Mask::from_volume(transform_volume(mask.as_volume(), d))?;
    Ok((v, m))
}

/// Draws a transform and applies it.
pub fn augment(
    vol: &Volume,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Mask, AugmentDraw)> {
    let d = draw_augment(rng);
    let (v, m) = apply_augment(vol, mask, &d)?;
    Ok((v, m, d))
}

/// Window origins along one axis: stride steps plus a final origin clamped to
/// the end so every voxel is covered.
fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    debug_assert!(window <= dim);
    let mut origins = Vec::new();
    let mut o = 0usize;
    loop {
        if o + window >= dim {
            origins.push(dim - window);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

/// How many windows cover each voxel, in volume scan order.
pub fn coverage_counts(dims: [usize; 3], spec: &WindowSpec) -> Result<Vec<u32>> {
    spec.validate()?;
    for a in 0..3 {
        if spec.window[a] > dims[a] {
            return Err(Error::Geometry(format!(
                "coverage axis {a}: window {} exceeds extent {}",
                spec.window[a], dims[a]
            )));
        }
    }
    let per_axis: Vec<Vec<u32>> = (0..3)
        .map(|a| {
            let mut counts = vec![0u32; dims[a]];
            for o in axis_origins(dims[a], spec.window[a], spec.stride[a]) {
                for c in &mut counts[o..o + spec.window[a]] {
                    *c += 1;
                }
            }
            counts
        })
        .collect();
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push(per_axis[0][z] * per_axis[1][y] * per_axis[2][x]);
            }
        }
    }
    Ok(out)
}

/// Pads with replicated edge values so every axis reaches at least `dims`.
/// Returns the padded volume and the low-side padding amounts.
fn pad_to(vol: &Volume, dims: [usize; 3]) -> (Volume, [usize; 3]) {
    let vd = vol.dims();
    if (0..3).all(|a| vd[a] >= dims[a]) {
        return (vol.clone(), [0; 3]);
    }
    let mut lo = [0usize; 3];
    let mut nd = vd;
    for a in 0..3 {
        if vd[a] < dims[a] {
            let total = dims[a] - vd[a];
            lo[a] = total / 2;
            nd[a] = dims[a];
        }
    }
    let mut out = Volume::zeros(nd, vol.spacing()).expect("valid dims");
    for z in 0..nd[0] {
        let sz = z.saturating_sub(lo[0]).min(vd[0] - 1);
        for y in 0..nd[1] {
            let sy = y.saturating_sub(lo[1]).min(vd[1] - 1);
            for x in 0..nd[2] {
                let sx = x.saturating_sub(lo[2]).min(vd[2] - 1);
                out.set(z, y, x, vol.get(sz, sy, sx));
            }
        }
    }
    (out, lo)
}

/// Runs `predict` over overlapping windows and averages the overlaps.
///
/// Volumes smaller than the window are edge-padded for inference and the
/// result is cropped back. Windows are visited in fixed z, y, x origin order
/// and sums are accumulated in f64, so the result does not depend on how the
/// window set might be partitioned.
pub fn sliding_window_infer(
    vol: &Volume,
    spec: &WindowSpec,
    mut predict: impl FnMut(&Volume) -> Result<Volume>,
) -> Result<Volume> {
    spec.validate()?;
    let (work, lo) = pad_to(vol, spec.window);
    let dims = work.dims();
    let mut sum = vec![0.0f64; work.len()];
    let origins_z = axis_origins(dims[0], spec.window[0], spec.stride[0]);
    let origins_y = axis_origins(dims[1], spec.window[1], spec.stride[1]);
    let origins_x = axis_origins(dims[2], spec.window[2], spec.stride[2]);
    for &oz in &origins_z {
        for &oy in &origins_y {
            for &ox in &origins_x {
                let sub = work.crop([oz, oy, ox], spec.window)?;
                let pred = predict(&sub)?;
                if pred.dims() != spec.window {
                    return Err(Error::Shape(format!(
                        "prediction dims {:?} differ from window {:?}",
                        pred.dims(),
                        spec.window
                    )));
                }
                let pv = pred.values();
                let mut i = 0usize;
                for z in 0..spec.window[0] {
                    for y in 0..spec.window[1] {
                        let base = work.idx(oz + z, oy + y, ox);
                        for s in &mut sum[base..base + spec.window[2]] {
                            *s += pv[i] as f64;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    let counts = coverage_counts(dims, spec)?;
    debug_assert!(counts.iter().all(|&c| c >= 1));
    let avg: Vec<f32> =
        sum.iter().zip(&counts).map(|(&s, &c)| (s / c as f64) as f32).collect();
    let full = Volume::new(dims, work.spacing(), avg)?;
    if lo == [0; 3] && dims == vol.dims() {
        Ok(full)
    } else {
        full.crop(lo, vol.dims())
    }
}
