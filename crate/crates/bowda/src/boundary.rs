//! Boundary geometry: surface extraction, contour weight maps, exact
//! Euclidean distance maps and boundary-gradient histograms.
//!
//! The canonical boundary of a binary mask is morphological: every foreground
//! voxel with a background face-neighbour (6-connectivity), where the volume
//! border counts as background. Sobel contours are only used to build the
//! smooth weight maps that modulate the boundary-weighted losses; they never
//! define point sets.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Voxel coordinates `(z, y, x)` of boundary points, in ascending scan order.
pub type BoundaryPoints = Vec<[usize; 3]>;

/// Foreground voxels with at least one of their 6 face-neighbours background
/// or outside the volume.
pub fn morphological_boundary(mask: &Mask) -> BoundaryPoints {
    let [d, h, w] = mask.dims();
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let exposed = (z == 0 || !mask.get(z - 1, y, x))
                    || (z + 1 == d || !mask.get(z + 1, y, x))
                    || (y == 0 || !mask.get(z, y - 1, x))
                    || (y + 1 == h || !mask.get(z, y + 1, x))
                    || (x == 0 || !mask.get(z, y, x - 1))
                    || (x + 1 == w || !mask.get(z, y, x + 1));
                if exposed {
                    points.push([z, y, x]);
                }
            }
        }
    }
    points
}

/// Gradient magnitude of the mask under 3x3x3 Sobel operators, normalized so
/// the maximum is 1 whenever any transition exists.
///
/// Sampling clamps to the edge voxels, so a constant mask (all background or
/// all foreground) has zero response everywhere and the result is invariant
/// under mask complement.
pub fn sobel_contour(mask: &Mask) -> Volume {
    // Separable taps: derivative [-1, 0, 1] along the gradient axis,
    // smoothing [1, 2, 1] along the other two.
    const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

    let [d, h, w] = mask.dims();
    let vol = mask.as_volume();
    let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };
    let mut mag = vec![0.0f64; d * h * w];
    let mut max = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut gz = 0.0f64;
                let mut gy = 0.0f64;
                let mut gx = 0.0f64;
                for (oz, (&dz, &sz)) in DERIV.iter().zip(&SMOOTH).enumerate() {
                    let iz = clamp(z as isize + oz as isize - 1, d);
                    for (oy, (&dy, &sy)) in DERIV.iter().zip(&SMOOTH).enumerate() {
                        let iy = clamp(y as isize + oy as isize - 1, h);
                        for (ox, (&dx, &sx)) in DERIV.iter().zip(&SMOOTH).enumerate() {
                            let ix = clamp(x as isize + ox as isize - 1, w);
                            let m = f64::from(vol.get(iz, iy, ix));
                            if m == 0.0 {
                                continue;
                            }
                            gz += dz * sy * sx * m;
                            gy += sz * dy * sx * m;
                            gx += sz * sy * dx * m;
                        }
                    }
                }
                let g = (gz * gz + gy * gy + gx * gx).sqrt();
                let i = (z * h + y) * w + x;
                mag[i] = g;
                if g > max {
                    max = g;
                }
            }
        }
    }
    if max > 0.0 {
        for v in &mut mag {
            *v /= max;
        }
    }
    let values = mag.into_iter().map(|v| v as f32).collect();
    Volume::new(mask.dims(), mask.spacing(), values).expect("same geometry")
}

/// The normalized 3x3 Gaussian used for in-plane contour smoothing
/// (zero mean, variance 0.64): centre 0.2725, edges 0.1248, corners 0.0571.
fn gaussian_kernel_3x3() -> [[f64; 3]; 3] {
    let mut k = [[0.0f64; 3]; 3];
    let mut sum = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let r2 = ((dy as f64) - 1.0).powi(2) + ((dx as f64) - 1.0).powi(2);
            *v = (-r2 / (2.0 * 0.64)).exp();
            sum += *v;
        }
    }
    for row in &mut k {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Smooths each axial slice with the normalized 3x3 Gaussian (zero-padded);
/// slices do not mix.
pub fn gaussian_smooth_slices(vol: &Volume) -> Volume {
    let k = gaussian_kernel_3x3();
    let [d, h, w] = vol.dims();
    let mut out = Volume::zeros(vol.dims(), vol.spacing()).expect("same geometry");
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (oy, row) in k.iter().enumerate() {
                    let iy = y as isize + oy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for (ox, &kv) in row.iter().enumerate() {
                        let ix = x as isize + ox as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += kv * f64::from(vol.get(z, iy as usize, ix as usize));
                    }
                }
                out.set(z, y, x, acc as f32);
            }
        }
    }
    out
}

/// Contour weight map for the boundary-weighted losses: Sobel gradient
/// magnitude smoothed in-plane by the 3x3 Gaussian. Non-negative, zero away
/// from label transitions.
pub fn boundary_weight_map(mask: &Mask) -> Volume {
    gaussian_smooth_slices(&sobel_contour(mask))
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest
/// morphological-boundary voxel centre of `mask`.
///
/// Separable lower-envelope transform with nearest-site propagation; the
/// final value is re-evaluated from the winning site, so it matches a
/// brute-force scan bit for bit. Errors if the mask has no boundary.
pub fn distance_map(mask: &Mask) -> Result<Volume> {
    let boundary = morphological_boundary(mask);
    distance_map_from_points(mask.dims(), mask.spacing(), &boundary)
}

/// [`distance_map`] seeded on an explicit point set.
pub fn distance_map_from_points(
    dims: [usize; 3],
    spacing: [f64; 3],
    boundary: &[[usize; 3]],
) -> Result<Volume> {
    let values = distance_values_from_points(dims, spacing, boundary)?;
    Volume::new(dims, spacing, values.iter().map(|&v| v as f32).collect())
}

/// Double-precision variant, for the surface-distance metrics whose oracles
/// are exact in f64.
pub fn distance_values_from_points(
    dims: [usize; 3],
    spacing: [f64; 3],
    boundary: &[[usize; 3]],
) -> Result<Vec<f64>> {
    if boundary.is_empty() {
        return Err(Error::Metric("distance map of an empty boundary".into()));
    }
    let [d, h, w] = dims;
    let n = d * h * w;
    // Running squared distance and the boundary voxel realizing it.
    let mut dist2 = vec![f64::INFINITY; n];
    let mut site: Vec<[u32; 3]> = vec![[0; 3]; n];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for &[z, y, x] in boundary {
        let i = idx(z, y, x);
        dist2[i] = 0.0;
        site[i] = [z as u32, y as u32, x as u32];
    }

    // Scratch reused across lines.
    let max_line = d.max(h).max(w);
    let mut f = vec![0.0f64; max_line];
    let mut s: Vec<[u32; 3]> = vec![[0; 3]; max_line];
    let mut verts = vec![0usize; max_line];
    let mut cuts = vec![0.0f64; max_line + 1];

    // Pass along each axis in turn: z, then y, then x.
    for axis in 0..3 {
        let (len, stride) = match axis {
            0 => (d, h * w),
            1 => (h, w),
            _ => (w, 1usize),
        };
        let lines: Vec<usize> = match axis {
            0 => (0..h * w).collect(),
            1 => (0..d)
                .flat_map(|z| (0..w).map(move |x| z * h * w + x))
                .collect(),
            _ => (0..d * h).map(|r| r * w).collect(),
        };
        let sp = spacing[axis];
        for base in lines {
            for i in 0..len {
                let j = base + i * stride;
                f[i] = dist2[j];
                s[i] = site[j];
            }
            envelope_1d(len, sp, &f, &s, &mut verts, &mut cuts, |i, best_d2, best_site| {
                let j = base + i * stride;
                dist2[j] = best_d2;
                site[j] = best_site;
            });
        }
    }

    // Exact re-evaluation from the winning site, in fixed z,y,x order --
    // identical to the expression a brute-force scan evaluates.
    let mut values = vec![0.0f64; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                let sref = site[i];
                let dz = (z as f64 - f64::from(sref[0])) * spacing[0];
                let dy = (y as f64 - f64::from(sref[1])) * spacing[1];
                let dx = (x as f64 - f64::from(sref[2])) * spacing[2];
                values[i] = (dz * dz + dy * dy + dx * dx).sqrt();
            }
        }
    }
    Ok(values)
}

/// One 1-D lower-envelope pass over parabolas rooted at `(i * sp, f[i])`.
fn envelope_1d(
    len: usize,
    sp: f64,
    f: &[f64],
    s: &[[u32; 3]],
    verts: &mut [usize],
    cuts: &mut [f64],
    mut emit: impl FnMut(usize, f64, [u32; 3]),
) {
    let pos = |i: usize| i as f64 * sp;
    let mut k = 0usize; // number of parabolas on the envelope
    for q in 0..len {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k == 0 {
                verts[0] = q;
                cuts[0] = f64::NEG_INFINITY;
                cuts[1] = f64::INFINITY;
                k = 1;
                break;
            }
            let p = verts[k - 1];
            // Intersection of parabolas rooted at p and q (q to the right).
            let sx = (f[q] + pos(q) * pos(q) - (f[p] + pos(p) * pos(p)))
                / (2.0 * pos(q) - 2.0 * pos(p));
            if sx <= cuts[k - 1] {
                k -= 1; // parabola p is everywhere dominated; drop it
            } else {
                verts[k] = q;
                cuts[k] = sx;
                cuts[k + 1] = f64::INFINITY;
                k += 1;
                break;
            }
        }
    }
    if k == 0 {
        // No finite parabola on this line; leave infinities in place.
        for i in 0..len {
            emit(i, f64::INFINITY, [0; 3]);
        }
        return;
    }
    let mut j = 0usize;
    for i in 0..len {
        let x = pos(i);
        while cuts[j + 1] < x {
            j += 1;
        }
        let v = verts[j];
        let dx = x - pos(v);
        emit(i, dx * dx + f[v], s[v]);
    }
}

/// Histogram of intensity-gradient magnitudes sampled at the boundary of
/// `mask`, with `bins` equal-width bins spanning `[0, max]`.
#[derive(Debug, Clone)]
pub struct BoundaryHistogram {
    /// `bins + 1` ascending bin edges.
    pub edges: Vec<f64>,
    /// Per-bin counts; they sum to the number of boundary points.
    pub counts: Vec<usize>,
    /// Mean gradient magnitude over the boundary points.
    pub mean: f64,
}

impl BoundaryHistogram {
    /// Renders `bin_lower,bin_upper,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Central-difference gradient magnitude of `vol` (physical units, clamped at
/// the volume border) histogrammed over the boundary points of `mask`.
pub fn boundary_gradient_histogram(
    vol: &Volume,
    mask: &Mask,
    bins: usize,
) -> Result<BoundaryHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if vol.dims() != mask.dims() {
        return Err(Error::Geometry(format!(
            "volume dims {:?} != mask dims {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    let points = morphological_boundary(mask);
    if points.is_empty() {
        return Err(Error::Metric("histogram of an empty boundary".into()));
    }
    let [d, h, w] = vol.dims();
    let sp = vol.spacing();
    let mut mags = Vec::with_capacity(points.len());
    for &[z, y, x] in &points {
        let gz = (f64::from(vol.get((z + 1).min(d - 1), y, x))
            - f64::from(vol.get(z.saturating_sub(1), y, x)))
            / (2.0 * sp[0]);
        let gy = (f64::from(vol.get(z, (y + 1).min(h - 1), x))
            - f64::from(vol.get(z, y.saturating_sub(1), x)))
            / (2.0 * sp[1]);
        let gx = (f64::from(vol.get(z, y, (x + 1).min(w - 1)))
            - f64::from(vol.get(z, y, x.saturating_sub(1))))
            / (2.0 * sp[2]);
        mags.push((gz * gz + gy * gy + gx * gx).sqrt());
    }
    let max = mags.iter().cloned().fold(0.0f64, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &m in &mags {
        let mut b = ((m / hi) * bins as f64) as usize;
        if b >= bins {
            b = bins - 1; // the maximum lands in the last bin
        }
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let mean = mags.iter().sum::<f64>() / mags.len() as f64;
    Ok(BoundaryHistogram { edges, counts, mean })
}
