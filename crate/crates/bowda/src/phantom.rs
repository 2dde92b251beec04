//! Synthetic two-domain phantom volumes: deformed ellipsoids with
//! domain-specific boundary sharpness, texture and noise.
//!
//! The source preset produces sharper object boundaries than the target
//! preset, so the two domains differ both in intensity statistics and in
//! boundary quality — the gap the adaptation protocol is meant to close.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metaimage::{write_metaimage, write_metaimage_mask};
use crate::rng::derive_rng_indexed;
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid semi-axis range in voxels.
    pub radius_range: [f64; 2],
    /// Relative amplitude of the radial shape deformation.
    pub deform_amplitude: f64,
    /// Gaussian blur sigma (voxels) applied to the ideal two-level image.
    pub blur_sigma: f64,
    /// Additive Gaussian noise sigma.
    pub noise_sigma: f64,
    pub fg_level: f64,
    pub bg_level: f64,
    /// Amplitude of the low-frequency multiplicative texture field.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Sharp-boundary domain: higher contrast, mild blur and noise.
    pub fn source_desk(seed: u64) -> Self {
        DomainSpec {
            dims: [24, 32, 32],
            spacing: [1.5, 1.0, 1.0],
            radius_range: [6.0, 9.0],
            deform_amplitude: 0.15,
            blur_sigma: 0.6,
            noise_sigma: 0.10,
            fg_level: 1.0,
            bg_level: 0.25,
            texture_amplitude: 0.08,
            seed,
        }
    }

    /// Fuzzy-boundary domain: stronger blur, noise and texture, lower
    /// contrast, different voxel spacing.
    pub fn target_desk(seed: u64) -> Self {
        DomainSpec {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            radius_range: [6.0, 9.0],
            deform_amplitude: 0.15,
            blur_sigma: 1.7,
            noise_sigma: 0.22,
            fg_level: 0.85,
            bg_level: 0.30,
            texture_amplitude: 0.22,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config("phantom: zero dimension".into()));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("phantom: spacing must be finite and positive".into()));
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::Config(format!("phantom: bad radius range {:?}", self.radius_range)));
        }
        if !(0.0..1.0).contains(&self.deform_amplitude) {
            return Err(Error::Config("phantom: deform amplitude outside [0, 1)".into()));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 {
            return Err(Error::Config("phantom: negative sigma/amplitude".into()));
        }
        if self.fg_level <= self.bg_level {
            return Err(Error::Config("phantom: foreground level must exceed background".into()));
        }
        let max_extent = r1 * (1.0 + self.deform_amplitude);
        if self.dims.iter().any(|&d| (d as f64) < 2.0 * max_extent + 2.0) {
            return Err(Error::Geometry(format!(
                "phantom: radius {r1} (deformed up to {max_extent:.1}) cannot fit inside {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// One radial deformation mode: a product of cosines in the two spherical
/// angles.
struct DeformMode {
    amp: f64,
    p: f64,
    q: f64,
    phase_theta: f64,
    phase_phi: f64,
}

/// Separable Gaussian blur with edge clamping; sigma in voxels.
fn gaussian_blur(values: &mut Vec<f64>, dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut tmp = vec![0.0f64; values.len()];
    for (axis, len) in [(0usize, d), (1, h), (2, w)] {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        let c = [z as isize, y as isize, x as isize];
                        let mut s = c;
                        s[axis] = (c[axis] + off).clamp(0, len as isize - 1);
                        acc += kv * values[idx(s[0] as usize, s[1] as usize, s[2] as usize)];
                    }
                    tmp[idx(z, y, x)] = acc;
                }
            }
        }
        std::mem::swap(values, &mut tmp);
    }
}

/// Generates the phantom pair for `(spec.seed, index)`. Fully deterministic:
/// all randomness flows from one derived stream in a fixed draw order.
pub fn gen_phantom(spec: &DomainSpec, index: u64) -> Result<(Volume, Mask)> {
    spec.validate()?;
    let mut rng = derive_rng_indexed(spec.seed, "phantom", index);
    let [d, h, w] = spec.dims;
    let [r_lo, r_hi] = spec.radius_range;

    // Draw order: semi-axes, center, deformation modes, texture modes, noise.
    let radii = [
        rng.random_range(r_lo..=r_hi),
        rng.random_range(r_lo..=r_hi),
        rng.random_range(r_lo..=r_hi),
    ];
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let margin = radii[a] * (1.0 + spec.deform_amplitude) + 1.0;
        let lo = margin;
        let hi = spec.dims[a] as f64 - margin;
        if hi < lo {
            return Err(Error::Geometry(format!(
                "phantom: axis {a} extent {} too small for radius {}",
                spec.dims[a], radii[a]
            )));
        }
        center[a] = rng.random_range(lo..=hi);
    }
    let modes: Vec<DeformMode> = (0..3)
        .map(|_| DeformMode {
            amp: rng.random_range(0.0..spec.deform_amplitude / 3.0),
            p: rng.random_range(1..4u32) as f64,
            q: rng.random_range(1..4u32) as f64,
            phase_theta: rng.random_range(0.0..std::f64::consts::TAU),
            phase_phi: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    let mut mask = Mask::zeros(spec.dims, spec.spacing)?;
    let mut ideal = vec![spec.bg_level; d * h * w];
    let mut i = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = (z as f64 - center[0]) / radii[0];
                let dy = (y as f64 - center[1]) / radii[1];
                let dx = (x as f64 - center[2]) / radii[2];
                let rho = (dz * dz + dy * dy + dx * dx).sqrt();
                let inside = if rho == 0.0 {
                    true
                } else {
                    let theta = dy.atan2(dx);
                    let phi = (dz / rho).acos();
                    let bump: f64 = modes
                        .iter()
                        .map(|m| {
                            m.amp
                                * (m.p * theta + m.phase_theta).cos()
                                * (m.q * phi + m.phase_phi).cos()
                        })
                        .sum();
                    rho <= 1.0 + bump
                };
                if inside {
                    mask.set(z, y, x, true);
                    ideal[i] = spec.fg_level;
                }
                i += 1;
            }
        }
    }

    gaussian_blur(&mut ideal, spec.dims, spec.blur_sigma);

    // Low-frequency multiplicative texture: three random plane-wave cosines.
    if spec.texture_amplitude > 0.0 {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(1..3u32) as f64,
                    rng.random_range(1..3u32) as f64,
                    rng.random_range(1..3u32) as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        let mut i = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let g: f64 = waves
                        .iter()
                        .map(|&[fz, fy, fx, ph]| {
                            (std::f64::consts::TAU
                                * (fz * z as f64 / d as f64
                                    + fy * y as f64 / h as f64
                                    + fx * x as f64 / w as f64)
                                + ph)
                                .cos()
                                / 3.0
                        })
                        .sum();
                    ideal[i] *= 1.0 + spec.texture_amplitude * g;
                    i += 1;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("phantom noise: {e}")))?;
        for v in &mut ideal {
            *v += normal.sample(&mut rng);
        }
    }

    let vol = Volume::new(spec.dims, spec.spacing, ideal.iter().map(|&v| v as f32).collect())?;
    Ok((vol.znormalize()?, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub index: u64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec_digest: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == name)
    }

    /// Absolute (image, mask) paths, resolving relative entries against the
    /// manifest's own directory.
    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> (PathBuf, PathBuf) {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        (base.join(&entry.image), base.join(&entry.mask))
    }
}

fn digest_hex<C: Serialize>(value: &C) -> Result<String> {
    let d = crate::checkpoint::config_digest(value)?;
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `splits` (name, count) MetaImage pairs plus a manifest JSON; sample
/// indices run consecutively across splits so every volume is distinct.
pub fn gen_dataset(
    spec: &DomainSpec,
    splits: &[(&str, usize)],
    dir: &Path,
    prefix: &str,
) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut index = 0u64;
    for &(split, count) in splits {
        for _ in 0..count {
            let (vol, mask) = gen_phantom(spec, index)?;
            let image_name = format!("{prefix}_{split}_{index:03}.mhd");
            let mask_name = format!("{prefix}_{split}_{index:03}_mask.mhd");
            write_metaimage(dir.join(&image_name), &vol)?;
            write_metaimage_mask(dir.join(&mask_name), &mask)?;
            entries.push(ManifestEntry {
                image: image_name,
                mask: mask_name,
                index,
                split: split.to_string(),
            });
            index += 1;
        }
    }
    let manifest =
        DatasetManifest { seed: spec.seed, spec_digest: digest_hex(spec)?, entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { context: "manifest".into(), message: e.to_string() })?;
    let path = dir.join(format!("{prefix}_manifest.json"));
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest_bytes(bytes: &[u8]) -> Result<DatasetManifest> {
    serde_json::from_slice(bytes)
        .map_err(|e| Error::Json { context: "manifest".into(), message: e.to_string() })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_manifest_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::boundary_gradient_histogram;

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let spec = DomainSpec::source_desk(7);
        let (v1, m1) = gen_phantom(&spec, 3).unwrap();
        let (v2, m2) = gen_phantom(&spec, 3).unwrap();
        assert_eq!(v1.values(), v2.values());
        assert_eq!(m1.as_volume().values(), m2.as_volume().values());
        let (v3, _) = gen_phantom(&spec, 4).unwrap();
        assert_ne!(v1.values(), v3.values());
    }

    #[test]
    fn degenerate_spec_yields_two_level_image() {
        let spec = DomainSpec {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            texture_amplitude: 0.0,
            ..DomainSpec::source_desk(11)
        };
        let (vol, mask) = gen_phantom(&spec, 0).unwrap();
        let mut levels: Vec<f32> = vol.values().to_vec();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        assert_eq!(levels.len(), 2);
        // The high level is exactly the foreground.
        let hi = levels[1];
        for (i, &v) in vol.values().iter().enumerate() {
            assert_eq!(v == hi, mask.as_volume().values()[i] != 0.0);
        }
    }

    #[test]
    fn image_is_finite_and_normalized() {
        let spec = DomainSpec::target_desk(13);
        for index in 0..4 {
            let (vol, _) = gen_phantom(&spec, index).unwrap();
            assert!(vol.values().iter().all(|v| v.is_finite()));
            let (mean, var) = vol.mean_var();
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn foreground_fraction_within_radius_bounds() {
        for spec in [DomainSpec::source_desk(17), DomainSpec::target_desk(17)] {
            let [r_lo, r_hi] = spec.radius_range;
            let amp = spec.deform_amplitude;
            let total = (spec.dims[0] * spec.dims[1] * spec.dims[2]) as f64;
            // Ellipsoid volume bounds with generous discretization slack.
            let v_min = 0.5 * 4.19 * (r_lo * (1.0 - amp)).powi(3) / total;
            let v_max = 1.5 * 4.19 * (r_hi * (1.0 + amp)).powi(3) / total;
            for index in 0..10 {
                let (_, mask) = gen_phantom(&spec, index).unwrap();
                let frac = mask.fg_count() as f64 / total;
                assert!(frac > v_min && frac < v_max, "fraction {frac} outside [{v_min}, {v_max}]");
            }
        }
    }

    #[test]
    fn object_too_large_is_rejected() {
        let spec = DomainSpec { radius_range: [14.0, 15.0], ..DomainSpec::source_desk(1) };
        assert!(gen_phantom(&spec, 0).is_err());
    }

    #[test]
    fn source_boundaries_are_sharper_than_target() {
        let source = DomainSpec::source_desk(19);
        let target = DomainSpec::target_desk(19);
        let mean_grad = |spec: &DomainSpec| -> f64 {
            let mut total = 0.0;
            for index in 0..20 {
                let (vol, mask) = gen_phantom(spec, index).unwrap();
                let hist = boundary_gradient_histogram(&vol, &mask, 32).unwrap();
                total += hist.mean;
            }
            total / 20.0
        };
        let s = mean_grad(&source);
        let t = mean_grad(&target);
        assert!(s > t, "source {s} vs target {t}");
    }

    #[test]
    fn domains_are_separable_by_intensity_histogram() {
        // Feature: fraction of voxels near zero after normalization. The
        // blurrier, noisier, lower-contrast target concentrates more mass
        // mid-band.
        let source = DomainSpec::source_desk(23);
        let target = DomainSpec::target_desk(23);
        let feature = |vol: &Volume| -> f64 {
            vol.values().iter().filter(|v| v.abs() < 0.3).count() as f64 / vol.len() as f64
        };
        let fs: Vec<f64> =
            (0..20).map(|i| feature(&gen_phantom(&source, i).unwrap().0)).collect();
        let ft: Vec<f64> =
            (0..20).map(|i| feature(&gen_phantom(&target, i).unwrap().0)).collect();
        let ms = fs.iter().sum::<f64>() / 20.0;
        let mt = ft.iter().sum::<f64>() / 20.0;
        let threshold = (ms + mt) / 2.0;
        let source_side = ms < threshold;
        let correct = fs.iter().filter(|&&f| (f < threshold) == source_side).count()
            + ft.iter().filter(|&&f| (f < threshold) != source_side).count();
        let accuracy = correct as f64 / 40.0;
        assert!(accuracy > 0.8, "accuracy {accuracy}");
    }

    #[test]
    fn dataset_generation_writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source_desk(29);
        let manifest =
            gen_dataset(&spec, &[("train", 3), ("val", 2)], dir.path(), "src").unwrap();
        assert_eq!(manifest.entries.len(), 5);
        assert_eq!(manifest.split("train").count(), 3);
        assert_eq!(manifest.split("val").count(), 2);
        let manifest_path = dir.path().join("src_manifest.json");
        let loaded = read_manifest(&manifest_path).unwrap();
        assert_eq!(loaded, manifest);
        for e in &loaded.entries {
            let (img, msk) = loaded.resolve(&manifest_path, e);
            let vol = crate::metaimage::read_metaimage(&img).unwrap();
            let mask = crate::metaimage::read_metaimage_mask(&msk).unwrap();
            assert_eq!(vol.dims(), spec.dims);
            assert_eq!(mask.dims(), spec.dims);
            // Files reproduce the in-memory generator exactly.
            let (v, m) = gen_phantom(&spec, e.index).unwrap();
            assert_eq!(vol.values(), v.values());
            assert_eq!(mask.as_volume().values(), m.as_volume().values());
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let spec = DomainSpec::target_desk(31);
        gen_dataset(&spec, &[("train", 2)], dir1.path(), "t").unwrap();
        gen_dataset(&spec, &[("train", 2)], dir2.path(), "t").unwrap();
        for name in ["t_train_000.mhd", "t_train_000.raw", "t_train_000_mask.raw", "t_manifest.json"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn bad_manifests_are_rejected() {
        assert!(read_manifest_bytes(b"not json").is_err());
        assert!(read_manifest_bytes(b"{}").is_err());
        assert!(read_manifest_bytes(b"{\"seed\":1,\"spec_digest\":\"x\",\"entries\":3}").is_err());
    }
}
