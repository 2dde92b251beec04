//! Segmentation quality metrics (DSC, RVD, ABD, HD) over whole/apex/base
//! regions, plus the paired t-test used to compare strategies.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::boundary::{distance_values_from_points, morphological_boundary};
use crate::error::{Error, Result};
use crate::volume::Mask;

fn check_geometry(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() || a.spacing() != b.spacing() {
        return Err(Error::Metric(format!(
            "mask geometry mismatch: {:?}/{:?} vs {:?}/{:?}",
            a.dims(),
            a.spacing(),
            b.dims(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient in percent. Two empty masks are a perfect
/// match by convention.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_geometry(a, b)?;
    let av = a.as_volume().values();
    let bv = b.as_volume().values();
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for i in 0..av.len() {
        let fa = av[i] != 0.0;
        let fb = bv[i] != 0.0;
        na += u64::from(fa);
        nb += u64::from(fb);
        inter += u64::from(fa && fb);
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (na + nb) as f64)
}

/// Signed relative volume difference in percent of the reference volume.
pub fn rvd(seg: &Mask, reference: &Mask) -> Result<f64> {
    check_geometry(seg, reference)?;
    let v_ref = reference.physical_volume();
    if v_ref == 0.0 {
        return Err(Error::Metric("rvd: empty reference mask".into()));
    }
    Ok(100.0 * (seg.physical_volume() - v_ref) / v_ref)
}

fn boundary_or_err(mask: &Mask, what: &str) -> Result<Vec<[usize; 3]>> {
    let b = morphological_boundary(mask);
    if b.is_empty() {
        return Err(Error::Metric(format!("{what}: mask has no boundary")));
    }
    Ok(b)
}

/// Directed boundary distances `d(p, boundary(to))` for every `p` in
/// `from_boundary`, via one distance transform per target boundary.
fn directed_distances(
    from_boundary: &[[usize; 3]],
    to_boundary: &[[usize; 3]],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<Vec<f64>> {
    let field = distance_values_from_points(dims, spacing, to_boundary)?;
    let [_, h, w] = dims;
    Ok(from_boundary.iter().map(|&[z, y, x]| field[(z * h + y) * w + x]).collect())
}

/// Average symmetric boundary distance in physical units.
pub fn abd(a: &Mask, b: &Mask) -> Result<f64> {
    check_geometry(a, b)?;
    let ba = boundary_or_err(a, "abd")?;
    let bb = boundary_or_err(b, "abd")?;
    let d_ab = directed_distances(&ba, &bb, a.dims(), a.spacing())?;
    let d_ba = directed_distances(&bb, &ba, a.dims(), a.spacing())?;
    let total: f64 = d_ab.iter().chain(&d_ba).sum();
    Ok(total / (ba.len() + bb.len()) as f64)
}

/// Exact (maximum) symmetric Hausdorff distance in physical units.
pub fn hd(a: &Mask, b: &Mask) -> Result<f64> {
    check_geometry(a, b)?;
    let ba = boundary_or_err(a, "hd")?;
    let bb = boundary_or_err(b, "hd")?;
    let d_ab = directed_distances(&ba, &bb, a.dims(), a.spacing())?;
    let d_ba = directed_distances(&bb, &ba, a.dims(), a.spacing())?;
    Ok(d_ab.iter().chain(&d_ba).fold(0.0f64, |m, &v| m.max(v)))
}

/// Slice ranges (along the stored z axis) of the apex / mid / base thirds of
/// the reference foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSplit {
    pub apex: std::ops::Range<usize>,
    pub mid: std::ops::Range<usize>,
    pub base: std::ops::Range<usize>,
}

/// Splits the contiguous foreground slice range into first-third apex,
/// last-third base and the remainder. `n` slices divide as
/// `round(n/3) / round(2n/3)-round(n/3) / n-round(2n/3)`.
pub fn region_split(reference: &Mask) -> Result<RegionSplit> {
    let dims = reference.dims();
    let mut first = None;
    let mut last = 0usize;
    for z in 0..dims[0] {
        let mut any = false;
        'scan: for y in 0..dims[1] {
            for x in 0..dims[2] {
                if reference.get(z, y, x) {
                    any = true;
                    break 'scan;
                }
            }
        }
        if any {
            first.get_or_insert(z);
            last = z;
        }
    }
    let first = first.ok_or_else(|| Error::Metric("region split: empty reference".into()))?;
    let n = last - first + 1;
    if n < 3 {
        return Err(Error::Metric(format!(
            "region split: {n} foreground slice(s), need at least 3"
        )));
    }
    let third = (n as f64 / 3.0).round() as usize;
    let two_thirds = (2.0 * n as f64 / 3.0).round() as usize;
    Ok(RegionSplit {
        apex: first..first + third,
        mid: first + third..first + two_thirds,
        base: first + two_thirds..last + 1,
    })
}

fn restrict(mask: &Mask, slices: &std::ops::Range<usize>) -> Result<Mask> {
    let dims = mask.dims();
    mask.crop([slices.start, 0, 0], [slices.end - slices.start, dims[1], dims[2]])
}

/// All four metrics for one mask pair. Surface distances are absent when the
/// segmentation is empty (no boundary to measure from).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub rvd: f64,
    pub abd: Option<f64>,
    pub hd: Option<f64>,
}

fn case_metrics(seg: &Mask, reference: &Mask) -> Result<CaseMetrics> {
    let d = dsc(seg, reference)?;
    let r = rvd(seg, reference)?;
    let (a, h) = if morphological_boundary(seg).is_empty() {
        (None, None)
    } else {
        (Some(abd(seg, reference)?), Some(hd(seg, reference)?))
    };
    Ok(CaseMetrics { dsc: d, rvd: r, abd: a, hd: h })
}

/// Whole-gland metrics plus the apex/base restrictions when the reference
/// spans at least three foreground slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub whole: CaseMetrics,
    pub apex: Option<CaseMetrics>,
    pub base: Option<CaseMetrics>,
}

pub fn evaluate_case(seg: &Mask, reference: &Mask) -> Result<RegionMetrics> {
    let whole = case_metrics(seg, reference)?;
    let (apex, base) = match region_split(reference) {
        Ok(split) => {
            let apex =
                case_metrics(&restrict(seg, &split.apex)?, &restrict(reference, &split.apex)?)?;
            let base =
                case_metrics(&restrict(seg, &split.base)?, &restrict(reference, &split.base)?)?;
            (Some(apex), Some(base))
        }
        Err(_) => (None, None),
    };
    Ok(RegionMetrics { whole, apex, base })
}

/// Per-case results keyed by case id, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<(String, RegionMetrics)>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() >= 2 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl MetricReport {
    pub fn push(&mut self, case: &str, metrics: RegionMetrics) {
        self.cases.push((case.to_string(), metrics));
    }

    /// Mean whole-gland DSC across cases (the model-selection criterion).
    pub fn mean_dsc(&self) -> f64 {
        if self.cases.is_empty() {
            return 0.0;
        }
        self.cases.iter().map(|(_, m)| m.whole.dsc).sum::<f64>() / self.cases.len() as f64
    }

    fn region_rows(&self, region: &str) -> Vec<(&str, CaseMetrics)> {
        self.cases
            .iter()
            .filter_map(|(id, m)| {
                let cm = match region {
                    "whole" => Some(m.whole),
                    "apex" => m.apex,
                    _ => m.base,
                };
                cm.map(|cm| (id.as_str(), cm))
            })
            .collect()
    }

    /// One row per case per region, then mean and standard-deviation rows per
    /// region.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,region,dsc_pct,rvd_pct,abd_mm,hd_mm\n");
        for region in ["whole", "apex", "base"] {
            for (id, m) in self.region_rows(region) {
                out.push_str(&format!(
                    "{id},{region},{:.4},{:.4},{},{}\n",
                    m.dsc,
                    m.rvd,
                    fmt_opt(m.abd),
                    fmt_opt(m.hd)
                ));
            }
        }
        for region in ["whole", "apex", "base"] {
            let rows = self.region_rows(region);
            if rows.is_empty() {
                continue;
            }
            let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> {
                rows.iter().filter_map(|(_, m)| f(m)).collect()
            };
            let stats = [
                mean_sd(&col(&|m| Some(m.dsc))),
                mean_sd(&col(&|m| Some(m.rvd))),
                mean_sd(&col(&|m| m.abd)),
                mean_sd(&col(&|m| m.hd)),
            ];
            for (label, pick) in [("mean", 0usize), ("sd", 1usize)] {
                let v = |i: usize| if pick == 0 { stats[i].0 } else { stats[i].1 };
                out.push_str(&format!(
                    "{label},{region},{:.4},{:.4},{:.4},{:.4}\n",
                    v(0),
                    v(1),
                    v(2),
                    v(3)
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-sided paired t-test with n-1 degrees of freedom.
pub fn paired_ttest(sample_a: &[f64], sample_b: &[f64]) -> Result<TTestResult> {
    if sample_a.len() != sample_b.len() {
        return Err(Error::Metric(format!(
            "paired t-test: sample sizes {} vs {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let n = sample_a.len();
    if n < 2 {
        return Err(Error::Metric("paired t-test: need at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = sample_a.iter().zip(sample_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(Error::Metric(
            "paired t-test: zero difference variance (samples are identically offset)".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Metric(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult { t, p, significant: p < 0.05 })
}

/// Slow reference for the two-sided p-value: integrates the t density via the
/// substitution t = sqrt(df)·tan(u), which maps the tail onto a finite
/// interval. Used by the test suite to cross-check [`paired_ttest`].
pub fn t_two_sided_p_integration(t: f64, df: f64) -> f64 {
    // After substitution the density is proportional to cos(u)^(df-1) on
    // (-pi/2, pi/2); the normalization cancels in the tail/total ratio.
    let integrand = |u: f64| u.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64, n: usize| -> f64 {
        // n must be even.
        let h = (b - a) / n as f64;
        let mut acc = integrand(a) + integrand(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(a + i as f64 * h);
        }
        acc * h / 3.0
    };
    let u0 = (t.abs() / df.sqrt()).atan();
    let half = std::f64::consts::FRAC_PI_2;
    let tail = simpson(u0, half, 200_000);
    let total = simpson(0.0, half, 200_000);
    (tail / total).clamp(0.0, 1.0)
}

/// Paired t-tests between two reports over each whole-gland metric, as CSV.
/// Cases must match by id and order; surface metrics pair only the cases
/// where both runs produced a value.
pub fn compare_reports(a: &MetricReport, b: &MetricReport) -> Result<String> {
    if a.cases.len() != b.cases.len()
        || a.cases.iter().zip(&b.cases).any(|((ia, _), (ib, _))| ia != ib)
    {
        return Err(Error::Metric("compare: reports cover different cases".into()));
    }
    let mut out = String::from("metric,t,p,significant_at_0.05\n");
    let paired = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for ((_, ma), (_, mb)) in a.cases.iter().zip(&b.cases) {
            if let (Some(x), Some(y)) = (f(&ma.whole), f(&mb.whole)) {
                xs.push(x);
                ys.push(y);
            }
        }
        (xs, ys)
    };
    let metrics: [(&str, &dyn Fn(&CaseMetrics) -> Option<f64>); 4] = [
        ("dsc_pct", &|m| Some(m.dsc)),
        ("rvd_pct", &|m| Some(m.rvd)),
        ("abd_mm", &|m| m.abd),
        ("hd_mm", &|m| m.hd),
    ];
    for (name, f) in metrics {
        let (xs, ys) = paired(f);
        match paired_ttest(&xs, &ys) {
            Ok(r) => out.push_str(&format!(
                "{name},{:.6},{:.6},{}\n",
                r.t,
                r.p,
                if r.significant { "yes" } else { "no" }
            )),
            Err(e) => out.push_str(&format!("{name},,,{e}\n")),
        }
    }
    Ok(out)
}
