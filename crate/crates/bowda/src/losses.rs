//! Segmentation and adversarial losses with analytic gradients.
//!
//! Every loss returns its scalar value together with named gradient buffers,
//! one per differentiable input, so callers can seed the tape backward pass
//! directly. Values are accumulated in f64 regardless of the working scalar.

use crate::boundary::morphological_boundary;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::volume::{Mask, Volume};

/// Weights shared by the boundary-aware losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Boundary emphasis in the transfer loss, `(1 + alpha * W)`.
    pub alpha: f64,
    /// Scale of the distance term in the segmentation loss.
    pub beta: f64,
    /// Probabilities are clamped to `[epsilon, 1 - epsilon]` before logs.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, beta: 0.1, epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Scalar loss plus one gradient buffer per differentiable input.
#[derive(Debug, Clone)]
pub struct LossValue<T: Scalar> {
    pub value: f64,
    grads: Vec<(&'static str, Vec<T>)>,
}

impl<T: Scalar> LossValue<T> {
    pub(crate) fn single(value: f64, name: &'static str, grad: Vec<T>) -> Self {
        LossValue { value, grads: vec![(name, grad)] }
    }

    pub fn grad(&self, name: &str) -> Option<&[T]> {
        self.grads.iter().find(|(n, _)| *n == name).map(|(_, g)| g.as_slice())
    }

    pub fn grad_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.grads.iter().map(|(n, _)| *n)
    }

    /// Sums values; gradients with the same name add elementwise, others are
    /// carried over.
    pub fn merge(mut self, other: LossValue<T>) -> Result<LossValue<T>> {
        self.value += other.value;
        for (name, g) in other.grads {
            match self.grads.iter_mut().find(|(n, _)| *n == name) {
                Some((_, mine)) => {
                    if mine.len() != g.len() {
                        return Err(Error::Shape(format!(
                            "cannot merge gradients for '{name}': {} vs {} values",
                            mine.len(),
                            g.len()
                        )));
                    }
                    for (a, b) in mine.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => self.grads.push((name, g)),
            }
        }
        Ok(self)
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} voxels")));
    }
    Ok(())
}

/// Mean voxelwise cross-entropy against a binary target.
///
/// Probabilities are clamped to `[eps, 1-eps]`; clamped voxels carry zero
/// gradient.
pub fn cross_entropy<T: Scalar>(
    pred: &[T],
    target: &[T],
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    check_len("cross_entropy", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::Shape("cross_entropy: empty prediction".into()));
    }
    let eps = cfg.epsilon;
    let inv_v = 1.0 / pred.len() as f64;
    let mut value = 0.0f64;
    let mut grad = vec![T::zero(); pred.len()];
    for i in 0..pred.len() {
        let raw = pred[i].to_f64();
        let y = target[i].to_f64();
        let p = raw.clamp(eps, 1.0 - eps);
        value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if raw > eps && raw < 1.0 - eps {
            grad[i] = T::from_f64((p - y) / (p * (1.0 - p)) * inv_v);
        }
    }
    Ok(LossValue::single(value * inv_v, "pred", grad))
}

/// Boundary voxels of `pred >= threshold` (6-neighborhood, volume border
/// counts as background), in scan order.
pub fn boundary_of_threshold<T: Scalar>(
    pred: &[T],
    dims: [usize; 3],
    spacing: [f64; 3],
    threshold: f64,
) -> Result<Vec<[usize; 3]>> {
    check_len("boundary_of_threshold", pred.len(), dims[0] * dims[1] * dims[2])?;
    let mut mask = Mask::zeros(dims, spacing)?;
    let mut i = 0usize;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if pred[i].to_f64() >= threshold {
                    mask.set(z, y, x, true);
                }
                i += 1;
            }
        }
    }
    Ok(morphological_boundary(&mask))
}

/// Distance-weighted boundary penalty.
///
/// The boundary of the thresholded prediction is computed once and held
/// fixed; the loss is `beta * sum over that boundary of pred * dmap` and the
/// gradient flows only through the `pred` factor.
pub fn dist_loss<T: Scalar>(
    pred: &[T],
    dmap: &Volume,
    cfg: &LossConfig,
    threshold: f64,
) -> Result<LossValue<T>> {
    check_len("dist_loss", pred.len(), dmap.len())?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("dist_loss threshold {threshold} outside (0, 1)")));
    }
    let boundary = boundary_of_threshold(pred, dmap.dims(), dmap.spacing(), threshold)?;
    let beta = cfg.beta;
    let mut value = 0.0f64;
    let mut grad = vec![T::zero(); pred.len()];
    for p in boundary {
        let i = dmap.idx(p[0], p[1], p[2]);
        let d = dmap.values()[i] as f64;
        value += pred[i].to_f64() * d;
        grad[i] = T::from_f64(beta * d);
    }
    Ok(LossValue::single(beta * value, "pred", grad))
}

/// Boundary-weighted segmentation loss: cross-entropy plus the distance term.
pub fn bwsl<T: Scalar>(
    pred: &[T],
    target: &[T],
    dmap: &Volume,
    cfg: &LossConfig,
    threshold: f64,
) -> Result<LossValue<T>> {
    let ce = cross_entropy(pred, target, cfg)?;
    let dist = dist_loss(pred, dmap, cfg, threshold)?;
    ce.merge(dist)
}

fn weighted_log_mean<T: Scalar>(
    probs: &[T],
    weights: &[f32],
    alpha: f64,
    eps: f64,
    of_complement: bool,
    grad: &mut [T],
) -> f64 {
    // Accumulates -mean[(1 + alpha*W) * ln p] (or ln(1-p)), writing the
    // matching gradient w.r.t. the raw probabilities into `grad`.
    let inv_v = 1.0 / probs.len() as f64;
    let mut value = 0.0f64;
    for i in 0..probs.len() {
        let raw = probs[i].to_f64();
        let w = 1.0 + alpha * weights[i] as f64;
        let p = raw.clamp(eps, 1.0 - eps);
        let open = raw > eps && raw < 1.0 - eps;
        if of_complement {
            value -= w * (1.0 - p).ln();
            if open {
                grad[i] = T::from_f64(w / (1.0 - p) * inv_v);
            }
        } else {
            value -= w * p.ln();
            if open {
                grad[i] = T::from_f64(-w / p * inv_v);
            }
        }
    }
    value * inv_v
}

/// Boundary-weighted transfer loss minimized by the discriminator: source
/// voxels pulled toward 1, target voxels toward 0, boundary voxels weighted
/// `(1 + alpha * W)`.
pub fn bwtl_discriminator<T: Scalar>(
    d_src: &[T],
    d_tgt: &[T],
    w_src: &[f32],
    w_tgt: &[f32],
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    check_len("bwtl_discriminator source", d_src.len(), w_src.len())?;
    check_len("bwtl_discriminator target", d_tgt.len(), w_tgt.len())?;
    if d_src.is_empty() || d_tgt.is_empty() {
        return Err(Error::Shape("bwtl_discriminator: empty input".into()));
    }
    let mut g_src = vec![T::zero(); d_src.len()];
    let mut g_tgt = vec![T::zero(); d_tgt.len()];
    let v_src = weighted_log_mean(d_src, w_src, cfg.alpha, cfg.epsilon, false, &mut g_src);
    let v_tgt = weighted_log_mean(d_tgt, w_tgt, cfg.alpha, cfg.epsilon, true, &mut g_tgt);
    Ok(LossValue {
        value: v_src + v_tgt,
        grads: vec![("d_src", g_src), ("d_tgt", g_tgt)],
    })
}

/// Non-saturating fooling objective for the segmentation network: pushes the
/// discriminator's target-domain output toward 1.
pub fn adversarial_generator_loss<T: Scalar>(
    d_tgt: &[T],
    w_tgt: &[f32],
    cfg: &LossConfig,
) -> Result<LossValue<T>> {
    check_len("adversarial_generator_loss", d_tgt.len(), w_tgt.len())?;
    if d_tgt.is_empty() {
        return Err(Error::Shape("adversarial_generator_loss: empty input".into()));
    }
    let mut grad = vec![T::zero(); d_tgt.len()];
    let value = weighted_log_mean(d_tgt, w_tgt, cfg.alpha, cfg.epsilon, false, &mut grad);
    Ok(LossValue::single(value, "d_tgt", grad))
}

/// Total objective for the adapted segmentation network.
pub fn total_loss<T: Scalar>(seg: LossValue<T>, adv: LossValue<T>) -> Result<LossValue<T>> {
    seg.merge(adv)
}
