//! Tensor operations and their backward kernels.
//!
//! Convolution gradients reuse the forward machinery: the input gradient is a
//! scatter with the same kernel (which is exactly what the transposed
//! convolution computes forward), and the kernel gradient is a correlation of
//! input against output gradient. All inner loops run in a fixed index order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Shape, Tape, TensorRef};
use crate::error::{Error, Result};

/// Spatial padding for [`Tape::conv3d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size = ceil(input / stride); zero-pads as evenly as possible.
    Same,
    /// Explicit symmetric padding per axis.
    Explicit([usize; 3]),
}

/// Running batch-norm statistics, owned by the layer (not the tape).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv {
        input: TensorRef,
        kernel: TensorRef,
        bias: Option<TensorRef>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    TConv {
        input: TensorRef,
        kernel: TensorRef,
        bias: Option<TensorRef>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    AvgPool {
        input: TensorRef,
        window: [usize; 3],
    },
    Relu {
        input: TensorRef,
    },
    LeakyRelu {
        input: TensorRef,
        slope: T,
    },
    Sigmoid {
        input: TensorRef,
    },
    BatchNorm {
        input: TensorRef,
        scale: TensorRef,
        shift: TensorRef,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        input: TensorRef,
        mask: Vec<bool>,
        keep: T,
    },
    Concat {
        inputs: Vec<TensorRef>,
    },
    Add {
        a: TensorRef,
        b: TensorRef,
    },
}

/// Output extent of a strided correlation along one axis.
fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel extent {k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn resolve_padding(input: [usize; 3], k: [usize; 3], stride: [usize; 3], padding: Padding) -> [usize; 3] {
    match padding {
        Padding::Explicit(p) => p,
        Padding::Same => {
            let mut pad = [0usize; 3];
            for a in 0..3 {
                let out = input[a].div_ceil(stride[a]);
                let needed = (out - 1) * stride[a] + k[a];
                pad[a] = needed.saturating_sub(input[a]) / 2;
            }
            pad
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Strided cross-correlation with zero padding.
    ///
    /// `kernel` is `(out_channels, in_channels, kd, kh, kw)`; `bias` (one
    /// value per output channel) is optional.
    pub fn conv3d(
        &mut self,
        input: TensorRef,
        kernel: TensorRef,
        bias: Option<TensorRef>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<TensorRef> {
        let ish = input.shape;
        let ksh = kernel.shape;
        if ksh.c != ish.c {
            return Err(Error::Shape(format!(
                "conv3d: kernel expects {} input channels, tensor has {}",
                ksh.c, ish.c
            )));
        }
        if let Some(b) = bias {
            if b.shape.len() != ksh.n {
                return Err(Error::Shape(format!(
                    "conv3d: bias has {} values for {} output channels",
                    b.shape.len(),
                    ksh.n
                )));
            }
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Shape("conv3d: zero stride".into()));
        }
        let pad = resolve_padding(ish.spatial(), [ksh.d, ksh.h, ksh.w], stride, padding);
        let osh = Shape::new(
            ish.n,
            ksh.n,
            conv_out_len(ish.d, ksh.d, stride[0], pad[0])?,
            conv_out_len(ish.h, ksh.h, stride[1], pad[1])?,
            conv_out_len(ish.w, ksh.w, stride[2], pad[2])?,
        );
        let mut out = vec![T::zero(); osh.len()];
        if let Some(b) = bias {
            let bv = self.values(b);
            for n in 0..osh.n {
                for co in 0..osh.c {
                    let base = osh.idx(n, co, 0, 0, 0);
                    let v = bv[co];
                    for o in &mut out[base..base + osh.spatial_len()] {
                        *o = v;
                    }
                }
            }
        }
        correlate(
            self.values(input),
            ish,
            self.values(kernel),
            ksh,
            &mut out,
            osh,
            stride,
            pad,
        );
        let needs = self.node(input.id).needs_grad
            || self.node(kernel.id).needs_grad
            || bias.is_some_and(|b| self.node(b.id).needs_grad);
        Ok(self.push(out, osh, Op::Conv { input, kernel, bias, stride, pad }, needs))
    }

    /// Transposed convolution: the exact adjoint of [`Tape::conv3d`] with the
    /// same kernel/stride/padding. Output spatial extent is
    /// `stride * (in - 1) + k - 2 * pad` per axis.
    ///
    /// `kernel` keeps the forward-convolution layout
    /// `(conv_out_channels = input channels here, conv_in_channels = output
    /// channels here, kd, kh, kw)`.
    pub fn tconv3d(
        &mut self,
        input: TensorRef,
        kernel: TensorRef,
        bias: Option<TensorRef>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<TensorRef> {
        let ish = input.shape;
        let ksh = kernel.shape;
        if ksh.n != ish.c {
            return Err(Error::Shape(format!(
                "tconv3d: kernel expects {} input channels, tensor has {}",
                ksh.n, ish.c
            )));
        }
        if let Some(b) = bias {
            if b.shape.len() != ksh.c {
                return Err(Error::Shape(format!(
                    "tconv3d: bias has {} values for {} output channels",
                    b.shape.len(),
                    ksh.c
                )));
            }
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Shape("tconv3d: zero stride".into()));
        }
        let mut osp = [0usize; 3];
        for a in 0..3 {
            let sp = [ish.d, ish.h, ish.w][a];
            let k = [ksh.d, ksh.h, ksh.w][a];
            let ext = stride[a] * (sp - 1) + k;
            if ext < 2 * pad[a] + 1 {
                return Err(Error::Shape(format!(
                    "tconv3d: padding {} too large for axis extent {ext}",
                    pad[a]
                )));
            }
            osp[a] = ext - 2 * pad[a];
        }
        let osh = Shape::new(ish.n, ksh.c, osp[0], osp[1], osp[2]);
        let mut out = vec![T::zero(); osh.len()];
        scatter(
            self.values(input),
            ish,
            self.values(kernel),
            ksh,
            &mut out,
            osh,
            stride,
            pad,
        );
        if let Some(b) = bias {
            let bv = self.values(b);
            for n in 0..osh.n {
                for c in 0..osh.c {
                    let base = osh.idx(n, c, 0, 0, 0);
                    let v = bv[c];
                    for o in &mut out[base..base + osh.spatial_len()] {
                        *o += v;
                    }
                }
            }
        }
        let needs = self.node(input.id).needs_grad
            || self.node(kernel.id).needs_grad
            || bias.is_some_and(|b| self.node(b.id).needs_grad);
        Ok(self.push(out, osh, Op::TConv { input, kernel, bias, stride, pad }, needs))
    }

    /// Non-overlapping average pooling (stride = window).
    pub fn avgpool3d(&mut self, input: TensorRef, window: [usize; 3]) -> Result<TensorRef> {
        let ish = input.shape;
        for a in 0..3 {
            let sp = [ish.d, ish.h, ish.w][a];
            if window[a] == 0 || sp % window[a] != 0 {
                return Err(Error::Shape(format!(
                    "avgpool3d: axis {a} extent {sp} not divisible by window {}",
                    window[a]
                )));
            }
        }
        let osh = Shape::new(ish.n, ish.c, ish.d / window[0], ish.h / window[1], ish.w / window[2]);
        let inv = T::from_f64(1.0 / (window[0] * window[1] * window[2]) as f64);
        let iv = self.values(input);
        let mut out = vec![T::zero(); osh.len()];
        for n in 0..osh.n {
            for c in 0..osh.c {
                for z in 0..osh.d {
                    for y in 0..osh.h {
                        for x in 0..osh.w {
                            let mut acc = T::zero();
                            for wz in 0..window[0] {
                                for wy in 0..window[1] {
                                    for wx in 0..window[2] {
                                        acc += iv[ish.idx(
                                            n,
                                            c,
                                            z * window[0] + wz,
                                            y * window[1] + wy,
                                            x * window[2] + wx,
                                        )];
                                    }
                                }
                            }
                            out[osh.idx(n, c, z, y, x)] = acc * inv;
                        }
                    }
                }
            }
        }
        let needs = self.node(input.id).needs_grad;
        Ok(self.push(out, osh, Op::AvgPool { input, window }, needs))
    }

    pub fn relu(&mut self, input: TensorRef) -> TensorRef {
        let out = self.values(input).iter().map(|&v| v.max(T::zero())).collect();
        let needs = self.node(input.id).needs_grad;
        self.push(out, input.shape, Op::Relu { input }, needs)
    }

    pub fn leaky_relu(&mut self, input: TensorRef, slope: f64) -> TensorRef {
        let s = T::from_f64(slope);
        let out = self
            .values(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let needs = self.node(input.id).needs_grad;
        self.push(out, input.shape, Op::LeakyRelu { input, slope: s }, needs)
    }

    pub fn sigmoid(&mut self, input: TensorRef) -> TensorRef {
        let out = self
            .values(input)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let needs = self.node(input.id).needs_grad;
        self.push(out, input.shape, Op::Sigmoid { input }, needs)
    }

    /// Batch normalization over (batch, spatial) per channel.
    ///
    /// Train mode normalizes by batch statistics and folds them into
    /// `stats` with the given momentum; eval mode normalizes by `stats`.
    /// Backward in train mode differentiates through the batch statistics.
    pub fn batchnorm(
        &mut self,
        input: TensorRef,
        scale: TensorRef,
        shift: TensorRef,
        stats: &mut BnStats<T>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<TensorRef> {
        let ish = input.shape;
        let ch = ish.c;
        if scale.shape.len() != ch || shift.shape.len() != ch || stats.mean.len() != ch {
            return Err(Error::Shape(format!(
                "batchnorm: scale/shift/stats must have {ch} channels"
            )));
        }
        let sp = ish.spatial_len();
        let m = (ish.n * sp) as f64;
        let iv = self.values(input);
        let mut xhat = vec![T::zero(); iv.len()];
        let mut inv_std = vec![T::zero(); ch];
        let mut out = vec![T::zero(); iv.len()];
        for c in 0..ch {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for n in 0..ish.n {
                    let base = ish.idx(n, c, 0, 0, 0);
                    for &v in &iv[base..base + sp] {
                        sum += v.to_f64();
                    }
                }
                let mean = sum / m;
                let mut ss = 0.0f64;
                for n in 0..ish.n {
                    let base = ish.idx(n, c, 0, 0, 0);
                    for &v in &iv[base..base + sp] {
                        let d = v.to_f64() - mean;
                        ss += d * d;
                    }
                }
                let var = ss / m;
                stats.mean[c] = T::from_f64(
                    (1.0 - momentum) * stats.mean[c].to_f64() + momentum * mean,
                );
                stats.var[c] =
                    T::from_f64((1.0 - momentum) * stats.var[c].to_f64() + momentum * var);
                (mean, var)
            } else {
                (stats.mean[c].to_f64(), stats.var[c].to_f64())
            };
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[c] = T::from_f64(istd);
            let g = self.values(scale)[c];
            let b = self.values(shift)[c];
            for n in 0..ish.n {
                let base = ish.idx(n, c, 0, 0, 0);
                for i in base..base + sp {
                    let xh = T::from_f64((iv[i].to_f64() - mean) * istd);
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let needs = self.node(input.id).needs_grad
            || self.node(scale.id).needs_grad
            || self.node(shift.id).needs_grad;
        Ok(self.push(
            out,
            ish,
            Op::BatchNorm { input, scale, shift, xhat, inv_std, train },
            needs,
        ))
    }

    /// Inverted dropout with the mask drawn from `rng` (train mode). Eval
    /// mode is the identity — simply don't record the op.
    pub fn dropout(
        &mut self,
        input: TensorRef,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let mask: Vec<bool> = (0..input.shape.len()).map(|_| rng.random::<f64>() >= rate).collect();
        self.dropout_with_mask(input, mask, rate)
    }

    /// Dropout with an externally fixed mask (gradient checks).
    pub fn dropout_with_mask(
        &mut self,
        input: TensorRef,
        mask: Vec<bool>,
        rate: f64,
    ) -> Result<TensorRef> {
        if mask.len() != input.shape.len() {
            return Err(Error::Shape("dropout mask length mismatch".into()));
        }
        let keep = T::from_f64(1.0 - rate);
        let inv = T::one() / keep;
        let out = self
            .values(input)
            .iter()
            .zip(&mask)
            .map(|(&v, &keep_it)| if keep_it { v * inv } else { T::zero() })
            .collect();
        let needs = self.node(input.id).needs_grad;
        Ok(self.push(out, input.shape, Op::Dropout { input, mask, keep }, needs))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut c_total = 0usize;
        for p in parts {
            let s = p.shape;
            if (s.n, s.d, s.h, s.w) != (first.shape.n, first.shape.d, first.shape.h, first.shape.w)
            {
                return Err(Error::Shape(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    s, first.shape
                )));
            }
            c_total += s.c;
        }
        let osh = Shape::new(first.shape.n, c_total, first.shape.d, first.shape.h, first.shape.w);
        let sp = osh.spatial_len();
        let mut out = vec![T::zero(); osh.len()];
        for n in 0..osh.n {
            let mut c_off = 0usize;
            for p in parts {
                let pv = self.values(*p);
                let src = p.shape.idx(n, 0, 0, 0, 0);
                let cnt = p.shape.c * sp;
                let dst = osh.idx(n, c_off, 0, 0, 0);
                out[dst..dst + cnt].copy_from_slice(&pv[src..src + cnt]);
                c_off += p.shape.c;
            }
        }
        let needs = parts.iter().any(|p| self.node(p.id).needs_grad);
        Ok(self.push(out, osh, Op::Concat { inputs: parts.to_vec() }, needs))
    }

    /// Elementwise sum of two same-shaped tensors (residual connections).
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "add: shape mismatch {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.node(a.id).needs_grad || self.node(b.id).needs_grad;
        Ok(self.push(out, a.shape, Op::Add { a, b }, needs))
    }
}

/// `out += correlate(input, kernel)`; the forward convolution kernel.
#[allow(clippy::too_many_arguments)]
fn correlate<T: Scalar>(
    input: &[T],
    ish: Shape,
    kernel: &[T],
    ksh: Shape,
    out: &mut [T],
    osh: Shape,
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let (sd, sh, sw) = (stride[0], stride[1], stride[2]);
    let (pd, ph, pw) = (pad[0] as isize, pad[1] as isize, pad[2] as isize);
    for n in 0..osh.n {
        for co in 0..osh.c {
            for z in 0..osh.d {
                for y in 0..osh.h {
                    let orow = osh.idx(n, co, z, y, 0);
                    for ci in 0..ish.c {
                        for kz in 0..ksh.d {
                            let iz = (z * sd + kz) as isize - pd;
                            if iz < 0 || iz >= ish.d as isize {
                                continue;
                            }
                            for ky in 0..ksh.h {
                                let iy = (y * sh + ky) as isize - ph;
                                if iy < 0 || iy >= ish.h as isize {
                                    continue;
                                }
                                let irow = ish.idx(n, ci, iz as usize, iy as usize, 0);
                                let krow = ksh.idx(co, ci, kz, ky, 0);
                                for kx in 0..ksh.w {
                                    let kval = kernel[krow + kx];
                                    if kval == T::zero() {
                                        continue;
                                    }
                                    let off = kx as isize - pw;
                                    // x range keeping ix = x*sw + off inside [0, ish.w)
                                    let x_lo = if off < 0 {
                                        ((-off) as usize).div_ceil(sw)
                                    } else {
                                        0
                                    };
                                    let x_hi_num = ish.w as isize - 1 - off;
                                    if x_hi_num < 0 {
                                        continue;
                                    }
                                    let x_hi = ((x_hi_num as usize) / sw + 1).min(osh.w);
                                    if x_lo >= x_hi {
                                        continue;
                                    }
                                    if sw == 1 {
                                        let istart =
                                            (irow as isize + x_lo as isize + off) as usize;
                                        for t in 0..x_hi - x_lo {
                                            out[orow + x_lo + t] = out[orow + x_lo + t]
                                                + kval * input[istart + t];
                                        }
                                    } else {
                                        for x in x_lo..x_hi {
                                            let ix = (x * sw) as isize + off;
                                            out[orow + x] =
                                                out[orow + x] + kval * input[irow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dst += scatter(src, kernel)`; the adjoint of [`correlate`]. `src` has the
/// correlation-output geometry, `dst` the correlation-input geometry.
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(
    src: &[T],
    ssh: Shape,
    kernel: &[T],
    ksh: Shape,
    dst: &mut [T],
    dsh: Shape,
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let (sd, sh, sw) = (stride[0], stride[1], stride[2]);
    let (pd, ph, pw) = (pad[0] as isize, pad[1] as isize, pad[2] as isize);
    for n in 0..ssh.n {
        for co in 0..ssh.c {
            for z in 0..ssh.d {
                for y in 0..ssh.h {
                    let srow = ssh.idx(n, co, z, y, 0);
                    for ci in 0..dsh.c {
                        for kz in 0..ksh.d {
                            let iz = (z * sd + kz) as isize - pd;
                            if iz < 0 || iz >= dsh.d as isize {
                                continue;
                            }
                            for ky in 0..ksh.h {
                                let iy = (y * sh + ky) as isize - ph;
                                if iy < 0 || iy >= dsh.h as isize {
                                    continue;
                                }
                                let drow = dsh.idx(n, ci, iz as usize, iy as usize, 0);
                                let krow = ksh.idx(co, ci, kz, ky, 0);
                                for kx in 0..ksh.w {
                                    let kval = kernel[krow + kx];
                                    if kval == T::zero() {
                                        continue;
                                    }
                                    let off = kx as isize - pw;
                                    let x_lo = if off < 0 {
                                        ((-off) as usize).div_ceil(sw)
                                    } else {
                                        0
                                    };
                                    let x_hi_num = dsh.w as isize - 1 - off;
                                    if x_hi_num < 0 {
                                        continue;
                                    }
                                    let x_hi = ((x_hi_num as usize) / sw + 1).min(ssh.w);
                                    if x_lo >= x_hi {
                                        continue;
                                    }
                                    if sw == 1 {
                                        let dstart =
                                            (drow as isize + x_lo as isize + off) as usize;
                                        for t in 0..x_hi - x_lo {
                                            dst[dstart + t] =
                                                dst[dstart + t] + kval * src[srow + x_lo + t];
                                        }
                                    } else {
                                        for x in x_lo..x_hi {
                                            let ix = (x * sw) as isize + off;
                                            dst[drow + ix as usize] =
                                                dst[drow + ix as usize] + kval * src[srow + x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gk += d(correlate)/d(kernel)` paired against `gout`.
#[allow(clippy::too_many_arguments)]
fn kernel_grad<T: Scalar>(
    input: &[T],
    ish: Shape,
    gout: &[T],
    osh: Shape,
    gk: &mut [T],
    ksh: Shape,
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let (sd, sh, sw) = (stride[0], stride[1], stride[2]);
    let (pd, ph, pw) = (pad[0] as isize, pad[1] as isize, pad[2] as isize);
    for n in 0..osh.n {
        for co in 0..osh.c {
            for z in 0..osh.d {
                for y in 0..osh.h {
                    let orow = osh.idx(n, co, z, y, 0);
                    for ci in 0..ish.c {
                        for kz in 0..ksh.d {
                            let iz = (z * sd + kz) as isize - pd;
                            if iz < 0 || iz >= ish.d as isize {
                                continue;
                            }
                            for ky in 0..ksh.h {
                                let iy = (y * sh + ky) as isize - ph;
                                if iy < 0 || iy >= ish.h as isize {
                                    continue;
                                }
                                let irow = ish.idx(n, ci, iz as usize, iy as usize, 0);
                                let krow = ksh.idx(co, ci, kz, ky, 0);
                                for kx in 0..ksh.w {
                                    let off = kx as isize - pw;
                                    let x_lo = if off < 0 {
                                        ((-off) as usize).div_ceil(sw)
                                    } else {
                                        0
                                    };
                                    let x_hi_num = ish.w as isize - 1 - off;
                                    if x_hi_num < 0 {
                                        continue;
                                    }
                                    let x_hi = ((x_hi_num as usize) / sw + 1).min(osh.w);
                                    if x_lo >= x_hi {
                                        continue;
                                    }
                                    let mut acc = T::zero();
                                    if sw == 1 {
                                        let istart =
                                            (irow as isize + x_lo as isize + off) as usize;
                                        for t in 0..x_hi - x_lo {
                                            acc += gout[orow + x_lo + t] * input[istart + t];
                                        }
                                    } else {
                                        for x in x_lo..x_hi {
                                            let ix = (x * sw) as isize + off;
                                            acc += gout[orow + x] * input[irow + ix as usize];
                                        }
                                    }
                                    gk[krow + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-channel sum of `g` over batch and spatial dims.
fn bias_grad<T: Scalar>(g: &[T], sh: Shape, gb: &mut [T]) {
    let sp = sh.spatial_len();
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = sh.idx(n, c, 0, 0, 0);
            let mut acc = T::zero();
            for &v in &g[base..base + sp] {
                acc += v;
            }
            gb[c] += acc;
        }
    }
}

/// Routes the gradient `g` of node `id` into its parents' gradient slots.
pub(crate) fn accumulate_parents<T: Scalar>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = tape.node(id);
    match &node.op {
        Op::Leaf => {}
        Op::Conv { input, kernel, bias, stride, pad } => {
            let ish = input.shape;
            let ksh = kernel.shape;
            let osh = node.shape;
            if tape.node(input.id).needs_grad {
                Tape::add_grad(grads, input.id, ish.len(), |gi| {
                    scatter(g, osh, tape.values(*kernel), ksh, gi, ish, *stride, *pad);
                });
            }
            if tape.node(kernel.id).needs_grad {
                Tape::add_grad(grads, kernel.id, ksh.len(), |gk| {
                    kernel_grad(tape.values(*input), ish, g, osh, gk, ksh, *stride, *pad);
                });
            }
            if let Some(b) = bias {
                if tape.node(b.id).needs_grad {
                    Tape::add_grad(grads, b.id, b.shape.len(), |gb| bias_grad(g, osh, gb));
                }
            }
        }
        Op::TConv { input, kernel, bias, stride, pad } => {
            // Forward was a scatter; its adjoint is the correlation, and the
            // kernel gradient swaps the roles of input and output gradient.
            let ish = input.shape;
            let ksh = kernel.shape;
            let osh = node.shape;
            if tape.node(input.id).needs_grad {
                Tape::add_grad(grads, input.id, ish.len(), |gi| {
                    correlate(g, osh, tape.values(*kernel), ksh, gi, ish, *stride, *pad);
                });
            }
            if tape.node(kernel.id).needs_grad {
                Tape::add_grad(grads, kernel.id, ksh.len(), |gk| {
                    kernel_grad(g, osh, tape.values(*input), ish, gk, ksh, *stride, *pad);
                });
            }
            if let Some(b) = bias {
                if tape.node(b.id).needs_grad {
                    Tape::add_grad(grads, b.id, b.shape.len(), |gb| bias_grad(g, osh, gb));
                }
            }
        }
        Op::AvgPool { input, window } => {
            let ish = input.shape;
            let osh = node.shape;
            let inv = T::from_f64(1.0 / (window[0] * window[1] * window[2]) as f64);
            Tape::add_grad(grads, input.id, ish.len(), |gi| {
                for n in 0..osh.n {
                    for c in 0..osh.c {
                        for z in 0..osh.d {
                            for y in 0..osh.h {
                                for x in 0..osh.w {
                                    let gv = g[osh.idx(n, c, z, y, x)] * inv;
                                    for wz in 0..window[0] {
                                        for wy in 0..window[1] {
                                            for wx in 0..window[2] {
                                                let i = ish.idx(
                                                    n,
                                                    c,
                                                    z * window[0] + wz,
                                                    y * window[1] + wy,
                                                    x * window[2] + wx,
                                                );
                                                gi[i] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Relu { input } => {
            let iv = tape.values(*input);
            Tape::add_grad(grads, input.id, iv.len(), |gi| {
                for i in 0..iv.len() {
                    if iv[i] > T::zero() {
                        gi[i] += g[i];
                    }
                }
            });
        }
        Op::LeakyRelu { input, slope } => {
            let iv = tape.values(*input);
            let s = *slope;
            Tape::add_grad(grads, input.id, iv.len(), |gi| {
                for i in 0..iv.len() {
                    gi[i] += if iv[i] > T::zero() { g[i] } else { g[i] * s };
                }
            });
        }
        Op::Sigmoid { input } => {
            let ov = &node.values;
            Tape::add_grad(grads, input.id, ov.len(), |gi| {
                for i in 0..ov.len() {
                    gi[i] += g[i] * ov[i] * (T::one() - ov[i]);
                }
            });
        }
        Op::BatchNorm { input, scale, shift, xhat, inv_std, train } => {
            let ish = input.shape;
            let sp = ish.spatial_len();
            let m = T::from_f64((ish.n * sp) as f64);
            let sv = tape.values(*scale);
            if tape.node(input.id).needs_grad {
                Tape::add_grad(grads, input.id, ish.len(), |gi| {
                    for c in 0..ish.c {
                        // Channel-wise reductions of the upstream gradient.
                        let mut s1 = 0.0f64; // Σ g
                        let mut s2 = 0.0f64; // Σ g·x̂
                        if *train {
                            for n in 0..ish.n {
                                let base = ish.idx(n, c, 0, 0, 0);
                                for i in base..base + sp {
                                    s1 += g[i].to_f64();
                                    s2 += (g[i] * xhat[i]).to_f64();
                                }
                            }
                        }
                        let s1 = T::from_f64(s1);
                        let s2 = T::from_f64(s2);
                        let a = sv[c] * inv_std[c];
                        for n in 0..ish.n {
                            let base = ish.idx(n, c, 0, 0, 0);
                            for i in base..base + sp {
                                let term = if *train {
                                    g[i] - s1 / m - xhat[i] * s2 / m
                                } else {
                                    g[i]
                                };
                                gi[i] += a * term;
                            }
                        }
                    }
                });
            }
            if tape.node(scale.id).needs_grad {
                Tape::add_grad(grads, scale.id, ish.c, |gs| {
                    for c in 0..ish.c {
                        let mut acc = T::zero();
                        for n in 0..ish.n {
                            let base = ish.idx(n, c, 0, 0, 0);
                            for i in base..base + sp {
                                acc += g[i] * xhat[i];
                            }
                        }
                        gs[c] += acc;
                    }
                });
            }
            if tape.node(shift.id).needs_grad {
                Tape::add_grad(grads, shift.id, ish.c, |gb| {
                    for c in 0..ish.c {
                        let mut acc = T::zero();
                        for n in 0..ish.n {
                            let base = ish.idx(n, c, 0, 0, 0);
                            for i in base..base + sp {
                                acc += g[i];
                            }
                        }
                        gb[c] += acc;
                    }
                });
            }
        }
        Op::Dropout { input, mask, keep } => {
            let inv = T::one() / *keep;
            Tape::add_grad(grads, input.id, input.shape.len(), |gi| {
                for i in 0..mask.len() {
                    if mask[i] {
                        gi[i] += g[i] * inv;
                    }
                }
            });
        }
        Op::Concat { inputs } => {
            let osh = node.shape;
            let sp = osh.spatial_len();
            for n in 0..osh.n {
                let mut c_off = 0usize;
                for p in inputs {
                    let cnt = p.shape.c * sp;
                    let src = osh.idx(n, c_off, 0, 0, 0);
                    if tape.node(p.id).needs_grad {
                        let dst = p.shape.idx(n, 0, 0, 0, 0);
                        Tape::add_grad(grads, p.id, p.shape.len(), |gp| {
                            for i in 0..cnt {
                                gp[dst + i] += g[src + i];
                            }
                        });
                    }
                    c_off += p.shape.c;
                }
            }
        }
        Op::Add { a, b } => {
            for t in [a, b] {
                if tape.node(t.id).needs_grad {
                    Tape::add_grad(grads, t.id, t.shape.len(), |gt| {
                        for i in 0..g.len() {
                            gt[i] += g[i];
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(vec![1.0, -2.0, 3.0, 0.5], Shape::new(1, 1, 1, 2, 2))
            .unwrap();
        let k = tape.constant(vec![1.0], Shape::new(1, 1, 1, 1, 1)).unwrap();
        let y = tape.conv3d(x, k, None, [1; 3], Padding::Explicit([0; 3])).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_kernel_sum_on_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0; 5 * 5 * 5], Shape::new(1, 1, 5, 5, 5)).unwrap();
        let k = tape.constant(vec![1.0; 27], Shape::new(1, 1, 3, 3, 3)).unwrap();
        let y = tape.conv3d(x, k, None, [1; 3], Padding::Explicit([0; 3])).unwrap();
        assert_eq!(tape.shape(y).spatial(), [3, 3, 3]);
        // Interior voxel of the valid convolution sees all 27 taps.
        assert_eq!(tape.values(y)[13], 27.0);
    }

    #[test]
    fn same_padding_preserves_size_for_stride_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 2 * 3 * 4 * 5 * 6], Shape::new(2, 3, 4, 5, 6)).unwrap();
        let k = tape.constant(vec![0.0; 7 * 3 * 27], Shape::new(7, 3, 3, 3, 3)).unwrap();
        let y = tape.conv3d(x, k, None, [1; 3], Padding::Same).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 7, 4, 5, 6));
    }

    #[test]
    fn tconv_doubles_spatial_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0; 8], Shape::new(1, 1, 2, 2, 2)).unwrap();
        let k = tape.constant(vec![1.0; 8], Shape::new(1, 1, 2, 2, 2)).unwrap();
        let y = tape.tconv3d(x, k, None, [2; 3], [0; 3]).unwrap();
        assert_eq!(tape.shape(y).spatial(), [4, 4, 4]);
        // Non-overlapping stride-2 kernel of ones broadcasts each input voxel.
        assert!(tape.values(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adjoint_identity_conv_tconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..25 {
            let (ci, co) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
            let k = [
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
            ];
            let stride = [
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
            ];
            let pad = [
                rng.random_range(0..2usize),
                rng.random_range(0..2usize),
                rng.random_range(0..2usize),
            ];
            // Choose the conv-output extent first so sizes are consistent.
            let on = [
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
            ];
            let mut isp = [0usize; 3];
            let mut ok = true;
            for a in 0..3 {
                let ext = stride[a] * (on[a] - 1) + k[a];
                if ext < 2 * pad[a] + 1 {
                    ok = false;
                    break;
                }
                isp[a] = ext - 2 * pad[a];
            }
            if !ok {
                continue;
            }
            let ish = Shape::new(1, ci, isp[0], isp[1], isp[2]);
            let osh = Shape::new(1, co, on[0], on[1], on[2]);
            let ksh = Shape::new(co, ci, k[0], k[1], k[2]);

            let mut tape = Tape::<f64>::new();
            let x = tape.constant(randvec(&mut rng, ish.len()), ish).unwrap();
            let kt = tape.constant(randvec(&mut rng, ksh.len()), ksh).unwrap();
            let y = randvec(&mut rng, osh.len());

            let cx = tape.conv3d(x, kt, None, stride, Padding::Explicit(pad)).unwrap();
            assert_eq!(tape.shape(cx), osh, "case {case}");
            let yt = tape.constant(y.clone(), osh).unwrap();
            let ty = tape.tconv3d(yt, kt, None, stride, pad).unwrap();
            assert_eq!(tape.shape(ty), ish);

            let lhs: f64 = tape.values(cx).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 =
                tape.values(x).iter().zip(tape.values(ty)).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-9);
            assert!((lhs - rhs).abs() / scale < 1e-12, "case {case}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn avgpool_mean_of_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant((0..8).map(f64::from).collect(), Shape::new(1, 1, 2, 2, 2))
            .unwrap();
        let y = tape.avgpool3d(x, [2; 3]).unwrap();
        assert_eq!(tape.values(y), &[3.5]);
        let c = tape.constant(vec![7.0; 64], Shape::new(1, 1, 4, 4, 4)).unwrap();
        let yc = tape.avgpool3d(c, [2; 3]).unwrap();
        assert!(tape.values(yc).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn activations_pointwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![-1.0, 0.0, 2.0], Shape::new(1, 1, 1, 1, 3)).unwrap();
        let r = tape.relu(x);
        assert_eq!(tape.values(r), &[0.0, 0.0, 2.0]);
        let l = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.values(l), &[-0.2, 0.0, 2.0]);
        let s = tape.sigmoid(x);
        assert!((tape.values(s)[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sh = Shape::new(2, 3, 2, 2, 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randvec(&mut rng, sh.len()), sh).unwrap();
        let scale = tape.constant(vec![1.0; 3], Shape::new(1, 3, 1, 1, 1)).unwrap();
        let shift = tape.constant(vec![0.0; 3], Shape::new(1, 3, 1, 1, 1)).unwrap();
        let mut stats = BnStats::new(3);
        let y = tape.batchnorm(x, scale, shift, &mut stats, true, 0.1, 1e-5).unwrap();
        let yv = tape.values(y);
        for c in 0..3usize {
            let mut vals = Vec::new();
            for n in 0..2 {
                let base = sh.idx(n, c, 0, 0, 0);
                vals.extend_from_slice(&yv[base..base + 8]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let sh = Shape::new(1, 2, 1, 1, 3);
        let x = tape.constant(vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.5], sh).unwrap();
        let scale = tape.constant(vec![1.0; 2], Shape::new(1, 2, 1, 1, 1)).unwrap();
        let shift = tape.constant(vec![0.0; 2], Shape::new(1, 2, 1, 1, 1)).unwrap();
        let mut stats = BnStats::new(2);
        let y = tape.batchnorm(x, scale, shift, &mut stats, false, 0.1, 0.0).unwrap();
        for (a, b) in tape.values(y).iter().zip(tape.values(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0], Shape::new(1, 1, 1, 1, 3)).unwrap();
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn concat_and_backward_split() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![1.0, 2.0], Shape::new(1, 1, 1, 1, 2)).unwrap();
        let b = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], Shape::new(1, 2, 1, 1, 2)).unwrap();
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let grads = tape.backward(&[(y, vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0])]).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(grads.get(b).unwrap(), &[30.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        // y = x + x → dy/dx = 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, -1.0], Shape::new(1, 1, 1, 1, 2)).unwrap();
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(&[(y, vec![1.0, 1.0])]).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }
}
