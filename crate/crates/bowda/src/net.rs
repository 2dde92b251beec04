//! The segmentation network, its dense residual blocks, and the multi-level
//! discriminator.
//!
//! Parameters live in a [`ParamSet`] — a flat, ordered list of named buffers
//! — and are bound onto a fresh tape per forward pass. Batch-norm running
//! statistics are kept in the same set as non-trainable entries so a
//! checkpoint captures the full inference state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Padding, Scalar, Shape, Tape, TensorRef};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Structural switches for the ablation study: dense intra-block
/// concatenation, residual block outputs, long skip connections between the
/// two paths, and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub dense: bool,
    pub residual: bool,
    pub long: bool,
    pub norm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { dense: true, residual: true, long: true, norm: true }
    }
}

/// One dense residual block: `layers` dense layers of `growth` channels each,
/// a 1x1x1 transition back to `in_channels`, and a residual add.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DRBConfig {
    pub in_channels: usize,
    pub layers: usize,
    pub growth: usize,
    pub dropout: f64,
}

impl DRBConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers == 0 || self.growth == 0 {
            return Err(Error::Config(format!(
                "drb: channels/layers/growth must be >= 1, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("drb: dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Encoder-decoder segmentation network: a stem conv block, three
/// (DRB, avgpool) stages down, three (tconv, concat, DRB) stages up, and a
/// 1x1x1 sigmoid head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SNetConfig {
    pub base_width: usize,
    pub growth: usize,
    pub down_layers: [usize; 3],
    pub up_layers: [usize; 3],
    pub dropout: f64,
    pub flags: AblationFlags,
}

impl SNetConfig {
    /// Small configuration for tests and the phantom benchmark.
    pub fn desk() -> Self {
        SNetConfig {
            base_width: 8,
            growth: 4,
            down_layers: [2, 2, 2],
            up_layers: [2, 2, 2],
            dropout: 0.3,
            flags: AblationFlags::default(),
        }
    }

    /// Full-scale configuration (block sizes 4/8/16 down, 8/2/2 up,
    /// growth 32).
    pub fn full() -> Self {
        SNetConfig {
            base_width: 32,
            growth: 32,
            down_layers: [4, 8, 16],
            up_layers: [8, 2, 2],
            dropout: 0.3,
            flags: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("snet: base width must be >= 1".into()));
        }
        for (&l, path) in self
            .down_layers
            .iter()
            .zip(["down"; 3])
            .chain(self.up_layers.iter().zip(["up"; 3]))
        {
            if l == 0 {
                return Err(Error::Config(format!("snet: {path} path has a zero-layer block")));
            }
        }
        self.drb(self.base_width, 1).validate()
    }

    fn drb(&self, in_channels: usize, layers: usize) -> DRBConfig {
        DRBConfig { in_channels, layers, growth: self.growth, dropout: self.dropout }
    }

    /// Channel width entering each up-path block (after the long-connection
    /// concat when enabled).
    fn up_width(&self) -> usize {
        if self.flags.long {
            2 * self.base_width
        } else {
            self.base_width
        }
    }
}

/// Three stride-1 conv blocks (one per feature level) fused coarse-to-fine by
/// two transposed convolutions, ending in a 1x1x1 sigmoid map at image
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub widths: [usize; 3],
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig { widths: [8, 8, 8], leaky_slope: 0.2 }
    }

    pub fn full() -> Self {
        DiscriminatorConfig { widths: [64, 128, 256], leaky_slope: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("discriminator: zero channel width".into()));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::Config(format!(
                "discriminator: leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// A named parameter buffer. Non-trainable entries hold batch-norm running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<T>,
    pub trainable: bool,
}

/// Ordered collection of parameters; the order is the creation order and is
/// what the checkpoint format serializes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: Shape, values: Vec<T>, trainable: bool) {
        debug_assert_eq!(values.len(), shape.len(), "{name}");
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        self.entries.push(ParamEntry { name: name.to_string(), shape, values, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.values.len()).sum()
    }

    /// Converts every buffer to another scalar type (e.g. f32 checkpoint
    /// loaded into an f64 gradient-check harness).
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape,
                    values: e.values.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Human-readable layer table with per-entry and total counts.
    pub fn summary(&self) -> String {
        let mut out = String::from("name                                     shape                 params\n");
        for e in &self.entries {
            let s = e.shape;
            let tag = if e.trainable { "" } else { "  (fixed)" };
            out.push_str(&format!(
                "{:40} {:21} {:>7}{tag}\n",
                e.name,
                format!("{}x{}x{}x{}x{}", s.n, s.c, s.d, s.h, s.w),
                e.values.len()
            ));
        }
        out.push_str(&format!(
            "total {} values ({} trainable)\n",
            self.value_count(),
            self.trainable_count()
        ));
        out
    }
}

/// Tape bindings for one forward pass: parameter name -> leaf tensor.
pub struct Bindings {
    pairs: Vec<(String, TensorRef)>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<TensorRef> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorRef)> {
        self.pairs.iter().map(|(n, r)| (n.as_str(), *r))
    }
}

/// Binds every trainable parameter as a gradient-carrying leaf on `tape`.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Result<Bindings> {
    let mut pairs = Vec::new();
    for e in params.iter() {
        if e.trainable {
            let r = tape.leaf(e.values.clone(), e.shape)?;
            pairs.push((e.name.clone(), r));
        }
    }
    Ok(Bindings { pairs })
}

/// Like [`bind_params`] but without gradient tracking (frozen source network).
pub fn bind_params_frozen<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
) -> Result<Bindings> {
    let mut pairs = Vec::new();
    for e in params.iter() {
        if e.trainable {
            let r = tape.constant(e.values.clone(), e.shape)?;
            pairs.push((e.name.clone(), r));
        }
    }
    Ok(Bindings { pairs })
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
}

fn add_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: [usize; 3],
) {
    let ksh = Shape::new(co, ci, k[0], k[1], k[2]);
    let fan_in = ci * k[0] * k[1] * k[2];
    params.add(&format!("{name}.weight"), ksh, he_uniform(rng, fan_in, ksh.len()), true);
    params.add(&format!("{name}.bias"), Shape::new(1, co, 1, 1, 1), vec![T::zero(); co], true);
}

/// Transposed-conv kernels keep the forward-conv layout: (input channels,
/// output channels, k, k, k); fan-in is over the input channels.
fn add_tconv<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
) {
    let ksh = Shape::new(ci, co, k, k, k);
    let fan_in = ci * k * k * k;
    params.add(&format!("{name}.weight"), ksh, he_uniform(rng, fan_in, ksh.len()), true);
    params.add(&format!("{name}.bias"), Shape::new(1, co, 1, 1, 1), vec![T::zero(); co], true);
}

fn add_bn<T: Scalar>(params: &mut ParamSet<T>, name: &str, c: usize) {
    let sh = Shape::new(1, c, 1, 1, 1);
    params.add(&format!("{name}.scale"), sh, vec![T::one(); c], true);
    params.add(&format!("{name}.shift"), sh, vec![T::zero(); c], true);
    params.add(&format!("{name}.running_mean"), sh, vec![T::zero(); c], false);
    params.add(&format!("{name}.running_var"), sh, vec![T::one(); c], false);
}

/// Registers the parameters of one dense residual block under prefix `blk`.
pub fn add_drb<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    blk: &str,
    cfg: &DRBConfig,
    flags: AblationFlags,
) {
    for i in 0..cfg.layers {
        let cin = layer_in_channels(cfg, flags, i);
        if flags.norm {
            add_bn(params, &format!("{blk}.layer{i}.bn1"), cin);
        }
        add_conv(params, rng, &format!("{blk}.layer{i}.conv1"), cfg.growth, cin, [1; 3]);
        if flags.norm {
            add_bn(params, &format!("{blk}.layer{i}.bn2"), cfg.growth);
        }
        add_conv(params, rng, &format!("{blk}.layer{i}.conv2"), cfg.growth, cfg.growth, [3; 3]);
    }
    let tin = transition_in_channels(cfg, flags);
    add_conv(params, rng, &format!("{blk}.transition"), cfg.in_channels, tin, [1; 3]);
}

fn layer_in_channels(cfg: &DRBConfig, flags: AblationFlags, layer: usize) -> usize {
    if flags.dense {
        cfg.in_channels + layer * cfg.growth
    } else if layer == 0 {
        cfg.in_channels
    } else {
        cfg.growth
    }
}

fn transition_in_channels(cfg: &DRBConfig, flags: AblationFlags) -> usize {
    if flags.dense {
        cfg.in_channels + cfg.layers * cfg.growth
    } else {
        cfg.growth
    }
}

/// Creates all segmentation-network parameters in their fixed order.
pub fn init_snet<T: Scalar>(cfg: &SNetConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let w = cfg.base_width;
    let mut params = ParamSet::new();
    add_conv(&mut params, rng, "stem.conv", w, 1, [3; 3]);
    if cfg.flags.norm {
        add_bn(&mut params, "stem.bn", w);
    }
    for (i, &layers) in cfg.down_layers.iter().enumerate() {
        add_drb(&mut params, rng, &format!("down{i}"), &cfg.drb(w, layers), cfg.flags);
    }
    let uw = cfg.up_width();
    for (i, &layers) in cfg.up_layers.iter().enumerate() {
        let cin = if i == 0 { w } else { uw };
        add_tconv(&mut params, rng, &format!("up{i}.tconv"), cin, w, 2);
        add_drb(&mut params, rng, &format!("up{i}"), &cfg.drb(uw, layers), cfg.flags);
    }
    add_conv(&mut params, rng, "head.conv", 1, uw, [1; 3]);
    Ok(params)
}

/// Creates discriminator parameters for features with the given channel
/// counts (coarse to fine).
pub fn init_discriminator<T: Scalar>(
    cfg: &DiscriminatorConfig,
    feature_channels: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let [w0, w1, w2] = cfg.widths;
    let mut params = ParamSet::new();
    for (i, (&fc, &wc)) in feature_channels.iter().zip(&cfg.widths).enumerate() {
        add_conv(&mut params, rng, &format!("d{i}.conv"), wc, fc, [3; 3]);
        add_bn(&mut params, &format!("d{i}.bn"), wc);
    }
    add_tconv(&mut params, rng, "dup0.tconv", w0, w0, 2);
    add_tconv(&mut params, rng, "dup1.tconv", w0 + w1, w1, 2);
    add_conv(&mut params, rng, "dhead.conv", 1, w1 + w2, [1; 3]);
    Ok(params)
}

/// BN layer helper: reads running stats from `params`, applies the op, and
/// writes updated stats back in train mode.
fn batchnorm_layer<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut ParamSet<T>,
    bind: &Bindings,
    name: &str,
    x: TensorRef,
    mode: Mode,
) -> Result<TensorRef> {
    let mut stats = BnStats {
        mean: params.get(&format!("{name}.running_mean"))?.values.clone(),
        var: params.get(&format!("{name}.running_var"))?.values.clone(),
    };
    let train = mode == Mode::Train;
    let y = tape.batchnorm(
        x,
        bind.get(&format!("{name}.scale"))?,
        bind.get(&format!("{name}.shift"))?,
        &mut stats,
        train,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    if train {
        params.get_mut(&format!("{name}.running_mean"))?.values = stats.mean;
        params.get_mut(&format!("{name}.running_var"))?.values = stats.var;
    }
    Ok(y)
}

fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Bindings,
    name: &str,
    x: TensorRef,
    padding: Padding,
) -> Result<TensorRef> {
    tape.conv3d(
        x,
        bind.get(&format!("{name}.weight"))?,
        Some(bind.get(&format!("{name}.bias"))?),
        [1; 3],
        padding,
    )
}

/// Runs one dense residual block whose parameters live under prefix `blk`.
#[allow(clippy::too_many_arguments)]
pub fn drb_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut ParamSet<T>,
    bind: &Bindings,
    blk: &str,
    cfg: &DRBConfig,
    flags: AblationFlags,
    input: TensorRef,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<TensorRef> {
    if input.shape.c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "{blk}: expected {} channels, got {}",
            cfg.in_channels, input.shape.c
        )));
    }
    let mut features = vec![input];
    for i in 0..cfg.layers {
        let x = if flags.dense {
            if features.len() == 1 {
                input
            } else {
                tape.concat_channels(&features)?
            }
        } else {
            *features.last().expect("nonempty")
        };
        let mut h = x;
        if flags.norm {
            h = batchnorm_layer(tape, params, bind, &format!("{blk}.layer{i}.bn1"), h, mode)?;
        }
        h = tape.relu(h);
        h = conv_layer(tape, bind, &format!("{blk}.layer{i}.conv1"), h, Padding::Explicit([0; 3]))?;
        if flags.norm {
            h = batchnorm_layer(tape, params, bind, &format!("{blk}.layer{i}.bn2"), h, mode)?;
        }
        h = tape.relu(h);
        h = conv_layer(tape, bind, &format!("{blk}.layer{i}.conv2"), h, Padding::Same)?;
        if mode == Mode::Train && cfg.dropout > 0.0 {
            h = tape.dropout(h, cfg.dropout, rng)?;
        }
        features.push(h);
    }
    let pre = if flags.dense {
        tape.concat_channels(&features)?
    } else {
        *features.last().expect("nonempty")
    };
    let out = conv_layer(tape, bind, &format!("{blk}.transition"), pre, Padding::Explicit([0; 3]))?;
    if flags.residual {
        tape.add(out, input)
    } else {
        Ok(out)
    }
}

pub struct SNetOutput {
    pub prob: TensorRef,
    /// Decoder-order feature maps at 1/4, 1/2 and full resolution.
    pub up_features: [TensorRef; 3],
}

/// Full forward pass. `rng` drives dropout masks in train mode and is
/// untouched otherwise.
pub fn snet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &SNetConfig,
    params: &mut ParamSet<T>,
    bind: &Bindings,
    input: TensorRef,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<SNetOutput> {
    cfg.validate()?;
    if input.shape.c != 1 {
        return Err(Error::Shape(format!(
            "snet expects a single-channel input, got {}",
            input.shape.c
        )));
    }
    for (a, &sp) in input.shape.spatial().iter().enumerate() {
        if sp % 8 != 0 {
            return Err(Error::Shape(format!(
                "snet input axis {a} extent {sp} not divisible by 8"
            )));
        }
    }
    let w = cfg.base_width;
    let mut x = conv_layer(tape, bind, "stem.conv", input, Padding::Same)?;
    if cfg.flags.norm {
        x = batchnorm_layer(tape, params, bind, "stem.bn", x, mode)?;
    }
    x = tape.relu(x);

    // Down path, remembering each block output for the long connections.
    let mut skips = Vec::with_capacity(3);
    for (i, &layers) in cfg.down_layers.iter().enumerate() {
        let d = drb_forward(
            tape,
            params,
            bind,
            &format!("down{i}"),
            &cfg.drb(w, layers),
            cfg.flags,
            x,
            mode,
            rng,
        )?;
        skips.push(d);
        x = tape.avgpool3d(d, [2; 3])?;
    }

    let uw = cfg.up_width();
    let mut up_features = Vec::with_capacity(3);
    for (i, &layers) in cfg.up_layers.iter().enumerate() {
        x = tape.tconv3d(
            x,
            bind.get(&format!("up{i}.tconv.weight"))?,
            Some(bind.get(&format!("up{i}.tconv.bias"))?),
            [2; 3],
            [0; 3],
        )?;
        if cfg.flags.long {
            let peer = skips[2 - i];
            x = tape.concat_channels(&[x, peer])?;
        }
        x = drb_forward(
            tape,
            params,
            bind,
            &format!("up{i}"),
            &cfg.drb(uw, layers),
            cfg.flags,
            x,
            mode,
            rng,
        )?;
        up_features.push(x);
    }

    let logits = conv_layer(tape, bind, "head.conv", x, Padding::Explicit([0; 3]))?;
    let prob = tape.sigmoid(logits);
    Ok(SNetOutput {
        prob,
        up_features: [up_features[0], up_features[1], up_features[2]],
    })
}

/// Discriminator forward over the three decoder features (coarse to fine).
/// The output is a per-voxel domain probability map at image resolution.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DiscriminatorConfig,
    params: &mut ParamSet<T>,
    bind: &Bindings,
    features: &[TensorRef; 3],
    mode: Mode,
) -> Result<TensorRef> {
    cfg.validate()?;
    for (i, pair) in features.windows(2).enumerate() {
        let a = pair[0].shape.spatial();
        let b = pair[1].shape.spatial();
        if [a[0] * 2, a[1] * 2, a[2] * 2] != b {
            return Err(Error::Shape(format!(
                "discriminator: feature {} at {:?} is not half the resolution of feature {} at {:?}",
                i,
                a,
                i + 1,
                b
            )));
        }
    }
    let mut blocks = Vec::with_capacity(3);
    for (i, &f) in features.iter().enumerate() {
        let mut h = conv_layer(tape, bind, &format!("d{i}.conv"), f, Padding::Same)?;
        h = batchnorm_layer(tape, params, bind, &format!("d{i}.bn"), h, mode)?;
        blocks.push(tape.leaky_relu(h, cfg.leaky_slope));
    }
    let up0 = tape.tconv3d(
        blocks[0],
        bind.get("dup0.tconv.weight")?,
        Some(bind.get("dup0.tconv.bias")?),
        [2; 3],
        [0; 3],
    )?;
    let mid = tape.concat_channels(&[up0, blocks[1]])?;
    let up1 = tape.tconv3d(
        mid,
        bind.get("dup1.tconv.weight")?,
        Some(bind.get("dup1.tconv.bias")?),
        [2; 3],
        [0; 3],
    )?;
    let fused = tape.concat_channels(&[up1, blocks[2]])?;
    let logits = conv_layer(tape, bind, "dhead.conv", fused, Padding::Explicit([0; 3]))?;
    Ok(tape.sigmoid(logits))
}

/// Channel counts of the three decoder features, needed to size the
/// discriminator.
pub fn snet_feature_channels(cfg: &SNetConfig) -> [usize; 3] {
    [cfg.up_width(); 3]
}
