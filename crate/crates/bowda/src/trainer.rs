//! Training protocol: supervised source pretraining, adversarial adaptation
//! of a target segmentation network against a feature-space discriminator,
//! and a harness running the comparison strategies end to end.
//!
//! Determinism contract: every random draw flows from named ChaCha streams
//! derived from the master seed, each consumed by exactly one purpose, so two
//! runs of the same spec produce byte-identical checkpoints and logs, and a
//! resumed run continues the interrupted one bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{boundary_weight_map, distance_map, morphological_boundary};
use crate::checkpoint::{config_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{adversarial_generator_loss, bwsl, bwtl_discriminator, cross_entropy, LossConfig, LossValue};
use crate::metaimage::{read_metaimage, read_metaimage_mask};
use crate::metrics::{evaluate_case, MetricReport};
use crate::net::{
    bind_params, bind_params_frozen, discriminator_forward, init_discriminator, init_snet,
    snet_feature_channels, snet_forward, Bindings, DiscriminatorConfig, Mode, ParamSet,
    SNetConfig,
};
use crate::phantom::{gen_phantom, read_manifest, DomainSpec};
use crate::pipeline::{augment, random_crop, sliding_window_infer, CropSpec, WindowSpec};
use crate::rng::{derive_rng, load_state, save_state, RNG_STATE_LEN};
use crate::tensor::{Gradients, Shape, Tape};
use crate::volume::{Mask, Volume};

/// Foreground cut applied to predicted probabilities everywhere a binary
/// decision is needed (distance-term boundary, inference masks).
pub const PROB_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SGDConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Per-epoch learning-rate decay: `lr_e = lr / (1 + decay * epoch)`.
    pub decay: f64,
    pub batch_size: usize,
}

impl Default for SGDConfig {
    fn default() -> Self {
        SGDConfig { learning_rate: 1e-4, momentum: 0.9, decay: 1e-6, batch_size: 4 }
    }
}

impl SGDConfig {
    pub fn desk() -> Self {
        SGDConfig { batch_size: 2, ..SGDConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("sgd: learning rate {} not positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("sgd: momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::Config(format!("sgd: decay {} negative", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sgd: batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay * epoch as f64)
    }
}

/// Velocity buffers matching the trainable entries of `params`, all zero.
pub fn velocity_like(params: &ParamSet<f32>) -> ParamSet<f32> {
    let mut v = ParamSet::new();
    for e in params.iter().filter(|e| e.trainable) {
        v.add(&e.name, e.shape, vec![0.0; e.values.len()], true);
    }
    v
}

/// One momentum-SGD update: `v <- momentum*v - lr_e*g; w <- w + v` with
/// `lr_e = lr / (1 + decay*epoch)`. Entries absent from `grads` (running
/// statistics) are untouched.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &[(String, Vec<f32>)],
    velocity: &mut ParamSet<f32>,
    cfg: &SGDConfig,
    epoch: usize,
) -> Result<()> {
    cfg.validate()?;
    let lr = cfg.learning_rate_at(epoch);
    for (name, g) in grads {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("gradient for '{name}' ({bad})") });
        }
        let v = velocity.get_mut(name)?;
        if v.values.len() != g.len() {
            return Err(Error::Shape(format!(
                "sgd '{name}': {} velocity values vs {} gradient values",
                v.values.len(),
                g.len()
            )));
        }
        for (vi, &gi) in v.values.iter_mut().zip(g) {
            *vi = (cfg.momentum * f64::from(*vi) - lr * f64::from(gi)) as f32;
        }
        let step: Vec<f32> = v.values.clone();
        let p = params.get_mut(name)?;
        if p.values.len() != g.len() {
            return Err(Error::Shape(format!(
                "sgd '{name}': {} parameter values vs {} gradient values",
                p.values.len(),
                g.len()
            )));
        }
        for (wi, &si) in p.values.iter_mut().zip(&step) {
            *wi = (f64::from(*wi) + f64::from(si)) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TargetOnly,
    MixDirect,
    MixResampled,
    Finetune,
    FinetuneResampled,
    AdaptCe,
    AdaptBowda,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::TargetOnly,
        Strategy::MixDirect,
        Strategy::MixResampled,
        Strategy::Finetune,
        Strategy::FinetuneResampled,
        Strategy::AdaptCe,
        Strategy::AdaptBowda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TargetOnly => "target_only",
            Strategy::MixDirect => "mix_direct",
            Strategy::MixResampled => "mix_resampled",
            Strategy::Finetune => "finetune",
            Strategy::FinetuneResampled => "finetune_resampled",
            Strategy::AdaptCe => "adapt_ce",
            Strategy::AdaptBowda => "adapt_bowda",
        }
    }

    pub fn from_name(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub spec: DomainSpec,
    pub train: usize,
    #[serde(default)]
    pub val: usize,
}

/// Either an on-the-fly phantom dataset or a manifest of files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl DataSource {
    pub fn phantom(spec: DomainSpec, train: usize, val: usize) -> DataSource {
        DataSource { phantom: Some(PhantomSource { spec, train, val }), manifest: None }
    }

    pub fn manifest(path: PathBuf) -> DataSource {
        DataSource { phantom: None, manifest: Some(path) }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.phantom, &self.manifest) {
            (Some(p), None) => p.spec.validate(),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "data source needs exactly one of 'phantom' or 'manifest'".into(),
            )),
        }
    }
}

fn default_snet() -> SNetConfig {
    SNetConfig::desk()
}
fn default_disc() -> DiscriminatorConfig {
    DiscriminatorConfig::desk()
}
fn default_crop() -> CropSpec {
    CropSpec::desk()
}
fn default_window() -> WindowSpec {
    WindowSpec::desk()
}
fn default_epochs() -> usize {
    8
}
fn default_adapt_epochs() -> usize {
    6
}
fn default_lambda() -> f64 {
    1.0
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Complete description of one experiment, loadable from JSON with
/// dotted-path overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DataSource>,
    pub target: DataSource,
    #[serde(default)]
    pub sgd: SGDConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_snet")]
    pub snet: SNetConfig,
    #[serde(default = "default_disc")]
    pub discriminator: DiscriminatorConfig,
    #[serde(default = "default_crop")]
    pub crop: CropSpec,
    #[serde(default = "default_window")]
    pub window: WindowSpec,
    #[serde(default = "default_epochs")]
    pub source_epochs: usize,
    #[serde(default = "default_epochs")]
    pub target_epochs: usize,
    #[serde(default = "default_adapt_epochs")]
    pub adapt_epochs: usize,
    /// Scale of the generator's fooling term in the adapted network's
    /// objective; zero reduces adaptation to supervised fine-tuning.
    #[serde(default = "default_lambda")]
    pub adversarial_weight: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Reuse a pretrained source network instead of training one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Desk-scale phantom benchmark: fixed datasets, strategy and training
    /// seed supplied by the caller.
    pub fn desk_phantom(strategy: Strategy, seed: u64, out_dir: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            strategy,
            source: Some(DataSource::phantom(DomainSpec::source_desk(1001), 24, 0)),
            target: DataSource::phantom(DomainSpec::target_desk(2002), 12, 6),
            sgd: SGDConfig { learning_rate: 0.02, ..SGDConfig::desk() },
            loss: LossConfig::default(),
            snet: SNetConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            crop: CropSpec::desk(),
            window: WindowSpec::desk(),
            source_epochs: default_epochs(),
            target_epochs: default_epochs(),
            adapt_epochs: default_adapt_epochs(),
            adversarial_weight: default_lambda(),
            seed,
            out_dir,
            source_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.loss.validate()?;
        self.snet.validate()?;
        self.discriminator.validate()?;
        self.crop.validate()?;
        self.window.validate()?;
        self.target.validate()?;
        if let Some(s) = &self.source {
            s.validate()?;
        }
        if !(self.adversarial_weight.is_finite() && self.adversarial_weight >= 0.0) {
            return Err(Error::Config(format!(
                "adversarial weight {} must be finite and >= 0",
                self.adversarial_weight
            )));
        }
        let source_ok = self.source.is_some()
            || matches!(self.strategy, Strategy::TargetOnly)
            || (matches!(self.strategy, Strategy::Finetune | Strategy::FinetuneResampled)
                && self.source_checkpoint.is_some());
        if !source_ok {
            return Err(Error::Config(format!(
                "strategy {} needs a source data section",
                self.strategy.name()
            )));
        }
        let epochs = match self.strategy {
            Strategy::TargetOnly | Strategy::MixDirect | Strategy::MixResampled => {
                self.target_epochs
            }
            Strategy::Finetune | Strategy::FinetuneResampled => self.target_epochs,
            Strategy::AdaptCe | Strategy::AdaptBowda => self.adapt_epochs,
        };
        if epochs == 0 {
            return Err(Error::Config("spec schedules zero training epochs".into()));
        }
        let trains_source = matches!(
            self.strategy,
            Strategy::Finetune
                | Strategy::FinetuneResampled
                | Strategy::AdaptCe
                | Strategy::AdaptBowda
        ) && self.source_checkpoint.is_none();
        if trains_source && self.source_epochs == 0 {
            return Err(Error::Config("source phase scheduled with zero epochs".into()));
        }
        Ok(())
    }
}

/// Sets `key` (dotted path) to `raw` inside a JSON document, creating
/// intermediate objects. `raw` is parsed as JSON when possible, otherwise
/// taken as a string.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override path '{key}' has an empty segment")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not an object")))?;
        cur = obj.entry(p.to_string()).or_insert(serde_json::Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}': parent is not an object")))?;
    let value = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_spec(bytes: &[u8], overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut doc: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Json { context: "experiment spec".into(), message: e.to_string() })?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let spec: ExperimentSpec = serde_json::from_value(doc)
        .map_err(|e| Error::Json { context: "experiment spec".into(), message: e.to_string() })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&data, overrides)
}

#[derive(Debug, Clone)]
pub struct DatasetCase {
    pub name: String,
    pub image: Volume,
    pub mask: Mask,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedData {
    pub train: Vec<DatasetCase>,
    pub val: Vec<DatasetCase>,
}

/// Materializes a data source: phantom specs generate in memory, manifests
/// read MetaImage pairs from disk.
pub fn load_data(src: &DataSource, label: &str) -> Result<LoadedData> {
    src.validate()?;
    let mut data = LoadedData::default();
    if let Some(p) = &src.phantom {
        for i in 0..p.train {
            let (image, mask) = gen_phantom(&p.spec, i as u64)?;
            data.train.push(DatasetCase { name: format!("{label}_train_{i:03}"), image, mask });
        }
        for i in 0..p.val {
            let index = (p.train + i) as u64;
            let (image, mask) = gen_phantom(&p.spec, index)?;
            data.val.push(DatasetCase { name: format!("{label}_val_{i:03}"), image, mask });
        }
        return Ok(data);
    }
    let manifest_path = src.manifest.as_ref().expect("validated");
    let manifest = read_manifest(manifest_path)?;
    for entry in &manifest.entries {
        let (img_path, mask_path) = manifest.resolve(manifest_path, entry);
        let image = read_metaimage(&img_path)?;
        let mask = read_metaimage_mask(&mask_path)?;
        if image.dims() != mask.dims() {
            return Err(Error::Dataset(format!(
                "case '{}': image {:?} vs mask {:?}",
                entry.image,
                image.dims(),
                mask.dims()
            )));
        }
        let name = img_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.image.clone());
        let case = DatasetCase { name, image, mask };
        match entry.split.as_str() {
            "train" => data.train.push(case),
            "val" => data.val.push(case),
            other => {
                return Err(Error::Dataset(format!(
                    "case '{}': unknown split '{other}'",
                    entry.image
                )))
            }
        }
    }
    Ok(data)
}

/// Resamples every case to `spacing` (trilinear image + renormalize, nearest
/// mask).
pub fn resample_cases(cases: &[DatasetCase], spacing: [f64; 3]) -> Result<Vec<DatasetCase>> {
    cases
        .iter()
        .map(|c| {
            let image = c.image.resample_trilinear(spacing)?.znormalize()?;
            let mask = c.mask.resample_nearest(spacing)?;
            if image.dims() != mask.dims() {
                return Err(Error::Geometry(format!(
                    "resampled case '{}': image {:?} vs mask {:?}",
                    c.name,
                    image.dims(),
                    mask.dims()
                )));
            }
            Ok(DatasetCase { name: c.name.clone(), image, mask })
        })
        .collect()
}

fn supervised_stream_names(tag: &str) -> Vec<String> {
    ["shuffle", "crop", "aug", "drop"].iter().map(|k| format!("{k}_{tag}")).collect()
}

fn adversarial_stream_names() -> Vec<String> {
    let mut names = supervised_stream_names("tgt");
    names.extend(["sample_src", "crop_src", "aug_src"].iter().map(|s| s.to_string()));
    names
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: u64,
    step: u64,
    best_metric: Option<f64>,
    best_epoch: Option<u64>,
    has_disc_velocity: bool,
    has_best_params: bool,
    streams: Vec<String>,
}

/// Everything a training phase needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub velocity: ParamSet<f32>,
    pub disc_velocity: Option<ParamSet<f32>>,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamSet<f32>>,
    streams: Vec<(String, ChaCha8Rng)>,
}

impl TrainState {
    fn with_streams(seed: u64, names: Vec<String>, velocity: ParamSet<f32>) -> TrainState {
        TrainState {
            epoch: 0,
            step: 0,
            velocity,
            disc_velocity: None,
            best_metric: None,
            best_epoch: None,
            best_params: None,
            streams: names.into_iter().map(|n| (derive_rng(seed, &n), n)).map(|(r, n)| (n, r)).collect(),
        }
    }

    pub fn new_supervised(seed: u64, tag: &str, params: &ParamSet<f32>) -> TrainState {
        TrainState::with_streams(seed, supervised_stream_names(tag), velocity_like(params))
    }

    pub fn new_adversarial(
        seed: u64,
        snet_t: &ParamSet<f32>,
        disc: &ParamSet<f32>,
    ) -> TrainState {
        let mut s =
            TrainState::with_streams(seed, adversarial_stream_names(), velocity_like(snet_t));
        s.disc_velocity = Some(velocity_like(disc));
        s
    }

    pub fn stream(&mut self, name: &str) -> Result<&mut ChaCha8Rng> {
        self.streams
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Config(format!("training state has no rng stream '{name}'")))
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        let meta = StateMeta {
            epoch: self.epoch as u64,
            step: self.step,
            best_metric: self.best_metric,
            best_epoch: self.best_epoch.map(|e| e as u64),
            has_disc_velocity: self.disc_velocity.is_some(),
            has_best_params: self.best_params.is_some(),
            streams: self.streams.iter().map(|(n, _)| n.clone()).collect(),
        };
        let bytes = serde_json::to_vec(&meta)
            .map_err(|e| Error::Json { context: "training state".into(), message: e.to_string() })?;
        ck.push_bytes("state.meta", bytes);
        ck.append_params("vel.", &self.velocity);
        if let Some(dv) = &self.disc_velocity {
            ck.append_params("dvel.", dv);
        }
        if let Some(bp) = &self.best_params {
            ck.append_params("bestp.", bp);
        }
        for (name, rng) in &self.streams {
            ck.push_bytes(&format!("rng.{name}"), save_state(rng).to_vec());
        }
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint) -> Result<TrainState> {
        let meta: StateMeta = serde_json::from_slice(ck.get_bytes("state.meta")?)
            .map_err(|e| Error::Checkpoint(format!("state meta: {e}")))?;
        let velocity = ck.extract_params("vel.")?;
        let disc_velocity =
            if meta.has_disc_velocity { Some(ck.extract_params("dvel.")?) } else { None };
        let best_params =
            if meta.has_best_params { Some(ck.extract_params("bestp.")?) } else { None };
        let mut streams = Vec::with_capacity(meta.streams.len());
        for name in &meta.streams {
            let raw = ck.get_bytes(&format!("rng.{name}"))?;
            let arr: [u8; RNG_STATE_LEN] = raw.try_into().map_err(|_| {
                Error::Checkpoint(format!("rng state '{name}' has {} bytes", raw.len()))
            })?;
            streams.push((name.clone(), load_state(&arr)));
        }
        Ok(TrainState {
            epoch: meta.epoch as usize,
            step: meta.step,
            velocity,
            disc_velocity,
            best_metric: meta.best_metric,
            best_epoch: meta.best_epoch.map(|e| e as usize),
            best_params,
            streams,
        })
    }
}

/// The knobs shared by all training phases of one experiment.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub snet: SNetConfig,
    pub disc: DiscriminatorConfig,
    pub sgd: SGDConfig,
    pub loss: LossConfig,
    pub crop: CropSpec,
    pub window: WindowSpec,
    pub adversarial_weight: f64,
    pub seed: u64,
}

impl Trainer {
    pub fn from_spec(spec: &ExperimentSpec, loss: LossConfig) -> Trainer {
        Trainer {
            snet: spec.snet,
            disc: spec.discriminator,
            sgd: spec.sgd,
            loss,
            crop: spec.crop,
            window: spec.window,
            adversarial_weight: spec.adversarial_weight,
            seed: spec.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegLoss {
    /// Plain cross-entropy (source pretraining).
    Ce,
    /// Cross-entropy plus the boundary-distance penalty.
    Bwsl,
}

struct PreparedCrop {
    image: Volume,
    labels: Vec<f32>,
    weights: Vec<f32>,
    dmap: Volume,
}

fn prepare_batch(
    tr: &Trainer,
    cases: &[DatasetCase],
    picks: &[usize],
    state: &mut TrainState,
    crop_stream: &str,
    aug_stream: &str,
) -> Result<Vec<PreparedCrop>> {
    let mut out = Vec::with_capacity(picks.len());
    for &i in picks {
        let case = &cases[i];
        let (cv, cm, _) = {
            let r = state.stream(crop_stream)?;
            random_crop(&case.image, &case.mask, &tr.crop, r)?
        };
        let (image, label, _) = {
            let r = state.stream(aug_stream)?;
            augment(&cv, &cm, r)?
        };
        let weights = boundary_weight_map(&label).into_values();
        // Crops whose label has no boundary contribute no distance penalty.
        let dmap = if morphological_boundary(&label).is_empty() {
            Volume::zeros(image.dims(), image.spacing())?
        } else {
            distance_map(&label)?
        };
        let labels = label.as_volume().values().to_vec();
        out.push(PreparedCrop { image, labels, weights, dmap });
    }
    Ok(out)
}

fn stack_images(batch: &[PreparedCrop]) -> (Vec<f32>, Shape) {
    let dims = batch[0].image.dims();
    let mut vals = Vec::with_capacity(batch.len() * batch[0].image.len());
    for c in batch {
        vals.extend_from_slice(c.image.values());
    }
    (vals, Shape::new(batch.len(), 1, dims[0], dims[1], dims[2]))
}

fn stack_labels(batch: &[PreparedCrop]) -> Vec<f32> {
    batch.iter().flat_map(|c| c.labels.iter().copied()).collect()
}

fn stack_weights(batch: &[PreparedCrop]) -> Vec<f32> {
    batch.iter().flat_map(|c| c.weights.iter().copied()).collect()
}

/// Mean over the batch of the per-sample boundary-weighted segmentation loss
/// (the distance term needs each sample's own distance map).
fn batch_bwsl(
    probs: &[f32],
    labels: &[f32],
    batch: &[PreparedCrop],
    cfg: &LossConfig,
) -> Result<LossValue<f32>> {
    let n = batch.len();
    let sp = probs.len() / n;
    let mut grad = vec![0.0f32; probs.len()];
    let mut value = 0.0f64;
    for (i, crop) in batch.iter().enumerate() {
        let r = i * sp..(i + 1) * sp;
        let lv = bwsl(&probs[r.clone()], &labels[r.clone()], &crop.dmap, cfg, PROB_THRESHOLD)?;
        value += lv.value;
        let g = lv.grad("pred").expect("bwsl always yields a pred gradient");
        for (d, &x) in grad[r].iter_mut().zip(g) {
            *d = (f64::from(x) / n as f64) as f32;
        }
    }
    Ok(LossValue::single(value / n as f64, "pred", grad))
}

fn collect_grads(
    params: &ParamSet<f32>,
    bind: &Bindings,
    grads: &Gradients<f32>,
) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::new();
    for e in params.iter().filter(|e| e.trainable) {
        let t = bind.get(&e.name)?;
        let g = match grads.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; e.values.len()],
        };
        out.push((e.name.clone(), g));
    }
    Ok(out)
}

fn supervised_step(
    tr: &Trainer,
    params: &mut ParamSet<f32>,
    state: &mut TrainState,
    batch: &[PreparedCrop],
    kind: SegLoss,
    tag: &str,
) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let bind = bind_params(&mut tape, params)?;
    let (vals, shape) = stack_images(batch);
    let input = tape.constant(vals, shape)?;
    let drop_name = format!("drop_{tag}");
    let out = {
        let rng = state.stream(&drop_name)?;
        snet_forward(&mut tape, &tr.snet, params, &bind, input, Mode::Train, rng)?
    };
    let labels = stack_labels(batch);
    let lv = match kind {
        SegLoss::Ce => cross_entropy(tape.values(out.prob), &labels, &tr.loss)?,
        SegLoss::Bwsl => batch_bwsl(tape.values(out.prob), &labels, batch, &tr.loss)?,
    };
    if !lv.value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("segmentation loss at step {}", state.step),
        });
    }
    let seed = lv.grad("pred").expect("segmentation loss has a pred gradient").to_vec();
    let grads = tape.backward(&[(out.prob, seed)])?;
    let named = collect_grads(params, &bind, &grads)?;
    sgd_step(params, &named, &mut state.velocity, &tr.sgd, state.epoch)?;
    Ok(lv.value)
}

fn supervised_epoch(
    tr: &Trainer,
    params: &mut ParamSet<f32>,
    state: &mut TrainState,
    train: &[DatasetCase],
    tag: &str,
    kind: SegLoss,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    {
        let r = state.stream(&format!("shuffle_{tag}"))?;
        order.shuffle(r);
    }
    let crop_stream = format!("crop_{tag}");
    let aug_stream = format!("aug_{tag}");
    let mut total = 0.0f64;
    let mut steps = 0usize;
    for chunk in order.chunks(tr.sgd.batch_size) {
        let batch = prepare_batch(tr, train, chunk, state, &crop_stream, &aug_stream)?;
        total += supervised_step(tr, params, state, &batch, kind, tag)?;
        state.step += 1;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Probability map for one volume via overlapped sliding windows in eval
/// mode.
pub fn infer_volume(
    cfg: &SNetConfig,
    params: &ParamSet<f32>,
    window: &WindowSpec,
    vol: &Volume,
) -> Result<Volume> {
    let mut p = params.clone();
    let mut rng = derive_rng(0, "eval");
    sliding_window_infer(vol, window, |patch| {
        let mut tape: Tape<f32> = Tape::new();
        let bind = bind_params_frozen(&mut tape, &p)?;
        let dims = patch.dims();
        let input =
            tape.constant(patch.values().to_vec(), Shape::new(1, 1, dims[0], dims[1], dims[2]))?;
        let out = snet_forward(&mut tape, cfg, &mut p, &bind, input, Mode::Eval, &mut rng)?;
        Volume::new(dims, patch.spacing(), tape.values(out.prob).to_vec())
    })
}

/// Thresholded inference and the full metric suite over a list of cases.
pub fn evaluate_cases(
    cfg: &SNetConfig,
    params: &ParamSet<f32>,
    window: &WindowSpec,
    cases: &[DatasetCase],
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for case in cases {
        let prob = infer_volume(cfg, params, window, &case.image)?;
        let pred = Mask::threshold(&prob, PROB_THRESHOLD as f32);
        report.push(&case.name, evaluate_case(&pred, &case.mask)?);
    }
    Ok(report)
}

fn track_best(
    state: &mut TrainState,
    params: &ParamSet<f32>,
    metric: f64,
) {
    if state.best_metric.map_or(true, |b| metric > b) {
        state.best_metric = Some(metric);
        state.best_epoch = Some(state.epoch);
        state.best_params = Some(params.clone());
    }
}

fn write_resume(
    path: &Path,
    snet_cfg: &SNetConfig,
    params: &ParamSet<f32>,
    disc: Option<&ParamSet<f32>>,
    state: &TrainState,
) -> Result<()> {
    let mut ck = Checkpoint::new(config_digest(snet_cfg)?);
    ck.append_params("snet.", params);
    if let Some(d) = disc {
        ck.append_params("disc.", d);
    }
    state.save_into(&mut ck)?;
    ck.write(path)
}

/// Reads back a resume checkpoint: network, optional discriminator, state.
pub fn load_resume(
    path: &Path,
    snet_cfg: &SNetConfig,
) -> Result<(ParamSet<f32>, Option<ParamSet<f32>>, TrainState)> {
    let ck = Checkpoint::read(path)?;
    ck.ensure_digest(config_digest(snet_cfg)?)?;
    let params = ck.extract_params("snet.")?;
    let state = TrainState::load_from(&ck)?;
    let disc = if state.disc_velocity.is_some() { Some(ck.extract_params("disc.")?) } else { None };
    Ok((params, disc, state))
}

/// Supervised phase over `train`, one pass per epoch. When a validation split
/// is given the best snapshot is the highest mean DSC; otherwise the lowest
/// epoch-mean training loss.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised_phase(
    tr: &Trainer,
    params: &mut ParamSet<f32>,
    state: &mut TrainState,
    train: &[DatasetCase],
    val: &[DatasetCase],
    tag: &str,
    kind: SegLoss,
    epochs: usize,
    log: &mut String,
    resume_path: Option<&Path>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Dataset(format!("supervised phase '{tag}': empty training split")));
    }
    if log.is_empty() {
        log.push_str("epoch,mean_loss,lr,val_dsc\n");
    }
    while state.epoch < epochs {
        let mean = supervised_epoch(tr, params, state, train, tag, kind)?;
        let lr = tr.sgd.learning_rate_at(state.epoch);
        if val.is_empty() {
            track_best(state, params, -mean);
            log.push_str(&format!("{},{},{},\n", state.epoch, mean, lr));
        } else {
            let dsc = evaluate_cases(&tr.snet, params, &tr.window, val)?.mean_dsc();
            track_best(state, params, dsc);
            log.push_str(&format!("{},{},{},{}\n", state.epoch, mean, lr, dsc));
        }
        state.epoch += 1;
        if let Some(p) = resume_path {
            write_resume(p, &tr.snet, params, None, state)?;
        }
    }
    Ok(())
}

/// Features for the discriminator, detached from their producing tape.
fn detach_features(
    src: &Tape<f32>,
    feats: &[crate::tensor::TensorRef; 3],
    dst: &mut Tape<f32>,
) -> Result<[crate::tensor::TensorRef; 3]> {
    let mut out = [feats[0]; 3];
    for (i, &f) in feats.iter().enumerate() {
        out[i] = dst.constant(src.values(f).to_vec(), src.shape(f))?;
    }
    Ok(out)
}

/// One adversarial round: discriminator update on detached features, then the
/// adapted network's update through the refreshed discriminator.
#[allow(clippy::too_many_arguments)]
fn adversarial_step(
    tr: &Trainer,
    snet_s: &mut ParamSet<f32>,
    snet_t: &mut ParamSet<f32>,
    disc: &mut ParamSet<f32>,
    state: &mut TrainState,
    src_batch: &[PreparedCrop],
    tgt_batch: &[PreparedCrop],
    eval_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    // Target forward with gradients; its features feed both sub-steps.
    let mut tape_g: Tape<f32> = Tape::new();
    let bind_t = bind_params(&mut tape_g, snet_t)?;
    let (tv, tsh) = stack_images(tgt_batch);
    let input_t = tape_g.constant(tv, tsh)?;
    let out_t = {
        let rng = state.stream("drop_tgt")?;
        snet_forward(&mut tape_g, &tr.snet, snet_t, &bind_t, input_t, Mode::Train, rng)?
    };

    // Frozen source forward: eval mode, parameters bound as constants.
    let mut tape_s: Tape<f32> = Tape::new();
    let bind_s = bind_params_frozen(&mut tape_s, snet_s)?;
    let (sv, ssh) = stack_images(src_batch);
    let input_s = tape_s.constant(sv, ssh)?;
    let out_s =
        snet_forward(&mut tape_s, &tr.snet, snet_s, &bind_s, input_s, Mode::Eval, eval_rng)?;

    let w_src = stack_weights(src_batch);
    let w_tgt = stack_weights(tgt_batch);

    // Discriminator step on detached features.
    let mut tape_d: Tape<f32> = Tape::new();
    let bind_d = bind_params(&mut tape_d, disc)?;
    let feats_s = detach_features(&tape_s, &out_s.up_features, &mut tape_d)?;
    let feats_t = detach_features(&tape_g, &out_t.up_features, &mut tape_d)?;
    let d_src = discriminator_forward(&mut tape_d, &tr.disc, disc, &bind_d, &feats_s, Mode::Train)?;
    let d_tgt = discriminator_forward(&mut tape_d, &tr.disc, disc, &bind_d, &feats_t, Mode::Train)?;
    let d_lv = bwtl_discriminator(
        tape_d.values(d_src),
        tape_d.values(d_tgt),
        &w_src,
        &w_tgt,
        &tr.loss,
    )?;
    if !d_lv.value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("discriminator loss at step {}", state.step),
        });
    }
    let seeds_d = vec![
        (d_src, d_lv.grad("d_src").expect("transfer loss has a source gradient").to_vec()),
        (d_tgt, d_lv.grad("d_tgt").expect("transfer loss has a target gradient").to_vec()),
    ];
    let g_d = tape_d.backward(&seeds_d)?;
    let named_d = collect_grads(disc, &bind_d, &g_d)?;
    {
        let dvel = state
            .disc_velocity
            .as_mut()
            .ok_or_else(|| Error::Config("adversarial state lacks discriminator velocity".into()))?;
        sgd_step(disc, &named_d, dvel, &tr.sgd, state.epoch)?;
    }

    // Adapted-network step: segmentation loss plus the fooling term through
    // the just-updated discriminator (bound frozen, batch statistics live).
    let bind_df = bind_params_frozen(&mut tape_g, disc)?;
    let d_tgt_g =
        discriminator_forward(&mut tape_g, &tr.disc, disc, &bind_df, &out_t.up_features, Mode::Train)?;
    let labels = stack_labels(tgt_batch);
    let seg = batch_bwsl(tape_g.values(out_t.prob), &labels, tgt_batch, &tr.loss)?;
    let adv = adversarial_generator_loss(tape_g.values(d_tgt_g), &w_tgt, &tr.loss)?;
    if !(seg.value.is_finite() && adv.value.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("adaptation loss at step {}", state.step),
        });
    }
    let lambda = tr.adversarial_weight;
    let adv_seed: Vec<f32> = adv
        .grad("d_tgt")
        .expect("generator loss has a d_tgt gradient")
        .iter()
        .map(|&g| (f64::from(g) * lambda) as f32)
        .collect();
    let seeds_g = vec![
        (out_t.prob, seg.grad("pred").expect("bwsl has a pred gradient").to_vec()),
        (d_tgt_g, adv_seed),
    ];
    let g_t = tape_g.backward(&seeds_g)?;
    let named_t = collect_grads(snet_t, &bind_t, &g_t)?;
    sgd_step(snet_t, &named_t, &mut state.velocity, &tr.sgd, state.epoch)?;

    Ok((d_lv.value, seg.value, lambda * adv.value))
}

/// Adversarial phase: per step, one discriminator update and one adapted-
/// network update (1:1), target batches sweeping the target split per epoch
/// and source batches drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial_phase(
    tr: &Trainer,
    snet_s: &mut ParamSet<f32>,
    snet_t: &mut ParamSet<f32>,
    disc: &mut ParamSet<f32>,
    state: &mut TrainState,
    source: &[DatasetCase],
    target_train: &[DatasetCase],
    target_val: &[DatasetCase],
    epochs: usize,
    step_log: &mut String,
    val_log: &mut String,
    resume_path: Option<&Path>,
) -> Result<()> {
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::Dataset("adversarial phase: empty source or target split".into()));
    }
    if step_log.is_empty() {
        step_log.push_str("step,epoch,d_loss,seg_loss,adv_loss,total_loss,lr\n");
    }
    if val_log.is_empty() {
        val_log.push_str("epoch,val_dsc\n");
    }
    let mut eval_rng = derive_rng(0, "eval");
    while state.epoch < epochs {
        let mut order: Vec<usize> = (0..target_train.len()).collect();
        {
            let r = state.stream("shuffle_tgt")?;
            order.shuffle(r);
        }
        for chunk in order.chunks(tr.sgd.batch_size) {
            let tgt_batch = prepare_batch(tr, target_train, chunk, state, "crop_tgt", "aug_tgt")?;
            let picks: Vec<usize> = {
                let r = state.stream("sample_src")?;
                (0..chunk.len()).map(|_| r.random_range(0..source.len())).collect()
            };
            let src_batch = prepare_batch(tr, source, &picks, state, "crop_src", "aug_src")?;
            let (d_loss, seg_loss, adv_loss) = adversarial_step(
                tr, snet_s, snet_t, disc, state, &src_batch, &tgt_batch, &mut eval_rng,
            )?;
            let lr = tr.sgd.learning_rate_at(state.epoch);
            step_log.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                state.step,
                state.epoch,
                d_loss,
                seg_loss,
                adv_loss,
                seg_loss + adv_loss,
                lr
            ));
            state.step += 1;
        }
        if !target_val.is_empty() {
            let dsc = evaluate_cases(&tr.snet, snet_t, &tr.window, target_val)?.mean_dsc();
            track_best(state, snet_t, dsc);
            val_log.push_str(&format!("{},{}\n", state.epoch, dsc));
        }
        state.epoch += 1;
        if let Some(p) = resume_path {
            write_resume(p, &tr.snet, snet_t, Some(disc), state)?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Blob carrying the network architecture inside saved checkpoints, so
/// inference needs nothing but the file.
const NET_CONFIG_BLOB: &str = "config.snet";

fn save_net_checkpoint(path: &Path, cfg: &SNetConfig, params: &ParamSet<f32>) -> Result<()> {
    let mut ck = Checkpoint::new(config_digest(cfg)?);
    ck.append_params("snet.", params);
    let cfg_bytes = serde_json::to_vec(cfg)
        .map_err(|e| Error::Json { context: "network config".into(), message: e.to_string() })?;
    ck.push_bytes(NET_CONFIG_BLOB, cfg_bytes);
    ck.write(path)
}

/// Recovers the architecture stored in a network checkpoint and verifies it
/// against the container digest.
pub fn net_config_from(ck: &Checkpoint) -> Result<SNetConfig> {
    let bytes = ck.get_bytes(NET_CONFIG_BLOB)?;
    let cfg: SNetConfig = serde_json::from_slice(bytes)
        .map_err(|e| Error::Json { context: "network config".into(), message: e.to_string() })?;
    ck.ensure_digest(config_digest(&cfg)?)?;
    Ok(cfg)
}

/// Loads a pretrained network, refusing architectures other than `cfg`.
pub fn load_net_checkpoint(path: &Path, cfg: &SNetConfig) -> Result<ParamSet<f32>> {
    let ck = Checkpoint::read(path)?;
    init_target_from_source(&ck, cfg)
}

/// The adapted network starts as an exact copy of the source network; the
/// checkpoint must carry the matching architecture digest.
pub fn init_target_from_source(ck: &Checkpoint, cfg: &SNetConfig) -> Result<ParamSet<f32>> {
    ck.ensure_digest(config_digest(cfg)?)?;
    ck.extract_params("snet.")
}

pub struct SourceOutcome {
    pub params: ParamSet<f32>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn train_source_cases(
    tr: &Trainer,
    cases: &[DatasetCase],
    out_dir: &Path,
    epochs: usize,
) -> Result<SourceOutcome> {
    let mut params = init_snet(&tr.snet, &mut derive_rng(tr.seed, "init_snet"))?;
    let mut state = TrainState::new_supervised(tr.seed, "src", &params);
    let mut log = String::new();
    train_supervised_phase(
        tr, &mut params, &mut state, cases, &[], "src", SegLoss::Ce, epochs, &mut log, None,
    )?;
    write_text(&out_dir.join("source_log.csv"), &log)?;
    let final_checkpoint = out_dir.join("source_final.ckpt");
    save_net_checkpoint(&final_checkpoint, &tr.snet, &params)?;
    let best = state.best_params.take().unwrap_or_else(|| params.clone());
    let best_checkpoint = out_dir.join("source_best.ckpt");
    save_net_checkpoint(&best_checkpoint, &tr.snet, &best)?;
    Ok(SourceOutcome { params: best, final_checkpoint, best_checkpoint })
}

/// Phase one on its own: cross-entropy pretraining on the source split,
/// writing final/best checkpoints and the epoch log under the spec's output
/// directory.
pub fn train_source(spec: &ExperimentSpec) -> Result<SourceOutcome> {
    spec.validate()?;
    let src = spec
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("train_source needs a source data section".into()))?;
    let data = load_data(src, "source")?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let tr = Trainer::from_spec(spec, spec.loss);
    train_source_cases(&tr, &data.train, &spec.out_dir, spec.source_epochs)
}

pub struct StrategyOutcome {
    pub report: MetricReport,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

fn obtain_source_net(
    spec: &ExperimentSpec,
    tr: &Trainer,
    cases: Option<&[DatasetCase]>,
    out_dir: &Path,
    stages: &mut Vec<serde_json::Value>,
) -> Result<ParamSet<f32>> {
    if let Some(path) = &spec.source_checkpoint {
        let params = load_net_checkpoint(path, &spec.snet)?;
        stages.push(serde_json::json!({
            "stage": "load_source_checkpoint",
            "path": path.display().to_string(),
        }));
        return Ok(params);
    }
    let cases = cases.ok_or_else(|| Error::Config("source phase without source data".into()))?;
    let outcome = train_source_cases(tr, cases, out_dir, spec.source_epochs)?;
    stages.push(serde_json::json!({
        "stage": "train_source",
        "loss": "cross_entropy",
        "epochs": spec.source_epochs,
        "cases": cases.len(),
    }));
    Ok(outcome.params)
}

/// Runs one named strategy end to end and evaluates its best snapshot on the
/// held-out target split. Writes logs, checkpoints, `metrics.csv` and a
/// `pipeline.json` stage trace under the spec's output directory.
pub fn run_strategy(spec: &ExperimentSpec) -> Result<StrategyOutcome> {
    spec.validate()?;
    let out_dir = spec.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut stages: Vec<serde_json::Value> = Vec::new();

    let target = load_data(&spec.target, "target")?;
    if target.train.is_empty() {
        return Err(Error::Dataset("target training split is empty".into()));
    }
    if target.val.is_empty() {
        return Err(Error::Dataset("target validation split is empty".into()));
    }
    stages.push(serde_json::json!({
        "stage": "load_target",
        "train": target.train.len(),
        "val": target.val.len(),
    }));

    let source = match &spec.source {
        Some(s) => {
            let d = load_data(s, "source")?;
            stages.push(serde_json::json!({
                "stage": "load_source",
                "train": d.train.len(),
                "val": d.val.len(),
            }));
            Some(d)
        }
        None => None,
    };

    // The plain-adversarial control drops both boundary weightings.
    let loss = match spec.strategy {
        Strategy::AdaptCe => LossConfig { alpha: 0.0, beta: 0.0, ..spec.loss },
        _ => spec.loss,
    };
    let tr = Trainer::from_spec(spec, loss);
    let resume_path = out_dir.join("resume.ckpt");

    let (params, state, disc) = match spec.strategy {
        Strategy::TargetOnly => {
            let mut params = init_snet(&tr.snet, &mut derive_rng(spec.seed, "init_snet"))?;
            let mut state = TrainState::new_supervised(spec.seed, "tgt", &params);
            let mut log = String::new();
            train_supervised_phase(
                &tr,
                &mut params,
                &mut state,
                &target.train,
                &target.val,
                "tgt",
                SegLoss::Bwsl,
                spec.target_epochs,
                &mut log,
                Some(&resume_path),
            )?;
            write_text(&out_dir.join("train_log.csv"), &log)?;
            stages.push(serde_json::json!({
                "stage": "train_supervised",
                "split": "target",
                "loss": "bwsl",
                "epochs": spec.target_epochs,
                "cases": target.train.len(),
            }));
            (params, state, None)
        }
        Strategy::MixDirect | Strategy::MixResampled => {
            let src = source.as_ref().expect("validated").train.clone();
            let src = if spec.strategy == Strategy::MixResampled {
                let spacing = target.train[0].image.spacing();
                stages.push(serde_json::json!({
                    "stage": "resample_source",
                    "to_spacing": spacing,
                }));
                resample_cases(&src, spacing)?
            } else {
                src
            };
            let mut pool = src;
            pool.extend(target.train.iter().cloned());
            stages.push(serde_json::json!({ "stage": "pool", "cases": pool.len() }));
            let mut params = init_snet(&tr.snet, &mut derive_rng(spec.seed, "init_snet"))?;
            let mut state = TrainState::new_supervised(spec.seed, "mix", &params);
            let mut log = String::new();
            train_supervised_phase(
                &tr,
                &mut params,
                &mut state,
                &pool,
                &target.val,
                "mix",
                SegLoss::Bwsl,
                spec.target_epochs,
                &mut log,
                Some(&resume_path),
            )?;
            write_text(&out_dir.join("train_log.csv"), &log)?;
            stages.push(serde_json::json!({
                "stage": "train_supervised",
                "split": "pooled",
                "loss": "bwsl",
                "epochs": spec.target_epochs,
                "cases": pool.len(),
            }));
            (params, state, None)
        }
        Strategy::Finetune | Strategy::FinetuneResampled => {
            let src_cases = match &source {
                Some(d) => {
                    let cases = if spec.strategy == Strategy::FinetuneResampled {
                        let spacing = target.train[0].image.spacing();
                        stages.push(serde_json::json!({
                            "stage": "resample_source",
                            "to_spacing": spacing,
                        }));
                        resample_cases(&d.train, spacing)?
                    } else {
                        d.train.clone()
                    };
                    Some(cases)
                }
                None => None,
            };
            let snet_s = obtain_source_net(spec, &tr, src_cases.as_deref(), &out_dir, &mut stages)?;
            let mut params = snet_s;
            let mut state = TrainState::new_supervised(spec.seed, "tgt", &params);
            let mut log = String::new();
            train_supervised_phase(
                &tr,
                &mut params,
                &mut state,
                &target.train,
                &target.val,
                "tgt",
                SegLoss::Bwsl,
                spec.target_epochs,
                &mut log,
                Some(&resume_path),
            )?;
            write_text(&out_dir.join("train_log.csv"), &log)?;
            stages.push(serde_json::json!({
                "stage": "train_supervised",
                "split": "target",
                "loss": "bwsl",
                "epochs": spec.target_epochs,
                "cases": target.train.len(),
            }));
            (params, state, None)
        }
        Strategy::AdaptCe | Strategy::AdaptBowda => {
            let src = source.as_ref().ok_or_else(|| {
                Error::Config("adversarial adaptation needs source data".into())
            })?;
            let mut snet_s =
                obtain_source_net(spec, &tr, Some(&src.train), &out_dir, &mut stages)?;
            let mut snet_t = snet_s.clone();
            let mut disc = init_discriminator(
                &tr.disc,
                snet_feature_channels(&tr.snet),
                &mut derive_rng(spec.seed, "init_disc"),
            )?;
            let mut state = TrainState::new_adversarial(spec.seed, &snet_t, &disc);
            let mut step_log = String::new();
            let mut val_log = String::new();
            train_adversarial_phase(
                &tr,
                &mut snet_s,
                &mut snet_t,
                &mut disc,
                &mut state,
                &src.train,
                &target.train,
                &target.val,
                spec.adapt_epochs,
                &mut step_log,
                &mut val_log,
                Some(&resume_path),
            )?;
            write_text(&out_dir.join("adapt_log.csv"), &step_log)?;
            write_text(&out_dir.join("adapt_val.csv"), &val_log)?;
            stages.push(serde_json::json!({
                "stage": "train_adversarial",
                "epochs": spec.adapt_epochs,
                "alpha": tr.loss.alpha,
                "beta": tr.loss.beta,
                "adversarial_weight": tr.adversarial_weight,
            }));
            (snet_t, state, Some(disc))
        }
    };

    let final_checkpoint = out_dir.join("snet_final.ckpt");
    {
        let mut ck = Checkpoint::new(config_digest(&tr.snet)?);
        ck.append_params("snet.", &params);
        if let Some(d) = &disc {
            ck.append_params("disc.", d);
        }
        ck.write(&final_checkpoint)?;
    }
    let best = state.best_params.clone().unwrap_or_else(|| params.clone());
    let best_checkpoint = out_dir.join("snet_best.ckpt");
    save_net_checkpoint(&best_checkpoint, &tr.snet, &best)?;

    let report = evaluate_cases(&tr.snet, &best, &tr.window, &target.val)?;
    write_text(&out_dir.join("metrics.csv"), &report.to_csv())?;
    stages.push(serde_json::json!({
        "stage": "evaluate",
        "cases": target.val.len(),
        "mean_dsc": report.mean_dsc(),
    }));

    let pipeline = serde_json::json!({
        "strategy": spec.strategy.name(),
        "seed": spec.seed,
        "stages": stages,
    });
    let pipeline_text = serde_json::to_string_pretty(&pipeline)
        .map_err(|e| Error::Json { context: "pipeline trace".into(), message: e.to_string() })?;
    write_text(&out_dir.join("pipeline.json"), &pipeline_text)?;

    Ok(StrategyOutcome { report, best_checkpoint, final_checkpoint, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::AblationFlags;

    fn tiny_domain(seed: u64, blur: f64, noise: f64) -> DomainSpec {
        DomainSpec {
            dims: [16, 16, 16],
            spacing: [1.0, 1.0, 1.0],
            radius_range: [3.0, 4.5],
            deform_amplitude: 0.1,
            blur_sigma: blur,
            noise_sigma: noise,
            fg_level: 1.0,
            bg_level: 0.25,
            texture_amplitude: 0.05,
            seed,
        }
    }

    fn tiny_cases(seed: u64, count: usize) -> Vec<DatasetCase> {
        let spec = tiny_domain(seed, 0.6, 0.08);
        (0..count)
            .map(|i| {
                let (image, mask) = gen_phantom(&spec, i as u64).unwrap();
                DatasetCase { name: format!("case_{i}"), image, mask }
            })
            .collect()
    }

    fn tiny_trainer(seed: u64) -> Trainer {
        Trainer {
            snet: SNetConfig {
                base_width: 4,
                growth: 2,
                down_layers: [1, 1, 1],
                up_layers: [1, 1, 1],
                dropout: 0.2,
                flags: AblationFlags::default(),
            },
            disc: DiscriminatorConfig { widths: [4, 4, 4], leaky_slope: 0.2 },
            sgd: SGDConfig { learning_rate: 0.05, batch_size: 2, ..SGDConfig::default() },
            loss: LossConfig::default(),
            crop: CropSpec { dims: [8, 16, 16] },
            window: WindowSpec { window: [8, 16, 16], stride: [4, 8, 8] },
            adversarial_weight: 1.0,
            seed,
        }
    }

    fn single_param_set(w: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("w", Shape::new(1, 1, 1, 1, 1), vec![w], true);
        p
    }

    #[test]
    fn learning_rate_decay_schedule() {
        let cfg = SGDConfig { learning_rate: 0.1, decay: 0.5, ..SGDConfig::default() };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert!((cfg.learning_rate_at(1) - 0.1 / 1.5).abs() < 1e-15);
        assert!((cfg.learning_rate_at(4) - 0.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_iteration() {
        let cfg = SGDConfig { learning_rate: 0.1, momentum: 0.9, decay: 0.0, batch_size: 1 };
        let mut params = single_param_set(1.0);
        let mut vel = velocity_like(&params);
        let grads = vec![("w".to_string(), vec![1.0f32])];
        sgd_step(&mut params, &grads, &mut vel, &cfg, 0).unwrap();
        assert!((vel.get("w").unwrap().values[0] + 0.1).abs() < 1e-7);
        assert!((params.get("w").unwrap().values[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut params, &grads, &mut vel, &cfg, 0).unwrap();
        assert!((vel.get("w").unwrap().values[0] + 0.19).abs() < 1e-6);
        assert!((params.get("w").unwrap().values[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let cfg = SGDConfig { learning_rate: 0.5, momentum: 0.0, decay: 0.0, batch_size: 1 };
        let mut params = single_param_set(1.0);
        let mut vel = velocity_like(&params);
        sgd_step(&mut params, &[("w".to_string(), vec![0.5f32])], &mut vel, &cfg, 0).unwrap();
        assert_eq!(params.get("w").unwrap().values[0], 0.75);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let cfg = SGDConfig::default();
        let mut params = single_param_set(1.0);
        let mut vel = velocity_like(&params);
        let err = sgd_step(&mut params, &[("w".to_string(), vec![f32::NAN])], &mut vel, &cfg, 0)
            .unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
    }

    #[test]
    fn spec_json_overrides_and_validation() {
        let spec = ExperimentSpec::desk_phantom(Strategy::AdaptBowda, 7, PathBuf::from("o"));
        let text = serde_json::to_vec(&spec).unwrap();
        let parsed = parse_spec(
            &text,
            &[
                ("sgd.batch_size".to_string(), "4".to_string()),
                ("strategy".to_string(), "finetune".to_string()),
                ("loss.alpha".to_string(), "0.5".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(parsed.sgd.batch_size, 4);
        assert_eq!(parsed.strategy, Strategy::Finetune);
        assert_eq!(parsed.loss.alpha, 0.5);

        // Unknown fields and missing sources are rejected.
        assert!(parse_spec(&text, &[("bogus_field".into(), "1".into())]).is_err());
        let mut no_source = spec.clone();
        no_source.source = None;
        let err_text = serde_json::to_vec(&no_source).unwrap();
        assert!(parse_spec(&err_text, &[]).is_err());
        assert!(parse_spec(&err_text, &[("strategy".into(), "target_only".into())]).is_ok());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_name(s.name()).unwrap(), s);
        }
        assert!(Strategy::from_name("nonsense").is_err());
    }

    #[test]
    fn single_step_descends_on_one_batch() {
        let mut tr = tiny_trainer(3);
        tr.snet.dropout = 0.0;
        let cases = tiny_cases(31, 1);
        let mut params = init_snet(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();
        let mut state = TrainState::new_supervised(tr.seed, "src", &params);
        let batch = prepare_batch(&tr, &cases, &[0], &mut state, "crop_src", "aug_src").unwrap();
        let first = supervised_step(&tr, &mut params, &mut state, &batch, SegLoss::Ce, "src").unwrap();
        let second = supervised_step(&tr, &mut params, &mut state, &batch, SegLoss::Ce, "src").unwrap();
        assert!(second < first, "loss went {first} -> {second}");
    }

    #[test]
    fn supervised_phase_is_deterministic() {
        let tr = tiny_trainer(9);
        let cases = tiny_cases(33, 2);
        let run = || {
            let mut params = init_snet(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();
            let mut state = TrainState::new_supervised(tr.seed, "src", &params);
            let mut log = String::new();
            train_supervised_phase(
                &tr, &mut params, &mut state, &cases, &[], "src", SegLoss::Ce, 2, &mut log, None,
            )
            .unwrap();
            (params, log)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(l1, l2);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.values, b.values, "{}", a.name);
        }
    }

    #[test]
    fn target_network_starts_as_source_copy() {
        let cfg = tiny_trainer(5).snet;
        let params = init_snet::<f32>(&cfg, &mut derive_rng(11, "init_snet")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_net_checkpoint(&path, &cfg, &params).unwrap();

        let copied = load_net_checkpoint(&path, &cfg).unwrap();
        assert_eq!(params.len(), copied.len());
        for (a, b) in params.iter().zip(copied.iter()) {
            assert_eq!(a.values, b.values, "{}", a.name);
        }

        let mut other = cfg;
        other.growth += 1;
        assert!(load_net_checkpoint(&path, &other).is_err());
    }

    #[test]
    fn zero_adversarial_weight_reduces_to_supervised_finetuning() {
        let mut tr = tiny_trainer(21);
        tr.adversarial_weight = 0.0;
        let source = tiny_cases(41, 2);
        let target: Vec<DatasetCase> = {
            let spec = tiny_domain(43, 1.2, 0.2);
            (0..2)
                .map(|i| {
                    let (image, mask) = gen_phantom(&spec, i).unwrap();
                    DatasetCase { name: format!("t{i}"), image, mask }
                })
                .collect()
        };
        let init = init_snet::<f32>(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();

        let mut snet_s = init.clone();
        let mut snet_t = init.clone();
        let mut disc = init_discriminator(
            &tr.disc,
            snet_feature_channels(&tr.snet),
            &mut derive_rng(tr.seed, "init_disc"),
        )
        .unwrap();
        let mut state_a = TrainState::new_adversarial(tr.seed, &snet_t, &disc);
        let mut step_log = String::new();
        let mut val_log = String::new();
        train_adversarial_phase(
            &tr, &mut snet_s, &mut snet_t, &mut disc, &mut state_a, &source, &target, &[], 2,
            &mut step_log, &mut val_log, None,
        )
        .unwrap();

        let mut plain = init.clone();
        let mut state_b = TrainState::new_supervised(tr.seed, "tgt", &plain);
        let mut log = String::new();
        train_supervised_phase(
            &tr, &mut plain, &mut state_b, &target, &[], "tgt", SegLoss::Bwsl, 2, &mut log, None,
        )
        .unwrap();

        // Same target-side streams, zero fooling gradient: identical updates.
        for (a, b) in snet_t.iter().zip(plain.iter()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-6, "{} diverged: {x} vs {y}", a.name);
            }
        }
        // Per-epoch mean of the logged segmentation loss matches the
        // supervised epoch means.
        let adv_seg: Vec<(usize, f64)> = step_log
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[1].parse().unwrap(), f[3].parse().unwrap())
            })
            .collect();
        let sup_mean: Vec<f64> = log
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        for (epoch, want) in sup_mean.iter().enumerate() {
            let vals: Vec<f64> =
                adv_seg.iter().filter(|(e, _)| *e == epoch).map(|(_, v)| *v).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - want).abs() < 1e-9, "epoch {epoch}: {mean} vs {want}");
        }
    }

    #[test]
    fn source_network_is_frozen_during_adaptation() {
        let tr = tiny_trainer(17);
        let source = tiny_cases(51, 1);
        let target = tiny_cases(53, 1);
        let mut snet_s = init_snet::<f32>(&tr.snet, &mut derive_rng(1, "init_snet")).unwrap();
        let before: Vec<Vec<u32>> =
            snet_s.iter().map(|e| e.values.iter().map(|v| v.to_bits()).collect()).collect();
        let mut snet_t = snet_s.clone();
        let mut disc = init_discriminator(
            &tr.disc,
            snet_feature_channels(&tr.snet),
            &mut derive_rng(1, "init_disc"),
        )
        .unwrap();
        let mut state = TrainState::new_adversarial(tr.seed, &snet_t, &disc);
        let (mut sl, mut vl) = (String::new(), String::new());
        train_adversarial_phase(
            &tr, &mut snet_s, &mut snet_t, &mut disc, &mut state, &source, &target, &[], 1,
            &mut sl, &mut vl, None,
        )
        .unwrap();
        let after: Vec<Vec<u32>> =
            snet_s.iter().map(|e| e.values.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(before, after);
        // The adapted network did move.
        let moved = snet_t
            .iter()
            .zip(before.iter())
            .any(|(e, b)| e.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>() != *b);
        assert!(moved);
    }

    #[test]
    fn supervised_resume_is_bit_exact() {
        let tr = tiny_trainer(25);
        let cases = tiny_cases(61, 2);
        let dir = tempfile::tempdir().unwrap();
        let straight = dir.path().join("straight.ckpt");
        let resumed = dir.path().join("resumed.ckpt");

        let mut params = init_snet(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();
        let mut state = TrainState::new_supervised(tr.seed, "src", &params);
        let mut log = String::new();
        train_supervised_phase(
            &tr, &mut params, &mut state, &cases, &[], "src", SegLoss::Ce, 3, &mut log,
            Some(&straight),
        )
        .unwrap();

        let part = dir.path().join("part.ckpt");
        let mut p2 = init_snet(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();
        let mut s2 = TrainState::new_supervised(tr.seed, "src", &p2);
        let mut l2 = String::new();
        train_supervised_phase(
            &tr, &mut p2, &mut s2, &cases, &[], "src", SegLoss::Ce, 2, &mut l2, Some(&part),
        )
        .unwrap();
        let (mut p3, _, mut s3) = load_resume(&part, &tr.snet).unwrap();
        let mut l3 = l2.clone();
        train_supervised_phase(
            &tr, &mut p3, &mut s3, &cases, &[], "src", SegLoss::Ce, 3, &mut l3, Some(&resumed),
        )
        .unwrap();

        assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
        assert_eq!(log, l3);
    }

    #[test]
    fn adversarial_resume_is_bit_exact() {
        let tr = tiny_trainer(29);
        let source = tiny_cases(71, 2);
        let target = tiny_cases(73, 2);
        let dir = tempfile::tempdir().unwrap();
        let straight = dir.path().join("straight.ckpt");
        let resumed = dir.path().join("resumed.ckpt");

        let init = init_snet::<f32>(&tr.snet, &mut derive_rng(tr.seed, "init_snet")).unwrap();
        let run = |epochs: usize, path: &Path| {
            let mut snet_s = init.clone();
            let mut snet_t = init.clone();
            let mut disc = init_discriminator(
                &tr.disc,
                snet_feature_channels(&tr.snet),
                &mut derive_rng(tr.seed, "init_disc"),
            )
            .unwrap();
            let mut state = TrainState::new_adversarial(tr.seed, &snet_t, &disc);
            let (mut sl, mut vl) = (String::new(), String::new());
            train_adversarial_phase(
                &tr, &mut snet_s, &mut snet_t, &mut disc, &mut state, &source, &target, &[],
                epochs, &mut sl, &mut vl, Some(path),
            )
            .unwrap();
        };
        run(2, &straight);

        let part = dir.path().join("part.ckpt");
        run(1, &part);
        let (mut snet_t, disc, mut state) = load_resume(&part, &tr.snet).unwrap();
        let mut disc = disc.expect("adversarial resume carries the discriminator");
        let mut snet_s = init.clone();
        let (mut sl, mut vl) = (String::new(), String::new());
        train_adversarial_phase(
            &tr, &mut snet_s, &mut snet_t, &mut disc, &mut state, &source, &target, &[], 2,
            &mut sl, &mut vl, Some(&resumed),
        )
        .unwrap();

        assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
    }

    fn tiny_spec(strategy: Strategy, out: PathBuf) -> ExperimentSpec {
        let tr = tiny_trainer(2);
        ExperimentSpec {
            strategy,
            source: Some(DataSource::phantom(tiny_domain(81, 0.6, 0.08), 2, 0)),
            target: DataSource::phantom(tiny_domain(83, 1.2, 0.2), 2, 1),
            sgd: tr.sgd,
            loss: tr.loss,
            snet: tr.snet,
            discriminator: tr.disc,
            crop: tr.crop,
            window: tr.window,
            source_epochs: 1,
            target_epochs: 1,
            adapt_epochs: 1,
            adversarial_weight: 1.0,
            seed: 2,
            out_dir: out,
            source_checkpoint: None,
        }
    }

    #[test]
    fn target_only_strategy_produces_report_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(Strategy::TargetOnly, dir.path().join("run"));
        let outcome = run_strategy(&spec).unwrap();
        assert_eq!(outcome.report.cases.len(), 1);
        let dsc = outcome.report.mean_dsc();
        assert!((0.0..=100.0).contains(&dsc), "dsc {dsc}");
        for f in ["metrics.csv", "pipeline.json", "train_log.csv", "snet_final.ckpt", "snet_best.ckpt"] {
            assert!(spec.out_dir.join(f).exists(), "{f} missing");
        }
    }

    #[test]
    fn mix_strategies_differ_only_in_resampling_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut direct = tiny_spec(Strategy::MixDirect, dir.path().join("direct"));
        // A spacing mismatch makes resampling meaningful.
        if let Some(src) = &mut direct.source {
            if let Some(p) = &mut src.phantom {
                p.spec.spacing = [1.5, 1.0, 1.0];
            }
        }
        let mut resampled = direct.clone();
        resampled.strategy = Strategy::MixResampled;
        resampled.out_dir = dir.path().join("resampled");
        run_strategy(&direct).unwrap();
        run_strategy(&resampled).unwrap();

        let stage_names = |dir: &Path| -> Vec<String> {
            let doc: serde_json::Value =
                serde_json::from_slice(&fs::read(dir.join("pipeline.json")).unwrap()).unwrap();
            doc["stages"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| s["stage"].as_str().unwrap().to_string())
                .collect()
        };
        let a = stage_names(&direct.out_dir);
        let mut b = stage_names(&resampled.out_dir);
        let pos = b.iter().position(|s| s == "resample_source").expect("resample stage present");
        b.remove(pos);
        assert!(!a.contains(&"resample_source".to_string()));
        assert_eq!(a, b);
    }

    #[test]
    fn adapt_strategy_runs_and_reuses_source_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(Strategy::AdaptBowda, dir.path().join("adapt"));
        let outcome = run_strategy(&spec).unwrap();
        assert!(spec.out_dir.join("adapt_log.csv").exists());
        assert!(spec.out_dir.join("adapt_val.csv").exists());
        assert!(spec.out_dir.join("source_final.ckpt").exists());
        assert_eq!(outcome.report.cases.len(), 1);

        // Re-running against the saved source net skips the source phase.
        spec.source_checkpoint = Some(spec.out_dir.join("source_best.ckpt"));
        spec.out_dir = dir.path().join("adapt2");
        run_strategy(&spec).unwrap();
        let doc: serde_json::Value =
            serde_json::from_slice(&fs::read(spec.out_dir.join("pipeline.json")).unwrap()).unwrap();
        let stages: Vec<&str> =
            doc["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
        assert!(stages.contains(&"load_source_checkpoint"));
        assert!(!stages.contains(&"train_source"));
    }
}
