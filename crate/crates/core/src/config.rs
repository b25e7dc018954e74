//! Run, objective, data and network configuration.
//!
//! The on-disk form is TOML with four flat sections (`[run]`,
//! `[objective]`, `[data]`, `[networks]`). Objective weights may be omitted
//! in a file; omitted weights resolve to the value the variant implies
//! (1.0 for an active term, 0.0 otherwise). Explicit weights are never
//! rewritten: an inconsistent explicit weight is a validation error.

// Range checks are written negated so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Multiclass,
    Binary,
    Combined,
    Baseline,
}

impl Variant {
    pub fn uses_binary(self) -> bool {
        matches!(self, Variant::Binary | Variant::Combined)
    }

    pub fn uses_multiclass(self) -> bool {
        matches!(self, Variant::Multiclass | Variant::Combined)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Multiclass => "multiclass",
            Variant::Binary => "binary",
            Variant::Combined => "combined",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Aligned pairs, conditional discriminator and L1 reconstruction.
    Paired,
    /// Two generators with cycle-consistency.
    Unpaired,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Paired => "paired",
            Baseline::Unpaired => "unpaired",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "s2p")]
    Sketch2Photo,
    #[serde(rename = "l2p")]
    Label2Photo,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sketch2Photo => "s2p",
            Task::Label2Photo => "l2p",
        }
    }

    /// Channel count of the source domain.
    pub fn source_channels(self) -> usize {
        match self {
            Task::Sketch2Photo => 1,
            Task::Label2Photo => 3,
        }
    }
}

/// Adversarial scoring of the image discriminators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    /// Cross-entropy for paired, least-squares for unpaired.
    Auto,
    Bce,
    Lsgan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorArch {
    Resnet,
    Unet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Stub,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMethod {
    Hed,
    Xdog,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub baseline: Baseline,
    pub w_g: f64,
    pub w_b: f64,
    pub w_m: f64,
    /// Weight of the paired L1 reconstruction term.
    pub lambda_l1: f64,
    /// Weight of each unpaired cycle term.
    pub lambda_cyc: f64,
    pub gan_mode: GanMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Combined, Baseline::Unpaired)
    }
}

impl ObjectiveConfig {
    /// Variant-consistent weights: 1.0 for active terms, 0.0 otherwise.
    pub fn for_variant(variant: Variant, baseline: Baseline) -> Self {
        Self {
            variant,
            baseline,
            w_g: 1.0,
            w_b: if variant.uses_binary() { 1.0 } else { 0.0 },
            w_m: if variant.uses_multiclass() { 1.0 } else { 0.0 },
            lambda_l1: 100.0,
            lambda_cyc: 10.0,
            gan_mode: GanMode::Auto,
        }
    }

    /// True when image discriminators use least-squares scoring.
    pub fn least_squares(&self) -> bool {
        match self.gan_mode {
            GanMode::Auto => self.baseline == Baseline::Unpaired,
            GanMode::Bce => false,
            GanMode::Lsgan => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub resolution: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub task: Task,
    pub batch_size: usize,
    /// Linear decay to zero over the second half of training.
    pub lr_decay: bool,
    /// Checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Batches prepared ahead of the training loop.
    pub prefetch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            epochs: 200,
            learning_rate: 0.0002,
            optimizer: OptimizerKind::Adam,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            task: Task::Sketch2Photo,
            batch_size: 1,
            lr_decay: false,
            checkpoint_every: 0,
            prefetch: 2,
        }
    }
}

impl RunConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.lr_decay || self.epochs < 2 {
            return self.learning_rate;
        }
        let half = self.epochs / 2;
        if epoch < half {
            self.learning_rate
        } else {
            let remaining = (self.epochs - epoch) as f64 / (self.epochs - half + 1) as f64;
            self.learning_rate * remaining
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset_dir: String,
    pub name: String,
    pub edge_method: EdgeMethod,
    /// Gaussian smoothing before edge detection; 0 disables it.
    pub edge_sigma: f64,
    pub edge_binarize: bool,
    pub edge_threshold: f64,
    /// Optional weight file for the pretrained edge detector.
    pub edge_weights: String,
    /// Image counts for `synth-data`.
    pub synth_train: usize,
    pub synth_test: usize,
    /// Fraction of curated images placed in the training split.
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            name: "synthetic".into(),
            edge_method: EdgeMethod::Gradient,
            edge_sigma: 1.0,
            edge_binarize: false,
            edge_threshold: 0.2,
            edge_weights: String::new(),
            synth_train: 256,
            synth_test: 64,
            train_ratio: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksConfig {
    pub generator_arch: GeneratorArch,
    pub generator_width: usize,
    /// Residual blocks (resnet) or encoder depth (unet).
    pub generator_blocks: usize,
    /// Stride-2 stages of the resnet generator.
    pub generator_downsamplings: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub patch_output: bool,
    pub segbackend: AssetKind,
    pub seg_weights: String,
    pub seg_classes: usize,
    pub extractor: AssetKind,
    pub extractor_weights: String,
    pub feature_dim: usize,
}

impl Default for NetworksConfig {
    fn default() -> Self {
        Self {
            generator_arch: GeneratorArch::Resnet,
            generator_width: 64,
            generator_blocks: 9,
            generator_downsamplings: 2,
            disc_width: 64,
            disc_layers: 3,
            patch_output: true,
            segbackend: AssetKind::Stub,
            seg_weights: String::new(),
            seg_classes: crate::segbackend::PALETTE.len(),
            extractor: AssetKind::Stub,
            extractor_weights: String::new(),
            feature_dim: 64,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    pub networks: NetworksConfig,
}

/// Objective section as written in a file: weights are optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub variant: Variant,
    pub baseline: Baseline,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_m: Option<f64>,
    pub lambda_l1: f64,
    pub lambda_cyc: f64,
    pub gan_mode: GanMode,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let d = ObjectiveConfig::default();
        Self {
            variant: d.variant,
            baseline: d.baseline,
            w_g: None,
            w_b: None,
            w_m: None,
            lambda_l1: d.lambda_l1,
            lambda_cyc: d.lambda_cyc,
            gan_mode: d.gan_mode,
        }
    }
}

/// Configuration as parsed from TOML before weight resolution. Every
/// section and key is optional.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub objective: ObjectiveSection,
    pub data: DataConfig,
    pub networks: NetworksConfig,
}

// Sections default field-by-field so partial files parse.
macro_rules! section_defaults {
    ($($t:ty),*) => {$(
        impl $t {
            fn from_partial(v: toml::Value) -> Result<Self> {
                let mut base = toml::Value::try_from(Self::default()).map_err(|e| Error::Parse(e.to_string()))?;
                merge(&mut base, v);
                base.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))
            }
        }
    )*};
}
section_defaults!(RunConfig, ObjectiveSection, DataConfig, NetworksConfig);

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let mut out = ConfigFile::default();
        for (key, v) in value {
            match key.as_str() {
                "run" => out.run = RunConfig::from_partial(v)?,
                "objective" => out.objective = ObjectiveSection::from_partial(v)?,
                "data" => out.data = DataConfig::from_partial(v)?,
                "networks" => out.networks = NetworksConfig::from_partial(v)?,
                other => return Err(Error::Parse(format!("unknown section [{other}]"))),
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets `section.key` from its textual value, parsed as a TOML value
    /// when possible and as a bare string otherwise.
    pub fn set(&mut self, dotted: &str, raw: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::Parse(format!("override `{dotted}` must be section.key")))?;
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Parse(e.to_string()))?;
        let table = root
            .get_mut(section)
            .and_then(|t| t.as_table_mut())
            .ok_or_else(|| Error::Parse(format!("unknown section `{section}`")))?;
        let parsed = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        // Integers given for float keys
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, p) => p,
        };
        let is_weight = section == "objective" && matches!(key, "w_g" | "w_b" | "w_m");
        if !table.contains_key(key) && !is_weight {
            return Err(Error::Parse(format!("unknown key `{dotted}`")));
        }
        let parsed = match parsed {
            toml::Value::Integer(i) if is_weight => toml::Value::Float(i as f64),
            p => p,
        };
        table.insert(key.to_string(), parsed);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Parse(format!("{dotted}: {e}")))?;
        Ok(())
    }

    pub fn resolve(&self) -> Config {
        let o = &self.objective;
        let d = ObjectiveConfig::for_variant(o.variant, o.baseline);
        Config {
            run: self.run.clone(),
            objective: ObjectiveConfig {
                variant: o.variant,
                baseline: o.baseline,
                w_g: o.w_g.unwrap_or(d.w_g),
                w_b: o.w_b.unwrap_or(d.w_b),
                w_m: o.w_m.unwrap_or(d.w_m),
                lambda_l1: o.lambda_l1,
                lambda_cyc: o.lambda_cyc,
                gan_mode: o.gan_mode,
            },
            data: self.data.clone(),
            networks: self.networks.clone(),
        }
    }
}

impl From<&Config> for ConfigFile {
    fn from(c: &Config) -> Self {
        let o = &c.objective;
        ConfigFile {
            run: c.run.clone(),
            objective: ObjectiveSection {
                variant: o.variant,
                baseline: o.baseline,
                w_g: Some(o.w_g),
                w_b: Some(o.w_b),
                w_m: Some(o.w_m),
                lambda_l1: o.lambda_l1,
                lambda_cyc: o.lambda_cyc,
                gan_mode: o.gan_mode,
            },
            data: c.data.clone(),
            networks: c.networks.clone(),
        }
    }
}

impl Config {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(ConfigFile::parse(text)?.resolve())
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("VariantWeightConflict: variant {variant} requires {term} {expect}, got {value}")]
    VariantWeightConflict { variant: Variant, term: &'static str, expect: &'static str, value: f64 },
    #[error("NegativeWeight: {term} = {value}")]
    NegativeWeight { term: &'static str, value: f64 },
    #[error("NonPositiveLearningRate: {0}")]
    NonPositiveLearningRate(f64),
    #[error("InvalidResolution: {0} must be positive and divisible by 4")]
    InvalidResolution(usize),
    #[error("InvalidValue: {key}: {reason}")]
    InvalidValue { key: &'static str, reason: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::VariantWeightConflict { .. } => "VariantWeightConflict",
            ConfigError::NegativeWeight { .. } => "NegativeWeight",
            ConfigError::NonPositiveLearningRate(_) => "NonPositiveLearningRate",
            ConfigError::InvalidResolution(_) => "InvalidResolution",
            ConfigError::InvalidValue { .. } => "InvalidValue",
        }
    }
}

/// Checks the objective's variant-weight table.
pub fn validate_objective(o: &ObjectiveConfig) -> Vec<ConfigError> {
    let mut errs = Vec::new();
    for (term, value) in [("w_g", o.w_g), ("w_b", o.w_b), ("w_m", o.w_m)] {
        if !(value >= 0.0) || !value.is_finite() {
            errs.push(ConfigError::NegativeWeight { term, value });
        }
    }
    let mut need = |term: &'static str, value: f64, active: bool| {
        let ok = if active { value > 0.0 } else { value == 0.0 };
        if !ok {
            errs.push(ConfigError::VariantWeightConflict {
                variant: o.variant,
                term,
                expect: if active { "> 0" } else { "== 0" },
                value,
            });
        }
    };
    need("w_b", o.w_b, o.variant.uses_binary());
    need("w_m", o.w_m, o.variant.uses_multiclass());
    for (key, value) in [("lambda_l1", o.lambda_l1), ("lambda_cyc", o.lambda_cyc)] {
        if !(value >= 0.0) || !value.is_finite() {
            errs.push(ConfigError::InvalidValue { key, reason: format!("{value} must be a finite non-negative number") });
        }
    }
    errs
}

/// Returns the config unchanged when every invariant holds, otherwise the
/// full list of violations.
pub fn validate_config(cfg: Config) -> std::result::Result<Config, Vec<ConfigError>> {
    let mut errs = validate_objective(&cfg.objective);
    let r = &cfg.run;
    if !(r.learning_rate > 0.0) || !r.learning_rate.is_finite() {
        errs.push(ConfigError::NonPositiveLearningRate(r.learning_rate));
    }
    if r.resolution == 0 || !r.resolution.is_multiple_of(4) {
        errs.push(ConfigError::InvalidResolution(r.resolution));
    }
    let mut invalid = |key: &'static str, bad: bool, reason: &str| {
        if bad {
            errs.push(ConfigError::InvalidValue { key, reason: reason.into() });
        }
    };
    invalid("run.epochs", r.epochs == 0, "must be at least 1");
    invalid("run.batch_size", r.batch_size == 0, "must be at least 1");
    // TOML integers are signed 64-bit.
    invalid("run.seed", r.seed > i64::MAX as u64, "must fit in a signed 64-bit integer");
    invalid("run.beta1", !(0.0..1.0).contains(&r.beta1), "must lie in [0, 1)");
    invalid("run.beta2", !(0.0..1.0).contains(&r.beta2), "must lie in [0, 1)");
    let n = &cfg.networks;
    invalid("networks.generator_width", n.generator_width == 0, "must be at least 1");
    invalid("networks.disc_width", n.disc_width == 0, "must be at least 1");
    invalid("networks.seg_classes", n.seg_classes < 2, "needs at least two classes");
    invalid("networks.feature_dim", n.feature_dim == 0, "must be at least 1");
    let d = &cfg.data;
    invalid("data.train_ratio", !(d.train_ratio > 0.0 && d.train_ratio <= 1.0), "must lie in (0, 1]");
    invalid("data.edge_sigma", !(d.edge_sigma >= 0.0), "must be non-negative");
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

/// Named random streams; each is an independent ChaCha stream of the seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Augment = 2,
    Synth = 3,
    Extractor = 4,
    Split = 5,
}

/// Deterministic source of every random stream of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    seed: u64,
}

pub fn seed_all(seed: u64) -> Seeds {
    Seeds { seed }
}

impl Seeds {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, s: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s as u64);
        rng
    }

    /// Stream of `s` dedicated to one epoch, so per-epoch randomness does
    /// not depend on how many epochs ran before in this process.
    pub fn epoch_stream(&self, s: Stream, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((s as u64 + 1) << 32) | epoch as u64);
        rng
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("bad rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}
