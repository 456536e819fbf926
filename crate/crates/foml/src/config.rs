//! Experiment configuration: a sectioned key = value file (TOML) plus
//! `--key=value` overrides that mirror the file's keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use foml_core::harness::{Boundaries, EvalOptions, LearnerKind, LearnerSpec};
use foml_core::learners::{BaselineConfig, FomlConfig, FtmlConfig, OptimizerKind};
use foml_core::models::{ArchKind, Architecture};
use foml_core::streams::{StreamConfig, StreamKind, TaskOrder};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` is ambiguous, use one of: {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("malformed flag `{0}` (expected --key=value)")]
    Flag(String),
    #[error("{key} = {value}: {reason}")]
    Range {
        key: &'static str,
        value: String,
        reason: String,
    },
}

fn range<T: ToString>(key: &'static str, value: T, reason: &str) -> ConfigError {
    ConfigError::Range {
        key,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub learner: LearnerKind,
    pub seed: u64,
    /// Whether learners are told where tasks start.
    pub boundaries: Boundaries,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stop once this many stream batches have been processed; 0 runs the
    /// whole stream.
    pub max_steps: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            learner: LearnerKind::Foml,
            seed: 0,
            boundaries: Boundaries::Hidden,
            out_dir: PathBuf::from("runs/foml"),
            checkpoint_every: 0,
            max_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub kind: StreamKind,
    pub num_tasks: usize,
    pub samples_per_task: usize,
    pub heldout_fraction: f64,
    /// Examples per incoming batch.
    #[serde(rename = "N")]
    pub n: usize,
    pub order: TaskOrder,
    pub classes_per_task: usize,
    pub carry_over: usize,
    /// `synthetic` for the built-in glyph set, otherwise a FOMLDS file.
    pub dataset: String,
    pub glyphs_per_class: usize,
    /// Oldest-first eviction limit of replay buffers; 0 keeps everything.
    pub buffer_max_size: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        let s = StreamConfig::default();
        Self {
            kind: s.kind,
            num_tasks: s.num_tasks,
            samples_per_task: s.samples_per_task,
            heldout_fraction: s.heldout_fraction,
            n: s.batch_size,
            order: s.order,
            classes_per_task: s.classes_per_task,
            carry_over: s.carry_over,
            dataset: String::from("synthetic"),
            glyphs_per_class: 100,
            buffer_max_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub filters: Vec<usize>,
    pub siamese_filters: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::Mlp,
            hidden: vec![64],
            filters: vec![32, 32, 64, 64],
            siamese_filters: vec![32, 32, 64, 64, 128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FomlSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub train_fraction: f64,
    pub online_optimizer: OptimizerKind,
    pub meta_optimizer: OptimizerKind,
    pub meta_updates: bool,
    pub meta_batch_size: usize,
    pub exclude_current_batch: bool,
}

impl Default for FomlSection {
    fn default() -> Self {
        let f = FomlConfig::default();
        Self {
            alpha1: f.alpha1,
            alpha2: f.alpha2,
            beta1: f.beta1,
            beta2: f.beta2,
            k: f.k,
            train_fraction: f.train_fraction,
            online_optimizer: f.online_optimizer,
            meta_optimizer: f.meta_optimizer,
            meta_updates: f.meta_updates,
            meta_batch_size: f.meta_batch_size,
            exclude_current_batch: f.exclude_current_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub lr: f64,
    pub updates_per_task: usize,
    pub growth_per_100_tasks: usize,
    pub batch_size: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            lr: b.lr,
            updates_per_task: b.updates_per_task,
            growth_per_100_tasks: b.growth_per_100_tasks,
            batch_size: b.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtmlSection {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub support_fraction: f64,
    pub batch_size: usize,
}

impl Default for FtmlSection {
    fn default() -> Self {
        let f = FtmlConfig::default();
        Self {
            inner_steps: f.inner_steps,
            inner_lr: f.inner_lr,
            outer_lr: f.outer_lr,
            support_fraction: f.support_fraction,
            batch_size: f.meta_batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Train a best-in-hindsight model per task and report regret.
    pub hindsight: bool,
    pub hindsight_steps: usize,
    pub hindsight_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            hindsight: e.hindsight,
            hindsight_steps: e.hindsight_steps,
            hindsight_lr: e.hindsight_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub stream: StreamSection,
    pub model: ModelSection,
    pub foml: FomlSection,
    pub baselines: BaselineSection,
    pub ftml: FtmlSection,
    pub eval: EvalSection,
}

/// Splits `--key=value` (or `--key value`) arguments into pairs.
pub fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::Flag(arg.clone()))?;
        match body.split_once('=') {
            Some((k, v)) if !k.is_empty() => out.push((k.to_string(), v.to_string())),
            Some(_) => return Err(ConfigError::Flag(arg.clone())),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::Flag(arg.clone()))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// A flag value as TOML. Bare words that are not valid TOML, and anything
/// given for a string-valued key, become strings.
fn flag_value(raw: &str, default: Option<&toml::Value>) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    match parsed {
        Some(v) if v.is_str() || !default.is_some_and(toml::Value::is_str) => v,
        _ => toml::Value::String(raw.to_string()),
    }
}

fn defaults_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Resolves `key` or `section.key` to a (section, key) pair.
fn locate(key: &str, defaults: &toml::Table) -> Result<(String, String), ConfigError> {
    if let Some((section, k)) = key.split_once('.') {
        let known = defaults
            .get(section)
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key(k));
        return if known {
            Ok((section.to_string(), k.to_string()))
        } else {
            Err(ConfigError::UnknownKey(key.to_string()))
        };
    }
    let sections: Vec<&String> = defaults
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(s, _)| s)
        .collect();
    match sections.as_slice() {
        [] => Err(ConfigError::UnknownKey(key.to_string())),
        [s] => Ok((s.to_string(), key.to_string())),
        many => Err(ConfigError::Ambiguous {
            key: key.to_string(),
            candidates: many
                .iter()
                .map(|s| format!("--{s}.{key}"))
                .collect::<Vec<_>>()
                .join(", "),
        }),
    }
}

impl ExperimentConfig {
    /// Parses config text, applies the overrides, and validates the result.
    pub fn from_text_and_flags(
        text: &str,
        flags: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        let defaults = defaults_table();
        for (key, raw) in flags {
            let (section, k) = locate(key, &defaults)?;
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let section_table = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("`{section}` must be a section")))?;
            let default = defaults.get(&section).and_then(|s| s.get(&k));
            section_table.insert(k, flag_value(raw, default));
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` if given (defaults otherwise) and applies the overrides.
    pub fn load(path: Option<&Path>, flags: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_text_and_flags(&text, flags)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of every setting that affects results; output location, step
    /// cap and checkpoint cadence are left out so a run can be resumed
    /// elsewhere and further.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c.run.max_steps = 0;
        c.run.checkpoint_every = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").expect("writing to a string");
            s
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.stream;
        if s.num_tasks == 0 {
            return Err(range("stream.num_tasks", s.num_tasks, "must be at least 1"));
        }
        if s.n == 0 {
            return Err(range("stream.N", s.n, "must be at least 1"));
        }
        if s.samples_per_task == 0 || !s.samples_per_task.is_multiple_of(s.n) {
            return Err(range(
                "stream.samples_per_task",
                s.samples_per_task,
                &format!("must be a positive multiple of N = {}", s.n),
            ));
        }
        if !(s.heldout_fraction > 0.0 && s.heldout_fraction < 1.0) {
            return Err(range(
                "stream.heldout_fraction",
                s.heldout_fraction,
                "must be in (0, 1)",
            ));
        }
        if s.glyphs_per_class == 0 {
            return Err(range("stream.glyphs_per_class", 0, "must be at least 1"));
        }
        if s.kind == StreamKind::Pair && (s.classes_per_task < 2 || s.carry_over >= s.classes_per_task)
        {
            return Err(range(
                "stream.carry_over",
                s.carry_over,
                &format!(
                    "must be less than classes_per_task = {} (which must be at least 2)",
                    s.classes_per_task
                ),
            ));
        }

        let m = &self.model;
        let pair_model = m.arch == ArchKind::Siamese7;
        if pair_model != (s.kind == StreamKind::Pair) {
            return Err(range(
                "model.arch",
                arch_name(m.arch),
                "siamese7 is required for the pair stream and only usable there",
            ));
        }
        let widths_ok = |w: &[usize], n: Option<usize>| {
            !w.contains(&0) && n.is_none_or(|n| w.len() == n)
        };
        match m.arch {
            ArchKind::Mlp if !widths_ok(&m.hidden, None) => {
                return Err(range("model.hidden", format!("{:?}", m.hidden), "widths must be positive"))
            }
            ArchKind::ConvNet4 if !widths_ok(&m.filters, Some(4)) => {
                return Err(range(
                    "model.filters",
                    format!("{:?}", m.filters),
                    "needs 4 positive filter counts",
                ))
            }
            ArchKind::Siamese7 if !widths_ok(&m.siamese_filters, Some(7)) => {
                return Err(range(
                    "model.siamese_filters",
                    format!("{:?}", m.siamese_filters),
                    "needs 7 positive filter counts",
                ))
            }
            _ => {}
        }

        let f = &self.foml;
        positive("foml.alpha1", f.alpha1)?;
        positive("foml.alpha2", f.alpha2)?;
        non_negative("foml.beta1", f.beta1)?;
        non_negative("foml.beta2", f.beta2)?;
        if f.k == 0 {
            return Err(range("foml.K", 0, "must be at least 1"));
        }
        if !(f.train_fraction > 0.0 && f.train_fraction <= 1.0) {
            return Err(range("foml.train_fraction", f.train_fraction, "must be in (0, 1]"));
        }
        if f.meta_batch_size == 0 {
            return Err(range("foml.meta_batch_size", 0, "must be at least 1"));
        }

        let b = &self.baselines;
        positive("baselines.lr", b.lr)?;
        if b.batch_size == 0 {
            return Err(range("baselines.batch_size", 0, "must be at least 1"));
        }

        let t = &self.ftml;
        non_negative("ftml.inner_lr", t.inner_lr)?;
        positive("ftml.outer_lr", t.outer_lr)?;
        if !(t.support_fraction > 0.0 && t.support_fraction < 1.0) {
            return Err(range("ftml.support_fraction", t.support_fraction, "must be in (0, 1)"));
        }
        if t.batch_size == 0 {
            return Err(range("ftml.batch_size", 0, "must be at least 1"));
        }

        let e = &self.eval;
        positive("eval.hindsight_lr", e.hindsight_lr)?;
        Ok(())
    }

    pub fn stream_config(&self) -> StreamConfig {
        let s = &self.stream;
        StreamConfig {
            kind: s.kind,
            num_tasks: s.num_tasks,
            samples_per_task: s.samples_per_task,
            heldout_fraction: s.heldout_fraction,
            batch_size: s.n,
            seed: self.run.seed,
            order: s.order,
            classes_per_task: s.classes_per_task,
            carry_over: s.carry_over,
        }
    }

    pub fn architecture(
        &self,
        item_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Architecture, foml_core::models::ModelError> {
        let m = &self.model;
        match m.arch {
            ArchKind::Mlp => Architecture::mlp(&m.hidden, num_classes, item_shape),
            ArchKind::ConvNet4 => Architecture::convnet4(&m.filters, num_classes, item_shape),
            ArchKind::Siamese7 => Architecture::siamese7(&m.siamese_filters, item_shape),
        }
    }

    pub fn learner_spec(&self, arch: Architecture) -> LearnerSpec {
        let f = &self.foml;
        let b = &self.baselines;
        let baseline = BaselineConfig {
            lr: b.lr,
            updates_per_task: b.updates_per_task,
            growth_per_100_tasks: b.growth_per_100_tasks,
            batch_size: b.batch_size,
            ..BaselineConfig::default()
        };
        let t = &self.ftml;
        LearnerSpec {
            kind: self.run.learner,
            arch,
            seed: self.run.seed,
            foml: FomlConfig {
                alpha1: f.alpha1,
                alpha2: f.alpha2,
                beta1: f.beta1,
                beta2: f.beta2,
                k: f.k,
                train_fraction: f.train_fraction,
                online_optimizer: f.online_optimizer,
                meta_optimizer: f.meta_optimizer,
                meta_updates: f.meta_updates,
                meta_batch_size: f.meta_batch_size,
                exclude_current_batch: f.exclude_current_batch,
                seed: self.run.seed,
            },
            baseline: baseline.clone(),
            ftml: FtmlConfig {
                base: baseline,
                inner_steps: t.inner_steps,
                inner_lr: t.inner_lr,
                outer_lr: t.outer_lr,
                support_fraction: t.support_fraction,
                meta_batch_size: t.batch_size,
            },
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            hindsight: self.eval.hindsight,
            hindsight_steps: self.eval.hindsight_steps,
            hindsight_lr: self.eval.hindsight_lr,
        }
    }
}

fn arch_name(kind: ArchKind) -> &'static str {
    match kind {
        ArchKind::Mlp => "mlp",
        ArchKind::ConvNet4 => "convnet4",
        ArchKind::Siamese7 => "siamese7",
    }
}

fn positive(key: &'static str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(range(key, x, "must be positive and finite"))
    }
}

fn non_negative(key: &'static str, x: f64) -> Result<(), ConfigError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(range(key, x, "must be >= 0 and finite"))
    }
}
