//! Runs experiments and writes their artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use foml_core::eval::{self, MetricsRecord};
use foml_core::harness::{AnyLearner, Harness, HarnessError, RunState};
use foml_core::streams::{synthetic_glyphs, BaseDataset, Stream, StreamKind};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{self, DatasetError};

pub const CONFIG_FILE: &str = "config.toml";
pub const CURVE_FILE: &str = "curve.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const REGRET_FILE: &str = "regret.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written by a different configuration (hash {found}, expected {expected})")]
    ConfigMismatch { found: String, expected: String },
    #[error("numeric failure: {source}; state saved to {}", checkpoint.display())]
    Numeric {
        source: HarnessError,
        checkpoint: PathBuf,
    },
    #[error(transparent)]
    Harness(HarnessError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunError {
    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Setup(_)
            | RunError::ConfigMismatch { .. }
            | RunError::Checkpoint(CheckpointError::BadMagic(_))
            | RunError::Checkpoint(CheckpointError::Version { .. }) => 2,
            RunError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn base_dataset(config: &ExperimentConfig) -> Result<BaseDataset, RunError> {
    let s = &config.stream;
    if s.dataset == "synthetic" {
        Ok(synthetic_glyphs(s.glyphs_per_class, config.run.seed))
    } else {
        Ok(dataset::read_dataset(Path::new(&s.dataset))?)
    }
}

pub fn build_stream(config: &ExperimentConfig) -> Result<Stream, RunError> {
    let base = base_dataset(config)?;
    Stream::new(config.stream_config(), base).map_err(|e| RunError::Setup(e.to_string()))
}

/// A fresh run state for `config` on `stream`.
pub fn initial_state(config: &ExperimentConfig, stream: &Stream) -> Result<RunState, RunError> {
    let num_classes = match config.stream.kind {
        StreamKind::Rainbow => stream.num_classes(),
        StreamKind::Pair => 2,
    };
    let arch = config
        .architecture(stream.item_shape(), num_classes)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let spec = config.learner_spec(arch);
    let mut learner = AnyLearner::build(&spec, stream.batches_per_task())
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let cap = config.stream.buffer_max_size;
    if cap > 0 {
        match &mut learner {
            AnyLearner::Foml(l) => l.buffer.max_size = Some(cap),
            AnyLearner::Toe(l) => l.buffer.max_size = Some(cap),
            _ => {}
        }
    }
    Ok(RunState::new(learner))
}

fn harness(config: &ExperimentConfig, stream: Stream, state: RunState) -> Result<Harness, RunError> {
    Harness::new(
        stream,
        state,
        config.run.boundaries,
        config.eval_options(),
        config.run.seed,
    )
    .map_err(|e| match e {
        HarnessError::Capability(m) => RunError::Setup(m),
        other => RunError::Harness(other),
    })
}

/// Runs `config` from the start, writing artifacts into its output directory.
pub fn run_experiment(config: &ExperimentConfig, quiet: bool) -> Result<MetricsRecord, RunError> {
    let stream = build_stream(config)?;
    let state = initial_state(config, &stream)?;
    let h = harness(config, stream, state)?;
    drive(config, h, quiet)
}

/// Continues the run saved in `checkpoint`; `config` must hash to the value
/// stored with it.
pub fn resume(
    checkpoint: &Path,
    config: &ExperimentConfig,
    quiet: bool,
) -> Result<MetricsRecord, RunError> {
    let (found, state) = checkpoint::load(checkpoint)?;
    let expected = config.hash();
    if found != expected {
        return Err(RunError::ConfigMismatch { found, expected });
    }
    let stream = build_stream(config)?;
    let h = harness(config, stream, state)?;
    drive(config, h, quiet)
}

fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

fn drive(config: &ExperimentConfig, mut h: Harness, quiet: bool) -> Result<MetricsRecord, RunError> {
    let out = &config.run.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let started = now();
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()).map_err(io_err(&config_path))?;
    let hash = config.hash();
    let ckpt = out.join(CHECKPOINT_FILE);
    let cap = config.run.max_steps;
    let every = config.run.checkpoint_every;
    loop {
        if cap > 0 && h.state().position >= cap {
            break;
        }
        let tasks_before = h.state().tasks_completed;
        match h.step() {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) if e.is_numeric() => {
                checkpoint::save(&ckpt, &hash, h.state())?;
                write_outputs(out, h.record())?;
                return Err(RunError::Numeric {
                    source: e,
                    checkpoint: ckpt,
                });
            }
            Err(e) => return Err(RunError::Harness(e)),
        }
        let state = h.state();
        if !quiet && state.tasks_completed > tasks_before {
            let record = &state.record;
            let last = record.per_task.last().expect("a task just completed");
            eprintln!(
                "task {:>4}  error {:.3}  cumulative {:.3}",
                last.task_index,
                last.error_rate,
                record.cum_mean_errors().last().copied().unwrap_or_default()
            );
        }
        if every > 0 && state.position.is_multiple_of(every) {
            checkpoint::save(&ckpt, &hash, state)?;
        }
    }
    checkpoint::save(&ckpt, &hash, h.state())?;
    write_outputs(out, h.record())?;
    let meta = serde_json::json!({
        "started": started,
        "finished": now(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "position": h.state().position,
    });
    let meta_path = out.join(META_FILE);
    fs::write(&meta_path, format!("{meta:#}\n")).map_err(io_err(&meta_path))?;
    Ok(h.into_state().record)
}

/// Writes the learning curve, the per-step log and, when available, the
/// regret series.
pub fn write_outputs(out: &Path, record: &MetricsRecord) -> Result<(), RunError> {
    emit_curve(record, &out.join(CURVE_FILE))?;

    let steps_path = out.join(STEPS_FILE);
    let mut steps = Vec::new();
    for s in &record.per_step {
        serde_json::to_writer(&mut steps, s).expect("step metric serializes");
        steps.push(b'\n');
    }
    fs::write(&steps_path, steps).map_err(io_err(&steps_path))?;

    if !record.regret_series.is_empty() {
        let path = out.join(REGRET_FILE);
        let mut text = String::from("task_index,online_loss,hindsight_loss,regret\n");
        for (t, ((o, h), r)) in record
            .online_task_losses
            .iter()
            .zip(&record.hindsight_task_losses)
            .zip(&record.regret_series)
            .enumerate()
        {
            text.push_str(&format!(
                "{t},{},{},{}\n",
                eval::fmt_metric(*o),
                eval::fmt_metric(*h),
                eval::fmt_metric(*r)
            ));
        }
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Writes the learning curve CSV; a run with no completed task yet gets the
/// header only.
pub fn emit_curve(record: &MetricsRecord, path: &Path) -> Result<(), RunError> {
    let text = match eval::curve_csv(record) {
        Ok(t) => t,
        Err(_) => format!("{}\n", eval::CURVE_HEADER),
    };
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// One finished run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub out_dir: PathBuf,
    pub last10_error: f64,
    pub mean_error: f64,
}

/// Runs `config` once per value of `key`, each into its own subdirectory of
/// the configured output directory, and writes `sweep.csv` there.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
    base_text: &str,
    flags: &[(String, String)],
    quiet: bool,
) -> Result<Vec<SweepPoint>, RunError> {
    let root = config.run.out_dir.clone();
    let mut points = Vec::new();
    for value in values {
        let dir = root.join(format!("{}-{value}", key.replace('.', "_")));
        let mut point_flags = flags.to_vec();
        point_flags.push((key.to_string(), value.clone()));
        point_flags.push((String::from("run.out_dir"), format!("\"{}\"", dir.display())));
        let point = ExperimentConfig::from_text_and_flags(base_text, &point_flags)?;
        if !quiet {
            eprintln!("sweep {key} = {value}");
        }
        let record = run_experiment(&point, quiet)?;
        let n = record.per_task.len();
        points.push(SweepPoint {
            value: value.clone(),
            out_dir: dir,
            last10_error: record.last_tasks_mean_error(10),
            mean_error: record.mean_error(0..n),
        });
    }
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let path = root.join("sweep.csv");
    let mut text = String::from("key,value,last10_mean_error,mean_error\n");
    for p in &points {
        text.push_str(&format!(
            "{key},{},{},{}\n",
            p.value,
            eval::fmt_metric(p.last10_error),
            eval::fmt_metric(p.mean_error)
        ));
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(points)
}
