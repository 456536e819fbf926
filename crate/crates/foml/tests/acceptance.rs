//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p foml --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{meta_objective, random_batch, relative_error, unpack, Mlp};
use foml::config::ExperimentConfig;
use foml::runner;
use foml_core::data::{Example, LabeledBatch};
use foml_core::eval::MetricsRecord;
use foml_core::harness::{
    AnyLearner, Boundaries, EvalOptions, Harness, LearnerKind, LearnerSpec, RunState,
};
use foml_core::learners::foml::unrolled_meta_gradient;
use foml_core::learners::{BaselineConfig, Foml, FomlConfig, FtmlConfig, OptimizerKind};
use foml_core::models::{self, init_params, Architecture};
use foml_core::optim::{Optimizer, OptimizerConfig, StepRecord};
use foml_core::params::{ParameterVector, Segment};
use foml_core::streams::{synthetic_glyphs, ReplayBuffer, Stream, StreamBatch, StreamConfig};
use foml_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DESK: &str = include_str!("../../../configs/acceptance.toml");
const SEEDS: [u64; 3] = [0, 1, 2];

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 1 -------------------------------------------------------

const ITEM: [usize; 3] = [1, 3, 3];
const SMALL: Mlp = Mlp {
    inputs: 9,
    hidden: 12,
    classes: 3,
};

fn small_arch() -> Architecture {
    Architecture::mlp(&[SMALL.hidden], SMALL.classes, ITEM).unwrap()
}

fn sgd_foml(k: usize) -> FomlConfig {
    FomlConfig {
        alpha1: 0.2,
        alpha2: 0.1,
        beta1: 0.7,
        beta2: 0.05,
        k,
        online_optimizer: OptimizerKind::Sgd,
        meta_optimizer: OptimizerKind::Sgd,
        ..FomlConfig::default()
    }
}

fn small_learner(k: usize) -> Foml {
    let arch = small_arch();
    let mut f = Foml::new(arch.clone(), init_params(&arch, 3), sgd_foml(k)).unwrap();
    f.theta = init_params(&arch, 4).map_segments(|t| t.map(|x| 0.5 * x));
    for s in 0..k {
        f.online_update(&random_batch(6, ITEM, SMALL.classes, 10 + s as u64))
            .unwrap();
    }
    f
}

fn column(v: &[f64]) -> ParameterVector {
    ParameterVector::new(vec![Segment {
        name: "w".into(),
        value: Tensor::from_vec(&[v.len(), 1], v.to_vec()),
    }])
}

/// Gradient error of a one-step unroll with `inner = 1/2 |phi - c|^2` and
/// `outer = 1/2 |phi - d|^2` against its closed form.
fn linear_quadratic_error() -> f64 {
    let (lr, b1, b2) = (0.15, 0.6, 0.25);
    let theta = [0.2, -0.7, 1.1];
    let phi0 = [-0.4, 0.9, 0.3];
    let c = [0.4, -0.3, 0.8];
    let d = [1.2, -0.5, 0.3];
    let (ct, dt) = (
        Tensor::from_vec(&[3, 1], c.to_vec()),
        Tensor::from_vec(&[3, 1], d.to_vec()),
    );
    let record = StepRecord::Sgd { lr };
    let (_, grad) = unrolled_meta_gradient(
        &column(&theta),
        &column(&phi0),
        &[&record],
        b1,
        b2,
        |_, p| Ok((p[0] - p[0].tape().constant(ct.clone())).square().sum().scale(0.5)),
        |p| Ok((p[0] - p[0].tape().constant(dt.clone())).square().sum().scale(0.5)),
    )
    .unwrap();
    let dphi = 2.0 * lr * b1;
    let g = grad.flatten();
    (0..3)
        .map(|i| {
            let phi1 = phi0[i] - lr * ((phi0[i] - c[i]) + 2.0 * b1 * (phi0[i] - theta[i]));
            let expected = dphi * (phi1 - d[i])
                + 2.0 * b2 * (theta[i] - phi0[i])
                + 2.0 * b2 * (theta[i] - phi1) * (1.0 - dphi);
            (g[i] - expected).abs()
        })
        .fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for k in [1, 3, 5] {
        let f = small_learner(k);
        let val_batch = random_batch(8, ITEM, SMALL.classes, 99);
        let (_, grad) = f.meta_gradient(&val_batch).unwrap();
        let train: Vec<_> = f.trajectory.iter().map(|e| unpack(&e.train)).collect();
        let val = unpack(&val_batch);
        let phi0 = f.trajectory[0].phi_before.flatten();
        let theta = f.theta.flatten();
        let c = &f.config;
        let objective = |t: &[f64]| {
            meta_objective(&SMALL, t, &phi0, &train, &val, c.alpha1, c.beta1, c.beta2)
        };
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let (mut plus, mut minus) = (theta.clone(), theta.clone());
                plus[i] += h;
                minus[i] -= h;
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            })
            .collect();
        let err = relative_error(&grad.flatten(), &fd);
        worst = worst.max(err);
        parts.push(format!("K={k} rel.err {err:.1e}"));
    }
    let lq = linear_quadratic_error();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-4 && lq <= 1e-10 && secs < 120.0,
        format!(
            "{} params; {}; linear-quadratic max err {lq:.1e}; {secs:.1}s",
            SMALL.num_params(),
            parts.join(", ")
        ),
    )
}

// ---- criterion 2 -------------------------------------------------------

fn criterion_2() -> Check {
    let arch = small_arch();
    let batch = random_batch(8, ITEM, SMALL.classes, 1);
    let (xs, ys) = unpack(&batch);

    let beta1 = 0.3;
    let mut f = Foml::new(arch.clone(), init_params(&arch, 5), FomlConfig { beta1, ..sgd_foml(3) })
        .unwrap();
    f.theta = init_params(&arch, 6);
    let (phi, theta) = (f.phi.flatten(), f.theta.flatten());
    let (_, task_grad) = SMALL.loss_grad(&phi, &xs, &ys);
    f.online_update(&batch).unwrap();
    let a1 = f.config.alpha1;
    let decomposition = f
        .phi
        .flatten()
        .iter()
        .enumerate()
        .map(|(i, &got)| {
            let expected = phi[i] - a1 * task_grad[i] + 2.0 * a1 * beta1 * (theta[i] - phi[i]);
            (got - expected).abs()
        })
        .fold(0.0, f64::max);

    let mut plain_learner =
        Foml::new(arch.clone(), init_params(&arch, 5), FomlConfig { beta1: 0.0, ..sgd_foml(3) })
            .unwrap();
    plain_learner.theta = init_params(&arch, 6);
    let mut plain = plain_learner.phi.clone();
    let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: a1 });
    let mut bitwise = true;
    for s in 0..5 {
        let b = random_batch(8, ITEM, SMALL.classes, s);
        let (_, g) = models::loss_and_grad(&arch, &plain, &b).unwrap();
        plain = opt.step(&plain, &g).unwrap().0;
        plain_learner.online_update(&b).unwrap();
        bitwise &= plain_learner.phi == plain;
    }

    let mut severed = small_learner(3);
    severed.config.beta1 = 0.0;
    severed.config.beta2 = 0.0;
    let (_, g) = severed
        .meta_gradient(&random_batch(5, ITEM, SMALL.classes, 7))
        .unwrap();
    let zero = g.flatten().iter().all(|&x| x == 0.0);

    ensure(
        decomposition <= 1e-10 && bitwise && zero,
        format!(
            "decomposition max err {decomposition:.1e}; beta1=0 bitwise SGD: {bitwise}; \
             beta1=beta2=0 zero meta-gradient: {zero}"
        ),
    )
}

// ---- criterion 3 -------------------------------------------------------

fn blind_stream() -> Stream {
    let config = StreamConfig {
        num_tasks: 6,
        samples_per_task: 40,
        seed: 1,
        ..StreamConfig::default()
    };
    Stream::new(config, synthetic_glyphs(20, 1)).unwrap()
}

fn blind_run(batches: &[StreamBatch]) -> RunState {
    let spec = LearnerSpec {
        kind: LearnerKind::Foml,
        arch: Architecture::mlp(&[16], 10, [3, 8, 8]).unwrap(),
        seed: 1,
        foml: FomlConfig {
            k: 3,
            ..FomlConfig::default()
        },
        baseline: BaselineConfig::default(),
        ftml: FtmlConfig::default(),
    };
    let learner = AnyLearner::build(&spec, 4).unwrap();
    let mut h = Harness::new(
        blind_stream(),
        RunState::new(learner),
        Boundaries::Hidden,
        EvalOptions::default(),
        1,
    )
    .unwrap();
    for sb in batches {
        h.step_with(sb).unwrap();
    }
    h.into_state()
}

fn criterion_3() -> Check {
    let mut stream = blind_stream();
    let batches: Vec<StreamBatch> = std::iter::from_fn(|| stream.next_batch()).collect();
    let reference = blind_run(&batches);
    let mut identical = 0;
    for trial in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut tasks: Vec<_> = batches.iter().map(|b| b.true_task.clone()).collect();
        let mut starts: Vec<bool> = batches.iter().map(|b| b.task_start).collect();
        tasks.shuffle(&mut rng);
        starts.shuffle(&mut rng);
        let permuted: Vec<StreamBatch> = batches
            .iter()
            .zip(tasks.into_iter().zip(starts))
            .map(|(b, (true_task, task_start))| StreamBatch {
                true_task,
                task_start,
                ..b.clone()
            })
            .collect();
        identical += usize::from(blind_run(&permuted) == reference);
    }
    ensure(
        identical == 3,
        format!(
            "{identical}/3 metadata permutations left phi, theta and metrics bit-identical \
             over {} steps",
            batches.len()
        ),
    )
}

// ---- desk-scale runs ---------------------------------------------------

struct Desk {
    dir: tempfile::TempDir,
    runs: BTreeMap<String, MetricsRecord>,
    seconds: f64,
}

impl Desk {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
            runs: BTreeMap::new(),
            seconds: 0.0,
        }
    }

    /// Runs the desk config with `flags` for `seed`, once per distinct request.
    fn run(&mut self, name: &str, seed: u64, flags: &[(&str, &str)]) -> MetricsRecord {
        let key = format!("{name}-{seed}");
        if let Some(r) = self.runs.get(&key) {
            return r.clone();
        }
        let mut all: Vec<(String, String)> = flags
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        all.push(("seed".into(), seed.to_string()));
        all.push((
            "out_dir".into(),
            format!("\"{}\"", self.dir.path().join(&key).display()),
        ));
        let config = ExperimentConfig::from_text_and_flags(DESK, &all).unwrap();
        let start = Instant::now();
        let record = runner::run_experiment(&config, true).unwrap();
        self.seconds += start.elapsed().as_secs_f64();
        self.runs.insert(key, record.clone());
        record
    }

    fn foml(&mut self, seed: u64) -> MetricsRecord {
        self.run("foml", seed, &[])
    }

    fn visible(&mut self, learner: &str, seed: u64) -> MetricsRecord {
        self.run(learner, seed, &[("learner", learner), ("boundaries", "visible")])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn last10(runs: &[MetricsRecord]) -> f64 {
    mean(&runs.iter().map(|r| r.last_tasks_mean_error(10)).collect::<Vec<_>>())
}

fn criterion_4(desk: &mut Desk) -> Check {
    let before = desk.seconds;
    let foml: Vec<_> = SEEDS.iter().map(|&s| desk.foml(s)).collect();
    let tfs: Vec<_> = SEEDS.iter().map(|&s| desk.visible("tfs", s)).collect();
    let toe: Vec<_> = SEEDS.iter().map(|&s| desk.run("toe", s, &[("learner", "toe")])).collect();
    let secs = desk.seconds - before;
    let (f, t, o) = (last10(&foml), last10(&tfs), last10(&toe));
    let first = mean(&foml.iter().map(|r| r.first_tasks_mean_error(10)).collect::<Vec<_>>());
    let a = t - f >= 0.10;
    let b = f < o;
    let c = first - f >= 0.05;
    ensure(
        a && b && c && secs < 1800.0,
        format!(
            "last-10 error FOML {f:.3}, TFS {t:.3}, TOE {o:.3}; FOML first-10 {first:.3}; \
             (a) TFS-FOML {:.1} pts {}; (b) below TOE {}; (c) first-last {:.1} pts {}; {secs:.0}s",
            100.0 * (t - f),
            verdict(a),
            verdict(b),
            100.0 * (first - f),
            verdict(c)
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISSED"
    }
}

fn criterion_5(desk: &mut Desk) -> Check {
    let mut gaps = Vec::new();
    for &s in &SEEDS {
        let with = desk.foml(s).last_tasks_mean_error(10);
        let without = desk
            .run("nometa", s, &[("meta_updates", "false")])
            .last_tasks_mean_error(10);
        gaps.push((s, with, without));
    }
    let ok = gaps.iter().all(|&(_, w, wo)| wo - w >= 0.03);
    ensure(
        ok,
        gaps.iter()
            .map(|(s, w, wo)| format!("seed {s}: with {w:.3}, without {wo:.3}"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn criterion_6(desk: &mut Desk) -> Check {
    let mut errors = Vec::new();
    for k in ["1", "5", "10"] {
        let runs: Vec<_> = SEEDS
            .iter()
            .map(|&s| {
                if k == "10" {
                    desk.foml(s)
                } else {
                    desk.run(&format!("k{k}"), s, &[("K", k)])
                }
            })
            .collect();
        errors.push((k, last10(&runs)));
    }
    let ok = errors[2].1 <= errors[0].1;
    ensure(
        ok,
        errors
            .iter()
            .map(|(k, e)| format!("K={k}: {e:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
            + " (last-10 error, mean of 3 seeds)",
    )
}

fn criterion_7(desk: &mut Desk) -> Check {
    let ftl: Vec<_> = SEEDS.iter().map(|&s| desk.visible("ftl", s)).collect();
    let ftml: Vec<_> = SEEDS.iter().map(|&s| desk.visible("ftml", s)).collect();
    let (l, m) = (last10(&ftl), last10(&ftml));
    ensure(
        m < l,
        format!("last-10 error FTML {m:.3}, FTL {l:.3} (mean of 3 seeds)"),
    )
}

// ---- criterion 8 -------------------------------------------------------

fn chi_square_p() -> f64 {
    let item = [1, 1, 1];
    let exs: Vec<Example> = (0..10)
        .map(|i| Example {
            input: vec![i as f64],
            partner: None,
            label: 0,
        })
        .collect();
    let mut buffer = ReplayBuffer::new(item, 42);
    buffer.append(&LabeledBatch::from_examples(&exs, item), 0);
    let sample = buffer.sample_random(10_000).unwrap();
    let mut counts = [0usize; 10];
    for &v in sample.inputs.data() {
        counts[v as usize] += 1;
    }
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0)
        .sum();
    1.0 - ChiSquared::new(9.0).unwrap().cdf(stat)
}

const ARTIFACTS: [&str; 3] = [runner::CURVE_FILE, runner::STEPS_FILE, runner::CHECKPOINT_FILE];

fn short_config(out: &Path, max_steps: u64) -> ExperimentConfig {
    let flags = [
        ("num_tasks", "12".to_string()),
        ("seed", "5".to_string()),
        ("max_steps", max_steps.to_string()),
        ("out_dir", format!("\"{}\"", out.display())),
    ];
    let flags: Vec<(String, String)> = flags.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    ExperimentConfig::from_text_and_flags(DESK, &flags).unwrap()
}

fn same_files(a: &Path, b: &Path) -> bool {
    ARTIFACTS
        .iter()
        .all(|name| fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap())
}

fn criterion_8() -> Check {
    let p = chi_square_p();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, split) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("split"));
    runner::run_experiment(&short_config(&a, 200), true).unwrap();
    runner::run_experiment(&short_config(&b, 200), true).unwrap();
    let deterministic = same_files(&a, &b);

    runner::run_experiment(&short_config(&split, 100), true).unwrap();
    let checkpoint = split.join(runner::CHECKPOINT_FILE);
    runner::resume(&checkpoint, &short_config(&split, 200), true).unwrap();
    let resumed = same_files(&a, &split);
    ensure(
        p > 0.01 && deterministic && resumed,
        format!(
            "buffer chi-square p = {p:.3}; repeated seeds byte-identical: {deterministic}; \
             resume at step 100 to 200 byte-identical: {resumed}"
        ),
    )
}

// ---- driver ------------------------------------------------------------

fn main() {
    let mut desk = Desk::new();
    let mut failed = 0;
    let mut report = |id: &str, title: &str, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(String::from("panicked")));
        let secs = start.elapsed().as_secs_f64();
        let (word, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} {word} {title} [{secs:.1}s]: {detail}");
    };
    report("1", "meta-gradient exactness", &mut criterion_1);
    report("2", "online update decomposition", &mut criterion_2);
    report("3", "boundary blindness", &mut criterion_3);
    report("4", "desk-scale rainbow comparison", &mut || criterion_4(&mut desk));
    report("5", "meta-update ablation", &mut || criterion_5(&mut desk));
    report("6", "trajectory length ablation", &mut || criterion_6(&mut desk));
    report("7", "meta-leader versus leader", &mut || criterion_7(&mut desk));
    report("8", "infrastructure", &mut criterion_8);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
