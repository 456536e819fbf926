use foml_core::data::LabeledBatch;
use foml_core::harness::{
    AnyLearner, Boundaries, EvalOptions, Harness, LearnerKind, LearnerSpec, RunState,
};
use foml_core::learners::{
    BaselineConfig, BoundaryAwareLearner, FomlConfig, Ftl, FtmlConfig, Tfs,
};
use foml_core::models::{self, init_params, Architecture};
use foml_core::streams::{synthetic_glyphs, Stream, StreamBatch, StreamConfig, TaskOrder};

fn arch() -> Architecture {
    Architecture::mlp(&[32], 10, [3, 8, 8]).unwrap()
}

fn stream(num_tasks: usize, order: TaskOrder, seed: u64) -> Stream {
    let config = StreamConfig {
        num_tasks,
        order,
        seed,
        ..StreamConfig::default()
    };
    Stream::new(config, synthetic_glyphs(100, seed)).unwrap()
}

fn batches(s: &mut Stream) -> Vec<StreamBatch> {
    std::iter::from_fn(|| s.next_batch()).collect()
}

fn config() -> BaselineConfig {
    BaselineConfig {
        steps_per_task: 20,
        ..BaselineConfig::default()
    }
}

fn run(kind: LearnerKind, s: Stream, seed: u64) -> RunState {
    let spec = LearnerSpec {
        kind,
        arch: arch(),
        seed,
        foml: FomlConfig {
            alpha1: 0.01,
            alpha2: 0.01,
            beta1: 0.1,
            ..FomlConfig::default()
        },
        baseline: BaselineConfig::default(),
        ftml: FtmlConfig::default(),
    };
    let learner = AnyLearner::build(&spec, s.batches_per_task()).unwrap();
    let mut h = Harness::new(
        s,
        RunState::new(learner),
        Boundaries::Visible,
        EvalOptions {
            hindsight: true,
            ..EvalOptions::default()
        },
        seed,
    )
    .unwrap();
    h.run(None).unwrap();
    h.into_state()
}

#[test]
fn train_from_scratch_does_not_improve_over_the_stream() {
    // Fixed order visits every colour with the same scale and rotation mix,
    // so the halves are directly comparable.
    let r = run(LearnerKind::Tfs, stream(56, TaskOrder::Fixed, 0), 0).record;
    let first = r.mean_error(0..28);
    let second = r.mean_error(28..56);
    assert!(second >= first - 0.05, "{first:.3} then {second:.3}");
}

fn task_loss(arch: &Architecture, p: &foml_core::params::ParameterVector, data: &LabeledBatch) -> f64 {
    models::loss(arch, p, data).unwrap()
}

#[test]
fn train_from_scratch_lowers_the_task_loss_within_each_task() {
    let mut s = stream(20, TaskOrder::Random, 1);
    let mut tfs = Tfs::new(arch(), config());
    let mut improved = 0;
    let mut start_loss = 0.0;
    for sb in batches(&mut s) {
        if sb.task_start {
            let t = sb.true_task.task_index();
            let data = LabeledBatch::from_examples(&s.task(t).samples, s.item_shape());
            let fresh = init_params(&arch(), tfs.config.seed.wrapping_add(tfs.tasks_started));
            start_loss = task_loss(&arch(), &fresh, &data);
        }
        tfs.observe(&sb.batch, sb.task_start).unwrap();
        if sb.task_end {
            let t = sb.true_task.task_index();
            let data = LabeledBatch::from_examples(&s.task(t).samples, s.item_shape());
            improved += usize::from(task_loss(&arch(), &tfs.params, &data) <= start_loss);
        }
    }
    assert!(improved * 10 >= 20 * 9, "{improved} of 20 tasks");
}

#[test]
fn fine_tuned_copy_beats_the_pretrained_vector_on_the_current_task() {
    let mut s = stream(20, TaskOrder::Random, 2);
    let mut ftl = Ftl::new(arch(), config());
    let mut better = 0;
    for sb in batches(&mut s) {
        ftl.observe(&sb.batch, sb.task_start).unwrap();
        if sb.task_end {
            let t = sb.true_task.task_index();
            let data = LabeledBatch::from_examples(&s.task(t).samples, s.item_shape());
            let tuned = task_loss(&arch(), &ftl.params, &data);
            let pre = task_loss(&arch(), &ftl.pretrained, &data);
            better += usize::from(tuned <= pre);
        }
    }
    assert!(better * 10 >= 20 * 9, "{better} of 20 tasks");
}

#[test]
fn foml_has_lower_regret_than_training_from_scratch() {
    let foml = run(LearnerKind::Foml, stream(5, TaskOrder::Random, 0), 0).record;
    let tfs = run(LearnerKind::Tfs, stream(5, TaskOrder::Random, 0), 0).record;
    let (rf, rt) = (
        *foml.regret_series.last().unwrap(),
        *tfs.regret_series.last().unwrap(),
    );
    assert!(rf < rt, "FOML {rf:.3}, TFS {rt:.3}");
}

#[test]
fn random_parameters_score_at_chance() {
    let config = StreamConfig {
        num_tasks: 1,
        samples_per_task: 10,
        heldout_fraction: 0.99,
        order: TaskOrder::Fixed,
        ..StreamConfig::default()
    };
    let big = Stream::new(config, synthetic_glyphs(200, 3)).unwrap();
    let heldout = big.heldout(0);
    assert!(heldout.len() >= 900);
    let n = heldout.len() as f64;
    let sigma = (0.9 * 0.1 / n).sqrt();
    let mean = (0..5)
        .map(|seed| {
            foml_core::eval::task_error_rate(&arch(), &init_params(&arch(), seed), &heldout)
                .unwrap()
        })
        .sum::<f64>()
        / 5.0;
    assert!((mean - 0.9).abs() <= 3.0 * sigma, "mean error {mean:.3}");
}
