use phantom::optim::TrainMode;
use phantom::runner::run::{rerun, RunManifest};
use phantom::runner::sweep::{sweep, Axis};
use phantom::runner::{emit_figure_data, run_in, Analysis, ExperimentConfig, Figure};
use phantom::ModelState;

fn small(mode: TrainMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.mode = mode;
    cfg.train.rho = 0.2;
    cfg.train.steps = 60;
    cfg.data.n = 40;
    cfg.probe_n = 100;
    cfg.record_every = 10;
    cfg.checkpoints = vec![30];
    cfg.analyses = Analysis::ALL.into_iter().collect();
    cfg
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let axes = [Axis::new("rho", &["0.1", "0.3"])];
    let one = sweep(&small(TrainMode::Sam), &axes, &[0, 1], 1, a.path()).unwrap();
    let two = sweep(&small(TrainMode::Sam), &axes, &[0, 1], 2, b.path()).unwrap();
    for (x, y) in one.manifests().zip(two.manifests()) {
        assert!(x.same_results(y));
    }
    let agg = |d: &std::path::Path| std::fs::read_to_string(d.join("aggregate.csv")).unwrap();
    assert_eq!(agg(a.path()), agg(b.path()));
}

#[test]
fn manifest_reload_and_rerun_reproduce_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_in(&small(TrainMode::Lsam), a.path()).unwrap();
    let loaded = RunManifest::load(&a.path().join("manifest.json")).unwrap();
    let second = rerun(&loaded, b.path()).unwrap();
    assert_eq!(first.metrics, second.metrics);
    assert_eq!(first.artifacts, second.artifacts);
}

#[test]
fn final_checkpoint_reproduces_reported_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(TrainMode::Lsam);
    let m = run_in(&cfg, dir.path()).unwrap();
    let (state, _) = ModelState::load_checkpoint(&dir.path().join("ckpt_000060.txt")).unwrap();
    let probe =
        phantom::toydata::generate_probe_set(&phantom::runner::run::probe_spec(&cfg), cfg.probe_n)
            .unwrap();
    let hard = state
        .probe_error(&probe, phantom::model::Feature::Hard)
        .unwrap();
    assert_eq!(hard, m.metrics.hard_probe_error);
}

#[test]
fn every_figure_emits_from_a_mixed_run_set() {
    let root = tempfile::tempdir().unwrap();
    run_in(&small(TrainMode::Sgd), &root.path().join("sgd")).unwrap();
    run_in(&small(TrainMode::Lsam), &root.path().join("lsam")).unwrap();
    let mut iv = small(TrainMode::InterveneCombined);
    iv.train.v_star = Some([1.0, 0.5]);
    run_in(&iv, &root.path().join("combined")).unwrap();
    let out = tempfile::tempdir().unwrap();
    for fig in Figure::ALL {
        let path = emit_figure_data(root.path(), fig, out.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, fig.columns().join(","));
        let width = fig.columns().len();
        assert!(
            text.lines().skip(1).all(|l| l.split(',').count() == width),
            "{fig:?}"
        );
        assert!(text.lines().count() > 1, "{fig:?} is empty");
    }
}
