//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line
//! to stdout (bypassing the capture) and then asserts the criterion.
//!
//! The training sweeps are shared through `OnceLock`s and written under the
//! target directory, so the whole file runs each configuration once.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use phantom::optim::TrainMode;
use phantom::runner::run::{CheckpointSummary, RunManifest};
use phantom::runner::sweep::{sweep, Axis};
use phantom::runner::verify::{
    check_decomposition, check_gradients, check_reduction, check_taylor, check_theory, Check,
};
use phantom::runner::{Analysis, ExperimentConfig};
use phantom::toydata::{NoiseSpec, NoiseTarget};

const SEEDS: [u64; 4] = [0, 1, 2, 3];
const RHO_SWEEP: [&str; 6] = ["0", "0.05", "0.1", "0.2", "0.4", "0.8"];
/// The sweep without ρ = 0, which would make LSAM identical to SGD.
const RHO_ROBUST: [&str; 5] = ["0.05", "0.1", "0.2", "0.4", "0.8"];
const V_STAR_RATIOS: [&str; 4] = ["0.5", "1", "2", "4"];
const CHECKPOINTS: [usize; 4] = [2000, 5000, 7500, 10000];
const MID_TRAINING: usize = 7500;

fn report(id: &str, passed: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{id} {}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
}

fn report_check(id: &str, checks: &[Check]) -> bool {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| {
            format!(
                "{} worst {:.2e} <= {:.0e} over {}",
                c.name, c.worst, c.tolerance, c.instances
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(id, passed, &detail);
    passed
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn root(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name)
}

fn base(mode: TrainMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: mode.as_str().into(),
        ..Default::default()
    };
    cfg.train.mode = mode;
    cfg.checkpoints = CHECKPOINTS.to_vec();
    cfg.analyses = [Analysis::Ratios, Analysis::Lorenz, Analysis::Bins]
        .into_iter()
        .collect();
    cfg
}

/// Runs keyed by axis value, each holding one manifest per seed.
type Grid = BTreeMap<String, Vec<RunManifest>>;

fn run_grid(name: &str, cfg: &ExperimentConfig, axis: Option<Axis>) -> Grid {
    let axes: Vec<Axis> = axis.into_iter().collect();
    let result = sweep(cfg, &axes, &SEEDS, workers(), &root(name)).expect("sweep runs");
    if let Some(c) = result.failures().next() {
        panic!("cell {} failed: {:?}", c.dir.display(), c.error);
    }
    let mut grid = Grid::new();
    for c in &result.cells {
        let key = c.point.first().map(|(_, v)| v.clone()).unwrap_or_default();
        grid.entry(key)
            .or_default()
            .push(c.manifest.clone().unwrap());
    }
    grid
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn hard(runs: &[RunManifest]) -> f64 {
    mean(runs.iter().map(|m| m.metrics.hard_probe_error))
}

/// `(ρ, mean hard error)` of the lowest-error ρ > 0.
fn best_rho(grid: &Grid) -> (String, f64) {
    grid.iter()
        .filter(|(rho, _)| rho.parse::<f64>().unwrap() > 0.0)
        .map(|(rho, runs)| (rho.clone(), hard(runs)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

struct Toy {
    sgd: Vec<RunManifest>,
    lsam: Grid,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| Toy {
        sgd: run_grid("toy-sgd", &base(TrainMode::Sgd), None)
            .remove("")
            .unwrap(),
        lsam: run_grid(
            "toy-lsam",
            &base(TrainMode::Lsam),
            Some(Axis::new("rho", &RHO_SWEEP)),
        ),
    })
}

fn describe(grid: &Grid) -> String {
    grid.iter()
        .map(|(k, runs)| format!("{k}:{:.4}", hard(runs)))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn a1_zero_radius_reduces_to_sgd() {
    let c = check_reduction(&[0, 1, 2, 3, 4], 100).unwrap();
    assert!(report_check("A1", &[c]));
}

#[test]
fn a2_gradients_match_finite_differences() {
    let c = check_gradients(20, 11).unwrap();
    assert!(report_check("A2", &[c]));
}

#[test]
fn a3_decomposition_identity() {
    let c = check_decomposition(10, 12).unwrap();
    assert!(report_check("A3", &[c]));
}

#[test]
fn a4_closed_form_feature_gradients() {
    let checks = check_theory(50, 13).unwrap();
    assert!(report_check("A4", &checks));
}

#[test]
fn a5_taylor_ratio() {
    let checks = check_taylor(20, 14).unwrap();
    assert!(report_check("A5", &checks));
}

#[test]
fn a6_lsam_improves_hard_feature_probe() {
    let t = toy();
    let (rho, lsam_hard) = best_rho(&t.lsam);
    let best = &t.lsam[&rho];
    let sgd_hard = hard(&t.sgd);
    let fits = t
        .sgd
        .iter()
        .chain(best)
        .all(|m| m.metrics.train_error == 0.0);
    let easy_ok = t
        .sgd
        .iter()
        .chain(best)
        .all(|m| m.metrics.easy_probe_error <= 0.05);
    let gap = sgd_hard - lsam_hard;
    let passed = gap >= 0.05 && fits && easy_ok;
    report(
        "A6",
        passed,
        &format!(
            "SGD hard {sgd_hard:.4}, best LSAM (rho {rho}) hard {lsam_hard:.4}, gap {:.2}pp (need >= 5pp); \
             train fit {fits}; easy probe <= 5% {easy_ok}; LSAM by rho [{}]",
            100.0 * gap,
            describe(&t.lsam)
        ),
    );
    assert!(passed);
}

#[test]
fn a7_phantom_ratio_grows_with_rho() {
    let t = toy();
    let mut points: Vec<(f64, f64, f64)> = t
        .lsam
        .iter()
        .map(|(rho, runs)| {
            (
                rho.parse().unwrap(),
                mean(runs.iter().map(|m| m.metrics.mean_ratio_phantom.unwrap())),
                mean(runs.iter().map(|m| m.metrics.mean_ratio_real.unwrap())),
            )
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let increasing = points.windows(2).all(|w| w[1].1 > w[0].1);
    let range = |pick: fn(&(f64, f64, f64)) -> f64| {
        let v: Vec<f64> = points.iter().map(pick).collect();
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let (phantom_range, real_range) = (range(|p| p.1), range(|p| p.2));
    let passed = increasing && real_range < phantom_range / 3.0;
    let trace = points
        .iter()
        .map(|(r, p, v)| format!("{r}: phantom {p:.4} real {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        "A7",
        passed,
        &format!(
            "strictly increasing {increasing}; real range {real_range:.4} vs phantom range {phantom_range:.4}; [{trace}]"
        ),
    );
    assert!(passed);
}

fn checkpoint_means(
    runs: &[RunManifest],
    pick: fn(&CheckpointSummary) -> Option<f64>,
) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for step in runs[0].checkpoints.iter().map(|c| c.step) {
        let vals = runs
            .iter()
            .map(|m| pick(m.checkpoints.iter().find(|c| c.step == step).unwrap()).unwrap());
        out.insert(step, mean(vals));
    }
    out
}

#[test]
fn a8_phantom_weights_are_more_even() {
    let t = toy();
    let (rho, _) = best_rho(&t.lsam);
    let lsam = &t.lsam[&rho];
    let real = checkpoint_means(lsam, |c| c.gini_real);
    let phantom = checkpoint_means(lsam, |c| c.gini_phantom);
    let sgd = checkpoint_means(&t.sgd, |c| c.gini_real);
    let mut both = 0;
    let mut lines = Vec::new();
    for (step, g_ph) in &phantom {
        let ok = *g_ph < real[step] && *g_ph < sgd[step];
        both += ok as usize;
        lines.push(format!(
            "{step}: phantom {g_ph:.4} real {:.4} sgd {:.4}",
            real[step], sgd[step]
        ));
    }
    let passed = both >= 3;
    report(
        "A8",
        passed,
        &format!(
            "rho {rho}: {both} checkpoints satisfy both orderings (need >= 3); [{}]",
            lines.join(", ")
        ),
    );
    assert!(passed);
}

struct Interventions {
    iw: Grid,
    lr: Grid,
    combined: Vec<RunManifest>,
    combined_ratio: f64,
}

fn interventions() -> &'static Interventions {
    static RUNS: OnceLock<Interventions> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = toy();
        let (rho, _) = best_rho(&t.lsam);
        let ratio = mean(
            t.lsam[&rho]
                .iter()
                .map(|m| m.metrics.mean_ratio_phantom.unwrap()),
        );
        let cfg = |mode: TrainMode| {
            let mut c = ExperimentConfig {
                name: mode.as_str().into(),
                ..Default::default()
            };
            c.train.mode = mode;
            c.train.v_star = Some([1.0, 1.0]);
            c
        };
        let axis = Some(Axis::new("v_star_ratio", &V_STAR_RATIOS));
        let combined_cfg = cfg(TrainMode::InterveneCombined)
            .with_override("v_star_ratio", &ratio.to_string())
            .unwrap();
        Interventions {
            iw: run_grid("intervene-iw", &cfg(TrainMode::InterveneIw), axis.clone()),
            lr: run_grid("intervene-lr", &cfg(TrainMode::InterveneLr), axis),
            combined: run_grid("intervene-combined", &combined_cfg, None)
                .remove("")
                .unwrap(),
            combined_ratio: ratio,
        }
    })
}

#[test]
fn a9_interventions_reproduce_lsam() {
    let t = toy();
    let iv = interventions();
    let sgd = hard(&t.sgd);
    let best = |g: &Grid| {
        g.iter()
            .map(|(k, runs)| (k.clone(), hard(runs)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    };
    let (iw_ratio, iw) = best(&iv.iw);
    let (lr_ratio, lr) = best(&iv.lr);
    let (rho, lsam) = best_rho(&t.lsam);
    let combined = hard(&iv.combined);
    let passed = iw < sgd && lr < sgd && (combined - lsam).abs() <= 0.05;
    report(
        "A9",
        passed,
        &format!(
            "SGD {sgd:.4}; iw best {iw:.4} at ratio {iw_ratio} [{}]; lr best {lr:.4} at ratio {lr_ratio} [{}]; \
             combined at ratio {:.4} {combined:.4} vs LSAM (rho {rho}) {lsam:.4}",
            describe(&iv.iw),
            describe(&iv.lr),
            iv.combined_ratio
        ),
    );
    assert!(passed);
}

#[test]
fn a10_phantom_favors_easy_dominated_points() {
    let t = toy();
    let (rho, _) = best_rho(&t.lsam);
    let runs = &t.lsam[&rho];
    let at_mid = |m: &RunManifest| {
        m.checkpoints
            .iter()
            .find(|c| c.step == MID_TRAINING)
            .and_then(|c| c.quadrants)
            .unwrap()
    };
    let easy_high = mean(runs.iter().map(|m| at_mid(m).easy_high_hard_low.unwrap()));
    let hard_high = mean(runs.iter().map(|m| at_mid(m).easy_low_hard_high.unwrap()));
    let passed = easy_high > hard_high;
    report(
        "A10",
        passed,
        &format!(
            "rho {rho}, step {MID_TRAINING}: mean ratio (high easy, low hard) {easy_high:.4} vs (low easy, high hard) {hard_high:.4}"
        ),
    );
    assert!(passed);
}

fn robustness_pair(name: &str, edit: impl Fn(&mut ExperimentConfig)) -> (f64, String, f64) {
    let mut sgd = base(TrainMode::Sgd);
    sgd.analyses.clear();
    sgd.checkpoints.clear();
    edit(&mut sgd);
    let mut lsam = sgd.clone();
    lsam.train.mode = TrainMode::Lsam;
    let sgd_runs = run_grid(&format!("{name}-sgd"), &sgd, None)
        .remove("")
        .unwrap();
    let grid = run_grid(
        &format!("{name}-lsam"),
        &lsam,
        Some(Axis::new("rho", &RHO_ROBUST)),
    );
    let (rho, best) = best_rho(&grid);
    (hard(&sgd_runs), rho, best)
}

#[test]
fn a11_robust_to_noise_and_batch_size() {
    let t = toy();
    let mut lines = Vec::new();
    let mut all_ok = true;
    let mut strict = 0;
    let mut record = |label: String, sgd: f64, rho: String, lsam: f64| {
        all_ok &= lsam <= sgd;
        strict += (lsam < sgd) as usize;
        lines.push(format!("{label}: SGD {sgd:.4} LSAM {lsam:.4} (rho {rho})"));
    };
    let variants: [(&str, NoiseSpec); 3] = [
        (
            "gaussian0.5",
            NoiseSpec {
                gaussian_sigma: 0.5,
                ..NoiseSpec::none()
            },
        ),
        (
            "flip0.05",
            NoiseSpec {
                label_flip_p: 0.05,
                ..NoiseSpec::none()
            },
        ),
        (
            "dropout0.2",
            NoiseSpec {
                dropout_q: 0.2,
                ..NoiseSpec::none()
            },
        ),
    ];
    for (label, noise) in variants {
        for target in [NoiseTarget::Both, NoiseTarget::HardOnly] {
            let name = format!("{label}-{target:?}").to_lowercase();
            let spec = NoiseSpec { target, ..noise };
            let (sgd, rho, lsam) = robustness_pair(&name, |c| c.data.noise = spec);
            record(name, sgd, rho, lsam);
        }
    }
    let (rho, lsam) = best_rho(&t.lsam);
    record("batch5".into(), hard(&t.sgd), rho, lsam);
    for b in [20, 50] {
        let (sgd, rho, lsam) = robustness_pair(&format!("batch{b}"), |c| c.train.batch_size = b);
        record(format!("batch{b}"), sgd, rho, lsam);
    }
    let total = lines.len();
    report(
        "A11",
        all_ok,
        &format!(
            "LSAM <= SGD in every setting: {all_ok}; strictly better in {strict}/{total}; [{}]",
            lines.join("; ")
        ),
    );
    assert!(all_ok);
}
