//! One deterministic experiment: data, training, probes, analyses, and the
//! manifest that ties the written artifacts together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::bins::{binned_median_importance, median, DEFAULT_BINS};
use crate::analysis::decomp::{
    dataset_phantom, decompose, decompose_phantom, importance_points, reconstruct, ImportancePoint,
    Weights,
};
use crate::analysis::lorenz::lorenz;
use crate::analysis::ratios::ratio_row;
use crate::analysis::theory::{
    numeric_feature_grad_norm, taylor_ratio_check, theory_feature_grad_norm, Activation,
    TheoryKind, TheoryNet,
};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Feature, ModelState, V_INDEX};
use crate::optim::{batch_loss, loss_and_grad, LossKind, PhantomMode, StepRecord, Trainer};
use crate::rng;
use crate::toydata::{fmt_f64, generate, generate_probe_set, NoiseSpec, ToyDataset, ToySpec};

use super::config::{Analysis, ExperimentConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Step sizes for the Taylor table written by the theory analysis.
pub const TAYLOR_RHOS: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_error: f64,
    pub train_loss: f64,
    pub easy_probe_error: f64,
    pub hard_probe_error: f64,
    /// Means over every training step, skipping steps with a vanishing
    /// denominator.
    pub mean_ratio_real: Option<f64>,
    pub mean_ratio_phantom: Option<f64>,
    pub mean_easy_factor: Option<f64>,
    pub mean_hard_factor: Option<f64>,
    pub degenerate_steps: usize,
}

/// Mean `λ̃/λ` in the two off-diagonal quadrants of the contribution plane,
/// split at the per-axis medians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRatios {
    pub easy_high_hard_low: Option<f64>,
    pub easy_low_hard_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub step: usize,
    pub train_error: f64,
    pub easy_probe_error: f64,
    pub hard_probe_error: f64,
    pub gini_real: Option<f64>,
    pub gini_phantom: Option<f64>,
    pub quadrants: Option<QuadrantRatios>,
    pub decomp_max_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub name: String,
    pub seed: u64,
    pub data_seed: u64,
    pub config: ExperimentConfig,
    /// SHA-256 of every artifact, keyed by file name relative to the run
    /// directory.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: FinalMetrics,
    pub checkpoints: Vec<CheckpointSummary>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Equal in everything except wall time.
    pub fn same_results(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Collects artifacts in memory so that nothing reaches disk before every
/// analysis has succeeded.
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn new() -> Self {
        Self {
            files: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    fn add_csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let io = |e: csv::Error| Error::contract(format!("csv encoding of {name}: {e}"));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(&r).map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::contract(format!("csv encoding of {name}: {e}")))?;
        self.add(name, bytes);
        Ok(())
    }

    fn write_all(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            hashes.insert(name.clone(), sha256_hex(bytes));
        }
        Ok(hashes)
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::contract(format!("manifest encoding: {e}")))?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn dataset_bytes(d: &ToyDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    d.write_csv(&mut buf)?;
    Ok(buf)
}

/// Running means over every step of training.
#[derive(Default)]
struct RatioAccumulator {
    sums: [f64; 4],
    counts: [usize; 4],
    degenerate: usize,
}

impl RatioAccumulator {
    fn push(&mut self, r: &StepRecord) {
        let row = ratio_row(r);
        for (i, v) in [row.real, row.phantom, row.easy_factor, row.hard_factor]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
        self.degenerate += r.degenerate_ascent as usize;
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// Mean `λ̃/λ` over the two off-diagonal quadrants.
pub fn quadrant_ratios(points: &[ImportancePoint]) -> Result<QuadrantRatios> {
    let xs: Vec<f64> = points.iter().map(|p| p.contributions[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.contributions[1]).collect();
    let (mx, my) = (median(&xs)?, median(&ys)?);
    let mean_where = |pred: &dyn Fn(&ImportancePoint) -> bool| {
        let v: Vec<f64> = points
            .iter()
            .filter(|p| pred(p))
            .map(|p| p.ratio())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(QuadrantRatios {
        easy_high_hard_low: mean_where(&|p| p.contributions[0] > mx && p.contributions[1] <= my),
        easy_low_hard_high: mean_where(&|p| p.contributions[0] <= mx && p.contributions[1] > my),
    })
}

fn theory_rows(seed: u64) -> Result<Vec<Vec<String>>> {
    let mut r = rng::stream(seed, "runner/theory", 0);
    let mut rows = Vec::new();
    let cases: [(&[usize], Activation, TheoryKind); 4] = [
        (&[6, 1], Activation::Identity, TheoryKind::Lsam),
        (&[4, 5, 1], Activation::Identity, TheoryKind::TwoLayerLinear),
        (&[4, 5, 3, 1], Activation::Identity, TheoryKind::DeepLinear),
        (&[4, 8, 8, 1], Activation::Relu, TheoryKind::ReluMlp),
    ];
    for (dims, act, kind) in cases {
        let layers = dims
            .windows(2)
            .map(|w| {
                let data = (0..w[0] * w[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
                Tensor::new(vec![w[1], w[0]], data)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = TheoryNet::new(layers, act)?;
        let x: Vec<f64> = (0..dims[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
        let analytic = theory_feature_grad_norm(&net, &x, kind)?;
        let numeric = numeric_feature_grad_norm(&net, &x, 1e-4)?;
        rows.push(vec![
            kind.as_str().to_string(),
            fmt_f64(analytic),
            fmt_f64(numeric),
            fmt_f64(((analytic - numeric) / numeric).abs()),
        ]);
    }
    Ok(rows)
}

struct CheckpointOutput {
    summary: CheckpointSummary,
    lorenz_rows: Vec<Vec<String>>,
    bin_rows: Vec<Vec<String>>,
    point_rows: Vec<Vec<String>>,
}

fn analyze_checkpoint(
    cfg: &ExperimentConfig,
    m: &ModelState,
    step: usize,
    data: &ToyDataset,
    probe: &ToyDataset,
) -> Result<CheckpointOutput> {
    let (rho, mode) = match cfg.train.mode.phantom_mode() {
        Some(mode) => (cfg.train.rho, mode),
        None => (0.0, PhantomMode::Full),
    };
    let mut summary = CheckpointSummary {
        step,
        train_error: m.train_error(&data.samples),
        easy_probe_error: m.probe_error(probe, Feature::Easy)?,
        hard_probe_error: m.probe_error(probe, Feature::Hard)?,
        gini_real: None,
        gini_phantom: None,
        quadrants: None,
        decomp_max_err: None,
    };
    let mut out = CheckpointOutput {
        summary: summary.clone(),
        lorenz_rows: Vec::new(),
        bin_rows: Vec::new(),
        point_rows: Vec::new(),
    };
    let needs_points = cfg.wants(Analysis::Lorenz) || cfg.wants(Analysis::Bins);
    if needs_points {
        let ps = dataset_phantom(m, &data.samples, rho, mode, cfg.train.loss)?;
        let points = importance_points(&ps, &data.samples, cfg.train.loss);
        if cfg.wants(Analysis::Lorenz) {
            for (source, weights) in [
                ("real", points.iter().map(|p| p.lambda).collect::<Vec<_>>()),
                ("phantom", points.iter().map(|p| p.lambda_phantom).collect()),
            ] {
                let curve = lorenz(&weights)?;
                if source == "real" {
                    summary.gini_real = Some(curve.gini);
                } else {
                    summary.gini_phantom = Some(curve.gini);
                }
                out.lorenz_rows.extend(
                    curve.points.iter().map(|(k, c)| {
                        vec![step.to_string(), source.into(), fmt_f64(*k), fmt_f64(*c)]
                    }),
                );
            }
        }
        if cfg.wants(Analysis::Bins) {
            summary.quadrants = Some(quadrant_ratios(&points)?);
            for (source, pick) in [
                (
                    "real",
                    (|p: &ImportancePoint| p.lambda) as fn(&ImportancePoint) -> f64,
                ),
                ("phantom", |p: &ImportancePoint| p.lambda_phantom),
            ] {
                let pts: Vec<([f64; 2], f64)> =
                    points.iter().map(|p| (p.contributions, pick(p))).collect();
                let grid = binned_median_importance(&pts, DEFAULT_BINS, None)?;
                out.bin_rows.extend(grid.cells.iter().map(|c| {
                    vec![
                        step.to_string(),
                        source.into(),
                        c.bin_x.to_string(),
                        c.bin_y.to_string(),
                        opt(c.median),
                        c.count.to_string(),
                    ]
                }));
            }
            out.point_rows.extend(points.iter().map(|p| {
                vec![
                    step.to_string(),
                    fmt_f64(p.y),
                    fmt_f64(p.lambda),
                    fmt_f64(p.lambda_phantom),
                    fmt_f64(p.contributions[0]),
                    fmt_f64(p.contributions[1]),
                ]
            }));
        }
    }
    if cfg.wants(Analysis::Decomp) && cfg.train.loss == LossKind::Logistic {
        let b = cfg.train.batch_size.min(data.len());
        let batch = &data.samples[..b];
        let auto = loss_and_grad(m, batch, cfg.train.loss)?.grad;
        let rec = decompose(m, batch)?;
        let mut err = max_theta_diff(&reconstruct(&rec, Weights::Real)?, &auto);
        if let Some(mode) = cfg.train.mode.phantom_mode() {
            let ps = crate::optim::phantom_from_grad(m, &auto, cfg.train.rho, mode)?;
            let rec = decompose_phantom(&ps, batch)?;
            let auto_t = loss_and_grad(&ps.perturbed, batch, cfg.train.loss)?.grad;
            err = err.max(max_theta_diff(
                &reconstruct(&rec, Weights::Phantom)?,
                &auto_t,
            ));
        }
        summary.decomp_max_err = Some(err);
    }
    out.summary = summary;
    Ok(out)
}

fn max_theta_diff(theta_grad: &crate::Gradient, full: &crate::Gradient) -> f64 {
    (0..V_INDEX)
        .flat_map(|i| {
            theta_grad
                .segment(i)
                .data()
                .iter()
                .zip(full.segment(i).data())
                .map(|(a, b)| (a - b).abs())
        })
        .fold(0.0, f64::max)
}

const STEP_HEADER: [&str; 12] = [
    "step",
    "loss",
    "batch_error",
    "v_easy",
    "v_hard",
    "v_tilde_easy",
    "v_tilde_hard",
    "grad_norm",
    "descent_grad_norm",
    "degenerate_ascent",
    "gini_real",
    "gini_phantom",
];

fn step_row(r: &StepRecord) -> Vec<String> {
    vec![
        r.step.to_string(),
        fmt_f64(r.loss),
        fmt_f64(r.batch_error),
        fmt_f64(r.v_easy),
        fmt_f64(r.v_hard),
        fmt_f64(r.v_tilde_easy),
        fmt_f64(r.v_tilde_hard),
        fmt_f64(r.grad_norm),
        fmt_f64(r.descent_grad_norm),
        (r.degenerate_ascent as u8).to_string(),
        opt(r.gini_real),
        opt(r.gini_phantom),
    ]
}

/// The probe distribution for a run: the training spec with its noise
/// removed and `n` replaced by `probe_n`.
pub fn probe_spec(cfg: &ExperimentConfig) -> ToySpec {
    ToySpec {
        noise: NoiseSpec::none(),
        ..cfg.data
    }
}

/// Executes one experiment into `out_dir` and returns its manifest.
pub fn run_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let data = generate(&cfg.data)?;
    let probe = generate_probe_set(&probe_spec(cfg), cfg.probe_n)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &data)?;

    let mut art = Artifacts::new();
    art.add("config.txt", cfg.to_flat_string().into_bytes());
    art.add("train.csv", dataset_bytes(&data)?);
    art.add("probe.csv", dataset_bytes(&probe)?);

    let ckpts = cfg.checkpoint_steps();
    let mut next = 0;
    let mut acc = RatioAccumulator::default();
    let mut step_rows = Vec::new();
    let mut ratio_rows = Vec::new();
    let mut summaries = Vec::new();
    let (mut lorenz_rows, mut bin_rows, mut point_rows) = (Vec::new(), Vec::new(), Vec::new());
    for step in 0..=cfg.train.steps {
        if next < ckpts.len() && ckpts[next] == step {
            let m = trainer.state();
            let out = analyze_checkpoint(cfg, m, step, &data, &probe)?;
            summaries.push(out.summary);
            lorenz_rows.extend(out.lorenz_rows);
            bin_rows.extend(out.bin_rows);
            point_rows.extend(out.point_rows);
            art.add(
                format!("ckpt_{step:06}.txt"),
                m.checkpoint_text(cfg.train.seed).into_bytes(),
            );
            next += 1;
        }
        if step == cfg.train.steps {
            break;
        }
        let rec = trainer.step()?;
        acc.push(&rec);
        if rec.step % cfg.record_every == 0 {
            step_rows.push(step_row(&rec));
            if cfg.wants(Analysis::Ratios) {
                let r = ratio_row(&rec);
                ratio_rows.push(vec![
                    r.step.to_string(),
                    opt(r.real),
                    opt(r.phantom),
                    opt(r.easy_factor),
                    opt(r.hard_factor),
                ]);
            }
        }
    }

    art.add_csv("steps.csv", &STEP_HEADER, step_rows)?;
    if cfg.wants(Analysis::Ratios) {
        art.add_csv(
            "ratios.csv",
            &["step", "real", "phantom", "easy_factor", "hard_factor"],
            ratio_rows,
        )?;
    }
    if cfg.wants(Analysis::Lorenz) {
        art.add_csv(
            "lorenz.csv",
            &["step", "source", "k_frac", "cum_frac"],
            lorenz_rows,
        )?;
    }
    if cfg.wants(Analysis::Bins) {
        art.add_csv(
            "bins.csv",
            &["step", "source", "bin_x", "bin_y", "median_lambda", "count"],
            bin_rows,
        )?;
        art.add_csv(
            "importance.csv",
            &[
                "step",
                "y",
                "lambda",
                "lambda_phantom",
                "contrib_easy",
                "contrib_hard",
            ],
            point_rows,
        )?;
    }
    let m = trainer.state();
    if cfg.wants(Analysis::Theory) {
        art.add_csv(
            "theory.csv",
            &["kind", "analytic", "numeric", "rel_err"],
            theory_rows(cfg.train.seed)?,
        )?;
        let s = &data.samples[0];
        let rows = taylor_ratio_check(m, &s.x, s.y, &TAYLOR_RHOS)?
            .iter()
            .map(|t| {
                vec![
                    fmt_f64(t.rho),
                    fmt_f64(t.measured),
                    fmt_f64(t.predicted),
                    fmt_f64(t.rel_err()),
                ]
            })
            .collect();
        art.add_csv(
            "taylor.csv",
            &["rho", "measured", "predicted", "rel_err"],
            rows,
        )?;
    }

    let metrics = FinalMetrics {
        train_error: m.train_error(&data.samples),
        train_loss: batch_loss(m, &data.samples, cfg.train.loss)?,
        easy_probe_error: m.probe_error(&probe, Feature::Easy)?,
        hard_probe_error: m.probe_error(&probe, Feature::Hard)?,
        mean_ratio_real: acc.mean(0),
        mean_ratio_phantom: acc.mean(1),
        mean_easy_factor: acc.mean(2),
        mean_hard_factor: acc.mean(3),
        degenerate_steps: acc.degenerate,
    };
    let artifacts = art.write_all(out_dir)?;
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        name: cfg.name.clone(),
        seed: cfg.train.seed,
        data_seed: cfg.data.seed,
        config: cfg.clone(),
        artifacts,
        metrics,
        checkpoints: summaries,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// Runs into the configured output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    run_in(cfg, &cfg.resolved_out_dir())
}

/// Reruns a manifest's config into `out_dir`.
pub fn rerun(manifest: &RunManifest, out_dir: &Path) -> Result<RunManifest> {
    run_in(&manifest.config, out_dir)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
