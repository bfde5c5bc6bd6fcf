//! Cartesian sweeps over config fields and seeds, with per-cell aggregation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydata::fmt_f64;

use super::config::ExperimentConfig;
use super::run::{run_in, FinalMetrics, RunManifest};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SWEEP_FILE: &str = "sweep.json";

/// One swept parameter: a config key (dotted or short form) and its values
/// as they would be written on the right of `=`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn new(key: impl Into<String>, values: &[&str]) -> Self {
        Self {
            key: key.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, vals) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis {spec:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!(
                "axis {spec:?} needs a key and values"
            )));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {s:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    /// `(key, value)` for each axis, in axis order.
    pub point: Vec<(String, String)>,
    pub seed: u64,
    pub dir: PathBuf,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellRun>,
}

impl SweepResult {
    pub fn manifests(&self) -> impl Iterator<Item = &RunManifest> {
        self.cells.iter().filter_map(|c| c.manifest.as_ref())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellRun> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SWEEP_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            msg: e.to_string(),
        })
    }
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Directory of one cell relative to the sweep root, e.g.
/// `rho-0.1_complexity-360/seed2`.
pub fn cell_dir(point: &[(String, String)], seed: u64) -> PathBuf {
    let label = if point.is_empty() {
        "base".to_string()
    } else {
        point
            .iter()
            .map(|(k, v)| format!("{}-{}", sanitize(k), sanitize(v)))
            .collect::<Vec<_>>()
            .join("_")
    };
    PathBuf::from(label).join(format!("seed{seed}"))
}

fn grid(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Builds the config of one cell; the seed drives both training and data.
pub fn cell_config(
    base: &ExperimentConfig,
    point: &[(String, String)],
    seed: u64,
) -> Result<ExperimentConfig> {
    let mut overrides = point.to_vec();
    overrides.push(("train.seed".into(), seed.to_string()));
    overrides.push(("data.seed".into(), seed.to_string()));
    base.with_overrides(&overrides)
}

/// Runs the Cartesian product of `axes` times `seeds` under `root` on
/// `workers` threads. A failing cell is recorded and the rest still run.
/// Fails up front only when a cell's config is invalid.
pub fn sweep(
    base: &ExperimentConfig,
    axes: &[Axis],
    seeds: &[u64],
    workers: usize,
    root: &Path,
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut jobs = Vec::new();
    for point in grid(axes) {
        for &seed in seeds {
            let cfg = cell_config(base, &point, seed)?;
            jobs.push((point.clone(), seed, cfg));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let cells: Vec<CellRun> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(point, seed, cfg)| {
                let dir = cell_dir(&point, seed);
                let outcome = run_in(&cfg, &root.join(&dir));
                let (manifest, error) = match outcome {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                CellRun {
                    point,
                    seed,
                    dir,
                    manifest,
                    error,
                }
            })
            .collect()
    });
    let result = SweepResult {
        axes: axes.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    };
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let agg = root.join(AGGREGATE_FILE);
    std::fs::write(&agg, aggregate_csv(&result)).map_err(|e| Error::io(&agg, e))?;
    let json = root.join(SWEEP_FILE);
    let text = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::contract(format!("sweep encoding: {e}")))?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(result)
}

/// Mean and sample standard deviation (n−1 denominator). The deviation is
/// `None` for a single value.
pub fn mean_std(xs: &[f64]) -> Option<(f64, Option<f64>)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

type MetricPick = fn(&FinalMetrics) -> Option<f64>;

const METRICS: [(&str, MetricPick); 6] = [
    ("train_error", |m| Some(m.train_error)),
    ("easy_probe_error", |m| Some(m.easy_probe_error)),
    ("hard_probe_error", |m| Some(m.hard_probe_error)),
    ("ratio_real", |m| m.mean_ratio_real),
    ("ratio_phantom", |m| m.mean_ratio_phantom),
    ("train_loss", |m| Some(m.train_loss)),
];

/// One row per grid point: axis values, run and failure counts, then mean
/// and standard deviation of each final metric over the successful seeds.
pub fn aggregate_csv(result: &SweepResult) -> String {
    let mut header: Vec<String> = result.axes.iter().map(|a| a.key.clone()).collect();
    header.extend(["n_runs".into(), "n_failed".into()]);
    for (name, _) in METRICS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    let mut out = header.join(",") + "\n";
    for point in grid(&result.axes) {
        let cells: Vec<&CellRun> = result.cells.iter().filter(|c| c.point == point).collect();
        let ok: Vec<&FinalMetrics> = cells
            .iter()
            .filter_map(|c| c.manifest.as_ref().map(|m| &m.metrics))
            .collect();
        let mut row: Vec<String> = point.iter().map(|(_, v)| v.clone()).collect();
        row.push(ok.len().to_string());
        row.push((cells.len() - ok.len()).to_string());
        for (_, pick) in METRICS {
            let xs: Vec<f64> = ok.iter().filter_map(|m| pick(m)).collect();
            match mean_std(&xs) {
                Some((mean, std)) => {
                    row.push(fmt_f64(mean));
                    row.push(std.map(fmt_f64).unwrap_or_default());
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        out += &row.join(",");
        out.push('\n');
    }
    out
}
