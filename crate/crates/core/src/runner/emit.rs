//! Tidy per-figure CSV tables assembled from finished runs.
//!
//! Schemas (one row per run unless noted):
//!
//! | figure | columns |
//! |--------|---------|
//! | fig2a  | complexity_deg, rho, seed, hard_probe_err |
//! | fig2b  | rho, seed, ratio_real, ratio_phantom |
//! | fig3   | mode, rho, seed, step, source, k_frac, cum_frac (one row per curve point) |
//! | fig4   | mode, rho, seed, step, source, bin_x, bin_y, median_lambda, count (one row per bin) |
//! | fig5   | intervention, v_star_ratio, seed, hard_probe_err |
//! | fig6   | noise_kind, noise_level, noise_target, mode, rho, seed, hard_probe_err |
//! | fig7   | batch_size, mode, rho, seed, hard_probe_err |
//!
//! fig2a and fig2b take SGD and LSAM runs, with SGD reported at ρ = 0.
//! fig5 takes intervention runs plus SGD (empty ratio) and LSAM (ratio set
//! to its mean phantom ratio) as reference rows.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::TrainMode;
use crate::toydata::{fmt_f64, NoiseTarget};

use super::config::Analysis;
use super::run::{RunManifest, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2a,
    Fig2b,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
}

impl Figure {
    pub const ALL: [Figure; 7] = [
        Figure::Fig2a,
        Figure::Fig2b,
        Figure::Fig3,
        Figure::Fig4,
        Figure::Fig5,
        Figure::Fig6,
        Figure::Fig7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Figure::Fig2a => "fig2a",
            Figure::Fig2b => "fig2b",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig5 => "fig5",
            Figure::Fig6 => "fig6",
            Figure::Fig7 => "fig7",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Figure::Fig2a => &["complexity_deg", "rho", "seed", "hard_probe_err"],
            Figure::Fig2b => &["rho", "seed", "ratio_real", "ratio_phantom"],
            Figure::Fig3 => &[
                "mode", "rho", "seed", "step", "source", "k_frac", "cum_frac",
            ],
            Figure::Fig4 => &[
                "mode",
                "rho",
                "seed",
                "step",
                "source",
                "bin_x",
                "bin_y",
                "median_lambda",
                "count",
            ],
            Figure::Fig5 => &["intervention", "v_star_ratio", "seed", "hard_probe_err"],
            Figure::Fig6 => &[
                "noise_kind",
                "noise_level",
                "noise_target",
                "mode",
                "rho",
                "seed",
                "hard_probe_err",
            ],
            Figure::Fig7 => &["batch_size", "mode", "rho", "seed", "hard_probe_err"],
        }
    }

    /// The analysis whose artifacts the figure reads, if any.
    pub fn requires(self) -> Option<Analysis> {
        match self {
            Figure::Fig2b => Some(Analysis::Ratios),
            Figure::Fig3 => Some(Analysis::Lorenz),
            Figure::Fig4 => Some(Analysis::Bins),
            _ => None,
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown figure {s:?}")))
    }
}

/// A manifest together with the directory holding its artifacts.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Every run under `root`, found by their manifests, in path order.
pub fn collect_runs(root: &Path) -> Result<Vec<LoadedRun>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(root, &mut paths)?;
    paths
        .into_iter()
        .map(|p| {
            Ok(LoadedRun {
                manifest: RunManifest::load(&p)?,
                dir: p.parent().unwrap_or(Path::new(".")).to_path_buf(),
            })
        })
        .collect()
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(String::from).collect())
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn effective_rho(m: &RunManifest) -> f64 {
    match m.config.train.mode.phantom_mode() {
        Some(_) => m.config.train.rho,
        None => 0.0,
    }
}

fn noise_kind(m: &RunManifest) -> (&'static str, f64) {
    let n = &m.config.data.noise;
    if n.gaussian_sigma > 0.0 {
        ("gaussian", n.gaussian_sigma)
    } else if n.label_flip_p > 0.0 {
        ("label-flip", n.label_flip_p)
    } else if n.dropout_q > 0.0 {
        ("dropout", n.dropout_q)
    } else {
        ("none", 0.0)
    }
}

fn artifact_rows(run: &LoadedRun, figure: Figure, file: &str) -> Result<Vec<Vec<String>>> {
    let analysis = figure.requires().expect("figure reads artifacts");
    if !run.manifest.config.wants(analysis) || !run.manifest.artifacts.contains_key(file) {
        return Err(Error::MissingAnalysis {
            figure: figure.as_str().into(),
            analysis: analysis.as_str().into(),
        });
    }
    Ok(read_csv(&run.dir.join(file))?.1)
}

/// Rows of one figure table, without the header.
pub fn figure_rows(runs: &[LoadedRun], figure: Figure) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for run in runs {
        let m = &run.manifest;
        let mode = m.config.train.mode;
        let base_or_lsam = matches!(mode, TrainMode::Sgd | TrainMode::Lsam);
        let hard = fmt_f64(m.metrics.hard_probe_error);
        let rho = fmt_f64(effective_rho(m));
        let seed = m.seed.to_string();
        match figure {
            Figure::Fig2a if base_or_lsam => {
                rows.push(vec![fmt_f64(m.config.data.complexity_deg), rho, seed, hard])
            }
            Figure::Fig2b if base_or_lsam => {
                if !m.config.wants(Analysis::Ratios) {
                    return Err(Error::MissingAnalysis {
                        figure: figure.as_str().into(),
                        analysis: Analysis::Ratios.as_str().into(),
                    });
                }
                let o = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
                rows.push(vec![
                    rho,
                    seed,
                    o(m.metrics.mean_ratio_real),
                    o(m.metrics.mean_ratio_phantom),
                ]);
            }
            Figure::Fig3 => {
                for r in artifact_rows(run, figure, "lorenz.csv")? {
                    let mut row = vec![mode.as_str().into(), rho.clone(), seed.clone()];
                    row.extend(r);
                    rows.push(row);
                }
            }
            Figure::Fig4 => {
                for r in artifact_rows(run, figure, "bins.csv")? {
                    let mut row = vec![mode.as_str().into(), rho.clone(), seed.clone()];
                    row.extend(r);
                    rows.push(row);
                }
            }
            Figure::Fig5 => {
                let (name, ratio) = match (mode.intervention(), m.config.train.v_star) {
                    (Some(i), Some(v)) => (i.as_str(), fmt_f64(v[1] / v[0])),
                    (None, _) if mode == TrainMode::Sgd => ("sgd", String::new()),
                    (None, _) if mode == TrainMode::Lsam => (
                        "lsam",
                        m.metrics
                            .mean_ratio_phantom
                            .map(fmt_f64)
                            .unwrap_or_default(),
                    ),
                    _ => continue,
                };
                rows.push(vec![name.into(), ratio, seed, hard]);
            }
            Figure::Fig6 => {
                let (kind, level) = noise_kind(m);
                let target = match m.config.data.noise.target {
                    NoiseTarget::Both => "both",
                    NoiseTarget::HardOnly => "hard-only",
                };
                rows.push(vec![
                    kind.into(),
                    fmt_f64(level),
                    target.into(),
                    mode.as_str().into(),
                    rho,
                    seed,
                    hard,
                ]);
            }
            Figure::Fig7 => rows.push(vec![
                m.config.train.batch_size.to_string(),
                mode.as_str().into(),
                rho,
                seed,
                hard,
            ]),
            _ => {}
        }
    }
    Ok(rows)
}

/// Writes `<out>/<figure>.csv` from every run under `input` and returns its
/// path.
pub fn emit_figure_data(input: &Path, figure: Figure, out: &Path) -> Result<PathBuf> {
    let runs = collect_runs(input)?;
    let rows = figure_rows(&runs, figure)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let enc = |e: csv::Error| Error::contract(format!("csv encoding: {e}"));
    w.write_record(figure.columns()).map_err(enc)?;
    for r in rows {
        w.write_record(&r).map_err(enc)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv encoding: {e}")))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("{}.csv", figure.as_str()));
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
