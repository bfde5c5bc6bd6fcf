//! Experiment configuration: a flat `key = value` file with dotted keys,
//! read as TOML.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::toydata::{ToySpec, DEFAULT_PROBE_N};

/// Overrides the default output root when a config leaves `out_dir` unset.
pub const OUT_ROOT_ENV: &str = "PHANTOM_OUT";
const FALLBACK_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Decomp,
    Lorenz,
    Ratios,
    Bins,
    Theory,
}

impl Analysis {
    pub const ALL: [Analysis; 5] = [
        Analysis::Decomp,
        Analysis::Lorenz,
        Analysis::Ratios,
        Analysis::Bins,
        Analysis::Theory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Analysis::Decomp => "decomp",
            Analysis::Lorenz => "lorenz",
            Analysis::Ratios => "ratios",
            Analysis::Bins => "bins",
            Analysis::Theory => "theory",
        }
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Analysis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown analysis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub train: TrainConfig,
    pub data: ToySpec,
    pub probe_n: usize,
    pub record_every: usize,
    /// Steps at which checkpoint-level analyses run and the model is saved.
    /// The final step is always included.
    pub checkpoints: Vec<usize>,
    pub analyses: BTreeSet<Analysis>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            train: TrainConfig::default(),
            data: ToySpec::default(),
            probe_n: DEFAULT_PROBE_N,
            record_every: 100,
            checkpoints: Vec::new(),
            analyses: [Analysis::Ratios].into_iter().collect(),
            out_dir: None,
        }
    }
}

/// Short names accepted on the command line for common dotted keys.
pub fn canonical_key(key: &str) -> &str {
    match key {
        "rho" => "train.rho",
        "mode" => "train.mode",
        "lr" => "train.lr",
        "steps" => "train.steps",
        "batch_size" => "train.batch_size",
        "loss" => "train.loss",
        "complexity" | "complexity_deg" => "data.complexity_deg",
        "n" => "data.n",
        "gaussian_sigma" => "data.noise.gaussian_sigma",
        "label_flip_p" => "data.noise.label_flip_p",
        "dropout_q" => "data.noise.dropout_q",
        "noise_target" => "data.noise.target",
        other => other,
    }
}

/// Reads a bare value the way it would appear on the right of `=`; anything
/// that is not valid TOML is taken as a string.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
    }
    Err(Error::Config("empty key".into()))
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_table(table).map_err(|e| match e {
            Error::Config(msg) => Error::Parse {
                path: origin.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    /// Returns a copy with `key` (dotted or short form) set to `raw`.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        self.with_overrides(&[(key.to_string(), raw.to_string())])
    }

    /// Applies every override before validating, so interdependent keys
    /// (an intervention mode and its `v_star`) can change together.
    /// `v_star_ratio = r` sets `v_star = (e, r·e)` with `e` the current
    /// easy component, or 1.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = self.to_table();
        for (key, raw) in overrides {
            if key == "v_star_ratio" {
                let ratio: f64 = raw.trim().parse().map_err(|_| {
                    Error::Config(format!("v_star_ratio must be a number, got {raw:?}"))
                })?;
                let easy = self.train.v_star.map_or(1.0, |v| v[0]);
                set_dotted(
                    &mut table,
                    "train.v_star",
                    toml::Value::Array(vec![easy.into(), (easy * ratio).into()]),
                )?;
            } else {
                set_dotted(&mut table, canonical_key(key), parse_value(raw))?;
            }
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if self.probe_n == 0 {
            return Err(Error::Config("probe_n must be at least 1".into()));
        }
        if let Some(s) = self.checkpoints.iter().find(|s| **s > self.train.steps) {
            return Err(Error::Config(format!(
                "checkpoint step {s} is past the last step {}",
                self.train.steps
            )));
        }
        Ok(())
    }

    /// Output directory: `out_dir` if set, else `$PHANTOM_OUT/<name>`, else
    /// `runs/<name>`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match &self.out_dir {
            Some(d) => d.clone(),
            None => default_out_root().join(&self.name),
        }
    }

    /// Checkpoint steps in increasing order, always ending with the last step.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.checkpoints.clone();
        steps.push(self.train.steps);
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    /// Flat rendering, one dotted key per line, readable by [`Self::parse`].
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        flatten_into(&mut out, "", &self.to_table());
        out
    }
}

fn flatten_into(out: &mut String, prefix: &str, table: &toml::Table) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_into(out, &key, t),
            other => {
                let _ = writeln!(out, "{key} = {other}");
            }
        }
    }
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_ROOT))
}
