//! The 4-D toy distribution: a linear "easy" feature in coordinates 0..2 and
//! a spiral "hard" feature in coordinates 2..4, both predictive of the label.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Probe sets default to this many samples.
pub const DEFAULT_PROBE_N: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTarget {
    #[default]
    Both,
    HardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub label_flip_p: f64,
    pub dropout_q: f64,
    pub target: NoiseTarget,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        self.gaussian_sigma == 0.0 && self.label_flip_p == 0.0 && self.dropout_q == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.label_flip_p) {
            return Err(Error::Config(format!(
                "label_flip_p must lie in [0, 0.5], got {}",
                self.label_flip_p
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_q) {
            return Err(Error::Config(format!(
                "dropout_q must lie in [0, 1], got {}",
                self.dropout_q
            )));
        }
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::Config(format!(
                "gaussian_sigma must be finite and nonnegative, got {}",
                self.gaussian_sigma
            )));
        }
        Ok(())
    }

    fn applies_to_easy(&self) -> bool {
        self.target == NoiseTarget::Both
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub complexity_deg: f64,
    pub a_easy: f64,
    pub a_hard: f64,
    pub n: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            complexity_deg: 360.0,
            a_easy: 2.0,
            a_hard: 0.25,
            n: 300,
            noise: NoiseSpec::none(),
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.complexity_deg > 0.0) {
            return Err(Error::Config("complexity_deg must be positive".into()));
        }
        if !(self.a_easy > 0.0 && self.a_hard > 0.0) {
            return Err(Error::Config("feature scales must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        self.noise.validate()
    }

    /// Largest spiral latent magnitude, `2πχ/360`.
    pub fn spiral_radius(&self) -> f64 {
        spiral_radius(self.complexity_deg)
    }
}

pub fn spiral_radius(complexity_deg: f64) -> f64 {
    2.0 * PI * complexity_deg / 360.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub x: [f64; 4],
    pub y: f64,
    /// Attribute that generated `x[0..2]`.
    pub a1: f64,
    /// Attribute that generated `x[2..4]`.
    pub a2: f64,
}

impl ToySample {
    pub fn x_easy(&self) -> [f64; 2] {
        [self.x[0], self.x[1]]
    }

    pub fn x_hard(&self) -> [f64; 2] {
        [self.x[2], self.x[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Training distribution: `a1 == a2 == y`.
    Correlated,
    /// Independent attributes, balanced over all four cells.
    Probe,
    /// Loaded from disk without generation metadata.
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub spec: Option<ToySpec>,
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let ser = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
        wtr.write_record(["x1", "x2", "x3", "x4", "y", "a1", "a2"])
            .map_err(ser)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x.iter().map(|v| fmt_f64(*v)).collect();
            row.extend([s.y, s.a1, s.a2].iter().map(|v| format!("{}", *v as i64)));
            wtr.write_record(&row).map_err(ser)?;
        }
        wtr.flush()
            .map_err(|e| Error::Contract(format!("csv flush failed: {e}")))
    }

    pub fn read_csv<R: Read>(r: R, origin: &Path) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            msg,
        };
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x1", "x2", "x3", "x4", "y", "a1", "a2"] {
            return Err(parse_err(format!("unexpected header {headers:?}")));
        }
        let mut samples = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(format!("row {}: {e}", line + 1)))?;
            if vals.len() != 7 {
                return Err(parse_err(format!(
                    "row {} has {} fields",
                    line + 1,
                    vals.len()
                )));
            }
            for label in &vals[4..] {
                if *label != 1.0 && *label != -1.0 {
                    return Err(parse_err(format!("row {}: label {label}", line + 1)));
                }
            }
            samples.push(ToySample {
                x: [vals[0], vals[1], vals[2], vals[3]],
                y: vals[4],
                a1: vals[5],
                a2: vals[6],
            });
        }
        Ok(Self {
            kind: DatasetKind::Imported,
            spec: None,
            samples,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_label(label: f64) {
    debug_assert!(label == 1.0 || label == -1.0, "label must be ±1");
}

/// Easy feature from its latent: `a_easy · [z, z]`.
pub fn easy_from_latent(z: f64, a_easy: f64) -> [f64; 2] {
    [a_easy * z, a_easy * z]
}

/// Noise-free spiral point `a_hard · [−z cos z, z sin z] + eta`.
pub fn hard_from_latent(z: f64, a_hard: f64, eta: [f64; 2]) -> [f64; 2] {
    [
        a_hard * (-z * z.cos()) + eta[0],
        a_hard * (z * z.sin()) + eta[1],
    ]
}

pub fn sample_easy<R: Rng + ?Sized>(label: f64, a_easy: f64, rng: &mut R) -> [f64; 2] {
    check_label(label);
    let u: f64 = rng.gen();
    // u in [0, 1); the open end keeps the sign strict for label +1.
    let z = if label > 0.0 { 1.0 - u } else { -(1.0 - u) };
    easy_from_latent(z, a_easy)
}

/// Draws the spiral latent with `z² ~ U(0, R²)`, signed by the label.
pub fn sample_hard_latent<R: Rng + ?Sized>(label: f64, complexity_deg: f64, rng: &mut R) -> f64 {
    check_label(label);
    let r = spiral_radius(complexity_deg);
    let z = (rng.gen::<f64>() * r * r).sqrt();
    label * z
}

pub fn sample_hard<R: Rng + ?Sized>(
    label: f64,
    complexity_deg: f64,
    a_hard: f64,
    rng: &mut R,
) -> [f64; 2] {
    let z = sample_hard_latent(label, complexity_deg, rng);
    let eta = [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)];
    hard_from_latent(z, a_hard, eta)
}

/// `ε + u · v · feature` with i.i.d. Gaussian `ε` per coordinate, sign flip
/// `u = −1` with probability `p`, and dropout mask `v = 0` with probability
/// `q`. Random draws happen in that order, each only when its noise is on.
pub fn apply_noise<R: Rng + ?Sized>(feature: [f64; 2], spec: &NoiseSpec, rng: &mut R) -> [f64; 2] {
    let flip = if spec.label_flip_p > 0.0 && rng.gen_bool(spec.label_flip_p) {
        -1.0
    } else {
        1.0
    };
    mask_and_perturb([flip * feature[0], flip * feature[1]], spec, rng)
}

fn mask_and_perturb<R: Rng + ?Sized>(feature: [f64; 2], spec: &NoiseSpec, rng: &mut R) -> [f64; 2] {
    let keep = if spec.dropout_q > 0.0 && rng.gen_bool(spec.dropout_q) {
        0.0
    } else {
        1.0
    };
    let mut out = [keep * feature[0], keep * feature[1]];
    if spec.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.gaussian_sigma).expect("validated sigma");
        for o in &mut out {
            *o += normal.sample(rng);
        }
    }
    out
}

fn draw_flip<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> f64 {
    if spec.label_flip_p > 0.0 && rng.gen_bool(spec.label_flip_p) {
        -1.0
    } else {
        1.0
    }
}

/// One sample whose easy half is generated from `a1` and hard half from `a2`.
///
/// Label-flip noise flips the latent sign of a feature, which for the spiral
/// moves the point onto the opposite branch rather than mirroring it.
fn draw_sample<R: Rng + ?Sized>(
    spec: &ToySpec,
    y: f64,
    a1: f64,
    a2: f64,
    rng: &mut R,
) -> ToySample {
    let noise = &spec.noise;
    let easy = if noise.applies_to_easy() && !noise.is_none() {
        let u = draw_flip(noise, rng);
        let clean = sample_easy(u * a1, spec.a_easy, rng);
        mask_and_perturb(clean, noise, rng)
    } else {
        sample_easy(a1, spec.a_easy, rng)
    };
    let hard = if !noise.is_none() {
        let u = draw_flip(noise, rng);
        let clean = sample_hard(u * a2, spec.complexity_deg, spec.a_hard, rng);
        mask_and_perturb(clean, noise, rng)
    } else {
        sample_hard(a2, spec.complexity_deg, spec.a_hard, rng)
    };
    ToySample {
        x: [easy[0], easy[1], hard[0], hard[1]],
        y,
        a1,
        a2,
    }
}

fn sign(b: bool) -> f64 {
    if b {
        1.0
    } else {
        -1.0
    }
}

/// Training distribution: both features generated from the label.
pub fn generate(spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "toydata/train", 0);
    let samples = (0..spec.n)
        .map(|_| {
            let y = sign(rng.gen_bool(0.5));
            draw_sample(spec, y, y, y, &mut rng)
        })
        .collect();
    Ok(ToyDataset {
        kind: DatasetKind::Correlated,
        spec: Some(*spec),
        samples,
    })
}

/// Probe distribution: `a1` and `a2` drawn independently and uniformly, so
/// every `(a1, a2)` cell is equally likely. `y` is set to `a1`.
pub fn generate_probe_set(spec: &ToySpec, n_probe: usize) -> Result<ToyDataset> {
    spec.validate()?;
    if n_probe == 0 {
        return Err(Error::contract("probe set needs at least one sample"));
    }
    let mut rng = rng::stream(spec.seed, "toydata/probe", 0);
    let samples = (0..n_probe)
        .map(|_| {
            let a1 = sign(rng.gen_bool(0.5));
            let a2 = sign(rng.gen_bool(0.5));
            draw_sample(spec, a1, a1, a2, &mut rng)
        })
        .collect();
    Ok(ToyDataset {
        kind: DatasetKind::Probe,
        spec: Some(ToySpec {
            n: n_probe,
            ..*spec
        }),
        samples,
    })
}
