//! The disentangled toy network.
//!
//! A single representation network `Φ_θ: ℝ⁴ → ℝ` (affine 4→100, layer norm,
//! rectifier, affine 100→100, layer norm, rectifier, affine 100→1) is applied
//! twice per input: once with the hard coordinates zeroed and once with the
//! easy coordinates zeroed. The two scalars are combined by the last-layer
//! weights `v = (v_easy, v_hard)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::kernels;
use crate::diffcore::{Graph, NodeId, ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::toydata::{ToyDataset, ToySample};

pub const INPUT_DIM: usize = 4;
pub const HIDDEN: usize = 100;
pub const LN_EPS: f64 = 1e-5;

/// Theta segment order. `v` is appended after these when flattening a full
/// model.
pub const THETA_SEGMENTS: [&str; 10] = [
    "l1.weight",
    "l1.bias",
    "ln1.gain",
    "ln1.bias",
    "l2.weight",
    "l2.bias",
    "ln2.gain",
    "ln2.bias",
    "l3.weight",
    "l3.bias",
];
pub const V_SEGMENT: &str = "v";
/// Index of the `v` segment in [`ModelState::to_params`].
pub const V_INDEX: usize = THETA_SEGMENTS.len();

fn theta_shapes() -> [Vec<usize>; 10] {
    [
        vec![HIDDEN, INPUT_DIM],
        vec![HIDDEN],
        vec![HIDDEN],
        vec![HIDDEN],
        vec![HIDDEN, HIDDEN],
        vec![HIDDEN],
        vec![HIDDEN],
        vec![HIDDEN],
        vec![1, HIDDEN],
        vec![1],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePair {
    pub phi_easy: f64,
    pub phi_hard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub theta: ParamVector,
    pub v_easy: f64,
    pub v_hard: f64,
}

pub fn mask_easy(x: &[f64; 4]) -> [f64; 4] {
    [x[0], x[1], 0.0, 0.0]
}

pub fn mask_hard(x: &[f64; 4]) -> [f64; 4] {
    [0.0, 0.0, x[2], x[3]]
}

/// Deterministic digest of the layer layout; checkpoints carry it.
pub fn architecture_hash() -> String {
    let mut desc = String::from("disentangled-mlp;");
    for (name, shape) in THETA_SEGMENTS.iter().zip(theta_shapes()) {
        let _ = write!(desc, "{name}:{shape:?};");
    }
    let _ = write!(desc, "{V_SEGMENT}:[2];ln_eps={LN_EPS:e};relu;masked-inputs");
    hex::encode(Sha256::digest(desc.as_bytes()))
}

fn orientation(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl ModelState {
    /// Fan-in uniform init for affine weights, zero biases, unit layer-norm
    /// gains. `v_easy` and `v_hard` share one draw from the fan-in-2 rule.
    pub fn init(seed: u64) -> Self {
        let mut r = rng::stream(seed, "model/init", 0);
        let mut theta = ParamVector::new();
        for (name, shape) in THETA_SEGMENTS.iter().zip(theta_shapes()) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("weight") {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                (0..n).map(|_| r.gen_range(-bound..bound)).collect()
            } else if name.ends_with("gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            theta.push(*name, Tensor::new(shape, data).expect("layout"));
        }
        let bound = 1.0 / 2f64.sqrt();
        let v = r.gen_range(-bound..bound);
        Self {
            theta,
            v_easy: v,
            v_hard: v,
        }
    }

    pub fn v(&self) -> [f64; 2] {
        [self.v_easy, self.v_hard]
    }

    pub fn v_of(&self, which: Feature) -> f64 {
        match which {
            Feature::Easy => self.v_easy,
            Feature::Hard => self.v_hard,
        }
    }

    /// All trainable parameters: theta segments followed by `v`.
    pub fn to_params(&self) -> ParamVector {
        self.theta
            .clone()
            .with(V_SEGMENT, Tensor::vector(vec![self.v_easy, self.v_hard]))
    }

    pub fn from_params(p: &ParamVector) -> Result<Self> {
        if p.num_segments() != V_INDEX + 1 {
            return Err(Error::Dimension(format!(
                "expected {} segments, got {}",
                V_INDEX + 1,
                p.num_segments()
            )));
        }
        let mut theta = ParamVector::new();
        for (i, (name, shape)) in THETA_SEGMENTS.iter().zip(theta_shapes()).enumerate() {
            let (n, t) = &p.segments()[i];
            if n != name || t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "segment {i} is {n}{:?}, expected {name}{shape:?}",
                    t.shape()
                )));
            }
            theta.push(n.clone(), t.clone());
        }
        let v = p.segment(V_INDEX);
        if p.segments()[V_INDEX].0 != V_SEGMENT || v.len() != 2 {
            return Err(Error::Dimension("last segment must be v[2]".into()));
        }
        Ok(Self {
            theta,
            v_easy: v.data()[0],
            v_hard: v.data()[1],
        })
    }

    pub fn num_params(&self) -> usize {
        self.theta.len() + 2
    }

    /// Scalar representation `Φ_θ(x)` of an already-masked input.
    pub fn phi(&self, x: &[f64; 4]) -> f64 {
        phi_forward(&self.theta, x, None)
    }

    pub fn features(&self, x: &[f64; 4]) -> FeaturePair {
        FeaturePair {
            phi_easy: self.phi(&mask_easy(x)),
            phi_hard: self.phi(&mask_hard(x)),
        }
    }

    pub fn logit(&self, x: &[f64; 4]) -> f64 {
        let f = self.features(x);
        self.logit_from(&f)
    }

    pub fn logit_from(&self, f: &FeaturePair) -> f64 {
        self.v_easy * f.phi_easy + self.v_hard * f.phi_hard
    }

    /// Fraction of samples the learned feature misclassifies against its own
    /// attribute. The feature is read through `sign(v_which)` so a head that
    /// learned the negated feature still counts as learned.
    pub fn probe_error(&self, data: &ToyDataset, which: Feature) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::contract("probe error over an empty dataset"));
        }
        let sign = orientation(self.v_of(which));
        let wrong = data
            .samples
            .iter()
            .filter(|s| {
                let (phi, attr) = match which {
                    Feature::Easy => (self.phi(&mask_easy(&s.x)), s.a1),
                    Feature::Hard => (self.phi(&mask_hard(&s.x)), s.a2),
                };
                !(sign * phi * attr > 0.0)
            })
            .count();
        Ok(wrong as f64 / data.len() as f64)
    }

    /// 0-1 error of `sign(f)` against `y`.
    pub fn train_error(&self, samples: &[ToySample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let wrong = samples
            .iter()
            .filter(|s| !(self.logit(&s.x) * s.y > 0.0))
            .count();
        wrong as f64 / samples.len() as f64
    }

    pub fn save_checkpoint(&self, seed: u64, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_text(seed)).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text)
    }

    /// Text checkpoint: header lines, then one `name dims hex...` record per
    /// segment with each value as its 16-digit IEEE-754 bit pattern.
    pub fn checkpoint_text(&self, seed: u64) -> String {
        let p = self.to_params();
        let mut out = String::new();
        let _ = writeln!(out, "phantom-checkpoint v1");
        let _ = writeln!(out, "arch {}", architecture_hash());
        let _ = writeln!(out, "seed {seed}");
        let _ = writeln!(out, "segments {}", p.num_segments());
        for (name, t) in p.segments() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = write!(out, "{name} {}", dims.join("x"));
            for v in t.data() {
                let _ = write!(out, " {:016x}", v.to_bits());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_checkpoint(text: &str) -> Result<(Self, u64)> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some("phantom-checkpoint v1") {
            return Err(bad("missing header".into()));
        }
        let arch = lines
            .next()
            .and_then(|l| l.strip_prefix("arch "))
            .ok_or_else(|| bad("missing arch line".into()))?;
        if arch != architecture_hash() {
            return Err(bad(format!(
                "architecture hash {arch} does not match {}",
                architecture_hash()
            )));
        }
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| bad("missing seed line".into()))?;
        let count = lines
            .next()
            .and_then(|l| l.strip_prefix("segments "))
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad("missing segment count".into()))?;
        let mut p = ParamVector::new();
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated".into()))?;
            let mut parts = line.split_ascii_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty record".into()))?;
            let shape: Vec<usize> = parts
                .next()
                .ok_or_else(|| bad(format!("{name}: missing shape")))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{name}: {e}")))?;
            let data: Vec<f64> = parts
                .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{name}: {e}")))?;
            p.push(name, Tensor::new(shape, data)?);
        }
        Ok((Self::from_params(&p)?, seed))
    }
}

/// Plain forward pass of `Φ_θ`. When `masks` is given, the rectifier
/// activity pattern of both hidden layers is written into it.
pub fn phi_forward(theta: &ParamVector, x: &[f64; 4], masks: Option<&mut [Vec<bool>; 2]>) -> f64 {
    let seg = |i: usize| theta.segment(i).data();
    let mut h1 = vec![0.0; HIDDEN];
    kernels::affine(x, seg(0), seg(1), &mut h1);
    let a1 = ln_relu(&h1, seg(2), seg(3));
    let mut h2 = vec![0.0; HIDDEN];
    kernels::affine(&a1, seg(4), seg(5), &mut h2);
    let a2 = ln_relu(&h2, seg(6), seg(7));
    if let Some(m) = masks {
        m[0] = a1.iter().map(|v| *v > 0.0).collect();
        m[1] = a2.iter().map(|v| *v > 0.0).collect();
    }
    let mut out = [0.0];
    kernels::affine(&a2, seg(8), seg(9), &mut out);
    out[0]
}

/// Smallest distance of any hidden pre-rectifier value of `Φ_θ(x)` from the
/// kink. Finite differences are unreliable when this is below the step size.
pub fn rectifier_margin(theta: &ParamVector, x: &[f64; 4]) -> f64 {
    let seg = |i: usize| theta.segment(i).data();
    let pre = |h: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
        let (xhat, _) = kernels::normalize(h, LN_EPS);
        xhat.iter()
            .zip(gain)
            .zip(bias)
            .map(|((x, g), b)| g * x + b)
            .collect()
    };
    let mut h1 = vec![0.0; HIDDEN];
    kernels::affine(x, seg(0), seg(1), &mut h1);
    let p1 = pre(&h1, seg(2), seg(3));
    let a1: Vec<f64> = p1.iter().map(|v| v.max(0.0)).collect();
    let mut h2 = vec![0.0; HIDDEN];
    kernels::affine(&a1, seg(4), seg(5), &mut h2);
    let p2 = pre(&h2, seg(6), seg(7));
    p1.iter()
        .chain(&p2)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn ln_relu(h: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let (xhat, _) = kernels::normalize(h, LN_EPS);
    xhat.iter()
        .zip(gain)
        .zip(bias)
        .map(|((x, g), b)| (g * x + b).max(0.0))
        .collect()
}

/// Records `Φ_θ(x)` on a graph whose first ten bound segments are theta.
pub fn phi_node(g: &mut Graph, params: &[NodeId], x: &[f64; 4]) -> Result<NodeId> {
    let input = g.input(Tensor::vector(x.to_vec()));
    let h = g.affine(input, params[0], params[1])?;
    let h = g.layer_norm(h, params[2], params[3], LN_EPS)?;
    let h = g.relu(h);
    let h = g.affine(h, params[4], params[5])?;
    let h = g.layer_norm(h, params[6], params[7], LN_EPS)?;
    let h = g.relu(h);
    let out = g.affine(h, params[8], params[9])?;
    g.index(out, 0)
}

/// Nodes for one example on a graph bound to [`ModelState::to_params`].
#[derive(Debug, Clone, Copy)]
pub struct LogitNodes {
    pub phi_easy: NodeId,
    pub phi_hard: NodeId,
    pub logit: NodeId,
}

pub fn logit_node(g: &mut Graph, params: &[NodeId], x: &[f64; 4]) -> Result<LogitNodes> {
    let phi_easy = phi_node(g, params, &mask_easy(x))?;
    let phi_hard = phi_node(g, params, &mask_hard(x))?;
    let phi = g.concat(&[phi_easy, phi_hard]);
    let weighted = g.mul(params[V_INDEX], phi)?;
    let logit = g.sum(weighted);
    Ok(LogitNodes {
        phi_easy,
        phi_hard,
        logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_gradient;
    use crate::toydata::{generate_probe_set, ToySpec};

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelState::init(5);
        assert_eq!(a, ModelState::init(5));
        assert_ne!(a, ModelState::init(6));
        assert_eq!(a.v_easy, a.v_hard);
        assert!(a.v_easy.abs() <= 1.0 / 2f64.sqrt());
        for (name, t) in a.theta.segments() {
            if name.ends_with("weight") {
                let bound = 1.0 / (t.shape()[1] as f64).sqrt();
                assert!(t.data().iter().all(|w| w.abs() <= bound));
            } else if name.ends_with("gain") {
                assert!(t.data().iter().all(|w| *w == 1.0));
            } else {
                assert!(t.data().iter().all(|w| *w == 0.0));
            }
        }
        assert_eq!(
            a.num_params(),
            400 + 100 + 200 + 10_000 + 100 + 200 + 100 + 1 + 2
        );
    }

    #[test]
    fn logit_examples() {
        let mut m = ModelState::init(1);
        let x = [0.3, 0.3, -0.2, 0.1];
        m.v_easy = 0.0;
        m.v_hard = 0.0;
        assert_eq!(m.logit(&x), 0.0);
        m.v_easy = 1.0;
        assert_eq!(m.logit(&x), m.features(&x).phi_easy);
        m.v_easy = 2.0;
        m.v_hard = 3.0;
        let f = FeaturePair {
            phi_easy: 0.5,
            phi_hard: -1.0,
        };
        assert_eq!(m.logit_from(&f), -2.0);
    }

    #[test]
    fn masking_isolates_features() {
        let m = ModelState::init(2);
        let zero_hard = m.features(&[0.4, 0.4, 0.0, 0.0]).phi_hard;
        assert_eq!(m.features(&[-1.0, -1.0, 0.0, 0.0]).phi_hard, zero_hard);
        assert_eq!(zero_hard, m.phi(&[0.0; 4]));
        let a = m.features(&[0.1, 0.1, 0.7, -0.3]);
        let b = m.features(&[1.9, -4.0, 0.7, -0.3]);
        assert_eq!(a.phi_hard.to_bits(), b.phi_hard.to_bits());
        assert_eq!(m.features(&[0.1, 0.1, 0.7, -0.3]), a);
    }

    #[test]
    fn cross_feature_derivatives_vanish() {
        let m = ModelState::init(3);
        let x = [0.6, 0.6, -0.4, 0.9];
        let h = 1e-4;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let (fp, fm) = (m.features(&xp), m.features(&xm));
            if i < 2 {
                assert!(((fp.phi_hard - fm.phi_hard) / (2.0 * h)).abs() < 1e-12);
            } else {
                assert!(((fp.phi_easy - fm.phi_easy) / (2.0 * h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_is_linear_in_v() {
        let mut m = ModelState::init(4);
        let x = [0.2, 0.2, 0.1, -0.3];
        let f = m.features(&x);
        m.v_easy = 1.5;
        m.v_hard = -0.5;
        let a = m.logit(&x);
        assert_eq!(a, 1.5 * f.phi_easy + -0.5 * f.phi_hard);
    }

    #[test]
    fn shared_theta_moves_both_features() {
        let m = ModelState::init(4);
        let x = [0.5, 0.5, 0.2, 0.1];
        let before = m.features(&x);
        let mut m2 = m.clone();
        let bias = m2.theta.get_mut("l3.bias").unwrap();
        bias.data_mut()[0] += 0.25;
        let after = m2.features(&x);
        assert!((after.phi_easy - before.phi_easy - 0.25).abs() < 1e-12);
        assert!((after.phi_hard - before.phi_hard - 0.25).abs() < 1e-12);
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let m = ModelState::init(9);
        let x = [0.7, 0.7, -0.1, 0.35];
        let mut g = Graph::new();
        let ids = g.bind_params(&m.to_params()).unwrap();
        let nodes = logit_node(&mut g, &ids, &x).unwrap();
        let f = m.features(&x);
        assert_eq!(g.scalar(nodes.phi_easy), f.phi_easy);
        assert_eq!(g.scalar(nodes.phi_hard), f.phi_hard);
        assert!((g.scalar(nodes.logit) - m.logit(&x)).abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let x = [0.9, 0.7, 0.3, -0.2];
        let clear = |m: &ModelState| {
            [mask_easy(&x), mask_hard(&x)]
                .iter()
                .all(|xm| rectifier_margin(&m.theta, xm) > 1e-3)
        };
        let m = (10..100)
            .map(ModelState::init)
            .find(clear)
            .expect("some init keeps every unit off the kink");
        let mut g = Graph::new();
        let ids = g.bind_params(&m.to_params()).unwrap();
        let nodes = logit_node(&mut g, &ids, &x).unwrap();
        let analytic = g.backward(nodes.logit).unwrap();
        let numeric = finite_diff_gradient(
            |p| Ok(ModelState::from_params(p)?.logit(&x)),
            &m.to_params(),
            1e-5,
        )
        .unwrap();
        let diff = analytic.sub(&numeric).unwrap().global_norm();
        assert!(diff / numeric.global_norm() < 1e-6);
    }

    #[test]
    fn probe_error_properties() {
        let spec = ToySpec::default();
        let probe = generate_probe_set(&spec, 400).unwrap();
        let mut m = ModelState::init(11);
        let e = m.probe_error(&probe, Feature::Easy).unwrap();
        assert!((0.0..=1.0).contains(&e));
        // Negating both the head and the feature leaves the error unchanged.
        let w = m.theta.get_mut("l3.weight").unwrap();
        for v in w.data_mut() {
            *v = -*v;
        }
        let b = m.theta.get_mut("l3.bias").unwrap();
        b.data_mut()[0] = -b.data()[0];
        m.v_easy = -m.v_easy;
        let flipped = m.probe_error(&probe, Feature::Easy).unwrap();
        assert_eq!(e, flipped);

        let empty = ToyDataset {
            samples: vec![],
            ..probe.clone()
        };
        assert!(m.probe_error(&empty, Feature::Hard).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let m = ModelState::init(12);
        let text = m.checkpoint_text(12);
        let (back, seed) = ModelState::parse_checkpoint(&text).unwrap();
        assert_eq!(seed, 12);
        assert_eq!(back, m);
        let tampered = text.replacen(&architecture_hash(), &"0".repeat(64), 1);
        assert!(matches!(
            ModelState::parse_checkpoint(&tampered),
            Err(Error::Checkpoint(_))
        ));
    }
}
