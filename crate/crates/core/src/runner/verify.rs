//! Self-check suite: reductions, gradient exactness, the decomposition
//! identity, closed-form feature-gradient norms and the Taylor ratio.
//! Each check takes an instance count so callers can trade time for
//! coverage.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::decomp::{decompose, decompose_phantom, reconstruct, Weights};
use crate::analysis::lorenz::lorenz;
use crate::analysis::theory::{
    numeric_feature_grad_norm, taylor_ratio_check, taylor_rows, theory_feature_grad_norm,
    Activation, TheoryKind, TheoryNet,
};
use crate::diffcore::{finite_diff_gradient, ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::model::{mask_easy, mask_hard, phi_forward, rectifier_margin, ModelState, V_INDEX};
use crate::optim::{
    batch_loss, loss_and_grad, phantom_from_grad, LossKind, PhantomMode, TrainConfig, TrainMode,
    Trainer,
};
use crate::rng;
use crate::toydata::{generate, ToySample, ToySpec};

/// Finite-difference instances must keep every rectifier input at least
/// this far from zero, so that the difference quotient never straddles a
/// kink.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;
const TAYLOR_RHO: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest error seen over all instances.
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl Check {
    fn new(name: impl Into<String>, errors: &[f64], tolerance: f64) -> Self {
        let worst = errors
            .iter()
            .copied()
            .fold(0.0, |m: f64, e| if e.is_nan() || e > m { e } else { m });
        Self {
            name: name.into(),
            passed: !errors.is_empty() && errors.iter().all(|e| *e <= tolerance),
            worst,
            tolerance,
            instances: errors.len(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.0e}, {} instances)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn small_data(seed: u64, n: usize) -> Result<Vec<ToySample>> {
    Ok(generate(&ToySpec {
        n,
        seed,
        ..ToySpec::default()
    })?
    .samples)
}

/// SAM and LSAM at ρ = 0 against SGD: largest per-coordinate parameter gap
/// over `steps` steps, one instance per seed.
pub fn check_reduction(seeds: &[u64], steps: usize) -> Result<Check> {
    let mut errors = Vec::new();
    for &seed in seeds {
        let data = generate(&ToySpec {
            seed,
            ..ToySpec::default()
        })?;
        let cfg = |mode| TrainConfig {
            mode,
            rho: 0.0,
            seed,
            ..TrainConfig::default()
        };
        let mut sgd = Trainer::new(cfg(TrainMode::Sgd), &data)?;
        let mut sam = Trainer::new(cfg(TrainMode::Sam), &data)?;
        let mut lsam = Trainer::new(cfg(TrainMode::Lsam), &data)?;
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            sgd.step()?;
            sam.step()?;
            lsam.step()?;
            let base = sgd.state().to_params();
            worst = worst
                .max(sam.state().to_params().max_abs_diff(&base)?)
                .max(lsam.state().to_params().max_abs_diff(&base)?);
        }
        errors.push(worst);
    }
    Ok(Check::new("rho=0 reduces to SGD", &errors, 1e-12))
}

fn clear_of_kinks(m: &ModelState, batch: &[ToySample]) -> bool {
    batch.iter().all(|s| {
        rectifier_margin(&m.theta, &mask_easy(&s.x)) > KINK_MARGIN
            && rectifier_margin(&m.theta, &mask_hard(&s.x)) > KINK_MARGIN
    })
}

/// Draws a random model (fresh initialization with random head weights)
/// and a random batch, retrying until no rectifier input lies within
/// [`KINK_MARGIN`] of zero.
pub fn random_instance(
    seed: u64,
    index: u64,
    batch_size: usize,
) -> Result<(ModelState, Vec<ToySample>)> {
    random_instance_where(seed, index, batch_size, |_, _| true)
}

/// [`random_instance`] with an extra acceptance test.
pub fn random_instance_where<F>(
    seed: u64,
    index: u64,
    batch_size: usize,
    accept: F,
) -> Result<(ModelState, Vec<ToySample>)>
where
    F: Fn(&ModelState, &[ToySample]) -> bool,
{
    let mut r = rng::stream(seed, "verify/instance", index);
    let data = small_data(r.gen(), 50)?;
    for _ in 0..MAX_DRAWS {
        let mut m = ModelState::init(r.gen());
        m.v_easy = r.gen_range(-1.5..1.5);
        m.v_hard = r.gen_range(-1.5..1.5);
        let batch: Vec<ToySample> = data.choose_multiple(&mut r, batch_size).copied().collect();
        if clear_of_kinks(&m, &batch) && accept(&m, &batch) {
            return Ok((m, batch));
        }
    }
    Err(Error::contract("no kink-free instance found"))
}

/// Reverse-mode gradient of the mean logistic batch loss against central
/// differences with step 1e−5; error is `‖g − ĝ‖ / ‖ĝ‖`.
pub fn check_gradients(instances: usize, seed: u64) -> Result<Check> {
    let mut errors = Vec::new();
    for i in 0..instances as u64 {
        let (m, batch) = random_instance(seed, i, 5)?;
        let analytic = loss_and_grad(&m, &batch, LossKind::Logistic)?.grad;
        let numeric = finite_diff_gradient(
            |p| batch_loss(&ModelState::from_params(p)?, &batch, LossKind::Logistic),
            &m.to_params(),
            1e-5,
        )?;
        errors.push(rel_diff_norm(
            analytic.sub(&numeric)?.global_norm(),
            numeric.global_norm(),
        ));
    }
    Ok(Check::new(
        "backward matches finite differences",
        &errors,
        1e-6,
    ))
}

/// The per-example decomposition rebuilt into the θ gradient, for the real
/// and the phantom weights, at `checkpoints` points of an LSAM run and a
/// SAM run.
pub fn check_decomposition(checkpoints: usize, seed: u64) -> Result<Check> {
    let data = generate(&ToySpec {
        seed,
        ..ToySpec::default()
    })?;
    let mut errors = Vec::new();
    for (mode, pmode) in [
        (TrainMode::Lsam, PhantomMode::LastLayer),
        (TrainMode::Sam, PhantomMode::Full),
    ] {
        let cfg = TrainConfig {
            mode,
            rho: 0.2,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg.clone(), &data)?;
        let mut r = rng::stream(seed, "verify/decomp", mode as u64);
        for _ in 0..checkpoints {
            for _ in 0..r.gen_range(1..40) {
                t.step()?;
            }
            let m = t.state();
            let batch: Vec<ToySample> = data
                .samples
                .choose_multiple(&mut r, cfg.batch_size)
                .copied()
                .collect();
            let auto = loss_and_grad(m, &batch, LossKind::Logistic)?.grad;
            let real = reconstruct(&decompose(m, &batch)?, Weights::Real)?;
            let ps = phantom_from_grad(m, &auto, cfg.rho, pmode)?;
            let auto_t = loss_and_grad(&ps.perturbed, &batch, LossKind::Logistic)?.grad;
            let phantom = reconstruct(&decompose_phantom(&ps, &batch)?, Weights::Phantom)?;
            let mut worst: f64 = 0.0;
            for i in 0..V_INDEX {
                for (pair, full) in [(&real, &auto), (&phantom, &auto_t)] {
                    for (a, b) in pair.segment(i).data().iter().zip(full.segment(i).data()) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            errors.push(worst);
        }
    }
    Ok(Check::new(
        "decomposition rebuilds the gradient",
        &errors,
        1e-12,
    ))
}

/// Relative difference that counts two exact zeros as agreement; a
/// rectifier network with a dead layer has an identically zero gradient.
fn rel_diff(analytic: f64, numeric: f64) -> f64 {
    rel_diff_norm((analytic - numeric).abs(), numeric.abs())
}

fn rel_diff_norm(diff: f64, reference: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else {
        diff / reference
    }
}

fn random_net<R: Rng>(r: &mut R, dims: &[usize], act: Activation) -> Result<TheoryNet> {
    let layers = dims
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![w[1], w[0]], data)
        })
        .collect::<Result<Vec<_>>>()?;
    TheoryNet::new(layers, act)
}

/// Smallest absolute hidden pre-activation of a rectifier network.
fn hidden_margin(net: &TheoryNet, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    let depth = net.layers.len();
    for (l, w) in net.layers.iter().enumerate() {
        let cols = w.shape()[1];
        let z: Vec<f64> = w
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(&a).map(|(p, q)| p * q).sum())
            .collect();
        if l + 1 < depth {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

fn theory_case<R: Rng>(r: &mut R, kind: TheoryKind, depth: usize) -> Result<(TheoryNet, Vec<f64>)> {
    let act = match kind {
        TheoryKind::ReluMlp => Activation::Relu,
        _ => Activation::Identity,
    };
    for _ in 0..MAX_DRAWS {
        let dims: Vec<usize> = (0..depth)
            .map(|_| r.gen_range(2..7))
            .chain(std::iter::once(1))
            .collect();
        let net = random_net(r, &dims, act)?;
        let x: Vec<f64> = (0..dims[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
        if act == Activation::Identity || hidden_margin(&net, &x) > KINK_MARGIN {
            return Ok((net, x));
        }
    }
    Err(Error::contract("no kink-free network found"))
}

/// Closed-form `‖∇_θ f‖²` against central differences (step 1e−4) for each
/// network family; returns one check per family.
pub fn check_theory(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let families: [(&str, TheoryKind, &[usize], f64); 4] = [
        ("closed form: last layer", TheoryKind::Lsam, &[1], 1e-10),
        (
            "closed form: two-layer linear",
            TheoryKind::TwoLayerLinear,
            &[2],
            1e-10,
        ),
        (
            "closed form: deep linear",
            TheoryKind::DeepLinear,
            &[3, 4, 5],
            1e-10,
        ),
        (
            "closed form: rectifier MLP",
            TheoryKind::ReluMlp,
            &[3],
            1e-8,
        ),
    ];
    let mut checks = Vec::new();
    for (fi, (name, kind, depths, tol)) in families.into_iter().enumerate() {
        let mut r = rng::stream(seed, "verify/theory", fi as u64);
        let mut errors = Vec::new();
        for &depth in depths {
            for _ in 0..instances {
                let (net, x) = theory_case(&mut r, kind, depth)?;
                let analytic = theory_feature_grad_norm(&net, &x, kind)?;
                let numeric = numeric_feature_grad_norm(&net, &x, 1e-4)?;
                errors.push(rel_diff(analytic, numeric));
            }
        }
        checks.push(Check::new(name, &errors, tol));
    }
    Ok(checks)
}

/// Rectifier activity of both masked inputs of every sample.
fn activation_pattern(m: &ModelState, batch: &[ToySample]) -> Vec<[Vec<bool>; 2]> {
    batch
        .iter()
        .flat_map(|s| [mask_easy(&s.x), mask_hard(&s.x)])
        .map(|x| {
            let mut masks = [Vec::new(), Vec::new()];
            phi_forward(&m.theta, &x, Some(&mut masks));
            masks
        })
        .collect()
}

/// Taylor ratio under the exponential loss: relative error at ρ = 1e−3 on
/// the toy model, and exactness for a linear logit at ρ up to 1. Toy
/// instances whose phantom lands in a different rectifier pattern are
/// redrawn: the expansion only holds inside one linear region.
pub fn check_taylor(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let mut toy = Vec::new();
    let mut linear = Vec::new();
    let mut r = rng::stream(seed, "verify/taylor", 0);
    for i in 0..instances as u64 {
        let same_region = |m: &ModelState, b: &[ToySample]| {
            loss_and_grad(m, b, LossKind::Exponential)
                .and_then(|e| phantom_from_grad(m, &e.grad, TAYLOR_RHO, PhantomMode::Full))
                .is_ok_and(|ps| activation_pattern(m, b) == activation_pattern(&ps.perturbed, b))
        };
        let (m, batch) = random_instance_where(seed, 1_000 + i, 1, same_region)?;
        let rows = taylor_ratio_check(&m, &batch[0].x, batch[0].y, &[TAYLOR_RHO])?;
        toy.push(rows[0].rel_err());

        let d = r.gen_range(2..9);
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w = ParamVector::new().with(
            "w",
            Tensor::vector((0..d).map(|_| r.gen_range(-1.0..1.0)).collect()),
        );
        let grad = ParamVector::new().with("w", Tensor::vector(x.clone()));
        let y = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let f = |p: &ParamVector| Ok(p.segment(0).data().iter().zip(&x).map(|(a, b)| a * b).sum());
        let rho = r.gen_range(1e-3..=1.0);
        let rows = taylor_rows(f, &w, &grad, y, &[rho, 1.0])?;
        linear.extend(rows.iter().map(|row| row.rel_err()));
    }
    Ok(vec![
        Check::new("Taylor ratio, toy model, rho=1e-3", &toy, 0.01),
        Check::new("Taylor ratio, linear logit", &linear, 1e-12),
    ])
}

/// Checkpoint round trip and the hash guard, plus a hand-checked Gini.
pub fn check_plumbing() -> Result<Check> {
    let m = ModelState::init(7);
    let text = m.checkpoint_text(7);
    let (back, seed) = ModelState::parse_checkpoint(&text)?;
    let round_trip = back == m && seed == 7;
    let guarded = ModelState::parse_checkpoint(&text.replacen(
        &crate::model::architecture_hash(),
        &"0".repeat(64),
        1,
    ))
    .is_err();
    let gini = lorenz(&[3.0, 1.0])?.gini;
    let err = if round_trip && guarded {
        (gini - 0.25).abs()
    } else {
        f64::INFINITY
    };
    Ok(Check::new(
        "checkpoint round trip and Gini example",
        &[err],
        1e-15,
    ))
}

/// The quick suite behind the `verify` command.
pub fn verify(instances: usize, seed: u64) -> Result<VerifyReport> {
    let mut checks = vec![
        check_reduction(&(0..instances as u64).collect::<Vec<_>>(), 100)?,
        check_gradients(instances, seed)?,
        check_decomposition(instances, seed)?,
    ];
    checks.extend(check_theory(instances, seed)?);
    checks.extend(check_taylor(instances, seed)?);
    checks.push(check_plumbing()?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = verify(2, 0).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 10);
    }

    #[test]
    fn random_instances_avoid_kinks() {
        let (m, batch) = random_instance(4, 0, 5).unwrap();
        assert!(clear_of_kinks(&m, &batch));
    }

    #[test]
    fn empty_checks_fail() {
        assert!(!Check::new("x", &[], 1.0).passed);
        assert!(!Check::new("x", &[2.0], 1.0).passed);
        assert!(Check::new("x", &[0.5], 1.0).passed);
        let nan = Check::new("x", &[0.5, f64::NAN], 1.0);
        assert!(!nan.passed && nan.worst.is_nan());
        assert_eq!(rel_diff(0.0, 0.0), 0.0);
    }
}
