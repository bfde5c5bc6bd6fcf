//! Training rules: SGD, SAM, last-layer SAM, and the three fixed-ratio
//! intervention gradients, plus the minibatch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::lorenz;
use crate::diffcore::{sigmoid, Gradient, Graph, ParamVector};
use crate::error::{Error, Result};
use crate::model::{self, mask_easy, mask_hard, phi_node, FeaturePair, ModelState, V_INDEX};
use crate::rng;
use crate::toydata::{ToyDataset, ToySample};

/// Ascent gradients below this norm leave the phantom at the real parameters.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Logistic,
    Exponential,
}

impl LossKind {
    pub fn value(self, f: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => crate::diffcore::softplus(-y * f),
            LossKind::Exponential => (-y * f).exp(),
        }
    }

    /// Per-example importance weight `−∂ℓ/∂(y f)`: `σ(−y f)` for the
    /// logistic loss and `exp(−y f)` for the exponential loss.
    pub fn importance(self, f: f64, y: f64) -> f64 {
        match self {
            LossKind::Logistic => sigmoid(-y * f),
            LossKind::Exponential => (-y * f).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Sgd,
    Sam,
    Lsam,
    InterveneIw,
    InterveneLr,
    InterveneCombined,
}

impl TrainMode {
    pub fn intervention(self) -> Option<Intervention> {
        match self {
            TrainMode::InterveneIw => Some(Intervention::ImportanceWeighting),
            TrainMode::InterveneLr => Some(Intervention::LearningRate),
            TrainMode::InterveneCombined => Some(Intervention::Combined),
            _ => None,
        }
    }

    pub fn phantom_mode(self) -> Option<PhantomMode> {
        match self {
            TrainMode::Sam => Some(PhantomMode::Full),
            TrainMode::Lsam => Some(PhantomMode::LastLayer),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Sgd => "sgd",
            TrainMode::Sam => "sam",
            TrainMode::Lsam => "lsam",
            TrainMode::InterveneIw => "intervene-iw",
            TrainMode::InterveneLr => "intervene-lr",
            TrainMode::InterveneCombined => "intervene-combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomMode {
    Full,
    LastLayer,
}

/// Which slot of the θ-gradient receives the fixed weights `v*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intervention {
    /// `v*` inside the sigmoid only.
    ImportanceWeighting,
    /// `v*` scaling the feature gradients only.
    LearningRate,
    /// `v*` in both places.
    Combined,
}

impl Intervention {
    pub fn as_str(self) -> &'static str {
        match self {
            Intervention::ImportanceWeighting => "iw",
            Intervention::LearningRate => "lr",
            Intervention::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub rho: f64,
    /// `(v*_easy, v*_hard)` for the intervention modes.
    pub v_star: Option<[f64; 2]>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Keep `v` at its initial value in intervention modes.
    pub freeze_v: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sgd,
            rho: 0.0,
            v_star: None,
            lr: 0.01,
            batch_size: 5,
            steps: 15_000,
            seed: 0,
            loss: LossKind::Logistic,
            freeze_v: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config(format!(
                "rho must be nonnegative, got {}",
                self.rho
            )));
        }
        if self.mode.intervention().is_some() {
            if self.v_star.is_none() {
                return Err(Error::Config(format!(
                    "mode {} needs v_star",
                    self.mode.as_str()
                )));
            }
            if self.loss != LossKind::Logistic {
                return Err(Error::Config(
                    "intervention gradients are defined for the logistic loss".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomState {
    pub base: ModelState,
    pub perturbed: ModelState,
    pub rho: f64,
    pub mode: PhantomMode,
    /// The ascent gradient vanished, so no perturbation was applied.
    pub degenerate: bool,
}

impl PhantomState {
    /// Norm of `perturbed − base` over the perturbed segment.
    pub fn displacement(&self) -> f64 {
        self.perturbed
            .to_params()
            .sub(&self.base.to_params())
            .expect("same layout")
            .global_norm()
    }
}

pub fn batch_loss(m: &ModelState, batch: &[ToySample], loss: LossKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(batch
        .iter()
        .map(|s| loss.value(m.logit(&s.x), s.y))
        .sum::<f64>()
        / batch.len() as f64)
}

/// Forward and reverse pass of the batch-mean loss.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Gradient,
    pub logits: Vec<f64>,
    pub features: Vec<FeaturePair>,
}

pub fn loss_and_grad(m: &ModelState, batch: &[ToySample], loss: LossKind) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut g = Graph::new();
    let ids = g.bind_params(&m.to_params())?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    let mut features = Vec::with_capacity(batch.len());
    for s in batch {
        let nodes = model::logit_node(&mut g, &ids, &s.x)?;
        logits.push(g.scalar(nodes.logit));
        features.push(FeaturePair {
            phi_easy: g.scalar(nodes.phi_easy),
            phi_hard: g.scalar(nodes.phi_hard),
        });
        losses.push(match loss {
            LossKind::Logistic => g.logistic_loss(nodes.logit, s.y)?,
            LossKind::Exponential => g.exponential_loss(nodes.logit, s.y)?,
        });
    }
    let out = g.mean(&losses)?;
    Ok(LossEval {
        loss: g.scalar(out),
        grad: g.backward(out)?,
        logits,
        features,
    })
}

fn apply_update(m: &ModelState, grad: &Gradient, lr: f64) -> Result<ModelState> {
    let mut p = m.to_params();
    p.axpy(-lr, grad)?;
    ModelState::from_params(&p)
}

pub fn sgd_step(m: &ModelState, batch: &[ToySample], cfg: &TrainConfig) -> Result<ModelState> {
    let eval = loss_and_grad(m, batch, cfg.loss)?;
    apply_update(m, &eval.grad, cfg.lr)
}

/// Builds the phantom from an already computed ascent gradient over all
/// parameters. For [`PhantomMode::LastLayer`] only the `v` block of the
/// gradient is used and normalized.
pub fn phantom_from_grad(
    m: &ModelState,
    grad: &Gradient,
    rho: f64,
    mode: PhantomMode,
) -> Result<PhantomState> {
    if !(rho >= 0.0) {
        return Err(Error::contract(format!(
            "rho must be nonnegative, got {rho}"
        )));
    }
    let mut ascent = match mode {
        PhantomMode::Full => grad.clone(),
        PhantomMode::LastLayer => {
            let mut only_v = grad.zeros_like();
            *only_v.segment_mut(V_INDEX) = grad.segment(V_INDEX).clone();
            only_v
        }
    };
    let norm = ascent.global_norm();
    let degenerate = rho > 0.0 && norm < DEGENERATE_GRAD_NORM;
    let perturbed = if rho == 0.0 || degenerate {
        m.clone()
    } else {
        match mode {
            PhantomMode::Full => {
                ascent.scale(rho / norm);
                let mut p = m.to_params();
                p.axpy(1.0, &ascent)?;
                ModelState::from_params(&p)?
            }
            PhantomMode::LastLayer => {
                let gv = grad.segment(V_INDEX).data();
                ModelState {
                    theta: m.theta.clone(),
                    v_easy: m.v_easy + rho * gv[0] / norm,
                    v_hard: m.v_hard + rho * gv[1] / norm,
                }
            }
        }
    };
    Ok(PhantomState {
        base: m.clone(),
        perturbed,
        rho,
        mode,
        degenerate,
    })
}

/// Full-parameter ascent `w + ρ ∇L̂/‖∇L̂‖`.
pub fn sam_phantom(
    m: &ModelState,
    batch: &[ToySample],
    rho: f64,
    loss: LossKind,
) -> Result<PhantomState> {
    let eval = loss_and_grad(m, batch, loss)?;
    phantom_from_grad(m, &eval.grad, rho, PhantomMode::Full)
}

/// Last-layer ascent: `ṽ = v + ρ ∇_v L̂/‖∇_v L̂‖`, `θ̃ = θ`.
pub fn lsam_phantom(
    m: &ModelState,
    batch: &[ToySample],
    rho: f64,
    loss: LossKind,
) -> Result<PhantomState> {
    let eval = loss_and_grad(m, batch, loss)?;
    phantom_from_grad(m, &eval.grad, rho, PhantomMode::LastLayer)
}

/// Descent at `w` with the gradient evaluated at the phantom.
pub fn sam_step(m: &ModelState, batch: &[ToySample], cfg: &TrainConfig) -> Result<ModelState> {
    let mode = cfg
        .mode
        .phantom_mode()
        .ok_or_else(|| Error::contract("sam_step needs mode sam or lsam"))?;
    let eval = loss_and_grad(m, batch, cfg.loss)?;
    let ps = phantom_from_grad(m, &eval.grad, cfg.rho, mode)?;
    let descent = if ps.perturbed == ps.base {
        eval.grad
    } else {
        loss_and_grad(&ps.perturbed, batch, cfg.loss)?.grad
    };
    apply_update(m, &descent, cfg.lr)
}

/// Per-example representation gradients `∇_θ Φ_easy` and `∇_θ Φ_hard`.
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub features: FeaturePair,
    pub grad_easy: Gradient,
    pub grad_hard: Gradient,
}

pub fn feature_grads(theta: &ParamVector, x: &[f64; 4]) -> Result<FeatureGrads> {
    let mut g = Graph::new();
    let ids = g.bind_params(theta)?;
    let pe = phi_node(&mut g, &ids, &mask_easy(x))?;
    let ph = phi_node(&mut g, &ids, &mask_hard(x))?;
    Ok(FeatureGrads {
        features: FeaturePair {
            phi_easy: g.scalar(pe),
            phi_hard: g.scalar(ph),
        },
        grad_easy: g.backward(pe)?,
        grad_hard: g.backward(ph)?,
    })
}

fn oriented(v_star: [f64; 2], v: [f64; 2]) -> [f64; 2] {
    let s = |x: f64| if x < 0.0 { -1.0 } else { 1.0 };
    [v_star[0].abs() * s(v[0]), v_star[1].abs() * s(v[1])]
}

/// θ-gradient with `v*` substituted into the importance weight, the feature
/// gradient sum, or both:
///
/// `(1/B) Σ σ(−y (A·Φ)) (−y) (B_easy ∇Φ_easy + B_hard ∇Φ_hard)`
///
/// `v*` supplies magnitudes; each component takes the sign of the live `v`
/// so the fixed ratio acts along the orientation the network has learned.
pub fn intervention_gradient(
    m: &ModelState,
    batch: &[ToySample],
    v_star: [f64; 2],
    which: Intervention,
) -> Result<Gradient> {
    Ok(intervention_eval(m, batch, v_star, which)?.theta_grad)
}

pub(crate) struct InterventionEval {
    pub theta_grad: Gradient,
    /// Standard `∇_v L̂` at the live parameters.
    pub v_grad: [f64; 2],
    pub loss: f64,
    pub logits: Vec<f64>,
}

pub(crate) fn intervention_eval(
    m: &ModelState,
    batch: &[ToySample],
    v_star: [f64; 2],
    which: Intervention,
) -> Result<InterventionEval> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let v = m.v();
    let fixed = oriented(v_star, v);
    let (a, b) = match which {
        Intervention::ImportanceWeighting => (fixed, v),
        Intervention::LearningRate => (v, fixed),
        Intervention::Combined => (fixed, fixed),
    };
    let inv_b = 1.0 / batch.len() as f64;
    let mut theta_grad = m.theta.zeros_like();
    let mut v_grad = [0.0; 2];
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(batch.len());
    for s in batch {
        let fg = feature_grads(&m.theta, &s.x)?;
        let (pe, ph) = (fg.features.phi_easy, fg.features.phi_hard);
        let weight = sigmoid(-s.y * (a[0] * pe + a[1] * ph));
        let coeff = -s.y * weight * inv_b;
        theta_grad.axpy(coeff * b[0], &fg.grad_easy)?;
        theta_grad.axpy(coeff * b[1], &fg.grad_hard)?;

        let f = v[0] * pe + v[1] * ph;
        let lam = sigmoid(-s.y * f);
        v_grad[0] += -s.y * lam * pe * inv_b;
        v_grad[1] += -s.y * lam * ph * inv_b;
        loss += LossKind::Logistic.value(f, s.y) * inv_b;
        logits.push(f);
    }
    Ok(InterventionEval {
        theta_grad,
        v_grad,
        loss,
        logits,
    })
}

/// Diagnostics for one optimizer step, measured at the parameters the step
/// started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub batch_error: f64,
    pub v_easy: f64,
    pub v_hard: f64,
    pub v_tilde_easy: f64,
    pub v_tilde_hard: f64,
    /// `‖∇L̂(w)‖` over all parameters.
    pub grad_norm: f64,
    /// Norm of the gradient actually descended along.
    pub descent_grad_norm: f64,
    pub degenerate_ascent: bool,
    pub gini_real: Option<f64>,
    pub gini_phantom: Option<f64>,
}

fn gini_of(weights: &[f64]) -> Option<f64> {
    lorenz::lorenz(weights).ok().map(|c| c.gini)
}

/// Minibatch driver. Each epoch reshuffles the data with the stream keyed
/// `(seed, "shuffle", epoch)`.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a [ToySample],
    state: ModelState,
    step: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a ToyDataset) -> Result<Self> {
        let init = ModelState::init(cfg.seed);
        Self::with_state(cfg, data, init)
    }

    pub fn with_state(cfg: TrainConfig, data: &'a ToyDataset, state: ModelState) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let mut t = Self {
            cfg,
            data: &data.samples,
            state,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        let mut r = rng::stream(self.cfg.seed, "shuffle", self.epoch);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut r);
        self.cursor = 0;
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn next_batch(&mut self) -> Vec<ToySample> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.data[i])
            .collect();
        self.cursor = end;
        batch
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        let cfg = &self.cfg;
        let m = &self.state;
        let batch_error = |logits: &[f64]| {
            logits
                .iter()
                .zip(&batch)
                .filter(|(f, s)| !(**f * s.y > 0.0))
                .count() as f64
                / batch.len() as f64
        };

        let (next, record) = if let Some(which) = cfg.mode.intervention() {
            let v_star = cfg.v_star.expect("validated");
            let ev = intervention_eval(m, &batch, v_star, which)?;
            let mut next = m.clone();
            next.theta.axpy(-cfg.lr, &ev.theta_grad)?;
            if !cfg.freeze_v {
                next.v_easy -= cfg.lr * ev.v_grad[0];
                next.v_hard -= cfg.lr * ev.v_grad[1];
            }
            let norm =
                (ev.theta_grad.sum_squares() + ev.v_grad[0].powi(2) + ev.v_grad[1].powi(2)).sqrt();
            let lam: Vec<f64> = ev
                .logits
                .iter()
                .zip(&batch)
                .map(|(f, s)| sigmoid(-s.y * f))
                .collect();
            let rec = StepRecord {
                step: self.step,
                loss: ev.loss,
                batch_error: batch_error(&ev.logits),
                v_easy: m.v_easy,
                v_hard: m.v_hard,
                v_tilde_easy: m.v_easy,
                v_tilde_hard: m.v_hard,
                grad_norm: norm,
                descent_grad_norm: norm,
                degenerate_ascent: false,
                gini_real: gini_of(&lam),
                gini_phantom: gini_of(&lam),
            };
            (next, rec)
        } else {
            let eval = loss_and_grad(m, &batch, cfg.loss)?;
            let lam: Vec<f64> = eval
                .logits
                .iter()
                .zip(&batch)
                .map(|(f, s)| cfg.loss.importance(*f, s.y))
                .collect();
            let grad_norm = eval.grad.global_norm();
            let (descent, phantom, degenerate, lam_phantom) = match cfg.mode.phantom_mode() {
                Some(mode) => {
                    let ps = phantom_from_grad(m, &eval.grad, cfg.rho, mode)?;
                    if ps.perturbed == ps.base {
                        (eval.grad, ps.perturbed, ps.degenerate, lam.clone())
                    } else {
                        let pe = loss_and_grad(&ps.perturbed, &batch, cfg.loss)?;
                        let lp = pe
                            .logits
                            .iter()
                            .zip(&batch)
                            .map(|(f, s)| cfg.loss.importance(*f, s.y))
                            .collect();
                        (pe.grad, ps.perturbed, ps.degenerate, lp)
                    }
                }
                None => (eval.grad, m.clone(), false, lam.clone()),
            };
            let rec = StepRecord {
                step: self.step,
                loss: eval.loss,
                batch_error: batch_error(&eval.logits),
                v_easy: m.v_easy,
                v_hard: m.v_hard,
                v_tilde_easy: phantom.v_easy,
                v_tilde_hard: phantom.v_hard,
                grad_norm,
                descent_grad_norm: descent.global_norm(),
                degenerate_ascent: degenerate,
                gini_real: gini_of(&lam),
                gini_phantom: gini_of(&lam_phantom),
            };
            (apply_update(m, &descent, cfg.lr)?, rec)
        };
        self.state = next;
        self.step += 1;
        Ok(record)
    }

    /// 0-1 error of the current model over the whole training set.
    pub fn train_error(&self) -> f64 {
        self.state.train_error(self.data)
    }
}

pub fn train(cfg: &TrainConfig, data: &ToyDataset) -> Result<(ModelState, Vec<StepRecord>)> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        records.push(t.step()?);
    }
    Ok((t.into_state(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::toydata::{generate, ToySpec};

    fn small_data(seed: u64) -> ToyDataset {
        generate(&ToySpec {
            n: 40,
            seed,
            ..ToySpec::default()
        })
        .unwrap()
    }

    fn cfg(mode: TrainMode, rho: f64) -> TrainConfig {
        TrainConfig {
            mode,
            rho,
            steps: 30,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_loss_examples() {
        let d = small_data(1);
        let m = ModelState::init(1);
        let one = &d.samples[..1];
        let l1 = batch_loss(&m, one, LossKind::Logistic).unwrap();
        assert_eq!(l1, LossKind::Logistic.value(m.logit(&one[0].x), one[0].y));
        let dup = [one[0], one[0]];
        assert!((batch_loss(&m, &dup, LossKind::Logistic).unwrap() - l1).abs() < 1e-15);
        let mut zero = m.clone();
        zero.v_easy = 0.0;
        zero.v_hard = 0.0;
        let l = batch_loss(&zero, &d.samples[..2], LossKind::Logistic).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(batch_loss(&m, &[], LossKind::Logistic).is_err());
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let d = small_data(2);
        let m = ModelState::init(2);
        let eval = loss_and_grad(&m, &d.samples[..5], LossKind::Logistic).unwrap();
        let plain = batch_loss(&m, &d.samples[..5], LossKind::Logistic).unwrap();
        assert!((eval.loss - plain).abs() < 1e-14);
    }

    #[test]
    fn zero_lr_is_identity() {
        let d = small_data(3);
        let m = ModelState::init(3);
        let c = TrainConfig {
            lr: 0.0,
            ..cfg(TrainMode::Sgd, 0.0)
        };
        assert_eq!(sgd_step(&m, &d.samples[..5], &c).unwrap(), m);
        let c = TrainConfig {
            lr: 0.0,
            ..cfg(TrainMode::Sam, 0.3)
        };
        assert_eq!(sam_step(&m, &d.samples[..5], &c).unwrap(), m);
        let c = TrainConfig {
            lr: 0.0,
            ..cfg(TrainMode::Lsam, 0.3)
        };
        assert_eq!(sam_step(&m, &d.samples[..5], &c).unwrap(), m);
    }

    #[test]
    fn saturated_exponential_step_is_identity() {
        let d = small_data(4);
        let mut m = ModelState::init(4);
        let s = d.samples[0];
        // Push the margin so far that exp(−y f) underflows to zero.
        let f = m.features(&s.x);
        m.v_easy = s.y * f.phi_easy.signum() * 1e6;
        m.v_hard = s.y * f.phi_hard.signum() * 1e6;
        let c = TrainConfig {
            loss: LossKind::Exponential,
            ..cfg(TrainMode::Sgd, 0.0)
        };
        let next = sgd_step(&m, &[s], &c).unwrap();
        let diff = next.to_params().max_abs_diff(&m.to_params()).unwrap();
        assert!(diff <= 1e-15);
    }

    #[test]
    fn phantom_rho_zero_is_base() {
        let d = small_data(5);
        let m = ModelState::init(5);
        for mode in [PhantomMode::Full, PhantomMode::LastLayer] {
            let eval = loss_and_grad(&m, &d.samples[..5], LossKind::Logistic).unwrap();
            let ps = phantom_from_grad(&m, &eval.grad, 0.0, mode).unwrap();
            assert_eq!(ps.perturbed, ps.base);
        }
    }

    #[test]
    fn phantom_has_exact_radius() {
        let d = small_data(6);
        let m = ModelState::init(6);
        let ps = sam_phantom(&m, &d.samples[..5], 0.37, LossKind::Logistic).unwrap();
        assert!((ps.displacement() - 0.37).abs() < 1e-12);
        let ps = lsam_phantom(&m, &d.samples[..5], 0.37, LossKind::Logistic).unwrap();
        assert!((ps.displacement() - 0.37).abs() < 1e-12);
        assert_eq!(ps.perturbed.theta, ps.base.theta);
    }

    fn one_param_model(v: [f64; 2]) -> ModelState {
        let mut m = ModelState::init(0);
        m.v_easy = v[0];
        m.v_hard = v[1];
        m
    }

    #[test]
    fn single_parameter_ascent_direction() {
        // One coordinate with gradient −4 and ρ = 0.5 moves by −0.5.
        let m = one_param_model([0.0, 0.0]);
        let mut grad = m.to_params().zeros_like();
        grad.segment_mut(V_INDEX).data_mut()[0] = -4.0;
        let ps = phantom_from_grad(&m, &grad, 0.5, PhantomMode::Full).unwrap();
        assert_eq!(ps.perturbed.v_easy, -0.5);
        assert_eq!(ps.perturbed.theta, m.theta);
    }

    #[test]
    fn last_layer_unit_vector_arithmetic() {
        let m = one_param_model([1.0, 2.0]);
        let mut grad = m.to_params().zeros_like();
        grad.segment_mut(V_INDEX)
            .data_mut()
            .copy_from_slice(&[0.6, 0.8]);
        // θ-gradient entries must not leak into the last-layer normalization.
        grad.segment_mut(0).data_mut()[0] = 100.0;
        let ps = phantom_from_grad(&m, &grad, 0.5, PhantomMode::LastLayer).unwrap();
        assert!((ps.perturbed.v_easy - 1.3).abs() < 1e-15);
        assert!((ps.perturbed.v_hard - 2.4).abs() < 1e-15);
        assert_eq!(ps.perturbed.theta, m.theta);
    }

    #[test]
    fn degenerate_ascent_is_flagged() {
        let m = one_param_model([1.0, 1.0]);
        let grad = m.to_params().zeros_like();
        let ps = phantom_from_grad(&m, &grad, 0.2, PhantomMode::Full).unwrap();
        assert!(ps.degenerate);
        assert_eq!(ps.perturbed, m);
    }

    #[test]
    fn sam_step_matches_two_stage_hand_computation() {
        let d = small_data(7);
        let m = ModelState::init(7);
        let batch = &d.samples[..3];
        let c = cfg(TrainMode::Sam, 0.2);
        let g0 = loss_and_grad(&m, batch, LossKind::Logistic).unwrap().grad;
        let mut w_tilde = m.to_params();
        w_tilde.axpy(0.2 / g0.global_norm(), &g0).unwrap();
        let m_tilde = ModelState::from_params(&w_tilde).unwrap();
        let g1 = loss_and_grad(&m_tilde, batch, LossKind::Logistic)
            .unwrap()
            .grad;
        let mut expected = m.to_params();
        expected.axpy(-c.lr, &g1).unwrap();
        let got = sam_step(&m, batch, &c).unwrap().to_params();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn quadratic_contracts_geometrically() {
        // Descent on (p − 1)²/2 through the graph: error shrinks by (1 − η).
        let lr = 0.1;
        let mut p = ParamVector::new().with("p", Tensor::vector(vec![5.0]));
        let mut err = 4.0;
        for _ in 0..20 {
            let mut g = Graph::new();
            let ids = g.bind_params(&p).unwrap();
            let one = g.input(Tensor::vector(vec![-1.0]));
            let d = g.add(ids[0], one).unwrap();
            let sq = g.mul(d, d).unwrap();
            let s = g.sum(sq);
            let out = g.scale(s, 0.5);
            let grad = g.backward(out).unwrap();
            p.axpy(-lr, &grad).unwrap();
            let new_err = p.segment(0).item() - 1.0;
            assert!((new_err - (1.0 - lr) * err).abs() < 1e-12);
            err = new_err;
        }
    }

    #[test]
    fn rho_zero_reproduces_sgd_trajectory() {
        let d = small_data(8);
        let (sgd, _) = train(&cfg(TrainMode::Sgd, 0.0), &d).unwrap();
        for mode in [TrainMode::Sam, TrainMode::Lsam] {
            let (other, recs) = train(&cfg(mode, 0.0), &d).unwrap();
            assert_eq!(other, sgd);
            assert!(recs.iter().all(|r| !r.degenerate_ascent));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = small_data(9);
        let c = cfg(TrainMode::Lsam, 0.1);
        assert_eq!(train(&c, &d).unwrap(), train(&c, &d).unwrap());
    }

    #[test]
    fn interventions_reduce_to_standard_gradient() {
        let d = small_data(10);
        let m = ModelState::init(10);
        let batch = &d.samples[..5];
        let full = loss_and_grad(&m, batch, LossKind::Logistic).unwrap().grad;
        let mut theta_only = m.theta.zeros_like();
        for i in 0..V_INDEX {
            *theta_only.segment_mut(i) = full.segment(i).clone();
        }
        for which in [
            Intervention::ImportanceWeighting,
            Intervention::LearningRate,
            Intervention::Combined,
        ] {
            let g = intervention_gradient(&m, batch, m.v(), which).unwrap();
            assert!(g.max_abs_diff(&theta_only).unwrap() < 1e-14);
        }
    }

    #[test]
    fn importance_slot_isolation() {
        let d = small_data(11);
        let m = ModelState::init(11);
        let s = d.samples[0];
        let v_star = [1.0, 0.0];
        let g = intervention_gradient(&m, &[s], v_star, Intervention::ImportanceWeighting).unwrap();
        let fg = feature_grads(&m.theta, &s.x).unwrap();
        let sign_e = if m.v_easy < 0.0 { -1.0 } else { 1.0 };
        let w = sigmoid(-s.y * sign_e * fg.features.phi_easy);
        let mut expected = fg.grad_easy.clone();
        expected.scale(-s.y * w * m.v_easy);
        expected.axpy(-s.y * w * m.v_hard, &fg.grad_hard).unwrap();
        assert!(g.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn combined_matches_chain_rule_on_one_sample() {
        // With v* in both slots the θ-gradient is that of ℓ(v*·Φ(x), y).
        let d = small_data(12);
        let m = ModelState::init(12);
        let s = d.samples[3];
        let v_star = [1.0, 2.5];
        let g = intervention_gradient(&m, &[s], v_star, Intervention::Combined).unwrap();
        let mut fixed = m.clone();
        fixed.v_easy = oriented(v_star, m.v())[0];
        fixed.v_hard = oriented(v_star, m.v())[1];
        let full = loss_and_grad(&fixed, &[s], LossKind::Logistic)
            .unwrap()
            .grad;
        for i in 0..V_INDEX {
            let a = g.segment(i).data();
            let b = full.segment(i).data();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn intervention_needs_v_star() {
        let c = TrainConfig {
            mode: TrainMode::InterveneIw,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            v_star: Some([1.0, 1.0]),
            loss: LossKind::Exponential,
            ..c
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn frozen_v_stays_put() {
        let d = small_data(13);
        let c = TrainConfig {
            mode: TrainMode::InterveneLr,
            v_star: Some([1.0, 3.0]),
            freeze_v: true,
            steps: 10,
            ..TrainConfig::default()
        };
        let (m, _) = train(&c, &d).unwrap();
        let init = ModelState::init(c.seed);
        assert_eq!(m.v(), init.v());
        assert_ne!(m.theta, init.theta);
    }
}
