//! Logistic-regression probes on frozen representations.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, softplus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub steps: usize,
    pub lr: f64,
    pub intercept: bool,
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.5,
            intercept: false,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub steps_run: usize,
    pub grad_norm: f64,
    pub loss: f64,
    pub converged: bool,
    /// Every representation was identical, so only the label prior can be
    /// fit.
    pub degenerate: bool,
}

impl ProbeFit {
    pub fn score(&self, rep: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(rep)
            .map(|(u, r)| u * r)
            .sum::<f64>()
            + self.bias
    }

    /// 0-1 error of `sign(u·φ + b)` against `±1` labels.
    pub fn error(&self, reps: &[Vec<f64>], labels: &[f64]) -> f64 {
        if reps.is_empty() {
            return 0.0;
        }
        let wrong = reps
            .iter()
            .zip(labels)
            .filter(|(r, a)| !(self.score(r) * **a > 0.0))
            .count();
        wrong as f64 / reps.len() as f64
    }
}

fn loss_grad(reps: &[Vec<f64>], labels: &[f64], u: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
    let n = reps.len() as f64;
    let mut gu = vec![0.0; u.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (r, a) in reps.iter().zip(labels) {
        let z = u.iter().zip(r).map(|(w, x)| w * x).sum::<f64>() + b;
        loss += softplus(-a * z) / n;
        let coeff = -a * sigmoid(-a * z) / n;
        for (g, x) in gu.iter_mut().zip(r) {
            *g += coeff * x;
        }
        gb += coeff;
    }
    (loss, gu, gb)
}

/// Full-batch gradient descent on the mean logistic loss of
/// `u·φ (+ b)` against `±1` attribute labels. Stops when the gradient norm
/// drops below `tol` or after `steps` updates.
pub fn fit_linear_probe(
    reps: &[Vec<f64>],
    labels: &[f64],
    opts: &ProbeOptions,
) -> Result<ProbeFit> {
    if reps.is_empty() || reps.len() != labels.len() {
        return Err(Error::contract(format!(
            "probe needs matching nonempty inputs, got {} representations and {} labels",
            reps.len(),
            labels.len()
        )));
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension("ragged representations".into()));
    }
    if let Some(a) = labels.iter().find(|a| **a != 1.0 && **a != -1.0) {
        return Err(Error::contract(format!("probe labels must be ±1, got {a}")));
    }
    let degenerate = reps.iter().all(|r| r == &reps[0]);
    let mut u = vec![0.0; dim];
    let mut b = 0.0;
    let mut steps_run = 0;
    let (mut loss, mut gu, mut gb) = loss_grad(reps, labels, &u, b);
    let norm = |gu: &[f64], gb: f64| (gu.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
    while steps_run < opts.steps && norm(&gu, if opts.intercept { gb } else { 0.0 }) >= opts.tol {
        for (w, g) in u.iter_mut().zip(&gu) {
            *w -= opts.lr * g;
        }
        if opts.intercept {
            b -= opts.lr * gb;
        }
        steps_run += 1;
        (loss, gu, gb) = loss_grad(reps, labels, &u, b);
    }
    let grad_norm = norm(&gu, if opts.intercept { gb } else { 0.0 });
    Ok(ProbeFit {
        weights: u,
        bias: b,
        steps_run,
        grad_norm,
        loss,
        converged: grad_norm < opts.tol,
        degenerate,
    })
}
