//! Closed forms for `‖∇_θ f(x)‖²` on small bias-free networks, and the
//! first-order prediction of the phantom importance-weight ratio under the
//! exponential loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_diff_gradient, Gradient, Graph, ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::model::{logit_node, ModelState};
use crate::optim::{phantom_from_grad, LossKind, PhantomMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryKind {
    /// `f = v·φ`, gradient over `v` only.
    Lsam,
    TwoLayerLinear,
    DeepLinear,
    ReluMlp,
}

impl TheoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TheoryKind::Lsam => "lsam",
            TheoryKind::TwoLayerLinear => "two-layer-linear",
            TheoryKind::DeepLinear => "deep-linear",
            TheoryKind::ReluMlp => "relu-mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

/// `f(x) = W_L σ(W_{L−1} ⋯ σ(W_1 x))` with a single output row in `W_L`.
/// Each layer is `(rows, cols, row-major data)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryNet {
    pub layers: Vec<Tensor>,
    pub activation: Activation,
}

/// Per-layer pieces of the closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryTerms {
    pub total: f64,
    /// `‖δ_j‖² ‖a_{j−1}‖²` for each layer, input side first.
    pub layer_terms: Vec<f64>,
    /// Rectifier active sets of the hidden layers (all true for linear nets).
    pub masks: Vec<Vec<bool>>,
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &Tensor, d: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = vec![0.0; cols];
    for (row, di) in w.data().chunks(cols).zip(d) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * di;
        }
    }
    out
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

impl TheoryNet {
    pub fn new(layers: Vec<Tensor>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        for (i, w) in layers.iter().enumerate() {
            if w.shape().len() != 2 {
                return Err(Error::Dimension(format!("layer {i} is not a matrix")));
            }
            if i > 0 && layers[i - 1].shape()[0] != w.shape()[1] {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} inputs but layer {} has {} outputs",
                    w.shape()[1],
                    i - 1,
                    layers[i - 1].shape()[0]
                )));
            }
        }
        if layers.last().map(|w| w.shape()[0]) != Some(1) {
            return Err(Error::Dimension("last layer must have one output".into()));
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for (i, w) in self.layers.iter().enumerate() {
            p.push(format!("w{}", i + 1), w.clone());
        }
        p
    }

    pub fn with_params(&self, p: &ParamVector) -> Self {
        Self {
            layers: p.segments().iter().map(|(_, t)| t.clone()).collect(),
            activation: self.activation,
        }
    }

    /// Hidden activations `a_0 = x, a_1, …, a_{L−1}` and the output.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<bool>>, f64) {
        let mut acts = vec![x.to_vec()];
        let mut masks = Vec::new();
        let last = self.layers.len() - 1;
        for w in &self.layers[..last] {
            let h = matvec(w, acts.last().expect("nonempty"));
            let (a, m) = match self.activation {
                Activation::Identity => (h.clone(), vec![true; h.len()]),
                Activation::Relu => (
                    h.iter().map(|v| v.max(0.0)).collect(),
                    h.iter().map(|v| *v > 0.0).collect(),
                ),
            };
            acts.push(a);
            masks.push(m);
        }
        let f = matvec(&self.layers[last], acts.last().expect("nonempty"))[0];
        (acts, masks, f)
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_trace(x).2
    }

    /// Rectifier active sets at `x`, read off the forward pass.
    pub fn active_sets(&self, x: &[f64]) -> Vec<Vec<bool>> {
        self.forward_trace(x).1
    }
}

fn check_kind(net: &TheoryNet, kind: TheoryKind) -> Result<()> {
    let depth = net.layers.len();
    let ok = match kind {
        TheoryKind::Lsam => depth == 1,
        TheoryKind::TwoLayerLinear => depth == 2 && net.activation == Activation::Identity,
        TheoryKind::DeepLinear => depth >= 2 && net.activation == Activation::Identity,
        TheoryKind::ReluMlp => depth >= 2 && net.activation == Activation::Relu,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "a {depth}-layer {:?} network is not of kind {}",
            net.activation,
            kind.as_str()
        )))
    }
}

/// Closed-form `‖∇_θ f(x)‖²` with its per-layer breakdown.
///
/// With `a_0 = x`, `a_j = A_j W_j a_{j−1}` and the backward vectors
/// `δ_L = 1`, `δ_j = A_j W_{j+1}ᵀ δ_{j+1}` (`A_j` the rectifier mask, the
/// identity for linear nets), the gradient for `W_j` is the outer product
/// `δ_j a_{j−1}ᵀ`, so `‖∇f‖² = Σ_j ‖δ_j‖² ‖a_{j−1}‖²`. The last-layer case
/// reduces to `‖φ‖²` and the two-layer linear case to
/// `‖W x‖² + ‖v‖² ‖x‖²`.
pub fn theory_terms(net: &TheoryNet, x: &[f64], kind: TheoryKind) -> Result<TheoryTerms> {
    check_kind(net, kind)?;
    if x.len() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} entries, network expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    let (acts, masks, _) = net.forward_trace(x);
    let depth = net.layers.len();
    let mut terms = vec![0.0; depth];
    let mut delta = vec![1.0];
    for j in (0..depth).rev() {
        terms[j] = sq(&delta) * sq(&acts[j]);
        if j > 0 {
            let back = matvec_t(&net.layers[j], &delta);
            delta = back
                .iter()
                .zip(&masks[j - 1])
                .map(|(d, on)| if *on { *d } else { 0.0 })
                .collect();
        }
    }
    Ok(TheoryTerms {
        total: terms.iter().sum(),
        layer_terms: terms,
        masks,
    })
}

pub fn theory_feature_grad_norm(net: &TheoryNet, x: &[f64], kind: TheoryKind) -> Result<f64> {
    Ok(theory_terms(net, x, kind)?.total)
}

/// `‖∇_θ f(x)‖²` by central differences over every weight.
pub fn numeric_feature_grad_norm(net: &TheoryNet, x: &[f64], h: f64) -> Result<f64> {
    let g = finite_diff_gradient(|p| Ok(net.with_params(p).forward(x)), &net.params(), h)?;
    Ok(g.sum_squares())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub rho: f64,
    /// `log(λ̃/λ)` from evaluating the phantom.
    pub measured: f64,
    /// `ρ ‖∇_θ f‖`.
    pub predicted: f64,
}

impl TaylorRow {
    pub fn rel_err(&self) -> f64 {
        if self.predicted == 0.0 {
            self.measured.abs()
        } else {
            ((self.measured - self.predicted) / self.predicted).abs()
        }
    }
}

/// Generic single-example check for any differentiable `f`. Under the
/// exponential loss the full-parameter phantom moves along `−y ∇f/‖∇f‖`,
/// so `log(λ̃/λ) = y (f(w) − f(w̃)) ≈ ρ ‖∇f‖`.
pub fn taylor_rows<F>(
    f: F,
    w: &ParamVector,
    grad_f: &Gradient,
    y: f64,
    rhos: &[f64],
) -> Result<Vec<TaylorRow>>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    let norm = grad_f.global_norm();
    if norm == 0.0 {
        return Err(Error::contract("logit gradient vanishes"));
    }
    let f0 = f(w)?;
    rhos.iter()
        .map(|&rho| {
            let mut wt = w.clone();
            wt.axpy(-y * rho / norm, grad_f)?;
            Ok(TaylorRow {
                rho,
                measured: y * (f0 - f(&wt)?),
                predicted: rho * norm,
            })
        })
        .collect()
}

/// Taylor-ratio check on the toy model for one example. The phantom comes
/// from the exponential-loss gradient over all parameters, as in training.
pub fn taylor_ratio_check(
    m: &ModelState,
    x: &[f64; 4],
    y: f64,
    rhos: &[f64],
) -> Result<Vec<TaylorRow>> {
    let mut g = Graph::new();
    let ids = g.bind_params(&m.to_params())?;
    let nodes = logit_node(&mut g, &ids, x)?;
    let loss = g.exponential_loss(nodes.logit, y)?;
    let f0 = g.scalar(nodes.logit);
    let grad_f = g.backward(nodes.logit)?;
    let grad_loss = g.backward(loss)?;
    let lam = LossKind::Exponential.importance(f0, y);
    rhos.iter()
        .map(|&rho| {
            let ps = phantom_from_grad(m, &grad_loss, rho, PhantomMode::Full)?;
            let lam_t = LossKind::Exponential.importance(ps.perturbed.logit(x), y);
            Ok(TaylorRow {
                rho,
                measured: (lam_t / lam).ln(),
                predicted: rho * grad_f.global_norm(),
            })
        })
        .collect()
}
