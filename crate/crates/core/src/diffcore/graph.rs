//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! bound once from a [`ParamVector`]; [`Graph::backward`] then returns a
//! [`Gradient`] with exactly that layout. Nodes are stored in evaluation
//! order, so the reverse sweep is a single pass from the output down.

use crate::diffcore::kernels::{self, sigmoid, softplus};
use crate::diffcore::{Gradient, ParamVector, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Index(NodeId, usize),
    Logistic {
        f: NodeId,
        y: f64,
    },
    Exponential {
        f: NodeId,
        y: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    layout: Option<ParamVector>,
    param_nodes: Vec<NodeId>,
}

pub(crate) fn check_label(y: f64) -> Result<()> {
    if y == 1.0 || y == -1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("label must be -1 or +1, got {y}")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// Registers every segment of `params` as a trainable leaf, returning one
    /// node per segment in layout order.
    pub fn bind_params(&mut self, params: &ParamVector) -> Result<Vec<NodeId>> {
        if self.layout.is_some() {
            return Err(Error::contract("parameters already bound to this graph"));
        }
        let ids: Vec<NodeId> = params
            .segments()
            .iter()
            .enumerate()
            .map(|(i, (_, t))| self.push(Op::Param(i), t.clone()))
            .collect();
        self.layout = Some(params.zeros_like());
        self.param_nodes = ids.clone();
        Ok(ids)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = affine_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, out))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        check_layer_norm(xv, g, b, eps)?;
        let (xhat, inv_std) = kernels::normalize(xv.data(), eps);
        let out: Vec<f64> = xhat
            .iter()
            .zip(g.data())
            .zip(b.data())
            .map(|((h, g), b)| g * h + b)
            .collect();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::vector(out),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(x), Tensor::vector(out))
    }

    fn same_len(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la == lb {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "elementwise operands have {la} and {lb} entries"
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|x| x * factor).collect(),
        )
        .expect("shape preserved");
        self.push(Op::Scale(a, factor), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let out: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(out))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let v = self.value(a);
        let x = *v.data().get(i).ok_or_else(|| {
            Error::Dimension(format!("index {i} out of range for {} entries", v.len()))
        })?;
        Ok(self.push(Op::Index(a, i), Tensor::scalar(x)))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("mean over zero terms"));
        }
        let all = self.concat(parts);
        let total = self.sum(all);
        Ok(self.scale(total, 1.0 / parts.len() as f64))
    }

    pub fn logistic_loss(&mut self, f: NodeId, y: f64) -> Result<NodeId> {
        check_label(y)?;
        let fv = self.require_scalar(f)?;
        Ok(self.push(Op::Logistic { f, y }, Tensor::scalar(logistic_loss(fv, y)?)))
    }

    pub fn exponential_loss(&mut self, f: NodeId, y: f64) -> Result<NodeId> {
        check_label(y)?;
        let fv = self.require_scalar(f)?;
        Ok(self.push(
            Op::Exponential { f, y },
            Tensor::scalar(exponential_loss(fv, y)),
        ))
    }

    fn require_scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.is_scalar() {
            Ok(v.item())
        } else {
            Err(Error::contract(format!(
                "expected a scalar node, got shape {:?}",
                v.shape()
            )))
        }
    }

    /// Reverse sweep from a scalar output. Returns the derivative of
    /// `output` with respect to every bound parameter segment.
    pub fn backward(&self, output: NodeId) -> Result<Gradient> {
        self.require_scalar(output)?;
        let layout = self
            .layout
            .as_ref()
            .ok_or_else(|| Error::contract("no parameters bound to the graph"))?;
        let mut grad = layout.clone();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(dout) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(seg) => {
                    for (g, d) in grad.segment_mut(*seg).data_mut().iter_mut().zip(&dout) {
                        *g += d;
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut dx = if matches!(self.nodes[x.0].op, Op::Input) {
                        None
                    } else {
                        self.take_or_zero(&mut adj, *x)
                    };
                    let mut dw = self.take_or_zero(&mut adj, *w);
                    let mut db = self.take_or_zero(&mut adj, *b);
                    kernels::affine_backward(
                        xv,
                        wv,
                        &dout,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    adj[x.0] = dx;
                    adj[w.0] = dw;
                    adj[b.0] = db;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data();
                    let mut dx = self.take_or_zero(&mut adj, *x);
                    let mut dg = self.take_or_zero(&mut adj, *gain);
                    let mut db = self.take_or_zero(&mut adj, *bias);
                    kernels::layer_norm_backward(
                        xhat,
                        *inv_std,
                        gv,
                        &dout,
                        dx.as_deref_mut(),
                        dg.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    adj[x.0] = dx;
                    adj[gain.0] = dg;
                    adj[bias.0] = db;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let contrib: Vec<f64> = dout
                        .iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, &contrib);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &dout);
                    accumulate(&mut adj, *b, &dout);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = dout.iter().zip(bv).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = dout.iter().zip(av).map(|(d, x)| d * x).collect();
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = dout.iter().map(|d| d * factor).collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, &vec![dout[0]; n]);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj, *p, &dout[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Index(a, k) => {
                    let mut da = self.take_or_zero(&mut adj, *a).expect("present");
                    da[*k] += dout[0];
                    adj[a.0] = Some(da);
                }
                Op::Logistic { f, y } => {
                    let fv = self.scalar(*f);
                    let d = -y * sigmoid(-y * fv);
                    accumulate(&mut adj, *f, &[dout[0] * d]);
                }
                Op::Exponential { f, y } => {
                    let fv = self.scalar(*f);
                    let d = -y * (-y * fv).exp();
                    accumulate(&mut adj, *f, &[dout[0] * d]);
                }
            }
        }
        Ok(grad)
    }

    fn take_or_zero(&self, adj: &mut [Option<Vec<f64>>], id: NodeId) -> Option<Vec<f64>> {
        Some(
            adj[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(id).len()]),
        )
    }

    /// Node ids of the bound parameter segments, in layout order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn check_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<()> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateNormalization(n));
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::Dimension(format!(
            "layer norm over {n} units with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::contract("layer norm eps must be nonnegative"));
    }
    Ok(())
}

/// `weight · x + bias` for a `[n_out, n_in]` weight.
pub fn affine_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_in = x.len();
    let n_out = bias.len();
    let shape_ok = match weight.shape() {
        [r, c] => *r == n_out && *c == n_in,
        _ => false,
    };
    if !shape_ok {
        return Err(Error::Dimension(format!(
            "affine map: x {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; n_out];
    kernels::affine(x.data(), weight.data(), bias.data(), &mut out);
    Ok(Tensor::vector(out))
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with biased variance.
pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_layer_norm(x, gain, bias, eps)?;
    let (xhat, _) = kernels::normalize(x.data(), eps);
    if xhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(
            "zero-variance input with eps = 0 has no normalization",
        ));
    }
    Ok(Tensor::vector(
        xhat.iter()
            .zip(gain.data())
            .zip(bias.data())
            .map(|((h, g), b)| g * h + b)
            .collect(),
    ))
}

/// `log(1 + exp(−y·f))`, overflow-safe.
pub fn logistic_loss(f: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    Ok(softplus(-y * f))
}

/// `exp(−y·f)`.
pub fn exponential_loss(f: f64, y: f64) -> f64 {
    (-y * f).exp()
}
