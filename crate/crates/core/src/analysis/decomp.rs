//! Per-example split of the logistic-loss θ-gradient into an importance
//! weight `λ_i = σ(−y_i f_i)` and a feature-gradient term
//! `g_i = v_easy ∇_θΦ_easy + v_hard ∇_θΦ_hard`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Gradient};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::optim::{
    feature_grads, loss_and_grad, phantom_from_grad, LossKind, PhantomMode, PhantomState,
};
use crate::toydata::ToySample;

#[derive(Debug, Clone, PartialEq)]
pub struct DecompEntry {
    pub y: f64,
    /// `λ_i` at the real parameters.
    pub lambda: f64,
    /// `λ̃_i` at the phantom; equals `lambda` for a plain decomposition.
    pub lambda_phantom: f64,
    /// Feature-gradient term over θ, at whichever parameters the record was
    /// built from.
    pub g: Gradient,
    /// `(y v_easy Φ_easy, y v_hard Φ_hard)` at the real parameters.
    pub contributions: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompRecord {
    pub entries: Vec<DecompEntry>,
    /// `g` was taken at the phantom.
    pub phantom: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Real,
    Phantom,
}

fn entry_at(m: &ModelState, s: &ToySample) -> Result<(f64, Gradient, [f64; 2])> {
    let fg = feature_grads(&m.theta, &s.x)?;
    let f = m.logit_from(&fg.features);
    let mut g = fg.grad_easy;
    g.scale(m.v_easy);
    g.axpy(m.v_hard, &fg.grad_hard)?;
    let contributions = [
        s.y * m.v_easy * fg.features.phi_easy,
        s.y * m.v_hard * fg.features.phi_hard,
    ];
    Ok((sigmoid(-s.y * f), g, contributions))
}

pub fn decompose(m: &ModelState, batch: &[ToySample]) -> Result<DecompRecord> {
    let entries = batch
        .iter()
        .map(|s| {
            let (lambda, g, contributions) = entry_at(m, s)?;
            Ok(DecompEntry {
                y: s.y,
                lambda,
                lambda_phantom: lambda,
                g,
                contributions,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DecompRecord {
        entries,
        phantom: false,
    })
}

/// Same split with `(ṽ, θ̃)` in place of `(v, θ)`. `lambda` and
/// `contributions` still describe the real parameters.
pub fn decompose_phantom(ps: &PhantomState, batch: &[ToySample]) -> Result<DecompRecord> {
    let entries = batch
        .iter()
        .map(|s| {
            let (lambda, _, contributions) = entry_at(&ps.base, s)?;
            let (lambda_phantom, g, _) = entry_at(&ps.perturbed, s)?;
            Ok(DecompEntry {
                y: s.y,
                lambda,
                lambda_phantom,
                g,
                contributions,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DecompRecord {
        entries,
        phantom: true,
    })
}

/// `(1/B) Σ (−y_i) λ_i g_i`. For a phantom record, pass [`Weights::Phantom`]
/// to recover the θ-gradient at the phantom.
pub fn reconstruct(rec: &DecompRecord, weights: Weights) -> Result<Gradient> {
    let first = rec
        .entries
        .first()
        .ok_or_else(|| Error::contract("empty decomposition"))?;
    let inv_b = 1.0 / rec.entries.len() as f64;
    let mut out = first.g.zeros_like();
    for e in &rec.entries {
        let lam = match weights {
            Weights::Real => e.lambda,
            Weights::Phantom => e.lambda_phantom,
        };
        out.axpy(-e.y * lam * inv_b, &e.g)?;
    }
    Ok(out)
}

/// Importance weights without the per-example gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportancePoint {
    pub y: f64,
    pub lambda: f64,
    pub lambda_phantom: f64,
    pub contributions: [f64; 2],
}

impl ImportancePoint {
    pub fn ratio(&self) -> f64 {
        self.lambda_phantom / self.lambda
    }
}

/// Forward-only importance weights at the real and phantom parameters.
/// The weight is `−∂ℓ/∂(y f)` for the chosen loss.
pub fn importance_points(
    ps: &PhantomState,
    data: &[ToySample],
    loss: LossKind,
) -> Vec<ImportancePoint> {
    data.iter()
        .map(|s| {
            let f = ps.base.features(&s.x);
            let real = ps.base.logit_from(&f);
            let phantom = if ps.perturbed.theta == ps.base.theta {
                ps.perturbed.logit_from(&f)
            } else {
                ps.perturbed.logit(&s.x)
            };
            ImportancePoint {
                y: s.y,
                lambda: loss.importance(real, s.y),
                lambda_phantom: loss.importance(phantom, s.y),
                contributions: [
                    s.y * ps.base.v_easy * f.phi_easy,
                    s.y * ps.base.v_hard * f.phi_hard,
                ],
            }
        })
        .collect()
}

/// Phantom built from the gradient over a whole dataset rather than one
/// minibatch, for checkpoint-level diagnostics.
pub fn dataset_phantom(
    m: &ModelState,
    data: &[ToySample],
    rho: f64,
    mode: PhantomMode,
    loss: LossKind,
) -> Result<PhantomState> {
    let eval = loss_and_grad(m, data, loss)?;
    phantom_from_grad(m, &eval.grad, rho, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::V_INDEX;
    use crate::optim::{lsam_phantom, sam_phantom};
    use crate::toydata::{generate, ToySpec};

    fn data() -> Vec<ToySample> {
        generate(&ToySpec {
            n: 20,
            seed: 3,
            ..ToySpec::default()
        })
        .unwrap()
        .samples
    }

    fn theta_part(g: &Gradient) -> Gradient {
        let m = ModelState::init(0);
        let mut out = m.theta.zeros_like();
        for i in 0..V_INDEX {
            *out.segment_mut(i) = g.segment(i).clone();
        }
        out
    }

    #[test]
    fn zero_logit_gives_half() {
        let mut m = ModelState::init(1);
        m.v_easy = 0.0;
        m.v_hard = 0.0;
        let rec = decompose(&m, &data()[..3]).unwrap();
        assert!(rec.entries.iter().all(|e| e.lambda == 0.5));
    }

    #[test]
    fn huge_margin_gives_vanishing_weight() {
        let d = data();
        let mut m = ModelState::init(2);
        let f = m.features(&d[0].x);
        m.v_easy = 1e3 * d[0].y * f.phi_easy.signum();
        m.v_hard = 1e3 * d[0].y * f.phi_hard.signum();
        let rec = decompose(&m, &d[..1]).unwrap();
        assert!(rec.entries[0].lambda < 1e-10);
    }

    #[test]
    fn reconstruction_matches_backward_pass() {
        let d = data();
        for seed in 0..3 {
            let m = ModelState::init(seed);
            let batch = &d[seed as usize * 5..seed as usize * 5 + 5];
            let rec = decompose(&m, batch).unwrap();
            let auto = loss_and_grad(&m, batch, LossKind::Logistic).unwrap().grad;
            let diff = reconstruct(&rec, Weights::Real)
                .unwrap()
                .max_abs_diff(&theta_part(&auto))
                .unwrap();
            assert!(diff < 1e-12, "diff {diff}");
            assert!(rec.entries.iter().all(|e| e.lambda > 0.0 && e.lambda < 1.0));
        }
    }

    #[test]
    fn phantom_reconstruction_matches_backward_pass_at_phantom() {
        let d = data();
        let m = ModelState::init(4);
        let batch = &d[..5];
        for ps in [
            sam_phantom(&m, batch, 0.3, LossKind::Logistic).unwrap(),
            lsam_phantom(&m, batch, 0.3, LossKind::Logistic).unwrap(),
        ] {
            let rec = decompose_phantom(&ps, batch).unwrap();
            let auto = loss_and_grad(&ps.perturbed, batch, LossKind::Logistic)
                .unwrap()
                .grad;
            let diff = reconstruct(&rec, Weights::Phantom)
                .unwrap()
                .max_abs_diff(&theta_part(&auto))
                .unwrap();
            assert!(diff < 1e-12, "diff {diff}");
        }
    }

    #[test]
    fn rho_zero_phantom_equals_plain() {
        let d = data();
        let m = ModelState::init(5);
        let ps = lsam_phantom(&m, &d[..4], 0.0, LossKind::Logistic).unwrap();
        let a = decompose(&m, &d[..4]).unwrap();
        let b = decompose_phantom(&ps, &d[..4]).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn lsam_phantom_changes_g_only_through_v() {
        let d = data();
        let m = ModelState::init(6);
        let ps = lsam_phantom(&m, &d[..4], 0.5, LossKind::Logistic).unwrap();
        let rec = decompose_phantom(&ps, &d[..4]).unwrap();
        for (e, s) in rec.entries.iter().zip(&d[..4]) {
            let fg = feature_grads(&m.theta, &s.x).unwrap();
            let mut expected = fg.grad_easy.clone();
            expected.scale(ps.perturbed.v_easy);
            expected.axpy(ps.perturbed.v_hard, &fg.grad_hard).unwrap();
            assert!(e.g.max_abs_diff(&expected).unwrap() < 1e-15);
        }
    }

    #[test]
    fn importance_points_agree_with_decomposition() {
        let d = data();
        let m = ModelState::init(7);
        let ps = lsam_phantom(&m, &d[..6], 0.4, LossKind::Logistic).unwrap();
        let rec = decompose_phantom(&ps, &d[..6]).unwrap();
        let pts = importance_points(&ps, &d[..6], LossKind::Logistic);
        for (p, e) in pts.iter().zip(&rec.entries) {
            assert!((p.lambda - e.lambda).abs() < 1e-15);
            assert!((p.lambda_phantom - e.lambda_phantom).abs() < 1e-15);
            assert_eq!(p.contributions, e.contributions);
        }
    }
}
