//! Forward and backward kernels shared by the graph and the standalone ops.

pub(crate) fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        let mut acc = b[j];
        for (wk, xk) in row.iter().zip(x) {
            acc += wk * xk;
        }
        *o = acc;
    }
}

pub(crate) fn affine_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let n_in = x.len();
    if let Some(dx) = dx {
        for (j, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[j * n_in..(j + 1) * n_in];
            for (g, wk) in dx.iter_mut().zip(row) {
                *g += d * wk;
            }
        }
    }
    if let Some(dw) = dw {
        for (j, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut dw[j * n_in..(j + 1) * n_in];
            for (g, xk) in row.iter_mut().zip(x) {
                *g += d * xk;
            }
        }
    }
    if let Some(db) = db {
        for (g, d) in db.iter_mut().zip(dout) {
            *g += d;
        }
    }
}

/// Normalizes `x` with biased variance. Returns `(xhat, inv_std)`.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        let n = xhat.len() as f64;
        let dxhat: Vec<f64> = dout.iter().zip(gain).map(|(d, g)| d * g).collect();
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum();
        for ((g, d), h) in dx.iter_mut().zip(&dxhat).zip(xhat) {
            *g += inv_std / n * (n * d - sum_d - h * sum_dx);
        }
    }
    if let Some(dgain) = dgain {
        for ((g, d), h) in dgain.iter_mut().zip(dout).zip(xhat) {
            *g += d * h;
        }
    }
    if let Some(dbias) = dbias {
        for (g, d) in dbias.iter_mut().zip(dout) {
            *g += d;
        }
    }
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` in log-sum-exp form.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
