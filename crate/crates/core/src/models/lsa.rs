//! Continuous linear self-attention stack on stacked `(x; y)` columns.
//!
//! Each layer maps `E -> E + P (sum_j v_j k_j^T) Q` where the sum runs over
//! the demonstration columns (the query column is never a key) in canonical
//! content order, and `K = W_K E`, `Q = W_Q E`, `V = W_V E`.

use crate::construction::LsaParams;
use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::tasks::cmp_slices;

use super::params::{AttentionKind, Layer, ModelIo, TransformerParams};

fn regression_dims(params: &TransformerParams) -> Result<(usize, usize)> {
    match params.io {
        ModelIo::Regression { d_x, d_y } => Ok((d_x, d_y)),
        ModelIo::Tokens(_) => Err(Error::invalid("operation needs a continuous (regression) model")),
    }
}

/// Wraps a hand-built construction as a one-layer continuous model.
pub fn params_from_construction(c: &LsaParams, d_x: usize, d_y: usize) -> Result<TransformerParams> {
    let h = d_x + d_y;
    for m in [&c.w_k, &c.w_q, &c.w_v, &c.p] {
        if m.shape() != (h, h) {
            return Err(Error::mismatch("params_from_construction", m.shape(), (h, h)));
        }
    }
    Ok(TransformerParams {
        attention: AttentionKind::Linear,
        causal: false,
        n_heads: 1,
        width: h,
        layers: vec![Layer {
            w_q: c.w_q.clone(),
            w_k: c.w_k.clone(),
            w_v: c.w_v.clone(),
            proj: c.p.clone(),
            norm: None,
            ffn: None,
        }],
        io: ModelIo::Regression { d_x, d_y },
    })
}

struct LayerCache {
    e: Matrix,
    k: Matrix,
    q: Matrix,
    v: Matrix,
    m: Matrix,
    u: Matrix,
    keys: Vec<usize>,
}

fn layer_forward(layer: &Layer, e: &Matrix) -> Result<LayerCache> {
    let h = e.rows();
    let n_keys = e.cols() - 1;
    let k = matmul(&layer.w_k, e)?;
    let q = matmul(&layer.w_q, e)?;
    let v = matmul(&layer.w_v, e)?;
    let cols: Vec<Vec<f64>> = (0..n_keys).map(|j| e.col(j)).collect();
    let mut keys: Vec<usize> = (0..n_keys).collect();
    keys.sort_by(|&a, &b| cmp_slices(&cols[a], &cols[b]));
    let mut m = Matrix::zeros(h, h);
    for &j in &keys {
        for r in 0..h {
            let vr = v[(r, j)];
            let row = m.row_mut(r);
            for c in 0..h {
                row[c] += vr * k[(c, j)];
            }
        }
    }
    let u = matmul(&m, &q)?;
    Ok(LayerCache { e: e.clone(), k, q, v, m, u, keys })
}

fn run(params: &TransformerParams, tokens: &Matrix) -> Result<(Vec<LayerCache>, Matrix)> {
    let (d_x, d_y) = regression_dims(params)?;
    if tokens.rows() != d_x + d_y {
        return Err(Error::mismatch("forward_regression", tokens.shape(), (d_x + d_y, tokens.cols())));
    }
    if tokens.cols() < 2 {
        return Err(Error::invalid("regression prompt needs at least one demonstration and a query"));
    }
    let mut e = tokens.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let c = layer_forward(layer, &e)?;
        e = e.add(&matmul(&layer.proj, &c.u)?)?;
        caches.push(c);
    }
    if !e.is_finite() {
        return Err(Error::NonFinite { op: "forward_regression" });
    }
    Ok((caches, e))
}

/// Negated `y` slot of the query (last) column after the forward pass.
pub fn forward_regression(params: &TransformerParams, tokens: &Matrix) -> Result<Matrix> {
    let (d_x, d_y) = regression_dims(params)?;
    let (_, e) = run(params, tokens)?;
    let q = e.cols() - 1;
    Ok(Matrix::column(&(0..d_y).map(|r| -e[(d_x + r, q)]).collect::<Vec<_>>()))
}

/// `0.5 * |prediction - target|^2`; when `grad` is given, accumulates `weight`
/// times its gradient.
pub fn regression_loss_and_grad(
    params: &TransformerParams,
    tokens: &Matrix,
    target: &Matrix,
    weight: f64,
    grad: Option<&mut TransformerParams>,
) -> Result<f64> {
    let (d_x, d_y) = regression_dims(params)?;
    if target.shape() != (d_y, 1) {
        return Err(Error::mismatch("regression_loss", target.shape(), (d_y, 1)));
    }
    let (caches, e) = run(params, tokens)?;
    let qc = e.cols() - 1;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(e.rows(), e.cols());
    for r in 0..d_y {
        let resid = -e[(d_x + r, qc)] - target[(r, 0)];
        loss += 0.5 * resid * resid;
        g[(d_x + r, qc)] = -weight * resid;
    }
    let Some(grad) = grad else { return Ok(loss) };
    if !params.same_architecture(grad) {
        return Err(Error::invalid("gradient buffer does not match the model"));
    }
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let c = &caches[l];
        let gl = &mut grad.layers[l];
        gl.proj.add_scaled(&matmul(&g, &c.u.transpose())?, 1.0);
        let du = matmul(&layer.proj.transpose(), &g)?;
        let dm = matmul(&du, &c.q.transpose())?;
        let dq = matmul(&c.m.transpose(), &du)?;
        let h = c.e.rows();
        let mut dk = Matrix::zeros(h, c.e.cols());
        let mut dv = Matrix::zeros(h, c.e.cols());
        for &j in &c.keys {
            for r in 0..h {
                let mut sv = 0.0;
                let mut sk = 0.0;
                for s in 0..h {
                    sv += dm[(r, s)] * c.k[(s, j)];
                    sk += dm[(s, r)] * c.v[(s, j)];
                }
                dv[(r, j)] = sv;
                dk[(r, j)] = sk;
            }
        }
        let et = c.e.transpose();
        gl.w_q.add_scaled(&matmul(&dq, &et)?, 1.0);
        gl.w_k.add_scaled(&matmul(&dk, &et)?, 1.0);
        gl.w_v.add_scaled(&matmul(&dv, &et)?, 1.0);
        let mut de = g;
        de.add_scaled(&matmul(&layer.w_q.transpose(), &dq)?, 1.0);
        de.add_scaled(&matmul(&layer.w_k.transpose(), &dk)?, 1.0);
        de.add_scaled(&matmul(&layer.w_v.transpose(), &dv)?, 1.0);
        g = de;
    }
    Ok(loss)
}
