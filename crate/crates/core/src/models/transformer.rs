//! Forward and backward passes of the discrete (token) model.
//!
//! Activations are stored row-major with one row per position, so a linear map
//! is `X W` with `W` stored `in x out`.

use crate::error::{Error, Result};
use crate::metrics::ConfidenceDistribution;
use crate::numerics::{axpy, dot, gemm_acc, gemm_tn_acc, softmax_in_place, transpose_into, Matrix};
use crate::tasks::TokenId;

use super::params::{AttentionKind, LayerNorm, ModelIo, TokenIo, TransformerParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(x: &[f64], d: usize, ln: &LayerNorm, out: &mut [f64]) -> LnCache {
    let t = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    let (g, b) = (ln.gain.data(), ln.bias.data());
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            out[i * d + c] = g[c] * h + b[c];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates the input gradient into `dx` and the affine gradients into `grad`.
fn ln_backward(dy: &[f64], cache: &LnCache, d: usize, ln: &LayerNorm, grad: &mut LayerNorm, dx: &mut [f64]) {
    let t = dy.len() / d;
    let g = ln.gain.data();
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        {
            let gg = grad.gain.data_mut();
            for c in 0..d {
                gg[c] += dyr[c] * xh[c];
            }
        }
        axpy(1.0, dyr, grad.bias.data_mut());
        for c in 0..d {
            dxhat[c] = dyr[c] * g[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let r = cache.rstd[i];
        let out = &mut dx[i * d..(i + 1) * d];
        for c in 0..d {
            out[c] += r * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn transposed(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    transpose_into(m.data(), m.rows(), m.cols(), &mut out);
    out
}

fn add_col_sums(src: &[f64], cols: usize, dst: &mut [f64]) {
    for row in src.chunks_exact(cols) {
        axpy(1.0, row, dst);
    }
}

struct AttnCache {
    ln: Option<LnCache>,
    xn: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x T x T` attention weights (scores for linear attention).
    probs: Vec<f64>,
    o: Vec<f64>,
}

struct FfnCache {
    ln: Option<LnCache>,
    xn: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

struct LayerCache {
    attn: AttnCache,
    ffn: Option<FfnCache>,
}

/// Activations from one forward pass, kept for logits and backprop.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    final_ln: Option<LnCache>,
    xf: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn token_io(params: &TransformerParams) -> Result<&TokenIo> {
    params
        .token_io()
        .ok_or_else(|| Error::invalid("operation needs a discrete (token) model"))
}

fn check_tokens(params: &TransformerParams, tokens: &[TokenId]) -> Result<()> {
    let io = token_io(params)?;
    if tokens.is_empty() {
        return Err(Error::invalid("token sequence is empty"));
    }
    if tokens.len() > io.position_embedding.rows() {
        return Err(Error::invalid(format!(
            "sequence of length {} exceeds max_len {}",
            tokens.len(),
            io.position_embedding.rows()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= io.token_embedding.rows()) {
        return Err(Error::UnknownToken(bad));
    }
    Ok(())
}

pub fn forward(params: &TransformerParams, tokens: &[TokenId]) -> Result<ForwardCache> {
    check_tokens(params, tokens)?;
    let io = token_io(params)?;
    let d = params.width;
    let t = tokens.len();
    let nh = params.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(io.token_embedding.row(tok as usize));
        axpy(1.0, io.position_embedding.row(i), row);
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut xn = vec![0.0; t * d];
        let ln = match &layer.norm {
            Some(n) => Some(ln_forward(&x, d, n, &mut xn)),
            None => {
                xn.copy_from_slice(&x);
                None
            }
        };
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        gemm_acc(&xn, layer.w_q.data(), &mut q, t, d, d);
        gemm_acc(&xn, layer.w_k.data(), &mut k, t, d, d);
        gemm_acc(&xn, layer.w_v.data(), &mut v, t, d, d);

        let mut probs = vec![0.0; nh * t * t];
        let mut o = vec![0.0; t * d];
        for h in 0..nh {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..t {
                let jmax = if params.causal { i + 1 } else { t };
                let row = &mut probs[(h * t + i) * t..(h * t + i) * t + jmax];
                let qi = &q[i * d + hs.start..i * d + hs.end];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = scale * dot(qi, &k[j * d + hs.start..j * d + hs.end]);
                }
                if params.attention == AttentionKind::Softmax {
                    softmax_in_place(row);
                }
                let oi = &mut o[i * d + hs.start..i * d + hs.end];
                for (j, &a) in row.iter().enumerate() {
                    axpy(a, &v[j * d + hs.start..j * d + hs.end], oi);
                }
            }
        }
        gemm_acc(&o, layer.proj.data(), &mut x, t, d, d);
        let attn = AttnCache { ln, xn, q, k, v, probs, o };

        let ffn = match &layer.ffn {
            Some(f) => {
                let hid = f.w_in.cols();
                let mut xn = vec![0.0; t * d];
                let ln = match &f.norm {
                    Some(n) => Some(ln_forward(&x, d, n, &mut xn)),
                    None => {
                        xn.copy_from_slice(&x);
                        None
                    }
                };
                let mut hpre = vec![0.0; t * hid];
                for row in hpre.chunks_exact_mut(hid) {
                    row.copy_from_slice(f.b_in.data());
                }
                gemm_acc(&xn, f.w_in.data(), &mut hpre, t, d, hid);
                let hact: Vec<f64> = hpre.iter().map(|&z| gelu(z)).collect();
                for row in x.chunks_exact_mut(d) {
                    axpy(1.0, f.b_out.data(), row);
                }
                gemm_acc(&hact, f.w_out.data(), &mut x, t, hid, d);
                Some(FfnCache { ln, xn, hpre, hact })
            }
            None => None,
        };
        layers.push(LayerCache { attn, ffn });
    }

    let (final_ln, xf) = match &io.final_norm {
        Some(n) => {
            let mut xf = vec![0.0; t * d];
            let c = ln_forward(&x, d, n, &mut xf);
            (Some(c), xf)
        }
        None => (None, x),
    };
    if !xf.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "forward" });
    }
    Ok(ForwardCache { tokens: tokens.to_vec(), layers, final_ln, xf })
}

/// Next-token logits at position `pos`.
pub fn logits_at(params: &TransformerParams, cache: &ForwardCache, pos: usize) -> Result<Vec<f64>> {
    let io = token_io(params)?;
    if pos >= cache.len() {
        return Err(Error::invalid(format!("position {pos} outside sequence of length {}", cache.len())));
    }
    let d = params.width;
    let xf = &cache.xf[pos * d..(pos + 1) * d];
    Ok((0..io.unembedding.rows()).map(|v| dot(io.unembedding.row(v), xf)).collect())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Next-token distribution after the last token of `tokens`.
pub fn forward_distribution(params: &TransformerParams, tokens: &[TokenId]) -> Result<ConfidenceDistribution> {
    let cache = forward(params, tokens)?;
    let logits = logits_at(params, &cache, tokens.len() - 1)?;
    let lp = log_softmax(&logits);
    let mut probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    ConfidenceDistribution::new(probs)
}

/// `-log p(label | prompt)`.
pub fn label_loss(params: &TransformerParams, prompt: &[TokenId], label: TokenId) -> Result<f64> {
    let cache = forward(params, prompt)?;
    let logits = logits_at(params, &cache, prompt.len() - 1)?;
    if label as usize >= logits.len() {
        return Err(Error::UnknownToken(label));
    }
    Ok(-log_softmax(&logits)[label as usize])
}

/// Summed cross-entropy of `targets` (position, label) and, when `grad` is
/// given, accumulation of `weight` times its gradient.
pub fn loss_and_grad(
    params: &TransformerParams,
    tokens: &[TokenId],
    targets: &[(usize, TokenId)],
    weight: f64,
    grad: Option<&mut TransformerParams>,
) -> Result<f64> {
    let cache = forward(params, tokens)?;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(targets.len());
    for &(pos, label) in targets {
        let logits = logits_at(params, &cache, pos)?;
        if label as usize >= logits.len() {
            return Err(Error::UnknownToken(label));
        }
        let lp = log_softmax(&logits);
        loss -= lp[label as usize];
        if grad.is_some() {
            let mut dl: Vec<f64> = lp.iter().map(|l| weight * l.exp()).collect();
            dl[label as usize] -= weight;
            dlogits.push((pos, dl));
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    if let Some(g) = grad {
        backward(params, &cache, &dlogits, g)?;
    }
    Ok(loss)
}

/// Backpropagates logit gradients at the given positions, accumulating into `grad`.
pub fn backward(
    params: &TransformerParams,
    cache: &ForwardCache,
    dlogits: &[(usize, Vec<f64>)],
    grad: &mut TransformerParams,
) -> Result<()> {
    if !params.same_architecture(grad) {
        return Err(Error::invalid("gradient buffer does not match the model"));
    }
    let io = token_io(params)?;
    let gio = match &mut grad.io {
        ModelIo::Tokens(g) => g,
        ModelIo::Regression { .. } => unreachable!("architectures match"),
    };
    let d = params.width;
    let t = cache.len();
    let nh = params.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dxf = vec![0.0; t * d];
    for (pos, dl) in dlogits {
        let pos = *pos;
        let xf = &cache.xf[pos * d..(pos + 1) * d];
        for (v, &g) in dl.iter().enumerate() {
            if g != 0.0 {
                axpy(g, io.unembedding.row(v), &mut dxf[pos * d..(pos + 1) * d]);
                axpy(g, xf, gio.unembedding.row_mut(v));
            }
        }
    }
    let mut dx = match (&io.final_norm, &cache.final_ln) {
        (Some(n), Some(c)) => {
            let mut dx = vec![0.0; t * d];
            ln_backward(&dxf, c, d, n, gio.final_norm.as_mut().expect("architectures match"), &mut dx);
            dx
        }
        _ => dxf,
    };

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let gl = &mut grad.layers[l];

        if let (Some(f), Some(fc)) = (&layer.ffn, &lc.ffn) {
            let gf = gl.ffn.as_mut().expect("architectures match");
            let hid = f.w_in.cols();
            add_col_sums(&dx, d, gf.b_out.data_mut());
            gemm_tn_acc(&fc.hact, &dx, gf.w_out.data_mut(), t, hid, d);
            let mut dh_act = vec![0.0; t * hid];
            gemm_acc(&dx, &transposed(&f.w_out), &mut dh_act, t, d, hid);
            for (g, &z) in dh_act.iter_mut().zip(&fc.hpre) {
                *g *= gelu_grad(z);
            }
            add_col_sums(&dh_act, hid, gf.b_in.data_mut());
            gemm_tn_acc(&fc.xn, &dh_act, gf.w_in.data_mut(), t, d, hid);
            let mut dxn = vec![0.0; t * d];
            gemm_acc(&dh_act, &transposed(&f.w_in), &mut dxn, t, hid, d);
            match (&f.norm, &fc.ln) {
                (Some(n), Some(c)) => ln_backward(&dxn, c, d, n, gf.norm.as_mut().expect("architectures match"), &mut dx),
                _ => axpy(1.0, &dxn, &mut dx),
            }
        }

        let ac = &lc.attn;
        gemm_tn_acc(&ac.o, &dx, gl.proj.data_mut(), t, d, d);
        let mut d_o = vec![0.0; t * d];
        gemm_acc(&dx, &transposed(&layer.proj), &mut d_o, t, d, d);

        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        for h in 0..nh {
            let (h0, h1) = (h * dh, (h + 1) * dh);
            for i in 0..t {
                let jmax = if params.causal { i + 1 } else { t };
                let row = &ac.probs[(h * t + i) * t..(h * t + i) * t + jmax];
                let doi = &d_o[i * d + h0..i * d + h1];
                for j in 0..jmax {
                    da[j] = dot(doi, &ac.v[j * d + h0..j * d + h1]);
                    axpy(row[j], doi, &mut dv[j * d + h0..j * d + h1]);
                }
                if params.attention == AttentionKind::Softmax {
                    let inner = dot(&row[..jmax], &da[..jmax]);
                    for j in 0..jmax {
                        da[j] = row[j] * (da[j] - inner);
                    }
                }
                let qi = &ac.q[i * d + h0..i * d + h1];
                for j in 0..jmax {
                    let ds = scale * da[j];
                    if ds != 0.0 {
                        axpy(ds, &ac.k[j * d + h0..j * d + h1], &mut dq[i * d + h0..i * d + h1]);
                        axpy(ds, qi, &mut dk[j * d + h0..j * d + h1]);
                    }
                }
            }
        }
        gemm_tn_acc(&ac.xn, &dq, gl.w_q.data_mut(), t, d, d);
        gemm_tn_acc(&ac.xn, &dk, gl.w_k.data_mut(), t, d, d);
        gemm_tn_acc(&ac.xn, &dv, gl.w_v.data_mut(), t, d, d);
        let mut dxn = vec![0.0; t * d];
        gemm_acc(&dq, &transposed(&layer.w_q), &mut dxn, t, d, d);
        gemm_acc(&dk, &transposed(&layer.w_k), &mut dxn, t, d, d);
        gemm_acc(&dv, &transposed(&layer.w_v), &mut dxn, t, d, d);
        match (&layer.norm, &ac.ln) {
            (Some(n), Some(c)) => ln_backward(&dxn, c, d, n, gl.norm.as_mut().expect("architectures match"), &mut dx),
            _ => axpy(1.0, &dxn, &mut dx),
        }
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        axpy(1.0, g, gio.token_embedding.row_mut(tok as usize));
        axpy(1.0, g, gio.position_embedding.row_mut(i));
    }
    Ok(())
}
