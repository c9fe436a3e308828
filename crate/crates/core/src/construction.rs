//! Hand-constructed linear self-attention layer whose forward pass performs one
//! gradient-descent step on an implicit linear model, the reference GD step, an
//! equivalence checker, and weight-sparsity measurement.
//!
//! Tokens are columns `e_j = (x_j; y_j)` of height `d_x + d_y`. With
//!
//! ```text
//! W_K = W_Q = [[I_x, 0], [0, 0]]    W_V = [[0, 0], [W_0, -I_y]]    P = (eta / N) I
//! ```
//!
//! the attention increment on the query token `(x_q; 0)` is `(0; -dW x_q)` where
//! `dW = -(eta / N) sum_i (W_0 x_i - y_i) x_i^T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::tasks::{cmp_slices, embed_regression_tokens, RegressionDemos};

/// Agreement required between the attention update and the GD step.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Threshold grid for sparsity sweeps.
pub const DELTA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaParams {
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub p: Matrix,
}

/// Reference linear model `y = W x` trained with step size `eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Matrix,
    pub eta: f64,
}

pub fn build_construction(w0: &Matrix, eta: f64, n_demos: usize) -> Result<LsaParams> {
    if n_demos == 0 {
        return Err(Error::ZeroDemonstrations);
    }
    if !eta.is_finite() {
        return Err(Error::invalid(format!("eta must be finite, got {eta}")));
    }
    let (d_y, d_x) = w0.shape();
    let h = d_x + d_y;

    let mut w_k = Matrix::zeros(h, h);
    w_k.set_block(0, 0, &Matrix::identity(d_x));
    let w_q = w_k.clone();

    let mut w_v = Matrix::zeros(h, h);
    w_v.set_block(d_x, 0, w0);
    w_v.set_block(d_x, d_x, &Matrix::identity(d_y).scale(-1.0));

    let p = Matrix::identity(h).scale(eta / n_demos as f64);
    Ok(LsaParams { w_k, w_q, w_v, p })
}

/// `dW = -(eta / N) sum_i (W x_i - y_i) x_i^T`, summed in canonical pair order
/// so that any permutation of `demos` yields the same bits.
pub fn gd_step(model: &LinearModel, demos: &RegressionDemos) -> Result<Matrix> {
    if demos.is_empty() {
        return Err(Error::invalid("gd_step needs at least one demonstration"));
    }
    let (d_y, d_x) = model.w.shape();
    let mut order: Vec<_> = demos.pairs.iter().collect();
    order.sort_by(|a, b| a.canonical_cmp(b));

    let mut grad = Matrix::zeros(d_y, d_x);
    for pair in order {
        if pair.x.shape() != (d_x, 1) || pair.y.shape() != (d_y, 1) {
            return Err(Error::mismatch("gd_step", pair.x.shape(), (d_x, 1)));
        }
        let residual = matmul(&model.w, &pair.x)?.sub(&pair.y)?;
        for r in 0..d_y {
            let g = grad.row_mut(r);
            for c in 0..d_x {
                g[c] += residual[(r, 0)] * pair.x[(c, 0)];
            }
        }
    }
    let dw = grad.scale(-model.eta / demos.len() as f64);
    if !dw.is_finite() {
        return Err(Error::NonFinite { op: "gd_step" });
    }
    Ok(dw)
}

/// One linear self-attention layer without softmax:
/// `e_i <- e_i + P sum_j (W_V e_j)(W_K e_j)^T (W_Q e_i)` over the tokens `j`
/// flagged in `attend`. The sum over `j` runs in canonical token order.
pub fn lsa_forward(params: &LsaParams, tokens: &Matrix, attend: &[bool]) -> Result<Matrix> {
    let h = params.w_k.rows();
    for m in [&params.w_k, &params.w_q, &params.w_v, &params.p] {
        if m.shape() != (h, h) {
            return Err(Error::mismatch("lsa_forward", m.shape(), (h, h)));
        }
    }
    if tokens.rows() != h {
        return Err(Error::mismatch("lsa_forward", tokens.shape(), (h, tokens.cols())));
    }
    if attend.len() != tokens.cols() {
        return Err(Error::invalid(format!(
            "attend mask has {} flags for {} tokens",
            attend.len(),
            tokens.cols()
        )));
    }
    if !attend.iter().any(|&a| a) {
        return Err(Error::invalid("attend mask excludes every token"));
    }

    let k = matmul(&params.w_k, tokens)?;
    let q = matmul(&params.w_q, tokens)?;
    let v = matmul(&params.w_v, tokens)?;

    let mut keys: Vec<usize> = (0..tokens.cols()).filter(|&j| attend[j]).collect();
    let cols: Vec<Vec<f64>> = (0..tokens.cols()).map(|j| tokens.col(j)).collect();
    keys.sort_by(|&a, &b| cmp_slices(&cols[a], &cols[b]));

    // M = sum_j v_j k_j^T
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
    let update = matmul(&params.p, &matmul(&m, &q)?)?;
    tokens.add(&update)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub d_x: usize,
    pub d_y: usize,
    pub n: usize,
    pub eta: f64,
    pub seed: Option<u64>,
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Runs the constructed layer on `demos ∘ query` with the query masked out of
/// the keys and values, and compares the query's increment against
/// `(0; -dW x_q)` from [`gd_step`].
pub fn verify_equivalence(w0: &Matrix, demos: &RegressionDemos, query_x: &Matrix, eta: f64) -> Result<EquivalenceReport> {
    if demos.is_empty() {
        return Err(Error::invalid("verify_equivalence needs at least one demonstration"));
    }
    let (d_y, d_x) = w0.shape();
    let n = demos.len();
    let params = build_construction(w0, eta, n)?;
    let tokens = embed_regression_tokens(demos, query_x)?;
    let mut attend = vec![true; n + 1];
    attend[n] = false;
    let out = lsa_forward(&params, &tokens, &attend)?;

    let dw = gd_step(&LinearModel { w: w0.clone(), eta }, demos)?;
    let target_y = matmul(&dw, query_x)?.scale(-1.0);

    let mut diff: f64 = 0.0;
    for r in 0..d_x {
        diff = diff.max((out[(r, n)] - tokens[(r, n)]).abs());
    }
    for r in 0..d_y {
        let increment = out[(d_x + r, n)] - tokens[(d_x + r, n)];
        diff = diff.max((increment - target_y[(r, 0)]).abs());
    }
    Ok(EquivalenceReport { d_x, d_y, n, eta, seed: None, max_abs_diff: diff, pass: diff <= EQUIVALENCE_TOL })
}

/// Fraction of entries with `|entry| < delta`.
pub fn sparsity_ratio(m: &Matrix, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("sparsity threshold must be > 0, got {delta}")));
    }
    let below = m.data().iter().filter(|v| v.abs() < delta).count();
    Ok(below as f64 / m.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSparsity {
    pub sr_kq: f64,
    pub sr_v: f64,
}

/// Exact zero fractions of the constructed `W_K`/`W_Q` and `W_V`, assuming no
/// entry of `W_0` is zero.
pub fn analytic_sparsity(d_x: usize, d_y: usize) -> Result<AnalyticSparsity> {
    if d_x == 0 || d_y == 0 {
        return Err(Error::invalid("analytic_sparsity needs d_x, d_y >= 1"));
    }
    let total = ((d_x + d_y) * (d_x + d_y)) as f64;
    Ok(AnalyticSparsity {
        sr_kq: (total - d_x as f64) / total,
        sr_v: (total - (d_x * d_y) as f64 - d_y as f64) / total,
    })
}

/// Sparsity of every constructed matrix computed from block structure alone, so
/// very wide layers never need to be materialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSparsity {
    pub w_k: f64,
    pub w_q: f64,
    pub w_v: f64,
    pub p: f64,
}

/// `w0_below` is how many entries of `W_0` fall under `delta` (0 for a dense
/// `W_0` whose entries all exceed the threshold).
pub fn block_sparsity(d_x: usize, d_y: usize, eta_over_n: f64, w0_below: u64, delta: f64) -> Result<BlockSparsity> {
    if d_x == 0 || d_y == 0 || !(delta > 0.0) || w0_below > (d_x * d_y) as u64 {
        return Err(Error::invalid("block_sparsity: invalid dimensions, threshold or W_0 count"));
    }
    let h = (d_x + d_y) as u64;
    let total = (h * h) as f64;
    let ones_below = |count: u64| if 1.0 < delta { count } else { 0 };

    let kq = (h * h - d_x as u64) + ones_below(d_x as u64);
    let v_zero = h * h - (d_x * d_y) as u64 - d_y as u64;
    let v = v_zero + w0_below + ones_below(d_y as u64);
    let p_diag = if eta_over_n.abs() < delta { h } else { 0 };
    let p = h * h - h + p_diag;
    Ok(BlockSparsity { w_k: kq as f64 / total, w_q: kq as f64 / total, w_v: v as f64 / total, p: p as f64 / total })
}

/// One row of a sparsity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityRecord {
    pub matrix_name: String,
    pub layer: usize,
    pub delta: f64,
    pub sr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_gaussian, SeededRng};
    use crate::tasks::{apply_ordering, sample_demonstrations, sample_regression_task, DemonstrationSet, RegressionPair};

    #[test]
    fn construction_instance() {
        let p = build_construction(&Matrix::from_rows(&[&[0.5]]), 0.2, 2).unwrap();
        assert_eq!(p.w_k, Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(p.w_q, p.w_k);
        assert_eq!(p.w_v, Matrix::from_rows(&[&[0.0, 0.0], &[0.5, -1.0]]));
        assert_eq!(p.p, Matrix::from_rows(&[&[0.1, 0.0], &[0.0, 0.1]]));

        let z = build_construction(&Matrix::from_rows(&[&[0.5]]), 0.0, 3).unwrap();
        assert_eq!(z.p, Matrix::zeros(2, 2));
    }

    #[test]
    fn zero_demos_diverges() {
        let err = build_construction(&Matrix::from_rows(&[&[0.5]]), 0.2, 0).unwrap_err();
        assert!(matches!(err, Error::ZeroDemonstrations));
        assert!(err.to_string().contains("infinity"));
    }

    fn pair(x: f64, y: f64) -> RegressionPair {
        RegressionPair { x: Matrix::column(&[x]), y: Matrix::column(&[y]) }
    }

    #[test]
    fn gd_step_hand_cases() {
        let demos = DemonstrationSet { task_id: 0, pairs: vec![pair(2.0, 3.0)] };
        let m = LinearModel { w: Matrix::from_rows(&[&[0.0]]), eta: 1.0 };
        assert_eq!(gd_step(&m, &demos).unwrap(), Matrix::from_rows(&[&[6.0]]));

        let exact = DemonstrationSet { task_id: 0, pairs: vec![pair(1.0, 2.0), pair(-3.0, -6.0)] };
        let m = LinearModel { w: Matrix::from_rows(&[&[2.0]]), eta: 0.7 };
        assert_eq!(gd_step(&m, &exact).unwrap(), Matrix::zeros(1, 1));

        let empty = DemonstrationSet { task_id: 0, pairs: vec![] };
        assert!(gd_step(&m, &empty).is_err());
    }

    #[test]
    fn gd_step_is_permutation_invariant_bitwise() {
        let mut rng = SeededRng::new(12);
        let task = sample_regression_task(5, 3, 1.0, 1.0, &mut rng).unwrap();
        let demos = sample_demonstrations(&task, 17, &mut rng);
        let w = sample_gaussian(&mut rng, 3, 5, 0.0, 1.0).unwrap();
        let m = LinearModel { w, eta: 0.3 };
        let base = gd_step(&m, &demos).unwrap();
        for o in crate::numerics::random_orderings(17, 8, &mut rng).unwrap() {
            let permuted = apply_ordering(&demos, &o).unwrap();
            assert_eq!(gd_step(&m, &permuted).unwrap().data(), base.data());
        }
    }

    #[test]
    fn zero_projection_is_identity_map() {
        let mut rng = SeededRng::new(1);
        let w0 = sample_gaussian(&mut rng, 2, 3, 0.0, 1.0).unwrap();
        let params = build_construction(&w0, 0.0, 4).unwrap();
        let tokens = sample_gaussian(&mut rng, 5, 5, 0.0, 1.0).unwrap();
        let out = lsa_forward(&params, &tokens, &[true, true, true, true, false]).unwrap();
        assert_eq!(out, tokens);
        assert!(lsa_forward(&params, &tokens, &[false; 5]).is_err());
    }

    #[test]
    fn query_update_matches_gd_and_ignores_order() {
        let mut rng = SeededRng::new(21);
        for _ in 0..20 {
            let d_x = 1 + rng.below(8);
            let d_y = 1 + rng.below(4);
            let n = 1 + rng.below(32);
            let task = sample_regression_task(d_x, d_y, 1.0, 1.0, &mut rng).unwrap();
            let demos = sample_demonstrations(&task, n, &mut rng);
            let w0 = sample_gaussian(&mut rng, d_y, d_x, 0.0, 1.0).unwrap();
            let xq = sample_gaussian(&mut rng, d_x, 1, 0.0, 1.0).unwrap();
            let r = verify_equivalence(&w0, &demos, &xq, 0.1).unwrap();
            assert!(r.pass, "diff {}", r.max_abs_diff);

            let params = build_construction(&w0, 0.1, n).unwrap();
            let mut mask = vec![true; n + 1];
            mask[n] = false;
            let base = lsa_forward(&params, &embed_regression_tokens(&demos, &xq).unwrap(), &mask).unwrap();
            let o = crate::numerics::random_orderings(n, 1, &mut rng).unwrap().remove(0);
            let rev = crate::tasks::Ordering::reversed(n);
            for ord in [o, rev] {
                let shuffled = apply_ordering(&demos, &ord).unwrap();
                let out = lsa_forward(&params, &embed_regression_tokens(&shuffled, &xq).unwrap(), &mask).unwrap();
                assert_eq!(out.col(n), base.col(n));
            }
        }
    }

    #[test]
    fn zero_eta_gives_zero_diff() {
        let mut rng = SeededRng::new(5);
        let task = sample_regression_task(3, 2, 1.0, 1.0, &mut rng).unwrap();
        let demos = sample_demonstrations(&task, 6, &mut rng);
        let w0 = sample_gaussian(&mut rng, 2, 3, 0.0, 1.0).unwrap();
        let r = verify_equivalence(&w0, &demos, &Matrix::column(&[0.3, -1.0, 2.0]), 0.0).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn perturbed_value_matrix_fails() {
        let mut rng = SeededRng::new(6);
        let task = sample_regression_task(3, 2, 1.0, 1.0, &mut rng).unwrap();
        let demos = sample_demonstrations(&task, 8, &mut rng);
        let w0 = sample_gaussian(&mut rng, 2, 3, 0.0, 1.0).unwrap();
        let xq = sample_gaussian(&mut rng, 3, 1, 0.0, 1.0).unwrap();
        let n = demos.len();
        let tokens = embed_regression_tokens(&demos, &xq).unwrap();
        let mut mask = vec![true; n + 1];
        mask[n] = false;
        let dw = gd_step(&LinearModel { w: w0.clone(), eta: 1.0 }, &demos).unwrap();
        let target = matmul(&dw, &xq).unwrap().scale(-1.0);

        let diff_for = |eps: f64| {
            let mut params = build_construction(&w0, 1.0, n).unwrap();
            params.w_v[(3, 1)] += eps;
            let out = lsa_forward(&params, &tokens, &mask).unwrap();
            (0..2).map(|r| (out[(3 + r, n)] - target[(r, 0)]).abs()).fold(0.0, f64::max)
        };
        let d1 = diff_for(1e-3);
        let d2 = diff_for(2e-3);
        assert!(d1 > EQUIVALENCE_TOL);
        // linear growth with the perturbation
        assert!((d2 / d1 - 2.0).abs() < 1e-6, "{d1} {d2}");
    }

    #[test]
    fn query_update_is_linear_in_eta() {
        let mut rng = SeededRng::new(8);
        let task = sample_regression_task(2, 1, 1.0, 1.0, &mut rng).unwrap();
        let demos = sample_demonstrations(&task, 4, &mut rng);
        let w0 = Matrix::zeros(1, 2);
        let xq = Matrix::column(&[0.5, -0.25]);
        let tokens = embed_regression_tokens(&demos, &xq).unwrap();
        let mask = [true, true, true, true, false];
        let upd = |eta: f64| lsa_forward(&build_construction(&w0, eta, 4).unwrap(), &tokens, &mask).unwrap()[(2, 4)];
        let (a, b) = (upd(0.25), upd(0.5));
        assert!((b - 2.0 * a).abs() <= 1e-15 * b.abs().max(1.0));
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(sparsity_ratio(&Matrix::zeros(3, 4), 1e-9).unwrap(), 1.0);
        assert!(sparsity_ratio(&Matrix::zeros(1, 1), 0.0).is_err());

        let a = analytic_sparsity(1, 1).unwrap();
        assert_eq!(a.sr_kq, 0.75);
        assert_eq!(a.sr_v, 0.5);
        let big = analytic_sparsity(4096, 4096).unwrap();
        assert!(big.sr_kq > 0.9999);
        assert!((big.sr_kq - 0.999939).abs() < 1e-6);
        assert!((big.sr_v - 0.75).abs() < 0.01);
    }

    #[test]
    fn measured_sparsity_matches_analytic() {
        let mut rng = SeededRng::new(2);
        for (d_x, d_y) in [(1, 1), (3, 2), (8, 8), (16, 4)] {
            // Dense W_0 bounded away from zero.
            let w0 = sample_gaussian(&mut rng, d_y, d_x, 0.0, 1.0).unwrap();
            let w0 = Matrix::from_vec(d_y, d_x, w0.data().iter().map(|v| v.signum() * (0.5 + v.abs())).collect()).unwrap();
            let c = build_construction(&w0, 0.1, 4).unwrap();
            let a = analytic_sparsity(d_x, d_y).unwrap();
            assert_eq!(sparsity_ratio(&c.w_k, 0.1).unwrap(), a.sr_kq);
            assert_eq!(sparsity_ratio(&c.w_q, 0.1).unwrap(), a.sr_kq);
            assert_eq!(sparsity_ratio(&c.w_v, 0.1).unwrap(), a.sr_v);
            let b = block_sparsity(d_x, d_y, 0.1 / 4.0, 0, 0.01).unwrap();
            assert_eq!(b.w_k, sparsity_ratio(&c.w_k, 0.01).unwrap());
            assert_eq!(b.w_v, sparsity_ratio(&c.w_v, 0.01).unwrap());
            assert_eq!(b.p, sparsity_ratio(&c.p, 0.01).unwrap());
        }
    }

    #[test]
    fn constructed_value_matrix_sparsity_count() {
        for d in [1usize, 2, 5, 12] {
            let w0 = Matrix::filled(d, d, 0.7);
            let c = build_construction(&w0, 1.0, 1).unwrap();
            let expected = (3 * d * d - d) as f64 / (4 * d * d) as f64;
            assert_eq!(sparsity_ratio(&c.w_v, 0.5).unwrap(), expected);
        }
    }

    #[test]
    fn sparsity_is_monotone_in_delta() {
        let m = sample_gaussian(&mut SeededRng::new(4), 10, 10, 0.0, 0.1).unwrap();
        let mut prev = 0.0;
        for d in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let s = sparsity_ratio(&m, d).unwrap();
            assert!(s >= prev);
            prev = s;
        }
    }
}
