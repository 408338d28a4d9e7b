//! Multi-head attention with explicit temperature, its analytic
//! derivatives, and the value/attention pathway Lipschitz bound.
//!
//! Head `h` computes `A_h = softmax(Q_h K_hᵀ / (τ √d_h))` and `O_h = A_h V_h`;
//! the output is `[O_1 ‖ … ‖ O_H] W^O`. Under the block-∞/RMS norm the
//! Lipschitz constant is bounded by
//! `‖W^O‖₂ Σ_h (‖W_h^V‖₂ + (θ̃_h/τ) Φ_h)` with
//! `Φ_h = 2 B̄_U² ‖W_h^Q‖₂ ‖W_h^K‖₂ ‖W_h^V‖₂ / √d_h` and
//! `B̄_U = ‖U‖_{∞,rms} √d`. Nothing in the bound depends on sequence length.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StabilityError};
use crate::linalg::{
    block_inf_rms_norm, dot, spectral_norm, Matrix, Rng, DEFAULT_SPECTRAL_ITERS,
};
use crate::sensitivity::{softmax_row, theta_auto, ProbDist, ThetaMethod, EXHAUSTIVE_MAX_LEN};

/// Seed for the power-iteration start vectors used by the bound routines.
pub const SPECTRAL_SEED: u64 = 0x5eed_5eed;

/// Query/key/value projections of one head, each `d × d_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// All heads plus the shared `(H·d_h) × d` output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaWeights {
    pub heads: Vec<HeadWeights>,
    pub wo: Matrix,
}

impl MhaWeights {
    pub fn zeros(d: usize, n_heads: usize, d_head: usize) -> Self {
        let head = HeadWeights {
            wq: Matrix::zeros(d, d_head),
            wk: Matrix::zeros(d, d_head),
            wv: Matrix::zeros(d, d_head),
        };
        Self {
            heads: vec![head; n_heads],
            wo: Matrix::zeros(n_heads * d_head, d),
        }
    }

    pub fn random(d: usize, n_heads: usize, d_head: usize, std: f64, rng: &mut Rng) -> Self {
        let heads = (0..n_heads)
            .map(|_| HeadWeights {
                wq: rng.normal_matrix(d, d_head, std),
                wk: rng.normal_matrix(d, d_head, std),
                wv: rng.normal_matrix(d, d_head, std),
            })
            .collect();
        Self {
            heads,
            wo: rng.normal_matrix(n_heads * d_head, d, std),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.heads.first().map_or(0, |h| h.wq.cols())
    }

    pub fn d_model(&self) -> usize {
        self.wo.cols()
    }

    /// Checks every projection against `d_model`, returning the offending
    /// tensor name on mismatch.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.heads.is_empty() {
            return Err(StabilityError::dim("MhaWeights", "no heads"));
        }
        let dh = self.d_head();
        for (h, head) in self.heads.iter().enumerate() {
            for (name, m) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
                if m.shape() != (d_model, dh) {
                    return Err(StabilityError::dim(
                        "MhaWeights",
                        format!("{name}[{h}] is {}x{}, expected {d_model}x{dh}", m.rows(), m.cols()),
                    ));
                }
            }
        }
        let want = (self.heads.len() * dh, d_model);
        if self.wo.shape() != want {
            return Err(StabilityError::dim(
                "MhaWeights",
                format!("wo is {}x{}, expected {}x{}", self.wo.rows(), self.wo.cols(), want.0, want.1),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
}

/// Forward intermediates reused by the derivative routines.
#[derive(Debug, Clone)]
pub(crate) struct MhaCache {
    heads: Vec<HeadCache>,
    pub output: Matrix,
    score_scale: f64,
}

impl MhaCache {
    pub fn attention(&self) -> Vec<Matrix> {
        self.heads.iter().map(|h| h.a.clone()).collect()
    }
}

/// Output of [`mha_forward`].
#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Matrix,
    /// One `L × L` row-stochastic matrix per head.
    pub attn: Vec<Matrix>,
}

fn check_inputs(u: &Matrix, w: &MhaWeights, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(StabilityError::domain("mha", format!("tau must be > 0, got {tau}")));
    }
    if u.rows() == 0 {
        return Err(StabilityError::dim("mha", "empty input"));
    }
    w.validate(u.cols())
}

pub(crate) fn forward_cached(u: &Matrix, w: &MhaWeights, tau: f64) -> MhaCache {
    let dh = w.d_head();
    let score_scale = 1.0 / (tau * (dh as f64).sqrt());
    let mut concat = Matrix::zeros(u.rows(), w.n_heads() * dh);
    let mut heads = Vec::with_capacity(w.n_heads());
    for (h, hw) in w.heads.iter().enumerate() {
        let q = u.dot(&hw.wq);
        let k = u.dot(&hw.wk);
        let v = u.dot(&hw.wv);
        let scores = q.dot(&k.transpose()).scaled(score_scale);
        let mut a = Matrix::zeros(u.rows(), u.rows());
        for i in 0..u.rows() {
            a.row_mut(i).copy_from_slice(&softmax_row(scores.row(i), 1.0));
        }
        concat.set_col_block(h * dh, &a.dot(&v));
        heads.push(HeadCache { q, k, v, a });
    }
    MhaCache {
        heads,
        output: concat.dot(&w.wo),
        score_scale,
    }
}

/// Multi-head attention forward pass (no masking).
pub fn mha_forward(u: &Matrix, w: &MhaWeights, tau: f64) -> Result<MhaOutput> {
    check_inputs(u, w, tau)?;
    let cache = forward_cached(u, w, tau);
    Ok(MhaOutput {
        attn: cache.attention(),
        output: cache.output,
    })
}

/// Row-wise softmax derivative: `a ⊙ (t − ⟨a, t⟩)` for each row.
fn softmax_rows_apply(a: &Matrix, t: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let ti = t.row(i);
        let m = dot(ai, ti);
        for (o, (&p, &x)) in out.row_mut(i).iter_mut().zip(ai.iter().zip(ti)) {
            *o = p * (x - m);
        }
    }
    out
}

/// Forward-mode derivative `J_MHA(U) · vec(T)`.
pub(crate) fn jvp_cached(cache: &MhaCache, w: &MhaWeights, tangent: &Matrix) -> Matrix {
    let dh = w.d_head();
    let mut dconcat = Matrix::zeros(tangent.rows(), w.n_heads() * dh);
    for (h, (hw, hc)) in w.heads.iter().zip(&cache.heads).enumerate() {
        let dq = tangent.dot(&hw.wq);
        let dk = tangent.dot(&hw.wk);
        let dv = tangent.dot(&hw.wv);
        let ds = dq
            .dot(&hc.k.transpose())
            .add(&hc.q.dot(&dk.transpose()))
            .scaled(cache.score_scale);
        let da = softmax_rows_apply(&hc.a, &ds);
        let d_o = da.dot(&hc.v).add(&hc.a.dot(&dv));
        dconcat.set_col_block(h * dh, &d_o);
    }
    dconcat.dot(&w.wo)
}

/// Reverse-mode product `vec(G)ᵀ · J_MHA(U)`, reshaped to `L × d`.
pub(crate) fn vjp_cached(cache: &MhaCache, w: &MhaWeights, upstream: &Matrix) -> Matrix {
    let dh = w.d_head();
    let dconcat = upstream.dot(&w.wo.transpose());
    let mut du = Matrix::zeros(upstream.rows(), w.d_model());
    for (h, (hw, hc)) in w.heads.iter().zip(&cache.heads).enumerate() {
        let d_o = dconcat.col_block(h * dh, dh);
        let da = d_o.dot(&hc.v.transpose());
        let dv = hc.a.transpose().dot(&d_o);
        let ds = softmax_rows_apply(&hc.a, &da).scaled(cache.score_scale);
        let dq = ds.dot(&hc.k);
        let dk = ds.transpose().dot(&hc.q);
        du.add_assign(&dq.dot(&hw.wq.transpose()));
        du.add_assign(&dk.dot(&hw.wk.transpose()));
        du.add_assign(&dv.dot(&hw.wv.transpose()));
    }
    du
}

/// `vec(G)ᵀ · J_MHA(U)` as an `L × d` matrix.
pub fn mha_vjp(u: &Matrix, w: &MhaWeights, tau: f64, upstream: &Matrix) -> Result<Matrix> {
    check_inputs(u, w, tau)?;
    if upstream.shape() != u.shape() {
        return Err(StabilityError::dim(
            "mha_vjp",
            format!("upstream {:?} vs input {:?}", upstream.shape(), u.shape()),
        ));
    }
    Ok(vjp_cached(&forward_cached(u, w, tau), w, upstream))
}

/// Dense `Ld × Ld` Jacobian of the flattened map, one JVP per column.
pub fn mha_jacobian(u: &Matrix, w: &MhaWeights, tau: f64) -> Result<Matrix> {
    check_inputs(u, w, tau)?;
    Ok(jacobian_cached(&forward_cached(u, w, tau), w, u.rows(), u.cols()))
}

pub(crate) fn jacobian_cached(cache: &MhaCache, w: &MhaWeights, rows: usize, cols: usize) -> Matrix {
    let n = rows * cols;
    let mut jac = Matrix::zeros(n, n);
    let mut tangent = Matrix::zeros(rows, cols);
    for c in 0..n {
        tangent.data_mut()[c] = 1.0;
        let col = jvp_cached(cache, w, &tangent);
        tangent.data_mut()[c] = 0.0;
        for (r, &v) in col.data().iter().enumerate() {
            jac[(r, c)] = v;
        }
    }
    jac
}

/// Largest balanced-mass factor among the rows of one head's attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaTilde {
    pub theta: f64,
    pub method: ThetaMethod,
}

/// `θ̃ = max_i θ(A[i, :])`, exact for rows up to length 20, greedy beyond.
pub fn attention_theta_tilde(attn: &Matrix) -> Result<ThetaTilde> {
    let mut best = 0.0f64;
    let mut method = ThetaMethod::Exhaustive;
    for row in attn.row_iter() {
        let p = ProbDist::new(row.to_vec())?;
        let r = theta_auto(&p, EXHAUSTIVE_MAX_LEN);
        method = r.method;
        best = best.max(r.theta);
    }
    Ok(ThetaTilde { theta: best, method })
}

/// Spectral norms of every projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNorms {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: f64,
}

pub fn projection_norms(w: &MhaWeights, tol: f64, rng: &mut Rng) -> Result<ProjectionNorms> {
    let mut out = ProjectionNorms {
        wq: Vec::with_capacity(w.n_heads()),
        wk: Vec::with_capacity(w.n_heads()),
        wv: Vec::with_capacity(w.n_heads()),
        wo: spectral_norm(&w.wo, tol, DEFAULT_SPECTRAL_ITERS, rng)?,
    };
    for h in &w.heads {
        out.wq.push(spectral_norm(&h.wq, tol, DEFAULT_SPECTRAL_ITERS, rng)?);
        out.wk.push(spectral_norm(&h.wk, tol, DEFAULT_SPECTRAL_ITERS, rng)?);
        out.wv.push(spectral_norm(&h.wv, tol, DEFAULT_SPECTRAL_ITERS, rng)?);
    }
    Ok(out)
}

/// Per-head terms of the MHA Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaBoundBreakdown {
    /// `‖W_h^V‖₂`
    pub value_pathway: Vec<f64>,
    /// `(θ̃_h/τ) Φ_h`
    pub attn_pathway: Vec<f64>,
    pub phi: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub b_u: f64,
    pub wo_norm: f64,
    pub tau: f64,
    pub d_head: usize,
    pub total: f64,
}

/// Assembles the bound from precomputed norms, θ̃ values and `B̄_U`.
pub fn assemble_mha_bound(
    norms: &ProjectionNorms,
    theta_tilde: &[f64],
    b_u: f64,
    tau: f64,
    d_head: usize,
) -> MhaBoundBreakdown {
    assert_eq!(theta_tilde.len(), norms.wv.len(), "one theta per head");
    let root_dh = (d_head as f64).sqrt();
    let phi: Vec<f64> = (0..norms.wv.len())
        .map(|h| 2.0 * b_u * b_u / root_dh * norms.wq[h] * norms.wk[h] * norms.wv[h])
        .collect();
    let attn_pathway: Vec<f64> = phi.iter().zip(theta_tilde).map(|(p, t)| t / tau * p).collect();
    let total = norms.wo
        * norms
            .wv
            .iter()
            .zip(&attn_pathway)
            .map(|(v, a)| v + a)
            .sum::<f64>();
    MhaBoundBreakdown {
        value_pathway: norms.wv.clone(),
        attn_pathway,
        phi,
        theta_tilde: theta_tilde.to_vec(),
        b_u,
        wo_norm: norms.wo,
        tau,
        d_head,
        total,
    }
}

/// `B̄_U = ‖U‖_{∞,rms} √d`.
pub fn input_magnitude(u: &Matrix) -> Result<f64> {
    Ok(block_inf_rms_norm(u)? * (u.cols() as f64).sqrt())
}

/// Local Lipschitz bound at `U` using the realized attention for θ̃.
pub fn mha_lipschitz_bound(
    u: &Matrix,
    w: &MhaWeights,
    tau: f64,
    spectral_tol: f64,
) -> Result<MhaBoundBreakdown> {
    check_inputs(u, w, tau)?;
    let cache = forward_cached(u, w, tau);
    let thetas = cache
        .heads
        .iter()
        .map(|h| attention_theta_tilde(&h.a).map(|t| t.theta))
        .collect::<Result<Vec<_>>>()?;
    let norms = projection_norms(w, spectral_tol, &mut Rng::new(SPECTRAL_SEED))?;
    Ok(assemble_mha_bound(&norms, &thetas, input_magnitude(u)?, tau, w.d_head()))
}

/// Input-independent bound with θ̃ = 1 for every head.
pub fn mha_worst_case_bound(
    w: &MhaWeights,
    b_u: f64,
    tau: f64,
    spectral_tol: f64,
) -> Result<MhaBoundBreakdown> {
    if !(tau > 0.0) {
        return Err(StabilityError::domain("mha_worst_case_bound", format!("tau = {tau}")));
    }
    let norms = projection_norms(w, spectral_tol, &mut Rng::new(SPECTRAL_SEED))?;
    Ok(assemble_mha_bound(&norms, &vec![1.0; w.n_heads()], b_u, tau, w.d_head()))
}

/// Result of [`mha_empirical_lipschitz`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLipschitz {
    pub trials: usize,
    /// Largest observed `‖MHA(U′) − MHA(U)‖ / ‖U′ − U‖`.
    pub max_ratio: f64,
    /// Largest ratio divided by the bound evaluated for that pair.
    pub max_ratio_over_bound: f64,
    /// Pairs whose ratio exceeded their bound.
    pub violations: usize,
}

/// Perturbation scales cycled through by the empirical samplers.
pub const PERTURBATION_SCALES: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Random perturbation of block-∞/RMS size `scale · max(‖U‖, 1)`. Odd
/// trials perturb a single token.
pub(crate) fn perturbation(u: &Matrix, trial: usize, rng: &mut Rng) -> Result<Matrix> {
    let scale = PERTURBATION_SCALES[trial % PERTURBATION_SCALES.len()];
    let mut delta = rng.normal_matrix(u.rows(), u.cols(), 1.0);
    if trial % 2 == 1 {
        let keep = rng.below(u.rows());
        for i in (0..u.rows()).filter(|&i| i != keep) {
            delta.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let size = block_inf_rms_norm(&delta)?;
    let target = scale * block_inf_rms_norm(u)?.max(1.0);
    Ok(delta.scaled(target / size))
}

/// Samples Lipschitz ratios under the block-∞/RMS norm and compares each
/// against the bound evaluated at `max(B̄_U, B̄_U′)` and, per head,
/// `max(θ̃_h(U), θ̃_h(U′))`.
pub fn mha_empirical_lipschitz(
    u: &Matrix,
    w: &MhaWeights,
    tau: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<EmpiricalLipschitz> {
    check_inputs(u, w, tau)?;
    if trials == 0 {
        return Err(StabilityError::domain("mha_empirical_lipschitz", "trials must be >= 1"));
    }
    let norms = projection_norms(w, crate::linalg::DEFAULT_SPECTRAL_TOL, &mut Rng::new(SPECTRAL_SEED))?;
    let base = forward_cached(u, w, tau);
    let base_theta = head_thetas(&base)?;
    let base_b = input_magnitude(u)?;

    let mut out = EmpiricalLipschitz {
        trials,
        max_ratio: 0.0,
        max_ratio_over_bound: 0.0,
        violations: 0,
    };
    for t in 0..trials {
        let delta = perturbation(u, t, rng)?;
        let u2 = u.add(&delta);
        let other = forward_cached(&u2, w, tau);
        let ratio = block_inf_rms_norm(&other.output.sub(&base.output))? / block_inf_rms_norm(&delta)?;

        let thetas: Vec<f64> = head_thetas(&other)?
            .iter()
            .zip(&base_theta)
            .map(|(a, b)| a.max(*b))
            .collect();
        let b_u = base_b.max(input_magnitude(&u2)?);
        let bound = assemble_mha_bound(&norms, &thetas, b_u, tau, w.d_head()).total;

        out.max_ratio = out.max_ratio.max(ratio);
        if bound > 0.0 {
            out.max_ratio_over_bound = out.max_ratio_over_bound.max(ratio / bound);
        }
        if ratio > bound * (1.0 + 1e-9) + 1e-12 {
            out.violations += 1;
        }
    }
    Ok(out)
}

fn head_thetas(cache: &MhaCache) -> Result<Vec<f64>> {
    cache
        .heads
        .iter()
        .map(|h| attention_theta_tilde(&h.a).map(|t| t.theta))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_difference_jacobian, row_stochastic_mix};

    fn setup(seed: u64, l: usize, d: usize, h: usize, std: f64) -> (Matrix, MhaWeights) {
        let mut rng = Rng::new(seed);
        let u = rng.normal_matrix(l, d, 1.0);
        let w = MhaWeights::random(d, h, d / h, std, &mut rng);
        (u, w)
    }

    /// Second implementation written straight from the definitions, entry by
    /// entry, with no shared helpers.
    #[allow(clippy::needless_range_loop)]
    fn reference_forward(u: &Matrix, w: &MhaWeights, tau: f64) -> Matrix {
        let (l, d) = u.shape();
        let dh = w.d_head();
        let mut concat = vec![vec![0.0; w.n_heads() * dh]; l];
        for (h, hw) in w.heads.iter().enumerate() {
            let proj = |m: &Matrix, i: usize, c: usize| (0..d).map(|k| u[(i, k)] * m[(k, c)]).sum::<f64>();
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| {
                        (0..dh).map(|c| proj(&hw.wq, i, c) * proj(&hw.wk, j, c)).sum::<f64>()
                            / (tau * (dh as f64).sqrt())
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..dh {
                    concat[i][h * dh + c] =
                        (0..l).map(|j| scores[j].exp() / z * proj(&hw.wv, j, c)).sum();
                }
            }
        }
        Matrix::from_fn(l, d, |i, j| (0..concat[i].len()).map(|k| concat[i][k] * w.wo[(k, j)]).sum())
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut rng = Rng::new(1);
        let u = rng.normal_matrix(5, 4, 1.0);
        let out = mha_forward(&u, &MhaWeights::zeros(4, 2, 2), 1.0).unwrap();
        assert_eq!(out.output.max_abs(), 0.0);
        for a in &out.attn {
            assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (u, w) = setup(2, 1, 4, 2, 0.5);
        let out = mha_forward(&u, &w, 1.0).unwrap();
        for a in &out.attn {
            assert_eq!(a.data(), &[1.0]);
        }
        let mut concat = Matrix::zeros(1, 4);
        for (h, hw) in w.heads.iter().enumerate() {
            concat.set_col_block(h * 2, &u.dot(&hw.wv));
        }
        assert!(out.output.sub(&concat.dot(&w.wo)).max_abs() < 1e-14);
    }

    #[test]
    fn matches_reference_forward() {
        let (u, w) = setup(42, 2, 2, 1, 0.7);
        let got = mha_forward(&u, &w, 1.0).unwrap().output;
        assert!(got.sub(&reference_forward(&u, &w, 1.0)).max_abs() < 1e-12);
        let (u, w) = setup(43, 5, 6, 3, 0.5);
        let got = mha_forward(&u, &w, 0.7).unwrap().output;
        assert!(got.sub(&reference_forward(&u, &w, 0.7)).max_abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (u, w) = setup(3, 7, 8, 2, 1.0);
        for a in mha_forward(&u, &w, 0.5).unwrap().attn {
            for r in a.row_iter() {
                ProbDist::new(r.to_vec()).unwrap();
            }
            // and mixing through them never grows the block norm
            let v = u.dot(&w.heads[0].wv);
            let mixed = row_stochastic_mix(&a, &v).unwrap();
            assert!(block_inf_rms_norm(&mixed).unwrap() <= block_inf_rms_norm(&v).unwrap() + 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_tensor() {
        let (u, mut w) = setup(4, 3, 4, 2, 1.0);
        w.heads[1].wk = Matrix::zeros(4, 3);
        let err = mha_forward(&u, &w, 1.0).unwrap_err();
        assert!(err.to_string().contains("wk[1]"), "{err}");
        let (u, w) = setup(4, 3, 4, 2, 1.0);
        assert!(mha_forward(&u, &w, 0.0).is_err());
        assert!(mha_forward(&Matrix::zeros(3, 6), &w, 1.0).is_err());
    }

    #[test]
    fn jacobian_matches_fd() {
        let (u, w) = setup(5, 4, 6, 2, 0.6);
        let tau = 0.8;
        let j = mha_jacobian(&u, &w, tau).unwrap();
        let fd = finite_difference_jacobian(|m| Ok(mha_forward(m, &w, tau)?.output), &u, 1e-5).unwrap();
        assert!(j.sub(&fd).max_abs() < 1e-8, "{}", j.sub(&fd).max_abs());
    }

    #[test]
    fn vjp_matches_dense_jacobian() {
        let (u, w) = setup(6, 4, 6, 3, 0.6);
        let mut rng = Rng::new(60);
        let g = rng.normal_matrix(4, 6, 1.0);
        let dense = Matrix::row_vector(g.data()).dot(&mha_jacobian(&u, &w, 1.3).unwrap());
        let vjp = mha_vjp(&u, &w, 1.3, &g).unwrap();
        assert!(Matrix::row_vector(vjp.data()).sub(&dense).max_abs() < 1e-12);
    }

    #[test]
    fn theta_tilde_examples() {
        let uniform = Matrix::from_fn(8, 8, |_, _| 0.125);
        assert_eq!(attention_theta_tilde(&uniform).unwrap().theta, 1.0);
        assert_eq!(attention_theta_tilde(&Matrix::identity(8)).unwrap().theta, 0.0);
        let mut mixed = Matrix::identity(8);
        mixed.row_mut(3).iter_mut().for_each(|v| *v = 0.125);
        assert_eq!(attention_theta_tilde(&mixed).unwrap().theta, 1.0);
        let long = Matrix::from_fn(2, 64, |_, _| 1.0 / 64.0);
        assert_eq!(attention_theta_tilde(&long).unwrap().method, ThetaMethod::Greedy);
    }

    #[test]
    fn bound_formula_with_unit_norms() {
        let norms = ProjectionNorms {
            wq: vec![1.0],
            wk: vec![1.0],
            wv: vec![1.0],
            wo: 1.0,
        };
        let b = assemble_mha_bound(&norms, &[1.0], 1.0, 1.0, 4);
        assert!((b.phi[0] - 1.0).abs() < 1e-15);
        assert!((b.total - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_values_zero_bound() {
        let (u, mut w) = setup(7, 4, 4, 2, 1.0);
        for h in &mut w.heads {
            h.wv = Matrix::zeros(4, 2);
        }
        assert_eq!(mha_lipschitz_bound(&u, &w, 1.0, 1e-8).unwrap().total, 0.0);
    }

    #[test]
    fn attn_pathway_is_inverse_in_tau() {
        let (u, w) = setup(8, 6, 8, 2, 0.3);
        let b1 = mha_lipschitz_bound(&u, &w, 1.0, 1e-10).unwrap();
        let norms = projection_norms(&w, 1e-10, &mut Rng::new(SPECTRAL_SEED)).unwrap();
        let b2 = assemble_mha_bound(&norms, &b1.theta_tilde, b1.b_u, 2.0, w.d_head());
        for (a, b) in b1.attn_pathway.iter().zip(&b2.attn_pathway) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn total_is_sum_of_pathways() {
        let (u, w) = setup(9, 5, 8, 4, 0.4);
        let b = mha_lipschitz_bound(&u, &w, 1.0, 1e-8).unwrap();
        let sum: f64 = b.value_pathway.iter().zip(&b.attn_pathway).map(|(v, a)| v + a).sum();
        assert!((b.total - b.wo_norm * sum).abs() <= 1e-12 * b.total);
        assert!(b.theta_tilde.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn empirical_ratio_below_bound() {
        let (u, w) = setup(42, 8, 8, 2, 0.5);
        let mut rng = Rng::new(42);
        let e = mha_empirical_lipschitz(&u, &w, 1.0, 200, &mut rng).unwrap();
        assert_eq!(e.violations, 0);
        assert!(e.max_ratio > 0.0);
        assert!(e.max_ratio_over_bound <= 1.0);
    }

    #[test]
    fn empirical_zero_weights() {
        let mut rng = Rng::new(1);
        let u = rng.normal_matrix(4, 4, 1.0);
        let e = mha_empirical_lipschitz(&u, &MhaWeights::zeros(4, 2, 2), 1.0, 10, &mut rng).unwrap();
        assert_eq!(e.max_ratio, 0.0);
        assert!(mha_empirical_lipschitz(&u, &MhaWeights::zeros(4, 2, 2), 1.0, 0, &mut rng).is_err());
    }
}
