//! Per-layer diagnostics: projection norm product `G_ℓ`, MHA input
//! magnitude `B̄_ℓ`, sensitivity proxy `S_ℓ = (θ/τ)·B̄_ℓ²·G_ℓ`, spread across
//! layers, and log-space attribution of changes in `S_ℓ`.

use serde::{Deserialize, Serialize};

use crate::attention::{self, attention_theta_tilde, MhaWeights, SPECTRAL_SEED};
use crate::blocks::{Arch, ModelConfig, ModelWeights};
use crate::error::{Result, StabilityError};
use crate::linalg::{spectral_norm, Matrix, Rng, DEFAULT_SPECTRAL_ITERS};
use crate::normlayer::layernorm_rows;
use crate::sensitivity::ThetaMethod;

/// Header of the sensitivity CSV, in column order.
pub const RECORD_COLUMNS: [&str; 10] = [
    "step",
    "layer",
    "arch",
    "seed",
    "theta_over_tau",
    "b_bar",
    "g",
    "s",
    "grad_rms",
    "theta_method",
];

/// `‖W^O‖₂ · max_h ‖W_h^Q‖₂ · max_h ‖W_h^K‖₂ · max_h ‖W_h^V‖₂`.
///
/// Each per-head factor is reduced by its own maximum over heads.
pub fn projection_norm_product(w: &MhaWeights, spectral_tol: f64) -> Result<f64> {
    let mut rng = Rng::new(SPECTRAL_SEED);
    let mut norm = |m: &Matrix| spectral_norm(m, spectral_tol, DEFAULT_SPECTRAL_ITERS, &mut rng);
    let (mut q, mut k, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for h in &w.heads {
        q = q.max(norm(&h.wq)?);
        k = k.max(norm(&h.wk)?);
        v = v.max(norm(&h.wv)?);
    }
    Ok(norm(&w.wo)? * q * k * v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub step: u64,
    pub layer: usize,
    pub arch: Arch,
    pub seed: u64,
    /// `max_h θ̃_h / τ` from the realized attention.
    pub theta_over_tau: f64,
    /// `B̄_ℓ = ‖U_ℓ‖_{∞,rms} √d` at the MHA input.
    pub b_bar: f64,
    pub g: f64,
    pub s: f64,
    pub grad_rms: Option<f64>,
    /// Greedy if any row needed the greedy fallback.
    pub theta_method: ThetaMethod,
}

/// One record per layer of `trace` (`[X₀, …, X_N]` from
/// [`crate::blocks::stack_forward`]). The MHA input is `LN₁(X_ℓ)` for pre-LN
/// and `X_ℓ` otherwise.
pub fn sensitivity_proxy(
    trace: &[Matrix],
    weights: &ModelWeights,
    cfg: &ModelConfig,
    grad_rms: Option<&[f64]>,
    step: u64,
) -> Result<Vec<SensitivityRecord>> {
    let n = weights.layers.len();
    if trace.len() != n + 1 {
        return Err(StabilityError::dim(
            "sensitivity_proxy",
            format!("trace has {} states for {n} layers", trace.len()),
        ));
    }
    if let Some(g) = grad_rms {
        if g.len() != n {
            return Err(StabilityError::dim(
                "sensitivity_proxy",
                format!("{} gradient norms for {n} layers", g.len()),
            ));
        }
    }
    let root_d = (cfg.d_model as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for (l, w) in weights.layers.iter().enumerate() {
        let u = if cfg.arch.is_pre_ln() {
            layernorm_rows(&trace[l], &w.ln1)?
        } else {
            trace[l].clone()
        };
        let fwd = attention::mha_forward(&u, &w.mha, cfg.tau)?;
        let mut theta = 0.0f64;
        let mut method = ThetaMethod::Exhaustive;
        for a in &fwd.attn {
            let t = attention_theta_tilde(a)?;
            theta = theta.max(t.theta);
            if !t.method.is_exact() {
                method = t.method;
            }
        }
        let b_bar = crate::linalg::block_inf_rms_norm(&u)? * root_d;
        let g = projection_norm_product(&w.mha, crate::linalg::DEFAULT_SPECTRAL_TOL)?;
        let theta_over_tau = theta / cfg.tau;
        out.push(SensitivityRecord {
            step,
            layer: l,
            arch: cfg.arch,
            seed: cfg.seed,
            theta_over_tau,
            b_bar,
            g,
            s: theta_over_tau * b_bar * b_bar * g,
            grad_rms: grad_rms.map(|v| v[l]),
            theta_method: method,
        });
    }
    Ok(out)
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(StabilityError::domain("coefficient_of_variation", "empty input"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 || !mean.is_finite() {
        return Err(StabilityError::domain(
            "coefficient_of_variation",
            format!("mean must be finite and non-zero, got {mean}"),
        ));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Change of `log S_ℓ` split into its three factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub layer: usize,
    pub d_log_theta_over_tau: f64,
    /// `2 Δlog B̄`
    pub d_log_b_bar_sq: f64,
    pub d_log_g: f64,
    /// `Δlog S` taken directly from the two `s` fields.
    pub d_log_s: f64,
}

impl Attribution {
    pub fn sum_of_parts(&self) -> f64 {
        self.d_log_theta_over_tau + self.d_log_b_bar_sq + self.d_log_g
    }
}

fn positive_log(layer: usize, name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(StabilityError::domain(
            "factor_attribution",
            format!("layer {layer}: {name} = {v} is not positive"),
        ))
    }
}

/// Per-layer `(Δlog θ/τ, 2Δlog B̄, Δlog G)` between two record sets.
pub fn factor_attribution(start: &[SensitivityRecord], end: &[SensitivityRecord]) -> Result<Vec<Attribution>> {
    if start.len() != end.len() {
        return Err(StabilityError::dim(
            "factor_attribution",
            format!("{} start records vs {} end records", start.len(), end.len()),
        ));
    }
    start
        .iter()
        .zip(end)
        .map(|(a, b)| {
            let l = a.layer;
            let lt = |r: &SensitivityRecord| positive_log(l, "theta_over_tau", r.theta_over_tau);
            let lb = |r: &SensitivityRecord| positive_log(l, "b_bar", r.b_bar);
            let lg = |r: &SensitivityRecord| positive_log(l, "g", r.g);
            let ls = |r: &SensitivityRecord| positive_log(l, "s", r.s);
            Ok(Attribution {
                layer: l,
                d_log_theta_over_tau: lt(b)? - lt(a)?,
                d_log_b_bar_sq: 2.0 * (lb(b)? - lb(a)?),
                d_log_g: lg(b)? - lg(a)?,
                d_log_s: ls(b)? - ls(a)?,
            })
        })
        .collect()
}
