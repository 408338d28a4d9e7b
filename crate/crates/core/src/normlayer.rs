//! LayerNorm forward pass, its Jacobian, and a matrix-free vector-Jacobian
//! product.
//!
//! `LN(x) = γ ⊙ (x − μ1)/σ + shift` with the biased variance and
//! `σ = sqrt(var + ε)`. The Jacobian is
//! `J = Diag(γ)(P − x̂x̂ᵀ/d)/σ` where `P = I − 11ᵀ/d` and `x̂ = (x − μ1)/σ`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StabilityError};
use crate::linalg::{dot, Matrix};

/// Default stability floor ε.
pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Scale, shift and ε of one LayerNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(gamma: Vec<f64>, shift: Vec<f64>, eps: f64) -> Result<Self> {
        let p = Self { gamma, shift, eps };
        p.validate()?;
        Ok(p)
    }

    /// γ = 1, shift = 0.
    pub fn identity(d: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; d],
            shift: vec![0.0; d],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.shift.len() {
            return Err(StabilityError::dim(
                "LayerNormParams",
                format!("gamma has {} entries, shift {}", self.gamma.len(), self.shift.len()),
            ));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(StabilityError::domain("LayerNormParams", format!("eps = {}", self.eps)));
        }
        if self.gamma.iter().chain(&self.shift).any(|v| !v.is_finite()) {
            return Err(StabilityError::domain("LayerNormParams", "gamma/shift must be finite"));
        }
        Ok(())
    }

    pub fn gamma_inf(&self) -> f64 {
        inf_norm(&self.gamma)
    }

    pub fn shift_inf(&self) -> f64 {
        inf_norm(&self.shift)
    }

    /// `‖γ‖_∞ + ‖shift‖_∞`, the RMS ceiling of any LayerNorm output.
    pub fn output_rms_bound(&self) -> f64 {
        self.gamma_inf() + self.shift_inf()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Per-token normalization statistics.
#[derive(Debug, Clone)]
pub(crate) struct Normalized {
    pub x_hat: Vec<f64>,
    pub sigma: f64,
}

pub(crate) fn normalize(x: &[f64], eps: f64) -> Normalized {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let centered: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let var = dot(&centered, &centered) / d;
    let sigma = (var + eps).sqrt();
    let x_hat = if sigma > 0.0 {
        centered.iter().map(|c| c / sigma).collect()
    } else {
        vec![0.0; x.len()]
    };
    Normalized { x_hat, sigma }
}

fn check_dim(op: &'static str, x: &[f64], params: &LayerNormParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(StabilityError::dim(
            op,
            format!("input has {} entries, params expect {}", x.len(), params.dim()),
        ));
    }
    if x.is_empty() {
        return Err(StabilityError::dim(op, "empty input"));
    }
    Ok(())
}

/// LayerNorm of a single token.
pub fn layernorm(x: &[f64], params: &LayerNormParams) -> Result<Vec<f64>> {
    check_dim("layernorm", x, params)?;
    let n = normalize(x, params.eps);
    let out: Vec<f64> = n
        .x_hat
        .iter()
        .zip(&params.gamma)
        .zip(&params.shift)
        .map(|((h, g), b)| g * h + b)
        .collect();
    debug_assert!(
        (dot(&out, &out) / out.len() as f64).sqrt() <= params.output_rms_bound() * (1.0 + 1e-12) + 1e-300,
        "LayerNorm output exceeded its RMS ceiling"
    );
    Ok(out)
}

/// LayerNorm applied to every row of `x`.
pub fn layernorm_rows(x: &Matrix, params: &LayerNormParams) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let y = layernorm(x.row(i), params)?;
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

/// Dense d×d Jacobian. Requires `d ≥ 2`.
pub fn layernorm_jacobian(x: &[f64], params: &LayerNormParams) -> Result<Matrix> {
    check_dim("layernorm_jacobian", x, params)?;
    if x.len() < 2 {
        return Err(StabilityError::dim(
            "layernorm_jacobian",
            "d = 1 LayerNorm is degenerate (x̂ = 0)",
        ));
    }
    let d = x.len();
    let n = normalize(x, params.eps);
    let inv_d = 1.0 / d as f64;
    Ok(Matrix::from_fn(d, d, |i, j| {
        let p = if i == j { 1.0 - inv_d } else { -inv_d };
        params.gamma[i] * (p - n.x_hat[i] * n.x_hat[j] * inv_d) / n.sigma
    }))
}

/// `upstreamᵀ · J_LN(x)` without forming J.
pub fn layernorm_vjp(x: &[f64], upstream: &[f64], params: &LayerNormParams) -> Result<Vec<f64>> {
    check_dim("layernorm_vjp", x, params)?;
    if upstream.len() != x.len() {
        return Err(StabilityError::dim(
            "layernorm_vjp",
            format!("upstream has {} entries, input {}", upstream.len(), x.len()),
        ));
    }
    let n = normalize(x, params.eps);
    Ok(vjp_with(&n, upstream, &params.gamma))
}

pub(crate) fn vjp_with(n: &Normalized, upstream: &[f64], gamma: &[f64]) -> Vec<f64> {
    if n.sigma == 0.0 {
        return vec![0.0; upstream.len()];
    }
    let d = upstream.len() as f64;
    let v: Vec<f64> = upstream.iter().zip(gamma).map(|(g, s)| g * s).collect();
    let mean_v = v.iter().sum::<f64>() / d;
    let proj = dot(&n.x_hat, &v) / d;
    v.iter()
        .zip(&n.x_hat)
        .map(|(vi, hi)| (vi - mean_v - hi * proj) / n.sigma)
        .collect()
}

/// Forward-mode product `J_LN(x) · t`.
pub(crate) fn jvp_with(n: &Normalized, tangent: &[f64], gamma: &[f64]) -> Vec<f64> {
    if n.sigma == 0.0 {
        return vec![0.0; tangent.len()];
    }
    let d = tangent.len() as f64;
    let mean_t = tangent.iter().sum::<f64>() / d;
    let proj = dot(&n.x_hat, tangent) / d;
    tangent
        .iter()
        .zip(&n.x_hat)
        .zip(gamma)
        .map(|((ti, hi), g)| g * (ti - mean_t - hi * proj) / n.sigma)
        .collect()
}

/// `‖γ‖_∞ / √ε`; infinite when ε = 0.
pub fn ln_lipschitz_bound(params: &LayerNormParams) -> f64 {
    params.gamma_inf() / params.eps.sqrt()
}
