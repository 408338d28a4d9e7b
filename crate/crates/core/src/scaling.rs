//! Depth scaling: per-map scale factors from the path-length exponent,
//! DeepNorm's residual multiplier, compounding products and temperature
//! warmup.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StabilityError};

/// Residual sublayers per layer under the DeepNorm convention.
pub const DEEPNORM_SUBLAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Plain,
    #[serde(rename = "deepnorm")]
    DeepNorm,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Plain => "plain",
            Convention::DeepNorm => "deepnorm",
        }
    }

    pub fn sublayers_per_layer(self) -> usize {
        match self {
            Convention::Plain => 1,
            Convention::DeepNorm => DEEPNORM_SUBLAYERS,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = StabilityError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Convention::Plain),
            "deepnorm" | "deep_norm" => Ok(Convention::DeepNorm),
            other => Err(StabilityError::domain(
                "Convention",
                format!("unknown convention {other:?} (expected plain or deepnorm)"),
            )),
        }
    }
}

/// DeepNorm's residual multiplier `(2N)^{-1/4}`.
pub fn deepnorm_alpha(n_layers: usize) -> f64 {
    ((DEEPNORM_SUBLAYERS * n_layers) as f64).powf(-0.25)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecommendation {
    /// Multiplicative maps along the sensitive pathway.
    pub m: usize,
    pub n_layers: usize,
    pub convention: Convention,
    pub sublayers_per_layer: usize,
    /// Per-map scale `(s·N)^{-1/m}`.
    pub beta: f64,
    /// Residual multiplier: `(2N)^{-1/4}` for DeepNorm, 1 otherwise.
    pub alpha: f64,
    pub rationale: String,
}

/// Recommendation with the convention's default sublayer count.
pub fn recommend_scaling(m: usize, n_layers: usize, convention: Convention) -> Result<ScalingRecommendation> {
    recommend_scaling_with(m, n_layers, convention, convention.sublayers_per_layer())
}

/// Recommendation with an explicit number of residual sublayers per layer
/// multiplying the depth.
pub fn recommend_scaling_with(
    m: usize,
    n_layers: usize,
    convention: Convention,
    sublayers_per_layer: usize,
) -> Result<ScalingRecommendation> {
    if m == 0 || n_layers == 0 || sublayers_per_layer == 0 {
        return Err(StabilityError::domain(
            "recommend_scaling",
            format!("m, N and sublayers must be >= 1 (got m={m}, N={n_layers}, s={sublayers_per_layer})"),
        ));
    }
    let paths = (sublayers_per_layer * n_layers) as f64;
    let beta = paths.powf(-1.0 / m as f64);
    let alpha = match convention {
        Convention::Plain => 1.0,
        Convention::DeepNorm => deepnorm_alpha(n_layers),
    };
    let rationale = format!(
        "{m} multiplicative maps compound over {sublayers_per_layer}x{n_layers} residual paths; \
         scaling each map by ({sublayers_per_layer}*{n_layers})^(-1/{m}) keeps every path's \
         perturbation at O(1/({sublayers_per_layer}*{n_layers})) so the depth product stays bounded"
    );
    Ok(ScalingRecommendation {
        m,
        n_layers,
        convention,
        sublayers_per_layer,
        beta,
        alpha,
        rationale,
    })
}

fn check_product_args(c0: f64, per_layer: f64) -> Result<()> {
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(StabilityError::domain("depth_compounding_product", format!("C0 must be > 0, got {c0}")));
    }
    if !(per_layer >= 0.0 && per_layer.is_finite()) {
        return Err(StabilityError::domain(
            "depth_compounding_product",
            format!("per-layer scale must be finite and >= 0, got {per_layer}"),
        ));
    }
    Ok(())
}

/// `Π_{ℓ=1}^N (1 + C₀ β^m)`, evaluated as `exp(N·ln(1 + C₀β^m))`.
pub fn depth_compounding_product(n_layers: usize, beta: f64, m: usize, c0: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(StabilityError::domain("depth_compounding_product", format!("beta must be > 0, got {beta}")));
    }
    let per_map = beta.powi(m as i32);
    check_product_args(c0, per_map)?;
    Ok((n_layers as f64 * (c0 * per_map).ln_1p()).exp())
}

/// Same product with a separate scale per map; only their product matters.
pub fn depth_compounding_product_asymmetric(n_layers: usize, betas: &[f64], c0: f64) -> Result<f64> {
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
        return Err(StabilityError::domain(
            "depth_compounding_product_asymmetric",
            "need at least one beta, all > 0",
        ));
    }
    let per_layer: f64 = betas.iter().product();
    check_product_args(c0, per_layer)?;
    Ok((n_layers as f64 * (c0 * per_layer).ln_1p()).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessRow {
    pub n_layers: usize,
    /// Product at `β = N^{-1/m}`.
    pub critical: f64,
    /// Product at `β = N^{-1/(2m)}`.
    pub super_critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessTable {
    pub m: usize,
    pub c0: f64,
    /// `e^{C₀}`, the ceiling for the critical column.
    pub cap: f64,
    pub rows: Vec<BoundednessRow>,
    pub critical_bounded: bool,
    /// Super-critical column strictly increasing along the grid.
    pub super_monotone: bool,
    /// Super-critical product at the largest N exceeds 10x the critical one.
    pub super_exceeds_tenfold: bool,
}

impl BoundednessTable {
    pub fn passed(&self) -> bool {
        self.critical_bounded && self.super_monotone && self.super_exceeds_tenfold
    }
}

/// Tabulates critical and super-critical products over `grid` (sorted
/// ascending before evaluation).
pub fn verify_boundedness(m: usize, c0: f64, grid: &[usize]) -> Result<BoundednessTable> {
    if grid.is_empty() || m == 0 {
        return Err(StabilityError::domain("verify_boundedness", "need m >= 1 and a non-empty grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid[0] == 0 {
        return Err(StabilityError::domain("verify_boundedness", "grid entries must be >= 1"));
    }
    let rows = grid
        .iter()
        .map(|&n| {
            let nf = n as f64;
            Ok(BoundednessRow {
                n_layers: n,
                critical: depth_compounding_product(n, nf.powf(-1.0 / m as f64), m, c0)?,
                super_critical: depth_compounding_product(n, nf.powf(-0.5 / m as f64), m, c0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cap = c0.exp();
    let last = rows.last().expect("grid is non-empty");
    Ok(BoundednessTable {
        m,
        c0,
        cap,
        critical_bounded: rows.iter().all(|r| r.critical <= cap),
        super_monotone: rows.windows(2).all(|w| w[1].super_critical > w[0].super_critical),
        super_exceeds_tenfold: last.super_critical > 10.0 * last.critical,
        rows,
    })
}

/// Linear decay from `tau_init` to `tau_final` over `warmup_steps`, then
/// constant.
pub fn temperature_warmup_schedule(tau_init: f64, tau_final: f64, warmup_steps: usize, step: usize) -> Result<f64> {
    if !(tau_final > 0.0) || !(tau_init >= tau_final) || !tau_init.is_finite() {
        return Err(StabilityError::domain(
            "temperature_warmup_schedule",
            format!("need tau_init >= tau_final > 0, got {tau_init} and {tau_final}"),
        ));
    }
    if warmup_steps == 0 {
        return Err(StabilityError::domain("temperature_warmup_schedule", "warmup_steps must be >= 1"));
    }
    if step >= warmup_steps {
        return Ok(tau_final);
    }
    let t = step as f64 / warmup_steps as f64;
    Ok(tau_init + (tau_final - tau_init) * t)
}
