//! Transformer layers (pre-LN, post-LN, DeepNorm), their Lipschitz bounds,
//! dense Jacobians for small instances, and matrix-free reverse mode for
//! deep gradient probes.
//!
//! Layer shapes, with residual multiplier `α` (1 except for DeepNorm):
//!
//! * pre-LN: `Z = X + α·MHA(LN₁(X))`, `X′ = Z + α·FFN(LN₂(Z))`
//! * post-LN / DeepNorm: `Z = LN₁(X + α·MHA(X))`, `X′ = LN₂(Z + α·FFN(Z))`

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{self, MhaCache, MhaWeights, SPECTRAL_SEED};
use crate::error::{Result, StabilityError};
use crate::linalg::{block_inf_rms_norm, spectral_norm, Matrix, Rng, DEFAULT_SPECTRAL_ITERS};
use crate::normlayer::{
    jvp_with, ln_lipschitz_bound, normalize, vjp_with, LayerNormParams, Normalized, DEFAULT_LN_EPS,
};

/// Largest `L·d` for which [`layer_jacobian`] builds a dense matrix.
pub const DENSE_JACOBIAN_MAX: usize = 512;

/// Version tag written into weight files.
pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "pre_ln", alias = "preln")]
    PreLn,
    #[serde(rename = "post_ln", alias = "postln")]
    PostLn,
    #[serde(rename = "deepnorm")]
    DeepNorm,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::PreLn, Arch::PostLn, Arch::DeepNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::PreLn => "pre_ln",
            Arch::PostLn => "post_ln",
            Arch::DeepNorm => "deepnorm",
        }
    }

    pub fn is_pre_ln(self) -> bool {
        self == Arch::PreLn
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = StabilityError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pre_ln" | "preln" => Ok(Arch::PreLn),
            "post_ln" | "postln" => Ok(Arch::PostLn),
            "deepnorm" | "deep_norm" => Ok(Arch::DeepNorm),
            other => Err(StabilityError::domain(
                "Arch",
                format!("unknown architecture {other:?} (expected pre_ln, post_ln or deepnorm)"),
            )),
        }
    }
}

fn default_tau() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_init_std() -> f64 {
    0.02
}
fn default_seed() -> u64 {
    42
}
fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}
fn default_proj_scale() -> f64 {
    1.0
}

/// Stack hyperparameters. `n_heads · d_head` must equal `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Extra factor on the attention projection init std.
    #[serde(default = "default_proj_scale")]
    pub proj_scale: f64,
}

impl ModelConfig {
    /// `d_head = d_model / n_heads`, `d_ff = 4·d_model`, τ = 1, and
    /// `α = (2N)^{-1/4}` for DeepNorm.
    pub fn new(arch: Arch, n_layers: usize, d_model: usize, n_heads: usize, seq_len: usize) -> Self {
        let alpha = match arch {
            Arch::DeepNorm => crate::scaling::deepnorm_alpha(n_layers.max(1)),
            _ => 1.0,
        };
        Self {
            arch,
            n_layers,
            n_heads,
            d_model,
            d_head: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff: 4 * d_model,
            seq_len,
            tau: 1.0,
            alpha,
            init_std: default_init_std(),
            seed: default_seed(),
            ln_eps: DEFAULT_LN_EPS,
            proj_scale: 1.0,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(StabilityError::domain("ModelConfig", detail));
        if self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return bad("n_heads, d_head, d_ff and seq_len must be >= 1".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads * d_head = {} but d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.arch != Arch::DeepNorm && self.alpha != 1.0 {
            return bad(format!("alpha = {} is only meaningful for deepnorm", self.alpha));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be >= 0, got {}", self.init_std));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return bad(format!("ln_eps must be >= 0, got {}", self.ln_eps));
        }
        if !(self.proj_scale > 0.0 && self.proj_scale.is_finite()) {
            return bad(format!("proj_scale must be > 0, got {}", self.proj_scale));
        }
        Ok(())
    }
}

/// Two-layer ReLU MLP applied per token: `relu(x W₁ + b₁) W₂ + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FfnWeights {
    pub fn validate(&self) -> Result<()> {
        let (d, dff) = self.w1.shape();
        let mut problems = Vec::new();
        if self.b1.len() != dff {
            problems.push(format!("ffn_b1 has {} entries, expected {dff}", self.b1.len()));
        }
        if self.w2.shape() != (dff, d) {
            problems.push(format!("ffn_w2 is {}x{}, expected {dff}x{d}", self.w2.rows(), self.w2.cols()));
        }
        if self.b2.len() != d {
            problems.push(format!("ffn_b2 has {} entries, expected {d}", self.b2.len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(StabilityError::dim("FfnWeights", problems.join("; ")))
        }
    }
}

/// Weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub mha: MhaWeights,
    pub ffn: FfnWeights,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            mha: MhaWeights::zeros(d, cfg.n_heads, cfg.d_head),
            ffn: FfnWeights {
                w1: Matrix::zeros(d, cfg.d_ff),
                b1: vec![0.0; cfg.d_ff],
                w2: Matrix::zeros(cfg.d_ff, d),
                b2: vec![0.0; d],
            },
            ln1: LayerNormParams::identity(d, cfg.ln_eps),
            ln2: LayerNormParams::identity(d, cfg.ln_eps),
        }
    }

    /// Gaussian init with std `init_std` (attention projections scaled by
    /// `proj_scale`), zero biases, identity LayerNorms.
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let std = cfg.init_std;
        let mha = MhaWeights::random(d, cfg.n_heads, cfg.d_head, std * cfg.proj_scale, rng);
        Self {
            mha,
            ffn: FfnWeights {
                w1: rng.normal_matrix(d, cfg.d_ff, std),
                b1: vec![0.0; cfg.d_ff],
                w2: rng.normal_matrix(cfg.d_ff, d, std),
                b2: vec![0.0; d],
            },
            ln1: LayerNormParams::identity(d, cfg.ln_eps),
            ln2: LayerNormParams::identity(d, cfg.ln_eps),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        if self.mha.n_heads() != cfg.n_heads || self.mha.d_head() != cfg.d_head {
            return Err(StabilityError::dim(
                "LayerWeights",
                format!(
                    "{} heads of width {}, expected {} of width {}",
                    self.mha.n_heads(),
                    self.mha.d_head(),
                    cfg.n_heads,
                    cfg.d_head
                ),
            ));
        }
        self.mha.validate(d)?;
        if self.ffn.w1.shape() != (d, cfg.d_ff) {
            return Err(StabilityError::dim(
                "LayerWeights",
                format!(
                    "ffn_w1 is {}x{}, expected {d}x{}",
                    self.ffn.w1.rows(),
                    self.ffn.w1.cols(),
                    cfg.d_ff
                ),
            ));
        }
        self.ffn.validate()?;
        for (name, ln) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            if ln.dim() != d {
                return Err(StabilityError::dim(
                    "LayerWeights",
                    format!("{name}_gamma has {} entries, expected {d}", ln.dim()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    wo: Matrix,
    ffn_w1: Matrix,
    ffn_b1: Vec<f64>,
    ffn_w2: Matrix,
    ffn_b2: Vec<f64>,
    ln1_gamma: Vec<f64>,
    ln1_shift: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_shift: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    schema_version: u32,
    layers: Vec<LayerRecord>,
}

/// All layers of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| LayerWeights::random(cfg, rng)).collect(),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(StabilityError::dim(
                "ModelWeights",
                format!("{} layers, config expects {}", self.layers.len(), cfg.n_layers),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(cfg).map_err(|e| match e {
                StabilityError::Dimension { detail, .. } => {
                    StabilityError::dim("ModelWeights", format!("layer {i}: {detail}"))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WeightsFile {
            schema_version: WEIGHTS_SCHEMA_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    wq: l.mha.heads.iter().map(|h| h.wq.clone()).collect(),
                    wk: l.mha.heads.iter().map(|h| h.wk.clone()).collect(),
                    wv: l.mha.heads.iter().map(|h| h.wv.clone()).collect(),
                    wo: l.mha.wo.clone(),
                    ffn_w1: l.ffn.w1.clone(),
                    ffn_b1: l.ffn.b1.clone(),
                    ffn_w2: l.ffn.w2.clone(),
                    ffn_b2: l.ffn.b2.clone(),
                    ln1_gamma: l.ln1.gamma.clone(),
                    ln1_shift: l.ln1.shift.clone(),
                    ln2_gamma: l.ln2.gamma.clone(),
                    ln2_shift: l.ln2.shift.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a weights file and checks every tensor against `cfg`.
    /// LayerNorm ε is taken from the config.
    pub fn from_json(s: &str, cfg: &ModelConfig) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(s)?;
        if file.schema_version != WEIGHTS_SCHEMA_VERSION {
            return Err(StabilityError::domain(
                "ModelWeights",
                format!(
                    "schema_version {} is not supported (expected {WEIGHTS_SCHEMA_VERSION})",
                    file.schema_version
                ),
            ));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, r) in file.layers.into_iter().enumerate() {
            if r.wq.len() != r.wk.len() || r.wq.len() != r.wv.len() {
                return Err(StabilityError::dim(
                    "ModelWeights",
                    format!(
                        "layer {i}: wq/wk/wv list {}/{}/{} heads",
                        r.wq.len(),
                        r.wk.len(),
                        r.wv.len()
                    ),
                ));
            }
            let heads = r
                .wq
                .into_iter()
                .zip(r.wk)
                .zip(r.wv)
                .map(|((wq, wk), wv)| attention::HeadWeights { wq, wk, wv })
                .collect();
            let ln = |gamma: Vec<f64>, shift: Vec<f64>, name: &str| {
                LayerNormParams::new(gamma, shift, cfg.ln_eps).map_err(|e| {
                    StabilityError::dim("ModelWeights", format!("layer {i}: {name}: {e}"))
                })
            };
            layers.push(LayerWeights {
                mha: MhaWeights { heads, wo: r.wo },
                ffn: FfnWeights {
                    w1: r.ffn_w1,
                    b1: r.ffn_b1,
                    w2: r.ffn_w2,
                    b2: r.ffn_b2,
                },
                ln1: ln(r.ln1_gamma, r.ln1_shift, "ln1")?,
                ln2: ln(r.ln2_gamma, r.ln2_shift, "ln2")?,
            });
        }
        let weights = Self { layers };
        weights.validate(cfg)?;
        Ok(weights)
    }
}

// ---------------------------------------------------------------------------
// FFN

struct FfnCache {
    pre: Matrix,
    output: Matrix,
}

fn ffn_forward_cached(x: &Matrix, w: &FfnWeights) -> FfnCache {
    let mut pre = x.dot(&w.w1);
    for r in 0..pre.rows() {
        for (v, b) in pre.row_mut(r).iter_mut().zip(&w.b1) {
            *v += b;
        }
    }
    let mut output = pre.map(|v| v.max(0.0)).dot(&w.w2);
    for r in 0..output.rows() {
        for (v, b) in output.row_mut(r).iter_mut().zip(&w.b2) {
            *v += b;
        }
    }
    FfnCache { pre, output }
}

fn relu_mask(pre: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

fn ffn_vjp_cached(c: &FfnCache, w: &FfnWeights, g: &Matrix) -> Matrix {
    relu_mask(&c.pre, &g.dot(&w.w2.transpose())).dot(&w.w1.transpose())
}

fn ffn_jvp_cached(c: &FfnCache, w: &FfnWeights, t: &Matrix) -> Matrix {
    relu_mask(&c.pre, &t.dot(&w.w1)).dot(&w.w2)
}

/// FFN of a single token.
pub fn ffn_forward(x: &[f64], w: &FfnWeights) -> Result<Vec<f64>> {
    w.validate()?;
    if x.len() != w.w1.rows() {
        return Err(StabilityError::dim(
            "ffn_forward",
            format!("input has {} entries, ffn_w1 has {} rows", x.len(), w.w1.rows()),
        ));
    }
    Ok(ffn_forward_cached(&Matrix::row_vector(x), w).output.into_data())
}

/// `‖W₂‖₂ ‖W₁‖₂` (ReLU is 1-Lipschitz).
pub fn ffn_lipschitz_bound(w: &FfnWeights, spectral_tol: f64) -> Result<f64> {
    let mut rng = Rng::new(SPECTRAL_SEED);
    let a = spectral_norm(&w.w1, spectral_tol, DEFAULT_SPECTRAL_ITERS, &mut rng)?;
    let b = spectral_norm(&w.w2, spectral_tol, DEFAULT_SPECTRAL_ITERS, &mut rng)?;
    Ok(a * b)
}

// ---------------------------------------------------------------------------
// Row-wise LayerNorm with cached statistics

struct LnCache {
    stats: Vec<Normalized>,
    output: Matrix,
}

fn ln_forward_cached(x: &Matrix, p: &LayerNormParams) -> LnCache {
    let mut output = Matrix::zeros(x.rows(), x.cols());
    let stats: Vec<Normalized> = x
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let n = normalize(row, p.eps);
            for (j, o) in output.row_mut(i).iter_mut().enumerate() {
                *o = p.gamma[j] * n.x_hat[j] + p.shift[j];
            }
            n
        })
        .collect();
    LnCache { stats, output }
}

fn ln_rows_apply(
    c: &LnCache,
    m: &Matrix,
    p: &LayerNormParams,
    f: fn(&Normalized, &[f64], &[f64]) -> Vec<f64>,
) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, n) in c.stats.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&f(n, m.row(i), &p.gamma));
    }
    out
}

/// Block-diagonal `Ld × Ld` matrix from per-token `d × d` blocks.
fn block_diag(blocks: &[Matrix]) -> Matrix {
    let d = blocks.first().map_or(0, |b| b.rows());
    let n = blocks.len() * d;
    let mut out = Matrix::zeros(n, n);
    for (t, b) in blocks.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                out[(t * d + r, t * d + c)] = b[(r, c)];
            }
        }
    }
    out
}

fn ln_dense(c: &LnCache, p: &LayerNormParams) -> Matrix {
    let d = p.dim();
    let blocks: Vec<Matrix> = c
        .stats
        .iter()
        .map(|n| {
            let mut j = Matrix::zeros(d, d);
            let mut e = vec![0.0; d];
            for col in 0..d {
                e[col] = 1.0;
                for (r, v) in jvp_with(n, &e, &p.gamma).into_iter().enumerate() {
                    j[(r, col)] = v;
                }
                e[col] = 0.0;
            }
            j
        })
        .collect();
    block_diag(&blocks)
}

fn ffn_dense(c: &FfnCache, w: &FfnWeights) -> Matrix {
    let blocks: Vec<Matrix> = (0..c.pre.rows())
        .map(|t| {
            let mask: Vec<f64> = c.pre.row(t).iter().map(|&p| if p > 0.0 { 1.0 } else { 0.0 }).collect();
            // J[j, i] = Σ_k W₂[k, j] m_k W₁[i, k]
            let masked_w2 = Matrix::from_fn(w.w2.rows(), w.w2.cols(), |k, j| mask[k] * w.w2[(k, j)]);
            w.w1.dot(&masked_w2).transpose()
        })
        .collect();
    block_diag(&blocks)
}

// ---------------------------------------------------------------------------
// Layer

struct LayerCache {
    arch: Arch,
    alpha: f64,
    ln1: LnCache,
    mha: MhaCache,
    ln2: LnCache,
    ffn: FfnCache,
    output: Matrix,
}

fn check_layer(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if x.cols() != cfg.d_model || x.rows() == 0 {
        return Err(StabilityError::dim(
            "layer",
            format!("input is {}x{}, expected Lx{}", x.rows(), x.cols(), cfg.d_model),
        ));
    }
    w.validate(cfg)
}

fn layer_forward_cached(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> LayerCache {
    let alpha = cfg.alpha;
    if cfg.arch.is_pre_ln() {
        let ln1 = ln_forward_cached(x, &w.ln1);
        let mha = attention::forward_cached(&ln1.output, &w.mha, cfg.tau);
        let mut z = x.clone();
        z.add_scaled(alpha, &mha.output);
        let ln2 = ln_forward_cached(&z, &w.ln2);
        let ffn = ffn_forward_cached(&ln2.output, &w.ffn);
        let mut output = z;
        output.add_scaled(alpha, &ffn.output);
        LayerCache { arch: cfg.arch, alpha, ln1, mha, ln2, ffn, output }
    } else {
        let mha = attention::forward_cached(x, &w.mha, cfg.tau);
        let mut y1 = x.clone();
        y1.add_scaled(alpha, &mha.output);
        let ln1 = ln_forward_cached(&y1, &w.ln1);
        let ffn = ffn_forward_cached(&ln1.output, &w.ffn);
        let mut y2 = ln1.output.clone();
        y2.add_scaled(alpha, &ffn.output);
        let ln2 = ln_forward_cached(&y2, &w.ln2);
        let output = ln2.output.clone();
        LayerCache { arch: cfg.arch, alpha, ln1, mha, ln2, ffn, output }
    }
}

fn layer_vjp_cached(c: &LayerCache, w: &LayerWeights, g: &Matrix) -> Matrix {
    let a = c.alpha;
    if c.arch.is_pre_ln() {
        let g_u2 = ffn_vjp_cached(&c.ffn, &w.ffn, &g.scaled(a));
        let mut g_z = g.clone();
        g_z.add_assign(&ln_rows_apply(&c.ln2, &g_u2, &w.ln2, vjp_with));
        let g_u1 = attention::vjp_cached(&c.mha, &w.mha, &g_z.scaled(a));
        let mut g_x = g_z;
        g_x.add_assign(&ln_rows_apply(&c.ln1, &g_u1, &w.ln1, vjp_with));
        g_x
    } else {
        let g_y2 = ln_rows_apply(&c.ln2, g, &w.ln2, vjp_with);
        let mut g_z = g_y2.clone();
        g_z.add_assign(&ffn_vjp_cached(&c.ffn, &w.ffn, &g_y2.scaled(a)));
        let g_y1 = ln_rows_apply(&c.ln1, &g_z, &w.ln1, vjp_with);
        let mut g_x = g_y1.clone();
        g_x.add_assign(&attention::vjp_cached(&c.mha, &w.mha, &g_y1.scaled(a)));
        g_x
    }
}

fn layer_jvp_cached(c: &LayerCache, w: &LayerWeights, t: &Matrix) -> Matrix {
    let a = c.alpha;
    if c.arch.is_pre_ln() {
        let t_u1 = ln_rows_apply(&c.ln1, t, &w.ln1, jvp_with);
        let mut t_z = t.clone();
        t_z.add_scaled(a, &attention::jvp_cached(&c.mha, &w.mha, &t_u1));
        let t_u2 = ln_rows_apply(&c.ln2, &t_z, &w.ln2, jvp_with);
        let mut out = t_z;
        out.add_scaled(a, &ffn_jvp_cached(&c.ffn, &w.ffn, &t_u2));
        out
    } else {
        let mut t_y1 = t.clone();
        t_y1.add_scaled(a, &attention::jvp_cached(&c.mha, &w.mha, t));
        let t_z = ln_rows_apply(&c.ln1, &t_y1, &w.ln1, jvp_with);
        let mut t_y2 = t_z.clone();
        t_y2.add_scaled(a, &ffn_jvp_cached(&c.ffn, &w.ffn, &t_z));
        ln_rows_apply(&c.ln2, &t_y2, &w.ln2, jvp_with)
    }
}

/// One transformer layer.
pub fn layer_forward(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Result<Matrix> {
    check_layer(x, w, cfg)?;
    Ok(layer_forward_cached(x, w, cfg).output)
}

/// `vec(G)ᵀ · ∂X′/∂X`, reshaped to `L × d`, without forming the Jacobian.
pub fn layer_vjp(x: &Matrix, upstream: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Result<Matrix> {
    check_layer(x, w, cfg)?;
    if upstream.shape() != x.shape() {
        return Err(StabilityError::dim(
            "layer_vjp",
            format!("upstream {:?} vs input {:?}", upstream.shape(), x.shape()),
        ));
    }
    Ok(layer_vjp_cached(&layer_forward_cached(x, w, cfg), w, upstream))
}

/// Dense layer Jacobian together with the dense sublayer pieces it is
/// built from, all over the flattened row-major `L·d` coordinates.
///
/// `full` is computed by forward-mode differentiation through the whole
/// layer; the pieces are evaluated at the points where each sublayer acts,
/// so reassembling them is an independent check on `full`.
#[derive(Debug, Clone)]
pub struct LayerJacobian {
    pub arch: Arch,
    pub alpha: f64,
    pub full: Matrix,
    pub ln1: Matrix,
    pub mha: Matrix,
    pub ln2: Matrix,
    pub ffn: Matrix,
}

impl LayerJacobian {
    fn n(&self) -> usize {
        self.full.rows()
    }

    /// pre-LN: `α J_MHA J_LN₁`; post-LN: `J_LN₁ (I + α J_MHA)`.
    pub fn attention_sublayer(&self) -> Matrix {
        if self.arch.is_pre_ln() {
            self.mha.dot(&self.ln1).scaled(self.alpha)
        } else {
            self.ln1.dot(&Matrix::identity(self.n()).add(&self.mha.scaled(self.alpha)))
        }
    }

    /// pre-LN: `α J_FFN J_LN₂`; post-LN: `J_LN₂ (I + α J_FFN)`.
    pub fn ffn_sublayer(&self) -> Matrix {
        if self.arch.is_pre_ln() {
            self.ffn.dot(&self.ln2).scaled(self.alpha)
        } else {
            self.ln2.dot(&Matrix::identity(self.n()).add(&self.ffn.scaled(self.alpha)))
        }
    }

    /// Pre-LN part of the Jacobian that is not the identity:
    /// `M + F + F·M` for attention branch `M` and FFN branch `F`.
    pub fn residual_chain(&self) -> Matrix {
        let m = self.attention_sublayer();
        let f = self.ffn_sublayer();
        let mut out = m.add(&f);
        out.add_assign(&f.dot(&m));
        out
    }

    /// Composition of the sublayer pieces, comparable with `full`.
    pub fn reassemble(&self) -> Matrix {
        if self.arch.is_pre_ln() {
            Matrix::identity(self.n()).add(&self.residual_chain())
        } else {
            self.ffn_sublayer().dot(&self.attention_sublayer())
        }
    }
}

/// Dense Jacobian of one layer. Refuses when `L·d` exceeds
/// [`DENSE_JACOBIAN_MAX`].
pub fn layer_jacobian(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Result<LayerJacobian> {
    check_layer(x, w, cfg)?;
    let n = x.rows() * x.cols();
    if n > DENSE_JACOBIAN_MAX {
        return Err(StabilityError::Budget {
            what: "dense layer Jacobian size L*d",
            requested: n,
            limit: DENSE_JACOBIAN_MAX,
            hint: "use layer_vjp for matrix-free products",
        });
    }
    let c = layer_forward_cached(x, w, cfg);
    let mut full = Matrix::zeros(n, n);
    let mut t = Matrix::zeros(x.rows(), x.cols());
    for col in 0..n {
        t.data_mut()[col] = 1.0;
        for (r, v) in layer_jvp_cached(&c, w, &t).data().iter().enumerate() {
            full[(r, col)] = *v;
        }
        t.data_mut()[col] = 0.0;
    }
    Ok(LayerJacobian {
        arch: cfg.arch,
        alpha: cfg.alpha,
        full,
        ln1: ln_dense(&c.ln1, &w.ln1),
        mha: attention::jacobian_cached(&c.mha, &w.mha, x.rows(), x.cols()),
        ln2: ln_dense(&c.ln2, &w.ln2),
        ffn: ffn_dense(&c.ffn, &w.ffn),
    })
}

/// Factors of the full-layer Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBound {
    pub arch: Arch,
    pub alpha: f64,
    pub lip_ln1: f64,
    pub lip_ln2: f64,
    pub l_mha: f64,
    pub l_ffn: f64,
    pub mha: attention::MhaBoundBreakdown,
    pub total: f64,
}

/// `lip · l`, treating `0 · ∞` as 0 (a zero sublayer contributes nothing
/// even when ε = 0 makes the LayerNorm constant infinite).
fn chain(lip: f64, l: f64) -> f64 {
    if l == 0.0 {
        0.0
    } else {
        lip * l
    }
}

/// Weight-dependent pieces of [`layer_lipschitz_bound`], computed once.
struct BoundParts {
    norms: attention::ProjectionNorms,
    l_ffn: f64,
    lip_ln1: f64,
    lip_ln2: f64,
}

impl BoundParts {
    fn new(w: &LayerWeights, spectral_tol: f64) -> Result<Self> {
        Ok(Self {
            norms: attention::projection_norms(&w.mha, spectral_tol, &mut Rng::new(SPECTRAL_SEED))?,
            l_ffn: ffn_lipschitz_bound(&w.ffn, spectral_tol)?,
            lip_ln1: ln_lipschitz_bound(&w.ln1),
            lip_ln2: ln_lipschitz_bound(&w.ln2),
        })
    }

    fn assemble(&self, cfg: &ModelConfig, b_u: f64) -> LayerBound {
        let mha = attention::assemble_mha_bound(&self.norms, &vec![1.0; cfg.n_heads], b_u, cfg.tau, cfg.d_head);
        let a = cfg.alpha;
        let total = if cfg.arch.is_pre_ln() {
            (1.0 + a * chain(self.lip_ln1, mha.total)) * (1.0 + a * chain(self.lip_ln2, self.l_ffn))
        } else {
            self.lip_ln1 * self.lip_ln2 * (1.0 + a * mha.total) * (1.0 + a * self.l_ffn)
        };
        LayerBound {
            arch: cfg.arch,
            alpha: a,
            lip_ln1: self.lip_ln1,
            lip_ln2: self.lip_ln2,
            l_mha: mha.total,
            l_ffn: self.l_ffn,
            mha,
            total,
        }
    }
}

fn bound_input_magnitude(w: &LayerWeights, cfg: &ModelConfig, input_magnitude: Option<f64>) -> Result<f64> {
    let root_d = (cfg.d_model as f64).sqrt();
    if cfg.arch.is_pre_ln() {
        return Ok(w.ln1.output_rms_bound() * root_d);
    }
    match input_magnitude {
        Some(b) if b >= 0.0 && b.is_finite() => Ok(b),
        Some(b) => Err(StabilityError::domain(
            "layer_lipschitz_bound",
            format!("input magnitude must be finite and >= 0, got {b}"),
        )),
        None => Ok(w.ln2.output_rms_bound() * root_d),
    }
}

/// Worst-case (θ̃ = 1) Lipschitz bound of one layer.
///
/// pre-LN: `(1 + α Lip(LN₁) L_MHA)(1 + α Lip(LN₂) L_FFN)` with the MHA input
/// magnitude taken from LN₁'s output ceiling, so the value depends on the
/// weights alone. post-LN / DeepNorm:
/// `Lip(LN₁) Lip(LN₂)(1 + α L_MHA)(1 + α L_FFN)` with `B̄_U` equal to
/// `input_magnitude` if given, otherwise LN₂'s output ceiling (the bound on
/// any layer input after the first).
pub fn layer_lipschitz_bound(
    w: &LayerWeights,
    cfg: &ModelConfig,
    input_magnitude: Option<f64>,
    spectral_tol: f64,
) -> Result<LayerBound> {
    cfg.validate()?;
    w.validate(cfg)?;
    let b_u = bound_input_magnitude(w, cfg, input_magnitude)?;
    Ok(BoundParts::new(w, spectral_tol)?.assemble(cfg, b_u))
}

/// Samples `‖f(X′) − f(X)‖ / ‖X′ − X‖` for one layer and compares each pair
/// with [`layer_lipschitz_bound`] at `max(B̄_X, B̄_X′)`.
pub fn layer_empirical_lipschitz(
    x: &Matrix,
    w: &LayerWeights,
    cfg: &ModelConfig,
    trials: usize,
    rng: &mut Rng,
) -> Result<attention::EmpiricalLipschitz> {
    check_layer(x, w, cfg)?;
    if trials == 0 {
        return Err(StabilityError::domain("layer_empirical_lipschitz", "trials must be >= 1"));
    }
    let parts = BoundParts::new(w, crate::linalg::DEFAULT_SPECTRAL_TOL)?;
    let base = layer_forward_cached(x, w, cfg).output;
    let b_x = attention::input_magnitude(x)?;
    let mut out = attention::EmpiricalLipschitz {
        trials,
        max_ratio: 0.0,
        max_ratio_over_bound: 0.0,
        violations: 0,
    };
    for t in 0..trials {
        let delta = attention::perturbation(x, t, rng)?;
        let x2 = x.add(&delta);
        let other = layer_forward_cached(&x2, w, cfg).output;
        let ratio = block_inf_rms_norm(&other.sub(&base))? / block_inf_rms_norm(&delta)?;
        let b_u = bound_input_magnitude(w, cfg, Some(b_x.max(attention::input_magnitude(&x2)?)))?;
        let bound = parts.assemble(cfg, b_u).total;
        out.max_ratio = out.max_ratio.max(ratio);
        if bound > 0.0 && bound.is_finite() {
            out.max_ratio_over_bound = out.max_ratio_over_bound.max(ratio / bound);
        }
        if ratio > bound * (1.0 + 1e-9) + 1e-12 {
            out.violations += 1;
        }
    }
    Ok(out)
}

/// Forward pass through every layer; returns `[X₀, X₁, …, X_N]`.
pub fn stack_forward(x0: &Matrix, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Vec<Matrix>> {
    weights.validate(cfg)?;
    let mut trace = Vec::with_capacity(weights.layers.len() + 1);
    trace.push(x0.clone());
    for w in &weights.layers {
        let next = layer_forward(trace.last().expect("trace starts non-empty"), w, cfg)?;
        trace.push(next);
    }
    Ok(trace)
}

/// Per-layer gradient statistics from one backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbeResult {
    pub arch: Arch,
    pub seed: u64,
    /// `‖∂/∂X_ℓ‖_{∞,rms}` for ℓ = 0..N.
    pub grad_rms: Vec<f64>,
    /// `‖X_ℓ‖_{∞,rms}` of each layer input.
    pub x_rms: Vec<f64>,
    /// pre-LN only: `‖g_ℓ − g_{ℓ+1}‖_{∞,rms}`, the part of the gradient that
    /// did not travel through the identity path.
    pub identity_residue: Vec<Option<f64>>,
}

impl GradientProbeResult {
    /// `grad_rms[0] / grad_rms[N−1]`.
    pub fn first_last_ratio(&self) -> Option<f64> {
        Some(self.grad_rms.first()? / self.grad_rms.last()?)
    }
}

/// Everything produced by a probe run, for downstream metrics.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub weights: ModelWeights,
    pub trace: Vec<Matrix>,
    pub result: GradientProbeResult,
}

/// Random stack, random `X₀ ~ N(0, 1)`, and a unit-norm Gaussian upstream
/// gradient at the top, all drawn from `rng` in that order.
pub fn run_probe(cfg: &ModelConfig, rng: &mut Rng) -> Result<ProbeRun> {
    cfg.validate()?;
    let seed = rng.seed();
    let weights = ModelWeights::random(cfg, rng);
    let x0 = rng.normal_matrix(cfg.seq_len, cfg.d_model, 1.0);
    let raw = rng.normal_matrix(cfg.seq_len, cfg.d_model, 1.0);
    let upstream = raw.scaled(1.0 / block_inf_rms_norm(&raw)?);

    let mut caches = Vec::with_capacity(cfg.n_layers);
    let mut trace = vec![x0];
    for w in &weights.layers {
        let c = layer_forward_cached(trace.last().expect("non-empty"), w, cfg);
        trace.push(c.output.clone());
        caches.push(c);
    }

    let n = cfg.n_layers;
    let mut grad_rms = vec![0.0; n];
    let mut identity_residue = vec![None; n];
    let mut g = upstream;
    for l in (0..n).rev() {
        let next = layer_vjp_cached(&caches[l], &weights.layers[l], &g);
        grad_rms[l] = block_inf_rms_norm(&next)?;
        if cfg.arch.is_pre_ln() {
            identity_residue[l] = Some(block_inf_rms_norm(&next.sub(&g))?);
        }
        g = next;
    }
    if !grad_rms.iter().all(|v| v.is_finite()) {
        return Err(StabilityError::NonFinite { op: "run_probe" });
    }
    let x_rms = trace[..n].iter().map(block_inf_rms_norm).collect::<Result<Vec<_>>>()?;
    Ok(ProbeRun {
        weights,
        trace,
        result: GradientProbeResult {
            arch: cfg.arch,
            seed,
            grad_rms,
            x_rms,
            identity_residue,
        },
    })
}

pub fn gradient_probe(cfg: &ModelConfig, rng: &mut Rng) -> Result<GradientProbeResult> {
    Ok(run_probe(cfg, rng)?.result)
}
