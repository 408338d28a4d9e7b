//! Softmax sensitivity: the balanced-mass factor θ(p) and the exact
//! ∞→1 operator norm of the softmax Jacobian.
//!
//! For `p = softmax(u/τ)` the Jacobian `J = (Diag(p) − ppᵀ)/τ` satisfies
//! `‖J‖_{∞→1} = θ(p)/τ`, where `θ(p) = 4 max_S p(S)(1 − p(S))`. The two
//! sides are computed here along independent routes: sign-vector
//! enumeration on the dense matrix, and subset search on the masses.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StabilityError};
use crate::linalg::Matrix;

/// Largest length for plain subset / sign-vector enumeration.
pub const EXHAUSTIVE_MAX_LEN: usize = 20;
/// Largest length handled by the meet-in-the-middle search.
pub const MEET_IN_MIDDLE_MAX_LEN: usize = 40;

const SUM_TOL: f64 = 1e-9;
const NEG_TOL: f64 = -1e-12;
// Incremental Gray-code sums are recomputed from scratch this often.
const RESYNC_MASK: u64 = (1 << 10) - 1;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbDist {
    p: Vec<f64>,
}

#[derive(Deserialize)]
struct ProbDistRepr {
    p: Vec<f64>,
}

impl<'de> Deserialize<'de> for ProbDist {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ProbDistRepr::deserialize(d)?;
        ProbDist::new(repr.p).map_err(serde::de::Error::custom)
    }
}

impl ProbDist {
    /// Validates masses. Entries in `[-1e-12, 0)` are clamped to zero and the
    /// vector renormalized; the total must be within `1e-9` of one.
    pub fn new(mut p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(StabilityError::domain("ProbDist", "empty distribution"));
        }
        if let Some((i, &v)) = p.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(StabilityError::domain("ProbDist", format!("p[{i}] = {v} is not finite")));
        }
        if let Some((i, &v)) = p.iter().enumerate().find(|(_, &v)| v < NEG_TOL) {
            return Err(StabilityError::domain("ProbDist", format!("p[{i}] = {v} is negative")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(StabilityError::domain("ProbDist", format!("masses sum to {total}")));
        }
        if p.iter().any(|&v| v < 0.0) {
            p.iter_mut().for_each(|v| *v = v.max(0.0));
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { p })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(StabilityError::domain("ProbDist::uniform", "length must be >= 1"));
        }
        Ok(Self {
            p: vec![1.0 / len as f64; len],
        })
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(StabilityError::domain(
                "ProbDist::one_hot",
                format!("index {index} out of range for length {len}"),
            ));
        }
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        Ok(Self { p })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Strategy that produced a [`ThetaResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMethod {
    Exhaustive,
    MeetInMiddle,
    Greedy,
}

impl ThetaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exhaustive => "exhaustive",
            Self::MeetInMiddle => "meet_in_middle",
            Self::Greedy => "greedy",
        }
    }

    /// Whether the value is a certified global optimum.
    pub fn is_exact(self) -> bool {
        !matches!(self, Self::Greedy)
    }
}

/// Balanced-mass factor together with the subset that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaResult {
    pub theta: f64,
    /// Zero-based token indices of the bisecting subset.
    pub best_subset: Vec<usize>,
    pub subset_mass: f64,
    pub method: ThetaMethod,
}

impl ThetaResult {
    fn from_subset(p: &ProbDist, mut subset: Vec<usize>, method: ThetaMethod) -> Self {
        subset.sort_unstable();
        let mass: f64 = subset.iter().map(|&i| p.p[i]).sum();
        let mass = mass.clamp(0.0, 1.0);
        Self {
            theta: balanced_mass(mass),
            best_subset: subset,
            subset_mass: mass,
            method,
        }
    }
}

#[inline]
fn balanced_mass(mass: f64) -> f64 {
    (4.0 * mass * (1.0 - mass)).clamp(0.0, 1.0)
}

/// Temperature softmax `p_i ∝ exp((u_i − max u)/τ)`.
pub fn softmax(u: &[f64], tau: f64) -> Result<ProbDist> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(StabilityError::domain("softmax", format!("tau must be > 0, got {tau}")));
    }
    if u.is_empty() {
        return Err(StabilityError::domain("softmax", "empty logit vector"));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::domain("softmax", "logits must be finite"));
    }
    Ok(ProbDist {
        p: softmax_row(u, tau),
    })
}

/// Softmax without validation, for internal attention rows.
pub(crate) fn softmax_row(u: &[f64], tau: f64) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = u.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `J = (Diag(p) − ppᵀ)/τ`.
pub fn softmax_jacobian(p: &ProbDist, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(StabilityError::domain(
            "softmax_jacobian",
            format!("tau must be > 0, got {tau}"),
        ));
    }
    let p = &p.p;
    let mut j = Matrix::from_fn(p.len(), p.len(), |a, b| -p[a] * p[b] / tau);
    for (i, &pi) in p.iter().enumerate() {
        j[(i, i)] += pi / tau;
    }
    Ok(j)
}

/// Exhaustive ∞→1 operator norm `max_{x ∈ {±1}^n} ‖Jx‖₁`.
///
/// Only sign vectors with `x_0 = +1` are visited (‖J(−x)‖₁ = ‖Jx‖₁), in
/// Gray-code order so each step is one column update. The returned value is
/// recomputed directly from the witness.
pub fn opnorm_inf_to_1_exhaustive(j: &Matrix) -> Result<(f64, Vec<i8>)> {
    let n = j.cols();
    if n > EXHAUSTIVE_MAX_LEN {
        return Err(StabilityError::Budget {
            what: "sign-vector length",
            requested: n,
            limit: EXHAUSTIVE_MAX_LEN,
            hint: "use theta_greedy for long rows",
        });
    }
    if n == 0 || j.rows() == 0 {
        return Ok((0.0, vec![1; n]));
    }
    let jt = j.transpose(); // row c of jt is column c of J
    let mut x = vec![1i8; n];
    let mut y: Vec<f64> = j.row_iter().map(|r| r.iter().sum()).collect();
    let mut best = l1(&y);
    let mut best_x = x.clone();

    let steps: u64 = 1 << (n - 1);
    for k in 1..steps {
        // Gray code: flip bit `tz(k)` of the free coordinates 1..n.
        let c = k.trailing_zeros() as usize + 1;
        x[c] = -x[c];
        let delta = 2.0 * f64::from(x[c]);
        for (yi, &jc) in y.iter_mut().zip(jt.row(c)) {
            *yi += delta * jc;
        }
        if k & RESYNC_MASK == 0 {
            y = apply_signs(j, &x);
        }
        let v = l1(&y);
        if v > best {
            best = v;
            best_x.copy_from_slice(&x);
        }
    }
    let value = l1(&apply_signs(j, &best_x));
    Ok((value, best_x))
}

/// `‖J x‖₁` for a sign vector.
pub fn apply_sign_vector_l1(j: &Matrix, x: &[i8]) -> f64 {
    l1(&apply_signs(j, x))
}

fn apply_signs(j: &Matrix, x: &[i8]) -> Vec<f64> {
    j.row_iter()
        .map(|r| r.iter().zip(x).map(|(a, &s)| a * f64::from(s)).sum())
        .collect()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

/// Globally optimal θ(p): enumeration up to length 20, meet-in-the-middle
/// up to 40.
pub fn theta_exact(p: &ProbDist) -> Result<ThetaResult> {
    match p.len() {
        n if n <= EXHAUSTIVE_MAX_LEN => Ok(theta_exhaustive(p)),
        n if n <= MEET_IN_MIDDLE_MAX_LEN => Ok(theta_meet_in_middle(p)),
        n => Err(StabilityError::Budget {
            what: "distribution length",
            requested: n,
            limit: MEET_IN_MIDDLE_MAX_LEN,
            hint: "use theta_greedy (heuristic, not exact) for long rows",
        }),
    }
}

/// Enumerates subsets containing index 0 (θ is symmetric under complement).
fn theta_exhaustive(p: &ProbDist) -> ThetaResult {
    let n = p.len();
    let masses = &p.p;
    let mut in_set = vec![true; n];
    let mut in_mask: u64 = (1u64 << n) - 1;
    let mut mass: f64 = masses.iter().sum();
    let mut best_gap = (mass - 0.5).abs();
    let mut best_mask = in_mask;

    let steps: u64 = 1 << (n - 1);
    for k in 1..steps {
        let c = k.trailing_zeros() as usize + 1;
        in_set[c] = !in_set[c];
        in_mask ^= 1 << c;
        if in_set[c] {
            mass += masses[c];
        } else {
            mass -= masses[c];
        }
        if k & RESYNC_MASK == 0 {
            mass = masses.iter().zip(&in_set).filter(|(_, &s)| s).map(|(m, _)| m).sum();
        }
        let gap = (mass - 0.5).abs();
        if gap < best_gap {
            best_gap = gap;
            best_mask = in_mask;
        }
    }
    let subset = (0..n).filter(|&i| best_mask >> i & 1 == 1).collect();
    ThetaResult::from_subset(p, subset, ThetaMethod::Exhaustive)
}

/// Exact θ by splitting the tokens in two halves, enumerating each half's
/// subset sums, sorting one side, and binary-searching the partner closest
/// to total mass ½.
pub fn theta_meet_in_middle(p: &ProbDist) -> ThetaResult {
    let n = p.len();
    let half = n / 2;
    let (left, right) = p.p.split_at(half);
    let left_sums = subset_sums(left);
    let mut right_sums = subset_sums(right);
    right_sums.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut best_gap = f64::INFINITY;
    let mut best = (0u32, 0u32);
    for &(ls, lm) in &left_sums {
        let target = 0.5 - ls;
        let idx = right_sums.partition_point(|&(rs, _)| rs < target);
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some(&(rs, rm)) = right_sums.get(cand) {
                let gap = (ls + rs - 0.5).abs();
                if gap < best_gap {
                    best_gap = gap;
                    best = (lm, rm);
                }
            }
        }
    }
    let subset = (0..half)
        .filter(|&i| best.0 >> i & 1 == 1)
        .chain((0..n - half).filter(|&i| best.1 >> i & 1 == 1).map(|i| i + half))
        .collect();
    ThetaResult::from_subset(p, subset, ThetaMethod::MeetInMiddle)
}

fn subset_sums(masses: &[f64]) -> Vec<(f64, u32)> {
    let mut sums = Vec::with_capacity(1 << masses.len());
    sums.push((0.0, 0u32));
    for (i, &m) in masses.iter().enumerate() {
        let len = sums.len();
        for k in 0..len {
            let (s, mask) = sums[k];
            sums.push((s + m, mask | (1 << i)));
        }
    }
    sums
}

/// Sorted-prefix heuristic: sort masses in descending order, take the
/// prefix whose cumulative mass is closest to ½ (smallest prefix on ties)
/// and return `4c(1 − c)`. Never exceeds the exact θ since it scores one
/// feasible subset.
pub fn theta_greedy(p: &ProbDist) -> ThetaResult {
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps index order among equal masses.
    order.sort_by(|&a, &b| p.p[b].total_cmp(&p.p[a]));
    let mut cum = 0.0;
    let mut best_k = 1;
    let mut best_gap = f64::INFINITY;
    for (k, &i) in order.iter().enumerate() {
        cum += p.p[i];
        let gap = (cum - 0.5).abs();
        if gap < best_gap {
            best_gap = gap;
            best_k = k + 1;
        }
    }
    let subset = order[..best_k].to_vec();
    ThetaResult::from_subset(p, subset, ThetaMethod::Greedy)
}

/// Exact θ where the budget allows it, greedy otherwise.
pub fn theta_auto(p: &ProbDist, exact_limit: usize) -> ThetaResult {
    if p.len() <= exact_limit.min(MEET_IN_MIDDLE_MAX_LEN) {
        theta_exact(p).expect("length within exact budget")
    } else {
        theta_greedy(p)
    }
}

/// Closed-form attention regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Mass `1/L` on every token.
    Uniform { len: usize },
    /// All mass on one token.
    OneHot,
    /// Top token has mass `1 − κ`.
    Peaked { kappa: f64 },
    /// Mass `1/k` on `k` tokens.
    TopKUniform { k: usize },
}

impl Regime {
    /// `false` for [`Regime::Peaked`], whose value is only an upper bound.
    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::Peaked { .. })
    }
}

/// Closed-form θ for a [`Regime`]. Uniform odd `L` gives `1 − 1/L²`;
/// `Peaked` returns the bound `4κ(1 − κ)`, which is not attained for κ < ½
/// in general. Once κ > ½ the top token no longer holds a majority, a
/// balanced split of the tail can exist, and only the trivial bound 1 holds.
pub fn theta_regime(regime: Regime) -> Result<f64> {
    match regime {
        Regime::Uniform { len } => {
            if len == 0 {
                return Err(StabilityError::domain("theta_regime", "uniform length must be >= 1"));
            }
            if len % 2 == 0 {
                Ok(1.0)
            } else {
                Ok(1.0 - 1.0 / (len as f64).powi(2))
            }
        }
        Regime::OneHot => Ok(0.0),
        Regime::Peaked { kappa } => {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(StabilityError::domain(
                    "theta_regime",
                    format!("kappa must lie in [0, 1], got {kappa}"),
                ));
            }
            if kappa > 0.5 {
                Ok(1.0)
            } else {
                Ok(4.0 * kappa * (1.0 - kappa))
            }
        }
        Regime::TopKUniform { k } => {
            if k == 0 {
                return Err(StabilityError::domain("theta_regime", "k must be >= 1"));
            }
            let gap = 1.0 - 2.0 * (k / 2) as f64 / k as f64;
            Ok(1.0 - gap * gap)
        }
    }
}

/// A distribution realizing `regime` over `len` tokens.
///
/// `Peaked` puts `1 − κ` on token 0 and spreads κ evenly over the rest.
pub fn regime_distribution(regime: Regime, len: usize) -> Result<ProbDist> {
    match regime {
        Regime::Uniform { len: l } => ProbDist::uniform(l),
        Regime::OneHot => ProbDist::one_hot(len, 0),
        Regime::Peaked { kappa } => {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(StabilityError::domain(
                    "regime_distribution",
                    format!("kappa must lie in [0, 1], got {kappa}"),
                ));
            }
            if len < 2 {
                return Err(StabilityError::domain(
                    "regime_distribution",
                    "peaked distributions need at least 2 tokens",
                ));
            }
            let mut p = vec![kappa / (len - 1) as f64; len];
            p[0] = 1.0 - kappa;
            ProbDist::new(p)
        }
        Regime::TopKUniform { k } => {
            if k == 0 || k > len {
                return Err(StabilityError::domain(
                    "regime_distribution",
                    format!("need 1 <= k <= L, got k={k}, L={len}"),
                ));
            }
            let mut p = vec![0.0; len];
            p[..k].iter_mut().for_each(|v| *v = 1.0 / k as f64);
            ProbDist::new(p)
        }
    }
}
