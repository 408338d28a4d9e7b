//! Dense row-major matrices, the block-∞/RMS norm, power iteration and a
//! central-difference Jacobian used as the oracle for every analytic
//! derivative in the crate.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, StabilityError};

/// Default relative tolerance for [`spectral_norm`].
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-8;
/// Default iteration cap for [`spectral_norm`].
pub const DEFAULT_SPECTRAL_ITERS: usize = 1000;
/// Default step for [`finite_difference_jacobian`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Row-sum tolerance accepted by [`row_stochastic_mix`].
pub const STOCHASTIC_SUM_TOL: f64 = 1e-9;
/// Most negative entry accepted by [`row_stochastic_mix`].
pub const STOCHASTIC_NEG_TOL: f64 = -1e-12;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(StabilityError::dim(
                "Matrix::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StabilityError::NonFinite { op: "Matrix::new" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from nested rows. All rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(StabilityError::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (n×1).
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Row vector (1×n).
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard zero-width matrices.
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product. Panics on inner-dimension mismatch; see [`Matrix::try_dot`].
    pub fn dot(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "dot: {}x{} times {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn try_dot(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(StabilityError::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        Ok(self.dot(rhs))
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mat_vec: width {} vs {}", self.cols, v.len());
        self.row_iter().map(|r| dot(r, v)).collect()
    }

    /// `vᵀ · self` for a vector `v` of length `rows`.
    pub fn vec_mat(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "vec_mat: height {} vs {}", self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for (r, &a) in self.row_iter().zip(v) {
            axpy(a, r, &mut out);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    /// `self += s · rhs`
    pub fn add_scaled(&mut self, s: f64, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_scaled shape");
        axpy(s, &rhs.data, &mut self.data);
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "elementwise op on {:?} and {:?}",
            self.shape(),
            rhs.shape()
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "col_block out of range");
        Matrix::from_fn(self.rows, width, |i, j| self[(i, start + j)])
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows, "set_col_block rows");
        assert!(start + block.cols <= self.cols, "set_col_block out of range");
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// Rows `[start, start + height)` as a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Matrix {
        assert!(start + height <= self.rows, "row_block out of range");
        Matrix {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.row_iter()).finish()
    }
}

// Serialized as nested row arrays.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.row_iter())
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Deterministic generator used for every random draw in the crate.
///
/// The stream is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`) keyed by
/// `seed_from_u64(seed)`, which is platform independent. Uniform doubles take
/// the top 53 bits of a `u64` scaled by 2⁻⁵³. Standard normals use the
/// Box–Muller transform on two uniforms `u1, u2`:
/// `sqrt(-2 ln(1 - u1)) · cos(2π u2)` followed by the matching `sin` value,
/// so the stream can be regenerated outside Rust.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent generator on ChaCha stream `stream` of the same key.
    /// Used to give parallel workers their own sequences.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Matrix of i.i.d. `N(0, std²)` entries.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }
}

/// `max_i ‖x_i‖₂ / √d` over the rows of `x`.
pub fn block_inf_rms_norm(x: &Matrix) -> Result<f64> {
    if x.is_empty() {
        return Err(StabilityError::dim(
            "block_inf_rms_norm",
            format!("empty {}x{} matrix", x.rows(), x.cols()),
        ));
    }
    Ok(max_row_norm(x) / (x.cols() as f64).sqrt())
}

/// Largest row ℓ2 norm.
pub(crate) fn max_row_norm(x: &Matrix) -> f64 {
    x.row_iter().map(norm2).fold(0.0, f64::max)
}

/// Repeated squarings of the Gram matrix used by the restart.
const GRAM_SQUARINGS: usize = 6;

/// Largest singular value by power iteration on `WᵀW`.
///
/// Stops once the eigen-residual `‖WᵀW v − λ v‖ / λ` falls below `tol`,
/// which places `λ` within a relative `tol` of an eigenvalue of `WᵀW`. A
/// stalled run is restarted once from a fresh random vector, iterating on
/// `(WᵀW)^64` so that a clustered top pair separates, before a
/// [`StabilityError::Convergence`] is returned.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iters: usize, rng: &mut Rng) -> Result<f64> {
    if w.is_empty() {
        return Err(StabilityError::dim("spectral_norm", "empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(StabilityError::domain("spectral_norm", format!("tol must be > 0, got {tol}")));
    }
    if w.max_abs() == 0.0 {
        return Ok(0.0);
    }
    // Iterate on the smaller Gram matrix; σ_max(W) = σ_max(Wᵀ).
    let wt = w.transpose();
    let (a, at) = if w.cols() <= w.rows() { (w, &wt) } else { (&wt, w) };

    let gram = |v: &[f64]| at.mat_vec(&a.mat_vec(v));
    let first = match power_iterate(gram, a.cols(), tol, max_iters, rng) {
        Ok(v) => return Ok(norm2(&a.mat_vec(&v))),
        Err(estimate) => estimate,
    };

    let mut boosted = at.dot(a);
    for _ in 0..GRAM_SQUARINGS {
        boosted = boosted.scaled(1.0 / boosted.max_abs());
        boosted = boosted.dot(&boosted);
    }
    match power_iterate(|v: &[f64]| boosted.mat_vec(v), a.cols(), tol, max_iters, rng) {
        Ok(v) => Ok(norm2(&a.mat_vec(&v))),
        Err(_) => Err(StabilityError::Convergence {
            iterations: max_iters,
            estimate: first,
        }),
    }
}

/// Power iteration for the top eigenvector of a PSD operator. On failure
/// returns `√λ` of the last Rayleigh quotient.
fn power_iterate(
    op: impl Fn(&[f64]) -> Vec<f64>,
    n: usize,
    tol: f64,
    max_iters: usize,
    rng: &mut Rng,
) -> std::result::Result<Vec<f64>, f64> {
    let unit = |rng: &mut Rng| {
        let mut v = rng.normal_vec(n);
        let nv = norm2(&v);
        if nv == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        v
    };
    let mut v = unit(rng);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let mut g = op(&v);
        lambda = dot(&v, &g);
        if lambda <= 0.0 {
            // v landed in the null space; reseed.
            v = unit(rng);
            continue;
        }
        let residual = g
            .iter()
            .zip(&v)
            .map(|(gi, vi)| (gi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let ng = norm2(&g);
        g.iter_mut().for_each(|x| *x /= ng);
        v = g;
        if residual <= tol * lambda {
            return Ok(v);
        }
    }
    Err(lambda.max(0.0).sqrt())
}

/// `A·V` for row-stochastic `A`.
///
/// Each output row is a convex combination of rows of `V`, so the result
/// never exceeds `V` in block-∞/RMS norm.
pub fn row_stochastic_mix(a: &Matrix, v: &Matrix) -> Result<Matrix> {
    if a.cols() != v.rows() {
        return Err(StabilityError::dim(
            "row_stochastic_mix",
            format!("A is {}x{} but V has {} rows", a.rows(), a.cols(), v.rows()),
        ));
    }
    check_row_stochastic(a)?;
    Ok(a.dot(v))
}

pub(crate) fn check_row_stochastic(a: &Matrix) -> Result<()> {
    for (i, row) in a.row_iter().enumerate() {
        if let Some((j, &x)) = row.iter().enumerate().find(|(_, &x)| x < STOCHASTIC_NEG_TOL) {
            return Err(StabilityError::NotStochastic {
                row: i,
                detail: format!("has negative entry {x} at column {j}"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_SUM_TOL {
            return Err(StabilityError::NotStochastic {
                row: i,
                detail: format!("sums to {s}"),
            });
        }
    }
    Ok(())
}

/// Central-difference Jacobian of `f` at `x`.
///
/// Inputs and outputs are flattened row-major, so entry `(r, c)` is
/// `∂ vec(f(X))_r / ∂ vec(X)_c` estimated as
/// `(f(X + h E_c) − f(X − h E_c)) / 2h`.
pub fn finite_difference_jacobian<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if !(h > 0.0) {
        return Err(StabilityError::domain(
            "finite_difference_jacobian",
            format!("step must be > 0, got {h}"),
        ));
    }
    let n_in = x.data().len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_in);
    let mut probe = x.clone();
    for c in 0..n_in {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[c] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[c] = orig;
        if plus.shape() != minus.shape() {
            return Err(StabilityError::dim(
                "finite_difference_jacobian",
                "output shape changed between evaluations",
            ));
        }
        if !plus.is_finite() || !minus.is_finite() {
            return Err(StabilityError::NonFinite {
                op: "finite_difference_jacobian",
            });
        }
        columns.push(
            plus.data()
                .iter()
                .zip(minus.data())
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect(),
        );
    }
    let n_out = columns.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(n_out, n_in, |r, c| columns[c][r]))
}
