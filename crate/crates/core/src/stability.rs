//! Lyapunov certificates for inverter/grid feedback.
//!
//! * [`check_proposition1`]: asymptotic stability of `T ds/dt = f(Zs + v̄) - s`
//!   holds when `-λmin(M T⁻¹) + λmax(M T⁻¹) ‖C_s Z‖₂ <= 0`.
//! * [`build_lambda`] / [`build_theta`]: the matrices whose element-wise
//!   non-positivity certifies the adaptive injection and adaptive bias laws.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("time constants must be finite and > 0")]
    BadTimeConstants,
    #[error("invalid placement matrix: {0}")]
    Placement(String),
}

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX: usize = 100_000;

/// Largest singular value by power iteration on the smaller Gram matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64, StabilityError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    if a.is_empty() || a.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let gram = if a.nrows() < a.ncols() { a * a.transpose() } else { a.transpose() * a };
    let k = gram.nrows();
    // Deterministic start with no special symmetry.
    let mut v = DVector::from_fn(k, |i, _| 1.0 + ((i * 7919) % 13) as f64 / 13.0);
    v /= v.norm();
    for _ in 0..POWER_ITERATION_MAX {
        let w = &gram * &v;
        let rayleigh = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        // For symmetric `gram`, some eigenvalue lies within the residual of
        // the Rayleigh quotient.
        let residual = (&w - &v * rayleigh).norm();
        if residual <= POWER_ITERATION_TOL * rayleigh.abs() {
            return Ok(rayleigh.max(0.0).sqrt());
        }
        v = w / norm;
    }
    Err(StabilityError::NoConvergence { iterations: POWER_ITERATION_MAX })
}

/// Matrices entering the certificates. `t` holds the 2n diagonal filter time
/// constants (active block first).
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateInputs {
    pub z: DMatrix<f64>,
    pub c_p: DVector<f64>,
    pub c_q: DVector<f64>,
    pub t: DVector<f64>,
    /// Lyapunov weight for the direct criterion; `None` means `M = T`.
    pub m: Option<DMatrix<f64>>,
    /// Output weight of the adaptive certificates; `None` means identity.
    pub p: Option<DMatrix<f64>>,
}

impl CertificateInputs {
    pub fn new(z: DMatrix<f64>, c_p: DVector<f64>, c_q: DVector<f64>, t: DVector<f64>) -> Self {
        CertificateInputs { z, c_p, c_q, t, m: None, p: None }
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    fn validate(&self) -> Result<(), StabilityError> {
        let n = self.n();
        let shape = |what, m: &DMatrix<f64>, expected: (usize, usize)| {
            if m.shape() != expected {
                Err(StabilityError::Shape { what, expected, got: m.shape() })
            } else {
                Ok(())
            }
        };
        shape("Z", &self.z, (n, 2 * n))?;
        for (what, v, len) in [("C_p", &self.c_p, n), ("C_q", &self.c_q, n), ("T", &self.t, 2 * n)] {
            if v.len() != len {
                return Err(StabilityError::Shape { what, expected: (len, 1), got: (v.len(), 1) });
            }
        }
        if self.t.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return Err(StabilityError::BadTimeConstants);
        }
        if let Some(m) = &self.m {
            shape("M", m, (2 * n, 2 * n))?;
        }
        if let Some(p) = &self.p {
            shape("P", p, (n, n))?;
        }
        Ok(())
    }

    /// `[diag(C_p); diag(C_q)]`, 2n x n.
    pub fn c_s(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut c = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            c[(i, i)] = self.c_p[i];
            c[(n + i, i)] = self.c_q[i];
        }
        c
    }

    /// `diag(C_p, C_q)`, 2n x 2n: per-channel Lipschitz gains.
    pub fn c_block(&self) -> DMatrix<f64> {
        let diag = DVector::from_iterator(2 * self.n(), self.c_p.iter().chain(self.c_q.iter()).copied());
        DMatrix::from_diagonal(&diag)
    }

    pub fn t_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.t.map(|t| 1.0 / t))
    }

    fn p_or_identity(&self) -> DMatrix<f64> {
        self.p.clone().unwrap_or_else(|| DMatrix::identity(self.n(), self.n()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub sigma: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub margin: f64,
    pub satisfied: bool,
}

impl std::fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "sigma = {:.6}, lambda_min = {:.6}, lambda_max = {:.6}, margin = {:.6} => {}",
            self.sigma,
            self.lambda_min,
            self.lambda_max,
            self.margin,
            if self.satisfied { "stable (certified)" } else { "not certified" }
        )
    }
}

fn require_spd(m: &DMatrix<f64>, what: &'static str) -> Result<(), StabilityError> {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > 1e-12 * scale || m.clone().cholesky().is_none() {
        return Err(StabilityError::NotPositiveDefinite(what));
    }
    Ok(())
}

pub fn check_proposition1(inputs: &CertificateInputs) -> Result<StabilityReport, StabilityError> {
    inputs.validate()?;
    let sigma = spectral_norm(&(inputs.c_s() * &inputs.z))?;
    let (lambda_min, lambda_max) = match &inputs.m {
        None => (1.0, 1.0),
        Some(m) => {
            require_spd(m, "M")?;
            // M T⁻¹ is similar to T^{-1/2} M T^{-1/2}, which is symmetric.
            let s = inputs.t.map(|t| 1.0 / t.sqrt());
            let sym = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)] * s[j]);
            let eig = sym.symmetric_eigenvalues();
            (eig.min(), eig.max())
        }
    };
    let margin = -lambda_min + lambda_max * sigma;
    Ok(StabilityReport { sigma, lambda_min, lambda_max, margin, satisfied: margin <= 0.0 })
}

fn check_placement(m: &DMatrix<f64>, rows: usize, what: &str) -> Result<(), StabilityError> {
    if m.nrows() != rows {
        return Err(StabilityError::Placement(format!("{what} must have {rows} rows, got {}", m.nrows())));
    }
    if m.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(StabilityError::Placement(format!("{what} entries must be 0 or 1")));
    }
    for (i, row) in m.row_iter().enumerate() {
        if row.sum() > 1.0 {
            return Err(StabilityError::Placement(format!("{what} row {i} has more than one 1")));
        }
    }
    for (j, col) in m.column_iter().enumerate() {
        if col.sum() > 1.0 {
            return Err(StabilityError::Placement(format!("{what} column {j} has more than one 1")));
        }
    }
    Ok(())
}

/// Block-diagonal placement `diag(B_p, B_q)` for active controllers at
/// `p_nodes` and reactive controllers at `q_nodes` (0-based node indices).
pub fn injection_placement(n: usize, p_nodes: &[usize], q_nodes: &[usize]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(2 * n, p_nodes.len() + q_nodes.len());
    for (j, &i) in p_nodes.iter().enumerate() {
        b[(i, j)] = 1.0;
    }
    for (j, &i) in q_nodes.iter().enumerate() {
        b[(n + i, p_nodes.len() + j)] = 1.0;
    }
    b
}

/// `D` for bias controllers at `nodes` (0-based).
pub fn bias_placement(n: usize, nodes: &[usize]) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, nodes.len());
    for (j, &i) in nodes.iter().enumerate() {
        d[(i, j)] = 1.0;
    }
    d
}

/// `Λ = P Z T⁻¹ diag(C_p, C_q) B - Îᵀ B Γ H`, with `Î = [I; I]`.
pub fn build_lambda(
    inputs: &CertificateInputs,
    b: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    inputs.validate()?;
    let n = inputs.n();
    check_placement(b, 2 * n, "B")?;
    let k = b.ncols();
    for (what, m) in [("Gamma", gamma), ("H", h)] {
        if m.shape() != (k, k) {
            return Err(StabilityError::Shape { what, expected: (k, k), got: m.shape() });
        }
    }
    let i_hat_t = {
        let mut m = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            m[(i, i)] = 1.0;
            m[(i, n + i)] = 1.0;
        }
        m
    };
    let drive = inputs.p_or_identity() * &inputs.z * inputs.t_inv() * inputs.c_block() * b;
    Ok(drive - i_hat_t * b * gamma * h)
}

/// `Θ = P Z T⁻¹ C_s D - D Γ_v H`.
pub fn build_theta(
    inputs: &CertificateInputs,
    d: &DMatrix<f64>,
    gamma_v: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    inputs.validate()?;
    let n = inputs.n();
    check_placement(d, n, "D")?;
    let l = d.ncols();
    for (what, m) in [("Gamma_v", gamma_v), ("H", h)] {
        if m.shape() != (l, l) {
            return Err(StabilityError::Shape { what, expected: (l, l), got: m.shape() });
        }
    }
    let drive = inputs.p_or_identity() * &inputs.z * inputs.t_inv() * inputs.c_s() * d;
    Ok(drive - d * gamma_v * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonPositivity {
    pub nonpositive: bool,
    /// Largest entry and its position.
    pub worst: f64,
    pub at: (usize, usize),
}

pub fn check_nonpositive(a: &DMatrix<f64>, tol: f64) -> NonPositivity {
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0, 0);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if a[(i, j)] > worst {
                worst = a[(i, j)];
                at = (i, j);
            }
        }
    }
    NonPositivity { nonpositive: a.is_empty() || worst <= tol, worst, at }
}

/// Base shape of the adaptation weight: `I + 1 1ᵀ`. Symmetric positive
/// definite with every entry positive, so every row of `Îᵀ B Γ H` grows
/// with the scale.
pub fn h_base(k: usize) -> DMatrix<f64> {
    DMatrix::from_element(k, k, 1.0) + DMatrix::identity(k, k)
}

pub const H_SCALE_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateSearch {
    /// Smallest scale found (within bisection tolerance) making the
    /// certificate non-positive, or `None` if the cap was reached.
    pub h_scale: Option<f64>,
    pub at_cap: NonPositivity,
}

/// Bisects the scalar `h` in `H = h * H_base` until `build(H)` is
/// element-wise non-positive, up to [`H_SCALE_CAP`].
pub fn search_h_scale<F>(k: usize, mut build: F) -> Result<CertificateSearch, StabilityError>
where
    F: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>, StabilityError>,
{
    let base = h_base(k);
    let at_cap = check_nonpositive(&build(&(&base * H_SCALE_CAP))?, 0.0);
    if !at_cap.nonpositive {
        return Ok(CertificateSearch { h_scale: None, at_cap });
    }
    if check_nonpositive(&build(&(&base * 0.0))?, 0.0).nonpositive {
        return Ok(CertificateSearch { h_scale: Some(0.0), at_cap });
    }
    let (mut lo, mut hi) = (0.0, H_SCALE_CAP);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if check_nonpositive(&build(&(&base * mid))?, 0.0).nonpositive {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(CertificateSearch { h_scale: Some(hi), at_cap })
}
