//! Dense linear-algebra helpers shared by the GP and likelihood code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First jitter tried when a plain Cholesky factorization fails.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter it needed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    /// Solves `L x = b` for the lower-triangular factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.l_dirty().solve_lower_triangular(b).expect("Cholesky factor has a positive diagonal")
    }

    pub fn n(&self) -> usize {
        self.factor.l_dirty().nrows()
    }
}

/// Cholesky with the escalation policy: no jitter, then 1e-8 growing by ×10
/// up to 1e-4 added to the diagonal.
pub fn cholesky_jittered(a: &DMatrix<f64>, context: &str) -> Result<JitteredCholesky> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("{context}: non-finite matrix entry")));
    }
    if let Some(factor) = Cholesky::new(a.clone()) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(m) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { context: context.to_string(), max_jitter: JITTER_MAX })
}

/// Log density of `N(0, cov)` at `x`, via the given factorization of `cov`.
pub fn mvn_log_density(chol: &JitteredCholesky, x: &DVector<f64>) -> f64 {
    let z = chol.solve_lower(x);
    let n = x.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + z.norm_squared())
}
