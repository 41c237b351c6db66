//! Observation model and prior densities for calibration.
//!
//! Weekly counts `c` are reported with independent errors of standard
//! deviation `max(5, 0.2 c_k)`. The field data `y` are log cumulative counts,
//! so the count-scale covariance is pushed through `c ↦ log cumsum(c)` to get
//! `Σ_y`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::DiscrepancyBasis;
use crate::design::{annotate, parse_f64};
use crate::epi::{log_count, ZERO_COUNT_FLOOR};
use crate::error::{Error, Result};
use crate::gp::GpHyperparams;
use crate::linalg::{cholesky_jittered, JitteredCholesky};
use crate::stats::{ln_beta_pdf, ln_gamma_pdf, ln_normal_pdf_prec};

/// Reporting error standard deviation for a weekly count.
pub fn observation_sd(weekly_count: f64) -> f64 {
    (0.2 * weekly_count).max(5.0)
}

fn cumulative(counts: &[u64]) -> Vec<f64> {
    counts
        .iter()
        .scan(0u64, |acc, &c| {
            *acc += c;
            Some((*acc as f64).max(ZERO_COUNT_FLOOR))
        })
        .collect()
}

/// First-order covariance of `log cumsum(c)`: `J V Jᵀ` with
/// `J[t, s] = 1{s ≤ t} / C_t`.
pub fn linearized_log_cumulative_cov(counts: &[u64]) -> Result<DMatrix<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("no observed weeks"));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::invalid("all weekly counts are zero"));
    }
    let cum = cumulative(counts);
    let mut acc = 0.0;
    let running: Vec<f64> = counts
        .iter()
        .map(|&c| {
            acc += observation_sd(c as f64).powi(2);
            acc
        })
        .collect();
    let n = counts.len();
    Ok(DMatrix::from_fn(n, n, |t, u| running[t.min(u)] / (cum[t] * cum[u])))
}

/// Covariance of the log cumulative observations.
///
/// Second-order expansion of the log transform under Gaussian count errors,
/// written as a sum of Schur products so it stays positive semidefinite:
/// `Σ = C ∘ (b bᵀ) + ½ C ∘ C` with `C` the linearized covariance and
/// `b_t = 1 + C_tt`. The diagonal is `a + 2.5a² + a³` against the exact
/// `a + 2.5a² + O(a³)`.
pub fn build_sigma_y(counts: &[u64]) -> Result<DMatrix<f64>> {
    let c = linearized_log_cumulative_cov(counts)?;
    let b: Vec<f64> = (0..c.nrows()).map(|t| 1.0 + c[(t, t)]).collect();
    Ok(DMatrix::from_fn(c.nrows(), c.ncols(), |t, u| {
        let x = c[(t, u)];
        x * (b[t] * b[u]) + 0.5 * x * x
    }))
}

/// Observed weekly counts with the derived log-cumulative data and covariance.
#[derive(Clone, Debug)]
pub struct Observations {
    pub weekly_counts: Vec<u64>,
    pub y: DVector<f64>,
    pub sigma_y: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl Observations {
    pub fn from_weekly(counts: &[u64]) -> Result<Self> {
        let sigma_y = build_sigma_y(counts)?;
        let y = DVector::from_iterator(counts.len(), cumulative(counts).into_iter().map(log_count));
        let eig = SymmetricEigen::new(sigma_y.clone());
        let scale = eig.eigenvalues.amax();
        if eig.eigenvalues.iter().any(|&e| !(e > 1e-14 * scale)) {
            return Err(Error::Conditioning { context: "observation covariance".into(), max_jitter: 0.0 });
        }
        Ok(Self { weekly_counts: counts.to_vec(), y, sigma_y, eigvals: eig.eigenvalues, eigvecs: eig.eigenvectors })
    }

    pub fn n_y(&self) -> usize {
        self.y.len()
    }

    /// Keeps the first `n` weeks.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_weekly(&self.weekly_counts[..n.min(self.n_y())])
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.eigvals.iter().map(|e| e.ln()).sum()
    }

    /// `(λ_y Σ_y⁻¹ + λ_w0 I)⁻¹`, formed through the eigenvectors of `Σ_y`.
    pub fn residual_covariance(&self, lambda_y: f64, lambda_w0: f64) -> DMatrix<f64> {
        let d = self.eigvals.map(|e| e / (lambda_y + lambda_w0 * e));
        &self.eigvecs * DMatrix::from_diagonal(&d) * self.eigvecs.transpose()
    }

    /// `½ log det(λ_y I + λ_w0 Σ_y)`, the normalizer paired with the
    /// quadratic form `rᵀ (λ_y Σ_y⁻¹ + λ_w0 I) r`.
    pub fn normalizer(&self, lambda_y: f64, lambda_w0: f64) -> f64 {
        0.5 * self.eigvals.iter().map(|e| (lambda_y + lambda_w0 * e).ln()).sum::<f64>()
    }

    fn quadratic(&self, r: &DVector<f64>, lambda_y: f64, lambda_w0: f64) -> f64 {
        let z = self.eigvecs.tr_mul(r);
        z.iter().zip(self.eigvals.iter()).map(|(z, e)| z * z * (lambda_y / e + lambda_w0)).sum()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| annotate(e.into(), path))?;
        let mut rows: Vec<(usize, u64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let week = parse_f64(rec.get(0).unwrap_or(""), path)?;
            let count = parse_f64(rec.get(1).unwrap_or(""), path)?;
            if count < 0.0 || count.fract() != 0.0 || week < 1.0 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!("bad row: week {week}, count {count}"),
                });
            }
            rows.push((week as usize, count as u64));
        }
        rows.sort_unstable();
        if rows.iter().enumerate().any(|(i, r)| r.0 != i + 1) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "weeks must run 1, 2, ... without gaps".into(),
            });
        }
        let counts: Vec<u64> = rows.into_iter().map(|r| r.1).collect();
        Self::from_weekly(&counts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_weekly_csv(path, &self.weekly_counts)
    }
}

pub fn write_weekly_csv(path: &Path, counts: &[u64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["week", "weekly_count"])?;
    for (t, c) in counts.iter().enumerate() {
        w.write_record([(t + 1).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Residual model `r ~ N(0, S)` with `S = (λ_y Σ_y⁻¹ + λ_w0 I)⁻¹ + E`, where
/// `E` is the emulator's predictive covariance on the observed weeks.
#[derive(Clone, Debug)]
pub struct ResidualModel {
    chol: JitteredCholesky,
    offset: f64,
}

impl ResidualModel {
    pub fn new(obs: &Observations, lambda_y: f64, lambda_w0: f64, emulator_cov: Option<&DMatrix<f64>>) -> Result<Self> {
        let mut s = obs.residual_covariance(lambda_y, lambda_w0);
        if let Some(e) = emulator_cov {
            s += e;
        }
        let chol = cholesky_jittered(&s, "residual covariance")?;
        Ok(Self { chol, offset: 0.5 * obs.log_det_sigma() })
    }

    pub fn log_density(&self, r: &DVector<f64>) -> f64 {
        let z = self.chol.solve_lower(r);
        -0.5 * self.chol.log_det() + self.offset - 0.5 * z.norm_squared()
    }

    /// `S⁻¹ x`.
    pub fn precision_times(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve_mat(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub const fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_gamma_pdf(x, self.shape, self.rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_beta_pdf(x, self.a, self.b)
    }
}

/// Hyperpriors. The calibration inputs `(θ, α)` are uniform on the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda_w: GammaPrior,
    pub lambda_weps: GammaPrior,
    pub lambda_w0: GammaPrior,
    pub lambda_y: GammaPrior,
    pub lambda_delta: GammaPrior,
    pub rho_w: BetaPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            lambda_w: GammaPrior::new(5.0, 5.0),
            lambda_weps: GammaPrior::new(3.0, 0.003),
            lambda_w0: GammaPrior::new(5.0, 0.005),
            lambda_y: GammaPrior::new(10.0, 10.0),
            lambda_delta: GammaPrior::new(1.0, 0.001),
            rho_w: BetaPrior { a: 1.0, b: 0.5 },
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let gammas = [self.lambda_w, self.lambda_weps, self.lambda_w0, self.lambda_y, self.lambda_delta];
        let ok = gammas.iter().all(|g| g.shape > 0.0 && g.rate > 0.0) && self.rho_w.a > 0.0 && self.rho_w.b > 0.0;
        if !ok || !gammas.iter().all(|g| g.shape.is_finite() && g.rate.is_finite()) {
            return Err(Error::Config("prior shapes and rates must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the sampler moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Calibration inputs followed by the quantile level, all on the unit scale.
    pub theta_alpha: Vec<f64>,
    pub lambda_y: f64,
    pub v: Vec<f64>,
    pub lambda_delta: f64,
    pub hp: GpHyperparams,
}

impl CalibrationState {
    pub fn in_support(&self) -> bool {
        let unit = self.theta_alpha.iter().all(|x| (0.0..=1.0).contains(x));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        unit && pos(self.lambda_y)
            && pos(self.lambda_delta)
            && self.v.iter().all(|v| v.is_finite())
            && self.hp.validate(self.theta_alpha.len()).is_ok()
    }
}

/// Log density of the hyperparameters of the weight processes.
pub fn log_hyperprior(hp: &GpHyperparams, cfg: &PriorConfig) -> f64 {
    let lw: f64 = hp.lambda_w.iter().map(|&x| cfg.lambda_w.ln_pdf(x)).sum();
    let le: f64 = hp.lambda_weps.iter().map(|&x| cfg.lambda_weps.ln_pdf(x)).sum();
    let rho: f64 = hp.rho_w.iter().flatten().map(|&x| cfg.rho_w.ln_pdf(x)).sum();
    lw + le + rho + cfg.lambda_w0.ln_pdf(hp.lambda_w0)
}

/// Full prior log density; `-inf` outside the support.
pub fn log_prior(state: &CalibrationState, cfg: &PriorConfig) -> f64 {
    if state.theta_alpha.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return f64::NEG_INFINITY;
    }
    let base = cfg.lambda_y.ln_pdf(state.lambda_y) + cfg.lambda_delta.ln_pdf(state.lambda_delta);
    if !base.is_finite() {
        return f64::NEG_INFINITY;
    }
    let v: f64 = state.v.iter().map(|&x| ln_normal_pdf_prec(x, state.lambda_delta)).sum();
    base + v + log_hyperprior(&state.hp, cfg)
}

fn residual(
    state: &CalibrationState,
    obs: &Observations,
    emu_mean: &DVector<f64>,
    disc: &DiscrepancyBasis,
) -> Result<DVector<f64>> {
    let n = obs.n_y();
    if emu_mean.len() != n || disc.d.nrows() < n || state.v.len() != disc.p_delta() {
        return Err(Error::invalid("observation, emulator and discrepancy dimensions disagree"));
    }
    let d = disc.d.rows(0, n);
    Ok(&obs.y - emu_mean - d * DVector::from_column_slice(&state.v))
}

/// Data log likelihood given the emulator mean on the observed weeks:
/// `½ log det(λ_y I + λ_w0 Σ_y) − ½ rᵀ (λ_y Σ_y⁻¹ + λ_w0 I) r` with
/// `r = y − η − D v`.
pub fn log_likelihood(
    state: &CalibrationState,
    obs: &Observations,
    emu_mean: &DVector<f64>,
    disc: &DiscrepancyBasis,
) -> Result<f64> {
    let r = residual(state, obs, emu_mean, disc)?;
    let (ly, lw0) = (state.lambda_y, state.hp.lambda_w0);
    Ok(obs.normalizer(ly, lw0) - 0.5 * obs.quadratic(&r, ly, lw0))
}

/// As [`log_likelihood`] with the emulator's predictive covariance added to
/// the residual covariance. Equals it when `emulator_cov` is zero.
pub fn log_likelihood_with_emulator(
    state: &CalibrationState,
    obs: &Observations,
    emu_mean: &DVector<f64>,
    emulator_cov: &DMatrix<f64>,
    disc: &DiscrepancyBasis,
) -> Result<f64> {
    let r = residual(state, obs, emu_mean, disc)?;
    let model = ResidualModel::new(obs, state.lambda_y, state.hp.lambda_w0, Some(emulator_cov))?;
    Ok(model.log_density(&r))
}
