//! Independent zero-mean Gaussian processes over `(θ, α)` for each basis weight.
//!
//! Weight `i` has covariance `λ_wi⁻¹ R(x, x'; ρ_i)` with
//! `R = ∏_k ρ_ik^{4 (x_k − x'_k)²}`, so `ρ_ik` is the correlation between two
//! inputs that differ by half the unit range in dimension `k` only. Projected
//! simulations are noisy observations of the weights,
//! `w*_i ~ N(w_i, λ_wεi⁻¹ I)`, and `w_i` is integrated out analytically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, mvn_log_density, JitteredCholesky};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Marginal precision of each weight process.
    pub lambda_w: Vec<f64>,
    /// `p_eta` rows of per-dimension correlation parameters in (0, 1).
    pub rho_w: Vec<Vec<f64>>,
    /// Nugget precision of each weight process.
    pub lambda_weps: Vec<f64>,
    /// Precision of the basis-truncation error.
    pub lambda_w0: f64,
}

impl GpHyperparams {
    /// Uniform starting values for `p_eta` processes over `dim` inputs.
    pub fn initial(p_eta: usize, dim: usize, rho: f64, lambda_weps: f64, lambda_w0: f64) -> Self {
        Self {
            lambda_w: vec![1.0; p_eta],
            rho_w: vec![vec![rho; dim]; p_eta],
            lambda_weps: vec![lambda_weps; p_eta],
            lambda_w0,
        }
    }

    pub fn p_eta(&self) -> usize {
        self.lambda_w.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let p = self.p_eta();
        if self.rho_w.len() != p || self.lambda_weps.len() != p {
            return Err(Error::invalid("hyperparameter blocks disagree on p_eta"));
        }
        if self.rho_w.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid(format!("each rho row needs {dim} entries")));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.lambda_w.iter().chain(&self.lambda_weps).all(|&v| positive(v)) || !positive(self.lambda_w0) {
            return Err(Error::invalid("precisions must be positive"));
        }
        if self.rho_w.iter().flatten().any(|&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::invalid("correlation parameters must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn check_rho(rho: &[f64]) -> Result<()> {
    if rho.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        return Err(Error::invalid("rho must lie strictly inside (0, 1)"));
    }
    Ok(())
}

/// `∏_k ρ_k^{4 (x_k − x'_k)²}`.
pub fn correlation(x: &[f64], y: &[f64], rho: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != rho.len() {
        return Err(Error::invalid("input and rho dimensions disagree"));
    }
    check_rho(rho)?;
    Ok(x.iter().zip(y).zip(rho).map(|((a, b), r)| r.powf(4.0 * (a - b) * (a - b))).product())
}

/// Per-dimension scaled squared distances `4 (x_ik − x_jk)²` between design rows,
/// computed once and reused for every correlation parameter value.
#[derive(Clone, Debug)]
pub struct DesignGeometry {
    pub inputs: DMatrix<f64>,
    sq: Vec<DMatrix<f64>>,
}

impl DesignGeometry {
    pub fn new(inputs: DMatrix<f64>) -> Self {
        let n = inputs.nrows();
        let sq = (0..inputs.ncols())
            .map(|k| {
                DMatrix::from_fn(n, n, |i, j| {
                    let d = inputs[(i, k)] - inputs[(j, k)];
                    4.0 * d * d
                })
            })
            .collect();
        Self { inputs, sq }
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn correlation_matrix(&self, rho: &[f64]) -> DMatrix<f64> {
        let logs: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
        let n = self.n();
        let mut acc = DMatrix::zeros(n, n);
        for (d, l) in self.sq.iter().zip(&logs) {
            acc.zip_apply(d, |a, b| *a += l * b);
        }
        acc.map(f64::exp)
    }

    /// Correlations between a new input and every design row.
    pub fn cross_correlation(&self, x: &[f64], rho: &[f64]) -> DVector<f64> {
        let logs: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
        DVector::from_fn(self.n(), |i, _| {
            let s: f64 = (0..self.dim())
                .map(|k| {
                    let d = x[k] - self.inputs[(i, k)];
                    4.0 * d * d * logs[k]
                })
                .sum();
            s.exp()
        })
    }
}

/// The prior covariance blocks `λ_wi⁻¹ R(design; ρ_i)`; cross-basis blocks are zero.
pub fn build_sigma_w(inputs: &DMatrix<f64>, hp: &GpHyperparams) -> Result<Vec<DMatrix<f64>>> {
    hp.validate(inputs.ncols())?;
    let geom = DesignGeometry::new(inputs.clone());
    Ok((0..hp.p_eta()).map(|i| geom.correlation_matrix(&hp.rho_w[i]) / hp.lambda_w[i]).collect())
}

/// Factorization of one weight process's marginal covariance
/// `λ_w⁻¹ R + λ_wε⁻¹ I` and the quantities prediction needs.
#[derive(Clone, Debug)]
pub struct WeightFactor {
    pub lambda_w: f64,
    pub rho: Vec<f64>,
    pub lambda_weps: f64,
    pub chol: JitteredCholesky,
    /// `K⁻¹ w*`.
    pub alpha: DVector<f64>,
    pub log_marginal: f64,
}

impl WeightFactor {
    pub fn new(
        geom: &DesignGeometry,
        w_star: &DVector<f64>,
        lambda_w: f64,
        rho: &[f64],
        lambda_weps: f64,
    ) -> Result<Self> {
        let mut k = geom.correlation_matrix(rho) / lambda_w;
        for j in 0..geom.n() {
            k[(j, j)] += 1.0 / lambda_weps;
        }
        let chol = cholesky_jittered(&k, "weight process marginal covariance")?;
        let alpha = chol.solve(w_star);
        let log_marginal = mvn_log_density(&chol, w_star);
        Ok(Self { lambda_w, rho: rho.to_vec(), lambda_weps, chol, alpha, log_marginal })
    }

    /// Conditional mean and variance of the latent weight at a single input.
    pub fn predict_point(&self, geom: &DesignGeometry, x: &[f64]) -> (f64, f64) {
        let k = geom.cross_correlation(x, &self.rho) / self.lambda_w;
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve_lower(&k);
        let var = (1.0 / self.lambda_w - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Conditional mean vector and covariance at several inputs (rows of `xs`).
    pub fn predict(&self, geom: &DesignGeometry, xs: &DMatrix<f64>) -> Result<WeightPrediction> {
        let nt = xs.nrows();
        let rows: Vec<Vec<f64>> = (0..nt).map(|r| xs.row(r).iter().copied().collect()).collect();
        let mut kx = DMatrix::zeros(geom.n(), nt);
        for (c, x) in rows.iter().enumerate() {
            kx.set_column(c, &(geom.cross_correlation(x, &self.rho) / self.lambda_w));
        }
        let mean = kx.transpose() * &self.alpha;
        let l = self.chol.factor.l_dirty();
        let v = l.solve_lower_triangular(&kx).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let mut cov =
            DMatrix::from_fn(nt, nt, |a, b| correlation(&rows[a], &rows[b], &self.rho).unwrap_or(0.0)) / self.lambda_w;
        cov -= v.transpose() * v;
        for a in 0..nt {
            cov[(a, a)] = cov[(a, a)].max(0.0);
        }
        Ok(WeightPrediction { mean, cov })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightPrediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_shapes(w_star: &DMatrix<f64>, inputs: &DMatrix<f64>, hp: &GpHyperparams) -> Result<()> {
    hp.validate(inputs.ncols())?;
    if w_star.nrows() != hp.p_eta() || w_star.ncols() != inputs.nrows() {
        return Err(Error::invalid(format!(
            "w* is {}×{} but expected {}×{}",
            w_star.nrows(),
            w_star.ncols(),
            hp.p_eta(),
            inputs.nrows()
        )));
    }
    Ok(())
}

/// Sum over weight processes of `log N(w*_i; 0, λ_wi⁻¹ R_i + λ_wεi⁻¹ I)`.
pub fn log_marginal_w(w_star: &DMatrix<f64>, inputs: &DMatrix<f64>, hp: &GpHyperparams) -> Result<f64> {
    check_shapes(w_star, inputs, hp)?;
    let geom = DesignGeometry::new(inputs.clone());
    (0..hp.p_eta()).try_fold(0.0, |acc, i| {
        let f = WeightFactor::new(&geom, &w_star.row(i).transpose(), hp.lambda_w[i], &hp.rho_w[i], hp.lambda_weps[i])?;
        Ok(acc + f.log_marginal)
    })
}

/// Conditional distribution of each latent weight process at `new_inputs`
/// given the projected simulations.
pub fn predict_weights(
    new_inputs: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    w_star: &DMatrix<f64>,
    hp: &GpHyperparams,
) -> Result<Vec<WeightPrediction>> {
    check_shapes(w_star, inputs, hp)?;
    if new_inputs.ncols() != inputs.ncols() {
        return Err(Error::invalid("new inputs have the wrong dimension"));
    }
    let geom = DesignGeometry::new(inputs.clone());
    (0..hp.p_eta())
        .map(|i| {
            let f =
                WeightFactor::new(&geom, &w_star.row(i).transpose(), hp.lambda_w[i], &hp.rho_w[i], hp.lambda_weps[i])?;
            f.predict(&geom, new_inputs)
        })
        .collect()
}

/// All weight processes factored at one hyperparameter setting.
#[derive(Clone, Debug)]
pub struct FittedEmulator {
    pub geom: std::sync::Arc<DesignGeometry>,
    pub factors: Vec<WeightFactor>,
}

impl FittedEmulator {
    pub fn new(geom: std::sync::Arc<DesignGeometry>, w_star: &DMatrix<f64>, hp: &GpHyperparams) -> Result<Self> {
        check_shapes(w_star, &geom.inputs, hp)?;
        let factors = (0..hp.p_eta())
            .map(|i| {
                WeightFactor::new(&geom, &w_star.row(i).transpose(), hp.lambda_w[i], &hp.rho_w[i], hp.lambda_weps[i])
            })
            .collect::<Result<_>>()?;
        Ok(Self { geom, factors })
    }

    pub fn log_marginal(&self) -> f64 {
        self.factors.iter().map(|f| f.log_marginal).sum()
    }

    /// Per-basis conditional means and variances at one input.
    pub fn predict_point(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let (m, v): (Vec<f64>, Vec<f64>) = self.factors.iter().map(|f| f.predict_point(&self.geom, x)).unzip();
        (DVector::from_vec(m), DVector::from_vec(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn hp1(lw: f64, rho: Vec<f64>, le: f64) -> GpHyperparams {
        GpHyperparams { lambda_w: vec![lw], rho_w: vec![rho], lambda_weps: vec![le], lambda_w0: 1.0 }
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(correlation(&[0.2, 0.7], &[0.2, 0.7], &[0.3, 0.9]).unwrap(), 1.0);
        assert_eq!(correlation(&[0.0, 0.5], &[0.5, 0.5], &[0.3, 0.9]).unwrap(), 0.3);
        let far = correlation(&[0.0], &[1.0], &[0.3]).unwrap();
        assert!((far - 0.0081).abs() < 1e-15);
        assert!(correlation(&[0.0], &[1.0], &[1.0]).is_err());
        assert!(correlation(&[0.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn sigma_w_small_cases() {
        let x = DMatrix::from_row_slice(1, 2, &[0.3, 0.4]);
        let hp = hp1(4.0, vec![0.5, 0.5], 100.0);
        let s = build_sigma_w(&x, &hp).unwrap();
        assert_eq!(s[0][(0, 0)], 0.25);

        let dup = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.3, 0.4]);
        let s = build_sigma_w(&dup, &hp).unwrap();
        assert!(s[0].iter().all(|&v| v == 0.25));
        let c = cholesky_jittered(&s[0], "dup").unwrap();
        assert!(c.jitter > 0.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x3 = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>());
        let hp = hp1(2.0, vec![0.2, 0.7], 50.0);
        let s = build_sigma_w(&x3, &hp).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let xi: Vec<f64> = x3.row(i).iter().copied().collect();
                let xj: Vec<f64> = x3.row(j).iter().copied().collect();
                let brute = correlation(&xi, &xj, &[0.2, 0.7]).unwrap() / 2.0;
                assert!((s[0][(i, j)] - brute).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scalar_marginal_at_mean() {
        let x = DMatrix::from_row_slice(1, 1, &[0.5]);
        let w = DMatrix::from_row_slice(1, 1, &[0.0]);
        let hp = hp1(2.0, vec![0.5], 4.0);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * (0.5 + 0.25)).ln();
        assert!((log_marginal_w(&w, &x, &hp).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn tighter_nugget_helps_interpolating_data() {
        // Smooth data on a 1-d grid that the GP can interpolate.
        let x = DMatrix::from_fn(8, 1, |i, _| i as f64 / 7.0);
        let w = DMatrix::from_fn(1, 8, |_, i| (3.0 * i as f64 / 7.0).sin());
        let loose = log_marginal_w(&w, &x, &hp1(1.0, vec![0.6], 100.0)).unwrap();
        let tight = log_marginal_w(&w, &x, &hp1(1.0, vec![0.6], 200.0)).unwrap();
        assert!(tight > loose);
    }

    #[test]
    fn prediction_limits() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let w = DMatrix::from_row_slice(1, 3, &[0.7, -0.2, 1.1]);
        // near-infinite nugget precision: interpolation at a training input
        let p = predict_weights(&DMatrix::from_row_slice(1, 1, &[0.5]), &x, &w, &hp1(1.0, vec![0.4], 1e10)).unwrap();
        assert!((p[0].mean[0] + 0.2).abs() < 1e-6);
        // vanishing correlation: prior mean and variance
        let p = predict_weights(&DMatrix::from_row_slice(1, 1, &[0.3]), &x, &w, &hp1(2.0, vec![1e-300], 10.0)).unwrap();
        assert!(p[0].mean[0].abs() < 1e-9);
        assert!((p[0].cov[(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn point_and_batch_prediction_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>());
        let w = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let hp = GpHyperparams {
            lambda_w: vec![1.5, 0.7],
            rho_w: vec![vec![0.3, 0.6, 0.9], vec![0.8, 0.2, 0.5]],
            lambda_weps: vec![30.0, 80.0],
            lambda_w0: 1.0,
        };
        let geom = std::sync::Arc::new(DesignGeometry::new(x.clone()));
        let fit = FittedEmulator::new(geom, &w, &hp).unwrap();
        let xt = DMatrix::from_row_slice(1, 3, &[0.4, 0.1, 0.75]);
        let batch = predict_weights(&xt, &x, &w, &hp).unwrap();
        let (m, v) = fit.predict_point(&[0.4, 0.1, 0.75]);
        for i in 0..2 {
            assert!((batch[i].mean[0] - m[i]).abs() < 1e-12);
            assert!((batch[i].cov[(0, 0)] - v[i]).abs() < 1e-12);
        }
        assert!((fit.log_marginal() - log_marginal_w(&w, &x, &hp).unwrap()).abs() < 1e-10);
    }
}
