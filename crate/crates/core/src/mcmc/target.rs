use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{BlockTarget, Coordinate, ParamClass, Transform};
use crate::basis::{BasisDecomposition, DiscrepancyBasis};
use crate::calib::{log_hyperprior, log_prior, CalibrationState, Observations, PriorConfig, ResidualModel};
use crate::error::{Error, Result};
use crate::gp::{DesignGeometry, FittedEmulator, GpHyperparams, WeightFactor};
use crate::linalg::cholesky_jittered;
use crate::rng::Rng;
use crate::stats::trigamma;

/// What the chain targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Emulator marginal, data likelihood and all priors.
    Full,
    /// Weight-process hyperparameters only: emulator marginal plus hyperprior.
    EmulatorOnly,
    /// Priors alone, every coordinate free.
    PriorOnly,
}

/// Column layout of a flattened [`CalibrationState`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateLayout {
    /// Calibration input names followed by `alpha`.
    pub inputs: Vec<String>,
    pub p_eta: usize,
    pub p_delta: usize,
}

impl StateLayout {
    pub fn columns(&self) -> Vec<String> {
        let mut c = self.inputs.clone();
        c.extend(["lambda_y", "lambda_delta", "lambda_w0"].map(String::from));
        c.extend((1..=self.p_eta).map(|i| format!("lambda_w_{i}")));
        c.extend((1..=self.p_eta).map(|i| format!("lambda_weps_{i}")));
        for i in 1..=self.p_eta {
            c.extend(self.inputs.iter().map(|n| format!("rho_w_{i}_{n}")));
        }
        c.extend((1..=self.p_delta).map(|k| format!("v_{k}")));
        c
    }

    /// Recovers the layout from a column header.
    pub fn from_columns(columns: &[String]) -> Result<Self> {
        let k =
            columns.iter().position(|c| c == "lambda_y").ok_or_else(|| Error::invalid("draw columns lack lambda_y"))?;
        let inputs = columns[..k].to_vec();
        let p_eta = columns.iter().filter(|c| c.starts_with("lambda_w_")).count();
        let p_delta = columns.iter().filter(|c| c.starts_with("v_")).count();
        let layout = Self { inputs, p_eta, p_delta };
        if layout.columns() != columns {
            return Err(Error::invalid("unrecognized draw column layout"));
        }
        Ok(layout)
    }

    pub fn to_row(&self, s: &CalibrationState) -> Vec<f64> {
        let mut r = s.theta_alpha.clone();
        r.extend([s.lambda_y, s.lambda_delta, s.hp.lambda_w0]);
        r.extend(&s.hp.lambda_w);
        r.extend(&s.hp.lambda_weps);
        for rho in &s.hp.rho_w {
            r.extend(rho);
        }
        r.extend(&s.v);
        r
    }

    pub fn from_row(&self, row: &[f64]) -> Result<CalibrationState> {
        let d = self.inputs.len();
        if row.len() != self.columns().len() {
            return Err(Error::invalid("draw row has the wrong length"));
        }
        let mut at = d + 3;
        let mut take = |n: usize| {
            let s = row[at..at + n].to_vec();
            at += n;
            s
        };
        let lambda_w = take(self.p_eta);
        let lambda_weps = take(self.p_eta);
        let rho_w = (0..self.p_eta).map(|_| take(d)).collect();
        let v = take(self.p_delta);
        Ok(CalibrationState {
            theta_alpha: row[..d].to_vec(),
            lambda_y: row[d],
            lambda_delta: row[d + 1],
            v,
            hp: GpHyperparams { lambda_w, rho_w, lambda_weps, lambda_w0: row[d + 2] },
        })
    }
}

/// Fixed inputs of the calibration posterior.
#[derive(Clone, Debug)]
pub struct CalibrationData {
    pub input_names: Vec<String>,
    pub geom: Arc<DesignGeometry>,
    /// `p_eta × n` projected simulation weights.
    pub w_star: DMatrix<f64>,
    pub basis: BasisDecomposition,
    pub disc: DiscrepancyBasis,
    pub obs: Option<Observations>,
    pub priors: PriorConfig,
    phi_obs: DMatrix<f64>,
    phi0_obs: DVector<f64>,
    d_obs: DMatrix<f64>,
}

impl CalibrationData {
    pub fn new(
        input_names: Vec<String>,
        inputs: DMatrix<f64>,
        w_star: DMatrix<f64>,
        basis: BasisDecomposition,
        disc: DiscrepancyBasis,
        obs: Option<Observations>,
        priors: PriorConfig,
    ) -> Result<Self> {
        priors.validate()?;
        if input_names.len() != inputs.ncols() {
            return Err(Error::invalid("one name per input column required"));
        }
        if w_star.nrows() != basis.p_eta() || w_star.ncols() != inputs.nrows() {
            return Err(Error::invalid("w* does not match the basis and design"));
        }
        if disc.d.nrows() != basis.weeks() {
            return Err(Error::invalid("discrepancy and emulator bases cover different weeks"));
        }
        let n_y = obs.as_ref().map_or(0, |o| o.n_y());
        if n_y > basis.weeks() {
            return Err(Error::invalid(format!("{n_y} observed weeks but the simulator covers {}", basis.weeks())));
        }
        Ok(Self {
            phi_obs: basis.phi.rows(0, n_y).into_owned(),
            phi0_obs: basis.phi0.rows(0, n_y).into_owned(),
            d_obs: disc.d.rows(0, n_y).into_owned(),
            input_names,
            geom: Arc::new(DesignGeometry::new(inputs)),
            w_star,
            basis,
            disc,
            obs,
            priors,
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout { inputs: self.input_names.clone(), p_eta: self.basis.p_eta(), p_delta: self.disc.p_delta() }
    }

    pub fn dim(&self) -> usize {
        self.geom.dim()
    }

    fn factor(&self, hp: &GpHyperparams, i: usize) -> Result<WeightFactor> {
        WeightFactor::new(&self.geom, &self.w_star.row(i).transpose(), hp.lambda_w[i], &hp.rho_w[i], hp.lambda_weps[i])
    }

    pub fn fit_emulator(&self, hp: &GpHyperparams) -> Result<FittedEmulator> {
        FittedEmulator::new(self.geom.clone(), &self.w_star, hp)
    }

    /// Residual model and `y − η` on the observed weeks at the state's inputs.
    fn data_fit(&self, factors: &[&WeightFactor], state: &CalibrationState) -> Result<(ResidualModel, DVector<f64>)> {
        let obs = self.obs.as_ref().ok_or_else(|| Error::invalid("no observations supplied"))?;
        let (m, s2): (Vec<f64>, Vec<f64>) =
            factors.iter().map(|f| f.predict_point(&self.geom, &state.theta_alpha)).unzip();
        let eta = &self.phi0_obs + &self.phi_obs * DVector::from_vec(m);
        let scaled = &self.phi_obs * DMatrix::from_diagonal(&DVector::from_vec(s2));
        let emu_cov = scaled * self.phi_obs.transpose();
        let model = ResidualModel::new(obs, state.lambda_y, state.hp.lambda_w0, Some(&emu_cov))?;
        Ok((model, &obs.y - eta))
    }

    fn data_term(&self, factors: &[&WeightFactor], state: &CalibrationState) -> Result<f64> {
        let (model, r0) = self.data_fit(factors, state)?;
        Ok(model.log_density(&(r0 - &self.d_obs * DVector::from_column_slice(&state.v))))
    }
}

/// Log posterior composed from scratch.
pub fn log_posterior(state: &CalibrationState, data: &CalibrationData, mode: Mode) -> Result<f64> {
    if !state.in_support() {
        return Ok(f64::NEG_INFINITY);
    }
    let cfg = &data.priors;
    match mode {
        Mode::PriorOnly => Ok(log_prior(state, cfg)),
        Mode::EmulatorOnly => Ok(data.fit_emulator(&state.hp)?.log_marginal() + log_hyperprior(&state.hp, cfg)),
        Mode::Full => {
            let fit = data.fit_emulator(&state.hp)?;
            Ok(fit.log_marginal()
                + data.data_term(&fit.factors.iter().collect::<Vec<_>>(), state)?
                + log_prior(state, cfg))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Input(usize),
    Rho(usize, usize),
    LambdaW(usize),
    LambdaWeps(usize),
    LambdaW0,
    LambdaY,
    LambdaDelta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Parts {
    marginal: f64,
    data: f64,
    prior: f64,
}

impl Parts {
    fn total(&self) -> f64 {
        self.marginal + self.data + self.prior
    }
}

struct Staged {
    state: CalibrationState,
    factor: Option<(usize, WeightFactor)>,
    parts: Parts,
}

/// The calibration posterior with per-basis factorizations cached between
/// proposals. A hyperparameter move refactors only its own weight process.
pub struct CalibrationTarget {
    data: Arc<CalibrationData>,
    mode: Mode,
    layout: StateLayout,
    coords: Vec<Coordinate>,
    slots: Vec<Slot>,
    state: CalibrationState,
    factors: Vec<WeightFactor>,
    marginals: Vec<f64>,
    parts: Parts,
    staged: Option<Staged>,
}

impl CalibrationTarget {
    pub fn new(data: Arc<CalibrationData>, mode: Mode, initial: CalibrationState) -> Result<Self> {
        let layout = data.layout();
        if initial.theta_alpha.len() != data.dim()
            || initial.v.len() != layout.p_delta
            || initial.hp.p_eta() != layout.p_eta
        {
            return Err(Error::invalid("initial state does not match the calibration data"));
        }
        if mode == Mode::Full && data.obs.is_none() {
            return Err(Error::invalid("full calibration needs observations"));
        }
        let (coords, slots) = Self::build_coords(&data, mode);
        let mut t = Self {
            data,
            mode,
            layout,
            coords,
            slots,
            state: initial,
            factors: Vec::new(),
            marginals: Vec::new(),
            parts: Parts::default(),
            staged: None,
        };
        if mode != Mode::PriorOnly {
            t.factors = (0..t.layout.p_eta).map(|i| t.data.factor(&t.state.hp, i)).collect::<Result<_>>()?;
            t.marginals = t.factors.iter().map(|f| f.log_marginal).collect();
        }
        t.parts = t.evaluate(&t.state, &t.factors.iter().collect::<Vec<_>>(), &t.marginals)?;
        Ok(t)
    }

    fn build_coords(data: &CalibrationData, mode: Mode) -> (Vec<Coordinate>, Vec<Slot>) {
        let cfg = &data.priors;
        let names = &data.input_names;
        let p_eta = data.basis.p_eta();
        let gamma_scale = |shape: f64| trigamma(shape).sqrt();
        let rho_scale = (trigamma(cfg.rho_w.a) + trigamma(cfg.rho_w.b)).sqrt();
        let mut out: Vec<(Coordinate, Slot)> = Vec::new();
        let mut push = |name: String, transform, class, prior_scale, slot| {
            out.push((Coordinate { name, transform, class, prior_scale }, slot));
        };
        if mode != Mode::EmulatorOnly {
            for (k, n) in names.iter().enumerate() {
                push(n.clone(), Transform::Unit, ParamClass::Input, 1.0, Slot::Input(k));
            }
        }
        for i in 0..p_eta {
            for (k, n) in names.iter().enumerate() {
                push(
                    format!("rho_w_{}_{n}", i + 1),
                    Transform::Logit,
                    ParamClass::Correlation,
                    rho_scale,
                    Slot::Rho(i, k),
                );
            }
        }
        for i in 0..p_eta {
            let s = gamma_scale(cfg.lambda_w.shape);
            push(format!("lambda_w_{}", i + 1), Transform::Log, ParamClass::Precision, s, Slot::LambdaW(i));
        }
        for i in 0..p_eta {
            let s = gamma_scale(cfg.lambda_weps.shape);
            push(format!("lambda_weps_{}", i + 1), Transform::Log, ParamClass::Precision, s, Slot::LambdaWeps(i));
        }
        if mode != Mode::EmulatorOnly {
            push(
                "lambda_w0".into(),
                Transform::Log,
                ParamClass::Precision,
                gamma_scale(cfg.lambda_w0.shape),
                Slot::LambdaW0,
            );
            push(
                "lambda_y".into(),
                Transform::Log,
                ParamClass::Precision,
                gamma_scale(cfg.lambda_y.shape),
                Slot::LambdaY,
            );
            push(
                "lambda_delta".into(),
                Transform::Log,
                ParamClass::Precision,
                gamma_scale(cfg.lambda_delta.shape),
                Slot::LambdaDelta,
            );
        }
        out.into_iter().unzip()
    }

    fn evaluate(&self, state: &CalibrationState, factors: &[&WeightFactor], marginals: &[f64]) -> Result<Parts> {
        let cfg = &self.data.priors;
        Ok(match self.mode {
            Mode::PriorOnly => Parts { prior: log_prior(state, cfg), ..Default::default() },
            Mode::EmulatorOnly => {
                Parts { marginal: marginals.iter().sum(), prior: log_hyperprior(&state.hp, cfg), data: 0.0 }
            }
            Mode::Full => {
                let prior = log_prior(state, cfg);
                if !prior.is_finite() {
                    return Ok(Parts { prior, ..Default::default() });
                }
                Parts { marginal: marginals.iter().sum(), data: self.data.data_term(factors, state)?, prior }
            }
        })
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn stage(&self, idx: usize, value: f64) -> Result<Staged> {
        let mut state = self.state.clone();
        let mut basis = None;
        match self.slots[idx] {
            Slot::Input(k) => state.theta_alpha[k] = value,
            Slot::Rho(i, k) => {
                state.hp.rho_w[i][k] = value;
                basis = Some(i);
            }
            Slot::LambdaW(i) => {
                state.hp.lambda_w[i] = value;
                basis = Some(i);
            }
            Slot::LambdaWeps(i) => {
                state.hp.lambda_weps[i] = value;
                basis = Some(i);
            }
            Slot::LambdaW0 => state.hp.lambda_w0 = value,
            Slot::LambdaY => state.lambda_y = value,
            Slot::LambdaDelta => state.lambda_delta = value,
        }
        let factor = match (basis, self.mode) {
            (Some(i), Mode::Full | Mode::EmulatorOnly) => Some((i, self.data.factor(&state.hp, i)?)),
            _ => None,
        };
        let parts = match &factor {
            Some((i, f)) => {
                let mut factors: Vec<&WeightFactor> = self.factors.iter().collect();
                let mut marginals = self.marginals.clone();
                factors[*i] = f;
                marginals[*i] = f.log_marginal;
                self.evaluate(&state, &factors, &marginals)?
            }
            None => self.evaluate(&state, &self.factors.iter().collect::<Vec<_>>(), &self.marginals)?,
        };
        Ok(Staged { state, factor, parts })
    }
}

impl BlockTarget for CalibrationTarget {
    fn coordinates(&self) -> &[Coordinate] {
        &self.coords
    }

    fn value(&self, idx: usize) -> f64 {
        let s = &self.state;
        match self.slots[idx] {
            Slot::Input(k) => s.theta_alpha[k],
            Slot::Rho(i, k) => s.hp.rho_w[i][k],
            Slot::LambdaW(i) => s.hp.lambda_w[i],
            Slot::LambdaWeps(i) => s.hp.lambda_weps[i],
            Slot::LambdaW0 => s.hp.lambda_w0,
            Slot::LambdaY => s.lambda_y,
            Slot::LambdaDelta => s.lambda_delta,
        }
    }

    fn log_density(&self) -> f64 {
        self.parts.total()
    }

    fn propose(&mut self, idx: usize, value: f64) -> Result<f64> {
        match self.stage(idx, value) {
            Ok(staged) => {
                let lp = staged.parts.total();
                self.staged = Some(staged);
                Ok(lp)
            }
            // a proposal whose covariance cannot be factored has zero density
            Err(Error::Conditioning { .. }) => {
                self.staged = None;
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    fn commit(&mut self, accept: bool) {
        if let (true, Some(s)) = (accept, self.staged.take()) {
            if let Some((i, f)) = s.factor {
                self.marginals[i] = f.log_marginal;
                self.factors[i] = f;
            }
            self.state = s.state;
            self.parts = s.parts;
        }
        self.staged = None;
    }

    fn gibbs(&mut self, rng: &mut Rng) -> Result<()> {
        let p = self.layout.p_delta;
        if p == 0 || self.mode == Mode::EmulatorOnly {
            return Ok(());
        }
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let v = match self.mode {
            Mode::PriorOnly => z / self.state.lambda_delta.sqrt(),
            _ => {
                // v | rest ~ N(P⁻¹ Dᵀ S⁻¹ r0, P⁻¹), P = Dᵀ S⁻¹ D + λ_δ I
                let (model, r0) = self.data.data_fit(&self.factors.iter().collect::<Vec<_>>(), &self.state)?;
                let d = &self.data.d_obs;
                let sd = model.precision_times(d);
                let mut prec = d.transpose() * &sd;
                for k in 0..p {
                    prec[(k, k)] += self.state.lambda_delta;
                }
                let chol = cholesky_jittered(&prec, "discrepancy full conditional")?;
                let mean = chol.solve(&(sd.transpose() * r0));
                let l = chol.factor.l();
                let noise = l
                    .transpose()
                    .solve_upper_triangular(&z)
                    .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
                mean + noise
            }
        };
        self.state.v = v.iter().copied().collect();
        self.parts = self.evaluate(&self.state, &self.factors.iter().collect::<Vec<_>>(), &self.marginals)?;
        Ok(())
    }

    fn columns(&self) -> Vec<String> {
        self.layout.columns()
    }

    fn snapshot(&self) -> Vec<f64> {
        self.layout.to_row(&self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{run_chain, SamplerConfig};
    use super::*;
    use crate::basis::{build_basis, build_discrepancy_basis, project};
    use crate::stats::ks_test;
    use rand::{Rng as _, SeedableRng};
    use statrs::distribution::{Beta, Continuous, ContinuousCDF, Gamma, Normal, StudentsT};

    /// m = 3 design points, two quantile levels, 4 weeks, 3 observed.
    fn tiny(obs: bool) -> (CalibrationData, CalibrationState) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let inputs = DMatrix::from_fn(6, 3, |r, k| if k == 2 { [0.25, 0.75][r % 2] } else { rng.random() });
        let eta = DMatrix::from_fn(6, 4, |r, t| {
            2.0 + 0.5 * t as f64 + 0.3 * inputs[(r, 0)] * t as f64 + 0.2 * inputs[(r, 2)]
        });
        let eta = eta + DMatrix::from_fn(6, 4, |_, _| 0.05 * rng.random::<f64>());
        let basis = build_basis(&eta, 2).unwrap();
        let w = project(&eta, &basis).unwrap().w_star;
        let disc = build_discrepancy_basis(4, 2.0, 2.0).unwrap();
        let o = obs.then(|| Observations::from_weekly(&[30, 20, 45]).unwrap());
        let names = vec!["a".to_string(), "b".to_string(), "alpha".to_string()];
        let data = CalibrationData::new(names, inputs, w, basis, disc.clone(), o, PriorConfig::default()).unwrap();
        let state = CalibrationState {
            theta_alpha: vec![0.4, 0.6, 0.5],
            lambda_y: 1.2,
            v: (0..disc.p_delta()).map(|k| 0.02 * k as f64).collect(),
            lambda_delta: 30.0,
            hp: GpHyperparams {
                lambda_w: vec![0.8, 1.3],
                rho_w: vec![vec![0.5, 0.7, 0.9], vec![0.3, 0.95, 0.6]],
                lambda_weps: vec![200.0, 500.0],
                lambda_w0: 50.0,
            },
        };
        (data, state)
    }

    fn dense_mvn(cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
        let n = x.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln()
            + cov.determinant().ln()
            + (x.transpose() * cov.clone().try_inverse().unwrap() * x)[(0, 0)])
    }

    fn corr(a: &[f64], b: &[f64], rho: &[f64]) -> f64 {
        (0..a.len()).map(|k| rho[k].powf(4.0 * (a[k] - b[k]).powi(2))).product()
    }

    fn oracle(data: &CalibrationData, s: &CalibrationState) -> f64 {
        let x = &data.geom.inputs;
        let n = x.nrows();
        let row = |r: usize| -> Vec<f64> { x.row(r).iter().copied().collect() };
        let mut marginal = 0.0;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for i in 0..2 {
            let rho = &s.hp.rho_w[i];
            let k = DMatrix::from_fn(n, n, |a, b| {
                corr(&row(a), &row(b), rho) / s.hp.lambda_w[i] + if a == b { 1.0 / s.hp.lambda_weps[i] } else { 0.0 }
            });
            let w = data.w_star.row(i).transpose();
            marginal += dense_mvn(&k, &w);
            let kx = DVector::from_fn(n, |a, _| corr(&row(a), &s.theta_alpha, rho) / s.hp.lambda_w[i]);
            let kinv = k.try_inverse().unwrap();
            means.push((kx.transpose() * &kinv * &w)[(0, 0)]);
            vars.push(1.0 / s.hp.lambda_w[i] - (kx.transpose() * &kinv * &kx)[(0, 0)]);
        }
        let obs = data.obs.as_ref().unwrap();
        let phi = data.basis.phi.rows(0, 3);
        let eta = data.basis.phi0.rows(0, 3) + phi * DVector::from_vec(means);
        let e = phi * DMatrix::from_diagonal(&DVector::from_vec(vars)) * phi.transpose();
        let sig = &obs.sigma_y;
        let w = sig.clone().try_inverse().unwrap() * s.lambda_y + DMatrix::identity(3, 3) * s.hp.lambda_w0;
        let cov = w.try_inverse().unwrap() + e;
        let r = &obs.y - eta - data.disc.d.rows(0, 3) * DVector::from_column_slice(&s.v);
        let data_term = -0.5 * cov.determinant().ln() + 0.5 * sig.determinant().ln()
            - 0.5 * (r.transpose() * cov.try_inverse().unwrap() * &r)[(0, 0)];

        let g = |x: f64, a: f64, b: f64| Gamma::new(a, b).unwrap().ln_pdf(x);
        let pr = &data.priors;
        let mut prior = g(s.lambda_y, pr.lambda_y.shape, pr.lambda_y.rate)
            + g(s.lambda_delta, pr.lambda_delta.shape, pr.lambda_delta.rate)
            + g(s.hp.lambda_w0, pr.lambda_w0.shape, pr.lambda_w0.rate);
        for i in 0..2 {
            prior += g(s.hp.lambda_w[i], pr.lambda_w.shape, pr.lambda_w.rate)
                + g(s.hp.lambda_weps[i], pr.lambda_weps.shape, pr.lambda_weps.rate);
            for &r in &s.hp.rho_w[i] {
                prior += Beta::new(pr.rho_w.a, pr.rho_w.b).unwrap().ln_pdf(r);
            }
        }
        let normal = Normal::new(0.0, 1.0 / s.lambda_delta.sqrt()).unwrap();
        prior += s.v.iter().map(|&v| normal.ln_pdf(v)).sum::<f64>();
        marginal + data_term + prior
    }

    #[test]
    fn matches_term_by_term_oracle() {
        let (data, state) = tiny(true);
        let lp = log_posterior(&state, &data, Mode::Full).unwrap();
        let o = oracle(&data, &state);
        assert!((lp - o).abs() < 1e-8, "{lp} vs {o}");
        let target = CalibrationTarget::new(Arc::new(data), Mode::Full, state).unwrap();
        assert!((target.log_density() - o).abs() < 1e-8);
    }

    #[test]
    fn outside_support_is_neg_infinity() {
        let (data, mut state) = tiny(true);
        state.theta_alpha[0] = 1.01;
        assert_eq!(log_posterior(&state, &data, Mode::Full).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn emulator_only_without_data() {
        let (data, state) = tiny(false);
        let lp = log_posterior(&state, &data, Mode::EmulatorOnly).unwrap();
        let fit = data.fit_emulator(&state.hp).unwrap();
        let expected = fit.log_marginal() + log_hyperprior(&state.hp, &data.priors);
        assert_eq!(lp, expected);
        assert!(CalibrationTarget::new(Arc::new(data), Mode::Full, state).is_err());
    }

    #[test]
    fn cached_density_tracks_fresh_evaluation() {
        let (data, state) = tiny(true);
        let data = Arc::new(data);
        let mut t = CalibrationTarget::new(data.clone(), Mode::Full, state).unwrap();
        let cfg = SamplerConfig { n_burn: 20, n_draws: 30, thin: 1, adapt_window: 10, seed: 4, ..Default::default() };
        let draws = run_chain(&cfg, &mut t).unwrap();
        let layout = data.layout();
        for i in (0..draws.n_draws()).step_by(7) {
            let s = layout.from_row(draws.row(i)).unwrap();
            assert!(s.in_support());
            let fresh = log_posterior(&s, &data, Mode::Full).unwrap();
            assert!((fresh - draws.log_posterior[i]).abs() < 1e-8 * (1.0 + fresh.abs()));
        }
    }

    #[test]
    fn layout_round_trip() {
        let (data, state) = tiny(true);
        let layout = data.layout();
        let row = layout.to_row(&state);
        assert_eq!(layout.from_row(&row).unwrap(), state);
        assert_eq!(StateLayout::from_columns(&layout.columns()).unwrap(), layout);
    }

    #[test]
    fn prior_only_recovers_priors() {
        let (data, state) = tiny(false);
        let data = Arc::new(data);
        let pr = data.priors.clone();
        let mut t = CalibrationTarget::new(data, Mode::PriorOnly, state).unwrap();
        let cfg =
            SamplerConfig { n_burn: 2000, n_draws: 4000, thin: 25, adapt_window: 50, seed: 12, ..Default::default() };
        let d = run_chain(&cfg, &mut t).unwrap();
        let gamma = |g: crate::calib::GammaPrior| Gamma::new(g.shape, g.rate).unwrap();
        let checks: Vec<(&str, Box<dyn Fn(f64) -> f64>)> = vec![
            ("a", Box::new(|x| x)),
            ("alpha", Box::new(|x| x)),
            ("rho_w_2_b", Box::new(move |x| Beta::new(pr.rho_w.a, pr.rho_w.b).unwrap().cdf(x))),
            ("lambda_y", Box::new(move |x| gamma(pr.lambda_y).cdf(x))),
            ("lambda_w_1", Box::new(move |x| gamma(pr.lambda_w).cdf(x))),
            ("lambda_delta", Box::new(move |x| gamma(pr.lambda_delta).cdf(x))),
            // Gamma(a, b) precision gives a Student t with 2a dof and scale sqrt(b / a)
            ("v_1", {
                let g = pr.lambda_delta;
                let t = StudentsT::new(0.0, (g.rate / g.shape).sqrt(), 2.0 * g.shape).unwrap();
                Box::new(move |x| t.cdf(x))
            }),
        ];
        for (name, cdf) in checks {
            let (_, p) = ks_test(&d.column(name).unwrap(), cdf);
            assert!(p > 0.01, "{name}: KS p = {p}");
        }
    }
}
