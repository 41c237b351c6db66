//! Metropolis-within-Gibbs sampling.
//!
//! [`run_chain`] drives any [`BlockTarget`]: each sweep makes one Gaussian
//! random-walk proposal per coordinate on its unconstrained scale, then lets
//! the target run its exact Gibbs updates. Step sizes adapt during burn-in
//! and are frozen afterwards.

mod diagnostics;
mod target;

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{annotate, parse_f64};
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, Diagnostics, ParameterDiagnostics};
pub use target::{log_posterior, CalibrationData, CalibrationTarget, Mode, StateLayout};

/// How a coordinate is mapped to the real line for the random walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Bounded to [0, 1]; proposals outside are rejected.
    Unit,
    Log,
    Logit,
}

impl Transform {
    fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Identity | Transform::Unit => x,
            Transform::Log => x.ln(),
            Transform::Logit => (x / (1.0 - x)).ln(),
        }
    }

    fn inverse(self, z: f64) -> f64 {
        match self {
            Transform::Identity | Transform::Unit => z,
            Transform::Log => z.exp(),
            Transform::Logit => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// `log |dx/dz|` at `x`.
    fn log_jacobian(self, x: f64) -> f64 {
        match self {
            Transform::Identity | Transform::Unit => 0.0,
            Transform::Log => x.ln(),
            Transform::Logit => x.ln() + (1.0 - x).ln(),
        }
    }

    fn admissible(self, x: f64) -> bool {
        match self {
            Transform::Identity => x.is_finite(),
            Transform::Unit => (0.0..=1.0).contains(&x),
            Transform::Log => x > 0.0 && x.is_finite(),
            Transform::Logit => x > 0.0 && x < 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Input,
    Correlation,
    Precision,
    Other,
}

/// A coordinate updated by random-walk Metropolis.
#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub name: String,
    pub transform: Transform,
    pub class: ParamClass,
    /// Prior spread on the transformed scale; initial steps are a fraction of it.
    pub prior_scale: f64,
}

/// A target density that supports single-coordinate proposals.
pub trait BlockTarget {
    fn coordinates(&self) -> &[Coordinate];

    /// Current natural-scale value of coordinate `idx`.
    fn value(&self, idx: usize) -> f64;

    fn log_density(&self) -> f64;

    /// Stages `value` for coordinate `idx` and returns the staged log density.
    fn propose(&mut self, idx: usize, value: f64) -> Result<f64>;

    /// Keeps or discards the staged proposal.
    fn commit(&mut self, accept: bool);

    /// Exact conditional updates run once per sweep after the Metropolis steps.
    fn gibbs(&mut self, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }

    /// Names of everything recorded per saved draw.
    fn columns(&self) -> Vec<String>;

    fn snapshot(&self) -> Vec<f64>;
}

/// Initial random-walk steps as fractions of each coordinate's prior scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizes {
    pub input: f64,
    pub correlation: f64,
    pub precision: f64,
    pub other: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { input: 0.1, correlation: 0.1, precision: 0.1, other: 0.1 }
    }
}

impl StepSizes {
    fn fraction(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Input => self.input,
            ParamClass::Correlation => self.correlation,
            ParamClass::Precision => self.precision,
            ParamClass::Other => self.other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_burn: usize,
    pub n_draws: usize,
    pub thin: usize,
    pub adapt_window: usize,
    pub seed: u64,
    pub step_sizes: StepSizes,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_burn: 1000, n_draws: 1000, thin: 2, adapt_window: 50, seed: 1, step_sizes: StepSizes::default() }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 || self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::Config("n_draws, thin and adapt_window must be positive".into()));
        }
        let s = &self.step_sizes;
        if [s.input, s.correlation, s.precision, s.other].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        Ok(())
    }
}

const TARGET_LOW: f64 = 0.25;
const TARGET_HIGH: f64 = 0.40;

/// Saved draws of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub columns: Vec<String>,
    /// Row-major, one row per saved draw.
    pub values: Vec<f64>,
    pub log_posterior: Vec<f64>,
    /// Post-burn-in acceptance rate of each Metropolis coordinate.
    pub acceptance: Vec<(String, ParamClass, f64)>,
    pub final_steps: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.log_posterior.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.columns.len();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some((0..self.n_draws()).map(|i| self.row(i)[j]).collect())
    }

    /// Keeps every `step`-th draw.
    pub fn thinned(&self, step: usize) -> Self {
        let keep: Vec<usize> = (0..self.n_draws()).step_by(step.max(1)).collect();
        Self {
            columns: self.columns.clone(),
            values: keep.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            log_posterior: keep.iter().map(|&i| self.log_posterior[i]).collect(),
            acceptance: self.acceptance.clone(),
            final_steps: self.final_steps.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.columns.clone();
        header.push("log_posterior".into());
        w.write_record(&header)?;
        for i in 0..self.n_draws() {
            let mut rec: Vec<String> = self.row(i).iter().map(f64::to_string).collect();
            rec.push(self.log_posterior[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| annotate(e.into(), path))?;
        let mut columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if columns.pop().as_deref() != Some("log_posterior") {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "last column must be log_posterior".into(),
            });
        }
        let mut values = Vec::new();
        let mut log_posterior = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec.iter().map(|s| parse_f64(s, path)).collect::<Result<Vec<f64>>>()?;
            let (lp, rest) = row
                .split_last()
                .ok_or_else(|| Error::Parse { path: path.display().to_string(), message: "empty row".into() })?;
            values.extend_from_slice(rest);
            log_posterior.push(*lp);
        }
        Ok(Self { columns, values, log_posterior, acceptance: Vec::new(), final_steps: Vec::new() })
    }
}

/// Runs one chain. Deterministic given `cfg.seed` and the target.
pub fn run_chain<T: BlockTarget>(cfg: &SamplerConfig, target: &mut T) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let coords: Vec<Coordinate> = target.coordinates().to_vec();
    if !target.log_density().is_finite() {
        return Err(Error::invalid("chain must start inside the support"));
    }
    let mut rng = rng_from(cfg.seed, &[]);
    let mut steps: Vec<f64> = coords.iter().map(|c| cfg.step_sizes.fraction(c.class) * c.prior_scale).collect();
    let mut window_acc = vec![0usize; coords.len()];
    let mut total_acc = vec![0usize; coords.len()];
    let columns = target.columns();
    let mut values = Vec::with_capacity(cfg.n_draws * columns.len());
    let mut log_posterior = Vec::with_capacity(cfg.n_draws);

    let sweeps = cfg.n_burn + cfg.n_draws * cfg.thin;
    for sweep in 0..sweeps {
        for (idx, c) in coords.iter().enumerate() {
            let x = target.value(idx);
            let z: f64 = rng.sample(StandardNormal);
            let x_new = c.transform.inverse(c.transform.forward(x) + steps[idx] * z);
            let u: f64 = rng.random();
            if !c.transform.admissible(x_new) {
                continue;
            }
            let current = target.log_density() + c.transform.log_jacobian(x);
            let proposed = target.propose(idx, x_new)? + c.transform.log_jacobian(x_new);
            let accept = proposed.is_finite() && u.ln() < proposed - current;
            target.commit(accept);
            if accept {
                if sweep < cfg.n_burn {
                    window_acc[idx] += 1;
                } else {
                    total_acc[idx] += 1;
                }
            }
        }
        target.gibbs(&mut rng)?;

        if sweep < cfg.n_burn && (sweep + 1) % cfg.adapt_window == 0 {
            for (s, a) in steps.iter_mut().zip(window_acc.iter_mut()) {
                let rate = *a as f64 / cfg.adapt_window as f64;
                if rate < TARGET_LOW {
                    *s *= 0.7;
                } else if rate > TARGET_HIGH {
                    *s *= 1.4;
                }
                *a = 0;
            }
        }
        if sweep >= cfg.n_burn && (sweep - cfg.n_burn + 1).is_multiple_of(cfg.thin) {
            values.extend(target.snapshot());
            log_posterior.push(target.log_density());
        }
    }
    let kept = (sweeps - cfg.n_burn) as f64;
    Ok(PosteriorDraws {
        columns,
        values,
        log_posterior,
        acceptance: coords.iter().zip(&total_acc).map(|(c, &a)| (c.name.clone(), c.class, a as f64 / kept)).collect(),
        final_steps: steps,
    })
}

/// Independent chains in parallel, seeded from `cfg.seed` and the chain index.
pub fn run_chains<T, F>(cfg: &SamplerConfig, n_chains: usize, make_target: F) -> Result<Vec<PosteriorDraws>>
where
    T: BlockTarget,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    (0..n_chains)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = crate::rng::derive_seed(cfg.seed, &[k as u64]);
            let mut t = make_target(k)?;
            run_chain(&c, &mut t)
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::stub::*;
    use super::*;
    use crate::stats::{ks_test, mean, variance};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{ContinuousCDF, Gamma};

    #[test]
    fn gaussian_moments() {
        let mut t = Gaussian::new(vec![1.5, -2.0], vec![0.5, 2.0]);
        let cfg =
            SamplerConfig { n_burn: 2000, n_draws: 10_000, thin: 5, adapt_window: 50, seed: 3, ..Default::default() };
        let d = run_chain(&cfg, &mut t).unwrap();
        for (k, (m, s)) in [(1.5, 0.5), (-2.0, 2.0)].into_iter().enumerate() {
            let x = d.column(&format!("x{k}")).unwrap();
            let ess = effective_sample_size(&x).unwrap();
            let se = s / ess.sqrt();
            assert!((mean(&x) - m).abs() < 3.0 * se, "coordinate {k}: {} vs {m} (se {se})", mean(&x));
            assert!((variance(&x).sqrt() / s - 1.0).abs() < 0.1);
        }
        for (_, _, a) in &d.acceptance {
            assert!((0.15..0.6).contains(a), "acceptance {a}");
        }
    }

    #[test]
    fn conjugate_gamma_posterior() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = Normal::new(0.0, 0.5).unwrap().sample_iter(&mut rng).take(40).collect();
        let mut t = GammaPrecision::new(2.0, 1.0, &data);
        let post = Gamma::new(2.0 + 20.0, 1.0 + 0.5 * t.sum_sq).unwrap();
        let cfg =
            SamplerConfig { n_burn: 1000, n_draws: 10_000, thin: 10, adapt_window: 50, seed: 5, ..Default::default() };
        let d = run_chain(&cfg, &mut t).unwrap();
        let (_, p) = ks_test(&d.column("tau").unwrap(), |x| post.cdf(x));
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn acceptance_follows_metropolis_rule() {
        // Hand check: from x = 0 under N(0,1) the move to x' is accepted iff
        // log u < -x'^2 / 2.
        let mut t = Gaussian::new(vec![0.0], vec![1.0]);
        let cfg = SamplerConfig { n_burn: 0, n_draws: 1, thin: 1, adapt_window: 1, seed: 99, ..Default::default() };
        let mut rng = rng_from(cfg.seed, &[]);
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let proposal = 0.1 * z;
        let d = run_chain(&cfg, &mut t).unwrap();
        let accepted = u.ln() < -0.5 * proposal * proposal;
        assert_eq!(d.row(0)[0], if accepted { proposal } else { 0.0 });
    }

    #[test]
    fn seed_determinism_and_csv() {
        let cfg = SamplerConfig { n_burn: 100, n_draws: 200, thin: 1, adapt_window: 20, seed: 8, ..Default::default() };
        let a = run_chain(&cfg, &mut Gaussian::new(vec![0.0, 1.0], vec![1.0, 1.0])).unwrap();
        let b = run_chain(&cfg, &mut Gaussian::new(vec![0.0, 1.0], vec![1.0, 1.0])).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("draws.csv");
        a.write_csv(&p).unwrap();
        let back = PosteriorDraws::read_csv(&p).unwrap();
        assert_eq!(back.values, a.values);
        assert_eq!(back.log_posterior, a.log_posterior);
        assert_eq!(back.columns, a.columns);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SamplerConfig { thin: 0, ..Default::default() };
        assert!(run_chain(&cfg, &mut Gaussian::new(vec![0.0], vec![1.0])).is_err());
    }

    #[test]
    fn parallel_chains_are_distinct_and_reproducible() {
        let cfg = SamplerConfig { n_burn: 50, n_draws: 50, thin: 1, adapt_window: 10, seed: 2, ..Default::default() };
        let make = |_| Ok(Gaussian::new(vec![0.0], vec![1.0]));
        let a = run_chains(&cfg, 3, make).unwrap();
        let b = run_chains(&cfg, 3, make).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].values, a[1].values);
    }
}
