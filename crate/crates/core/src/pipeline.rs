//! End-to-end orchestration: design → simulate → quantiles → basis → fit →
//! calibrate → predict. Every stage reads its inputs from the output directory
//! and writes flat files there; `manifest.json` records hashes and seeds.
//!
//! Two experiments sit beside the main chain: emulator holdout and
//! synthetic-truth calibration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{build_basis, build_discrepancy_basis, project, BasisFile};
use crate::calib::{CalibrationState, Observations, PriorConfig};
use crate::design::{
    augment_with_quantiles, generate_lhs, read_design_csv, validate_alphas, write_design_csv, DesignMatrix,
    ParameterSpace,
};
use crate::epi::{noisy_weekly_counts, run_ensemble, SimParams, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::gp::GpHyperparams;
use crate::mcmc::{
    diagnostics, log_posterior, run_chain, run_chains, split_rhat, CalibrationData, CalibrationTarget, Diagnostics,
    Mode, PosteriorDraws, SamplerConfig,
};
use crate::predict::{
    alpha_monotonicity_diagnostic, eta_delta_correlation, main_effect_sweep, pointwise_band, predict_curves,
    prior_predictive, summarize, summarize_one, write_bands_csv, MonotonicityReport, PredictOptions,
};
use crate::quantile::{build_quantile_ensemble, QuantileEnsemble, DEFAULT_ALPHAS};
use crate::rng::{derive_seed, rng_from};
use crate::stats::{credible_interval, interpolated_quantile, mean};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// m = 100, r = 100, T = 57.
    Full,
    /// m = 30, r = 50, T = 30 with shorter chains.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscrepancyConfig {
    pub kernel_sd: f64,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub sampler: SamplerConfig,
    pub initial_rho: f64,
    pub initial_lambda_weps: f64,
    /// Held fixed during the fit; the calibration chain samples it.
    pub initial_lambda_w0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub sampler: SamplerConfig,
    pub chains: usize,
    /// Random starting candidates scored in addition to the design points.
    pub start_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub level: f64,
    /// 0 keeps every draw.
    pub max_draws: usize,
    pub truncation_noise: bool,
    pub sweep_grid: usize,
    /// Input swept in the main-effect report.
    pub sweep_input: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutConfig {
    /// Design indices to hold out; unset picks three points by replicate spread.
    pub indices: Option<Vec<usize>>,
    pub level: f64,
    /// Hyperparameter draws used for the predictive intervals.
    pub draws: usize,
    pub samples_per_draw: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub repetitions: usize,
    pub level: f64,
    /// Index of the parameter whose recovery is scored.
    pub informative_input: usize,
    /// Posterior interval widths above this fraction of the prior range are
    /// flagged as weakly identified.
    pub weak_width: f64,
    /// Truths drawn for the flat-likelihood control.
    pub control_truths: usize,
    /// Replicates simulated at each truth for its median curve.
    pub truth_replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// CSV with `week, weekly_count`; required by `calibrate`.
    pub observations: Option<PathBuf>,
    pub space: ParameterSpace,
    pub runs: usize,
    pub replicates: usize,
    pub weeks: usize,
    pub alphas: Vec<f64>,
    pub p_eta: usize,
    pub observed_weeks: usize,
    pub discrepancy: DiscrepancyConfig,
    pub priors: PriorConfig,
    pub fit: FitConfig,
    pub calibrate: CalibrateConfig,
    pub predict: PredictConfig,
    pub holdout: HoldoutConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

macro_rules! full_default {
    ($($t:ty => $f:ident),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                PipelineConfig::preset(Preset::Full).$f
            }
        }
    )*};
}

full_default!(
    DiscrepancyConfig => discrepancy,
    FitConfig => fit,
    CalibrateConfig => calibrate,
    PredictConfig => predict,
    HoldoutConfig => holdout,
    SyntheticConfig => synthetic
);

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let sampler = |n_burn, n_draws, thin| SamplerConfig { n_burn, n_draws, thin, ..SamplerConfig::default() };
        let full = Self {
            preset: Preset::Full,
            seed: 1,
            out_dir: PathBuf::from("out"),
            observations: None,
            space: ParameterSpace::epidemic(),
            runs: 100,
            replicates: 100,
            weeks: 57,
            alphas: DEFAULT_ALPHAS.to_vec(),
            p_eta: 5,
            observed_weeks: 20,
            discrepancy: DiscrepancyConfig { kernel_sd: 18.0, spacing: 12.0 },
            priors: PriorConfig::default(),
            fit: FitConfig {
                sampler: sampler(1000, 1000, 2),
                initial_rho: 0.5,
                initial_lambda_weps: 1000.0,
                initial_lambda_w0: 1000.0,
            },
            calibrate: CalibrateConfig { sampler: sampler(1000, 1000, 2), chains: 2, start_candidates: 200 },
            predict: PredictConfig {
                level: 0.9,
                max_draws: 500,
                truncation_noise: false,
                sweep_grid: 11,
                sweep_input: 0,
            },
            holdout: HoldoutConfig { indices: None, level: 0.9, draws: 100, samples_per_draw: 20 },
            synthetic: SyntheticConfig {
                repetitions: 5,
                level: 0.9,
                informative_input: 0,
                weak_width: 0.7,
                control_truths: 200,
                truth_replicates: 100,
            },
        };
        match preset {
            Preset::Full => full,
            Preset::Desk => Self {
                preset: Preset::Desk,
                runs: 30,
                replicates: 50,
                weeks: 30,
                fit: FitConfig { sampler: sampler(400, 400, 1), ..full.fit.clone() },
                calibrate: CalibrateConfig { sampler: sampler(600, 600, 1), chains: 1, ..full.calibrate.clone() },
                predict: PredictConfig { max_draws: 300, ..full.predict.clone() },
                holdout: HoldoutConfig { draws: 60, ..full.holdout.clone() },
                synthetic: SyntheticConfig { truth_replicates: 50, ..full.synthetic.clone() },
                ..full
            },
        }
    }

    /// Parses TOML on top of the named `preset` (full when absent). Relative
    /// paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Full,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::Config(format!("unknown preset {v}; expected \"full\" or \"desk\"")))?,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let mut cfg: Self =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.out_dir = base_dir.join(&cfg.out_dir);
        cfg.observations = cfg.observations.map(|p| base_dir.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.space.validate()?;
        if self.runs < 2 {
            return cfg_err(format!("runs = {}; need at least 2", self.runs));
        }
        if self.replicates < 2 {
            return cfg_err(format!("replicates = {}; need at least 2", self.replicates));
        }
        if self.weeks == 0 || self.observed_weeks == 0 || self.observed_weeks > self.weeks {
            return cfg_err(format!("need 1 ≤ observed_weeks ({}) ≤ weeks ({})", self.observed_weeks, self.weeks));
        }
        validate_alphas(&self.alphas).map_err(|e| Error::Config(e.to_string()))?;
        if self.p_eta == 0 || self.p_eta > self.weeks {
            return cfg_err(format!("p_eta = {} must lie in 1..={}", self.p_eta, self.weeks));
        }
        if !(self.discrepancy.kernel_sd > 0.0 && self.discrepancy.spacing > 0.0) {
            return cfg_err("discrepancy kernel_sd and spacing must be positive".into());
        }
        self.priors.validate()?;
        self.fit.sampler.validate()?;
        self.calibrate.sampler.validate()?;
        if self.calibrate.chains == 0 {
            return cfg_err("calibrate.chains must be positive".into());
        }
        let f = &self.fit;
        if !(f.initial_rho > 0.0 && f.initial_rho < 1.0)
            || !(f.initial_lambda_weps > 0.0)
            || !(f.initial_lambda_w0 > 0.0)
        {
            return cfg_err("fit initial values out of range".into());
        }
        for level in [self.predict.level, self.holdout.level, self.synthetic.level] {
            if !(level > 0.0 && level < 1.0) {
                return cfg_err(format!("credible level {level} must lie in (0, 1)"));
            }
        }
        if self.predict.sweep_input >= self.space.dim() || self.synthetic.informative_input >= self.space.dim() {
            return cfg_err("input index beyond the parameter space".into());
        }
        if self.holdout.draws == 0 || self.holdout.samples_per_draw == 0 || self.synthetic.truth_replicates < 2 {
            return cfg_err("holdout draws and synthetic replicates must be positive".into());
        }
        Ok(())
    }

    fn input_names(&self) -> Vec<String> {
        let mut n = self.space.names.clone();
        n.push("alpha".into());
        n
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Design,
    Simulate,
    Quantiles,
    Basis,
    Fit,
    Calibrate,
    Predict,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Design, Stage::Simulate, Stage::Quantiles, Stage::Basis, Stage::Fit, Stage::Calibrate, Stage::Predict];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Design => "design",
            Stage::Simulate => "simulate",
            Stage::Quantiles => "quantiles",
            Stage::Basis => "basis",
            Stage::Fit => "fit",
            Stage::Calibrate => "calibrate",
            Stage::Predict => "predict",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|s| *s == self).unwrap() as u64
    }
}

const DESIGN: &str = "design.csv";
const AUGMENTED: &str = "design_augmented.csv";
const ENSEMBLE: &str = "ensemble.csv";
const QUANTILES: &str = "quantiles.csv";
const BASIS: &str = "basis.json";
const EMULATOR: &str = "emulator.json";
const EMULATOR_DRAWS: &str = "emulator_draws.csv";
const EMULATOR_DIAG: &str = "emulator_diagnostics.json";
const DRAWS: &str = "posterior_draws.csv";
const DIAG: &str = "diagnostics.json";
const BANDS: &str = "bands.csv";
const SUMMARIES: &str = "summaries.csv";
const DENSITIES: &str = "densities.json";
const PREDICT_REPORT: &str = "predict_report.json";
const MANIFEST: &str = "manifest.json";

const HOLDOUT_STREAM: u64 = 100;
const SYNTHETIC_STREAM: u64 = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Posterior summary of the fitted emulator hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmulatorFit {
    /// Componentwise posterior medians.
    pub hyperparams: GpHyperparams,
    pub log_marginal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub level: f64,
    pub final_observed_week: usize,
    pub posterior_band_width: f64,
    pub prior_band_width: f64,
    pub monotonicity: MonotonicityReport,
    pub eta_delta_correlation: Vec<Option<f64>>,
    pub sweep_input: String,
    pub sweep_values: Vec<f64>,
    /// `sweep_grid × weeks` mean emulator curves.
    pub sweep_curves: Vec<Vec<f64>>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, &[stage.index()])
    }

    fn sampler(&self, base: &SamplerConfig, stream: &[u64]) -> SamplerConfig {
        let mut path = stream.to_vec();
        path.push(base.seed);
        SamplerConfig { seed: derive_seed(self.cfg.seed, &path), ..base.clone() }
    }

    pub fn run_all(&self) -> Result<Manifest> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Manifest::read(&self.path(MANIFEST))
    }

    /// Runs one stage from the artifacts already on disk and records it in
    /// the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        std::fs::create_dir_all(self.out())?;
        let files = match stage {
            Stage::Design => self.design(),
            Stage::Simulate => self.simulate(),
            Stage::Quantiles => self.quantiles(),
            Stage::Basis => self.basis(),
            Stage::Fit => self.fit(),
            Stage::Calibrate => self.calibrate(),
            Stage::Predict => self.predict(),
        }
        .map_err(|e| e.in_stage(stage.name()))?;
        let artifacts = files
            .iter()
            .map(|f| {
                let p = self.path(f);
                Ok(ArtifactRecord {
                    path: f.to_string(),
                    sha256: sha256_file(&p)?,
                    bytes: std::fs::metadata(&p)?.len(),
                })
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage(stage.name()))?;
        let record = StageRecord { stage: stage.name().into(), seed: self.stage_seed(stage), artifacts };
        self.record(record.clone())?;
        Ok(record)
    }

    fn record(&self, rec: StageRecord) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut stages: Vec<StageRecord> = match Manifest::read(&path) {
            Ok(m) if m.config == self.cfg => m.stages,
            _ => Vec::new(),
        };
        stages.retain(|s| s.stage != rec.stage);
        stages.push(rec);
        let order = |s: &StageRecord| Stage::ALL.iter().position(|x| x.name() == s.stage).unwrap_or(usize::MAX);
        stages.sort_by_key(order);
        let m = Manifest {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            stages,
        };
        std::fs::write(path, serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    /// Runs, in order, every stage up to `stage` whose artifacts are missing.
    pub fn ensure(&self, stage: Stage) -> Result<()> {
        let manifest = Manifest::read(&self.path(MANIFEST)).ok().filter(|m| m.config == self.cfg);
        let mut stale = false;
        for s in Stage::ALL.into_iter().take(stage.index() as usize + 1) {
            let present = manifest
                .as_ref()
                .and_then(|m| m.stage(s.name()))
                .is_some_and(|r| r.artifacts.iter().all(|a| self.path(&a.path).exists()));
            if stale || !present {
                self.run_stage(s)?;
                stale = true;
            }
        }
        Ok(())
    }

    fn design(&self) -> Result<Vec<&'static str>> {
        let cfg = &self.cfg;
        let d = generate_lhs(&cfg.space, cfg.runs, self.stage_seed(Stage::Design))?;
        write_design_csv(&self.path(DESIGN), &cfg.space.names, &d.points, false)?;
        let aug = augment_with_quantiles(&d, &cfg.alphas)?;
        write_design_csv(&self.path(AUGMENTED), &cfg.space.names, &aug.rows, true)?;
        Ok(vec![DESIGN, AUGMENTED])
    }

    fn read_design(&self) -> Result<DesignMatrix> {
        let (names, points) = read_design_csv(&self.path(DESIGN))?;
        if names != self.cfg.space.names || points.nrows() != self.cfg.runs {
            return Err(Error::invalid(format!("{DESIGN} does not match the configured space and run count")));
        }
        DesignMatrix::new(points)
    }

    fn simulate(&self) -> Result<Vec<&'static str>> {
        let cfg = &self.cfg;
        let d = self.read_design()?;
        let ens = run_ensemble(&d, &cfg.space, cfg.replicates, cfg.weeks, self.stage_seed(Stage::Simulate))?;
        ens.write_csv(&self.path(ENSEMBLE))?;
        Ok(vec![ENSEMBLE])
    }

    fn quantiles(&self) -> Result<Vec<&'static str>> {
        let d = self.read_design()?;
        let ens = TrajectoryEnsemble::read_csv(&self.path(ENSEMBLE))?;
        if ens.r != self.cfg.replicates || ens.weeks != self.cfg.weeks {
            return Err(Error::invalid(format!("{ENSEMBLE} does not match the configured replicates and weeks")));
        }
        build_quantile_ensemble(&ens, &d, &self.cfg.alphas)?.write_csv(&self.path(QUANTILES))?;
        Ok(vec![QUANTILES])
    }

    fn read_quantiles(&self) -> Result<QuantileEnsemble> {
        let q = QuantileEnsemble::read_csv(&self.path(QUANTILES), &self.read_design()?)?;
        if q.alphas() != self.cfg.alphas.as_slice() || q.weeks() != self.cfg.weeks {
            return Err(Error::invalid(format!("{QUANTILES} does not match the configured alphas and weeks")));
        }
        Ok(q)
    }

    fn basis(&self) -> Result<Vec<&'static str>> {
        let cfg = &self.cfg;
        let q = self.read_quantiles()?;
        let b = build_basis(&q.eta, cfg.p_eta)?;
        let disc = build_discrepancy_basis(cfg.weeks, cfg.discrepancy.kernel_sd, cfg.discrepancy.spacing)?;
        BasisFile::new(&b, &disc).write(&self.path(BASIS))?;
        Ok(vec![BASIS])
    }

    fn calibration_data(&self, obs: Option<Observations>) -> Result<CalibrationData> {
        let q = self.read_quantiles()?;
        let (basis, disc) = BasisFile::read(&self.path(BASIS))?.into_parts()?;
        let w = project(&q.eta, &basis)?.w_star;
        CalibrationData::new(self.cfg.input_names(), q.design.rows, w, basis, disc, obs, self.cfg.priors.clone())
    }

    fn fit(&self) -> Result<Vec<&'static str>> {
        let data = Arc::new(self.calibration_data(None)?);
        let (draws, fit) = fit_emulator(&data, &self.cfg, self.sampler(&self.cfg.fit.sampler, &[Stage::Fit.index()]))?;
        draws.write_csv(&self.path(EMULATOR_DRAWS))?;
        diagnostics(&draws)?.write_json(&self.path(EMULATOR_DIAG))?;
        std::fs::write(self.path(EMULATOR), serde_json::to_string_pretty(&fit)?)?;
        Ok(vec![EMULATOR, EMULATOR_DRAWS, EMULATOR_DIAG])
    }

    fn read_fit(&self) -> Result<EmulatorFit> {
        let p = self.path(EMULATOR);
        serde_json::from_str(&std::fs::read_to_string(&p)?)
            .map_err(|e| Error::Parse { path: p.display().to_string(), message: e.to_string() })
    }

    /// The configured observations, cut to the observed weeks.
    pub fn observations(&self) -> Result<Observations> {
        let path =
            self.cfg.observations.as_ref().ok_or_else(|| Error::Config("no observation file configured".into()))?;
        let obs = Observations::read_csv(path)?;
        if obs.n_y() < self.cfg.observed_weeks {
            return Err(Error::invalid(format!(
                "{} has {} weeks; {} are required",
                path.display(),
                obs.n_y(),
                self.cfg.observed_weeks
            )));
        }
        obs.truncated(self.cfg.observed_weeks)
    }

    fn calibrate(&self) -> Result<Vec<&'static str>> {
        let data = Arc::new(self.calibration_data(Some(self.observations()?))?);
        let fit = self.read_fit()?;
        let sampler = self.sampler(&self.cfg.calibrate.sampler, &[Stage::Calibrate.index()]);
        let (draws, diag) = calibrate(&data, &fit.hyperparams, &self.cfg, &sampler)?;
        draws.write_csv(&self.path(DRAWS))?;
        diag.write_json(&self.path(DIAG))?;
        Ok(vec![DRAWS, DIAG])
    }

    fn predict(&self) -> Result<Vec<&'static str>> {
        let cfg = &self.cfg;
        let data = self.calibration_data(Some(self.observations()?))?;
        let draws = PosteriorDraws::read_csv(&self.path(DRAWS))?;
        let opts = PredictOptions {
            seed: self.stage_seed(Stage::Predict),
            truncation_noise: cfg.predict.truncation_noise,
            max_draws: cfg.predict.max_draws,
        };
        let post = predict_curves(&draws, &data, &opts)?;
        let prior = prior_predictive(&draws, &data, &opts)?;
        write_bands_csv(
            &self.path(BANDS),
            cfg.predict.level,
            &[
                ("eta", &post.eta),
                ("delta", &post.delta),
                ("combined", &post.combined),
                ("weekly", &post.weekly),
                ("prior_combined", &prior.combined),
            ],
        )?;
        let summary = summarize(&post.weekly)?;
        summary.write_csv(&self.path(SUMMARIES))?;
        summary.write_densities_json(&self.path(DENSITIES))?;

        let last = cfg.observed_weeks - 1;
        let grid = cfg.predict.sweep_grid.max(1);
        let sweep = main_effect_sweep(&draws, &data, cfg.predict.sweep_input, grid, cfg.predict.max_draws.min(50))?;
        let report = PredictReport {
            level: cfg.predict.level,
            final_observed_week: cfg.observed_weeks,
            posterior_band_width: pointwise_band(&post.combined, cfg.predict.level).width(last),
            prior_band_width: pointwise_band(&prior.combined, cfg.predict.level).width(last),
            monotonicity: alpha_monotonicity_diagnostic(&draws, &data, cfg.predict.max_draws.min(100))?,
            eta_delta_correlation: eta_delta_correlation(&post),
            sweep_input: cfg.space.names[cfg.predict.sweep_input].clone(),
            sweep_values: (0..grid).map(|g| if grid > 1 { g as f64 / (grid - 1) as f64 } else { f64::NAN }).collect(),
            sweep_curves: sweep.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        std::fs::write(self.path(PREDICT_REPORT), serde_json::to_string_pretty(&report)?)?;
        Ok(vec![BANDS, SUMMARIES, DENSITIES, PREDICT_REPORT])
    }
}

fn initial_state(data: &CalibrationData, hp: GpHyperparams, priors: &PriorConfig) -> CalibrationState {
    CalibrationState {
        theta_alpha: vec![0.5; data.dim()],
        lambda_y: priors.lambda_y.shape / priors.lambda_y.rate,
        v: vec![0.0; data.disc.p_delta()],
        lambda_delta: priors.lambda_delta.shape / priors.lambda_delta.rate,
        hp,
    }
}

/// Samples the weight-process hyperparameters and reduces them to
/// componentwise posterior medians.
pub fn fit_emulator(
    data: &Arc<CalibrationData>,
    cfg: &PipelineConfig,
    sampler: SamplerConfig,
) -> Result<(PosteriorDraws, EmulatorFit)> {
    let f = &cfg.fit;
    let hp = GpHyperparams::initial(
        data.basis.p_eta(),
        data.dim(),
        f.initial_rho,
        f.initial_lambda_weps,
        f.initial_lambda_w0,
    );
    let mut target = CalibrationTarget::new(data.clone(), Mode::EmulatorOnly, initial_state(data, hp, &cfg.priors))?;
    let draws = run_chain(&sampler, &mut target)?;
    let layout = data.layout();
    let medians: Vec<f64> = (0..draws.columns.len())
        .map(|k| {
            let mut c: Vec<f64> = (0..draws.n_draws()).map(|i| draws.row(i)[k]).collect();
            c.sort_by(f64::total_cmp);
            interpolated_quantile(&c, 0.5)
        })
        .collect();
    let hyperparams = layout.from_row(&medians)?.hp;
    let log_marginal = data.fit_emulator(&hyperparams)?.log_marginal();
    Ok((draws, EmulatorFit { hyperparams, log_marginal }))
}

/// Full calibration chains started at the best-scoring candidate inputs.
pub fn calibrate(
    data: &Arc<CalibrationData>,
    hp: &GpHyperparams,
    cfg: &PipelineConfig,
    sampler: &SamplerConfig,
) -> Result<(PosteriorDraws, Diagnostics)> {
    let base = initial_state(data, hp.clone(), &cfg.priors);
    let start = best_start(data, &base, cfg.calibrate.start_candidates, sampler.seed)?;
    let chains =
        run_chains(sampler, cfg.calibrate.chains, |_| CalibrationTarget::new(data.clone(), Mode::Full, start.clone()))?;
    let mut draws = chains[0].clone();
    for c in &chains[1..] {
        draws.values.extend(&c.values);
        draws.log_posterior.extend(&c.log_posterior);
    }
    let k = chains.len() as f64;
    for (i, a) in draws.acceptance.iter_mut().enumerate() {
        a.2 = chains.iter().map(|c| c.acceptance[i].2).sum::<f64>() / k;
    }
    let mut diag = diagnostics(&draws)?;
    if chains.len() > 1 {
        for p in diag.parameters.iter_mut() {
            let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(&p.name).unwrap_or_default()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            p.split_rhat = split_rhat(&refs);
        }
    }
    Ok((draws, diag))
}

/// Scores the design points (at the median quantile level) and random
/// candidates under the full posterior; returns the best.
fn best_start(data: &CalibrationData, base: &CalibrationState, n_random: usize, seed: u64) -> Result<CalibrationState> {
    let dim = data.dim();
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for r in 0..data.geom.n() {
        let mut x: Vec<f64> = data.geom.inputs.row(r).iter().copied().collect();
        x[dim - 1] = 0.5;
        if !candidates.contains(&x) {
            candidates.push(x);
        }
    }
    let mut rng = rng_from(seed, &[0x57A27]);
    candidates.extend((0..n_random).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()));
    let mut best = (f64::NEG_INFINITY, base.clone());
    for x in candidates {
        let s = CalibrationState { theta_alpha: x, ..base.clone() };
        let lp = match log_posterior(&s, data, Mode::Full) {
            Ok(v) => v,
            Err(Error::Conditioning { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        if lp > best.0 {
            best = (lp, s);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Numerical("no starting candidate has finite posterior density".into()));
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub design_index: usize,
    pub alpha: f64,
    /// Share of weeks whose empirical quantile falls inside the interval.
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub held_out: Vec<usize>,
    /// Set when nothing was held out and the training points were scored.
    pub in_sample: bool,
    pub level: f64,
    pub rows: Vec<HoldoutRow>,
    /// Mean over all (point, quantile, week) cells.
    pub mean_coverage: f64,
}

impl HoldoutReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["design_index", "alpha", "coverage", "mean_width"])?;
        for r in &self.rows {
            w.write_record([
                r.design_index.to_string(),
                r.alpha.to_string(),
                r.coverage.to_string(),
                r.mean_width.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Three design points at the lower quartile, median and upper quartile of
/// replicate spread (mean width between the extreme quantile curves). The
/// spread extremes are avoided: their outputs sit outside the range of the
/// remaining runs, which tests extrapolation rather than emulation.
pub fn default_holdout(q: &QuantileEnsemble) -> Vec<usize> {
    let na = q.n_alpha();
    let mut spread: Vec<(f64, usize)> = (0..q.n_points())
        .map(|i| {
            let lo = q.eta.row(i * na);
            let hi = q.eta.row(i * na + na - 1);
            ((hi - lo).mean(), i)
        })
        .collect();
    spread.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = spread.len();
    let mut idx = vec![spread[n / 4].1, spread[n / 2].1, spread[(3 * n) / 4].1];
    idx.dedup();
    idx
}

impl Pipeline {
    /// Refits basis and emulator without the listed design points and scores
    /// pointwise intervals for their empirical quantile curves. An empty list
    /// scores every design point in sample.
    pub fn holdout(&self, indices: Option<&[usize]>) -> Result<HoldoutReport> {
        self.ensure(Stage::Quantiles)?;
        let cfg = &self.cfg;
        let q = self.read_quantiles().map_err(|e| e.in_stage("holdout"))?;
        let held: Vec<usize> = match indices.or(cfg.holdout.indices.as_deref()) {
            Some(ix) => ix.to_vec(),
            None => default_holdout(&q),
        };
        let report = holdout_report(&q, &held, cfg, self.sampler(&cfg.fit.sampler, &[HOLDOUT_STREAM]))
            .map_err(|e| e.in_stage("holdout"))?;
        let dir = self.path("holdout");
        std::fs::create_dir_all(&dir)?;
        report.write_csv(&dir.join("coverage.csv"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }
}

pub fn holdout_report(
    q: &QuantileEnsemble,
    held: &[usize],
    cfg: &PipelineConfig,
    sampler: SamplerConfig,
) -> Result<HoldoutReport> {
    let m = q.n_points();
    let mut sorted = held.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != held.len() {
        return Err(Error::invalid("holdout indices repeat"));
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= m) {
        return Err(Error::invalid(format!("holdout index {bad} outside a design of {m} points")));
    }
    if sorted.len() >= m {
        return Err(Error::invalid("cannot hold out the whole design"));
    }
    let train: Vec<usize> = (0..m).filter(|i| !sorted.contains(i)).collect();
    let tq = q.select_points(&train);
    let basis = build_basis(&tq.eta, cfg.p_eta)?;
    let w = project(&tq.eta, &basis)?.w_star;
    let disc = build_discrepancy_basis(q.weeks(), cfg.discrepancy.kernel_sd, cfg.discrepancy.spacing)?;
    let data = Arc::new(CalibrationData::new(
        cfg.input_names(),
        tq.design.rows.clone(),
        w,
        basis,
        disc,
        None,
        cfg.priors.clone(),
    )?);
    let (draws, _) = fit_emulator(&data, cfg, sampler.clone())?;
    let layout = data.layout();
    let n = draws.n_draws();
    let k = cfg.holdout.draws.min(n);
    let states: Vec<CalibrationState> = (0..k).map(|j| layout.from_row(draws.row(j * n / k))).collect::<Result<_>>()?;
    let fits = states.iter().map(|s| data.fit_emulator(&s.hp)).collect::<Result<Vec<_>>>()?;

    let targets: Vec<usize> = if sorted.is_empty() { (0..m).collect() } else { sorted.clone() };
    let na = q.n_alpha();
    let t = q.weeks();
    let tail = 0.5 * (1.0 - cfg.holdout.level);
    let mut rng = rng_from(sampler.seed, &[0x401D]);
    let mut rows = Vec::new();
    let mut covered = 0usize;
    for &i in &targets {
        for (j, &a) in q.alphas().iter().enumerate() {
            let x: Vec<f64> = q.design.rows.row(i * na + j).iter().copied().collect();
            let mut samples: Vec<Vec<f64>> = vec![Vec::new(); t];
            for (f, s) in fits.iter().zip(&states) {
                let (mu, var) = f.predict_point(&x);
                for _ in 0..cfg.holdout.samples_per_draw {
                    // latent weight plus its nugget: the empirical quantiles are noisy estimates
                    let w = DVector::from_fn(mu.len(), |b, _| {
                        let sd = (var[b] + 1.0 / s.hp.lambda_weps[b]).sqrt();
                        mu[b] + sd * rng.sample::<f64, _>(StandardNormal)
                    });
                    let curve = data.basis.reconstruct(&w);
                    for (week, v) in curve.iter().enumerate() {
                        samples[week].push(*v);
                    }
                }
            }
            let mut hits = 0;
            let mut width = 0.0;
            for (week, col) in samples.iter_mut().enumerate() {
                col.sort_by(f64::total_cmp);
                let (lo, hi) = (interpolated_quantile(col, tail), interpolated_quantile(col, 1.0 - tail));
                let truth = q.eta[(i * na + j, week)];
                if lo <= truth && truth <= hi {
                    hits += 1;
                }
                width += hi - lo;
            }
            covered += hits;
            rows.push(HoldoutRow {
                design_index: i,
                alpha: a,
                coverage: hits as f64 / t as f64,
                mean_width: width / t as f64,
            });
        }
    }
    Ok(HoldoutReport {
        held_out: sorted,
        in_sample: held.is_empty(),
        level: cfg.holdout.level,
        mean_coverage: covered as f64 / (rows.len() * t) as f64,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    /// Unit-scaled truth.
    pub truth: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    /// Interval width as a fraction of the unit prior range.
    pub width: f64,
    pub weakly_identified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    pub truth_native: Vec<f64>,
    pub observed: Vec<u64>,
    pub parameters: Vec<ParameterRecovery>,
    pub alpha_interval: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveCheck {
    pub final_observed_week: usize,
    pub posterior_band_width: f64,
    pub prior_band_width: f64,
    /// Share of observed weeks whose truth-generating median lies in the band.
    pub median_curve_coverage: f64,
    pub truth_peak_week: usize,
    pub predicted_peak_week_mode: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub truths: usize,
    /// Per-parameter share of prior truths inside the prior-only interval.
    pub coverage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub level: f64,
    pub informative_input: String,
    pub repetitions: Vec<Repetition>,
    pub informative_covered: usize,
    pub informative_mean_width: f64,
    /// Predictive check on the first repetition.
    pub predictive: PredictiveCheck,
    pub control: ControlReport,
}

impl Pipeline {
    /// Calibrates against observations simulated at prior draws of the
    /// inputs and scores interval recovery.
    pub fn synthetic_truth(&self) -> Result<SyntheticReport> {
        self.ensure(Stage::Fit)?;
        self.synthetic_inner().map_err(|e| e.in_stage("synthetic-truth"))
    }

    fn synthetic_inner(&self) -> Result<SyntheticReport> {
        let cfg = &self.cfg;
        let syn = &cfg.synthetic;
        let fit = self.read_fit()?;
        let dir = self.path("synthetic");
        std::fs::create_dir_all(&dir)?;
        let p = cfg.space.dim();
        let mut reps = Vec::new();
        let mut predictive = None;
        for k in 0..syn.repetitions {
            let seed = derive_seed(cfg.seed, &[SYNTHETIC_STREAM, k as u64]);
            let mut rng = rng_from(seed, &[]);
            let truth: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
            let native = cfg.space.to_native(&truth)?;
            let params = SimParams::from_native(&native)?;
            let observed = noisy_weekly_counts(&params, cfg.observed_weeks, derive_seed(seed, &[1]))?;
            let obs = Observations::from_weekly(&observed)?;
            let data = Arc::new(self.calibration_data(Some(obs))?);
            let sampler = self.sampler(&cfg.calibrate.sampler, &[SYNTHETIC_STREAM, k as u64]);
            let (draws, _) = calibrate(&data, &fit.hyperparams, cfg, &sampler)?;
            let rep_dir = dir.join(format!("rep_{k}"));
            std::fs::create_dir_all(&rep_dir)?;
            crate::calib::write_weekly_csv(&rep_dir.join("observations.csv"), &observed)?;
            draws.write_csv(&rep_dir.join(DRAWS))?;

            let parameters = (0..p)
                .map(|d| {
                    let col = draws.column(&cfg.space.names[d]).unwrap_or_default();
                    let (lower, upper) = credible_interval(&col, syn.level);
                    ParameterRecovery {
                        name: cfg.space.names[d].clone(),
                        truth: truth[d],
                        lower,
                        upper,
                        covered: lower <= truth[d] && truth[d] <= upper,
                        width: upper - lower,
                        weakly_identified: upper - lower > syn.weak_width,
                    }
                })
                .collect();
            let alpha = draws.column("alpha").unwrap_or_default();
            if k == 0 {
                predictive = Some(self.predictive_check(&draws, &data, &params, seed)?);
            }
            reps.push(Repetition {
                index: k,
                truth_native: native,
                observed,
                parameters,
                alpha_interval: credible_interval(&alpha, syn.level),
            });
        }
        let inf = syn.informative_input;
        let report = SyntheticReport {
            level: syn.level,
            informative_input: cfg.space.names[inf].clone(),
            informative_covered: reps.iter().filter(|r| r.parameters[inf].covered).count(),
            informative_mean_width: mean(&reps.iter().map(|r| r.parameters[inf].width).collect::<Vec<_>>()),
            repetitions: reps,
            predictive: predictive.ok_or_else(|| Error::Config("synthetic.repetitions must be positive".into()))?,
            control: self.flat_likelihood_control(&fit.hyperparams)?,
        };
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    fn predictive_check(
        &self,
        draws: &PosteriorDraws,
        data: &CalibrationData,
        truth: &SimParams,
        seed: u64,
    ) -> Result<PredictiveCheck> {
        let cfg = &self.cfg;
        let opts = PredictOptions {
            seed: derive_seed(seed, &[2]),
            truncation_noise: cfg.predict.truncation_noise,
            max_draws: cfg.predict.max_draws,
        };
        let post = predict_curves(draws, data, &opts)?;
        let prior = prior_predictive(draws, data, &opts)?;
        let band = pointwise_band(&post.combined, cfg.predict.level);
        let last = cfg.observed_weeks - 1;

        // median log-cumulative curve of replicate epidemics at the truth
        let r = cfg.synthetic.truth_replicates;
        let reps: Vec<Vec<f64>> = (0..r)
            .map(|j| {
                let c = crate::epi::simulate(truth, cfg.weeks, derive_seed(seed, &[3, j as u64]))?;
                Ok(c.iter().map(|&v| crate::epi::log_count(v as f64)).collect())
            })
            .collect::<Result<_>>()?;
        let median: Vec<f64> = (0..cfg.weeks)
            .map(|t| {
                let mut col: Vec<f64> = reps.iter().map(|c| c[t]).collect();
                col.sort_by(f64::total_cmp);
                interpolated_quantile(&col, 0.5)
            })
            .collect();
        let hits =
            (0..cfg.observed_weeks).filter(|&t| band.lower[t] <= median[t] && median[t] <= band.upper[t]).count();
        let truth_peak = summarize_one(&crate::predict::to_weekly(&median)).peak_week;
        let peak_mode = summarize(&post.weekly)?.peak_week.mode();
        Ok(PredictiveCheck {
            final_observed_week: cfg.observed_weeks,
            posterior_band_width: band.width(last),
            prior_band_width: pointwise_band(&prior.combined, cfg.predict.level).width(last),
            median_curve_coverage: hits as f64 / cfg.observed_weeks as f64,
            truth_peak_week: truth_peak,
            predicted_peak_week_mode: peak_mode,
        })
    }

    /// With the likelihood switched off the posterior is the prior, so prior
    /// truths should land inside the intervals at the nominal rate.
    fn flat_likelihood_control(&self, hp: &GpHyperparams) -> Result<ControlReport> {
        let cfg = &self.cfg;
        let data = Arc::new(self.calibration_data(None)?);
        let mut target =
            CalibrationTarget::new(data.clone(), Mode::PriorOnly, initial_state(&data, hp.clone(), &cfg.priors))?;
        let sampler = SamplerConfig {
            n_burn: 500,
            n_draws: 4000,
            thin: 1,
            ..self.sampler(&cfg.calibrate.sampler, &[SYNTHETIC_STREAM, u64::MAX])
        };
        let draws = run_chain(&sampler, &mut target)?;
        let mut rng = rng_from(cfg.seed, &[SYNTHETIC_STREAM, u64::MAX - 1]);
        let n = cfg.synthetic.control_truths;
        let coverage = cfg
            .space
            .names
            .iter()
            .map(|name| {
                let (lo, hi) = credible_interval(&draws.column(name).unwrap_or_default(), cfg.synthetic.level);
                (0..n).filter(|_| (lo..=hi).contains(&rng.random::<f64>())).count() as f64 / n as f64
            })
            .collect();
        Ok(ControlReport { truths: n, coverage })
    }
}
