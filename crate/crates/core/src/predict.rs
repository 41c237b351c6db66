//! Predictive curves from posterior draws: emulator curves `η(θ, α)`, the
//! discrepancy `δ`, their sum, weekly counts and epidemic summaries.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationState;
use crate::error::{Error, Result};
use crate::gp::FittedEmulator;
use crate::mcmc::{CalibrationData, PosteriorDraws, StateLayout};
use crate::rng::rng_from;
use crate::stats::interpolated_quantile;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub seed: u64,
    /// Adds `N(0, λ_w0⁻¹ I)` basis-truncation noise to each emulator curve.
    pub truncation_noise: bool,
    /// Uses at most this many draws, evenly spaced; 0 keeps all.
    pub max_draws: usize,
}

/// Draw-by-week matrices on the log cumulative scale, plus weekly counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveCurveSet {
    pub eta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub combined: DMatrix<f64>,
    pub weekly: DMatrix<f64>,
}

impl PredictiveCurveSet {
    pub fn n_draws(&self) -> usize {
        self.eta.nrows()
    }

    pub fn weeks(&self) -> usize {
        self.eta.ncols()
    }
}

fn states(draws: &PosteriorDraws, max: usize) -> Result<Vec<CalibrationState>> {
    if draws.n_draws() == 0 {
        return Err(Error::invalid("no posterior draws"));
    }
    let layout = StateLayout::from_columns(&draws.columns)?;
    let n = draws.n_draws();
    let idx: Vec<usize> = if max == 0 || max >= n { (0..n).collect() } else { (0..max).map(|k| k * n / max).collect() };
    idx.into_iter().map(|i| layout.from_row(draws.row(i))).collect()
}

fn check_layout(draws: &PosteriorDraws, data: &CalibrationData) -> Result<()> {
    if draws.columns != data.layout().columns() {
        return Err(Error::invalid("posterior draws do not match the emulator artifacts"));
    }
    Ok(())
}

/// Weekly counts from a log cumulative curve: exponentiate, difference and
/// clamp negative increments to zero.
pub fn to_weekly(curve: &[f64]) -> Vec<f64> {
    let cum: Vec<f64> = curve.iter().map(|v| v.exp()).collect();
    let mut out = Vec::with_capacity(cum.len());
    let mut prev = 0.0;
    for &c in &cum {
        out.push((c - prev).max(0.0));
        prev = c;
    }
    out
}

pub fn predict_curves(
    draws: &PosteriorDraws,
    data: &CalibrationData,
    opts: &PredictOptions,
) -> Result<PredictiveCurveSet> {
    check_layout(draws, data)?;
    let states = states(draws, opts.max_draws)?;
    let t = data.basis.weeks();
    let rows: Vec<(DVector<f64>, DVector<f64>)> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_from(opts.seed, &[i as u64]);
            let fit = data.fit_emulator(&s.hp)?;
            let (m, var) = fit.predict_point(&s.theta_alpha);
            let w = DVector::from_fn(m.len(), |k, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m[k] + var[k].sqrt() * z
            });
            let mut eta = &data.basis.phi0 + &data.basis.phi * w;
            if opts.truncation_noise {
                let sd = 1.0 / s.hp.lambda_w0.sqrt();
                eta.iter_mut().for_each(|e| *e += sd * rng.sample::<f64, _>(StandardNormal));
            }
            let delta = &data.disc.d * DVector::from_column_slice(&s.v);
            Ok((eta, delta))
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let eta = DMatrix::from_fn(n, t, |i, k| rows[i].0[k]);
    let delta = DMatrix::from_fn(n, t, |i, k| rows[i].1[k]);
    let combined = &eta + &delta;
    let mut weekly = DMatrix::zeros(n, t);
    for i in 0..n {
        let row: Vec<f64> = combined.row(i).iter().copied().collect();
        weekly.set_row(i, &DVector::from_vec(to_weekly(&row)).transpose());
    }
    Ok(PredictiveCurveSet { eta, delta, combined, weekly })
}

/// Draws with the calibration inputs replaced by prior draws and the
/// discrepancy weights redrawn from `N(0, λ_δ⁻¹)`; hyperparameters are kept.
pub fn prior_predictive_draws(draws: &PosteriorDraws, seed: u64) -> Result<PosteriorDraws> {
    let layout = StateLayout::from_columns(&draws.columns)?;
    let mut out = draws.clone();
    let d = layout.inputs.len();
    let k = draws.columns.len();
    let mut rng = rng_from(seed, &[]);
    let delta_col = d + 1;
    for i in 0..draws.n_draws() {
        let row = &mut out.values[i * k..(i + 1) * k];
        for x in row[..d].iter_mut() {
            *x = rng.random();
        }
        let sd = 1.0 / row[delta_col].sqrt();
        for v in row[k - layout.p_delta..].iter_mut() {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out.log_posterior.iter_mut().for_each(|v| *v = f64::NAN);
    Ok(out)
}

pub fn prior_predictive(
    draws: &PosteriorDraws,
    data: &CalibrationData,
    opts: &PredictOptions,
) -> Result<PredictiveCurveSet> {
    let prior = prior_predictive_draws(draws, crate::rng::derive_seed(opts.seed, &[u64::MAX]))?;
    predict_curves(&prior, data, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpidemicSummary {
    /// 1-based week of the largest weekly count, earliest on ties.
    pub peak_week: usize,
    pub peak_cases: f64,
    pub total_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
}

impl Histogram {
    fn from_values(xs: &[f64], edges: Vec<f64>) -> Self {
        let nb = edges.len() - 1;
        let mut counts = vec![0usize; nb];
        for &x in xs {
            let b = edges.partition_point(|e| *e <= x).saturating_sub(1).min(nb - 1);
            counts[b] += 1;
        }
        let n = xs.len().max(1) as f64;
        let density = counts.iter().zip(edges.windows(2)).map(|(&c, w)| c as f64 / (n * (w[1] - w[0]))).collect();
        Self { edges, counts, density }
    }

    fn equal_width(xs: &[f64], bins: usize) -> Self {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let edges = (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
        Self::from_values(xs, edges)
    }

    /// Midpoint of the fullest bin.
    pub fn mode(&self) -> f64 {
        let (b, _) = self.counts.iter().enumerate().fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
        0.5 * (self.edges[b] + self.edges[b + 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub per_draw: Vec<EpidemicSummary>,
    pub peak_week: Histogram,
    pub peak_cases: Histogram,
    pub total_size: Histogram,
}

impl SummaryReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["draw", "peak_week", "peak_cases", "total_size"])?;
        for (i, s) in self.per_draw.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.peak_week.to_string(),
                s.peak_cases.to_string(),
                s.total_size.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Pooled histograms as JSON.
    pub fn write_densities_json(&self, path: &Path) -> Result<()> {
        let v = serde_json::json!({
            "peak_week": self.peak_week,
            "peak_cases": self.peak_cases,
            "total_size": self.total_size,
        });
        std::fs::write(path, serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }
}

pub fn summarize_one(weekly: &[f64]) -> EpidemicSummary {
    let (mut peak_week, mut peak_cases) = (1, weekly[0]);
    for (t, &c) in weekly.iter().enumerate().skip(1) {
        if c > peak_cases {
            peak_week = t + 1;
            peak_cases = c;
        }
    }
    EpidemicSummary { peak_week, peak_cases, total_size: weekly.iter().sum() }
}

pub fn summarize(weekly: &DMatrix<f64>) -> Result<SummaryReport> {
    if weekly.nrows() == 0 || weekly.ncols() == 0 {
        return Err(Error::invalid("no weekly draws to summarize"));
    }
    let per_draw: Vec<EpidemicSummary> =
        (0..weekly.nrows()).map(|i| summarize_one(&weekly.row(i).iter().copied().collect::<Vec<_>>())).collect();
    let weeks: Vec<f64> = per_draw.iter().map(|s| s.peak_week as f64).collect();
    let cases: Vec<f64> = per_draw.iter().map(|s| s.peak_cases).collect();
    let totals: Vec<f64> = per_draw.iter().map(|s| s.total_size).collect();
    let week_edges = (0..=weekly.ncols()).map(|k| k as f64 + 0.5).collect();
    Ok(SummaryReport {
        peak_week: Histogram::from_values(&weeks, week_edges),
        peak_cases: Histogram::equal_width(&cases, 30),
        total_size: Histogram::equal_width(&totals, 30),
        per_draw,
    })
}

/// Pointwise quantile bands of a draw-by-week matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    pub fn width(&self, week: usize) -> f64 {
        self.upper[week] - self.lower[week]
    }
}

pub fn pointwise_band(draws: &DMatrix<f64>, level: f64) -> Band {
    let tail = 0.5 * (1.0 - level);
    let mut b = Band { lower: vec![], median: vec![], upper: vec![] };
    for t in 0..draws.ncols() {
        let mut col: Vec<f64> = draws.column(t).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        b.lower.push(interpolated_quantile(&col, tail));
        b.median.push(interpolated_quantile(&col, 0.5));
        b.upper.push(interpolated_quantile(&col, 1.0 - tail));
    }
    b
}

/// Writes `week` plus lower/median/upper columns for each named matrix.
pub fn write_bands_csv(path: &Path, level: f64, sets: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    let bands: Vec<Band> = sets.iter().map(|(_, m)| pointwise_band(m, level)).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["week".to_string()];
    for (name, _) in sets {
        header.extend(["lower", "median", "upper"].map(|s| format!("{name}_{s}")));
    }
    w.write_record(&header)?;
    let weeks = sets.first().map_or(0, |s| s.1.ncols());
    for t in 0..weeks {
        let mut rec = vec![(t + 1).to_string()];
        for b in &bands {
            rec.extend([b.lower[t], b.median[t], b.upper[t]].map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Componentwise posterior mean of the calibration inputs.
pub fn posterior_mean_inputs(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    let layout = StateLayout::from_columns(&draws.columns)?;
    Ok((0..layout.inputs.len())
        .map(|k| (0..draws.n_draws()).map(|i| draws.row(i)[k]).sum::<f64>() / draws.n_draws() as f64)
        .collect())
}

/// Emulator mean curve `φ₀ + Φ E[w]` at each input row, averaged over the
/// hyperparameters of the (subsampled) draws.
fn mean_curves(states: &[CalibrationState], data: &CalibrationData, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let fits: Vec<FittedEmulator> = states.par_iter().map(|s| data.fit_emulator(&s.hp)).collect::<Result<_>>()?;
    let t = data.basis.weeks();
    let mut out = DMatrix::zeros(inputs.len(), t);
    for (r, x) in inputs.iter().enumerate() {
        let mut acc = DVector::zeros(t);
        for f in &fits {
            acc += &data.basis.phi0 + &data.basis.phi * f.predict_point(x).0;
        }
        out.set_row(r, &(acc / fits.len() as f64).transpose());
    }
    Ok(out)
}

/// Mean emulator curves while input `dim` sweeps `grid` evenly spaced values
/// on [0, 1] and the other inputs sit at their posterior means. With
/// `grid == 1` the swept input also sits at its posterior mean.
pub fn main_effect_sweep(
    draws: &PosteriorDraws,
    data: &CalibrationData,
    dim: usize,
    grid: usize,
    max_draws: usize,
) -> Result<DMatrix<f64>> {
    check_layout(draws, data)?;
    let center = posterior_mean_inputs(draws)?;
    if dim >= center.len() || grid == 0 {
        return Err(Error::invalid(format!("cannot sweep input {dim} over {grid} points")));
    }
    let inputs: Vec<Vec<f64>> = (0..grid)
        .map(|g| {
            let mut x = center.clone();
            if grid > 1 {
                x[dim] = g as f64 / (grid - 1) as f64;
            }
            x
        })
        .collect();
    mean_curves(&states(draws, max_draws)?, data, &inputs)
}

/// Mean emulator curve at fixed inputs, averaged over draw hyperparameters.
pub fn mean_curve_at(
    draws: &PosteriorDraws,
    data: &CalibrationData,
    x: &[f64],
    max_draws: usize,
) -> Result<DVector<f64>> {
    check_layout(draws, data)?;
    let m = mean_curves(&states(draws, max_draws)?, data, &[x.to_vec()])?;
    Ok(m.row(0).transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub low_alpha: f64,
    pub high_alpha: f64,
    pub pairs: usize,
    pub violations: usize,
    pub fraction: f64,
}

/// Share of (draw, week) pairs where the predicted curve at a low quantile
/// level lies above the one at a high level. Reported, never corrected.
pub fn alpha_monotonicity_diagnostic(
    draws: &PosteriorDraws,
    data: &CalibrationData,
    max_draws: usize,
) -> Result<MonotonicityReport> {
    check_layout(draws, data)?;
    let (lo, hi) = (0.05, 0.95);
    let states = states(draws, max_draws)?;
    let a = data.dim() - 1;
    let counts: Vec<usize> = states
        .par_iter()
        .map(|s| {
            let fit = data.fit_emulator(&s.hp)?;
            let mut x = s.theta_alpha.clone();
            x[a] = lo;
            let low = &data.basis.phi0 + &data.basis.phi * fit.predict_point(&x).0;
            x[a] = hi;
            let high = &data.basis.phi0 + &data.basis.phi * fit.predict_point(&x).0;
            Ok(low.iter().zip(high.iter()).filter(|(l, h)| l > h).count())
        })
        .collect::<Result<_>>()?;
    let pairs = states.len() * data.basis.weeks();
    let violations = counts.iter().sum();
    Ok(MonotonicityReport {
        low_alpha: lo,
        high_alpha: hi,
        pairs,
        violations,
        fraction: violations as f64 / pairs as f64,
    })
}

/// Per-week correlation across draws between the emulator and discrepancy
/// components; `None` where either is constant.
pub fn eta_delta_correlation(curves: &PredictiveCurveSet) -> Vec<Option<f64>> {
    (0..curves.weeks())
        .map(|t| {
            let a: Vec<f64> = curves.eta.column(t).iter().copied().collect();
            let b: Vec<f64> = curves.delta.column(t).iter().copied().collect();
            let (ma, mb) = (crate::stats::mean(&a), crate::stats::mean(&b));
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
        })
        .collect()
}
