//! Space-filling designs over the parameter box and the quantile-augmented
//! design matrix.
//!
//! Designs are symmetric Latin hypercubes built by random pairing and
//! mirroring: each lower-half bin is paired with its reflection, so the row
//! set is invariant under `x -> 1 - x`. This is not the orthogonal-array based
//! construction sometimes used for the same purpose; it keeps the one-point-per-bin
//! margins and the reflection symmetry, which is what the emulator relies on.
//!
//! All GP computation works on unit-scaled inputs. Native units appear only at
//! the simulator boundary via [`ParameterSpace::to_native`].

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let space = Self { names, lower, upper };
        space.validate()?;
        Ok(space)
    }

    /// The five-parameter epidemic box: transmissibility, initial infected,
    /// intervention delay (weeks), intervention efficacy, travel reduction.
    pub fn epidemic() -> Self {
        Self {
            names: [
                "transmissibility",
                "initial_infected",
                "intervention_delay",
                "intervention_efficacy",
                "travel_reduction",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            lower: vec![3e-5, 1.0, 2.0, 0.1, 0.0],
            upper: vec![8e-5, 20.0, 10.0, 0.8, 2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.names.len();
        if p == 0 {
            return Err(Error::Config("parameter space needs at least one dimension".into()));
        }
        if self.lower.len() != p || self.upper.len() != p {
            return Err(Error::Config(format!(
                "parameter space has {p} names but {} lower / {} upper bounds",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for k in 0..p {
            if !(self.lower[k] < self.upper[k]) {
                return Err(Error::Config(format!(
                    "bounds for `{}` are not increasing: [{}, {}]",
                    self.names[k], self.lower[k], self.upper[k]
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Maps native units to the unit cube, rejecting out-of-range components.
    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = (self.lower[k], self.upper[k]);
                if !(lo <= v && v <= hi) {
                    return Err(Error::OutOfRange { index: k, value: v, lower: lo, upper: hi });
                }
                Ok((v - lo) / (hi - lo))
            })
            .collect()
    }

    /// Maps unit-cube coordinates back to native units.
    pub fn to_native(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        u.iter()
            .enumerate()
            .map(|(k, &v)| {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange { index: k, value: v, lower: 0.0, upper: 1.0 });
                }
                let (lo, hi) = (self.lower[k], self.upper[k]);
                Ok((lo + v * (hi - lo)).clamp(lo, hi))
            })
            .collect()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} components, got {}", self.dim(), x.len())));
        }
        Ok(())
    }
}

/// Unit-scaled design points, one row per run.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub points: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("design entries must lie in [0, 1]"));
        }
        Ok(Self { points })
    }

    pub fn m(&self) -> usize {
        self.points.nrows()
    }

    pub fn p(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// Row `i` in native units.
    pub fn native(&self, space: &ParameterSpace, i: usize) -> Result<Vec<f64>> {
        space.to_native(&self.row(i))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self { points: self.points.select_rows(rows) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LhsOptions {
    /// Pair rows as `x` and `1 - x`.
    pub symmetric: bool,
    /// For symmetric designs with odd `m`, put the unpaired row at the center.
    pub allow_center: bool,
}

impl Default for LhsOptions {
    fn default() -> Self {
        Self { symmetric: true, allow_center: true }
    }
}

/// Symmetric Latin hypercube with `m` runs over the unit cube of `space`.
pub fn generate_lhs(space: &ParameterSpace, m: usize, seed: u64) -> Result<DesignMatrix> {
    generate_lhs_with(space.dim(), m, seed, LhsOptions::default())
}

pub fn generate_lhs_with(p: usize, m: usize, seed: u64, opts: LhsOptions) -> Result<DesignMatrix> {
    if m < 2 {
        return Err(Error::invalid(format!("a Latin hypercube needs m >= 2 runs, got {m}")));
    }
    if p == 0 {
        return Err(Error::invalid("design dimension must be positive"));
    }
    if opts.symmetric && m % 2 == 1 && !opts.allow_center {
        return Err(Error::invalid(format!("symmetric design with odd m = {m} requires a center point")));
    }
    let mut rng = rng_from(seed, &[0x1D5]);
    let mf = m as f64;
    let mut points = DMatrix::zeros(m, p);
    for col in 0..p {
        if opts.symmetric {
            let half = m / 2;
            let mut bins: Vec<usize> = (0..half).collect();
            bins.shuffle(&mut rng);
            for (row, &low_bin) in bins.iter().enumerate() {
                let bin = if rng.random_bool(0.5) { low_bin } else { m - 1 - low_bin };
                let jitter: f64 = rng.sample(Open01);
                let u = (bin as f64 + jitter) / mf;
                points[(row, col)] = u;
                points[(m - 1 - row, col)] = 1.0 - u;
            }
            if m % 2 == 1 {
                points[(half, col)] = 0.5;
            }
        } else {
            let mut bins: Vec<usize> = (0..m).collect();
            bins.shuffle(&mut rng);
            for (row, &bin) in bins.iter().enumerate() {
                let jitter: f64 = rng.sample(Open01);
                points[(row, col)] = (bin as f64 + jitter) / mf;
            }
        }
    }
    Ok(DesignMatrix { points })
}

/// Design rows crossed with quantile levels: row `i * n_alpha + j` is
/// `(θ*_i, alphas[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDesign {
    pub rows: DMatrix<f64>,
    pub alphas: Vec<f64>,
}

impl AugmentedDesign {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_alpha(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_points(&self) -> usize {
        self.rows.nrows() / self.alphas.len()
    }

    /// Input dimension including the quantile column.
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.rows.row(r).iter().copied().collect()
    }

    /// The design points with the quantile column stripped and blocks collapsed.
    pub fn base_design(&self) -> DesignMatrix {
        let p = self.dim() - 1;
        let na = self.n_alpha();
        let points = DMatrix::from_fn(self.n_points(), p, |i, k| self.rows[(i * na, k)]);
        DesignMatrix { points }
    }

    /// Keeps the blocks of the listed design points.
    pub fn select_points(&self, points: &[usize]) -> Self {
        let na = self.n_alpha();
        let rows: Vec<usize> = points.iter().flat_map(|&i| (0..na).map(move |j| i * na + j)).collect();
        Self { rows: self.rows.select_rows(&rows), alphas: self.alphas.clone() }
    }
}

pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::invalid("at least one quantile level is required"));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::invalid("quantile levels must lie in (0, 1)"));
    }
    if alphas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("quantile levels must be strictly increasing"));
    }
    Ok(())
}

pub fn augment_with_quantiles(d: &DesignMatrix, alphas: &[f64]) -> Result<AugmentedDesign> {
    validate_alphas(alphas)?;
    let (m, p, na) = (d.m(), d.p(), alphas.len());
    let rows = DMatrix::from_fn(m * na, p + 1, |r, k| if k < p { d.points[(r / na, k)] } else { alphas[r % na] });
    Ok(AugmentedDesign { rows, alphas: alphas.to_vec() })
}

/// Writes design rows (unit-scaled) with a header of parameter names, plus
/// `alpha` when the design is augmented.
pub fn write_design_csv(path: &Path, names: &[String], rows: &DMatrix<f64>, augmented: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = names.to_vec();
    if augmented {
        header.push("alpha".into());
    }
    if header.len() != rows.ncols() {
        return Err(Error::invalid("header does not match design width"));
    }
    w.write_record(&header)?;
    for r in 0..rows.nrows() {
        w.write_record(rows.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a design CSV; returns the header and the rows.
pub fn read_design_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| annotate(e.into(), path))?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(parse_f64(field, path)?);
        }
        n += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(n, header.len(), &data)))
}

pub(crate) fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse { path: path.display().to_string(), message: format!("`{s}`: {e}") })
}

pub(crate) fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { message, .. } => Error::Parse { path: path.display().to_string(), message },
        other => other,
    }
}
