//! Pointwise quantile trajectories: the replicate ensemble at each design point
//! is reduced to `n_alpha` curves, one per quantile level, giving a
//! deterministic model indexed by `(θ, α)`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::design::{annotate, parse_f64, validate_alphas, AugmentedDesign, DesignMatrix};
use crate::epi::TrajectoryEnsemble;
use crate::error::{Error, Result};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.05, 0.275, 0.5, 0.725, 0.95];

/// Smallest `k` with `k / n >= alpha`, i.e. `ceil(alpha * n)` evaluated
/// without rounding artifacts.
fn order_index(alpha: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = ((alpha * nf).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= alpha {
        k -= 1;
    }
    while k < n && (k as f64) / nf < alpha {
        k += 1;
    }
    k
}

/// Empirical plug-in of `inf {x : P(X <= x) >= alpha}`: the order statistic
/// `x_(k)` with `k = ceil(alpha * n)`.
pub fn pointwise_quantile(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot take a quantile of an empty sample"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("quantile level {alpha} outside (0, 1)")));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in quantile sample"));
    }
    let mut s = samples.to_vec();
    let k = order_index(alpha, s.len());
    let (_, kth, _) = s.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Quantile curves on the log scale; row `i * n_alpha + j` belongs to design
/// point `i` and level `alphas[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileEnsemble {
    pub eta: DMatrix<f64>,
    pub design: AugmentedDesign,
}

impl QuantileEnsemble {
    pub fn alphas(&self) -> &[f64] {
        &self.design.alphas
    }

    pub fn weeks(&self) -> usize {
        self.eta.ncols()
    }

    pub fn n_alpha(&self) -> usize {
        self.design.n_alpha()
    }

    pub fn n_points(&self) -> usize {
        self.design.n_points()
    }

    /// Keeps the rows of the listed design points.
    pub fn select_points(&self, points: &[usize]) -> Self {
        let na = self.n_alpha();
        let rows: Vec<usize> = points.iter().flat_map(|&i| (0..na).map(move |j| i * na + j)).collect();
        Self { eta: self.eta.select_rows(&rows), design: self.design.select_points(points) }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["design_index", "alpha", "week", "value"])?;
        let na = self.n_alpha();
        for r in 0..self.eta.nrows() {
            for t in 0..self.weeks() {
                w.write_record([
                    (r / na).to_string(),
                    self.alphas()[r % na].to_string(),
                    (t + 1).to_string(),
                    self.eta[(r, t)].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the long-format CSV; the θ columns come from `design`, which must
    /// be the base design the quantiles were computed on.
    pub fn read_csv(path: &Path, design: &DesignMatrix) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| annotate(e.into(), path))?;
        let mut recs: Vec<(usize, f64, usize, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let get = |k: usize| rec.get(k).unwrap_or("");
            let idx = parse_f64(get(0), path)? as usize;
            let week = parse_f64(get(2), path)? as usize;
            recs.push((idx, parse_f64(get(1), path)?, week, parse_f64(get(3), path)?));
        }
        let mut alphas: Vec<f64> = recs.iter().map(|r| r.1).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let weeks = recs.iter().map(|r| r.2).max().unwrap_or(0);
        let m = design.m();
        let na = alphas.len();
        if recs.len() != m * na * weeks || recs.iter().any(|r| r.0 >= m || r.2 == 0) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "quantile CSV does not match the design".into(),
            });
        }
        let mut eta = DMatrix::zeros(m * na, weeks);
        for (i, a, t, v) in recs {
            let j = alphas.iter().position(|x| *x == a).unwrap();
            eta[(i * na + j, t - 1)] = v;
        }
        let design = crate::design::augment_with_quantiles(design, &alphas)?;
        Ok(Self { eta, design })
    }
}

/// Reduces the replicate ensemble to pointwise quantile curves of the log
/// cumulative counts.
pub fn build_quantile_ensemble(
    ens: &TrajectoryEnsemble,
    design: &DesignMatrix,
    alphas: &[f64],
) -> Result<QuantileEnsemble> {
    validate_alphas(alphas)?;
    if ens.r < 2 {
        return Err(Error::invalid(format!("need at least 2 replicates, got {}", ens.r)));
    }
    if ens.m != design.m() {
        return Err(Error::invalid("ensemble and design disagree on the number of runs"));
    }
    let na = alphas.len();
    let mut eta = DMatrix::zeros(ens.m * na, ens.weeks);
    for i in 0..ens.m {
        for t in 0..ens.weeks {
            let mut reps = ens.log_replicates_at(i, t);
            reps.sort_by(f64::total_cmp);
            for (j, &a) in alphas.iter().enumerate() {
                eta[(i * na + j, t)] = reps[order_index(a, reps.len()) - 1];
            }
        }
    }
    let design = crate::design::augment_with_quantiles(design, alphas)?;
    Ok(QuantileEnsemble { eta, design })
}
