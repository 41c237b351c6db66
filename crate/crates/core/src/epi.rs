//! Stochastic epidemic simulator used as the computer model.
//!
//! A discrete-time SEIR chain-binomial on a well-mixed population of
//! [`POPULATION`] people, one step per week:
//!
//! * each susceptible is infected with probability
//!   `1 - exp(-CONTACTS_PER_WEEK * p * m_trans * m_contact * I / N)` where
//!   `p = transmissibility * 1e4` (clamped to `[0, 1]`);
//! * the exposed stage lasts exactly one week;
//! * each infectious person recovers with probability [`RECOVERY_PROB`] per
//!   week (geometric infectious period, mean two weeks).
//!
//! Once the week number passes `intervention_delay`, the intervention ramps in
//! over one week (`activation` goes from 0 to 1) and multiplies transmission by
//! `1 - efficacy * activation` and contact rate by `exp(-travel_reduction * activation)`.
//!
//! The output is the cumulative number of people ever infected, one value per
//! week, starting from the initial seed in week 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::design::{annotate, DesignMatrix, ParameterSpace};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const POPULATION: u64 = 10_000;
pub const CONTACTS_PER_WEEK: f64 = 2.0;
pub const RECOVERY_PROB: f64 = 0.5;
/// Transmissibility in the native box is per-contact probability divided by this.
pub const TRANSMISSIBILITY_SCALE: f64 = 1e4;
/// Counts below this are replaced by it before taking logs.
pub const ZERO_COUNT_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimParams {
    pub transmissibility: f64,
    pub initial_infected: u64,
    pub intervention_delay: f64,
    pub intervention_efficacy: f64,
    pub travel_reduction: f64,
}

impl SimParams {
    /// Builds parameters from a native-unit vector in the order of
    /// [`ParameterSpace::epidemic`]. The seed count is rounded to the nearest
    /// integer (at least 1).
    pub fn from_native(x: &[f64]) -> Result<Self> {
        if x.len() != 5 {
            return Err(Error::invalid(format!("simulator takes 5 parameters, got {}", x.len())));
        }
        let p = Self {
            transmissibility: x[0],
            initial_infected: x[1].round().max(1.0) as u64,
            intervention_delay: x[2],
            intervention_efficacy: x[3],
            travel_reduction: x[4],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.transmissibility >= 0.0
            && self.transmissibility.is_finite()
            && (1..=POPULATION).contains(&self.initial_infected)
            && self.intervention_delay >= 0.0
            && (0.0..=1.0).contains(&self.intervention_efficacy)
            && self.travel_reduction >= 0.0
            && self.travel_reduction.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid simulator parameters {self:?}")))
        }
    }

    pub fn contact_probability(&self) -> f64 {
        (self.transmissibility * TRANSMISSIBILITY_SCALE).clamp(0.0, 1.0)
    }

    fn activation(&self, week: usize) -> f64 {
        (week as f64 - self.intervention_delay).clamp(0.0, 1.0)
    }

    /// Per-susceptible infection probability for the step leaving `week`
    /// (1-based) with `infectious` people infectious.
    pub fn infection_probability(&self, week: usize, infectious: u64) -> f64 {
        let act = self.activation(week);
        let m_trans = 1.0 - self.intervention_efficacy * act;
        let m_contact = (-self.travel_reduction * act).exp();
        let pressure = CONTACTS_PER_WEEK * self.contact_probability() * m_trans * m_contact * infectious as f64
            / POPULATION as f64;
        -(-pressure).exp_m1()
    }
}

/// One replicate: cumulative infections for weeks `1..=weeks`.
pub fn simulate(params: &SimParams, weeks: usize, seed: u64) -> Result<Vec<u64>> {
    if weeks == 0 {
        return Err(Error::invalid("simulation needs at least one week"));
    }
    params.validate()?;
    let mut rng = rng_from(seed, &[0xE71]);
    let mut s = POPULATION - params.initial_infected;
    let mut e = 0u64;
    let mut i = params.initial_infected;
    let mut out = Vec::with_capacity(weeks);
    out.push(POPULATION - s);
    for week in 1..weeks {
        let q = params.infection_probability(week, i);
        let new_exposed = binomial(&mut rng, s, q);
        let recovered = binomial(&mut rng, i, RECOVERY_PROB);
        s -= new_exposed;
        i = i - recovered + e;
        e = new_exposed;
        out.push(POPULATION - s);
    }
    Ok(out)
}

fn binomial(rng: &mut crate::rng::Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Seed for replicate `j` of design point `i`.
pub fn cell_seed(seed: u64, i: usize, j: usize) -> u64 {
    crate::rng::derive_seed(seed, &[i as u64, j as u64])
}

/// Replicated trajectories, indexed `(design point, replicate, week)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEnsemble {
    pub m: usize,
    pub r: usize,
    pub weeks: usize,
    pub cumulative: Vec<u64>,
    pub log_cumulative: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn from_counts(m: usize, r: usize, weeks: usize, cumulative: Vec<u64>) -> Result<Self> {
        if cumulative.len() != m * r * weeks {
            return Err(Error::invalid("ensemble size does not match m * r * weeks"));
        }
        let log_cumulative = cumulative.iter().map(|&c| log_count(c as f64)).collect();
        Ok(Self { m, r, weeks, cumulative, log_cumulative })
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.r + j) * self.weeks
    }

    pub fn trajectory(&self, i: usize, j: usize) -> &[u64] {
        let o = self.offset(i, j);
        &self.cumulative[o..o + self.weeks]
    }

    pub fn log_trajectory(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.log_cumulative[o..o + self.weeks]
    }

    /// Log values of all replicates of design point `i` at week index `t`.
    pub fn log_replicates_at(&self, i: usize, t: usize) -> Vec<f64> {
        (0..self.r).map(|j| self.log_cumulative[self.offset(i, j) + t]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["design_index", "replicate", "week", "count"])?;
        for i in 0..self.m {
            for j in 0..self.r {
                for (t, c) in self.trajectory(i, j).iter().enumerate() {
                    w.write_record([i.to_string(), j.to_string(), (t + 1).to_string(), c.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| annotate(e.into(), path))?;
        let mut rows: Vec<(usize, usize, usize, u64)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |k: usize| -> Result<u64> {
                rec.get(k).and_then(|s| s.trim().parse::<u64>().ok()).ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("bad field {k} in {rec:?}"),
                })
            };
            rows.push((field(0)? as usize, field(1)? as usize, field(2)? as usize, field(3)?));
        }
        let m = rows.iter().map(|r| r.0).max().map_or(0, |v| v + 1);
        let reps = rows.iter().map(|r| r.1).max().map_or(0, |v| v + 1);
        let weeks = rows.iter().map(|r| r.2).max().unwrap_or(0);
        if rows.len() != m * reps * weeks || rows.iter().any(|r| r.2 == 0) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "ensemble CSV is not a complete (design, replicate, week) grid".into(),
            });
        }
        let mut counts = vec![0u64; m * reps * weeks];
        for (i, j, t, c) in rows {
            counts[(i * reps + j) * weeks + t - 1] = c;
        }
        Self::from_counts(m, reps, weeks, counts)
    }

    const MAGIC: &'static [u8; 8] = b"QKENS\x00\x00\x01";

    /// Compact little-endian cache: magic, `m`, `r`, `weeks` as u64, then counts.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        for v in [self.m, self.r, self.weeks] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for c in &self.cumulative {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        let bad = |msg: &str| Error::Parse { path: path.display().to_string(), message: msg.into() };
        if buf.len() < 32 || &buf[..8] != Self::MAGIC {
            return Err(bad("not an ensemble cache"));
        }
        let word = |k: usize| u64::from_le_bytes(buf[k..k + 8].try_into().unwrap());
        let (m, r, weeks) = (word(8) as usize, word(16) as usize, word(24) as usize);
        let n = m * r * weeks;
        if buf.len() != 32 + 8 * n {
            return Err(bad("truncated ensemble cache"));
        }
        let counts = (0..n).map(|k| word(32 + 8 * k)).collect();
        Self::from_counts(m, r, weeks, counts)
    }
}

/// Runs `r` replicates at every design point. Cells are independent and
/// seeded by [`cell_seed`], so the parallel result equals the serial one.
pub fn run_ensemble(
    design: &DesignMatrix,
    space: &ParameterSpace,
    r: usize,
    weeks: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if r < 2 {
        return Err(Error::invalid(format!("need at least 2 replicates, got {r}")));
    }
    let params: Vec<SimParams> =
        (0..design.m()).map(|i| SimParams::from_native(&design.native(space, i)?)).collect::<Result<_>>()?;
    let cells: Vec<Vec<u64>> = (0..design.m() * r)
        .into_par_iter()
        .map(|cell| simulate(&params[cell / r], weeks, cell_seed(seed, cell / r, cell % r)))
        .collect::<Result<_>>()?;
    TrajectoryEnsemble::from_counts(design.m(), r, weeks, cells.concat())
}

/// `log(max(count, 0.5))`; assumes a nonnegative count.
pub fn log_count(count: f64) -> f64 {
    count.max(ZERO_COUNT_FLOOR).ln()
}

/// Entrywise log with the zero-count floor; negative or non-finite entries are rejected.
pub fn to_log(counts: &[f64]) -> Result<Vec<f64>> {
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if !(c >= 0.0) || !c.is_finite() {
                Err(Error::invalid(format!("count {k} is {c}; counts must be nonnegative")))
            } else {
                Ok(log_count(c))
            }
        })
        .collect()
}

/// Draws `weeks` of a single synthetic epidemic at `params` and perturbs the
/// weekly counts with the observation-error rule `sd = max(5, 0.2 c)`,
/// rounding and clamping at zero.
pub fn noisy_weekly_counts(params: &SimParams, weeks: usize, seed: u64) -> Result<Vec<u64>> {
    let cumulative = simulate(params, weeks, seed)?;
    let mut rng = rng_from(seed, &[0x0B5]);
    let mut prev = 0u64;
    Ok(cumulative
        .iter()
        .map(|&c| {
            let weekly = (c - prev) as f64;
            prev = c;
            let sd = crate::calib::observation_sd(weekly);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (weekly + sd * z).round().max(0.0) as u64
        })
        .collect())
}
