use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::stats::mean;

/// Effective sample size by Geyer's initial monotone sequence estimator.
/// `None` when the chain is constant.
pub fn effective_sample_size(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let m = mean(x);
    let dev: Vec<f64> = x.iter().map(|v| v - m).collect();
    let autocov = |lag: usize| dev[..n - lag].iter().zip(&dev[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = autocov(0);
    if !(g0 > 0.0) {
        return None;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        lag += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / (n as f64).log10());
    Some(n as f64 / tau)
}

/// Split-chain potential scale reduction over one or more chains of equal
/// length. `None` when the within-chain variance vanishes.
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    let half = chains.iter().map(|c| c.len() / 2).min()?;
    if half < 2 {
        return None;
    }
    let parts: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[c.len() - half..]]).collect();
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w =
        parts.iter().zip(&means).map(|(p, m)| p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sum::<f64>()
            / parts.len() as f64;
    if !(w > 0.0) {
        return None;
    }
    let grand = mean(&means);
    let b = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (parts.len() as f64 - 1.0);
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub acceptance: Option<f64>,
    pub ess: Option<f64>,
    /// Set when the chain never moved, so ESS and R-hat are undefined.
    pub degenerate: bool,
    pub split_rhat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_draws: usize,
    pub parameters: Vec<ParameterDiagnostics>,
    /// Mean acceptance per parameter class.
    pub class_acceptance: BTreeMap<String, f64>,
}

impl Diagnostics {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

pub fn diagnostics(draws: &PosteriorDraws) -> Result<Diagnostics> {
    if draws.n_draws() < 100 {
        return Err(Error::invalid(format!("need at least 100 draws, got {}", draws.n_draws())));
    }
    let parameters = draws
        .columns
        .iter()
        .map(|name| {
            let x = draws.column(name).unwrap_or_default();
            let ess = effective_sample_size(&x);
            ParameterDiagnostics {
                name: name.clone(),
                acceptance: draws.acceptance.iter().find(|a| &a.0 == name).map(|a| a.2),
                ess,
                degenerate: ess.is_none(),
                split_rhat: split_rhat(&[&x]),
            }
        })
        .collect();
    let mut by_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (_, class, rate) in &draws.acceptance {
        let key = serde_json::to_value(class)?.as_str().unwrap_or_default().to_string();
        let e = by_class.entry(key).or_default();
        e.0 += rate;
        e.1 += 1;
    }
    Ok(Diagnostics {
        n_draws: draws.n_draws(),
        parameters,
        class_acceptance: by_class.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}
