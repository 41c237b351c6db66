use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkcal::pipeline::{Pipeline, PipelineConfig, Stage};
use qkcal::{Error, Result};

/// Quantile-kriging emulation and Bayesian calibration of a stochastic
/// epidemic simulator.
#[derive(Parser)]
#[command(name = "qkcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order.
    RunAll(Common),
    /// Space-filling design over the parameter box.
    Design(Common),
    /// Replicated simulator runs at each design point.
    Simulate(Common),
    /// Pointwise quantile curves of the replicates.
    Quantiles(Common),
    /// Principal-component and discrepancy bases.
    Basis(Common),
    /// Emulator hyperparameter fit.
    Fit(Common),
    /// Full calibration against the configured observations.
    Calibrate(Common),
    /// Predictive curves, bands and epidemic summaries.
    Predict(Common),
    /// Emulator holdout coverage.
    Holdout(Common),
    /// Calibration against data simulated at known inputs.
    SyntheticTruth(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; the full-scale defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated design indices for `holdout`; an empty list scores in sample.
    #[arg(long)]
    holdout_indices: Option<String>,
}

impl Common {
    fn pipeline(&self) -> Result<Pipeline> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
                e => e,
            })?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Pipeline::new(cfg)
    }

    fn holdout(&self) -> Result<Option<Vec<usize>>> {
        let Some(s) = &self.holdout_indices else { return Ok(None) };
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| Error::Config(format!("bad holdout index `{t}`"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn stage(c: &Common, s: Stage) -> Result<()> {
    let p = c.pipeline()?;
    let pos = Stage::ALL.iter().position(|x| *x == s).unwrap_or(0);
    if pos > 0 {
        p.ensure(Stage::ALL[pos - 1])?;
    }
    let rec = p.run_stage(s)?;
    for a in &rec.artifacts {
        println!("{}\t{}\t{}", rec.stage, p.out().join(&a.path).display(), a.sha256);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RunAll(c) => {
            let p = c.pipeline()?;
            let m = p.run_all()?;
            for s in &m.stages {
                println!("{}\t{} artifacts", s.stage, s.artifacts.len());
            }
            println!("manifest\t{}", p.out().join("manifest.json").display());
            Ok(())
        }
        Command::Design(c) => stage(&c, Stage::Design),
        Command::Simulate(c) => stage(&c, Stage::Simulate),
        Command::Quantiles(c) => stage(&c, Stage::Quantiles),
        Command::Basis(c) => stage(&c, Stage::Basis),
        Command::Fit(c) => stage(&c, Stage::Fit),
        Command::Calibrate(c) => stage(&c, Stage::Calibrate),
        Command::Predict(c) => stage(&c, Stage::Predict),
        Command::Holdout(c) => {
            let idx = c.holdout()?;
            let r = c.pipeline()?.holdout(idx.as_deref())?;
            println!("design_index\talpha\tcoverage\tmean_width");
            for row in &r.rows {
                println!("{}\t{}\t{:.3}\t{:.4}", row.design_index, row.alpha, row.coverage, row.mean_width);
            }
            let kind = if r.in_sample { "in-sample" } else { "holdout" };
            println!("mean {kind} coverage {:.3} at level {}", r.mean_coverage, r.level);
            Ok(())
        }
        Command::SyntheticTruth(c) => {
            let r = c.pipeline()?.synthetic_truth()?;
            for rep in &r.repetitions {
                for p in &rep.parameters {
                    let flag = if p.weakly_identified { "\tweak" } else { "" };
                    println!(
                        "rep {}\t{}\ttruth {:.3}\t[{:.3}, {:.3}]\t{}{flag}",
                        rep.index,
                        p.name,
                        p.truth,
                        p.lower,
                        p.upper,
                        if p.covered { "covered" } else { "missed" }
                    );
                }
            }
            println!(
                "{}: covered in {}/{} repetitions, mean interval width {:.3}",
                r.informative_input,
                r.informative_covered,
                r.repetitions.len(),
                r.informative_mean_width
            );
            println!(
                "band width at week {}: posterior {:.4}, prior {:.4}",
                r.predictive.final_observed_week, r.predictive.posterior_band_width, r.predictive.prior_band_width
            );
            println!("flat-likelihood control coverage {:?}", r.control.coverage);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
