use std::path::PathBuf;
use std::process::ExitCode;

use bidora::bilevel::Mode;
use bidora::runner::{
    cmd_analyze, cmd_compare, cmd_oracle_check, cmd_sweep_partition, cmd_train, library_estimator, parse_seeds,
    ExperimentSpec, Method, DEFAULT_RATIOS,
};
use bidora::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bidora", version, about = "Bi-level DoRA experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SpecArgs {
    /// TOML experiment spec; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the spec.
    #[arg(long)]
    seed: Option<String>,
    /// Output root, overriding the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ft, lora, dora, or bidora.
    #[arg(long)]
    method: Option<String>,
    /// full, no_retrain, xi_zero, no_reg, or retrain_magnitude.
    #[arg(long)]
    mode: Option<String>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(seeds) = &self.seed {
            spec.seeds = parse_seeds(seeds)?;
        }
        if let Some(out) = &self.out {
            spec.out = out.clone();
        }
        if let Some(m) = &self.method {
            spec.method = Method::parse(m)?;
        }
        if let Some(m) = &self.mode {
            spec.train.mode = Mode::parse(m)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one method over the spec's seeds.
    Train(SpecArgs),
    /// Train bidora at several train/validation split ratios.
    SweepPartition {
        #[command(flatten)]
        spec: SpecArgs,
        /// Comma-separated ratios in (0, 1].
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Weight-decomposition scatter, slopes, spectra, and gap tables of
    /// finished runs.
    Analyze {
        /// Run directories or parents of run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Runs whose gaps are compared against `--runs`, paired by seed.
        #[arg(long, num_args = 1..)]
        baseline: Vec<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Train two methods on the same seeds and compare their gaps.
    Compare {
        #[command(flatten)]
        spec: SpecArgs,
        /// Spec of the second method; defaults to the first spec.
        #[arg(long)]
        baseline_config: Option<PathBuf>,
        /// Method of the second spec.
        #[arg(long)]
        baseline_method: Option<String>,
    },
    /// Run the hypergradient oracles and gradient checks.
    OracleCheck,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            for dir in cmd_train(&args.load()?)? {
                println!("{}", dir.display());
            }
            Ok(true)
        }
        Command::SweepPartition { spec, ratios } => {
            let ratios = ratios.unwrap_or_else(|| DEFAULT_RATIOS.to_vec());
            let table = cmd_sweep_partition(&spec.load()?, &ratios)?;
            println!("ratio,seeds,mean_test_metric");
            for r in &table.summary {
                println!("{},{},{:.6}", r.ratio, r.seeds, r.mean_test_metric);
            }
            println!("tables in {}", table.dir.display());
            Ok(true)
        }
        Command::Analyze { runs, baseline, out } => {
            let report = cmd_analyze(&runs, &baseline, &out)?;
            for s in &report.slopes {
                match s.slope {
                    Some(k) => println!("slope {} k={k:.6} ({} points)", s.method, s.points),
                    None => println!("slope {} unavailable ({} points)", s.method, s.points),
                }
            }
            if let Some(c) = &report.comparison {
                println!(
                    "gap {:.6} vs baseline {:.6} over {} pairs",
                    c.mean_gap, c.mean_gap_baseline, c.pairs
                );
                if let Some(w) = &c.wilcoxon {
                    println!("p(baseline gap > gap) = {:.6}", w.p_greater);
                }
            }
            for e in &report.errors {
                eprintln!("error: {e}");
            }
            println!("outputs in {}", out.display());
            Ok(report.is_ok())
        }
        Command::Compare {
            spec,
            baseline_config,
            baseline_method,
        } => {
            let a = spec.load()?;
            let mut b = match &baseline_config {
                Some(path) => SpecArgs {
                    config: Some(path.clone()),
                    method: None,
                    mode: None,
                    ..spec.clone()
                }
                .load()?,
                None => a.clone(),
            };
            if let Some(m) = &baseline_method {
                b.method = Method::parse(m)?;
                if b.method != Method::Bidora {
                    b.train.mode = Mode::Full;
                }
            }
            b.validate()?;
            let report = cmd_compare(&a, &b, &a.out)?;
            println!(
                "seed,test_{0},test_{1},gap_{0},gap_{1}",
                report.method_a, report.method_b
            );
            for r in &report.rows {
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    r.seed, r.test_a, r.test_b, r.gap_a, r.gap_b
                );
            }
            println!(
                "mean gap {} {:.6}, {} {:.6}",
                report.method_a, report.mean_gap_a, report.method_b, report.mean_gap_b
            );
            match (&report.wilcoxon, &report.error) {
                (Some(w), _) => {
                    println!(
                        "p({} gap > {} gap) = {:.6}",
                        report.method_b, report.method_a, w.p_greater
                    );
                    Ok(true)
                }
                (None, e) => {
                    eprintln!("error: signed-rank test: {}", e.as_deref().unwrap_or("unavailable"));
                    Ok(false)
                }
            }
        }
        Command::OracleCheck => {
            let report = cmd_oracle_check(&library_estimator);
            print!("{}", report.render());
            Ok(report.passed())
        }
    }
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
