use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mtcool::data::fetch::{fetch_mnist, DEFAULT_MIRROR};
use mtcool::harness::{self, plot, ExperimentConfig};
use mtcool::verify;

#[derive(Parser)]
#[command(
    name = "mtcool",
    version,
    about = "Cooperative multi-task training with flat-minima search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and repeat of an experiment config.
    Run {
        config: PathBuf,
        /// Override the number of concurrent repeat slots.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render SVG plots for a run directory.
    Plot { dir: PathBuf },
    /// Download the MNIST IDX files and verify their checksums.
    FetchMnist {
        dir: PathBuf,
        #[arg(long, default_value = DEFAULT_MIRROR)]
        mirror: String,
    },
    /// Run the gradient and landscape oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

/// Exit status for a failure: 1 for bad input, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use mtcool::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::Config { .. }
            | E::Csv { .. }
            | E::Idx(_)
            | E::InvalidInput { .. }
            | E::Checkpoint(_),
        ) => 1,
        _ if err.downcast_ref::<ValidationFailed>().is_some() => 1,
        _ => 2,
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0} check(s) failed")]
struct ValidationFailed(usize);

fn run(config: PathBuf, workers: Option<usize>, output: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    cfg.validate()?;
    let start = Instant::now();
    let log = |line: &str| eprintln!("[{:>7.1}s] {line}", start.elapsed().as_secs_f64());
    let summary = harness::run_experiment(&cfg, Some(&log))?;
    println!(
        "{:<8} {:<18} {:<12} {:>4} {:>3} {:>12} {:>12}",
        "lambda", "metric", "method", "task", "n", "mean", "std"
    );
    for r in &summary.rows {
        let lambda = r
            .lambda
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".into());
        println!(
            "{lambda:<8} {:<18} {:<12} {:>4} {:>3} {:>12.6} {:>12.6}",
            r.metric,
            r.method.name(),
            r.task,
            r.values.len(),
            r.mean,
            r.std
        );
    }
    for c in &summary.comparisons {
        println!(
            "{} vs {} ({}, task {}): mean diff {:+.3e}, wins {}/{}, p(>) = {:.4}",
            c.a, c.b, c.metric, c.task, c.test.mean_diff, c.test.wins, c.test.n, c.test.p_greater
        );
    }
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn verify_all(seed: u64, cases: usize) -> Result<()> {
    let mut failed = 0;
    let t = Instant::now();
    let suite = verify::gradient_check_suite(seed, cases)?;
    let bad: Vec<_> = suite
        .iter()
        .filter(|c| c.rel_error.is_nan() || c.rel_error >= 1e-5)
        .collect();
    let worst = suite.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    println!(
        "[{}] gradient check: {}/{} cases below 1e-5 (worst {worst:.2e}) in {:.2}s",
        if bad.is_empty() { "PASS" } else { "FAIL" },
        suite.len() - bad.len(),
        suite.len(),
        t.elapsed().as_secs_f64()
    );
    for c in &bad {
        println!("       {}: {:.3e}", c.name, c.rel_error);
    }
    failed += usize::from(!bad.is_empty());

    let t = Instant::now();
    let spec = verify::LandscapeSpec::flat_vs_sharp()?;
    let oracle = verify::grid_oracle(&spec, spec.resolution)?;
    let flat = &spec.wells[0].center;
    let dist = oracle
        .argmin
        .iter()
        .zip(flat)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let ok = dist <= spec.bound && !oracle.is_tie() && oracle.raw_argmin_set.len() == 2;
    println!(
        "[{}] landscape oracle: smoothed argmin {:?} is {dist:.3} from the flat well, raw minima {} in {:.2}s",
        if ok { "PASS" } else { "FAIL" },
        oracle.argmin,
        oracle.raw_argmin_set.len(),
        t.elapsed().as_secs_f64()
    );
    failed += usize::from(!ok);

    let sym = verify::grid_oracle(&verify::LandscapeSpec::symmetric_double_well(), 81)?;
    println!(
        "[{}] symmetric double well reported as a tie",
        if sym.is_tie() { "PASS" } else { "FAIL" }
    );
    failed += usize::from(!sym.is_tie());

    if failed > 0 {
        return Err(ValidationFailed(failed).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            workers,
            output,
        } => run(config, workers, output),
        Command::Plot { dir } => plot::emit_plots(&dir)
            .map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
            .with_context(|| format!("plotting {}", dir.display())),
        Command::FetchMnist { dir, mirror } => fetch_mnist(&dir, &mirror)
            .map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
            .map_err(Into::into),
        Command::Verify { seed, cases } => verify_all(seed, cases),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
