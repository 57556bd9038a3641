use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpsvrg::harness::{
    self, ExperimentSpec, HarnessError, SynthSpec, VerifyLevel, VerifyReport,
};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "dpsvrg", version, about = "Decentralized proximal SVRG simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write CSV curves plus summary.json.
    Run {
        spec: PathBuf,
        /// Write here instead of the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant battery.
    Verify {
        #[arg(long, default_value = "fast")]
        level: Level,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic logistic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        sparsity: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "csv")]
        format: Format,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the planted weights, one per line.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Solve a spec's problem centrally for each λ and print the optima as JSON.
    Reference { spec: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Fast,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Libsvm,
}

fn write(path: &Path, body: &str) -> Result<(), HarnessError> {
    fs::write(path, body).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn print_report(report: &VerifyReport) {
    for c in &report.checks {
        println!(
            "{} {:<30} {:>7} trials  {:.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.trials,
            c.seconds,
            c.detail
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "{}: {} checks, {failed} failed, {:.1}s",
        report.level,
        report.checks.len(),
        report.seconds
    );
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.cmd {
        Command::Run { spec, out } => {
            let spec = ExperimentSpec::from_file(&spec)?;
            let dir = out.unwrap_or_else(|| spec.resolved_output_dir());
            let summary = harness::run_experiment_in(&spec, &dir)?;
            for r in &summary.references {
                println!("reference lambda={} f_star={:e} nnz={}", r.lambda, r.f_star, r.nonzeros);
            }
            for r in &summary.runs {
                println!(
                    "{} lambda={} b={} final_gap={:e} rho_hat={} -> {}",
                    r.algo,
                    r.lambda,
                    r.b,
                    r.final_gap,
                    r.rho_hat.map_or("-".into(), |v| format!("{v:.4}")),
                    r.csv
                );
            }
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { level, json } => {
            let report = harness::verify_suite(match level {
                Level::Fast => VerifyLevel::Fast,
                Level::Full => VerifyLevel::Full,
            });
            print_report(&report);
            if let Some(path) = json {
                write(&path, &serde_json::to_string_pretty(&report)?)?;
            }
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            })
        }
        Command::Synth {
            n,
            d,
            sparsity,
            noise,
            seed,
            format,
            output,
            truth,
        } => {
            let spec = SynthSpec {
                n,
                d,
                sparsity,
                noise,
                seed,
            };
            let (ds, w) = harness::synth_with_truth(spec, 1)?;
            let body = match format {
                Format::Csv => harness::dataset_to_csv(&ds),
                Format::Libsvm => harness::dataset_to_libsvm(&ds),
            };
            write(&output, &body)?;
            if let Some(path) = truth {
                let lines: String = w.iter().map(|v| format!("{v}\n")).collect();
                write(&path, &lines)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Reference { spec } => {
            let spec = ExperimentSpec::from_file(&spec)?;
            let base = spec.load()?;
            let mut out = Vec::new();
            for &lambda in &spec.lambdas {
                let obj = base.with_regularizer(dpsvrg::Regularizer::l1(lambda));
                let sol = dpsvrg::run_reference(&obj, spec.reference_tol)?;
                out.push(serde_json::json!({
                    "lambda": lambda,
                    "f_star": sol.f_star,
                    "nonzeros": sol.x.iter().filter(|v| **v != 0.0).count(),
                    "iterations": sol.iterations,
                    "grad_map_norm": sol.grad_map_norm,
                    "x_star": sol.x,
                }));
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
    }
}
