//! Command-line harness: `run`, `se`, `sweep`, `cumulants`.
//!
//! Exit codes: 0 on success, 1 on validation/configuration errors, 2 on
//! numerical failures. The worker pool honors `RAYON_NUM_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rigamp::ensemble::SpectrumSpec;
use rigamp::experiment::{
    cmd_cumulants, cmd_run, cmd_se, cmd_sweep, manifest_path_for, rows_to_csv, sweep_to_csv,
    write_outputs, ExperimentConfig, MatrixSource, Timings,
};
use rigamp::Error;

#[derive(Parser)]
#[command(name = "rigamp", version, about = "Multi-layer AMP for rotationally invariant designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run state evolution plus independent trials and write a results CSV.
    Run(RunArgs),
    /// Run state evolution only and write its predictions as CSV.
    Se(SeArgs),
    /// Sweep the first layer's aspect ratio; report final-iteration overlaps.
    Sweep(SweepArgs),
    /// Estimate spectral moments and free cumulants of a design matrix.
    Cumulants(CumulantArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the number of iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Output CSV path (defaults to the config's `output`, then results.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated aspect ratios for the first layer, e.g. 0.7,1.0,1.3.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CumulantArgs {
    /// Dense matrix as CSV (rows = output dimension).
    #[arg(long, conflicts_with_all = ["spec", "rows", "cols"])]
    matrix: Option<PathBuf>,
    /// Spectrum name: gaussian or beta.
    #[arg(long, requires = "rows", requires = "cols")]
    spec: Option<String>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Highest half-order K: reports m_2..m_2K and kappa_2..kappa_2K.
    #[arg(long)]
    order: usize,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table to a file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems are validation errors
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let mut config = ExperimentConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(trials) = args.trials {
                config.trials = trials;
            }
            if let Some(iters) = args.iters {
                config.iterations = iters;
            }
            config.validate()?;
            let out = args
                .out
                .or_else(|| config.output.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("results.csv"));
            let (status, artifacts) = cmd_run(&config);
            let err_text = status.as_ref().err().map(|e| e.to_string());
            write_outputs(
                &rows_to_csv(&artifacts.rows),
                &out,
                &config,
                &artifacts.config_hash,
                artifacts.truncated,
                err_text,
                &artifacts.timings,
            )?;
            status?;
            println!(
                "wrote {} ({} rows) and {}",
                out.display(),
                artifacts.rows.len(),
                manifest_path_for(&out).display()
            );
            Ok(())
        }
        Command::Se(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let artifacts = cmd_se(&config)?;
            write_outputs(
                &rows_to_csv(&artifacts.rows),
                &args.out,
                &config,
                &artifacts.config_hash,
                false,
                None,
                &artifacts.timings,
            )?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Sweep(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let grid: Result<Vec<f64>, Error> = args
                .grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad grid entry {:?}", s.trim())))
                })
                .collect();
            let rows = cmd_sweep(&config, &grid?)?;
            write_outputs(
                &sweep_to_csv(&rows),
                &args.out,
                &config,
                &config.hash(),
                false,
                None,
                &Timings::default(),
            )?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Cumulants(args) => {
            let source = match (&args.matrix, &args.spec) {
                (Some(path), None) => MatrixSource::CsvFile(path.clone()),
                (None, Some(name)) => {
                    let spec = match name.as_str() {
                        "gaussian" => SpectrumSpec::IidGaussian,
                        "beta" => SpectrumSpec::ScaledBeta,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown spectrum {other:?}; use gaussian or beta"
                            )))
                        }
                    };
                    MatrixSource::Spec {
                        spec,
                        rows: args.rows.unwrap(),
                        cols: args.cols.unwrap(),
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "provide either --matrix CSV or --spec NAME --rows N --cols M".into(),
                    ))
                }
            };
            let report = cmd_cumulants(&source, args.order, args.probes, args.seed)?;
            let table = report.render();
            print!("{table}");
            if let Some(out) = args.out {
                std::fs::write(out, table)?;
            }
            Ok(())
        }
    }
}
