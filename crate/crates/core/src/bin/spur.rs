use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spur::artifacts::{analyze_dir, viz_dir, write_run_dir};
use spur::config::load_config;
use spur::harness::{sweep_compare, train, MethodSpec};
use spur::models::Role;
use spur::SpurError;

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "spur", version, about = "Magnitude pruning with deviance regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the density x method x seed cross product and write `table.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated final densities, e.g. `0.30,0.10,0.05`.
        #[arg(long)]
        densities: String,
        /// Comma-separated methods: `imp`, `imp_spur`, `imp_spur@100`.
        #[arg(long)]
        methods: String,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `stats.csv` for a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Export one mask as PBM and its masked magnitudes as PGM.
    Viz {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        role: String,
    },
}

fn fail(err: &SpurError) -> ExitCode {
    eprintln!("spur: {err}");
    match err {
        SpurError::Aborted { .. } => ExitCode::from(EXIT_ABORTED),
        _ => ExitCode::from(EXIT_CONFIG),
    }
}

fn parse_list<T: std::str::FromStr>(what: &str, raw: &str) -> Result<Vec<T>, SpurError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|tok| {
            tok.parse()
                .map_err(|_| SpurError::Config(format!("cannot parse {what} `{tok}`")))
        })
        .collect()
}

fn sweep_threads() -> Result<usize, SpurError> {
    match std::env::var("SPUR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(SpurError::Config(format!(
                "SPUR_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn cmd_train(config: &Path, out: &Path) -> Result<(), SpurError> {
    let cfg = load_config(config)?;
    let data = cfg.dataset()?;
    let outcome = train(&cfg, &data)?;
    write_run_dir(out, &cfg, &outcome)?;
    if let Some(acc) = outcome.record.final_accuracy() {
        println!("final test accuracy {acc}");
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    densities: &str,
    methods: &str,
    seeds: &str,
    out: &Path,
) -> Result<bool, SpurError> {
    let cfg = load_config(config)?;
    let densities: Vec<f64> = parse_list("density", densities)?;
    let methods = methods
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<MethodSpec>)
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = parse_list("seed", seeds)?;
    let threads = sweep_threads()?;
    std::fs::create_dir_all(out)?;
    let outcome = sweep_compare(&cfg, &densities, &methods, &seeds, threads, Some(out))?;
    let csv = outcome.to_csv();
    std::fs::write(out.join("table.csv"), &csv)?;
    print!("{csv}");
    for run in &outcome.runs {
        if let Err(e) = &run.result {
            eprintln!("spur: run {} failed: {e}", run.dir_name());
        }
    }
    Ok(!outcome.any_failed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out).map(|_| true),
        Command::Sweep {
            config,
            densities,
            methods,
            seeds,
            out,
        } => cmd_sweep(config, densities, methods, seeds, out),
        Command::Analyze { run } => analyze_dir(run).map(|csv| {
            print!("{csv}");
            true
        }),
        Command::Viz { run, layer, role } => role
            .parse::<Role>()
            .and_then(|role| viz_dir(run, *layer, role))
            .map(|(pbm, pgm)| {
                println!("{}", pbm.display());
                println!("{}", pgm.display());
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => fail(&e),
    }
}
