use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rdlab::harness::{self, ExperimentConfig, HarnessError};
use rdlab::oracles::{self, Suite};
use rdlab::quant;

#[derive(Parser)]
#[command(
    name = "rdlab",
    about = "Optimizer lab for toy rate-distortion objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its CSV.
    Run { config: PathBuf },
    /// Run the Cartesian product of a grid over a base config.
    Sweep {
        config: PathBuf,
        /// JSON object mapping dotted config paths to value lists, or a path
        /// to a file holding one.
        #[arg(long)]
        grid: String,
    },
    /// Run oracle checks and print a pass/fail table.
    Oracle {
        #[arg(long)]
        suite: Option<Suite>,
    },
    /// W8A8 penalty for a two-layer run directory (or a sweep directory).
    Quantize { run_dir: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_ORACLE: u8 = 2;

fn fail(err: &HarnessError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(config: &Path) -> ExitCode {
    let result = ExperimentConfig::from_file(config).and_then(|cfg| {
        let records = harness::run_experiment(&cfg)?;
        Ok((cfg, records))
    });
    match result {
        Ok((cfg, records)) => {
            let last = records.last().expect("steps >= 1");
            println!(
                "{}: {} records, final loss {:e} -> {}",
                cfg.name,
                records.len(),
                last.loss_total,
                cfg.output_path.join("steps.csv").display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn sweep(config: &Path, grid: &str) -> ExitCode {
    let grid_text = if Path::new(grid).is_file() {
        match std::fs::read_to_string(grid) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: reading {grid}: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    } else {
        grid.to_string()
    };
    let cells = ExperimentConfig::from_file(config)
        .and_then(|base| Ok((base, harness::parse_grid(&grid_text)?)))
        .and_then(|(base, grid)| harness::sweep(&base, &grid));
    let cells = match cells {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let mut failed = 0;
    println!("cell,status,detail");
    for cell in &cells {
        let path = cell.output_path.display();
        match &cell.outcome {
            Ok(n) => println!("{path},ok,{n} records"),
            Err(e) => {
                failed += 1;
                println!("{path},failed,\"{}\"", e.to_string().replace('"', "'"));
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", cells.len());
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::SUCCESS
    }
}

fn oracle(suite: Option<Suite>) -> ExitCode {
    let suites = suite
        .map(|s| vec![s])
        .unwrap_or_else(|| Suite::ALL.to_vec());
    let mut writer = csv::Writer::from_writer(io::stdout());
    let mut all_pass = true;
    for s in suites {
        let rows = match oracles::run_suite(s) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: suite {}: {e}", s.name());
                return ExitCode::from(EXIT_ORACLE);
            }
        };
        for row in rows {
            all_pass &= row.pass;
            writer.serialize(&row).expect("stdout is writable");
        }
    }
    writer.flush().expect("stdout is writable");
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ORACLE)
    }
}

fn run_dirs(root: &Path) -> io::Result<Vec<PathBuf>> {
    if root.join("config.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn quantize(root: &Path) -> ExitCode {
    let dirs = match run_dirs(root) {
        Ok(d) if !d.is_empty() => d,
        Ok(_) => {
            eprintln!("error: no run directories under {}", root.display());
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {}: {e}", root.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "run,loss_fp,loss_q,penalty").expect("stdout is writable");
    for dir in dirs {
        let probe = harness::trained_two_layer(&dir)
            .and_then(|(net, eval)| Ok(quant::w8a8_probe(&net, &eval)?));
        match probe {
            Ok(p) => writeln!(
                out,
                "{},{},{},{}",
                dir.display(),
                p.loss_fp,
                p.loss_q,
                p.penalty
            )
            .expect("stdout is writable"),
            Err(e) => return fail(&e),
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Sweep { config, grid } => sweep(&config, &grid),
        Command::Oracle { suite } => oracle(suite),
        Command::Quantize { run_dir } => quantize(&run_dir),
    }
}
