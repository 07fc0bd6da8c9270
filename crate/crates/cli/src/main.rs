use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swattn::{AttentionConfig, Precision};
use swattn_cli::{
    exit, gen_fixtures, load_config, parse_list, quality_config, run_bench, run_correctness, run_selection_quality,
    BenchMode, BenchOptions, CliError, CliResult, Perturbation, QualityOptions,
};

#[derive(Parser)]
#[command(name = "swattn", version, about = "Dense/sparse switchable attention: checks, benchmarks and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Base seed for every generated tensor.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config with the short field names (n, d_h, h_q, B, l_C1, N_local, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated bench modes.
    #[arg(long, global = true)]
    modes: Option<String>,
    /// Comma-separated sequence lengths.
    #[arg(long, global = true)]
    sizes: Option<String>,
    /// Storage precision.
    #[arg(long, global = true, default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cross-oracle check; exit 1 on any tolerance breach.
    Check {
        /// Test hook: shift the fast-path result of one check, `name=delta`.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
    /// Counted-work and wall-clock benchmark; writes bench.csv and bench.json.
    Bench {
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Trailing query rows per context.
        #[arg(long, default_value_t = 16)]
        query_rows: usize,
    },
    /// Attention-mass recall of exact, approximate and random selection.
    Quality {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 32)]
        query_rows: usize,
    },
    /// Emit golden tensors and selections.
    GenFixtures,
}

fn config_or(cli: &Cli, default: AttentionConfig) -> CliResult<AttentionConfig> {
    match &cli.config {
        Some(path) => load_config(path),
        None => Ok(default),
    }
}

fn sizes_or(cli: &Cli, default: &[usize]) -> CliResult<Vec<usize>> {
    match &cli.sizes {
        Some(s) => parse_list(s),
        None => Ok(default.to_vec()),
    }
}

/// Print a line to stdout; a closed pipe (`swattn ... | head`) is not an error.
fn emit(text: &str) -> CliResult<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: &Cli) -> CliResult<i32> {
    match &cli.command {
        Command::Check { perturb } => {
            let perturb = perturb.as_deref().map(str::parse::<Perturbation>).transpose()?;
            let sizes = sizes_or(cli, &[1, 2, 63, 64, 65, 257])?;
            let report = run_correctness(cli.seed, &sizes, perturb.as_ref())?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for c in report.failures() {
                eprintln!("FAIL {} n={:?}: {:e} > {:e}", c.name, c.n, c.max_error, c.tolerance);
            }
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    report.write(&dir.join("check.json"))?;
                }
                None => emit(&serde_json::to_string_pretty(&report)?)?,
            }
            Ok(report.exit_code())
        }
        Command::Bench { repetitions, query_rows } => {
            let cfg = config_or(cli, AttentionConfig::default())?;
            let sizes = sizes_or(cli, &[1024, 4096, 16384, 32768])?;
            let modes = match &cli.modes {
                Some(m) => parse_list::<BenchMode>(m)?,
                None => BenchMode::ALL.to_vec(),
            };
            let opts = BenchOptions {
                query_rows: *query_rows,
                repetitions: *repetitions,
                seed: cli.seed,
                precision: cli.precision,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("bench-out"));
            let report = run_bench(&cfg, &sizes, &modes, Some(&out), &opts)?;
            emit(String::from_utf8_lossy(&report.csv()?).trim_end())?;
            Ok(exit::SUCCESS)
        }
        Command::Quality { seeds, query_rows } => {
            let cfg = config_or(cli, quality_config())?;
            let n = sizes_or(cli, &[cfg.seq_len])?.first().copied().unwrap_or(cfg.seq_len);
            let seed_list: Vec<u64> = (0..*seeds).map(|i| cli.seed.wrapping_add(i)).collect();
            let opts = QualityOptions { query_rows: *query_rows };
            let report = run_selection_quality(&cfg, n, &seed_list, cli.out.as_deref(), &opts)?;
            if cli.out.is_none() {
                emit(&serde_json::to_string_pretty(&report)?)?;
            }
            Ok(exit::SUCCESS)
        }
        Command::GenFixtures => {
            let cfg = config_or(cli, AttentionConfig::compact())?;
            let sizes = sizes_or(cli, &[64, 257])?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fixtures"));
            let manifest = gen_fixtures(&cfg, cli.seed, &sizes, cli.precision, &out)?;
            emit(&format!("wrote {} files to {}", manifest.files.len() + 1, out.display()))?;
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::UnstableCounts { .. } => exit::TOLERANCE_BREACH,
                _ => exit::USAGE,
            }
        }
    };
    ExitCode::from(code as u8)
}
