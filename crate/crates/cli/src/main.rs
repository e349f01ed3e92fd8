use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moga_cli::{cmd_balance, cmd_flops, cmd_groups, run_verify, CliError, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "moga", version, about = "Mixture-of-groups attention: reference runs and cost tables")]
struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for synthetic inputs (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every module's self-checks and write verify.json.
    Verify,
    /// Write the analytic compute table to flops.csv.
    Flops,
    /// Route a synthetic latent grid and write per-frame group maps.
    Groups,
    /// Train a router on the balancing loss and write balance.csv.
    Balance,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::Verify => verify(&cfg, &out, seed, cli.precision),
        Command::Flops => {
            let rows = cmd_flops(&cfg, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("flops.csv").display());
            Ok(())
        }
        Command::Groups => {
            let summary = match cli.precision {
                Precision::F32 => cmd_groups::<f32>(&cfg, &out, seed)?,
                Precision::F64 => cmd_groups::<f64>(&cfg, &out, seed)?,
            };
            println!("tokens: {}  group sizes: {:?}", summary.n_tokens, summary.group_sizes);
            println!("balance metric: {:.4}", summary.balance_metric);
            if let Some(cost) = &summary.cost {
                println!("sparsity: {:.4} (moga only {:.4})", cost.sparsity, cost.sparsity_moga);
            }
            println!("wrote {} files under {}", summary.files.len(), out.display());
            Ok(())
        }
        Command::Balance => {
            let trace = match cli.precision {
                Precision::F32 => cmd_balance::<f32>(&cfg, &out, seed)?,
                Precision::F64 => cmd_balance::<f64>(&cfg, &out, seed)?,
            };
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("balance metric: {:.4} -> {:.4} over {} steps", first.balance_metric, last.balance_metric, trace.len());
            }
            println!("wrote {}", out.join("balance.csv").display());
            Ok(())
        }
    }
}

fn verify(cfg: &RunConfig, out: &Path, seed: u64, precision: Precision) -> Result<(), CliError> {
    let report = match precision {
        Precision::F32 => run_verify::<f32>(cfg, seed),
        Precision::F64 => run_verify::<f64>(cfg, seed),
    };
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        if c.detail.is_empty() {
            println!("[{tag}] {:<16} {}", c.module.name(), c.name);
        } else {
            println!("[{tag}] {:<16} {} ({})", c.module.name(), c.name, c.detail);
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Io { path: out.to_path_buf(), source: e })?;
    let path = out.join("verify.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
    match report.failures() {
        0 => Ok(()),
        n => Err(CliError::VerifyFailed(n)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
