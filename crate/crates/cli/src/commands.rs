use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use moga_core::cost::{count_pairs_exact, flops_curve, FlopsRow};
use moga_core::routing::{balance_stats, train_balance, BalanceStep};
use moga_core::stga::build_static_groups;
use moga_core::{synth, Matrix, Real};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Router weights use a seed stream separate from the features.
fn router_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

/// Writes `flops.csv` with columns `duration_s,M,variant,pairs,pflops`.
pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> Result<Vec<FlopsRow>, CliError> {
    let c = &cfg.cost;
    let rows = flops_curve(&cfg.flops_curve_config(), &c.durations, &c.groups)?;
    ensure_dir(out)?;
    let path = out.join("flops.csv");
    let mut w = csv_writer(&path)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupsSummary {
    pub n_tokens: usize,
    pub group_sizes: Vec<usize>,
    pub balance_metric: f64,
    /// Present when the sequence is small enough for exact counting.
    pub cost: Option<moga_core::CostReport>,
    pub files: Vec<PathBuf>,
}

/// Routes synthetic features on the configured grid and writes one `h×w`
/// group-id map per latent frame plus a flat `assignment.txt`. For small
/// grids the exact attended-pair report goes to `cost.csv` and `cost.json`.
pub fn cmd_groups<T: Real>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<GroupsSummary, CliError> {
    let grid = cfg.latent_grid();
    let x: Matrix<T> = synth::structured_features(&grid, cfg.router.feature_rank, seed);
    let router = cfg.build_router::<T>(cfg.router.init, grid.d_model, cfg.attention.groups, router_seed(seed));
    let routing = router.route(&x)?;
    let assignment = routing.assignment();

    let dir = out.join("groups");
    ensure_dir(&dir)?;
    let mut files = Vec::with_capacity(grid.t + 3);
    for frame in 0..grid.t {
        let path = dir.join(format!("frame_{frame:03}.txt"));
        let mut text = String::new();
        let base = frame * grid.frame_tokens();
        for r in 0..grid.h {
            let line: Vec<String> = (0..grid.w).map(|c| assignment[base + r * grid.w + c].to_string()).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        files.push(path);
    }
    let path = out.join("assignment.txt");
    let mut text = String::with_capacity(assignment.len() * 3);
    for g in assignment {
        text.push_str(&g.to_string());
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    files.push(path);

    let statics = build_static_groups(&grid, &cfg.attention.statics)?;
    let n = grid.n_tokens();
    let cost = if n <= cfg.cost.exact_bound {
        let report = count_pairs_exact(Some(&routing), &statics, n, cfg.cost.exact_bound)?
            .with_flops(&cfg.flops_model());
        let csv_path = out.join("cost.csv");
        let mut w = csv_writer(&csv_path)?;
        w.write_record(["variant", "pairs", "sparsity", "flops"]).map_err(csv_err(&csv_path))?;
        for (variant, pairs, sparsity, flops) in report.rows() {
            let flops = flops.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([variant, pairs.to_string(), sparsity.to_string(), flops]).map_err(csv_err(&csv_path))?;
        }
        w.flush().map_err(io_err(&csv_path))?;
        files.push(csv_path);
        let json_path = out.join("cost.json");
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        fs::write(&json_path, json).map_err(io_err(&json_path))?;
        files.push(json_path);
        Some(report)
    } else {
        None
    };

    Ok(GroupsSummary {
        n_tokens: n,
        group_sizes: routing.group_sizes(),
        balance_metric: balance_stats(&routing, cfg.training.alpha).balance_metric,
        cost,
        files,
    })
}

/// Trains a router on the balancing loss alone and writes `balance.csv`
/// (`step,balance_metric,loss`; one row per step, header only for 0 steps).
pub fn cmd_balance<T: Real>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<Vec<BalanceStep>, CliError> {
    let grid = cfg.latent_grid();
    let t = &cfg.training;
    let x: Matrix<T> = synth::structured_features(&grid, cfg.router.feature_rank, seed);
    let mut router = cfg.build_router::<T>(t.init, grid.d_model, cfg.attention.groups, router_seed(seed));
    let trace = train_balance(&mut router, &x, t.steps, t.lr, t.alpha)?;
    ensure_dir(out)?;
    let path = out.join("balance.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = String::from("step,balance_metric,loss\n");
    for s in &trace {
        body.push_str(&format!("{},{},{}\n", s.step, s.balance_metric, s.loss));
    }
    w.write_all(body.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(trace)
}
