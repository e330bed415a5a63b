//! `quantkit` command line.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analyzer::{
    profile_table, read_metrics_csv, write_metrics_csv, write_plot_json, WallDetectorConfig,
    WallThreshold,
};
use crate::error::{Error, Result};
use crate::kernels::self_check;
use crate::planner::{apply_plan, build_plan, sweep_group_size, PlanConfig, QuantPlan, Selection};
use crate::quantizer::QuantParams;
use crate::report::{aggregate_accuracy, read_tasks_csv};
use crate::store::{to_sorted_json, write_atomic, FpModel, LayerKind};
use crate::synth::{generate, SynthConfig};

pub const THREADS_ENV: &str = "QUANTKIT_THREADS";

/// Group size used by `plan` when none is given; 1024 is the full-scale choice.
pub const DESK_GROUP_SIZE: usize = 16;

const KERNEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "quantkit", version, about = "Symmetric integer PTQ toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic model with outlier walls.
    Synth(SynthArgs),
    /// Profile every layer to a metrics CSV (and optional plot JSON).
    Analyze(AnalyzeArgs),
    /// Build a mixed-grouping plan from a metrics CSV.
    Plan(PlanArgs),
    /// Quantize a model under a plan.
    Quantize(QuantizeArgs),
    /// RMSE of the selected layers across group sizes.
    Sweep(SweepArgs),
    /// Compare both matmul kernels against the fp64 reference.
    CheckMatmul(CheckArgs),
    /// Plain and weighted accuracy from a `task,accuracy,questions` CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    kv_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_std: Option<f32>,
    #[arg(long, value_delimiter = ',')]
    wall_blocks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    wall_kinds: Option<Vec<LayerKind>>,
    #[arg(long)]
    wall_columns: Option<usize>,
    /// `lo,hi`
    #[arg(long, value_delimiter = ',', num_args = 2)]
    wall_magnitude: Option<Vec<f32>>,
    /// Draw wall columns independently per layer instead of per block.
    #[arg(long)]
    independent_walls: bool,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<LayerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct WallArgs {
    /// Relative wall threshold, in multiples of the tensor's robust scale.
    #[arg(long, default_value_t = 20.0, conflicts_with = "wall_threshold")]
    wall_kappa: f64,
    /// Absolute wall threshold.
    #[arg(long)]
    wall_threshold: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    wall_row_fraction: f64,
}

impl WallArgs {
    fn config(&self) -> WallDetectorConfig {
        WallDetectorConfig {
            threshold: match self.wall_threshold {
                Some(t) => WallThreshold::Absolute(t),
                None => WallThreshold::Relative(self.wall_kappa),
            },
            row_fraction: self.wall_row_fraction,
        }
    }
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plot data (layer axis, rmse and max_abs series).
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Extra per-group RMSE columns.
    #[arg(long = "group-size", value_delimiter = ',')]
    group_sizes: Vec<usize>,
    #[command(flatten)]
    walls: WallArgs,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
struct SelectionArgs {
    #[arg(long)]
    max_abs_threshold: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
}

impl SelectionArgs {
    fn selection(&self) -> Selection {
        if let Some(k) = self.top_k {
            Selection::TopK(k)
        } else if let Some(names) = &self.layers {
            Selection::Explicit(names.clone())
        } else {
            Selection::MaxAbsThreshold(
                self.max_abs_threshold.unwrap_or(crate::planner::DEFAULT_MAX_ABS_THRESHOLD),
            )
        }
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    metrics: PathBuf,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, default_value_t = DESK_GROUP_SIZE)]
    group_size: usize,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    tasks: PathBuf,
    /// Summary JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    if n > 0 {
        // fails only if the global pool already exists, which keeps the earlier setting
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Analyze(a) => analyze(a),
        Command::Plan(a) => plan(a),
        Command::Quantize(a) => quantize(a),
        Command::Sweep(a) => sweep(a),
        Command::CheckMatmul(a) => check_matmul(a),
        Command::Report(a) => report(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if a.kv_dim.is_some() {
        cfg.kv_dim = a.kv_dim;
    }
    if a.ffn_dim.is_some() {
        cfg.ffn_dim = a.ffn_dim;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.base_std {
        cfg.base_std = v;
    }
    if let Some(v) = a.wall_blocks {
        cfg.wall_blocks = v;
    }
    if let Some(v) = a.wall_kinds {
        cfg.wall_kinds = v;
    }
    if let Some(v) = a.wall_columns {
        cfg.wall_columns = v;
    }
    if let Some(v) = a.wall_magnitude {
        cfg.wall_magnitude = [v[0], v[1]];
    }
    if a.independent_walls {
        cfg.shared_wall_columns = false;
    }
    let model = generate(&cfg)?;
    model.save(&a.out)?;
    println!(
        "wrote {} layers ({} blocks) to {}",
        model.layers.len(),
        model.blocks,
        a.out.display()
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let params = QuantParams::new(a.bits)?;
    let model = FpModel::load(&a.model)?;
    let rows = profile_table(&model, params, a.walls.config(), &a.group_sizes)?;
    write_metrics_csv(&a.out, &rows)?;
    if let Some(json) = &a.json {
        write_plot_json(json, &rows)?;
    }
    let walls = rows.iter().filter(|r| !r.metrics.wall_columns.is_empty()).count();
    println!(
        "profiled {} layers ({walls} with walls) to {}",
        rows.len(),
        a.out.display()
    );
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let params = QuantParams::new(a.bits)?;
    let metrics: Vec<_> = read_metrics_csv(&a.metrics, params)?
        .into_iter()
        .map(|r| r.metrics)
        .collect();
    let cfg = PlanConfig {
        selection: a.selection.selection(),
        group_size: a.group_size,
        params,
    };
    let plan = build_plan(&metrics, &cfg)?;
    plan.save(&a.out)?;
    println!(
        "{} of {} layers per-group, per_group_fraction {:.4}",
        plan.per_group_layers().count(),
        plan.assignments.len(),
        plan.per_group_fraction
    );
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = FpModel::load(&a.model)?;
    let plan = QuantPlan::load(&a.plan)?;
    let quantized = apply_plan(&model, &plan)?;
    quantized.save(&a.out)?;
    println!("wrote {} quantized layers to {}", quantized.layers.len(), a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let params = QuantParams::new(a.bits)?;
    let model = FpModel::load(&a.model)?;
    let table = sweep_group_size(&model, &a.selection.selection(), &a.sizes, params)?;
    let csv = table.to_csv()?;
    match &a.out {
        Some(path) => write_atomic(path, &csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn check_matmul(a: CheckArgs) -> Result<()> {
    let check = self_check(a.seed, a.instances)?;
    println!("instances: {}", check.instances);
    println!("max relative deviation (per-channel): {:.3e}", check.max_rel_per_channel);
    println!("max relative deviation (per-group): {:.3e}", check.max_rel_per_group);
    println!("max relative deviation: {:.3e}", check.max_rel());
    println!("per-group g=M identical to per-channel: {}", check.degenerate_group_identical);
    if check.max_rel() > KERNEL_TOLERANCE || !check.degenerate_group_identical {
        return Err(Error::validation(format!(
            "kernel deviation {:.3e} exceeds {KERNEL_TOLERANCE:e} or degeneracy broken",
            check.max_rel()
        )));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let summary = aggregate_accuracy(&read_tasks_csv(&a.tasks)?)?;
    println!("tasks: {}", summary.tasks.len());
    println!("avg: {:.4}", summary.avg);
    println!("wt_avg: {:.4}", summary.wt_avg);
    if let Some(out) = &a.out {
        write_atomic(out, &to_sorted_json(&summary)?)?;
    }
    Ok(())
}
