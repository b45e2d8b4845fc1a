//! Command-line front end. Exit codes: 0 ok, 1 internal error or failed
//! check, 2 invalid input, 3 simulated deadlock.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::model::{validate_shape, HardwareSpec, ModelError, MoEShape, TuneConfig};
use crate::perf::{predict_latency, ModelOptions, Stage1Scaling};
use crate::precision::{split_batch_experiment, CombineOrder, FusedCombine, Format, PrecisionReport};
use crate::sim::{emit_trace, run_layer_sim, ScheduleOrder, SimError, SimParams};
use crate::token_map::{oracle, random_mapping_instance};
use crate::traffic::{distinct_rank_distribution, distinct_rank_distribution_without_replacement, render_table, volume_expected};
use crate::tune::{enumerate_space, search, tuned_lookup, SearchOptions, TieBreak, TuneCache, TuneError, TuneResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DEADLOCK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "eplab", version, about = "Expert-parallel MoE layer tuner, simulator and precision lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search the worker configuration space for the lowest predicted latency.
    Tune(TuneArgs),
    /// Run both kernel simulations for one configuration.
    Simulate(SimulateArgs),
    /// Print the latency model breakdown for one configuration.
    Predict(PredictArgs),
    /// Distribution of distinct destination ranks per token.
    Traffic(TrafficArgs),
    /// Check the token map against the gather-and-sort oracle.
    VerifyMapping(VerifyArgs),
    /// Bitwise comparison of fused and sequential reductions.
    Precision(PrecisionArgs),
}

#[derive(Debug, Args)]
pub struct Problem {
    /// Hardware TOML file.
    pub hardware: PathBuf,
    /// Layer shape TOML file.
    pub shape: PathBuf,
    /// Tokens per rank, overriding the shape file.
    #[arg(long)]
    pub tokens: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Print the machine-readable report instead of text.
    #[arg(long)]
    pub json: bool,
    /// Also write the machine-readable report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Stage1Arg {
    AsPrinted,
    Redistributed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TieArg {
    Canonical,
    LexMin,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Stage-1 tail scaling of the latency model.
    #[arg(long, value_enum, default_value = "as-printed")]
    pub stage1: Stage1Arg,
    /// Rule for equal predicted latencies.
    #[arg(long, value_enum, default_value = "canonical")]
    pub tie_break: TieArg,
    /// Search threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ModelArgs {
    fn options(&self) -> SearchOptions {
        SearchOptions {
            threads: self.threads,
            model: ModelOptions {
                stage1: match self.stage1 {
                    Stage1Arg::AsPrinted => Stage1Scaling::AsPrinted,
                    Stage1Arg::Redistributed => Stage1Scaling::Redistributed,
                },
                ..Default::default()
            },
            tie_break: match self.tie_break {
                TieArg::Canonical => TieBreak::Canonical,
                TieArg::LexMin => TieBreak::LexMin,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub problem: Problem,
    /// Memoization file, read if present and rewritten afterwards.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    Priority,
    Naive,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub problem: Problem,
    /// Configuration as n_disp,n_relay,n_comb,n_red,w.
    #[arg(long, conflicts_with = "auto", required_unless_present = "auto")]
    pub config: Option<TuneConfig>,
    /// Tune first and simulate the best configuration.
    #[arg(long)]
    pub auto: bool,
    /// Routing seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Send schedule order.
    #[arg(long, value_enum, default_value = "priority")]
    pub order: OrderArg,
    /// Chrome trace of the dispatch kernel; the combine trace goes next to it.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub problem: Problem,
    #[arg(long)]
    pub config: TuneConfig,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct TrafficArgs {
    #[arg(long, default_value_t = 8)]
    pub world: u32,
    #[arg(long, default_value_t = 8)]
    pub topk: u32,
    /// Experts are drawn without replacement from this many.
    #[arg(long)]
    pub n_exp: Option<u32>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionMode {
    /// Scoreboard-ordered combine from the simulator.
    Fused,
    /// Combine summing replicas in a random order.
    Permuted,
    /// Combine summing replicas as they land.
    Arrival,
    /// Token-axis sum cut into two micro-batches.
    Split,
}

#[derive(Debug, Args)]
pub struct PrecisionArgs {
    #[command(flatten)]
    pub problem: Problem,
    #[arg(long, default_value = "bf16")]
    pub format: Format,
    #[arg(long, value_enum, default_value = "fused")]
    pub mode: PrecisionMode,
    /// Number of value seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Routing seed of the simulated combine.
    #[arg(long, default_value_t = 0)]
    pub routing_seed: u64,
    /// Hidden columns sampled per token.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Configuration of the simulated combine (default: tuned).
    #[arg(long)]
    pub config: Option<TuneConfig>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: Vec<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Internal(String),
    Deadlock(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Internal(_) | CliError::Failed(_) => EXIT_INTERNAL,
            CliError::Deadlock(_) => EXIT_DEADLOCK,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Internal(m) | CliError::Deadlock(m) | CliError::Failed(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Model(m) => m.into(),
            TuneError::TooFewSms(_) | TuneError::EmptyFeasibleSet | TuneError::Cache { .. } => CliError::Invalid(e.to_string()),
            TuneError::Pool(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::DeadlockDetected { .. } => CliError::Deadlock(e.to_string()),
            SimError::Model(m) => m.into(),
            SimError::Shape(_) | SimError::Map(_) | SimError::Perf(_) => CliError::Invalid(e.to_string()),
            SimError::Io { .. } => CliError::Internal(e.to_string()),
        }
    }
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    manifest: RunManifest,
    started: Instant,
}

impl Ctx<'_> {
    fn print(&mut self, text: &str) -> Result<(), CliError> {
        self.out.write_all(text.as_bytes()).map_err(|e| CliError::Internal(format!("stdout: {e}")))
    }

    /// Text to stdout unless `--json`, JSON document to `--out` if given.
    fn emit(&mut self, output: &Output, text: &str, result: Value) -> Result<(), CliError> {
        if let Some(path) = &output.out {
            self.manifest.outputs.push(path.display().to_string());
        }
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let doc = json!({ "manifest": self.manifest, "result": result });
        let rendered = serde_json::to_string_pretty(&doc).expect("report serializes");
        if let Some(path) = &output.out {
            std::fs::write(path, &rendered).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
        }
        if output.json {
            self.print(&rendered)?;
            self.print("\n")
        } else {
            self.print(text)
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let name = match &cli.command {
        Command::Tune(_) => "tune",
        Command::Simulate(_) => "simulate",
        Command::Predict(_) => "predict",
        Command::Traffic(_) => "traffic",
        Command::VerifyMapping(_) => "verify-mapping",
        Command::Precision(_) => "precision",
    };
    let mut ctx = Ctx {
        out,
        manifest: RunManifest {
            subcommand: name.into(),
            inputs: Vec::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: 0.0,
        },
        started: Instant::now(),
    };
    match cli.command {
        Command::Tune(a) => cmd_tune(&mut ctx, a),
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Predict(a) => cmd_predict(&mut ctx, a),
        Command::Traffic(a) => cmd_traffic(&mut ctx, a),
        Command::VerifyMapping(a) => cmd_verify_mapping(&mut ctx, a),
        Command::Precision(a) => cmd_precision(&mut ctx, a),
    }
}

fn load_problem(ctx: &mut Ctx, p: &Problem) -> Result<(HardwareSpec, MoEShape), CliError> {
    ctx.manifest.inputs.push(p.hardware.display().to_string());
    ctx.manifest.inputs.push(p.shape.display().to_string());
    let spec = HardwareSpec::load(&p.hardware)?;
    let mut shape = MoEShape::load(&p.shape)?;
    if let Some(n) = p.tokens {
        if n == 0 {
            return Err(CliError::Invalid("--tokens must be > 0".into()));
        }
        shape = shape.with_tokens(n);
    }
    let (shape, spec) = validate_shape(shape, spec)?;
    Ok((spec, shape))
}

fn tune_result(spec: &HardwareSpec, shape: &MoEShape, opts: &SearchOptions) -> Result<TuneResult, CliError> {
    let traffic = volume_expected(shape, spec);
    Ok(search(spec, shape, &traffic, opts)?)
}

fn cmd_tune(ctx: &mut Ctx, a: TuneArgs) -> Result<(), CliError> {
    let (spec, shape) = load_problem(ctx, &a.problem)?;
    let opts = a.model.options();
    let space = enumerate_space(&spec)?;
    let (result, searches) = match &a.cache {
        Some(path) => {
            ctx.manifest.inputs.push(path.display().to_string());
            let mut cache = if path.exists() { TuneCache::load(path, opts)? } else { TuneCache::new(opts) };
            let r = tuned_lookup(&mut cache, &spec, &shape, shape.n_tok)?;
            cache.save(path)?;
            ctx.manifest.outputs.push(path.display().to_string());
            (r, cache.searches())
        }
        None => (tune_result(&spec, &shape, &opts)?, 1),
    };
    let mut text = format!(
        "hardware {}  shape {}  tokens/rank {}\nraw grid {}  feasible {}  evaluated {}  searches {}\nbest {}  predicted {:.3} us  search {:.1} ms\n",
        spec.name,
        shape.name,
        result.n_tok,
        space.raw_count(),
        space.feasible_count(),
        result.evaluated,
        searches,
        result.config,
        result.l_min * 1e6,
        result.wall_time_s * 1e3
    );
    for (k, v) in result.breakdown.rows() {
        text.push_str(&format!("  {k:<13} {v:.6e}\n"));
    }
    let report = json!({
        "raw_count": space.raw_count(),
        "feasible_count": space.feasible_count(),
        "searches": searches,
        "config": result.config.to_string(),
        "tune": result,
    });
    ctx.emit(&a.output, &text, report)
}

fn constraint_note(cfg: &TuneConfig, n_sm: u32) -> Option<String> {
    cfg.validate(n_sm).err().map(|e| e.to_string())
}

fn cmd_simulate(ctx: &mut Ctx, a: SimulateArgs) -> Result<(), CliError> {
    let (spec, shape) = load_problem(ctx, &a.problem)?;
    let opts = a.model.options();
    let cfg = match a.config {
        Some(c) => c,
        None => tune_result(&spec, &shape, &opts)?.config,
    };
    ctx.manifest.seeds.push(a.seed);
    let order = match a.order {
        OrderArg::Priority => ScheduleOrder::Priority,
        OrderArg::Naive => ScheduleOrder::Naive,
    };
    let params = SimParams::sampled(&spec, &shape, cfg, a.seed, order)?;
    let note = constraint_note(&cfg, spec.n_sm);
    let layer = run_layer_sim(&params).map_err(|e| match (e, &note) {
        (e @ SimError::DeadlockDetected { .. }, Some(n)) => CliError::Deadlock(format!("{e}; violated constraint: {n}")),
        (e, _) => e.into(),
    })?;
    if let Some(path) = &a.trace {
        let combine = combine_trace_path(path);
        emit_trace(&layer.dispatch, path)?;
        emit_trace(&layer.combine, &combine)?;
        for p in [path.clone(), path.with_extension("csv"), combine.clone(), combine.with_extension("csv")] {
            ctx.manifest.outputs.push(p.display().to_string());
        }
    }
    let traffic = volume_expected(&shape, &spec);
    let predicted = predict_latency::<f64>(&shape, &spec, &cfg, &traffic, opts.model).ok();
    let sim = layer.makespan;
    let rel = predicted.map(|p| (p.l_total - sim).abs() / sim);
    let mut text = format!(
        "config {cfg}  seed {}  order {:?}\ndispatch {:.3} us  swiglu {:.3} us  combine {:.3} us\nsimulated {:.3} us",
        a.seed,
        order,
        layer.dispatch.metrics.makespan * 1e6,
        layer.l_swiglu * 1e6,
        layer.combine.metrics.makespan * 1e6,
        sim * 1e6
    );
    match (predicted, rel) {
        (Some(p), Some(r)) => text.push_str(&format!("  predicted {:.3} us  rel_err {:.2}%\n", p.l_total * 1e6, r * 100.0)),
        _ => text.push_str("  predicted n/a\n"),
    }
    text.push_str(&format!(
        "compute stall {:.3} us (dispatch)  events {}\n",
        layer.dispatch.metrics.compute_stall * 1e6,
        layer.dispatch.metrics.events + layer.combine.metrics.events
    ));
    if let Some(n) = &note {
        text.push_str(&format!("warning: {n}\n"));
    }
    let report = json!({
        "config": cfg.to_string(),
        "seed": a.seed,
        "simulated_s": sim,
        "predicted_s": predicted.map(|p| p.l_total),
        "rel_err": rel,
        "l_swiglu_s": layer.l_swiglu,
        "dispatch": layer.dispatch.metrics,
        "combine": layer.combine.metrics,
    });
    ctx.emit(&a.output, &text, report)
}

fn combine_trace_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    path.with_file_name(format!("{stem}-combine.json"))
}

fn cmd_predict(ctx: &mut Ctx, a: PredictArgs) -> Result<(), CliError> {
    let (spec, shape) = load_problem(ctx, &a.problem)?;
    a.config.validate(spec.n_sm)?;
    let traffic = volume_expected(&shape, &spec);
    let b = predict_latency::<f64>(&shape, &spec, &a.config, &traffic, a.model.options().model)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut text = format!("config {}\n", a.config);
    for (k, v) in b.rows() {
        text.push_str(&format!("{k:<13} {v:.6e}\n"));
    }
    ctx.emit(&a.output, &text, json!({ "config": a.config.to_string(), "breakdown": b }))
}

fn cmd_traffic(ctx: &mut Ctx, a: TrafficArgs) -> Result<(), CliError> {
    let d = distinct_rank_distribution(a.world, a.topk).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut text = format!("world {}  topk {}\n", a.world, a.topk);
    text.push_str(&render_table(&d));
    let mut report = json!({ "with_replacement": d });
    if let Some(n_exp) = a.n_exp {
        if a.world == 0 || n_exp % a.world != 0 {
            return Err(CliError::Invalid(format!("--n-exp {n_exp} is not divisible by --world {}", a.world)));
        }
        let w = distinct_rank_distribution_without_replacement(a.world, n_exp / a.world, a.topk).map_err(|e| CliError::Invalid(e.to_string()))?;
        text.push_str(&format!("\nwithout replacement, n_exp {n_exp}\n"));
        text.push_str(&render_table(&w));
        report["without_replacement"] = json!(w);
    }
    ctx.emit(&a.output, &text, report)
}

fn cmd_verify_mapping(ctx: &mut Ctx, a: VerifyArgs) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for seed in a.start..a.start + a.seeds {
        ctx.manifest.seeds.push(seed);
        let inst = random_mapping_instance(seed);
        match oracle::matches(&inst) {
            Ok(true) => {}
            Ok(false) => failed.push(seed),
            Err(e) => return Err(CliError::Internal(format!("seed {seed}: {e}"))),
        }
    }
    let ok = a.seeds as usize - failed.len();
    let text = format!("{ok}/{} oracle-equal\n", a.seeds);
    ctx.emit(&a.output, &text, json!({ "instances": a.seeds, "equal": ok, "failed_seeds": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} instances differ from the oracle: {failed:?}", failed.len())))
    }
}

fn cmd_precision(ctx: &mut Ctx, a: PrecisionArgs) -> Result<(), CliError> {
    let (spec, shape) = load_problem(ctx, &a.problem)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    ctx.manifest.seeds = seeds.clone();
    let mut rows: Vec<(u64, PrecisionReport)> = Vec::new();
    if a.mode == PrecisionMode::Split {
        for &s in &seeds {
            rows.push((s, split_batch_experiment(&shape, s, a.format)));
        }
    } else {
        let cfg = match a.config {
            Some(c) => c,
            None => tune_result(&spec, &shape, &SearchOptions::default())?.config,
        };
        ctx.manifest.seeds.push(a.routing_seed);
        let params = SimParams::sampled(&spec, &shape, cfg, a.routing_seed, ScheduleOrder::Priority)?;
        let fused = FusedCombine::new(&params)?;
        let order = match a.mode {
            PrecisionMode::Fused => CombineOrder::Scoreboard,
            PrecisionMode::Permuted => CombineOrder::Permuted,
            _ => CombineOrder::Arrival,
        };
        for &s in &seeds {
            rows.push((s, fused.compare(s, a.format, order, a.width)?));
        }
    }
    let mut total = PrecisionReport::default();
    let mut text = format!("mode {:?}  format {:?}\n{:>6}  {:>12}  {:>12}\n", a.mode, a.format, "seed", "max_diff", "non-bitwise");
    for (s, r) in &rows {
        total.merge(r);
        text.push_str(&format!("{s:>6}  {:>12.6e}  {:>11.4}%\n", r.max_diff, r.frac_non_bitwise() * 100.0));
    }
    text.push_str(&format!("{:>6}  {:>12.6e}  {:>11.4}%\n", "all", total.max_diff, total.frac_non_bitwise() * 100.0));
    let per_seed: Vec<Value> = rows
        .iter()
        .map(|(s, r)| json!({ "seed": s, "max_diff": r.max_diff, "non_bitwise": r.non_bitwise, "elements": r.elements }))
        .collect();
    ctx.emit(&a.output, &text, json!({ "mode": format!("{:?}", a.mode).to_lowercase(), "seeds": per_seed, "max_diff": total.max_diff, "frac_non_bitwise": total.frac_non_bitwise() }))
}
