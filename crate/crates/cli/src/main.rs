//! Batch front end for the quantization engine: synthetic problem
//! generation, single-method runs, method comparison and oracle checks,
//! all reporting JSON with a stable schema.

mod bundle;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use compquant::engine::{self, MethodSpec};
use compquant::oracle;
use compquant::quant::DEFAULT_CLIP_GRID;
use compquant::GridSpec;

use bundle::{gen_synthetic, load_bundle, save_bundle, TensorBundle};

const REPORT_SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(name = "compquant", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic tensor bundle.
    Gen(GenArgs),
    /// Quantize every layer of a bundle with one method.
    Run(RunArgs),
    /// Run all four methods plus the RTN baseline and report side by side.
    Compare(CompareArgs),
    /// Compare the engine against the brute-force oracle on a seeded
    /// instance; fails if they disagree.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,
    #[arg(long)]
    output: PathBuf,
}

/// Method and grid knobs, mirrored one-to-one into the report's config
/// echo.
#[derive(Args, Serialize, Clone)]
struct MethodArgs {
    #[arg(long, default_value_t = false)]
    use_p1: bool,
    #[arg(long, default_value_t = false)]
    use_p2: bool,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Columns per quantization group; omit for per-channel.
    #[arg(long)]
    group_size: Option<usize>,
    /// Block size B of the lazy batched update.
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = false)]
    act_order: bool,
    #[arg(long, default_value_t = 0.01)]
    lambda_frac: f64,
    /// Comma-separated clip ratios; must include 1.0.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CLIP_GRID)]
    clip_grid: Vec<f64>,
    /// Row-parallel workers; 0 means all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl MethodArgs {
    fn grid(&self) -> GridSpec {
        GridSpec {
            bits: self.bits,
            group_size: self.group_size,
            clip_grid: self.clip_grid.clone(),
        }
    }

    fn spec(&self) -> MethodSpec {
        MethodSpec {
            use_p1: self.use_p1,
            use_p2: self.use_p2,
            block_size: self.block,
            act_order: self.act_order,
            lambda_frac: self.lambda_frac,
            grid: self.grid(),
            ..MethodSpec::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Path to a QBND1 tensor bundle.
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_level: f64,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn emit_report(report: &serde_json::Value, output: Option<&PathBuf>) -> Result<()> {
    // Serialize fully before touching the output so a failure can never
    // leave a partial report behind.
    let text = serde_json::to_string_pretty(report)?;
    match output {
        Some(path) => std::fs::write(path, text + "\n")
            .with_context(|| format!("writing report to {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn layer_result(outcome: &engine::LayerOutcome, layer: usize, method: &str) -> serde_json::Value {
    let r = &outcome.report;
    json!({
        "layer": layer,
        "method": method,
        "sym_err": r.sym_err,
        "asym_err": r.asym_err,
        "rtn_sym_err": r.rtn_sym_err,
        "rtn_asym_err": r.rtn_asym_err,
        "wall_time_ms": {
            "calib": r.calib_ms,
            "quant": r.quant_ms,
            "rtn": r.rtn_ms,
        },
    })
}

fn run_over_bundle(
    bundle: &TensorBundle,
    spec: &MethodSpec,
    workers: usize,
) -> Result<Vec<serde_json::Value>> {
    let mut layers = Vec::new();
    for (l, layer) in bundle.layers.iter().enumerate() {
        let problem = layer.to_problem()?;
        let outcome = engine::run_layer_with_workers(&problem, spec, workers)
            .with_context(|| format!("quantizing layer {l}"))?;
        layers.push(layer_result(&outcome, l, spec.name()));
    }
    Ok(layers)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let bundle = gen_synthetic(args.seed, args.m, args.n, args.k, args.noise_level);
    save_bundle(&bundle, &args.output)
        .with_context(|| format!("writing bundle to {}", args.output.display()))?;
    eprintln!(
        "wrote {} ({} layer(s), {}x{} weights, {} samples)",
        args.output.display(),
        bundle.layers.len(),
        args.m,
        args.n,
        args.k
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let spec = args.method.spec();
    let layers = run_over_bundle(&bundle, &spec, args.method.workers)?;
    let report = json!({
        "schema": REPORT_SCHEMA,
        "version": env!("CARGO_PKG_VERSION"),
        "command": "run",
        "config": args.method,
        "layers": layers,
    });
    emit_report(&report, args.output.as_ref())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let grid = args.method.grid();
    let mut specs = vec![
        MethodSpec::gptq(),
        MethodSpec::gptaq(),
        MethodSpec::gptq_cae(),
        MethodSpec::gptaq_cae(),
    ];
    for s in &mut specs {
        s.grid = grid.clone();
        s.block_size = args.method.block;
        s.act_order = args.method.act_order;
        s.lambda_frac = args.method.lambda_frac;
    }
    let mut layers = Vec::new();
    for (l, layer) in bundle.layers.iter().enumerate() {
        let problem = layer.to_problem()?;
        let mut methods = serde_json::Map::new();
        for spec in &specs {
            let outcome = engine::run_layer_with_workers(&problem, spec, args.method.workers)
                .with_context(|| format!("{} on layer {l}", spec.name()))?;
            methods.insert(spec.name().into(), layer_result(&outcome, l, spec.name()));
        }
        let rtn = engine::rtn_baseline(&problem, &grid)?;
        layers.push(json!({
            "layer": l,
            "methods": methods,
            "rtn": {
                "sym_err": rtn.report.sym_err,
                "asym_err": rtn.report.asym_err,
            },
        }));
    }
    let report = json!({
        "schema": REPORT_SCHEMA,
        "version": env!("CARGO_PKG_VERSION"),
        "command": "compare",
        "config": args.method,
        "layers": layers,
    });
    emit_report(&report, args.output.as_ref())
}

fn cmd_oracle_check(args: &OracleCheckArgs) -> Result<()> {
    if args.n > 64 {
        bail!("oracle-check is limited to n <= 64 (got {})", args.n);
    }
    let problem =
        compquant::synth::seeded_problem(args.seed, args.m, args.n, args.k, args.noise_level);
    let mut worst = 0.0f64;
    let mut methods = serde_json::Map::new();
    let started = Instant::now();
    for base in [
        MethodSpec::gptq(),
        MethodSpec::gptaq(),
        MethodSpec::gptq_cae(),
        MethodSpec::gptaq_cae(),
    ] {
        let mut spec = base;
        spec.grid = args.method.grid();
        spec.block_size = args.method.block;
        spec.act_order = args.method.act_order;
        spec.lambda_frac = args.method.lambda_frac;
        let engine_q =
            engine::run_layer_with_workers(&problem, &spec, args.method.workers)?.quantized;
        let oracle_q = oracle::greedy_oracle_run(&problem, &spec)?;
        let scale = oracle_q.max_abs().max(1.0);
        let err = engine_q.sub(&oracle_q)?.max_abs() / scale;
        worst = worst.max(err);
        methods.insert(spec.name().into(), json!({ "max_rel_diff": err }));
    }
    let passed = worst <= args.tolerance;
    let report = json!({
        "schema": REPORT_SCHEMA,
        "version": env!("CARGO_PKG_VERSION"),
        "command": "oracle-check",
        "config": {
            "seed": args.seed, "m": args.m, "n": args.n, "k": args.k,
            "noise_level": args.noise_level, "tolerance": args.tolerance,
        },
        "methods": methods,
        "max_rel_diff": worst,
        "passed": passed,
        "wall_time_ms": started.elapsed().as_secs_f64() * 1e3,
    });
    emit_report(&report, args.output.as_ref())?;
    if !passed {
        bail!("engine and oracle disagree: max relative diff {worst:.3e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::OracleCheck(args) => cmd_oracle_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
