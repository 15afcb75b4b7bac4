//! `bkdp` command-line front end: gradient-equivalence verification against
//! the brute-force per-sample oracle (`verify`), the static layerwise
//! cost/decision table (`analyze`), and instrumented benchmark sweeps over
//! the implementation kinds (`bench`). All output is CSV with a mandatory
//! header, period decimal separators, and no thousands separators; reruns
//! with the same configuration produce byte-identical output.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bkdp_core::analyzer::{impl_cost, layerwise_decision_table, predicted_space_bytes};
use bkdp_core::archspec::{self, ArchSpec};
use bkdp_core::catalog;
use bkdp_core::clipping::{ClipFn, ClipMode};
use bkdp_core::engine::{
    naive_oracle_grad, private_step, synth_targets, ImplKind, PrivacyParams, ALL_KINDS,
};
use bkdp_core::graph::{Batch, Graph};
use bkdp_core::{OpCounters, SeededRng};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bkdp", about = "Differentially private training cost lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every implementation kind against the brute-force oracle.
    Verify(CommonArgs),
    /// Print the layerwise ghost/instantiate decision table and cost totals.
    Analyze(CommonArgs),
    /// Run instrumented steps and report measured vs predicted cost.
    Bench(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Catalog name (e.g. mlp:3x64, resnet18) or path to an architecture file
    #[arg(long, default_value = "mlp:3x64")]
    arch: String,
    /// Image side override for the image catalog entries
    #[arg(long)]
    input: Option<usize>,
    /// Batch size
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Comma-separated implementation kinds, or "all"
    #[arg(long = "impl", default_value = "all")]
    impls: String,
    /// Clipping function: abadi, flat, or automatic
    #[arg(long = "clip-fn", default_value = "abadi")]
    clip_fn: String,
    /// Clipping radius R (stability constant gamma for automatic)
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Noise multiplier sigma
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// RNG seed (weights, batches, noise)
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of optimizer steps (bench)
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Relative tolerance for verify
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Output file for the CSV report (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Refuse kinds whose predicted peak memory exceeds this budget (bench)
    #[arg(long = "mem-budget-bytes", default_value_t = u64::MAX)]
    mem_budget_bytes: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

type CliResult<T> = std::result::Result<T, String>;

fn resolve_arch(args: &CommonArgs) -> CliResult<ArchSpec> {
    match catalog::build(&args.arch, args.input) {
        Ok(spec) => Ok(spec),
        Err(catalog_err) => {
            let path = Path::new(&args.arch);
            if path.exists() {
                if args.input.is_some() {
                    return Err("--input only applies to catalog architectures".into());
                }
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("arch");
                archspec::parse(name, &text).map_err(|e| e.to_string())
            } else {
                Err(catalog_err.to_string())
            }
        }
    }
}

fn resolve_clip(args: &CommonArgs) -> CliResult<ClipFn> {
    ClipFn::from_name(&args.clip_fn, args.radius, args.radius).map_err(|e| e.to_string())
}

fn resolve_kinds(args: &CommonArgs, for_verify: bool) -> CliResult<Vec<ImplKind>> {
    if args.impls.trim() == "all" {
        let kinds: Vec<ImplKind> =
            ALL_KINDS.into_iter().filter(|k| !for_verify || k.is_dp()).collect();
        return Ok(kinds);
    }
    let mut kinds = Vec::new();
    for part in args.impls.split(',') {
        let kind = ImplKind::parse(part.trim()).map_err(|e| e.to_string())?;
        if for_verify && !kind.is_dp() {
            return Err(format!("{kind} computes no clipped gradient to verify"));
        }
        kinds.push(kind);
    }
    Ok(kinds)
}

fn emit(args: &CommonArgs, rows: &[Vec<String>]) -> CliResult<()> {
    let target: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(
            std::fs::File::create(path)
                .map_err(|e| format!("cannot create {}: {e}", path.display()))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut writer = csv::WriterBuilder::new().flexible(true).from_writer(target);
    for row in rows {
        writer.write_record(row).map_err(|e| e.to_string())?;
    }
    writer.flush().map_err(|e| e.to_string())
}

fn fmt_float(x: f64) -> String {
    format!("{x:e}")
}

fn cmd_verify(args: &CommonArgs) -> CliResult<ExitCode> {
    if args.sigma != 0.0 {
        return Err("verify compares noise-free gradients; use --sigma 0".into());
    }
    let spec = resolve_arch(args)?;
    let clip = resolve_clip(args)?;
    let kinds = resolve_kinds(args, true)?;
    let mut rng = SeededRng::new(args.seed);
    let graph = Graph::build(spec, &mut rng).map_err(|e| e.to_string())?;
    let batch = Batch::synth(&graph.spec, args.batch, &mut rng);
    let targets = synth_targets(&graph, args.batch, &mut rng).map_err(|e| e.to_string())?;
    let (oracle_norms, oracle_grads) =
        naive_oracle_grad(&graph, &batch, &targets, clip).map_err(|e| e.to_string())?;

    let mut rows =
        vec![vec!["kind", "max_rel_grad_dev", "max_rel_norm_dev", "backward_pass_count"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()];
    let privacy = PrivacyParams { clip, sigma: 0.0, unit_modes: None };
    let mut first_failure: Option<(ImplKind, String, f64)> = None;
    for kind in kinds {
        let mut counters = OpCounters::new();
        let mut nrng = SeededRng::new(args.seed);
        let rep = private_step(&graph, &batch, &targets, kind, &privacy, &mut nrng, &mut counters)
            .map_err(|e| e.to_string())?;
        let mut max_norm_dev = 0.0_f64;
        for (n, m) in rep.per_sample_norms.iter().zip(oracle_norms.iter()) {
            max_norm_dev = max_norm_dev.max((n - m).abs() / m.abs().max(1e-30));
        }
        let mut max_grad_dev = 0.0_f64;
        for ((id, got), (_, want)) in rep.grads.iter().zip(oracle_grads.iter()) {
            let scale = want.data.iter().map(|x| x.abs()).fold(1e-30_f64, f64::max);
            for (x, y) in got.data.iter().zip(want.data.iter()) {
                let dev = (x - y).abs() / scale;
                if dev > max_grad_dev {
                    max_grad_dev = dev;
                }
                if dev > args.tol && first_failure.is_none() {
                    first_failure = Some((kind, id.to_string(), dev));
                }
            }
        }
        if max_norm_dev > args.tol && first_failure.is_none() {
            first_failure = Some((kind, "per-sample norms".into(), max_norm_dev));
        }
        rows.push(vec![
            kind.to_string(),
            fmt_float(max_grad_dev),
            fmt_float(max_norm_dev),
            rep.backward_passes.to_string(),
        ]);
    }
    emit(args, &rows)?;
    if let Some((kind, layer, dev)) = first_failure {
        eprintln!("verification failed: kind {kind}, layer {layer}, deviation {dev:e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: &CommonArgs) -> CliResult<ExitCode> {
    let spec = resolve_arch(args)?;
    let report = layerwise_decision_table(&spec).map_err(|e| e.to_string())?;
    let mut rows = vec![vec![
        "layer", "T", "d", "p", "ghost_space", "inst_space", "decision", "min_space",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for r in &report.rows {
        let decision = match r.decision {
            ClipMode::Ghost => "ghost",
            ClipMode::Instantiate => "instantiate",
        };
        rows.push(vec![
            r.layer.to_string(),
            r.t.to_string(),
            r.d.to_string(),
            r.p.to_string(),
            r.ghost_space.to_string(),
            r.inst_space.to_string(),
            decision.to_string(),
            r.min_space.to_string(),
        ]);
    }
    rows.push(vec![
        "total_ghost_space".into(),
        report.ghost_total.to_string(),
        "total_inst_space".into(),
        report.inst_total.to_string(),
        "total_mixed_space".into(),
        report.mixed_total.to_string(),
    ]);
    for kind in resolve_kinds(args, false)? {
        let cost = impl_cost(&spec, args.batch, kind).map_err(|e| e.to_string())?;
        rows.push(vec![
            format!("impl:{kind}"),
            format!("B={}", args.batch),
            "time".into(),
            cost.time.to_string(),
            "extra_space".into(),
            cost.extra_space.to_string(),
        ]);
    }
    emit(args, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &CommonArgs) -> CliResult<ExitCode> {
    if args.steps == 0 {
        return Err("--steps must be at least 1".into());
    }
    let spec = resolve_arch(args)?;
    let clip = resolve_clip(args)?;
    let kinds = resolve_kinds(args, false)?;
    // out-of-memory guard: check every requested kind before running anything
    for &kind in &kinds {
        let predicted = predicted_space_bytes(&spec, args.batch, kind).map_err(|e| e.to_string())?;
        if predicted > args.mem_budget_bytes as u128 {
            return Err(format!(
                "refusing {kind}: predicted peak memory {predicted} bytes exceeds budget {} bytes",
                args.mem_budget_bytes
            ));
        }
    }
    let mut rng = SeededRng::new(args.seed);
    let graph = Graph::build(spec.clone(), &mut rng).map_err(|e| e.to_string())?;
    let privacy = PrivacyParams::new(clip, args.sigma).map_err(|e| e.to_string())?;
    let mut rows = vec![vec![
        "kind",
        "steps",
        "mul_adds_total",
        "peak_live_bytes",
        "predicted_time",
        "predicted_space",
        "deviation_pct",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for kind in kinds {
        let mut counters = OpCounters::new();
        let mut data_rng = SeededRng::new(args.seed ^ 0x9e37_79b9);
        let mut nrng = SeededRng::new(args.seed.wrapping_add(1));
        for _ in 0..args.steps {
            let batch = Batch::synth(&graph.spec, args.batch, &mut data_rng);
            let targets =
                synth_targets(&graph, args.batch, &mut data_rng).map_err(|e| e.to_string())?;
            private_step(&graph, &batch, &targets, kind, &privacy, &mut nrng, &mut counters)
                .map_err(|e| e.to_string())?;
        }
        let cost = impl_cost(&spec, args.batch, kind).map_err(|e| e.to_string())?;
        let predicted_time = cost.time * args.steps as u128;
        let predicted_space =
            predicted_space_bytes(&spec, args.batch, kind).map_err(|e| e.to_string())?;
        let deviation_pct = if predicted_time == 0 {
            0.0
        } else {
            100.0 * (counters.mul_adds as f64 - predicted_time as f64) / predicted_time as f64
        };
        rows.push(vec![
            kind.to_string(),
            args.steps.to_string(),
            counters.mul_adds.to_string(),
            counters.peak_live_bytes.to_string(),
            predicted_time.to_string(),
            predicted_space.to_string(),
            format!("{deviation_pct:.4}"),
        ]);
    }
    emit(args, &rows)?;
    Ok(ExitCode::SUCCESS)
}
