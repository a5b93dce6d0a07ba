//! `fuseformer` command-line driver.
//!
//! Machine-readable output is line-delimited JSON on stdout; diagnostics go
//! to stderr. Exit codes: 1 configuration or input error, 2 data error,
//! 3 non-finite loss beyond the skip budget, 4 gradient check failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fuseformer::bench::{run_benchmarks, BenchConfig, BenchEntry};
use fuseformer::checkpoint::{Checkpoint, Payload};
use fuseformer::gradcheck::{default_check_config, run_model_check, run_op_suite, OPS};
use fuseformer::memplan::{
    attention_backward_bound, attention_backward_lifetimes, naive_peak, naive_total, plan,
    render_columns, simulate_plan_safety, Lifetime, PlanShape,
};
use fuseformer::oracle::FdConfig;
use fuseformer::run::{RunConfig, Session};
use fuseformer::Error;

#[derive(Parser)]
#[command(
    name = "fuseformer",
    version,
    about = "Fused-kernel Transformer training engine"
)]
struct Cli {
    /// Worker threads for the data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic or file-based token data.
    Train(TrainArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Plan temporary memory for the attention backward or a lifetime file.
    Plan(PlanArgs),
    /// Time fused kernels against their unfused compositions.
    Bench(BenchArgs),
    /// Summarise a checkpoint as JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Total iterations; 0 prints the config and arena capacity and exits.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint written by the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a checkpoint here at the end (and every `checkpoint_every`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Leave wall-clock fields out of the log.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config whose model is checked; a tiny default otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Negate the analytic gradient of this op (checks the checker).
    #[arg(long, value_name = "OP")]
    inject_fault: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    model_tolerance: f64,
    /// Skip the whole-model check.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// Canonical self-attention backward: batch, hidden, length, heads.
    #[arg(long, num_args = 4, value_names = ["B", "H", "L", "N"], conflicts_with = "lifetimes")]
    attn_bwd: Option<Vec<usize>>,
    /// JSON array of `{id, size, first, last, name?}`.
    #[arg(long, value_name = "FILE")]
    lifetimes: Option<PathBuf>,
    /// Machine-readable output only.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    len: usize,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1024)]
    d_ff: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Include every element value.
    #[arg(long)]
    values: bool,
}

/// A failure with its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteGradient { .. } => 3,
            Error::Parse { .. }
            | Error::TokenFileOutOfRange { .. }
            | Error::TokenOutOfRange { .. }
            | Error::TargetOutOfRange { .. }
            | Error::SequenceTooLong { .. }
            | Error::Io(_) => 2,
            _ => 1,
        };
        Fail(code, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(1, e.to_string())
    }
}

type CmdResult = Result<(), Fail>;

fn emit(out: &mut impl Write, v: &impl serde::Serialize) -> CmdResult {
    let line = serde_json::to_string(v).map_err(|e| Fail(1, e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(p) = &a.checkpoint {
        cfg.train.checkpoint_path = Some(p.display().to_string());
        if cfg.train.checkpoint_every == 0 {
            cfg.train.checkpoint_every = cfg.train.steps.max(1);
        }
    }
    cfg.validate()?;
    let (mut session, resumed) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| Fail(1, format!("{}: {e}", p.display())))?;
            let s = Session::resume(cfg.clone(), &ck)?;
            let at = s.step();
            (s, Some(at))
        }
        None => (Session::new(cfg.clone())?, None),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    emit(&mut out, &session.config_record(resumed))?;
    if cfg.train.steps == 0 {
        return Ok(());
    }
    session.run(cfg.train.steps, &mut out, !a.no_timing)?;
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if let Some(op) = &a.inject_fault {
        if !OPS.contains(&op.as_str()) {
            return Err(Fail(
                1,
                format!("unknown op `{op}`; one of {}", OPS.join(", ")),
            ));
        }
    }
    let model = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => default_check_config(),
    };
    let fd = FdConfig::default();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut reports = run_op_suite(a.instances, a.seed, &fd, a.inject_fault.as_deref())?;
    for r in &reports {
        emit(&mut out, r)?;
    }
    if !a.ops_only {
        let mut r = run_model_check(&model, a.seed, &fd, a.model_tolerance)?;
        r.op = "model".into();
        emit(&mut out, &r)?;
        reports.push(r);
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.op.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail(
            4,
            format!("gradient check failed: {}", failed.join(", ")),
        ))
    }
}

fn plan_cmd(a: PlanArgs) -> CmdResult {
    let (lifetimes, shape) = match (&a.attn_bwd, &a.lifetimes) {
        (Some(v), None) => {
            let s = PlanShape::new(v[0], v[1], v[2], v[3])?;
            (attention_backward_lifetimes(s), Some(s))
        }
        (None, Some(p)) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Fail(1, format!("{}: {e}", p.display())))?;
            let l: Vec<Lifetime> = serde_json::from_str(&text)
                .map_err(|e| Fail(1, format!("{}: {e}", p.display())))?;
            (l, None)
        }
        _ => {
            return Err(Fail(
                1,
                "give either --attn-bwd B H L N or --lifetimes FILE".into(),
            ))
        }
    };
    let p = plan(&lifetimes)?;
    let naive = naive_total(&lifetimes);
    let safety = simulate_plan_safety(&p, &lifetimes);
    let mut report = json!({
        "peak": p.peak,
        "naive": naive,
        "savings_ratio": if naive > 0 { 1.0 - p.peak as f64 / naive as f64 } else { 0.0 },
        "blocks": p.blocks,
        "assignment": p.assignment,
        "safe": safety.ok(),
    });
    if let Some(s) = shape {
        report["shape"] = json!(s);
        report["bound"] = json!(attention_backward_bound(s));
        report["naive_formula"] = json!(naive_peak(s));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if a.json {
        emit(&mut out, &report)?;
    } else {
        writeln!(
            out,
            "peak {} elements, naive {} elements, saving {:.1}%",
            p.peak,
            naive,
            { 100.0 * report["savings_ratio"].as_f64().unwrap_or(0.0) }
        )?;
        write!(out, "{}", render_columns(&p, &lifetimes))?;
        emit(&mut out, &report)?;
    }
    if !safety.ok() {
        return Err(Fail(
            1,
            format!("plan failed the safety simulation: {:?}", safety.violations),
        ));
    }
    Ok(())
}

fn bench(a: BenchArgs, threads: usize) -> CmdResult {
    let cfg = BenchConfig {
        batch: a.batch,
        len: a.len,
        d_model: a.d_model,
        heads: a.heads,
        d_ff: a.d_ff,
        vocab: a.vocab,
        warmup: a.warmup,
        runs: a.runs,
        seed: a.seed,
        ..Default::default()
    };
    if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) || cfg.batch == 0 || cfg.len == 0 {
        return Err(Fail(
            1,
            "bench shape needs d_model % heads == 0 and nonzero dims".into(),
        ));
    }
    let mut pools = vec![1];
    if threads > 1 {
        pools.push(threads);
    }
    let mut entries: Vec<BenchEntry> = Vec::new();
    for n in pools {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Fail(1, e.to_string()))?;
        entries.extend(pool.install(|| run_benchmarks(&cfg))?);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if !a.json {
        writeln!(
            out,
            "{:<24} {:>7} {:>12} {:>12} {:>8} {:>10}",
            "op", "threads", "fused ms", "unfused ms", "speedup", "max diff"
        )?;
        for e in &entries {
            writeln!(
                out,
                "{:<24} {:>7} {:>12.3} {:>12.3} {:>8.2} {:>10.2e}{}",
                e.op,
                e.threads,
                e.fused.mean_ms,
                e.unfused.mean_ms,
                e.speedup,
                e.max_rel_diff,
                if e.parity { "" } else { "  PARITY FAILURE" }
            )?;
        }
    } else {
        for e in &entries {
            emit(&mut out, e)?;
        }
    }
    if let Some(e) = entries.iter().find(|e| !e.parity) {
        eprintln!(
            "warning: {} fused and unfused outputs differ by {:.3e}",
            e.op, e.max_rel_diff
        );
    }
    Ok(())
}

fn export(a: ExportArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)
        .map_err(|e| Fail(1, format!("{}: {e}", a.checkpoint.display())))?;
    let tensors: Vec<_> = ck
        .tensors
        .iter()
        .map(|t| {
            let vals = t.data.to_f64();
            let l2 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut j = json!({
                "name": t.name,
                "dtype": match t.data { Payload::F32(_) => "f32", Payload::F16(_) => "f16" },
                "shape": t.shape,
                "elements": vals.len(),
                "l2": l2,
                "max_abs": max_abs,
            });
            if a.values {
                j["values"] = json!(vals);
            }
            j
        })
        .collect();
    let stdout = std::io::stdout();
    emit(
        &mut stdout.lock(),
        &json!({ "format": "LSF2", "version": fuseformer::checkpoint::VERSION, "step": ck.step, "tensors": tensors }),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    let r = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Plan(a) => plan_cmd(a),
        Cmd::Bench(a) => bench(a, threads),
        Cmd::Export(a) => export(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
