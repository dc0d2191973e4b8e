use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use cnn_bench::checks::{
    aggregate_scaling, gemm_shapes, instance_balance, latency_penalty, sweep_checks,
};
use cnn_bench::config::parse_override;
use cnn_bench::{
    emit_report, run_batch_sweep, run_ladder, run_multi_instance, BenchError, BenchReport,
    LadderStep, ModelSource, OutputFormat, Result, RunConfig, StepOutcome,
};
use cnn_engine::gemm::{
    autotune, default_grid, GemmCacheParams, KernelKind, LoopVariant, ParamTable, TuneOptions,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kernel {
    Auto,
    Scalar,
    Vector,
}

/// Benchmarks the inference engine: optimization ladder, batch sweeps and
/// concurrent instances.
#[derive(Debug, Parser)]
#[command(name = "cnn-bench", version)]
struct Cli {
    /// Model file, or a bundled model name (resnet-mini, resnet50-v15).
    #[arg(long, default_value = "resnet-mini")]
    model: String,

    /// Batch size; defaults to the model's.
    #[arg(long)]
    batch: Option<usize>,

    /// Worker threads per instance.
    #[arg(long, default_value_t = 1)]
    threads: usize,

    /// Concurrent engine instances.
    #[arg(long, default_value_t = 1)]
    instances: usize,

    /// Ladder step(s): baseline, conv-opt, cache-opt, fuse or all.
    #[arg(long, value_delimiter = ',', default_value = "fuse")]
    step: Vec<String>,

    /// Batch sizes to sweep, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,

    /// Timed repetitions.
    #[arg(long, default_value_t = 5)]
    reps: usize,

    /// Untimed warm-up passes.
    #[arg(long, default_value_t = 1)]
    warmup: usize,

    /// Per-layer convolution algorithm, LAYER=im2col|convgemm. Repeatable.
    #[arg(long = "override", value_name = "LAYER=ALGO")]
    overrides: Vec<String>,

    /// Fixed blocking parameters mc,nc,kc,mr,nr for every step.
    #[arg(long)]
    params: Option<String>,

    /// Fixed loop order for every step.
    #[arg(long)]
    variant: Option<String>,

    /// Tuned parameter table used by the dynamic steps.
    #[arg(long, value_name = "PATH")]
    param_table: Option<PathBuf>,

    /// Tune the model's GEMM shapes, write a parameter table to PATH and exit.
    #[arg(long, value_name = "PATH")]
    autotune: Option<PathBuf>,

    /// Skip per-layer timing.
    #[arg(long)]
    no_instrument: bool,

    #[arg(long, value_enum, default_value = "auto")]
    kernel: Kernel,

    /// Seed of the random input batches.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value = "csv")]
    format: String,

    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut steps = Vec::new();
    for s in &cli.step {
        if s == "all" {
            steps.extend(LadderStep::ALL);
        } else {
            steps.push(s.parse()?);
        }
    }
    steps.sort();
    steps.dedup();
    let mut cfg = RunConfig {
        model: ModelSource::from_arg(&cli.model),
        batch: cli.batch,
        threads: cli.threads,
        instances: cli.instances,
        steps,
        sweep: cli.sweep.clone(),
        reps: cli.reps,
        warmup: cli.warmup,
        instrument: !cli.no_instrument,
        kernel: match cli.kernel {
            Kernel::Auto => KernelKind::Auto,
            Kernel::Scalar => KernelKind::Scalar,
            Kernel::Vector => KernelKind::Vector,
        },
        format: cli.format.parse::<OutputFormat>()?,
        out: cli.out.clone(),
        seed: cli.seed,
        ..RunConfig::default()
    };
    for o in &cli.overrides {
        let (layer, algo) = parse_override(o)?;
        cfg.overrides.entry(layer).or_default().algo = Some(algo);
    }
    if let Some(p) = &cli.params {
        cfg.params = Some(p.parse::<GemmCacheParams>()?);
    }
    if let Some(v) = &cli.variant {
        cfg.variant = Some(v.parse::<LoopVariant>()?);
    }
    if let Some(path) = &cli.param_table {
        cfg.param_table = Some(ParamTable::parse(&read(path)?)?);
    }
    Ok(cfg)
}

fn write_table(cfg: &RunConfig, path: &PathBuf) -> Result<()> {
    let model = cfg.model.load()?;
    let batch = cfg.batch.unwrap_or(model.batch);
    let opts = TuneOptions {
        warmup: cfg.warmup,
        reps: cfg.reps,
        threads: cfg.threads,
        kernel: cfg.kernel,
    };
    let mut table = ParamTable::new();
    for (m, n, k) in gemm_shapes(&model, batch)? {
        let r = autotune(m, n, k, &default_grid(m, n, k, &cfg.hw), &opts)?;
        eprintln!(
            "{m}x{n}x{k}: {} {:?} {:.2} GFLOPS",
            r.params, r.variant, r.gflops
        );
        r.insert_into(&mut table);
    }
    fs::write(path, table.to_text()).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &cli.autotune {
        return write_table(&cfg, path);
    }

    let outcomes: Vec<StepOutcome> = if cfg.sweep.is_empty() {
        run_ladder(&cfg)?
    } else {
        run_batch_sweep(&cfg)?
    };
    let reports: Vec<BenchReport> = outcomes.into_iter().map(|o| o.report).collect();

    let mut checks = if cfg.sweep.is_empty() {
        Vec::new()
    } else {
        sweep_checks(&reports)
    };
    if cfg.instances > 1 {
        checks.extend(reports.iter().map(instance_balance));
        if cfg.sweep.is_empty() {
            let single = run_multi_instance(
                &RunConfig {
                    steps: vec![*cfg.steps.last().unwrap()],
                    ..cfg.clone()
                },
                1,
            )?;
            let multi = reports.last().expect("one report per step");
            checks.push(latency_penalty(&single.report, multi));
            checks.push(aggregate_scaling(&single.report, multi));
        }
    }
    for w in checks.iter().filter_map(|c| c.warning()) {
        eprintln!("warning: {w}");
    }
    for r in &reports {
        if let Err(e) = r.check_invariants() {
            eprintln!("warning: report `{}` at t={}: {e}", r.run, r.batch);
        }
    }

    let text = emit_report(&reports, cfg.format)?;
    match &cfg.out {
        Some(path) => fs::write(path, text).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                BenchError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
