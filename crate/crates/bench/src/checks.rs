//! Directional performance checks. None of these fail a run; a failed check
//! becomes a warning.

use std::collections::BTreeSet;
use std::time::Instant;

use cnn_engine::conv::{choose_algorithm, conv2d_into};
use cnn_engine::gemm::{
    gemm, select_cache_params, CacheHierarchy, Epilogue, GemmCacheParams, GemmConfig, KernelKind,
    LoopVariant,
};
use cnn_engine::layers::{batchnorm_inference_into, fold_batchnorm, relu_into};
use cnn_engine::model::{plan_fusion, FusionRole, LayerKind, ModelSpec, Weights};
use cnn_engine::{Fill, Layout, MatrixView, MatrixViewMut, Shape, Tensor};

use crate::report::BenchReport;
use crate::Result;

/// Share of conv layers on which the fused pipeline must not be slower.
pub const FUSION_WIN_SHARE: f64 = 0.70;
/// Lower bound on mean dynamic/fixed throughput over the model's GEMM shapes.
pub const CACHE_PARAM_RATIO: f64 = 0.95;
/// Largest allowed spread of instance throughputs.
pub const INSTANCE_SPREAD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SoftCheck {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        SoftCheck {
            name,
            passed,
            detail,
        }
    }

    pub fn warning(&self) -> Option<String> {
        (!self.passed).then(|| format!("soft check `{}` failed: {}", self.name, self.detail))
    }
}

/// Latency must not decrease with batch size, and throughput at t=16 should
/// reach throughput at t=1. Reports are grouped by run name.
pub fn sweep_checks(reports: &[BenchReport]) -> Vec<SoftCheck> {
    let runs: BTreeSet<&str> = reports.iter().map(|r| r.run.as_str()).collect();
    let mut out = Vec::new();
    for run in runs {
        let mut pts: Vec<&BenchReport> = reports.iter().filter(|r| r.run == run).collect();
        pts.sort_by_key(|r| r.batch);
        let drops: Vec<String> = pts
            .windows(2)
            .filter(|w| w[1].latency.median < w[0].latency.median)
            .map(|w| {
                format!(
                    "t={} {:.6}s < t={} {:.6}s",
                    w[1].batch, w[1].latency.median, w[0].batch, w[0].latency.median
                )
            })
            .collect();
        out.push(SoftCheck::new(
            "latency-monotone",
            drops.is_empty(),
            format!("{run}: {}", drops.join(", ")),
        ));
        let at = |t: usize| {
            pts.iter()
                .find(|r| r.batch == t)
                .map(|r| r.images_per_second)
        };
        if let (Some(one), Some(sixteen)) = (at(1), at(16)) {
            out.push(SoftCheck::new(
                "throughput-t16",
                sixteen >= one,
                format!("{run}: {sixteen:.3} images/s at t=16 vs {one:.3} at t=1"),
            ));
        }
    }
    out
}

/// Instance throughputs within [`INSTANCE_SPREAD`] of each other.
pub fn instance_balance(r: &BenchReport) -> SoftCheck {
    let ips = r.per_instance.iter().map(|i| i.images_per_second);
    let lo = ips.clone().fold(f64::INFINITY, f64::min);
    let hi = ips.fold(f64::NEG_INFINITY, f64::max);
    SoftCheck::new(
        "instance-balance",
        hi <= lo * (1.0 + INSTANCE_SPREAD),
        format!("instance throughputs span {lo:.3}..{hi:.3} images/s"),
    )
}

/// Running more instances side by side should cost per-batch latency.
pub fn latency_penalty(single: &BenchReport, multi: &BenchReport) -> SoftCheck {
    SoftCheck::new(
        "multi-instance-latency",
        multi.max_latency > single.max_latency,
        format!(
            "N={} latency {:.6}s vs N={} latency {:.6}s",
            multi.instances, multi.max_latency, single.instances, single.max_latency
        ),
    )
}

/// Aggregate throughput of several instances should reach one instance's.
pub fn aggregate_scaling(single: &BenchReport, multi: &BenchReport) -> SoftCheck {
    SoftCheck::new(
        "multi-instance-throughput",
        multi.images_per_second >= single.images_per_second,
        format!(
            "N={} aggregate {:.3} images/s vs N={} {:.3} images/s",
            multi.instances, multi.images_per_second, single.instances, single.images_per_second
        ),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTiming {
    pub layer: String,
    pub fused_seconds: f64,
    pub unfused_seconds: f64,
}

fn best_of<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times each fusable conv group of `model` as one fused call and as
/// separate conv, batchnorm and ReLU passes.
pub fn measure_fusion(
    model: &ModelSpec,
    batch: usize,
    threads: usize,
    hw: &CacheHierarchy,
    reps: usize,
) -> Result<Vec<FusionTiming>> {
    let fused = plan_fusion(model);
    let weights = Weights::random(model, 7)?;
    let mut out = Vec::new();
    for (i, d, input) in fused.conv_layers() {
        let FusionRole::Head { bn, relu } = fused.layers[i].fusion else {
            continue;
        };
        let Some(bn) = bn else { continue };
        let relu = relu.is_some();
        let input = input.with_batch(batch);
        let x = Tensor::new(input, Layout::Nhwc, Fill::Random(i as u64))?;
        let w = weights.conv_filter(i).expect("conv weights");
        let folded = fold_batchnorm(weights.batchnorm(bn).expect("bn weights"))?;
        let g = d.geometry(input)?;
        let (params, variant) = select_cache_params(g.m, g.n, g.k, hw);
        let cfg = GemmConfig::new(params, variant, threads);
        let alg = choose_algorithm(&d, input);
        let mut y = Tensor::zeros(g.output_shape())?;
        let mut z = Tensor::zeros(g.output_shape())?;
        let fused_seconds = best_of(reps, || {
            conv2d_into(alg, &x, w, &d, &cfg, &folded.epilogue(relu), &mut y)?;
            Ok(())
        })?;
        let unfused_seconds = best_of(reps, || {
            conv2d_into(alg, &x, w, &d, &cfg, &Epilogue::None, &mut y)?;
            batchnorm_inference_into(&y, &folded, false, threads, &mut z)?;
            if relu {
                relu_into(&z, threads, &mut y)?;
            }
            Ok(())
        })?;
        out.push(FusionTiming {
            layer: fused.layers[i].id.clone(),
            fused_seconds,
            unfused_seconds,
        });
    }
    Ok(out)
}

pub fn fusion_check(timings: &[FusionTiming]) -> SoftCheck {
    let wins = timings
        .iter()
        .filter(|t| t.fused_seconds <= t.unfused_seconds)
        .count();
    let share = wins as f64 / timings.len().max(1) as f64;
    SoftCheck::new(
        "fusion-speedup",
        !timings.is_empty() && share >= FUSION_WIN_SHARE,
        format!("fused faster on {wins}/{} conv layers", timings.len()),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTiming {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub fixed_seconds: f64,
    pub dynamic_seconds: f64,
}

impl ParamTiming {
    /// Dynamic throughput over fixed throughput.
    pub fn ratio(&self) -> f64 {
        self.fixed_seconds / self.dynamic_seconds
    }
}

/// Distinct `(m, n, k)` GEMM shapes of the conv and dense layers.
pub fn gemm_shapes(model: &ModelSpec, batch: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes = BTreeSet::new();
    for (_, d, input) in model.conv_layers() {
        let g = d.geometry(input.with_batch(batch))?;
        shapes.insert((g.m, g.n, g.k));
    }
    for l in &model.layers {
        if l.kind() == LayerKind::Dense {
            shapes.insert((l.output_shape.channels, batch, l.input_shape.item_len()));
        }
    }
    Ok(shapes.into_iter().collect())
}

/// Times each GEMM shape of `model` with the BLIS default blocking and with
/// the shape-dependent selection.
pub fn measure_cache_params(
    model: &ModelSpec,
    batch: usize,
    threads: usize,
    hw: &CacheHierarchy,
    reps: usize,
) -> Result<Vec<ParamTiming>> {
    let fixed = GemmConfig::new(GemmCacheParams::BLIS_DEFAULT, LoopVariant::A2B1, threads);
    let mut out = Vec::new();
    for (m, n, k) in gemm_shapes(model, batch)? {
        let a = Tensor::new(Shape::new(1, 1, m, k), Layout::Nhwc, Fill::Random(1))?;
        let b = Tensor::new(Shape::new(1, 1, k, n), Layout::Nhwc, Fill::Random(2))?;
        let mut c = vec![0.0f32; m * n];
        let av = MatrixView::row_major(a.data(), m, k)?;
        let bv = MatrixView::row_major(b.data(), k, n)?;
        let (params, variant) = select_cache_params(m, n, k, hw);
        let dynamic = GemmConfig::new(params, variant, threads);
        let mut time = |cfg: &GemmConfig| {
            best_of(reps, || {
                let mut cv = MatrixViewMut::row_major(&mut c, m, n)?;
                gemm(
                    &av,
                    &bv,
                    &mut cv,
                    &cfg.with_kernel(KernelKind::Auto),
                    &Epilogue::None,
                )?;
                Ok(())
            })
        };
        let fixed_seconds = time(&fixed)?;
        let dynamic_seconds = time(&dynamic)?;
        out.push(ParamTiming {
            m,
            n,
            k,
            fixed_seconds,
            dynamic_seconds,
        });
    }
    Ok(out)
}

pub fn cache_param_check(timings: &[ParamTiming]) -> SoftCheck {
    let mean = timings.iter().map(ParamTiming::ratio).sum::<f64>() / timings.len().max(1) as f64;
    SoftCheck::new(
        "dynamic-cache-params",
        !timings.is_empty() && mean >= CACHE_PARAM_RATIO,
        format!(
            "mean dynamic/fixed throughput {mean:.3} over {} shapes",
            timings.len()
        ),
    )
}
