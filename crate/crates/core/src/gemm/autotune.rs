//! Empirical selection of blocking parameters for one GEMM shape.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::driver::{gemm, GemmConfig};
use crate::gemm::epilogue::Epilogue;
use crate::gemm::kernel::{KernelKind, MR, NR};
use crate::gemm::params::{
    round_up, select_cache_params, CacheHierarchy, GemmCacheParams, LoopVariant, ParamRecord,
    ParamTable,
};
use crate::tensor::{Fill, Layout, MatrixView, MatrixViewMut, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneCandidate {
    pub params: GemmCacheParams,
    pub variant: LoopVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    pub kernel: KernelKind,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            warmup: 1,
            reps: 3,
            threads: 1,
            kernel: KernelKind::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub params: GemmCacheParams,
    pub variant: LoopVariant,
    /// Median GFLOPS of the winner.
    pub gflops: f64,
    /// Median GFLOPS of every candidate, in grid order.
    pub measured: Vec<(TuneCandidate, f64)>,
}

impl TuneResult {
    pub fn record(&self) -> ParamRecord {
        ParamRecord {
            m: self.m,
            n: self.n,
            k: self.k,
            params: self.params,
            variant: self.variant,
        }
    }

    pub fn insert_into(&self, table: &mut ParamTable) {
        table.insert(self.m, self.n, self.k, self.params, self.variant);
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Candidates around the heuristic choice: the heuristic itself, the BLIS
/// defaults, and the heuristic with each stride halved or doubled, for both
/// loop orders. Duplicates are removed.
pub fn default_grid(m: usize, n: usize, k: usize, hw: &CacheHierarchy) -> Vec<TuneCandidate> {
    let (base, variant) = select_cache_params(m, n, k, hw);
    let mut grid = vec![
        TuneCandidate {
            params: base,
            variant,
        },
        TuneCandidate {
            params: GemmCacheParams::BLIS_DEFAULT,
            variant: LoopVariant::A2B1,
        },
    ];
    let scale = |x: usize, num: usize, den: usize, to: usize| round_up((x * num / den).max(1), to);
    for v in [LoopVariant::A2B1, LoopVariant::B2A1] {
        for (num, den) in [(1, 2), (1, 1), (2, 1)] {
            let kc = (base.kc * num / den).clamp(1, k.max(1));
            let mc = scale(base.mc, num, den, MR).min(round_up(m, MR));
            let nc = scale(base.nc, num, den, NR).min(round_up(n, NR));
            grid.push(TuneCandidate {
                params: GemmCacheParams {
                    mc,
                    nc,
                    kc,
                    mr: MR,
                    nr: NR,
                },
                variant: v,
            });
        }
    }
    let mut seen = Vec::new();
    grid.retain(|c| {
        if seen.contains(c) {
            false
        } else {
            seen.push(*c);
            true
        }
    });
    grid
}

/// Times every candidate on random operands and returns the arg-max by
/// median throughput. Ties keep the earliest candidate.
pub fn autotune(
    m: usize,
    n: usize,
    k: usize,
    grid: &[TuneCandidate],
    opts: &TuneOptions,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::Config(
            "autotune needs at least one candidate".into(),
        ));
    }
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cannot tune empty shape {m}×{n}×{k}"
        )));
    }
    let a = Tensor::new(Shape::new(1, 1, m, k), Layout::Nhwc, Fill::Random(11))?;
    let b = Tensor::new(Shape::new(1, 1, k, n), Layout::Nhwc, Fill::Random(12))?;
    let mut c = vec![0.0f32; m * n];
    let av = MatrixView::row_major(a.data(), m, k)?;
    let bv = MatrixView::row_major(b.data(), k, n)?;
    let flops = 2.0 * m as f64 * n as f64 * k as f64;

    let mut measured = Vec::with_capacity(grid.len());
    for cand in grid {
        let cfg = GemmConfig {
            params: cand.params,
            variant: cand.variant,
            threads: opts.threads.max(1),
            kernel: opts.kernel,
        };
        let mut rates = Vec::with_capacity(opts.reps.max(1));
        for rep in 0..opts.warmup + opts.reps.max(1) {
            c.fill(0.0);
            let mut cv = MatrixViewMut::row_major(&mut c, m, n)?;
            let t0 = Instant::now();
            gemm(&av, &bv, &mut cv, &cfg, &Epilogue::None)?;
            let dt = t0.elapsed().as_secs_f64().max(1e-9);
            if rep >= opts.warmup {
                rates.push(flops / dt / 1e9);
            }
        }
        measured.push((*cand, median(&mut rates)));
    }
    let (best, gflops) = measured
        .iter()
        .fold(None::<(TuneCandidate, f64)>, |acc, &(c, r)| match acc {
            Some((_, br)) if br >= r => acc,
            _ => Some((c, r)),
        })
        .expect("grid is non-empty");
    Ok(TuneResult {
        m,
        n,
        k,
        params: best.params,
        variant: best.variant,
        gflops,
        measured,
    })
}
