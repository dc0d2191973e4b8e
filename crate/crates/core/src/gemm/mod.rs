//! Cache-blocked GEMM with packing, an 8×8 register micro-kernel, two loop
//! orders, runtime parameter selection and fused epilogues.

mod autotune;
mod driver;
mod epilogue;
pub mod kernel;
mod pack;
mod params;

pub use autotune::{autotune, default_grid, median, TuneCandidate, TuneOptions, TuneResult};
pub(crate) use driver::gemm_source;
pub use driver::{gemm, GemmConfig, GemmStats};
pub use epilogue::Epilogue;
pub use kernel::{KernelKind, MR, NR};
pub use pack::{pack_a, pack_b, PackB, PackedBuffer, PanelKind};
pub use params::{
    select_cache_params, select_cache_params_with, shape_bucket, CacheHierarchy, CacheLevel,
    GemmCacheParams, LoopVariant, ParamRecord, ParamTable, B2A1_ASPECT, B2A1_MAX_M,
    PARAM_TABLE_HEADER,
};

use crate::error::{Error, Result};
use crate::tensor::MatrixViewMut;

/// One micro-kernel update on an explicit output tile.
///
/// `ar` holds `kc` columns of [`MR`] values and `br` holds `kc` rows of
/// [`NR`] values (packed panels). `cr` may be smaller than `MR × NR`; the
/// extra lanes compute on zero padding and are masked on store. Without
/// `accumulate` the previous contents of `cr` are ignored. When
/// `apply_epilogue` is set, `ep` (indexed by `cr` row) is applied before the
/// store.
#[allow(clippy::too_many_arguments)]
pub fn microkernel(
    ar: &[f32],
    br: &[f32],
    kc: usize,
    cr: &mut MatrixViewMut<'_>,
    accumulate: bool,
    ep: &Epilogue<'_>,
    apply_epilogue: bool,
    kind: KernelKind,
) -> Result<()> {
    let (mv, nv) = (cr.rows(), cr.cols());
    if mv > MR || nv > NR {
        return Err(Error::DimensionMismatch(format!(
            "micro-tile {mv}×{nv} exceeds {MR}×{NR}"
        )));
    }
    if ar.len() < kc * MR || br.len() < kc * NR {
        return Err(Error::DimensionMismatch(format!(
            "panels of {} and {} values are too short for kc={kc}",
            ar.len(),
            br.len()
        )));
    }
    if apply_epilogue {
        ep.validate(mv)?;
    }
    let mut tile = [0.0f32; MR * NR];
    if accumulate {
        for i in 0..mv {
            for j in 0..nv {
                tile[i * NR + j] = cr.get(i, j);
            }
        }
    }
    let te = if apply_epilogue { ep.tile(0, mv) } else { None };
    kernel::run(kind.resolve(), kc, ar, br, &mut tile, te.as_ref());
    for i in 0..mv {
        for j in 0..nv {
            cr.set(i, j, tile[i * NR + j]);
        }
    }
    Ok(())
}
