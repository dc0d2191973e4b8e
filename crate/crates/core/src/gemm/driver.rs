//! The five-loop blocked GEMM, `C += A·B`.
//!
//! A2B1 (classic order):
//!
//! ```text
//! for jc in 0..n step nc            L1
//!   for pc in 0..k step kc          L2   pack B(pc.., jc..) -> Bc   (shared)
//!     for ic in 0..m step mc        L3   pack A(ic.., pc..) -> Ac   (per thread)
//!       for jr in 0..nc step nr     L4
//!         for ir in 0..mc step mr   L5   Cr += Ar·Br
//! ```
//!
//! B2A1 swaps L1 with L3 and L4 with L5, so `Bc` is reused across the `ir`
//! loop from L2 while one `Ar` panel stays in L1.
//!
//! Threads own disjoint parts of `C`: row panels in A2B1 (the `ic` loop, with
//! `Bc` packed cooperatively between two barriers), column panels in B2A1.
//! Every element's reduction order depends only on `kc`, so results are
//! bitwise identical for any thread count.

use std::sync::Barrier;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::epilogue::Epilogue;
use crate::gemm::kernel::{self, KernelKind, Tile, MR, NR};
use crate::gemm::pack::{pack_a_into, PackB};
use crate::gemm::params::{round_up, GemmCacheParams, LoopVariant};
use crate::parallel::split_range;
use crate::tensor::{MatrixView, MatrixViewMut};

const F32: usize = std::mem::size_of::<f32>();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmConfig {
    pub params: GemmCacheParams,
    pub variant: LoopVariant,
    pub threads: usize,
    pub kernel: KernelKind,
}

impl Default for GemmConfig {
    fn default() -> Self {
        GemmConfig {
            params: GemmCacheParams::BLIS_DEFAULT,
            variant: LoopVariant::A2B1,
            threads: 1,
            kernel: KernelKind::Auto,
        }
    }
}

impl GemmConfig {
    pub fn new(params: GemmCacheParams, variant: LoopVariant, threads: usize) -> Self {
        GemmConfig {
            params,
            variant,
            threads,
            kernel: KernelKind::Auto,
        }
    }

    pub fn with_kernel(mut self, kernel: KernelKind) -> Self {
        self.kernel = kernel;
        self
    }
}

/// Counters collected during one GEMM call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmStats {
    /// Packing buffers allocated (each `Ac`/`Bc` counts once).
    pub pack_buffer_allocs: usize,
    /// Bytes of all packing buffers plus peak column-table bytes.
    pub aux_bytes: usize,
    /// Logical elements copied into `Ac` buffers.
    pub a_packed: usize,
    /// Logical elements copied or gathered into `Bc` buffers.
    pub b_packed: usize,
    pub microkernel_calls: usize,
    /// Output elements that went through the epilogue.
    pub epilogue_elements: usize,
}

impl GemmStats {
    fn merge(&mut self, o: &GemmStats) {
        self.pack_buffer_allocs += o.pack_buffer_allocs;
        self.aux_bytes += o.aux_bytes;
        self.a_packed += o.a_packed;
        self.b_packed += o.b_packed;
        self.microkernel_calls += o.microkernel_calls;
        self.epilogue_elements += o.epilogue_elements;
    }
}

/// `C += A·B`, then `C = ep(C)` exactly once per element.
pub fn gemm(
    a: &MatrixView<'_>,
    b: &MatrixView<'_>,
    c: &mut MatrixViewMut<'_>,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
) -> Result<GemmStats> {
    gemm_source(a, b, c, cfg, ep, false)
}

/// GEMM against any packable `B` source. With `overwrite`, the initial
/// contents of `C` are ignored (`C = A·B`).
pub(crate) fn gemm_source<B: PackB>(
    a: &MatrixView<'_>,
    b: &B,
    c: &mut MatrixViewMut<'_>,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
    overwrite: bool,
) -> Result<GemmStats> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k || c.rows() != m || c.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "C({}×{}) += A({m}×{k}) · B({}×{n})",
            c.rows(),
            c.cols(),
            b.rows()
        )));
    }
    if cfg.threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    cfg.params.validate()?;
    ep.validate(m)?;

    let target = CTarget {
        ptr: c.as_mut_ptr(),
        rs: c.row_stride(),
        cs: c.col_stride(),
    };
    if m == 0 || n == 0 {
        return Ok(GemmStats::default());
    }
    if k == 0 {
        let mut st = GemmStats::default();
        for i in 0..m {
            for j in 0..n {
                let x = if overwrite { 0.0 } else { c.get(i, j) };
                c.set(i, j, ep.apply(i, x));
            }
        }
        if !ep.is_none() {
            st.epilogue_elements = m * n;
        }
        return Ok(st);
    }

    let job = Job {
        a,
        b,
        c: target,
        m,
        n,
        k,
        params: cfg.params,
        kind: cfg.kernel.resolve(),
        ep,
        overwrite,
    };
    Ok(match cfg.variant {
        LoopVariant::A2B1 => job.run_a2b1(cfg.threads),
        LoopVariant::B2A1 => job.run_b2a1(cfg.threads),
    })
}

/// Raw handle on the output matrix. Threads write disjoint tiles.
#[derive(Clone, Copy)]
struct CTarget {
    ptr: *mut f32,
    rs: usize,
    cs: usize,
}

// SAFETY: each tile of C is written by exactly one thread, and the view was
// bounds-checked at construction.
unsafe impl Send for CTarget {}
unsafe impl Sync for CTarget {}

impl CTarget {
    #[inline]
    unsafe fn load(&self, i0: usize, j0: usize, mv: usize, nv: usize, tile: &mut Tile) {
        if mv < MR || nv < NR {
            tile.fill(0.0);
        }
        if self.cs == 1 {
            for i in 0..mv {
                let src = self.ptr.add((i0 + i) * self.rs + j0);
                std::ptr::copy_nonoverlapping(src, tile.as_mut_ptr().add(i * NR), nv);
            }
        } else {
            for j in 0..nv {
                let src = self.ptr.add((j0 + j) * self.cs + i0 * self.rs);
                for i in 0..mv {
                    tile[i * NR + j] = *src.add(i * self.rs);
                }
            }
        }
    }

    #[inline]
    unsafe fn store(&self, i0: usize, j0: usize, mv: usize, nv: usize, tile: &Tile) {
        if self.cs == 1 {
            for i in 0..mv {
                let dst = self.ptr.add((i0 + i) * self.rs + j0);
                std::ptr::copy_nonoverlapping(tile.as_ptr().add(i * NR), dst, nv);
            }
        } else {
            for j in 0..nv {
                let dst = self.ptr.add((j0 + j) * self.cs + i0 * self.rs);
                for i in 0..mv {
                    *dst.add(i * self.rs) = tile[i * NR + j];
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SharedBuf(*mut f32);

// SAFETY: writers touch disjoint panels and are separated from readers by a
// barrier.
unsafe impl Send for SharedBuf {}
unsafe impl Sync for SharedBuf {}

/// Geometry of one macro-kernel invocation.
struct Block {
    ic: usize,
    jc: usize,
    mcur: usize,
    ncur: usize,
    kcur: usize,
    first: bool,
    last: bool,
}

struct Job<'j, 'a, B> {
    a: &'j MatrixView<'a>,
    b: &'j B,
    c: CTarget,
    m: usize,
    n: usize,
    k: usize,
    params: GemmCacheParams,
    kind: KernelKind,
    ep: &'j Epilogue<'j>,
    overwrite: bool,
}

impl<B: PackB> Job<'_, '_, B> {
    fn spawn<F>(threads: usize, worker: F) -> GemmStats
    where
        F: Fn(usize) -> GemmStats + Sync,
    {
        let mut total = GemmStats::default();
        if threads == 1 {
            total.merge(&worker(0));
            return total;
        }
        std::thread::scope(|s| {
            let worker = &worker;
            let handles: Vec<_> = (1..threads).map(|t| s.spawn(move || worker(t))).collect();
            total.merge(&worker(0));
            for h in handles {
                total.merge(&h.join().expect("gemm worker panicked"));
            }
        });
        total
    }

    fn run_a2b1(&self, threads: usize) -> GemmStats {
        let p = self.params;
        let (m, n, k) = (self.m, self.n, self.k);
        let kc_max = p.kc.min(k);
        let mut bc = vec![0.0f32; kc_max * round_up(p.nc.min(n), NR)];
        let bc_bytes = bc.len() * F32;
        let shared = SharedBuf(bc.as_mut_ptr());
        let barrier = Barrier::new(threads);
        let row_panels = m.div_ceil(MR);

        let mut total = Self::spawn(threads, |t| {
            // capture the whole wrapper, not its raw pointer field
            #[allow(clippy::redundant_locals)]
            let shared = shared;
            let mut st = GemmStats::default();
            let pr = split_range(row_panels, threads, t);
            let rows = (pr.start * MR).min(m)..(pr.end * MR).min(m);
            let mut ac = Vec::new();
            if !rows.is_empty() {
                ac = vec![0.0f32; round_up(p.mc.min(rows.len()), MR) * kc_max];
                st.pack_buffer_allocs += 1;
                st.aux_bytes += ac.len() * F32;
            }
            let mut table_peak = 0;
            for jc in (0..n).step_by(p.nc) {
                let ncur = p.nc.min(n - jc);
                let panels = ncur.div_ceil(NR);
                let mine = split_range(panels, threads, t);
                let my_cols =
                    (jc + mine.start * NR).min(jc + ncur)..(jc + mine.end * NR).min(jc + ncur);
                let table = self.b.col_table(my_cols.clone());
                table_peak = table_peak.max(self.b.table_bytes(my_cols.len()));
                for pc in (0..k).step_by(p.kc) {
                    let kcur = p.kc.min(k - pc);
                    // previous readers of Bc are done
                    barrier.wait();
                    if !my_cols.is_empty() {
                        // SAFETY: panels `mine` of the current block are written only by this thread.
                        let dst = unsafe {
                            std::slice::from_raw_parts_mut(
                                shared.0.add(mine.start * NR * kcur),
                                mine.len() * NR * kcur,
                            )
                        };
                        st.b_packed += self.b.pack(&table, pc..pc + kcur, my_cols.clone(), NR, dst);
                    }
                    barrier.wait();
                    // SAFETY: no writer is active until the next barrier.
                    let bcv = unsafe { std::slice::from_raw_parts(shared.0, panels * NR * kcur) };
                    for ic in rows.clone().step_by(p.mc) {
                        let mcur = p.mc.min(rows.end - ic);
                        pack_a_into(self.a, ic..ic + mcur, pc..pc + kcur, MR, &mut ac);
                        st.a_packed += mcur * kcur;
                        let blk = Block {
                            ic,
                            jc,
                            mcur,
                            ncur,
                            kcur,
                            first: pc == 0,
                            last: pc + kcur == k,
                        };
                        self.macro_kernel(&ac, bcv, &blk, true, &mut st);
                    }
                }
            }
            st.aux_bytes += table_peak;
            st
        });
        total.pack_buffer_allocs += 1;
        total.aux_bytes += bc_bytes;
        drop(bc);
        total
    }

    fn run_b2a1(&self, threads: usize) -> GemmStats {
        let p = self.params;
        let (m, n, k) = (self.m, self.n, self.k);
        let kc_max = p.kc.min(k);
        let col_panels = n.div_ceil(NR);

        Self::spawn(threads, |t| {
            let mut st = GemmStats::default();
            let pr = split_range(col_panels, threads, t);
            let cols = (pr.start * NR).min(n)..(pr.end * NR).min(n);
            if cols.is_empty() {
                return st;
            }
            let mut ac = vec![0.0f32; round_up(p.mc.min(m), MR) * kc_max];
            let mut bc = vec![0.0f32; kc_max * round_up(p.nc.min(cols.len()), NR)];
            st.pack_buffer_allocs += 2;
            st.aux_bytes += (ac.len() + bc.len()) * F32 + self.b.table_bytes(p.nc.min(cols.len()));
            for ic in (0..m).step_by(p.mc) {
                let mcur = p.mc.min(m - ic);
                for pc in (0..k).step_by(p.kc) {
                    let kcur = p.kc.min(k - pc);
                    pack_a_into(self.a, ic..ic + mcur, pc..pc + kcur, MR, &mut ac);
                    st.a_packed += mcur * kcur;
                    for jc in cols.clone().step_by(p.nc) {
                        let ncur = p.nc.min(cols.end - jc);
                        let table = self.b.col_table(jc..jc + ncur);
                        st.b_packed +=
                            self.b
                                .pack(&table, pc..pc + kcur, jc..jc + ncur, NR, &mut bc);
                        let blk = Block {
                            ic,
                            jc,
                            mcur,
                            ncur,
                            kcur,
                            first: pc == 0,
                            last: pc + kcur == k,
                        };
                        self.macro_kernel(&ac, &bc, &blk, false, &mut st);
                    }
                }
            }
            st
        })
    }

    /// Iterates the micro-kernel over one packed `Ac`/`Bc` pair. `jr_outer`
    /// selects the A2B1 loop order (jr outside ir).
    fn macro_kernel(
        &self,
        ac: &[f32],
        bc: &[f32],
        blk: &Block,
        jr_outer: bool,
        st: &mut GemmStats,
    ) {
        let kc = blk.kcur;
        let mp = blk.mcur.div_ceil(MR);
        let np = blk.ncur.div_ceil(NR);
        let fused = blk.last && !self.ep.is_none();
        let fresh = blk.first && self.overwrite;
        let mut tile: Tile = [0.0; MR * NR];
        let mut step = |ir: usize, jr: usize| {
            let (i0, j0) = (blk.ic + ir * MR, blk.jc + jr * NR);
            let mv = MR.min(blk.mcur - ir * MR);
            let nv = NR.min(blk.ncur - jr * NR);
            if fresh {
                tile.fill(0.0);
            } else {
                // SAFETY: (i0, j0, mv, nv) lies inside C.
                unsafe { self.c.load(i0, j0, mv, nv, &mut tile) };
            }
            let te = if fused { self.ep.tile(i0, mv) } else { None };
            let a = &ac[ir * MR * kc..(ir + 1) * MR * kc];
            let b = &bc[jr * NR * kc..(jr + 1) * NR * kc];
            kernel::run(self.kind, kc, a, b, &mut tile, te.as_ref());
            // SAFETY: as above.
            unsafe { self.c.store(i0, j0, mv, nv, &tile) };
            st.microkernel_calls += 1;
            if fused {
                st.epilogue_elements += mv * nv;
            }
        };
        if jr_outer {
            for jr in 0..np {
                for ir in 0..mp {
                    step(ir, jr);
                }
            }
        } else {
            for ir in 0..mp {
                for jr in 0..np {
                    step(ir, jr);
                }
            }
        }
    }
}
