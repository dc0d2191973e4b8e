//! The 8×8 micro-kernel.
//!
//! A call updates one register tile `Cr(8×8) += Ar(8×kc) · Br(kc×8)` as `kc`
//! rank-1 updates, one column of `Ar` times one row of `Br` per step. The tile
//! lives in a row-major `[f32; 64]` owned by the caller; loading it from and
//! storing it to `C` (with masking at ragged edges) happens in the driver.
//!
//! Both paths accumulate with fused multiply-add in the same order, so the
//! vector and scalar kernels agree bitwise.

use serde::{Deserialize, Serialize};

use crate::simd::{relu_scalar, vector_available};

pub const MR: usize = 8;
pub const NR: usize = 8;

pub type Tile = [f32; MR * NR];

/// Which micro-kernel implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelKind {
    /// Vector kernel when the CPU supports it, scalar otherwise.
    #[default]
    Auto,
    Scalar,
    Vector,
}

impl KernelKind {
    /// Resolves `Auto` and downgrades `Vector` on CPUs without AVX2+FMA.
    pub fn resolve(self) -> KernelKind {
        match self {
            KernelKind::Scalar => KernelKind::Scalar,
            _ if vector_available() => KernelKind::Vector,
            _ => KernelKind::Scalar,
        }
    }
}

/// Per-row epilogue coefficients for one tile: `y = relu?(x·scale + shift)`.
#[derive(Debug, Clone, Copy)]
pub struct TileEpilogue {
    pub scale: [f32; MR],
    pub shift: [f32; MR],
    pub relu: bool,
}

/// Runs the selected kernel. `a` holds `kc` columns of `MR` values, `b` holds
/// `kc` rows of `NR` values.
#[inline]
pub fn run(
    kind: KernelKind,
    kc: usize,
    a: &[f32],
    b: &[f32],
    tile: &mut Tile,
    ep: Option<&TileEpilogue>,
) {
    assert!(a.len() >= kc * MR && b.len() >= kc * NR);
    match kind {
        #[cfg(target_arch = "x86_64")]
        KernelKind::Vector | KernelKind::Auto if vector_available() => {
            // SAFETY: AVX2+FMA detected; panel lengths checked above.
            unsafe { avx2::kernel_8x8(kc, a.as_ptr(), b.as_ptr(), tile, ep) }
        }
        _ => scalar_8x8(kc, a, b, tile, ep),
    }
}

/// Portable reference kernel.
pub fn scalar_8x8(kc: usize, a: &[f32], b: &[f32], tile: &mut Tile, ep: Option<&TileEpilogue>) {
    for p in 0..kc {
        let col = &a[p * MR..p * MR + MR];
        let row = &b[p * NR..p * NR + NR];
        for i in 0..MR {
            let ai = col[i];
            let t = &mut tile[i * NR..i * NR + NR];
            for j in 0..NR {
                t[j] = ai.mul_add(row[j], t[j]);
            }
        }
    }
    if let Some(ep) = ep {
        for i in 0..MR {
            for j in 0..NR {
                let y = tile[i * NR + j].mul_add(ep.scale[i], ep.shift[i]);
                tile[i * NR + j] = if ep.relu { relu_scalar(y) } else { y };
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{Tile, TileEpilogue, MR, NR};

    /// Eight 8-lane accumulators, one per row of `Cr`. Each step broadcasts
    /// the eight entries of the current `Ar` column against the current `Br`
    /// row; the next `Br` row is loaded one iteration ahead.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn kernel_8x8(
        kc: usize,
        a: *const f32,
        b: *const f32,
        tile: &mut Tile,
        ep: Option<&TileEpilogue>,
    ) {
        let t = tile.as_mut_ptr();
        let mut c0 = _mm256_loadu_ps(t);
        let mut c1 = _mm256_loadu_ps(t.add(8));
        let mut c2 = _mm256_loadu_ps(t.add(16));
        let mut c3 = _mm256_loadu_ps(t.add(24));
        let mut c4 = _mm256_loadu_ps(t.add(32));
        let mut c5 = _mm256_loadu_ps(t.add(40));
        let mut c6 = _mm256_loadu_ps(t.add(48));
        let mut c7 = _mm256_loadu_ps(t.add(56));

        if kc > 0 {
            let mut b_cur = _mm256_loadu_ps(b);
            for p in 0..kc {
                let ap = a.add(p * MR);
                // one step ahead; the final iteration re-reads the last row
                let b_next = _mm256_loadu_ps(b.add((p + 1).min(kc - 1) * NR));
                c0 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap), b_cur, c0);
                c1 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(1)), b_cur, c1);
                c2 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(2)), b_cur, c2);
                c3 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(3)), b_cur, c3);
                c4 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(4)), b_cur, c4);
                c5 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(5)), b_cur, c5);
                c6 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(6)), b_cur, c6);
                c7 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*ap.add(7)), b_cur, c7);
                b_cur = b_next;
            }
        }

        if let Some(ep) = ep {
            let zero = _mm256_setzero_ps();
            let mut rows = [c0, c1, c2, c3, c4, c5, c6, c7];
            for (i, r) in rows.iter_mut().enumerate() {
                let y =
                    _mm256_fmadd_ps(*r, _mm256_set1_ps(ep.scale[i]), _mm256_set1_ps(ep.shift[i]));
                *r = if ep.relu { _mm256_max_ps(y, zero) } else { y };
            }
            [c0, c1, c2, c3, c4, c5, c6, c7] = rows;
        }

        _mm256_storeu_ps(t, c0);
        _mm256_storeu_ps(t.add(8), c1);
        _mm256_storeu_ps(t.add(16), c2);
        _mm256_storeu_ps(t.add(24), c3);
        _mm256_storeu_ps(t.add(32), c4);
        _mm256_storeu_ps(t.add(40), c5);
        _mm256_storeu_ps(t.add(48), c6);
        _mm256_storeu_ps(t.add(56), c7);
    }
}
