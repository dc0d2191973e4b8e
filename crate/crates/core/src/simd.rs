//! Runtime vector-unit detection and the elementwise vector loops shared by
//! the standalone layers.
//!
//! Every routine here has a scalar twin that performs the same IEEE
//! operations (`mul_add`, compare-and-select) so both paths are bitwise
//! identical.

use std::sync::OnceLock;

/// True when the AVX2+FMA code paths can run on this CPU.
pub fn vector_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(detect)
}

#[cfg(target_arch = "x86_64")]
fn detect() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

#[cfg(not(target_arch = "x86_64"))]
fn detect() -> bool {
    false
}

/// ReLU as compare-and-select: NaN and -0.0 map to +0.0.
#[inline(always)]
pub fn relu_scalar(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `out[i] = x[i]·scale[i % c] + shift[i % c]` (fused), optionally followed by
/// ReLU, where `c = scale.len()` and `x.len()` is a multiple of `c`.
pub fn affine_channels(x: &[f32], scale: &[f32], shift: &[f32], relu: bool, out: &mut [f32]) {
    let c = scale.len();
    debug_assert_eq!(shift.len(), c);
    debug_assert_eq!(x.len(), out.len());
    debug_assert_eq!(x.len() % c.max(1), 0);
    #[cfg(target_arch = "x86_64")]
    if vector_available() {
        // SAFETY: AVX2 and FMA were detected at runtime.
        unsafe { avx2::affine_channels(x, scale, shift, relu, out) };
        return;
    }
    affine_channels_scalar(x, scale, shift, relu, out);
}

pub fn affine_channels_scalar(
    x: &[f32],
    scale: &[f32],
    shift: &[f32],
    relu: bool,
    out: &mut [f32],
) {
    let c = scale.len();
    for (xs, os) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for i in 0..c {
            let y = xs[i].mul_add(scale[i], shift[i]);
            os[i] = if relu { relu_scalar(y) } else { y };
        }
    }
}

pub fn relu_slice(x: &[f32], out: &mut [f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = relu_scalar(*v);
    }
}

pub fn add_slices(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::relu_scalar;

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn affine_channels(
        x: &[f32],
        scale: &[f32],
        shift: &[f32],
        relu: bool,
        out: &mut [f32],
    ) {
        let c = scale.len();
        let zero = _mm256_setzero_ps();
        let vec_end = c - c % 8;
        for (xs, os) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mut i = 0;
            while i < vec_end {
                let v = _mm256_loadu_ps(xs.as_ptr().add(i));
                let s = _mm256_loadu_ps(scale.as_ptr().add(i));
                let b = _mm256_loadu_ps(shift.as_ptr().add(i));
                let mut y = _mm256_fmadd_ps(v, s, b);
                if relu {
                    y = _mm256_max_ps(y, zero);
                }
                _mm256_storeu_ps(os.as_mut_ptr().add(i), y);
                i += 8;
            }
            for j in vec_end..c {
                let y = xs[j].mul_add(scale[j], shift[j]);
                os[j] = if relu { relu_scalar(y) } else { y };
            }
        }
    }
}
