//! Reference implementations shared by the integration tests. They are kept
//! deliberately naive and accumulate in `f64`.

#![allow(dead_code)]

use cnn_engine::{ConvDescriptor, MatrixView, Shape, Tensor};

/// `C + A·B` by the textbook triple loop.
pub fn gemm_oracle(a: &MatrixView, b: &MatrixView, c0: &[f32]) -> Vec<f64> {
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let mut c: Vec<f64> = c0.iter().map(|&v| v as f64).collect();
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a.get(i, p) as f64 * b.get(p, j) as f64;
            }
            c[i * n + j] += acc;
        }
    }
    c
}

/// Direct convolution over NHWC input and `(cout, kh, kw, cin)` filters.
pub fn conv_oracle(x: &Tensor, w: &Tensor, d: &ConvDescriptor) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let ho = (s.height + 2 * d.ph - d.kh) / d.sh + 1;
    let wo = (s.width + 2 * d.pw - d.kw) / d.sw + 1;
    let os = Shape::new(s.batch, ho, wo, d.cout);
    let mut y = vec![0.0f64; os.len()];
    for b in 0..s.batch {
        for oh in 0..ho {
            for ow in 0..wo {
                for co in 0..d.cout {
                    let mut acc = 0.0f64;
                    for r in 0..d.kh {
                        for q in 0..d.kw {
                            let ih = (oh * d.sh + r) as isize - d.ph as isize;
                            let iw = (ow * d.sw + q) as isize - d.pw as isize;
                            if ih < 0 || iw < 0 || ih >= s.height as isize || iw >= s.width as isize
                            {
                                continue;
                            }
                            for ci in 0..d.cin {
                                acc += x.get(b, ih as usize, iw as usize, ci) as f64
                                    * w.get(co, r, q, ci) as f64;
                            }
                        }
                    }
                    y[((b * ho + oh) * wo + ow) * d.cout + co] = acc;
                }
            }
        }
    }
    (os, y)
}

pub fn rel_frobenius(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        num += (*g as f64 - w).powi(2);
        den += w * w;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Distance in units in the last place between two finite floats.
pub fn ulp_distance(a: f32, b: f32) -> u64 {
    if a == b {
        return 0;
    }
    let key = |v: f32| {
        let bits = v.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

pub fn max_ulp(a: &[f32], b: &[f32]) -> u64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| ulp_distance(*x, *y))
        .max()
        .unwrap_or(0)
}
