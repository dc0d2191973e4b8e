//! Inference-time operators other than convolution.
//!
//! Every operator has an `_into` form writing to a caller-owned buffer (the
//! engine preallocates all activations) and a threads argument; work is split
//! over the outermost extent with [`for_each_chunk_mut`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Epilogue, GemmConfig, GemmStats};
use crate::parallel::for_each_chunk_mut;
use crate::simd;
use crate::tensor::{output_extent, Layout, MatrixView, MatrixViewMut, Shape, Tensor};

pub const DEFAULT_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let p = BatchNormParams {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters whose fold is exactly `scale = 1, shift = 0`.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Parameter(format!(
                "batchnorm arrays have lengths {}/{}/{}/{}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if let Some(i) = self
            .running_var
            .iter()
            .position(|v| (v + self.eps).is_nan() || v + self.eps <= 0.0)
        {
            return Err(Error::Parameter(format!(
                "channel {i}: var + eps = {} is not positive",
                self.running_var[i] + self.eps
            )));
        }
        Ok(())
    }

    /// Reference application straight from the definition.
    pub fn apply(&self, c: usize, x: f32) -> f32 {
        self.gamma[c] * (x - self.running_mean[c]) / (self.running_var[c] + self.eps).sqrt()
            + self.beta[c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedBatchNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl FoldedBatchNorm {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn epilogue(&self, relu: bool) -> Epilogue<'_> {
        if relu {
            Epilogue::BatchNormRelu {
                scale: &self.scale,
                shift: &self.shift,
            }
        } else {
            Epilogue::BatchNorm {
                scale: &self.scale,
                shift: &self.shift,
            }
        }
    }
}

/// `scale = γ / √(var + ε)`, `shift = β − scale·mean`, evaluated in double
/// precision and rounded once.
pub fn fold_batchnorm(p: &BatchNormParams) -> Result<FoldedBatchNorm> {
    p.validate()?;
    let mut scale = Vec::with_capacity(p.channels());
    let mut shift = Vec::with_capacity(p.channels());
    for c in 0..p.channels() {
        let s = p.gamma[c] as f64 / (p.running_var[c] as f64 + p.eps as f64).sqrt();
        scale.push(s as f32);
        shift.push((p.beta[c] as f64 - s * p.running_mean[c] as f64) as f32);
    }
    Ok(FoldedBatchNorm { scale, shift })
}

fn require_nhwc(x: &Tensor, what: &str) -> Result<()> {
    if x.layout() != Layout::Nhwc {
        return Err(Error::InvalidShape(format!(
            "{what} expects an NHWC tensor"
        )));
    }
    Ok(())
}

fn require_out(out: &Tensor, shape: Shape) -> Result<()> {
    if out.shape() != shape {
        return Err(Error::DimensionMismatch(format!(
            "output buffer {} does not match {}",
            out.shape(),
            shape
        )));
    }
    Ok(())
}

/// Rows of `c` elements handed to one thread at a time.
fn row_unit(c: usize, len: usize) -> usize {
    // keep chunks a few KiB long so tiny tensors do not fan out
    let rows = (2048 / c.max(1)).max(1);
    (rows * c).min(len.max(1))
}

pub fn batchnorm_inference_into(
    x: &Tensor,
    f: &FoldedBatchNorm,
    relu: bool,
    threads: usize,
    out: &mut Tensor,
) -> Result<()> {
    require_nhwc(x, "batchnorm")?;
    let c = x.shape().channels;
    if f.channels() != c || f.shift.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "batchnorm has {} channels, input has {c}",
            f.channels()
        )));
    }
    require_out(out, x.shape())?;
    let xs = x.data();
    let unit = row_unit(c, xs.len());
    let unit = unit - unit % c;
    for_each_chunk_mut(threads, out.data_mut(), unit, |u0, chunk| {
        let start = u0 * unit;
        simd::affine_channels(
            &xs[start..start + chunk.len()],
            &f.scale,
            &f.shift,
            relu,
            chunk,
        );
    });
    Ok(())
}

pub fn batchnorm_inference(x: &Tensor, f: &FoldedBatchNorm, threads: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape())?;
    batchnorm_inference_into(x, f, false, threads, &mut out)?;
    Ok(out)
}

fn elementwise_into<F>(xs: &[f32], threads: usize, out: &mut [f32], f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let unit = row_unit(1, xs.len());
    for_each_chunk_mut(threads, out, unit, |u0, chunk| f(u0 * unit, chunk));
}

pub fn relu_into(x: &Tensor, threads: usize, out: &mut Tensor) -> Result<()> {
    require_out(out, x.shape())?;
    let xs = x.data();
    elementwise_into(xs, threads, out.data_mut(), |s, chunk| {
        simd::relu_slice(&xs[s..s + chunk.len()], chunk)
    });
    Ok(())
}

pub fn relu(x: &Tensor, threads: usize) -> Result<Tensor> {
    let mut out = Tensor::from_vec(x.shape(), x.layout(), vec![0.0; x.len()])?;
    relu_into(x, threads, &mut out)?;
    Ok(out)
}

pub fn residual_add_into(a: &Tensor, b: &Tensor, threads: usize, out: &mut Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.layout() != b.layout() {
        return Err(Error::DimensionMismatch(format!(
            "cannot add {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    require_out(out, a.shape())?;
    let (xa, xb) = (a.data(), b.data());
    elementwise_into(xa, threads, out.data_mut(), |s, chunk| {
        let e = s + chunk.len();
        simd::add_slices(&xa[s..e], &xb[s..e], chunk)
    });
    Ok(())
}

pub fn residual_add(a: &Tensor, b: &Tensor, threads: usize) -> Result<Tensor> {
    let mut out = Tensor::from_vec(a.shape(), a.layout(), vec![0.0; a.len()])?;
    residual_add_into(a, b, threads, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Avg => "avg",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" | "average" => Ok(PoolMode::Avg),
            _ => Err(Error::Config(format!("unknown pooling mode `{s}`"))),
        }
    }
}

/// Pooling window. A `global` descriptor covers the whole spatial extent of
/// whatever input it is applied to; its window fields are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDescriptor {
    pub mode: PoolMode,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub global: bool,
}

impl PoolDescriptor {
    pub fn square(mode: PoolMode, k: usize, stride: usize, pad: usize) -> Self {
        PoolDescriptor {
            mode,
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
            global: false,
        }
    }

    pub fn global(mode: PoolMode) -> Self {
        PoolDescriptor {
            mode,
            kh: 0,
            kw: 0,
            sh: 1,
            sw: 1,
            ph: 0,
            pw: 0,
            global: true,
        }
    }

    /// The concrete window for an input shape.
    pub fn resolve(&self, input: Shape) -> Self {
        if self.global {
            PoolDescriptor {
                kh: input.height,
                kw: input.width,
                ..PoolDescriptor::square(self.mode, 1, 1, 0)
            }
        } else {
            *self
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let d = self.resolve(input);
        if d.kh == 0 || d.kw == 0 || d.sh == 0 || d.sw == 0 {
            return Err(Error::Geometry(format!(
                "pool window {}×{} stride {}×{} must be positive",
                d.kh, d.kw, d.sh, d.sw
            )));
        }
        if d.ph >= d.kh || d.pw >= d.kw {
            return Err(Error::Geometry(format!(
                "pool padding {}×{} must be smaller than the window {}×{}",
                d.ph, d.pw, d.kh, d.kw
            )));
        }
        let ho = output_extent(input.height, d.kh, d.sh, d.ph);
        let wo = output_extent(input.width, d.kw, d.sw, d.pw);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => {
                Ok(Shape::new(input.batch, ho, wo, input.channels))
            }
            _ => Err(Error::Geometry(format!(
                "pool window {}×{} does not fit input {}",
                d.kh, d.kw, input
            ))),
        }
    }
}

/// Pools an NHWC buffer of shape `shape` into `out`. Only indices of valid
/// input positions are ever formed; padded positions are skipped, which makes
/// them −∞ for max and excludes them from the average's divisor.
pub fn pool_slice(
    x: &[f32],
    shape: Shape,
    d: &PoolDescriptor,
    threads: usize,
    out: &mut [f32],
) -> Result<Shape> {
    let os = d.output_shape(shape)?;
    if x.len() != shape.len() || out.len() != os.len() {
        return Err(Error::DimensionMismatch(format!(
            "pool buffers of {} and {} elements for {} -> {}",
            x.len(),
            out.len(),
            shape,
            os
        )));
    }
    let d = d.resolve(shape);
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    for_each_chunk_mut(threads, out, c, |p0, chunk| {
        for (dp, px) in chunk.chunks_exact_mut(c).enumerate() {
            let p = p0 + dp;
            let ow = p % os.width;
            let oh = (p / os.width) % os.height;
            let b = p / (os.width * os.height);
            let h0 = (oh * d.sh).saturating_sub(d.ph);
            let h1 = (oh * d.sh + d.kh - d.ph).min(h);
            let w0 = (ow * d.sw).saturating_sub(d.pw);
            let w1 = (ow * d.sw + d.kw - d.pw).min(w);
            match d.mode {
                PoolMode::Max => px.fill(f32::NEG_INFINITY),
                PoolMode::Avg => px.fill(0.0),
            }
            for ih in h0..h1 {
                for iw in w0..w1 {
                    let src = &x[((b * h + ih) * w + iw) * c..][..c];
                    match d.mode {
                        PoolMode::Max => {
                            for (o, v) in px.iter_mut().zip(src) {
                                if *v > *o {
                                    *o = *v;
                                }
                            }
                        }
                        PoolMode::Avg => {
                            for (o, v) in px.iter_mut().zip(src) {
                                *o += *v;
                            }
                        }
                    }
                }
            }
            if d.mode == PoolMode::Avg {
                let count = ((h1 - h0) * (w1 - w0)) as f32;
                for o in px.iter_mut() {
                    *o /= count;
                }
            }
        }
    });
    Ok(os)
}

pub fn pool_into(x: &Tensor, d: &PoolDescriptor, threads: usize, out: &mut Tensor) -> Result<()> {
    require_nhwc(x, "pool")?;
    require_out(out, d.output_shape(x.shape())?)?;
    pool_slice(x.data(), x.shape(), d, threads, out.data_mut())?;
    Ok(())
}

pub fn pool(x: &Tensor, d: &PoolDescriptor, threads: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(d.output_shape(x.shape())?)?;
    pool_into(x, d, threads, &mut out)?;
    Ok(out)
}

/// Output shape of a dense layer: one feature vector per batch item.
pub fn dense_output_shape(input: Shape, out_features: usize) -> Shape {
    Shape::new(input.batch, 1, 1, out_features)
}

/// Fully connected layer on the flattened per-item features of `x`.
///
/// `w` holds `out × in` weights row-major (shape `(out, 1, 1, in)`). The
/// output is initialized with the bias and the GEMM accumulates onto it.
pub fn dense_into(
    x: &Tensor,
    w: &Tensor,
    bias: &[f32],
    cfg: &GemmConfig,
    out: &mut Tensor,
) -> Result<GemmStats> {
    require_nhwc(x, "dense")?;
    let t = x.shape().batch;
    let fin = x.shape().item_len();
    let fout = bias.len();
    if w.len() != fout * fin || w.shape().batch != fout {
        return Err(Error::DimensionMismatch(format!(
            "dense weights {} do not map {fin} features to {fout}",
            w.shape()
        )));
    }
    require_out(out, dense_output_shape(x.shape(), fout))?;
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias);
    }
    // Y^T (out × t) += W (out × in) · X^T (in × t)
    let a = MatrixView::row_major(w.data(), fout, fin)?;
    let b = MatrixView::new(x.data(), fin, t, 1, fin)?;
    let mut c = MatrixViewMut::new(out.data_mut(), fout, t, 1, fout)?;
    gemm(&a, &b, &mut c, cfg, &Epilogue::None)
}

pub fn dense(x: &Tensor, w: &Tensor, bias: &[f32], cfg: &GemmConfig) -> Result<Tensor> {
    let mut out = Tensor::zeros(dense_output_shape(x.shape(), bias.len()))?;
    dense_into(x, w, bias, cfg, &mut out)?;
    Ok(out)
}

/// Numerically stable softmax over the channels of every pixel.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    require_nhwc(x, "softmax")?;
    let c = x.shape().channels;
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(x.shape(), Layout::Nhwc, data)
}
