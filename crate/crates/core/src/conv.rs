//! Convolution lowered onto the blocked GEMM.
//!
//! The lowered problem is `C(cout × n) = A(cout × k) · B(k × n)` with
//! `A` the filter tensor `(cout, kh, kw, cin)` read as a row-major matrix and
//! `B` the im2col matrix of the input. Rows of `B` are indexed by
//! `p = (r·kw + s)·cin + ci` and columns by `q = (b·ho + oh)·wo + ow`; element
//! `(p, q)` is `x[b, oh·sh − ph + r, ow·sw − pw + s, ci]`, or zero when that
//! position falls in the padding.
//!
//! `C` is written straight into the NHWC output: row `co`, column `q` lives
//! at `q·cout + co`, so the GEMM row index is the output channel.
//!
//! Two lowerings are provided. [`conv_im2col_gemm`] materializes `B` in full
//! before calling GEMM. [`conv_gemm`] never builds `B`: its packing routine
//! gathers each `kc × nc` block straight from the input tensor using a
//! per-column index table rebuilt once per `nc` slice.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{
    gemm_source, Epilogue, GemmCacheParams, GemmConfig, GemmStats, LoopVariant, PackB, MR, NR,
};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{
    ConvDescriptor, ConvGeometry, Layout, MatrixView, MatrixViewMut, Shape, Tensor,
};

const F32: usize = std::mem::size_of::<f32>();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConvAlgorithm {
    Im2colGemm,
    ConvGemm,
}

impl fmt::Display for ConvAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvAlgorithm::Im2colGemm => "im2col",
            ConvAlgorithm::ConvGemm => "convgemm",
        })
    }
}

impl FromStr for ConvAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "im2col" | "im2col-gemm" | "im2colgemm" => Ok(ConvAlgorithm::Im2colGemm),
            "convgemm" | "conv-gemm" => Ok(ConvAlgorithm::ConvGemm),
            _ => Err(Error::Config(format!(
                "unknown convolution algorithm `{s}`"
            ))),
        }
    }
}

/// Largest output-channel count for which a 1×1 convolution keeps the full
/// im2col lowering.
pub const IM2COL_MAX_COUT: usize = 128;

/// Per-layer algorithm rule: small 1×1 layers keep the full im2col lowering,
/// everything else uses the blockwise one.
pub fn choose_algorithm(d: &ConvDescriptor, _input: Shape) -> ConvAlgorithm {
    if d.kh * d.kw == 1 && d.cout <= IM2COL_MAX_COUT {
        ConvAlgorithm::Im2colGemm
    } else {
        ConvAlgorithm::ConvGemm
    }
}

/// Input offset of im2col element `(p, q)`, or `None` for padding.
pub fn im2col_offset(d: &ConvDescriptor, g: &ConvGeometry, p: usize, q: usize) -> Option<usize> {
    let ci = p % d.cin;
    let rs = p / d.cin;
    let (r, s) = (rs / d.kw, rs % d.kw);
    let ow = q % g.wo;
    let oh = (q / g.wo) % g.ho;
    let b = q / (g.wo * g.ho);
    let ih = (oh * d.sh + r).checked_sub(d.ph)?;
    let iw = (ow * d.sw + s).checked_sub(d.pw)?;
    if ih >= g.height || iw >= g.width {
        return None;
    }
    Some(((b * g.height + ih) * g.width + iw) * d.cin + ci)
}

/// A fully materialized `k × n` im2col matrix, stored column by column
/// (`data[q·k + p]`) so each column is a run of contiguous input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2colMatrix {
    geometry: ConvGeometry,
    data: Vec<f32>,
}

impl Im2colMatrix {
    pub fn rows(&self) -> usize {
        self.geometry.k
    }

    pub fn cols(&self) -> usize {
        self.geometry.n
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, p: usize, q: usize) -> f32 {
        self.data[q * self.geometry.k + p]
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * F32
    }

    pub fn as_view(&self) -> MatrixView<'_> {
        MatrixView::new(
            &self.data,
            self.geometry.k,
            self.geometry.n,
            1,
            self.geometry.k,
        )
        .expect("im2col buffer matches its geometry")
    }
}

fn check_input(x: &Tensor, d: &ConvDescriptor) -> Result<ConvGeometry> {
    if x.layout() != Layout::Nhwc {
        return Err(Error::Geometry("convolution input must be NHWC".into()));
    }
    d.geometry(x.shape())
}

fn is_pointwise(d: &ConvDescriptor) -> bool {
    d.kh == 1 && d.kw == 1 && d.sh == 1 && d.sw == 1 && d.ph == 0 && d.pw == 0
}

/// Bytes a full im2col buffer for this layer would need.
pub fn im2col_bytes(g: &ConvGeometry) -> Option<usize> {
    g.k.checked_mul(g.n)?.checked_mul(F32)
}

/// Builds the full im2col matrix of `x`.
pub fn im2col(x: &Tensor, d: &ConvDescriptor) -> Result<Im2colMatrix> {
    im2col_threads(x, d, 1)
}

pub fn im2col_threads(x: &Tensor, d: &ConvDescriptor, threads: usize) -> Result<Im2colMatrix> {
    let g = check_input(x, d)?;
    let bytes = im2col_bytes(&g).ok_or(Error::Allocation {
        what: "im2col matrix",
        bytes: usize::MAX,
    })?;
    let len = g.k * g.n;
    let mut data: Vec<f32> = Vec::new();
    data.try_reserve_exact(len).map_err(|_| Error::Allocation {
        what: "im2col matrix",
        bytes,
    })?;
    if is_pointwise(d) {
        // a 1×1 stride-1 lowering is the NHWC buffer itself
        data.extend_from_slice(x.data());
    } else {
        data.resize(len, 0.0);
        fill_im2col(x.data(), d, &g, threads, &mut data);
    }
    Ok(Im2colMatrix { geometry: g, data })
}

fn fill_im2col(x: &[f32], d: &ConvDescriptor, g: &ConvGeometry, threads: usize, out: &mut [f32]) {
    let (h, w, c) = (g.height as isize, g.width as isize, d.cin);
    for_each_chunk_mut(threads, out, g.k, |q0, chunk| {
        for (dq, col) in chunk.chunks_exact_mut(g.k).enumerate() {
            let q = q0 + dq;
            let ow = q % g.wo;
            let oh = (q / g.wo) % g.ho;
            let b = q / (g.wo * g.ho);
            let ih0 = (oh * d.sh) as isize - d.ph as isize;
            let iw0 = (ow * d.sw) as isize - d.pw as isize;
            let base = b * g.height * g.width * c;
            for r in 0..d.kh {
                let ih = ih0 + r as isize;
                for s in 0..d.kw {
                    let iw = iw0 + s as isize;
                    let dst = &mut col[(r * d.kw + s) * c..][..c];
                    if ih >= 0 && ih < h && iw >= 0 && iw < w {
                        let off = base + ((ih * w + iw) as usize) * c;
                        dst.copy_from_slice(&x[off..off + c]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    });
}

#[derive(Debug, Clone, Copy)]
struct ColEntry {
    base: usize,
    ih0: isize,
    iw0: isize,
}

/// Column table for one `nc` slice of the virtual im2col matrix.
#[derive(Debug)]
pub struct ColTable {
    start: usize,
    entries: Vec<ColEntry>,
}

/// The im2col matrix of an input tensor, addressed through the index mapping
/// only. Packing gathers `kc × nc` blocks straight from the input.
#[derive(Debug, Clone, Copy)]
pub struct Im2colSource<'a> {
    x: &'a [f32],
    d: ConvDescriptor,
    g: ConvGeometry,
    pointwise: bool,
}

impl<'a> Im2colSource<'a> {
    pub fn new(x: &'a Tensor, d: &ConvDescriptor) -> Result<Self> {
        let g = check_input(x, d)?;
        Ok(Im2colSource {
            x: x.data(),
            d: *d,
            g,
            pointwise: is_pointwise(d),
        })
    }

    pub fn get(&self, p: usize, q: usize) -> f32 {
        im2col_offset(&self.d, &self.g, p, q).map_or(0.0, |o| self.x[o])
    }
}

impl PackB for Im2colSource<'_> {
    type ColTable = ColTable;

    fn rows(&self) -> usize {
        self.g.k
    }

    fn cols(&self) -> usize {
        self.g.n
    }

    fn col_table(&self, cols: Range<usize>) -> ColTable {
        let g = &self.g;
        let entries = if self.pointwise {
            Vec::new()
        } else {
            cols.clone()
                .map(|q| {
                    let ow = q % g.wo;
                    let oh = (q / g.wo) % g.ho;
                    let b = q / (g.wo * g.ho);
                    ColEntry {
                        base: b * g.height * g.width * self.d.cin,
                        ih0: (oh * self.d.sh) as isize - self.d.ph as isize,
                        iw0: (ow * self.d.sw) as isize - self.d.pw as isize,
                    }
                })
                .collect()
        };
        ColTable {
            start: cols.start,
            entries,
        }
    }

    fn table_bytes(&self, ncols: usize) -> usize {
        if self.pointwise {
            0
        } else {
            ncols * std::mem::size_of::<ColEntry>()
        }
    }

    fn pack(
        &self,
        table: &ColTable,
        rows: Range<usize>,
        cols: Range<usize>,
        nr: usize,
        dst: &mut [f32],
    ) -> usize {
        let kc = rows.len();
        let cin = self.d.cin;
        let (h, w) = (self.g.height as isize, self.g.width as isize);
        let panels = cols.len().div_ceil(nr);
        for (pj, panel) in dst[..panels * nr * kc]
            .chunks_exact_mut(nr * kc)
            .enumerate()
        {
            let j0 = cols.start + pj * nr;
            let nv = nr.min(cols.end - j0);
            if self.pointwise {
                // affine mapping: element (p, q) sits at q·cin + p
                for (dp, row) in panel.chunks_exact_mut(nr).enumerate() {
                    let p = rows.start + dp;
                    for (jj, v) in row[..nv].iter_mut().enumerate() {
                        *v = self.x[(j0 + jj) * cin + p];
                    }
                    row[nv..].fill(0.0);
                }
                continue;
            }
            let entries = &table.entries[j0 - table.start..][..nv];
            for (dp, row) in panel.chunks_exact_mut(nr).enumerate() {
                let p = rows.start + dp;
                let ci = p % cin;
                let rs = p / cin;
                let (r, s) = ((rs / self.d.kw) as isize, (rs % self.d.kw) as isize);
                for (slot, e) in row.iter_mut().zip(entries) {
                    let ih = e.ih0 + r;
                    let iw = e.iw0 + s;
                    *slot = if ih >= 0 && ih < h && iw >= 0 && iw < w {
                        self.x[e.base + (ih * w + iw) as usize * cin + ci]
                    } else {
                        0.0
                    };
                }
                row[nv..].fill(0.0);
            }
        }
        kc * cols.len()
    }
}

/// Bytes of one column-table entry of the virtual im2col matrix.
pub const COL_ENTRY_BYTES: usize = std::mem::size_of::<ColEntry>();

/// Largest auxiliary footprint convGEMM can reach with these blocking
/// parameters for a layer with `m` output channels and reduction length `k`:
/// the packed `Ac`/`Bc` blocks of every thread and the column tables of one
/// `nc` slice. The output width `n` does not enter.
pub fn conv_gemm_aux_bound(
    params: &GemmCacheParams,
    variant: LoopVariant,
    m: usize,
    k: usize,
    threads: usize,
) -> usize {
    let kc = params.kc.min(k);
    let ac = params.mc.min(m).div_ceil(MR) * MR * kc * F32;
    let bc = params.nc.div_ceil(NR) * NR * kc * F32;
    let threads = threads.max(1);
    match variant {
        LoopVariant::A2B1 => bc + threads * ac + (params.nc + threads * NR) * COL_ENTRY_BYTES,
        LoopVariant::B2A1 => threads * (ac + bc + params.nc * COL_ENTRY_BYTES),
    }
}

/// Counters for one convolution call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStats {
    pub gemm: GemmStats,
    /// Bytes of the materialized im2col matrix (zero for convGEMM).
    pub im2col_bytes: usize,
}

impl ConvStats {
    /// All auxiliary memory the call allocated.
    pub fn aux_bytes(&self) -> usize {
        self.gemm.aux_bytes + self.im2col_bytes
    }
}

fn prepare<'o>(
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    out: &'o mut Tensor,
) -> Result<(ConvGeometry, MatrixViewMut<'o>)> {
    let g = check_input(x, d)?;
    if w.shape() != d.filter_shape() || w.layout() != Layout::Nhwc {
        return Err(Error::Geometry(format!(
            "filter {} does not match (cout, kh, kw, cin) = {}",
            w.shape(),
            d.filter_shape()
        )));
    }
    if out.shape() != g.output_shape() || out.layout() != Layout::Nhwc {
        return Err(Error::Geometry(format!(
            "output {} does not match expected {}",
            out.shape(),
            g.output_shape()
        )));
    }
    let c = MatrixViewMut::new(out.data_mut(), g.m, g.n, 1, g.m)?;
    Ok((g, c))
}

/// Full im2col followed by GEMM, written into a preallocated output.
pub fn conv_im2col_gemm_into(
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
    out: &mut Tensor,
) -> Result<ConvStats> {
    let (g, mut c) = prepare(x, w, d, out)?;
    let b = im2col_threads(x, d, cfg.threads)?;
    let a = MatrixView::row_major(w.data(), g.m, g.k)?;
    let gemm = gemm_source(&a, &b.as_view(), &mut c, cfg, ep, true)?;
    Ok(ConvStats {
        gemm,
        im2col_bytes: if is_pointwise(d) { 0 } else { b.bytes() },
    })
}

/// Blockwise im2col fused into B packing, written into a preallocated output.
pub fn conv_gemm_into(
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
    out: &mut Tensor,
) -> Result<ConvStats> {
    let (g, mut c) = prepare(x, w, d, out)?;
    let b = Im2colSource::new(x, d)?;
    let a = MatrixView::row_major(w.data(), g.m, g.k)?;
    let gemm = gemm_source(&a, &b, &mut c, cfg, ep, true)?;
    Ok(ConvStats {
        gemm,
        im2col_bytes: 0,
    })
}

fn output_for(x: &Tensor, d: &ConvDescriptor) -> Result<Tensor> {
    Tensor::zeros(check_input(x, d)?.output_shape())
}

pub fn conv_im2col_gemm(
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
) -> Result<(Tensor, ConvStats)> {
    let mut out = output_for(x, d)?;
    let st = conv_im2col_gemm_into(x, w, d, cfg, ep, &mut out)?;
    Ok((out, st))
}

pub fn conv_gemm(
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
) -> Result<(Tensor, ConvStats)> {
    let mut out = output_for(x, d)?;
    let st = conv_gemm_into(x, w, d, cfg, ep, &mut out)?;
    Ok((out, st))
}

/// Dispatches to the requested lowering.
pub fn conv2d_into(
    alg: ConvAlgorithm,
    x: &Tensor,
    w: &Tensor,
    d: &ConvDescriptor,
    cfg: &GemmConfig,
    ep: &Epilogue<'_>,
    out: &mut Tensor,
) -> Result<ConvStats> {
    match alg {
        ConvAlgorithm::Im2colGemm => conv_im2col_gemm_into(x, w, d, cfg, ep, out),
        ConvAlgorithm::ConvGemm => conv_gemm_into(x, w, d, cfg, ep, out),
    }
}
