//! Dense single-precision tensors, strided matrix views and convolution
//! geometry.
//!
//! Activations are `(batch, height, width, channels)`. Filters reuse the same
//! container with the extents reinterpreted as `(cout, kh, kw, cin)`, so a
//! filter in NHWC layout is the row-major `cout × (kh·kw·cin)` GEMM operand.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Nhwc,
    Nchw,
}

/// Tensor extents, always listed as `(batch, height, width, channels)`
/// whatever the storage layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape {
            batch,
            height,
            width,
            channels,
        }
    }

    /// Element count, or `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.batch
            .checked_mul(self.height)?
            .checked_mul(self.width)?
            .checked_mul(self.channels)
    }

    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Shape { batch, ..self }
    }

    fn validate(&self) -> Result<usize> {
        if self.batch == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidShape(format!("zero extent in {self}")));
        }
        let len = self
            .checked_len()
            .ok_or_else(|| Error::InvalidShape(format!("element count of {self} overflows")))?;
        if len.checked_mul(std::mem::size_of::<f32>()).is_none() {
            return Err(Error::InvalidShape(format!(
                "byte size of {self} overflows"
            )));
        }
        Ok(len)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.height, self.width, self.channels
        )
    }
}

/// How a freshly constructed tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f32),
    /// `0, 1, 2, ...` in storage order.
    Sequence,
    /// Uniform in `[-1, 1)` from a seeded ChaCha stream.
    Random(u64),
    /// Uniform in `[-bound, bound]` from a seeded ChaCha stream.
    Uniform {
        seed: u64,
        bound: f32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    layout: Layout,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, layout: Layout, fill: Fill) -> Result<Self> {
        let len = shape.validate()?;
        let data = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Constant(v) => vec![v; len],
            Fill::Sequence => (0..len).map(|i| i as f32).collect(),
            Fill::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            }
            Fill::Uniform { seed, bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        Ok(Tensor {
            shape,
            layout,
            data,
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Tensor::new(shape, Layout::Nhwc, Fill::Zeros)
    }

    pub fn from_vec(shape: Shape, layout: Layout, data: Vec<f32>) -> Result<Self> {
        let len = shape.validate()?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "buffer of {} elements does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            layout,
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Storage offset of logical element `(b, y, x, c)`.
    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        let s = &self.shape;
        match self.layout {
            Layout::Nhwc => ((b * s.height + y) * s.width + x) * s.channels + c,
            Layout::Nchw => ((b * s.channels + c) * s.height + y) * s.width + x,
        }
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(b, y, x, c)]
    }

    /// Returns a copy of this tensor stored in `target` layout.
    pub fn to_layout(&self, target: Layout) -> Tensor {
        if target == self.layout {
            return self.clone();
        }
        let s = self.shape;
        let mut data = vec![0.0; self.data.len()];
        let (h, w, c) = (s.height, s.width, s.channels);
        match (self.layout, target) {
            (Layout::Nhwc, Layout::Nchw) => {
                for b in 0..s.batch {
                    let src = &self.data[b * h * w * c..][..h * w * c];
                    let dst = &mut data[b * h * w * c..][..h * w * c];
                    for (pix, px) in src.chunks_exact(c).enumerate() {
                        for (ch, v) in px.iter().enumerate() {
                            dst[ch * h * w + pix] = *v;
                        }
                    }
                }
            }
            (Layout::Nchw, Layout::Nhwc) => {
                for b in 0..s.batch {
                    let src = &self.data[b * h * w * c..][..h * w * c];
                    let dst = &mut data[b * h * w * c..][..h * w * c];
                    for (ch, plane) in src.chunks_exact(h * w).enumerate() {
                        for (pix, v) in plane.iter().enumerate() {
                            dst[pix * c + ch] = *v;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        Tensor {
            shape: s,
            layout: target,
            data,
        }
    }

    /// Reinterprets the extents without moving data. Only valid for NHWC.
    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        let len = shape.validate()?;
        if len != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row-major `rows × cols` view over the whole buffer.
    pub fn as_matrix(&self, rows: usize, cols: usize) -> Result<MatrixView<'_>> {
        MatrixView::new(&self.data, rows, cols, cols, 1)
    }
}

/// Read-only strided matrix view over a borrowed buffer.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

fn check_view(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Ok(());
    }
    let last = (rows - 1)
        .checked_mul(rs)
        .and_then(|r| (cols - 1).checked_mul(cs).and_then(|c| r.checked_add(c)));
    match last {
        Some(last) if last < len => Ok(()),
        _ => Err(Error::DimensionMismatch(format!(
            "{rows}×{cols} view with strides ({rs}, {cs}) exceeds buffer of {len}"
        ))),
    }
}

impl<'a> MatrixView<'a> {
    pub fn new(
        data: &'a [f32],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Result<Self> {
        check_view(data.len(), rows, cols, row_stride, col_stride)?;
        Ok(MatrixView {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
        })
    }

    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Result<Self> {
        Self::new(data, rows, cols, cols, 1)
    }

    pub fn col_major(data: &'a [f32], rows: usize, cols: usize) -> Result<Self> {
        Self::new(data, rows, cols, 1, rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_stride(&self) -> usize {
        self.row_stride
    }

    pub fn col_stride(&self) -> usize {
        self.col_stride
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.row_stride + j * self.col_stride]
    }

    /// Sub-block starting at `(i, j)`.
    pub fn block(&self, i: usize, j: usize, rows: usize, cols: usize) -> Result<MatrixView<'a>> {
        if i + rows > self.rows || j + cols > self.cols {
            return Err(Error::DimensionMismatch(format!(
                "block ({i}, {j}) + {rows}×{cols} outside {}×{} view",
                self.rows, self.cols
            )));
        }
        let start = if rows == 0 || cols == 0 {
            0
        } else {
            i * self.row_stride + j * self.col_stride
        };
        Ok(MatrixView {
            data: &self.data[start.min(self.data.len())..],
            rows,
            cols,
            row_stride: self.row_stride,
            col_stride: self.col_stride,
        })
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatrixViewMut<'a> {
    data: &'a mut [f32],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatrixViewMut<'a> {
    pub fn new(
        data: &'a mut [f32],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Result<Self> {
        check_view(data.len(), rows, cols, row_stride, col_stride)?;
        Ok(MatrixViewMut {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
        })
    }

    pub fn row_major(data: &'a mut [f32], rows: usize, cols: usize) -> Result<Self> {
        Self::new(data, rows, cols, cols, 1)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_stride(&self) -> usize {
        self.row_stride
    }

    pub fn col_stride(&self) -> usize {
        self.col_stride
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.row_stride + j * self.col_stride]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.row_stride + j * self.col_stride] = v;
    }

    pub fn as_view(&self) -> MatrixView<'_> {
        MatrixView {
            data: self.data,
            rows: self.rows,
            cols: self.cols,
            row_stride: self.row_stride,
            col_stride: self.col_stride,
        }
    }

    pub(crate) fn as_mut_ptr(&mut self) -> *mut f32 {
        self.data.as_mut_ptr()
    }
}

/// Convolution hyper-parameters. Dilation is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvDescriptor {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvDescriptor {
    /// Square kernel, uniform stride and padding.
    pub const fn square(k: usize, stride: usize, pad: usize, cin: usize, cout: usize) -> Self {
        ConvDescriptor {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
            cin,
            cout,
        }
    }

    pub fn filter_shape(&self) -> Shape {
        Shape::new(self.cout, self.kh, self.kw, self.cin)
    }

    /// Derived output extents and lowered GEMM dimensions for `input`.
    pub fn geometry(&self, input: Shape) -> Result<ConvGeometry> {
        if self.kh == 0 || self.kw == 0 || self.sh == 0 || self.sw == 0 {
            return Err(Error::Geometry(format!(
                "kernel {}×{} and stride {}×{} must be positive",
                self.kh, self.kw, self.sh, self.sw
            )));
        }
        if self.cin == 0 || self.cout == 0 {
            return Err(Error::Geometry("channel counts must be positive".into()));
        }
        if input.channels != self.cin {
            return Err(Error::Geometry(format!(
                "input has {} channels, descriptor expects {}",
                input.channels, self.cin
            )));
        }
        let ho = output_extent(input.height, self.kh, self.sh, self.ph).ok_or_else(|| {
            Error::Geometry(format!(
                "kernel height {} exceeds padded input height {} + 2·{}",
                self.kh, input.height, self.ph
            ))
        })?;
        let wo = output_extent(input.width, self.kw, self.sw, self.pw).ok_or_else(|| {
            Error::Geometry(format!(
                "kernel width {} exceeds padded input width {} + 2·{}",
                self.kw, input.width, self.pw
            ))
        })?;
        Ok(ConvGeometry {
            batch: input.batch,
            height: input.height,
            width: input.width,
            ho,
            wo,
            m: self.cout,
            n: input.batch * ho * wo,
            k: self.cin * self.kh * self.kw,
        })
    }
}

/// `floor((extent + 2·pad − kernel) / stride) + 1`, or `None` when the
/// window does not fit.
pub fn output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extents of a convolution plus the lowered `C(m×n) += A(m×k)·B(k×n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ho: usize,
    pub wo: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl ConvGeometry {
    pub fn output_shape(&self) -> Shape {
        Shape::new(self.batch, self.ho, self.wo, self.m)
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_tensor_fills() {
        let t = Tensor::new(Shape::new(1, 1, 1, 1), Layout::Nhwc, Fill::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0]);
        let t = Tensor::new(Shape::new(2, 2, 2, 2), Layout::Nhwc, Fill::Sequence).unwrap();
        let want: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(t.data(), &want[..]);
        let a = Tensor::new(Shape::new(1, 4, 4, 3), Layout::Nhwc, Fill::Random(7)).unwrap();
        let b = Tensor::new(Shape::new(1, 4, 4, 3), Layout::Nhwc, Fill::Random(7)).unwrap();
        assert_eq!(a, b);
        let c = Tensor::new(Shape::new(1, 4, 4, 3), Layout::Nhwc, Fill::Random(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_and_overflowing_extents_rejected() {
        assert!(Tensor::zeros(Shape::new(0, 1, 1, 1)).is_err());
        assert!(Tensor::zeros(Shape::new(1, 1, 0, 1)).is_err());
        assert!(Tensor::zeros(Shape::new(usize::MAX, 2, 1, 1)).is_err());
        assert!(Tensor::zeros(Shape::new(1 << 32, 1 << 31, 1, 1)).is_err());
    }

    #[test]
    fn layout_degenerate_spatial_is_noop() {
        let t = Tensor::new(Shape::new(1, 1, 1, 5), Layout::Nhwc, Fill::Sequence).unwrap();
        let u = t.to_layout(Layout::Nchw);
        assert_eq!(t.data(), u.data());
    }

    #[test]
    fn nhwc_to_nchw_matches_index_oracle() {
        let t = Tensor::new(Shape::new(1, 2, 2, 2), Layout::Nhwc, Fill::Sequence).unwrap();
        let u = t.to_layout(Layout::Nchw);
        // naive oracle: visit NCHW positions in order and read NHWC source
        let mut want = Vec::new();
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    want.push(((y * 2 + x) * 2 + c) as f32);
                }
            }
        }
        assert_eq!(u.data(), &want[..]);
        assert_eq!(u.data(), &[0., 2., 4., 6., 1., 3., 5., 7.]);
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..2 {
                    assert_eq!(t.get(0, y, x, c), u.get(0, y, x, c));
                }
            }
        }
    }

    #[test]
    fn conv_geometry_examples() {
        let d = ConvDescriptor::square(1, 1, 0, 64, 64);
        let g = d.geometry(Shape::new(128, 56, 56, 64)).unwrap();
        assert_eq!((g.m, g.k, g.n), (64, 64, 401_408));

        let d = ConvDescriptor::square(3, 1, 1, 1, 1);
        let g = d.geometry(Shape::new(1, 4, 4, 1)).unwrap();
        assert_eq!((g.ho, g.wo), (4, 4));

        let d = ConvDescriptor::square(7, 2, 3, 3, 64);
        let g = d.geometry(Shape::new(1, 224, 224, 3)).unwrap();
        assert_eq!((g.ho, g.wo), (112, 112));
    }

    #[test]
    fn conv_geometry_errors() {
        let d = ConvDescriptor::square(5, 1, 0, 1, 1);
        assert!(matches!(
            d.geometry(Shape::new(1, 4, 4, 1)),
            Err(Error::Geometry(_))
        ));
        let d = ConvDescriptor::square(3, 1, 0, 2, 1);
        assert!(d.geometry(Shape::new(1, 4, 4, 1)).is_err());
        let d = ConvDescriptor::square(3, 0, 0, 1, 1);
        assert!(d.geometry(Shape::new(1, 4, 4, 1)).is_err());
    }

    #[test]
    fn views_reject_out_of_bounds() {
        let buf = vec![0.0f32; 12];
        assert!(MatrixView::row_major(&buf, 3, 4).is_ok());
        assert!(MatrixView::row_major(&buf, 4, 4).is_err());
        assert!(MatrixView::new(&buf, 4, 3, 1, 4).is_ok());
        assert!(MatrixView::new(&buf, 4, 3, 1, 5).is_err());
        let v = MatrixView::row_major(&buf, 3, 4).unwrap();
        assert!(v.block(1, 1, 2, 3).is_ok());
        assert!(v.block(2, 1, 2, 3).is_err());
    }
}
