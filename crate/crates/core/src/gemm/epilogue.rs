use crate::error::{Error, Result};
use crate::gemm::kernel::{TileEpilogue, MR};
use crate::simd::relu_scalar;

/// Post-operation fused into the last `kc` block of the GEMM.
///
/// Batch-norm coefficients are indexed by GEMM row. Lowered convolutions put
/// one output channel per row, so the row index is the channel index and no
/// further 2-D to 4-D mapping is needed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum Epilogue<'a> {
    #[default]
    None,
    Relu,
    BatchNorm {
        scale: &'a [f32],
        shift: &'a [f32],
    },
    BatchNormRelu {
        scale: &'a [f32],
        shift: &'a [f32],
    },
}

impl<'a> Epilogue<'a> {
    pub fn is_none(&self) -> bool {
        matches!(self, Epilogue::None)
    }

    pub fn has_relu(&self) -> bool {
        matches!(self, Epilogue::Relu | Epilogue::BatchNormRelu { .. })
    }

    fn coefficients(&self) -> Option<(&'a [f32], &'a [f32])> {
        match *self {
            Epilogue::BatchNorm { scale, shift } | Epilogue::BatchNormRelu { scale, shift } => {
                Some((scale, shift))
            }
            _ => None,
        }
    }

    /// Coefficient arrays must have one entry per output row.
    pub fn validate(&self, rows: usize) -> Result<()> {
        if let Some((scale, shift)) = self.coefficients() {
            if scale.len() != rows || shift.len() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "epilogue has {}/{} coefficients for {rows} output rows",
                    scale.len(),
                    shift.len()
                )));
            }
        }
        Ok(())
    }

    /// Scalar application to one element of row `row`.
    #[inline]
    pub fn apply(&self, row: usize, x: f32) -> f32 {
        let y = match self.coefficients() {
            Some((scale, shift)) => x.mul_add(scale[row], shift[row]),
            None => x,
        };
        if self.has_relu() {
            relu_scalar(y)
        } else {
            y
        }
    }

    /// Coefficients for the tile whose first row is `row0` and which has `rows`
    /// live rows. Padding rows get the identity transform.
    pub(crate) fn tile(&self, row0: usize, rows: usize) -> Option<TileEpilogue> {
        if self.is_none() {
            return None;
        }
        let mut te = TileEpilogue {
            scale: [1.0; MR],
            shift: [0.0; MR],
            relu: self.has_relu(),
        };
        if let Some((scale, shift)) = self.coefficients() {
            te.scale[..rows].copy_from_slice(&scale[row0..row0 + rows]);
            te.shift[..rows].copy_from_slice(&shift[row0..row0 + rows]);
        }
        Some(te)
    }
}
