//! Packing of operand blocks into micro-panel order.
//!
//! `Ac` is stored as `⌈rows/mr⌉` panels of `mr` rows, each column-major
//! (`kc` columns of `mr` values). `Bc` is stored as `⌈cols/nr⌉` panels of `nr`
//! columns, each row-major (`kc` rows of `nr` values). Ragged edge panels are
//! zero-padded, so the micro-kernel always consumes full panels with unit
//! stride.

use std::ops::Range;

use crate::tensor::MatrixView;

/// A packed operand block.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBuffer {
    data: Vec<f32>,
    panel: usize,
    rows: usize,
    cols: usize,
    kind: PanelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelKind {
    /// Row panels of an `A` block.
    A,
    /// Column panels of a `B` block.
    B,
}

impl PackedBuffer {
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn panel_width(&self) -> usize {
        self.panel
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_panels(&self) -> usize {
        match self.kind {
            PanelKind::A => self.rows.div_ceil(self.panel),
            PanelKind::B => self.cols.div_ceil(self.panel),
        }
    }

    /// Position of logical element `(i, j)` inside the packed buffer.
    pub fn index_of(&self, i: usize, j: usize) -> usize {
        match self.kind {
            PanelKind::A => {
                (i / self.panel) * self.panel * self.cols + j * self.panel + i % self.panel
            }
            PanelKind::B => {
                (j / self.panel) * self.panel * self.rows + i * self.panel + j % self.panel
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[self.index_of(i, j)]
    }

    /// Row-major copy of the logical block, padding dropped.
    pub fn unpack(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// Packs a whole `A` block (`mc × kc`) into row panels of height `mr`.
pub fn pack_a(src: &MatrixView<'_>, mr: usize) -> PackedBuffer {
    assert!(mr > 0);
    let (rows, cols) = (src.rows(), src.cols());
    let mut data = vec![0.0; rows.div_ceil(mr) * mr * cols];
    pack_a_into(src, 0..rows, 0..cols, mr, &mut data);
    PackedBuffer {
        data,
        panel: mr,
        rows,
        cols,
        kind: PanelKind::A,
    }
}

/// Packs a whole `B` block (`kc × nc`) into column panels of width `nr`.
pub fn pack_b(src: &MatrixView<'_>, nr: usize) -> PackedBuffer {
    assert!(nr > 0);
    let (rows, cols) = (src.rows(), src.cols());
    let mut data = vec![0.0; cols.div_ceil(nr) * nr * rows];
    src.pack(&(), 0..rows, 0..cols, nr, &mut data);
    PackedBuffer {
        data,
        panel: nr,
        rows,
        cols,
        kind: PanelKind::B,
    }
}

/// Packs `src[rows, cols]` into `dst` as row panels of height `mr`.
pub(crate) fn pack_a_into(
    src: &MatrixView<'_>,
    rows: Range<usize>,
    cols: Range<usize>,
    mr: usize,
    dst: &mut [f32],
) {
    let kc = cols.len();
    let (rs, cs) = (src.row_stride(), src.col_stride());
    let data = src.data();
    let panels = rows.len().div_ceil(mr);
    for (pi, panel) in dst[..panels * mr * kc]
        .chunks_exact_mut(mr * kc)
        .enumerate()
    {
        let i0 = rows.start + pi * mr;
        let mv = mr.min(rows.end - i0);
        if cs == 1 {
            // rows are contiguous: copy row by row into the strided panel
            for ii in 0..mv {
                let row = &data[(i0 + ii) * rs + cols.start..][..kc];
                for (p, v) in row.iter().enumerate() {
                    panel[p * mr + ii] = *v;
                }
            }
            for ii in mv..mr {
                for p in 0..kc {
                    panel[p * mr + ii] = 0.0;
                }
            }
        } else {
            for (p, col) in panel.chunks_exact_mut(mr).enumerate() {
                let base = (cols.start + p) * cs + i0 * rs;
                for ii in 0..mv {
                    col[ii] = data[base + ii * rs];
                }
                col[mv..].fill(0.0);
            }
        }
    }
}

/// A source the `B` packing routine can draw `kc × nc` blocks from: either a
/// plain matrix or a virtual (never materialized) lowered convolution input.
pub trait PackB: Sync {
    /// Per-column lookup data, built once per `nc` slice.
    type ColTable: Send;

    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    fn col_table(&self, cols: Range<usize>) -> Self::ColTable;

    /// Bytes held by a table over `ncols` columns.
    fn table_bytes(&self, _ncols: usize) -> usize {
        0
    }

    /// Packs `rows × cols` into column panels of width `nr`. `cols.start` must
    /// be the first column the table was built for, or a later multiple of
    /// `nr` from it. Returns the number of logical elements written.
    fn pack(
        &self,
        table: &Self::ColTable,
        rows: Range<usize>,
        cols: Range<usize>,
        nr: usize,
        dst: &mut [f32],
    ) -> usize;
}

impl PackB for MatrixView<'_> {
    type ColTable = ();

    fn rows(&self) -> usize {
        MatrixView::rows(self)
    }

    fn cols(&self) -> usize {
        MatrixView::cols(self)
    }

    fn col_table(&self, _cols: Range<usize>) {}

    fn pack(
        &self,
        _: &(),
        rows: Range<usize>,
        cols: Range<usize>,
        nr: usize,
        dst: &mut [f32],
    ) -> usize {
        let kc = rows.len();
        let (rs, cs) = (self.row_stride(), self.col_stride());
        let data = self.data();
        let panels = cols.len().div_ceil(nr);
        for (pj, panel) in dst[..panels * nr * kc]
            .chunks_exact_mut(nr * kc)
            .enumerate()
        {
            let j0 = cols.start + pj * nr;
            let nv = nr.min(cols.end - j0);
            for (p, row) in panel.chunks_exact_mut(nr).enumerate() {
                let base = (rows.start + p) * rs + j0 * cs;
                if cs == 1 {
                    row[..nv].copy_from_slice(&data[base..base + nv]);
                } else {
                    for jj in 0..nv {
                        row[jj] = data[base + jj * cs];
                    }
                }
                row[nv..].fill(0.0);
            }
        }
        kc * cols.len()
    }
}
