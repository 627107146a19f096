//! Plain <-> blocked copies of 2-D matrices (or one batch item of a batch).

/// Strided view of a logical `rows x cols` matrix: element `(r, c)` lives at
/// `base + r * rs + c * cs`. Transposed sources just swap the strides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlainView {
    pub base: usize,
    pub rs: usize,
    pub cs: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PlainView {
    pub fn row_major(base: usize, rows: usize, cols: usize) -> Self {
        PlainView { base, rs: cols, cs: 1, rows, cols }
    }
}

/// Geometry of a blocked buffer: block sizes, interior order and element
/// strides between neighbouring blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeom {
    pub br: usize,
    pub bc: usize,
    pub row_inner_first: bool,
    pub rb_stride: usize,
    pub cb_stride: usize,
}

impl BlockGeom {
    /// Dense geometry for a matrix with `ncb` column blocks per block row.
    pub fn dense(br: usize, bc: usize, row_inner_first: bool, ncb: usize) -> Self {
        BlockGeom { br, bc, row_inner_first, rb_stride: ncb * br * bc, cb_stride: br * bc }
    }

    #[inline]
    fn inner(&self, i: usize, j: usize) -> usize {
        if self.row_inner_first {
            i * self.bc + j
        } else {
            j * self.br + i
        }
    }
}

/// Block range `[rb0, rb0 + nrb) x [cb0, cb0 + ncb)` of a blocked buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRange {
    pub rb0: usize,
    pub cb0: usize,
    pub nrb: usize,
    pub ncb: usize,
}

/// Copies the logical region covered by `range` from `src` into blocks of
/// `dst`, block `(range.rb0, range.cb0)` landing at `dst_base`; out-of-range
/// elements become zero when `zero_pad`, else are left alone.
pub fn reorder_pack<T: Copy + Default>(src: &[T], sv: PlainView, dst: &mut [T], dst_base: usize, g: BlockGeom, range: BlockRange, zero_pad: bool) {
    for rb in range.rb0..range.rb0 + range.nrb {
        for cb in range.cb0..range.cb0 + range.ncb {
            let blk = dst_base + (rb - range.rb0) * g.rb_stride + (cb - range.cb0) * g.cb_stride;
            let out = &mut dst[blk..blk + g.br * g.bc];
            for i in 0..g.br {
                let r = rb * g.br + i;
                for j in 0..g.bc {
                    let c = cb * g.bc + j;
                    if r < sv.rows && c < sv.cols {
                        out[g.inner(i, j)] = src[sv.base + r * sv.rs + c * sv.cs];
                    } else if zero_pad {
                        out[g.inner(i, j)] = T::default();
                    }
                }
            }
        }
    }
}

/// Inverse of [`reorder_pack`]: writes the valid logical elements of the
/// blocks in `range`, block `(range.rb0, range.cb0)` read from `src_base`,
/// into the plain view `dv`.
pub fn reorder_unpack<T: Copy>(src: &[T], src_base: usize, g: BlockGeom, dst: &mut [T], dv: PlainView, range: BlockRange) {
    for rb in range.rb0..range.rb0 + range.nrb {
        for cb in range.cb0..range.cb0 + range.ncb {
            let blk = src_base + (rb - range.rb0) * g.rb_stride + (cb - range.cb0) * g.cb_stride;
            let inp = &src[blk..blk + g.br * g.bc];
            for i in 0..g.br {
                let r = rb * g.br + i;
                if r >= dv.rows {
                    break;
                }
                for j in 0..g.bc {
                    let c = cb * g.bc + j;
                    if c >= dv.cols {
                        break;
                    }
                    dst[dv.base + r * dv.rs + c * dv.cs] = inp[g.inner(i, j)];
                }
            }
        }
    }
}

/// Packs a whole row-major matrix into a fresh zero-padded blocked buffer.
pub fn pack_2d<T: Copy + Default>(src: &[T], rows: usize, cols: usize, br: usize, bc: usize, row_inner_first: bool) -> Vec<T> {
    let (nrb, ncb) = (rows.div_ceil(br), cols.div_ceil(bc));
    let mut dst = vec![T::default(); nrb * ncb * br * bc];
    let g = BlockGeom::dense(br, bc, row_inner_first, ncb);
    let range = BlockRange { rb0: 0, cb0: 0, nrb, ncb };
    reorder_pack(src, PlainView::row_major(0, rows, cols), &mut dst, 0, g, range, true);
    dst
}

/// Unpacks a whole blocked buffer produced by [`pack_2d`].
pub fn unpack_2d<T: Copy + Default>(src: &[T], rows: usize, cols: usize, br: usize, bc: usize, row_inner_first: bool) -> Vec<T> {
    let (nrb, ncb) = (rows.div_ceil(br), cols.div_ceil(bc));
    let mut dst = vec![T::default(); rows * cols];
    let g = BlockGeom::dense(br, bc, row_inner_first, ncb);
    reorder_unpack(src, 0, g, &mut dst, PlainView::row_major(0, rows, cols), BlockRange { rb0: 0, cb0: 0, nrb, ncb });
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_blocking() {
        let src = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(pack_2d(&src, 2, 2, 2, 2, true), src.to_vec());
    }

    #[test]
    fn three_by_three_pads_fringe() {
        let src: Vec<i32> = (1..=9).collect();
        let dst = pack_2d(&src, 3, 3, 2, 2, true);
        assert_eq!(dst.len(), 16);
        assert_eq!(&dst[0..4], &[1, 2, 4, 5]);
        assert_eq!(&dst[4..8], &[3, 0, 6, 0]);
        assert_eq!(&dst[8..12], &[7, 8, 0, 0]);
        assert_eq!(&dst[12..16], &[9, 0, 0, 0]);
    }

    #[test]
    fn column_inner_first() {
        // [K=2, N=2] weight, blocks (KB=2, NB=2), stored [NB, KB]
        let src = [1, 2, 3, 4];
        assert_eq!(pack_2d(&src, 2, 2, 2, 2, false), vec![1, 3, 2, 4]);
    }

    #[test]
    fn transposed_view() {
        // logical (r, c) = src[c][r] of a row-major 3x2 source
        let src = [1, 2, 3, 4, 5, 6];
        let sv = PlainView { base: 0, rs: 1, cs: 2, rows: 2, cols: 3 };
        let mut dst = vec![9; 8];
        let g = BlockGeom::dense(2, 4, true, 1);
        reorder_pack(&src, sv, &mut dst, 0, g, BlockRange { rb0: 0, cb0: 0, nrb: 1, ncb: 1 }, true);
        assert_eq!(dst, vec![1, 3, 5, 0, 2, 4, 6, 0]);
    }

    #[test]
    fn no_zero_pad_leaves_fringe() {
        let mut dst = vec![7; 4];
        let g = BlockGeom::dense(2, 2, true, 1);
        reorder_pack(&[1, 2, 3], PlainView::row_major(0, 1, 3), &mut dst, 0, g, BlockRange { rb0: 0, cb0: 0, nrb: 1, ncb: 1 }, false);
        assert_eq!(dst, vec![1, 2, 7, 7]);
    }

    #[test]
    fn sub_range_lands_at_base() {
        // block (1, 1) of a 4x4 matrix with 2x2 blocks into a 4-element buffer
        let src: Vec<i32> = (0..16).collect();
        let mut dst = vec![0; 4];
        let g = BlockGeom::dense(2, 2, true, 1);
        reorder_pack(&src, PlainView::row_major(0, 4, 4), &mut dst, 0, g, BlockRange { rb0: 1, cb0: 1, nrb: 1, ncb: 1 }, true);
        assert_eq!(dst, vec![10, 11, 14, 15]);
    }

    #[test]
    fn round_trip_13x512() {
        let src: Vec<f32> = (0..13 * 512).map(|i| (i as f32).sin()).collect();
        for &(br, bc, rif) in &[(16, 64, true), (32, 16, false), (13, 512, true)] {
            let packed = pack_2d(&src, 13, 512, br, bc, rif);
            assert_eq!(unpack_2d(&packed, 13, 512, br, bc, rif), src);
        }
    }
}
