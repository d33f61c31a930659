use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::DenseMatrix;
use crate::par;
use crate::tensor::Tensor;

/// Geometry of one 2-D convolution over `[C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        ensure!(
            channels >= 1 && height >= 1 && width >= 1,
            "conv input dims must be >= 1"
        );
        ensure!(k >= 1 && stride >= 1, "kernel and stride must be >= 1");
        ensure!(
            k <= height + 2 * pad && k <= width + 2 * pad,
            "kernel {k} larger than padded input {}x{}",
            height + 2 * pad,
            width + 2 * pad
        );
        Ok(Self {
            channels,
            height,
            width,
            k,
            stride,
            pad,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output locations per sample.
    pub fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Patch length `C·k²`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input offset for patch column `col` at output location `(oi, oj)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oi: usize, oj: usize, col: usize) -> Option<usize> {
        let kk = self.k * self.k;
        let (c, rem) = (col / kk, col % kk);
        let (ki, kj) = (rem / self.k, rem % self.k);
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        if i < 0 || j < 0 || i >= self.height as isize || j >= self.width as isize {
            None
        } else {
            Some((c * self.height + i as usize) * self.width + j as usize)
        }
    }
}

/// Unfold `[B, C, H, W]` into patch rows `[B·H_out·W_out, C·k²]`, row
/// `(b, i, j)` in b-major order, columns ordered `(c, ki, kj)`. Padding
/// positions are zero.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<DenseMatrix> {
    let s = x.shape();
    ensure!(s.len() == 4, "im2col expects [B, C, H, W], got {:?}", s);
    let geom = ConvGeom::new(s[1], s[2], s[3], k, stride, pad)?;
    im2col_geom(x, &geom, false)
}

/// [`im2col`] with an optional trailing constant-1 column.
pub(crate) fn im2col_geom(x: &Tensor, geom: &ConvGeom, ones: bool) -> Result<DenseMatrix> {
    ensure!(
        x.sample_len() == geom.sample_len(),
        "input of {} values per sample does not match conv geometry",
        x.sample_len()
    );
    let batch = x.batch();
    let (l, wo) = (geom.locations(), geom.out_width());
    let cols = geom.patch_len() + usize::from(ones);
    let mut data = vec![0.0; batch * l * cols];
    par::for_each_chunk_mut(&mut data, (l * cols).max(1), |b, block| {
        let src = x.sample(b);
        for (loc, row) in block.chunks_mut(cols).enumerate() {
            let (oi, oj) = (loc / wo, loc % wo);
            for (col, v) in row.iter_mut().enumerate().take(geom.patch_len()) {
                if let Some(idx) = geom.source(oi, oj, col) {
                    *v = src[idx];
                }
            }
            if ones {
                row[cols - 1] = 1.0;
            }
        }
    });
    DenseMatrix::new(batch * l, cols, data)
}

/// Adjoint of [`im2col`]: scatter-add patch rows (first `C·k²` columns)
/// back onto a `[B, C, H, W]` tensor.
pub fn col2im(patches: &DenseMatrix, geom: &ConvGeom, batch: usize) -> Result<Tensor> {
    let l = geom.locations();
    ensure!(
        patches.rows() == batch * l && patches.cols() >= geom.patch_len(),
        "col2im: {}x{} patches do not match batch {batch} x {l} locations",
        patches.rows(),
        patches.cols()
    );
    let n = geom.sample_len();
    let wo = geom.out_width();
    let mut data = vec![0.0; batch * n];
    par::for_each_chunk_mut(&mut data, n.max(1), |b, dst| {
        for loc in 0..l {
            let row = patches.row(b * l + loc);
            let (oi, oj) = (loc / wo, loc % wo);
            for (col, &v) in row.iter().enumerate().take(geom.patch_len()) {
                if let Some(idx) = geom.source(oi, oj, col) {
                    dst[idx] += v;
                }
            }
        }
    });
    Tensor::new(vec![batch, geom.channels, geom.height, geom.width], data)
}
