//! Radix-2 two-dimensional FFT on power-of-two grids.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Row-major complex grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_real(height: usize, width: usize, re: &[f64]) -> Result<Self> {
        ensure!(re.len() == height * width, "grid data length mismatch");
        Ok(Self {
            height,
            width,
            values: re.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.width + j]
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }
}

fn check_dims(g: &ComplexGrid) -> Result<()> {
    ensure!(
        g.height.is_power_of_two() && g.width.is_power_of_two(),
        "FFT needs power-of-two dimensions, got {}x{}",
        g.height,
        g.width
    );
    ensure!(
        g.values.len() == g.height * g.width,
        "grid data length mismatch"
    );
    Ok(())
}

/// In-place iterative Cooley-Tukey on a power-of-two slice.
/// `inverse` flips the twiddle sign; no scaling is applied.
fn fft1d(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        // Twiddles computed directly per index to avoid drift from repeated products.
        let tw: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, ang * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * tw[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn transform(g: &ComplexGrid, inverse: bool) -> Result<ComplexGrid> {
    check_dims(g)?;
    let (h, w) = (g.height, g.width);
    let mut out = g.clone();
    for row in out.values.chunks_mut(w) {
        fft1d(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for (i, c) in col.iter_mut().enumerate() {
            *c = out.values[i * w + j];
        }
        fft1d(&mut col, inverse);
        for (i, c) in col.iter().enumerate() {
            out.values[i * w + j] = *c;
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        out.values.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Forward DFT, `X[u,v] = Σ x[i,j] e^{-2πi(ui/H + vj/W)}`.
pub fn fft2(g: &ComplexGrid) -> Result<ComplexGrid> {
    transform(g, false)
}

/// Inverse DFT with the `1/(HW)` normalization.
pub fn ifft2(g: &ComplexGrid) -> Result<ComplexGrid> {
    transform(g, true)
}
