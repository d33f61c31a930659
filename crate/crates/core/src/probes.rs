//! Synthetic probe batches: spectrally shaped image noise, structural token
//! sequences and uniform labels.
//!
//! Nothing here reads data. Every generator takes only its spec and an
//! [`Rng`], which is what makes a preconditioner built from these probes
//! independent of the private training set.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::{fft2, ifft2, ComplexGrid, Rng};
use crate::par;
use crate::tensor::Tensor;

/// `1/f^α` image-noise batch description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinkNoiseSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Power-spectrum exponent: power falls off as `r^{-alpha}`.
    pub alpha: f64,
    /// Guard added to the filter denominator.
    #[serde(default = "default_eps0")]
    pub eps0: f64,
}

fn default_eps0() -> f64 {
    1e-6
}

impl PinkNoiseSpec {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, alpha: f64) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            alpha,
            eps0: default_eps0(),
        }
    }

    pub fn with_eps0(mut self, eps0: f64) -> Self {
        self.eps0 = eps0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch >= 1 && self.channels >= 1 && self.height >= 1 && self.width >= 1,
            "pink-noise dimensions must be >= 1"
        );
        ensure!(
            self.alpha.is_finite() && self.alpha >= 0.0,
            "alpha must be finite and >= 0"
        );
        ensure!(self.eps0 > 0.0 && self.eps0.is_finite(), "eps0 must be > 0");
        Ok(())
    }

    /// Side of the square power-of-two grid the fields are generated on.
    pub fn grid_side(&self) -> usize {
        self.height.max(self.width).next_power_of_two()
    }
}

/// Distance of FFT bin `(u, v)` from the zero frequency on an `n x n` grid.
fn bin_radius(u: usize, v: usize, n: usize) -> f64 {
    let wrap = |k: usize| {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    wrap(u).hypot(wrap(v))
}

/// Amplitude filter `1/(r^{α/2} + ε)`; the DC bin is dropped when `α > 0`.
fn spectral_filter(n: usize, alpha: f64, eps0: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(n * n);
    for u in 0..n {
        for v in 0..n {
            let r = bin_radius(u, v, n);
            s.push(if alpha > 0.0 && r == 0.0 {
                0.0
            } else {
                1.0 / (r.powf(alpha / 2.0) + eps0)
            });
        }
    }
    s
}

/// Batch of `1/f^α` noise images `[M, C, H, W]`, normalized over the whole
/// batch to zero mean and unit variance.
///
/// Each `(sample, channel)` field is independent: white Gaussian noise is
/// transformed, its spectrum scaled by the filter, and transformed back.
/// Sizes that are not powers of two are generated on the enclosing
/// power-of-two grid and cropped to the top-left `H x W` window.
pub fn gen_pink_noise(spec: &PinkNoiseSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.grid_side();
    let filter = spectral_filter(n, spec.alpha, spec.eps0);
    let label = rng.next_u64();
    let base = rng.split(label);
    let fields = spec.batch * spec.channels;
    let (h, w) = (spec.height, spec.width);
    let planes: Vec<Result<Vec<f64>>> = par::map_indexed(fields, |idx| {
        let mut local = base.split(idx as u64);
        let white = local.standard_normal(n * n);
        let mut z = fft2(&ComplexGrid::from_real(n, n, &white)?)?;
        for (zv, s) in z.values.iter_mut().zip(&filter) {
            *zv *= *s;
        }
        let x = ifft2(&z)?;
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            out.extend(x.values[i * n..i * n + w].iter().map(|c| c.re));
        }
        Ok(out)
    });
    let mut data = Vec::with_capacity(fields * h * w);
    for p in planes {
        data.extend(p?);
    }
    let mut t = Tensor::new(vec![spec.batch, spec.channels, h, w], data)?;
    let (mean, std) = t.mean_std();
    let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
    t.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * inv);
    Ok(t)
}

/// Radially averaged power spectrum of a `[B, C, H, W]` batch with
/// power-of-two `H == W`. Returns `(radius, mean power)` for integer radius
/// bins `1..=H/2`.
pub fn radial_power_spectrum(x: &Tensor) -> Result<Vec<(f64, f64)>> {
    let shape = x.shape();
    ensure!(shape.len() == 4, "expected a [B, C, H, W] tensor");
    let (h, w) = (shape[2], shape[3]);
    ensure!(
        h == w && h.is_power_of_two() && h >= 4,
        "radial spectrum needs square power-of-two planes, got {h}x{w}"
    );
    let half = h / 2;
    let planes = shape[0] * shape[1];
    let per_plane: Vec<Result<(Vec<f64>, Vec<usize>)>> = par::map_indexed(planes, |p| {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let f = fft2(&ComplexGrid::from_real(h, w, plane)?)?;
        let mut sum = vec![0.0; half + 1];
        let mut count = vec![0usize; half + 1];
        for u in 0..h {
            for v in 0..w {
                let bin = bin_radius(u, v, h).round() as usize;
                if (1..=half).contains(&bin) {
                    sum[bin] += f.get(u, v).norm_sqr();
                    count[bin] += 1;
                }
            }
        }
        Ok((sum, count))
    });
    let mut sum = vec![0.0; half + 1];
    let mut count = vec![0usize; half + 1];
    for r in per_plane {
        let (s, c) = r?;
        for k in 0..=half {
            sum[k] += s[k];
            count[k] += c[k];
        }
    }
    Ok((1..=half)
        .filter(|&k| count[k] > 0)
        .map(|k| (k as f64, sum[k] / count[k] as f64))
        .collect())
}

/// Least-squares slope of `ln(power)` against `ln(radius)`.
pub fn fit_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    ensure!(points.len() >= 2, "need at least two spectrum points");
    let pts: Vec<(f64, f64)> = points.iter().map(|&(r, p)| (r.ln(), p.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Structural token-sequence probe description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenNoiseSpec {
    pub batch: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub cls_id: usize,
    pub sep_id: usize,
    pub pad_id: usize,
    #[serde(default = "one")]
    pub min_len: usize,
    #[serde(default)]
    pub uses_separator: bool,
    /// Payload tokens are drawn with weight `(v + 1)^{-zipf_exponent}`;
    /// zero means uniform.
    #[serde(default)]
    pub zipf_exponent: f64,
}

fn one() -> usize {
    1
}

impl TokenNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1, "token batch must be >= 1");
        ensure!(self.vocab >= 1, "vocab must be >= 1");
        let ids = [self.cls_id, self.sep_id, self.pad_id];
        ensure!(
            ids.iter().all(|&i| i < self.vocab),
            "special token ids must be < vocab"
        );
        ensure!(
            ids[0] != ids[1] && ids[0] != ids[2] && ids[1] != ids[2],
            "special token ids must be distinct"
        );
        ensure!(
            1 <= self.min_len && self.min_len <= self.max_len,
            "need 1 <= min_len <= max_len"
        );
        if self.uses_separator {
            ensure!(
                self.min_len < self.max_len,
                "with a separator the drawn length must leave room for it (min_len < max_len)"
            );
        }
        ensure!(
            self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0,
            "zipf exponent must be finite and >= 0"
        );
        Ok(())
    }
}

/// Token ids and attention mask, both `[batch, max_len]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub max_len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    /// Drawn active length per row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn row(&self, i: usize) -> (&[usize], &[u8]) {
        let r = i * self.max_len..(i + 1) * self.max_len;
        (&self.ids[r.clone()], &self.mask[r])
    }
}

/// Random token sequences with `[CLS]` at position 0, an optional `[SEP]`
/// right after the active span, and `PAD` everywhere else.
pub fn gen_token_noise(spec: &TokenNoiseSpec, rng: &mut Rng) -> Result<TokenBatch> {
    spec.validate()?;
    let l = spec.max_len;
    let top = if spec.uses_separator { l - 1 } else { l };
    let cumulative: Option<Vec<f64>> = (spec.zipf_exponent > 0.0).then(|| {
        let mut acc = 0.0;
        (0..spec.vocab)
            .map(|v| {
                acc += ((v + 1) as f64).powf(-spec.zipf_exponent);
                acc
            })
            .collect()
    });
    let mut ids = vec![spec.pad_id; spec.batch * l];
    let mut mask = vec![0u8; spec.batch * l];
    let mut lengths = Vec::with_capacity(spec.batch);
    for i in 0..spec.batch {
        let len = rng.uniform_int(spec.min_len as i64, top as i64 + 1) as usize;
        let row = &mut ids[i * l..(i + 1) * l];
        for slot in row.iter_mut().take(len) {
            *slot = match &cumulative {
                Some(c) => rng.weighted_index(c),
                None => rng.index(spec.vocab),
            };
        }
        row[0] = spec.cls_id;
        if spec.uses_separator {
            row[len] = spec.sep_id;
        }
        mask[i * l..i * l + len].iter_mut().for_each(|m| *m = 1);
        lengths.push(len);
    }
    Ok(TokenBatch {
        batch: spec.batch,
        max_len: l,
        ids,
        mask,
        lengths,
    })
}

/// Bag-of-tokens features `[batch, vocab]`: per-row frequency of each id
/// over the active (mask = 1) positions. Lets token probes drive models
/// whose input is a vocabulary-sized vector.
pub fn token_bag_features(tokens: &TokenBatch, vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; tokens.batch * vocab];
    for i in 0..tokens.batch {
        let (ids, mask) = tokens.row(i);
        let active = mask.iter().filter(|&&m| m == 1).count().max(1) as f64;
        for (&id, &m) in ids.iter().zip(mask) {
            ensure!(id < vocab, "token id {id} outside vocab {vocab}");
            if m == 1 {
                data[i * vocab + id] += 1.0 / active;
            }
        }
    }
    Tensor::new(vec![tokens.batch, vocab], data)
}

/// Labels drawn uniformly from `0..num_classes`.
pub fn gen_labels(batch: usize, num_classes: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    ensure!(
        num_classes >= 2,
        "need at least two classes, got {num_classes}"
    );
    Ok((0..batch).map(|_| rng.index(num_classes)).collect())
}
