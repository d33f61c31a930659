//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};
use dpkfc::linalg::{DenseMatrix, Rng};
use dpkfc::nn::{loss_ce, LayerSpec, Model};
use dpkfc::tensor::Tensor;

const P: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(v: f64) -> BigFloat {
    BigFloat::from_f64(v, P)
}

fn to_f64(x: &BigFloat) -> f64 {
    format!("{x}").parse().expect("decimal rendering")
}

/// Sampled-Gaussian RDP at integer order `alpha`: the binomial sum evaluated
/// directly (no log-space tricks) at 256 bits.
pub fn rdp_oracle(q: f64, sigma: f64, alpha: u32) -> f64 {
    let mut cc = Consts::new().unwrap();
    let (bq, b1q) = (big(q), big(1.0).sub(&big(q), P, RM));
    let two_s2 = big(2.0).mul(&big(sigma), P, RM).mul(&big(sigma), P, RM);
    let mut sum = big(0.0);
    let mut binom = big(1.0);
    for k in 0..=alpha {
        if k > 0 {
            binom = binom
                .mul(&big(f64::from(alpha - k + 1)), P, RM)
                .div(&big(f64::from(k)), P, RM);
        }
        let kf = f64::from(k);
        let expo = big(kf * kf - kf).div(&two_s2, P, RM).exp(P, RM, &mut cc);
        let term = binom
            .mul(&b1q.powi((alpha - k) as usize, P, RM), P, RM)
            .mul(&bq.powi(k as usize, P, RM), P, RM)
            .mul(&expo, P, RM);
        sum = sum.add(&term, P, RM);
    }
    let l = sum.ln(P, RM, &mut cc);
    to_f64(&l.div(&big(f64::from(alpha - 1)), P, RM))
}

/// `X Xᵀ / m` for a Gaussian `n × m` sample, `m = n + 2`: SPD almost surely.
pub fn random_spd(n: usize, rng: &mut Rng) -> DenseMatrix {
    let x = DenseMatrix::new(n, n + 2, rng.standard_normal(n * (n + 2))).unwrap();
    let mut s = x.matmul_nt(&x).unwrap();
    s.scale_in_place(1.0 / (n + 2) as f64);
    s.symmetrize();
    s
}

/// Direct convolution of `[B, C, H, W]` input with augmented kernel rows
/// `[c_out, C·k·k + 1]` (bias last).
pub fn naive_conv(
    x: &Tensor,
    w: &DenseMatrix,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * c_out * ho * wo];
    for n in 0..b {
        for o in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = w.get(o, c * k * k);
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let q = (j * stride + kj) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    let v =
                                        x.data()[((n * c + ch) * h + r as usize) * wd + q as usize];
                                    acc += v * w.get(o, (ch * k + ki) * k + kj);
                                }
                            }
                        }
                    }
                    out[((n * c_out + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn sample_loss(model: &Model, theta: &[f64], x: &Tensor, y: &[usize], i: usize) -> f64 {
    let mut m = model.clone();
    m.set_flat_params(theta).unwrap();
    let (logits, _) = m.forward(&x.select(&[i])).unwrap();
    loss_ce(&logits, &y[i..=i]).unwrap().0
}

/// Largest relative gap between backprop per-sample gradients and central
/// differences over every parameter of a random model, for 3 samples.
pub fn max_fd_error(layers: Vec<LayerSpec>, input: Vec<usize>, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let model = Model::new(layers, input.clone(), &mut rng).unwrap();
    let mut theta = model.flat_params();
    // small nonzero biases so their gradients are exercised at generic points
    for v in theta.iter_mut() {
        if *v == 0.0 {
            *v = 0.1 * rng.normal();
        }
        *v = v.clamp(-1.0, 1.0);
    }
    let mut model = model;
    model.set_flat_params(&theta).unwrap();
    let b = 3;
    let mut shape = vec![b];
    shape.extend(&input);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, rng.standard_normal(n)).unwrap();
    let y: Vec<usize> = (0..b).map(|_| rng.index(model.num_classes())).collect();
    let (logits, mut tape) = model.forward(&x).unwrap();
    let (_, d) = loss_ce(&logits, &y).unwrap();
    let grads = model.backward(&mut tape, &d).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..b {
        let analytic: Vec<f64> = grads
            .sample(i)
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();
        assert_eq!(analytic.len(), theta.len());
        for p in 0..theta.len() {
            let mut tp = theta.clone();
            tp[p] += h;
            let mut tm = theta.clone();
            tm[p] -= h;
            let fd = (sample_loss(&model, &tp, &x, &y, i) - sample_loss(&model, &tm, &x, &y, i))
                / (2.0 * h);
            let rel = (fd - analytic[p]).abs() / fd.abs().max(analytic[p].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Radially averaged power of a batch of square images via a direct DFT,
/// integer radius bins `1..=n/2`, then the least-squares slope of
/// `log power` against `log radius`.
pub fn radial_slope(x: &Tensor) -> f64 {
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2]);
    assert_eq!(s[3], n);
    let tw: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let half = n / 2;
    let mut power = vec![0.0; half + 1];
    let mut count = vec![0usize; half + 1];
    for img in 0..b * c {
        let px = &x.data()[img * n * n..(img + 1) * n * n];
        // rows, then columns
        let mut rows = vec![(0.0, 0.0); n * n];
        for r in 0..n {
            for f in 0..n {
                let mut acc = (0.0, 0.0);
                for t in 0..n {
                    let w = tw[(f * t) % n];
                    acc.0 += px[r * n + t] * w.0;
                    acc.1 += px[r * n + t] * w.1;
                }
                rows[r * n + f] = acc;
            }
        }
        for fc in 0..n {
            for fr in 0..n {
                let mut acc = (0.0, 0.0);
                for t in 0..n {
                    let w = tw[(fr * t) % n];
                    let v = rows[t * n + fc];
                    acc.0 += v.0 * w.0 - v.1 * w.1;
                    acc.1 += v.0 * w.1 + v.1 * w.0;
                }
                let (u, v) = (signed(fr, n), signed(fc, n));
                let rad = ((u * u + v * v) as f64).sqrt().round() as usize;
                if (1..=half).contains(&rad) {
                    power[rad] += acc.0 * acc.0 + acc.1 * acc.1;
                    count[rad] += 1;
                }
            }
        }
    }
    let pts: Vec<(f64, f64)> = (1..=half)
        .map(|r| ((r as f64).ln(), (power[r] / count[r] as f64).ln()))
        .collect();
    let m = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / m,
        pts.iter().map(|p| p.1).sum::<f64>() / m,
    );
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn signed(f: usize, n: usize) -> i64 {
    if f <= n / 2 {
        f as i64
    } else {
        f as i64 - n as i64
    }
}
