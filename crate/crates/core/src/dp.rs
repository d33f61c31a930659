//! The Gaussian mechanism on clipped (preconditioned) per-sample gradients,
//! and Rényi-DP accounting for its Poisson-subsampled composition.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{DenseMatrix, Rng};

/// Default Rényi orders, `2..=64`.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyParams {
    /// Clipping norm `C`; infinite only in non-private debug runs.
    pub clip: f64,
    /// Noise multiplier `σ`; zero marks a non-private run.
    pub sigma: f64,
    /// Poisson sampling rate `q`.
    pub sample_rate: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.clip > 0.0, "clip must be > 0");
        ensure!(
            self.sigma >= 0.0 && self.sigma.is_finite(),
            "sigma must be finite and >= 0"
        );
        ensure!(
            self.clip.is_finite() || self.sigma == 0.0,
            "infinite clip is only allowed with sigma = 0"
        );
        ensure!(
            self.sample_rate > 0.0 && self.sample_rate <= 1.0,
            "sample_rate must be in (0, 1]"
        );
        ensure!(
            self.delta > 0.0 && self.delta < 1.0,
            "delta must be in (0, 1)"
        );
        Ok(())
    }

    pub fn is_private(&self) -> bool {
        self.sigma > 0.0
    }
}

/// `√(Σ_l ‖g_l‖_F²)`.
pub fn global_norm(per_layer: &[DenseMatrix]) -> f64 {
    per_layer
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `min(1, C/ν)`; 1 for `ν = 0`.
pub fn clip_scale(nu: f64, clip: f64) -> f64 {
    if nu > clip {
        clip / nu
    } else {
        1.0
    }
}

/// Scale one sample's gradient (all layers jointly) to norm `min(ν, C)`.
/// Returns the clipped layers and the pre-clip norm `ν`. `sample` only
/// labels the error for non-finite input.
pub fn global_clip(
    sample: usize,
    per_layer: &[DenseMatrix],
    clip: f64,
) -> Result<(Vec<DenseMatrix>, f64)> {
    ensure!(clip > 0.0, "clip must be > 0");
    if per_layer.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { sample });
    }
    let nu = global_norm(per_layer);
    if !nu.is_finite() {
        return Err(Error::NonFinite { sample });
    }
    let s = clip_scale(nu, clip);
    Ok((per_layer.iter().map(|g| g.scale(s)).collect(), nu))
}

/// `(Σ ḡ + z) / B` with `z ~ N(0, σ²C² I)` per coordinate. Noise goes on the
/// sum; only then is it averaged. `batch_size` is the divisor (the expected
/// batch size under Poisson sampling).
pub fn privatize(
    sum_clipped: &[DenseMatrix],
    batch_size: f64,
    params: &PrivacyParams,
    rng: &mut Rng,
) -> Result<Vec<DenseMatrix>> {
    ensure!(batch_size >= 1.0, "batch size must be >= 1");
    let std = params.sigma * params.clip;
    Ok(sum_clipped
        .iter()
        .map(|s| {
            let mut out = s.clone();
            if params.sigma > 0.0 {
                for v in out.data_mut() {
                    *v += std * rng.normal();
                }
            }
            out.scale_in_place(1.0 / batch_size);
            out
        })
        .collect())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// RDP of one sampled-Gaussian step at integer order `alpha ≥ 2`:
/// `α/(2σ²)` for `q = 1`, otherwise
/// `log(Σ_k C(α,k) (1−q)^{α−k} q^k e^{(k²−k)/(2σ²)}) / (α−1)`.
pub fn rdp_step(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    ensure!(q > 0.0 && q <= 1.0, "sampling rate must be in (0, 1]");
    ensure!(alpha >= 2, "Rényi order must be >= 2");
    if sigma <= 0.0 {
        return Err(Error::InfinitePrivacyLoss);
    }
    let a = f64::from(alpha);
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += (f64::from(alpha - k + 1) / f64::from(k)).ln();
        }
        let kf = f64::from(k);
        let term = log_binom + (a - kf) * l1q + kf * lq + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    Ok((acc / (a - 1.0)).max(0.0))
}

/// Accumulated RDP per order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<u32>,
    pub rdp: Vec<f64>,
    pub steps: u64,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

impl AccountantState {
    pub fn new(orders: Vec<u32>) -> Self {
        let n = orders.len();
        Self {
            orders,
            rdp: vec![0.0; n],
            steps: 0,
        }
    }

    /// Compose `steps` identical steps.
    pub fn compose(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        for (o, r) in self.orders.iter().zip(self.rdp.iter_mut()) {
            *r += steps as f64 * rdp_step(q, sigma, *o)?;
        }
        self.steps += steps;
        Ok(())
    }

    pub fn step(&mut self, q: f64, sigma: f64) -> Result<()> {
        self.compose(q, sigma, 1)
    }
}

/// `ε = min_α [RDP(α) + ln(1/δ)/(α−1)]` and the minimizing order (smallest
/// on ties).
pub fn epsilon_of(state: &AccountantState, delta: f64) -> Result<(f64, u32)> {
    ensure!(state.steps >= 1, "accountant has no steps");
    ensure!(delta > 0.0 && delta < 1.0, "delta must be in (0, 1)");
    ensure!(!state.orders.is_empty(), "accountant has no orders");
    let mut best = (f64::INFINITY, state.orders[0]);
    for (&o, &r) in state.orders.iter().zip(&state.rdp) {
        let eps = r + (1.0 / delta).ln() / (f64::from(o) - 1.0);
        if eps < best.0 {
            best = (eps, o);
        }
    }
    Ok(best)
}

/// ε after `steps` steps at `(q, σ)`, default orders.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut s = AccountantState::default();
    s.compose(q, sigma, steps)?;
    Ok(epsilon_of(&s, delta)?.0)
}

pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 1e3;

/// Smallest σ (to bisection precision) with `ε(σ) ≤ target`. The result
/// carries the certificate `ε(σ·(1 − 1e−3)) > target`.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    ensure!(target_epsilon > 0.0, "target epsilon must be > 0");
    ensure!(steps >= 1, "need at least one step");
    let eps = |s: f64| epsilon_for(q, s, steps, delta);
    let unreachable = || Error::Unreachable {
        target: target_epsilon,
        lo: SIGMA_MIN,
        hi: SIGMA_MAX,
    };
    if eps(SIGMA_MAX)? > target_epsilon || eps(SIGMA_MIN)? <= target_epsilon {
        return Err(unreachable());
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi / lo - 1.0 > 1e-5 {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug_assert!(eps(hi * (1.0 - 1e-3))? > target_epsilon);
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let g = DenseMatrix::new(1, 2, vec![6.0, 8.0]).unwrap();
        let (c, nu) = global_clip(0, std::slice::from_ref(&g), 1.0).unwrap();
        assert_eq!(nu, 10.0);
        assert!((global_norm(&c) - 1.0).abs() < 1e-15);
        let small = g.scale(0.05);
        let (c, nu) = global_clip(0, std::slice::from_ref(&small), 1.0).unwrap();
        assert_eq!(nu, 0.5);
        assert_eq!(c[0], small);
        let a = DenseMatrix::new(1, 1, vec![3.0]).unwrap();
        let b = DenseMatrix::new(1, 1, vec![4.0]).unwrap();
        assert_eq!(global_clip(0, &[a, b], 100.0).unwrap().1, 5.0);
    }

    #[test]
    fn poisoned_sample_is_named() {
        let mut g = DenseMatrix::zeros(1, 2);
        g.data_mut()[1] = f64::NAN;
        match global_clip(7, &[g], 1.0) {
            Err(Error::NonFinite { sample }) => assert_eq!(sample, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rdp_examples() {
        assert_eq!(rdp_step(1.0, 1.0, 2).unwrap(), 1.0);
        assert!((2..=16).all(|a| rdp_step(1e-6, 1.0, a).unwrap() <= 1e-6));
        assert!(matches!(
            rdp_step(0.1, 0.0, 2),
            Err(Error::InfinitePrivacyLoss)
        ));
    }

    #[test]
    fn noiseless_privatize_is_mean() {
        let p = PrivacyParams {
            clip: 1.0,
            sigma: 0.0,
            sample_rate: 0.5,
            delta: 1e-5,
        };
        let s = DenseMatrix::new(1, 2, vec![2.0, 4.0]).unwrap();
        let out = privatize(&[s], 2.0, &p, &mut Rng::new(0)).unwrap();
        assert_eq!(out[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_targets() {
        assert!(matches!(
            calibrate_sigma(1e-9, 1e-5, 1.0, 1000),
            Err(Error::Unreachable { .. })
        ));
        assert!(matches!(
            calibrate_sigma(1e6, 1e-5, 0.01, 1),
            Err(Error::Unreachable { .. })
        ));
    }
}
