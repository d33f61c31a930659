mod common;

use common::rdp_oracle;
use dpkfc::dp::{
    calibrate_sigma, epsilon_for, epsilon_of, global_clip, global_norm, privatize, rdp_step,
    AccountantState, PrivacyParams,
};
use dpkfc::linalg::{DenseMatrix, Rng};

#[test]
fn rdp_matches_extended_precision_oracle() {
    for alpha in 2..=64 {
        let got = rdp_step(0.01, 1.0, alpha).unwrap();
        let want = rdp_oracle(0.01, 1.0, alpha);
        assert!(
            (got - want).abs() <= 1e-9 * want.abs(),
            "alpha {alpha}: {got} vs {want}"
        );
    }
    for (q, s, a) in [(0.05, 0.8, 12), (0.3, 2.0, 40), (0.001, 0.5, 6)] {
        let (got, want) = (rdp_step(q, s, a).unwrap(), rdp_oracle(q, s, a));
        assert!((got - want).abs() <= 1e-9 * want.abs());
    }
}

#[test]
fn full_batch_epsilon_matches_grid() {
    let mut st = AccountantState::default();
    st.step(1.0, 1.0).unwrap();
    let (eps, order) = epsilon_of(&st, 1e-5).unwrap();
    let (mut best, mut arg) = (f64::INFINITY, 0);
    for a in 2..=64u32 {
        let v = f64::from(a) / 2.0 + (1e5f64).ln() / (f64::from(a) - 1.0);
        if v < best {
            best = v;
            arg = a;
        }
    }
    assert_eq!(eps, best);
    assert_eq!(order, arg);
}

#[test]
fn epsilon_grows_with_steps_and_shrinks_with_delta() {
    let mut st = AccountantState::default();
    st.compose(0.02, 1.1, 100).unwrap();
    let e1 = epsilon_of(&st, 1e-5).unwrap().0;
    st.compose(0.02, 1.1, 100).unwrap();
    assert!(epsilon_of(&st, 1e-5).unwrap().0 > e1);
    assert!(epsilon_of(&st, 0.5).unwrap().0 < epsilon_of(&st, 1e-9).unwrap().0);
}

#[test]
fn calibration_roundtrip_and_monotonicity() {
    let (delta, q, steps) = (1e-4, 0.025, 200);
    for target in [0.5, 1.0, 2.0, 8.0] {
        let s = calibrate_sigma(target, delta, q, steps).unwrap();
        assert!(epsilon_for(q, s, steps, delta).unwrap() <= target);
        assert!(epsilon_for(q, s * 0.999, steps, delta).unwrap() > target);
    }
    let mut prev = f64::INFINITY;
    for i in 0..40 {
        let s = 0.3 * 1.2f64.powi(i);
        let e = epsilon_for(q, s, steps, delta).unwrap();
        assert!(e <= prev);
        prev = e;
    }
    let s_short = calibrate_sigma(1.0, delta, q, 100).unwrap();
    let s_long = calibrate_sigma(1.0, delta, q, 1000).unwrap();
    assert!(s_long > s_short);
}

#[test]
fn accountant_monotone_in_q_and_steps() {
    let mut rng = Rng::new(3);
    for _ in 0..30 {
        let q = 0.001 + 0.2 * rng.uniform();
        let s = 0.5 + 3.0 * rng.uniform();
        let t = 1 + rng.index(500) as u64;
        let e = epsilon_for(q, s, t, 1e-5).unwrap();
        assert!(epsilon_for(q * 1.5, s, t, 1e-5).unwrap() >= e);
        assert!(epsilon_for(q, s, t + 10, 1e-5).unwrap() >= e);
        assert!(epsilon_for(q, s * 1.1, t, 1e-5).unwrap() <= e);
    }
}

#[test]
fn noise_statistics() {
    let p = PrivacyParams {
        clip: 1.0,
        sigma: 1.0,
        sample_rate: 0.1,
        delta: 1e-5,
    };
    let mut rng = Rng::new(8);
    let zero = DenseMatrix::zeros(1, 100_000);
    let out = privatize(&[zero], 1.0, &p, &mut rng).unwrap();
    let v = out[0].data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd - 1.0).abs() <= 0.02);

    // expectation of the noisy mean equals the clipped mean
    let p = PrivacyParams { clip: 2.0, ..p };
    let b = 4.0;
    let sum = DenseMatrix::new(1, 1, vec![3.0]).unwrap();
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        acc += privatize(std::slice::from_ref(&sum), b, &p, &mut rng).unwrap()[0].data()[0];
    }
    let bound = 4.0 * p.sigma * p.clip / (b * (draws as f64).sqrt());
    assert!((acc / draws as f64 - 0.75).abs() <= bound);
}

#[test]
fn clipping_bounds_preconditioned_norms() {
    let mut rng = Rng::new(1);
    for _ in 0..500 {
        let scale = 10f64.powf(6.0 * rng.uniform());
        let p = DenseMatrix::new(3, 3, rng.standard_normal(9))
            .unwrap()
            .scale(scale);
        let g = DenseMatrix::new(3, 2, rng.standard_normal(6)).unwrap();
        let pg = p.matmul(&g).unwrap();
        for c in [0.1, 1.0, 10.0] {
            let (clipped, nu) = global_clip(0, &[pg.clone(), g.clone()], c).unwrap();
            assert!(global_norm(&clipped) <= c + 1e-9);
            assert!((nu - global_norm(&[pg.clone(), g.clone()])).abs() <= 1e-12 * nu);
        }
    }
}
