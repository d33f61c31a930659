//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so criteria share the long
//! MNIST runs and report in order. Exits nonzero if any criterion fails.
//! `DPKFC_ACCEPTANCE_QUICK=1` skips the MNIST comparison (criteria 10-12).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dpkfc::data::{gen_blobs, load_idx, mnist10k_paths, BlobsSpec, Dataset, Normalization};
use dpkfc::diagnostics::{
    layer_spectrum, log_spectrum_cosine, slq_density, snr_spread, FactorKind,
};
use dpkfc::dp::{self, calibrate_sigma, epsilon_for, global_clip, rdp_step, AccountantState};
use dpkfc::kfac::{
    build_preconditioner, estimate_factors, precondition_grad, synthetic_probe_inputs, KfacConfig,
    KfacLayerState, ProbeSource,
};
use dpkfc::linalg::{sym_eig, DenseMatrix, Rng};
use dpkfc::nn::{Activation, LayerSpec, Loss, Model, Targets};
use dpkfc::probes::{gen_labels, gen_pink_noise, PinkNoiseSpec};
use dpkfc::tensor::Tensor;
use dpkfc::trainer::{train, AlignmentConfig, Method, PrivacyConfig, RunRecord, TrainConfig};

use common::{max_fd_error, naive_conv, radial_slope, random_spd, rdp_oracle};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Tally {
    failed: Vec<String>,
}

impl Tally {
    /// Run one criterion, catching panics, and enforce its runtime budget.
    fn check(
        &mut self,
        id: &str,
        name: &str,
        budget: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_text(&e))));
        let took = t.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = out.pass && in_time;
        let budget_note = match budget {
            Some(b) if !in_time => format!(" [over budget {:.0}s]", b.as_secs_f64()),
            _ => String::new(),
        };
        println!(
            "criterion {id:>3} {name:<36} {}  {} ({:.1}s){budget_note}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    fn skip(&self, id: &str, name: &str, why: &str) {
        println!("criterion {id:>3} {name:<36} SKIP  {why}");
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// 1 -------------------------------------------------------------------------

fn sensitivity_fuzz() -> Outcome {
    let mut rng = Rng::new(101);
    let shapes = [(3, 4), (5, 2)];
    let (mut violations, mut clips, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..10_000 {
        let mut per_layer = Vec::new();
        for &(q, p) in &shapes {
            // arbitrary (not even symmetric) transforms with entries up to 1e6
            let mut rand_mat = |n: usize| {
                let scale = 10f64.powf(6.0 * rng.uniform());
                DenseMatrix::new(n, n, rng.standard_normal(n * n))
                    .unwrap()
                    .scale(scale)
            };
            let state = KfacLayerState {
                layer: 0,
                u_g: rand_mat(q),
                u_a: rand_mat(p),
                eig_a: vec![],
                eig_g: vec![],
                skipped: false,
            };
            let g = DenseMatrix::new(q, p, rng.standard_normal(q * p)).unwrap();
            per_layer.push(precondition_grad(&g, &state).unwrap());
        }
        for c in [0.1, 1.0, 10.0] {
            let (clipped, _) = global_clip(0, &per_layer, c).unwrap();
            let norm = clipped
                .iter()
                .flat_map(|m| m.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            clips += 1;
            worst = worst.max(norm - c);
            if norm > c + 1e-9 {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations in {clips} clips, max excess {worst:.2e}"),
    )
}

// 2 -------------------------------------------------------------------------

fn isotropy_oracle() -> Outcome {
    let mut rng = Rng::new(102);
    let (p, q) = (4, 4);
    let d = p * q;
    let a = random_spd(p, &mut rng);
    let g = random_spd(q, &mut rng);
    // g_i = G^{1/2} Z A^{1/2} has vec-covariance A ⊗ G
    let sqrt = |m: &DenseMatrix| sym_eig(m).unwrap().reconstruct_with(f64::sqrt);
    let (ra, rg) = (sqrt(&a), sqrt(&g));
    let state = build_preconditioner(&a, &g, 0.0).unwrap();
    let n = 100_000;
    let mut second = vec![0.0; d * d];
    let mut sq = 0.0;
    for _ in 0..n {
        let z = DenseMatrix::new(q, p, rng.standard_normal(d)).unwrap();
        let sample = rg.matmul(&z).unwrap().matmul(&ra).unwrap();
        let v = precondition_grad(&sample, &state).unwrap().vec_col_major();
        sq += v.iter().map(|x| x * x).sum::<f64>();
        for i in 0..d {
            for j in 0..d {
                second[i * d + j] += v[i] * v[j];
            }
        }
    }
    let mut err = 0.0;
    for i in 0..d {
        for j in 0..d {
            let c = second[i * d + j] / n as f64 - if i == j { 1.0 } else { 0.0 };
            err += c * c;
        }
    }
    let cov_err = err.sqrt() / (d as f64).sqrt();
    let norm_err = (sq / n as f64 - d as f64).abs() / d as f64;
    outcome(
        cov_err <= 0.05 && norm_err <= 0.02,
        format!(
            "|Cov-I|_F/sqrt(d) = {cov_err:.4} (<= 0.05), |E|g|^2-d|/d = {norm_err:.4} (<= 0.02)"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn pink_noise_spectrum() -> Outcome {
    let mut rng = Rng::new(103);
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [0.0, 0.5, 1.0, 1.5] {
        let x = gen_pink_noise(&PinkNoiseSpec::new(32, 1, 64, 64, alpha), &mut rng).unwrap();
        let slope = radial_slope(&x);
        let tol = if alpha == 0.0 { 0.1 } else { 0.15 };
        ok &= (slope + alpha).abs() <= tol;
        parts.push(format!("a={alpha}: {slope:.3}"));
    }
    outcome(ok, format!("slopes {}", parts.join(", ")))
}

// 4 -------------------------------------------------------------------------

fn damping_bounds() -> Outcome {
    let mut rng = Rng::new(104);
    let gamma: f64 = 1e-2;
    let (lo, hi) = ((1.0 + gamma).powf(-0.5), gamma.powf(-0.5));
    let (mut violations, mut count) = (0usize, 0usize);
    let (mut min_seen, mut max_seen) = (f64::INFINITY, 0.0f64);
    for i in 0..100 {
        // rank-deficient for some pairs so the upper bound is exercised
        let psd = |n: usize, rank: usize, rng: &mut Rng| {
            let x = DenseMatrix::new(n, rank, rng.standard_normal(n * rank)).unwrap();
            let mut s = x.matmul_nt(&x).unwrap();
            s.symmetrize();
            let top = sym_eig(&s).unwrap().eigenvalues[0];
            s.scale(1.0 / top)
        };
        let (n_a, n_g) = (2 + i % 7, 2 + (i * 3) % 5);
        let a = psd(n_a, 1 + i % n_a, &mut rng);
        let g = psd(n_g, n_g + 1, &mut rng);
        let s = build_preconditioner(&a, &g, gamma).unwrap();
        for u in [&s.u_a, &s.u_g] {
            for l in sym_eig(u).unwrap().eigenvalues {
                count += 1;
                min_seen = min_seen.min(l);
                max_seen = max_seen.max(l);
                if l < lo * (1.0 - 1e-12) || l > hi * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "{violations} of {count} eigenvalues outside [{lo:.4}, {hi:.1}]; seen [{min_seen:.4}, {max_seen:.4}]"
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn accountant() -> Outcome {
    let mut worst: f64 = 0.0;
    for alpha in 2..=64 {
        let got = rdp_step(0.01, 1.0, alpha).unwrap();
        let want = rdp_oracle(0.01, 1.0, alpha);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let mut st = AccountantState::default();
    st.step(1.0, 1.0).unwrap();
    let (eps, _) = dp::epsilon_of(&st, 1e-5).unwrap();
    let grid = (2..=64u32)
        .map(|a| f64::from(a) / 2.0 + (1e5f64).ln() / (f64::from(a) - 1.0))
        .fold(f64::INFINITY, f64::min);
    let (delta, q, steps) = (1e-5, 0.01, 1000);
    let mut brackets = true;
    for target in [0.5, 1.0, 2.0, 8.0] {
        let s = calibrate_sigma(target, delta, q, steps).unwrap();
        brackets &= epsilon_for(q, s, steps, delta).unwrap() <= target;
        brackets &= epsilon_for(q, s * (1.0 - 1e-3), steps, delta).unwrap() > target;
    }
    outcome(
        worst <= 1e-9 && eps == grid && brackets,
        format!(
            "max rel RDP error {worst:.1e} (<= 1e-9), eps(q=1) {eps} vs grid {grid}, brackets {}",
            if brackets { "hold" } else { "broken" }
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn tanh() -> LayerSpec {
    LayerSpec::Activation {
        kind: Activation::Tanh,
    }
}

fn gradient_engine() -> Outcome {
    let cnn = vec![
        LayerSpec::Conv2d {
            c_in: 2,
            c_out: 4,
            k: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        tanh(),
        LayerSpec::Conv2d {
            c_in: 4,
            c_out: 6,
            k: 3,
            stride: 2,
            pad: 1,
            bias: true,
        },
        tanh(),
        LayerSpec::Flatten,
        LayerSpec::Linear {
            d_in: 96,
            d_out: 5,
            bias: true,
        },
    ];
    let mlp = vec![
        LayerSpec::Linear {
            d_in: 6,
            d_out: 8,
            bias: true,
        },
        tanh(),
        LayerSpec::Linear {
            d_in: 8,
            d_out: 7,
            bias: true,
        },
        tanh(),
        LayerSpec::Linear {
            d_in: 7,
            d_out: 4,
            bias: true,
        },
    ];
    let fd_cnn = max_fd_error(cnn, vec![2, 8, 8], 106);
    let fd_mlp = max_fd_error(mlp, vec![6], 107);

    let mut rng = Rng::new(108);
    let mut conv_err: f64 = 0.0;
    for (h, w, k, stride, pad) in [(8, 8, 3, 1, 1), (8, 8, 3, 2, 1), (7, 5, 2, 1, 0)] {
        let layers = vec![
            LayerSpec::Conv2d {
                c_in: 2,
                c_out: 3,
                k,
                stride,
                pad,
                bias: true,
            },
            LayerSpec::Flatten,
        ];
        let mut model = Model::new(layers, vec![2, h, w], &mut rng).unwrap();
        let theta = rng.standard_normal(model.num_params());
        model.set_flat_params(&theta).unwrap();
        let x = Tensor::new(vec![2, 2, h, w], rng.standard_normal(4 * h * w)).unwrap();
        let (out, _) = model.forward(&x).unwrap();
        let want = naive_conv(&x, model.param(0), 3, k, stride, pad);
        for (a, b) in out.data().iter().zip(&want) {
            conv_err = conv_err.max((a - b).abs());
        }
    }

    let mut kron_err: f64 = 0.0;
    for p in 1..=4 {
        for q in 1..=4 {
            let s = build_preconditioner(&random_spd(p, &mut rng), &random_spd(q, &mut rng), 1e-2)
                .unwrap();
            let g = DenseMatrix::new(q, p, rng.standard_normal(p * q)).unwrap();
            let lhs = precondition_grad(&g, &s).unwrap().vec_col_major();
            let rhs = s.u_a.kron(&s.u_g).matvec(&g.vec_col_major()).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                kron_err = kron_err.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    outcome(
        fd_cnn <= 1e-5 && fd_mlp <= 1e-5 && conv_err <= 1e-10 && kron_err <= 1e-10,
        format!(
            "fd rel err cnn {fd_cnn:.1e} mlp {fd_mlp:.1e} (<= 1e-5), conv {conv_err:.1e}, kron {kron_err:.1e}"
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn slq() -> Outcome {
    let mut worst: f64 = 0.0;
    for d in 1..=8 {
        let diag: Vec<f64> = (1..=d).map(|v| v as f64).collect();
        let h = DenseMatrix::from_diag(&diag);
        let r = slq_density(|v| h.matvec(v), d, 4, d, &mut Rng::new(d as u64)).unwrap();
        for nodes in &r.nodes {
            let mut got = nodes.clone();
            got.sort_by(f64::total_cmp);
            if got.len() != d {
                return outcome(false, format!("d={d}: {} nodes", got.len()));
            }
            for (g, w) in got.iter().zip(&diag) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    // Haar eigenbasis, eigenvalues uniform on [1, 10]; 20 independent draws
    let mut rng = Rng::new(107);
    let mut rel: f64 = 0.0;
    for _ in 0..20 {
        let q = sym_eig(&random_spd(50, &mut rng)).unwrap().eigenvectors;
        let lam: Vec<f64> = (0..50).map(|_| 1.0 + 9.0 * rng.uniform()).collect();
        let h = q
            .matmul(&DenseMatrix::from_diag(&lam))
            .unwrap()
            .matmul_nt(&q)
            .unwrap();
        let r = slq_density(|v| h.matvec(v), 50, 30, 20, &mut rng).unwrap();
        let exact = h.trace() / 50.0;
        rel = rel.max((r.mean_eigenvalue() - exact).abs() / exact);
    }
    outcome(
        worst <= 1e-8 && rel <= 0.05,
        format!("node error {worst:.1e} (<= 1e-8), worst trace rel error over 20 draws {rel:.4} (<= 0.05)"),
    )
}

// 8 -------------------------------------------------------------------------

fn small_cnn(seed: u64) -> Model {
    let layers = vec![
        LayerSpec::Conv2d {
            c_in: 1,
            c_out: 8,
            k: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Conv2d {
            c_in: 8,
            c_out: 16,
            k: 3,
            stride: 2,
            pad: 1,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Flatten,
        LayerSpec::Linear {
            d_in: 256,
            d_out: 10,
            bias: true,
        },
    ];
    Model::new(layers, vec![1, 8, 8], &mut Rng::new(seed)).unwrap()
}

fn digit_blobs(n: usize, noise: f64, seed: u64) -> Dataset {
    gen_blobs(&BlobsSpec {
        n,
        dim: 64,
        classes: 10,
        noise,
        seed,
    })
    .unwrap()
    .reshaped(vec![1, 8, 8])
    .unwrap()
}

fn spectral_alignment() -> Outcome {
    let m = 256;
    let mut cos = Vec::new();
    for seed in 0..5u64 {
        let model = small_cnn(seed);
        let ds = digit_blobs(1000, 1.0, 100 + seed);
        let idx = ds.split(&dpkfc::data::Split::Train)[..m].to_vec();
        let (x, y) = ds.batch(&idx);
        let oracle = estimate_factors(&model, &x, &y, &Loss::CrossEntropy, 1e-3).unwrap();
        let mut rng = Rng::new(200 + seed);
        let src = ProbeSource::SyntheticPink {
            alpha: 1.0,
            eps0: 1e-6,
        };
        let xs = synthetic_probe_inputs(&model, &src, m, &mut rng).unwrap();
        let ys = Targets::Classes(gen_labels(m, 10, &mut rng).unwrap());
        let syn = estimate_factors(&model, &xs, &ys, &Loss::CrossEntropy, 1e-3).unwrap();
        let (o, s) = (vec![oracle[0].clone()], vec![syn[0].clone()]);
        let r = layer_spectrum(&[("oracle".into(), &o), ("synthetic".into(), &s)]).unwrap();
        cos.push(log_spectrum_cosine(&r.layers[0].eigenvalues, &r.layers[1].eigenvalues).unwrap());
    }
    let min = cos.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        min >= 0.6,
        format!("first-layer log-spectrum cosine per seed {cos:.3?} (min >= 0.6)"),
    )
}

// 9 -------------------------------------------------------------------------

/// Identity-input linear model whose output is θ, under `½ Σ h_j (θ_j − y_j)²`
/// with `h` log-spaced over four decades and `y ~ N(θ*, I)`. `θ*_j ∝ h_j^{-1/2}`
/// so every coordinate starts with the same share of the excess loss.
fn quadratic_case(seed: u64) -> (Dataset, Vec<f64>) {
    let (d, n) = (100, 1000);
    let curv: Vec<f64> = (0..d)
        .map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / (d - 1) as f64))
        .collect();
    let mut rng = Rng::new(1000 + seed);
    let theta: Vec<f64> = rng
        .standard_normal(d)
        .iter()
        .zip(&curv)
        .map(|(v, h)| v / h.sqrt())
        .collect();
    let mut y = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let z = rng.standard_normal(d);
        for j in 0..d {
            y.set(i, j, theta[j] + z[j]);
        }
    }
    let ds = Dataset::new(
        Tensor::new(vec![n, 1], vec![1.0; n]).unwrap(),
        Targets::Values(y),
        0,
        (0..n).collect(),
        vec![],
        Normalization {
            kind: "none".into(),
            scale: 1.0,
            mean: vec![],
            std: vec![],
        },
    )
    .unwrap();
    (ds, curv)
}

fn quadratic_run(ds: &Dataset, curv: &[f64], method: Method, lr: f64, seed: u64) -> f64 {
    let d = curv.len();
    let model = Model::from_params(
        vec![LayerSpec::Linear {
            d_in: 1,
            d_out: d,
            bias: false,
        }],
        vec![1],
        vec![DenseMatrix::zeros(d, 1)],
    )
    .unwrap();
    let cfg = TrainConfig {
        method,
        kfac: KfacConfig {
            probe_source: ProbeSource::PrivateOracle,
            probe_batch: 256,
            ..KfacConfig::default()
        },
        privacy: PrivacyConfig {
            clip: 1.0,
            sigma: Some(1.0),
            target_epsilon: None,
            delta: None,
        },
        lr,
        momentum: 0.9,
        epochs: 50,
        expected_batch: 100,
        seed,
        eval_every: 1000,
        loss: Loss::DiagQuadratic {
            curvature: curv.to_vec(),
        },
        log_snr: false,
        alignment: None,
    };
    let (_, rec) = train(model, ds, &cfg).unwrap();
    assert_eq!(rec.summary.steps, 500);
    rec.summary.final_train_loss
}

fn convergence_ordering() -> Outcome {
    // learning rates: best of {0.003, 0.01, 0.03, 0.1, 0.3, 1} per method
    let (lr_sgd, lr_kfc) = (0.3, 0.1);
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..10 {
        let (ds, curv) = quadratic_case(seed);
        let sgd = quadratic_run(&ds, &curv, Method::Dpsgd, lr_sgd, seed);
        let kfc = quadratic_run(&ds, &curv, Method::Dpkfc, lr_kfc, seed);
        if kfc < sgd {
            wins += 1;
        }
        gaps.push(sgd - kfc);
    }
    outcome(
        wins >= 9,
        format!("dpkfc lower final loss in {wins}/10 seeds (>= 9); loss gaps {gaps:.2?}"),
    )
}

// 10-12 ---------------------------------------------------------------------

fn mnist_cnn(seed: u64) -> Model {
    let layers = vec![
        LayerSpec::Conv2d {
            c_in: 1,
            c_out: 16,
            k: 3,
            stride: 2,
            pad: 1,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Conv2d {
            c_in: 16,
            c_out: 32,
            k: 3,
            stride: 2,
            pad: 1,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Flatten,
        LayerSpec::Linear {
            d_in: 1568,
            d_out: 64,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Linear {
            d_in: 64,
            d_out: 10,
            bias: true,
        },
    ];
    Model::new(layers, vec![1, 28, 28], &mut Rng::new(seed)).unwrap()
}

const SYNTHETIC: &str = "synthetic-pink(alpha=1)";
const PROXY: &str = "blobs-proxy(seed=0)";

struct Arm {
    method: Method,
    clip: f64,
}

fn image_config(arm: &Arm, seed: u64, batch: usize, track: bool) -> TrainConfig {
    TrainConfig {
        method: arm.method,
        kfac: KfacConfig::default(),
        privacy: PrivacyConfig {
            clip: arm.clip,
            sigma: None,
            target_epsilon: Some(1.0),
            delta: None,
        },
        lr: 1e-3,
        momentum: 0.9,
        epochs: 5,
        expected_batch: batch,
        seed,
        eval_every: 16,
        loss: Loss::CrossEntropy,
        log_snr: true,
        alignment: (track && arm.method == Method::Dpkfc).then(|| AlignmentConfig {
            every: 16,
            oracle_batch: 256,
            sources: vec![
                ProbeSource::SyntheticPink {
                    alpha: 1.0,
                    eps0: 1e-6,
                },
                ProbeSource::Blobs {
                    classes: 10,
                    noise: 1.0,
                    seed: 0,
                },
            ],
        }),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// SNR spread at the logged step closest to the middle of the run.
fn mid_spread(r: &RunRecord) -> f64 {
    let mid = r.summary.steps / 2;
    let row = r
        .rows
        .iter()
        .filter(|x| !x.snr.is_empty())
        .min_by_key(|x| x.step.abs_diff(mid))
        .expect("snr logged");
    snr_spread(&row.snr)
}

struct Comparison {
    sgd: Vec<RunRecord>,
    kfc: Vec<RunRecord>,
}

fn compare(
    ds: &Dataset,
    model: impl Fn(u64) -> Model,
    sgd: Arm,
    kfc: Arm,
    batch: usize,
) -> Comparison {
    let mut c = Comparison {
        sgd: Vec::new(),
        kfc: Vec::new(),
    };
    for seed in 1..=5u64 {
        for (arm, out) in [(&sgd, &mut c.sgd), (&kfc, &mut c.kfc)] {
            let (_, rec) = train(model(seed), ds, &image_config(arm, seed, batch, true)).unwrap();
            assert!(
                (rec.summary.final_epsilon - 1.0).abs() <= 1e-3 || rec.summary.final_epsilon < 1.0
            );
            out.push(rec);
        }
    }
    c
}

fn accuracies(rs: &[RunRecord]) -> Vec<f64> {
    rs.iter()
        .map(|r| r.summary.final_test_accuracy.unwrap())
        .collect()
}

fn benchmark_gap(c: &Comparison) -> Outcome {
    let (a, b) = (accuracies(&c.sgd), accuracies(&c.kfc));
    let gap = 100.0 * (mean(&b) - mean(&a));
    let eps = c
        .kfc
        .iter()
        .chain(&c.sgd)
        .map(|r| r.summary.final_epsilon)
        .fold(0.0, f64::max);
    outcome(
        gap >= 1.0 && eps <= 1.0,
        format!(
            "mean acc dpsgd {:.4} {a:.4?} vs dpkfc {:.4} {b:.4?}; gap {gap:+.2} pp (>= 1.00), max eps {eps:.4}",
            mean(&a),
            mean(&b)
        ),
    )
}

fn snr_homogenization(c: &Comparison) -> Outcome {
    let s: Vec<f64> = c.sgd.iter().map(mid_spread).collect();
    let k: Vec<f64> = c.kfc.iter().map(mid_spread).collect();
    let wins = s.iter().zip(&k).filter(|(a, b)| b < a).count();
    outcome(
        wins >= 4,
        format!("mid-run SNR max/min dpkfc < dpsgd in {wins}/5 seeds (>= 4); dpsgd {s:.2?} dpkfc {k:.2?}"),
    )
}

fn mismatch_robustness(c: &Comparison) -> Outcome {
    let (mut ok, mut total) = (0usize, 0usize);
    for r in &c.kfc {
        let rel = |src: &str, step: u64| {
            r.alignment
                .find(step, 0, FactorKind::A, src)
                .map(|row| row.metrics.rel_frob)
        };
        let mut steps: Vec<u64> = r.alignment.rows.iter().map(|x| x.step).collect();
        steps.dedup();
        for step in steps {
            let (s, p) = (rel(SYNTHETIC, step).unwrap(), rel(PROXY, step).unwrap());
            total += 1;
            if s <= p {
                ok += 1;
            }
        }
    }
    let frac = ok as f64 / total.max(1) as f64;
    outcome(
        total > 0 && frac >= 0.8,
        format!("synthetic <= proxy first-layer A rel_frob at {ok}/{total} tracked steps ({:.0}%, >= 80%)", 100.0 * frac),
    )
}

fn main() {
    let mut tally = Tally::default();
    println!(
        "acceptance suite ({} worker threads)",
        dpkfc::par::threads()
    );
    tally.check("1", "sensitivity fuzz", secs(10), sensitivity_fuzz);
    tally.check("2", "isotropy oracle", secs(30), isotropy_oracle);
    tally.check("3", "pink-noise spectrum", secs(10), pink_noise_spectrum);
    tally.check("4", "eigenvalue damping bounds", None, damping_bounds);
    tally.check("5", "accountant correctness", secs(10), accountant);
    tally.check("6", "gradient engine", secs(60), gradient_engine);
    tally.check("7", "stochastic Lanczos quadrature", secs(10), slq);
    tally.check(
        "8",
        "spectral alignment (desk scale)",
        None,
        spectral_alignment,
    );
    tally.check("9", "convergence ordering", secs(120), convergence_ordering);

    let mut smoke = None;
    tally.check("10s", "benchmark gap, blobs smoke", secs(180), || {
        let ds = digit_blobs(10_000, 0.3, 1);
        let c = compare(
            &ds,
            small_cnn,
            Arm {
                method: Method::Dpsgd,
                clip: 20.0,
            },
            Arm {
                method: Method::Dpkfc,
                clip: 30.0,
            },
            128,
        );
        let o = benchmark_gap(&c);
        smoke = Some(c);
        o
    });
    drop(smoke);

    if std::env::var_os("DPKFC_ACCEPTANCE_QUICK").is_some() {
        for (id, name) in [
            ("10", "benchmark gap, MNIST 10k"),
            ("11", "SNR homogenization"),
            ("12", "mismatch robustness proxy"),
        ] {
            tally.skip(id, name, "DPKFC_ACCEPTANCE_QUICK is set");
        }
    } else {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let mut runs = None;
        tally.check("10", "benchmark gap, MNIST 10k", secs(45 * 60), || {
            let (i, l) = mnist10k_paths(&root);
            let ds = load_idx(&i, &l).unwrap().standardized();
            // clip norms tuned per method on seed 0, which is not evaluated
            let c = compare(
                &ds,
                mnist_cnn,
                Arm {
                    method: Method::Dpsgd,
                    clip: 25.0,
                },
                Arm {
                    method: Method::Dpkfc,
                    clip: 50.0,
                },
                256,
            );
            let o = benchmark_gap(&c);
            runs = Some(c);
            o
        });
        match &runs {
            Some(c) => {
                tally.check("11", "SNR homogenization", None, || snr_homogenization(c));
                tally.check("12", "mismatch robustness proxy", None, || {
                    mismatch_robustness(c)
                });
            }
            None => {
                tally.check("11", "SNR homogenization", None, || {
                    outcome(false, "no MNIST runs")
                });
                tally.check("12", "mismatch robustness proxy", None, || {
                    outcome(false, "no MNIST runs")
                });
            }
        }
    }

    if tally.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED criteria {}", tally.failed.join(", "));
        std::process::exit(1);
    }
}
