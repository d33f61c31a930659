//! Alignment metrics, Kronecker spectrum reconstruction, stochastic Lanczos
//! quadrature, finite-difference Hessian-vector products and layer SNR.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::kfac::{Factors, KfacState};
use crate::linalg::{dot, kron_spectrum, norm2, sym_eig, DenseMatrix, Rng};
use crate::nn::{Loss, Model, Targets};
use crate::par;
use crate::tensor::Tensor;

/// Spectra longer than this are truncated in reports.
pub const SPECTRUM_REPORT_LIMIT: usize = 10_000;

fn same_shape(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// `tr(C*ᵀĈ) / (‖C*‖_F ‖Ĉ‖_F)`, clamped to `[−1, 1]`.
pub fn cosine_sim(cstar: &DenseMatrix, chat: &DenseMatrix) -> Result<f64> {
    same_shape(cstar, chat)?;
    let (na, nb) = (cstar.frobenius_norm(), chat.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined(
            "cosine similarity of a zero matrix".into(),
        ));
    }
    Ok((cstar.frobenius_dot(chat)? / (na * nb)).clamp(-1.0, 1.0))
}

/// `‖C* − Ĉ‖_F / ‖C*‖_F`.
pub fn rel_frob(cstar: &DenseMatrix, chat: &DenseMatrix) -> Result<f64> {
    same_shape(cstar, chat)?;
    let n = cstar.frobenius_norm();
    if n == 0.0 {
        return Err(Error::Undefined(
            "relative error against a zero reference".into(),
        ));
    }
    Ok(cstar.sub(chat)?.frobenius_norm() / n)
}

fn unit(m: &DenseMatrix) -> Result<DenseMatrix> {
    let n = m.frobenius_norm();
    if n == 0.0 {
        return Err(Error::Undefined("cannot normalize a zero matrix".into()));
    }
    Ok(m.scale(1.0 / n))
}

/// Both metrics on raw and on unit-Frobenius-normalized matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub cosine: f64,
    pub rel_frob: f64,
    pub cosine_unit: f64,
    pub rel_frob_unit: f64,
}

pub fn pair_metrics(cstar: &DenseMatrix, chat: &DenseMatrix) -> Result<PairMetrics> {
    let (us, uh) = (unit(cstar)?, unit(chat)?);
    Ok(PairMetrics {
        cosine: cosine_sim(cstar, chat)?,
        rel_frob: rel_frob(cstar, chat)?,
        cosine_unit: cosine_sim(&us, &uh)?,
        rel_frob_unit: rel_frob(&us, &uh)?,
    })
}

/// `‖A⊗G − Â⊗Ĝ‖_F` via `A⊗G − Â⊗Ĝ = (A−Â)⊗G + Â⊗(G−Ĝ)`, which stays
/// accurate when the products nearly coincide.
fn kron_diff_norm(
    a: &DenseMatrix,
    g: &DenseMatrix,
    ah: &DenseMatrix,
    gh: &DenseMatrix,
) -> Result<f64> {
    let (da, dg) = (a.sub(ah)?, g.sub(gh)?);
    let sq = da.frobenius_norm().powi(2) * g.frobenius_norm().powi(2)
        + ah.frobenius_norm().powi(2) * dg.frobenius_norm().powi(2)
        + 2.0 * da.frobenius_dot(ah)? * g.frobenius_dot(&dg)?;
    Ok(sq.max(0.0).sqrt())
}

/// Metrics of `A* ⊗ G*` against `Â ⊗ Ĝ` without forming either product:
/// `⟨A⊗G, B⊗H⟩ = ⟨A,B⟩⟨G,H⟩` and `‖A⊗G‖ = ‖A‖‖G‖`.
pub fn kron_pair_metrics(
    (a_star, g_star): (&DenseMatrix, &DenseMatrix),
    (a_hat, g_hat): (&DenseMatrix, &DenseMatrix),
) -> Result<PairMetrics> {
    same_shape(a_star, a_hat)?;
    same_shape(g_star, g_hat)?;
    let (ns, nh) = (
        a_star.frobenius_norm() * g_star.frobenius_norm(),
        a_hat.frobenius_norm() * g_hat.frobenius_norm(),
    );
    if ns == 0.0 || nh == 0.0 {
        return Err(Error::Undefined(
            "Kronecker product of a zero factor".into(),
        ));
    }
    let inner = a_star.frobenius_dot(a_hat)? * g_star.frobenius_dot(g_hat)?;
    let cosine = (inner / (ns * nh)).clamp(-1.0, 1.0);
    let (ua, ug, uah, ugh) = (unit(a_star)?, unit(g_star)?, unit(a_hat)?, unit(g_hat)?);
    Ok(PairMetrics {
        cosine,
        rel_frob: kron_diff_norm(a_star, g_star, a_hat, g_hat)? / ns,
        cosine_unit: cosine,
        rel_frob_unit: kron_diff_norm(&ua, &ug, &uah, &ugh)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    A,
    G,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub step: u64,
    pub layer: usize,
    pub factor: FactorKind,
    pub reference: String,
    pub source: String,
    #[serde(flatten)]
    pub metrics: PairMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rows: Vec<AlignmentRow>,
}

impl AlignmentReport {
    pub fn find(
        &self,
        step: u64,
        layer: usize,
        factor: FactorKind,
        source: &str,
    ) -> Option<&AlignmentRow> {
        self.rows.iter().find(|r| {
            r.step == step && r.layer == layer && r.factor == factor && r.source == source
        })
    }
}

/// Compare each candidate source's factors against the reference, per
/// layer and per factor (A, G and their Kronecker product).
pub fn track_alignment(
    step: u64,
    reference: (&str, &Factors),
    candidates: &[(String, Factors)],
) -> Result<AlignmentReport> {
    let (ref_name, oracle) = reference;
    let mut rows = Vec::new();
    for (name, cand) in candidates {
        ensure!(
            cand.len() == oracle.len(),
            "source {name} has {} layers, reference has {}",
            cand.len(),
            oracle.len()
        );
        for (layer, ((ao, go), (ac, gc))) in oracle.iter().zip(cand).enumerate() {
            let row = |factor, metrics| AlignmentRow {
                step,
                layer,
                factor,
                reference: ref_name.to_string(),
                source: name.clone(),
                metrics,
            };
            rows.push(row(FactorKind::A, pair_metrics(ao, ac)?));
            rows.push(row(FactorKind::G, pair_metrics(go, gc)?));
            rows.push(row(
                FactorKind::Combined,
                kron_pair_metrics((ao, go), (ac, gc))?,
            ));
        }
    }
    Ok(AlignmentReport { rows })
}

/// Reconstructed Kronecker spectrum of one layer from one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub source: String,
    /// Descending, at most [`SPECTRUM_REPORT_LIMIT`] values.
    pub eigenvalues: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub layers: Vec<LayerSpectrum>,
    pub slq: Option<SlqDensity>,
}

fn truncated(mut v: Vec<f64>) -> Vec<f64> {
    v.truncate(SPECTRUM_REPORT_LIMIT);
    v
}

/// `Λ_F = sort(λ_A ⊗ λ_G)` per layer from raw factor pairs.
pub fn layer_spectrum(sources: &[(String, &Factors)]) -> Result<SpectrumReport> {
    let mut layers = Vec::new();
    for (name, factors) in sources {
        let spectra: Vec<Result<Vec<f64>>> = par::map_slice(factors, |(a, g)| {
            let (ea, eg) = (sym_eig(a)?, sym_eig(g)?);
            kron_spectrum(&ea.eigenvalues, &eg.eigenvalues)
        });
        for (layer, s) in spectra.into_iter().enumerate() {
            layers.push(LayerSpectrum {
                layer,
                source: name.clone(),
                eigenvalues: truncated(s?),
            });
        }
    }
    Ok(SpectrumReport { layers, slq: None })
}

/// Same report from frozen states, using their stored (damped) eigenvalues.
/// Skipped layers carry no eigenvalues and are left out.
pub fn state_spectrum(sources: &[(String, &KfacState)]) -> Result<SpectrumReport> {
    let mut layers = Vec::new();
    for (name, state) in sources {
        for l in state.layers.iter().filter(|l| !l.skipped) {
            layers.push(LayerSpectrum {
                layer: l.layer,
                source: name.clone(),
                eigenvalues: truncated(kron_spectrum(&l.eig_a, &l.eig_g)?),
            });
        }
    }
    Ok(SpectrumReport { layers, slq: None })
}

/// Cosine of mean-centered log spectra; a common positive scale on either
/// side cancels. Inputs must be positive and of equal length.
pub fn log_spectrum_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len() && a.len() >= 2,
        "spectra must have equal length >= 2"
    );
    ensure!(
        a.iter().chain(b).all(|&v| v > 0.0 && v.is_finite()),
        "log spectra need positive finite eigenvalues"
    );
    let centered = |v: &[f64]| {
        let l: Vec<f64> = v.iter().map(|x| x.ln()).collect();
        let m = l.iter().sum::<f64>() / l.len() as f64;
        l.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let (la, lb) = (centered(a), centered(b));
    let (na, nb) = (norm2(&la), norm2(&lb));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("flat log spectrum".into()));
    }
    Ok((dot(&la, &lb) / (na * nb)).clamp(-1.0, 1.0))
}

/// Ritz nodes and weights per probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlqDensity {
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Probes whose Lanczos run stopped before the requested step count.
    pub early_stops: usize,
}

impl SlqDensity {
    /// Probe average of `Σ_k w_k θ_k`, an estimate of `tr(H)/d`.
    pub fn mean_eigenvalue(&self) -> f64 {
        let per: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| dot(n, w))
            .sum();
        per / self.nodes.len() as f64
    }
}

/// Relative tolerance of the probabilistic symmetry check.
pub const SLQ_SYMMETRY_TOL: f64 = 1e-6;

fn rademacher(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Stochastic Lanczos quadrature with full reorthogonalization.
///
/// Each probe is a normalized Rademacher vector; the `k`-step tridiagonal
/// matrix's eigenvalues are the nodes and the squared first components of
/// its eigenvectors the weights. A run that hits an invariant subspace
/// stops early with fewer nodes.
pub fn slq_density<F>(
    hvp: F,
    dim: usize,
    probes: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<SlqDensity>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    ensure!(
        dim >= 1 && probes >= 1 && steps >= 1,
        "dim, probes and steps must be >= 1"
    );
    let steps = steps.min(dim);
    for _ in 0..3 {
        let unit_normal = |rng: &mut Rng| {
            let mut x = rng.standard_normal(dim);
            let n = norm2(&x);
            x.iter_mut().for_each(|v| *v /= n);
            x
        };
        let (u, v) = (unit_normal(rng), unit_normal(rng));
        let (hu, hv) = (hvp(&u)?, hvp(&v)?);
        ensure!(
            hu.len() == dim && hv.len() == dim,
            "hvp returned the wrong length"
        );
        let (l, r) = (dot(&u, &hv), dot(&hu, &v));
        let scale = norm2(&u) * norm2(&hv) + norm2(&hu) * norm2(&v);
        ensure!(
            (l - r).abs() <= SLQ_SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE),
            "operator is not symmetric: <u,Hv> = {l:e}, <Hu,v> = {r:e}"
        );
    }
    let mut nodes = Vec::with_capacity(probes);
    let mut weights = Vec::with_capacity(probes);
    let mut early_stops = 0;
    for _ in 0..probes {
        let mut q = rademacher(rng, dim);
        let n0 = norm2(&q);
        q.iter_mut().for_each(|v| *v /= n0);
        let mut basis: Vec<Vec<f64>> = vec![q];
        let (mut alpha, mut beta) = (Vec::new(), Vec::new());
        for j in 0..steps {
            let mut w = hvp(&basis[j])?;
            let a = dot(&w, &basis[j]);
            alpha.push(a);
            // two passes of classical Gram-Schmidt against the whole basis
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&w, b);
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            if j + 1 == steps {
                break;
            }
            let bn = norm2(&w);
            if bn <= 1e-10 * a.abs().max(1.0) {
                early_stops += 1;
                break;
            }
            beta.push(bn);
            basis.push(w.into_iter().map(|x| x / bn).collect());
        }
        let k = alpha.len();
        let t = DenseMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let e = sym_eig(&t)?;
        let w: Vec<f64> = (0..k).map(|c| e.eigenvectors.get(0, c).powi(2)).collect();
        nodes.push(e.eigenvalues);
        weights.push(w);
    }
    Ok(SlqDensity {
        dim,
        nodes,
        weights,
        early_stops,
    })
}

/// `h = 1e−4 · max(1, ‖θ‖)`.
pub fn default_hvp_step(theta: &[f64]) -> f64 {
    1e-4 * norm2(theta).max(1.0)
}

fn flatten(blocks: &[DenseMatrix]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.data().to_vec()).collect()
}

/// `(∇L(θ + hv) − ∇L(θ − hv)) / 2h` on a fixed batch, `v` in the layout of
/// [`Model::flat_params`].
pub fn hvp_finite_diff(
    model: &Model,
    x: &Tensor,
    y: &Targets,
    loss: &Loss,
    v: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    ensure!(h > 0.0, "step must be > 0");
    ensure!(
        v.len() == model.num_params(),
        "direction has the wrong length"
    );
    ensure!(
        (norm2(v) - 1.0).abs() <= 1e-8,
        "direction must have unit norm"
    );
    let theta = model.flat_params();
    let grad_at = |s: f64| -> Result<Vec<f64>> {
        let mut m = model.clone();
        let shifted: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + s * d).collect();
        m.set_flat_params(&shifted)?;
        Ok(flatten(&m.loss_and_grad(x, y, loss)?.1))
    };
    let (gp, gm) = (grad_at(h)?, grad_at(-h)?);
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// `SNR_l = ‖ḡ_l‖ / (σ C √d_l / B)` with `ḡ_l` the clipped mean of layer `l`
/// and `d_l` its parameter count.
pub fn layer_snr(
    clipped_mean: &[DenseMatrix],
    sigma: f64,
    clip: f64,
    batch: f64,
) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Undefined("SNR needs sigma > 0".into()));
    }
    ensure!(
        clip > 0.0 && clip.is_finite() && batch > 0.0,
        "clip and batch must be positive"
    );
    Ok(clipped_mean
        .iter()
        .map(|g| {
            let d = g.data().len() as f64;
            g.frobenius_norm() / (sigma * clip * d.sqrt() / batch)
        })
        .collect())
}

/// `max/min` over layers; infinite when some layer has zero SNR.
pub fn snr_spread(snr: &[f64]) -> f64 {
    let max = snr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = snr.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
