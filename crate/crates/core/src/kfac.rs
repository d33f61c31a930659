//! Kronecker-factored preconditioner construction.
//!
//! For every trainable layer the factors are second moments of the rows the
//! layer sees and emits, `Â = (1/n) Σ ã ãᵀ + πI` and `Ĝ = (1/n) Σ δ δᵀ + πI`,
//! where `n` counts rows: samples for linear layers and sample-locations for
//! convolutions. Each factor is eigendecomposed once and frozen as
//! `U = Q (Λ + γI)^{-1/2} Qᵀ`; a layer gradient `g` is then transformed as
//! `U_G g U_A`, the Kronecker product `(U_A ⊗ U_G) vec(g)` applied without
//! materializing it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::data;
use crate::error::{ensure, Error, Result};
use crate::linalg::{inv_sqrt_from_eig, sym_eig, DenseMatrix, Rng};
use crate::nn::{Loss, Model, Targets};
use crate::par;
use crate::probes::{self, PinkNoiseSpec, TokenNoiseSpec};
use crate::tensor::Tensor;

/// Where refresh draws its probe inputs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSource {
    /// `1/f^α` noise shaped like the model input.
    SyntheticPink {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_eps0")]
        eps0: f64,
    },
    /// Structural token sequences, fed to the model as bag-of-token vectors
    /// (the model input must be `[vocab]`). `batch` in the spec is replaced
    /// by the probe batch size.
    SyntheticToken { spec: TokenNoiseSpec },
    /// Random records from a public IDX image/label pair, standardized by
    /// their own statistics.
    Dataset { images: PathBuf, labels: PathBuf },
    /// Gaussian blobs of the model's input size: a public proxy whose
    /// distribution deliberately differs from the training data.
    Blobs {
        classes: usize,
        #[serde(default = "default_blob_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// The private training batch itself; not differentially private.
    PrivateOracle,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_eps0() -> f64 {
    1e-6
}

fn default_blob_noise() -> f64 {
    1.0
}

impl ProbeSource {
    /// Short identifier used in logs and serialized states.
    pub fn descriptor(&self) -> String {
        match self {
            ProbeSource::SyntheticPink { alpha, .. } => format!("synthetic-pink(alpha={alpha})"),
            ProbeSource::SyntheticToken { .. } => "synthetic-token".into(),
            ProbeSource::Dataset { images, .. } => format!("dataset({})", images.display()),
            ProbeSource::Blobs { seed, .. } => format!("blobs-proxy(seed={seed})"),
            ProbeSource::PrivateOracle => "private-oracle".into(),
        }
    }

    pub fn is_private(&self) -> bool {
        matches!(self, ProbeSource::PrivateOracle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfacConfig {
    /// Probe batch size `M`.
    #[serde(default = "default_probe_batch")]
    pub probe_batch: usize,
    /// Damping `π` added inside the covariances.
    #[serde(default = "default_pi")]
    pub pi: f64,
    /// Stability shift `γ` added to eigenvalues before inversion.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Refresh every `T_freq` steps.
    #[serde(default = "default_period")]
    pub refresh_period: usize,
    #[serde(default = "default_source")]
    pub probe_source: ProbeSource,
    /// Layers with a factor dimension above this keep identity factors.
    #[serde(default = "default_cap")]
    pub fan_cap: usize,
}

fn default_probe_batch() -> usize {
    64
}
fn default_pi() -> f64 {
    1e-3
}
fn default_gamma() -> f64 {
    1e-2
}
fn default_period() -> usize {
    50
}
fn default_cap() -> usize {
    4096
}
fn default_source() -> ProbeSource {
    ProbeSource::SyntheticPink {
        alpha: default_alpha(),
        eps0: default_eps0(),
    }
}

impl Default for KfacConfig {
    fn default() -> Self {
        Self {
            probe_batch: default_probe_batch(),
            pi: default_pi(),
            gamma: default_gamma(),
            refresh_period: default_period(),
            probe_source: default_source(),
            fan_cap: default_cap(),
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.probe_batch >= 1, "probe_batch must be >= 1");
        ensure!(
            self.pi >= 0.0 && self.pi.is_finite(),
            "pi must be finite and >= 0"
        );
        ensure!(
            self.gamma > 0.0 && self.gamma.is_finite(),
            "gamma must be finite and > 0"
        );
        ensure!(self.refresh_period >= 1, "refresh_period must be >= 1");
        ensure!(self.fan_cap >= 1, "fan_cap must be >= 1");
        match &self.probe_source {
            ProbeSource::SyntheticPink { alpha, eps0 } => {
                PinkNoiseSpec::new(1, 1, 1, 1, *alpha)
                    .with_eps0(*eps0)
                    .validate()?;
            }
            ProbeSource::SyntheticToken { spec } => spec.validate()?,
            _ => {}
        }
        Ok(())
    }
}

/// Frozen preconditioner factors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacLayerState {
    /// Index into the model's trainable layers.
    pub layer: usize,
    pub u_a: DenseMatrix,
    pub u_g: DenseMatrix,
    /// Eigenvalues of `Â` and `Ĝ` (with `π`, before `γ`), descending.
    pub eig_a: Vec<f64>,
    pub eig_g: Vec<f64>,
    /// True when the layer exceeded the fan cap; factors are identities.
    pub skipped: bool,
}

/// One [`KfacLayerState`] per trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacState {
    pub layers: Vec<KfacLayerState>,
    /// Step index at which the state was built; a state may only be used by
    /// strictly later steps.
    pub creation_step: u64,
    pub source: String,
}

/// Raw `(Â, Ĝ)` per trainable layer.
pub type Factors = Vec<(DenseMatrix, DenseMatrix)>;

/// `(1/n) XᵀX + πI` over the rows of `x`.
fn second_moment(x: &DenseMatrix, pi: f64) -> DenseMatrix {
    let n = x.rows().max(1) as f64;
    let mut c = x.matmul_tn(x).expect("same matrix");
    c.scale_in_place(1.0 / n);
    c.symmetrize();
    c.add_diag(pi);
    c
}

/// Forward and backward the probe batch and return per-layer `(Â, Ĝ)`.
pub fn estimate_factors(
    model: &Model,
    probe_x: &Tensor,
    probe_y: &Targets,
    loss: &Loss,
    pi: f64,
) -> Result<Factors> {
    ensure!(pi >= 0.0, "pi must be >= 0");
    let (logits, mut tape) = model.forward(probe_x)?;
    let (_, dlogits) = loss.eval(&logits, probe_y)?;
    model.backward(&mut tape, &dlogits)?;
    Ok(par::map_slice(tape.layers(), |tl| {
        let delta = tl.delta.as_ref().expect("backward fills every delta");
        (second_moment(&tl.act, pi), second_moment(delta, pi))
    }))
}

/// Merge a shared dimension into the batch: `[B, T, d] -> [B·T, d]`, rows in
/// b-major, t-minor order.
pub fn kfac_reduce_pool(acts: &Tensor) -> Result<DenseMatrix> {
    let s = acts.shape();
    ensure!(s.len() == 3, "expected [B, T, d], got {:?}", s);
    ensure!(s[1] >= 1, "shared dimension T must be >= 1");
    DenseMatrix::new(s[0] * s[1], s[2], acts.data().to_vec())
}

/// Eigendecompose both factors and form `U = Q(Λ + γI)^{-1/2}Qᵀ`.
pub fn build_preconditioner(
    a: &DenseMatrix,
    g: &DenseMatrix,
    gamma: f64,
) -> Result<KfacLayerState> {
    ensure!(gamma >= 0.0, "gamma must be >= 0");
    let ea = sym_eig(a)?;
    let eg = sym_eig(g)?;
    Ok(KfacLayerState {
        layer: 0,
        u_a: inv_sqrt_from_eig(&ea, gamma)?,
        u_g: inv_sqrt_from_eig(&eg, gamma)?,
        eig_a: ea.eigenvalues,
        eig_g: eg.eigenvalues,
        skipped: false,
    })
}

/// `U_G · g · U_A`.
pub fn precondition_grad(g: &DenseMatrix, state: &KfacLayerState) -> Result<DenseMatrix> {
    if state.skipped {
        return Ok(g.clone());
    }
    state.u_g.matmul(g)?.matmul(&state.u_a)
}

/// Rank-1 form: rows `δ_i`, `ã_i` map to `U_G δ_i`, `U_A ã_i`, so that
/// `U_G (δ ãᵀ) U_A = (U_G δ)(U_A ã)ᵀ`. Uses the symmetry of both factors.
pub fn precondition_rank1(
    delta: &DenseMatrix,
    act: &DenseMatrix,
    state: &KfacLayerState,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if state.skipped {
        return Ok((delta.clone(), act.clone()));
    }
    Ok((delta.matmul(&state.u_g)?, act.matmul(&state.u_a)?))
}

fn skipped_layer(layer: usize, a_dim: usize, g_dim: usize) -> KfacLayerState {
    KfacLayerState {
        layer,
        u_a: DenseMatrix::identity(a_dim),
        u_g: DenseMatrix::identity(g_dim),
        eig_a: Vec::new(),
        eig_g: Vec::new(),
        skipped: true,
    }
}

impl KfacState {
    /// Explicit identity factors for every layer (not marked skipped), so
    /// the preconditioned code path runs with `U = I`.
    pub fn identity(model: &Model, creation_step: u64) -> Self {
        let layers = model
            .trainable()
            .iter()
            .enumerate()
            .map(|(t, info)| KfacLayerState {
                skipped: false,
                eig_a: vec![1.0; info.aug_in()],
                eig_g: vec![1.0; info.fan_out],
                ..skipped_layer(t, info.aug_in(), info.fan_out)
            })
            .collect();
        Self {
            layers,
            creation_step,
            source: "identity".into(),
        }
    }

    /// Freeze factors into a state, honoring the fan cap.
    pub fn from_factors(
        model: &Model,
        factors: &Factors,
        gamma: f64,
        fan_cap: usize,
        creation_step: u64,
        source: String,
    ) -> Result<Self> {
        let infos = model.trainable();
        ensure!(
            factors.len() == infos.len(),
            "{} factor pairs for {} trainable layers",
            factors.len(),
            infos.len()
        );
        let built: Vec<Result<KfacLayerState>> = par::map_indexed(infos.len(), |t| {
            let info = infos[t];
            let (a, g) = &factors[t];
            ensure!(
                a.shape() == (info.aug_in(), info.aug_in())
                    && g.shape() == (info.fan_out, info.fan_out),
                "factor shapes do not match trainable layer {t}"
            );
            if info.aug_in() > fan_cap || info.fan_out > fan_cap {
                return Ok(skipped_layer(t, info.aug_in(), info.fan_out));
            }
            let mut s = build_preconditioner(a, g, gamma)?;
            s.layer = t;
            Ok(s)
        });
        Ok(Self {
            layers: built.into_iter().collect::<Result<_>>()?,
            creation_step,
            source,
        })
    }

    /// Transform one sample's per-layer gradients.
    pub fn precondition(&self, grads: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        ensure!(grads.len() == self.layers.len(), "layer count mismatch");
        grads
            .iter()
            .zip(&self.layers)
            .map(|(g, s)| precondition_grad(g, s))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta: Vec<_> = self
            .layers
            .iter()
            .map(|l| {
                json!({"layer": l.layer, "skipped": l.skipped, "eig_a": l.eig_a, "eig_g": l.eig_g})
            })
            .collect();
        let header = json!({
            "kind": "kfac_state",
            "creation_step": self.creation_step,
            "source": self.source,
            "layers": meta,
        });
        let blocks: Vec<&DenseMatrix> = self.layers.iter().flat_map(|l| [&l.u_a, &l.u_g]).collect();
        container::encode(header, &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            layer: usize,
            skipped: bool,
            eig_a: Vec<f64>,
            eig_g: Vec<f64>,
        }
        let (header, blocks) = container::decode(bytes, Some("kfac_state"))?;
        let metas: Vec<Meta> = serde_json::from_value(header["layers"].clone())?;
        if blocks.len() != 2 * metas.len() {
            return Err(Error::Format("kfac_state block count mismatch".into()));
        }
        let mut it = blocks.into_iter();
        let layers = metas
            .into_iter()
            .map(|m| KfacLayerState {
                layer: m.layer,
                u_a: it.next().expect("counted"),
                u_g: it.next().expect("counted"),
                eig_a: m.eig_a,
                eig_g: m.eig_g,
                skipped: m.skipped,
            })
            .collect();
        Ok(Self {
            layers,
            creation_step: header["creation_step"]
                .as_u64()
                .ok_or_else(|| Error::Format("missing creation_step".into()))?,
            source: header["source"].as_str().unwrap_or_default().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Probe inputs for a non-oracle source, shaped for `model`.
pub fn synthetic_probe_inputs(
    model: &Model,
    source: &ProbeSource,
    batch: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let shape = model.input_shape();
    match source {
        ProbeSource::SyntheticPink { alpha, eps0 } => {
            let (c, h, w) = match *shape {
                [c, h, w] => (c, h, w),
                [d] => (1, 1, d),
                _ => {
                    return Err(Error::Contract(format!(
                        "pink probes need a [C, H, W] or [d] input, model takes {shape:?}"
                    )))
                }
            };
            let spec = PinkNoiseSpec::new(batch, c, h, w, *alpha).with_eps0(*eps0);
            let mut full = vec![batch];
            full.extend_from_slice(shape);
            probes::gen_pink_noise(&spec, rng)?.reshape(full)
        }
        ProbeSource::SyntheticToken { spec } => {
            ensure!(
                *shape == [spec.vocab],
                "token probes need a [{}] bag-of-tokens input, model takes {shape:?}",
                spec.vocab
            );
            let spec = TokenNoiseSpec {
                batch,
                ..spec.clone()
            };
            let tokens = probes::gen_token_noise(&spec, rng)?;
            probes::token_bag_features(&tokens, spec.vocab)
        }
        ProbeSource::Dataset { images, labels } => {
            let ds = data::load_idx(images, labels)?.standardized();
            let idx: Vec<usize> = (0..batch).map(|_| rng.index(ds.len())).collect();
            let mut full = vec![batch];
            full.extend_from_slice(shape);
            ds.features().select(&idx).reshape(full)
        }
        ProbeSource::Blobs {
            classes,
            noise,
            seed,
        } => {
            let dim: usize = shape.iter().product();
            let spec = data::BlobsSpec {
                n: batch.max(*classes),
                dim,
                classes: *classes,
                noise: *noise,
                seed: seed ^ rng.next_u64(),
            };
            let ds = data::gen_blobs(&spec)?;
            let idx: Vec<usize> = (0..batch).collect();
            let mut full = vec![batch];
            full.extend_from_slice(shape);
            ds.features().select(&idx).reshape(full)
        }
        ProbeSource::PrivateOracle => Err(Error::Contract(
            "private-oracle probes come from the training batch; use refresh_oracle".into(),
        )),
    }
}

/// Build a preconditioner from data-independent or public probes.
///
/// Takes no training data: the only inputs are the model, the config and the
/// generator. Labels for the `Ĝ` pass are uniform over the model's classes.
pub fn refresh(model: &Model, cfg: &KfacConfig, step: u64, rng: &mut Rng) -> Result<KfacState> {
    cfg.validate()?;
    let x = synthetic_probe_inputs(model, &cfg.probe_source, cfg.probe_batch, rng)?;
    let y = probes::gen_labels(cfg.probe_batch, model.num_classes(), rng)?;
    let factors = estimate_factors(model, &x, &Targets::Classes(y), &Loss::CrossEntropy, cfg.pi)?;
    KfacState::from_factors(
        model,
        &factors,
        cfg.gamma,
        cfg.fan_cap,
        step,
        cfg.probe_source.descriptor(),
    )
}

/// Build a preconditioner from a given (typically private) batch with its
/// true targets. Not differentially private.
pub fn refresh_oracle(
    model: &Model,
    cfg: &KfacConfig,
    x: &Tensor,
    y: &Targets,
    loss: &Loss,
    step: u64,
) -> Result<KfacState> {
    cfg.validate()?;
    let factors = estimate_factors(model, x, y, loss, cfg.pi)?;
    KfacState::from_factors(
        model,
        &factors,
        cfg.gamma,
        cfg.fan_cap,
        step,
        ProbeSource::PrivateOracle.descriptor(),
    )
}
