//! The private training loop: Poisson-sampled batches, optional KFAC
//! preconditioning of per-sample gradients, global clipping, Gaussian noise
//! on the sum, SGD with momentum, and per-step privacy accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::data::{Dataset, Split};
use crate::diagnostics::{self, AlignmentReport};
use crate::dp::{self, AccountantState, PrivacyParams};
use crate::error::{ensure, Error, Result};
use crate::kfac::{self, KfacConfig, KfacState, ProbeSource};
use crate::linalg::{DenseMatrix, Rng};
use crate::nn::{LayerGrads, Loss, Model, Targets};
use crate::par;
use crate::probes;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dpsgd,
    Dpkfc,
}

/// Either `sigma` or `target_epsilon`, not both. `delta` defaults to `1/N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub clip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

/// Factor alignment tracking during training. The reference factors come
/// from `oracle_batch` private training records with their true labels;
/// tracking spends unaccounted information and is a diagnostic only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub every: usize,
    #[serde(default = "default_oracle_batch")]
    pub oracle_batch: usize,
    pub sources: Vec<ProbeSource>,
}

fn default_oracle_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub kfac: KfacConfig,
    pub privacy: PrivacyConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub expected_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    /// Log per-layer SNR at evaluation steps (private runs only).
    #[serde(default)]
    pub log_snr: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentConfig>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_eval_every() -> usize {
    50
}
fn default_loss() -> Loss {
    Loss::CrossEntropy
}

impl TrainConfig {
    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let p = &self.privacy;
        if !(p.clip > 0.0) {
            v.push("privacy.clip must be > 0".into());
        }
        match (p.sigma, p.target_epsilon) {
            (Some(_), Some(_)) => {
                v.push("give privacy.sigma or privacy.target_epsilon, not both".into())
            }
            (None, None) => v.push("privacy.sigma or privacy.target_epsilon is required".into()),
            (Some(s), None) if !(s >= 0.0 && s.is_finite()) => {
                v.push("privacy.sigma must be finite and >= 0".into())
            }
            (None, Some(e)) if !(e > 0.0) => v.push("privacy.target_epsilon must be > 0".into()),
            _ => {}
        }
        if p.clip == f64::INFINITY && p.sigma != Some(0.0) {
            v.push("infinite privacy.clip is only allowed with sigma = 0".into());
        }
        if let Some(d) = p.delta {
            if !(d > 0.0 && d < 1.0) {
                v.push("privacy.delta must be in (0, 1)".into());
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push("lr must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push("momentum must be in [0, 1)".into());
        }
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        if self.expected_batch == 0 {
            v.push("expected_batch must be >= 1".into());
        }
        if self.eval_every == 0 {
            v.push("eval_every must be >= 1".into());
        }
        if let Err(e) = self.kfac.validate() {
            v.push(format!("kfac: {e}"));
        }
        if let Some(a) = &self.alignment {
            if a.every == 0 || a.oracle_batch == 0 {
                v.push("alignment.every and alignment.oracle_batch must be >= 1".into());
            }
            if a.sources.iter().any(ProbeSource::is_private) {
                v.push("alignment.sources must not include the private oracle".into());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        ensure!(v.is_empty(), "{}", v.join("; "));
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μv + u`, `θ ← θ − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<DenseMatrix>,
}

impl Sgd {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn apply(&mut self, model: &mut Model, update: &[DenseMatrix]) -> Result<()> {
        ensure!(
            update.len() == self.velocity.len(),
            "update block count mismatch"
        );
        for (v, u) in self.velocity.iter_mut().zip(update) {
            v.scale_in_place(self.momentum);
            v.axpy(1.0, u)?;
        }
        model.apply_update(-self.lr, &self.velocity)
    }
}

/// A sampled private batch and the divisor of its noisy sum.
pub struct PrivateBatch<'a> {
    pub x: &'a Tensor,
    pub y: &'a Targets,
    /// Expected batch size under Poisson sampling.
    pub divisor: f64,
}

/// Everything a step reads but does not own.
pub struct StepEnv<'a> {
    pub loss: &'a Loss,
    pub params: &'a PrivacyParams,
    pub state: Option<&'a KfacState>,
    /// 1-based index of this step; any state must predate it.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct StepStats {
    /// Mean loss of the realized batch before the update; NaN when empty.
    pub loss: f64,
    pub batch_size: usize,
    pub clipped: usize,
    /// `Σ ḡ / B` before noise, in the (preconditioned) update space.
    pub clipped_mean: Vec<DenseMatrix>,
}

/// Per-layer preconditioned gradients of a batch with per-sample squared
/// norms. Rank-1 layers stay factored.
enum Transformed {
    Rank1 {
        delta: DenseMatrix,
        act: DenseMatrix,
    },
    Full(Vec<DenseMatrix>),
}

fn transform(layers: Vec<LayerGrads>, state: Option<&KfacState>) -> Result<Vec<Transformed>> {
    layers
        .into_iter()
        .enumerate()
        .map(|(l, g)| {
            let s = state.map(|s| &s.layers[l]);
            Ok(match (g, s) {
                (LayerGrads::Rank1 { delta, act }, None) => Transformed::Rank1 { delta, act },
                (LayerGrads::Rank1 { delta, act }, Some(s)) => {
                    let (delta, act) = kfac::precondition_rank1(&delta, &act, s)?;
                    Transformed::Rank1 { delta, act }
                }
                (LayerGrads::Full(g), None) => Transformed::Full(g),
                (LayerGrads::Full(g), Some(s)) => {
                    let out: Vec<Result<DenseMatrix>> =
                        par::map_slice(&g, |m| kfac::precondition_grad(m, s));
                    Transformed::Full(out.into_iter().collect::<Result<_>>()?)
                }
            })
        })
        .collect()
}

fn row_sq_norms(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v * v).sum())
        .collect()
}

/// One step of the mechanism. Per-sample gradients are preconditioned
/// (when a state is given), clipped jointly over layers at `C`, summed,
/// noised with `N(0, σ²C²)` per coordinate, divided by `batch.divisor` and
/// handed to the optimizer.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &PrivateBatch,
    env: &StepEnv,
    noise_rng: &mut Rng,
) -> Result<StepStats> {
    if let Some(s) = env.state {
        ensure!(
            s.creation_step < env.step,
            "preconditioner from step {} used at step {}",
            s.creation_step,
            env.step
        );
        ensure!(
            s.layers.len() == model.trainable().len(),
            "state does not match the model"
        );
    }
    let n = batch.x.batch();
    let (loss, sum, clipped) = if n == 0 {
        let zeros = model
            .params()
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        (f64::NAN, zeros, 0)
    } else {
        let (logits, mut tape) = model.forward(batch.x)?;
        let (loss, dlogits) = env.loss.eval(&logits, batch.y)?;
        let grads = model.backward(&mut tape, &dlogits)?;
        let layers = transform(grads.layers, env.state)?;
        let mut sq = vec![0.0; n];
        for l in &layers {
            match l {
                Transformed::Rank1 { delta, act } => {
                    let (d, a) = (row_sq_norms(delta), row_sq_norms(act));
                    for i in 0..n {
                        sq[i] += d[i] * a[i];
                    }
                }
                Transformed::Full(g) => {
                    for (s, m) in sq.iter_mut().zip(g) {
                        *s += m.data().iter().map(|v| v * v).sum::<f64>();
                    }
                }
            }
        }
        let mut scale = Vec::with_capacity(n);
        for (i, s) in sq.iter().enumerate() {
            let nu = s.sqrt();
            if !nu.is_finite() {
                return Err(Error::NonFinite { sample: i });
            }
            scale.push(dp::clip_scale(nu, env.params.clip));
        }
        let clipped = scale.iter().filter(|&&s| s < 1.0).count();
        let sum = layers
            .iter()
            .map(|l| match l {
                Transformed::Rank1 { delta, act } => {
                    let mut d = delta.clone();
                    for (i, s) in scale.iter().enumerate() {
                        d.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    d.matmul_tn(act)
                }
                Transformed::Full(g) => {
                    let mut acc = DenseMatrix::zeros(g[0].rows(), g[0].cols());
                    for (m, s) in g.iter().zip(&scale) {
                        acc.axpy(*s, m)?;
                    }
                    Ok(acc)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        (loss, sum, clipped)
    };
    let clipped_mean = sum.iter().map(|s| s.scale(1.0 / batch.divisor)).collect();
    let update = dp::privatize(&sum, batch.divisor, env.params, noise_rng)?;
    opt.apply(model, &update)?;
    Ok(StepStats {
        loss,
        batch_size: n,
        clipped,
        clipped_mean,
    })
}

/// Records included with probability `q` each.
pub fn poisson_sample(pool: &[usize], q: f64, rng: &mut Rng) -> Vec<usize> {
    pool.iter().copied().filter(|_| rng.bernoulli(q)).collect()
}

const EVAL_CHUNK: usize = 500;

/// Fraction of argmax-correct predictions on a split.
pub fn evaluate(model: &Model, ds: &Dataset, split: &Split) -> Result<f64> {
    let idx = ds.split(split);
    ensure!(!idx.is_empty(), "cannot evaluate an empty split");
    ensure!(ds.labels().is_some(), "accuracy needs class labels");
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk);
        let pred = model.predict(&x)?;
        let y = y.classes().expect("labels checked above");
        correct += pred.iter().zip(y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Mean loss over a split.
pub fn evaluate_loss(model: &Model, ds: &Dataset, split: &Split, loss: &Loss) -> Result<f64> {
    let idx = ds.split(split);
    ensure!(!idx.is_empty(), "cannot evaluate an empty split");
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk);
        let (logits, _) = model.forward(&x)?;
        total += loss.eval(&logits, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub epsilon: f64,
    pub batch_size: usize,
    pub clipped_fraction: f64,
    /// Per-layer SNR; empty when not logged at this step.
    pub snr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    /// False for σ = 0 runs and for runs whose preconditioner saw private
    /// data outside the mechanism.
    pub private: bool,
    pub seed: u64,
    pub sigma: f64,
    pub clip: f64,
    pub sample_rate: f64,
    pub delta: f64,
    pub expected_batch: usize,
    pub steps: u64,
    pub final_epsilon: f64,
    pub best_order: Option<u32>,
    pub final_test_accuracy: Option<f64>,
    pub final_train_loss: f64,
    pub refresh_steps: Vec<u64>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    pub alignment: AlignmentReport,
    pub summary: RunSummary,
}

/// `{:.16e}`: 17 significant digits, round-trip exact. Empty for `None`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

impl RunRecord {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let layers = self.rows.iter().map(|r| r.snr.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "step",
            "train_loss",
            "test_accuracy",
            "epsilon",
            "batch_size",
            "clipped_fraction",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..layers).map(|l| format!("snr_{l}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                fmt_float(r.train_loss),
                r.test_accuracy.map(fmt_float).unwrap_or_default(),
                fmt_float(r.epsilon),
                r.batch_size.to_string(),
                fmt_float(r.clipped_fraction),
            ];
            rec.extend(
                (0..layers).map(|l| r.snr.get(l).map(|&v| fmt_float(v)).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn alignment_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "step",
            "layer",
            "factor",
            "reference",
            "source",
            "cosine",
            "rel_frob",
            "cosine_unit",
            "rel_frob_unit",
        ])?;
        for r in &self.alignment.rows {
            let factor = serde_json::to_value(r.factor)?;
            w.write_record([
                r.step.to_string(),
                r.layer.to_string(),
                factor.as_str().unwrap_or_default().to_string(),
                r.reference.clone(),
                r.source.clone(),
                fmt_float(r.metrics.cosine),
                fmt_float(r.metrics.rel_frob),
                fmt_float(r.metrics.cosine_unit),
                fmt_float(r.metrics.rel_frob_unit),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Writes `steps.csv`, `alignment.csv` (when tracked) and
    /// `summary.json` atomically into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("steps.csv"), &self.to_csv()?)?;
        if !self.alignment.rows.is_empty() {
            write_atomic(&dir.join("alignment.csv"), &self.alignment_csv()?)?;
        }
        write_atomic(
            &dir.join("summary.json"),
            &serde_json::to_vec_pretty(&self.summary)?,
        )
    }
}

/// Stream labels of the root generator.
mod stream {
    pub const SAMPLING: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PROBES: u64 = 3;
    pub const ALIGNMENT: u64 = 4;
}

/// Resolved mechanism parameters for a run over `n_train` records.
pub fn resolve_privacy(cfg: &TrainConfig, n_train: usize) -> Result<(PrivacyParams, u64)> {
    ensure!(n_train >= 1, "training split is empty");
    let q = (cfg.expected_batch as f64 / n_train as f64).min(1.0);
    let steps = (cfg.epochs * n_train.div_ceil(cfg.expected_batch)) as u64;
    let delta = cfg.privacy.delta.unwrap_or(1.0 / n_train as f64);
    let sigma = match (cfg.privacy.sigma, cfg.privacy.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => dp::calibrate_sigma(eps, delta, q, steps)?,
        (None, None) => unreachable!("validated"),
    };
    let params = PrivacyParams {
        clip: cfg.privacy.clip,
        sigma,
        sample_rate: q,
        delta,
    };
    params.validate()?;
    Ok((params, steps))
}

fn random_records(pool: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..k).map(|_| pool[rng.index(pool.len())]).collect()
}

fn alignment_at(
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    a: &AlignmentConfig,
    step: u64,
    rng: &mut Rng,
) -> Result<AlignmentReport> {
    let idx = random_records(ds.split(&Split::Train), a.oracle_batch, rng);
    let (x, y) = ds.batch(&idx);
    let oracle = kfac::estimate_factors(model, &x, &y, &cfg.loss, cfg.kfac.pi)?;
    let mut cands = Vec::with_capacity(a.sources.len());
    for src in &a.sources {
        let px = kfac::synthetic_probe_inputs(model, src, cfg.kfac.probe_batch, rng)?;
        let py = probes::gen_labels(cfg.kfac.probe_batch, model.num_classes(), rng)?;
        let f = kfac::estimate_factors(
            model,
            &px,
            &Targets::Classes(py),
            &Loss::CrossEntropy,
            cfg.kfac.pi,
        )?;
        cands.push((src.descriptor(), f));
    }
    diagnostics::track_alignment(step, ("private-oracle", &oracle), &cands)
}

/// Train `model` on the train split of `ds`.
///
/// The preconditioner is rebuilt whenever the number of completed steps is
/// a multiple of `refresh_period`, before the next batch is sampled, so a
/// state created after `t` updates is used from step `t + 1` on. Batch
/// sampling, mechanism noise, probes and alignment tracking each draw from
/// their own substream of the seed.
pub fn train(mut model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let pool = ds.split(&Split::Train).to_vec();
    let (params, total) = resolve_privacy(cfg, pool.len())?;
    let root = Rng::new(cfg.seed);
    let mut sampling = root.split(stream::SAMPLING);
    let mut noise = root.split(stream::NOISE);
    let mut probe_rng = root.split(stream::PROBES);
    let mut align_rng = root.split(stream::ALIGNMENT);

    let mut opt = Sgd::new(&model, cfg.lr, cfg.momentum);
    let mut accountant = AccountantState::default();
    let mut state: Option<KfacState> = None;
    let mut refresh_steps = Vec::new();
    let mut rows = Vec::with_capacity(total as usize);
    let mut alignment = AlignmentReport::default();
    let mut eps = (f64::INFINITY, None);
    let has_test = ds.labels().is_some() && !ds.split(&Split::Test).is_empty();

    for done in 0..total {
        if cfg.method == Method::Dpkfc && done % cfg.kfac.refresh_period as u64 == 0 {
            let s = match cfg.kfac.probe_source {
                ProbeSource::PrivateOracle => {
                    let idx = random_records(&pool, cfg.kfac.probe_batch, &mut probe_rng);
                    let (x, y) = ds.batch(&idx);
                    kfac::refresh_oracle(&model, &cfg.kfac, &x, &y, &cfg.loss, done)?
                }
                _ => kfac::refresh(&model, &cfg.kfac, done, &mut probe_rng)?,
            };
            refresh_steps.push(done);
            state = Some(s);
        }
        let step = done + 1;
        let idx = poisson_sample(&pool, params.sample_rate, &mut sampling);
        let (x, y) = ds.batch(&idx);
        let env = StepEnv {
            loss: &cfg.loss,
            params: &params,
            state: state.as_ref(),
            step,
        };
        let batch = PrivateBatch {
            x: &x,
            y: &y,
            divisor: cfg.expected_batch as f64,
        };
        let stats = train_step(&mut model, &mut opt, &batch, &env, &mut noise)?;
        if params.is_private() {
            accountant.step(params.sample_rate, params.sigma)?;
            let (e, o) = dp::epsilon_of(&accountant, params.delta)?;
            eps = (e, Some(o));
        }
        let eval_now = step % cfg.eval_every as u64 == 0 || step == total;
        let test_accuracy = if eval_now && has_test {
            Some(evaluate(&model, ds, &Split::Test)?)
        } else {
            None
        };
        let snr = if eval_now && cfg.log_snr && params.is_private() {
            diagnostics::layer_snr(
                &stats.clipped_mean,
                params.sigma,
                params.clip,
                batch.divisor,
            )?
        } else {
            Vec::new()
        };
        if let Some(a) = &cfg.alignment {
            if step % a.every as u64 == 0 {
                let r = alignment_at(&model, ds, cfg, a, step, &mut align_rng)?;
                alignment.rows.extend(r.rows);
            }
        }
        rows.push(StepRow {
            step,
            train_loss: stats.loss,
            test_accuracy,
            epsilon: eps.0,
            batch_size: stats.batch_size,
            clipped_fraction: if stats.batch_size > 0 {
                stats.clipped as f64 / stats.batch_size as f64
            } else {
                0.0
            },
            snr,
        });
    }

    let final_test_accuracy = if has_test {
        Some(evaluate(&model, ds, &Split::Test)?)
    } else {
        None
    };
    let summary = RunSummary {
        method: cfg.method,
        private: params.is_private()
            && !(cfg.method == Method::Dpkfc && cfg.kfac.probe_source.is_private()),
        seed: cfg.seed,
        sigma: params.sigma,
        clip: params.clip,
        sample_rate: params.sample_rate,
        delta: params.delta,
        expected_batch: cfg.expected_batch,
        steps: total,
        final_epsilon: eps.0,
        best_order: eps.1,
        final_test_accuracy,
        final_train_loss: evaluate_loss(&model, ds, &Split::Train, &cfg.loss)?,
        refresh_steps,
        config: cfg.clone(),
    };
    Ok((
        model,
        RunRecord {
            rows,
            alignment,
            summary,
        },
    ))
}
