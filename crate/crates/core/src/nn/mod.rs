//! Minimal feed-forward network engine with exact per-sample gradients.
//!
//! Every trainable layer keeps one augmented parameter matrix
//! `W̃ = [W | b]` of shape `fan_out × (fan_in + 1)` (no extra column when the
//! layer has no bias), and sees its input in homogeneous "fan-in form": a
//! row per sample for linear layers, a row per (sample, output location)
//! im2col patch for convolutions, each ending in a constant 1 when biased.
//! The per-sample gradient is then `Σ_loc δ ãᵀ`, and the KFAC factors are
//! second moments of exactly these rows.

mod conv;
mod loss;

pub use conv::{col2im, im2col, ConvGeom};
pub use loss::{loss_ce, Loss, Targets};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{ensure, Error, Result};
use crate::linalg::{DenseMatrix, Rng};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        d_in: usize,
        d_out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Activation {
        kind: Activation,
    },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableKind {
    Linear,
    Conv(ConvGeom),
}

/// Static description of one trainable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainableLayer {
    /// Index into the layer stack.
    pub layer: usize,
    pub kind: TrainableKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
    /// Output locations per sample (1 for linear layers).
    pub locations: usize,
}

impl TrainableLayer {
    /// Width of the homogeneous input rows, `fan_in + bias`.
    pub fn aug_in(&self) -> usize {
        self.fan_in + usize::from(self.bias)
    }

    pub fn num_params(&self) -> usize {
        self.fan_out * self.aug_in()
    }
}

/// Layer stack plus one augmented parameter matrix per trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    trainable: Vec<TrainableLayer>,
    params: Vec<DenseMatrix>,
    output_dim: usize,
}

/// Per-batch record of everything backward and KFAC need.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    layers: Vec<TapeLayer>,
    records: Vec<Record>,
}

/// Captured quantities of one trainable layer.
#[derive(Clone, Debug)]
pub struct TapeLayer {
    /// Homogeneous inputs `ã`, one row per sample (or per sample-location).
    pub act: DenseMatrix,
    /// Pre-activations `s`, rows aligned with `act`.
    pub pre: DenseMatrix,
    /// Error signals `δ = ∂ℓ_i/∂s`, rows aligned with `act`; set by backward.
    pub delta: Option<DenseMatrix>,
    pub locations: usize,
}

#[derive(Clone, Debug)]
enum Record {
    Trainable,
    Act(Tensor),
    Flatten(Vec<usize>),
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// One entry per trainable layer, in stack order.
    pub fn layers(&self) -> &[TapeLayer] {
        &self.layers
    }

    pub fn has_deltas(&self) -> bool {
        self.layers.iter().all(|l| l.delta.is_some())
    }
}

/// Per-sample gradients of one trainable layer (augmented shape).
#[derive(Clone, Debug)]
pub enum LayerGrads {
    /// `g_i = δ_i ã_iᵀ`: rows of `delta` and `act` are per-sample.
    Rank1 {
        delta: DenseMatrix,
        act: DenseMatrix,
    },
    /// Explicit matrix per sample (convolutions sum over locations).
    Full(Vec<DenseMatrix>),
}

impl LayerGrads {
    pub fn sample(&self, i: usize) -> DenseMatrix {
        match self {
            LayerGrads::Rank1 { delta, act } => DenseMatrix::outer(delta.row(i), act.row(i)),
            LayerGrads::Full(g) => g[i].clone(),
        }
    }

    /// `Σ_i g_i`.
    pub fn sum(&self) -> DenseMatrix {
        match self {
            LayerGrads::Rank1 { delta, act } => delta.matmul_tn(act).expect("aligned rows"),
            LayerGrads::Full(g) => {
                let mut acc = g[0].clone();
                for m in &g[1..] {
                    acc.axpy(1.0, m).expect("equal shapes");
                }
                acc
            }
        }
    }
}

/// Exact per-sample gradients of the unaveraged per-sample losses.
#[derive(Clone, Debug)]
pub struct PerSampleGrads {
    pub batch: usize,
    pub layers: Vec<LayerGrads>,
}

impl PerSampleGrads {
    /// Gradient of sample `i`, one augmented matrix per trainable layer.
    pub fn sample(&self, i: usize) -> Vec<DenseMatrix> {
        self.layers.iter().map(|l| l.sample(i)).collect()
    }

    /// Mean over the batch, i.e. the gradient of the mean loss.
    pub fn mean(&self) -> Vec<DenseMatrix> {
        let s = 1.0 / self.batch.max(1) as f64;
        self.layers.iter().map(|l| l.sum().scale(s)).collect()
    }
}

impl Model {
    /// Validate the stack against `input_shape` (per-sample, no batch dim)
    /// and initialize weights `N(0, v/fan_in)` with `v = 2` when the next
    /// nonlinearity is relu and `v = 1` otherwise; biases start at zero.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let (trainable, output_dim) = Self::plan(&layers, &input_shape)?;
        let params = trainable
            .iter()
            .map(|t| {
                let relu_next = layers[t.layer + 1..]
                    .iter()
                    .find(|l| **l != LayerSpec::Flatten)
                    .is_some_and(|l| {
                        *l == LayerSpec::Activation {
                            kind: Activation::Relu,
                        }
                    });
                let gain = if relu_next { 2.0 } else { 1.0 };
                let std = (gain / t.fan_in as f64).sqrt();
                let mut w = DenseMatrix::zeros(t.fan_out, t.aug_in());
                for r in 0..t.fan_out {
                    for c in 0..t.fan_in {
                        w.set(r, c, std * rng.normal());
                    }
                }
                w
            })
            .collect();
        Ok(Self {
            layers,
            input_shape,
            trainable,
            params,
            output_dim,
        })
    }

    /// Build with explicit augmented parameter matrices.
    pub fn from_params(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        params: Vec<DenseMatrix>,
    ) -> Result<Self> {
        let (trainable, output_dim) = Self::plan(&layers, &input_shape)?;
        ensure!(
            params.len() == trainable.len(),
            "{} parameter blocks for {} trainable layers",
            params.len(),
            trainable.len()
        );
        for (t, p) in trainable.iter().zip(&params) {
            ensure!(
                p.shape() == (t.fan_out, t.aug_in()),
                "layer {} expects {}x{} parameters, got {:?}",
                t.layer,
                t.fan_out,
                t.aug_in(),
                p.shape()
            );
            ensure!(p.is_finite(), "layer {} has non-finite parameters", t.layer);
        }
        Ok(Self {
            layers,
            input_shape,
            trainable,
            params,
            output_dim,
        })
    }

    fn plan(layers: &[LayerSpec], input_shape: &[usize]) -> Result<(Vec<TrainableLayer>, usize)> {
        ensure!(
            !input_shape.is_empty() && input_shape.iter().all(|&d| d >= 1),
            "input shape {:?} must be non-empty with positive dims",
            input_shape
        );
        let mut shape = input_shape.to_vec();
        let mut out = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Linear { d_in, d_out, bias } => {
                    ensure!(
                        d_in >= 1 && d_out >= 1,
                        "layer {i}: linear dims must be >= 1"
                    );
                    ensure!(
                        shape == [d_in],
                        "layer {i}: linear expects input [{d_in}], got {:?}",
                        shape
                    );
                    out.push(TrainableLayer {
                        layer: i,
                        kind: TrainableKind::Linear,
                        fan_in: d_in,
                        fan_out: d_out,
                        bias,
                        locations: 1,
                    });
                    shape = vec![d_out];
                }
                LayerSpec::Conv2d {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                    bias,
                } => {
                    ensure!(c_out >= 1, "layer {i}: c_out must be >= 1");
                    ensure!(
                        shape.len() == 3 && shape[0] == c_in,
                        "layer {i}: conv expects [{c_in}, H, W], got {:?}",
                        shape
                    );
                    let geom = ConvGeom::new(c_in, shape[1], shape[2], k, stride, pad)
                        .map_err(|e| Error::Contract(format!("layer {i}: {e}")))?;
                    out.push(TrainableLayer {
                        layer: i,
                        kind: TrainableKind::Conv(geom),
                        fan_in: geom.patch_len(),
                        fan_out: c_out,
                        bias,
                        locations: geom.locations(),
                    });
                    shape = vec![c_out, geom.out_height(), geom.out_width()];
                }
                LayerSpec::Activation { .. } => {}
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
            }
        }
        ensure!(
            shape.len() == 1,
            "network output must be a vector, got {:?}",
            shape
        );
        Ok((out, shape[0]))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn trainable(&self) -> &[TrainableLayer] {
        &self.trainable
    }

    /// Augmented parameter matrix of trainable layer `t`.
    pub fn param(&self, t: usize) -> &DenseMatrix {
        &self.params[t]
    }

    pub fn params(&self) -> &[DenseMatrix] {
        &self.params
    }

    /// Width of the output vector.
    pub fn num_classes(&self) -> usize {
        self.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.trainable.iter().map(|t| t.num_params()).sum()
    }

    /// All parameters, layer blocks concatenated row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.num_params(),
            "expected {} parameters, got {}",
            self.num_params(),
            flat.len()
        );
        ensure!(flat.iter().all(|v| v.is_finite()), "non-finite parameter");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data().len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `θ_t ← θ_t + s · d_t` for every trainable layer.
    pub fn apply_update(&mut self, s: f64, dirs: &[DenseMatrix]) -> Result<()> {
        ensure!(
            dirs.len() == self.params.len(),
            "update block count mismatch"
        );
        for (p, d) in self.params.iter_mut().zip(dirs) {
            p.axpy(s, d)?;
        }
        ensure!(
            self.params.iter().all(|p| p.is_finite()),
            "update produced non-finite parameters"
        );
        Ok(())
    }

    /// Forward pass over a batch `[B, ...input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<(DenseMatrix, Tape)> {
        ensure!(
            x.shape().len() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..],
            "input {:?} does not match model input [B, {:?}]",
            x.shape(),
            self.input_shape
        );
        let batch = x.batch();
        let mut cur = x.clone();
        let mut tape = Tape {
            batch,
            layers: Vec::with_capacity(self.trainable.len()),
            records: Vec::with_capacity(self.layers.len()),
        };
        let mut t = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                    let info = self.trainable[t];
                    let w = &self.params[t];
                    let act = match info.kind {
                        TrainableKind::Linear => with_ones(&cur, info.bias)?,
                        TrainableKind::Conv(g) => conv::im2col_geom(&cur, &g, info.bias)?,
                    };
                    let pre = act.matmul_nt(w)?;
                    cur = match info.kind {
                        TrainableKind::Linear => {
                            Tensor::new(vec![batch, info.fan_out], pre.data().to_vec())?
                        }
                        TrainableKind::Conv(g) => locations_to_channels(&pre, batch, &g)?,
                    };
                    tape.layers.push(TapeLayer {
                        act,
                        pre,
                        delta: None,
                        locations: info.locations,
                    });
                    tape.records.push(Record::Trainable);
                    t += 1;
                }
                LayerSpec::Activation { kind } => {
                    let input = cur.clone();
                    let f: fn(f64) -> f64 = match kind {
                        Activation::Relu => |v| v.max(0.0),
                        Activation::Tanh => f64::tanh,
                    };
                    cur.data_mut().iter_mut().for_each(|v| *v = f(*v));
                    tape.records.push(Record::Act(input));
                }
                LayerSpec::Flatten => {
                    let shape = cur.shape().to_vec();
                    let n = cur.sample_len();
                    cur = cur.reshape(vec![batch, n])?;
                    tape.records.push(Record::Flatten(shape));
                }
            }
        }
        let k = cur.sample_len();
        let logits = DenseMatrix::new(batch, k, cur.into_data())?;
        Ok((logits, tape))
    }

    /// Backward pass from per-sample output gradients `dlogits [B × K]`.
    /// Stores `δ` on the tape for every trainable layer.
    pub fn backward(&self, tape: &mut Tape, dlogits: &DenseMatrix) -> Result<PerSampleGrads> {
        ensure!(
            tape.records.len() == self.layers.len() && tape.layers.len() == self.trainable.len(),
            "tape was not produced by this model"
        );
        ensure!(
            dlogits.shape() == (tape.batch, self.num_classes()),
            "dlogits {:?} does not match batch {} x {} outputs",
            dlogits.shape(),
            tape.batch,
            self.num_classes()
        );
        let batch = tape.batch;
        let mut g = Tensor::new(vec![batch, dlogits.cols()], dlogits.data().to_vec())?;
        let mut t = self.trainable.len();
        let first_trainable = self.trainable.first().map_or(0, |l| l.layer);
        for li in (0..self.layers.len()).rev() {
            match &tape.records[li] {
                Record::Trainable => {
                    t -= 1;
                    let info = self.trainable[t];
                    let delta = match info.kind {
                        TrainableKind::Linear => {
                            DenseMatrix::new(batch, info.fan_out, g.data().to_vec())?
                        }
                        TrainableKind::Conv(_) => channels_to_locations(&g, info.locations)?,
                    };
                    if li > first_trainable {
                        let gin = delta.matmul(&self.params[t])?;
                        g = match info.kind {
                            TrainableKind::Linear => {
                                Tensor::new(vec![batch, info.fan_in], strip_last(&gin, info.bias))?
                            }
                            TrainableKind::Conv(geom) => conv::col2im(&gin, &geom, batch)?,
                        };
                    }
                    tape.layers[t].delta = Some(delta);
                }
                Record::Act(input) => {
                    let kind = match self.layers[li] {
                        LayerSpec::Activation { kind } => kind,
                        _ => unreachable!("record kinds mirror layers"),
                    };
                    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                        *gv *= match kind {
                            Activation::Relu => f64::from(u8::from(x > 0.0)),
                            Activation::Tanh => 1.0 - x.tanh().powi(2),
                        };
                    }
                }
                Record::Flatten(shape) => g = g.reshape(shape.clone())?,
            }
        }
        let layers = self
            .trainable
            .iter()
            .zip(&tape.layers)
            .map(|(info, tl)| {
                let delta = tl.delta.as_ref().expect("set above");
                match info.kind {
                    TrainableKind::Linear => LayerGrads::Rank1 {
                        delta: delta.clone(),
                        act: tl.act.clone(),
                    },
                    TrainableKind::Conv(_) => {
                        let l = info.locations;
                        LayerGrads::Full(par::map_indexed(batch, |i| {
                            delta
                                .row_block(i * l, (i + 1) * l)
                                .matmul_tn(&tl.act.row_block(i * l, (i + 1) * l))
                                .expect("aligned rows")
                        }))
                    }
                }
            })
            .collect();
        Ok(PerSampleGrads { batch, layers })
    }

    /// Mean loss and its gradient (one augmented block per trainable layer).
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        y: &Targets,
        loss: &Loss,
    ) -> Result<(f64, Vec<DenseMatrix>)> {
        let (logits, mut tape) = self.forward(x)?;
        let (l, dlogits) = loss.eval(&logits, y)?;
        let grads = self.backward(&mut tape, &dlogits)?;
        Ok((l, grads.mean()))
    }

    /// Index of the largest logit per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

impl Model {
    /// Checkpoint bytes in the [`crate::container`] format; `meta` is stored
    /// verbatim under `"meta"` (e.g. input normalization).
    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "kind": "model",
            "layers": self.layers,
            "input_shape": self.input_shape,
            "meta": meta,
        });
        container::encode(header, &self.params.iter().collect::<Vec<_>>())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (header, blocks) = container::decode(bytes, Some("model"))?;
        let layers: Vec<LayerSpec> = serde_json::from_value(header["layers"].clone())?;
        let input_shape: Vec<usize> = serde_json::from_value(header["input_shape"].clone())?;
        let model = Self::from_params(layers, input_shape, blocks)?;
        Ok((model, header["meta"].clone()))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        container::write_atomic(path, &self.to_bytes(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn with_ones(x: &Tensor, ones: bool) -> Result<DenseMatrix> {
    let (b, d) = (x.batch(), x.sample_len());
    if !ones {
        return DenseMatrix::new(b, d, x.data().to_vec());
    }
    let mut data = Vec::with_capacity(b * (d + 1));
    for i in 0..b {
        data.extend_from_slice(x.sample(i));
        data.push(1.0);
    }
    DenseMatrix::new(b, d + 1, data)
}

fn strip_last(m: &DenseMatrix, strip: bool) -> Vec<f64> {
    if !strip {
        return m.data().to_vec();
    }
    let keep = m.cols() - 1;
    (0..m.rows())
        .flat_map(|i| m.row(i)[..keep].to_vec())
        .collect()
}

/// `[B·L × C]` location rows to a `[B, C, H_out, W_out]` tensor.
fn locations_to_channels(m: &DenseMatrix, batch: usize, g: &ConvGeom) -> Result<Tensor> {
    let (l, c) = (g.locations(), m.cols());
    let mut data = vec![0.0; batch * c * l];
    for b in 0..batch {
        for loc in 0..l {
            let row = m.row(b * l + loc);
            for (ch, &v) in row.iter().enumerate() {
                data[(b * c + ch) * l + loc] = v;
            }
        }
    }
    Tensor::new(vec![batch, c, g.out_height(), g.out_width()], data)
}

/// Inverse of [`locations_to_channels`].
fn channels_to_locations(t: &Tensor, l: usize) -> Result<DenseMatrix> {
    let batch = t.batch();
    let c = t.sample_len() / l;
    let mut data = vec![0.0; batch * l * c];
    for b in 0..batch {
        let s = t.sample(b);
        for ch in 0..c {
            for loc in 0..l {
                data[(b * l + loc) * c + ch] = s[ch * l + loc];
            }
        }
    }
    DenseMatrix::new(batch * l, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(d_in: usize, d_out: usize) -> LayerSpec {
        LayerSpec::Linear {
            d_in,
            d_out,
            bias: true,
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::new(vec![lin(3, 4)], vec![3], &mut Rng::new(0)).unwrap();
        m.set_flat_params(&[0.0; 16]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let layers = vec![LayerSpec::Linear {
            d_in: 2,
            d_out: 2,
            bias: false,
        }];
        let m = Model::from_params(layers, vec![2], vec![DenseMatrix::identity(2)]).unwrap();
        let (logits, _) = m
            .forward(&Tensor::new(vec![1, 2], vec![1., 2.]).unwrap())
            .unwrap();
        assert_eq!(logits.row(0), &[1., 2.]);
    }

    #[test]
    fn squared_error_hand_example() {
        // Linear 2 -> 1, W = 0, x = (1, 2), target 1: δ = -1, g = (-1, -2).
        let layers = vec![LayerSpec::Linear {
            d_in: 2,
            d_out: 1,
            bias: false,
        }];
        let m = Model::from_params(layers, vec![2], vec![DenseMatrix::zeros(1, 2)]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        let (logits, mut tape) = m.forward(&x).unwrap();
        let loss = Loss::DiagQuadratic {
            curvature: vec![1.0],
        };
        let y = Targets::Values(DenseMatrix::new(1, 1, vec![1.0]).unwrap());
        let (_, d) = loss.eval(&logits, &y).unwrap();
        let g = m.backward(&mut tape, &d).unwrap();
        assert_eq!(tape.layers()[0].delta.as_ref().unwrap().data(), &[-1.0]);
        assert_eq!(g.sample(0)[0].data(), &[-1.0, -2.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(Model::new(vec![lin(3, 4), lin(5, 2)], vec![3], &mut Rng::new(0)).is_err());
        let conv = LayerSpec::Conv2d {
            c_in: 1,
            c_out: 2,
            k: 5,
            stride: 1,
            pad: 0,
            bias: true,
        };
        assert!(Model::new(vec![conv], vec![1, 4, 4], &mut Rng::new(0)).is_err());
        let m = Model::new(vec![lin(3, 2)], vec![3], &mut Rng::new(0)).unwrap();
        assert!(m.forward(&Tensor::zeros(vec![2, 4])).is_err());
    }

    #[test]
    fn init_variance() {
        let layers = vec![
            lin(400, 300),
            LayerSpec::Activation {
                kind: Activation::Relu,
            },
            lin(300, 200),
            LayerSpec::Activation {
                kind: Activation::Tanh,
            },
            lin(200, 2),
        ];
        let m = Model::new(layers, vec![400], &mut Rng::new(1)).unwrap();
        let var = |t: usize| {
            let p = m.param(t);
            let fan_in = m.trainable()[t].fan_in;
            let w: Vec<f64> = (0..p.rows())
                .flat_map(|r| p.row(r)[..fan_in].to_vec())
                .collect();
            w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64 * fan_in as f64
        };
        assert!((var(0) - 2.0).abs() < 0.05);
        assert!((var(1) - 1.0).abs() < 0.05);
        assert!((0..3).all(|t| m
            .param(t)
            .column(m.trainable()[t].fan_in)
            .iter()
            .all(|&b| b == 0.0)));
    }

    #[test]
    fn layer_spec_json() {
        let s: LayerSpec =
            serde_json::from_str(r#"{"type":"conv2d","c_in":1,"c_out":4,"k":3}"#).unwrap();
        assert_eq!(
            s,
            LayerSpec::Conv2d {
                c_in: 1,
                c_out: 4,
                k: 3,
                stride: 1,
                pad: 0,
                bias: true
            }
        );
        assert!(
            serde_json::from_str::<LayerSpec>(r#"{"type":"linear","d_in":1,"d_out":1,"x":1}"#)
                .is_err()
        );
    }
}
