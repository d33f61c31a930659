//! Datasets: IDX (MNIST format) ingestion and synthetic Gaussian blobs.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{DenseMatrix, Rng};
use crate::nn::Targets;
use crate::tensor::Tensor;

static DATASET_READS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of dataset file loads and record extractions.
/// Lets tests assert that a code path never touches data.
pub fn dataset_reads() -> usize {
    DATASET_READS.load(Ordering::SeqCst)
}

fn note_read() {
    DATASET_READS.fetch_add(1, Ordering::SeqCst);
}

/// How features were transformed after loading; enough to reproduce the
/// transform at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// `"unit_scale"`, `"global"` or `"per_feature"`.
    pub kind: String,
    /// Bytes are divided by this before any standardization.
    pub scale: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    features: Tensor,
    targets: Targets,
    num_classes: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        targets: Targets,
        num_classes: usize,
        train_idx: Vec<usize>,
        test_idx: Vec<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        let n = features.batch();
        ensure!(
            n == targets.len(),
            "{} feature rows for {} targets",
            n,
            targets.len()
        );
        ensure!(
            features.data().iter().all(|v| v.is_finite()),
            "features must be finite"
        );
        if let Targets::Classes(y) = &targets {
            ensure!(num_classes >= 2, "need at least two classes");
            ensure!(
                y.iter().all(|&c| c < num_classes),
                "label outside {num_classes} classes"
            );
        }
        ensure!(
            train_idx.iter().chain(&test_idx).all(|&i| i < n),
            "split index out of range"
        );
        Ok(Self {
            features,
            targets,
            num_classes,
            train_idx,
            test_idx,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.features.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.targets.classes()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-record feature shape (no batch dimension).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn split(&self, s: &Split) -> &[usize] {
        match s {
            Split::Train => &self.train_idx,
            Split::Test => &self.test_idx,
        }
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Records by absolute index.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Targets) {
        note_read();
        (self.features.select(idx), self.targets.select(idx))
    }

    /// Same records with features reshaped per record.
    pub fn reshaped(mut self, sample_shape: Vec<usize>) -> Result<Self> {
        let mut s = vec![self.len()];
        s.extend(sample_shape);
        self.features = self.features.reshape(s)?;
        Ok(self)
    }

    /// Standardize with one mean and std over all train-split values.
    pub fn standardized(mut self) -> Self {
        let train = if self.train_idx.is_empty() {
            self.features.clone()
        } else {
            self.features.select(&self.train_idx)
        };
        let (mean, std) = train.mean_std();
        let std = if std > 0.0 { std } else { 1.0 };
        self.features
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v - mean) / std);
        self.normalization.kind = "global".into();
        self.normalization.mean = vec![mean];
        self.normalization.std = vec![std];
        self
    }

    /// Standardize each feature by its train-split mean and std.
    pub fn standardized_per_feature(mut self) -> Self {
        let d = self.features.sample_len();
        let rows: &[usize] = if self.train_idx.is_empty() {
            &[]
        } else {
            &self.train_idx
        };
        let all: Vec<usize> = (0..self.len()).collect();
        let rows = if rows.is_empty() { &all[..] } else { rows };
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(self.features.sample(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(self.features.sample(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / rows.len() as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for (k, v) in self.features.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - mean[j]) / std[j];
        }
        self.normalization.kind = "per_feature".into();
        self.normalization.mean = mean;
        self.normalization.std = std;
        self
    }
}

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Whole file contents, gunzipped when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| parse_err(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, off as u64, "truncated header"))
}

/// Parse an IDX unsigned-byte file with the expected magic; returns the
/// dimension sizes and the payload.
fn parse_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let got = be_u32(&bytes, 0, path)?;
    if got != magic {
        return Err(parse_err(
            path,
            0,
            format!("wrong magic 0x{got:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|k| be_u32(&bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: header promises {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(parse_err(
            path,
            (start + need) as u64,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// Load an IDX image file (magic `0x00000803`) and label file
/// (`0x00000801`), plain or gzipped. Pixels are scaled to `[0, 1]`; the
/// last 20% of records form the test split.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    note_read();
    let (idims, pixels) = parse_idx(images, 0x0000_0803)?;
    let (ldims, raw_labels) = parse_idx(labels, 0x0000_0801)?;
    if idims[0] != ldims[0] {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let n = idims[0];
    let features = Tensor::new(
        vec![n, 1, idims[1], idims[2]],
        pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let y: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let num_classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    let n_test = n / 5;
    Dataset::new(
        features,
        Targets::Classes(y),
        num_classes,
        (0..n - n_test).collect(),
        (n - n_test..n).collect(),
        Normalization {
            kind: "unit_scale".into(),
            scale: 255.0,
            mean: vec![0.0],
            std: vec![1.0],
        },
    )
}

/// Blobs dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Gaussian blobs: class `c` has mean `e_c`, so the class means are the
/// vertices of a regular simplex spanned by the first `classes` axes. Noise
/// is isotropic with standard deviation `noise`. Labels are assigned round-robin, records are
/// shuffled, the last 20% form the test split, and features are then
/// standardized per feature.
pub fn gen_blobs(spec: &BlobsSpec) -> Result<Dataset> {
    let BlobsSpec {
        n,
        dim,
        classes,
        noise,
        seed,
    } = *spec;
    ensure!(classes >= 2, "blobs need at least two classes");
    ensure!(n >= classes, "need n >= classes");
    ensure!(dim >= classes, "simplex means need dim >= classes");
    ensure!(noise >= 0.0 && noise.is_finite(), "noise must be >= 0");
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for &slot in &order {
        let c = slot % classes;
        for j in 0..dim {
            let mean = if j == c { 1.0 } else { 0.0 };
            data.push(mean + noise * rng.normal());
        }
        y.push(c);
    }
    let n_test = n / 5;
    let ds = Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        Targets::Classes(y),
        classes,
        (0..n - n_test).collect(),
        (n - n_test..n).collect(),
        Normalization {
            kind: "unit_scale".into(),
            scale: 1.0,
            mean: vec![0.0],
            std: vec![1.0],
        },
    )?;
    Ok(ds.standardized_per_feature())
}

/// Write an IDX image/label pair (uncompressed unless a name ends in `.gz`).
pub fn write_idx(
    images: &Path,
    labels: &Path,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
    y: &[u8],
) -> Result<()> {
    ensure!(
        pixels.len() == n * rows * cols && y.len() == n,
        "payload does not match dimensions"
    );
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(y);
    for (path, bytes) in [(images, img), (labels, lab)] {
        let out = if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            std::io::Write::write_all(&mut enc, &bytes)?;
            enc.finish()?
        } else {
            bytes
        };
        crate::container::write_atomic(path, &out)?;
    }
    Ok(())
}

/// Paths of the bundled 10k MNIST subsample relative to a repository root.
pub fn mnist10k_paths(root: &Path) -> (PathBuf, PathBuf) {
    let d = root.join("data").join("mnist10k");
    (
        d.join("images-idx3-ubyte.gz"),
        d.join("labels-idx1-ubyte.gz"),
    )
}

/// Row-stacked feature matrix `[N × d]` of a tensor.
pub fn as_matrix(t: &Tensor) -> Result<DenseMatrix> {
    DenseMatrix::new(t.batch(), t.sample_len(), t.data().to_vec())
}
