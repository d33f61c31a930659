//! Experiment configuration: a JSON document plus `key.path=value` overrides.
//!
//! Validation runs on the raw JSON first so every problem is reported in one
//! pass; only a document with no violations is turned into typed settings.

use std::path::{Path, PathBuf};

use dpkfc::kfac::ProbeSource;
use dpkfc::nn::LayerSpec;
use dpkfc::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DPKFC_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    Accountant,
    Diagnose,
    ProbeSpectrum,
    GenNoise,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Accountant => "accountant",
            Task::Diagnose => "diagnose",
            Task::ProbeSpectrum => "probe-spectrum",
            Task::GenNoise => "gen-noise",
        }
    }

    /// Sections this task reads; all others must be absent.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Task::Train => &["dataset", "model", "train"],
            Task::Accountant => &["accountant"],
            Task::Diagnose => &["dataset", "diagnose"],
            Task::ProbeSpectrum => &["model", "probe_spectrum"],
            Task::GenNoise => &["gen_noise"],
        }
    }
}

const SECTIONS: [&str; 7] = [
    "dataset",
    "model",
    "train",
    "accountant",
    "diagnose",
    "probe_spectrum",
    "gen_noise",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    /// Bytes divided by 255 only.
    #[default]
    UnitScale,
    /// One train-split mean and std over all pixels.
    Global,
    /// Train-split mean and std per pixel.
    PerFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        normalize: Normalize,
    },
    /// Always standardized per feature.
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
        /// Per-record shape; defaults to `[dim]`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Weight initialization seed; defaults to the task seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantSpec {
    pub sample_rate: f64,
    pub steps: u64,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenNoiseSpec {
    pub alpha: f64,
    #[serde(default = "d_noise_batch")]
    pub batch: usize,
    #[serde(default = "d_one")]
    pub channels: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_eps0")]
    pub eps0: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpectrumSpec {
    pub sources: Vec<ProbeSource>,
    #[serde(default = "d_probe_batch")]
    pub probe_batch: usize,
    #[serde(default = "d_pi")]
    pub pi: f64,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate at these weights instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlqSpec {
    pub probes: usize,
    pub steps: usize,
    /// Training records the Hessian is taken over.
    #[serde(default = "d_oracle_batch")]
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSpec {
    pub checkpoints: Vec<PathBuf>,
    pub sources: Vec<ProbeSource>,
    #[serde(default = "d_oracle_batch")]
    pub oracle_batch: usize,
    #[serde(default = "d_probe_batch")]
    pub probe_batch: usize,
    #[serde(default = "d_pi")]
    pub pi: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slq: Option<SlqSpec>,
}

fn d_noise_batch() -> usize {
    32
}
fn d_one() -> usize {
    1
}
fn d_side() -> usize {
    64
}
fn d_eps0() -> f64 {
    1e-6
}
fn d_probe_batch() -> usize {
    64
}
fn d_oracle_batch() -> usize {
    256
}
fn d_pi() -> f64 {
    1e-3
}

/// Fully resolved configuration, echoed next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accountant: Option<AccountantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnose: Option<DiagnoseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_spectrum: Option<ProbeSpectrumSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_noise: Option<GenNoiseSpec>,
}

impl ExperimentConfig {
    /// Output directory after applying [`OUTPUT_ROOT_ENV`] to relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Read the document (or start empty), then apply overrides in order.
pub fn load_document(path: Option<&Path>, overrides: &[String]) -> Result<Value, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(doc)
}

/// `a.b.c=v`: `v` is parsed as JSON when possible, otherwise taken as a
/// string. Missing intermediate objects are created.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::new("config", format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::new("config", format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(CliError::new(
                "config",
                format!("override `{key}` descends into a non-object"),
            ));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| {
        CliError::new(
            "config",
            format!("override `{key}` descends into a non-object"),
        )
    })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn section<T: DeserializeOwned>(
    doc: &Map<String, Value>,
    key: &str,
    v: &mut Vec<String>,
) -> Option<T> {
    let raw = doc.get(key)?;
    match serde_json::from_value(raw.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            v.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Check `doc` for task `task` and return the typed configuration, or every
/// violation found.
pub fn validate(doc: &Value, task: Task) -> Result<ExperimentConfig, Vec<String>> {
    let Some(obj) = doc.as_object() else {
        return Err(vec!["config must be a JSON object".into()]);
    };
    let mut v = Vec::new();
    match obj.get("task") {
        None => {}
        Some(t) => match serde_json::from_value::<Task>(t.clone()) {
            Ok(t) if t == task => {}
            Ok(t) => v.push(format!(
                "task: config says `{}` but `{}` was requested",
                t.name(),
                task.name()
            )),
            Err(e) => v.push(format!("task: {e}")),
        },
    }
    for k in obj.keys() {
        if k != "task" && k != "output_dir" && !SECTIONS.contains(&k.as_str()) {
            v.push(format!("unknown key `{k}`"));
        }
    }
    let wanted = task.sections();
    for s in SECTIONS {
        match (wanted.contains(&s), obj.contains_key(s)) {
            (true, false) => v.push(format!("{s}: required for task `{}`", task.name())),
            (false, true) => v.push(format!("{s}: not used by task `{}`", task.name())),
            _ => {}
        }
    }
    let output_dir = match obj.get("output_dir") {
        None => Some(PathBuf::from("runs").join(task.name())),
        Some(Value::String(s)) if !s.is_empty() => Some(PathBuf::from(s)),
        Some(_) => {
            v.push("output_dir: must be a non-empty string".into());
            None
        }
    };

    let dataset: Option<DatasetSpec> = section(obj, "dataset", &mut v);
    let model: Option<ModelSpec> = section(obj, "model", &mut v);
    let train: Option<TrainConfig> = section(obj, "train", &mut v);
    let accountant: Option<AccountantSpec> = section(obj, "accountant", &mut v);
    let diagnose: Option<DiagnoseSpec> = section(obj, "diagnose", &mut v);
    let probe_spectrum: Option<ProbeSpectrumSpec> = section(obj, "probe_spectrum", &mut v);
    let gen_noise: Option<GenNoiseSpec> = section(obj, "gen_noise", &mut v);

    if let Some(DatasetSpec::Blobs {
        n,
        dim,
        classes,
        noise,
        shape,
        ..
    }) = &dataset
    {
        if *classes < 2 || n < classes {
            v.push("dataset: blobs need classes >= 2 and n >= classes".into());
        }
        if !(*noise >= 0.0 && noise.is_finite()) {
            v.push("dataset.noise: must be finite and >= 0".into());
        }
        if let Some(s) = shape {
            if s.iter().product::<usize>() != *dim {
                v.push(format!("dataset.shape: {s:?} does not hold dim {dim}"));
            }
        }
    }
    if let Some(m) = &model {
        if let Err(e) = dpkfc::nn::Model::new(
            m.layers.clone(),
            m.input_shape.clone(),
            &mut dpkfc::linalg::Rng::new(0),
        ) {
            v.push(format!("model: {e}"));
        }
    }
    if let Some(t) = &train {
        v.extend(t.violations().into_iter().map(|s| format!("train.{s}")));
    }
    if let Some(a) = &accountant {
        if !(a.sample_rate > 0.0 && a.sample_rate <= 1.0) {
            v.push("accountant.sample_rate: must be in (0, 1]".into());
        }
        if a.steps == 0 {
            v.push("accountant.steps: must be >= 1".into());
        }
        if !(a.delta > 0.0 && a.delta < 1.0) {
            v.push("accountant.delta: must be in (0, 1)".into());
        }
        match (a.sigma, a.target_epsilon) {
            (Some(s), None) if s > 0.0 && s.is_finite() => {}
            (Some(_), None) => v.push("accountant.sigma: must be finite and > 0".into()),
            (None, Some(e)) if e > 0.0 && e.is_finite() => {}
            (None, Some(_)) => v.push("accountant.target_epsilon: must be finite and > 0".into()),
            _ => v.push("accountant: give exactly one of sigma, target_epsilon".into()),
        }
    }
    if let Some(g) = &gen_noise {
        let spec =
            dpkfc::probes::PinkNoiseSpec::new(g.batch, g.channels, g.height, g.width, g.alpha)
                .with_eps0(g.eps0);
        if let Err(e) = spec.validate() {
            v.push(format!("gen_noise: {e}"));
        }
    }
    if let Some(p) = &probe_spectrum {
        if p.sources.is_empty() {
            v.push("probe_spectrum.sources: need at least one source".into());
        }
        if p.probe_batch == 0 {
            v.push("probe_spectrum.probe_batch: must be >= 1".into());
        }
        if p.sources.iter().any(ProbeSource::is_private) {
            v.push("probe_spectrum.sources: private_oracle needs a dataset; use diagnose".into());
        }
    }
    if let Some(d) = &diagnose {
        if d.checkpoints.is_empty() {
            v.push("diagnose.checkpoints: need at least one checkpoint".into());
        }
        if d.oracle_batch == 0 || d.probe_batch == 0 {
            v.push("diagnose: oracle_batch and probe_batch must be >= 1".into());
        }
        if d.sources.iter().any(ProbeSource::is_private) {
            v.push("diagnose.sources: the oracle is always the reference; list public or synthetic sources only".into());
        }
        if let Some(s) = &d.slq {
            if s.probes == 0 || s.steps == 0 || s.batch == 0 {
                v.push("diagnose.slq: probes, steps and batch must be >= 1".into());
            }
        }
    }

    if !v.is_empty() {
        return Err(v);
    }
    Ok(ExperimentConfig {
        task,
        output_dir: output_dir.expect("no violations"),
        dataset,
        model,
        train,
        accountant,
        diagnose,
        probe_spectrum,
        gen_noise,
    })
}
