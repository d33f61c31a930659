//! One function per task. Each computes every output in memory and returns
//! it; nothing touches the output directory until the task has succeeded.

use dpkfc::data::{gen_blobs, load_idx, BlobsSpec, Dataset, Split};
use dpkfc::diagnostics::{
    default_hvp_step, hvp_finite_diff, layer_spectrum, log_spectrum_cosine, slq_density,
    track_alignment, AlignmentRow, SpectrumReport,
};
use dpkfc::dp::{self, AccountantState};
use dpkfc::kfac::{estimate_factors, synthetic_probe_inputs, Factors, ProbeSource};
use dpkfc::linalg::{DenseMatrix, Rng};
use dpkfc::nn::{Loss, Model, Targets};
use dpkfc::probes::{self, PinkNoiseSpec};
use dpkfc::trainer::{self, fmt_float};
use serde_json::{json, Value};

use crate::config::{DatasetSpec, ExperimentConfig, ModelSpec, Normalize};
use crate::output::Outputs;
use crate::CliError;

pub fn run(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    use crate::config::Task::*;
    match cfg.task {
        Train => train(cfg),
        Accountant => accountant(cfg),
        Diagnose => diagnose(cfg),
        ProbeSpectrum => probe_spectrum(cfg),
        GenNoise => gen_noise(cfg),
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, CliError> {
    Ok(match spec {
        DatasetSpec::Idx {
            images,
            labels,
            normalize,
        } => {
            let ds = load_idx(images, labels)?;
            match normalize {
                Normalize::UnitScale => ds,
                Normalize::Global => ds.standardized(),
                Normalize::PerFeature => ds.standardized_per_feature(),
            }
        }
        DatasetSpec::Blobs {
            n,
            dim,
            classes,
            noise,
            seed,
            shape,
        } => {
            let ds = gen_blobs(&BlobsSpec {
                n: *n,
                dim: *dim,
                classes: *classes,
                noise: *noise,
                seed: *seed,
            })?;
            match shape {
                Some(s) => ds.reshaped(s.clone())?,
                None => ds,
            }
        }
    })
}

fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, CliError> {
    let mut rng = Rng::new(spec.init_seed.unwrap_or(seed));
    Ok(Model::new(
        spec.layers.clone(),
        spec.input_shape.clone(),
        &mut rng,
    )?)
}

fn check_shapes(model: &Model, ds: &Dataset) -> Result<(), CliError> {
    if model.input_shape() != ds.sample_shape() {
        return Err(CliError::new(
            "config",
            format!(
                "model input shape {:?} does not match dataset records {:?}",
                model.input_shape(),
                ds.sample_shape()
            ),
        ));
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    let tc = cfg.train.as_ref().expect("validated");
    let ds = load_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let model = build_model(cfg.model.as_ref().expect("validated"), tc.seed)?;
    check_shapes(&model, &ds)?;
    let (model, record) = trainer::train(model, &ds, tc)?;
    let mut out = Outputs::default();
    out.add("steps.csv", record.to_csv()?);
    if !record.alignment.rows.is_empty() {
        out.add("alignment.csv", record.alignment_csv()?);
    }
    out.add("summary.json", serde_json::to_vec_pretty(&record.summary)?);
    let meta = json!({
        "step": record.summary.steps,
        "seed": tc.seed,
        "normalization": ds.normalization(),
    });
    out.add("model.ckpt", model.to_bytes(meta)?);
    let s = &record.summary;
    Ok((
        out,
        json!({
            "steps": s.steps,
            "sigma": s.sigma,
            "final_epsilon": s.final_epsilon,
            "final_test_accuracy": s.final_test_accuracy,
            "final_train_loss": s.final_train_loss,
        }),
    ))
}

fn accountant(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    let a = cfg.accountant.as_ref().expect("validated");
    let sigma = match (a.sigma, a.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(e)) => dp::calibrate_sigma(e, a.delta, a.sample_rate, a.steps)?,
        (None, None) => unreachable!("validated"),
    };
    let mut state = AccountantState::default();
    state.compose(a.sample_rate, sigma, a.steps)?;
    let (epsilon, order) = dp::epsilon_of(&state, a.delta)?;
    let result = json!({
        "sample_rate": a.sample_rate,
        "sigma": sigma,
        "steps": a.steps,
        "delta": a.delta,
        "epsilon": epsilon,
        "best_order": order,
    });
    let mut out = Outputs::default();
    out.add("accountant.json", serde_json::to_vec_pretty(&result)?);
    Ok((out, result))
}

fn gen_noise(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    let g = cfg.gen_noise.as_ref().expect("validated");
    let spec =
        PinkNoiseSpec::new(g.batch, g.channels, g.height, g.width, g.alpha).with_eps0(g.eps0);
    let x = probes::gen_pink_noise(&spec, &mut Rng::new(g.seed))?;
    let rows = DenseMatrix::new(g.batch, x.sample_len(), x.data().to_vec())?;
    let header = json!({"kind": "tensor", "shape": x.shape(), "spec": spec, "seed": g.seed});
    let mut out = Outputs::default();
    out.add("noise.bin", dpkfc::container::encode(header, &[&rows])?);

    // The radial spectrum needs square power-of-two images.
    let mut slope = None;
    if g.height == g.width && g.height.is_power_of_two() && g.height >= 4 {
        let pts = probes::radial_power_spectrum(&x)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["radius", "power"])?;
        for (r, p) in &pts {
            w.write_record([fmt_float(*r), fmt_float(*p)])?;
        }
        out.add("spectrum.csv", w.into_inner().map_err(|e| e.into_error())?);
        slope = Some(probes::fit_log_slope(&pts)?);
    }
    let result = json!({"alpha": g.alpha, "shape": x.shape(), "fitted_slope": slope});
    out.add("summary.json", serde_json::to_vec_pretty(&result)?);
    Ok((out, result))
}

/// Factors from each non-oracle source at `model`.
fn source_factors(
    model: &Model,
    sources: &[ProbeSource],
    batch: usize,
    pi: f64,
    rng: &mut Rng,
) -> Result<Vec<(String, Factors)>, CliError> {
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let x = synthetic_probe_inputs(model, src, batch, rng)?;
        let y = Targets::Classes(probes::gen_labels(batch, model.num_classes(), rng)?);
        let f = estimate_factors(model, &x, &y, &Loss::CrossEntropy, pi)?;
        out.push((src.descriptor(), f));
    }
    Ok(out)
}

fn spectrum_csv(reports: &[(String, SpectrumReport)]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["checkpoint", "layer", "rank", "value", "source"])?;
    for (ck, rep) in reports {
        for l in &rep.layers {
            for (rank, v) in l.eigenvalues.iter().enumerate() {
                w.write_record([
                    ck.clone(),
                    l.layer.to_string(),
                    rank.to_string(),
                    fmt_float(*v),
                    l.source.clone(),
                ])?;
            }
        }
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Mean-centered log-spectrum cosine of every source against the first one,
/// per layer.
fn log_cosines(rep: &SpectrumReport) -> Result<Vec<(usize, String, f64)>, CliError> {
    let Some(reference) = rep.layers.first().map(|l| l.source.clone()) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for base in rep.layers.iter().filter(|l| l.source == reference) {
        for other in rep
            .layers
            .iter()
            .filter(|l| l.layer == base.layer && l.source != reference)
        {
            let c = log_spectrum_cosine(&base.eigenvalues, &other.eigenvalues)?;
            out.push((base.layer, other.source.clone(), c));
        }
    }
    Ok(out)
}

fn probe_spectrum(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    let p = cfg.probe_spectrum.as_ref().expect("validated");
    let model = match &p.checkpoint {
        Some(path) => Model::load(path)?.0,
        None => build_model(cfg.model.as_ref().expect("validated"), p.seed)?,
    };
    let mut rng = Rng::new(p.seed);
    let factors = source_factors(&model, &p.sources, p.probe_batch, p.pi, &mut rng)?;
    let named: Vec<(String, &Factors)> = factors.iter().map(|(n, f)| (n.clone(), f)).collect();
    let rep = layer_spectrum(&named)?;
    let cos = log_cosines(&rep)?;
    let mut out = Outputs::default();
    out.add("spectrum.csv", spectrum_csv(&[(String::new(), rep)])?);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "reference", "source", "log_spectrum_cosine"])?;
    for (layer, src, c) in &cos {
        w.write_record([
            layer.to_string(),
            factors[0].0.clone(),
            src.clone(),
            fmt_float(*c),
        ])?;
    }
    out.add(
        "log_cosine.csv",
        w.into_inner().map_err(|e| e.into_error())?,
    );
    let result = json!({
        "sources": factors.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        "layers": model.trainable().len(),
    });
    Ok((out, result))
}

fn alignment_rows_csv(rows: &[(String, AlignmentRow)]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "checkpoint",
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
    for (ck, r) in rows {
        let factor = serde_json::to_value(r.factor)?;
        w.write_record([
            ck.clone(),
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
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn pick(pool: &[usize], n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.index(pool.len())]).collect()
}

fn diagnose(cfg: &ExperimentConfig) -> Result<(Outputs, Value), CliError> {
    let d = cfg.diagnose.as_ref().expect("validated");
    let ds = load_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let pool = ds.split(&Split::Train).to_vec();
    if pool.is_empty() {
        return Err(CliError::new("config", "dataset has no training records"));
    }
    let mut align = Vec::new();
    let mut spectra = Vec::new();
    let mut slq_rows = Vec::new();
    for (c, path) in d.checkpoints.iter().enumerate() {
        let ck = path.display().to_string();
        let (model, meta) = Model::load(path)?;
        check_shapes(&model, &ds)?;
        let step = meta.get("step").and_then(Value::as_u64).unwrap_or(c as u64);
        let mut rng = Rng::new(d.seed).split(c as u64);

        let (x, y) = ds.batch(&pick(&pool, d.oracle_batch, &mut rng));
        let oracle = estimate_factors(&model, &x, &y, &Loss::CrossEntropy, d.pi)?;
        let cands = source_factors(&model, &d.sources, d.probe_batch, d.pi, &mut rng)?;
        let rep = track_alignment(step, ("private-oracle", &oracle), &cands)?;
        align.extend(rep.rows.into_iter().map(|r| (ck.clone(), r)));

        let mut named: Vec<(String, &Factors)> = vec![("private-oracle".into(), &oracle)];
        named.extend(cands.iter().map(|(n, f)| (n.clone(), f)));
        spectra.push((ck.clone(), layer_spectrum(&named)?));

        if let Some(s) = &d.slq {
            let (hx, hy) = ds.batch(&pick(&pool, s.batch, &mut rng));
            let h = default_hvp_step(&model.flat_params());
            let hvp = |v: &[f64]| hvp_finite_diff(&model, &hx, &hy, &Loss::CrossEntropy, v, h);
            let dens = slq_density(hvp, model.num_params(), s.probes, s.steps, &mut rng)?;
            for (p, (nodes, weights)) in dens.nodes.iter().zip(&dens.weights).enumerate() {
                for (n, w) in nodes.iter().zip(weights) {
                    slq_rows.push((ck.clone(), p, *n, *w));
                }
            }
        }
    }
    let mut out = Outputs::default();
    out.add("alignment.csv", alignment_rows_csv(&align)?);
    out.add("spectrum.csv", spectrum_csv(&spectra)?);
    if d.slq.is_some() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["checkpoint", "probe", "node", "weight"])?;
        for (ck, p, n, wt) in &slq_rows {
            w.write_record([ck.clone(), p.to_string(), fmt_float(*n), fmt_float(*wt)])?;
        }
        out.add("slq.csv", w.into_inner().map_err(|e| e.into_error())?);
    }
    Ok((
        out,
        json!({"checkpoints": d.checkpoints.len(), "alignment_rows": align.len()}),
    ))
}
