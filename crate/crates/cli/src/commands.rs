use std::fs;
use std::path::Path;

use shadowad::adversarial::{attenuate_image, prepare_samples, train_loop, METRICS_FILE};
use shadowad::evaluation::{
    binarize, boundary_error_cdf, evaluate_dataset, predict_at_original_size, BoundaryErrors, EvalProtocol,
};
use shadowad::imaging::{
    load_image, load_mask, resize_image, resize_interleaved, resize_mask, save_gray, save_image, save_mask, Domain,
    Image, EPS_LOG,
};
use shadowad::nets::{load_checkpoint, ModelParams, NetRole};
use shadowad::synthdata::{generate_dataset, load_dataset_dir, match_stems, write_dataset, DatasetSpec};
use shadowad::{Error, Result};

use crate::config::{RunConfig, ECHO_FILE};
use crate::{AnalyzeArgs, AttenuateArgs, DetectArgs, EvalArgs, SynthArgs, TrainArgs};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Path, role: NetRole) -> Result<ModelParams<f32>> {
    let (params, _) = load_checkpoint(path)?;
    let found = params.config().role();
    if found != role {
        return Err(Error::Model(format!(
            "{} holds a {found:?} network, expected {role:?}",
            path.display()
        )));
    }
    Ok(params)
}

fn check_input_size(params: &ModelParams<f32>, size: usize) -> Result<()> {
    let m = params.config().size_multiple();
    if size == 0 || !size.is_multiple_of(m) {
        return Err(Error::InvalidArgument(format!(
            "--input-size {size} must be a positive multiple of {m} for this network"
        )));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        count: a.count as usize,
        size: a.size,
        k_range: [a.k_lo, a.k_hi],
        penumbra_sigma: a.penumbra,
        texture: a.texture,
        seed: a.seed,
        reflectance_floor: a.reflectance_floor,
    };
    spec.validate()?;
    let dataset = generate_dataset(&spec)?;
    write_dataset(&dataset, &a.out)?;
    println!("wrote {} samples to {}", dataset.samples.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let samples = load_dataset_dir(&data)?;
    write(&a.out.join(ECHO_FILE), &cfg.to_json())?;
    let manifest = data.join("manifest.json");
    if manifest.exists() {
        let dst = a.out.join("manifest.json");
        fs::copy(&manifest, &dst).map_err(|e| Error::Io { path: dst, source: e })?;
    }
    let prepared = prepare_samples(&samples, &cfg.train)?;
    let outcome = train_loop(&prepared, &cfg.train, Some(&a.out), a.resume.as_deref())?;
    if let Some(r) = outcome.records.last() {
        println!(
            "iteration {}: loss_A {:.4} loss_D {:.4} gated {:.3}; metrics in {}",
            r.iteration,
            r.loss_a,
            r.loss_d,
            r.gated_fraction,
            a.out.join(METRICS_FILE).display()
        );
    }
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let params = load_model(&a.model, NetRole::Detector)?;
    check_input_size(&params, a.input_size)?;
    let protocol = EvalProtocol {
        input_size: a.input_size,
        threshold: a.threshold,
        ..EvalProtocol::default()
    };
    protocol.validate()?;
    let image = load_image(&a.image)?;
    let pred = predict_at_original_size(&params, &image, &protocol)?;
    save_mask(&binarize(&pred, a.threshold), &a.out)?;
    if let Some(path) = &a.prob {
        let (h, w) = pred.dims();
        save_gray(pred.data(), h, w, path)?;
    }
    Ok(())
}

/// Runs the attenuator at `input_size` and carries its log-domain change back
/// to the original resolution, so unshadowed detail is kept.
pub fn attenuate(a: &AttenuateArgs) -> Result<()> {
    let params = load_model(&a.model, NetRole::Attenuator)?;
    check_input_size(&params, a.input_size)?;
    let image = load_image(&a.image)?;
    let mask = load_mask(&a.mask)?;
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image is {:?}, mask is {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    image.require_pipeline_size()?;
    let (h, w) = image.dims();
    let n = a.input_size;
    let small = resize_image(&image, n, n)?.to_log_space(EPS_LOG)?;
    let attenuated = attenuate_image(&params, &small, &resize_mask(&mask, n, n)?)?;
    let delta: Vec<f64> = attenuated.data().iter().zip(small.data()).map(|(a, b)| a - b).collect();
    let delta = resize_interleaved(&delta, n, n, 3, h, w)?;
    let floor = EPS_LOG.ln();
    let full = image.to_log_space(EPS_LOG)?;
    let out: Vec<f64> = full
        .data()
        .iter()
        .zip(&delta)
        .map(|(x, d)| (x + d).clamp(floor, 0.0))
        .collect();
    save_image(&Image::new(h, w, Domain::Log, out)?.from_log_space()?, &a.out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let params = load_model(&a.model, NetRole::Detector)?;
    check_input_size(&params, a.input_size)?;
    let protocol = EvalProtocol {
        input_size: a.input_size,
        threshold: a.threshold,
        ..EvalProtocol::default()
    };
    protocol.validate()?;
    let samples = load_dataset_dir(&a.data)?;
    let report = evaluate_dataset(&params, &samples, &protocol)?;
    write(&a.report, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    println!("{} images, BER {:.3}", report.image_count, report.ber);
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut total = BoundaryErrors::empty(a.max_distance);
    for (stem, pred_path, gt_path) in match_stems(&a.pred_dir, &a.gt_dir)? {
        let pred = load_mask(&pred_path)?;
        let gt = load_mask(&gt_path)?;
        if pred.dims() != gt.dims() {
            return Err(Error::Dataset(format!(
                "dimension mismatch: {stem} is {:?} predicted, {:?} ground truth",
                pred.dims(),
                gt.dims()
            )));
        }
        // A perfect prediction adds nothing, even where the truth has no boundary.
        if pred == gt {
            continue;
        }
        total.merge(&boundary_error_cdf(&pred, &gt, a.max_distance)?)?;
    }
    write(&a.cdf, &total.to_csv())
}
