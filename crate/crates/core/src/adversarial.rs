//! Attenuator and detector objectives and the alternating training loop.
//!
//! One iteration: the attenuator produces `A(I)` for the batch, each sample
//! gets its adversarial weight from the shadow strength of `A(I)`, the
//! detector takes one Adam step on the real and attenuated images, then the
//! attenuator takes one Adam step against the updated (frozen) detector.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::PredictionMap;
use crate::imaging::{default_band_radius, resize_image, resize_mask, BinaryMask, Domain, Image, EPS_LOG, MIN_PIPELINE_SIZE};
use crate::nets::{
    init_params, load_checkpoint_for, save_checkpoint, unet_backward, unet_forward, AdamConfig, AdamState, Mode,
    ModelParams, NetRole, Real, Saved, Tensor, UNetConfig,
};
use crate::physics::{adaptive_adv_weight, physics_loss, shadow_strength, LossGrad, LossWeights};
use crate::synthdata::Sample;

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean over non-shadow pixels of `sum_c |A_c - I_c|` (both log-domain).
pub fn loss_nsd(a_out: &Image, input: &Image, mask: &BinaryMask) -> Result<LossGrad> {
    a_out.require_domain(Domain::Log)?;
    input.require_domain(Domain::Log)?;
    check_dims("attenuated vs input", a_out.dims(), input.dims())?;
    check_dims("image vs mask", a_out.dims(), mask.dims())?;
    let n = mask.data().len() - mask.count();
    if n == 0 {
        return Err(Error::TooFewPixels {
            what: "non-shadow region",
            needed: 1,
            found: 0,
        });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; a_out.data().len()];
    for (i, &shadow) in mask.data().iter().enumerate() {
        if shadow {
            continue;
        }
        for c in 0..3 {
            let d = a_out.data()[i * 3 + c] - input.data()[i * 3 + c];
            value += d.abs();
            grad[i * 3 + c] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok(LossGrad { value: value * inv, grad })
}

/// Mean detector output over shadow pixels.
pub fn loss_sd(d_on_a: &PredictionMap, mask: &BinaryMask) -> Result<LossGrad> {
    check_dims("prediction vs mask", d_on_a.dims(), mask.dims())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::TooFewPixels {
            what: "shadow region",
            needed: 1,
            found: 0,
        });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let grad = mask
        .data()
        .iter()
        .zip(d_on_a.data())
        .map(|(&m, &p)| {
            if m {
                value += p;
                inv
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossGrad { value: value * inv, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuatorLoss {
    pub value: f64,
    pub nsd: f64,
    pub sd: f64,
    pub ph: f64,
    /// W.r.t. the attenuated image (interleaved RGB): the L_nsd and L_ph terms.
    pub grad_a_out: Vec<f64>,
    /// W.r.t. the detector output on the attenuated image: the L_sd term.
    pub grad_d_on_a: Vec<f64>,
}

/// `nsd * L_nsd + sd * L_sd + ph * L_ph`.
pub fn attenuator_loss(
    input: &Image,
    mask: &BinaryMask,
    a_out: &Image,
    d_on_a: &PredictionMap,
    weights: &LossWeights,
) -> Result<AttenuatorLoss> {
    let nsd = loss_nsd(a_out, input, mask)?;
    let sd = loss_sd(d_on_a, mask)?;
    let ph = physics_loss(a_out, input, mask)?;
    let grad_a_out = nsd
        .grad
        .iter()
        .zip(&ph.grad)
        .map(|(gn, gp)| weights.nsd * gn + weights.ph * gp)
        .collect();
    Ok(AttenuatorLoss {
        value: weights.nsd * nsd.value + weights.sd * sd.value + weights.ph * ph.value,
        nsd: nsd.value,
        sd: sd.value,
        ph: ph.value,
        grad_a_out,
        grad_d_on_a: sd.grad.iter().map(|g| weights.sd * g).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLoss {
    pub value: f64,
    /// Mean `|D(I) - M|`.
    pub real: f64,
    /// Mean `|D(A(I)) - M|`, before weighting.
    pub adv: f64,
    pub grad_real: Vec<f64>,
    pub grad_adv: Vec<f64>,
}

fn mean_abs_to_mask(pred: &PredictionMap, mask: &BinaryMask, weight: f64) -> (f64, Vec<f64>) {
    let inv = 1.0 / pred.data().len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&p, &m)| {
            let d = p - if m { 1.0 } else { 0.0 };
            sum += d.abs();
            if weight == 0.0 || d == 0.0 {
                0.0
            } else {
                weight * inv * d.signum()
            }
        })
        .collect();
    (sum * inv, grad)
}

/// `real * mean|D(I) - M| + lambda_adv * mean|D(A(I)) - M|`.
pub fn detector_loss(
    d_on_real: &PredictionMap,
    d_on_adv: &PredictionMap,
    mask: &BinaryMask,
    lambda_adv: f64,
    weights: &LossWeights,
) -> Result<DetectorLoss> {
    check_dims("real prediction vs mask", d_on_real.dims(), mask.dims())?;
    check_dims("adversarial prediction vs mask", d_on_adv.dims(), mask.dims())?;
    let (real, grad_real) = mean_abs_to_mask(d_on_real, mask, weights.real);
    let (adv, grad_adv) = mean_abs_to_mask(d_on_adv, mask, lambda_adv);
    Ok(DetectorLoss {
        value: weights.real * real + lambda_adv * adv,
        real,
        adv,
        grad_real,
        grad_adv,
    })
}

fn default_log_every() -> usize {
    10
}

fn default_checkpoint_every() -> usize {
    500
}

fn default_input_size() -> usize {
    64
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub adam_a: AdamConfig,
    #[serde(default)]
    pub adam_d: AdamConfig,
    /// Band radius for shadow strength; derived from the input size when absent.
    #[serde(default)]
    pub band_radius: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Snapshot interval in iterations; 0 disables snapshots.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Square training resolution; samples are resized to it.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// When false only the detector is trained, on real images.
    #[serde(default = "yes")]
    pub use_attenuator: bool,
    #[serde(default = "UNetConfig::attenuator")]
    pub attenuator: UNetConfig,
    #[serde(default = "UNetConfig::detector")]
    pub detector: UNetConfig,
}

impl TrainConfig {
    /// Batch 8, 2000 iterations, depth-3 nets at 64x64.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            seed,
            weights: LossWeights::default(),
            adam_a: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            band_radius: None,
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
            input_size: default_input_size(),
            use_attenuator: true,
            attenuator: UNetConfig::attenuator(),
            detector: UNetConfig::detector(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        self.weights.validate()?;
        self.adam_a.validate()?;
        self.adam_d.validate()?;
        self.attenuator.validate()?;
        self.detector.validate()?;
        if self.attenuator.role() != NetRole::Attenuator {
            return bad("attenuator must map 4 channels to 3 with identity output".into());
        }
        if self.detector.role() != NetRole::Detector {
            return bad("detector must map 3 channels to 1 with sigmoid output".into());
        }
        for net in [&self.attenuator, &self.detector] {
            let m = net.size_multiple();
            if self.input_size < MIN_PIPELINE_SIZE || !self.input_size.is_multiple_of(m) {
                return bad(format!(
                    "input_size {} must be at least {MIN_PIPELINE_SIZE} and a multiple of {m}",
                    self.input_size
                ));
            }
        }
        if self.band_radius == Some(0) {
            return bad("band_radius must be positive".into());
        }
        Ok(())
    }

    pub fn band_radius(&self) -> usize {
        self.band_radius
            .unwrap_or_else(|| default_band_radius(self.input_size, self.input_size))
    }
}

/// A sample at training resolution in log space, with its input shadow strength.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub name: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub k_strength: f64,
}

impl TrainSample {
    pub fn new(sample: &Sample, size: usize, band_radius: usize) -> Result<Self> {
        let err = |e: Error| Error::Dataset(format!("sample {}: {e}", sample.name));
        sample.image.require_pipeline_size().map_err(err)?;
        let image = resize_image(&sample.image.to_linear(), size, size).map_err(err)?;
        let mask = resize_mask(&sample.mask, size, size).map_err(err)?;
        let shadow = mask.count();
        if shadow < 2 || shadow == mask.data().len() {
            return Err(err(Error::Dataset(format!(
                "training masks need at least 2 shadow and 1 non-shadow pixel, found {shadow} of {}",
                mask.data().len()
            ))));
        }
        let k_strength = shadow_strength(&image, &mask, band_radius).map_err(err)?;
        Ok(TrainSample {
            name: sample.name.clone(),
            image: image.to_log_space(EPS_LOG).map_err(err)?,
            mask,
            k_strength,
        })
    }
}

pub fn prepare_samples(samples: &[Sample], config: &TrainConfig) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| TrainSample::new(s, config.input_size, config.band_radius()))
        .collect()
}

/// Stacks images (and optionally masks as a fourth channel) into `[N, C, H, W]`.
pub fn batch_tensor<T: Real>(images: &[&Image], masks: Option<&[&BinaryMask]>) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = first.dims();
    let c = if masks.is_some() { 4 } else { 3 };
    let hw = h * w;
    let mut data = vec![T::zero(); images.len() * c * hw];
    for (n, img) in images.iter().enumerate() {
        check_dims("batch image", img.dims(), (h, w))?;
        let base = n * c * hw;
        for (i, rgb) in img.data().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[base + ch * hw + i] = T::lit(rgb[ch]);
            }
        }
        if let Some(ms) = masks {
            let m = ms
                .get(n)
                .ok_or_else(|| Error::InvalidArgument("fewer masks than images".into()))?;
            check_dims("batch mask", m.dims(), (h, w))?;
            for (i, &b) in m.data().iter().enumerate() {
                data[base + 3 * hw + i] = if b { T::one() } else { T::zero() };
            }
        }
    }
    Tensor::new([images.len(), c, h, w], data)
}

fn sample_image<T: Real>(t: &Tensor<T>, n: usize) -> Result<Image> {
    let [_, c, h, w] = t.shape();
    let hw = h * w;
    let s = t.sample(n);
    let mut data = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        for ch in 0..c.min(3) {
            data.push(s[ch * hw + i].as_f64());
        }
    }
    Image::new(h, w, Domain::Log, data)
}

fn sample_prediction<T: Real>(t: &Tensor<T>, n: usize) -> Result<PredictionMap> {
    let [_, _, h, w] = t.shape();
    PredictionMap::new(h, w, t.sample(n).iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect())
}

/// Writes an interleaved RGB gradient into sample `n` of a `[N, 3, H, W]` tensor.
fn put_rgb_grad<T: Real>(t: &mut Tensor<T>, n: usize, g: &[f64], scale: f64) {
    let hw = t.shape()[2] * t.shape()[3];
    let s = t.sample_mut(n);
    for (i, rgb) in g.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            s[ch * hw + i] += T::lit(rgb[ch] * scale);
        }
    }
}

fn put_map_grad<T: Real>(t: &mut Tensor<T>, n: usize, g: &[f64], scale: f64) {
    for (d, &v) in t.sample_mut(n).iter_mut().zip(g) {
        *d = T::lit(v * scale);
    }
}

/// One logged training iteration. Attenuator components are unweighted;
/// `loss_a = nsd*loss_nsd + sd*loss_sd + ph*loss_ph`. `loss_d_adv` is the
/// batch mean of the ungated samples' `mean|D(A(I)) - M|` (gated samples
/// count as 0), so `loss_d = real*loss_d_real + adv0*loss_d_adv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss_a: f64,
    pub loss_nsd: f64,
    pub loss_sd: f64,
    pub loss_ph: f64,
    pub loss_d: f64,
    pub loss_d_real: f64,
    pub loss_d_adv: f64,
    pub mean_kstrength_in: f64,
    pub mean_kstrength_att: f64,
    pub gated_fraction: f64,
}

pub const METRICS_HEADER: &str = "iteration,loss_A,loss_nsd,loss_sd,loss_ph,loss_D,loss_D_real,loss_D_adv,mean_kstrength_in,mean_kstrength_att,gated_fraction";

impl StepRecord {
    fn values(&self) -> [f64; 10] {
        [
            self.loss_a,
            self.loss_nsd,
            self.loss_sd,
            self.loss_ph,
            self.loss_d,
            self.loss_d_real,
            self.loss_d_adv,
            self.mean_kstrength_in,
            self.mean_kstrength_att,
            self.gated_fraction,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.iteration.to_string();
        for v in self.values() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// Attenuator forward pass over a batch plus the per-sample gates.
pub struct Attenuated<T> {
    /// Clamped log-domain `A(I)` as `[N, 3, H, W]`.
    pub output: Tensor<T>,
    pub k_strength: Vec<f64>,
    pub lambda_adv: Vec<f64>,
    /// Where the clamp passes gradients through.
    pass: Vec<bool>,
    saved: Saved<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorStep {
    pub loss: f64,
    pub real: f64,
    /// Gated mean, see [`StepRecord`].
    pub adv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuatorStep {
    pub loss: f64,
    pub nsd: f64,
    pub sd: f64,
    pub ph: f64,
    /// Aligned with the attenuator's parameters.
    pub grads: Vec<Vec<f64>>,
}

/// Both networks and their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub attenuator: ModelParams<T>,
    pub detector: ModelParams<T>,
    pub adam_a: AdamState<T>,
    pub adam_d: AdamState<T>,
    /// Completed iterations.
    pub iteration: usize,
}

const ATTENUATOR_SEED_KEY: u64 = 0x4154_544e;
const DETECTOR_SEED_KEY: u64 = 0x4445_5445;
const SHUFFLE_SEED_KEY: u64 = 0x5348_5546;

impl<T: Real> Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let attenuator = init_params::<T>(&config.attenuator, config.seed ^ ATTENUATOR_SEED_KEY)?;
        let detector = init_params::<T>(&config.detector, config.seed ^ DETECTOR_SEED_KEY)?;
        Ok(Trainer {
            adam_a: AdamState::new(&attenuator, config.adam_a),
            adam_d: AdamState::new(&detector, config.adam_d),
            attenuator,
            detector,
            config: config.clone(),
            iteration: 0,
        })
    }

    /// Runs the attenuator in train mode and gates each sample on the
    /// strength of its linear-domain output.
    pub fn attenuate(&self, batch: &[&TrainSample]) -> Result<Attenuated<T>> {
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let masks: Vec<&BinaryMask> = batch.iter().map(|s| &s.mask).collect();
        let x = batch_tensor::<T>(&images, Some(&masks))?;
        let fwd = unet_forward(&self.attenuator, &x, Mode::Train)?;
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let floor = EPS_LOG.ln();
        let mut out = Tensor::<T>::zeros([n, 3, h, w]);
        let mut pass = vec![false; n * 3 * hw];
        for s in 0..n {
            let xin = x.sample(s);
            let head = fwd.output.sample(s);
            let dst = out.sample_mut(s);
            for j in 0..3 * hw {
                let raw = (xin[j] + head[j]).as_f64();
                pass[s * 3 * hw + j] = (floor..=0.0).contains(&raw);
                dst[j] = T::lit(raw.clamp(floor, 0.0));
            }
        }
        let radius = self.config.band_radius();
        let mut k_strength = Vec::with_capacity(n);
        for (s, sample) in batch.iter().enumerate() {
            let img = sample_image(&out, s)?;
            k_strength.push(shadow_strength(&img, &sample.mask, radius)?);
        }
        let lambda_adv = k_strength
            .iter()
            .map(|&k| adaptive_adv_weight(k, &self.config.weights))
            .collect();
        Ok(Attenuated {
            output: out,
            k_strength,
            lambda_adv,
            pass,
            saved: fwd.saved.expect("train mode keeps state"),
        })
    }

    /// One Adam step on the detector. Without `att` only the real term is used.
    pub fn update_detector(&mut self, batch: &[&TrainSample], att: Option<&Attenuated<T>>) -> Result<DetectorStep> {
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let x = batch_tensor::<T>(&images, None)?;
        let real = unet_forward(&self.detector, &x, Mode::Train)?;
        let adv = att
            .map(|a| unet_forward(&self.detector, &a.output, Mode::Train))
            .transpose()?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let mut g_real = Tensor::<T>::zeros(real.output.shape());
        let mut g_adv = Tensor::<T>::zeros(real.output.shape());
        let (mut real_sum, mut adv_sum) = (0.0, 0.0);
        let w = &self.config.weights;
        for (s, sample) in batch.iter().enumerate() {
            let p_real = sample_prediction(&real.output, s)?;
            let (p_adv, lambda) = match (&adv, att) {
                (Some(f), Some(a)) => (sample_prediction(&f.output, s)?, a.lambda_adv[s]),
                _ => (p_real.clone(), 0.0),
            };
            let l = detector_loss(&p_real, &p_adv, &sample.mask, lambda, w)?;
            real_sum += l.real;
            if lambda > 0.0 {
                adv_sum += l.adv;
            }
            put_map_grad(&mut g_real, s, &l.grad_real, scale);
            put_map_grad(&mut g_adv, s, &l.grad_adv, scale);
        }
        let mut grads = unet_backward(&self.detector, real.saved.as_ref(), &g_real, false)?.params;
        if let Some(f) = &adv {
            let ga = unet_backward(&self.detector, f.saved.as_ref(), &g_adv, false)?.params;
            for (acc, g) in grads.iter_mut().zip(ga) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let step = DetectorStep {
            loss: w.real * real_sum * scale + w.adv0 * adv_sum * scale,
            real: real_sum * scale,
            adv: adv_sum * scale,
        };
        if !step.loss.is_finite() {
            return Err(Error::NonFinite("detector loss".into()));
        }
        self.adam_d.step(&mut self.detector, &grads)?;
        self.detector.update_running_stats(real.saved.as_ref().expect("train mode"));
        if let Some(f) = &adv {
            self.detector.update_running_stats(f.saved.as_ref().expect("train mode"));
        }
        Ok(step)
    }

    /// Batch-mean attenuator loss and its gradient w.r.t. the attenuator's
    /// parameters, with the detector in train mode and left untouched.
    pub fn attenuator_objective(&self, batch: &[&TrainSample], att: &Attenuated<T>) -> Result<AttenuatorStep> {
        let d = unet_forward(&self.detector, &att.output, Mode::Train)?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let mut g_out = Tensor::<T>::zeros(att.output.shape());
        let mut g_pred = Tensor::<T>::zeros(d.output.shape());
        let (mut nsd, mut sd, mut ph) = (0.0, 0.0, 0.0);
        for (s, sample) in batch.iter().enumerate() {
            let a_img = sample_image(&att.output, s)?;
            let pred = sample_prediction(&d.output, s)?;
            let l = attenuator_loss(&sample.image, &sample.mask, &a_img, &pred, &self.config.weights)?;
            nsd += l.nsd * scale;
            sd += l.sd * scale;
            ph += l.ph * scale;
            put_rgb_grad(&mut g_out, s, &l.grad_a_out, scale);
            put_map_grad(&mut g_pred, s, &l.grad_d_on_a, scale);
        }
        let through_d = unet_backward(&self.detector, d.saved.as_ref(), &g_pred, true)?
            .input
            .expect("input gradient requested");
        let mut g_head = g_out;
        for ((g, &t), &p) in g_head.data_mut().iter_mut().zip(through_d.data()).zip(&att.pass) {
            *g = if p { *g + t } else { T::zero() };
        }
        let grads = unet_backward(&self.attenuator, Some(&att.saved), &g_head, false)?.params;
        let w = &self.config.weights;
        Ok(AttenuatorStep {
            loss: w.nsd * nsd + w.sd * sd + w.ph * ph,
            nsd,
            sd,
            ph,
            grads: grads.into_iter().map(|g| g.into_iter().map(|v| v.as_f64()).collect()).collect(),
        })
    }

    /// One Adam step on the attenuator; the detector is not modified.
    pub fn update_attenuator(&mut self, batch: &[&TrainSample], att: &Attenuated<T>) -> Result<AttenuatorStep> {
        let step = self.attenuator_objective(batch, att)?;
        if !step.loss.is_finite() {
            return Err(Error::NonFinite("attenuator loss".into()));
        }
        let grads: Vec<Vec<T>> = step
            .grads
            .iter()
            .map(|g| g.iter().map(|&v| T::lit(v)).collect())
            .collect();
        self.adam_a.step(&mut self.attenuator, &grads)?;
        self.attenuator.update_running_stats(&att.saved);
        Ok(step)
    }

    /// Detector update then attenuator update on one batch.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = batch.len() as f64;
        let mean_in = batch.iter().map(|s| s.k_strength).sum::<f64>() / n;
        let w = self.config.weights;
        let iteration = self.iteration + 1;
        let record = if self.config.use_attenuator {
            let att = self.attenuate(batch)?;
            let d = self.update_detector(batch, Some(&att))?;
            let a = self.update_attenuator(batch, &att)?;
            let gated = att.lambda_adv.iter().filter(|&&l| l == 0.0).count() as f64;
            StepRecord {
                iteration,
                loss_a: a.loss,
                loss_nsd: a.nsd,
                loss_sd: a.sd,
                loss_ph: a.ph,
                loss_d: w.real * d.real + w.adv0 * d.adv,
                loss_d_real: d.real,
                loss_d_adv: d.adv,
                mean_kstrength_in: mean_in,
                mean_kstrength_att: att.k_strength.iter().sum::<f64>() / n,
                gated_fraction: gated / n,
            }
        } else {
            let d = self.update_detector(batch, None)?;
            // No attenuated images exist: strengths are the inputs' and every
            // sample counts as gated.
            StepRecord {
                iteration,
                loss_a: 0.0,
                loss_nsd: 0.0,
                loss_sd: 0.0,
                loss_ph: 0.0,
                loss_d: w.real * d.real,
                loss_d_real: d.real,
                loss_d_adv: 0.0,
                mean_kstrength_in: mean_in,
                mean_kstrength_att: mean_in,
                gated_fraction: 1.0,
            }
        };
        if !record.is_finite() {
            return Err(Error::NumericalAbort {
                iteration,
                record: serde_json::to_string(&record).unwrap_or_default(),
            });
        }
        self.iteration = iteration;
        Ok(record)
    }
}

/// Sample indices for 0-based iteration `t`: a seeded permutation per epoch,
/// consecutive slices of `batch_size`, trailing partial batch dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, t: usize) -> Result<Vec<usize>> {
    if batch_size == 0 || n < batch_size {
        return Err(Error::Dataset(format!(
            "dataset of {n} samples cannot fill a batch of {batch_size}"
        )));
    }
    let per_epoch = n / batch_size;
    let (epoch, pos) = (t / per_epoch, t % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SEED_KEY);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    Ok(perm[pos * batch_size..(pos + 1) * batch_size].to_vec())
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size.max(1)
}

/// Mean attenuated strength of each complete epoch.
pub fn epoch_mean_kstrength_att(records: &[StepRecord], per_epoch: usize) -> Vec<f64> {
    if per_epoch == 0 {
        return Vec::new();
    }
    records
        .chunks_exact(per_epoch)
        .map(|c| c.iter().map(|r| r.mean_kstrength_att).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Progress saved next to each snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub iteration: usize,
    pub config: TrainConfig,
    /// Every step so far, logged or not.
    pub records: Vec<StepRecord>,
}

pub struct TrainOutcome {
    pub trainer: Trainer<f32>,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn epoch_mean_kstrength_att(&self, n_samples: usize) -> Vec<f64> {
        epoch_mean_kstrength_att(&self.records, batches_per_epoch(n_samples, self.trainer.config.batch_size))
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const ABORT_FILE: &str = "abort_record.json";
pub const FINAL_ATTENUATOR: &str = "a_final.ckpt";
pub const FINAL_DETECTOR: &str = "d_final.ckpt";

pub fn snapshot_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:06}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_snapshot(dir: &Path, trainer: &Trainer<f32>, records: &[StepRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&trainer.attenuator, Some(&trainer.adam_a), dir.join("a.ckpt"))?;
    save_checkpoint(&trainer.detector, Some(&trainer.adam_d), dir.join("d.ckpt"))?;
    let progress = TrainProgress {
        iteration: trainer.iteration,
        config: trainer.config.clone(),
        records: records.to_vec(),
    };
    let json = serde_json::to_vec_pretty(&progress).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_file(&dir.join("state.json"), &json)
}

/// Restores a trainer from a snapshot directory written by [`train_loop`].
/// The snapshot's configuration must match `config` apart from `iterations`.
pub fn load_snapshot(dir: &Path, config: &TrainConfig) -> Result<(Trainer<f32>, Vec<StepRecord>)> {
    let state_path = dir.join("state.json");
    let bytes = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let progress: TrainProgress =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("bad state.json: {e}")))?;
    let mut expected = config.clone();
    expected.iterations = progress.config.iterations;
    if progress.config != expected {
        return Err(Error::Config("resume snapshot was written with a different configuration".into()));
    }
    if progress.records.len() != progress.iteration || progress.iteration > config.iterations {
        return Err(Error::Checkpoint(format!(
            "snapshot at iteration {} cannot resume a run of {} iterations",
            progress.iteration, config.iterations
        )));
    }
    let (attenuator, adam_a) = load_checkpoint_for(dir.join("a.ckpt"), &config.attenuator)?;
    let (detector, adam_d) = load_checkpoint_for(dir.join("d.ckpt"), &config.detector)?;
    let missing = || Error::Checkpoint("snapshot lacks optimizer state".into());
    let trainer = Trainer {
        config: config.clone(),
        attenuator,
        detector,
        adam_a: adam_a.ok_or_else(missing)?,
        adam_d: adam_d.ok_or_else(missing)?,
        iteration: progress.iteration,
    };
    Ok((trainer, progress.records))
}

fn metrics_text(records: &[StepRecord], log_every: usize, last: usize) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records.iter().filter(|r| r.iteration % log_every == 0 || r.iteration == last) {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains on `samples` for `config.iterations` iterations.
///
/// With `out`, writes `metrics.csv` (one row per `log_every` iterations and
/// the last one), snapshots under `checkpoints/iter_NNNNNN/` and the final
/// `a_final.ckpt`/`d_final.ckpt`. With `resume`, continues from a snapshot
/// and produces the same results as the uninterrupted run.
pub fn train_loop(
    samples: &[TrainSample],
    config: &TrainConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    batch_indices(samples.len(), config.batch_size, config.seed, 0)?;
    let (mut trainer, mut records) = match resume {
        Some(dir) => load_snapshot(dir, config)?,
        None => (Trainer::<f32>::new(config)?, Vec::new()),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics = match out {
        Some(dir) => {
            let path = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(metrics_text(&records, config.log_every, config.iterations).as_bytes())
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    while trainer.iteration < config.iterations {
        let idx = batch_indices(samples.len(), config.batch_size, config.seed, trainer.iteration)?;
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let record = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e @ (Error::NonFinite(_) | Error::NumericalAbort { .. })) => {
                if let Some(dir) = out {
                    let dump = match &e {
                        Error::NumericalAbort { record, .. } => record.clone(),
                        _ => serde_json::to_string(&records.last()).unwrap_or_default(),
                    };
                    write_file(&dir.join(ABORT_FILE), dump.as_bytes())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let it = record.iteration;
        if let Some((f, path)) = metrics.as_mut() {
            if it % config.log_every == 0 || it == config.iterations {
                writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
        }
        records.push(record);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
                save_snapshot(&snapshot_dir(dir, it), &trainer, &records)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&trainer.attenuator, Some(&trainer.adam_a), dir.join(FINAL_ATTENUATOR))?;
        save_checkpoint(&trainer.detector, Some(&trainer.adam_d), dir.join(FINAL_DETECTOR))?;
    }
    Ok(TrainOutcome { trainer, records })
}

/// Runs the attenuator (inference mode) and returns the clamped log-domain `A(I)`.
pub fn attenuate_image(params: &ModelParams<f32>, log_image: &Image, mask: &BinaryMask) -> Result<Image> {
    if params.config().role() != NetRole::Attenuator {
        return Err(Error::Model("checkpoint is not an attenuator (4 -> 3, identity)".into()));
    }
    log_image.require_domain(Domain::Log)?;
    let x = batch_tensor::<f32>(&[log_image], Some(&[mask]))?;
    let head = unet_forward(params, &x, Mode::Infer)?.output;
    let floor = EPS_LOG.ln();
    let mut img = sample_image(&head, 0)?;
    for (v, &x) in img.data_mut().iter_mut().zip(log_image.data()) {
        *v = (x + *v).clamp(floor, 0.0);
    }
    Ok(img)
}
