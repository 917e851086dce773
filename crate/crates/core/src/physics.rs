//! Direct-plus-environment illumination model.
//!
//! A pixel with reflectance `R` that receives a fraction `k` of the direct
//! light is observed as `(k * L_d + L_e) * R`, per channel. Everything here
//! (rendering, shadow/lit ratios, shadow strength, the log-ratio variance
//! penalty and the adversarial gate) follows from that relation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{boundary_bands, BinaryMask, Domain, Image, EPS_LOG};

/// Direct (`L_d`) and environment (`L_e`) light colours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationParams {
    pub direct: [f64; 3],
    pub environment: [f64; 3],
}

impl IlluminationParams {
    pub fn new(direct: [f64; 3], environment: [f64; 3]) -> Result<Self> {
        if direct.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "direct light must be nonnegative, got {direct:?}"
            )));
        }
        if environment.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "environment light must be positive, got {environment:?}"
            )));
        }
        Ok(IlluminationParams {
            direct,
            environment,
        })
    }

    /// Per-channel mean of both lights, i.e. the lights as seen by a
    /// channel-averaged intensity on grey reflectance.
    pub fn channel_mean(&self) -> IlluminationParams {
        let mean = |v: [f64; 3]| (v[0] + v[1] + v[2]) / 3.0;
        let d = mean(self.direct);
        let e = mean(self.environment);
        IlluminationParams {
            direct: [d; 3],
            environment: [e; 3],
        }
    }

    /// Largest reflectance that renders without clipping when fully lit.
    pub fn max_reflectance(&self) -> f64 {
        (0..3)
            .map(|c| 1.0 / (self.direct[c] + self.environment[c]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-pixel fraction of direct light, `k` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KFactorMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl KFactorMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} k-map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "k values must lie in [0, 1], found {v}"
            )));
        }
        Ok(KFactorMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, k: f64) -> Self {
        KFactorMap {
            height,
            width,
            data: vec![k; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Loss weights of the attenuator and detector objectives plus the gate margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nsd: f64,
    pub sd: f64,
    pub ph: f64,
    pub real: f64,
    pub adv0: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            nsd: 30.0,
            sd: 1.0,
            ph: 100.0,
            real: 0.8,
            adv0: 0.2,
            epsilon: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.nsd, self.sd, self.ph, self.real, self.adv0];
        if all.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {self:?}"
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Renders `(k * L_d + L_e) * R` per pixel and channel, clamped to `[0, 1]`.
pub fn render_shadow_image(
    reflectance: &Image,
    k: &KFactorMap,
    lights: &IlluminationParams,
) -> Result<Image> {
    reflectance.require_domain(Domain::Linear)?;
    if reflectance.dims() != k.dims() {
        return Err(Error::DimensionMismatch(format!(
            "reflectance is {:?}, k-map is {:?}",
            reflectance.dims(),
            k.dims()
        )));
    }
    let mut data = Vec::with_capacity(reflectance.data().len());
    for (rgb, &kv) in reflectance.data().chunks_exact(3).zip(k.data()) {
        for c in 0..3 {
            let v = (kv * lights.direct[c] + lights.environment[c]) * rgb[c];
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(reflectance.height(), reflectance.width(), Domain::Linear, data)
}

/// Lit-over-shadowed ratio `(L_d + L_e) / (k * L_d + L_e)` per channel.
pub fn shadow_free_ratio(lights: &IlluminationParams, k: f64) -> [f64; 3] {
    std::array::from_fn(|c| {
        (lights.direct[c] + lights.environment[c])
            / (k * lights.direct[c] + lights.environment[c])
    })
}

/// Mean intensity just outside the mask edge over mean intensity just inside.
///
/// Log-domain images are exponentiated first.
pub fn shadow_strength(img: &Image, mask: &BinaryMask, band_radius: usize) -> Result<f64> {
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image is {:?}, mask is {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let (b_in, b_out) = boundary_bands(mask, band_radius)?;
    let linear = img.to_linear();
    let band_mean = |band: &BinaryMask| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, rgb) in linear.data().chunks_exact(3).enumerate() {
            if band.data()[i] {
                sum += (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                n += 1;
            }
        }
        sum / n as f64
    };
    let outside = band_mean(&b_out);
    let inside = band_mean(&b_in).max(EPS_LOG);
    Ok(outside / inside)
}

/// Adversarial sample weight: the baseline weight while the shadow is still
/// visible (`k_strength > 1 + epsilon`), zero otherwise.
pub fn adaptive_adv_weight(k_strength: f64, weights: &LossWeights) -> f64 {
    if k_strength > 1.0 + weights.epsilon {
        weights.adv0
    } else {
        0.0
    }
}

/// Scalar loss with its gradient laid out like the differentiated input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Sum over channels of the population variance, across shadow pixels, of
/// `log A - log I`. Both inputs are log-domain; the gradient is w.r.t. `a_out`.
pub fn physics_loss(a_out: &Image, input: &Image, mask: &BinaryMask) -> Result<LossGrad> {
    a_out.require_domain(Domain::Log)?;
    input.require_domain(Domain::Log)?;
    if a_out.dims() != input.dims() || a_out.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "attenuated {:?}, input {:?}, mask {:?}",
            a_out.dims(),
            input.dims(),
            mask.dims()
        )));
    }
    let n = mask.count();
    if n < 2 {
        return Err(Error::TooFewPixels {
            what: "physics loss shadow region",
            needed: 2,
            found: n,
        });
    }
    let floor = EPS_LOG.ln();
    let a = a_out.data();
    let x = input.data();
    let inside: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.data()[i]).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; a.len()];
    for c in 0..3 {
        let diffs: Vec<f64> = inside
            .iter()
            .map(|&i| a[i * 3 + c].max(floor) - x[i * 3 + c].max(floor))
            .collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        value += diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        for (&i, d) in inside.iter().zip(&diffs) {
            if a[i * 3 + c] > floor {
                grad[i * 3 + c] = 2.0 * (d - mean) / n as f64;
            }
        }
    }
    Ok(LossGrad { value, grad })
}
