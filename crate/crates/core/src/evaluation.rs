//! Detection metrics and the boundary-distance error analysis.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{distance_to_boundary, resize_image, resize_interleaved, BinaryMask, Image, EPS_LOG};
use crate::nets::{unet_forward, Mode, ModelParams, NetRole, Tensor};
use crate::synthdata::Sample;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel shadow probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "prediction of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "prediction value {v} outside [0, 1]"
            )));
        }
        Ok(PredictionMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// 1.0 on mask pixels, 0.0 elsewhere.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let (height, width) = mask.dims();
        PredictionMap {
            height,
            width,
            data: mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
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

    /// Bilinear resize of the float map, clamped back into `[0, 1]`.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        let data = resize_interleaved(&self.data, self.height, self.width, 1, h, w)?;
        Self::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// Pixel `i` is shadow iff `pred[i] > threshold`.
pub fn binarize(pred: &PredictionMap, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(pred.height, pred.width, |y, x| pred.get(y, x) > threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "ground truth lacks a class ({} shadow, {} non-shadow pixels)",
                self.positives(),
                self.negatives()
            )));
        }
        Ok(())
    }

    /// Missed shadow pixels, percent.
    pub fn shadow_error(&self) -> Result<f64> {
        self.require_both_classes()?;
        Ok(100.0 * self.fn_ as f64 / self.positives() as f64)
    }

    /// Falsely detected non-shadow pixels, percent.
    pub fn nonshadow_error(&self) -> Result<f64> {
        self.require_both_classes()?;
        Ok(100.0 * self.fp as f64 / self.negatives() as f64)
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Balanced error rate in percent: `100 * (1 - (TPR + TNR) / 2)`.
pub fn ber(c: &ConfusionCounts) -> Result<f64> {
    c.require_both_classes()?;
    // 1 - (TPR + TNR)/2 = (FN*N + FP*P) / (2*P*N); one rounding from exact integers.
    let (p, n) = (c.positives() as u128, c.negatives() as u128);
    let num = 100 * (c.fn_ as u128 * n + c.fp as u128 * p);
    Ok(num as f64 / (2 * p * n) as f64)
}

/// How images reach the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Square network input size.
    pub input_size: usize,
    pub threshold: f64,
    pub eps_log: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            input_size: 64,
            threshold: DEFAULT_THRESHOLD,
            eps_log: EPS_LOG,
        }
    }
}

impl EvalProtocol {
    pub fn full_scale() -> Self {
        EvalProtocol {
            input_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.input_size < crate::imaging::MIN_PIPELINE_SIZE {
            return Err(Error::InvalidArgument(format!(
                "input size {} is too small",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Anything that maps a log-domain image to shadow probabilities of the same size.
pub trait Detector: Sync {
    fn predict(&self, log_image: &Image) -> Result<PredictionMap>;
}

/// Runs a detector network in inference mode on one image.
pub fn detect(params: &ModelParams<f32>, log_image: &Image) -> Result<PredictionMap> {
    let (h, w) = log_image.dims();
    let x: Tensor<f32> = crate::adversarial::batch_tensor(&[log_image], None)?;
    let out = unet_forward(params, &x, Mode::Infer)?.output;
    PredictionMap::new(h, w, out.data().iter().map(|&v| f64::from(v).clamp(0.0, 1.0)).collect())
}

impl Detector for ModelParams<f32> {
    fn predict(&self, log_image: &Image) -> Result<PredictionMap> {
        if self.config().role() != NetRole::Detector {
            return Err(Error::Model("checkpoint is not a detector (3 -> 1, sigmoid)".into()));
        }
        detect(self, log_image)
    }
}

/// Resize to the network size, log-transform, predict, resize the float map back.
pub fn predict_at_original_size(det: &dyn Detector, image: &Image, protocol: &EvalProtocol) -> Result<PredictionMap> {
    image.require_pipeline_size()?;
    let (h, w) = image.dims();
    let n = protocol.input_size;
    let small = resize_image(&image.to_linear(), n, n)?;
    let pred = det.predict(&small.to_log_space(protocol.eps_log)?)?;
    if pred.dims() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "detector returned {:?} for a {n}x{n} input",
            pred.dims()
        )));
    }
    pred.resize(h, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub counts: ConfusionCounts,
    /// Absent when the ground truth lacks a class.
    pub ber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    /// How the aggregate metrics are formed.
    pub aggregation: String,
    pub image_count: usize,
    pub counts: ConfusionCounts,
    pub ber: f64,
    pub shadow_error: f64,
    pub nonshadow_error: f64,
    pub images: Vec<ImageEval>,
}

impl EvalReport {
    pub fn from_images(protocol: EvalProtocol, images: Vec<ImageEval>) -> Result<Self> {
        let counts: ConfusionCounts = images.iter().map(|e| e.counts).sum();
        Ok(EvalReport {
            protocol,
            aggregation: "pixel counts summed over all images, then metrics".into(),
            image_count: images.len(),
            counts,
            ber: ber(&counts)?,
            shadow_error: counts.shadow_error()?,
            nonshadow_error: counts.nonshadow_error()?,
            images,
        })
    }
}

pub fn evaluate_image(name: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<ImageEval> {
    let counts = confusion_counts(pred, gt)?;
    Ok(ImageEval {
        name: name.to_string(),
        counts,
        ber: ber(&counts).ok(),
    })
}

/// Scores a detector on `samples`; the aggregate uses summed counts.
pub fn evaluate_dataset(det: &dyn Detector, samples: &[Sample], protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let images = samples
        .par_iter()
        .map(|s| {
            let pred = predict_at_original_size(det, &s.image, protocol)?;
            evaluate_image(&s.name, &binarize(&pred, protocol.threshold), &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_images(*protocol, images)
}

/// Wrongly predicted pixels binned by distance to the ground-truth boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryErrors {
    pub max_distance: usize,
    pub fn_total: u64,
    pub fp_total: u64,
    /// `fn_within[d]`: false negatives at distance `<= d`.
    pub fn_within: Vec<u64>,
    pub fp_within: Vec<u64>,
}

impl BoundaryErrors {
    pub fn empty(max_distance: usize) -> Self {
        BoundaryErrors {
            max_distance,
            fn_total: 0,
            fp_total: 0,
            fn_within: vec![0; max_distance + 1],
            fp_within: vec![0; max_distance + 1],
        }
    }

    /// Pools the errors of another image.
    pub fn merge(&mut self, o: &BoundaryErrors) -> Result<()> {
        if o.max_distance != self.max_distance {
            return Err(Error::InvalidArgument("merging curves with different ranges".into()));
        }
        self.fn_total += o.fn_total;
        self.fp_total += o.fp_total;
        for d in 0..=self.max_distance {
            self.fn_within[d] += o.fn_within[d];
            self.fp_within[d] += o.fp_within[d];
        }
        Ok(())
    }

    fn curve(within: &[u64], total: u64) -> Option<Vec<f64>> {
        (total > 0).then(|| within.iter().map(|&n| n as f64 / total as f64).collect())
    }

    /// Cumulative fraction of false negatives at integer distances; `None` when there are none.
    pub fn fn_curve(&self) -> Option<Vec<f64>> {
        Self::curve(&self.fn_within, self.fn_total)
    }

    pub fn fp_curve(&self) -> Option<Vec<f64>> {
        Self::curve(&self.fp_within, self.fp_total)
    }

    /// `distance,fn_cum,fp_cum` with `NA` for a class without errors.
    pub fn to_csv(&self) -> String {
        let (fnc, fpc) = (self.fn_curve(), self.fp_curve());
        let cell = |c: &Option<Vec<f64>>, d: usize| match c {
            Some(v) => format!("{}", v[d]),
            None => "NA".to_string(),
        };
        let mut out = String::from("distance,fn_cum,fp_cum\n");
        for d in 0..=self.max_distance {
            out.push_str(&format!("{d},{},{}\n", cell(&fnc, d), cell(&fpc, d)));
        }
        out
    }
}

pub fn boundary_error_cdf(pred: &BinaryMask, gt: &BinaryMask, max_distance: usize) -> Result<BoundaryErrors> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let dist = distance_to_boundary(gt)?;
    let mut out = BoundaryErrors::empty(max_distance);
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if p == g {
            continue;
        }
        let d = dist.data()[i];
        let (total, within) = if g {
            (&mut out.fn_total, &mut out.fn_within)
        } else {
            (&mut out.fp_total, &mut out.fp_within)
        };
        *total += 1;
        // First integer bin that contains the pixel.
        let first = d.ceil() as usize;
        for w in within.iter_mut().skip(first) {
            *w += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Domain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_mask(n: usize, lo: usize, hi: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    #[test]
    fn binarize_is_strict() {
        let p = PredictionMap::filled(8, 8, 0.9).unwrap();
        assert_eq!(binarize(&p, 0.5).count(), 64);
        let p = PredictionMap::filled(8, 8, 0.5).unwrap();
        assert_eq!(binarize(&p, 0.5).count(), 0);
        assert!(PredictionMap::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn ber_examples() {
        let c = ConfusionCounts { tp: 40, fn_: 10, tn: 80, fp: 20 };
        assert_eq!(ber(&c).unwrap(), 20.0);
        let gt = block_mask(8, 2, 6);
        assert_eq!(ber(&confusion_counts(&gt, &gt).unwrap()).unwrap(), 0.0);
        let none = BinaryMask::filled(8, 8, false);
        assert_eq!(ber(&confusion_counts(&none, &gt).unwrap()).unwrap(), 50.0);
        let all = BinaryMask::filled(8, 8, true);
        assert!(matches!(ber(&confusion_counts(&all, &all).unwrap()), Err(Error::UndefinedMetric(_))));
        assert!(confusion_counts(&all, &BinaryMask::filled(4, 4, true)).is_err());
    }

    #[test]
    fn cdf_examples() {
        let gt = block_mask(16, 4, 12);
        let same = boundary_error_cdf(&gt, &gt, 5).unwrap();
        assert!(same.fn_curve().is_none() && same.fp_curve().is_none());
        assert!(same.to_csv().lines().skip(1).all(|l| l.ends_with(",NA,NA")));

        // Pixel (5,6) is inside, one step from the top edge row 4.
        let mut pred = gt.clone();
        pred.set(5, 6, false);
        let c = boundary_error_cdf(&pred, &gt, 3).unwrap();
        assert_eq!(c.fn_curve().unwrap(), vec![0.0, 1.0, 1.0, 1.0]);
        assert!(c.fp_curve().is_none());
        assert!(boundary_error_cdf(&gt, &BinaryMask::filled(16, 16, false), 3).is_err());
    }

    fn brute_cdf(pred: &BinaryMask, gt: &BinaryMask, max: usize) -> (Vec<u64>, Vec<u64>, u64, u64) {
        let b = gt.boundary();
        let (h, w) = gt.dims();
        let mut fn_all = Vec::new();
        let mut fp_all = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if pred.get(y, x) == gt.get(y, x) {
                    continue;
                }
                let mut best = u64::MAX;
                for by in 0..h {
                    for bx in 0..w {
                        if b.get(by, bx) {
                            let dy = y.abs_diff(by) as u64;
                            let dx = x.abs_diff(bx) as u64;
                            best = best.min(dy * dy + dx * dx);
                        }
                    }
                }
                if gt.get(y, x) { fn_all.push(best) } else { fp_all.push(best) }
            }
        }
        let within = |v: &[u64]| (0..=max as u64).map(|d| v.iter().filter(|&&s| s <= d * d).count() as u64).collect();
        (within(&fn_all), within(&fp_all), fn_all.len() as u64, fp_all.len() as u64)
    }

    #[test]
    fn cdf_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 20 {
            let gt = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(0.4));
            let pred = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(0.4));
            if gt.boundary().is_empty() {
                continue;
            }
            let c = boundary_error_cdf(&pred, &gt, 12).unwrap();
            let (f, p, ft, pt) = brute_cdf(&pred, &gt, 12);
            assert_eq!((c.fn_within.clone(), c.fp_within.clone(), c.fn_total, c.fp_total), (f, p, ft, pt));
            checked += 1;
        }
    }

    struct Oracle(Vec<(Image, BinaryMask)>);

    impl Detector for Oracle {
        fn predict(&self, log_image: &Image) -> Result<PredictionMap> {
            let (_, m) = self.0.iter().find(|(i, _)| i == log_image).expect("known image");
            Ok(PredictionMap::from_mask(m))
        }
    }

    struct Constant(f64);

    impl Detector for Constant {
        fn predict(&self, log_image: &Image) -> Result<PredictionMap> {
            let (h, w) = log_image.dims();
            PredictionMap::filled(h, w, self.0)
        }
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mask = block_mask(16, 2 + i % 3, 10 + i % 4);
                let img = Image::from_fn(16, 16, Domain::Linear, |y, x| {
                    let v = if mask.get(y, x) { 0.2 } else { 0.8 };
                    [v, v * 0.9, v * (0.5 + 0.05 * i as f64)]
                });
                Sample::new(format!("{i:02}"), img, mask).unwrap()
            })
            .collect()
    }

    fn protocol16() -> EvalProtocol {
        EvalProtocol { input_size: 16, ..EvalProtocol::default() }
    }

    #[test]
    fn oracle_detector_scores_zero() {
        let samples = toy_samples(1);
        let p = protocol16();
        let s = &samples[0];
        let oracle = Oracle(vec![(s.image.to_log_space(p.eps_log).unwrap(), s.mask.clone())]);
        let r = evaluate_dataset(&oracle, &samples, &p).unwrap();
        assert_eq!(r.ber, 0.0);
        assert_eq!(r.images[0].ber, Some(0.0));
    }

    #[test]
    fn constant_half_detector_scores_fifty_and_order_does_not_matter() {
        let mut samples = toy_samples(5);
        let p = protocol16();
        let r = evaluate_dataset(&Constant(0.5), &samples, &p).unwrap();
        assert_eq!(r.ber, 50.0);
        let total: ConfusionCounts = r.images.iter().map(|e| e.counts).sum();
        assert_eq!(total, r.counts);
        assert!((r.ber - 0.5 * (r.shadow_error + r.nonshadow_error)).abs() < 1e-9);

        let r1 = evaluate_dataset(&Constant(0.7), &samples, &p).unwrap();
        samples.reverse();
        let r2 = evaluate_dataset(&Constant(0.7), &samples, &p).unwrap();
        assert_eq!(r1.counts, r2.counts);
        assert_eq!(r1.ber, r2.ber);
    }

    #[test]
    fn untrained_network_runs_through_the_protocol() {
        let d = crate::nets::init_params::<f32>(&crate::nets::UNetConfig::detector(), 0).unwrap();
        let samples = toy_samples(2);
        let r = evaluate_dataset(&d, &samples, &protocol16()).unwrap();
        assert_eq!(r.counts.total(), 2 * 256);
        let a = crate::nets::init_params::<f32>(&crate::nets::UNetConfig::attenuator(), 0).unwrap();
        assert!(matches!(evaluate_dataset(&a, &samples, &protocol16()), Err(Error::Model(_))));
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_pixels(vals in proptest::collection::vec(0.0f64..=1.0, 64), t1 in 0.01f64..0.99, dt in 0.0f64..0.5) {
            let p = PredictionMap::new(8, 8, vals).unwrap();
            let t2 = (t1 + dt).min(0.99);
            let lo = binarize(&p, t1);
            let hi = binarize(&p, t2);
            prop_assert!(hi.data().iter().zip(lo.data()).all(|(&h, &l)| !h || l));
        }

        #[test]
        fn ber_is_class_symmetric(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let s = ConfusionCounts { tp: tn, tn: tp, fp: fn_, fn_: fp };
            match (ber(&c), ber(&s)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a - b).abs() < 1e-9);
                    prop_assert!((0.0..=100.0).contains(&a));
                    let half = 0.5 * (c.shadow_error().unwrap() + c.nonshadow_error().unwrap());
                    prop_assert!((a - half).abs() < 1e-9);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness differs"),
            }
        }

        #[test]
        fn cdf_is_monotone(bits in proptest::collection::vec(any::<bool>(), 144), pbits in proptest::collection::vec(any::<bool>(), 144)) {
            let gt = BinaryMask::new(12, 12, bits).unwrap();
            prop_assume!(!gt.boundary().is_empty());
            let pred = BinaryMask::new(12, 12, pbits).unwrap();
            let c = boundary_error_cdf(&pred, &gt, 20).unwrap();
            for curve in [c.fn_curve(), c.fp_curve()].into_iter().flatten() {
                prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(*curve.last().unwrap() <= 1.0);
            }
        }
    }
}
