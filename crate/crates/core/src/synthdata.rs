//! Synthetic shadow datasets with known reflectance, shadowing factors and
//! lights, plus loading of directory-based image/mask datasets.
//!
//! Every sample is drawn from its own ChaCha8 stream (stream id = sample
//! index) keyed by the dataset seed, so generation order does not matter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    boundary_bands, default_band_radius, load_image, load_mask, save_image, save_mask,
    BinaryMask, Domain, Image,
};
use crate::physics::{render_shadow_image, IlluminationParams, KFactorMap};

pub const GENERATOR_NAME: &str = "shadowad-synth";
pub const GENERATOR_VERSION: u32 = 1;
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), key = seed_from_u64(seed), stream = sample index";

const MAX_BLOB_ATTEMPTS: usize = 1000;
const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.40;
const REFLECTANCE_MAX: f64 = 0.95;
const CHECKER_PERIOD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Checker,
    SmoothNoise,
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Texture::Flat),
            "checker" => Ok(Texture::Checker),
            "smooth-noise" => Ok(Texture::SmoothNoise),
            other => Err(Error::InvalidArgument(format!(
                "unknown texture {other:?} (expected flat, checker or smooth-noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub k_range: [f64; 2],
    pub penumbra_sigma: f64,
    pub texture: Texture,
    pub seed: u64,
    /// Lower bound of sampled reflectance; lower it to study dark-albedo confusions.
    #[serde(default = "default_reflectance_floor")]
    pub reflectance_floor: f64,
}

fn default_reflectance_floor() -> f64 {
    0.15
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 300,
            size: 64,
            k_range: [0.0, 0.6],
            penumbra_sigma: 1.0,
            texture: Texture::SmoothNoise,
            seed: 0,
            reflectance_floor: default_reflectance_floor(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.size < 16 {
            return bad(format!("size must be at least 16, got {}", self.size));
        }
        let [lo, hi] = self.k_range;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return bad(format!(
                "k range must satisfy 0 <= k_lo <= k_hi < 1, got [{lo}, {hi}]"
            ));
        }
        if !(self.penumbra_sigma >= 0.0 && self.penumbra_sigma.is_finite()) {
            return bad(format!(
                "penumbra sigma must be nonnegative, got {}",
                self.penumbra_sigma
            ));
        }
        if !(self.reflectance_floor > 0.0 && self.reflectance_floor < REFLECTANCE_MAX) {
            return bad(format!(
                "reflectance floor must lie in (0, {REFLECTANCE_MAX}), got {}",
                self.reflectance_floor
            ));
        }
        Ok(())
    }

    pub fn band_radius(&self) -> usize {
        default_band_radius(self.size, self.size)
    }

    /// Generator for sample `index`.
    pub fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub reflectance: Image,
    pub k: KFactorMap,
    pub lights: IlluminationParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub provenance: Option<Provenance>,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Image, mask: BinaryMask) -> Result<Self> {
        let name = name.into();
        if image.dims() != mask.dims() {
            return Err(Error::Dataset(format!("dimension mismatch: {name}")));
        }
        Ok(Sample {
            name,
            image,
            mask,
            provenance: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub name: String,
    pub stream: u64,
    pub k_core: f64,
    pub lights: IlluminationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub generator_version: u32,
    pub rng: String,
    pub spec: DatasetSpec,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

fn smooth_noise(size: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    // Bilinear interpolation of a coarse random lattice (cell = 8 px).
    let cells = size.div_ceil(8) + 1;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(lo..=hi)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / 8.0;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / 8.0;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * cells + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Reflectance with every value in `[reflectance_floor, 0.95]`.
pub fn generate_reflectance(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Image {
    let (lo, hi) = (spec.reflectance_floor, REFLECTANCE_MAX);
    let n = spec.size;
    match spec.texture {
        Texture::Flat => {
            let v = rng.random_range(lo..=hi);
            Image::filled(n, n, Domain::Linear, [v; 3])
        }
        Texture::Checker => {
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
            Image::from_fn(n, n, Domain::Linear, |y, x| {
                if (y / CHECKER_PERIOD + x / CHECKER_PERIOD).is_multiple_of(2) {
                    a
                } else {
                    b
                }
            })
        }
        Texture::SmoothNoise => {
            let planes: Vec<Vec<f64>> = (0..3).map(|_| smooth_noise(n, rng, lo, hi)).collect();
            Image::from_fn(n, n, Domain::Linear, |y, x| {
                std::array::from_fn(|c| planes[c][y * n + x])
            })
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn gaussian_blur(data: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * data[y * n + clampi(x as isize + j as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clampi(y as isize + j as isize - radius) * n + x])
                .sum();
        }
    }
    out
}

/// Random blob shadow: returns the shadowing-factor map, the mask and the core `k`.
///
/// The blob is a union of one to three ellipses covering 5-40% of the image
/// and staying clear of a `2 * band_radius` frame. Inside it `k = k_core`;
/// a Gaussian blur of `penumbra_sigma` softens the edge, and the mask is the
/// set of pixels darker than the penumbra midpoint `(1 + k_core) / 2`.
pub fn generate_k_map(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(KFactorMap, BinaryMask, f64)> {
    spec.validate()?;
    let n = spec.size;
    let margin = 2 * spec.band_radius();
    let k_core = rng.random_range(spec.k_range[0]..=spec.k_range[1]);
    let nf = n as f64;
    for _ in 0..MAX_BLOB_ATTEMPTS {
        let count = rng.random_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.random_range(0.25 * nf..0.75 * nf),
                    cx: rng.random_range(0.25 * nf..0.75 * nf),
                    ry: rng.random_range(0.08 * nf..0.3 * nf),
                    rx: rng.random_range(0.08 * nf..0.3 * nf),
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        let blob = BinaryMask::from_fn(n, n, |y, x| {
            ellipses
                .iter()
                .any(|e| e.contains(y as f64 + 0.5, x as f64 + 0.5))
        });
        let mut k: Vec<f64> = blob
            .data()
            .iter()
            .map(|&b| if b { k_core } else { 1.0 })
            .collect();
        if spec.penumbra_sigma > 0.0 {
            k = gaussian_blur(&k, n, spec.penumbra_sigma);
            // Blurring is a convex combination; undo rounding excursions.
            k.iter_mut().for_each(|v| *v = v.clamp(k_core, 1.0));
        }
        let threshold = (1.0 + k_core) / 2.0;
        let mask = BinaryMask::new(n, n, k.iter().map(|&v| v < threshold).collect())?;
        let area = mask.count() as f64 / (n * n) as f64;
        if !(MIN_AREA..=MAX_AREA).contains(&area) {
            continue;
        }
        let touches_margin = (0..n).any(|y| {
            (0..n).any(|x| {
                (blob.get(y, x) || mask.get(y, x))
                    && (y < margin || x < margin || y >= n - margin || x >= n - margin)
            })
        });
        if touches_margin || boundary_bands(&mask, spec.band_radius()).is_err() {
            continue;
        }
        return Ok((KFactorMap::new(n, n, k)?, mask, k_core));
    }
    Err(Error::Generation(format!(
        "no valid shadow blob after {MAX_BLOB_ATTEMPTS} attempts for size {n}"
    )))
}

fn sample_lights(rng: &mut ChaCha8Rng) -> IlluminationParams {
    let environment: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..=0.3));
    let direct: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..=0.7));
    IlluminationParams::new(direct, environment).expect("sampled lights are valid")
}

pub fn sample_name(index: usize) -> String {
    format!("{index:04}")
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<(Sample, SampleRecord)> {
    let mut rng = spec.sample_rng(index);
    let reflectance = generate_reflectance(spec, &mut rng);
    let (k, mask, k_core) = generate_k_map(spec, &mut rng)?;
    let lights = sample_lights(&mut rng);
    debug_assert!(REFLECTANCE_MAX <= lights.max_reflectance());
    let image = render_shadow_image(&reflectance, &k, &lights)?;
    let name = sample_name(index);
    let record = SampleRecord {
        index,
        name: name.clone(),
        stream: index as u64,
        k_core,
        lights,
    };
    let sample = Sample {
        name,
        image,
        mask,
        provenance: Some(Provenance {
            reflectance,
            k,
            lights,
        }),
    };
    Ok((sample, record))
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let generated: Vec<(Sample, SampleRecord)> = (0..spec.count)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect::<Result<_>>()?;
    let (samples, records): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    Ok(Dataset {
        samples,
        manifest: Manifest {
            generator: GENERATOR_NAME.into(),
            generator_version: GENERATOR_VERSION,
            rng: RNG_ALGORITHM.into(),
            spec: spec.clone(),
            samples: records,
        },
    })
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` and `manifest.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &dataset.samples {
        save_image(&s.image, images.join(format!("{}.png", s.name)))?;
        save_mask(&s.mask, masks.join(format!("{}.png", s.name)))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs `<stem>.png` files of two directories, sorted by stem.
pub fn match_stems(
    a_dir: impl AsRef<Path>,
    b_dir: impl AsRef<Path>,
) -> Result<Vec<(String, std::path::PathBuf, std::path::PathBuf)>> {
    let a = png_stems(a_dir.as_ref())?;
    let b = png_stems(b_dir.as_ref())?;
    let mut unmatched: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::Dataset(format!(
            "unmatched stems: {}",
            unmatched.join(", ")
        )));
    }
    Ok(a.into_iter()
        .map(|(stem, pa)| {
            let pb = b[&stem].clone();
            (stem, pa, pb)
        })
        .collect())
}

/// Loads `<stem>.png` pairs from an image and a mask directory.
pub fn load_directory_dataset(
    img_dir: impl AsRef<Path>,
    mask_dir: impl AsRef<Path>,
) -> Result<Vec<Sample>> {
    let pairs = match_stems(img_dir, mask_dir)?;
    let mut samples = Vec::with_capacity(pairs.len());
    let mut mismatched = Vec::new();
    for (stem, img_path, mask_path) in pairs {
        let image = load_image(&img_path)?;
        let mask = load_mask(&mask_path)?;
        if image.dims() != mask.dims() {
            mismatched.push(stem);
            continue;
        }
        samples.push(Sample::new(stem, image, mask)?);
    }
    if !mismatched.is_empty() {
        return Err(Error::Dataset(
            mismatched
                .iter()
                .map(|s| format!("dimension mismatch: {s}"))
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    Ok(samples)
}

/// Loads a dataset in the `images/` + `masks/` layout written by [`write_dataset`].
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    load_directory_dataset(dir.join("images"), dir.join("masks"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{shadow_free_ratio, shadow_strength};

    fn spec(texture: Texture, sigma: f64) -> DatasetSpec {
        DatasetSpec {
            count: 4,
            size: 64,
            k_range: [0.0, 0.8],
            penumbra_sigma: sigma,
            texture,
            seed: 42,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn flat_reflectance_is_constant_and_bounded() {
        let s = spec(Texture::Flat, 0.0);
        let img = generate_reflectance(&s, &mut s.sample_rng(0));
        let v = img.data()[0];
        assert!((0.15..=0.95).contains(&v));
        assert!(img.data().iter().all(|&x| x == v));
    }

    #[test]
    fn reflectance_bounds_and_determinism() {
        for t in [Texture::Flat, Texture::Checker, Texture::SmoothNoise] {
            let s = spec(t, 0.0);
            let a = generate_reflectance(&s, &mut s.sample_rng(3));
            let b = generate_reflectance(&s, &mut s.sample_rng(3));
            let c = generate_reflectance(&s, &mut s.sample_rng(4));
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert!(a.data().iter().all(|v| (0.15..=0.95).contains(v)));
        }
    }

    #[test]
    fn checker_has_period_eight() {
        let s = spec(Texture::Checker, 0.0);
        let img = generate_reflectance(&s, &mut s.sample_rng(1));
        let row: Vec<f64> = (0..64).map(|x| img.pixel(5, x)[0]).collect();
        // Autocorrelation of the centred signal peaks at lag 16 (full period)
        // and is most negative at lag 8 (half period).
        let mean = row.iter().sum::<f64>() / 64.0;
        let ac = |lag: usize| -> f64 {
            (0..64 - lag).map(|i| (row[i] - mean) * (row[i + lag] - mean)).sum::<f64>() / (64 - lag) as f64
        };
        let best = (1..32).max_by(|&a, &b| ac(a).total_cmp(&ac(b))).unwrap();
        assert_eq!(best, 16);
        assert!(ac(8) < 0.0);
        assert!((0..64).all(|x| img.pixel(5, x) == img.pixel(5, (x + 16) % 64)));
    }

    #[test]
    fn k_map_without_penumbra_is_two_valued() {
        let s = spec(Texture::Flat, 0.0);
        for i in 0..10 {
            let (k, mask, k_core) = generate_k_map(&s, &mut s.sample_rng(i)).unwrap();
            for (v, &m) in k.data().iter().zip(mask.data()) {
                assert_eq!(*v, if m { k_core } else { 1.0 });
            }
        }
    }

    #[test]
    fn blurred_k_map_stays_in_range() {
        let s = spec(Texture::Flat, 2.0);
        for i in 0..10 {
            let (k, mask, k_core) = generate_k_map(&s, &mut s.sample_rng(i)).unwrap();
            assert!(k.data().iter().all(|&v| v >= k_core && v <= 1.0));
            assert!(k.data().iter().any(|&v| v > k_core && v < 1.0));
            assert!(boundary_bands(&mask, s.band_radius()).is_ok());
        }
    }

    #[test]
    fn mask_area_within_contract() {
        let s = spec(Texture::Flat, 1.5);
        for i in 0..100 {
            let (_, mask, _) = generate_k_map(&s, &mut s.sample_rng(i)).unwrap();
            let frac = mask.count() as f64 / (64.0 * 64.0);
            assert!((0.05..=0.40).contains(&frac), "sample {i}: {frac}");
        }
    }

    #[test]
    fn samples_rerender_from_provenance() {
        let ds = generate_dataset(&spec(Texture::SmoothNoise, 1.0)).unwrap();
        for s in &ds.samples {
            let p = s.provenance.as_ref().unwrap();
            assert_eq!(render_shadow_image(&p.reflectance, &p.k, &p.lights).unwrap(), s.image);
        }
        assert_eq!(ds.manifest.samples.len(), 4);
    }

    #[test]
    fn strength_matches_ratio_on_flat_hard_shadows() {
        let mut s = spec(Texture::Flat, 0.0);
        s.count = 20;
        let ds = generate_dataset(&s).unwrap();
        for (sample, rec) in ds.samples.iter().zip(&ds.manifest.samples) {
            let got = shadow_strength(&sample.image, &sample.mask, s.band_radius()).unwrap();
            let want = shadow_free_ratio(&rec.lights.channel_mean(), rec.k_core)[0];
            assert!((got / want - 1.0).abs() < 0.02, "{}: {got} vs {want}", rec.name);
        }
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let s = spec(Texture::Checker, 1.0);
        let ds = generate_dataset(&s).unwrap();
        for i in 0..s.count {
            let (sample, _) = generate_sample(&s, i).unwrap();
            assert_eq!(sample, ds.samples[i]);
        }
    }

    #[test]
    fn written_dataset_is_byte_identical_and_reloads() {
        let s = spec(Texture::SmoothNoise, 1.0);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&generate_dataset(&s).unwrap(), a.path()).unwrap();
        write_dataset(&generate_dataset(&s).unwrap(), b.path()).unwrap();
        for rel in ["manifest.json", "images/0000.png", "masks/0003.png"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
        let loaded = load_dataset_dir(a.path()).unwrap();
        let orig = generate_dataset(&s).unwrap();
        assert_eq!(loaded.len(), 4);
        for (l, o) in loaded.iter().zip(&orig.samples) {
            assert_eq!(l.name, o.name);
            assert_eq!(l.mask, o.mask);
            for (x, y) in l.image.data().iter().zip(o.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn directory_loading_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (img_dir, mask_dir) = (dir.path().join("i"), dir.path().join("m"));
        fs::create_dir_all(&img_dir).unwrap();
        fs::create_dir_all(&mask_dir).unwrap();
        let img = Image::filled(8, 8, Domain::Linear, [0.5; 3]);
        for stem in ["b", "a", "c"] {
            save_image(&img, img_dir.join(format!("{stem}.png"))).unwrap();
            save_mask(&BinaryMask::filled(8, 8, true), mask_dir.join(format!("{stem}.png"))).unwrap();
        }
        let names: Vec<String> = load_directory_dataset(&img_dir, &mask_dir)
            .unwrap()
            .into_iter()
            .map(|s| s.name)
            .collect();
        assert_eq!(names, ["a", "b", "c"]);

        save_image(&img, img_dir.join("d.png")).unwrap();
        let err = load_directory_dataset(&img_dir, &mask_dir).unwrap_err();
        assert!(err.to_string().contains("d"), "{err}");

        save_mask(&BinaryMask::filled(9, 8, true), mask_dir.join("d.png")).unwrap();
        let err = load_directory_dataset(&img_dir, &mask_dir).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch: d"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let good = spec(Texture::Flat, 0.0);
        assert!(DatasetSpec { count: 0, ..good.clone() }.validate().is_err());
        assert!(DatasetSpec { k_range: [0.5, 0.2], ..good.clone() }.validate().is_err());
        assert!(DatasetSpec { k_range: [0.5, 1.0], ..good.clone() }.validate().is_err());
        assert!(DatasetSpec { penumbra_sigma: -1.0, ..good }.validate().is_err());
    }
}
