//! Image and mask rasters, PNG I/O, log-space transforms, resampling and
//! binary morphology.
//!
//! Images are stored row-major with interleaved channels, `data[(y * w + x) * 3 + c]`.
//! Masks use `true` for shadow.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Smallest nonzero 8-bit intensity; the floor applied before taking logs.
pub const EPS_LOG: f64 = 1.0 / 255.0;

/// Images smaller than this are rejected by pipeline entry points.
pub const MIN_PIPELINE_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Linear,
    Log,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Linear => "linear",
            Domain::Log => "log",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    domain: Domain,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, domain: Domain, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be nonzero, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            domain,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, domain: Domain, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            domain,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        domain: Domain,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Image {
            height,
            width,
            domain,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Unweighted channel mean at a pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.pixel(y, x);
        (r + g + b) / 3.0
    }

    pub fn require_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::DomainMismatch {
                expected: expected.name(),
                found: self.domain.name(),
            });
        }
        Ok(())
    }

    pub fn require_pipeline_size(&self) -> Result<()> {
        if self.height < MIN_PIPELINE_SIZE || self.width < MIN_PIPELINE_SIZE {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, pipeline needs at least {MIN_PIPELINE_SIZE}x{MIN_PIPELINE_SIZE}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Elementwise `ln(max(v, eps_log))`.
    pub fn to_log_space(&self, eps_log: f64) -> Result<Image> {
        self.require_domain(Domain::Linear)?;
        if !(eps_log > 0.0 && eps_log <= 0.1) {
            return Err(Error::InvalidArgument(format!(
                "eps_log must lie in (0, 0.1], got {eps_log}"
            )));
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            domain: Domain::Log,
            data: self.data.iter().map(|&v| v.max(eps_log).ln()).collect(),
        })
    }

    /// Elementwise `exp` clamped to `[0, 1]`.
    pub fn from_log_space(&self) -> Result<Image> {
        self.require_domain(Domain::Log)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            domain: Domain::Linear,
            data: self.data.iter().map(|&v| v.exp().clamp(0.0, 1.0)).collect(),
        })
    }

    /// Returns the image in the linear domain, converting when needed.
    pub fn to_linear(&self) -> Image {
        match self.domain {
            Domain::Linear => self.clone(),
            Domain::Log => self.from_log_space().expect("domain checked"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be nonzero, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn not(&self) -> BinaryMask {
        self.map(|v| !v)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip(other, |a, b| a && b)
    }

    fn map(&self, f: impl Fn(bool) -> bool) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Shadow pixels with at least one non-shadow 4-neighbour.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = self.dims();
        BinaryMask::from_fn(h, w, |y, x| {
            if !self.get(y, x) {
                return false;
            }
            (y > 0 && !self.get(y - 1, x))
                || (y + 1 < h && !self.get(y + 1, x))
                || (x > 0 && !self.get(y, x - 1))
                || (x + 1 < w && !self.get(y, x + 1))
        })
    }
}

/// Euclidean distance from each pixel to the nearest boundary pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    buf.truncate(info.buffer_size());
    if info.width == 0 || info.height == 0 {
        return Err(Error::Format(format!(
            "zero-sized image: {}",
            path.display()
        )));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "non-8-bit input: {} has {:?} bit depth",
            path.display(),
            info.bit_depth
        )));
    }
    Ok((info, buf))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_error(path, e))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// Decodes an 8-bit RGB PNG into a linear-domain image with values `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::Format(format!(
            "non-RGB input: {} is {:?}",
            path.display(),
            info.color_type
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for row in buf.chunks(info.line_size) {
        data.extend(row[..w * 3].iter().map(|&b| f64::from(b) / 255.0));
    }
    Image::new(h, w, Domain::Linear, data)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    img.require_domain(Domain::Linear)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), img.width, img.height, png::ColorType::Rgb, &bytes)
}

/// Decodes an 8-bit grayscale PNG; pixels strictly above 127 are shadow.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "non-grayscale input: {} is {:?}",
            path.display(),
            info.color_type
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w);
    for row in buf.chunks(info.line_size) {
        data.extend(row[..w].iter().map(|&b| b > 127));
    }
    BinaryMask::new(h, w, data)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

/// Writes a single-channel float plane in `[0, 1]` as 8-bit grayscale.
pub fn save_gray(values: &[f64], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{height}x{width} plane needs {} values, got {}",
            height * width,
            values.len()
        )));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be nonzero, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Source sample position and interpolation weight for half-pixel-centre
/// bilinear resampling along one axis.
fn bilinear_taps(out: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of an interleaved plane with `channels` values per pixel.
pub fn resize_interleaved(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    check_target(out_h, out_w)?;
    if data.len() != height * width * channels {
        return Err(Error::DimensionMismatch(format!(
            "plane of {height}x{width}x{channels} needs {} values, got {}",
            height * width * channels,
            data.len()
        )));
    }
    if (out_h, out_w) == (height, width) {
        return Ok(data.to_vec());
    }
    let ys = bilinear_taps(out_h, height);
    let xs = bilinear_taps(out_w, width);
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    let at = |y: usize, x: usize, c: usize| data[(y * width + x) * channels + c];
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with pixel centres at `(i + 0.5) / n`.
pub fn resize_image(img: &Image, h: usize, w: usize) -> Result<Image> {
    let data = resize_interleaved(&img.data, img.height, img.width, 3, h, w)?;
    Image::new(h, w, img.domain, data)
}

/// Nearest-neighbour resize with pixel centres at `(i + 0.5) / n`.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    check_target(h, w)?;
    let near = |i: usize, out: usize, src: usize| {
        (((i as f64 + 0.5) * src as f64 / out as f64).floor() as usize).min(src - 1)
    };
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        mask.get(near(y, h, mask.height), near(x, w, mask.width))
    }))
}

/// Band radius used for shadow-strength estimation: `round(5 * min(H, W) / 256)`, at least 1.
pub fn default_band_radius(height: usize, width: usize) -> usize {
    ((5.0 * height.min(width) as f64 / 256.0).round() as usize).max(1)
}

fn check_radius(radius: usize) -> Result<()> {
    if radius == 0 {
        return Err(Error::InvalidArgument(
            "structuring element radius must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Number of true pixels in every `(2r+1)^2` window, with out-of-image
/// positions counted as false.
fn window_counts(mask: &BinaryMask, radius: usize) -> Vec<usize> {
    let (h, w) = mask.dims();
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += usize::from(mask.get(y, x));
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            out[y * w + x] = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
        }
    }
    out
}

/// Dilation by a square of side `2 * radius + 1`.
pub fn dilate(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    check_radius(radius)?;
    let counts = window_counts(mask, radius);
    Ok(BinaryMask {
        height: mask.height,
        width: mask.width,
        data: counts.into_iter().map(|c| c > 0).collect(),
    })
}

/// Erosion by a square of side `2 * radius + 1`; pixels whose window leaves
/// the image are eroded.
pub fn erode(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    check_radius(radius)?;
    let full = (2 * radius + 1) * (2 * radius + 1);
    let counts = window_counts(mask, radius);
    Ok(BinaryMask {
        height: mask.height,
        width: mask.width,
        data: counts.into_iter().map(|c| c == full).collect(),
    })
}

/// Thin rings just inside (`b_in`) and just outside (`b_out`) the mask edge.
pub fn boundary_bands(mask: &BinaryMask, radius: usize) -> Result<(BinaryMask, BinaryMask)> {
    check_radius(radius)?;
    if mask.is_empty() {
        return Err(Error::DegenerateBand("mask"));
    }
    let b_out = dilate(mask, radius)?.and_not(mask);
    let b_in = mask.and_not(&erode(mask, radius)?);
    if b_in.is_empty() {
        return Err(Error::DegenerateBand("b_in"));
    }
    if b_out.is_empty() {
        return Err(Error::DegenerateBand("b_out"));
    }
    Ok((b_in, b_out))
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// `f` holds squared distances, `None` meaning no site on that line yet.
fn edt_1d(f: &[Option<u64>], out: &mut [Option<u64>]) {
    let sites: Vec<(usize, u64)> = f
        .iter()
        .enumerate()
        .filter_map(|(q, v)| v.map(|v| (q, v)))
        .collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let key = |(q, v): (usize, u64)| v as f64 + (q * q) as f64;
    let mut hull: Vec<(usize, u64)> = Vec::with_capacity(sites.len());
    let mut starts: Vec<f64> = Vec::with_capacity(sites.len());
    for &site in &sites {
        loop {
            match hull.last() {
                None => {
                    hull.push(site);
                    starts.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&top) => {
                    let s = (key(site) - key(top)) / (2.0 * (site.0 as f64 - top.0 as f64));
                    if s <= *starts.last().unwrap() {
                        hull.pop();
                        starts.pop();
                    } else {
                        hull.push(site);
                        starts.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() && starts[k + 1] < q as f64 {
            k += 1;
        }
        // Neighbouring parabolas can tie at an integer q; take the exact minimum.
        let mut best = u64::MAX;
        for &(p, v) in &hull[k.saturating_sub(1)..(k + 2).min(hull.len())] {
            let d = (q as i64 - p as i64).unsigned_abs();
            best = best.min(d * d + v);
        }
        *o = Some(best);
    }
}

/// Exact Euclidean distance to the nearest boundary pixel (see [`BinaryMask::boundary`]).
pub fn distance_to_boundary(mask: &BinaryMask) -> Result<DistanceMap> {
    let boundary = mask.boundary();
    if boundary.is_empty() {
        return Err(Error::NoBoundary);
    }
    let (h, w) = mask.dims();
    let mut cols = vec![None; h * w];
    let mut line = vec![None; h];
    let mut line_out = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            line[y] = boundary.get(y, x).then_some(0);
        }
        edt_1d(&line, &mut line_out);
        for y in 0..h {
            cols[y * w + x] = line_out[y];
        }
    }
    let mut data = vec![0.0; h * w];
    let mut row_out = vec![None; w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], &mut row_out);
        for x in 0..w {
            let sq = row_out[x].expect("boundary is nonempty");
            data[y * w + x] = (sq as f64).sqrt();
        }
    }
    Ok(DistanceMap {
        height: h,
        width: w,
        data,
    })
}
