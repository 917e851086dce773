//! Encoder-decoder network with skip connections.
//!
//! Encoder level `l` halves the resolution with a stride-2 3x3 convolution
//! followed by normalization and leaky-ReLU. Decoder level `l` upsamples
//! (nearest) and applies the same block, then concatenates the encoder
//! output of level `l - 1`. The outermost level upsamples, concatenates the
//! network input and maps to the output channels with a plain convolution.
//!
//! Channel widths are `base * 2^(l-1)`, capped at `8 * base`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ops::{self, Conv, Dims, NormCache, BN_MOMENTUM};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub norm: Norm,
    pub output_activation: OutputActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    /// RGB + mask in, RGB residual out.
    Attenuator,
    /// RGB in, shadow probability out.
    Detector,
    Other,
}

impl UNetConfig {
    /// Desk-scale attenuator: 4 -> 3 channels, identity head.
    pub fn attenuator() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 16,
            in_channels: 4,
            out_channels: 3,
            leaky_slope: 0.2,
            norm: Norm::Batch,
            output_activation: OutputActivation::Identity,
        }
    }

    /// Desk-scale detector: 3 -> 1 channels, sigmoid head.
    pub fn detector() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 16,
            in_channels: 3,
            out_channels: 1,
            leaky_slope: 0.2,
            norm: Norm::Batch,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    /// Seven skip levels at 64 base channels, for 256x256 inputs.
    pub fn full_scale_detector() -> Self {
        UNetConfig {
            depth: 7,
            base_channels: 64,
            ..Self::detector()
        }
    }

    pub fn full_scale_attenuator() -> Self {
        UNetConfig {
            depth: 7,
            base_channels: 64,
            ..Self::attenuator()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "depth and channel counts must be positive: {self:?}"
            )));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn role(&self) -> NetRole {
        match (self.in_channels, self.out_channels, self.output_activation) {
            (4, 3, OutputActivation::Identity) => NetRole::Attenuator,
            (3, 1, OutputActivation::Sigmoid) => NetRole::Detector,
            _ => NetRole::Other,
        }
    }

    /// First 8 bytes (little-endian) of SHA-256 over the config's JSON form.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1).min(3)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    /// Indices into the buffer list.
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    conv: Conv,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvIdx,
    norm: Option<NormIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    /// Level 1 first.
    enc: Vec<Block>,
    /// In application order: level `depth` first, level 2 last.
    dec: Vec<Block>,
    out: ConvIdx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Trainable tensors plus running normalization statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
    norm: Norm,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, fill: f64) -> usize {
        let len = shape.iter().product();
        self.params.push(Param {
            name,
            shape,
            data: vec![T::lit(fill); len],
        });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, conv: Conv) -> ConvIdx {
        let k = conv.kernel;
        let weight = self.push(format!("{prefix}.conv.weight"), vec![conv.cout, conv.cin, k, k], 0.0);
        let bias = self.push(format!("{prefix}.conv.bias"), vec![conv.cout], 0.0);
        ConvIdx { conv, weight, bias }
    }

    fn block(&mut self, prefix: &str, conv: Conv) -> Block {
        let conv = self.conv(prefix, conv);
        let norm = (self.norm == Norm::Batch).then(|| {
            let c = conv.conv.cout;
            let gamma = self.push(format!("{prefix}.norm.weight"), vec![c], 1.0);
            let beta = self.push(format!("{prefix}.norm.bias"), vec![c], 0.0);
            self.buffers.push(Param {
                name: format!("{prefix}.norm.running_mean"),
                shape: vec![c],
                data: vec![T::zero(); c],
            });
            self.buffers.push(Param {
                name: format!("{prefix}.norm.running_var"),
                shape: vec![c],
                data: vec![T::one(); c],
            });
            let var = self.buffers.len() - 1;
            NormIdx {
                gamma,
                beta,
                mean: var - 1,
                var,
            }
        });
        Block { conv, norm }
    }
}

fn conv3(cin: usize, cout: usize, stride: usize) -> Conv {
    Conv {
        cin,
        cout,
        kernel: 3,
        stride,
        pad: 1,
    }
}

fn build<T: Real>(config: &UNetConfig) -> (Layout, Vec<Param<T>>, Vec<Param<T>>) {
    let mut b = Builder {
        params: Vec::new(),
        buffers: Vec::new(),
        norm: config.norm,
    };
    let d = config.depth;
    let enc = (1..=d)
        .map(|l| {
            let cin = if l == 1 { config.in_channels } else { config.channels(l - 1) };
            b.block(&format!("enc{l}"), conv3(cin, config.channels(l), 2))
        })
        .collect();
    let dec = (2..=d)
        .rev()
        .map(|l| {
            let cin = if l == d { config.channels(d) } else { 2 * config.channels(l) };
            b.block(&format!("dec{l}"), conv3(cin, config.channels(l - 1), 1))
        })
        .collect();
    let top = if d == 1 { config.channels(1) } else { 2 * config.channels(1) };
    let out = b.conv("out", conv3(top + config.in_channels, config.out_channels, 1));
    (Layout { enc, dec, out }, b.params, b.buffers)
}

impl<T: Real> ModelParams<T> {
    /// Zero-valued parameters with the layout implied by `config`.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let (_, params, buffers) = build::<T>(config);
        Ok(ModelParams {
            config: config.clone(),
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |ps: &[Param<T>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect()
        };
        ModelParams {
            config: self.config.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, saved: &Saved<T>) {
        let layout = build::<T>(&self.config).0;
        let blocks = layout.enc.iter().zip(&saved.enc).chain(layout.dec.iter().zip(&saved.dec));
        for (block, cache) in blocks {
            let (Some(idx), Some(nc)) = (block.norm, cache.norm.as_ref()) else {
                continue;
            };
            let m = cache.out_dims.plane() as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let keep = T::lit(1.0 - BN_MOMENTUM);
            let mom = T::lit(BN_MOMENTUM);
            for c in 0..nc.mean.len() {
                let rm = &mut self.buffers[idx.mean].data[c];
                *rm = keep * *rm + mom * T::lit(nc.mean[c]);
                let rv = &mut self.buffers[idx.var].data[c];
                *rv = keep * *rv + mom * T::lit(nc.var[c] * unbias);
            }
        }
    }
}

/// Conv kernels ~ N(0, 0.02), biases 0, norm scale 1 and shift 0.
pub fn init_params<T: Real>(config: &UNetConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut p = ModelParams::<T>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for param in p.params.iter_mut().filter(|p| p.name.ends_with("conv.weight")) {
        for v in param.data.iter_mut() {
            *v = T::lit(normal.sample(&mut rng));
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; keeps what backward needs.
    Train,
    /// Running statistics; nothing is kept.
    Infer,
}

struct BlockCache<T> {
    in_dims: Dims,
    saved: Vec<T>,
    norm: Option<NormCache<T>>,
    out: Vec<T>,
    out_dims: Dims,
}

/// Intermediate values of a train-mode forward pass.
pub struct Saved<T> {
    fingerprint: u64,
    input_dims: Dims,
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    /// Shape of the tensor entering each decoder level, then the output level.
    pre_up_dims: Vec<Dims>,
    out_saved: Vec<T>,
    out_in_dims: Dims,
    output: Vec<T>,
    output_dims: Dims,
}

pub struct Forward<T> {
    pub output: Tensor<T>,
    /// Present in [`Mode::Train`].
    pub saved: Option<Saved<T>>,
}

pub struct Gradients<T> {
    /// Aligned with [`ModelParams::params`].
    pub params: Vec<Vec<T>>,
    pub input: Option<Tensor<T>>,
}

fn block_forward<T: Real>(
    p: &ModelParams<T>,
    block: &Block,
    x: &[T],
    d: Dims,
    mode: Mode,
) -> (Vec<T>, Dims, Option<BlockCache<T>>) {
    let c = &block.conv;
    let train = mode == Mode::Train;
    let conv = ops::conv_forward(x, d, &c.conv, &p.params[c.weight].data, &p.params[c.bias].data, train);
    let od = conv.dims;
    let (mut y, norm) = match block.norm {
        Some(n) if train => {
            let (y, cache) = ops::batch_norm_train(&conv.y, od, &p.params[n.gamma].data, &p.params[n.beta].data);
            (y, Some(cache))
        }
        Some(n) => (
            ops::batch_norm_infer(
                &conv.y,
                od,
                &p.params[n.gamma].data,
                &p.params[n.beta].data,
                &p.buffers[n.mean].data,
                &p.buffers[n.var].data,
            ),
            None,
        ),
        None => (conv.y, None),
    };
    ops::leaky_relu(&mut y, T::lit(p.config.leaky_slope));
    let cache = train.then(|| BlockCache {
        in_dims: d,
        saved: conv.saved.expect("train mode keeps conv state"),
        norm,
        out: y.clone(),
        out_dims: od,
    });
    (y, od, cache)
}

fn block_backward<T: Real>(
    p: &ModelParams<T>,
    block: &Block,
    cache: &BlockCache<T>,
    mut g: Vec<T>,
    grads: &mut [Vec<T>],
    need_input: bool,
) -> Option<Vec<T>> {
    ops::leaky_relu_backward(&mut g, &cache.out, T::lit(p.config.leaky_slope));
    if let (Some(n), Some(nc)) = (block.norm, cache.norm.as_ref()) {
        let ng = ops::batch_norm_backward(&g, cache.out_dims, &p.params[n.gamma].data, nc);
        grads[n.gamma] = ng.gamma;
        grads[n.beta] = ng.beta;
        g = ng.input;
    }
    let c = &block.conv;
    let cg = ops::conv_backward(&g, &cache.saved, cache.in_dims, &c.conv, &p.params[c.weight].data, need_input);
    grads[c.weight] = cg.weight;
    grads[c.bias] = cg.bias;
    cg.input
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Runs the network on `[N, in_channels, H, W]` input.
pub fn unet_forward<T: Real>(p: &ModelParams<T>, input: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
    let cfg = &p.config;
    let [_, c, h, w] = input.shape();
    if c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    let m = cfg.size_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} must be a positive multiple of {m} for depth {}",
            cfg.depth
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    let layout = build::<T>(cfg).0;
    let in_dims = input.dims();
    let x_in = input.to_channel_major();

    let mut enc_out: Vec<(Vec<T>, Dims)> = Vec::with_capacity(cfg.depth);
    let mut enc_cache = Vec::new();
    let (mut x, mut xd) = (x_in.clone(), in_dims);
    for block in &layout.enc {
        let (y, yd, cache) = block_forward(p, block, &x, xd, mode);
        enc_cache.extend(cache);
        enc_out.push((y.clone(), yd));
        (x, xd) = (y, yd);
    }

    let mut dec_cache = Vec::new();
    let mut pre_up_dims = Vec::with_capacity(cfg.depth);
    for (i, block) in layout.dec.iter().enumerate() {
        let level = cfg.depth - i;
        pre_up_dims.push(xd);
        let up = ops::upsample2(&x, xd);
        let upd = Dims::new(xd.c, xd.n, xd.h * 2, xd.w * 2);
        let (y, yd, cache) = block_forward(p, block, &up, upd, mode);
        dec_cache.extend(cache);
        let (skip, sd) = &enc_out[level - 2];
        x = ops::concat(&y, skip);
        xd = yd.with_c(yd.c + sd.c);
    }

    pre_up_dims.push(xd);
    let up = ops::upsample2(&x, xd);
    let cat = ops::concat(&up, &x_in);
    let cat_dims = Dims::new(xd.c + in_dims.c, in_dims.n, in_dims.h, in_dims.w);
    let oc = &layout.out;
    let conv = ops::conv_forward(
        &cat,
        cat_dims,
        &oc.conv,
        &p.params[oc.weight].data,
        &p.params[oc.bias].data,
        mode == Mode::Train,
    );
    let mut y = conv.y;
    if cfg.output_activation == OutputActivation::Sigmoid {
        ops::sigmoid(&mut y);
    }
    let output = Tensor::from_channel_major(conv.dims, &y);
    if !output.is_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let saved = (mode == Mode::Train).then(|| Saved {
        fingerprint: cfg.fingerprint(),
        input_dims: in_dims,
        enc: enc_cache,
        dec: dec_cache,
        pre_up_dims,
        out_saved: conv.saved.expect("train mode keeps conv state"),
        out_in_dims: cat_dims,
        output: y,
        output_dims: conv.dims,
    });
    Ok(Forward { output, saved })
}

/// Reverse pass for a train-mode forward. `d_output` has the output's shape.
pub fn unet_backward<T: Real>(
    p: &ModelParams<T>,
    saved: Option<&Saved<T>>,
    d_output: &Tensor<T>,
    need_input: bool,
) -> Result<Gradients<T>> {
    let saved = saved.ok_or(Error::BackwardWithoutForward)?;
    let cfg = &p.config;
    if saved.fingerprint != cfg.fingerprint() {
        return Err(Error::Fingerprint {
            expected: cfg.fingerprint(),
            found: saved.fingerprint,
        });
    }
    if d_output.dims() != saved.output_dims {
        return Err(Error::Shape(format!(
            "output gradient shape {:?} does not match output",
            d_output.shape()
        )));
    }
    let layout = build::<T>(cfg).0;
    let mut grads: Vec<Vec<T>> = vec![Vec::new(); p.params.len()];

    let mut g = d_output.to_channel_major();
    if cfg.output_activation == OutputActivation::Sigmoid {
        ops::sigmoid_backward(&mut g, &saved.output);
    }
    let oc = &layout.out;
    let og = ops::conv_backward(&g, &saved.out_saved, saved.out_in_dims, &oc.conv, &p.params[oc.weight].data, true);
    grads[oc.weight] = og.weight;
    grads[oc.bias] = og.bias;
    let top_dims = *saved.pre_up_dims.last().expect("output level recorded");
    let (d_up, d_input_skip) = ops::split(&og.input.expect("requested"), top_dims.len() * 4);
    let mut d_x = ops::upsample2_backward(&d_up, top_dims);

    let mut d_enc: Vec<Vec<T>> = saved.enc.iter().map(|c| vec![T::zero(); c.out.len()]).collect();
    for (i, (block, cache)) in layout.dec.iter().zip(&saved.dec).enumerate().rev() {
        let level = cfg.depth - i;
        let (d_y, d_skip) = ops::split(&d_x, cache.out.len());
        add_into(&mut d_enc[level - 2], &d_skip);
        let d_up = block_backward(p, block, cache, d_y, &mut grads, true).expect("requested");
        d_x = ops::upsample2_backward(&d_up, saved.pre_up_dims[i]);
    }
    add_into(&mut d_enc[cfg.depth - 1], &d_x);

    let mut d_input = None;
    for l in (0..cfg.depth).rev() {
        let g = std::mem::take(&mut d_enc[l]);
        let want = l > 0 || need_input;
        let d_in = block_backward(p, &layout.enc[l], &saved.enc[l], g, &mut grads, want);
        match d_in {
            Some(d) if l > 0 => add_into(&mut d_enc[l - 1], &d),
            Some(d) => d_input = Some(d),
            None => {}
        }
    }
    let input = d_input.map(|mut d| {
        add_into(&mut d, &d_input_skip);
        Tensor::from_channel_major(saved.input_dims, &d)
    });
    Ok(Gradients {
        params: grads,
        input,
    })
}
