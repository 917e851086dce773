//! Network primitives with explicit backward passes.
//!
//! Activations are channel-major, `[C, N, H, W]`, so a whole batch goes
//! through one GEMM per convolution and batch-norm statistics are taken
//! over contiguous slices.

use super::real::{matmul, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, n: usize, h: usize, w: usize) -> Self {
        Dims { c, n, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.n * self.h * self.w
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }
}

/// Square convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }

    /// Stride-1 convolutions with few outputs skip the patch matrix: a GEMM
    /// with a handful of rows is bound by memory traffic on the patches.
    fn direct(&self) -> bool {
        self.stride == 1 && self.cout <= DIRECT_MAX_COUT
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Gathers input patches into a `[cin * k * k, n * ho * wo]` matrix.
fn im2col<T: Real>(x: &[T], d: Dims, conv: &Conv, ho: usize, wo: usize) -> Vec<T> {
    let cols = d.n * ho * wo;
    let mut col = vec![T::zero(); conv.patch_len() * cols];
    let k = conv.kernel;
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..d.n {
                    let src = &x[(ci * d.n + n) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..ho {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * d.w..][..d.w];
                        let dst = &mut dst_row[(n * ho + oy) * wo..][..wo];
                        if conv.stride == 1 {
                            // ix = ox + kx - pad, valid for ox in [lo, hi)
                            let shift = kx as isize - conv.pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((d.w as isize - shift).min(wo as isize)).max(lo as isize) as usize;
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        } else {
                            for (ox, v) in dst.iter_mut().enumerate() {
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if ix >= 0 && ix < d.w as isize {
                                    *v = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds patch gradients back onto the input layout.
fn col2im<T: Real>(col: &[T], d: Dims, conv: &Conv, ho: usize, wo: usize) -> Vec<T> {
    let cols = d.n * ho * wo;
    let mut x = vec![T::zero(); d.len()];
    let k = conv.kernel;
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..d.n {
                    let dst = &mut x[(ci * d.n + n) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..ho {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * d.w..][..d.w];
                        let src = &src_row[(n * ho + oy) * wo..][..wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

const DIRECT_MAX_COUT: usize = 4;

/// Valid output columns `[lo, hi)` for kernel column `kx` at stride 1, and
/// the input offset `ix - ox`.
fn shifted_span(conv: &Conv, kx: usize, w: usize, wo: usize) -> (usize, usize, isize) {
    let shift = kx as isize - conv.pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((w as isize - shift).min(wo as isize)).max(lo as isize) as usize;
    (lo, hi, shift)
}

/// Stride-1 rows of input `ci`, sample `n` that feed output row `oy`: yields
/// `(ky, input row index)`.
fn tap_rows(conv: &Conv, oy: usize, h: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..conv.kernel).filter_map(move |ky| {
        let iy = (oy + ky) as isize - conv.pad as isize;
        (iy >= 0 && iy < h as isize).then_some((ky, iy as usize))
    })
}

fn direct_forward<T: Real>(x: &[T], d: Dims, conv: &Conv, weight: &[T], y: &mut [T], ho: usize, wo: usize) {
    let k = conv.kernel;
    for n in 0..d.n {
        for oy in 0..ho {
            for co in 0..conv.cout {
                let dst = &mut y[((co * d.n + n) * ho + oy) * wo..][..wo];
                for ci in 0..d.c {
                    let plane = &x[(ci * d.n + n) * d.h * d.w..][..d.h * d.w];
                    for (ky, iy) in tap_rows(conv, oy, d.h) {
                        let src = &plane[iy * d.w..][..d.w];
                        for kx in 0..k {
                            let wv = weight[((co * conv.cin + ci) * k + ky) * k + kx];
                            let (lo, hi, shift) = shifted_span(conv, kx, d.w, wo);
                            let s0 = (lo as isize + shift) as usize;
                            for (o, &v) in dst[lo..hi].iter_mut().zip(&src[s0..]) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Eight independent partial sums, so the reduction vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Weight and (optionally) input gradients of a direct convolution.
#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Real>(
    dy: &[T],
    x: &[T],
    d: Dims,
    conv: &Conv,
    weight: &[T],
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
    ho: usize,
    wo: usize,
) {
    let k = conv.kernel;
    for n in 0..d.n {
        for oy in 0..ho {
            for co in 0..conv.cout {
                let g = &dy[((co * d.n + n) * ho + oy) * wo..][..wo];
                for ci in 0..d.c {
                    let base = (ci * d.n + n) * d.h * d.w;
                    for (ky, iy) in tap_rows(conv, oy, d.h) {
                        let row = base + iy * d.w;
                        for kx in 0..k {
                            let wi = ((co * conv.cin + ci) * k + ky) * k + kx;
                            let (lo, hi, shift) = shifted_span(conv, kx, d.w, wo);
                            let s0 = row + (lo as isize + shift) as usize;
                            let gs = &g[lo..hi];
                            dw[wi] += dot(gs, &x[s0..s0 + gs.len()]);
                            if let Some(dx) = dx.as_deref_mut() {
                                let wv = weight[wi];
                                for (o, &a) in dx[s0..s0 + gs.len()].iter_mut().zip(gs) {
                                    *o += wv * a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvOut<T> {
    pub y: Vec<T>,
    pub dims: Dims,
    /// What the backward pass needs: the patch matrix, or for direct
    /// convolutions the input itself.
    pub saved: Option<Vec<T>>,
}

pub fn conv_forward<T: Real>(
    x: &[T],
    d: Dims,
    conv: &Conv,
    weight: &[T],
    bias: &[T],
    keep: bool,
) -> ConvOut<T> {
    assert_eq!(d.c, conv.cin, "conv input channels");
    assert_eq!(x.len(), d.len());
    let (ho, wo) = conv.out_size(d.h, d.w);
    let out = Dims::new(conv.cout, d.n, ho, wo);
    let plane = out.plane();
    let mut y = vec![T::zero(); out.len()];
    for (co, &b) in bias.iter().enumerate() {
        y[co * plane..(co + 1) * plane].fill(b);
    }
    let saved = if conv.direct() {
        direct_forward(x, d, conv, weight, &mut y, ho, wo);
        keep.then(|| x.to_vec())
    } else {
        let col = im2col(x, d, conv, ho, wo);
        matmul(conv.cout, conv.patch_len(), plane, weight, false, &col, false, T::one(), &mut y);
        keep.then_some(col)
    };
    ConvOut { y, dims: out, saved }
}

pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

/// `saved` is [`ConvOut::saved`] from the matching forward call.
pub fn conv_backward<T: Real>(
    dy: &[T],
    saved: &[T],
    in_dims: Dims,
    conv: &Conv,
    weight: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let (ho, wo) = conv.out_size(in_dims.h, in_dims.w);
    let plane = in_dims.n * ho * wo;
    assert_eq!(dy.len(), conv.cout * plane);
    let patch = conv.patch_len();
    let mut dw = vec![T::zero(); conv.weight_len()];
    let db = dy.chunks_exact(plane).map(|r| r.iter().copied().sum()).collect();
    let input = if conv.direct() {
        let mut dx = need_input.then(|| vec![T::zero(); in_dims.len()]);
        direct_backward(dy, saved, in_dims, conv, weight, &mut dw, dx.as_deref_mut(), ho, wo);
        dx
    } else {
        matmul(conv.cout, plane, patch, dy, false, saved, true, T::zero(), &mut dw);
        need_input.then(|| {
            let mut dcol = vec![T::zero(); patch * plane];
            matmul(patch, conv.cout, plane, weight, true, dy, false, T::zero(), &mut dcol);
            col2im(&dcol, in_dims, conv, ho, wo)
        })
    };
    ConvGrads {
        weight: dw,
        bias: db,
        input,
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
}

/// Batch normalization with batch statistics.
pub fn batch_norm_train<T: Real>(x: &[T], d: Dims, gamma: &[T], beta: &[T]) -> (Vec<T>, NormCache<T>) {
    let plane = d.plane();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(d.c);
    let mut vars = Vec::with_capacity(d.c);
    let mut inv_stds = Vec::with_capacity(d.c);
    for c in 0..d.c {
        let xs = &x[c * plane..(c + 1) * plane];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let var = xs
            .iter()
            .map(|v| {
                let t = v.as_f64() - mean;
                t * t
            })
            .sum::<f64>()
            / plane as f64;
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        let (g, b) = (gamma[c], beta[c]);
        let (m_t, s_t) = (T::lit(mean), T::lit(inv_std));
        for i in c * plane..(c + 1) * plane {
            let h = (x[i] - m_t) * s_t;
            xhat[i] = h;
            y[i] = g * h + b;
        }
        means.push(mean);
        vars.push(var);
        inv_stds.push(inv_std);
    }
    (
        y,
        NormCache {
            xhat,
            inv_std: inv_stds,
            mean: means,
            var: vars,
        },
    )
}

/// Batch normalization with frozen running statistics.
pub fn batch_norm_infer<T: Real>(
    x: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Vec<T> {
    let plane = d.plane();
    let mut y = vec![T::zero(); x.len()];
    for c in 0..d.c {
        let inv_std = T::one() / (running_var[c] + T::lit(BN_EPS)).sqrt();
        let scale = gamma[c] * inv_std;
        let shift = beta[c] - running_mean[c] * scale;
        for i in c * plane..(c + 1) * plane {
            y[i] = x[i] * scale + shift;
        }
    }
    y
}

pub struct NormGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub input: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(dy: &[T], d: Dims, gamma: &[T], cache: &NormCache<T>) -> NormGrads<T> {
    let plane = d.plane();
    let m = plane as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = Vec::with_capacity(d.c);
    let mut dbeta = Vec::with_capacity(d.c);
    for c in 0..d.c {
        let r = c * plane..(c + 1) * plane;
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in r.clone() {
            let g = dy[i].as_f64();
            sum_dy += g;
            sum_dy_xhat += g * cache.xhat[i].as_f64();
        }
        let k = T::lit(gamma[c].as_f64() * cache.inv_std[c] / m);
        let (a, b) = (T::lit(sum_dy), T::lit(sum_dy_xhat));
        let mt = T::lit(m);
        for i in r {
            dx[i] = k * (mt * dy[i] - a - cache.xhat[i] * b);
        }
        dgamma.push(b);
        dbeta.push(a);
    }
    NormGrads {
        gamma: dgamma,
        beta: dbeta,
        input: dx,
    }
}

pub fn leaky_relu<T: Real>(x: &mut [T], slope: T) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward through leaky-ReLU given its output (sign is preserved for slope > 0).
pub fn leaky_relu_backward<T: Real>(dy: &mut [T], y: &[T], slope: T) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g *= slope;
        }
    }
}

pub fn sigmoid<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward<T: Real>(dy: &mut [T], y: &[T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        *g = *g * v * (T::one() - v);
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &[T], d: Dims) -> Vec<T> {
    let (h2, w2) = (d.h * 2, d.w * 2);
    let mut y = vec![T::zero(); x.len() * 4];
    for p in 0..d.c * d.n {
        let src = &x[p * d.h * d.w..][..d.h * d.w];
        let dst = &mut y[p * h2 * w2..][..h2 * w2];
        for yy in 0..h2 {
            let s = &src[(yy / 2) * d.w..][..d.w];
            for (xx, v) in dst[yy * w2..(yy + 1) * w2].iter_mut().enumerate() {
                *v = s[xx / 2];
            }
        }
    }
    y
}

/// Backward of [`upsample2`]: sums each 2x2 block. `d` is the small (input) shape.
pub fn upsample2_backward<T: Real>(dy: &[T], d: Dims) -> Vec<T> {
    let (h2, w2) = (d.h * 2, d.w * 2);
    let mut dx = vec![T::zero(); d.len()];
    for p in 0..d.c * d.n {
        let src = &dy[p * h2 * w2..][..h2 * w2];
        let dst = &mut dx[p * d.h * d.w..][..d.h * d.w];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[(yy / 2) * d.w + xx / 2] += src[yy * w2 + xx];
            }
        }
    }
    dx
}

/// Channel concatenation; with channel-major storage this is buffer concatenation.
pub fn concat<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn split<T: Real>(g: &[T], first_len: usize) -> (Vec<T>, Vec<T>) {
    (g[..first_len].to_vec(), g[first_len..].to_vec())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks an analytic gradient of `L(x) = <proj, f(x)>` against central
    /// differences with step 1e-3. Returns the worst relative error.
    pub fn check_grad(
        x: &[f64],
        analytic: &[f64],
        mut loss: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let lp = loss(&xp);
            xp[i] = x[i] - h;
            let lm = loss(&xp);
            xp[i] = x[i];
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
        worst
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, h, cout) in [(1, 5, 3), (1, 5, 6), (2, 8, 3), (2, 7, 6)] {
            let conv = Conv { cin: 2, cout, kernel: 3, stride, pad: 1 };
            let d = Dims::new(2, 2, h, h + 1);
            let x = random(d.len(), &mut rng);
            let w = random(conv.weight_len(), &mut rng);
            let b = random(cout, &mut rng);
            let out = conv_forward(&x, d, &conv, &w, &b, false);
            let od = out.dims;
            for co in 0..cout {
                for n in 0..2 {
                    for oy in 0..od.h {
                        for ox in 0..od.w {
                            let mut s = b[co];
                            for ci in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                                            s += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                                * x[((ci * 2 + n) * d.h + iy as usize) * d.w + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = out.y[((co * 2 + n) * od.h + oy) * od.w + ox];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, cout) in [(1, 2), (1, 6), (2, 2), (2, 6)] {
            let conv = Conv { cin: 3, cout, kernel: 3, stride, pad: 1 };
            let d = Dims::new(3, 2, 8, 8);
            let x = random(d.len(), &mut rng);
            let w = random(conv.weight_len(), &mut rng);
            let b = random(cout, &mut rng);
            let fwd = conv_forward(&x, d, &conv, &w, &b, true);
            let proj = random(fwd.y.len(), &mut rng);
            let g = conv_backward(&proj, fwd.saved.as_ref().unwrap(), d, &conv, &w, true);
            let ex = check_grad(&x, g.input.as_ref().unwrap(), |xx| {
                dot(&proj, &conv_forward(xx, d, &conv, &w, &b, false).y)
            });
            let ew = check_grad(&w, &g.weight, |ww| dot(&proj, &conv_forward(&x, d, &conv, ww, &b, false).y));
            let eb = check_grad(&b, &g.bias, |bb| dot(&proj, &conv_forward(&x, d, &conv, &w, bb, false).y));
            assert!(ex < 1e-3 && ew < 1e-3 && eb < 1e-3, "{ex} {ew} {eb}");
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dims::new(3, 2, 8, 8);
        let x = random(d.len(), &mut rng);
        let gamma = random(3, &mut rng);
        let beta = random(3, &mut rng);
        let (y, cache) = batch_norm_train(&x, d, &gamma, &beta);
        let proj = random(y.len(), &mut rng);
        let g = batch_norm_backward(&proj, d, &gamma, &cache);
        let f = |xx: &[f64], gg: &[f64], bb: &[f64]| dot(&proj, &batch_norm_train(xx, d, gg, bb).0);
        assert!(check_grad(&x, &g.input, |v| f(v, &gamma, &beta)) < 1e-3);
        assert!(check_grad(&gamma, &g.gamma, |v| f(&x, v, &beta)) < 1e-3);
        assert!(check_grad(&beta, &g.beta, |v| f(&x, &gamma, v)) < 1e-3);
        // Normalized output has zero mean and unit (biased) variance per channel.
        let plane = d.plane();
        for c in 0..3 {
            let h = &cache.xhat[c * plane..(c + 1) * plane];
            let m: f64 = h.iter().sum::<f64>() / plane as f64;
            let v: f64 = h.iter().map(|t| t * t).sum::<f64>() / plane as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let d = Dims::new(1, 1, 2, 2);
        let y = batch_norm_infer(&[1.0, 3.0, 5.0, 7.0], d, &[2.0], &[0.5], &[3.0], &[4.0 - BN_EPS]);
        assert_eq!(y, vec![-1.5, 0.5, 2.5, 4.5]);
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Keep away from the kink at 0.
        let x: Vec<f64> = random(64, &mut rng)
            .into_iter()
            .map(|v| if v.abs() < 0.01 { 0.5 } else { v })
            .collect();
        let proj = random(64, &mut rng);
        let lrelu = |xx: &[f64]| {
            let mut y = xx.to_vec();
            leaky_relu(&mut y, 0.2);
            y
        };
        let y = lrelu(&x);
        let mut g = proj.clone();
        leaky_relu_backward(&mut g, &y, 0.2);
        assert!(check_grad(&x, &g, |v| dot(&proj, &lrelu(v))) < 1e-3);

        let sig = |xx: &[f64]| {
            let mut y = xx.to_vec();
            sigmoid(&mut y);
            y
        };
        let y = sig(&x);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut g = proj.clone();
        sigmoid_backward(&mut g, &y);
        assert!(check_grad(&x, &g, |v| dot(&proj, &sig(v))) < 1e-3);
    }

    #[test]
    fn upsample_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims::new(2, 2, 4, 4);
        let x = random(d.len(), &mut rng);
        let y = upsample2(&x, d);
        assert_eq!(y[0], x[0]);
        assert_eq!(y[9], x[0]); // (1,1) of the first 8x8 plane
        let proj = random(y.len(), &mut rng);
        let g = upsample2_backward(&proj, d);
        assert!(check_grad(&x, &g, |v| dot(&proj, &upsample2(v, d))) < 1e-3);

        let a = random(10, &mut rng);
        let b = random(6, &mut rng);
        let proj = random(16, &mut rng);
        let (ga, gb) = split(&proj, 10);
        assert!(check_grad(&a, &ga, |v| dot(&proj, &concat(v, &b))) < 1e-3);
        assert!(check_grad(&b, &gb, |v| dot(&proj, &concat(&a, v))) < 1e-3);
    }
}
