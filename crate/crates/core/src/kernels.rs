//! Forward and backward kernels on plain tensors. The tape in
//! [`crate::autograd`] records calls to these and replays the backward
//! halves in reverse order.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, "same" padding for an odd kernel.
    pub const fn same(kernel: usize, groups: usize) -> Self {
        Self::new(1, (kernel - 1) / 2, groups)
    }
}

/// Output spatial extent, or an error if it would be non-positive.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "convolution output extent non-positive: input {input}, kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Validates the operand shapes and returns the output shape.
pub fn conv2d_shape(x: Shape, w: Shape, bias: Option<Shape>, geo: ConvGeometry) -> Result<Shape> {
    let g = geo.groups;
    if g == 0 || !x.channels.is_multiple_of(g) || !w.batch.is_multiple_of(g) {
        return Err(Error::Shape(format!(
            "groups {g} must divide input channels {} and output channels {}",
            x.channels, w.batch
        )));
    }
    if w.channels != x.channels / g {
        return Err(Error::Shape(format!(
            "weight {w} expects {} input channels per group, input {x} has {}",
            w.channels,
            x.channels / g
        )));
    }
    if let Some(b) = bias {
        if b != Shape::vector(w.batch) {
            return Err(Error::Shape(format!(
                "bias {b} does not match {} output channels",
                w.batch
            )));
        }
    }
    let ho = conv_out_extent(x.height, w.height, geo.stride, geo.padding)?;
    let wo = conv_out_extent(x.width, w.width, geo.stride, geo.padding)?;
    Ok(Shape::new(x.batch, w.batch, ho, wo))
}

/// Output positions `o` in `[lo, hi)` whose input tap `o*stride + k - pad`
/// falls inside `[0, input)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    if input + pad <= k {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - k) / stride + 1).min(output);
    (lo.min(hi), hi)
}

/// Cross-correlation per group (no kernel flip), zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = conv2d_shape(xs, ws, bias.map(|b| b.shape()), geo)?;
    let mut out = Tensor::zeros(os);
    let (cin_g, cout_g) = (xs.channels / geo.groups, os.channels / geo.groups);
    let (s, p) = (geo.stride, geo.padding);
    let (kh_n, kw_n) = (ws.height, ws.width);
    let wd = w.data();
    let od = out.data_mut();
    for b in 0..xs.batch {
        for co in 0..os.channels {
            let g = co / cout_g;
            let obase = os.index(b, co, 0, 0);
            let oplane = &mut od[obase..obase + os.plane()];
            if let Some(bias) = bias {
                oplane.fill(bias.data()[co]);
            }
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xplane = x.plane(b, ci);
                for kh in 0..kh_n {
                    let (oh_lo, oh_hi) = valid_range(kh, p, s, xs.height, os.height);
                    for kw in 0..kw_n {
                        let wv = wd[ws.index(co, cil, kh, kw)];
                        let (ow_lo, ow_hi) = valid_range(kw, p, s, xs.width, os.width);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let orow = &mut oplane[oh * os.width..(oh + 1) * os.width];
                            let xrow = &xplane[ih * xs.width..(ih + 1) * xs.width];
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * xrow[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    geo: ConvGeometry,
) -> ConvGrads<T> {
    let (xs, ws, os) = (x.shape(), w.shape(), grad_out.shape());
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::vector(os.channels));
    let (cin_g, cout_g) = (xs.channels / geo.groups, os.channels / geo.groups);
    let (s, p) = (geo.stride, geo.padding);
    let wd = w.data();
    for b in 0..xs.batch {
        for co in 0..os.channels {
            let g = co / cout_g;
            let gplane = grad_out.plane(b, co);
            gb.data_mut()[co] += gplane.iter().copied().sum::<T>();
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xbase = xs.index(b, ci, 0, 0);
                for kh in 0..ws.height {
                    let (oh_lo, oh_hi) = valid_range(kh, p, s, xs.height, os.height);
                    for kw in 0..ws.width {
                        let widx = ws.index(co, cil, kh, kw);
                        let wv = wd[widx];
                        let (ow_lo, ow_hi) = valid_range(kw, p, s, xs.width, os.width);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let grow = &gplane[oh * os.width..(oh + 1) * os.width];
                            let xrow = xbase + ih * xs.width;
                            for ow in ow_lo..ow_hi {
                                let xi = xrow + ow * s + kw - p;
                                acc += grow[ow] * x.data()[xi];
                                gx.data_mut()[xi] += wv * grow[ow];
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Reference convolution over an explicitly zero-padded copy of the input,
/// evaluating every kernel tap. Returns the output and the number of
/// multiplies it performed. Used to audit MAC accounting and to cross-check
/// [`conv2d`].
pub fn conv2d_counting<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<(Tensor<T>, u64)> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = conv2d_shape(xs, ws, bias.map(|b| b.shape()), geo)?;
    let p = geo.padding;
    let padded = Shape::new(xs.batch, xs.channels, xs.height + 2 * p, xs.width + 2 * p);
    let mut xp = Tensor::zeros(padded);
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for h in 0..xs.height {
                for wi in 0..xs.width {
                    xp.set(b, c, h + p, wi + p, x.get(b, c, h, wi));
                }
            }
        }
    }
    let (cin_g, cout_g) = (xs.channels / geo.groups, os.channels / geo.groups);
    let mut out = Tensor::zeros(os);
    let mut multiplies = 0u64;
    for b in 0..os.batch {
        for co in 0..os.channels {
            let g = co / cout_g;
            for oh in 0..os.height {
                for ow in 0..os.width {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                    for cil in 0..cin_g {
                        for kh in 0..ws.height {
                            for kw in 0..ws.width {
                                let xv = xp.get(
                                    b,
                                    g * cin_g + cil,
                                    oh * geo.stride + kh,
                                    ow * geo.stride + kw,
                                );
                                acc += w.get(co, cil, kh, kw) * xv;
                                multiplies += 1;
                            }
                        }
                    }
                    out.set(b, co, oh, ow, acc);
                }
            }
        }
    }
    Ok((out, multiplies))
}

/// Standard normal CDF via `erf`.
#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn normal_pdf<T: Real>(x: T) -> T {
    T::from_f64(0.398_942_280_401_432_7) * (-(x * x) * T::from_f64(0.5)).exp()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * normal_cdf(v))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gi, &v) in g.data_mut().iter_mut().zip(x.data()) {
        *gi *= normal_cdf(v) + v * normal_pdf(v);
    }
    g
}

/// Values saved by the channel LayerNorm forward pass for its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input, before the affine map.
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per `(b, h, w)` position.
    pub inv_std: Vec<T>,
}

/// Normalizes the channel vector at each `(b, h, w)` (biased variance),
/// then applies per-channel `gamma`, `beta`.
pub fn layer_norm_channels<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let s = x.shape();
    gamma.expect_shape(Shape::vector(s.channels))?;
    beta.expect_shape(Shape::vector(s.channels))?;
    let (c, plane) = (s.channels, s.plane());
    let n = T::from_usize(c);
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.batch * plane];
    let xd = x.data();
    for b in 0..s.batch {
        let base = b * c * plane;
        for pos in 0..plane {
            let at = |ch: usize| base + ch * plane + pos;
            let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() / n;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[at(ch)] - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let r = T::one() / (var + eps).sqrt();
            inv_std[b * plane + pos] = r;
            for ch in 0..c {
                let xh = (xd[at(ch)] - mean) * r;
                normalized.data_mut()[at(ch)] = xh;
                out.data_mut()[at(ch)] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

pub struct LayerNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> LayerNormGrads<T> {
    let s = grad_out.shape();
    let (c, plane) = (s.channels, s.plane());
    let n = T::from_usize(c);
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(Shape::vector(c));
    let mut gbeta = Tensor::zeros(Shape::vector(c));
    let (xh, go) = (cache.normalized.data(), grad_out.data());
    for b in 0..s.batch {
        let base = b * c * plane;
        for pos in 0..plane {
            let at = |ch: usize| base + ch * plane + pos;
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ch in 0..c {
                let i = at(ch);
                let gn = go[i] * gamma.data()[ch];
                mean_g += gn;
                mean_gx += gn * xh[i];
                gg.data_mut()[ch] += go[i] * xh[i];
                gbeta.data_mut()[ch] += go[i];
            }
            mean_g = mean_g / n;
            mean_gx = mean_gx / n;
            let r = cache.inv_std[b * plane + pos];
            for ch in 0..c {
                let i = at(ch);
                let gn = go[i] * gamma.data()[ch];
                gx.data_mut()[i] = r * (gn - mean_g - xh[i] * mean_gx);
            }
        }
    }
    LayerNormGrads {
        input: gx,
        gamma: gg,
        beta: gbeta,
    }
}

/// Elementwise binary map over equal shapes.
pub fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    a.expect_shape(b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Multiply each channel of `x` by the matching entry of `s` (shape `(1, C, 1, 1)`).
pub fn scale_channels<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    s.expect_shape(Shape::vector(xs.channels))?;
    let mut out = x.clone();
    let plane = xs.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let sv = s.data()[i % xs.channels];
        chunk.iter_mut().for_each(|v| *v *= sv);
    }
    Ok(out)
}

/// Returns (grad wrt x, grad wrt s).
pub fn scale_channels_backward<T: Real>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let plane = xs.plane();
    let mut gx = grad_out.clone();
    let mut gs = Tensor::zeros(s.shape());
    for (i, (gchunk, xchunk)) in gx
        .data_mut()
        .chunks_mut(plane)
        .zip(x.data().chunks(plane))
        .enumerate()
    {
        let c = i % xs.channels;
        let sv = s.data()[c];
        let mut acc = T::zero();
        for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
            acc += *g * xv;
            *g *= sv;
        }
        gs.data_mut()[c] += acc;
    }
    (gx, gs)
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane());
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(Shape::new(s.batch, s.channels, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_usize(input.plane());
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, input.plane()))
        .collect();
    Tensor::new(input, data).expect("pool grad shape")
}
