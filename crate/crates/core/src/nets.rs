//! Small convolutional networks with hand-written backpropagation, and Adam.
//!
//! Tensors are planar (`[channel][row][col]`). A [`LayerStack`] runs its layers
//! in order and caches every activation on `forward`, which `backward` needs.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::losses::InverseDepthGrid;
use crate::math;
use crate::se3::Twist;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn from_image(image: &ImageGrid) -> Self {
        let (h, w, c) = image.dims();
        let mut t = Self::zeros(c, h, w);
        for (i, px) in image.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                t.data[ch * h * w + i] = v;
            }
        }
        t
    }

    pub fn to_image(&self) -> Result<ImageGrid> {
        let (c, h, w) = self.shape();
        ImageGrid::from_fn(h, w, c, |r, col, ch| self.data[(ch * h + r) * w + col])
    }

    fn plane(&self, ch: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Square kernel, zero padding `kernel / 2`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Bilinear, half-pixel aligned, edge-clamped.
    Upsample { factor: usize },
    /// Adds a 1x1 projection of the output of layer `source`.
    SkipAdd { source: usize, in_ch: usize, out_ch: usize },
    FullyConnected { inputs: usize, outputs: usize },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::SkipAdd { in_ch, out_ch, .. } => out_ch * in_ch + out_ch,
            LayerSpec::FullyConnected { inputs, outputs } => outputs * inputs + outputs,
            LayerSpec::Relu | LayerSpec::Upsample { .. } | LayerSpec::GlobalAvgPool => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::SkipAdd { in_ch, .. } => in_ch,
            LayerSpec::FullyConnected { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn weight_count(&self) -> usize {
        self.param_count()
            - match *self {
                LayerSpec::Conv { out_ch, .. } | LayerSpec::SkipAdd { out_ch, .. } => out_ch,
                LayerSpec::FullyConnected { outputs, .. } => outputs,
                _ => 0,
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    /// Input followed by the output of every layer, from the last forward pass.
    cache: Option<Vec<Tensor>>,
}

impl LayerStack {
    /// Validates the wiring and draws He-scaled weights; biases start at zero.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            match *l {
                LayerSpec::SkipAdd { source, .. } if source >= i => {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "layer {i} skips from later layer {source}"
                    )));
                }
                LayerSpec::Conv { kernel, stride, .. } if kernel == 0 || stride == 0 => {
                    return Err(Error::InvalidParameter(alloc::format!("layer {i}: zero kernel or stride")));
                }
                LayerSpec::Upsample { factor: 0 } => {
                    return Err(Error::InvalidParameter(alloc::format!("layer {i}: zero upsampling factor")));
                }
                _ => {}
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        offsets.push(total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; total];
        for (i, l) in layers.iter().enumerate() {
            let std = math::sqrt(2.0 / l.fan_in().max(1) as f64);
            for p in &mut params[offsets[i]..offsets[i] + l.weight_count()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = z * std;
            }
        }
        Ok(Self {
            layers,
            offsets,
            params,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameters; invalidates the forward cache.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(alloc::format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        self.params = params;
        self.cache = None;
        Ok(())
    }

    /// Mutable view of one layer's parameters (weights then biases).
    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [f64] {
        self.cache = None;
        &mut self.params[self.offsets[layer]..self.offsets[layer + 1]]
    }

    pub fn layer_param_range(&self, layer: usize) -> core::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn forward(&mut self, input: Tensor) -> Result<Tensor> {
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for i in 0..self.layers.len() {
            let p = &self.params[self.offsets[i]..self.offsets[i + 1]];
            let x = &acts[i];
            let y = match self.layers[i] {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                } => conv_forward(x, p, in_ch, out_ch, kernel, stride, i)?,
                LayerSpec::Relu => Tensor {
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    ..x.clone()
                },
                LayerSpec::Upsample { factor } => upsample_forward(x, factor),
                LayerSpec::SkipAdd { source, in_ch, out_ch } => {
                    let s = &acts[source + 1];
                    if s.channels != in_ch || x.channels != out_ch || (s.height, s.width) != (x.height, x.width) {
                        return Err(Error::Shape(alloc::format!(
                            "layer {i}: skip from {:?} onto {:?}",
                            s.shape(),
                            x.shape()
                        )));
                    }
                    let mut y = conv_forward(s, p, in_ch, out_ch, 1, 1, i)?;
                    for (a, b) in y.data.iter_mut().zip(&x.data) {
                        *a += b;
                    }
                    y
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    if x.data.len() != inputs {
                        return Err(Error::Shape(alloc::format!(
                            "layer {i}: {} inputs for a {inputs}-input layer",
                            x.data.len()
                        )));
                    }
                    let mut y = Tensor::zeros(outputs, 1, 1);
                    for o in 0..outputs {
                        let row = &p[o * inputs..(o + 1) * inputs];
                        y.data[o] = p[outputs * inputs + o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>();
                    }
                    y
                }
                LayerSpec::GlobalAvgPool => {
                    let n = (x.height * x.width) as f64;
                    let data = (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect();
                    Tensor::new(x.channels, 1, 1, data)?
                }
            };
            acts.push(y);
        }
        let out = acts.last().expect("input is cached").clone();
        self.cache = Some(acts);
        Ok(out)
    }

    /// Reverse pass for the cached forward. Returns `(parameter gradients, input gradient)`.
    pub fn backward(&self, upstream: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let acts = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let n = self.layers.len();
        if upstream.shape() != acts[n].shape() {
            return Err(Error::Shape(alloc::format!(
                "upstream gradient {:?} for output {:?}",
                upstream.shape(),
                acts[n].shape()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        // pending[k] accumulates d loss / d acts[k] from skip connections
        let mut pending: Vec<Option<Tensor>> = vec![None; n + 1];
        let mut g = upstream.clone();
        for i in (0..n).rev() {
            if let Some(extra) = pending[i + 1].take() {
                for (a, b) in g.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            let x = &acts[i];
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            let p = &self.params[lo..hi];
            let gp = &mut grads[lo..hi];
            g = match self.layers[i] {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                } => conv_backward(x, p, gp, &g, in_ch, out_ch, kernel, stride),
                LayerSpec::Relu => Tensor {
                    data: x.data.iter().zip(&g.data).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
                    ..g
                },
                LayerSpec::Upsample { factor } => upsample_backward(x.shape(), &g, factor),
                LayerSpec::SkipAdd { source, in_ch, out_ch } => {
                    let s = &acts[source + 1];
                    let gs = conv_backward(s, p, gp, &g, in_ch, out_ch, 1, 1);
                    match &mut pending[source + 1] {
                        Some(t) => t.data.iter_mut().zip(&gs.data).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gs),
                    }
                    g
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let mut gx = Tensor::zeros(x.channels, x.height, x.width);
                    for o in 0..outputs {
                        let go = g.data[o];
                        gp[outputs * inputs + o] += go;
                        for j in 0..inputs {
                            gp[o * inputs + j] += go * x.data[j];
                            gx.data[j] += go * p[o * inputs + j];
                        }
                    }
                    gx
                }
                LayerSpec::GlobalAvgPool => {
                    let m = x.height * x.width;
                    let mut gx = Tensor::zeros(x.channels, x.height, x.width);
                    for c in 0..x.channels {
                        let v = g.data[c] / m as f64;
                        gx.data[c * m..(c + 1) * m].iter_mut().for_each(|a| *a = v);
                    }
                    gx
                }
            };
        }
        Ok((grads, g))
    }
}

fn conv_out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

fn conv_forward(
    x: &Tensor,
    p: &[f64],
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    layer: usize,
) -> Result<Tensor> {
    if x.channels != in_ch {
        return Err(Error::Shape(alloc::format!(
            "layer {layer}: {} input channels for a {in_ch}-channel convolution",
            x.channels
        )));
    }
    if x.height + 2 * (kernel / 2) < kernel || x.width + 2 * (kernel / 2) < kernel {
        return Err(Error::Shape(alloc::format!("layer {layer}: input smaller than kernel")));
    }
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (conv_out_size(h, kernel, stride), conv_out_size(w, kernel, stride));
    let pad = (kernel / 2) as isize;
    let bias = &p[out_ch * in_ch * kernel * kernel..];
    let mut y = Tensor::zeros(out_ch, oh, ow);
    for oc in 0..out_ch {
        let out = &mut y.data[oc * oh * ow..(oc + 1) * oh * ow];
        out.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_ch {
            let plane = x.plane(ic);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wgt = p[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *o += wgt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    p: &[f64],
    gp: &mut [f64],
    g: &Tensor,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Tensor {
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (g.height, g.width);
    let pad = (kernel / 2) as isize;
    let nw = out_ch * in_ch * kernel * kernel;
    let mut gx = Tensor::zeros(in_ch, h, w);
    for oc in 0..out_ch {
        let go = &g.data[oc * oh * ow..(oc + 1) * oh * ow];
        gp[nw + oc] += go.iter().sum::<f64>();
        for ic in 0..in_ch {
            let plane = x.plane(ic);
            let gplane = &mut gx.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wi = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                    let wgt = p[wi];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                let d = go[oy * ow + ox];
                                acc += d * plane[base + ix as usize];
                                gplane[base + ix as usize] += d * wgt;
                            }
                        }
                    }
                    gp[wi] += acc;
                }
            }
        }
    }
    gx
}

/// Source taps `(i0, i1, weight of i1)` for half-pixel bilinear upsampling along one axis.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (math::floor(s) as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.shape();
    let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.plane(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                y.data[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

fn upsample_backward(shape: (usize, usize, usize), g: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = shape;
    let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = &mut gx.data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let d = g.data[(ch * oh + oy) * ow + ox];
                dst[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += d * (1.0 - fy) * fx;
                dst[y1 * w + x0] += d * fy * (1.0 - fx);
                dst[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    gx
}

/// Total downsampling factor of the depth network.
pub const DEPTH_NET_STRIDE: usize = 16;
/// Initial inverse depth the depth network's decoder bias starts from (1/m).
pub const DEPTH_NET_INIT_INV_DEPTH: f64 = 0.1;
const HEAD_SCALE: f64 = 0.01;

fn conv3(in_ch: usize, out_ch: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 2,
    }
}

fn encoder(in_ch: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (a, b) in [(in_ch, 16), (16, 32), (32, 64), (64, 64)] {
        layers.push(conv3(a, b));
        layers.push(LayerSpec::Relu);
    }
    layers
}

/// Four stride-2 encoder convolutions, a 1x1 head, and two x4 upsamplings
/// with a skip from the stride-4 stage; ReLU output.
pub fn depth_net(seed: u64) -> Result<LayerStack> {
    let mut layers = encoder(3);
    let head = layers.len();
    layers.push(LayerSpec::Conv {
        in_ch: 64,
        out_ch: 1,
        kernel: 1,
        stride: 1,
    });
    layers.push(LayerSpec::Upsample { factor: 4 });
    let skip = layers.len();
    // layer 3 is the ReLU after the second (stride-4) convolution
    layers.push(LayerSpec::SkipAdd {
        source: 3,
        in_ch: 32,
        out_ch: 1,
    });
    layers.push(LayerSpec::Upsample { factor: 4 });
    layers.push(LayerSpec::Relu);
    let mut net = LayerStack::new(layers, seed)?;
    for layer in [head, skip] {
        let p = net.layer_params_mut(layer);
        let n = p.len();
        p[..n - 1].iter_mut().for_each(|v| *v *= HEAD_SCALE);
    }
    let p = net.layer_params_mut(head);
    let n = p.len();
    p[n - 1] = DEPTH_NET_INIT_INV_DEPTH;
    Ok(net)
}

/// Four stride-2 convolutions, global average pooling and two fully
/// connected layers producing a twist.
pub fn pose_net(seed: u64) -> Result<LayerStack> {
    let mut layers = encoder(6);
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::FullyConnected { inputs: 64, outputs: 32 });
    layers.push(LayerSpec::Relu);
    let last = layers.len();
    layers.push(LayerSpec::FullyConnected { inputs: 32, outputs: 6 });
    let mut net = LayerStack::new(layers, seed)?;
    net.layer_params_mut(last).iter_mut().for_each(|v| *v *= HEAD_SCALE);
    Ok(net)
}

/// Non-negative inverse depth at the input resolution.
pub fn depth_forward(net: &mut LayerStack, image: &ImageGrid) -> Result<InverseDepthGrid> {
    let (h, w, c) = image.dims();
    if h % DEPTH_NET_STRIDE != 0 || w % DEPTH_NET_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(alloc::format!(
            "image {h}x{w} is not a multiple of the network stride {DEPTH_NET_STRIDE}"
        )));
    }
    if c != 3 {
        return Err(Error::DimensionMismatch {
            expected: (h, w, 3),
            found: image.dims(),
        });
    }
    let out = net.forward(Tensor::from_image(image))?;
    if out.shape() != (1, h, w) {
        return Err(Error::Shape(alloc::format!("depth network produced {:?}", out.shape())));
    }
    InverseDepthGrid::new(ImageGrid::new(h, w, 1, out.data)?)
}

/// Twist `T_{ref->live}` from the channel-wise concatenation `[ref, live]`.
pub fn pose_forward(net: &mut LayerStack, reference: &ImageGrid, live: &ImageGrid) -> Result<Twist> {
    reference.ensure_same_dims(live)?;
    let mut input = Tensor::from_image(reference);
    let second = Tensor::from_image(live);
    input.channels += second.channels;
    input.data.extend_from_slice(&second.data);
    let out = net.forward(input)?;
    if out.data.len() != 6 {
        return Err(Error::Shape(alloc::format!("pose network produced {} values", out.data.len())));
    }
    Twist::from_array(out.data.try_into().expect("six outputs"))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: usize, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || self.v.len() != self.m.len() {
            return Err(Error::Shape(alloc::format!(
                "adam state for {} parameters got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - math::powf(self.beta1, t);
        let c2 = 1.0 - math::powf(self.beta2, t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}
