//! Fixed dense feature extractors for the feature reconstruction loss.
//!
//! All filtering replicates the border pixels, so outputs keep the input
//! height and width. Non-identity extractors standardize every output channel
//! to zero mean and unit standard deviation over the image; channels with zero
//! variance are left as they are.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::math;

/// Output channels of the random convolution extractor.
pub const RANDOM_CONV_CHANNELS: usize = 16;
const RANDOM_CONV_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Identity,
    GradientDescriptor,
    RandomConv,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Identity => "identity",
            FeatureKind::GradientDescriptor => "gradient_descriptor",
            FeatureKind::RandomConv => "random_conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(FeatureKind::Identity),
            "gradient_descriptor" | "gradient-descriptor" => Some(FeatureKind::GradientDescriptor),
            "random_conv" | "random-conv" => Some(FeatureKind::RandomConv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    in_channels: usize,
    /// Random conv weights, laid out `[out][in][ky][kx]`.
    kernel: Vec<f64>,
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        Self {
            kind: FeatureKind::Identity,
            in_channels: 0,
            kernel: Vec::new(),
        }
    }

    pub fn gradient_descriptor() -> Self {
        Self {
            kind: FeatureKind::GradientDescriptor,
            in_channels: 0,
            kernel: Vec::new(),
        }
    }

    /// One 5x5 convolution with weights drawn from `N(0, 1) / sqrt(fan_in)`.
    pub fn random_conv(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::InvalidParameter("random_conv needs at least one input channel".into()));
        }
        let fan_in = in_channels * RANDOM_CONV_SIZE * RANDOM_CONV_SIZE;
        let scale = 1.0 / math::sqrt(fan_in as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = (0..RANDOM_CONV_CHANNELS * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            kind: FeatureKind::RandomConv,
            in_channels,
            kernel,
        })
    }

    /// Builds an extractor of `kind` for images with `in_channels` channels.
    pub fn from_kind(kind: FeatureKind, in_channels: usize, seed: u64) -> Result<Self> {
        match kind {
            FeatureKind::Identity => Ok(Self::identity()),
            FeatureKind::GradientDescriptor => Ok(Self::gradient_descriptor()),
            FeatureKind::RandomConv => Self::random_conv(in_channels, seed),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        match self.kind {
            FeatureKind::Identity => in_channels,
            FeatureKind::GradientDescriptor => 2 * in_channels * 9,
            FeatureKind::RandomConv => RANDOM_CONV_CHANNELS,
        }
    }

    pub fn extract(&self, image: &ImageGrid) -> Result<ImageGrid> {
        match self.kind {
            FeatureKind::Identity => Ok(image.clone()),
            FeatureKind::GradientDescriptor => standardize(gradient_descriptor(image)?),
            FeatureKind::RandomConv => {
                if image.channels() != self.in_channels {
                    return Err(Error::DimensionMismatch {
                        expected: (image.height(), image.width(), self.in_channels),
                        found: image.dims(),
                    });
                }
                standardize(self.random_conv_apply(image)?)
            }
        }
    }

    fn random_conv_apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let (h, w, c) = image.dims();
        let k = RANDOM_CONV_SIZE;
        let half = (k / 2) as isize;
        let mut out = vec![0.0; h * w * RANDOM_CONV_CHANNELS];
        for r in 0..h {
            for col in 0..w {
                let o = (r * w + col) * RANDOM_CONV_CHANNELS;
                for ky in 0..k {
                    let rr = clamp_index(r as isize + ky as isize - half, h);
                    for kx in 0..k {
                        let cc = clamp_index(col as isize + kx as isize - half, w);
                        let px = image.pixel(rr, cc);
                        for (ci, &v) in px.iter().enumerate() {
                            for oc in 0..RANDOM_CONV_CHANNELS {
                                out[o + oc] += self.kernel[((oc * c + ci) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                }
            }
        }
        ImageGrid::new(h, w, RANDOM_CONV_CHANNELS, out)
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Gaussian blur with sigma 1 and a 5-tap separable kernel.
fn gaussian_blur(image: &ImageGrid) -> Result<ImageGrid> {
    let taps: [f64; 5] = {
        let raw = [-2.0f64, -1.0, 0.0, 1.0, 2.0].map(|x| math::exp(-0.5 * x * x));
        let s: f64 = raw.iter().sum();
        raw.map(|v| v / s)
    };
    let (h, w, c) = image.dims();
    let mut tmp = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            for (t, &wt) in taps.iter().enumerate() {
                let cc = clamp_index(col as isize + t as isize - 2, w);
                for ch in 0..c {
                    tmp[(r * w + col) * c + ch] += wt * image.get(r, cc, ch);
                }
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for (t, &wt) in taps.iter().enumerate() {
            let rr = clamp_index(r as isize + t as isize - 2, h);
            for col in 0..w {
                for ch in 0..c {
                    out[(r * w + col) * c + ch] += wt * tmp[(rr * w + col) * c + ch];
                }
            }
        }
    }
    ImageGrid::new(h, w, c, out)
}

/// Blurred central-difference gradients stacked over the 3x3 neighbourhood.
///
/// Channel order: neighbour offset (row-major, -1..=1), then input channel,
/// then `(gx, gy)`.
fn gradient_descriptor(image: &ImageGrid) -> Result<ImageGrid> {
    let (h, w, c) = image.dims();
    let blurred = gaussian_blur(image)?;
    let mut grads = vec![0.0; h * w * c * 2];
    for r in 0..h {
        for col in 0..w {
            let (cl, cr) = (clamp_index(col as isize - 1, w), clamp_index(col as isize + 1, w));
            let (ru, rd) = (clamp_index(r as isize - 1, h), clamp_index(r as isize + 1, h));
            for ch in 0..c {
                let gx = 0.5 * (blurred.get(r, cr, ch) - blurred.get(r, cl, ch));
                let gy = 0.5 * (blurred.get(rd, col, ch) - blurred.get(ru, col, ch));
                grads[((r * w + col) * c + ch) * 2] = gx;
                grads[((r * w + col) * c + ch) * 2 + 1] = gy;
            }
        }
    }
    let per = 2 * c;
    let out_c = 9 * per;
    let mut out = vec![0.0; h * w * out_c];
    for r in 0..h {
        for col in 0..w {
            for (n, (dy, dx)) in (-1isize..=1).flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx))).enumerate() {
                let rr = clamp_index(r as isize + dy, h);
                let cc = clamp_index(col as isize + dx, w);
                let src = (rr * w + cc) * per;
                let dst = (r * w + col) * out_c + n * per;
                out[dst..dst + per].copy_from_slice(&grads[src..src + per]);
            }
        }
    }
    ImageGrid::new(h, w, out_c, out)
}

/// Per-channel zero-mean, unit-variance normalization over the whole grid.
pub fn standardize(grid: ImageGrid) -> Result<ImageGrid> {
    let (h, w, c) = grid.dims();
    let n = (h * w) as f64;
    let mut data = grid.into_data();
    for ch in 0..c {
        let mean = data.iter().skip(ch).step_by(c).sum::<f64>() / n;
        let var = data.iter().skip(ch).step_by(c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = math::sqrt(var);
        if !(std > 1e-12 * (1.0 + mean.abs())) {
            continue;
        }
        for v in data.iter_mut().skip(ch).step_by(c) {
            *v = (*v - mean) / std;
        }
    }
    ImageGrid::new(h, w, c, data)
}

/// L1 matching costs of one left pixel against right pixels along its row.
#[derive(Clone, Debug, PartialEq)]
pub struct CostProfile {
    /// Disparities actually evaluated; left `x` is matched with right `x - d`.
    pub disparities: Vec<i64>,
    pub costs: Vec<f64>,
    /// Set when part of the requested range fell outside the right image.
    pub truncated: bool,
}

impl CostProfile {
    /// `max - min` of the costs.
    pub fn flatness(&self) -> f64 {
        let max = self.costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.costs.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Disparity of the strict minimum, or `None` when the minimum is tied
    /// within `tol`.
    pub fn unique_argmin(&self, tol: f64) -> Option<i64> {
        let (best, &min) = self
            .costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let tied = self
            .costs
            .iter()
            .enumerate()
            .any(|(i, &c)| i != best && c - min <= tol);
        (!tied).then_some(self.disparities[best])
    }
}

/// Cost curve for left pixel `(row, pixel)` over `disparities`.
///
/// Each cost is the mean absolute feature difference over a
/// `(2 support_radius + 1)^2` window (clamped at the borders) and all channels.
/// Disparities that put the matched pixel outside the right image are dropped
/// and flagged.
pub fn matching_cost_profile(
    left: &ImageGrid,
    right: &ImageGrid,
    e: &FeatureExtractor,
    row: usize,
    pixel: usize,
    disparities: core::ops::RangeInclusive<i64>,
    support_radius: usize,
) -> Result<CostProfile> {
    left.ensure_same_dims(right)?;
    let fl = e.extract(left)?;
    let fr = e.extract(right)?;
    matching_cost_profile_features(&fl, &fr, row, pixel, disparities, support_radius)
}

/// [`matching_cost_profile`] on already extracted feature maps.
pub fn matching_cost_profile_features(
    fl: &ImageGrid,
    fr: &ImageGrid,
    row: usize,
    pixel: usize,
    disparities: core::ops::RangeInclusive<i64>,
    support_radius: usize,
) -> Result<CostProfile> {
    fl.ensure_same_dims(fr)?;
    let (h, w, c) = fl.dims();
    if row >= h || pixel >= w {
        return Err(Error::InvalidParameter(alloc::format!(
            "pixel ({row}, {pixel}) outside a {h}x{w} image"
        )));
    }
    let rad = support_radius as isize;
    let mut profile = CostProfile {
        disparities: Vec::new(),
        costs: Vec::new(),
        truncated: false,
    };
    for d in disparities {
        let xr = pixel as i64 - d;
        if xr < 0 || xr >= w as i64 {
            profile.truncated = true;
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for dy in -rad..=rad {
            let rr = clamp_index(row as isize + dy, h);
            for dx in -rad..=rad {
                let cl = clamp_index(pixel as isize + dx, w);
                let cr = clamp_index(xr as isize + dx, w);
                let a = fl.pixel(rr, cl);
                let b = fr.pixel(rr, cr);
                sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
                count += c;
            }
        }
        profile.disparities.push(d);
        profile.costs.push(sum / count as f64);
    }
    if profile.costs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(profile)
}
