//! Reconstruction and smoothness losses with analytic gradients.
//!
//! Reconstruction terms are means of absolute differences over valid pixels
//! and channels. The total loss sums the temporal and stereo reconstructions
//! and weights the three terms with [`LossWeights`].

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector2;

use crate::camera::{self, Intrinsics};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::grid::{ImageGrid, ValidityMask};
use crate::math;
use crate::se3::{self, SE3Transform, Twist};
use crate::solver::TrainingInstance;
use crate::warp;

/// Offset in the inverse-depth to depth conversion `D = 1 / (d_inv + DEPTH_EPS)`.
pub const DEPTH_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ir: f64,
    pub lambda_fr: f64,
    pub lambda_ds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ir: 1.0,
            lambda_fr: 0.1,
            lambda_ds: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_ir: f64, lambda_fr: f64, lambda_ds: f64) -> Result<Self> {
        for (name, v) in [("lambda_ir", lambda_ir), ("lambda_fr", lambda_fr), ("lambda_ds", lambda_ds)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(alloc::format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            lambda_ir,
            lambda_fr,
            lambda_ds,
        })
    }
}

/// Which view pairs feed the reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Supervision {
    /// Temporal and stereo pairs.
    #[default]
    Full,
    /// Temporal pair only; depth and translation scale are unobservable.
    Monocular,
    /// Stereo pair only; the twist receives no gradient.
    StereoOnly,
}

impl Supervision {
    pub fn uses_temporal(self) -> bool {
        !matches!(self, Supervision::StereoOnly)
    }

    pub fn uses_stereo(self) -> bool {
        !matches!(self, Supervision::Monocular)
    }

    pub fn name(self) -> &'static str {
        match self {
            Supervision::Full => "stereo",
            Supervision::Monocular => "monocular",
            Supervision::StereoOnly => "stereo-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stereo" | "full" => Some(Supervision::Full),
            "monocular" => Some(Supervision::Monocular),
            "stereo-only" => Some(Supervision::StereoOnly),
            _ => None,
        }
    }
}

/// Reconstruction terms of one view pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairLoss {
    pub l_ir: f64,
    pub l_fr: f64,
    pub valid_pixels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ir: f64,
    pub l_fr: f64,
    pub l_ds: f64,
    pub total: f64,
    pub temporal: PairLoss,
    pub stereo: PairLoss,
    pub smoothness_stencils: usize,
}

/// Single-channel non-negative inverse depth (1/meters).
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthGrid(ImageGrid);

impl InverseDepthGrid {
    pub fn new(grid: ImageGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::DimensionMismatch {
                expected: (grid.height(), grid.width(), 1),
                found: grid.dims(),
            });
        }
        if let Some(&bad) = grid.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidDepth(bad));
        }
        Ok(Self(grid))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(ImageGrid::filled(height, width, 1, value))
    }

    /// Inverse of [`Self::to_depth`], clamped at zero for depths beyond `1/DEPTH_EPS`.
    pub fn from_depth(depth: &ImageGrid) -> Result<Self> {
        if let Some(&bad) = depth.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::InvalidDepth(bad));
        }
        Self::new(depth.map(|d| (1.0 / d - DEPTH_EPS).max(0.0))?)
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.0
    }

    pub fn into_grid(self) -> ImageGrid {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn to_depth(&self) -> ImageGrid {
        self.0.map(|d| 1.0 / (d + DEPTH_EPS)).expect("depth of a non-negative inverse depth is finite")
    }
}

/// Mean L1 residual and its gradient with respect to `synthesized`.
fn masked_l1(reference: &ImageGrid, synthesized: &ImageGrid, mask: &ValidityMask) -> Result<(f64, ImageGrid)> {
    reference.ensure_same_dims(synthesized)?;
    mask.ensure_matches(reference.height(), reference.width())?;
    let c = reference.channels();
    let n = mask.count_valid() * c;
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let mut sum = 0.0;
    let mut grad = vec![0.0; reference.len()];
    for (i, _) in mask.flags().iter().enumerate().filter(|(_, &ok)| ok) {
        for k in i * c..(i + 1) * c {
            let r = synthesized.data()[k] - reference.data()[k];
            sum += r.abs();
            grad[k] = math::sign(r) / n as f64;
        }
    }
    let (h, w, _) = reference.dims();
    Ok((sum / n as f64, ImageGrid::new(h, w, c, grad)?))
}

/// Photometric L1 over valid pixels and channels, with `d/d synthesized`.
pub fn image_reconstruction_loss(
    reference: &ImageGrid,
    synthesized: &ImageGrid,
    mask: &ValidityMask,
) -> Result<(f64, ImageGrid)> {
    masked_l1(reference, synthesized, mask)
}

/// Same contract as [`image_reconstruction_loss`] on feature channels.
pub fn feature_reconstruction_loss(
    ref_feat: &ImageGrid,
    synth_feat: &ImageGrid,
    mask: &ValidityMask,
) -> Result<(f64, ImageGrid)> {
    masked_l1(ref_feat, synth_feat, mask)
}

/// Edge weights `exp(-mean_c |dI|)` for the horizontal and vertical stencils.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    height: usize,
    width: usize,
    /// `height x (width - 1)`, row-major.
    x: Vec<f64>,
    /// `(height - 1) x width`, row-major.
    y: Vec<f64>,
}

impl EdgeWeights {
    pub fn from_image(image: &ImageGrid) -> Self {
        let (h, w, c) = image.dims();
        let mean_abs_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (q - p).abs()).sum::<f64>() / c as f64;
        let mut x = Vec::with_capacity(h * w.saturating_sub(1));
        for r in 0..h {
            for col in 0..w.saturating_sub(1) {
                x.push(math::exp(-mean_abs_diff(image.pixel(r, col), image.pixel(r, col + 1))));
            }
        }
        let mut y = Vec::with_capacity(h.saturating_sub(1) * w);
        for r in 0..h.saturating_sub(1) {
            for col in 0..w {
                y.push(math::exp(-mean_abs_diff(image.pixel(r, col), image.pixel(r + 1, col))));
            }
        }
        Self { height: h, width: w, x, y }
    }

    pub fn stencils(&self) -> usize {
        self.x.len() + self.y.len()
    }
}

/// Edge-aware smoothness of inverse depth and its gradient.
///
/// Averages over every horizontal and vertical stencil position, so a single
/// row contributes only horizontal terms. Fails when there is no stencil.
pub fn smoothness_loss(d_inv: &InverseDepthGrid, image: &ImageGrid) -> Result<(f64, ImageGrid)> {
    crate::grid::ensure_same_hw(d_inv.grid(), image)?;
    smoothness_with_weights(d_inv, &EdgeWeights::from_image(image))
}

fn smoothness_with_weights(d_inv: &InverseDepthGrid, e: &EdgeWeights) -> Result<(f64, ImageGrid)> {
    let (h, w) = (d_inv.height(), d_inv.width());
    if (h, w) != (e.height, e.width) {
        return Err(Error::DimensionMismatch {
            expected: (e.height, e.width, 1),
            found: d_inv.grid().dims(),
        });
    }
    let n = e.stencils();
    if n == 0 {
        return Err(Error::Degenerate("smoothness needs at least two pixels in a row or column"));
    }
    let d = d_inv.grid().data();
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; h * w];
    let mut stencil = |i: usize, j: usize, wt: f64| {
        let diff = d[j] - d[i];
        sum += wt * diff.abs();
        let g = wt * math::sign(diff) * inv_n;
        grad[j] += g;
        grad[i] -= g;
    };
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            stencil(r * w + c, r * w + c + 1, e.x[r * (w - 1) + c]);
        }
    }
    for r in 0..h.saturating_sub(1) {
        for c in 0..w {
            stencil(r * w + c, (r + 1) * w + c, e.y[r * w + c]);
        }
    }
    Ok((sum * inv_n, ImageGrid::new(h, w, 1, grad)?))
}

/// An instance with its feature maps and edge weights computed once.
#[derive(Clone, Debug)]
pub struct PreparedInstance<'a> {
    pub instance: &'a TrainingInstance,
    ref_feat: ImageGrid,
    temporal_feat: ImageGrid,
    stereo_feat: ImageGrid,
    edges: EdgeWeights,
}

impl<'a> PreparedInstance<'a> {
    pub fn new(instance: &'a TrainingInstance, extractor: &FeatureExtractor) -> Result<Self> {
        Ok(Self {
            instance,
            ref_feat: extractor.extract(&instance.ref_image)?,
            temporal_feat: extractor.extract(&instance.temporal_live)?,
            stereo_feat: extractor.extract(&instance.stereo_live)?,
            edges: EdgeWeights::from_image(&instance.ref_image),
        })
    }
}

/// Loss value with gradients for inverse depth and the temporal twist.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub d_inv: ImageGrid,
    pub twist: [f64; 6],
}

/// Full weighted loss of one instance with analytic gradients.
pub fn total_loss(
    instance: &TrainingInstance,
    d_inv: &InverseDepthGrid,
    temporal_twist: &Twist,
    features: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossGradient> {
    let prepared = PreparedInstance::new(instance, features)?;
    total_loss_prepared(&prepared, d_inv, temporal_twist, weights, Supervision::Full)
}

/// [`total_loss`] on a prepared instance with a selectable supervision mode.
pub fn total_loss_prepared(
    p: &PreparedInstance<'_>,
    d_inv: &InverseDepthGrid,
    temporal_twist: &Twist,
    weights: &LossWeights,
    supervision: Supervision,
) -> Result<LossGradient> {
    let inst = p.instance;
    crate::grid::ensure_same_hw(d_inv.grid(), &inst.ref_image)?;
    let depth = d_inv.to_depth();
    let mut grad_depth = vec![0.0; depth.len()];
    let mut grad_twist = [0.0; 6];
    let mut b = LossBreakdown::default();

    if supervision.uses_temporal() {
        let t = se3::twist_to_transform(temporal_twist);
        let view = PairView {
            ref_image: &inst.ref_image,
            ref_feat: &p.ref_feat,
            live_image: &inst.temporal_live,
            live_feat: &p.temporal_feat,
        };
        b.temporal = view.accumulate(&depth, &t, Some(temporal_twist), &inst.intrinsics, weights, &mut grad_depth, &mut grad_twist)?;
    }
    if supervision.uses_stereo() {
        let view = PairView {
            ref_image: &inst.ref_image,
            ref_feat: &p.ref_feat,
            live_image: &inst.stereo_live,
            live_feat: &p.stereo_feat,
        };
        let mut unused = [0.0; 6];
        b.stereo = view.accumulate(&depth, &inst.stereo_transform, None, &inst.intrinsics, weights, &mut grad_depth, &mut unused)?;
    }
    if b.temporal.valid_pixels + b.stereo.valid_pixels == 0 {
        return Err(Error::EmptyOverlap);
    }

    let (l_ds, g_ds) = smoothness_with_weights(d_inv, &p.edges)?;
    b.l_ir = b.temporal.l_ir + b.stereo.l_ir;
    b.l_fr = b.temporal.l_fr + b.stereo.l_fr;
    b.l_ds = l_ds;
    b.smoothness_stencils = p.edges.stencils();
    b.total = weights.lambda_ir * b.l_ir + weights.lambda_fr * b.l_fr + weights.lambda_ds * b.l_ds;

    // dD/dd_inv = -D^2
    let grad_dinv: Vec<f64> = grad_depth
        .iter()
        .zip(depth.data())
        .zip(g_ds.data())
        .map(|((gd, dep), gs)| -gd * dep * dep + weights.lambda_ds * gs)
        .collect();
    Ok(LossGradient {
        breakdown: b,
        d_inv: ImageGrid::new(depth.height(), depth.width(), 1, grad_dinv)?,
        twist: grad_twist,
    })
}

struct PairView<'a> {
    ref_image: &'a ImageGrid,
    ref_feat: &'a ImageGrid,
    live_image: &'a ImageGrid,
    live_feat: &'a ImageGrid,
}

impl PairView<'_> {
    /// Adds this pair's weighted gradients to `grad_depth` (w.r.t. depth in
    /// meters) and, when `twist` is given, to `grad_twist`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        depth: &ImageGrid,
        t: &SE3Transform,
        twist: Option<&Twist>,
        k: &Intrinsics,
        weights: &LossWeights,
        grad_depth: &mut [f64],
        grad_twist: &mut [f64; 6],
    ) -> Result<PairLoss> {
        let field = camera::epipolar_warp_field_differentiable(depth, t, twist, k)?;
        let (synth, sg, mask) = warp::sample_with_gradient(self.live_image, &field)?;
        let valid = mask.count_valid();
        if valid == 0 {
            return Ok(PairLoss::default());
        }
        let (l_ir, g_ir) = image_reconstruction_loss(self.ref_image, &synth, &mask)?;
        let (synth_f, sg_f, _) = warp::sample_with_gradient(self.live_feat, &field)?;
        let (l_fr, g_fr) = feature_reconstruction_loss(self.ref_feat, &synth_f, &mask)?;

        let jac = field.jacobians().expect("differentiable field");
        let (ci, cf) = (self.live_image.channels(), self.live_feat.channels());
        for (i, _) in mask.flags().iter().enumerate().filter(|(_, &ok)| ok) {
            let mut g = Vector2::zeros();
            for k in i * ci..(i + 1) * ci {
                let u = weights.lambda_ir * g_ir.data()[k];
                g += Vector2::new(u * sg.dx.data()[k], u * sg.dy.data()[k]);
            }
            for k in i * cf..(i + 1) * cf {
                let u = weights.lambda_fr * g_fr.data()[k];
                g += Vector2::new(u * sg_f.dx.data()[k], u * sg_f.dy.data()[k]);
            }
            grad_depth[i] += g.dot(&jac[i].depth);
            if twist.is_some() {
                let gt = jac[i].twist.transpose() * g;
                for (acc, v) in grad_twist.iter_mut().zip(gt.iter()) {
                    *acc += v;
                }
            }
        }
        Ok(PairLoss {
            l_ir,
            l_fr,
            valid_pixels: valid,
        })
    }
}
