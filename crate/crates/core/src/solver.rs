//! Instance assembly, direct optimization of depth and pose, and predictor training.

use alloc::vec::Vec;
use core::time::Duration;

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::grid::ImageGrid;
use crate::losses::{self, InverseDepthGrid, LossBreakdown, LossWeights, PreparedInstance, Supervision};
use crate::nets::{self, AdamState, LayerStack, Tensor};
use crate::se3::{SE3Transform, Twist};

/// Ground truth carried for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Reference-frame depth in meters.
    pub depth: ImageGrid,
    /// `T_{ref->temporal live}`.
    pub temporal_pose: SE3Transform,
}

/// Reference left frame at `t+1`, left frame at `t`, and right frame at `t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub ref_image: ImageGrid,
    pub temporal_live: ImageGrid,
    pub stereo_live: ImageGrid,
    pub intrinsics: Intrinsics,
    /// `T_{L->R}`, known from calibration.
    pub stereo_transform: SE3Transform,
    pub ground_truth: Option<GroundTruth>,
}

impl TrainingInstance {
    pub fn validate(&self) -> Result<()> {
        self.ref_image.ensure_same_dims(&self.temporal_live)?;
        self.ref_image.ensure_same_dims(&self.stereo_live)?;
        if let Some(gt) = &self.ground_truth {
            crate::grid::ensure_same_hw(&gt.depth, &self.ref_image)?;
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.ref_image.height()
    }

    pub fn width(&self) -> usize {
        self.ref_image.width()
    }
}

/// One frame of a stereo sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub left: ImageGrid,
    pub right: Option<ImageGrid>,
    /// Left-camera depth, if known.
    pub depth: Option<ImageGrid>,
    /// Camera-to-world pose, if known.
    pub pose: Option<SE3Transform>,
}

/// Stereo transform `T_{L->R}` for a rectified rig with the right camera at `+baseline` along x.
pub fn stereo_transform(baseline: f64) -> Result<SE3Transform> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::InvalidParameter(alloc::format!("baseline must be > 0, got {baseline}")));
    }
    Ok(SE3Transform::from_translation(nalgebra::Vector3::new(-baseline, 0.0, 0.0)))
}

/// Pairs consecutive frames: instance `k` uses frame `k+1` as reference and
/// frame `k` as temporal live view.
///
/// Pairs whose reference lacks a right image are skipped with a warning.
/// Ground truth is attached when the reference has depth and both frames have poses.
pub fn assemble_instances(frames: &[Frame], intrinsics: Intrinsics, baseline: f64) -> Result<Vec<TrainingInstance>> {
    if frames.len() < 2 {
        return Err(Error::Degenerate("need at least two frames to form an instance"));
    }
    let stereo = stereo_transform(baseline)?;
    let mut out = Vec::with_capacity(frames.len() - 1);
    for k in 0..frames.len() - 1 {
        let (live, reference) = (&frames[k], &frames[k + 1]);
        let Some(right) = &reference.right else {
            log::warn!("frame {} has no right image; skipping instance {k}", k + 1);
            continue;
        };
        let ground_truth = match (&reference.depth, reference.pose, live.pose) {
            (Some(depth), Some(ref_pose), Some(live_pose)) => Some(GroundTruth {
                depth: depth.clone(),
                // maps reference-camera points into the live camera
                temporal_pose: live_pose.inverse().compose(&ref_pose),
            }),
            _ => None,
        };
        let inst = TrainingInstance {
            ref_image: reference.left.clone(),
            temporal_live: live.left.clone(),
            stereo_live: right.clone(),
            intrinsics,
            stereo_transform: stereo,
            ground_truth,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectOptions {
    pub weights: LossWeights,
    pub supervision: Supervision,
    pub iterations: usize,
    pub lr: f64,
    /// Adam moment decay rates.
    pub beta1: f64,
    pub beta2: f64,
    /// Keep the inverse depth at its initial value.
    pub freeze_depth: bool,
    /// Keep the twist at its initial value.
    pub freeze_pose: bool,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            supervision: Supervision::Full,
            iterations: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            freeze_depth: false,
            freeze_pose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    /// Loss at every evaluated iterate, one entry per iteration.
    pub history: Vec<LossBreakdown>,
    pub d_inv: InverseDepthGrid,
    pub twist: Twist,
    /// Total loss changed by less than `1e-9` relative over the last iteration.
    pub converged: bool,
    /// Filled in by callers that have a clock.
    pub wall_time: Option<Duration>,
}

/// Adam on `(d_inv, twist)` using the analytic loss gradients.
///
/// Inverse depth is clamped to stay non-negative and the rotation is kept
/// inside the ball `|u| < pi`. `observer` sees each iteration's breakdown.
pub fn optimize_direct(
    instance: &TrainingInstance,
    init_d_inv: &InverseDepthGrid,
    init_twist: &Twist,
    extractor: &FeatureExtractor,
    options: &DirectOptions,
    mut observer: impl FnMut(usize, &LossBreakdown),
) -> Result<SolveReport> {
    if options.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    instance.validate()?;
    let prepared = PreparedInstance::new(instance, extractor)?;
    let n = init_d_inv.grid().len();
    let mut params: Vec<f64> = init_d_inv.grid().data().to_vec();
    params.extend_from_slice(&init_twist.to_array());
    let mut adam = AdamState::new(params.len(), options.lr)?;
    adam.beta1 = options.beta1;
    adam.beta2 = options.beta2;
    let (h, w) = (init_d_inv.height(), init_d_inv.width());
    let mut history = Vec::with_capacity(options.iterations);
    let mut converged = false;

    for it in 0..options.iterations {
        let d_inv = InverseDepthGrid::new(ImageGrid::new(h, w, 1, params[..n].to_vec())?)?;
        let twist = Twist::from_array(params[n..].try_into().expect("six twist parameters"))?;
        let g = losses::total_loss_prepared(&prepared, &d_inv, &twist, &options.weights, options.supervision)?;
        if !g.breakdown.total.is_finite() {
            return Err(Error::Divergence { step: it });
        }
        observer(it, &g.breakdown);
        if let Some(prev) = history.last().map(|b: &LossBreakdown| b.total) {
            converged = (prev - g.breakdown.total).abs() <= 1e-9 * prev.abs().max(1e-300);
        }
        history.push(g.breakdown);

        let mut grads: Vec<f64> = g.d_inv.data().to_vec();
        grads.extend_from_slice(&g.twist);
        if options.freeze_depth {
            grads[..n].iter_mut().for_each(|v| *v = 0.0);
        }
        if options.freeze_pose {
            grads[n..].iter_mut().for_each(|v| *v = 0.0);
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: it });
        }
        let before = params.clone();
        adam.step(&mut params, &grads)?;
        for v in &mut params[..n] {
            *v = v.max(0.0);
        }
        if !Twist::from_array(params[n..].try_into().expect("six twist parameters")).is_ok() {
            params[n..].copy_from_slice(&before[n..]);
        }
    }

    let d_inv = InverseDepthGrid::new(ImageGrid::new(h, w, 1, params[..n].to_vec())?)?;
    let twist = Twist::from_array(params[n..].try_into().expect("six twist parameters"))?;
    Ok(SolveReport {
        history,
        d_inv,
        twist,
        converged,
        wall_time: None,
    })
}


/// Depth and pose networks together with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictors {
    pub depth: LayerStack,
    pub pose: LayerStack,
    pub depth_adam: AdamState,
    pub pose_adam: AdamState,
    /// Completed training epochs.
    pub epoch: usize,
}

impl Predictors {
    /// Freshly initialized networks; the pose network is seeded with `seed + 1`.
    pub fn new(seed: u64, lr: f64) -> Result<Self> {
        let depth = nets::depth_net(seed)?;
        let pose = nets::pose_net(seed.wrapping_add(1))?;
        Ok(Self {
            depth_adam: AdamState::new(depth.param_count(), lr)?,
            pose_adam: AdamState::new(pose.param_count(), lr)?,
            depth,
            pose,
            epoch: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.depth_adam.lr = lr;
        self.pose_adam.lr = lr;
    }

    /// Inverse depth of the reference view and `T_{ref->temporal live}`.
    pub fn predict(&mut self, instance: &TrainingInstance) -> Result<(InverseDepthGrid, Twist)> {
        let d_inv = nets::depth_forward(&mut self.depth, &instance.ref_image)?;
        let twist = nets::pose_forward(&mut self.pose, &instance.ref_image, &instance.temporal_live)?;
        Ok((d_inv, twist))
    }

    /// Loss of the current networks on one prepared instance.
    pub fn evaluate(&mut self, p: &PreparedInstance<'_>, weights: &LossWeights, supervision: Supervision) -> Result<LossBreakdown> {
        let (d_inv, twist) = self.predict(p.instance)?;
        Ok(losses::total_loss_prepared(p, &d_inv, &twist, weights, supervision)?.breakdown)
    }

    /// One Adam step on both networks for one instance.
    pub fn train_step(&mut self, p: &PreparedInstance<'_>, weights: &LossWeights, supervision: Supervision) -> Result<LossBreakdown> {
        let (d_inv, twist) = self.predict(p.instance)?;
        let g = losses::total_loss_prepared(p, &d_inv, &twist, weights, supervision)?;
        let (h, w) = (d_inv.height(), d_inv.width());
        let (gd, _) = self.depth.backward(&Tensor::new(1, h, w, g.d_inv.into_data())?)?;
        let (gp, _) = self.pose.backward(&Tensor::new(6, 1, 1, g.twist.to_vec())?)?;
        let mut params = self.depth.params().to_vec();
        self.depth_adam.step(&mut params, &gd)?;
        self.depth.set_params(params)?;
        let mut params = self.pose.params().to_vec();
        self.pose_adam.step(&mut params, &gp)?;
        self.pose.set_params(params)?;
        Ok(g.breakdown)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub supervision: Supervision,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    /// Mean training total per epoch, as evaluated before each step.
    pub epoch_losses: Vec<f64>,
    pub wall_time: Option<Duration>,
}

/// Trains both networks for `options.epochs` more epochs, one instance per
/// step in dataset order.
///
/// `observer` sees `(epoch, instance, breakdown)` for every step. On a
/// non-finite loss or parameter the networks are restored to the start of the
/// failing epoch and a divergence error is returned.
pub fn train_predictors(
    dataset: &[PreparedInstance<'_>],
    predictors: &mut Predictors,
    options: &TrainOptions,
    mut observer: impl FnMut(usize, usize, &LossBreakdown),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("training needs at least one instance"));
    }
    let mut report = TrainReport::default();
    let mut global_step = 0usize;
    for _ in 0..options.epochs {
        let snapshot = predictors.clone();
        let epoch = predictors.epoch;
        let mut sum = 0.0;
        for (i, p) in dataset.iter().enumerate() {
            let outcome = predictors.train_step(p, &options.weights, options.supervision);
            let b = match outcome {
                Ok(b) if b.total.is_finite() => b,
                Ok(_) | Err(Error::NonFinite(_)) | Err(Error::OutOfDomain(_)) => {
                    *predictors = snapshot;
                    return Err(Error::Divergence { step: global_step });
                }
                Err(e) => {
                    *predictors = snapshot;
                    return Err(e);
                }
            };
            observer(epoch, i, &b);
            sum += b.total;
            global_step += 1;
        }
        predictors.epoch += 1;
        report.epoch_losses.push(sum / dataset.len() as f64);
    }
    Ok(report)
}

/// Prepares every instance with the same extractor.
pub fn prepare_all<'a>(dataset: &'a [TrainingInstance], extractor: &FeatureExtractor) -> Result<Vec<PreparedInstance<'a>>> {
    dataset.iter().map(|i| PreparedInstance::new(i, extractor)).collect()
}

/// Mean total loss of the predictors over `dataset`.
pub fn mean_loss(
    dataset: &[PreparedInstance<'_>],
    predictors: &mut Predictors,
    weights: &LossWeights,
    supervision: Supervision,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset"));
    }
    let mut sum = 0.0;
    for p in dataset {
        sum += predictors.evaluate(p, weights, supervision)?.total;
    }
    Ok(sum / dataset.len() as f64)
}
