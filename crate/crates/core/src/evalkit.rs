//! Depth error metrics and KITTI-style odometry drift.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValidityMask};
use crate::math;
use crate::se3::SE3Transform;

/// Predicted depth is clamped to `[DEPTH_FLOOR, cap]` before scoring.
pub const DEPTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub cap: f64,
    pub valid_count: usize,
}

/// Standard depth errors over pixels with `0 < gt <= cap` inside `mask`.
pub fn depth_metrics(pred: &ImageGrid, gt: &ImageGrid, cap: f64, mask: Option<&ValidityMask>) -> Result<DepthMetrics> {
    pred.ensure_same_dims(gt)?;
    if pred.channels() != 1 {
        return Err(Error::DimensionMismatch {
            expected: (pred.height(), pred.width(), 1),
            found: pred.dims(),
        });
    }
    if !(cap > DEPTH_FLOOR) {
        return Err(Error::InvalidParameter(alloc::format!("cap must exceed {DEPTH_FLOOR}, got {cap}")));
    }
    if let Some(m) = mask {
        m.ensure_matches(pred.height(), pred.width())?;
    }
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut deltas = [0usize; 3];
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !(g > 0.0 && g <= cap) || mask.is_some_and(|m| !m.flags()[i]) {
            continue;
        }
        let p = p.clamp(DEPTH_FLOOR, cap);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        let dl = math::ln(p) - math::ln(g);
        se_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, count) in deltas.iter_mut().enumerate() {
            if ratio < math::powf(1.25, (k + 1) as f64) {
                *count += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: math::sqrt(se / nf),
        rmse_log: math::sqrt(se_log / nf),
        delta1: deltas[0] as f64 / nf,
        delta2: deltas[1] as f64 / nf,
        delta3: deltas[2] as f64 / nf,
        cap,
        valid_count: n,
    })
}

/// Camera-to-world poses with strictly increasing frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Vec<usize>,
    poses: Vec<SE3Transform>,
}

impl Trajectory {
    pub fn new(frames: Vec<usize>, poses: Vec<SE3Transform>) -> Result<Self> {
        if frames.len() != poses.len() {
            return Err(Error::Shape(alloc::format!("{} frame indices for {} poses", frames.len(), poses.len())));
        }
        if frames.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("frame indices must be strictly increasing".into()));
        }
        Ok(Self { frames, poses })
    }

    /// Poses numbered `0..n`.
    pub fn from_poses(poses: Vec<SE3Transform>) -> Self {
        Self {
            frames: (0..poses.len()).collect(),
            poses,
        }
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn poses(&self) -> &[SE3Transform] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Keeps the poses whose frame index lies in `range`.
    pub fn restrict(&self, range: core::ops::Range<usize>) -> Self {
        let (frames, poses) = self
            .frames
            .iter()
            .zip(&self.poses)
            .filter(|(f, _)| range.contains(f))
            .map(|(f, p)| (*f, *p))
            .unzip();
        Self { frames, poses }
    }

    /// Applies `g` on the world side of every pose.
    pub fn transformed(&self, g: &SE3Transform) -> Self {
        Self {
            frames: self.frames.clone(),
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
        }
    }

    /// `T_{k+1 -> k}` for consecutive poses, the convention the losses use.
    pub fn relatives(&self) -> Vec<SE3Transform> {
        self.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
    }
}

/// Integrates relative motions `T_{ref->live}` (live `k`, reference `k+1`)
/// starting from the identity: `C_{k+1} = C_k * rel_k`.
pub fn integrate_trajectory(relatives: &[SE3Transform]) -> Result<Trajectory> {
    integrate_trajectory_from(&SE3Transform::identity(), relatives)
}

pub fn integrate_trajectory_from(start: &SE3Transform, relatives: &[SE3Transform]) -> Result<Trajectory> {
    if relatives.is_empty() {
        return Err(Error::Degenerate("need at least one relative pose"));
    }
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    poses.push(*start);
    for (k, rel) in relatives.iter().enumerate() {
        let m = rel.to_matrix();
        if m.iter().any(|v| !v.is_finite()) || crate::se3::orthonormality_error(rel.rotation()) > 1e-6 {
            return Err(Error::InvalidTransform(if k == 0 { "first relative pose" } else { "relative pose" }));
        }
        let next = poses[k].compose(rel);
        poses.push(next);
    }
    Ok(Trajectory::from_poses(poses))
}

/// Least-squares scale `s` minimizing `sum |s p_pred - p_gt|^2`, and `pred`
/// with its translations scaled by `s`.
pub fn align_scale(pred: &Trajectory, gt: &Trajectory) -> Result<(f64, Trajectory)> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::Shape(alloc::format!(
            "scale alignment needs equal lengths >= 2, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pred.poses.iter().zip(&gt.poses) {
        num += p.translation().dot(g.translation());
        den += p.translation().norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate("predicted trajectory has no motion"));
    }
    let s = num / den;
    let poses = pred
        .poses
        .iter()
        .map(|p| SE3Transform::new(*p.rotation(), p.translation() * s))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        s,
        Trajectory {
            frames: pred.frames.clone(),
            poses,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftOptions {
    pub lengths: Vec<f64>,
    pub stride: usize,
}

impl Default for DriftOptions {
    fn default() -> Self {
        Self {
            lengths: (1..=8).map(|k| 100.0 * k as f64).collect(),
            stride: 10,
        }
    }
}

/// Average drift over all sub-sequences of one length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthBin {
    pub length: f64,
    /// Percent, or `None` when no sub-sequence of this length exists.
    pub t_err: Option<f64>,
    /// Degrees per 100 m.
    pub r_err: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdomMetrics {
    /// Percent.
    pub t_err: f64,
    /// Degrees per 100 m.
    pub r_err: f64,
    pub per_length: Vec<LengthBin>,
    /// Number of `(start, length)` pairs averaged.
    pub segments: usize,
    /// Set when the trajectory was too short for any sub-sequence.
    pub empty: bool,
}

/// Per-length drift table. Errors per segment are `inv(rel_gt) * rel_pred`,
/// normalized by the nominal segment length.
pub fn drift_vs_length(pred: &Trajectory, gt: &Trajectory, options: &DriftOptions) -> Result<Vec<LengthBin>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(alloc::format!("trajectories of length {} and {}", pred.len(), gt.len())));
    }
    if options.stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    let mut dist = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    for (i, p) in gt.poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation() - gt.poses[i - 1].translation()).norm();
        }
        dist.push(acc);
    }
    let mut bins: Vec<(f64, f64, usize)> = alloc::vec![(0.0, 0.0, 0); options.lengths.len()];
    for first in (0..gt.len()).step_by(options.stride) {
        for (b, &len) in options.lengths.iter().enumerate() {
            let Some(last) = (first..gt.len()).find(|&i| dist[i] > dist[first] + len) else {
                continue;
            };
            let rel_gt = gt.poses[first].inverse().compose(&gt.poses[last]);
            let rel_pred = pred.poses[first].inverse().compose(&pred.poses[last]);
            let e = rel_gt.inverse().compose(&rel_pred);
            bins[b].0 += e.translation().norm() / len;
            bins[b].1 += e.rotation_angle() / len;
            bins[b].2 += 1;
        }
    }
    Ok(options
        .lengths
        .iter()
        .zip(bins)
        .map(|(&length, (t, r, count))| {
            let avg = |v: f64| (count > 0).then(|| v / count as f64);
            LengthBin {
                length,
                t_err: avg(t).map(|v| 100.0 * v),
                r_err: avg(r).map(|v| v.to_degrees() * 100.0),
                count,
            }
        })
        .collect())
}

/// Drift averaged over every valid `(start, length)` segment.
pub fn odometry_drift(pred: &Trajectory, gt: &Trajectory, options: &DriftOptions) -> Result<OdomMetrics> {
    let per_length = drift_vs_length(pred, gt, options)?;
    let segments: usize = per_length.iter().map(|b| b.count).sum();
    let weighted = |f: fn(&LengthBin) -> Option<f64>| {
        per_length.iter().filter_map(|b| f(b).map(|v| v * b.count as f64)).sum::<f64>() / segments.max(1) as f64
    };
    Ok(OdomMetrics {
        t_err: weighted(|b| b.t_err),
        r_err: weighted(|b| b.r_err),
        per_length,
        segments,
        empty: segments == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::test_util::{random_twist, rng};
    use crate::se3::{twist_to_transform, Twist};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_depth(seed: u64, lo: f64, hi: f64) -> ImageGrid {
        let mut r = rng(seed);
        ImageGrid::from_fn(9, 11, 1, |_, _, _| r.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = random_depth(1, 1.0, 40.0);
        let m = depth_metrics(&gt, &gt, 80.0, None).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!(m.valid_count, 99);
    }

    #[test]
    fn uniform_scale_error() {
        let gt = random_depth(2, 1.0, 40.0);
        let pred = gt.map(|v| 1.1 * v).unwrap();
        let m = depth_metrics(&pred, &gt, 80.0, None).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(m.delta1, 1.0);
    }

    #[test]
    fn brute_force_metrics() {
        let gt = random_depth(3, -5.0, 90.0);
        let pred = random_depth(4, -1.0, 100.0);
        let mut r = rng(5);
        let mask = ValidityMask::new(9, 11, (0..99).map(|_| r.random_bool(0.8)).collect()).unwrap();
        let cap = 50.0;
        let m = depth_metrics(&pred, &gt, cap, Some(&mask)).unwrap();
        let mut v = [0.0f64; 4];
        let mut d = [0.0f64; 3];
        let mut n = 0.0;
        for i in 0..99 {
            let g = gt.data()[i];
            if !(g > 0.0 && g <= cap && mask.flags()[i]) {
                continue;
            }
            let p = pred.data()[i].max(1e-3).min(cap);
            v[0] += (p - g).abs() / g;
            v[1] += (p - g).powi(2) / g;
            v[2] += (p - g).powi(2);
            v[3] += (p.ln() - g.ln()).powi(2);
            let ratio = (p / g).max(g / p);
            for k in 0..3 {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    d[k] += 1.0;
                }
            }
            n += 1.0;
        }
        assert_eq!(m.valid_count, n as usize);
        for (a, b) in [
            (m.abs_rel, v[0] / n),
            (m.sq_rel, v[1] / n),
            (m.rmse, (v[2] / n).sqrt()),
            (m.rmse_log, (v[3] / n).sqrt()),
            (m.delta1, d[0] / n),
            (m.delta2, d[1] / n),
            (m.delta3, d[2] / n),
        ] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn no_valid_pixels_errors() {
        let gt = ImageGrid::filled(2, 2, 1, 100.0);
        assert_eq!(depth_metrics(&gt, &gt, 80.0, None).unwrap_err(), Error::EmptyOverlap);
    }

    fn forward(step: f64) -> SE3Transform {
        SE3Transform::from_translation(Vector3::new(0.0, 0.0, step))
    }

    #[test]
    fn integration_examples() {
        let id = integrate_trajectory(&[SE3Transform::identity(); 4]).unwrap();
        assert!(id.poses().iter().all(|p| *p == SE3Transform::identity()));
        let line = integrate_trajectory(&[forward(1.0); 5]).unwrap();
        for (k, p) in line.positions().iter().enumerate() {
            assert!((p - Vector3::new(0.0, 0.0, k as f64)).norm() < 1e-12);
        }
        assert!(integrate_trajectory(&[]).is_err());
    }

    #[test]
    fn integration_matches_matrix_chain() {
        let mut r = rng(6);
        let rels: Vec<SE3Transform> = (0..30).map(|_| twist_to_transform(&random_twist(&mut r, 0.3, 2.0))).collect();
        let traj = integrate_trajectory(&rels).unwrap();
        let mut m = nalgebra::Matrix4::identity();
        for (k, rel) in rels.iter().enumerate() {
            m *= rel.to_matrix();
            let p = traj.poses()[k + 1].to_matrix();
            assert!((p - m).abs().max() < 1e-9);
        }
    }

    #[test]
    fn scale_alignment_examples() {
        let mut r = rng(7);
        let rels: Vec<SE3Transform> = (0..10).map(|_| twist_to_transform(&random_twist(&mut r, 0.1, 1.0))).collect();
        let gt = integrate_trajectory(&rels).unwrap();
        let doubled = Trajectory::from_poses(
            gt.poses().iter().map(|p| SE3Transform::new(*p.rotation(), p.translation() * 2.0).unwrap()).collect(),
        );
        let (s, aligned) = align_scale(&doubled, &gt).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert!(aligned.positions().iter().zip(gt.positions()).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!((align_scale(&gt, &gt).unwrap().0 - 1.0).abs() < 1e-12);

        let other = integrate_trajectory(&(0..10).map(|_| twist_to_transform(&random_twist(&mut r, 0.1, 1.0))).collect::<Vec<_>>()).unwrap();
        let (s, _) = align_scale(&other, &gt).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (p, g) in other.positions().iter().zip(gt.positions()) {
            for k in 0..3 {
                num += p[k] * g[k];
                den += p[k] * p[k];
            }
        }
        assert!((s - num / den).abs() < 1e-12);
        let still = Trajectory::from_poses(alloc::vec![SE3Transform::identity(); 3]);
        assert!(align_scale(&still, &gt.restrict(0..3)).is_err());
    }

    fn straight_line(n: usize, step: f64) -> Trajectory {
        integrate_trajectory(&alloc::vec![forward(step); n - 1]).unwrap()
    }

    #[test]
    fn drift_examples() {
        let gt = straight_line(1001, 1.0);
        let same = odometry_drift(&gt, &gt, &DriftOptions::default()).unwrap();
        assert_eq!((same.t_err, same.r_err), (0.0, 0.0));
        assert!(!same.empty);
        assert!(same.per_length.iter().all(|b| b.t_err == Some(0.0)));

        let scaled = straight_line(1001, 1.1);
        let m = odometry_drift(&scaled, &gt, &DriftOptions::default()).unwrap();
        assert!((m.t_err - 10.0).abs() < 0.5, "{}", m.t_err);
        assert!(m.r_err.abs() < 1e-9);

        let short = straight_line(50, 1.0);
        let e = odometry_drift(&short, &short, &DriftOptions::default()).unwrap();
        assert!(e.empty);
        assert!(e.per_length.iter().all(|b| b.t_err.is_none() && b.count == 0));
    }

    #[test]
    fn absent_bins_are_flagged() {
        let gt = straight_line(301, 1.0);
        let bins = drift_vs_length(&gt, &gt, &DriftOptions::default()).unwrap();
        assert!(bins[0].t_err.is_some() && bins[1].t_err.is_some());
        assert!(bins[3..].iter().all(|b| b.t_err.is_none()));
    }

    #[test]
    fn angular_bias_grows_with_length() {
        let gt = straight_line(1001, 1.0);
        let biased = Twist::new(Vector3::new(0.0, 0.002, 0.0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let pred = integrate_trajectory(&alloc::vec![twist_to_transform(&biased); 1000]).unwrap();
        let bins = drift_vs_length(&pred, &gt, &DriftOptions::default()).unwrap();
        let t: Vec<f64> = bins.iter().map(|b| b.t_err.unwrap()).collect();
        assert!(t.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{t:?}");
    }

    #[test]
    fn restrict_filters_frames() {
        let t = straight_line(20, 1.0);
        let r = t.restrict(9..15);
        assert_eq!(r.frames(), &[9, 10, 11, 12, 13, 14]);
    }

    proptest! {
        #[test]
        fn deltas_are_monotone(seed in 0u64..300) {
            let m = depth_metrics(&random_depth(seed, 0.5, 60.0), &random_depth(seed + 7, 0.5, 60.0), 80.0, None).unwrap();
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
            prop_assert!(m.abs_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0 && m.sq_rel >= 0.0);
        }

        #[test]
        fn drift_is_invariant_to_global_rigid_motion(seed in 0u64..40) {
            let mut r = rng(seed);
            let gt_rel: Vec<SE3Transform> = (0..240).map(|_| twist_to_transform(&random_twist(&mut r, 0.02, 1.0)).compose(&forward(1.0))).collect();
            let pred_rel: Vec<SE3Transform> = gt_rel.iter().map(|g| g.compose(&twist_to_transform(&random_twist(&mut r, 0.005, 0.05)))).collect();
            let gt = integrate_trajectory(&gt_rel).unwrap();
            let pred = integrate_trajectory(&pred_rel).unwrap();
            let g = twist_to_transform(&random_twist(&mut r, 2.0, 50.0));
            let a = odometry_drift(&pred, &gt, &DriftOptions::default()).unwrap();
            let b = odometry_drift(&pred.transformed(&g), &gt.transformed(&g), &DriftOptions::default()).unwrap();
            prop_assert!((a.t_err - b.t_err).abs() < 1e-9 && (a.r_err - b.r_err).abs() < 1e-9);
        }

        #[test]
        fn align_scale_inverts_scaling(seed in 0u64..100, s in 0.1f64..10.0) {
            let mut r = rng(seed);
            let gt = integrate_trajectory(&(0..8).map(|_| twist_to_transform(&random_twist(&mut r, 0.2, 1.0))).collect::<Vec<_>>()).unwrap();
            let scaled = Trajectory::from_poses(gt.poses().iter().map(|p| SE3Transform::new(*p.rotation(), p.translation() * s).unwrap()).collect());
            let (k, _) = align_scale(&scaled, &gt).unwrap();
            prop_assert!((k - 1.0 / s).abs() < 1e-12 * (1.0 / s).max(1.0));
        }

        #[test]
        fn relatives_round_trip(seed in 0u64..100) {
            let mut r = rng(seed);
            let start = twist_to_transform(&random_twist(&mut r, 1.0, 5.0));
            let rels: Vec<SE3Transform> = (0..12).map(|_| twist_to_transform(&random_twist(&mut r, 0.3, 1.0))).collect();
            let traj = integrate_trajectory_from(&start, &rels).unwrap();
            let back = integrate_trajectory_from(&traj.poses()[0], &traj.relatives()).unwrap();
            for (a, b) in traj.poses().iter().zip(back.poses()) {
                prop_assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-9);
            }
        }
    }
}
