//! KITTI odometry pose files: one row-major 3x4 camera-to-world matrix per line.

use std::fmt::Write as _;
use std::path::Path;

use depthvo_core::evalkit::Trajectory;
use depthvo_core::se3::SE3Transform;
use nalgebra::{Matrix3, Vector3};

use crate::error::{self, Error, Result};

/// Largest deviation from orthonormality accepted (and then projected out) on load.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-4;

pub fn parse_pose_line(line: &str, origin: &Path, line_no: usize) -> Result<SE3Transform> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(origin, line_no, format!("invalid number {t:?}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 12 {
        return Err(Error::parse(origin, line_no, format!("expected 12 numbers, found {}", values.len())));
    }
    let rotation = Matrix3::from_fn(|r, c| values[r * 4 + c]);
    let translation = Vector3::new(values[3], values[7], values[11]);
    SE3Transform::from_approximate(rotation, translation, ORTHONORMALITY_TOLERANCE)
        .map_err(|e| Error::parse(origin, line_no, e.to_string()))
}

/// Parses pose text; blank lines are ignored and frames are numbered from 0.
pub fn parse_poses(text: &str, origin: &Path) -> Result<Trajectory> {
    let poses = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_pose_line(l, origin, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::from_poses(poses))
}

pub fn format_pose_line(t: &SE3Transform) -> String {
    let (r, p) = (t.rotation(), t.translation());
    let mut s = String::new();
    for row in 0..3 {
        for c in 0..3 {
            write!(s, "{:e} ", r[(row, c)]).unwrap();
        }
        write!(s, "{:e}", p[row]).unwrap();
        if row < 2 {
            s.push(' ');
        }
    }
    s
}

pub fn format_poses(poses: &[SE3Transform]) -> String {
    poses.iter().map(|p| format_pose_line(p) + "\n").collect()
}

pub fn load_kitti_poses(path: &Path) -> Result<Trajectory> {
    parse_poses(&error::read_text(path)?, path)
}

pub fn save_kitti_poses(path: &Path, poses: &[SE3Transform]) -> Result<()> {
    error::write(path, format_poses(poses))
}
