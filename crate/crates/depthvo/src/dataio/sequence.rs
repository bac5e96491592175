//! On-disk stereo sequences.
//!
//! ```text
//! sequence/
//!   manifest.txt            frames=N plus optional poses= and depth= entries
//!   calib.txt
//!   image_left/000000.ppm   (or .pgm)
//!   image_right/000000.ppm  missing partners are allowed
//!   poses.txt               optional, KITTI format, camera-to-world
//!   depth/000000.pfm        optional, left-camera depth in meters
//! ```
//!
//! Without a manifest the frames are discovered from `image_left/`.

use std::path::{Path, PathBuf};

use depthvo_core::solver::Frame;
use depthvo_core::synthetic::RenderedFrame;

use super::calib::{load_calibration, parse_key_values, save_calibration, Calibration};
use super::pfm::{load_pfm, save_pfm};
use super::pnm::{load_image, save_image};
use super::poses::{load_kitti_poses, save_kitti_poses};
use crate::error::{self, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CALIB_FILE: &str = "calib.txt";
pub const POSES_FILE: &str = "poses.txt";
pub const LEFT_DIR: &str = "image_left";
pub const RIGHT_DIR: &str = "image_right";
pub const DEPTH_DIR: &str = "depth";

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub left: Vec<PathBuf>,
    pub right: Vec<Option<PathBuf>>,
    pub calibration: Calibration,
    pub poses: Option<PathBuf>,
    pub depth: Option<Vec<PathBuf>>,
}

impl SequenceManifest {
    pub fn frame_count(&self) -> usize {
        self.left.len()
    }
}

pub fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

fn image_in(dir: &Path, index: usize) -> Option<PathBuf> {
    ["ppm", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{}.{ext}", frame_name(index))))
        .find(|p| p.is_file())
}

/// Reads `manifest.txt` (or scans `image_left/`) and the calibration.
pub fn load_manifest(root: &Path) -> Result<SequenceManifest> {
    let calibration = load_calibration(&root.join(CALIB_FILE))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let left_dir = root.join(LEFT_DIR);
    let (frames, poses, depth_dir) = if manifest_path.is_file() {
        let map = parse_key_values(&error::read_text(&manifest_path)?, &manifest_path)?;
        let (line, raw) = map
            .get("frames")
            .ok_or_else(|| Error::parse(&manifest_path, 0, "missing key frames"))?;
        let frames: usize = raw
            .parse()
            .map_err(|_| Error::parse(&manifest_path, *line, "invalid frame count"))?;
        let poses = map.get("poses").map(|(_, v)| root.join(v));
        let depth = map.get("depth").map(|(_, v)| root.join(v));
        (frames, poses, depth)
    } else {
        let mut frames = 0;
        while image_in(&left_dir, frames).is_some() {
            frames += 1;
        }
        let poses = Some(root.join(POSES_FILE)).filter(|p| p.is_file());
        let depth = Some(root.join(DEPTH_DIR)).filter(|p| p.is_dir());
        (frames, poses, depth)
    };
    if frames == 0 {
        return Err(Error::Data(format!("no frames found under {}", left_dir.display())));
    }
    let left = (0..frames)
        .map(|i| {
            image_in(&left_dir, i).ok_or_else(|| Error::Data(format!("missing left image {} in {}", frame_name(i), left_dir.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let right = (0..frames).map(|i| image_in(&root.join(RIGHT_DIR), i)).collect();
    let depth = depth_dir.map(|d| (0..frames).map(|i| d.join(format!("{}.pfm", frame_name(i)))).collect());
    Ok(SequenceManifest {
        root: root.to_path_buf(),
        left,
        right,
        calibration,
        poses,
        depth,
    })
}

/// Loads every frame listed in the manifest.
pub fn load_frames(manifest: &SequenceManifest) -> Result<Vec<Frame>> {
    let poses = match &manifest.poses {
        Some(p) => {
            let traj = load_kitti_poses(p)?;
            if traj.len() != manifest.frame_count() {
                return Err(Error::Data(format!(
                    "{} has {} poses for {} frames",
                    p.display(),
                    traj.len(),
                    manifest.frame_count()
                )));
            }
            Some(traj.poses().to_vec())
        }
        None => None,
    };
    (0..manifest.frame_count())
        .map(|i| {
            Ok(Frame {
                left: load_image(&manifest.left[i])?,
                right: manifest.right[i].as_deref().map(load_image).transpose()?,
                depth: manifest.depth.as_ref().map(|d| load_pfm(&d[i])).transpose()?,
                pose: poses.as_ref().map(|p| p[i]),
            })
        })
        .collect()
}

pub fn load_sequence(root: &Path) -> Result<(SequenceManifest, Vec<Frame>)> {
    let manifest = load_manifest(root)?;
    let frames = load_frames(&manifest)?;
    Ok((manifest, frames))
}

/// Writes rendered frames, calibration, poses, depth maps and the manifest.
pub fn write_sequence(root: &Path, frames: &[RenderedFrame], calibration: &Calibration) -> Result<SequenceManifest> {
    let mut manifest = SequenceManifest {
        root: root.to_path_buf(),
        left: Vec::new(),
        right: Vec::new(),
        calibration: *calibration,
        poses: Some(root.join(POSES_FILE)),
        depth: Some(Vec::new()),
    };
    for (i, f) in frames.iter().enumerate() {
        let ext = if f.left.channels() == 1 { "pgm" } else { "ppm" };
        let name = frame_name(i);
        let left = root.join(LEFT_DIR).join(format!("{name}.{ext}"));
        let right = root.join(RIGHT_DIR).join(format!("{name}.{ext}"));
        let depth = root.join(DEPTH_DIR).join(format!("{name}.pfm"));
        save_image(&left, &f.left)?;
        save_image(&right, &f.right)?;
        save_pfm(&depth, &f.depth)?;
        manifest.left.push(left);
        manifest.right.push(Some(right));
        manifest.depth.as_mut().unwrap().push(depth);
    }
    save_calibration(&root.join(CALIB_FILE), calibration)?;
    let poses: Vec<_> = frames.iter().map(|f| f.pose).collect();
    save_kitti_poses(&root.join(POSES_FILE), &poses)?;
    error::write(
        &root.join(MANIFEST_FILE),
        format!("frames={}\nposes={POSES_FILE}\ndepth={DEPTH_DIR}\n", frames.len()),
    )?;
    Ok(manifest)
}
