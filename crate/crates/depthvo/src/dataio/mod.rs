//! File formats and on-disk sequence layout.

pub mod calib;
pub mod checkpoint;
pub mod pfm;
pub mod pnm;
pub mod poses;
pub mod sequence;

pub use calib::{load_calibration, save_calibration, Calibration};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pfm::{load_pfm, save_pfm};
pub use pnm::{load_image, save_image};
pub use poses::{load_kitti_poses, save_kitti_poses};
pub use sequence::{load_sequence, write_sequence, SequenceManifest};
