//! Ray-cast renderer for textured heightfield scenes with known depth and poses.
//!
//! The world surface is `Z = f(X, Y)` and is painted with value noise indexed
//! by the surface point's `(X, Y)`. Each pixel's ray is intersected with the
//! surface directly, so rendering shares no code with inverse warping.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValueRange};
use crate::math;
use crate::se3::{self, SE3Transform, Twist};
use crate::solver::{self, Frame, TrainingInstance};

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    /// `Z = depth`.
    FrontoParallel { depth: f64 },
    /// `Z = depth + slope_x X + slope_y Y`.
    Slanted { depth: f64, slope_x: f64, slope_y: f64 },
    /// `Z = depth` plus a seeded sum of low-frequency sinusoids.
    Smooth { depth: f64, amplitude: f64, wavelength: f64, seed: u64 },
}

impl Geometry {
    fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            Geometry::FrontoParallel { depth } => depth,
            Geometry::Slanted {
                depth,
                slope_x,
                slope_y,
            } => depth + slope_x * x + slope_y * y,
            Geometry::Smooth {
                depth,
                amplitude,
                wavelength,
                seed,
            } => {
                let mut z = depth;
                for k in 0..3u64 {
                    let a = unit_hash(seed, k, 0, 0) * core::f64::consts::TAU;
                    let phase = unit_hash(seed, k, 1, 0) * core::f64::consts::TAU;
                    let scale = 1.0 + k as f64 * 0.7;
                    let (dx, dy) = (math::cos(a), math::sin(a));
                    let arg = core::f64::consts::TAU * scale * (dx * x + dy * y) / wavelength + phase;
                    z += amplitude / (1.0 + k as f64) * math::sin(arg) / 1.83;
                }
                z
            }
        }
    }
}

/// A vertical strip `x0 <= X <= x1` (world meters) painted a flat colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexturelessBand {
    pub x0: f64,
    pub x1: f64,
    /// Width of the smooth transition on each side, in meters.
    pub blend: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub seed: u64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, in meters.
    pub cell: f64,
    pub band: Option<TexturelessBand>,
}

impl Texture {
    /// RGB value in `[0, 1]` at surface point `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for (ch, out) in rgb.iter_mut().enumerate() {
            let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0 / self.cell);
            for o in 0..self.octaves {
                sum += amp * value_noise(self.seed, ch as u64 * 64 + o as u64, x * freq, y * freq);
                norm += amp;
                amp *= 0.5;
                freq *= 2.0;
            }
            // stretch contrast around 0.5; the weighted mean of noise clusters near it
            *out = (0.5 + 1.6 * (sum / norm - 0.5)).clamp(0.0, 1.0);
        }
        if let Some(b) = self.band {
            let w = band_weight(&b, x);
            for v in &mut rgb {
                *v = (1.0 - w) * *v + w * 0.5;
            }
        }
        rgb
    }
}

/// 1 inside the band, 0 outside, quintic ramp across `blend`.
fn band_weight(b: &TexturelessBand, x: f64) -> f64 {
    let d = (x - b.x0).min(b.x1 - x);
    if d >= 0.0 {
        1.0
    } else if b.blend > 0.0 && d > -b.blend {
        fade(1.0 + d / b.blend)
    } else {
        0.0
    }
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// SplitMix64-style hash of lattice coordinates to `[0, 1)`.
fn unit_hash(seed: u64, stream: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((ix as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
        .wrapping_add((iy as u64).wrapping_mul(0xABC9_8388_FB8F_AC03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, stream: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (math::floor(x), math::floor(y));
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let v = |dx: i64, dy: i64| unit_hash(seed, stream, ix + dx, iy + dy);
    let top = v(0, 0) + tx * (v(1, 0) - v(0, 0));
    let bot = v(0, 1) + tx * (v(1, 1) - v(0, 1));
    top + ty * (bot - top)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub geometry: Geometry,
    pub texture: Texture,
    /// Left camera-to-world pose of every frame.
    pub path: Vec<Twist>,
    pub intrinsics: Intrinsics,
    pub baseline: f64,
    pub height: usize,
    pub width: usize,
    pub z_min: f64,
    pub z_max: f64,
}

/// Built-in scenes used by tests and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Plane,
    Slanted,
    Smooth,
    TexturelessBand,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Plane, Preset::Slanted, Preset::Smooth, Preset::TexturelessBand];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Plane => "plane",
            Preset::Slanted => "slanted",
            Preset::Smooth => "smooth",
            Preset::TexturelessBand => "textureless-band",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Plane depth of the presets; gives a 5 px stereo disparity.
pub const PRESET_DEPTH: f64 = 8.0;
/// Forward motion per frame of the preset camera path, in meters.
pub const PRESET_STEP: f64 = 0.4;

impl SyntheticScene {
    /// 96x64 preset scene with `frames` frames. The camera drives forward with
    /// a gentle seeded weave.
    pub fn preset(preset: Preset, frames: usize, seed: u64) -> Result<Self> {
        let geometry = match preset {
            Preset::Plane | Preset::TexturelessBand => Geometry::FrontoParallel { depth: PRESET_DEPTH },
            Preset::Slanted => Geometry::Slanted {
                depth: PRESET_DEPTH,
                slope_x: 0.35,
                slope_y: -0.2,
            },
            Preset::Smooth => Geometry::Smooth {
                depth: PRESET_DEPTH,
                amplitude: 1.2,
                wavelength: 9.0,
                seed: seed ^ 0x5eed,
            },
        };
        let band = (preset == Preset::TexturelessBand).then_some(TexturelessBand {
            x0: -1.2,
            x1: 1.2,
            blend: 0.6,
        });
        let path = (0..frames)
            .map(|k| {
                let t = k as f64;
                let phase = unit_hash(seed, 999, 0, 0) * core::f64::consts::TAU;
                let yaw = 0.004 * math::sin(0.9 * t + phase);
                let pitch = 0.003 * math::cos(0.7 * t + phase);
                let lateral = 0.05 * math::sin(0.6 * t + phase);
                Twist::new(Vector3::new(pitch, yaw, 0.0), Vector3::new(lateral, 0.0, PRESET_STEP * t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry,
            texture: Texture {
                seed,
                octaves: 2,
                cell: 2.5,
                band,
            },
            path,
            intrinsics: Intrinsics::new(80.0, 80.0, 47.5, 31.5)?,
            baseline: 0.5,
            height: 64,
            width: 96,
            z_min: 0.5,
            z_max: 100.0,
        })
    }
}

/// One rendered frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub left: ImageGrid,
    pub right: ImageGrid,
    /// Left-camera depth in meters.
    pub depth: ImageGrid,
    /// Left camera-to-world pose.
    pub pose: SE3Transform,
}

impl From<RenderedFrame> for Frame {
    fn from(f: RenderedFrame) -> Self {
        Frame {
            left: f.left,
            right: Some(f.right),
            depth: Some(f.depth),
            pose: Some(f.pose),
        }
    }
}

/// Distance along `dir` from `origin` to the surface, for a ray with `dir.z > 0`.
fn intersect(g: &Geometry, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let gap = |t: f64| {
        let p = origin + dir * t;
        p.z - g.height(p.x, p.y)
    };
    if let Geometry::FrontoParallel { depth } = *g {
        return (dir.z > 0.0).then(|| (depth - origin.z) / dir.z);
    }
    if let Geometry::Slanted {
        depth,
        slope_x,
        slope_y,
    } = *g
    {
        let denom = dir.z - slope_x * dir.x - slope_y * dir.y;
        let t = (depth + slope_x * origin.x + slope_y * origin.y - origin.z) / denom;
        return (denom > 0.0 && t > 0.0).then_some(t);
    }
    // march to bracket the first crossing, then bisect
    let step = 0.05;
    let mut lo = 0.0;
    let mut hi = step;
    while gap(hi) < 0.0 {
        lo = hi;
        hi += step;
        if hi > t_max {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

fn render_view(scene: &SyntheticScene, pose: &SE3Transform, frame: usize) -> Result<(ImageGrid, ImageGrid)> {
    let origin = *pose.translation();
    if origin.z >= scene.geometry.height(origin.x, origin.y) {
        return Err(Error::CameraInsideGeometry(frame));
    }
    let (h, w) = (scene.height, scene.width);
    let k = &scene.intrinsics;
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // camera-frame ray with unit z, so the hit distance is the depth
            let ray = k.ray(c as f64, r as f64);
            let dir = pose.rotation() * ray;
            let z = intersect(&scene.geometry, &origin, &dir, scene.z_max)
                .filter(|&z| z >= scene.z_min && z <= scene.z_max)
                .ok_or_else(|| {
                    Error::InvalidParameter(alloc::format!(
                        "frame {frame}: pixel ({r}, {c}) sees no surface within [{}, {}] m",
                        scene.z_min,
                        scene.z_max
                    ))
                })?;
            let p = origin + dir * z;
            rgb.extend_from_slice(&scene.texture.sample(p.x, p.y));
            depth.push(z);
        }
    }
    Ok((
        ImageGrid::new(h, w, 3, rgb)?.with_range(ValueRange::Unit),
        ImageGrid::new(h, w, 1, depth)?,
    ))
}

/// Renders left and right views plus left depth for every frame of the path.
pub fn render_frames(scene: &SyntheticScene) -> Result<Vec<RenderedFrame>> {
    if !(scene.baseline > 0.0) || scene.height < 2 || scene.width < 2 || !(scene.z_min > 0.0 && scene.z_max > scene.z_min) {
        return Err(Error::InvalidParameter("scene needs a positive baseline, at least 2x2 pixels and 0 < z_min < z_max".into()));
    }
    // right camera sits at +baseline along the left camera's x axis
    let right_offset = SE3Transform::from_translation(Vector3::new(scene.baseline, 0.0, 0.0));
    scene
        .path
        .iter()
        .enumerate()
        .map(|(i, tw)| {
            let pose = se3::twist_to_transform(tw);
            let (left, depth) = render_view(scene, &pose, i)?;
            let (right, _) = render_view(scene, &pose.compose(&right_offset), i)?;
            Ok(RenderedFrame {
                left,
                right,
                depth,
                pose,
            })
        })
        .collect()
}

/// Renders the scene and pairs consecutive frames into instances with ground truth.
pub fn render_synthetic(scene: &SyntheticScene) -> Result<Vec<TrainingInstance>> {
    let frames: Vec<Frame> = render_frames(scene)?.into_iter().map(Frame::from).collect();
    solver::assemble_instances(&frames, scene.intrinsics, scene.baseline)
}
