//! Differentiable bilinear sampling and inverse-warp view synthesis.
//!
//! A sample at `(x, y)` interpolates the four pixels of the cell whose
//! top-left corner is `(floor x, floor y)`, clamped so the cell stays inside
//! the image. Coordinates outside `[0, W-1] x [0, H-1]` are masked invalid and
//! their output value is zero; nothing is clamped or padded.
//!
//! At exact integer coordinates the coordinate gradient is the slope of the
//! right/lower cell (the last row and column use the cell to their left/top).

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector2;

use crate::camera::{self, Intrinsics, WarpField};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValidityMask};
use crate::se3::SE3Transform;

/// Per-channel partials of sampled values with respect to the sampling coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradient {
    pub dx: ImageGrid,
    pub dy: ImageGrid,
}

/// Bilinear cell for one coordinate: top-left index and fractional offsets.
#[derive(Clone, Copy, Debug)]
struct Cell {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn locate(live: &ImageGrid, p: Vector2<f64>) -> Option<Cell> {
    let (h, w) = (live.height(), live.width());
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let p = camera::snap_into_bounds(p, max_x, max_y)?;
    let x0 = (p.x as usize).min(w - 2);
    let y0 = (p.y as usize).min(h - 2);
    Some(Cell {
        x0,
        y0,
        fx: p.x - x0 as f64,
        fy: p.y - y0 as f64,
    })
}

fn check_live(live: &ImageGrid) -> Result<()> {
    if live.height() < 2 || live.width() < 2 {
        return Err(Error::Degenerate("bilinear sampling needs a live image of at least 2x2"));
    }
    if live.channels() == 0 {
        return Err(Error::Degenerate("live image has no channels"));
    }
    Ok(())
}

/// Samples `live` at every coordinate of `field`.
///
/// The returned mask is the field's mask ANDed with the in-bounds test.
pub fn bilinear_sample(live: &ImageGrid, field: &WarpField) -> Result<(ImageGrid, ValidityMask)> {
    let (values, _, mask) = sample_impl(live, field, false)?;
    Ok((values, mask))
}

/// Analytic `d(sample)/dx` and `d(sample)/dy` per channel; zero where invalid.
pub fn bilinear_sample_gradient(live: &ImageGrid, field: &WarpField) -> Result<SampleGradient> {
    let (_, grad, _) = sample_impl(live, field, true)?;
    Ok(grad.expect("gradient requested"))
}

/// Samples and differentiates in one pass.
pub fn sample_with_gradient(
    live: &ImageGrid,
    field: &WarpField,
) -> Result<(ImageGrid, SampleGradient, ValidityMask)> {
    let (values, grad, mask) = sample_impl(live, field, true)?;
    Ok((values, grad.expect("gradient requested"), mask))
}

fn sample_impl(
    live: &ImageGrid,
    field: &WarpField,
    with_gradient: bool,
) -> Result<(ImageGrid, Option<SampleGradient>, ValidityMask)> {
    check_live(live)?;
    let (h, w, ch) = (field.height(), field.width(), live.channels());
    let mut out = vec![0.0; h * w * ch];
    let mut gx = if with_gradient { vec![0.0; h * w * ch] } else { Vec::new() };
    let mut gy = if with_gradient { vec![0.0; h * w * ch] } else { Vec::new() };
    let mut mask = field.mask().clone();
    let data = live.data();
    let stride = live.width() * ch;

    for (i, &p) in field.coords().iter().enumerate() {
        let (r, c) = (i / w, i % w);
        if !mask.get(r, c) {
            continue;
        }
        let Some(cell) = locate(live, p) else {
            mask.set(r, c, false);
            continue;
        };
        let base = cell.y0 * stride + cell.x0 * ch;
        let (fx, fy) = (cell.fx, cell.fy);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for k in 0..ch {
            let i00 = data[base + k];
            let i01 = data[base + ch + k];
            let i10 = data[base + stride + k];
            let i11 = data[base + stride + ch + k];
            out[i * ch + k] = w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11;
            if with_gradient {
                gx[i * ch + k] = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10);
                gy[i * ch + k] = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01);
            }
        }
    }

    let values = ImageGrid::new(h, w, ch, out)?;
    let grad = if with_gradient {
        Some(SampleGradient {
            dx: ImageGrid::new(h, w, ch, gx)?,
            dy: ImageGrid::new(h, w, ch, gy)?,
        })
    } else {
        None
    };
    Ok((values, grad, mask))
}

/// Reconstructs the reference view from `live` given reference depth and `T_{ref->live}`.
///
/// Works for any channel count, so feature maps are synthesized exactly like
/// color images.
pub fn synthesize_view(
    live: &ImageGrid,
    depth: &ImageGrid,
    t: &SE3Transform,
    k: &Intrinsics,
) -> Result<(ImageGrid, ValidityMask)> {
    if depth.height() != live.height() || depth.width() != live.width() {
        return Err(Error::DimensionMismatch {
            expected: (live.height(), live.width(), 1),
            found: depth.dims(),
        });
    }
    let field = camera::epipolar_warp_field(depth, t, k)?;
    bilinear_sample(live, &field)
}
