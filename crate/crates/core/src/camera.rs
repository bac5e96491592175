//! Pinhole intrinsics and the per-pixel epipolar projection used by view synthesis.
//!
//! Pixel centers sit at integer coordinates: column `c`, row `r` is the point
//! `(x, y) = (c, r)`. For every reference pixel `p` with depth `D(p)` the live
//! coordinate is `K T D(p) K^-1 p`.

use alloc::vec::Vec;

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, ValidityMask};
use crate::se3::{self, SE3Transform, Twist};

/// Points at or behind this depth (meters) are masked invalid.
pub const Z_MIN: f64 = 1e-3;

/// Projections this close outside the image are snapped onto its border,
/// so round-off on the outermost pixels does not discard them.
pub const BOUNDS_SLACK: f64 = 1e-9;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Snaps `p` into `[0, max_x] x [0, max_y]` if it lies within [`BOUNDS_SLACK`].
#[inline]
pub(crate) fn snap_into_bounds(p: Vector2<f64>, max_x: f64, max_y: f64) -> Option<Vector2<f64>> {
    let inside = |v: f64, max: f64| v >= -BOUNDS_SLACK && v <= max + BOUNDS_SLACK;
    if inside(p.x, max_x) && inside(p.y, max_y) {
        Some(Vector2::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y)))
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::NonFinite("principal point"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics after resampling the image by `(sx, sy)`.
    ///
    /// Uses the pixel-center convention `x' = (x + 0.5) s - 0.5`, which matches
    /// area and half-pixel bilinear resampling.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        Self::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
        )
    }

    /// Unit-depth ray `K^-1 (x, y, 1)`.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Camera-frame point seen at pixel `p` with depth `depth` (meters).
pub fn backproject(p: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(k.ray(p.x, p.y) * depth)
}

/// Pixel coordinate of a camera-frame point; the flag is false for `Z <= Z_MIN`.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> (Vector2<f64>, bool) {
    if !(point.z > Z_MIN) {
        return (Vector2::new(-1.0, -1.0), false);
    }
    let p = Vector2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    );
    let finite = p.x.is_finite() && p.y.is_finite();
    (if finite { p } else { Vector2::new(-1.0, -1.0) }, finite)
}

/// Partials of one pixel's projected coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpJacobian {
    /// `d(x, y) / d depth`.
    pub depth: Vector2<f64>,
    /// `d(x, y) / d[u, v]`; zero when no twist was supplied.
    pub twist: Matrix2x6,
}

impl WarpJacobian {
    pub fn zero() -> Self {
        Self {
            depth: Vector2::zeros(),
            twist: Matrix2x6::zeros(),
        }
    }
}

/// Per-pixel sampling coordinates into a live image.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    coords: Vec<Vector2<f64>>,
    mask: ValidityMask,
    jacobians: Option<Vec<WarpJacobian>>,
}

impl WarpField {
    /// Builds a field from explicit coordinates. `mask` is ANDed with finiteness.
    pub fn new(height: usize, width: usize, coords: Vec<Vector2<f64>>, mask: ValidityMask) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::Shape(alloc::format!(
                "{} coordinates for a {height}x{width} field",
                coords.len()
            )));
        }
        mask.ensure_matches(height, width)?;
        let mut mask = mask;
        let mut coords = coords;
        for (i, c) in coords.iter_mut().enumerate() {
            if !(c.x.is_finite() && c.y.is_finite()) {
                *c = Vector2::new(-1.0, -1.0);
                mask.set(i / width, i % width, false);
            }
        }
        Ok(Self {
            height,
            width,
            coords,
            mask,
            jacobians: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[Vector2<f64>] {
        &self.coords
    }

    #[inline]
    pub fn coord(&self, row: usize, col: usize) -> Vector2<f64> {
        self.coords[row * self.width + col]
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn jacobians(&self) -> Option<&[WarpJacobian]> {
        self.jacobians.as_deref()
    }
}

fn check_depth_grid(depth: &ImageGrid) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::DimensionMismatch {
            expected: (depth.height(), depth.width(), 1),
            found: depth.dims(),
        });
    }
    Ok(())
}

/// Applies backproject, transform and project at every pixel.
///
/// Pixels with non-positive depth, `Z <= Z_MIN` after the transform, or a
/// projection outside `[0, W-1] x [0, H-1]` are masked invalid.
pub fn epipolar_warp_field(depth: &ImageGrid, t: &SE3Transform, k: &Intrinsics) -> Result<WarpField> {
    build_field(depth, t, None, k, false)
}

/// Like [`epipolar_warp_field`] but also caches per-pixel partials.
///
/// The depth partial is always filled. The twist partial is filled when
/// `twist` is given, in which case `t` must be the transform of that twist.
pub fn epipolar_warp_field_differentiable(
    depth: &ImageGrid,
    t: &SE3Transform,
    twist: Option<&Twist>,
    k: &Intrinsics,
) -> Result<WarpField> {
    build_field(depth, t, twist, k, true)
}

/// Per-pixel partials of the projected coordinates with respect to each
/// pixel's depth and the six twist parameters. Invalid pixels get zeros.
pub fn warp_field_jacobians(depth: &ImageGrid, twist: &Twist, k: &Intrinsics) -> Result<Vec<WarpJacobian>> {
    let t = se3::twist_to_transform(twist);
    let field = build_field(depth, &t, Some(twist), k, true)?;
    Ok(field.jacobians.unwrap_or_default())
}

fn build_field(
    depth: &ImageGrid,
    t: &SE3Transform,
    twist: Option<&Twist>,
    k: &Intrinsics,
    with_jacobians: bool,
) -> Result<WarpField> {
    check_depth_grid(depth)?;
    let (h, w) = (depth.height(), depth.width());
    let (max_x, max_y) = ((w as f64) - 1.0, (h as f64) - 1.0);
    let mut coords = Vec::with_capacity(h * w);
    let mut mask = ValidityMask::all_valid(h, w);
    let mut jacobians = with_jacobians.then(|| Vec::with_capacity(h * w));
    let rotation = *t.rotation();

    for r in 0..h {
        for c in 0..w {
            let d = depth.get(r, c, 0);
            let ray = k.ray(c as f64, r as f64);
            let mut valid = d > 0.0;
            let mut coord = Vector2::new(-1.0, -1.0);
            let mut jac = WarpJacobian::zero();
            if valid {
                let point = ray * d;
                let q = se3::transform_point(t, &point);
                let (p, ok) = project(&q, k);
                let snapped = if ok { snap_into_bounds(p, max_x, max_y) } else { None };
                valid = snapped.is_some();
                if ok {
                    coord = snapped.unwrap_or(p);
                }
                if valid && with_jacobians {
                    let inv_z = 1.0 / q.z;
                    let d_proj = SMatrix::<f64, 2, 3>::new(
                        k.fx * inv_z,
                        0.0,
                        -k.fx * q.x * inv_z * inv_z,
                        0.0,
                        k.fy * inv_z,
                        -k.fy * q.y * inv_z * inv_z,
                    );
                    jac.depth = d_proj * (rotation * ray);
                    if let Some(tw) = twist {
                        jac.twist = d_proj * se3::twist_jacobians(tw, &point);
                    }
                }
            }
            if !valid {
                mask.set(r, c, false);
            }
            coords.push(coord);
            if let Some(js) = jacobians.as_mut() {
                js.push(jac);
            }
        }
    }
    Ok(WarpField {
        height: h,
        width: w,
        coords,
        mask,
        jacobians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::test_util::{random_twist, rng};
    use crate::se3::twist_to_transform;
    use proptest::prelude::*;
    use rand::Rng;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 25.0).unwrap()
    }

    #[test]
    fn backproject_examples() {
        let k = k100();
        let p = backproject(Vector2::new(50.0, 25.0), 5.0, &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 5.0));
        let p = backproject(Vector2::new(60.0, 30.0), 10.0, &k).unwrap();
        assert!((p - Vector3::new(1.0, 0.5, 10.0)).norm() < 1e-15);
        assert!(matches!(
            backproject(Vector2::new(1.0, 1.0), 0.0, &k),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let (p, ok) = project(&Vector3::new(0.0, 0.0, 5.0), &k);
        assert!(ok);
        assert_eq!(p, Vector2::new(50.0, 25.0));
        let (_, ok) = project(&Vector3::new(1.0, 1.0, 0.0), &k);
        assert!(!ok);
        let (p, ok) = project(&Vector3::new(1.0, 0.5, 10.0), &k);
        assert!(ok);
        assert!((p - Vector2::new(60.0, 30.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_transform_maps_pixels_to_themselves() {
        let k = Intrinsics::new(40.0, 42.0, 11.5, 7.5).unwrap();
        let mut r = rng(1);
        let depth = ImageGrid::from_fn(16, 24, 1, |_, _, _| r.random_range(0.5..30.0)).unwrap();
        let field = epipolar_warp_field(&depth, &SE3Transform::identity(), &k).unwrap();
        assert_eq!(field.mask().count_valid(), 16 * 24);
        for row in 0..16 {
            for col in 0..24 {
                let c = field.coord(row, col);
                assert!((c.x - col as f64).abs() < 1e-9 && (c.y - row as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disparity_law_under_stereo_translation() {
        let k = Intrinsics::new(100.0, 100.0, 20.0, 10.0).unwrap();
        let depth = ImageGrid::filled(20, 40, 1, 10.0);
        let t = SE3Transform::from_translation(Vector3::new(-0.5, 0.0, 0.0));
        let field = epipolar_warp_field(&depth, &t, &k).unwrap();
        for row in 0..20 {
            for col in 0..40 {
                let c = field.coord(row, col);
                assert!((c.x - (col as f64 - 5.0)).abs() < 1e-9);
                assert!((c.y - row as f64).abs() < 1e-9);
                assert_eq!(field.mask().get(row, col), col >= 5);
            }
        }
    }

    #[test]
    fn translation_vanishes_at_infinity() {
        let k = k100();
        let depth = ImageGrid::filled(10, 12, 1, 1e6);
        let t = SE3Transform::from_translation(Vector3::new(0.3, -0.2, 0.5));
        let field = epipolar_warp_field(&depth, &t, &k).unwrap();
        for row in 0..10 {
            for col in 0..12 {
                let c = field.coord(row, col);
                assert!((c - Vector2::new(col as f64, row as f64)).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn behind_camera_and_bad_depth_are_masked() {
        let k = k100();
        let mut depth = ImageGrid::filled(4, 4, 1, 2.0);
        depth.set(0, 0, 0, 0.0);
        let t = SE3Transform::from_translation(Vector3::new(0.0, 0.0, -3.0));
        let field = epipolar_warp_field(&depth, &t, &k).unwrap();
        assert_eq!(field.mask().count_valid(), 0);
        let field = epipolar_warp_field(&depth, &SE3Transform::identity(), &k).unwrap();
        assert!(!field.mask().get(0, 0));
        assert!(epipolar_warp_field(&ImageGrid::zeros(2, 2, 2), &t, &k).is_err());
    }

    fn coords_for(depth: &ImageGrid, tw: &Twist, k: &Intrinsics) -> Vec<Vector2<f64>> {
        epipolar_warp_field(depth, &twist_to_transform(tw), k).unwrap().coords().to_vec()
    }

    #[test]
    fn stereo_depth_partial_sign() {
        let k = Intrinsics::new(100.0, 100.0, 20.0, 10.0).unwrap();
        let depth = ImageGrid::filled(20, 40, 1, 10.0);
        let tw = Twist::new(Vector3::zeros(), Vector3::new(-0.5, 0.0, 0.0)).unwrap();
        let js = warp_field_jacobians(&depth, &tw, &k).unwrap();
        let j = js[10 * 40 + 20];
        // x = col - fx b / Z, so dx/dZ = +fx b / Z^2
        assert!((j.depth.x - 100.0 * 0.5 / 100.0).abs() < 1e-12);
        assert!(j.depth.y.abs() < 1e-12);
    }

    #[test]
    fn identity_translation_z_column_matches_closed_form() {
        let k = Intrinsics::new(80.0, 90.0, 15.5, 9.5).unwrap();
        let depth = ImageGrid::from_fn(20, 32, 1, |r, c, _| 4.0 + 0.1 * r as f64 + 0.05 * c as f64).unwrap();
        let js = warp_field_jacobians(&depth, &Twist::zero(), &k).unwrap();
        for (i, j) in js.iter().enumerate() {
            let (r, c) = (i / 32, i % 32);
            let p = backproject(Vector2::new(c as f64, r as f64), depth.get(r, c, 0), &k).unwrap();
            let expected = Vector2::new(-k.fx * p.x / (p.z * p.z), -k.fy * p.y / (p.z * p.z));
            assert!((j.twist.column(5) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let k = Intrinsics::new(60.0, 58.0, 15.5, 11.5).unwrap();
        let mut r = rng(41);
        for _ in 0..100 {
            let depth = ImageGrid::from_fn(24, 32, 1, |_, _, _| r.random_range(4.0..12.0)).unwrap();
            let tw = random_twist(&mut r, 0.05, 0.2);
            let row = r.random_range(4..20);
            let col = r.random_range(4..28);
            let idx = row * 32 + col;
            let js = warp_field_jacobians(&depth, &tw, &k).unwrap();
            let a = js[idx];

            let eps = 1e-6;
            let mut dp = depth.clone();
            dp.set(row, col, 0, depth.get(row, col, 0) + eps);
            let mut dm = depth.clone();
            dm.set(row, col, 0, depth.get(row, col, 0) - eps);
            let n_depth = (coords_for(&dp, &tw, &k)[idx] - coords_for(&dm, &tw, &k)[idx]) / (2.0 * eps);
            let rel = (a.depth - n_depth).norm() / n_depth.norm().max(1e-9);
            assert!(rel < 1e-5, "depth partial rel err {rel}");

            let mut n_twist = Matrix2x6::zeros();
            for kk in 0..6 {
                let mut plus = tw.to_array();
                let mut minus = tw.to_array();
                plus[kk] += eps;
                minus[kk] -= eps;
                let cp = coords_for(&depth, &Twist::from_array(plus).unwrap(), &k)[idx];
                let cm = coords_for(&depth, &Twist::from_array(minus).unwrap(), &k)[idx];
                n_twist.set_column(kk, &((cp - cm) / (2.0 * eps)));
            }
            let rel = (a.twist - n_twist).norm() / n_twist.norm();
            assert!(rel < 1e-5, "twist partial rel err {rel}");
        }
    }

    #[test]
    fn scaled_intrinsics_follow_pixel_centers() {
        let k = Intrinsics::new(718.0, 718.0, 607.0, 185.0).unwrap();
        let half = k.scaled(0.5, 0.5).unwrap();
        assert_eq!(half.fx, 359.0);
        assert_eq!(half.cx, 303.25);
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(x in -50.0f64..150.0, y in -50.0f64..80.0, d in 0.01f64..1e4) {
            let k = k100();
            let (p, ok) = project(&backproject(Vector2::new(x, y), d, &k).unwrap(), &k);
            prop_assert!(ok);
            prop_assert!((p.x - x).abs() < 1e-9 && (p.y - y).abs() < 1e-9);
        }

        #[test]
        fn disparity_is_uniform(b in 0.05f64..1.0, z in 2.0f64..50.0) {
            let k = Intrinsics::new(90.0, 90.0, 15.0, 10.0).unwrap();
            let depth = ImageGrid::filled(8, 12, 1, z);
            let t = SE3Transform::from_translation(Vector3::new(-b, 0.0, 0.0));
            let field = epipolar_warp_field(&depth, &t, &k).unwrap();
            for row in 0..8 {
                for col in 0..12 {
                    let c = field.coord(row, col);
                    prop_assert!(((col as f64 - c.x) - 90.0 * b / z).abs() < 1e-9);
                }
            }
        }
    }
}
