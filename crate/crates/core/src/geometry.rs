//! Spherical camera model, SE(3) algebra and range-image construction.
//!
//! Sensor frames follow the LiDAR convention: `x` forward, `y` left, `z` up.
//! Image columns grow with decreasing azimuth and rows grow with decreasing
//! elevation, so the top-left pixel looks up and to the left.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

/// 3D point or direction in meters. The frame is carried by context.
pub type Vec3 = Vector3<f64>;

/// Errors raised by the projection model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has zero norm, spherical coordinates are undefined")]
    ZeroNorm,
    #[error("range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("degenerate field of view: horizontal {horizontal} rad, vertical {vertical} rad")]
    DegenerateFov { horizontal: f64, vertical: f64 },
    #[error("image must be at least 2x2 pixels, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("need at least two points to estimate a camera, got {0}")]
    TooFewPoints(usize),
}

/// Continuous image coordinates: `u` is the column, `v` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Azimuth and elevation of a point, in radians.
///
/// The azimuth of a point on the `z` axis is `atan2(0, 0) = 0`.
pub fn spherical_coords(p: &Vec3) -> Result<(f64, f64), GeometryError> {
    let n2 = p.norm_squared();
    if !(n2 > 0.0) {
        return Err(GeometryError::ZeroNorm);
    }
    let azimuth = p.y.atan2(p.x);
    let elevation = p.z.atan2(p.x.hypot(p.y));
    Ok((azimuth, elevation))
}

/// Unit direction for an azimuth/elevation pair.
pub fn direction_from_angles(azimuth: f64, elevation: f64) -> Vec3 {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

/// Spherical projection camera.
///
/// `K` maps `(azimuth, elevation, 1)` to homogeneous pixel coordinates. The
/// estimated camera places the field-of-view extremes on pixel centers `0`
/// and `W - 1` (resp. `H - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalCamera {
    pub k: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
}

impl SphericalCamera {
    /// Builds the camera for explicit field-of-view bounds.
    pub fn from_fov(
        width: usize,
        height: usize,
        azimuth_min: f64,
        azimuth_max: f64,
        elevation_min: f64,
        elevation_max: f64,
    ) -> Result<Self, GeometryError> {
        if width < 2 || height < 2 {
            return Err(GeometryError::ImageTooSmall { width, height });
        }
        let fov_h = azimuth_max - azimuth_min;
        let fov_v = elevation_max - elevation_min;
        if !(fov_h > 0.0 && fov_v > 0.0) {
            return Err(GeometryError::DegenerateFov {
                horizontal: fov_h,
                vertical: fov_v,
            });
        }
        let w1 = (width - 1) as f64;
        let h1 = (height - 1) as f64;
        let fx = -w1 / fov_h;
        let fy = -h1 / fov_v;
        let cx = 0.5 * w1 * (1.0 + (azimuth_max + azimuth_min) / fov_h);
        let cy = 0.5 * h1 * (1.0 + (elevation_max + elevation_min) / fov_v);
        #[rustfmt::skip]
        let k = Matrix3::new(
            fx, 0.0, cx,
            0.0, fy, cy,
            0.0, 0.0, 1.0,
        );
        Ok(Self {
            k,
            width,
            height,
            azimuth_min,
            azimuth_max,
            elevation_min,
            elevation_max,
        })
    }

    /// Horizontal focal term (pixels per radian of azimuth, negative).
    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    /// Number of pixel columns covering a full turn of azimuth.
    pub fn columns_per_turn(&self) -> f64 {
        2.0 * PI * self.fx().abs()
    }

    /// Continuous pixel of an azimuth/elevation pair.
    pub fn angles_to_pixel(&self, azimuth: f64, elevation: f64) -> Pixel {
        Pixel::new(
            self.fx() * azimuth + self.cx(),
            self.fy() * elevation + self.cy(),
        )
    }

    pub fn pixel_to_angles(&self, px: Pixel) -> (f64, f64) {
        (
            (px.u - self.cx()) / self.fx(),
            (px.v - self.cy()) / self.fy(),
        )
    }

    /// Unit ray through a pixel.
    pub fn pixel_ray(&self, px: Pixel) -> Vec3 {
        let (az, el) = self.pixel_to_angles(px);
        direction_from_angles(az, el)
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u <= (self.width - 1) as f64
            && px.v <= (self.height - 1) as f64
    }

    /// Nearest integer pixel `(row, col)` if it falls inside the image.
    pub fn nearest_pixel(&self, px: Pixel) -> Option<(usize, usize)> {
        let c = px.u.round();
        let r = px.v.round();
        if c < 0.0 || r < 0.0 || c > (self.width - 1) as f64 || r > (self.height - 1) as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Angular size of one pixel along the horizontal and vertical axes.
    pub fn angular_pitch(&self) -> (f64, f64) {
        (1.0 / self.fx().abs(), 1.0 / self.fy().abs())
    }
}

/// Projects a point to continuous image coordinates.
pub fn project(cam: &SphericalCamera, p: &Vec3) -> Result<Pixel, GeometryError> {
    let (az, el) = spherical_coords(p)?;
    Ok(cam.angles_to_pixel(az, el))
}

/// Point at range `d` along the ray of pixel `u`.
pub fn back_project(cam: &SphericalCamera, u: Pixel, d: f64) -> Result<Vec3, GeometryError> {
    if !(d > 0.0) {
        return Err(GeometryError::NonPositiveRange(d));
    }
    Ok(cam.pixel_ray(u) * d)
}

/// Estimates the camera from a point cloud expressed at the sensor origin.
///
/// The field of view is taken from the azimuth/elevation extremes of the
/// input and `K` follows the closed form with `fx = -(W-1)/FoV_h` and
/// `fy = -(H-1)/FoV_v`.
pub fn estimate_camera(
    points: &[Vec3],
    width: usize,
    height: usize,
) -> Result<SphericalCamera, GeometryError> {
    let mut bounds = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    let mut count = 0usize;
    for p in points {
        let Ok((az, el)) = spherical_coords(p) else {
            continue;
        };
        count += 1;
        bounds.0 = bounds.0.min(az);
        bounds.1 = bounds.1.max(az);
        bounds.2 = bounds.2.min(el);
        bounds.3 = bounds.3.max(el);
    }
    if count < 2 {
        return Err(GeometryError::TooFewPoints(count));
    }
    SphericalCamera::from_fov(width, height, bounds.0, bounds.1, bounds.2, bounds.3)
}

/// Skew-symmetric matrix of a vector.
pub fn hat(w: &Vec3) -> Matrix3<f64> {
    #[rustfmt::skip]
    let m = Matrix3::new(
        0.0, -w.z, w.y,
        w.z, 0.0, -w.x,
        -w.y, w.x, 0.0,
    );
    m
}

/// Rigid transform. Used as `world_from_sensor` unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation about `z` by `yaw` followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        Self::new(*r.matrix(), t)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, t: Vec3) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Exponential map of `delta = (rho, omega)`: translation part first,
    /// rotation part last.
    pub fn exp(delta: &Vector6<f64>) -> Self {
        let rho = Vec3::new(delta[0], delta[1], delta[2]);
        let omega = Vec3::new(delta[3], delta[4], delta[5]);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = hat(&omega);
        let w2 = w * w;
        let (a, b, c) = if theta < 1e-6 {
            // Taylor expansions of sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3.
            (
                1.0 - theta2 / 6.0,
                0.5 - theta2 / 24.0,
                1.0 / 6.0 - theta2 / 120.0,
            )
        } else {
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let i = Matrix3::identity();
        let rotation = i + w * a + w2 * b;
        let v = i + w * b + w2 * c;
        Self::new(rotation, v * rho).orthonormalized()
    }

    /// Logarithm map, inverse of [`SE3Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let omega = rot.scaled_axis();
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = hat(&omega);
        let w2 = w * w;
        let coeff = if theta < 1e-6 {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / theta2
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w2 * coeff;
        let rho = v_inv * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// `self * other`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose::new(rt, -(rt * self.translation))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Right-multiplicative update `self * exp(delta)` with the rotation
    /// re-orthonormalized.
    pub fn retract(&self, delta: &Vector6<f64>) -> SE3Pose {
        self.compose(&SE3Pose::exp(delta)).orthonormalized()
    }

    /// Projects the rotation back onto SO(3) through its polar factor.
    pub fn orthonormalized(&self) -> SE3Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        SE3Pose::new(r, self.translation)
    }

    /// Rotation angle of the rotation part, radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Exponential map as a free function.
pub fn se3_exp(delta: &Vector6<f64>) -> SE3Pose {
    SE3Pose::exp(delta)
}

pub fn se3_compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    a.compose(b)
}

pub fn se3_apply(t: &SE3Pose, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// Row-major `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }
    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        let i = row * self.width + col;
        &mut self.data[i]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Range image: `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub range: Grid<f64>,
    pub valid_mask: Grid<bool>,
    /// Points discarded because they projected outside the image.
    pub dropped: usize,
}

impl RangeImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            range: Grid::filled(width, height, 0.0),
            valid_mask: Grid::filled(width, height, false),
            dropped: 0,
        }
    }

    /// Builds the image from a dense range grid; non-positive or non-finite
    /// entries become invalid.
    pub fn from_ranges(width: usize, height: usize, ranges: Vec<f64>) -> Self {
        assert_eq!(ranges.len(), width * height);
        let range: Vec<f64> = ranges
            .into_iter()
            .map(|r| if r.is_finite() && r > 0.0 { r } else { 0.0 })
            .collect();
        let valid = range.iter().map(|&r| r > 0.0).collect();
        Self {
            range: Grid {
                width,
                height,
                data: range,
            },
            valid_mask: Grid {
                width,
                height,
                data: valid,
            },
            dropped: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.range.width
    }
    pub fn height(&self) -> usize {
        self.range.height
    }
    pub fn at(&self, row: usize, col: usize) -> f64 {
        *self.range.get(row, col)
    }
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        *self.valid_mask.get(row, col)
    }
    pub fn valid_count(&self) -> usize {
        self.valid_mask.data.iter().filter(|&&v| v).count()
    }

    /// Bilinear interpolation with its image-space gradient `(d/du, d/dv)`.
    /// Returns `None` unless all four neighbors are valid.
    pub fn bilinear(&self, px: Pixel) -> Option<(f64, f64, f64)> {
        let (w, h) = (self.width(), self.height());
        let px = Pixel::new(
            if px.u < 0.0 && px.u > -1e-9 {
                0.0
            } else {
                px.u
            },
            if px.v < 0.0 && px.v > -1e-9 {
                0.0
            } else {
                px.v
            },
        );
        if !(px.u >= 0.0 && px.v >= 0.0) {
            return None;
        }
        let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
        // Round-trip projection can land a hair past the last pixel center.
        let px = Pixel::new(
            if px.u > wf && px.u < wf + 1e-9 {
                wf
            } else {
                px.u
            },
            if px.v > hf && px.v < hf + 1e-9 {
                hf
            } else {
                px.v
            },
        );
        if px.u > wf || px.v > hf {
            return None;
        }
        // The last row and column interpolate from the cell before them.
        let c0 = (px.u.floor() as usize).min(w - 2);
        let r0 = (px.v.floor() as usize).min(h - 2);
        let fu = px.u - c0 as f64;
        let fv = px.v - r0 as f64;
        let i = self.range.index(r0, c0);
        let m = &self.valid_mask.data;
        if !(m[i] && m[i + 1] && m[i + w] && m[i + w + 1]) {
            return None;
        }
        let d = &self.range.data;
        let (d00, d01, d10, d11) = (d[i], d[i + 1], d[i + w], d[i + w + 1]);
        let top = d00 + fu * (d01 - d00);
        let bottom = d10 + fu * (d11 - d10);
        let value = top + fv * (bottom - top);
        let du = (1.0 - fv) * (d01 - d00) + fv * (d11 - d10);
        let dv = bottom - top;
        Some((value, du, dv))
    }
}

/// Scatters a cloud into a range image. Collisions keep the smaller range.
pub fn build_range_image(cam: &SphericalCamera, cloud: &[Vec3]) -> RangeImage {
    let (w, h) = (cam.width, cam.height);
    let hits: Vec<Option<(usize, f64)>> = cloud
        .par_iter()
        .map(|p| {
            let px = project(cam, p).ok()?;
            let (r, c) = cam.nearest_pixel(px)?;
            let d = p.norm();
            d.is_finite().then_some((r * w + c, d))
        })
        .collect();
    let mut img = RangeImage::empty(w, h);
    for hit in hits {
        match hit {
            Some((i, d)) => {
                let slot = &mut img.range.data[i];
                if *slot == 0.0 || d < *slot {
                    *slot = d;
                }
                img.valid_mask.data[i] = true;
            }
            None => img.dropped += 1,
        }
    }
    img
}

/// Per-pixel unit normals in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalImage {
    pub normals: Grid<Vec3>,
    pub valid_mask: Grid<bool>,
}

impl NormalImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            normals: Grid::filled(width, height, Vec3::zeros()),
            valid_mask: Grid::filled(width, height, false),
        }
    }
    pub fn valid_count(&self) -> usize {
        self.valid_mask.data.iter().filter(|&&v| v).count()
    }
}

/// Normals from central differences of the back-projected range image,
/// oriented toward the sensor. A pixel needs all four neighbors valid.
pub fn range_image_normals(img: &RangeImage, cam: &SphericalCamera) -> NormalImage {
    let (w, h) = (img.width(), img.height());
    let point = |r: usize, c: usize| -> Vec3 {
        cam.pixel_ray(Pixel::new(c as f64, r as f64)) * img.at(r, c)
    };
    let rows: Vec<Vec<Option<Vec3>>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    if r == 0 || c == 0 || r + 1 >= h || c + 1 >= w {
                        return None;
                    }
                    let ok = img.is_valid(r, c)
                        && img.is_valid(r, c - 1)
                        && img.is_valid(r, c + 1)
                        && img.is_valid(r - 1, c)
                        && img.is_valid(r + 1, c);
                    if !ok {
                        return None;
                    }
                    let dx = point(r, c + 1) - point(r, c - 1);
                    let dy = point(r + 1, c) - point(r - 1, c);
                    let n = dx.cross(&dy);
                    let norm = n.norm();
                    if !(norm > 1e-12) {
                        return None;
                    }
                    let mut n = n / norm;
                    if n.dot(&point(r, c)) > 0.0 {
                        n = -n;
                    }
                    Some(n)
                })
                .collect()
        })
        .collect();
    let mut out = NormalImage::empty(w, h);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, n) in row.into_iter().enumerate() {
            if let Some(n) = n {
                *out.normals.get_mut(r, c) = n;
                *out.valid_mask.get_mut(r, c) = true;
            }
        }
    }
    out
}

/// Magnitude of the central-difference range gradient, zero where any
/// neighbor is invalid.
pub fn range_gradient_magnitude(img: &RangeImage) -> Grid<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Grid::filled(w, h, 0.0);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            if !(img.is_valid(r, c)
                && img.is_valid(r, c - 1)
                && img.is_valid(r, c + 1)
                && img.is_valid(r - 1, c)
                && img.is_valid(r + 1, c))
            {
                continue;
            }
            let gx = 0.5 * (img.at(r, c + 1) - img.at(r, c - 1));
            let gy = 0.5 * (img.at(r + 1, c) - img.at(r - 1, c));
            *out.get_mut(r, c) = gx.hypot(gy);
        }
    }
    out
}
