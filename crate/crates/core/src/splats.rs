//! 2D Gaussian surface elements and the model container.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector4};

use crate::geometry::Vec3;

/// Smallest scale a splat may shrink to, meters.
pub const MIN_SCALE: f64 = 1e-4;

/// Planar Gaussian primitive.
///
/// Scales are stored as logarithms and the opacity as a logit so that the
/// optimizer works on unconstrained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub centroid: Vec3,
    pub tangent_alpha: Vec3,
    pub tangent_beta: Vec3,
    pub log_scale: Vector2<f64>,
    pub logit_opacity: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl Splat {
    /// Builds a splat from world-space parameters. The tangents are
    /// orthonormalized.
    pub fn new(
        centroid: Vec3,
        tangent_alpha: Vec3,
        tangent_beta: Vec3,
        scale: Vector2<f64>,
        opacity: f64,
    ) -> Self {
        let mut s = Self {
            centroid,
            tangent_alpha,
            tangent_beta,
            log_scale: Vector2::new(scale.x.max(MIN_SCALE).ln(), scale.y.max(MIN_SCALE).ln()),
            logit_opacity: logit(opacity),
        };
        s.orthonormalize();
        s
    }

    /// Splat whose plane faces `normal`. The in-plane axes are completed
    /// with the world `z` axis when possible.
    pub fn facing(centroid: Vec3, normal: Vec3, scale: Vector2<f64>, opacity: f64) -> Self {
        let (ta, tb) = tangent_basis(&normal);
        Self::new(centroid, ta, tb, scale, opacity)
    }

    pub fn scale(&self) -> Vector2<f64> {
        Vector2::new(self.log_scale.x.exp(), self.log_scale.y.exp())
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn set_scale(&mut self, s: Vector2<f64>) {
        self.log_scale = Vector2::new(s.x.max(MIN_SCALE).ln(), s.y.max(MIN_SCALE).ln());
    }

    pub fn set_opacity(&mut self, o: f64) {
        self.logit_opacity = logit(o);
    }

    pub fn normal(&self) -> Vec3 {
        splat_normal(self)
    }

    /// Rotation with columns `(t_alpha, t_beta, t_n)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.tangent_alpha, self.tangent_beta, self.normal()])
    }

    pub fn set_rotation(&mut self, r: &Matrix3<f64>) {
        self.tangent_alpha = r.column(0).into_owned();
        self.tangent_beta = r.column(1).into_owned();
        self.orthonormalize();
    }

    /// Gram-Schmidt on the two tangents.
    pub fn orthonormalize(&mut self) {
        let a = self.tangent_alpha.normalize();
        let mut b = self.tangent_beta - a * a.dot(&self.tangent_beta);
        let bn = b.norm();
        if bn < 1e-12 || !bn.is_finite() {
            let (_, fallback) = tangent_basis(&a);
            b = a.cross(&fallback);
        }
        self.tangent_alpha = a;
        self.tangent_beta = b.normalize();
    }

    /// Clamps the scales into `[MIN_SCALE, max_scale]`.
    pub fn clamp_scale(&mut self, max_scale: f64) {
        let lo = MIN_SCALE.ln();
        let hi = max_scale.max(MIN_SCALE).ln();
        self.log_scale.x = self.log_scale.x.clamp(lo, hi);
        self.log_scale.y = self.log_scale.y.clamp(lo, hi);
    }
}

/// Two unit tangents `(a, b)` with `a x b = n` for a unit normal `n`.
pub fn tangent_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let n = normal.normalize();
    let up = Vec3::z();
    let mut a = up.cross(&n);
    if a.norm() < 1e-6 {
        a = Vec3::y().cross(&n);
    }
    let a = a.normalize();
    let b = n.cross(&a);
    (a, b)
}

/// Splat-to-world homogeneous transform with columns
/// `(s_a t_a, s_b t_b, 0, mu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatTransform {
    pub h: Matrix4<f64>,
}

impl SplatTransform {
    /// Maps splat-space `(alpha, beta)` to world space.
    pub fn apply(&self, alpha: f64, beta: f64) -> Vec3 {
        let p = self.h * Vector4::new(alpha, beta, 0.0, 1.0);
        Vec3::new(p.x, p.y, p.z)
    }

    pub fn axis_alpha(&self) -> Vec3 {
        self.h.fixed_view::<3, 1>(0, 0).into_owned()
    }
    pub fn axis_beta(&self) -> Vec3 {
        self.h.fixed_view::<3, 1>(0, 1).into_owned()
    }
    pub fn center(&self) -> Vec3 {
        self.h.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

pub fn splat_transform(s: &Splat) -> SplatTransform {
    let sc = s.scale();
    let a = s.tangent_alpha * sc.x;
    let b = s.tangent_beta * sc.y;
    let m = &s.centroid;
    #[rustfmt::skip]
    let h = Matrix4::new(
        a.x, b.x, 0.0, m.x,
        a.y, b.y, 0.0, m.y,
        a.z, b.z, 0.0, m.z,
        0.0, 0.0, 0.0, 1.0,
    );
    SplatTransform { h }
}

/// Unnormalized Gaussian kernel in splat space.
#[inline]
pub fn kernel(alpha: f64, beta: f64) -> f64 {
    (-0.5 * (alpha * alpha + beta * beta)).exp()
}

pub fn splat_normal(s: &Splat) -> Vec3 {
    s.tangent_alpha.cross(&s.tangent_beta).normalize()
}

/// Indexed splat collection. `epoch[i]` names the keyframe event that
/// spawned splat `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatModel {
    pub splats: Vec<Splat>,
    pub epoch: Vec<u32>,
}

impl SplatModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn push(&mut self, splat: Splat, epoch: u32) {
        self.splats.push(splat);
        self.epoch.push(epoch);
    }

    /// Keeps the splats for which `keep` is true and returns the number
    /// removed.
    pub fn retain_indices(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.splats.len());
        let before = self.splats.len();
        let mut i = 0;
        self.splats.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut j = 0;
        self.epoch.retain(|_| {
            j += 1;
            keep[j - 1]
        });
        before - self.splats.len()
    }
}

impl FromIterator<Splat> for SplatModel {
    fn from_iter<I: IntoIterator<Item = Splat>>(iter: I) -> Self {
        let splats: Vec<Splat> = iter.into_iter().collect();
        let epoch = vec![0; splats.len()];
        Self { splats, epoch }
    }
}
