//! Frame-to-model registration against a rendered splat model.
//!
//! The model is rendered at the predicted pose. Its back-projected range
//! image feeds a tree of planar leaves for point-to-plane residuals, and the
//! rendered range image itself is compared against the scan's range image
//! for range-photometric residuals. Both are minimized over a right
//! multiplicative se(3) update with Levenberg-Marquardt damping.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::NearestIndex;
use crate::geometry::{back_project, Pixel, RangeImage, SE3Pose, SphericalCamera, Vec3};
use crate::rasterizer::Rasterizer;
use crate::splats::SplatModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("rendered model has no visible pixels")]
    EmptyModel,
    #[error("need at least 3 points to build a leaf tree, got {0}")]
    TooFewPoints(usize),
    #[error("no residuals survived association")]
    NoAssociations,
    #[error("degenerate registration: {0}")]
    Degenerate(String),
    #[error("scan is empty")]
    EmptyScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationMode {
    Geometric,
    Photometric,
    Joint,
    /// Geometric until converged, then joint.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub huber_geometric: f64,
    pub huber_photometric: f64,
    /// Residuals beyond this magnitude are rejected, meters.
    pub gate: f64,
    pub max_iterations: usize,
    /// Update norm below which the solver stops.
    pub tolerance: f64,
    /// Update norm ending the geometric stage of the sequential mode.
    pub stage_tolerance: f64,
    pub max_leaf_size: usize,
    pub flatness: f64,
    /// Leaves wider than this along their dominant axis are split, meters.
    pub max_leaf_extent: f64,
    /// Leaves less planar than this do not take part in association.
    pub max_leaf_flatness: f64,
    /// Leaves with fewer points do not take part in association.
    pub min_leaf_points: usize,
    /// Rendered opacity needed for a pixel to count as model surface.
    pub min_opacity: f64,
    /// Query range change per pixel, relative to range, above which a
    /// photometric sample counts as a depth jump.
    pub max_range_slope: f64,
    /// Rendered model pixels whose own plane explains no neighbour within
    /// `[relative, absolute]` range slack are dropped as mixed edge pixels.
    /// `None` keeps every opaque pixel.
    pub model_plane_slack: Option<[f64; 2]>,
    pub initial_damping: f64,
    /// Smallest accepted eigenvalue ratio of the normal equations.
    pub min_condition: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            mode: RegistrationMode::Sequential,
            huber_geometric: 0.02,
            huber_photometric: 0.02,
            gate: 1.0,
            max_iterations: 30,
            tolerance: 1e-6,
            stage_tolerance: 1e-4,
            max_leaf_size: 64,
            flatness: 0.02,
            max_leaf_extent: 1.5,
            max_leaf_flatness: 0.1,
            min_leaf_points: 8,
            min_opacity: 0.5,
            max_range_slope: 0.3,
            model_plane_slack: Some([0.03, 0.02]),
            initial_damping: 1e-4,
            min_condition: 1e-10,
        }
    }
}

/// Planar patch of model samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub centroid: Vec3,
    pub normal: Vec3,
    pub count: usize,
    /// Smallest over middle covariance eigenvalue.
    pub flatness: f64,
}

/// Leaves of a median-split tree over model samples.
pub struct LeafTree {
    pub leaves: Vec<Leaf>,
    /// Leaf of each input point.
    pub assignment: Vec<usize>,
    /// Leaves usable for association.
    active: Vec<usize>,
    index: Option<NearestIndex>,
}

impl std::fmt::Debug for LeafTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LeafTree")
            .field("leaves", &self.leaves.len())
            .field("active", &self.active.len())
            .finish()
    }
}

struct Pca {
    mean: Vec3,
    /// Ascending eigenvalues.
    values: [f64; 3],
    vectors: [Vec3; 3],
}

fn pca(points: &[Vec3], idx: &[usize]) -> Pca {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| points[i]).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    Pca {
        mean,
        values: order.map(|k| eig.eigenvalues[k].max(0.0)),
        vectors: order.map(|k| eig.eigenvectors.column(k).into_owned()),
    }
}

/// Splits `points` recursively across the dominant principal axis until each
/// part is small or planar (and no wider than `max_extent`). Leaf normals
/// face `viewpoint`.
pub fn build_leaf_tree(
    points: &[Vec3],
    max_leaf_size: usize,
    flatness_tau: f64,
    max_extent: f64,
    viewpoint: &Vec3,
) -> Result<LeafTree, RegistrationError> {
    if points.len() < 3 {
        return Err(RegistrationError::TooFewPoints(points.len()));
    }
    let mut leaves = Vec::new();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut stack = vec![(0..points.len()).collect::<Vec<usize>>()];
    while let Some(mut idx) = stack.pop() {
        let p = pca(points, &idx);
        let flat = if p.values[1] > 0.0 {
            p.values[0] / p.values[1]
        } else {
            1.0
        };
        let axis = p.vectors[2];
        let extent = 4.0 * p.values[2].sqrt();
        let small = idx.len() <= max_leaf_size.max(3);
        let planar = flat <= flatness_tau && extent <= max_extent;
        if small || planar {
            let mut normal = p.vectors[0];
            if normal.dot(&(viewpoint - p.mean)) < 0.0 {
                normal = -normal;
            }
            let id = leaves.len();
            for &i in &idx {
                assignment[i] = id;
            }
            leaves.push(Leaf {
                centroid: p.mean,
                normal,
                count: idx.len(),
                flatness: flat,
            });
            continue;
        }
        // Cut through the centroid; clusters separated along the axis never
        // straddle the cut. Fall back to the median if one side is empty.
        let cut = p.mean.dot(&axis);
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| points[i].dot(&axis) < cut);
        if left.is_empty() || right.is_empty() {
            let mid = idx.len() / 2;
            idx.select_nth_unstable_by(mid, |&a, &b| {
                points[a].dot(&axis).total_cmp(&points[b].dot(&axis))
            });
            right = idx.split_off(mid);
            left = idx;
        }
        stack.push(right);
        stack.push(left);
    }
    Ok(LeafTree::new(leaves, assignment))
}

impl LeafTree {
    fn new(leaves: Vec<Leaf>, assignment: Vec<usize>) -> Self {
        let mut tree = Self {
            leaves,
            assignment,
            active: Vec::new(),
            index: None,
        };
        tree.restrict(f64::INFINITY, 3);
        tree
    }

    /// Restricts association to leaves at most `max_flatness` from planar
    /// holding at least `min_points` points.
    pub fn restrict(&mut self, max_flatness: f64, min_points: usize) {
        self.active = (0..self.leaves.len())
            .filter(|&i| {
                self.leaves[i].flatness <= max_flatness && self.leaves[i].count >= min_points.max(3)
            })
            .collect();
        let centroids: Vec<Vec3> = self
            .active
            .iter()
            .map(|&i| self.leaves[i].centroid)
            .collect();
        self.index = (!centroids.is_empty()).then(|| NearestIndex::new(&centroids));
    }

    /// Nearest usable leaf by centroid distance.
    pub fn nearest(&self, p: &Vec3) -> Option<(&Leaf, f64)> {
        let index = self.index.as_ref()?;
        let (k, d) = index.nearest(p);
        Some((&self.leaves[self.active[k]], d))
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// One linearized residual. `jacobian` is with respect to a right
/// perturbation `T exp(delta)`, `delta = (translation, rotation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub jacobian: Vector6<f64>,
}

/// Residual set with the number of attempted terms.
#[derive(Debug, Clone, Default)]
pub struct Residuals {
    pub terms: Vec<Residual>,
    pub attempted: usize,
}

/// Point-to-plane residuals of a sensor-frame cloud placed at `pose`.
pub fn geometric_residuals(
    tree: &LeafTree,
    cloud: &[Vec3],
    pose: &SE3Pose,
    gate: f64,
) -> Residuals {
    let rt = pose.rotation.transpose();
    let terms = cloud
        .par_iter()
        .filter_map(|q| {
            let p = pose.apply(q);
            let (leaf, dist) = tree.nearest(&p)?;
            let r = leaf.normal.dot(&(p - leaf.centroid));
            if !(r.abs() <= gate) || dist > 2.0 * gate {
                return None;
            }
            let a = rt * leaf.normal;
            let b = q.cross(&a);
            Some(Residual {
                value: r,
                jacobian: Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z),
            })
        })
        .collect();
    Residuals {
        terms,
        attempted: cloud.len(),
    }
}

/// Rendered model image used as the photometric reference.
#[derive(Debug, Clone)]
pub struct ModelView {
    pub cam: SphericalCamera,
    /// Pose the model was rendered at.
    pub pose: SE3Pose,
    /// Opacity-normalized range, zero where the model is not visible.
    pub range: RangeImage,
    /// Back-projected visible pixels in the world frame.
    pub points: Vec<Vec3>,
}

/// Renders the model and back-projects pixels with opacity above
/// `min_opacity`.
pub fn sample_model(
    model: &SplatModel,
    cam: &SphericalCamera,
    pose: &SE3Pose,
    min_opacity: f64,
    plane_slack: Option<[f64; 2]>,
    raster: &Rasterizer,
) -> Result<ModelView, RegistrationError> {
    let (render, _) = raster.forward(cam, pose, model);
    let (w, h) = (cam.width, cam.height);
    let mut ranges = vec![0.0; w * h];
    let mut points = Vec::new();
    for (i, slot) in ranges.iter_mut().enumerate() {
        if render.opacity.data[i] <= min_opacity {
            continue;
        }
        let d = render.expected_range(i);
        if !(d > 0.0) {
            continue;
        }
        if let Some([rel, abs]) = plane_slack {
            if !render.plane_consistent(cam, i, min_opacity, (rel, abs)) {
                continue;
            }
        }
        let px = Pixel::new((i % w) as f64, (i / w) as f64);
        if let Ok(p) = back_project(cam, px, d) {
            *slot = d;
            points.push(pose.apply(&p));
        }
    }
    if points.is_empty() {
        return Err(RegistrationError::EmptyModel);
    }
    Ok(ModelView {
        cam: cam.clone(),
        pose: pose.clone(),
        range: RangeImage::from_ranges(w, h, ranges),
        points,
    })
}

/// Range residuals between the model view warped to `pose` and the query
/// range image: `|p| - query(project(p))` with
/// `p = pose^-1 * view.pose * backproject(u, model(u))`. Samples where the
/// query changes by more than `max_slope` of its range per pixel sit on a
/// depth jump and are skipped.
pub fn photometric_residuals(
    view: &ModelView,
    query: &RangeImage,
    pose: &SE3Pose,
    gate: f64,
    max_slope: f64,
) -> Residuals {
    let cam = &view.cam;
    let w = cam.width;
    let rel = pose.inverse().compose(&view.pose);
    let (fx, fy) = (cam.fx(), cam.fy());
    let pixels: Vec<usize> = (0..view.range.range.len())
        .filter(|&i| view.range.valid_mask.data[i])
        .collect();
    let terms = pixels
        .par_iter()
        .filter_map(|&i| {
            let px = Pixel::new((i % w) as f64, (i / w) as f64);
            let x = back_project(cam, px, view.range.range.data[i]).ok()?;
            let p = rel.apply(&x);
            let rho2 = p.x * p.x + p.y * p.y;
            let r2 = rho2 + p.z * p.z;
            if !(rho2 > 1e-12) {
                return None;
            }
            let (rho, range) = (rho2.sqrt(), r2.sqrt());
            let u = Pixel::new(
                fx * p.y.atan2(p.x) + cam.cx(),
                fy * p.z.atan2(rho) + cam.cy(),
            );
            let (target, d_du, d_dv) = query.bilinear(u)?;
            if d_du.abs().max(d_dv.abs()) > max_slope * target {
                return None;
            }
            let r = range - target;
            if !(r.abs() <= gate) {
                return None;
            }
            let daz = Vec3::new(-p.y / rho2, p.x / rho2, 0.0);
            let del = Vec3::new(-p.x * p.z / (rho * r2), -p.y * p.z / (rho * r2), rho / r2);
            let a = p / range - (daz * (fx * d_du) + del * (fy * d_dv));
            let b = a.cross(&p);
            Some(Residual {
                value: r,
                jacobian: Vector6::new(-a.x, -a.y, -a.z, b.x, b.y, b.z),
            })
        })
        .collect();
    Residuals {
        terms,
        attempted: pixels.len(),
    }
}

/// Everything registration needs from the model side.
#[derive(Debug)]
pub struct RegistrationTarget {
    pub view: ModelView,
    pub tree: LeafTree,
}

impl RegistrationTarget {
    pub fn new(view: ModelView, cfg: &RegistrationConfig) -> Result<Self, RegistrationError> {
        let mut tree = build_leaf_tree(
            &view.points,
            cfg.max_leaf_size,
            cfg.flatness,
            cfg.max_leaf_extent,
            &view.pose.translation,
        )?;
        tree.restrict(cfg.max_leaf_flatness, cfg.min_leaf_points);
        Ok(Self { view, tree })
    }

    pub fn from_model(
        model: &SplatModel,
        cam: &SphericalCamera,
        pose: &SE3Pose,
        cfg: &RegistrationConfig,
        raster: &Rasterizer,
    ) -> Result<Self, RegistrationError> {
        Self::new(
            sample_model(model, cam, pose, cfg.min_opacity, cfg.model_plane_slack, raster)?,
            cfg,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: SE3Pose,
    pub iterations: usize,
    pub converged: bool,
    pub geometric_rms: f64,
    pub photometric_rms: f64,
    /// Fraction of attempted residuals that survived gating.
    pub inlier_fraction: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Terms {
    Geometric,
    Photometric,
    Both,
}

impl Terms {
    fn geometric(self) -> bool {
        matches!(self, Terms::Geometric | Terms::Both)
    }
    fn photometric(self) -> bool {
        matches!(self, Terms::Photometric | Terms::Both)
    }
}

struct System {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    cost: f64,
    geo_rms: f64,
    photo_rms: f64,
    inliers: f64,
    used: usize,
}

/// Normalized robust cost and normal equations at `pose`. Every attempted
/// residual counts; rejected ones contribute the cost at the gate.
fn linearize(
    target: &RegistrationTarget,
    cloud: &[Vec3],
    query: &RangeImage,
    pose: &SE3Pose,
    terms: Terms,
    cfg: &RegistrationConfig,
) -> System {
    let mut sys = System {
        h: Matrix6::zeros(),
        g: Vector6::zeros(),
        cost: 0.0,
        geo_rms: 0.0,
        photo_rms: 0.0,
        inliers: 0.0,
        used: 0,
    };
    let mut attempted = 0usize;
    let mut kept = 0usize;
    let mut add = |res: &Residuals, delta: f64| -> f64 {
        if res.attempted == 0 {
            return 0.0;
        }
        let norm = 1.0 / res.attempted as f64;
        let rejected = res.attempted - res.terms.len();
        let mut cost = rejected as f64 * huber_cost(cfg.gate, delta);
        let mut sq = 0.0;
        for t in &res.terms {
            let w = huber_weight(t.value, delta) * norm;
            sys.h += t.jacobian * t.jacobian.transpose() * w;
            sys.g += t.jacobian * (w * t.value);
            cost += huber_cost(t.value, delta);
            sq += t.value * t.value;
        }
        sys.cost += cost * norm;
        sys.used += res.terms.len();
        attempted += res.attempted;
        kept += res.terms.len();
        if res.terms.is_empty() {
            0.0
        } else {
            (sq / res.terms.len() as f64).sqrt()
        }
    };
    if terms.geometric() {
        let res = geometric_residuals(&target.tree, cloud, pose, cfg.gate);
        sys.geo_rms = add(&res, cfg.huber_geometric);
    }
    if terms.photometric() {
        let res = photometric_residuals(&target.view, query, pose, cfg.gate, cfg.max_range_slope);
        sys.photo_rms = add(&res, cfg.huber_photometric);
    }
    sys.inliers = if attempted > 0 {
        kept as f64 / attempted as f64
    } else {
        0.0
    };
    sys
}

fn check_conditioning(h: &Matrix6<f64>, cfg: &RegistrationConfig) -> Result<(), RegistrationError> {
    let eig = SymmetricEigen::new(*h);
    let (mut lo, mut hi) = (0usize, 0usize);
    for k in 0..6 {
        if eig.eigenvalues[k] < eig.eigenvalues[lo] {
            lo = k;
        }
        if eig.eigenvalues[k] > eig.eigenvalues[hi] {
            hi = k;
        }
    }
    let (min, max) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    if !(max > 0.0) || !(min > cfg.min_condition * max) {
        let v = eig.eigenvectors.column(lo);
        return Err(RegistrationError::Degenerate(format!(
            "weakest direction (tx ty tz rx ry rz) = ({:.3} {:.3} {:.3} {:.3} {:.3} {:.3}), eigenvalue ratio {:.3e}",
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    Ok(())
}

/// Registers a sensor-frame cloud and its range image against a prepared
/// target, starting from `initial` (`world_from_sensor`).
pub fn register_to_target(
    target: &RegistrationTarget,
    cloud: &[Vec3],
    query: &RangeImage,
    initial: &SE3Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    if cloud.is_empty() {
        return Err(RegistrationError::EmptyScan);
    }
    let mut stage = match cfg.mode {
        RegistrationMode::Geometric | RegistrationMode::Sequential => Terms::Geometric,
        RegistrationMode::Photometric => Terms::Photometric,
        RegistrationMode::Joint => Terms::Both,
    };
    let mut pose = initial.clone();
    let mut lambda = cfg.initial_damping;
    let mut sys = linearize(target, cloud, query, &pose, stage, cfg);
    if sys.used == 0 {
        return Err(RegistrationError::NoAssociations);
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        check_conditioning(&sys.h, cfg)?;
        let mut accepted = None;
        for _ in 0..12 {
            let mut damped = sys.h;
            for k in 0..6 {
                damped[(k, k)] += lambda * sys.h[(k, k)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|c| -c.solve(&sys.g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = pose.retract(&delta);
            let next = linearize(target, cloud, query, &candidate, stage, cfg);
            if next.used > 0 && next.cost <= sys.cost {
                accepted = Some((delta, candidate, next));
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            if delta.norm() < cfg.tolerance {
                break;
            }
            lambda *= 10.0;
        }
        let Some((delta, candidate, next)) = accepted else {
            // No decrease is possible from here: the stage has converged.
            if stage == Terms::Geometric && cfg.mode == RegistrationMode::Sequential {
                stage = Terms::Both;
                sys = linearize(target, cloud, query, &pose, stage, cfg);
                lambda = cfg.initial_damping;
                continue;
            }
            converged = true;
            break;
        };
        pose = candidate;
        sys = next;
        let step = delta.norm();
        if stage == Terms::Geometric && cfg.mode == RegistrationMode::Sequential {
            if step < cfg.stage_tolerance {
                stage = Terms::Both;
                sys = linearize(target, cloud, query, &pose, stage, cfg);
                lambda = cfg.initial_damping;
            }
            continue;
        }
        if step < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        pose: pose.orthonormalized(),
        iterations,
        converged,
        geometric_rms: sys.geo_rms,
        photometric_rms: sys.photo_rms,
        inlier_fraction: sys.inliers,
        cost: sys.cost,
    })
}

/// Renders `model` at `initial`, then registers the scan against it.
pub fn register(
    model: &SplatModel,
    cam: &SphericalCamera,
    cloud: &[Vec3],
    query: &RangeImage,
    initial: &SE3Pose,
    cfg: &RegistrationConfig,
    raster: &Rasterizer,
) -> Result<RegistrationResult, RegistrationError> {
    let target = RegistrationTarget::from_model(model, cam, initial, cfg, raster)?;
    register_to_target(&target, cloud, query, initial, cfg)
}

/// Initial guess replaying the last relative motion.
pub fn constant_velocity(previous: Option<&SE3Pose>, current: &SE3Pose) -> SE3Pose {
    match previous {
        Some(prev) => current.compose(&prev.inverse().compose(current)),
        None => current.clone(),
    }
}

/// Rotation between two poses in radians and translation in meters.
pub fn pose_error(a: &SE3Pose, b: &SE3Pose) -> (f64, f64) {
    let d = a.inverse().compose(b);
    (d.translation.norm(), d.rotation_angle())
}
