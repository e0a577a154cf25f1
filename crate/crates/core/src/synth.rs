//! Analytic-scene LiDAR simulator with exact ground truth.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::Trajectory;
use crate::geometry::{
    direction_from_angles, Grid, NormalImage, RangeImage, SE3Pose, SphericalCamera, Vec3,
};
use crate::splats::tangent_basis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("invalid scan spec: {0}")]
    InvalidSpec(String),
    #[error("trajectory needs at least two steps")]
    TooFewSteps,
}

/// Analytic surface primitive in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Square patch of half-width `half_size` (infinite when not finite).
    Plane {
        center: Vec3,
        normal: Vec3,
        half_size: f64,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Axis-aligned box, visible from inside and outside.
    Box {
        min: Vec3,
        max: Vec3,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    /// Unit surface normal facing the ray origin.
    pub normal: Vec3,
}

impl Primitive {
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
        match self {
            Primitive::Plane {
                center,
                normal,
                half_size,
            } => {
                let n = normal.normalize();
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(center - origin)) / denom;
                if !(t > 1e-9) {
                    return None;
                }
                if half_size.is_finite() {
                    let (a, b) = tangent_basis(&n);
                    let q = origin + dir * t - center;
                    if q.dot(&a).abs() > *half_size || q.dot(&b).abs() > *half_size {
                        return None;
                    }
                }
                Some(RayHit {
                    distance: t,
                    normal: if denom < 0.0 { n } else { -n },
                })
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq].into_iter().find(|&t| t > 1e-9)?;
                let mut n = (origin + dir * t - center) / *radius;
                if n.dot(dir) > 0.0 {
                    n = -n;
                }
                Some(RayHit {
                    distance: t,
                    normal: n,
                })
            }
            Primitive::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[k] - origin[k]) / dir[k];
                    let t2 = (max[k] - origin[k]) / dir[k];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis_near = k;
                    }
                    if hi < t_far {
                        t_far = hi;
                        axis_far = k;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > 1e-9 {
                    (t_near, axis_near)
                } else if t_far > 1e-9 {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = -dir[axis].signum();
                Some(RayHit {
                    distance: t,
                    normal: n,
                })
            }
        }
    }

    /// Distance from `p` to the primitive surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Plane {
                center,
                normal,
                half_size,
            } => {
                let n = normal.normalize();
                let q = p - center;
                let off = q.dot(&n);
                if !half_size.is_finite() {
                    return off.abs();
                }
                let (a, b) = tangent_basis(&n);
                let ea = (q.dot(&a).abs() - half_size).max(0.0);
                let eb = (q.dot(&b).abs() - half_size).max(0.0);
                (off * off + ea * ea + eb * eb).sqrt()
            }
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Box { min, max } => {
                let outside = Vec3::from_fn(|k, _| (min[k] - p[k]).max(p[k] - max[k]).max(0.0));
                if outside.norm() > 0.0 {
                    return outside.norm();
                }
                (0..3)
                    .map(|k| (p[k] - min[k]).min(max[k] - p[k]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SynthError> {
        if primitives.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        Ok(Self { primitives })
    }

    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
    }

    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|s| s.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// A 16 m x 10 m x 4 m room with boxes, a pillar and a sphere. The
    /// floor is at z = -1.5 and the sensor travels near z = 0.
    pub fn room_with_boxes() -> Self {
        let b = |min: [f64; 3], max: [f64; 3]| Primitive::Box {
            min: Vec3::from(min),
            max: Vec3::from(max),
        };
        Self {
            primitives: vec![
                b([-8.0, -5.0, -1.5], [8.0, 5.0, 2.5]),
                b([2.0, 1.5, -1.5], [3.0, 2.5, 0.0]),
                b([-3.0, -3.0, -1.5], [-1.5, -2.0, 0.5]),
                b([5.0, -2.5, -1.5], [6.0, -1.5, 1.0]),
                b([-1.0, 2.5, -1.5], [-0.5, 3.0, 2.5]),
                b([-6.5, 1.0, -1.5], [-5.0, 3.5, -0.5]),
                Primitive::Sphere {
                    center: Vec3::new(4.0, 3.0, -0.5),
                    radius: 0.7,
                },
            ],
        }
    }
}

/// Sensor sampling pattern and noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSpec {
    pub width: usize,
    pub height: usize,
    /// Elevation of the lower and upper beam edges, radians.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub max_range: f64,
    pub min_range: f64,
    pub noise: f64,
    pub dropout: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 64,
            elevation_min: -PI / 8.0,
            elevation_max: PI / 8.0,
            max_range: 100.0,
            min_range: 0.1,
            noise: 0.0,
            dropout: 0.0,
        }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.width < 2 || self.height < 2 {
            return bad("width and height must be at least 2");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.elevation_max > self.elevation_min) {
            return bad("elevation_max must exceed elevation_min");
        }
        Ok(())
    }

    /// Azimuth of beam column `j`, spanning the full turn at cell centers.
    pub fn azimuth(&self, j: usize) -> f64 {
        PI - 2.0 * PI * (j as f64 + 0.5) / self.width as f64
    }

    pub fn elevation(&self, i: usize) -> f64 {
        self.elevation_max
            - (self.elevation_max - self.elevation_min) * (i as f64 + 0.5) / self.height as f64
    }

    /// Camera whose pixel centers coincide with the beam directions.
    pub fn camera(&self) -> SphericalCamera {
        SphericalCamera::from_fov(
            self.width,
            self.height,
            self.azimuth(self.width - 1),
            self.azimuth(0),
            self.elevation(self.height - 1),
            self.elevation(0),
        )
        .expect("valid scan spec")
    }
}

#[derive(Debug, Clone)]
pub struct SynthScan {
    /// Returns in the sensor frame, row-major over beams.
    pub cloud: Vec<Vec3>,
    pub range: RangeImage,
    /// Analytic normals in the sensor frame.
    pub normals: NormalImage,
    /// Beams that hit geometry before dropout.
    pub hits: usize,
}

/// Casts every beam of `spec` from `pose` (`world_from_sensor`).
pub fn raycast_scan<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &SE3Pose,
    spec: &ScanSpec,
    rng: &mut R,
) -> SynthScan {
    let (w, h) = (spec.width, spec.height);
    let origin = pose.translation;
    let dirs: Vec<Vec3> = (0..w * h)
        .map(|i| direction_from_angles(spec.azimuth(i % w), spec.elevation(i / w)))
        .collect();
    let hits: Vec<Option<RayHit>> = dirs
        .par_iter()
        .map(|d| {
            let world_dir = pose.rotation * d;
            scene
                .intersect(&origin, &world_dir)
                .filter(|hit| hit.distance <= spec.max_range)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut range = Grid::filled(w, h, 0.0);
    let mut normals = NormalImage::empty(w, h);
    let mut cloud = Vec::new();
    let mut n_hits = 0;
    let r_t = pose.rotation.transpose();
    for (i, hit) in hits.iter().enumerate() {
        let Some(hit) = hit else { continue };
        n_hits += 1;
        let drop = spec.dropout > 0.0 && rng.random::<f64>() < spec.dropout;
        let eps = if spec.noise > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        if drop {
            continue;
        }
        let d = hit.distance + eps;
        if !(d > spec.min_range) {
            continue;
        }
        range.data[i] = d;
        cloud.push(dirs[i] * d);
        normals.normals.data[i] = r_t * hit.normal;
        normals.valid_mask.data[i] = true;
    }
    SynthScan {
        cloud,
        range: RangeImage::from_ranges(w, h, range.data),
        normals,
        hits: n_hits,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    Line,
    /// Circular arc turning left by `angle` radians.
    Arc {
        angle: f64,
    },
    FigureEight,
}

/// Smooth pose sequence starting at the origin heading along +x, with
/// timestamps 0.1 s apart.
pub fn make_trajectory(
    kind: TrajectoryKind,
    length: f64,
    steps: usize,
) -> Result<Trajectory, SynthError> {
    if steps < 2 {
        return Err(SynthError::TooFewSteps);
    }
    let u = |i: usize| i as f64 / (steps - 1) as f64;
    let poses: Vec<SE3Pose> = match kind {
        TrajectoryKind::Line => (0..steps)
            .map(|i| SE3Pose::from_translation(Vec3::new(length * u(i), 0.0, 0.0)))
            .collect(),
        TrajectoryKind::Arc { angle } => {
            let radius = length / angle;
            (0..steps)
                .map(|i| {
                    let a = angle * u(i);
                    SE3Pose::from_yaw(
                        a,
                        Vec3::new(radius * a.sin(), radius * (1.0 - a.cos()), 0.0),
                    )
                })
                .collect()
        }
        TrajectoryKind::FigureEight => {
            // Lemniscate x = a sin t, y = a sin t cos t scaled to `length`.
            let unit = lemniscate_length();
            let a = length / unit;
            (0..steps)
                .map(|i| {
                    let t = 2.0 * PI * u(i);
                    let pos = Vec3::new(a * t.sin(), a * t.sin() * t.cos(), 0.0);
                    let vel = Vec3::new(t.cos(), (2.0 * t).cos(), 0.0);
                    SE3Pose::from_yaw(vel.y.atan2(vel.x), pos)
                })
                .collect()
        }
    };
    let stamps = (0..steps).map(|i| 0.1 * i as f64).collect();
    Ok(Trajectory::new(stamps, poses).expect("increasing timestamps"))
}

fn lemniscate_length() -> f64 {
    let n = 20_000;
    let h = 2.0 * PI / n as f64;
    (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) * h;
            t.cos().hypot((2.0 * t).cos()) * h
        })
        .sum()
}

/// Everything a scene file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene: Scene,
    pub spec: ScanSpec,
    pub trajectory: Option<(TrajectoryKind, f64, usize)>,
    /// Constant offset applied to every trajectory pose.
    pub start: Vec3,
    pub seed: Option<u64>,
}

/// Parses the line-oriented scene description.
///
/// ```text
/// # comments and blank lines are ignored
/// plane cx cy cz nx ny nz [half_size]
/// sphere cx cy cz radius
/// box minx miny minz maxx maxy maxz
/// room                         # the built-in room with boxes
/// scan width height elev_min_deg elev_max_deg max_range noise dropout
/// trajectory line|arc|figure-eight length steps [arc_angle_deg]
/// start x y z
/// seed n
/// ```
pub fn parse_scene(text: &str) -> Result<SceneFile, SynthError> {
    let mut prims = Vec::new();
    let mut spec = ScanSpec::default();
    let mut trajectory = None;
    let mut start = Vec3::zeros();
    let mut seed = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let err = |msg: String| SynthError::Parse { line, msg };
        let nums = |rest: &[&str]| -> Result<Vec<f64>, SynthError> {
            rest.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| err(format!("bad number '{s}'")))
                })
                .collect()
        };
        let expect = |v: &[f64], lo: usize, hi: usize| -> Result<(), SynthError> {
            if v.len() < lo || v.len() > hi {
                return Err(err(format!(
                    "'{key}' expects {lo}..={hi} values, got {}",
                    v.len()
                )));
            }
            Ok(())
        };
        match key {
            "plane" => {
                let v = nums(&rest)?;
                expect(&v, 6, 7)?;
                let normal = Vec3::new(v[3], v[4], v[5]);
                if normal.norm() == 0.0 {
                    return Err(err("plane normal is zero".into()));
                }
                prims.push(Primitive::Plane {
                    center: Vec3::new(v[0], v[1], v[2]),
                    normal: normal.normalize(),
                    half_size: v.get(6).copied().unwrap_or(f64::INFINITY),
                });
            }
            "sphere" => {
                let v = nums(&rest)?;
                expect(&v, 4, 4)?;
                if !(v[3] > 0.0) {
                    return Err(err("sphere radius must be positive".into()));
                }
                prims.push(Primitive::Sphere {
                    center: Vec3::new(v[0], v[1], v[2]),
                    radius: v[3],
                });
            }
            "box" => {
                let v = nums(&rest)?;
                expect(&v, 6, 6)?;
                let (min, max) = (Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
                if (0..3).any(|i| !(max[i] > min[i])) {
                    return Err(err("box max must exceed min".into()));
                }
                prims.push(Primitive::Box { min, max });
            }
            "room" => prims.extend(Scene::room_with_boxes().primitives),
            "scan" => {
                let v = nums(&rest)?;
                expect(&v, 7, 7)?;
                if v[0].fract() != 0.0 || v[1].fract() != 0.0 || v[0] < 0.0 || v[1] < 0.0 {
                    return Err(err("scan width and height must be integers".into()));
                }
                spec = ScanSpec {
                    width: v[0] as usize,
                    height: v[1] as usize,
                    elevation_min: v[2].to_radians(),
                    elevation_max: v[3].to_radians(),
                    max_range: v[4],
                    noise: v[5],
                    dropout: v[6],
                    ..ScanSpec::default()
                };
                spec.validate().map_err(|e| err(e.to_string()))?;
            }
            "trajectory" => {
                if rest.len() < 3 {
                    return Err(err("trajectory expects kind, length and steps".into()));
                }
                let v = nums(&rest[1..])?;
                let steps = v[1];
                if steps.fract() != 0.0 || steps < 2.0 {
                    return Err(err("trajectory steps must be an integer >= 2".into()));
                }
                let kind = match rest[0] {
                    "line" => TrajectoryKind::Line,
                    "arc" => TrajectoryKind::Arc {
                        angle: v.get(2).copied().unwrap_or(90.0).to_radians(),
                    },
                    "figure-eight" => TrajectoryKind::FigureEight,
                    other => return Err(err(format!("unknown trajectory kind '{other}'"))),
                };
                trajectory = Some((kind, v[0], steps as usize));
            }
            "start" => {
                let v = nums(&rest)?;
                expect(&v, 3, 3)?;
                start = Vec3::new(v[0], v[1], v[2]);
            }
            "seed" => {
                let s = rest
                    .first()
                    .ok_or_else(|| err("seed expects a value".into()))?;
                seed = Some(s.parse().map_err(|_| err(format!("bad seed '{s}'")))?);
            }
            other => return Err(err(format!("unknown directive '{other}'"))),
        }
    }
    Ok(SceneFile {
        scene: Scene::new(prims)?,
        spec,
        trajectory,
        start,
        seed,
    })
}
