//! Tile-based rasterization of 2D Gaussians on spherical images.
//!
//! Each pixel ray is written as the intersection of two planes through the
//! sensor origin. Both planes are pulled back into splat space, where the
//! ray-splat intersection reduces to a cross product. Splats are binned into
//! 16x16 tiles using bounds computed in azimuth-shifted image coordinates so
//! that splats crossing the horizontal seam, or lying behind the sensor, land
//! in the right tiles.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector2, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{wrap_angle, Grid, Pixel, SE3Pose, SphericalCamera, Vec3};
use crate::splats::{kernel, Splat, SplatModel, SplatTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("pixel ray is parallel to the z axis")]
    DegenerateRay,
    #[error("splat plane is edge-on to the ray")]
    NoIntersection,
    #[error("intersection lies behind the sensor")]
    BehindSensor,
    #[error("blend records do not match this render: {0}")]
    RecordMismatch(String),
}

/// Rasterizer thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Contributions below this opacity are skipped.
    pub alpha_min: f64,
    /// Per-splat opacity clamp.
    pub alpha_max: f64,
    /// Blending stops once transmittance falls below this value.
    pub transmittance_min: f64,
    /// Smallest admissible intersection denominator.
    pub denom_eps: f64,
    /// Extra pixels added around projected bounds.
    pub bbox_margin_px: f64,
    /// Bound segments longer than this (pixels) are subdivided.
    pub bbox_max_segment_px: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            denom_eps: 1e-12,
            bbox_margin_px: 1.0,
            bbox_max_segment_px: 2.0,
        }
    }
}

/// Two orthogonal planes through the origin whose intersection is a pixel
/// ray. The last homogeneous component is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRayPlanes {
    pub hx: Vector4<f64>,
    pub hy: Vector4<f64>,
}

pub fn pixel_ray_planes(cam: &SphericalCamera, u: Pixel) -> Result<PixelRayPlanes, RasterError> {
    let frame = RayFrame::new(cam.pixel_ray(u)).ok_or(RasterError::DegenerateRay)?;
    Ok(PixelRayPlanes {
        hx: frame.hx.push(0.0),
        hy: frame.hy.push(0.0),
    })
}

/// Ray direction with its plane pair.
#[derive(Debug, Clone, Copy)]
struct RayFrame {
    dir: Vec3,
    hx: Vec3,
    hy: Vec3,
}

impl RayFrame {
    fn new(dir: Vec3) -> Option<Self> {
        let c = dir.cross(&Vec3::z());
        let n = c.norm();
        if n < 1e-12 {
            return None;
        }
        let hx = c / n;
        let hy = hx.cross(&dir);
        Some(Self { dir, hx, hy })
    }
}

fn pixel_frames(cam: &SphericalCamera) -> Vec<Option<RayFrame>> {
    (0..cam.height * cam.width)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / cam.width, i % cam.width);
            RayFrame::new(cam.pixel_ray(Pixel::new(c as f64, r as f64)))
        })
        .collect()
}

/// Splat expressed in the sensor frame: `b_alpha = R s_a t_a`,
/// `b_beta = R s_b t_b`, `b_center = R mu + t`.
#[derive(Debug, Clone, Copy)]
pub struct ViewSplat {
    pub b_alpha: Vec3,
    pub b_beta: Vec3,
    pub b_center: Vec3,
    pub normal: Vec3,
    pub opacity: f64,
    /// Range of the splat center, used as the sort key.
    pub key: f64,
}

impl ViewSplat {
    pub fn new(splat: &Splat, sensor_from_world: &SE3Pose) -> Self {
        let r = &sensor_from_world.rotation;
        let s = splat.scale();
        let b_center = sensor_from_world.apply(&splat.centroid);
        Self {
            b_alpha: r * (splat.tangent_alpha * s.x),
            b_beta: r * (splat.tangent_beta * s.y),
            b_center,
            normal: r * splat.normal(),
            opacity: splat.opacity(),
            key: b_center.norm(),
        }
    }

    pub fn from_transform(tf: &SplatTransform, normal: Vec3, opacity: f64, pose: &SE3Pose) -> Self {
        let view = pose.inverse();
        let r = &view.rotation;
        let b_center = view.apply(&tf.center());
        Self {
            b_alpha: r * tf.axis_alpha(),
            b_beta: r * tf.axis_beta(),
            b_center,
            normal: r * normal,
            opacity,
            key: b_center.norm(),
        }
    }

    /// Splat-space radius beyond which `o G < alpha_min`.
    fn cutoff_radius(&self, alpha_min: f64) -> Option<f64> {
        (self.opacity > alpha_min).then(|| (2.0 * (self.opacity / alpha_min).ln()).sqrt())
    }

    fn point(&self, a: f64, b: f64) -> Vec3 {
        self.b_center + self.b_alpha * a + self.b_beta * b
    }
}

/// Ray-splat intersection in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Splat-space coordinates `(alpha, beta)`.
    pub s: Vector2<f64>,
    /// Homogeneous intersection `h_alpha x h_beta`.
    pub p_hat: Vec3,
    pub h_alpha: Vec3,
    pub h_beta: Vec3,
    /// Intersection point in the sensor frame.
    pub nu: Vec3,
    pub range: f64,
}

#[inline]
fn intersect_view(vs: &ViewSplat, frame: &RayFrame, eps: f64) -> Result<RayHit, RasterError> {
    let h_alpha = Vec3::new(
        frame.hx.dot(&vs.b_alpha),
        frame.hx.dot(&vs.b_beta),
        frame.hx.dot(&vs.b_center),
    );
    let h_beta = Vec3::new(
        frame.hy.dot(&vs.b_alpha),
        frame.hy.dot(&vs.b_beta),
        frame.hy.dot(&vs.b_center),
    );
    let p_hat = h_alpha.cross(&h_beta);
    if !(p_hat.z.abs() >= eps) {
        return Err(RasterError::NoIntersection);
    }
    let s = Vector2::new(p_hat.x / p_hat.z, p_hat.y / p_hat.z);
    let nu = vs.point(s.x, s.y);
    if !(nu.dot(&frame.dir) > 0.0) {
        return Err(RasterError::BehindSensor);
    }
    Ok(RayHit {
        s,
        p_hat,
        h_alpha,
        h_beta,
        nu,
        range: nu.norm(),
    })
}

/// Intersects a pixel ray with a splat. `pose` is the sensor pose in the
/// world (`world_from_sensor`).
pub fn ray_splat_intersect(
    tf: &SplatTransform,
    pose: &SE3Pose,
    planes: &PixelRayPlanes,
) -> Result<RayHit, RasterError> {
    let hx = planes.hx.xyz();
    let hy = planes.hy.xyz();
    let dir = hy.cross(&hx);
    let frame = RayFrame {
        dir: dir.normalize(),
        hx,
        hy,
    };
    let vs = ViewSplat::from_transform(tf, Vec3::z(), 1.0, pose);
    intersect_view(&vs, &frame, RasterConfig::default().denom_eps)
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    hit: RayHit,
    gauss: f64,
    alpha: f64,
    clamped: bool,
}

#[inline]
fn sample(vs: &ViewSplat, frame: &RayFrame, cfg: &RasterConfig) -> Option<Sample> {
    let hit = intersect_view(vs, frame, cfg.denom_eps).ok()?;
    let gauss = kernel(hit.s.x, hit.s.y);
    let raw = vs.opacity * gauss;
    if raw < cfg.alpha_min {
        return None;
    }
    let clamped = raw > cfg.alpha_max;
    Some(Sample {
        hit,
        gauss,
        alpha: if clamped { cfg.alpha_max } else { raw },
        clamped,
    })
}

/// Per-splat opacity at a pixel before clamping, or zero.
pub fn splat_alpha_at(
    cam: &SphericalCamera,
    pose: &SE3Pose,
    splat: &Splat,
    row: usize,
    col: usize,
    cfg: &RasterConfig,
) -> f64 {
    let Some(frame) = RayFrame::new(cam.pixel_ray(Pixel::new(col as f64, row as f64))) else {
        return 0.0;
    };
    let vs = ViewSplat::new(splat, &pose.inverse());
    match intersect_view(&vs, &frame, cfg.denom_eps) {
        Ok(hit) => vs.opacity * kernel(hit.s.x, hit.s.y),
        Err(_) => 0.0,
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    pos: usize,
    sample: Sample,
    transmittance: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct PixelBlend {
    range: f64,
    normal: Vec3,
    opacity: f64,
    transmittance: f64,
    last: u32,
    count: u32,
    clamped: u32,
}

/// Front-to-back blending over `(list position, splat)` pairs.
#[inline]
fn blend_pixel<'a, I, F>(frame: &RayFrame, items: I, cfg: &RasterConfig, mut visit: F) -> PixelBlend
where
    I: Iterator<Item = (usize, &'a ViewSplat)>,
    F: FnMut(Contribution),
{
    let mut out = PixelBlend {
        transmittance: 1.0,
        ..Default::default()
    };
    for (pos, vs) in items {
        let Some(smp) = sample(vs, frame, cfg) else {
            continue;
        };
        let t = out.transmittance;
        let w = smp.alpha * t;
        out.range += w * smp.hit.range;
        out.normal += vs.normal * w;
        out.opacity += w;
        out.transmittance = t * (1.0 - smp.alpha);
        out.last = pos as u32 + 1;
        out.count += 1;
        out.clamped += smp.clamped as u32;
        visit(Contribution {
            pos,
            sample: smp,
            transmittance: t,
        });
        if out.transmittance < cfg.transmittance_min {
            break;
        }
    }
    out
}

/// Rendered range, normal (sensor frame, not renormalized) and opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub range: Grid<f64>,
    pub normal: Grid<Vec3>,
    pub opacity: Grid<f64>,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            range: Grid::filled(width, height, 0.0),
            normal: Grid::filled(width, height, Vec3::zeros()),
            opacity: Grid::filled(width, height, 0.0),
        }
    }
    pub fn width(&self) -> usize {
        self.range.width
    }
    pub fn height(&self) -> usize {
        self.range.height
    }

    /// Range normalized by accumulated opacity, zero where nothing was hit.
    pub fn expected_range(&self, i: usize) -> f64 {
        let o = self.opacity.data[i];
        if o > 0.0 {
            self.range.data[i] / o
        } else {
            0.0
        }
    }

    /// Whether the plane through pixel `i` (its point and normal) also
    /// explains at least one neighbour along each image axis, within
    /// `slack.0 * range + slack.1`. Neighbours below `min_opacity` are
    /// ignored. Pixels that blend a foreground and a background surface
    /// fail this on both sides of the jump; slanted surfaces pass.
    pub fn plane_consistent(
        &self,
        cam: &SphericalCamera,
        i: usize,
        min_opacity: f64,
        slack: (f64, f64),
    ) -> bool {
        let (w, h) = (cam.width, cam.height);
        let (c, r) = (i % w, i / w);
        let d = self.expected_range(i);
        let ray = cam.pixel_ray(Pixel::new(c as f64, r as f64));
        let n = self.normal.data[i];
        let offset = n.dot(&(ray * d));
        let tol = slack.0 * d + slack.1;
        let fits = |j: usize| {
            if self.opacity.data[j] < min_opacity {
                return None;
            }
            let dj = self.expected_range(j);
            if !(dj > 0.0) {
                return None;
            }
            let along = n.dot(&cam.pixel_ray(Pixel::new((j % w) as f64, (j / w) as f64)));
            Some(along.abs() > 1e-9 && (offset / along - dj).abs() <= tol)
        };
        let axis = |a: Option<usize>, b: Option<usize>| {
            let checks: Vec<bool> = [a, b].into_iter().flatten().filter_map(fits).collect();
            checks.is_empty() || checks.contains(&true)
        };
        axis(c.checked_sub(1).map(|_| i - 1), (c + 1 < w).then_some(i + 1))
            && axis(r.checked_sub(1).map(|_| i - w), (r + 1 < h).then_some(i + w))
    }
}

/// Per-tile splat lists sorted by center range.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<(u32, f64)>>,
    /// Pixel bounds of each list entry, used to skip pixels a splat cannot
    /// reach.
    pub boxes: Vec<Vec<PixelBox>>,
}

/// Row span and at most two column spans of a splat's footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    rows: (u32, u32),
    columns: [(u32, u32); 2],
}

impl PixelBox {
    const EMPTY: PixelBox = PixelBox {
        rows: (1, 0),
        columns: [(1, 0), (1, 0)],
    };

    fn from_bounds(b: &PixelBounds, width: usize) -> Self {
        let rows = (b.rows.0 as u32, b.rows.1 as u32);
        let columns = match b.columns.as_slice() {
            [a] => [(a.0 as u32, a.1 as u32), (1, 0)],
            [a, c] => [(a.0 as u32, a.1 as u32), (c.0 as u32, c.1 as u32)],
            _ => [(0, width as u32 - 1), (1, 0)],
        };
        Self { rows, columns }
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as u32, col as u32);
        r >= self.rows.0
            && r <= self.rows.1
            && ((c >= self.columns[0].0 && c <= self.columns[0].1)
                || (c >= self.columns[1].0 && c <= self.columns[1].1))
    }
}

impl TileGrid {
    pub fn tile_of(&self, row: usize, col: usize) -> usize {
        (row / self.tile_size) * self.tiles_x + col / self.tile_size
    }

    pub fn pair_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// State kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct BlendRecords {
    pub tiles: TileGrid,
    pub view: Vec<ViewSplat>,
    /// One past the last tile-list position blended into each pixel.
    pub last: Grid<u32>,
    pub final_transmittance: Grid<f64>,
    pub contributions: usize,
    pub clamped: usize,
    frames: Vec<Option<RayFrame>>,
}

/// Pixel-space loss gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGradients {
    pub range: Grid<f64>,
    pub normal: Grid<Vec3>,
    pub opacity: Grid<f64>,
}

impl PixelGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            range: Grid::filled(width, height, 0.0),
            normal: Grid::filled(width, height, Vec3::zeros()),
            opacity: Grid::filled(width, height, 0.0),
        }
    }

    pub fn add(&mut self, other: &PixelGradients, weight: f64) {
        for (a, b) in self.range.data.iter_mut().zip(&other.range.data) {
            *a += weight * b;
        }
        for (a, b) in self.normal.data.iter_mut().zip(&other.normal.data) {
            *a += b * weight;
        }
        for (a, b) in self.opacity.data.iter_mut().zip(&other.opacity.data) {
            *a += weight * b;
        }
    }
}

/// Loss gradients per splat. `rotation` holds `dL/dt_a`, `dL/dt_b`,
/// `dL/dt_n` as columns, each treated as an independent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub mu: Vec<Vec3>,
    pub rotation: Vec<Matrix3<f64>>,
    pub scale: Vec<Vector2<f64>>,
    pub opacity: Vec<f64>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vec3::zeros(); n],
            rotation: vec![Matrix3::zeros(); n],
            scale: vec![Vector2::zeros(); n],
            opacity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Gradients with respect to the two free tangents, folding in the
    /// normal `t_n = t_a x t_b`.
    pub fn tangent_gradients(&self, i: usize, splat: &Splat) -> (Vec3, Vec3) {
        let g = &self.rotation[i];
        let gn = g.column(2).into_owned();
        let ga = g.column(0).into_owned() + splat.tangent_beta.cross(&gn);
        let gb = g.column(1).into_owned() + gn.cross(&splat.tangent_alpha);
        (ga, gb)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .rotation
                .iter()
                .all(|m| m.iter().all(|x| x.is_finite()))
            && self.scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ViewGrad {
    b_alpha: Vec3,
    b_beta: Vec3,
    b_center: Vec3,
    normal: Vec3,
    opacity: f64,
}

impl ViewGrad {
    fn add(&mut self, o: &ViewGrad) {
        self.b_alpha += o.b_alpha;
        self.b_beta += o.b_beta;
        self.b_center += o.b_center;
        self.normal += o.normal;
        self.opacity += o.opacity;
    }
}

/// Tile rasterizer over a spherical camera.
#[derive(Debug, Clone, Default)]
pub struct Rasterizer {
    pub config: RasterConfig,
}

impl Rasterizer {
    pub fn new(config: RasterConfig) -> Self {
        Self { config }
    }

    fn view_splats(&self, pose: &SE3Pose, model: &SplatModel) -> Vec<ViewSplat> {
        let view = pose.inverse();
        model
            .splats
            .par_iter()
            .map(|s| ViewSplat::new(s, &view))
            .collect()
    }

    /// Tile indices touched by a splat, in increasing order.
    pub fn splat_tiles(&self, cam: &SphericalCamera, splat: &Splat, pose: &SE3Pose) -> Vec<usize> {
        let vs = ViewSplat::new(splat, &pose.inverse());
        self.view_tiles(cam, &vs).0
    }

    fn view_tiles(&self, cam: &SphericalCamera, vs: &ViewSplat) -> (Vec<usize>, PixelBox) {
        let ts = self.config.tile_size;
        let tiles_x = cam.width.div_ceil(ts);
        let Some(bounds) = pixel_bounds(cam, vs, &self.config) else {
            return (Vec::new(), PixelBox::EMPTY);
        };
        let pbox = PixelBox::from_bounds(&bounds, cam.width);
        let mut cols = vec![false; tiles_x];
        for (c0, c1) in bounds.columns {
            for tx in c0 / ts..=c1 / ts {
                cols[tx] = true;
            }
        }
        let (r0, r1) = bounds.rows;
        let mut out = Vec::new();
        for ty in r0 / ts..=r1 / ts {
            for (tx, _) in cols.iter().enumerate().filter(|(_, &on)| on) {
                out.push(ty * tiles_x + tx);
            }
        }
        (out, pbox)
    }

    fn build_tiles(&self, cam: &SphericalCamera, view: &[ViewSplat]) -> TileGrid {
        let ts = self.config.tile_size;
        let tiles_x = cam.width.div_ceil(ts);
        let tiles_y = cam.height.div_ceil(ts);
        let per_splat: Vec<(Vec<usize>, PixelBox)> =
            view.par_iter().map(|vs| self.view_tiles(cam, vs)).collect();
        let mut lists: Vec<Vec<(u32, f64)>> = vec![Vec::new(); tiles_x * tiles_y];
        for (id, (tiles, _)) in per_splat.iter().enumerate() {
            for &t in tiles {
                lists[t].push((id as u32, view[id].key));
            }
        }
        lists.par_iter_mut().for_each(|l| l.sort_by(sort_order));
        let boxes = lists
            .iter()
            .map(|l| l.iter().map(|&(id, _)| per_splat[id as usize].1).collect())
            .collect();
        TileGrid {
            tile_size: ts,
            tiles_x,
            tiles_y,
            lists,
            boxes,
        }
    }

    /// Renders range, normal and opacity at `pose` (`world_from_sensor`).
    pub fn forward(
        &self,
        cam: &SphericalCamera,
        pose: &SE3Pose,
        model: &SplatModel,
    ) -> (RenderOutput, BlendRecords) {
        let view = self.view_splats(pose, model);
        let tiles = self.build_tiles(cam, &view);
        let frames = pixel_frames(cam);
        let (w, h) = (cam.width, cam.height);
        let ts = tiles.tile_size;
        let blended: Vec<Vec<(usize, PixelBlend)>> = (0..tiles.lists.len())
            .into_par_iter()
            .map(|t| {
                let list = &tiles.lists[t];
                let boxes = &tiles.boxes[t];
                let (ty, tx) = (t / tiles.tiles_x, t % tiles.tiles_x);
                let mut out = Vec::with_capacity(ts * ts);
                for r in ty * ts..((ty + 1) * ts).min(h) {
                    for c in tx * ts..((tx + 1) * ts).min(w) {
                        let i = r * w + c;
                        let Some(frame) = &frames[i] else { continue };
                        let items = list
                            .iter()
                            .enumerate()
                            .filter(|&(p, _)| boxes[p].contains(r, c))
                            .map(|(p, &(id, _))| (p, &view[id as usize]));
                        out.push((i, blend_pixel(frame, items, &self.config, |_| {})));
                    }
                }
                out
            })
            .collect();
        let mut render = RenderOutput::zeros(w, h);
        let mut last = Grid::filled(w, h, 0u32);
        let mut final_t = Grid::filled(w, h, 1.0);
        let (mut contributions, mut clamped) = (0usize, 0usize);
        for (i, px) in blended.into_iter().flatten() {
            render.range.data[i] = px.range;
            render.normal.data[i] = px.normal;
            render.opacity.data[i] = px.opacity;
            last.data[i] = px.last;
            final_t.data[i] = px.transmittance;
            contributions += px.count as usize;
            clamped += px.clamped as usize;
        }
        let records = BlendRecords {
            tiles,
            view,
            last,
            final_transmittance: final_t,
            contributions,
            clamped,
            frames,
        };
        (render, records)
    }

    /// Back-propagates pixel gradients to splat parameters.
    pub fn backward(
        &self,
        cam: &SphericalCamera,
        pose: &SE3Pose,
        model: &SplatModel,
        records: &BlendRecords,
        grads: &PixelGradients,
    ) -> Result<SplatGradients, RasterError> {
        let (w, h) = (cam.width, cam.height);
        if records.view.len() != model.len() {
            return Err(RasterError::RecordMismatch(format!(
                "{} recorded splats, model has {}",
                records.view.len(),
                model.len()
            )));
        }
        if records.last.width != w
            || records.last.height != h
            || grads.range.width != w
            || grads.range.height != h
        {
            return Err(RasterError::RecordMismatch("image size".into()));
        }
        let tiles = &records.tiles;
        let ts = tiles.tile_size;
        let view = &records.view;
        let per_tile: Vec<Result<Vec<ViewGrad>, RasterError>> = (0..tiles.lists.len())
            .into_par_iter()
            .map(|t| {
                let list = &tiles.lists[t];
                let boxes = &tiles.boxes[t];
                let mut acc = vec![ViewGrad::default(); list.len()];
                if list.is_empty() {
                    return Ok(acc);
                }
                let (ty, tx) = (t / tiles.tiles_x, t % tiles.tiles_x);
                let mut contribs: Vec<Contribution> = Vec::new();
                for r in ty * ts..((ty + 1) * ts).min(h) {
                    for c in tx * ts..((tx + 1) * ts).min(w) {
                        let i = r * w + c;
                        let Some(frame) = &records.frames[i] else {
                            continue;
                        };
                        let (gd, gn, go) = (
                            grads.range.data[i],
                            grads.normal.data[i],
                            grads.opacity.data[i],
                        );
                        if gd == 0.0 && go == 0.0 && gn == Vec3::zeros() {
                            continue;
                        }
                        contribs.clear();
                        let items = list
                            .iter()
                            .enumerate()
                            .filter(|&(p, _)| boxes[p].contains(r, c))
                            .map(|(p, &(id, _))| (p, &view[id as usize]));
                        let px = blend_pixel(frame, items, &self.config, |ctb| contribs.push(ctb));
                        if px.last != records.last.data[i] {
                            return Err(RasterError::RecordMismatch(format!("pixel ({r}, {c})")));
                        }
                        backward_pixel(frame, list, view, &contribs, gd, &gn, go, &mut acc);
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut view_grads = vec![ViewGrad::default(); view.len()];
        for (t, acc) in per_tile.into_iter().enumerate() {
            let acc = acc?;
            for (pos, g) in acc.iter().enumerate() {
                let id = tiles.lists[t][pos].0 as usize;
                view_grads[id].add(g);
            }
        }
        Ok(to_world_gradients(pose, model, &view_grads))
    }

    /// Tile-free reference renderer: every pixel blends every splat in the
    /// same global center-range order.
    pub fn reference(
        &self,
        cam: &SphericalCamera,
        pose: &SE3Pose,
        model: &SplatModel,
    ) -> RenderOutput {
        let view = self.view_splats(pose, model);
        let mut order: Vec<(u32, f64)> = view
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v.key))
            .collect();
        order.sort_by(sort_order);
        let (w, h) = (cam.width, cam.height);
        let rows: Vec<Vec<PixelBlend>> = (0..h)
            .into_par_iter()
            .map(|r| {
                (0..w)
                    .map(|c| {
                        let dir = cam.pixel_ray(Pixel::new(c as f64, r as f64));
                        match RayFrame::new(dir) {
                            Some(frame) => {
                                let items = order
                                    .iter()
                                    .enumerate()
                                    .map(|(p, &(id, _))| (p, &view[id as usize]));
                                blend_pixel(&frame, items, &self.config, |_| {})
                            }
                            None => PixelBlend::default(),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut out = RenderOutput::zeros(w, h);
        for (i, px) in rows.into_iter().flatten().enumerate() {
            out.range.data[i] = px.range;
            out.normal.data[i] = px.normal;
            out.opacity.data[i] = px.opacity;
        }
        out
    }
}

fn sort_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    frame: &RayFrame,
    list: &[(u32, f64)],
    view: &[ViewSplat],
    contribs: &[Contribution],
    gd: f64,
    gn: &Vec3,
    go: f64,
    acc: &mut [ViewGrad],
) {
    let mut b_range = 0.0;
    let mut b_normal = Vec3::zeros();
    let mut b_opacity = 0.0;
    for ctb in contribs.iter().rev() {
        let vs = &view[list[ctb.pos].0 as usize];
        let smp = &ctb.sample;
        let hit = &smp.hit;
        let a_k = ctb.transmittance;
        let alpha = smp.alpha;
        let one_minus = 1.0 - alpha;
        let weight = alpha * a_k;

        let d_range = hit.range * a_k - b_range / one_minus;
        let d_normal = vs.normal * a_k - b_normal / one_minus;
        let d_opacity = a_k - b_opacity / one_minus;
        let g_alpha = gd * d_range + gn.dot(&d_normal) + go * d_opacity;

        b_range += hit.range * weight;
        b_normal += vs.normal * weight;
        b_opacity += weight;

        let g_d = gd * weight;
        let g = &mut acc[ctb.pos];
        g.normal += gn * weight;

        let mut g_s = Vector2::zeros();
        if !smp.clamped {
            g.opacity += g_alpha * smp.gauss;
            g_s -= hit.s * (g_alpha * alpha);
        }
        let nu_dir = hit.nu / hit.range;
        g_s.x += g_d * nu_dir.dot(&vs.b_alpha);
        g_s.y += g_d * nu_dir.dot(&vs.b_beta);

        let p = &hit.p_hat;
        let g_p = Vec3::new(g_s.x, g_s.y, -(p.x * g_s.x + p.y * g_s.y) / p.z) / p.z;
        let rho_a = g_p.cross(&hit.h_alpha);
        let rho_b = g_p.cross(&hit.h_beta);
        let direct = nu_dir * g_d;
        g.b_alpha += frame.hy * rho_a.x - frame.hx * rho_b.x + direct * hit.s.x;
        g.b_beta += frame.hy * rho_a.y - frame.hx * rho_b.y + direct * hit.s.y;
        g.b_center += frame.hy * rho_a.z - frame.hx * rho_b.z + direct;
    }
}

fn to_world_gradients(
    pose: &SE3Pose,
    model: &SplatModel,
    view_grads: &[ViewGrad],
) -> SplatGradients {
    // sensor_from_world rotation is pose.rotation^T, so pulling a sensor-frame
    // gradient back to the world frame multiplies by pose.rotation.
    let r_ws = &pose.rotation;
    let mut out = SplatGradients::zeros(model.len());
    for (i, (s, g)) in model.splats.iter().zip(view_grads).enumerate() {
        let sc = s.scale();
        let ga = r_ws * g.b_alpha;
        let gb = r_ws * g.b_beta;
        out.mu[i] = r_ws * g.b_center;
        out.rotation[i] = Matrix3::from_columns(&[ga * sc.x, gb * sc.y, r_ws * g.normal]);
        out.scale[i] = Vector2::new(ga.dot(&s.tangent_alpha), gb.dot(&s.tangent_beta));
        out.opacity[i] = g.opacity;
    }
    out
}

/// Integer pixel extents of a splat: row range plus one or more column
/// ranges (split when the splat wraps horizontally).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBounds {
    pub rows: (usize, usize),
    pub columns: Vec<(usize, usize)>,
}

struct BoundAccumulator<'a> {
    cam: &'a SphericalCamera,
    center_azimuth: f64,
    u_min: f64,
    u_max: f64,
    v_min: f64,
    v_max: f64,
    wraps: bool,
}

impl BoundAccumulator<'_> {
    /// Relative column and row of a sensor-frame point.
    fn locate(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.norm_squared() < 1e-24 {
            return None;
        }
        let az = p.y.atan2(p.x);
        let el = p.z.atan2(p.x.hypot(p.y));
        let rel = wrap_angle(az - self.center_azimuth);
        Some((self.cam.fx() * rel, self.cam.fy() * el + self.cam.cy()))
    }

    fn include(&mut self, uv: (f64, f64)) {
        let rel_az = uv.0 / self.cam.fx();
        if rel_az.abs() > 0.9 * std::f64::consts::PI {
            self.wraps = true;
        }
        self.u_min = self.u_min.min(uv.0);
        self.u_max = self.u_max.max(uv.0);
        self.v_min = self.v_min.min(uv.1);
        self.v_max = self.v_max.max(uv.1);
    }
}

/// Pixel bounds from the projected boundary of the splat's cutoff square,
/// measured in coordinates where the splat center sits at azimuth zero.
fn pixel_bounds(cam: &SphericalCamera, vs: &ViewSplat, cfg: &RasterConfig) -> Option<PixelBounds> {
    let radius = vs.cutoff_radius(cfg.alpha_min)?;
    let center = vs.b_center;
    if center.norm() < 1e-9 {
        return None;
    }
    let center_azimuth = center.y.atan2(center.x);
    if let Some(b) = cone_bounds(cam, vs, radius, center_azimuth) {
        return b;
    }
    let mut acc = BoundAccumulator {
        cam,
        center_azimuth,
        u_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_min: f64::INFINITY,
        v_max: f64::NEG_INFINITY,
        wraps: false,
    };
    acc.include(acc.locate(&center)?);

    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    for k in 0..4 {
        let (a0, b0) = corners[k];
        let (a1, b1) = corners[(k + 1) % 4];
        let start = (a0 * radius, b0 * radius);
        let end = (a1 * radius, b1 * radius);
        let mid = (0.5 * (start.0 + end.0), 0.5 * (start.1 + end.1));
        trace_segment(&mut acc, vs, start, mid, cfg.bbox_max_segment_px, 0);
        trace_segment(&mut acc, vs, mid, end, cfg.bbox_max_segment_px, 0);
    }

    // Which poles the cutoff square contains.
    let plane_n = vs.b_alpha.cross(&vs.b_beta);
    let mut pole_up = false;
    let mut pole_down = false;
    if plane_n.z.abs() > 1e-15 * plane_n.norm() {
        let lambda = plane_n.dot(&center) / plane_n.z;
        let q = Vec3::new(0.0, 0.0, lambda) - center;
        if let Some((a, b)) = splat_coords(vs, &q) {
            if a.abs() <= radius && b.abs() <= radius {
                if lambda >= 0.0 {
                    pole_up = true;
                } else {
                    pole_down = true;
                }
            }
        }
    } else if plane_n.dot(&center).abs() < 1e-12 * plane_n.norm() {
        acc.wraps = true;
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    if pole_up {
        acc.wraps = true;
        acc.v_min = acc.v_min.min(cam.fy() * half_pi + cam.cy());
        acc.v_max = acc.v_max.max(cam.fy() * half_pi + cam.cy());
    }
    if pole_down {
        acc.wraps = true;
        acc.v_min = acc.v_min.min(-cam.fy() * half_pi + cam.cy());
        acc.v_max = acc.v_max.max(-cam.fy() * half_pi + cam.cy());
    }

    let u_center = cam.fx() * center_azimuth + cam.cx();
    finish_bounds(
        cam,
        (acc.v_min, acc.v_max),
        (u_center + acc.u_min, u_center + acc.u_max),
        acc.wraps,
        cfg.bbox_margin_px,
    )
}

/// Bounds from the cone enclosing the cutoff disc, when the disc is far
/// enough from the sensor and from both poles. The axes are orthogonal, so
/// every point of the disc lies within `radius max(|b_alpha|, |b_beta|)` of
/// the center and the cone is conservative.
fn cone_bounds(
    cam: &SphericalCamera,
    vs: &ViewSplat,
    radius: f64,
    center_azimuth: f64,
) -> Option<Option<PixelBounds>> {
    let c = vs.b_center;
    let dist = c.norm();
    let reach = radius * vs.b_alpha.norm().max(vs.b_beta.norm()) * (1.0 + 1e-9);
    if !(reach < 0.5 * dist) {
        return None;
    }
    let half = (reach / dist).asin();
    let elevation = (c.z / dist).clamp(-1.0, 1.0).asin();
    let pole_gap = std::f64::consts::FRAC_PI_2 - elevation.abs() - half;
    if !(pole_gap > 0.05) {
        return None;
    }
    let spread = (half.sin() / elevation.cos()).min(1.0).asin();
    let (fx, fy) = (cam.fx().abs(), cam.fy().abs());
    let v_center = cam.fy() * elevation + cam.cy();
    let u_center = cam.fx() * center_azimuth + cam.cx();
    Some(finish_bounds(
        cam,
        (v_center - fy * half, v_center + fy * half),
        (u_center - fx * spread, u_center + fx * spread),
        false,
        1e-6,
    ))
}

/// Clips continuous pixel extents to the image, splitting column spans that
/// cross the azimuth seam.
fn finish_bounds(
    cam: &SphericalCamera,
    v: (f64, f64),
    u: (f64, f64),
    wraps: bool,
    m: f64,
) -> Option<PixelBounds> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let v_lo = (v.0 - m).ceil().max(0.0);
    let v_hi = (v.1 + m).floor().min(h - 1.0);
    if !(v_lo <= v_hi) {
        return None;
    }
    let rows = (v_lo as usize, v_hi as usize);
    let full = (0usize, cam.width - 1);
    if wraps {
        return Some(PixelBounds {
            rows,
            columns: vec![full],
        });
    }
    let lo = u.0 - m;
    let hi = u.1 + m;
    let period = cam.columns_per_turn();
    if hi - lo >= period {
        return Some(PixelBounds {
            rows,
            columns: vec![full],
        });
    }
    let mut columns = Vec::new();
    for shift in [-1.0, 0.0, 1.0] {
        let a = (lo + shift * period).ceil().max(0.0);
        let b = (hi + shift * period).floor().min(w - 1.0);
        if a <= b {
            columns.push((a as usize, b as usize));
        }
    }
    if columns.is_empty() {
        return None;
    }
    Some(PixelBounds { rows, columns })
}

fn splat_coords(vs: &ViewSplat, q: &Vec3) -> Option<(f64, f64)> {
    let (a, b) = (&vs.b_alpha, &vs.b_beta);
    let (aa, ab, bb) = (a.dot(a), a.dot(b), b.dot(b));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-300 {
        return None;
    }
    let (qa, qb) = (q.dot(a), q.dot(b));
    Some(((bb * qa - ab * qb) / det, (aa * qb - ab * qa) / det))
}

fn trace_segment(
    acc: &mut BoundAccumulator<'_>,
    vs: &ViewSplat,
    start: (f64, f64),
    end: (f64, f64),
    max_px: f64,
    depth: u32,
) {
    let p0 = acc.locate(&vs.point(start.0, start.1));
    let p1 = acc.locate(&vs.point(end.0, end.1));
    if let Some(p) = p0 {
        acc.include(p);
    }
    if let Some(p) = p1 {
        acc.include(p);
    }
    let long = match (p0, p1) {
        (Some(a), Some(b)) => (a.0 - b.0).abs().max((a.1 - b.1).abs()) > max_px,
        _ => true,
    };
    if long && depth < 12 {
        let mid = (0.5 * (start.0 + end.0), 0.5 * (start.1 + end.1));
        trace_segment(acc, vs, start, mid, max_px, depth + 1);
        trace_segment(acc, vs, mid, end, max_px, depth + 1);
    }
}

/// Tile indices covering a splat (`pose` is `world_from_sensor`).
pub fn splat_bbox_tiles(cam: &SphericalCamera, splat: &Splat, pose: &SE3Pose) -> Vec<usize> {
    Rasterizer::default().splat_tiles(cam, splat, pose)
}

pub fn rasterize_forward(
    cam: &SphericalCamera,
    pose: &SE3Pose,
    model: &SplatModel,
) -> (RenderOutput, BlendRecords) {
    Rasterizer::default().forward(cam, pose, model)
}

pub fn rasterize_backward(
    cam: &SphericalCamera,
    pose: &SE3Pose,
    model: &SplatModel,
    records: &BlendRecords,
    grads: &PixelGradients,
) -> Result<SplatGradients, RasterError> {
    Rasterizer::default().backward(cam, pose, model, records, grads)
}

pub fn reference_rasterize(
    cam: &SphericalCamera,
    pose: &SE3Pose,
    model: &SplatModel,
) -> RenderOutput {
    Rasterizer::default().reference(cam, pose, model)
}

/// Pixel set where the splat's unclamped opacity exceeds the cutoff.
pub fn covered_pixels(
    cam: &SphericalCamera,
    pose: &SE3Pose,
    splat: &Splat,
    cfg: &RasterConfig,
) -> Vec<(usize, usize)> {
    let vs = ViewSplat::new(splat, &pose.inverse());
    let mut out = Vec::new();
    for r in 0..cam.height {
        for c in 0..cam.width {
            let Some(frame) = RayFrame::new(cam.pixel_ray(Pixel::new(c as f64, r as f64))) else {
                continue;
            };
            if let Ok(hit) = intersect_view(&vs, &frame, cfg.denom_eps) {
                if vs.opacity * kernel(hit.s.x, hit.s.y) > cfg.alpha_min {
                    out.push((r, c));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{back_project, project};
    use crate::splats::splat_transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn panorama(w: usize, h: usize) -> SphericalCamera {
        let half = PI * (1.0 - 1.0 / w as f64);
        SphericalCamera::from_fov(w, h, -half, half, -0.4, 0.4).unwrap()
    }

    fn facing_splat(mu: Vec3, s: f64, o: f64) -> Splat {
        Splat::facing(mu, -mu.normalize(), Vector2::new(s, s), o)
    }

    #[test]
    fn ray_planes_forward_axis() {
        let cam = panorama(64, 16);
        let center = cam.angles_to_pixel(0.0, 0.0);
        let p = pixel_ray_planes(&cam, center).unwrap();
        assert!((p.hx.xyz().abs() - Vec3::y()).norm() < 1e-9);
        assert!((p.hy.xyz().abs() - Vec3::z()).norm() < 1e-9);
        assert_eq!(p.hx.w, 0.0);
    }

    #[test]
    fn ray_planes_contain_ray() {
        let cam = panorama(256, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let px = Pixel::new(rng.random_range(0.0..255.0), rng.random_range(0.0..31.0));
            let v = cam.pixel_ray(px);
            let p = pixel_ray_planes(&cam, px).unwrap();
            assert!(p.hx.xyz().dot(&v).abs() < 1e-12);
            assert!(p.hy.xyz().dot(&v).abs() < 1e-12);
            assert!(p.hx.xyz().dot(&p.hy.xyz()).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_planes_pole_is_degenerate() {
        let cam = SphericalCamera::from_fov(64, 16, -1.0, 1.0, -PI / 2.0, PI / 2.0).unwrap();
        let top = cam.angles_to_pixel(0.0, PI / 2.0);
        assert_eq!(pixel_ray_planes(&cam, top), Err(RasterError::DegenerateRay));
    }

    #[test]
    fn symmetric_intersection() {
        let cam = panorama(64, 16);
        let s = Splat::new(
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::y(),
            Vec3::z(),
            Vector2::new(0.5, 0.5),
            0.9,
        );
        let planes = pixel_ray_planes(&cam, cam.angles_to_pixel(0.0, 0.0)).unwrap();
        let hit = ray_splat_intersect(&splat_transform(&s), &SE3Pose::identity(), &planes).unwrap();
        assert!(hit.s.norm() < 1e-12);
        assert!((hit.range - 5.0).abs() < 1e-12);
    }

    #[test]
    fn intersection_reprojects_onto_query_pixel() {
        let cam = panorama(512, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 500 {
            let mu = Vec3::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(-2.0..2.0),
            );
            let n = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if mu.norm() < 0.5 || n.norm() < 0.1 {
                continue;
            }
            let pose = SE3Pose::exp(&nalgebra::Vector6::from_fn(|_, _| {
                rng.random_range(-0.3..0.3)
            }));
            let s = Splat::facing(mu, n, Vector2::new(0.3, 0.2), 0.8);
            let px = Pixel::new(rng.random_range(0.0..511.0), rng.random_range(0.0..63.0));
            let planes = pixel_ray_planes(&cam, px).unwrap();
            let Ok(hit) = ray_splat_intersect(&splat_transform(&s), &pose, &planes) else {
                continue;
            };
            let back = project(&cam, &hit.nu).unwrap();
            assert!((back.u - px.u).abs() < 1e-4 && (back.v - px.v).abs() < 1e-4);
            // the hit lies on the splat plane in world coordinates
            let world = pose.apply(&hit.nu);
            assert!((world - s.centroid).dot(&s.normal()).abs() < 1e-6 * hit.range.max(1.0));
            checked += 1;
        }
    }

    #[test]
    fn coplanar_ray_has_no_intersection() {
        let cam = panorama(64, 16);
        // plane z = 0 seen by the horizontal center ray
        let s = Splat::new(
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::x(),
            Vec3::y(),
            Vector2::new(1.0, 1.0),
            0.9,
        );
        let planes = pixel_ray_planes(&cam, cam.angles_to_pixel(0.0, 0.0)).unwrap();
        assert_eq!(
            ray_splat_intersect(&splat_transform(&s), &SE3Pose::identity(), &planes),
            Err(RasterError::NoIntersection)
        );
    }

    #[test]
    fn empty_model_renders_zero() {
        let cam = panorama(64, 16);
        let (out, rec) = rasterize_forward(&cam, &SE3Pose::identity(), &SplatModel::new());
        assert!(out.range.data.iter().all(|&d| d == 0.0));
        assert!(out.opacity.data.iter().all(|&d| d == 0.0));
        assert!(out.normal.data.iter().all(|n| *n == Vec3::zeros()));
        assert_eq!(rec.contributions, 0);
        let r = reference_rasterize(&cam, &SE3Pose::identity(), &SplatModel::new());
        assert_eq!(r, out);
    }

    #[test]
    fn single_opaque_splat_at_peak() {
        let cam = panorama(64, 16);
        let center = cam.angles_to_pixel(0.0, 0.0);
        let dir = cam.pixel_ray(Pixel::new(center.u.round(), center.v.round()));
        let mu = dir * 6.0;
        let s = facing_splat(mu, 0.3, 1.0 - 1e-12);
        let model: SplatModel = [s.clone()].into_iter().collect();
        let (out, _) = rasterize_forward(&cam, &SE3Pose::identity(), &model);
        let i = out
            .range
            .index(center.v.round() as usize, center.u.round() as usize);
        assert!((out.opacity.data[i] - 0.99).abs() < 1e-12);
        assert!((out.range.data[i] - 0.99 * 6.0).abs() < 1e-9);
        assert!((out.normal.data[i] - s.normal() * 0.99).norm() < 1e-9);
    }

    #[test]
    fn two_half_transparent_splats() {
        let cam = panorama(64, 16);
        let px = Pixel::new(32.0, 8.0);
        let dir = cam.pixel_ray(px);
        let model: SplatModel = [
            facing_splat(dir * 8.0, 0.3, 0.5),
            facing_splat(dir * 4.0, 0.3, 0.5),
        ]
        .into_iter()
        .collect();
        let (out, _) = rasterize_forward(&cam, &SE3Pose::identity(), &model);
        let i = out.range.index(8, 32);
        assert!((out.range.data[i] - 4.0).abs() < 1e-9);
        assert!((out.opacity.data[i] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn front_facing_splat_stays_in_one_block() {
        let cam = panorama(256, 32);
        let s = facing_splat(Vec3::new(10.0, 0.0, 0.0), 0.05, 0.9);
        let tiles = splat_bbox_tiles(&cam, &s, &SE3Pose::identity());
        assert!(!tiles.is_empty());
        let tiles_x = 256 / 16;
        let cols: Vec<usize> = tiles.iter().map(|t| t % tiles_x).collect();
        let (lo, hi) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(lo >= 6 && hi <= 9);
    }

    #[test]
    fn seam_splat_touches_both_ends() {
        let cam = panorama(256, 32);
        let tiles_x = 256 / 16;
        // behind the sensor: column 0 / W-1 boundary
        let s = facing_splat(Vec3::new(-4.0, 0.0, 0.0), 0.6, 0.9);
        let tiles = splat_bbox_tiles(&cam, &s, &SE3Pose::identity());
        let cols: std::collections::BTreeSet<usize> = tiles.iter().map(|t| t % tiles_x).collect();
        assert!(
            cols.contains(&0) && cols.contains(&(tiles_x - 1)),
            "{cols:?}"
        );
        assert!(cols.len() < tiles_x);
        let covered = covered_pixels(&cam, &SE3Pose::identity(), &s, &RasterConfig::default());
        let grid =
            Rasterizer::default().build_tiles(&cam, &[ViewSplat::new(&s, &SE3Pose::identity())]);
        for (r, c) in covered {
            assert!(tiles.contains(&grid.tile_of(r, c)));
        }
    }

    #[test]
    fn reference_matches_tiles_on_random_scene() {
        let cam = panorama(128, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model: SplatModel = (0..300)
            .map(|_| {
                let dir = crate::geometry::direction_from_angles(
                    rng.random_range(-PI..PI),
                    rng.random_range(-0.4..0.4),
                );
                let n = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                Splat::facing(
                    dir * rng.random_range(2.0..10.0),
                    n,
                    Vector2::new(rng.random_range(0.05..0.8), rng.random_range(0.05..0.8)),
                    rng.random_range(0.05..1.0),
                )
            })
            .collect();
        let pose = SE3Pose::from_yaw(0.4, Vec3::new(0.2, -0.1, 0.05));
        let (a, _) = rasterize_forward(&cam, &pose, &model);
        let b = reference_rasterize(&cam, &pose, &model);
        for i in 0..a.range.len() {
            assert!((a.range.data[i] - b.range.data[i]).abs() < 1e-9);
            assert!((a.opacity.data[i] - b.opacity.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pixel_gradients_give_zero() {
        let cam = panorama(64, 16);
        let model: SplatModel = [facing_splat(Vec3::new(5.0, 0.5, 0.0), 0.5, 0.7)]
            .into_iter()
            .collect();
        let (_, rec) = rasterize_forward(&cam, &SE3Pose::identity(), &model);
        let g = rasterize_backward(
            &cam,
            &SE3Pose::identity(),
            &model,
            &rec,
            &PixelGradients::zeros(64, 16),
        )
        .unwrap();
        assert_eq!(g, SplatGradients::zeros(1));
    }

    #[test]
    fn mismatched_records_rejected() {
        let cam = panorama(64, 16);
        let model: SplatModel = [facing_splat(Vec3::new(5.0, 0.5, 0.0), 0.5, 0.7)]
            .into_iter()
            .collect();
        let (_, rec) = rasterize_forward(&cam, &SE3Pose::identity(), &model);
        let mut other = model.clone();
        other.push(facing_splat(Vec3::new(3.0, 0.0, 0.0), 0.5, 0.7), 0);
        let err = rasterize_backward(
            &cam,
            &SE3Pose::identity(),
            &other,
            &rec,
            &PixelGradients::zeros(64, 16),
        );
        assert!(matches!(err, Err(RasterError::RecordMismatch(_))));
    }

    #[test]
    fn range_gradient_of_single_splat_matches_finite_differences() {
        let cam = panorama(96, 24);
        let pose = SE3Pose::identity();
        let px = Pixel::new(48.0, 12.0);
        let mu0 = back_project(&cam, px, 5.0).unwrap() + Vec3::new(0.0, 0.05, 0.03);
        let make = |mu: Vec3| -> SplatModel {
            [Splat::new(
                mu,
                Vec3::new(0.1, 1.0, 0.2),
                Vec3::new(0.0, -0.2, 1.0),
                Vector2::new(0.4, 0.3),
                0.6,
            )]
            .into_iter()
            .collect()
        };
        let model = make(mu0);
        let (out, rec) = rasterize_forward(&cam, &pose, &model);
        let mut pg = PixelGradients::zeros(96, 24);
        let i = out.range.index(12, 48);
        pg.range.data[i] = 1.0;
        let g = rasterize_backward(&cam, &pose, &model, &rec, &pg).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let dp = rasterize_forward(&cam, &pose, &make(mu0 + e)).0.range.data[i];
            let dm = rasterize_forward(&cam, &pose, &make(mu0 - e)).0.range.data[i];
            let fd = (dp - dm) / (2.0 * h);
            let a = g.mu[0][k];
            assert!(
                (a - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                "k={k} analytic={a} fd={fd}"
            );
        }
    }
}
