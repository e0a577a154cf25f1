//! Local-map lifecycle: initialization, densification, the mapping loss and
//! keyframe-sampled refinement.

use nalgebra::Vector2;
use rand::seq::index::sample_weighted;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    back_project, build_range_image, range_gradient_magnitude, range_image_normals, Grid,
    NormalImage, Pixel, RangeImage, SE3Pose, SphericalCamera, Vec3,
};
use crate::rasterizer::{PixelGradients, RasterError, Rasterizer, RenderOutput, SplatGradients};
use crate::splats::{tangent_basis, Splat, SplatModel, MIN_SCALE};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("keyframe has no valid pixels")]
    EmptyKeyframe,
    #[error("local map has no keyframes")]
    NoKeyframes,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Weight applied to each pixel of the range loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeWeight {
    /// `1 / max(range, 1 m)`
    InverseRange,
    Constant,
}

impl RangeWeight {
    pub fn weight(self, target: f64) -> f64 {
        match self {
            RangeWeight::InverseRange => 1.0 / target.max(1.0),
            RangeWeight::Constant => 1.0,
        }
    }
}

/// Which rendered range the range loss compares with the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeTarget {
    /// The blended range `D`, short by `1 - O` wherever coverage is partial.
    Blended,
    /// `D / max(O, RANGE_OPACITY_FLOOR)`, the range every consumer reads.
    Normalized,
}

/// Opacity below which the normalized range stops dividing further.
pub const RANGE_OPACITY_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Fraction of valid pixels sampled when spawning splats.
    pub sample_fraction: f64,
    /// Cap on splats spawned per keyframe event.
    pub max_new_splats: usize,
    /// Refinement iterations per keyframe event.
    pub iterations: usize,
    pub lambda_opacity: f64,
    pub lambda_normal: f64,
    pub lambda_scale: f64,
    /// Largest scale before the hinge penalty applies, meters.
    pub scale_threshold: f64,
    pub densify_opacity: f64,
    /// Range error triggering densification, meters.
    pub densify_error: f64,
    /// Success probability of the keyframe sampler.
    pub recent_keyframe_prob: f64,
    pub max_keyframes: usize,
    /// Mean rendered opacity over valid pixels below which the map resets.
    pub min_coverage: f64,
    /// Translation from the local-map origin that triggers a reset, meters.
    pub reset_radius: f64,
    pub range_weight: RangeWeight,
    pub range_target: RangeTarget,
    pub lr_position: f64,
    pub lr_tangent: f64,
    pub lr_log_scale: f64,
    pub lr_logit_opacity: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub prune_opacity: f64,
    pub init_opacity: f64,
    /// Initial scale in units of the pixel footprint.
    pub init_scale: f64,
    /// Sampling weight floor relative to the mean gradient weight.
    pub weight_floor: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.5,
            max_new_splats: 20_000,
            iterations: 10,
            lambda_opacity: 0.05,
            lambda_normal: 0.1,
            lambda_scale: 1.0,
            scale_threshold: 0.5,
            densify_opacity: 0.5,
            densify_error: 0.1,
            recent_keyframe_prob: 0.4,
            max_keyframes: 100,
            min_coverage: 0.3,
            reset_radius: 50.0,
            range_weight: RangeWeight::InverseRange,
            range_target: RangeTarget::Normalized,
            lr_position: 1e-3,
            lr_tangent: 1e-2,
            lr_log_scale: 5e-3,
            lr_logit_opacity: 5e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            prune_opacity: 0.005,
            init_opacity: 0.5,
            init_scale: 1.0,
            weight_floor: 0.05,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), String> {
        let weights = [
            self.lambda_opacity,
            self.lambda_normal,
            self.lambda_scale,
            self.lr_position,
            self.lr_tangent,
            self.lr_log_scale,
            self.lr_logit_opacity,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err("loss weights and learning rates must be non-negative".into());
        }
        if !(0.4..=1.0).contains(&self.recent_keyframe_prob) {
            return Err("recent_keyframe_prob must lie in [0.4, 1]".into());
        }
        if !(self.scale_threshold > 0.0) {
            return Err("scale_threshold must be positive".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err("sample_fraction must lie in (0, 1]".into());
        }
        if self.max_keyframes == 0 {
            return Err("max_keyframes must be at least 1".into());
        }
        Ok(())
    }

    fn max_scale(&self) -> f64 {
        10.0 * self.scale_threshold
    }
}

/// A scan kept for refinement, with its measured range and normal images.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub cloud: Vec<Vec3>,
    /// Sensor pose in the world.
    pub pose: SE3Pose,
    pub cam: SphericalCamera,
    pub range: RangeImage,
    pub normals: NormalImage,
}

impl Keyframe {
    pub fn new(cloud: Vec<Vec3>, pose: SE3Pose, cam: SphericalCamera) -> Self {
        let range = build_range_image(&cam, &cloud);
        let normals = range_image_normals(&range, &cam);
        Self {
            cloud,
            pose,
            cam,
            range,
            normals,
        }
    }

    pub fn valid_mask(&self) -> &Grid<bool> {
        &self.range.valid_mask
    }
}

/// Per-parameter Adam moments. Each splat carries 12 scalars: centroid,
/// both tangents, log-scales and logit-opacity.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<[f64; 12]>,
    pub second: Vec<[f64; 12]>,
}

impl AdamState {
    fn push(&mut self) {
        self.first.push([0.0; 12]);
        self.second.push([0.0; 12]);
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.first.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut j = 0;
        self.second.retain(|_| {
            j += 1;
            keep[j - 1]
        });
    }
}

/// A splat model together with the keyframes that built it.
#[derive(Debug, Clone)]
pub struct LocalMap {
    pub model: SplatModel,
    pub keyframes: Vec<Keyframe>,
    /// Pose of the keyframe that started this map.
    pub origin: SE3Pose,
    /// Median measured range of the first keyframe, meters.
    pub scene_scale: f64,
    pub adam: AdamState,
    /// Number of keyframe events so far.
    pub events: u32,
}

impl LocalMap {
    pub fn splat_count(&self) -> usize {
        self.model.len()
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    fn push_splat(&mut self, s: Splat) {
        self.model.push(s, self.events);
        self.adam.push();
    }

    /// Drops splats whose opacity fell below `threshold`.
    pub fn prune(&mut self, threshold: f64) -> usize {
        let keep: Vec<bool> = self
            .model
            .splats
            .iter()
            .map(|s| s.opacity() >= threshold)
            .collect();
        self.adam.retain(&keep);
        self.model.retain_indices(&keep)
    }
}

/// Sample weights per valid pixel: range-gradient magnitude plus a floor.
fn sampling_weights(kf: &Keyframe, candidates: &[usize], floor: f64) -> Vec<f64> {
    let grad = range_gradient_magnitude(&kf.range);
    let raw: Vec<f64> = candidates.iter().map(|&i| grad.data[i]).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if !(mean > 0.0) {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|w| w + floor * mean).collect()
}

fn spawn_count(cfg: &MappingConfig, valid: usize, candidates: usize) -> usize {
    let n = ((cfg.sample_fraction * valid as f64).ceil() as usize).min(cfg.max_new_splats);
    n.min(candidates)
}

/// Splat placed at a measured pixel, facing the sensor.
fn spawn_splat(kf: &Keyframe, idx: usize, cfg: &MappingConfig) -> Option<Splat> {
    let w = kf.range.width();
    let (r, c) = (idx / w, idx % w);
    let d = kf.range.at(r, c);
    let px = Pixel::new(c as f64, r as f64);
    let local = back_project(&kf.cam, px, d).ok()?;
    let ray = local / d;
    let mut n = if kf.normals.valid_mask.data[idx] {
        kf.normals.normals.data[idx]
    } else {
        -ray
    };
    if n.dot(&ray) >= 0.0 {
        n = -n;
    }
    let (pitch_h, pitch_v) = kf.cam.angular_pitch();
    let s = (cfg.init_scale * d * pitch_h.max(pitch_v)).max(MIN_SCALE);
    let world_n = kf.pose.rotation * n;
    let (ta, tb) = tangent_basis(&world_n);
    Some(Splat::new(
        kf.pose.apply(&local),
        ta,
        tb,
        Vector2::new(s, s),
        cfg.init_opacity,
    ))
}

fn spawn_from<R: Rng + ?Sized>(
    map: &mut LocalMap,
    kf: &Keyframe,
    candidates: &[usize],
    cfg: &MappingConfig,
    rng: &mut R,
) -> usize {
    let n = spawn_count(cfg, kf.range.valid_count(), candidates.len());
    if n == 0 {
        return 0;
    }
    let weights = sampling_weights(kf, candidates, cfg.weight_floor);
    let picked = sample_weighted(rng, candidates.len(), |i| weights[i], n)
        .expect("sampling weights are positive and finite");
    let mut chosen: Vec<usize> = picked.into_iter().map(|i| candidates[i]).collect();
    chosen.sort_unstable();
    let mut spawned = 0;
    for idx in chosen {
        if let Some(s) = spawn_splat(kf, idx, cfg) {
            map.push_splat(s);
            spawned += 1;
        }
    }
    spawned
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Starts a local map from one keyframe.
pub fn init_local_model<R: Rng + ?Sized>(
    kf: Keyframe,
    cfg: &MappingConfig,
    rng: &mut R,
) -> Result<LocalMap, MappingError> {
    let candidates: Vec<usize> = (0..kf.range.range.len())
        .filter(|&i| kf.range.valid_mask.data[i])
        .collect();
    if candidates.is_empty() {
        return Err(MappingError::EmptyKeyframe);
    }
    let scene_scale = median(candidates.iter().map(|&i| kf.range.range.data[i]).collect());
    let mut map = LocalMap {
        model: SplatModel::new(),
        keyframes: Vec::new(),
        origin: kf.pose.clone(),
        scene_scale,
        adam: AdamState::default(),
        events: 0,
    };
    spawn_from(&mut map, &kf, &candidates, cfg, rng);
    map.keyframes.push(kf);
    map.events = 1;
    Ok(map)
}

/// Pixels that are valid and either poorly covered or badly reconstructed.
pub fn densify_candidates(kf: &Keyframe, render: &RenderOutput, cfg: &MappingConfig) -> Vec<usize> {
    (0..kf.range.range.len())
        .filter(|&i| {
            if !kf.range.valid_mask.data[i] {
                return false;
            }
            let o = render.opacity.data[i];
            if o <= cfg.densify_opacity {
                return true;
            }
            (render.expected_range(i) - kf.range.range.data[i]).abs() >= cfg.densify_error
        })
        .collect()
}

/// Spawns splats where the render of `kf` is missing or wrong. Returns the
/// number of new splats.
pub fn densify<R: Rng + ?Sized>(
    map: &mut LocalMap,
    kf: &Keyframe,
    render: &RenderOutput,
    cfg: &MappingConfig,
    rng: &mut R,
) -> usize {
    let candidates = densify_candidates(kf, render, cfg);
    spawn_from(map, kf, &candidates, cfg, rng)
}

/// Weighted L1 range loss with its gradients on the range and opacity
/// channels.
pub fn loss_range(
    render: &RenderOutput,
    kf: &Keyframe,
    weight: RangeWeight,
    target: RangeTarget,
) -> (f64, Grid<f64>, Grid<f64>) {
    let (w, h) = (render.width(), render.height());
    let mut grad = Grid::filled(w, h, 0.0);
    let mut grad_opacity = Grid::filled(w, h, 0.0);
    let mut value = 0.0;
    for i in 0..grad.len() {
        if !kf.range.valid_mask.data[i] {
            continue;
        }
        let measured = kf.range.range.data[i];
        let rho = weight.weight(measured);
        let d = render.range.data[i];
        let (rendered, scale) = match target {
            RangeTarget::Blended => (d, 1.0),
            RangeTarget::Normalized => {
                let o = render.opacity.data[i].max(RANGE_OPACITY_FLOOR);
                (d / o, 1.0 / o)
            }
        };
        let diff = rendered - measured;
        value += rho * diff.abs();
        let g = if diff > 0.0 {
            rho
        } else if diff < 0.0 {
            -rho
        } else {
            0.0
        };
        grad.data[i] = g * scale;
        if target == RangeTarget::Normalized && render.opacity.data[i] > RANGE_OPACITY_FLOOR {
            grad_opacity.data[i] = -g * rendered / render.opacity.data[i];
        }
    }
    (value, grad, grad_opacity)
}

pub fn loss_normal(render: &RenderOutput, kf: &Keyframe) -> (f64, Grid<Vec3>) {
    let (w, h) = (render.width(), render.height());
    let mut grad = Grid::filled(w, h, Vec3::zeros());
    let mut value = 0.0;
    for i in 0..grad.len() {
        if !(kf.range.valid_mask.data[i] && kf.normals.valid_mask.data[i]) {
            continue;
        }
        let target = kf.normals.normals.data[i];
        value += 1.0 - render.normal.data[i].dot(&target);
        grad.data[i] = -target;
    }
    (value, grad)
}

/// Smallest opacity inside the log of the opacity loss.
pub const OPACITY_FLOOR: f64 = 1e-6;

pub fn loss_opacity(render: &RenderOutput, kf: &Keyframe) -> (f64, Grid<f64>) {
    let (w, h) = (render.width(), render.height());
    let mut grad = Grid::filled(w, h, 0.0);
    let mut value = 0.0;
    for i in 0..grad.len() {
        if !kf.range.valid_mask.data[i] {
            continue;
        }
        let o = render.opacity.data[i];
        value -= o.max(OPACITY_FLOOR).ln();
        if o > OPACITY_FLOOR {
            grad.data[i] = -1.0 / o;
        }
    }
    (value, grad)
}

/// Hinge penalty on the larger scale of each splat.
pub fn loss_scale(model: &SplatModel, threshold: f64) -> (f64, Vec<Vector2<f64>>) {
    let mut value = 0.0;
    let grads = model
        .splats
        .iter()
        .map(|s| {
            let sc = s.scale();
            let (big, idx) = if sc.x >= sc.y { (sc.x, 0) } else { (sc.y, 1) };
            let excess = big - threshold;
            let mut g = Vector2::zeros();
            if excess > 0.0 {
                value += excess;
                g[idx] = 1.0;
            }
            g
        })
        .collect();
    (value, grads)
}

/// Weighted mapping loss with its pixel and scale gradients.
#[derive(Debug, Clone)]
pub struct MappingLoss {
    pub total: f64,
    pub range: f64,
    pub opacity: f64,
    pub normal: f64,
    pub scale: f64,
    pub pixel_grads: PixelGradients,
    /// Already multiplied by the scale weight.
    pub scale_grads: Vec<Vector2<f64>>,
}

pub fn mapping_loss(
    render: &RenderOutput,
    kf: &Keyframe,
    model: &SplatModel,
    cfg: &MappingConfig,
) -> MappingLoss {
    let (range, g_range, g_range_opacity) = loss_range(render, kf, cfg.range_weight, cfg.range_target);
    let (opacity, g_opacity) = loss_opacity(render, kf);
    let (normal, g_normal) = loss_normal(render, kf);
    let (scale, g_scale) = loss_scale(model, cfg.scale_threshold);
    let mut pixel_grads = PixelGradients {
        range: g_range,
        normal: g_normal,
        opacity: g_opacity,
    };
    pixel_grads
        .normal
        .data
        .iter_mut()
        .for_each(|g| *g *= cfg.lambda_normal);
    pixel_grads
        .opacity
        .data
        .iter_mut()
        .for_each(|g| *g *= cfg.lambda_opacity);
    for (g, extra) in pixel_grads.opacity.data.iter_mut().zip(&g_range_opacity.data) {
        *g += extra;
    }
    MappingLoss {
        total: range
            + cfg.lambda_opacity * opacity
            + cfg.lambda_normal * normal
            + cfg.lambda_scale * scale,
        range,
        opacity,
        normal,
        scale,
        pixel_grads,
        scale_grads: g_scale.into_iter().map(|g| g * cfg.lambda_scale).collect(),
    }
}

/// Probabilities of picking each keyframe, oldest first, under a geometric
/// law in recency truncated to `n` keyframes.
pub fn keyframe_probabilities(n: usize, p: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|k| p * (1.0 - p).powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().rev().map(|x| x / total).collect()
}

/// Index into `map.keyframes` drawn with the truncated geometric law.
pub fn sample_keyframe<R: Rng + ?Sized>(
    map: &LocalMap,
    p: f64,
    rng: &mut R,
) -> Result<usize, MappingError> {
    sample_recency(map.keyframes.len(), p, rng)
}

pub fn sample_recency<R: Rng + ?Sized>(
    n: usize,
    p: f64,
    rng: &mut R,
) -> Result<usize, MappingError> {
    if n == 0 {
        return Err(MappingError::NoKeyframes);
    }
    let probs = keyframe_probabilities(n, p);
    let mut u: f64 = rng.random();
    for k in (0..n).rev() {
        u -= probs[k];
        if u < 0.0 {
            return Ok(k);
        }
    }
    Ok(n - 1)
}

/// Gradients with respect to the optimizer's unconstrained parameters,
/// packed per splat as in `AdamState`.
pub fn packed_gradients(
    model: &SplatModel,
    grads: &SplatGradients,
    scale_grads: &[Vector2<f64>],
) -> Vec<[f64; 12]> {
    model
        .splats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (ga, gb) = grads.tangent_gradients(i, s);
            let sc = s.scale();
            let o = s.opacity();
            let gs = grads.scale[i] + scale_grads.get(i).copied().unwrap_or_else(Vector2::zeros);
            let gm = grads.mu[i];
            [
                gm.x,
                gm.y,
                gm.z,
                ga.x,
                ga.y,
                ga.z,
                gb.x,
                gb.y,
                gb.z,
                gs.x * sc.x,
                gs.y * sc.y,
                grads.opacity[i] * o * (1.0 - o),
            ]
        })
        .collect()
}

fn adam_step(map: &mut LocalMap, packed: &[[f64; 12]], cfg: &MappingConfig) {
    let adam = &mut map.adam;
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let lr_pos = cfg.lr_position * map.scene_scale;
    let lrs = [
        lr_pos,
        lr_pos,
        lr_pos,
        cfg.lr_tangent,
        cfg.lr_tangent,
        cfg.lr_tangent,
        cfg.lr_tangent,
        cfg.lr_tangent,
        cfg.lr_tangent,
        cfg.lr_log_scale,
        cfg.lr_log_scale,
        cfg.lr_logit_opacity,
    ];
    let max_log = cfg.max_scale().ln();
    let min_log = MIN_SCALE.ln();
    for (i, s) in map.model.splats.iter_mut().enumerate() {
        let g = &packed[i];
        if g.iter().all(|x| *x == 0.0) {
            continue;
        }
        let m = &mut adam.first[i];
        let v = &mut adam.second[i];
        let mut step = [0.0; 12];
        for k in 0..12 {
            m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
            v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
            step[k] = lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_eps);
        }
        s.centroid -= Vec3::new(step[0], step[1], step[2]);
        s.tangent_alpha -= Vec3::new(step[3], step[4], step[5]);
        s.tangent_beta -= Vec3::new(step[6], step[7], step[8]);
        s.log_scale.x = (s.log_scale.x - step[9]).clamp(min_log, max_log);
        s.log_scale.y = (s.log_scale.y - step[10]).clamp(min_log, max_log);
        s.logit_opacity -= step[11];
        s.orthonormalize();
    }
}

/// Loss values recorded during refinement, one per iteration.
#[derive(Debug, Clone, Default)]
pub struct RefineStats {
    pub losses: Vec<f64>,
    pub keyframes: Vec<usize>,
}

/// Runs `iterations` optimizer steps, each on a sampled keyframe.
pub fn refine<R: Rng + ?Sized>(
    map: &mut LocalMap,
    cfg: &MappingConfig,
    iterations: usize,
    raster: &Rasterizer,
    rng: &mut R,
) -> Result<RefineStats, MappingError> {
    if map.keyframes.is_empty() {
        return Err(MappingError::NoKeyframes);
    }
    let mut stats = RefineStats::default();
    for _ in 0..iterations {
        let k = sample_keyframe(map, cfg.recent_keyframe_prob, rng)?;
        let kf = &map.keyframes[k];
        let (render, records) = raster.forward(&kf.cam, &kf.pose, &map.model);
        let loss = mapping_loss(&render, kf, &map.model, cfg);
        let grads = raster.backward(&kf.cam, &kf.pose, &map.model, &records, &loss.pixel_grads)?;
        let packed = packed_gradients(&map.model, &grads, &loss.scale_grads);
        adam_step(map, &packed, cfg);
        stats.losses.push(loss.total);
        stats.keyframes.push(k);
    }
    Ok(stats)
}

/// Mapping loss of the current model on one keyframe.
pub fn evaluate_keyframe(
    map: &LocalMap,
    k: usize,
    cfg: &MappingConfig,
    raster: &Rasterizer,
) -> f64 {
    let kf = &map.keyframes[k];
    let (render, _) = raster.forward(&kf.cam, &kf.pose, &map.model);
    mapping_loss(&render, kf, &map.model, cfg).total
}

/// Appends a keyframe: densify against the current render, refine, prune.
/// Returns the number of spawned splats.
pub fn add_keyframe<R: Rng + ?Sized>(
    map: &mut LocalMap,
    kf: Keyframe,
    cfg: &MappingConfig,
    raster: &Rasterizer,
    rng: &mut R,
) -> Result<usize, MappingError> {
    let (render, _) = raster.forward(&kf.cam, &kf.pose, &map.model);
    let spawned = densify(map, &kf, &render, cfg, rng);
    map.keyframes.push(kf);
    map.events += 1;
    refine(map, cfg, cfg.iterations, raster, rng)?;
    map.prune(cfg.prune_opacity);
    Ok(spawned)
}

/// Mean rendered opacity over the valid pixels of `kf`.
pub fn coverage(render: &RenderOutput, kf: &Keyframe) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..render.opacity.len() {
        if kf.range.valid_mask.data[i] {
            sum += render.opacity.data[i];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Whether `new_kf` should start a fresh local map.
pub fn should_reset_local_map(
    map: &LocalMap,
    new_kf: &Keyframe,
    cfg: &MappingConfig,
    raster: &Rasterizer,
) -> bool {
    if map.keyframes.len() >= cfg.max_keyframes {
        return true;
    }
    if (new_kf.pose.translation - map.origin.translation).norm() > cfg.reset_radius {
        return true;
    }
    let (render, _) = raster.forward(&new_kf.cam, &new_kf.pose, &map.model);
    coverage(&render, new_kf) < cfg.min_coverage
}
