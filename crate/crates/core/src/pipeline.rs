//! Odometry and mapping loop: register each scan against the active local
//! map, then grow and refine the map with it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::evaluation::Trajectory;
use crate::geometry::{
    back_project, build_range_image, estimate_camera, Pixel, SE3Pose, SphericalCamera, Vec3,
};
use crate::io::{self, IoError};
use crate::mapping::{
    add_keyframe, init_local_model, refine, should_reset_local_map, Keyframe, LocalMap,
    MappingError,
};
use crate::rasterizer::{RasterConfig, Rasterizer, RenderOutput};
use crate::registration::{constant_velocity, register, RegistrationError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("camera: {0}")]
    Camera(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("sequence: {0}")]
    Sequence(String),
    #[error("no valid rendered pixels to export")]
    EmptyExport,
}

impl PipelineError {
    /// Whether the failure comes from the numerics rather than the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, PipelineError::Mapping(_))
    }
}

/// Scans on disk in playback order, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSource {
    pub scans: Vec<PathBuf>,
    /// Per-scan timestamps; scan index times 0.1 s when absent.
    pub timestamps: Vec<f64>,
    pub ground_truth: Option<Trajectory>,
}

pub const GROUND_TRUTH_FILE: &str = "groundtruth.tum";
pub const TIMES_FILE: &str = "times.txt";
/// Reference cloud written next to simulated scans; never read as a scan.
pub const REFERENCE_FILE: &str = "reference.ply";

impl SequenceSource {
    /// Collects `.bin` and `.ply` files of `dir` in name order. A
    /// `times.txt` with one timestamp per line and a `groundtruth.tum` are
    /// picked up when present.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
            path: dir.to_owned(),
            source,
        })?;
        let mut scans: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("bin") | Some("ply")
                ) && p.file_name().is_some_and(|n| n != REFERENCE_FILE)
            })
            .collect();
        scans.sort();
        if scans.is_empty() {
            return Err(PipelineError::Sequence(format!(
                "{}: no scans",
                dir.display()
            )));
        }
        let times_path = dir.join(TIMES_FILE);
        let timestamps = if times_path.exists() {
            let text = std::fs::read_to_string(&times_path).map_err(|source| IoError::Io {
                path: times_path.clone(),
                source,
            })?;
            let t: Vec<f64> = text
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| PipelineError::Sequence("bad number in times.txt".into()))?;
            if t.len() != scans.len() {
                return Err(PipelineError::Sequence(format!(
                    "times.txt has {} entries for {} scans",
                    t.len(),
                    scans.len()
                )));
            }
            t
        } else {
            (0..scans.len()).map(|i| i as f64 * 0.1).collect()
        };
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth = if gt_path.exists() {
            Some(io::load_trajectory(&gt_path, io::TrajectoryFormat::Tum)?)
        } else {
            None
        };
        Ok(Self {
            scans,
            timestamps,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

/// Per-scan measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub index: usize,
    pub points: usize,
    pub registration_ms: f64,
    pub mapping_ms: f64,
    pub iterations: usize,
    pub keyframe: bool,
    pub reset: bool,
    /// Registration failed and the motion-model pose was kept.
    pub fallback: Option<String>,
    pub splats: usize,
    pub memory_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub scans: Vec<ScanRecord>,
}

impl RunReport {
    pub fn fallbacks(&self) -> usize {
        self.scans.iter().filter(|s| s.fallback.is_some()).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "scan\tpoints\treg_ms\tmap_ms\titers\tkeyframe\treset\tsplats\tmemory_kib\tfallback\n",
        );
        for s in &self.scans {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.1}\t{:.1}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.index,
                s.points,
                s.registration_ms,
                s.mapping_ms,
                s.iterations,
                s.keyframe as u8,
                s.reset as u8,
                s.splats,
                s.memory_bytes / 1024,
                s.fallback.as_deref().unwrap_or("-"),
            );
        }
        let n = self.scans.len().max(1) as f64;
        let reg: f64 = self.scans.iter().map(|s| s.registration_ms).sum();
        let map: f64 = self.scans.iter().map(|s| s.mapping_ms).sum();
        let peak = self.scans.iter().map(|s| s.memory_bytes).max().unwrap_or(0);
        let _ = writeln!(
            out,
            "# scans {} mean_reg_ms {:.1} mean_map_ms {:.1} peak_memory_kib {} fallbacks {}",
            self.scans.len(),
            reg / n,
            map / n,
            peak / 1024,
            self.fallbacks()
        );
        out
    }
}

/// Points with unit normals, both in the world frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedPoints {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: OrientedPoints) {
        self.points.extend(other.points);
        self.normals.extend(other.normals);
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), IoError> {
        io::write_ply(
            path,
            &self.points,
            Some(&self.normals),
            io::PlyFormat::BinaryLittleEndian,
        )
    }
}

/// Rendered opacity a pixel needs to count as surface on export.
pub const EXPORT_MIN_OPACITY: f64 = 0.5;

/// Slack of the plane test on exported pixels, as a fraction of range and
/// an absolute floor in metres.
pub const EXPORT_PLANE_SLACK: (f64, f64) = (0.03, 0.02);

/// Points of one rendered keyframe, `max_points` sampled uniformly among
/// the valid pixels. Pixels straddling a depth jump are left out.
pub fn export_keyframe_points(
    kf: &Keyframe,
    render: &RenderOutput,
    max_points: usize,
    rng: &mut ChaCha8Rng,
) -> OrientedPoints {
    let valid: Vec<usize> = (0..render.opacity.len())
        .filter(|&i| render.opacity.data[i] >= EXPORT_MIN_OPACITY && render.expected_range(i) > 0.0)
        .filter(|&i| render.plane_consistent(&kf.cam, i, EXPORT_MIN_OPACITY, EXPORT_PLANE_SLACK))
        .collect();
    let mut chosen: Vec<usize> = if valid.len() <= max_points {
        valid
    } else {
        sample(rng, valid.len(), max_points)
            .into_iter()
            .map(|k| valid[k])
            .collect()
    };
    chosen.sort_unstable();
    let w = kf.cam.width;
    let mut out = OrientedPoints::default();
    for i in chosen {
        let px = Pixel::new((i % w) as f64, (i / w) as f64);
        let Ok(p) = back_project(&kf.cam, px, render.expected_range(i)) else {
            continue;
        };
        let n = render.normal.data[i];
        let norm = n.norm();
        if !(norm > 1e-12) {
            continue;
        }
        let mut n = n / norm;
        if n.dot(&p) > 0.0 {
            n = -n;
        }
        out.points.push(kf.pose.apply(&p));
        out.normals.push(kf.pose.rotation * n);
    }
    out
}

/// Renders every keyframe of `map` and accumulates their oriented points.
pub fn export_oriented_points(
    map: &LocalMap,
    points_per_keyframe: usize,
    raster: &Rasterizer,
    rng: &mut ChaCha8Rng,
) -> Result<OrientedPoints, PipelineError> {
    let mut out = OrientedPoints::default();
    for kf in &map.keyframes {
        let (render, _) = raster.forward(&kf.cam, &kf.pose, &map.model);
        out.extend(export_keyframe_points(
            kf,
            &render,
            points_per_keyframe,
            rng,
        ));
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyExport);
    }
    Ok(out)
}

/// Rough resident size of a local map in bytes.
pub fn map_memory(map: &LocalMap) -> usize {
    let per_splat = std::mem::size_of::<crate::splats::Splat>() + 4 + 2 * 12 * 8;
    let per_kf: usize = map
        .keyframes
        .iter()
        .map(|k| k.cloud.len() * 24 + k.range.range.len() * (8 + 1 + 24 + 1))
        .sum();
    map.model.len() * per_splat + per_kf
}

/// Everything carried from one scan to the next.
#[derive(Debug)]
pub struct PipelineState {
    pub config: RunConfig,
    pub raster: Rasterizer,
    pub trajectory: Trajectory,
    pub active: Option<LocalMap>,
    /// Exported points of finalized local maps. The maps are dropped.
    pub archive: Vec<OrientedPoints>,
    pub report: RunReport,
    fixed_camera: Option<SphericalCamera>,
    rng: ChaCha8Rng,
}

impl PipelineState {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Camera)?;
        let fixed_camera = config.image.fixed_camera().map_err(PipelineError::Camera)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            raster: Rasterizer::new(RasterConfig::default()),
            config,
            trajectory: Trajectory::default(),
            active: None,
            archive: Vec::new(),
            report: RunReport::default(),
            fixed_camera,
        })
    }

    pub fn pose(&self) -> Option<&SE3Pose> {
        self.trajectory.poses.last()
    }

    fn camera_for(&self, cloud: &[Vec3]) -> Result<SphericalCamera, PipelineError> {
        match &self.fixed_camera {
            Some(c) => Ok(c.clone()),
            None => estimate_camera(cloud, self.config.image.width, self.config.image.height)
                .map_err(|e| PipelineError::Camera(e.to_string())),
        }
    }

    /// Exports the active map into the archive and releases it.
    pub fn archive_active(&mut self) -> Result<(), PipelineError> {
        if let Some(map) = self.active.take() {
            let pts = export_oriented_points(
                &map,
                self.config.export_points,
                &self.raster,
                &mut self.rng,
            )?;
            self.archive.push(pts);
        }
        Ok(())
    }

    /// Archives the active map and returns all exported points.
    pub fn finish(&mut self) -> Result<OrientedPoints, PipelineError> {
        self.archive_active()?;
        let mut all = OrientedPoints::default();
        for a in &self.archive {
            all.extend(a.clone());
        }
        Ok(all)
    }

    /// Processes one sensor-frame scan. With `pose_override` the pose is
    /// taken as given and registration is skipped.
    pub fn process_scan(
        &mut self,
        cloud: Vec<Vec3>,
        timestamp: f64,
        pose_override: Option<SE3Pose>,
    ) -> Result<&ScanRecord, PipelineError> {
        let cam = self.camera_for(&cloud)?;
        let index = self.trajectory.len();
        let mut record = ScanRecord {
            index,
            points: cloud.len(),
            registration_ms: 0.0,
            mapping_ms: 0.0,
            iterations: 0,
            keyframe: false,
            reset: false,
            fallback: None,
            splats: 0,
            memory_bytes: 0,
        };
        let started = Instant::now();
        let needs_registration = self.active.is_some() && pose_override.is_none();
        let subset = if needs_registration {
            self.subsample(&cloud)
        } else {
            Vec::new()
        };
        let pose = match (&self.active, pose_override) {
            (_, Some(p)) => p,
            (None, None) => SE3Pose::identity(),
            (Some(map), None) => {
                let n = self.trajectory.len();
                let previous = (n >= 2).then(|| &self.trajectory.poses[n - 2]);
                let current = &self.trajectory.poses[n - 1];
                let guess = constant_velocity(previous, current);
                let query = build_range_image(&cam, &cloud);
                match register(
                    &map.model,
                    &cam,
                    &subset,
                    &query,
                    &guess,
                    &self.config.registration,
                    &self.raster,
                ) {
                    Ok(res) => {
                        record.iterations = res.iterations;
                        res.pose
                    }
                    Err(e) => {
                        log::warn!(
                            "scan {index}: registration failed ({e}), keeping motion-model pose"
                        );
                        record.fallback = Some(fallback_tag(&e).to_string());
                        guess
                    }
                }
            }
        };
        record.registration_ms = started.elapsed().as_secs_f64() * 1e3;
        self.trajectory.push(timestamp, pose.clone());

        let started = Instant::now();
        let is_keyframe = self.active.is_none() || index % self.config.keyframe_stride == 0;
        if is_keyframe {
            record.keyframe = true;
            let kf = Keyframe::new(cloud, pose, cam);
            let reset = match &self.active {
                Some(map) => should_reset_local_map(map, &kf, &self.config.mapping, &self.raster),
                None => false,
            };
            if reset {
                record.reset = true;
                self.archive_active()?;
            }
            match self.active.as_mut() {
                Some(map) => {
                    add_keyframe(map, kf, &self.config.mapping, &self.raster, &mut self.rng)?;
                }
                None => {
                    let mut map = init_local_model(kf, &self.config.mapping, &mut self.rng)?;
                    refine(
                        &mut map,
                        &self.config.mapping,
                        self.config.mapping.iterations,
                        &self.raster,
                        &mut self.rng,
                    )?;
                    map.prune(self.config.mapping.prune_opacity);
                    self.active = Some(map);
                }
            }
        }
        record.mapping_ms = started.elapsed().as_secs_f64() * 1e3;
        if let Some(map) = &self.active {
            record.splats = map.splat_count();
            record.memory_bytes = map_memory(map);
        }
        self.report.scans.push(record);
        Ok(self.report.scans.last().unwrap())
    }

    fn subsample(&mut self, cloud: &[Vec3]) -> Vec<Vec3> {
        let f = self.config.scan_fraction;
        if f >= 1.0 {
            return cloud.to_vec();
        }
        let k = ((cloud.len() as f64 * f).round() as usize).clamp(1, cloud.len());
        let mut idx = sample(&mut self.rng, cloud.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| cloud[i]).collect()
    }
}

fn fallback_tag(e: &RegistrationError) -> &'static str {
    match e {
        RegistrationError::Degenerate(_) => "degenerate",
        RegistrationError::NoAssociations => "no-associations",
        RegistrationError::EmptyModel => "empty-model",
        RegistrationError::TooFewPoints(_) => "too-few-points",
        RegistrationError::EmptyScan => "empty-scan",
    }
}

/// Files written by [`run_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub trajectory: PathBuf,
    pub points: PathBuf,
    pub report: PathBuf,
    pub model: Option<PathBuf>,
}

/// Runs the whole sequence and writes trajectory, points, report and
/// optionally the final model into the configured output directory. With
/// `use_ground_truth` the poses come from the sequence's ground truth.
pub fn run_sequence(
    source: &SequenceSource,
    config: RunConfig,
    use_ground_truth: bool,
) -> Result<(PipelineState, RunOutputs), PipelineError> {
    let gt = match (use_ground_truth, &source.ground_truth) {
        (false, _) => None,
        (true, Some(gt)) if gt.len() == source.len() => Some(gt.clone()),
        (true, _) => {
            return Err(PipelineError::Sequence(
                "ground truth missing or of the wrong length".into(),
            ))
        }
    };
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|source| IoError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let mut state = PipelineState::new(config)?;
    for (k, path) in source.scans.iter().enumerate() {
        let scan = io::load_scan(path)?;
        if scan.dropped > 0 {
            log::info!(
                "{}: dropped {} non-finite points",
                path.display(),
                scan.dropped
            );
        }
        let pose = gt.as_ref().map(|g| g.poses[k].clone());
        let rec = state.process_scan(scan.points, source.timestamps[k], pose)?;
        log::info!(
            "scan {k}: reg {:.0} ms, map {:.0} ms, {} splats",
            rec.registration_ms,
            rec.mapping_ms,
            rec.splats
        );
    }
    let final_model = state.active.as_ref().map(|m| m.model.clone());
    let points = state.finish()?;
    let (fmt, ext) = match state.config.output.trajectory_format {
        crate::config::TrajectoryFileFormat::Tum => (io::TrajectoryFormat::Tum, "tum"),
        crate::config::TrajectoryFileFormat::Kitti => (io::TrajectoryFormat::Kitti, "kitti"),
    };
    let outputs = RunOutputs {
        trajectory: out_dir.join(format!("trajectory.{ext}")),
        points: out_dir.join("points.ply"),
        report: out_dir.join("report.tsv"),
        model: (state.config.output.save_model && final_model.is_some())
            .then(|| out_dir.join("model.splt")),
    };
    io::save_trajectory(&state.trajectory, &outputs.trajectory, fmt)?;
    points.write_ply(&outputs.points)?;
    std::fs::write(&outputs.report, state.report.to_text()).map_err(|source| IoError::Io {
        path: outputs.report.clone(),
        source,
    })?;
    if let (Some(path), Some(model)) = (&outputs.model, &final_model) {
        io::save_model(model, path, false)?;
    }
    Ok((state, outputs))
}
