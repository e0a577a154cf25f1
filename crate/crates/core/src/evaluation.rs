//! Trajectory drift and reconstruction quality metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{SE3Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("timestamps must be strictly increasing (index {0})")]
    NonMonotonic(usize),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no timestamp association within {0} s")]
    Association(f64),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("trajectory has fewer than two poses")]
    TooShort,
}

/// Time-stamped pose sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<SE3Pose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<SE3Pose>) -> Result<Self, EvalError> {
        if timestamps.len() != poses.len() {
            return Err(EvalError::LengthMismatch(timestamps.len(), poses.len()));
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(EvalError::NonMonotonic(i + 1));
        }
        Ok(Self { timestamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push(&mut self, t: f64, pose: SE3Pose) {
        self.timestamps.push(t);
        self.poses.push(pose);
    }

    /// Cumulative translation along the trajectory.
    pub fn cumulative_length(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }

    pub fn path_length(&self) -> f64 {
        self.cumulative_length().last().copied().unwrap_or(0.0)
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &SE3Pose) -> Trajectory {
        Trajectory {
            timestamps: self.timestamps.clone(),
            poses: self.poses.iter().map(|p| t.compose(p)).collect(),
        }
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp within `tolerance`.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if gt.is_empty() {
        return out;
    }
    for (i, &t) in est.timestamps.iter().enumerate() {
        let j = gt.timestamps.partition_point(|&g| g < t);
        let best = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (gt.timestamps[a] - t)
                    .abs()
                    .total_cmp(&(gt.timestamps[b] - t).abs())
            });
        if let Some(k) = best {
            if (gt.timestamps[k] - t).abs() <= tolerance {
                out.push((i, k));
            }
        }
    }
    out
}

/// Largest timestamp gap accepted when pairing trajectories, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpeEntry {
    /// Nominal path-length separation, meters.
    pub delta: f64,
    /// Mean translational error relative to segment length, percent.
    pub error_percent: f64,
    pub pairs: usize,
}

/// Deltas at 10% to 50% of the ground-truth path length.
pub fn default_deltas(gt: &Trajectory) -> Vec<f64> {
    let l = gt.path_length();
    (1..=5).map(|k| 0.1 * k as f64 * l).collect()
}

/// Relative pose error at each path-length delta.
pub fn rpe(est: &Trajectory, gt: &Trajectory, deltas: &[f64]) -> Result<Vec<RpeEntry>, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(EvalError::Association(ASSOCIATION_TOLERANCE));
    }
    let e: Vec<&SE3Pose> = pairs.iter().map(|&(i, _)| &est.poses[i]).collect();
    let g: Vec<&SE3Pose> = pairs.iter().map(|&(_, j)| &gt.poses[j]).collect();
    let mut dist = vec![0.0];
    for k in 1..g.len() {
        dist.push(dist[k - 1] + (g[k].translation - g[k - 1].translation).norm());
    }
    let mut out = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..g.len() {
            let j = dist.partition_point(|&s| s - dist[i] < delta);
            if j >= g.len() {
                break;
            }
            let seg = dist[j] - dist[i];
            if !(seg > 0.0) {
                continue;
            }
            let rel_gt = g[i].inverse().compose(g[j]);
            let rel_est = e[i].inverse().compose(e[j]);
            let err = rel_gt.inverse().compose(&rel_est);
            sum += err.translation.norm() / seg;
            n += 1;
        }
        out.push(RpeEntry {
            delta,
            error_percent: if n > 0 {
                100.0 * sum / n as f64
            } else {
                f64::NAN
            },
            pairs: n,
        });
    }
    Ok(out)
}

pub fn rpe_table(entries: &[RpeEntry]) -> String {
    let mut s = String::from("delta_m   rpe_percent   pairs\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{:>7.3}   {:>11.4}   {:>5}",
            e.delta, e.error_percent, e.pairs
        );
    }
    s
}

/// Point-set reconstruction metrics in centimeters and percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer_l1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl ReconMetrics {
    pub fn to_key_value(&self) -> String {
        format!(
            "accuracy_cm = {}\ncompleteness_cm = {}\nchamfer_l1_cm = {}\nprecision_percent = {}\nrecall_percent = {}\nf_score_percent = {}\n",
            self.accuracy, self.completeness, self.chamfer_l1, self.precision, self.recall, self.f_score
        )
    }

    pub fn table(&self) -> String {
        format!(
            "Acc [cm]  Com [cm]  C-l1 [cm]  F-score [%]\n{:>8.3}  {:>8.3}  {:>9.3}  {:>11.3}\n",
            self.accuracy, self.completeness, self.chamfer_l1, self.f_score
        )
    }
}

/// Exact nearest-neighbor lookup over a fixed point set.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&pts).expect("point count fits in u32");
        Self { tree }
    }

    /// Index of and distance to the nearest point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let hit = self
            .tree
            .query(&[q.x, q.y, q.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        (hit.item as usize, hit.distance.sqrt())
    }
}

/// Exact nearest-neighbor distances from each query to `reference`.
pub fn nearest_distances(query: &[Vec3], reference: &[Vec3]) -> Vec<f64> {
    let index = NearestIndex::new(reference);
    query.par_iter().map(|q| index.nearest(q).1).collect()
}

/// Metrics between `est` and `reference` (meters). `threshold_cm` sets the
/// F-score radius, `max_dist_cm` clamps distances.
pub fn recon_metrics(
    est: &[Vec3],
    reference: &[Vec3],
    threshold_cm: f64,
    max_dist_cm: f64,
) -> Result<ReconMetrics, EvalError> {
    if est.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let to_ref = nearest_distances(est, reference);
    let to_est = nearest_distances(reference, est);
    let cm = |d: &f64| (d * 100.0).min(max_dist_cm);
    let accuracy = to_ref.iter().map(cm).sum::<f64>() / to_ref.len() as f64;
    let completeness = to_est.iter().map(cm).sum::<f64>() / to_est.len() as f64;
    let within =
        |v: &[f64]| v.iter().filter(|&&d| d * 100.0 < threshold_cm).count() as f64 / v.len() as f64;
    let precision = within(&to_ref);
    let recall = within(&to_est);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ReconMetrics {
        accuracy,
        completeness,
        chamfer_l1: 0.5 * (accuracy + completeness),
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f_score: 100.0 * f,
    })
}

/// Centroid of the points in each occupied voxel, ordered by voxel key.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    let mut cells: HashMap<(i64, i64, i64), (Vec3, usize)> = HashMap::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let mut keys: Vec<_> = cells.into_iter().collect();
    keys.sort_by_key(|(k, _)| *k);
    keys.into_iter().map(|(_, (s, n))| s / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconProtocol {
    /// Voxel edge applied to both clouds, meters.
    pub voxel: f64,
    pub threshold_cm: f64,
    pub max_dist_cm: f64,
}

impl Default for ReconProtocol {
    fn default() -> Self {
        Self {
            voxel: 0.2,
            threshold_cm: 20.0,
            max_dist_cm: 200.0,
        }
    }
}

/// Downsamples both clouds and computes the metrics.
pub fn evaluate_reconstruction(
    est: &[Vec3],
    reference: &[Vec3],
    protocol: &ReconProtocol,
) -> Result<ReconMetrics, EvalError> {
    let a = voxel_downsample(est, protocol.voxel);
    let b = voxel_downsample(reference, protocol.voxel);
    recon_metrics(&a, &b, protocol.threshold_cm, protocol.max_dist_cm)
}
