//! Loop-closure labeling, per-pose recall/precision, and absolute trajectory
//! error after rigid alignment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::icp::rigid_align;
use crate::se3::{Pose, Trajectory, Vec3};

/// Ground-truth loop labels: for each pose the earlier poses within `tau`
/// reached after more than `s_min` of travel.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopGroundTruth {
    pub tau: f64,
    pub s_min: f64,
    pub neighbors: Vec<Vec<usize>>,
}

impl LoopGroundTruth {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn is_loop_pose(&self, k: usize) -> bool {
        !self.neighbors[k].is_empty()
    }

    pub fn loop_pose_count(&self) -> usize {
        self.neighbors.iter().filter(|n| !n.is_empty()).count()
    }

    /// Whether `p` is a valid partner for pose `k`.
    pub fn qualifies(&self, k: usize, p: usize) -> bool {
        self.neighbors.get(k).is_some_and(|n| n.binary_search(&p).is_ok())
    }

    /// Maximal runs of loop poses, bridging gaps of at most `max_gap` frames.
    pub fn revisit_segments(&self, max_gap: usize) -> Vec<RangeInclusive<usize>> {
        let mut out: Vec<RangeInclusive<usize>> = Vec::new();
        for k in (0..self.len()).filter(|&k| self.is_loop_pose(k)) {
            match out.last_mut() {
                Some(seg) if k - seg.end() <= max_gap + 1 => *seg = *seg.start()..=k,
                _ => out.push(k..=k),
            }
        }
        out
    }
}

pub fn label_loop_poses(gt: &[Pose], tau: f64, s_min: f64) -> Result<LoopGroundTruth, EvalError> {
    if gt.len() < 2 {
        return Err(EvalError::TooFewPoses { required: 2 });
    }
    let traj = Trajectory::from_poses(gt.iter().copied());
    let cell = tau.max(1e-9);
    let key = |p: &Vec3| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut neighbors = Vec::with_capacity(gt.len());
    for (k, pose) in gt.iter().enumerate() {
        let pk = pose.translation();
        let (cx, cy, cz) = key(pk);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &p in bucket {
                            if (pk - gt[p].translation()).norm() < tau && traj.travel(p, k) > s_min {
                                found.push(p);
                            }
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        neighbors.push(found);
        grid.entry((cx, cy, cz)).or_default().push(k);
    }
    Ok(LoopGroundTruth { tau, s_min, neighbors })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Per-pose accounting: a pose reporting loops is a true positive when any
/// reported partner qualifies, otherwise a false positive. A loop pose that
/// reports nothing is a false negative.
pub fn score(predictions: &[(usize, usize)], gtl: &LoopGroundTruth) -> Score {
    let mut reported: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(k, p) in predictions {
        reported.entry(k).or_default().insert(p);
    }
    let mut s = Score::default();
    for (&k, partners) in &reported {
        if partners.iter().any(|&p| gtl.qualifies(k, p)) {
            s.tp += 1;
        } else {
            s.fp += 1;
        }
    }
    s.fn_ = (0..gtl.len()).filter(|&k| gtl.is_loop_pose(k) && !reported.contains_key(&k)).count();
    s.recall = (s.tp + s.fn_ > 0).then(|| s.tp as f64 / (s.tp + s.fn_) as f64);
    s.precision = (s.tp + s.fp > 0).then(|| s.tp as f64 / (s.tp + s.fp) as f64);
    s
}

/// Number of revisit segments containing at least one true-positive pose.
pub fn covered_segments(predictions: &[(usize, usize)], gtl: &LoopGroundTruth, max_gap: usize) -> (usize, usize) {
    let hits: BTreeSet<usize> = predictions.iter().filter(|(k, p)| gtl.qualifies(*k, *p)).map(|(k, _)| *k).collect();
    let segments = gtl.revisit_segments(max_gap);
    let covered = segments.iter().filter(|seg| hits.range(*seg.start()..=*seg.end()).next().is_some()).count();
    (covered, segments.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub mean: f64,
    pub per_pose: Vec<f64>,
    /// Transform applied to the estimate.
    pub alignment: Pose,
}

/// Mean translation error after the rigid alignment of `est` onto `gt`.
pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<AteResult, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.is_empty() {
        return Err(EvalError::TooFewPoses { required: 1 });
    }
    let a: Vec<Vec3> = est.iter().map(|p| *p.translation()).collect();
    let b: Vec<Vec3> = gt.iter().map(|p| *p.translation()).collect();
    let alignment = rigid_align(&a, &b).unwrap_or_else(|| {
        // fewer than three poses: translation-only alignment
        let n = a.len() as f64;
        let shift = b.iter().sum::<Vec3>() / n - a.iter().sum::<Vec3>() / n;
        Pose::from_translation(shift)
    });
    let per_pose: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (alignment.transform_point(x) - y).norm()).collect();
    let mean = per_pose.iter().sum::<f64>() / per_pose.len() as f64;
    Ok(AteResult { mean, per_pose, alignment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Loop distance threshold (meters).
    pub tau: f64,
    pub s_min: f64,
    /// Gap (frames) bridged when grouping loop poses into revisits.
    pub segment_gap: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { tau: 1.7, s_min: 10.0, segment_gap: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ate_mean: f64,
    pub ate_per_pose: Vec<f64>,
    pub params: EvalParams,
}

pub fn build_report(
    est: &[Pose],
    gt: &[Pose],
    predictions: &[(usize, usize)],
    params: &EvalParams,
) -> Result<Report, EvalError> {
    let gtl = label_loop_poses(gt, params.tau, params.s_min)?;
    let s = score(predictions, &gtl);
    let a = ate(est, gt)?;
    Ok(Report {
        recall: s.recall,
        precision: s.precision,
        tp: s.tp,
        fp: s.fp,
        fn_: s.fn_,
        ate_mean: a.mean,
        ate_per_pose: a.per_pose,
        params: params.clone(),
    })
}
