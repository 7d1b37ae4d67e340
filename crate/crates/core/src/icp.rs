//! Point-to-point ICP used to check and refine loop candidates.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::IcpError;
use crate::se3::{Pose, Vec3};

/// Points of one LiDAR frame, expressed in that frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalCloud {
    pub frame: usize,
    pub points: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop when the RMS changes by less than this (meters).
    pub tolerance: f64,
    pub max_correspondence: f64,
    pub min_fitness: f64,
    pub max_rms: f64,
    pub min_points: usize,
    /// Correspondences farther than `trim_factor * median` are left out of the
    /// alignment step.
    pub trim_factor: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            max_correspondence: 0.5,
            min_fitness: 0.6,
            max_rms: 0.15,
            min_points: 50,
            trim_factor: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpResult {
    /// Refined transform taking points of the source cloud into the target.
    pub pose: Pose,
    /// Fraction of source points with a target neighbour within the cutoff.
    pub fitness: f64,
    /// RMS distance over the correspondences used in the last alignment.
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub accepted: bool,
}

/// Uniform grid over a point set for fixed-radius nearest-neighbour queries.
#[derive(Clone, Debug)]
pub struct GridIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    origin: Vec3,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::zeros();
        }
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(1 << 20));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; n_cells + 1];
        let cell_ids: Vec<usize> = points.iter().map(|p| Self::cell_id(&lo, cell, &dims, p)).collect();
        for &c in &cell_ids {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cell_ids.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self { points, cell, origin: lo, dims, starts: counts, order }
    }

    fn coord(lo: &Vec3, cell: f64, dims: &[usize; 3], p: &Vec3, axis: usize) -> usize {
        let c = ((p[axis] - lo[axis]) / cell).floor();
        c.clamp(0.0, (dims[axis] - 1) as f64) as usize
    }

    fn cell_id(lo: &Vec3, cell: f64, dims: &[usize; 3], p: &Vec3) -> usize {
        let x = Self::coord(lo, cell, dims, p, 0);
        let y = Self::coord(lo, cell, dims, p, 1);
        let z = Self::coord(lo, cell, dims, p, 2);
        (x * dims[1] + y) * dims[2] + z
    }

    /// Nearest point within `radius` (which must not exceed the cell size).
    pub fn nearest_within(&self, q: &Vec3, radius: f64) -> Option<(usize, f64)> {
        debug_assert!(radius <= self.cell + 1e-12);
        let mut best: Option<(usize, f64)> = None;
        let r2 = radius * radius;
        let mut range = [(0usize, 0usize); 3];
        for axis in 0..3 {
            let rel = (q[axis] - self.origin[axis]) / self.cell;
            let c = rel.floor();
            if c < -1.0 || c > self.dims[axis] as f64 {
                return None;
            }
            let lo = (c - 1.0).max(0.0) as usize;
            let hi = ((c + 1.0) as i64).min(self.dims[axis] as i64 - 1);
            if hi < lo as i64 {
                return None;
            }
            range[axis] = (lo, hi as usize);
        }
        for x in range[0].0..=range[0].1 {
            for y in range[1].0..=range[1].1 {
                let base = (x * self.dims[1] + y) * self.dims[2];
                for z in range[2].0..=range[2].1 {
                    let id = base + z;
                    for &pi in &self.order[self.starts[id] as usize..self.starts[id + 1] as usize] {
                        let d2 = (self.points[pi as usize] - q).norm_squared();
                        if d2 <= r2 && best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((pi as usize, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// Least-squares rigid transform `T` minimizing `sum |T a_i - b_i|^2`.
pub fn rigid_align(source: &[Vec3], target: &[Vec3]) -> Option<Pose> {
    assert_eq!(source.len(), target.len());
    if source.len() < 3 {
        return None;
    }
    let n = source.len() as f64;
    let ca = source.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let cb = target.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut h = Matrix3::zeros();
    for (a, b) in source.iter().zip(target) {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut correction = Matrix3::identity();
    correction[(2, 2)] = if d == 0.0 { 1.0 } else { d };
    let r = v * correction * u.transpose();
    let t = cb - r * ca;
    Some(Pose::from_parts(r, t))
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Aligns `source` (frame j) onto `target` (frame i) starting from `init`,
/// which maps source points into the target frame.
pub fn icp_verify(
    target: &LocalCloud,
    source: &LocalCloud,
    init: &Pose,
    params: &IcpParams,
) -> Result<IcpResult, IcpError> {
    for cloud in [target, source] {
        if cloud.points.len() < params.min_points {
            return Err(IcpError::TooFewPoints { found: cloud.points.len(), required: params.min_points });
        }
    }
    let index = GridIndex::new(&target.points, params.max_correspondence);
    let mut pose = *init;
    let mut prev_rms = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut fitness = 0.0;
    let mut rms = f64::INFINITY;

    let mut src = Vec::with_capacity(source.points.len());
    let mut dst = Vec::with_capacity(source.points.len());
    let mut dists = Vec::with_capacity(source.points.len());
    for it in 0..params.max_iterations {
        iterations = it + 1;
        src.clear();
        dst.clear();
        dists.clear();
        for p in &source.points {
            let q = pose.transform_point(p);
            if let Some((ti, d)) = index.nearest_within(&q, params.max_correspondence) {
                src.push(q);
                dst.push(target.points[ti]);
                dists.push(d);
            }
        }
        fitness = src.len() as f64 / source.points.len() as f64;
        if src.len() < 3 {
            rms = f64::INFINITY;
            break;
        }
        let mut sorted = dists.clone();
        let cut = (params.trim_factor * median(&mut sorted)).max(1e-9);
        let mut kept_src = Vec::with_capacity(src.len());
        let mut kept_dst = Vec::with_capacity(src.len());
        let mut sq = 0.0;
        for ((a, b), d) in src.iter().zip(&dst).zip(&dists) {
            if *d <= cut {
                kept_src.push(*a);
                kept_dst.push(*b);
                sq += d * d;
            }
        }
        rms = (sq / kept_src.len().max(1) as f64).sqrt();
        if (prev_rms - rms).abs() < params.tolerance {
            converged = true;
            break;
        }
        prev_rms = rms;
        let Some(step) = rigid_align(&kept_src, &kept_dst) else { break };
        pose = (step * pose).orthonormalized();
    }
    let accepted = fitness >= params.min_fitness && rms <= params.max_rms;
    Ok(IcpResult { pose, fitness, rms, iterations, converged, accepted })
}
