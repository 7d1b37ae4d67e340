//! SE(3) pose graph with odometry and loop edges, optimized by
//! Levenberg-Marquardt over a block-sparse Cholesky factorization.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::loop_closure::LoopConstraint;
use crate::se3::{se3_right_jacobian_inv, Pose, Tangent};

pub type Information = Matrix6<f64>;

/// Diagonal information `1/sigma^2` for `[t, t, t, r, r, r]`.
pub fn diagonal_information(sigma_t: f64, sigma_r: f64) -> Information {
    let (a, b) = ((1.0 / sigma_t).powi(2), (1.0 / sigma_r).powi(2));
    Matrix6::from_diagonal(&Vector6::new(a, a, a, b, b, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Relative pose prior: `measurement` is the pose of node `to` expressed in
/// node `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Information,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerParams {
    pub max_iterations: usize,
    /// Relative cost decrease below which the optimization stops.
    pub relative_tolerance: f64,
    /// Update norm below which the optimization stops.
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    /// Huber threshold on the whitened loop residual norm; `None` disables it.
    pub loop_huber: Option<f64>,
    pub odom_sigma_t: f64,
    pub odom_sigma_r: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-9,
            step_tolerance: 1e-8,
            initial_lambda: 1e-4,
            loop_huber: None,
            odom_sigma_t: 0.02,
            odom_sigma_r: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    frames: Vec<usize>,
    nodes: Vec<Pose>,
    edges: Vec<Edge>,
}

/// `log(meas^-1 * xi^-1 * xj)`.
pub fn residual(measurement: &Pose, xi: &Pose, xj: &Pose) -> Result<Tangent, GraphError> {
    Ok((measurement.inverse() * xi.between(xj)).log()?)
}

/// Residual and its Jacobians with respect to right perturbations of both nodes.
pub fn linearize(
    measurement: &Pose,
    xi: &Pose,
    xj: &Pose,
) -> Result<(Tangent, Matrix6<f64>, Matrix6<f64>), GraphError> {
    let r = residual(measurement, xi, xj)?;
    let jr_inv = se3_right_jacobian_inv(&r);
    let jj = jr_inv;
    let ji = -jr_inv * xj.between(xi).adjoint();
    Ok((r, ji, jj))
}

fn robust_cost(s: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if s > d * d => 2.0 * d * s.sqrt() - d * d,
        _ => s,
    }
}

fn robust_weight(s: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if s > d * d => d / s.sqrt(),
        _ => 1.0,
    }
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Nodes at frames `0..n` chained by odometry edges.
    pub fn from_odometry(poses: &[Pose], odom_information: Information) -> Self {
        let mut g = Self::new();
        for (k, p) in poses.iter().enumerate() {
            g.add_node(k, *p).expect("frames are increasing");
        }
        for k in 1..poses.len() {
            g.edges.push(Edge {
                from: k - 1,
                to: k,
                measurement: poses[k - 1].between(&poses[k]),
                information: odom_information,
                kind: EdgeKind::Odometry,
            });
        }
        g
    }

    pub fn add_node(&mut self, frame: usize, pose: Pose) -> Result<usize, GraphError> {
        if self.frames.last().is_some_and(|&f| f >= frame) {
            return Err(GraphError::UnknownFrame { frame });
        }
        self.frames.push(frame);
        self.nodes.push(pose);
        Ok(self.nodes.len() - 1)
    }

    pub fn node_index(&self, frame: usize) -> Result<usize, GraphError> {
        self.frames.binary_search(&frame).map_err(|_| GraphError::UnknownFrame { frame })
    }

    pub fn add_edge(
        &mut self,
        from_frame: usize,
        to_frame: usize,
        measurement: Pose,
        information: Information,
        kind: EdgeKind,
    ) -> Result<(), GraphError> {
        let from = self.node_index(from_frame)?;
        let to = self.node_index(to_frame)?;
        self.edges.push(Edge { from, to, measurement, information, kind });
        Ok(())
    }

    /// The loop's relative pose is the pose of the earlier frame `j` seen from `i`.
    pub fn add_loop(&mut self, c: &LoopConstraint) -> Result<(), GraphError> {
        self.add_edge(c.frame_i, c.frame_j, c.relative_pose, c.information(), EdgeKind::Loop)
    }

    pub fn nodes(&self) -> &[Pose] {
        &self.nodes
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn loop_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop).count()
    }

    pub fn cost(&self, huber: Option<f64>) -> Result<f64, GraphError> {
        cost_of(&self.edges, &self.nodes, huber)
    }

    /// Levenberg-Marquardt with the first node held fixed.
    pub fn optimize(&mut self, params: &OptimizerParams) -> Result<OptimizeSummary, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let huber = params.loop_huber;
        let initial_cost = cost_of(&self.edges, &self.nodes, huber)?;
        let mut summary = OptimizeSummary { initial_cost, final_cost: initial_cost, iterations: 0, converged: false };
        let nvars = self.nodes.len() - 1;
        if nvars == 0 || initial_cost <= 1e-20 {
            summary.converged = true;
            return Ok(summary);
        }
        let var_pairs: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|e| e.from != 0 && e.to != 0 && e.from != e.to)
            .map(|e| (e.from - 1, e.to - 1))
            .collect();
        let structure = BlockStructure::analyze(nvars, &var_pairs);

        let mut cost = initial_cost;
        let mut lambda = params.initial_lambda;
        for iter in 0..params.max_iterations {
            summary.iterations = iter + 1;
            let (hessian, gradient) = self.assemble(&structure, huber)?;
            let mut accepted = false;
            while lambda < 1e12 {
                let mut damped = hessian.clone();
                damped.damp(lambda);
                let step = damped.solve(&structure, &gradient.iter().map(|g| -g).collect::<Vec<_>>())?;
                let candidate: Vec<Pose> = self
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(k, x)| if k == 0 { *x } else { (x * &Pose::exp(&step[k - 1])).orthonormalized() })
                    .collect();
                let new_cost = cost_of(&self.edges, &candidate, huber).unwrap_or(f64::INFINITY);
                if new_cost < cost {
                    let step_norm = step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
                    let rel = (cost - new_cost) / cost;
                    self.nodes = candidate;
                    cost = new_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < params.relative_tolerance || step_norm < params.step_tolerance || cost <= 1e-20 {
                        summary.converged = true;
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                // no descent direction left at any damping
                summary.converged = true;
            }
            if summary.converged {
                break;
            }
        }
        summary.final_cost = cost;
        Ok(summary)
    }

    fn assemble(&self, s: &BlockStructure, huber: Option<f64>) -> Result<(BlockMatrix, Vec<Tangent>), GraphError> {
        let mut h = BlockMatrix::zeros(s);
        let mut g = vec![Tangent::zeros(); s.len()];
        for e in &self.edges {
            let (r, ji, jj) = linearize(&e.measurement, &self.nodes[e.from], &self.nodes[e.to])?;
            let w = if e.kind == EdgeKind::Loop {
                robust_weight((r.transpose() * e.information * r)[0], huber)
            } else {
                1.0
            };
            let info = e.information * w;
            let (a, b) = (e.from.checked_sub(1), e.to.checked_sub(1));
            if let Some(a) = a {
                h.add(s, a, a, &(ji.transpose() * info * ji));
                g[s.pos[a]] += ji.transpose() * info * r;
            }
            if let Some(b) = b {
                h.add(s, b, b, &(jj.transpose() * info * jj));
                g[s.pos[b]] += jj.transpose() * info * r;
            }
            if let (Some(a), Some(b)) = (a, b) {
                if a != b {
                    h.add(s, b, a, &(jj.transpose() * info * ji));
                }
            }
        }
        // gradient is stored in elimination order
        Ok((h, g))
    }
}

fn cost_of(edges: &[Edge], nodes: &[Pose], huber: Option<f64>) -> Result<f64, GraphError> {
    let mut total = 0.0;
    for e in edges {
        let r = residual(&e.measurement, &nodes[e.from], &nodes[e.to])?;
        let s = (r.transpose() * e.information * r)[0];
        total += if e.kind == EdgeKind::Loop { robust_cost(s, huber) } else { s };
    }
    Ok(total)
}

/// Elimination order (minimum degree) and the fill pattern of the factor.
#[derive(Clone, Debug)]
pub struct BlockStructure {
    /// Variable eliminated at each position.
    order: Vec<usize>,
    /// Position of each variable.
    pos: Vec<usize>,
    /// For each position, the later positions coupled to it in the factor (sorted).
    pattern: Vec<Vec<usize>>,
    /// For each position, `pattern` index lookup.
    slot: Vec<HashMap<usize, usize>>,
}

impl BlockStructure {
    pub fn analyze(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in pairs {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
        let mut eliminated = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut var_pattern: Vec<Vec<usize>> = vec![Vec::new(); n];
        while let Some(Reverse((deg, v))) = heap.pop() {
            if eliminated[v] || deg != adj[v].len() {
                continue;
            }
            eliminated[v] = true;
            order.push(v);
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for &a in &nbrs {
                adj[a].remove(&v);
                for &b in &nbrs {
                    if a != b {
                        adj[a].insert(b);
                    }
                }
                heap.push(Reverse((adj[a].len(), a)));
            }
            var_pattern[v] = nbrs;
            adj[v].clear();
        }
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let pattern: Vec<Vec<usize>> = order
            .iter()
            .map(|&v| {
                let mut p: Vec<usize> = var_pattern[v].iter().map(|&u| pos[u]).collect();
                p.sort_unstable();
                p
            })
            .collect();
        let slot = pattern.iter().map(|p| p.iter().enumerate().map(|(i, &r)| (r, i)).collect()).collect();
        Self { order, pos, pattern, slot }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Number of off-diagonal blocks in the factor.
    pub fn fill(&self) -> usize {
        self.pattern.iter().map(Vec::len).sum()
    }
}

/// Symmetric block matrix stored as its lower triangle in elimination order.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    diag: Vec<Matrix6<f64>>,
    /// `lower[k][i]` is the block at (pattern[k][i], k).
    lower: Vec<Vec<Matrix6<f64>>>,
}

impl BlockMatrix {
    pub fn zeros(s: &BlockStructure) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); s.len()],
            lower: s.pattern.iter().map(|p| vec![Matrix6::zeros(); p.len()]).collect(),
        }
    }

    /// Adds `block` at variable position (row, col); the transpose is implied.
    pub fn add(&mut self, s: &BlockStructure, row: usize, col: usize, block: &Matrix6<f64>) {
        let (r, c) = (s.pos[row], s.pos[col]);
        if r == c {
            self.diag[r] += block;
        } else if r > c {
            self.lower[c][s.slot[c][&r]] += block;
        } else {
            self.lower[r][s.slot[r][&c]] += block.transpose();
        }
    }

    /// Marquardt damping `H + lambda * diag(H)`.
    fn damp(&mut self, lambda: f64) {
        for d in &mut self.diag {
            for i in 0..6 {
                d[(i, i)] += lambda * d[(i, i)].max(1e-9);
            }
        }
    }

    /// Solves `H x = b` with `b` indexed by elimination position. Returns `x`
    /// indexed by variable.
    pub fn solve(mut self, s: &BlockStructure, b: &[Tangent]) -> Result<Vec<Tangent>, GraphError> {
        let n = s.len();
        let mut chol: Vec<Matrix6<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let l = nalgebra::Cholesky::new(self.diag[k])
                .ok_or(GraphError::SingularNormalEquations { node: s.order[k] + 1 })?
                .l();
            let l_inv_t =
                l.try_inverse().ok_or(GraphError::SingularNormalEquations { node: s.order[k] + 1 })?.transpose();
            let col: Vec<Matrix6<f64>> = self.lower[k].iter().map(|a| a * l_inv_t).collect();
            for (i1, &r1) in s.pattern[k].iter().enumerate() {
                let li = &col[i1];
                self.diag[r1] -= li * li.transpose();
                for (i2, &r2) in s.pattern[k].iter().enumerate().skip(i1 + 1) {
                    let slot = s.slot[r1][&r2];
                    self.lower[r1][slot] -= col[i2] * li.transpose();
                }
            }
            self.lower[k] = col;
            chol.push(l);
        }
        // forward: L y = b
        let mut y: Vec<Tangent> = b.to_vec();
        for k in 0..n {
            let yk = chol[k].solve_lower_triangular(&y[k]).expect("nonsingular factor");
            y[k] = yk;
            for (i, &r) in s.pattern[k].iter().enumerate() {
                y[r] -= self.lower[k][i] * yk;
            }
        }
        // backward: L^T x = y
        let mut x = vec![Tangent::zeros(); n];
        for k in (0..n).rev() {
            let mut acc = y[k];
            for (i, &r) in s.pattern[k].iter().enumerate() {
                acc -= self.lower[k][i].transpose() * x[r];
            }
            x[k] = chol[k].tr_solve_lower_triangular(&acc).expect("nonsingular factor");
        }
        let mut out = vec![Tangent::zeros(); n];
        for (k, &v) in s.order.iter().enumerate() {
            out[v] = x[k];
        }
        Ok(out)
    }
}
