//! Local text entity maps (LTEMs) and their graph-theoretic comparison.
//!
//! Two LTEMs are matched by forming every same-content pairing (putative
//! associations), scoring pairs of associations by how well they preserve
//! intra-map distances, and selecting the densest mutually consistent subset.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::observation_db::{ObservationDatabase, ObservationId};
use crate::se3::{Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LtemDirection {
    /// Poses up to and including the center (the current pose).
    PastOnly,
    /// Poses on both sides of the center (a historical candidate).
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtemParams {
    /// Path-length radius of the LTEM window (meters).
    pub d_ltem: f64,
    /// Same-content entities closer than this are merged (meters).
    pub r_merge: f64,
}

impl Default for LtemParams {
    fn default() -> Self {
        Self { d_ltem: 10.0, r_merge: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtemEntity {
    pub content: String,
    /// Position in the odometry world frame.
    pub position: Vec3,
    pub source_frame: usize,
    /// Raw observations averaged into this entity.
    pub members: Vec<ObservationId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ltem {
    pub center_frame: usize,
    pub window: RangeInclusive<usize>,
    pub entities: Vec<LtemEntity>,
}

impl Ltem {
    pub fn entity_containing(&self, id: ObservationId) -> Option<usize> {
        self.entities.iter().position(|e| e.members.contains(&id))
    }
}

/// Contiguous frames whose path distance from `center` is at most `radius`.
pub fn ltem_window(traj: &Trajectory, center: usize, radius: f64, direction: LtemDirection) -> RangeInclusive<usize> {
    let mut start = center;
    while start > 0 && traj.travel(start - 1, center) <= radius {
        start -= 1;
    }
    let mut end = center;
    if direction == LtemDirection::TwoSided {
        while end + 1 < traj.len() && traj.travel(center, end + 1) <= radius {
            end += 1;
        }
    }
    start..=end
}

/// Sequential merging: each observation joins the nearest same-content
/// cluster whose running mean is closer than `r_merge`, otherwise it starts a
/// new cluster. Cluster positions are the mean of their members.
fn merge_same_content(raw: Vec<(String, Vec3, usize, ObservationId)>, r_merge: f64) -> Vec<LtemEntity> {
    struct Cluster {
        sum: Vec3,
        entity: LtemEntity,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut by_content: HashMap<String, Vec<usize>> = HashMap::new();
    for (content, pos, frame, id) in raw {
        let ids = by_content.entry(content.clone()).or_default();
        let mut best: Option<(usize, f64)> = None;
        for &c in ids.iter() {
            let d = (clusters[c].entity.position - pos).norm();
            if d < r_merge && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        match best {
            Some((c, _)) => {
                let cl = &mut clusters[c];
                cl.sum += pos;
                cl.entity.members.push(id);
                cl.entity.position = cl.sum / cl.entity.members.len() as f64;
            }
            None => {
                ids.push(clusters.len());
                clusters.push(Cluster {
                    sum: pos,
                    entity: LtemEntity { content, position: pos, source_frame: frame, members: vec![id] },
                });
            }
        }
    }
    clusters.into_iter().map(|c| c.entity).collect()
}

pub fn build_ltem(
    db: &ObservationDatabase,
    traj: &Trajectory,
    center: usize,
    params: &LtemParams,
    direction: LtemDirection,
) -> Ltem {
    let window = ltem_window(traj, center, params.d_ltem, direction);
    let mut raw = Vec::new();
    for frame in window.clone() {
        let Some(frame_pose) = traj.pose(frame) else { continue };
        for &id in db.ids_in_frame(frame) {
            let obs = db.get(id);
            raw.push((obs.content.clone(), frame_pose.transform_point(obs.pose.translation()), frame, id));
        }
    }
    Ltem { center_frame: center, window, entities: merge_same_content(raw, params.r_merge) }
}

/// A pairing of an entity of the current LTEM with one of the candidate LTEM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Association {
    pub entity_c: usize,
    pub entity_p: usize,
}

/// Every cross pair with equal content, ordered by `(entity_c, entity_p)`.
pub fn putative_associations(m_c: &Ltem, m_p: &Ltem) -> Vec<Association> {
    let mut by_content: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in m_p.entities.iter().enumerate() {
        by_content.entry(e.content.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (c, e) in m_c.entities.iter().enumerate() {
        if let Some(ps) = by_content.get(e.content.as_str()) {
            out.extend(ps.iter().map(|&p| Association { entity_c: c, entity_p: p }));
        }
    }
    out
}

/// Linear hat loss: 1 at zero, falling to 0 at `epsilon` and beyond.
pub fn hat_loss(x: f64, epsilon: f64) -> f64 {
    if x >= epsilon {
        0.0
    } else {
        (1.0 - x / epsilon).max(0.0)
    }
}

/// Agreement between the distances the two associations imply in each map.
pub fn consistency_score(a_i: &Association, a_j: &Association, m_c: &Ltem, m_p: &Ltem, epsilon: f64) -> f64 {
    let dp = (m_c.entities[a_i.entity_c].position - m_c.entities[a_j.entity_c].position).norm();
    let dq = (m_p.entities[a_i.entity_p].position - m_p.entities[a_j.entity_p].position).norm();
    hat_loss((dp - dq).abs(), epsilon)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyGraph {
    pub affinity: DMatrix<f64>,
    pub exclusion: DMatrix<bool>,
}

impl ConsistencyGraph {
    pub fn from_parts(affinity: DMatrix<f64>, exclusion: DMatrix<bool>) -> Self {
        assert_eq!(affinity.shape(), exclusion.shape());
        Self { affinity, exclusion }
    }

    pub fn len(&self) -> usize {
        self.affinity.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Two distinct associations may coexist in a consistent set.
    pub fn compatible(&self, i: usize, j: usize) -> bool {
        i != j && !self.exclusion[(i, j)] && self.affinity[(i, j)] > 0.0
    }

    /// `1^T M 1 / |S|` over the members of `set`.
    pub fn density(&self, set: &[usize]) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for &i in set {
            for &j in set {
                sum += self.affinity[(i, j)];
            }
        }
        sum / set.len() as f64
    }

    pub fn is_consistent_set(&self, set: &[usize]) -> bool {
        set.iter().enumerate().all(|(k, &i)| set[k + 1..].iter().all(|&j| self.compatible(i, j)))
    }

    /// Adjacency JSON for debugging.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.len();
        let aff: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| self.affinity[(i, j)]).collect()).collect();
        let exc: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| self.exclusion[(i, j)]).collect()).collect();
        serde_json::json!({ "n": n, "affinity": aff, "exclusion": exc })
    }
}

pub fn build_consistency_graph(associations: &[Association], m_c: &Ltem, m_p: &Ltem, epsilon: f64) -> ConsistencyGraph {
    let n = associations.len();
    let mut affinity = DMatrix::zeros(n, n);
    let mut exclusion = DMatrix::from_element(n, n, false);
    for i in 0..n {
        affinity[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let (a, b) = (&associations[i], &associations[j]);
            let excluded = a.entity_c == b.entity_c || a.entity_p == b.entity_p;
            let s = if excluded { 0.0 } else { consistency_score(a, b, m_c, m_p, epsilon) };
            exclusion[(i, j)] = excluded;
            exclusion[(j, i)] = excluded;
            affinity[(i, j)] = s;
            affinity[(j, i)] = s;
        }
    }
    ConsistencyGraph { affinity, exclusion }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Exact,
    Relaxed,
    /// Exact up to [`EXACT_LIMIT`] associations, relaxed beyond.
    #[default]
    Auto,
}

pub const EXACT_LIMIT: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistentSet {
    /// Association indices, ascending.
    pub members: Vec<usize>,
    pub density: f64,
}

impl ConsistentSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }
}

const DENSITY_TIE: f64 = 1e-12;

fn improves(density: f64, size: usize, best_density: f64, best_size: usize) -> bool {
    density > best_density + DENSITY_TIE || ((density - best_density).abs() <= DENSITY_TIE && size > best_size)
}

pub fn solve_consistent_set(g: &ConsistencyGraph, mode: SolverMode, seed: u64) -> ConsistentSet {
    match mode {
        SolverMode::Exact => solve_exact(g),
        SolverMode::Relaxed => solve_relaxed(g, seed),
        SolverMode::Auto if g.len() <= EXACT_LIMIT => solve_exact(g),
        SolverMode::Auto => solve_relaxed(g, seed),
    }
}

/// Exhaustive search over all consistent subsets (cliques of the
/// compatibility graph), in lexicographic order.
pub fn solve_exact(g: &ConsistencyGraph) -> ConsistentSet {
    let n = g.len();
    assert!(n <= 64, "exact solver supports at most 64 associations");
    let adj: Vec<u64> =
        (0..n).map(|i| (0..n).filter(|&j| g.compatible(i, j)).fold(0u64, |m, j| m | (1 << j))).collect();

    struct Search<'a> {
        g: &'a ConsistencyGraph,
        adj: &'a [u64],
        current: Vec<usize>,
        best: (f64, Vec<usize>),
    }

    impl Search<'_> {
        fn extend(&mut self, sum: f64, candidates: u64) {
            let mut rest = candidates;
            while rest != 0 {
                let v = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let gain: f64 = self.current.iter().map(|&i| self.g.affinity[(i, v)]).sum();
                let new_sum = sum + self.g.affinity[(v, v)] + 2.0 * gain;
                self.current.push(v);
                let density = new_sum / self.current.len() as f64;
                if improves(density, self.current.len(), self.best.0, self.best.1.len()) {
                    self.best = (density, self.current.clone());
                }
                let above = if v + 1 >= 64 { 0 } else { !0u64 << (v + 1) };
                self.extend(new_sum, candidates & self.adj[v] & above);
                self.current.pop();
            }
        }
    }

    let all = if n == 64 { !0u64 } else { (1u64 << n) - 1 };
    let mut search = Search { g, adj: &adj, current: Vec::new(), best: (0.0, Vec::new()) };
    search.extend(0.0, all);
    let (density, members) = search.best;
    ConsistentSet { members, density }
}

/// Objective `u^T (M - d C) u` where `C` marks incompatible pairs.
fn penalized_objective(g: &ConsistencyGraph, penalty: f64, u: &[f64]) -> f64 {
    let n = u.len();
    let mut f = 0.0;
    for i in 0..n {
        for j in 0..n {
            let m = if i != j && !g.compatible(i, j) { -penalty } else { g.affinity[(i, j)] };
            f += u[i] * m * u[j];
        }
    }
    f
}

fn project_unit_nonneg(v: &mut [f64]) -> bool {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-300 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Extra relaxation runs, each confined to the compatible neighborhood of one
/// of the vertices with the largest weighted degree.
const NEIGHBORHOOD_STARTS: usize = 12;

/// Continuous relaxation: projected gradient ascent of `u^T M u` over the
/// non-negative unit sphere, with an escalating penalty on incompatible pairs,
/// followed by rounding in descending `u` order and local search. Runs from a
/// seeded random start and from several neighborhood starts; the densest
/// result wins.
pub fn solve_relaxed(g: &ConsistencyGraph, seed: u64) -> ConsistentSet {
    let n = g.len();
    if n == 0 {
        return ConsistentSet { members: Vec::new(), density: 0.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<(Vec<f64>, Vec<bool>)> =
        vec![((0..n).map(|_| rng.random_range(0.5..1.0)).collect(), vec![true; n])];
    let degree: Vec<f64> =
        (0..n).map(|i| (0..n).filter(|&j| g.compatible(i, j)).map(|j| g.affinity[(i, j)]).sum()).collect();
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by(|&a, &b| degree[b].total_cmp(&degree[a]).then(a.cmp(&b)));
    for &v in by_degree.iter().take(NEIGHBORHOOD_STARTS) {
        let allowed: Vec<bool> = (0..n).map(|j| j == v || g.compatible(v, j)).collect();
        starts.push((allowed.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(), allowed));
    }
    let mut best: Option<ConsistentSet> = None;
    for (u, allowed) in starts {
        let members = relax_from(g, u, &allowed);
        let density = g.density(&members);
        let better = match &best {
            None => true,
            Some(b) => improves(density, members.len(), b.density, b.len()),
        };
        if better {
            best = Some(ConsistentSet { members, density });
        }
    }
    best.expect("at least one start")
}

fn relax_from(g: &ConsistencyGraph, mut u: Vec<f64>, allowed: &[bool]) -> Vec<usize> {
    let n = g.len();
    project_unit_nonneg(&mut u);

    let mut penalty = 0.0;
    for _outer in 0..40 {
        let mut step = 1.0;
        let mut f = penalized_objective(g, penalty, &u);
        for _inner in 0..2000 {
            let mut grad = vec![0.0; n];
            for i in (0..n).filter(|&i| allowed[i]) {
                let mut acc = 0.0;
                for (j, &uj) in u.iter().enumerate() {
                    let m = if i != j && !g.compatible(i, j) { -penalty } else { g.affinity[(i, j)] };
                    acc += m * uj;
                }
                grad[i] = 2.0 * acc;
            }
            let mut moved = false;
            while step > 1e-12 {
                let mut cand: Vec<f64> = u.iter().zip(&grad).map(|(a, b)| a + step * b).collect();
                if project_unit_nonneg(&mut cand) {
                    let fc = penalized_objective(g, penalty, &cand);
                    if fc >= f - 1e-15 {
                        let delta: f64 = cand.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        u = cand;
                        f = fc;
                        step *= 2.0;
                        moved = delta > 1e-11;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let support: Vec<usize> = (0..n).filter(|&i| u[i] > 1e-8).collect();
        if g.is_consistent_set(&support) {
            break;
        }
        penalty = if penalty == 0.0 { 1.0 } else { penalty * 2.0 };
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));

    let mut greedy: Vec<usize> = Vec::new();
    let mut best: Vec<usize> = Vec::new();
    let mut best_density = 0.0;
    for &i in &order {
        if greedy.iter().all(|&j| g.compatible(i, j)) {
            greedy.push(i);
            let d = g.density(&greedy);
            if improves(d, greedy.len(), best_density, best.len()) {
                best_density = d;
                best = greedy.clone();
            }
        }
    }
    local_search(g, best)
}

/// Best-improvement add/remove/swap moves until none raises the density.
fn local_search(g: &ConsistencyGraph, mut set: Vec<usize>) -> Vec<usize> {
    let n = g.len();
    for _ in 0..(10 * n + 10) {
        let current = g.density(&set);
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |cand: Vec<usize>| {
            let d = g.density(&cand);
            let (bd, bs) = best.as_ref().map(|b| (b.0, b.1.len())).unwrap_or((current, set.len()));
            if improves(d, cand.len(), bd, bs) {
                best = Some((d, cand));
            }
        };
        for v in 0..n {
            if !set.contains(&v) && set.iter().all(|&j| g.compatible(v, j)) {
                let mut c = set.clone();
                c.push(v);
                consider(c);
            }
        }
        if set.len() > 1 {
            for k in 0..set.len() {
                let mut c = set.clone();
                c.remove(k);
                consider(c);
            }
        }
        for k in 0..set.len() {
            for v in 0..n {
                if set.contains(&v) {
                    continue;
                }
                let ok = set.iter().enumerate().all(|(m, &j)| m == k || g.compatible(v, j));
                if ok {
                    let mut c = set.clone();
                    c[k] = v;
                    consider(c);
                }
            }
        }
        match best {
            Some((_, next)) => set = next,
            None => break,
        }
    }
    set.sort_unstable();
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationParams {
    /// Distance-disagreement threshold of the hat loss (meters).
    pub epsilon: f64,
    pub ltem: LtemParams,
    /// Minimum size of the consistent set for a loop to be accepted.
    pub min_consistent: usize,
    pub solver: SolverMode,
    pub seed: u64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self { epsilon: 0.5, ltem: LtemParams::default(), min_consistent: 3, solver: SolverMode::Auto, seed: 0 }
    }
}

/// Outcome of comparing two LTEMs.
#[derive(Clone, Debug, PartialEq)]
pub struct LtemMatch {
    pub associations: Vec<Association>,
    pub consistent: ConsistentSet,
}

impl LtemMatch {
    pub fn accepted_pairs(&self) -> impl Iterator<Item = &Association> {
        self.consistent.members.iter().map(|&i| &self.associations[i])
    }

    /// Whether `(entity_c, entity_p)` survived and the set is large enough.
    pub fn accepts(&self, entity_c: usize, entity_p: usize, min_consistent: usize) -> bool {
        self.consistent.len() >= min_consistent
            && self.accepted_pairs().any(|a| a.entity_c == entity_c && a.entity_p == entity_p)
    }
}

pub fn match_ltems(m_c: &Ltem, m_p: &Ltem, params: &AssociationParams) -> LtemMatch {
    let associations = putative_associations(m_c, m_p);
    let graph = build_consistency_graph(&associations, m_c, m_p, params.epsilon);
    let consistent = solve_consistent_set(&graph, params.solver, params.seed);
    LtemMatch { associations, consistent }
}

/// A verified correspondence between a current and a past observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifiedPair {
    pub current: ObservationId,
    pub previous: ObservationId,
    pub consistent: usize,
}

/// Checks prebuilt LTEMs for a loop between observation `entity_c` and the
/// same-content observations of `candidate_frame`.
pub fn verify_with_ltems(
    db: &ObservationDatabase,
    m_c: &Ltem,
    m_p: &Ltem,
    matched: &LtemMatch,
    entity_c: ObservationId,
    candidate_frame: usize,
    params: &AssociationParams,
) -> Option<VerifiedPair> {
    if matched.consistent.len() < params.min_consistent {
        return None;
    }
    let ec = m_c.entity_containing(entity_c)?;
    let content = &db.get(entity_c).content;
    db.ids_in_frame(candidate_frame).iter().filter(|&&id| &db.get(id).content == content).find_map(|&id| {
        let ep = m_p.entity_containing(id)?;
        matched.accepts(ec, ep, params.min_consistent).then_some(VerifiedPair {
            current: entity_c,
            previous: id,
            consistent: matched.consistent.len(),
        })
    })
}

/// Algorithm-level check of one candidate frame for observation `entity_c`.
pub fn verify_candidate(
    db: &ObservationDatabase,
    traj: &Trajectory,
    entity_c: ObservationId,
    candidate_frame: usize,
    params: &AssociationParams,
) -> Option<VerifiedPair> {
    let current_frame = db.get(entity_c).frame;
    let m_c = build_ltem(db, traj, current_frame, &params.ltem, LtemDirection::PastOnly);
    let m_p = build_ltem(db, traj, candidate_frame, &params.ltem, LtemDirection::TwoSided);
    let matched = match_ltems(&m_c, &m_p, params);
    verify_with_ltems(db, &m_c, &m_p, &matched, entity_c, candidate_frame, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation_db::Observation;
    use crate::se3::Pose;

    fn ltem(entities: &[(&str, [f64; 3])]) -> Ltem {
        Ltem {
            center_frame: 0,
            window: 0..=0,
            entities: entities
                .iter()
                .enumerate()
                .map(|(i, (c, p))| LtemEntity {
                    content: c.to_string(),
                    position: Vec3::from(*p),
                    source_frame: 0,
                    members: vec![i],
                })
                .collect(),
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(hat_loss(0.0, 0.5), 1.0);
        assert_eq!(hat_loss(1.0, 0.5), 0.0);
        assert_eq!(hat_loss(0.25, 0.5), 0.5);
        assert_eq!(hat_loss(0.5, 0.5), 0.0);
    }

    #[test]
    fn putative_counts() {
        let c = ltem(&[("EXIT", [0.0; 3]), ("POWER", [1.0, 0.0, 0.0])]);
        let disjoint = ltem(&[("STOP", [0.0; 3])]);
        assert!(putative_associations(&c, &disjoint).is_empty());
        let p = ltem(&[("EXIT", [0.0; 3]), ("EXIT", [3.0, 0.0, 0.0]), ("EXIT", [6.0, 0.0, 0.0])]);
        assert_eq!(putative_associations(&ltem(&[("EXIT", [0.0; 3])]), &p).len(), 3);
    }

    /// Repeated-sign scene: one EXIT in the current map, three in the candidate,
    /// and three other rigidly arranged texts.
    fn exit_scene() -> (Ltem, Ltem) {
        let c = ltem(&[
            ("EXIT", [0.0, 0.0, 0.0]),
            ("POWER", [2.0, 1.0, 0.0]),
            ("DANGER", [4.0, -1.0, 0.5]),
            ("STOP", [6.0, 0.5, 0.0]),
        ]);
        let shift = Vec3::new(10.0, 3.0, 0.0);
        let p = ltem(&[
            ("EXIT", (Vec3::new(0.0, 0.0, 0.0) + shift).into()),
            ("EXIT", (Vec3::new(5.0, 4.0, 0.0) + shift).into()),
            ("EXIT", (Vec3::new(-3.0, 2.0, 0.0) + shift).into()),
            ("POWER", (Vec3::new(2.0, 1.0, 0.0) + shift).into()),
            ("DANGER", (Vec3::new(4.0, -1.0, 0.5) + shift).into()),
            ("STOP", (Vec3::new(6.0, 0.5, 0.0) + shift).into()),
        ]);
        (c, p)
    }

    #[test]
    fn exclusive_associations_have_zero_affinity() {
        let (c, p) = exit_scene();
        let assoc = putative_associations(&c, &p);
        assert_eq!(assoc.len(), 6);
        let g = build_consistency_graph(&assoc, &c, &p, 0.5);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g.exclusion[(i, j)]);
                    assert_eq!(g.affinity[(i, j)], 0.0);
                }
            }
            assert_eq!(g.affinity[(i, i)], 1.0);
        }
        // rigid pairs
        assert_eq!(g.affinity[(3, 4)], 1.0);
    }

    #[test]
    fn densest_set_keeps_correct_exit() {
        let (c, p) = exit_scene();
        let assoc = putative_associations(&c, &p);
        let g = build_consistency_graph(&assoc, &c, &p, 0.5);
        for mode in [SolverMode::Exact, SolverMode::Relaxed] {
            let set = solve_consistent_set(&g, mode, 1);
            let chosen: Vec<Association> = set.members.iter().map(|&i| assoc[i]).collect();
            assert!(chosen.contains(&Association { entity_c: 0, entity_p: 0 }), "{mode:?}");
            assert!(!chosen.contains(&Association { entity_c: 0, entity_p: 1 }));
            assert!(!chosen.contains(&Association { entity_c: 0, entity_p: 2 }));
            assert_eq!(set.len(), 4);
        }
    }

    #[test]
    fn complete_graph_selects_everything() {
        let g = ConsistencyGraph::from_parts(DMatrix::from_element(3, 3, 1.0), DMatrix::from_element(3, 3, false));
        for mode in [SolverMode::Exact, SolverMode::Relaxed] {
            let set = solve_consistent_set(&g, mode, 0);
            assert_eq!(set.members, vec![0, 1, 2]);
            assert!((set.density - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_graph() {
        let g = ConsistencyGraph::from_parts(DMatrix::zeros(0, 0), DMatrix::from_element(0, 0, false));
        assert!(solve_consistent_set(&g, SolverMode::Exact, 0).is_empty());
        assert!(solve_consistent_set(&g, SolverMode::Relaxed, 0).is_empty());
    }

    #[test]
    fn window_by_path_distance() {
        let traj = Trajectory::from_poses((0..30).map(|i| Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0))));
        assert_eq!(ltem_window(&traj, 20, 10.0, LtemDirection::PastOnly), 10..=20);
        assert_eq!(ltem_window(&traj, 20, 10.0, LtemDirection::TwoSided), 10..=29);
        assert_eq!(ltem_window(&traj, 3, 10.0, LtemDirection::TwoSided), 0..=13);
    }

    #[test]
    fn merging_same_content() {
        let mut db = ObservationDatabase::new();
        let traj = Trajectory::from_poses((0..3).map(|i| Pose::from_translation(Vec3::new(i as f64 * 0.1, 0.0, 0.0))));
        db.insert_observation(Observation {
            frame: 0,
            content: "EXIT".into(),
            pose: Pose::from_translation(Vec3::new(1.0, 2.0, 0.0)),
            confidence: 1.0,
        });
        db.insert_observation(Observation {
            frame: 2,
            content: "EXIT".into(),
            pose: Pose::from_translation(Vec3::new(1.1, 2.0, 0.0)),
            confidence: 1.0,
        });
        // world positions 1.0 and 1.3 -> merged at 1.15
        let m = build_ltem(&db, &traj, 2, &LtemParams::default(), LtemDirection::PastOnly);
        assert_eq!(m.entities.len(), 1);
        assert!((m.entities[0].position - Vec3::new(1.15, 2.0, 0.0)).norm() < 1e-12);
        assert_eq!(m.entities[0].members, vec![0, 1]);

        let lone = build_ltem(&db, &traj, 0, &LtemParams::default(), LtemDirection::PastOnly);
        assert_eq!(lone.entities.len(), 1);
        assert_eq!(lone.entities[0].position, Vec3::new(1.0, 2.0, 0.0));
    }

    /// Densest consistent set by enumerating every subset.
    fn brute_force_density(g: &ConsistencyGraph) -> f64 {
        let n = g.len();
        let mut best = 0.0_f64;
        for mask in 1u32..(1 << n) {
            let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            if g.is_consistent_set(&set) {
                best = best.max(g.density(&set));
            }
        }
        best
    }

    fn random_scene(rng: &mut ChaCha8Rng) -> (Ltem, Ltem) {
        let words = ["EXIT", "POWER", "DANGER", "STOP"];
        let n_c = rng.random_range(2..6);
        let c: Vec<(&str, [f64; 3])> = (0..n_c)
            .map(|_| {
                (
                    words[rng.random_range(0..words.len())],
                    [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0],
                )
            })
            .collect();
        let motion = Pose::from_yaw(rng.random_range(-3.0..3.0), Vec3::new(rng.random_range(-9.0..9.0), 2.0, 0.0));
        let mut p: Vec<(&str, [f64; 3])> = Vec::new();
        for (w, x) in &c {
            if rng.random_bool(0.8) {
                let jitter = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
                p.push((w, (motion.transform_point(&Vec3::from(*x)) + jitter).into()));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            p.push((
                words[rng.random_range(0..words.len())],
                [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), 0.0],
            ));
        }
        (ltem(&c), ltem(&p))
    }

    #[test]
    fn solvers_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tested = 0;
        while tested < 100 {
            let (c, p) = random_scene(&mut rng);
            let assoc = putative_associations(&c, &p);
            if assoc.is_empty() || assoc.len() > 14 {
                continue;
            }
            tested += 1;
            let g = build_consistency_graph(&assoc, &c, &p, 0.5);
            let oracle = brute_force_density(&g);
            let exact = solve_exact(&g);
            assert!((exact.density - oracle).abs() < 1e-9, "exact {} vs {}", exact.density, oracle);
            let relaxed = solve_relaxed(&g, tested as u64);
            assert!(relaxed.density >= 0.99 * oracle, "relaxed {} vs {}", relaxed.density, oracle);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scene() -> impl Strategy<Value = (Ltem, Ltem)> {
            any::<u64>().prop_map(|seed| random_scene(&mut ChaCha8Rng::seed_from_u64(seed)))
        }

        proptest! {
            #[test]
            fn selected_sets_are_exclusive_and_positive((c, p) in scene(), seed in any::<u64>()) {
                let assoc = putative_associations(&c, &p);
                let g = build_consistency_graph(&assoc, &c, &p, 0.5);
                for mode in [SolverMode::Exact, SolverMode::Relaxed] {
                    let set = solve_consistent_set(&g, mode, seed);
                    for (k, &i) in set.members.iter().enumerate() {
                        for &j in &set.members[k + 1..] {
                            prop_assert!(assoc[i].entity_c != assoc[j].entity_c);
                            prop_assert!(assoc[i].entity_p != assoc[j].entity_p);
                            prop_assert!(g.affinity[(i, j)] > 0.0);
                        }
                    }
                }
            }

            #[test]
            fn solvers_are_deterministic((c, p) in scene(), seed in any::<u64>()) {
                let assoc = putative_associations(&c, &p);
                let g = build_consistency_graph(&assoc, &c, &p, 0.5);
                prop_assert_eq!(solve_relaxed(&g, seed), solve_relaxed(&g, seed));
                prop_assert_eq!(solve_exact(&g), solve_exact(&g));
            }

            #[test]
            fn graph_is_invariant_to_rigid_motion(
                (c, p) in scene(),
                r in prop::array::uniform3(-3.0..3.0f64),
                t in prop::array::uniform3(-20.0..20.0f64),
            ) {
                let motion = Pose::from_rotation_vector(Vec3::from(r), Vec3::from(t));
                let mut moved = p.clone();
                for e in &mut moved.entities {
                    e.position = motion.transform_point(&e.position);
                }
                let assoc = putative_associations(&c, &p);
                prop_assert_eq!(&assoc, &putative_associations(&c, &moved));
                let a = build_consistency_graph(&assoc, &c, &p, 0.5);
                let b = build_consistency_graph(&assoc, &c, &moved, 0.5);
                prop_assert_eq!(&a.exclusion, &b.exclusion);
                prop_assert!((&a.affinity - &b.affinity).abs().max() < 1e-9);
            }

            #[test]
            fn affinity_grows_with_epsilon((c, p) in scene(), eps in 0.05..2.0f64, extra in 0.0..2.0f64) {
                let assoc = putative_associations(&c, &p);
                let tight = build_consistency_graph(&assoc, &c, &p, eps);
                let loose = build_consistency_graph(&assoc, &c, &p, eps + extra);
                for (a, b) in tight.affinity.iter().zip(loose.affinity.iter()) {
                    prop_assert!(b >= a);
                }
            }
        }
    }
}
