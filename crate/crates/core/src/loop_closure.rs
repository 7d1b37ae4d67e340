//! Per-frame loop closure: candidate retrieval from the observation database,
//! ICP verification for ID texts, LTEM verification for generic texts, and
//! relative pose constraints from matched entity pairs.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::association::{
    build_ltem, match_ltems, verify_with_ltems, AssociationParams, Ltem, LtemDirection, LtemMatch,
};
use crate::icp::{icp_verify, IcpParams, LocalCloud};
use crate::observation_db::{ObservationDatabase, ObservationId};
use crate::se3::{Pose, Trajectory};
use crate::text_entity::{IdPattern, TextCategory, TextEntity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopSource {
    Id,
    Generic,
}

/// Relative pose prior between a current frame `i` and an earlier frame `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConstraint {
    #[serde(rename = "i")]
    pub frame_i: usize,
    #[serde(rename = "j")]
    pub frame_j: usize,
    /// Pose of frame `j` expressed in frame `i`.
    #[serde(rename = "pose")]
    pub relative_pose: Pose,
    /// Diagonal of the information matrix, `[t, t, t, r, r, r]`.
    pub info_diag: [f64; 6],
    pub source: LoopSource,
}

impl LoopConstraint {
    pub fn information(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_column_slice(&self.info_diag))
    }
}

/// Relative pose of frame `j` in frame `i` implied by one entity seen from both.
pub fn relative_pose_from_entities(t_text_li: &Pose, t_text_lj: &Pose) -> Pose {
    t_text_li * &t_text_lj.inverse()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopParams {
    /// Minimum travel distance between loop endpoints (meters).
    pub s_min: f64,
    /// Candidates whose implied frame offset exceeds this are skipped (meters).
    pub max_loop_offset: f64,
    /// Frames within which a repeated (i, j) neighborhood is suppressed.
    pub cooldown_frames: usize,
    /// Run ICP refinement on generic-text loops too.
    pub refine_generic: bool,
    pub sigma_t: f64,
    pub sigma_r: f64,
    /// Sigma multiplier for loops that were not refined by ICP.
    pub unrefined_scale: f64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            s_min: 10.0,
            max_loop_offset: 1.5,
            cooldown_frames: 10,
            refine_generic: true,
            sigma_t: 0.1,
            sigma_r: 0.05,
            unrefined_scale: 2.0,
        }
    }
}

impl LoopParams {
    fn info_diag(&self, refined: bool) -> [f64; 6] {
        let k = if refined { 1.0 } else { self.unrefined_scale };
        let (st, sr) = (k * self.sigma_t, k * self.sigma_r);
        let (t, r) = ((1.0 / st).powi(2), (1.0 / sr).powi(2));
        [t, t, t, r, r, r]
    }
}

/// Source of per-frame LiDAR clouds used for ICP.
pub trait CloudStore {
    fn cloud(&self, frame: usize) -> Option<&LocalCloud>;
}

impl CloudStore for HashMap<usize, LocalCloud> {
    fn cloud(&self, frame: usize) -> Option<&LocalCloud> {
        self.get(&frame)
    }
}

impl CloudStore for BTreeMap<usize, LocalCloud> {
    fn cloud(&self, frame: usize) -> Option<&LocalCloud> {
        self.get(&frame)
    }
}

/// Everything a frame evaluation reads.
pub struct FrameContext<'a> {
    pub db: &'a ObservationDatabase,
    /// Odometry poses up to (at least) the current frame.
    pub trajectory: &'a Trajectory,
    pub clouds: &'a dyn CloudStore,
    pub id_pattern: &'a IdPattern,
    pub loop_params: &'a LoopParams,
    pub association: &'a AssociationParams,
    pub icp: &'a IcpParams,
}

fn suppressed(emitted: &[LoopConstraint], i: usize, j: usize, cooldown: usize) -> bool {
    emitted.iter().any(|c| {
        (c.frame_i == i && c.frame_j == j)
            || (i >= c.frame_i && i - c.frame_i < cooldown && c.frame_j.abs_diff(j) < cooldown)
    })
}

/// Loops for the observations `new_ids` made at `frame`, evaluated against
/// earlier frames of the database. Pure: `emitted` is only read.
pub fn evaluate_frame(
    ctx: &FrameContext<'_>,
    frame: usize,
    new_ids: &[ObservationId],
    emitted: &[LoopConstraint],
) -> Vec<LoopConstraint> {
    let params = ctx.loop_params;
    let mut out: Vec<LoopConstraint> = Vec::new();
    let mut current_ltem: Option<Ltem> = None;
    let mut candidate_ltems: HashMap<usize, (Ltem, LtemMatch)> = HashMap::new();

    for &id in new_ids {
        let obs = ctx.db.get(id);
        let category = ctx.id_pattern.classify(&obs.content);

        // earlier frames observing this content, far enough along the path
        let mut by_frame: BTreeMap<usize, Vec<ObservationId>> = BTreeMap::new();
        for &cand in ctx.db.ids_for_content(&obs.content) {
            let j = ctx.db.get(cand).frame;
            if j < frame && ctx.trajectory.travel(j, frame) > params.s_min {
                by_frame.entry(j).or_default().push(cand);
            }
        }

        for (j, cands) in by_frame {
            let all_emitted = emitted.iter().chain(out.iter());
            if suppressed(&all_emitted.cloned().collect::<Vec<_>>(), frame, j, params.cooldown_frames) {
                continue;
            }
            let matched_prev: Vec<ObservationId> = match category {
                TextCategory::Id => cands,
                TextCategory::Generic => {
                    let m_c = current_ltem.get_or_insert_with(|| {
                        build_ltem(ctx.db, ctx.trajectory, frame, &ctx.association.ltem, LtemDirection::PastOnly)
                    });
                    let (m_p, matched) = candidate_ltems.entry(j).or_insert_with(|| {
                        let m_p = build_ltem(ctx.db, ctx.trajectory, j, &ctx.association.ltem, LtemDirection::TwoSided);
                        let matched = match_ltems(m_c, &m_p, ctx.association);
                        (m_p, matched)
                    });
                    verify_with_ltems(ctx.db, m_c, m_p, matched, id, j, ctx.association)
                        .map(|v| vec![v.previous])
                        .unwrap_or_default()
                }
            };

            for prev in matched_prev {
                let init = relative_pose_from_entities(&obs.pose, &ctx.db.get(prev).pose);
                if init.translation().norm() > params.max_loop_offset {
                    continue;
                }
                let refine = category == TextCategory::Id || params.refine_generic;
                let icp = if refine {
                    match (ctx.clouds.cloud(frame), ctx.clouds.cloud(j)) {
                        (Some(ci), Some(cj)) => icp_verify(ci, cj, &init, ctx.icp).ok(),
                        _ => None,
                    }
                } else {
                    None
                };
                let constraint = match (category, icp) {
                    (_, Some(r)) if r.accepted => Some((r.pose, true)),
                    (TextCategory::Id, _) => None,
                    (TextCategory::Generic, _) => Some((init, false)),
                };
                if let Some((relative_pose, refined)) = constraint {
                    out.push(LoopConstraint {
                        frame_i: frame,
                        frame_j: j,
                        relative_pose,
                        info_diag: params.info_diag(refined),
                        source: match category {
                            TextCategory::Id => LoopSource::Id,
                            TextCategory::Generic => LoopSource::Generic,
                        },
                    });
                    break;
                }
            }
        }
    }
    out
}

/// Stateful wrapper: owns the database and the emitted constraints.
#[derive(Debug)]
pub struct LoopDetector {
    pub loop_params: LoopParams,
    pub association: AssociationParams,
    pub icp: IcpParams,
    id_pattern: IdPattern,
    db: ObservationDatabase,
    emitted: Vec<LoopConstraint>,
}

impl LoopDetector {
    pub fn new(loop_params: LoopParams, association: AssociationParams, icp: IcpParams, id_pattern: IdPattern) -> Self {
        Self { loop_params, association, icp, id_pattern, db: ObservationDatabase::new(), emitted: Vec::new() }
    }

    pub fn database(&self) -> &ObservationDatabase {
        &self.db
    }

    pub fn constraints(&self) -> &[LoopConstraint] {
        &self.emitted
    }

    pub fn id_pattern(&self) -> &IdPattern {
        &self.id_pattern
    }

    fn context<'a>(&'a self, trajectory: &'a Trajectory, clouds: &'a dyn CloudStore) -> FrameContext<'a> {
        FrameContext {
            db: &self.db,
            trajectory,
            clouds,
            id_pattern: &self.id_pattern,
            loop_params: &self.loop_params,
            association: &self.association,
            icp: &self.icp,
        }
    }

    /// Inserts the frame's entities and returns the new loop constraints.
    /// Candidates are restricted to strictly earlier frames, so an entity never
    /// matches itself or its own frame.
    pub fn process_frame(
        &mut self,
        frame: usize,
        entities: &[TextEntity],
        trajectory: &Trajectory,
        clouds: &dyn CloudStore,
    ) -> Vec<LoopConstraint> {
        let ids: Vec<ObservationId> = entities.iter().filter_map(|e| self.db.insert(frame, e)).collect();
        if ids.is_empty() {
            return Vec::new();
        }
        let found = evaluate_frame(&self.context(trajectory, clouds), frame, &ids, &self.emitted);
        self.emitted.extend(found.iter().cloned());
        found
    }

    /// Re-evaluates a frame against the current database without changing state.
    pub fn reevaluate(&self, frame: usize, trajectory: &Trajectory, clouds: &dyn CloudStore) -> Vec<LoopConstraint> {
        let ids = self.db.ids_in_frame(frame).to_vec();
        let prior: Vec<LoopConstraint> = self.emitted.iter().filter(|c| c.frame_i < frame).cloned().collect();
        evaluate_frame(&self.context(trajectory, clouds), frame, &ids, &prior)
    }
}
