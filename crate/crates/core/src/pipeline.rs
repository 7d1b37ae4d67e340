//! Streaming detector: consumes log records in order and emits loop
//! constraints as soon as each camera frame is bracketed by odometry.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::association::AssociationParams;
use crate::error::{DetectError, GraphError};
use crate::icp::{IcpParams, LocalCloud};
use crate::loop_closure::{LoopConstraint, LoopDetector, LoopParams};
use crate::observation_db::ObservationDatabase;
use crate::pose_graph::{diagonal_information, OptimizeSummary, OptimizerParams, PoseGraph};
use crate::records::{rig_from_calib, DetectionRecord, LogRecord};
use crate::se3::{Pose, Trajectory, Vec3};
use crate::text_entity::{extract_entities, CalibratedRig, EntityParams, IdPattern, OdomSample, ScanView};

/// Odometry samples kept behind the newest one for bracketing.
const ODOM_HISTORY: usize = 4;

#[derive(Clone, Debug, Default)]
pub struct DetectorParams {
    pub entity: EntityParams,
    pub id_pattern: IdPattern,
    pub loop_params: LoopParams,
    pub association: AssociationParams,
    pub icp: IcpParams,
}

/// Wall-clock seconds spent per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub frames: usize,
    pub text_records: usize,
    pub entities: usize,
    pub dropped_text_records: usize,
    pub entity_extraction_s: f64,
    pub loop_closure_s: f64,
    pub max_frame_s: f64,
}

impl StageTiming {
    /// Mean detect-stage time per LiDAR frame (seconds).
    pub fn mean_frame_s(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            (self.entity_extraction_s + self.loop_closure_s) / self.frames as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "frames": self.frames,
            "text_records": self.text_records,
            "entities": self.entities,
            "dropped_text_records": self.dropped_text_records,
            "entity_extraction_s": self.entity_extraction_s,
            "loop_closure_s": self.loop_closure_s,
            "mean_frame_s": self.mean_frame_s(),
            "max_frame_s": self.max_frame_s,
        })
    }
}

struct Scan {
    frame: usize,
    timestamp: f64,
    pose: Pose,
    points: Vec<Vec3>,
}

pub struct Detector {
    params: DetectorParams,
    rig: Option<CalibratedRig>,
    loops: LoopDetector,
    trajectory: Trajectory,
    odom: VecDeque<OdomSample>,
    scans: VecDeque<Scan>,
    pending: VecDeque<(f64, Vec<DetectionRecord>)>,
    clouds: BTreeMap<usize, LocalCloud>,
    timing: StageTiming,
    seen_first: bool,
}

impl Detector {
    pub fn new(params: DetectorParams) -> Self {
        let loops = LoopDetector::new(
            params.loop_params.clone(),
            params.association.clone(),
            params.icp,
            params.id_pattern.clone(),
        );
        Self {
            params,
            rig: None,
            loops,
            trajectory: Trajectory::new(),
            odom: VecDeque::new(),
            scans: VecDeque::new(),
            pending: VecDeque::new(),
            clouds: BTreeMap::new(),
            timing: StageTiming::default(),
            seen_first: false,
        }
    }

    pub fn database(&self) -> &ObservationDatabase {
        self.loops.database()
    }

    pub fn constraints(&self) -> &[LoopConstraint] {
        self.loops.constraints()
    }

    /// Odometry poses received so far, indexed by frame.
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn timing(&self) -> &StageTiming {
        &self.timing
    }

    /// Feeds one record; returns the constraints it caused.
    pub fn push(&mut self, record: &LogRecord) -> Result<Vec<LoopConstraint>, DetectError> {
        let first = !self.seen_first;
        self.seen_first = true;
        match record {
            LogRecord::Calib { intrinsics, extrinsic } => {
                if !first {
                    return Err(DetectError::DuplicateCalibration);
                }
                self.rig = Some(rig_from_calib(*intrinsics, *extrinsic).map_err(DetectError::InvalidCalibration)?);
                Ok(Vec::new())
            }
            _ if self.rig.is_none() => Err(DetectError::MissingCalibration),
            LogRecord::Odom { t, frame, pose } => self.on_odom(*t, *frame, *pose),
            LogRecord::Cloud { frame, points } => {
                let Some(sample) = self.odom.iter().find(|o| o.frame == *frame) else {
                    return Err(DetectError::UnknownFrame { frame: *frame });
                };
                let (timestamp, pose) = (sample.timestamp, sample.pose);
                self.scans.push_back(Scan {
                    frame: *frame,
                    timestamp,
                    pose,
                    points: points.iter().map(|p| Vec3::from(*p)).collect(),
                });
                Ok(Vec::new())
            }
            LogRecord::Texts { t, detections } => {
                self.timing.text_records += 1;
                self.pending.push_back((*t, detections.clone()));
                Ok(Vec::new())
            }
            // ground truth never reaches the detector; ignore it if present
            LogRecord::Gt { .. } => Ok(Vec::new()),
        }
    }

    fn on_odom(&mut self, t: f64, frame: usize, pose: Pose) -> Result<Vec<LoopConstraint>, DetectError> {
        if frame != self.trajectory.len() {
            return Err(DetectError::FrameOutOfOrder { found: frame, expected: self.trajectory.len() });
        }
        self.trajectory.push(pose);
        self.odom.push_back(OdomSample { frame, timestamp: t, pose });
        while self.odom.len() > ODOM_HISTORY {
            self.odom.pop_front();
        }
        self.timing.frames += 1;
        // images before this sample are now bracketed
        let mut found = Vec::new();
        while self.pending.front().is_some_and(|(ti, _)| *ti < t) {
            let (ti, dets) = self.pending.pop_front().unwrap();
            found.extend(self.process_texts(ti, &dets)?);
        }
        // the window only needs scans up to one window before the newest odometry
        let horizon = t - self.params.entity.cloud_window - 0.5;
        while self.scans.front().is_some_and(|s| s.timestamp < horizon) {
            self.scans.pop_front();
        }
        Ok(found)
    }

    fn process_texts(&mut self, t_image: f64, records: &[DetectionRecord]) -> Result<Vec<LoopConstraint>, DetectError> {
        let Some(rig) = self.rig else { return Err(DetectError::MissingCalibration) };
        let detections: Vec<_> = records.iter().map(|d| d.to_detection(t_image)).collect();
        let odo: Vec<OdomSample> = self.odom.iter().copied().collect();
        if odo.first().is_none_or(|o| o.timestamp > t_image) {
            self.timing.dropped_text_records += 1;
            return Ok(Vec::new());
        }
        let start = Instant::now();
        let views: Vec<ScanView<'_>> = self
            .scans
            .iter()
            .map(|s| ScanView { frame: s.frame, timestamp: s.timestamp, pose: s.pose, points: &s.points })
            .collect();
        let extraction = match extract_entities(
            &detections,
            t_image,
            &views,
            &odo,
            &rig,
            &self.params.id_pattern,
            &self.params.entity,
        ) {
            Ok(e) => e,
            Err(_) => {
                // no usable cloud or bracket: the image contributes nothing
                self.timing.dropped_text_records += 1;
                self.timing.entity_extraction_s += start.elapsed().as_secs_f64();
                return Ok(Vec::new());
            }
        };
        let extract_s = start.elapsed().as_secs_f64();
        self.timing.entity_extraction_s += extract_s;
        if extraction.entities.is_empty() {
            return Ok(Vec::new());
        }
        self.timing.entities += extraction.entities.len();
        let anchor = extraction.entities[0].anchor_frame;

        let start = Instant::now();
        if !self.clouds.contains_key(&anchor) {
            if let Some(scan) = self.scans.iter().find(|s| s.frame == anchor) {
                self.clouds.insert(anchor, LocalCloud { frame: anchor, points: scan.points.clone() });
            }
        }
        let found = self.loops.process_frame(anchor, &extraction.entities, &self.trajectory, &self.clouds);
        let loop_s = start.elapsed().as_secs_f64();
        self.timing.loop_closure_s += loop_s;
        self.timing.max_frame_s = self.timing.max_frame_s.max(extract_s + loop_s);
        Ok(found)
    }

    /// Ends the stream. Images never bracketed by odometry are dropped.
    pub fn finish(&mut self) {
        self.timing.dropped_text_records += self.pending.len();
        self.pending.clear();
    }
}

/// Runs a whole record sequence through a fresh detector.
pub fn detect_all<'a>(
    records: impl IntoIterator<Item = &'a LogRecord>,
    params: DetectorParams,
) -> Result<Detector, DetectError> {
    let mut detector = Detector::new(params);
    for r in records {
        detector.push(r)?;
    }
    detector.finish();
    Ok(detector)
}

/// Odometry chain plus loop edges, optimized.
pub fn optimize_trajectory(
    odometry: &[Pose],
    loops: &[LoopConstraint],
    params: &OptimizerParams,
) -> Result<(Vec<Pose>, OptimizeSummary), GraphError> {
    let info = diagonal_information(params.odom_sigma_t, params.odom_sigma_r);
    let mut graph = PoseGraph::from_odometry(odometry, info);
    for c in loops {
        graph.add_loop(c)?;
    }
    let summary = graph.optimize(params)?;
    Ok((graph.nodes().to_vec(), summary))
}
