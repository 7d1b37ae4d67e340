//! JSONL log records shared by the simulator and the detector.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::error::RecordError;
use crate::se3::{Pose, Vec3};
use crate::text_entity::{CalibratedRig, TextDetection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub text: String,
    pub conf: f64,
    /// Top-left, top-right, bottom-right, bottom-left.
    pub quad: [[f64; 2]; 4],
}

impl DetectionRecord {
    pub fn to_detection(&self, timestamp: f64) -> TextDetection {
        TextDetection {
            content: self.text.clone(),
            confidence: self.conf,
            quad: self.quad.map(|[u, v]| PixelPoint::new(u, v)),
            timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LogRecord {
    Calib { intrinsics: [f64; 4], extrinsic: Pose },
    Odom { t: f64, frame: usize, pose: Pose },
    Cloud { frame: usize, points: Vec<[f64; 3]> },
    Texts { t: f64, detections: Vec<DetectionRecord> },
    Gt { frame: usize, pose: Pose },
}

impl LogRecord {
    pub fn calib(rig: &CalibratedRig) -> Self {
        LogRecord::Calib { intrinsics: rig.intrinsics.as_array(), extrinsic: rig.extrinsic_cam_in_lidar }
    }

    pub fn cloud(frame: usize, points: &[Vec3]) -> Self {
        LogRecord::Cloud { frame, points: points.iter().map(|p| [p.x, p.y, p.z]).collect() }
    }

    /// Semantic checks beyond the JSON shape.
    pub fn validate(&self) -> Result<(), String> {
        let finite = |x: f64, what: &str| if x.is_finite() { Ok(()) } else { Err(format!("non-finite {what}")) };
        match self {
            LogRecord::Calib { intrinsics, .. } => {
                let [fx, fy, cx, cy] = *intrinsics;
                CameraIntrinsics::new(fx, fy, cx, cy).map(|_| ()).map_err(|e| e.to_string())
            }
            LogRecord::Odom { t, .. } => finite(*t, "timestamp"),
            LogRecord::Cloud { points, .. } => points.iter().flatten().try_for_each(|&x| finite(x, "point coordinate")),
            LogRecord::Texts { t, detections } => {
                finite(*t, "timestamp")?;
                for d in detections {
                    if !(0.0..=1.0).contains(&d.conf) {
                        return Err(format!("confidence {} outside [0, 1]", d.conf));
                    }
                    d.quad.iter().flatten().try_for_each(|&x| finite(x, "quad coordinate"))?;
                }
                Ok(())
            }
            LogRecord::Gt { .. } => Ok(()),
        }
    }
}

pub fn rig_from_calib(intrinsics: [f64; 4], extrinsic: Pose) -> Result<CalibratedRig, String> {
    let [fx, fy, cx, cy] = intrinsics;
    Ok(CalibratedRig {
        intrinsics: CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| e.to_string())?,
        extrinsic_cam_in_lidar: extrinsic,
    })
}

pub fn write_jsonl<'a, W: Write>(records: impl IntoIterator<Item = &'a LogRecord>, mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses records line by line; blank lines are skipped. Errors carry the
/// 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> impl Iterator<Item = Result<(usize, LogRecord), RecordError>> {
    input.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(RecordError::Io(e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(
            serde_json::from_str::<LogRecord>(&line)
                .map_err(|e| RecordError::Malformed { line: line_no, message: e.to_string() })
                .and_then(|r| {
                    r.validate().map_err(|message| RecordError::Invalid { line: line_no, message })?;
                    Ok((line_no, r))
                }),
        )
    })
}
