//! Database of every text entity observation made during a session.
//!
//! Observations live in one arena; the text dictionary (content -> ids) and the
//! frame dictionary (frame -> ids) index into it, so the two views cannot
//! disagree.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::RecordError;
use crate::se3::Pose;
use crate::text_entity::{normalize_content, TextEntity};

pub type ObservationId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    #[serde(rename = "text")]
    pub content: String,
    /// Entity pose in the observing LiDAR frame.
    pub pose: Pose,
    #[serde(rename = "conf")]
    pub confidence: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ObservationDatabase {
    observations: Vec<Observation>,
    text_dict: HashMap<String, Vec<ObservationId>>,
    frame_dict: BTreeMap<usize, Vec<ObservationId>>,
}

impl ObservationDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn get(&self, id: ObservationId) -> &Observation {
        &self.observations[id]
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Inserts an entity observed at `frame`. Returns `None` for an exact
    /// duplicate of an existing `(frame, content, pose)` entry.
    pub fn insert(&mut self, frame: usize, entity: &TextEntity) -> Option<ObservationId> {
        self.insert_observation(Observation {
            frame,
            content: normalize_content(&entity.content),
            pose: entity.pose_in_anchor,
            confidence: entity.confidence,
        })
    }

    pub fn insert_observation(&mut self, mut obs: Observation) -> Option<ObservationId> {
        obs.content = normalize_content(&obs.content);
        if let Some(ids) = self.frame_dict.get(&obs.frame) {
            let dup = ids.iter().any(|&id| {
                let o = &self.observations[id];
                o.content == obs.content && o.pose == obs.pose
            });
            if dup {
                return None;
            }
        }
        let id = self.observations.len();
        self.text_dict.entry(obs.content.clone()).or_default().push(id);
        self.frame_dict.entry(obs.frame).or_default().push(id);
        self.observations.push(obs);
        Some(id)
    }

    /// Observation ids for a content string, in insertion order.
    pub fn ids_for_content(&self, content: &str) -> &[ObservationId] {
        self.text_dict.get(&normalize_content(content)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ids_in_frame(&self, frame: usize) -> &[ObservationId] {
        self.frame_dict.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frames_observing(&self, content: &str) -> Vec<(usize, Pose)> {
        self.ids_for_content(content)
            .iter()
            .map(|&id| (self.observations[id].frame, self.observations[id].pose))
            .collect()
    }

    pub fn entities_in_frame(&self, frame: usize) -> Vec<(String, Pose)> {
        self.ids_in_frame(frame)
            .iter()
            .map(|&id| (self.observations[id].content.clone(), self.observations[id].pose))
            .collect()
    }

    /// Cross-checks both dictionaries against the arena.
    pub fn audit(&self) -> Result<(), String> {
        let text_total: usize = self.text_dict.values().map(Vec::len).sum();
        let frame_total: usize = self.frame_dict.values().map(Vec::len).sum();
        if text_total != self.observations.len() || frame_total != self.observations.len() {
            return Err(format!(
                "entry counts differ: arena {}, text {}, frame {}",
                self.observations.len(),
                text_total,
                frame_total
            ));
        }
        for (content, ids) in &self.text_dict {
            for &id in ids {
                let o = &self.observations[id];
                if &o.content != content || !self.ids_in_frame(o.frame).contains(&id) {
                    return Err(format!("observation {id} inconsistent under content {content}"));
                }
            }
        }
        for (frame, ids) in &self.frame_dict {
            for &id in ids {
                let o = &self.observations[id];
                if o.frame != *frame || !self.ids_for_content(&o.content).contains(&id) {
                    return Err(format!("observation {id} inconsistent under frame {frame}"));
                }
            }
        }
        Ok(())
    }

    /// One JSON observation per line.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for obs in &self.observations {
            serde_json::to_writer(&mut out, obs)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self, RecordError> {
        let mut db = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let obs: Observation = serde_json::from_str(&line)
                .map_err(|e| RecordError::Malformed { line: i + 1, message: e.to_string() })?;
            db.insert_observation(obs);
        }
        Ok(db)
    }
}
