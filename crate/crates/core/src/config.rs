//! Pipeline configuration: a TOML document with one section per stage, every
//! key defaulted, unknown keys rejected, and environment overrides of the
//! form `TEXTLOOP__SECTION__KEY=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::AssociationParams;
use crate::error::ConfigError;
use crate::evaluation::EvalParams;
use crate::icp::IcpParams;
use crate::loop_closure::LoopParams;
use crate::pipeline::DetectorParams;
use crate::pose_graph::OptimizerParams;
use crate::records::rig_from_calib;
use crate::se3::Pose;
use crate::simulator::{default_rig, SimParams};
use crate::text_entity::{CalibratedRig, EntityParams, IdPattern, RansacParams, DEFAULT_ID_PATTERN};

pub const ENV_PREFIX: &str = "TEXTLOOP__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// Camera pose in the LiDAR frame.
    pub extrinsic: Pose,
}

impl Default for RigConfig {
    fn default() -> Self {
        let rig = default_rig();
        Self { intrinsics: rig.intrinsics.as_array(), extrinsic: rig.extrinsic_cam_in_lidar }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub id_pattern: String,
    pub min_confidence: f64,
    pub cloud_window: f64,
    pub min_edge_length: f64,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        let e = EntityParams::default();
        Self {
            id_pattern: DEFAULT_ID_PATTERN.to_string(),
            min_confidence: e.min_confidence,
            cloud_window: e.cloud_window,
            min_edge_length: e.min_edge_length,
            seed: e.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rig: RigConfig,
    pub text: TextConfig,
    pub ransac: RansacParams,
    pub association: AssociationParams,
    #[serde(rename = "loop")]
    pub loop_params: LoopParams,
    pub icp: IcpParams,
    pub graph: OptimizerParams,
    pub eval: EvalParams,
    pub sim: SimParams,
}

fn check(ok: bool, what: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(what.to_string()))
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Env { key: key.to_string(), message: "expected SECTION__KEY".into() });
    }
    let (leaf, parents) = path.split_last().unwrap();
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Env { key: key.to_string(), message: format!("'{p}' is not a section") })?;
    }
    node.insert(leaf.clone(), parse_env_value(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document, then applies `(name, value)` overrides whose
    /// name starts with the environment prefix.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(one_line(&e.to_string())))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v))).collect();
        overrides.sort();
        for (k, v) in &overrides {
            apply_override(&mut table, k, v)?;
        }
        let config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(one_line(&e.to_string())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Reads `path` if given (defaults otherwise) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rig()?;
        IdPattern::new(&self.text.id_pattern).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.text;
        check((0.0..=1.0).contains(&t.min_confidence), "text.min_confidence must lie in [0, 1]")?;
        check(t.cloud_window > 0.0, "text.cloud_window must be positive")?;
        check(t.min_edge_length > 0.0, "text.min_edge_length must be positive")?;
        let r = &self.ransac;
        check(r.iterations > 0 && r.inlier_threshold > 0.0, "ransac iterations and threshold must be positive")?;
        check(r.min_inliers >= 3, "ransac.min_inliers must be at least 3")?;
        check((0.0..=1.0).contains(&r.min_inlier_ratio), "ransac.min_inlier_ratio must lie in [0, 1]")?;
        let a = &self.association;
        check(a.epsilon > 0.0, "association.epsilon must be positive")?;
        check(a.ltem.d_ltem > 0.0 && a.ltem.r_merge >= 0.0, "association.ltem radii must be non-negative")?;
        check(a.min_consistent >= 1, "association.min_consistent must be at least 1")?;
        let l = &self.loop_params;
        check(l.s_min >= 0.0 && l.max_loop_offset > 0.0, "loop distances must be positive")?;
        check(l.sigma_t > 0.0 && l.sigma_r > 0.0 && l.unrefined_scale > 0.0, "loop sigmas must be positive")?;
        let i = &self.icp;
        check(i.max_iterations > 0 && i.max_correspondence > 0.0 && i.max_rms > 0.0, "icp limits must be positive")?;
        check((0.0..=1.0).contains(&i.min_fitness), "icp.min_fitness must lie in [0, 1]")?;
        check(i.min_points >= 3 && i.trim_factor > 0.0, "icp.min_points must be at least 3")?;
        let g = &self.graph;
        check(g.odom_sigma_t > 0.0 && g.odom_sigma_r > 0.0, "graph odometry sigmas must be positive")?;
        check(g.initial_lambda > 0.0, "graph.initial_lambda must be positive")?;
        check(g.loop_huber.is_none_or(|h| h > 0.0), "graph.loop_huber must be positive")?;
        let e = &self.eval;
        check(e.tau > 0.0 && e.s_min >= 0.0, "eval.tau must be positive")?;
        self.sim.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check(self.sim.sensor.rate > 0.0 && self.sim.sensor.speed > 0.0, "sim rate and speed must be positive")?;
        check(self.sim.revisit >= 0.0, "sim.revisit must be non-negative")?;
        Ok(())
    }

    pub fn rig(&self) -> Result<CalibratedRig, ConfigError> {
        rig_from_calib(self.rig.intrinsics, self.rig.extrinsic).map_err(ConfigError::Invalid)
    }

    pub fn entity_params(&self) -> EntityParams {
        EntityParams {
            min_confidence: self.text.min_confidence,
            cloud_window: self.text.cloud_window,
            min_edge_length: self.text.min_edge_length,
            ransac: self.ransac,
            seed: self.text.seed,
        }
    }

    pub fn detector_params(&self) -> Result<DetectorParams, ConfigError> {
        Ok(DetectorParams {
            entity: self.entity_params(),
            id_pattern: IdPattern::new(&self.text.id_pattern).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            loop_params: self.loop_params.clone(),
            association: self.association.clone(),
            icp: self.icp,
        })
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
