//! Deterministic synthetic worlds: ring corridors lined with door plates and
//! repeated signage, a LiDAR that samples world-fixed wall points, a camera
//! that "reads" texts, and drifting odometry.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::SimError;
use crate::records::{DetectionRecord, LogRecord};
use crate::se3::{Pose, Tangent, Vec3};
use crate::text_entity::{CalibratedRig, TextCategory};

/// LiDAR height above the floor (meters).
pub const SENSOR_HEIGHT: f64 = 1.2;
/// Camera frames trail LiDAR frames by this much (seconds).
pub const CAMERA_OFFSET: f64 = 0.05;

const GENERIC_TEXTS: [&str; 6] = ["EXIT", "FIRE HOSE", "POWER", "EXIT", "DANGER", "STAIRS"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Corridor,
    SemiOutdoor,
    Multifloor,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Corridor => "corridor",
            Scenario::SemiOutdoor => "semi_outdoor",
            Scenario::Multifloor => "multifloor",
        }
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor" => Ok(Scenario::Corridor),
            "semi_outdoor" => Ok(Scenario::SemiOutdoor),
            "multifloor" => Ok(Scenario::Multifloor),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    /// Centerline extent of the ring along x (meters).
    pub length: f64,
    /// Centerline extent of the ring along y (meters).
    pub width: f64,
    pub corridor_width: f64,
    pub wall_height: f64,
    /// Floors for the multifloor scenario; other scenarios have one.
    pub floors: usize,
    pub floor_spacing: f64,
    pub door_spacing: f64,
    pub text_width: f64,
    pub text_height: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            length: 30.0,
            width: 14.0,
            corridor_width: 2.5,
            wall_height: 3.0,
            floors: 2,
            floor_spacing: 4.0,
            door_spacing: 5.0,
            text_width: 0.4,
            text_height: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    /// Bottom corner where the wall starts.
    pub origin: [f64; 3],
    /// Unit horizontal direction along the wall.
    pub along: [f64; 3],
    /// Unit horizontal normal facing the walkable side.
    pub normal: [f64; 3],
    pub length: f64,
    pub height: f64,
    pub floor: usize,
}

impl Wall {
    fn origin_v(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    fn along_v(&self) -> Vec3 {
        Vec3::from(self.along)
    }

    pub fn normal_v(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    /// World point at `s` meters along the wall and `h` above its base.
    pub fn point(&self, s: f64, h: f64) -> Vec3 {
        self.origin_v() + self.along_v() * s + Vec3::z() * h
    }

    /// Whether the open segment `a -> b` passes through the wall rectangle.
    pub fn blocks(&self, a: &Vec3, b: &Vec3) -> bool {
        let n = self.normal_v();
        let o = self.origin_v();
        let da = n.dot(&(a - o));
        let db = n.dot(&(b - o));
        if da * db >= 0.0 {
            return false;
        }
        let t = da / (da - db);
        if !(1e-9..1.0 - 1e-9).contains(&t) {
            return false;
        }
        let q = a + (b - a) * t - o;
        let s = q.dot(&self.along_v());
        let h = q.z;
        (0.0..=self.length).contains(&s) && (0.0..=self.height).contains(&h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub content: String,
    pub category: TextCategory,
    pub wall: usize,
    /// Text center along the wall (meters).
    pub s: f64,
    /// Text center above the wall base (meters).
    pub h: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub scenario: Scenario,
    pub seed: u64,
    pub params: WorldParams,
    pub floors: usize,
    pub walls: Vec<Wall>,
    pub placements: Vec<Placement>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) from a key; used for world-fixed point jitter.
fn hash01(seed: u64, a: u64, b: i64, c: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(a ^ splitmix((b as u64) ^ splitmix(c as u64 ^ 0x5555))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl World {
    pub fn floor_z(&self, floor: usize) -> f64 {
        floor as f64 * self.params.floor_spacing
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.params.length + self.params.width)
    }

    fn corners(&self) -> [Vec3; 4] {
        let (l, w) = (self.params.length, self.params.width);
        [Vec3::new(0.0, 0.0, 0.0), Vec3::new(l, 0.0, 0.0), Vec3::new(l, w, 0.0), Vec3::new(0.0, w, 0.0)]
    }

    fn side_lengths(&self) -> [f64; 4] {
        let (l, w) = (self.params.length, self.params.width);
        [l, w, l, w]
    }

    /// Side index and offset along it for an arc position on the centerline.
    fn arc_to_side(&self, arc: f64) -> (usize, f64) {
        let mut a = arc.rem_euclid(self.perimeter());
        for (i, len) in self.side_lengths().into_iter().enumerate() {
            if a < len {
                return (i, a);
            }
            a -= len;
        }
        (3, self.side_lengths()[3])
    }

    /// Ground-level centerline point at an arc position on a floor.
    pub fn ring_point(&self, arc: f64, floor: usize) -> Vec3 {
        let (side, off) = self.arc_to_side(arc);
        let c = self.corners();
        let d = (c[(side + 1) % 4] - c[side]).normalize();
        c[side] + d * off + Vec3::z() * self.floor_z(floor)
    }

    /// Arc positions of the ring corners.
    fn corner_arcs(&self) -> [f64; 4] {
        let s = self.side_lengths();
        [0.0, s[0], s[0] + s[1], s[0] + s[1] + s[2]]
    }

    /// Whether a ground point lies in the corridor of some floor.
    pub fn is_walkable(&self, p: &Vec3) -> bool {
        let half = 0.5 * self.params.corridor_width;
        let (l, w) = (self.params.length, self.params.width);
        let floor_ok = (0..self.floors).any(|f| (p.z - self.floor_z(f)).abs() < 1e-6);
        let in_outer = p.x > -half && p.x < l + half && p.y > -half && p.y < w + half;
        let in_inner = p.x > half && p.x < l - half && p.y > half && p.y < w - half;
        floor_ok && in_outer && !in_inner
    }

    /// Text frame: reading direction, up, and the wall normal.
    pub fn placement_axes(&self, i: usize) -> (Vec3, Vec3, Vec3) {
        let wall = &self.walls[self.placements[i].wall];
        let n = wall.normal_v();
        (Vec3::z().cross(&n), Vec3::z(), n)
    }

    pub fn placement_center(&self, i: usize) -> Vec3 {
        let p = &self.placements[i];
        self.walls[p.wall].point(p.s, p.h)
    }

    /// Top-left, top-right, bottom-right, bottom-left as seen facing the wall.
    pub fn placement_corners(&self, i: usize) -> [Vec3; 4] {
        let p = &self.placements[i];
        let c = self.placement_center(i);
        let (x, up, _) = self.placement_axes(i);
        let (hw, hh) = (0.5 * p.width, 0.5 * p.height);
        [c - x * hw + up * hh, c + x * hw + up * hh, c + x * hw - up * hh, c - x * hw - up * hh]
    }

    /// World pose of a text: origin at the left-edge midpoint, columns
    /// `[reading direction, up, normal]`.
    pub fn placement_pose(&self, i: usize) -> Pose {
        let (x, up, n) = self.placement_axes(i);
        let origin = self.placement_center(i) - x * (0.5 * self.placements[i].width);
        Pose::from_parts(Matrix3::from_columns(&[x, up, n]), origin)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }

    /// Placements whose center is not inside their wall with the text fully on it.
    pub fn extent_violations(&self) -> Vec<usize> {
        self.placements
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let w = &self.walls[p.wall];
                p.s - 0.5 * p.width < 0.0
                    || p.s + 0.5 * p.width > w.length
                    || p.h - 0.5 * p.height < 0.0
                    || p.h + 0.5 * p.height > w.height
            })
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn build_world(scenario: Scenario, seed: u64) -> World {
    build_world_with(scenario, &WorldParams::default(), seed).expect("default parameters are valid")
}

pub fn build_world_with(scenario: Scenario, params: &WorldParams, seed: u64) -> Result<World, SimError> {
    let half = 0.5 * params.corridor_width;
    if params.length <= 4.0 * half + 2.0 || params.width <= 4.0 * half + 2.0 {
        return Err(SimError::InvalidParameter("ring too small for the corridor width".into()));
    }
    if params.floors == 0 || params.wall_height <= 0.0 || params.door_spacing <= 0.0 {
        return Err(SimError::InvalidParameter("floors, wall height and door spacing must be positive".into()));
    }
    let floors = if scenario == Scenario::Multifloor { params.floors } else { 1 };
    let mut world = World { scenario, seed, params: params.clone(), floors, walls: Vec::new(), placements: Vec::new() };
    let corners = world.corners();
    let lengths = world.side_lengths();

    // walls[floor][side] = (inner, outer)
    let mut wall_index = vec![[(None, None); 4]; floors];
    for (f, slots) in wall_index.iter_mut().enumerate() {
        let z = world.floor_z(f);
        for side in 0..4 {
            let d = (corners[(side + 1) % 4] - corners[side]).normalize();
            let left = Vec3::z().cross(&d);
            let base = corners[side] + Vec3::z() * z;
            let inner = Wall {
                origin: (base + left * half + d * half).into(),
                along: d.into(),
                normal: (-left).into(),
                length: lengths[side] - 2.0 * half,
                height: params.wall_height,
                floor: f,
            };
            slots[side].0 = Some(world.walls.len());
            world.walls.push(inner);
            // the semi-outdoor ring is open along its far long side
            if scenario == Scenario::SemiOutdoor && side == 2 {
                continue;
            }
            let outer = Wall {
                origin: (base - left * half - d * half).into(),
                along: d.into(),
                normal: left.into(),
                length: lengths[side] + 2.0 * half,
                height: params.wall_height,
                floor: f,
            };
            slots[side].1 = Some(world.walls.len());
            world.walls.push(outer);
        }
    }

    // Layout shared by every floor: (side, offset along side, inner?, height, kind)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 3.0;
    let perimeter = world.perimeter();
    let mut generic_slots = Vec::new();
    for (j, text) in GENERIC_TEXTS.iter().enumerate() {
        let arc = (j as f64 + 0.5) * perimeter / GENERIC_TEXTS.len() as f64 + rng.random_range(-1.0..1.0);
        let (side, off) = world.arc_to_side(arc);
        let off = off.clamp(margin, lengths[side] - margin);
        let h = rng.random_range(1.4..1.7);
        generic_slots.push((side, off, j % 2 == 0, h, *text));
    }
    let mut door_slots = Vec::new();
    for (side, &side_length) in lengths.iter().enumerate() {
        let mut off = margin;
        let mut k = 0;
        while off <= side_length - margin {
            let inner = k % 2 == 0;
            let jitter = rng.random_range(-0.5..0.5);
            let pos = off + jitter;
            let clash = generic_slots.iter().any(|g| g.0 == side && g.2 == inner && (g.1 - pos).abs() < 1.0);
            let h = rng.random_range(1.4..1.7);
            if !clash {
                door_slots.push((side, pos, inner, h));
            }
            off += params.door_spacing;
            k += 1;
        }
    }

    for (f, slots) in wall_index.iter().enumerate() {
        let to_wall = |side: usize, off: f64, inner: bool| -> Option<(usize, f64)> {
            let (wi, wo) = slots[side];
            if inner {
                wi.map(|w| (w, off - half))
            } else {
                wo.map(|w| (w, off + half))
            }
        };
        let mut room = [10usize; 4];
        for &(side, off, inner, h) in &door_slots {
            let number = room[side];
            room[side] += 1;
            if let Some((wall, s)) = to_wall(side, off, inner) {
                let section = (b'A' + side as u8) as char;
                world.placements.push(Placement {
                    content: format!("S1-B{}{}-{}", f + 1, section, number),
                    category: TextCategory::Id,
                    wall,
                    s,
                    h,
                    width: params.text_width,
                    height: params.text_height,
                });
            }
        }
        for &(side, off, inner, h, text) in &generic_slots {
            if let Some((wall, s)) = to_wall(side, off, inner) {
                world.placements.push(Placement {
                    content: text.to_string(),
                    category: TextCategory::Generic,
                    wall,
                    s,
                    h,
                    width: params.text_width,
                    height: params.text_height,
                });
            }
        }
    }
    Ok(world)
}

/// Ground-level waypoints: on each floor one full lap plus a revisit of
/// `revisit` meters, then a vertical transfer to the next floor.
pub fn default_route(world: &World, revisit: f64) -> Vec<Vec3> {
    let perimeter = world.perimeter();
    let corner_arcs = world.corner_arcs();
    let mut out = Vec::new();
    let mut start = 0.0;
    for f in 0..world.floors {
        let end = start + perimeter + revisit;
        out.push(world.ring_point(start, f));
        let mut laps = (start / perimeter).floor() * perimeter;
        while laps < end {
            for &c in &corner_arcs {
                let arc = laps + c;
                if arc > start + 1e-9 && arc < end - 1e-9 {
                    out.push(world.ring_point(arc, f));
                }
            }
            laps += perimeter;
        }
        out.push(world.ring_point(end, f));
        start = end.rem_euclid(perimeter);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-step odometry tangent std `[x, y, z, rx, ry, rz]` (m, rad).
    pub odom_sigma: [f64; 6],
    pub detect_prob: f64,
    pub max_range: f64,
    pub max_incidence: f64,
    pub misread_prob: f64,
    /// Pixel std of quad corners.
    pub bbox_jitter: f64,
    /// Per-coordinate std of LiDAR points (meters).
    pub cloud_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            odom_sigma: [0.005, 0.005, 0.005, 0.0005, 0.0005, 0.0005],
            detect_prob: 0.8,
            max_range: 6.0,
            max_incidence: 1.35,
            misread_prob: 0.05,
            bbox_jitter: 1.0,
            cloud_sigma: 0.01,
        }
    }
}

impl NoiseModel {
    /// All noise off; detection still depends on range and incidence.
    pub fn noiseless() -> Self {
        Self { odom_sigma: [0.0; 6], misread_prob: 0.0, bbox_jitter: 0.0, cloud_sigma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !prob(self.detect_prob) || !prob(self.misread_prob) {
            return Err(SimError::InvalidParameter("probabilities must lie in [0, 1]".into()));
        }
        if self.odom_sigma.iter().any(|s| !(*s >= 0.0)) || !(self.bbox_jitter >= 0.0) || !(self.cloud_sigma >= 0.0) {
            return Err(SimError::InvalidParameter("sigmas must be non-negative".into()));
        }
        if !(self.max_range > 0.0) || !(self.max_incidence > 0.0) {
            return Err(SimError::InvalidParameter("max_range and max_incidence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorParams {
    /// LiDAR and camera rate (Hz).
    pub rate: f64,
    /// Walking speed (m/s).
    pub speed: f64,
    pub lidar_range: f64,
    /// Half vertical field of view of the LiDAR (rad).
    pub lidar_vertical_fov: f64,
    /// World-fixed wall points per square meter.
    pub wall_density: f64,
    /// Grid spacing of points on sign panels (meters).
    pub panel_spacing: f64,
    /// Panel margin around each text (meters).
    pub panel_margin: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Corner blend distance for heading changes (meters).
    pub turn_blend: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            rate: 10.0,
            speed: 1.5,
            lidar_range: 8.0,
            lidar_vertical_fov: 35f64.to_radians(),
            wall_density: 10.0,
            panel_spacing: 0.04,
            panel_margin: 0.05,
            image_width: 640.0,
            image_height: 480.0,
            turn_blend: 1.0,
        }
    }
}

/// Default rig: forward-looking camera slightly ahead of and below the LiDAR.
pub fn default_rig() -> CalibratedRig {
    let rotation = Matrix3::from_columns(&[-Vec3::y(), -Vec3::z(), Vec3::x()]);
    CalibratedRig {
        intrinsics: CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0).expect("valid intrinsics"),
        extrinsic_cam_in_lidar: Pose::from_parts(rotation, Vec3::new(0.1, 0.0, -0.1)),
    }
}

/// Confusions that never turn one valid room code into another.
fn confuse(c: char) -> Option<char> {
    Some(match c {
        '0' => 'O',
        'O' => '0',
        '1' => 'I',
        'I' => '1',
        '5' => 'S',
        'S' => '5',
        '8' => 'B',
        'B' => '8',
        'E' => 'F',
        'T' => '7',
        '2' => 'Z',
        'D' => '0',
        _ => return None,
    })
}

fn misread(content: &str, pick: f64) -> String {
    let chars: Vec<char> = content.chars().collect();
    let spots: Vec<usize> = (0..chars.len()).filter(|&i| confuse(chars[i]).is_some()).collect();
    if spots.is_empty() {
        return content.to_string();
    }
    let k = spots[((pick * spots.len() as f64) as usize).min(spots.len() - 1)];
    chars.iter().enumerate().map(|(i, &c)| if i == k { confuse(c).unwrap() } else { c }).collect()
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Ground-truth sensor poses sampled along the waypoint polyline.
pub fn sample_route(waypoints: &[Vec3], sensor: &SensorParams) -> Vec<Pose> {
    if waypoints.len() < 2 {
        return waypoints.iter().map(|p| Pose::from_translation(p + Vec3::z() * SENSOR_HEIGHT)).collect();
    }
    let seg: Vec<(Vec3, Vec3, f64)> = waypoints.windows(2).map(|w| (w[0], w[1], (w[1] - w[0]).norm())).collect();
    let mut cum = vec![0.0];
    for s in &seg {
        cum.push(cum.last().unwrap() + s.2);
    }
    let total = *cum.last().unwrap();
    // heading per segment; vertical segments inherit the previous one
    let mut headings = Vec::with_capacity(seg.len());
    let mut last = seg
        .iter()
        .find(|s| (s.1 - s.0).xy().norm() > 1e-9)
        .map(|s| (s.1.y - s.0.y).atan2(s.1.x - s.0.x))
        .unwrap_or(0.0);
    for s in &seg {
        let d = s.1 - s.0;
        if d.xy().norm() > 1e-9 {
            last = d.y.atan2(d.x);
        }
        headings.push((last, d.xy().norm() > 1e-9));
    }

    let step = sensor.speed / sensor.rate;
    let n = (total / step).floor() as usize + 1;
    let blend = sensor.turn_blend;
    (0..n)
        .map(|k| {
            let s = k as f64 * step;
            let i = cum.partition_point(|&c| c <= s).saturating_sub(1).min(seg.len() - 1);
            let (a, b, len) = seg[i];
            let u = if len > 0.0 { (s - cum[i]) / len } else { 0.0 };
            let pos = a + (b - a) * u;
            let mut yaw = headings[i].0;
            // blend into the next heading near the end of a horizontal segment
            if i + 1 < seg.len() && headings[i].1 && headings[i + 1].1 && cum[i + 1] - s < blend {
                let delta = wrap_angle(headings[i + 1].0 - headings[i].0);
                yaw += delta * 0.5 * smoothstep((s - (cum[i + 1] - blend)) / (2.0 * blend));
            }
            // and finish the blend at the start of the next one
            if i > 0 && headings[i].1 && headings[i - 1].1 && s - cum[i] < blend {
                let delta = wrap_angle(headings[i].0 - headings[i - 1].0);
                yaw = headings[i - 1].0 + delta * smoothstep((s - cum[i] + blend) / (2.0 * blend));
            }
            Pose::from_yaw(wrap_angle(yaw), pos + Vec3::z() * SENSOR_HEIGHT)
        })
        .collect()
}

/// Simulation result: the log records (calib, odom, cloud, texts) and the
/// ground-truth poses per LiDAR frame.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub records: Vec<LogRecord>,
    pub ground_truth: Vec<Pose>,
    pub odometry: Vec<Pose>,
    pub timestamps: Vec<f64>,
    /// Number of emitted detections whose content was misread.
    pub misreads: usize,
}

impl SimOutput {
    pub fn gt_records(&self) -> Vec<LogRecord> {
        self.ground_truth.iter().enumerate().map(|(frame, pose)| LogRecord::Gt { frame, pose: *pose }).collect()
    }
}

fn floor_of(world: &World, z: f64) -> usize {
    let f = ((z - SENSOR_HEIGHT) / world.params.floor_spacing).round();
    (f.max(0.0) as usize).min(world.floors - 1)
}

/// Ground-truth camera pose at the midpoint between frames `k` and `k + 1`.
pub fn camera_pose_between(gt_k: &Pose, gt_next: &Pose, rig: &CalibratedRig, s: f64) -> Pose {
    let rel = gt_k.between(gt_next).interpolate(s).expect("interpolation factor in range");
    gt_k * &rel * rig.extrinsic_cam_in_lidar
}

struct Scanner<'a> {
    world: &'a World,
    sensor: &'a SensorParams,
}

impl Scanner<'_> {
    fn visible(&self, sensor_pose: &Pose, inv: &Pose, p: &Vec3, own_wall: usize, floor: usize) -> bool {
        let q = inv.transform_point(p);
        let range = q.norm();
        if q.x <= 0.0 || range > self.sensor.lidar_range {
            return false;
        }
        if q.z.atan2(q.xy().norm()).abs() > self.sensor.lidar_vertical_fov {
            return false;
        }
        let eye = sensor_pose.translation();
        !self.world.walls.iter().enumerate().any(|(wi, w)| wi != own_wall && w.floor == floor && w.blocks(eye, p))
    }

    /// World-fixed points visible from `pose`, in the sensor frame (noise-free).
    fn scan(&self, pose: &Pose) -> Vec<Vec3> {
        let world = self.world;
        let floor = floor_of(world, pose.translation().z);
        let inv = pose.inverse();
        let eye = *pose.translation();
        let spacing = 1.0 / self.sensor.wall_density.sqrt();
        let range = self.sensor.lidar_range;
        let mut out = Vec::new();
        for (wi, wall) in world.walls.iter().enumerate() {
            if wall.floor != floor {
                continue;
            }
            let rel = eye - wall.origin_v();
            let dn = rel.dot(&wall.normal_v());
            if dn <= 0.0 || dn > range {
                continue;
            }
            let half = (range * range - dn * dn).sqrt();
            let s0 = rel.dot(&wall.along_v());
            let (lo, hi) = ((s0 - half).max(0.0), (s0 + half).min(wall.length));
            if lo >= hi {
                continue;
            }
            let (a0, a1) = ((lo / spacing).floor() as i64, (hi / spacing).ceil() as i64);
            let rows = (wall.height / spacing).ceil() as i64;
            for a in a0..a1 {
                for b in 0..rows {
                    let s = (a as f64 + hash01(world.seed, wi as u64, a, b)) * spacing;
                    let h = (b as f64 + hash01(world.seed ^ 0xABCD, wi as u64, a, b)) * spacing;
                    if s < 0.0 || s > wall.length || h > wall.height {
                        continue;
                    }
                    let p = wall.point(s, h);
                    if self.visible(pose, &inv, &p, wi, floor) {
                        out.push(inv.transform_point(&p));
                    }
                }
            }
        }
        // sign panels: dense flush patches around each text
        let m = self.sensor.panel_margin;
        let step = self.sensor.panel_spacing;
        for (pi, pl) in world.placements.iter().enumerate() {
            let wall = &world.walls[pl.wall];
            if wall.floor != floor || (world.placement_center(pi) - eye).norm() > range + pl.width {
                continue;
            }
            let (x, up, _) = world.placement_axes(pi);
            let c = world.placement_center(pi);
            let (w, h) = (pl.width + 2.0 * m, pl.height + 2.0 * m);
            let (nu, nv) = ((w / step).round() as i64, (h / step).round() as i64);
            for a in 0..=nu {
                for b in 0..=nv {
                    let p = c + x * (a as f64 * step - 0.5 * w) + up * (b as f64 * step - 0.5 * h);
                    if self.visible(pose, &inv, &p, pl.wall, floor) {
                        out.push(inv.transform_point(&p));
                    }
                }
            }
        }
        out
    }
}

struct Camera<'a> {
    world: &'a World,
    rig: &'a CalibratedRig,
    noise: &'a NoiseModel,
    sensor: &'a SensorParams,
}

impl Camera<'_> {
    /// Detections for one image. Every in-view placement consumes the same
    /// number of random draws whatever the outcome.
    fn detect(
        &self,
        cam_pose: &Pose,
        floor: usize,
        rng: &mut ChaCha8Rng,
        misreads: &mut usize,
    ) -> Vec<DetectionRecord> {
        let world = self.world;
        let eye = *cam_pose.translation();
        let inv = cam_pose.inverse();
        let k = &self.rig.intrinsics;
        let mut out = Vec::new();
        for (i, pl) in world.placements.iter().enumerate() {
            let wall = &world.walls[pl.wall];
            if wall.floor != floor {
                continue;
            }
            let c = world.placement_center(i);
            let v = eye - c;
            let r = v.norm();
            let n = wall.normal_v();
            if r > self.noise.max_range || n.dot(&v) <= 0.0 {
                continue;
            }
            let incidence = (n.dot(&v) / r).clamp(-1.0, 1.0).acos();
            if incidence > self.noise.max_incidence {
                continue;
            }
            let mut quad = [[0.0; 2]; 4];
            let mut in_view = true;
            for (q, corner) in quad.iter_mut().zip(world.placement_corners(i)) {
                match k.project(&inv.transform_point(&corner)) {
                    Ok(px)
                        if (0.0..=self.sensor.image_width).contains(&px.u)
                            && (0.0..=self.sensor.image_height).contains(&px.v) =>
                    {
                        *q = [px.u, px.v]
                    }
                    _ => in_view = false,
                }
            }
            if !in_view {
                continue;
            }
            if world.walls.iter().enumerate().any(|(wi, w)| wi != pl.wall && w.floor == floor && w.blocks(&eye, &c)) {
                continue;
            }
            let detect_u: f64 = rng.random();
            let misread_u: f64 = rng.random();
            let pick_u: f64 = rng.random();
            let jitter: [f64; 8] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let conf_noise: f64 = StandardNormal.sample(rng);
            let p = self.noise.detect_prob * (1.0 - r / self.noise.max_range).clamp(0.0, 1.0) * incidence.cos();
            if detect_u >= p {
                continue;
            }
            for (j, q) in quad.iter_mut().enumerate() {
                q[0] += jitter[2 * j] * self.noise.bbox_jitter;
                q[1] += jitter[2 * j + 1] * self.noise.bbox_jitter;
            }
            let text = if misread_u < self.noise.misread_prob {
                *misreads += 1;
                misread(&pl.content, pick_u)
            } else {
                pl.content.clone()
            };
            let conf = (1.0 - 0.1 * r / self.noise.max_range - 0.02 * conf_noise.abs()).clamp(0.0, 1.0);
            out.push(DetectionRecord { text, conf, quad });
        }
        out
    }
}

/// Odometry that follows the ground-truth increments, each perturbed by a
/// tangent-space Gaussian. The first pose is exact.
pub fn drift_odometry(gt: &[Pose], sigma: &[f64; 6], seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0D0D));
    let mut odometry: Vec<Pose> = Vec::with_capacity(gt.len());
    for (k, pose) in gt.iter().enumerate() {
        if k == 0 {
            odometry.push(*pose);
            continue;
        }
        // always draw so streams stay aligned across sigma settings
        let noise_vec = Tangent::from_fn(|i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sigma[i]
        });
        let next = odometry[k - 1] * gt[k - 1].between(pose) * Pose::exp(&noise_vec);
        odometry.push(next.orthonormalized());
    }
    odometry
}

pub fn simulate(
    world: &World,
    route: &[Vec3],
    rig: &CalibratedRig,
    noise: &NoiseModel,
    sensor: &SensorParams,
    seed: u64,
) -> Result<SimOutput, SimError> {
    noise.validate()?;
    if !(sensor.rate > 0.0) || !(sensor.speed > 0.0) {
        return Err(SimError::InvalidParameter("rate and speed must be positive".into()));
    }
    if let Some(index) = route.iter().position(|p| !world.is_walkable(p)) {
        return Err(SimError::WaypointOutsideWorld { index });
    }
    let gt = sample_route(route, sensor);
    let timestamps: Vec<f64> = (0..gt.len()).map(|k| k as f64 / sensor.rate).collect();

    let odometry = drift_odometry(&gt, &noise.odom_sigma, seed);
    let mut cloud_rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xC10D));
    let mut det_rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7E77));

    let scanner = Scanner { world, sensor };
    let camera = Camera { world, rig, noise, sensor };
    let mut records = vec![LogRecord::calib(rig)];
    let mut misreads = 0;
    for k in 0..gt.len() {
        records.push(LogRecord::Odom { t: timestamps[k], frame: k, pose: odometry[k] });
        let points: Vec<Vec3> = scanner
            .scan(&gt[k])
            .into_iter()
            .map(|p| {
                let n = Vec3::from_fn(|_, _| StandardNormal.sample(&mut cloud_rng));
                p + n * noise.cloud_sigma
            })
            .collect();
        records.push(LogRecord::cloud(k, &points));
        if k + 1 < gt.len() {
            let frac = CAMERA_OFFSET * sensor.rate;
            let cam = camera_pose_between(&gt[k], &gt[k + 1], rig, frac);
            let floor = floor_of(world, (gt[k].translation().z + gt[k + 1].translation().z) * 0.5);
            let detections = camera.detect(&cam, floor, &mut det_rng, &mut misreads);
            if !detections.is_empty() {
                records.push(LogRecord::Texts { t: timestamps[k] + CAMERA_OFFSET, detections });
            }
        }
    }
    Ok(SimOutput { records, ground_truth: gt, odometry, timestamps, misreads })
}

/// Scenario presets as used by the command line and the tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub scenario: Scenario,
    pub seed: u64,
    /// Revisit length after each lap (meters).
    pub revisit: f64,
    pub world: WorldParams,
    pub noise: NoiseModel,
    pub sensor: SensorParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            scenario: Scenario::Multifloor,
            seed: 0,
            revisit: 20.0,
            world: WorldParams::default(),
            noise: NoiseModel::default(),
            sensor: SensorParams::default(),
        }
    }
}

/// Builds the world and default route, then simulates.
pub fn run_scenario(params: &SimParams, rig: &CalibratedRig) -> Result<(World, SimOutput), SimError> {
    let world = build_world_with(params.scenario, &params.world, params.seed)?;
    let route = default_route(&world, params.revisit);
    let out = simulate(&world, &route, rig, &params.noise, &params.sensor, params.seed)?;
    Ok((world, out))
}
