//! From OCR detections and LiDAR points to posed text entities.
//!
//! A detection's quadrilateral selects the LiDAR points that fall on the text,
//! a RANSAC plane is fit to them, and the left/right edge midpoints are
//! back-projected onto that plane to give the entity frame. The entity is then
//! anchored into the latest LiDAR frame preceding the image.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, CameraIntrinsics, PixelPoint, PlaneParams};
use crate::error::EntityError;
use crate::icp::LocalCloud;
use crate::se3::{Pose, Vec3};

/// Text region polygon: top-left, top-right, bottom-right, bottom-left.
pub type Quad = [PixelPoint; 4];

/// Default ID pattern: building-level-section-room codes such as `S1-B4c-14`.
pub const DEFAULT_ID_PATTERN: &str = r"(?i)S\d+-B\d+[A-Z]-[A-Z0-9]+";

#[derive(Clone, Debug, PartialEq)]
pub struct TextDetection {
    pub content: String,
    pub confidence: f64,
    pub quad: Quad,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextCategory {
    Id,
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEntity {
    pub content: String,
    pub category: TextCategory,
    /// Entity pose in its anchor LiDAR frame.
    pub pose_in_anchor: Pose,
    pub anchor_frame: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedRig {
    pub intrinsics: CameraIntrinsics,
    /// Camera pose in the LiDAR frame.
    pub extrinsic_cam_in_lidar: Pose,
}

/// One odometry sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdomSample {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: Pose,
}

/// A LiDAR scan with its odometry pose, borrowed from wherever it is stored.
#[derive(Clone, Copy, Debug)]
pub struct ScanView<'a> {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub points: &'a [Vec3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 100, inlier_threshold: 0.02, min_inliers: 20, min_inlier_ratio: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub plane: PlaneParams,
    pub inliers: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntityParams {
    pub min_confidence: f64,
    /// Seconds of LiDAR history accumulated for plane fitting.
    pub cloud_window: f64,
    pub min_edge_length: f64,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl Default for EntityParams {
    fn default() -> Self {
        Self {
            min_confidence: 0.85,
            cloud_window: 1.0,
            min_edge_length: 1e-6,
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

/// Whitespace-trimmed, upper-cased content; the key used everywhere downstream.
pub fn normalize_content(raw: &str) -> String {
    raw.trim().to_uppercase()
}

/// Full-string matcher deciding whether a text is an ID text.
#[derive(Clone, Debug)]
pub struct IdPattern {
    source: String,
    regex: Regex,
}

impl IdPattern {
    pub fn new(pattern: &str) -> Result<Self, EntityError> {
        let regex = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| EntityError::InvalidPattern(e.to_string()))?;
        Ok(Self { source: pattern.to_owned(), regex })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn classify(&self, content: &str) -> TextCategory {
        if !content.is_empty() && self.regex.is_match(content) {
            TextCategory::Id
        } else {
            TextCategory::Generic
        }
    }
}

impl Default for IdPattern {
    fn default() -> Self {
        Self::new(DEFAULT_ID_PATTERN).expect("default pattern compiles")
    }
}

pub fn classify_text(content: &str, pattern: &IdPattern) -> TextCategory {
    pattern.classify(content)
}

/// Gathers the scans with `t_now - window <= t <= t_now` and expresses their
/// points in the latest of them.
pub fn accumulate_local_cloud<'a, I>(frames: I, t_now: f64, window: f64) -> Result<LocalCloud, EntityError>
where
    I: IntoIterator<Item = &'a ScanView<'a>>,
{
    let selected: Vec<&ScanView<'_>> =
        frames.into_iter().filter(|s| s.timestamp <= t_now && s.timestamp >= t_now - window).collect();
    let reference =
        selected.iter().max_by(|a, b| a.timestamp.total_cmp(&b.timestamp)).ok_or(EntityError::EmptyWindow)?;
    let to_ref = reference.pose.inverse();
    let mut points = Vec::with_capacity(selected.iter().map(|s| s.points.len()).sum());
    for scan in &selected {
        if scan.frame == reference.frame {
            points.extend_from_slice(scan.points);
        } else {
            let rel = to_ref * scan.pose;
            points.extend(scan.points.iter().map(|p| rel.transform_point(p)));
        }
    }
    Ok(LocalCloud { frame: reference.frame, points })
}

fn cross(o: &PixelPoint, a: &PixelPoint, b: &PixelPoint) -> f64 {
    (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u)
}

fn on_segment(p: &PixelPoint, a: &PixelPoint, b: &PixelPoint) -> bool {
    let scale = ((b.u - a.u).abs() + (b.v - a.v).abs()).max(1.0);
    cross(a, b, p).abs() <= 1e-9 * scale
        && p.u >= a.u.min(b.u) - 1e-12
        && p.u <= a.u.max(b.u) + 1e-12
        && p.v >= a.v.min(b.v) - 1e-12
        && p.v <= a.v.max(b.v) + 1e-12
}

/// Even-odd test with the boundary counted as inside.
pub fn point_in_polygon(p: &PixelPoint, poly: &[PixelPoint]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = &poly[i];
        let b = &poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a.v > p.v) != (b.v > p.v) {
            let u_cross = a.u + (p.v - a.v) / (b.v - a.v) * (b.u - a.u);
            if p.u < u_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Points in front of the camera whose projection falls inside `quad`.
pub fn points_in_region(cloud_in_cam: &[Vec3], k: &CameraIntrinsics, quad: &Quad) -> Vec<Vec3> {
    let (umin, umax) = quad.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.u), hi.max(q.u)));
    let (vmin, vmax) = quad.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.v), hi.max(q.v)));
    cloud_in_cam
        .iter()
        .filter(|p| {
            let Ok(px) = k.project(p) else { return false };
            px.u >= umin && px.u <= umax && px.v >= vmin && px.v <= vmax && point_in_polygon(&px, quad)
        })
        .copied()
        .collect()
}

/// Least-squares plane through `points` (centroid + smallest eigenvector).
fn least_squares_plane(points: &[Vec3]) -> Option<PlaneParams> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(idx).into_owned();
    PlaneParams::through(normal, &centroid).ok()
}

/// RANSAC plane fit with least-squares refinement on the inliers.
///
/// The returned normal points towards the origin (the camera), i.e. `d > 0`.
pub fn fit_plane_ransac(points: &[Vec3], seed: u64, params: &RansacParams) -> Result<PlaneFit, EntityError> {
    let total = points.len();
    if total < params.min_inliers.max(3) {
        return Err(EntityError::TooFewPoints { found: total, required: params.min_inliers.max(3) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, PlaneParams)> = None;
    for _ in 0..params.iterations {
        let idx = sample(&mut rng, total, 3);
        let (a, b, c) = (points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
        let normal = (b - a).cross(&(c - a));
        let scale = (b - a).norm().max((c - a).norm()).max(1e-12);
        if normal.norm() <= 1e-9 * scale * scale {
            continue;
        }
        let Ok(plane) = PlaneParams::through(normal, &a) else { continue };
        let count = points.iter().filter(|p| plane.signed_distance(p).abs() < params.inlier_threshold).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, plane));
        }
    }
    let (_, hypothesis) = best.ok_or(EntityError::DegenerateSample)?;
    let inlier_pts: Vec<Vec3> =
        points.iter().filter(|p| hypothesis.signed_distance(p).abs() < params.inlier_threshold).copied().collect();
    let refined = least_squares_plane(&inlier_pts).unwrap_or(hypothesis);
    let inliers = points.iter().filter(|p| refined.signed_distance(p).abs() < params.inlier_threshold).count();
    let ratio = inliers as f64 / total as f64;
    if inliers < params.min_inliers || ratio < params.min_inlier_ratio {
        return Err(EntityError::LowInlierRatio { ratio, required: params.min_inlier_ratio });
    }
    let plane = if refined.offset() < 0.0 { refined.flipped() } else { refined };
    Ok(PlaneFit { plane, inliers, total })
}

/// Entity pose in the camera frame: origin at the back-projected left-edge
/// midpoint, x towards the right-edge midpoint, z along the plane normal.
pub fn make_entity_pose(k: &CameraIntrinsics, plane: &PlaneParams, quad: &Quad) -> Result<Pose, EntityError> {
    make_entity_pose_with(k, plane, quad, EntityParams::default().min_edge_length)
}

pub fn make_entity_pose_with(
    k: &CameraIntrinsics,
    plane: &PlaneParams,
    quad: &Quad,
    min_edge: f64,
) -> Result<Pose, EntityError> {
    let left = quad[0].midpoint(&quad[3]);
    let right = quad[1].midpoint(&quad[2]);
    let p_l = backproject(k, plane, &left)?;
    let p_r = backproject(k, plane, &right)?;
    let edge = p_r - p_l;
    if edge.norm() < min_edge {
        return Err(EntityError::DegenerateEdge { min_length: min_edge });
    }
    let n = *plane.normal();
    // Remove the normal component so the frame is exactly orthonormal.
    let in_plane = edge - n * n.dot(&edge);
    if in_plane.norm() < min_edge {
        return Err(EntityError::DegenerateEdge { min_length: min_edge });
    }
    let x = in_plane.normalize();
    let y = n.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, n]);
    Ok(Pose::from_parts(rotation, p_l))
}

/// Index `i` of the latest odometry sample at or before `t` and the LiDAR
/// motion `T_{L_t}^{L_i}` interpolated towards sample `i + 1`.
pub fn lidar_motion_at(t: f64, odo: &[OdomSample]) -> Result<(usize, Pose), EntityError> {
    let after = odo.partition_point(|s| s.timestamp <= t);
    if after == 0 {
        return Err(EntityError::UnbracketedTimestamp { t });
    }
    let i = after - 1;
    let ti = odo[i].timestamp;
    if ti == t {
        return Ok((i, Pose::identity()));
    }
    let Some(next) = odo.get(i + 1) else {
        return Err(EntityError::UnbracketedTimestamp { t });
    };
    let s = (t - ti) / (next.timestamp - ti);
    let rel = odo[i].pose.between(&next.pose);
    Ok((i, rel.interpolate(s)?))
}

/// Anchors a camera-frame entity pose into the LiDAR frame preceding `t_image`.
/// Returns the anchor frame and `T_text^{L_i}`.
pub fn anchor_entity(
    pose_in_cam: &Pose,
    rig: &CalibratedRig,
    t_image: f64,
    odo: &[OdomSample],
) -> Result<(usize, Pose), EntityError> {
    let (i, motion) = lidar_motion_at(t_image, odo)?;
    Ok((odo[i].frame, motion * rig.extrinsic_cam_in_lidar * *pose_in_cam))
}

fn mix_seed(base: u64, frame: usize, index: usize) -> u64 {
    let mut z =
        base ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Why a detection did not become an entity.
#[derive(Clone, Debug, PartialEq)]
pub enum Rejection {
    LowConfidence,
    EmptyContent,
    Failed(EntityError),
}

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub entities: Vec<TextEntity>,
    pub rejected: Vec<(usize, Rejection)>,
}

/// Turns all detections of one image into anchored entities.
///
/// `scans` should hold at least the LiDAR scans of the last `cloud_window`
/// seconds; `odo` must bracket the image timestamp.
pub fn extract_entities(
    detections: &[TextDetection],
    t_image: f64,
    scans: &[ScanView<'_>],
    odo: &[OdomSample],
    rig: &CalibratedRig,
    pattern: &IdPattern,
    params: &EntityParams,
) -> Result<Extraction, EntityError> {
    let mut out = Extraction::default();
    let usable: Vec<(usize, &TextDetection, String)> = detections
        .iter()
        .enumerate()
        .filter_map(|(idx, det)| {
            if det.confidence < params.min_confidence {
                out.rejected.push((idx, Rejection::LowConfidence));
                return None;
            }
            let content = normalize_content(&det.content);
            if content.is_empty() {
                out.rejected.push((idx, Rejection::EmptyContent));
                return None;
            }
            Some((idx, det, content))
        })
        .collect();
    if usable.is_empty() {
        return Ok(out);
    }

    let (i, motion) = lidar_motion_at(t_image, odo)?;
    let anchor_frame = odo[i].frame;
    let cloud = accumulate_local_cloud(scans.iter(), odo[i].timestamp, params.cloud_window)?;
    let cam_in_anchor = motion * rig.extrinsic_cam_in_lidar;
    // The accumulated cloud lives in its latest scan, which is the anchor frame
    // when scans and odometry agree; otherwise re-express it.
    let cloud_to_anchor = if cloud.frame == anchor_frame {
        Pose::identity()
    } else {
        let ref_pose = scans.iter().find(|s| s.frame == cloud.frame).map(|s| s.pose).unwrap_or(odo[i].pose);
        odo[i].pose.between(&ref_pose)
    };
    let to_cam = cam_in_anchor.inverse() * cloud_to_anchor;
    let in_cam: Vec<Vec3> = cloud.points.iter().map(|p| to_cam.transform_point(p)).filter(|p| p.z > 0.0).collect();

    for (idx, det, content) in usable {
        let region = points_in_region(&in_cam, &rig.intrinsics, &det.quad);
        let seed = mix_seed(params.seed, anchor_frame, idx);
        let result = fit_plane_ransac(&region, seed, &params.ransac)
            .and_then(|fit| make_entity_pose_with(&rig.intrinsics, &fit.plane, &det.quad, params.min_edge_length));
        match result {
            Ok(pose_in_cam) => out.entities.push(TextEntity {
                category: pattern.classify(&content),
                content,
                pose_in_anchor: cam_in_anchor * pose_in_cam,
                anchor_frame,
                confidence: det.confidence,
            }),
            Err(e) => out.rejected.push((idx, Rejection::Failed(e))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn px(u: f64, v: f64) -> PixelPoint {
        PixelPoint::new(u, v)
    }

    fn frontal_points(n_side: usize, z: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                pts.push(Vec3::new(i as f64 * 0.1 - 0.5, j as f64 * 0.07 - 0.3, z));
            }
        }
        pts
    }

    #[test]
    fn classify_examples() {
        let pattern = IdPattern::default();
        assert_eq!(pattern.classify("S1-B4c-14"), TextCategory::Id);
        assert_eq!(pattern.classify("S2-B3c-AHU3"), TextCategory::Id);
        assert_eq!(pattern.classify("EXIT"), TextCategory::Generic);
        assert_eq!(pattern.classify(""), TextCategory::Generic);
        assert_eq!(pattern.classify("xS1-B4c-14"), TextCategory::Generic);
        assert!(matches!(IdPattern::new("("), Err(EntityError::InvalidPattern(_))));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_content("  exit \n"), "EXIT");
    }

    #[test]
    fn plane_fit_noiseless() {
        let pts = frontal_points(8, 5.0);
        let fit = fit_plane_ransac(&pts, 1, &RansacParams::default()).unwrap();
        assert!((fit.plane.normal() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((fit.plane.offset() - 5.0).abs() < 1e-12);
        assert!(pts.iter().all(|p| fit.plane.signed_distance(p).abs() < 1e-12));
        assert_eq!(fit.inliers, pts.len());
    }

    #[test]
    fn plane_fit_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = frontal_points(10, 5.0);
        let inliers = pts.len();
        for _ in 0..(inliers / 4) {
            // cube [-0.5,0.5]^2 x [5.1, 6.1], clear of the plane
            pts.push(Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(5.1..6.1)));
        }
        let fit = fit_plane_ransac(&pts, 11, &RansacParams::default()).unwrap();
        assert!((fit.plane.normal() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        assert!((fit.plane.offset() - 5.0).abs() < 1e-9);
        assert_eq!(fit.inliers, inliers);
    }

    #[test]
    fn plane_fit_errors() {
        let pts = frontal_points(3, 5.0);
        assert!(matches!(
            fit_plane_ransac(&pts[..9], 0, &RansacParams::default()),
            Err(EntityError::TooFewPoints { found: 9, .. })
        ));
        let line: Vec<Vec3> = (0..30).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 5.0)).collect();
        assert_eq!(fit_plane_ransac(&line, 0, &RansacParams::default()), Err(EntityError::DegenerateSample));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud: Vec<Vec3> = (0..60)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0)))
            .collect();
        assert!(matches!(
            fit_plane_ransac(&cloud, 0, &RansacParams::default()),
            Err(EntityError::LowInlierRatio { .. })
        ));
    }

    #[test]
    fn plane_fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = frontal_points(9, 4.0)
            .into_iter()
            .map(|p| p + Vec3::new(0.0, 0.0, rng.random_range(-0.005..0.005)))
            .collect();
        let a = fit_plane_ransac(&pts, 42, &RansacParams::default()).unwrap();
        let b = fit_plane_ransac(&pts, 42, &RansacParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entity_pose_on_frontal_plane() {
        let plane = PlaneParams::new(Vec3::new(0.0, 0.0, -1.0), 5.0).unwrap();
        let quad = [px(0.0, -0.01), px(0.2, -0.01), px(0.2, 0.01), px(0.0, 0.01)];
        let pose = make_entity_pose(&CameraIntrinsics::identity(), &plane, &quad).unwrap();
        let r = pose.rotation();
        assert_eq!(r.column(0).into_owned(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(r.column(1).into_owned(), Vec3::new(0.0, -1.0, 0.0));
        assert_eq!(r.column(2).into_owned(), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(*pose.translation(), Vec3::new(0.0, 0.0, 5.0));
        assert!((r.determinant() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entity_pose_degenerate_edge() {
        let plane = PlaneParams::new(Vec3::new(0.0, 0.0, -1.0), 5.0).unwrap();
        let quad = [px(1.0, 1.0); 4];
        assert!(matches!(
            make_entity_pose(&CameraIntrinsics::identity(), &plane, &quad),
            Err(EntityError::DegenerateEdge { .. })
        ));
    }

    #[test]
    fn region_selection() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let quad = [px(100.0, 100.0), px(200.0, 100.0), px(200.0, 200.0), px(100.0, 200.0)];
        let behind = vec![Vec3::new(0.0, 0.0, -1.0), Vec3::new(1.0, 1.0, -3.0)];
        assert!(points_in_region(&behind, &k, &quad).is_empty());
        // (150,150): x/z = -170/500, y/z = -90/500
        let inside = Vec3::new(-0.34 * 2.0, -0.18 * 2.0, 2.0);
        let on_edge = Vec3::new(-0.44 * 2.0, -0.18 * 2.0, 2.0); // u = 100
        let outside = Vec3::new(0.0, 0.0, 2.0);
        let got = points_in_region(&[inside, on_edge, outside], &k, &quad);
        assert_eq!(got, vec![inside, on_edge]);
    }

    #[test]
    fn polygon_test_non_convex_boundary() {
        let poly = [px(0.0, 0.0), px(4.0, 0.0), px(4.0, 4.0), px(2.0, 1.0), px(0.0, 4.0)];
        assert!(point_in_polygon(&px(1.0, 0.5), &poly));
        assert!(!point_in_polygon(&px(2.0, 3.0), &poly));
        assert!(point_in_polygon(&px(4.0, 2.0), &poly));
        assert!(point_in_polygon(&px(0.0, 0.0), &poly));
    }

    #[test]
    fn accumulate_cases() {
        let pts_a = vec![Vec3::new(1.0, 2.0, 3.0)];
        let pts_b = vec![Vec3::new(0.0, 0.0, 0.0)];
        let a = ScanView { frame: 0, timestamp: 0.0, pose: Pose::identity(), points: &pts_a };
        let single = accumulate_local_cloud([&a], 0.5, 1.0).unwrap();
        assert_eq!(single.points, pts_a);
        let b = ScanView {
            frame: 1,
            timestamp: 0.1,
            pose: Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)),
            points: &pts_b,
        };
        let both = accumulate_local_cloud([&a, &b], 0.1, 1.0).unwrap();
        assert_eq!(both.frame, 1);
        assert_eq!(both.points, vec![Vec3::new(0.0, 2.0, 3.0), Vec3::new(0.0, 0.0, 0.0)]);
        assert_eq!(accumulate_local_cloud([&b], 3.0, 1.0).unwrap_err(), EntityError::EmptyWindow);
    }

    fn odo_line() -> Vec<OdomSample> {
        (0..3)
            .map(|i| OdomSample {
                frame: i,
                timestamp: i as f64 * 0.1,
                pose: Pose::from_yaw(0.1 * i as f64, Vec3::new(i as f64, 0.0, 0.0)),
            })
            .collect()
    }

    #[test]
    fn anchor_factor_endpoints() {
        let odo = odo_line();
        let rig = CalibratedRig {
            intrinsics: CameraIntrinsics::identity(),
            extrinsic_cam_in_lidar: Pose::from_translation(Vec3::new(0.1, 0.0, 0.2)),
        };
        let ent = Pose::from_translation(Vec3::new(0.0, 0.0, 3.0));
        let (frame, at_i) = anchor_entity(&ent, &rig, 0.1, &odo).unwrap();
        assert_eq!(frame, 1);
        assert_eq!(at_i, rig.extrinsic_cam_in_lidar * ent);
        // just before the next sample: close to the full relative motion
        let (frame, near_k) = anchor_entity(&ent, &rig, 0.2 - 1e-12, &odo).unwrap();
        assert_eq!(frame, 1);
        let full = odo[1].pose.between(&odo[2].pose) * rig.extrinsic_cam_in_lidar * ent;
        assert!((near_k.translation() - full.translation()).norm() < 1e-9);
        assert!(matches!(anchor_entity(&ent, &rig, -0.5, &odo), Err(EntityError::UnbracketedTimestamp { .. })));
        assert!(matches!(anchor_entity(&ent, &rig, 0.25, &odo), Err(EntityError::UnbracketedTimestamp { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tilted_plane() -> impl Strategy<Value = (Pose, f64)> {
            (prop::array::uniform2(-0.8..0.8f64), 2.0..8.0f64).prop_map(|(tilt, depth)| {
                let wall = Pose::from_rotation_vector(Vec3::new(tilt[0], tilt[1], 0.0), Vec3::new(0.0, 0.0, depth));
                (wall, depth)
            })
        }

        proptest! {
            #[test]
            fn fitted_plane_faces_camera_and_is_deterministic((wall, _) in tilted_plane(), seed in any::<u64>()) {
                let pts: Vec<Vec3> = frontal_points(8, 0.0).iter().map(|p| wall.transform_point(p)).collect();
                let a = fit_plane_ransac(&pts, seed, &RansacParams::default()).unwrap();
                let b = fit_plane_ransac(&pts, seed, &RansacParams::default()).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a.plane.offset() > 0.0);
                prop_assert!(pts.iter().all(|p| a.plane.signed_distance(p).abs() < 1e-9));
            }

            #[test]
            fn entity_pose_is_a_rotation_facing_camera(
                (wall, _) in tilted_plane(),
                u0 in 150.0..300.0f64,
                v0 in 150.0..330.0f64,
                width in 20.0..200.0f64,
                height in 5.0..60.0f64,
            ) {
                let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
                let normal = wall.rotate(&Vec3::new(0.0, 0.0, -1.0));
                let plane = PlaneParams::through(normal, wall.translation()).unwrap();
                let quad = [px(u0, v0), px(u0 + width, v0), px(u0 + width, v0 + height), px(u0, v0 + height)];
                let pose = make_entity_pose(&k, &plane, &quad).unwrap();
                let r = pose.rotation();
                prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
                let n = r.column(2).into_owned();
                prop_assert!(n.dot(&(-pose.translation())) > 0.0);
                prop_assert!(plane.signed_distance(pose.translation()).abs() < 1e-9);
            }
        }
    }
}
