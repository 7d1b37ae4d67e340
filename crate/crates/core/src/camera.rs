//! Pinhole projection and plane-constrained back-projection.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::se3::Vec3;

/// Points closer than this to the image plane are rejected by [`CameraIntrinsics::project`].
pub const DEPTH_EPSILON: f64 = 1e-6;
/// `|n . ray|` below this counts as a ray parallel to the plane.
pub const PARALLEL_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn midpoint(&self, other: &PixelPoint) -> PixelPoint {
        PixelPoint::new(0.5 * (self.u + other.u), 0.5 * (self.v + other.v))
    }
}

/// Zero-skew pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx.is_finite() && fx > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("fx must be positive"));
        }
        if !(fy.is_finite() && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("fy must be positive"));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn identity() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn project(&self, p: &Vec3) -> Result<PixelPoint, GeometryError> {
        if !(p.z > DEPTH_EPSILON) {
            return Err(GeometryError::NonPositiveDepth { depth: p.z });
        }
        Ok(PixelPoint::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// `K^-1 [u, v, 1]^T`.
    pub fn ray(&self, px: &PixelPoint) -> Vec3 {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }
}

/// Plane `n . p + d = 0` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneParams {
    normal: Vec3,
    offset: f64,
}

impl PlaneParams {
    /// Normalizes `(normal, offset)` jointly so the normal has unit length.
    pub fn new(normal: Vec3, offset: f64) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !n.is_finite() || n < 1e-12 || !offset.is_finite() {
            return Err(GeometryError::InvalidPlane);
        }
        Ok(Self { normal: normal / n, offset: offset / n })
    }

    /// Plane through `point` with the given normal.
    pub fn through(normal: Vec3, point: &Vec3) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidPlane);
        }
        let unit = normal / n;
        Ok(Self { normal: unit, offset: -unit.dot(point) })
    }

    pub fn normal(&self) -> &Vec3 {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal, offset: -self.offset }
    }
}

/// Depth `z` of the point on `plane` seen at pixel `px`.
pub fn depth_from_plane(k: &CameraIntrinsics, plane: &PlaneParams, px: &PixelPoint) -> Result<f64, GeometryError> {
    let denom = plane.normal.dot(&k.ray(px));
    if denom.abs() <= PARALLEL_EPSILON {
        return Err(GeometryError::RayParallelToPlane);
    }
    let depth = -plane.offset / denom;
    if !(depth > DEPTH_EPSILON) {
        return Err(GeometryError::NegativeDepth { depth });
    }
    Ok(depth)
}

/// Camera-frame point on `plane` seen at pixel `px`.
pub fn backproject(k: &CameraIntrinsics, plane: &PlaneParams, px: &PixelPoint) -> Result<Vec3, GeometryError> {
    let depth = depth_from_plane(k, plane, px)?;
    Ok(k.ray(px) * depth)
}
