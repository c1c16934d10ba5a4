//! Pinhole camera conventions.
//!
//! Camera frame is +x right, +y down, +z forward. Pixel `(u, v)` is the
//! integer column/row index and its center sits exactly at `(u, v)`. Depth
//! is the camera-frame z coordinate. Poses are camera-to-world.

use nalgebra::{Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::raster::VectorMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image center
    /// and the given horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite())
            && self.fx > 0.0
            && self.fy > 0.0
    }

    /// Camera-frame point at pixel (`u`, `v`) with depth `depth`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        (p.z > 0.0).then(|| [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    /// Camera-frame ray through pixel (`u`, `v`) scaled so that z = 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Unit vectors pointing from each pixel's scene point back to the camera
    /// (the co-located emitter/receiver direction).
    pub fn view_directions(&self, width: usize, height: usize) -> VectorMap {
        VectorMap::from_fn(width, height, |x, y| {
            let r = -self.ray(x as f64, y as f64).normalize();
            [r.x, r.y, r.z]
        })
    }
}

/// Camera-to-world transform for a camera at `position` with rotation `rotation`.
pub fn pose_matrix(rotation: &nalgebra::Rotation3<f64>, position: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(position);
    m
}
