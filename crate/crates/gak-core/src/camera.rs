//! Pinhole camera model.
//!
//! Extrinsics map world to camera coordinates as `p_c = R p + t`, with the
//! camera looking along +z, x to the right, y down. Pixels use the texel
//! center convention: integer (u, v) addresses the center of that pixel,
//! origin at the top left, u rightward, v downward. Depth is camera-space z.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum deviation from orthonormality accepted in `R^T R - I`.
pub const ROTATION_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

/// Result of projecting a world point. `u`, `v`, and `depth` are only
/// meaningful when `behind` is false; points with camera-space z <= 0 are
/// flagged instead of raising an error so callers can batch-project freely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub behind: bool,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    near: f64,
    far: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = c.rotation[(row, col)];
            }
        }
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Camera> {
        let rotation = Matrix3::from_row_slice(&j.r);
        let camera = Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            near: j.near,
            far: j.far,
            rotation,
            translation: Vector3::new(j.t[0], j.t[1], j.t[2]),
        };
        camera.validate()?;
        Ok(camera)
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image dimensions must be nonzero"));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::validation(format!(
                "require 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ROTATION_TOLERANCE {
            return Err(Error::validation(format!(
                "rotation is not orthonormal: max |R^T R - I| = {dev:.3e}"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn project(&self, p: Point3<f64>) -> Projected {
        let pc = self.world_to_camera(p);
        if pc.z <= 0.0 {
            return Projected { u: f64::NAN, v: f64::NAN, depth: pc.z, behind: true };
        }
        Projected {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
            depth: pc.z,
            behind: false,
        }
    }

    /// Inverse of [`Camera::project`] for depth > 0.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let pc = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        Point3::from(self.rotation.transpose() * (pc - self.translation))
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Camera placed at `eye` looking at `target`, x right / y down / z
    /// forward, `up` fixing the roll.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        Camera {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
            rotation,
            translation: -(rotation * eye.coords),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(CameraJson::from(self)).expect("camera serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(&CameraJson::from(self)).expect("camera serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Camera> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let j: CameraJson = serde_json::from_str(&body)
            .map_err(|e| Error::malformed(path, e.line(), e.to_string()))?;
        j.try_into()
    }
}

/// Saves a camera rig as a JSON array in camera order.
pub fn save_rig(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let arr: Vec<CameraJson> = cameras.iter().map(CameraJson::from).collect();
    let body = serde_json::to_string_pretty(&arr).expect("rig serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Loads a camera rig: a JSON array of camera objects.
pub fn load_rig(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let arr: Vec<CameraJson> = serde_json::from_str(&body)
        .map_err(|e| Error::malformed(path, e.line(), e.to_string()))?;
    arr.into_iter().map(Camera::try_from).collect()
}
