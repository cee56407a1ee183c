use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{is_rotation, Mat3, Vec3};

/// Pinhole camera in the OpenCV convention: x right, y down, z forward.
/// Pixel `(u, v)` covers `[u, u+1) × [v, v+1)` with its center at `+0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    /// Row-major 4×4 world-to-camera matrix.
    w: [f64; 16],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near: f64,
}

impl Camera {
    pub const DEFAULT_NEAR: f64 = 0.01;

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(Error::InvalidArgument("near plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image has zero size".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with horizontal field of view
    /// `fov_x` (radians) and square pixels.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let f = target - eye;
        if f.norm() < 1e-12 {
            return Err(Error::Degenerate("eye coincides with target".into()));
        }
        let f = f.normalize();
        let r = f.cross(&up);
        if r.norm() < 1e-12 {
            return Err(Error::Degenerate("view direction parallel to up".into()));
        }
        let r = r.normalize();
        let d = f.cross(&r);
        let rotation = Mat3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let cam = Self {
            rotation,
            translation: -(rotation * eye),
            fx: focal,
            fy: focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            near: Self::DEFAULT_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (no culling).
    pub fn project_camera_point(&self, t: &Vec3) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }

    pub fn world_to_camera_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Same intrinsics and pose at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = self.world_to_camera_matrix();
        let mut w = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                w[4 * r + c] = m[(r, c)];
            }
        }
        let file = CameraFile {
            w,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CameraFile = serde_json::from_str(s)?;
        let w = f.w;
        if w[12] != 0.0 || w[13] != 0.0 || w[14] != 0.0 || w[15] != 1.0 {
            return Err(Error::Format("bottom row of W must be (0, 0, 0, 1)".into()));
        }
        let cam = Self {
            rotation: Mat3::new(w[0], w[1], w[2], w[4], w[5], w[6], w[8], w[9], w[10]),
            translation: Vec3::new(w[3], w[7], w[11]),
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            width: f.width,
            height: f.height,
            near: f.near,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
