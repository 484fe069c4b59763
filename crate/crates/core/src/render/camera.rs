use nalgebra::{Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Pinhole camera. `pose` maps world to camera coordinates
/// (`x_cam = rotation * x_world + translation`) with +z forward, +x right and
/// +y down. Pixel `(col, row)` samples the image plane at exactly
/// `(col, row)`, so the principal point `(cx, cy)` is a pixel center when
/// integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::invalid("look_at: eye and target coincide"));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            translation: -(rotation * eye),
            rotation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera frame must be non-empty"));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).norm();
        if !(err <= 1e-9) {
            return Err(Error::invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::invalid("rotation must be proper"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Mean focal length, used for isotropic footprints.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Pixel coordinates of a camera-space point (`z > 0`).
    pub fn project_camera_point(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    /// Jacobian of the pixel coordinates with respect to the world point.
    pub fn projection_jacobian(&self, pc: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let j = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        );
        j * self.rotation
    }

    /// Unit world-space direction of the ray through pixel `(col, row)`.
    pub fn pixel_ray(&self, col: f64, row: f64) -> Vec3 {
        let d = Vec3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }
}
