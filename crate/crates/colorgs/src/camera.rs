//! Pinhole camera model and the projection of 3D Gaussians to screen-space
//! means and covariances (local affine EWA approximation).

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Screen-space low-pass dilation in pixel^2, guaranteeing a minimum splat
/// footprint so sub-pixel Gaussians keep usable gradients.
pub const COV2D_DILATION: f64 = 0.3;

/// Points with camera-space z at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Identity-pose camera, convenient for synthetic scenes.
    pub fn facing_z(fx: f64, fy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(0.0 < self.cx && self.cx < self.width as f64)
            || !(0.0 < self.cy && self.cy < self.height as f64)
        {
            return Err(Error::Config(
                "camera principal point must lie inside the image".into(),
            ));
        }
        let residual = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if residual > 1e-6 {
            return Err(Error::Config(format!(
                "world-to-camera rotation is not orthonormal (residual {residual:.2e})"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, x_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Optical center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit direction from the optical center towards a world point.
    pub fn view_direction(&self, x_world: Vector3<f64>) -> Vector3<f64> {
        (x_world - self.position()).normalize()
    }
}

/// Projection of a world point: pixel coordinates and camera-space depth,
/// or `None` when the point sits behind the near plane (culled, not an
/// error).
pub fn project_point(camera: &CameraModel, x_world: Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let cam = camera.world_to_camera(x_world);
    if cam.z <= NEAR_PLANE {
        return None;
    }
    let pixel = Vector2::new(
        camera.fx * cam.x / cam.z + camera.cx,
        camera.fy * cam.y / cam.z + camera.cy,
    );
    Some((pixel, cam.z))
}

/// Inverse of `project_point` at a known depth.
pub fn back_project(camera: &CameraModel, pixel: Vector2<f64>, depth: f64) -> Vector3<f64> {
    let cam = Vector3::new(
        (pixel.x - camera.cx) * depth / camera.fx,
        (pixel.y - camera.cy) * depth / camera.fy,
        depth,
    );
    camera.rotation.transpose() * (cam - camera.translation)
}

/// Pinhole Jacobian at a camera-space point.
pub fn projection_jacobian(camera: &CameraModel, cam_point: Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (cam_point.x, cam_point.y, cam_point.z);
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    )
}

/// Screen-space covariance J W Sigma W^T J^T + dilation * I. The caller is
/// responsible for culling first.
pub fn project_covariance(
    camera: &CameraModel,
    mu_world: Vector3<f64>,
    cov_world: &Matrix3<f64>,
) -> Matrix2<f64> {
    let cam_point = camera.world_to_camera(mu_world);
    let j = projection_jacobian(camera, cam_point);
    let cov_cam = camera.rotation * cov_world * camera.rotation.transpose();
    j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_DILATION
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major 4x4 world-to-camera transform.
    w2c: [[f64; 4]; 4],
}

impl CameraRecord {
    fn to_model(&self) -> Result<CameraModel> {
        let m = &self.w2c;
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            rotation,
            translation,
        )
    }

    fn from_model(cam: &CameraModel) -> Self {
        let r = &cam.rotation;
        let t = &cam.translation;
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            w2c: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }
}

/// Load `cameras.json`: either a single camera object or an array of them.
pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let records: Vec<CameraRecord> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|one: CameraRecord| vec![one])
    }
    .map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if records.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: "cameras.json contains no cameras".into(),
        });
    }
    records.iter().map(CameraRecord::to_model).collect()
}

pub fn save_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from_model).collect();
    let text = if records.len() == 1 {
        serde_json::to_string_pretty(&records[0])?
    } else {
        serde_json::to_string_pretty(&records)?
    };
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn simple_camera() -> CameraModel {
        CameraModel::facing_z(100.0, 100.0, 100, 100)
    }

    #[test]
    fn on_axis_and_offset_projection() {
        let cam = simple_camera();
        let (px, depth) = project_point(&cam, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(50.0, 50.0));
        assert_eq!(depth, 1.0);

        let (px, depth) = project_point(&cam, Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(60.0, 50.0), epsilon = 1e-12);
        assert_eq!(depth, 1.0);
    }

    #[test]
    fn rotated_camera_matches_hand_composed_transform() {
        // Camera rotated 90 degrees about y, translated; oracle composes the
        // 4x4 transform by hand and applies the pinhole formula directly.
        let rotation = Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let translation = Vector3::new(0.2, -0.1, 2.0);
        let cam = CameraModel::new(80.0, 90.0, 32.0, 24.0, 64, 48, rotation, translation).unwrap();

        let x = Vector3::new(1.5, 0.4, -0.3);
        let cam_pt = rotation * x + translation;
        let oracle = Vector2::new(
            80.0 * cam_pt.x / cam_pt.z + 32.0,
            90.0 * cam_pt.y / cam_pt.z + 24.0,
        );
        let (px, depth) = project_point(&cam, x).unwrap();
        assert_relative_eq!(px, oracle, epsilon = 1e-12);
        assert_relative_eq!(depth, cam_pt.z, epsilon = 1e-12);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = simple_camera();
        assert!(project_point(&cam, Vector3::new(0.0, 0.0, 0.005)).is_none());
        assert!(project_point(&cam, Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn back_projection_roundtrip() {
        let rotation = Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let cam =
            CameraModel::new(80.0, 90.0, 32.0, 24.0, 64, 48, rotation, Vector3::new(0.2, -0.1, 2.0))
                .unwrap();
        let x = Vector3::new(1.1, -0.4, 0.2);
        let (px, depth) = project_point(&cam, x).unwrap();
        let back = back_project(&cam, px, depth);
        assert!((back - x).norm() < 1e-9);
    }

    #[test]
    fn isotropic_on_axis_covariance_closed_form() {
        let cam = simple_camera();
        let s = 0.02;
        let z = 2.0;
        let cov = Matrix3::identity() * (s * s);
        let projected = project_covariance(&cam, Vector3::new(0.0, 0.0, z), &cov);
        let expected = (100.0 * s / z).powi(2);
        assert_relative_eq!(projected[(0, 0)], expected + COV2D_DILATION, epsilon = 1e-12);
        assert_relative_eq!(projected[(1, 1)], expected + COV2D_DILATION, epsilon = 1e-12);
        assert_relative_eq!(projected[(0, 1)], 0.0, epsilon = 1e-12);

        // Doubling the depth scales the pre-dilation covariance by 1/4.
        let far = project_covariance(&cam, Vector3::new(0.0, 0.0, 2.0 * z), &cov);
        assert_relative_eq!(
            far[(0, 0)] - COV2D_DILATION,
            (projected[(0, 0)] - COV2D_DILATION) / 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_matches_monte_carlo_projection() {
        // Sampling oracle: draw from the 3D Gaussian, project every sample
        // through the exact pinhole map, and fit the 2D covariance.
        let cam = simple_camera();
        let mu = Vector3::new(0.3, -0.2, 2.5);
        let rot = crate::math::quat_to_rotation(crate::math::quat_normalize([0.9, 0.1, -0.3, 0.2]));
        let scale = Vector3::new(0.03, 0.05, 0.02);
        let cov = rot * Matrix3::from_diagonal(&scale.map(|s| s * s)) * rot.transpose();

        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let chol = cov.cholesky().unwrap().l();
        let n = 100_000;
        let mut pixels = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Vector3::new(
                normal_sample(&mut rng),
                normal_sample(&mut rng),
                normal_sample(&mut rng),
            );
            let x = mu + chol * z;
            let (px, _) = project_point(&cam, x).unwrap();
            pixels.push(px);
        }
        let mean: Vector2<f64> = pixels.iter().sum::<Vector2<f64>>() / n as f64;
        let mut fitted = Matrix2::zeros();
        for p in &pixels {
            let d = p - mean;
            fitted += d * d.transpose();
        }
        fitted /= (n - 1) as f64;

        let analytic = project_covariance(&cam, mu, &cov) - Matrix2::identity() * COV2D_DILATION;
        for i in 0..2 {
            for j in 0..2 {
                let scale = analytic[(i, i)].sqrt() * analytic[(j, j)].sqrt();
                assert!(
                    (fitted[(i, j)] - analytic[(i, j)]).abs() / scale < 0.02,
                    "entry ({i},{j}): fitted {} vs analytic {}",
                    fitted[(i, j)],
                    analytic[(i, j)]
                );
            }
        }
    }

    fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
        // Box-Muller keeps the test free of extra dependencies.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        assert!(CameraModel::new(
            -1.0,
            1.0,
            5.0,
            5.0,
            10,
            10,
            Matrix3::identity(),
            Vector3::zeros()
        )
        .is_err());
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(
            CameraModel::new(1.0, 1.0, 5.0, 5.0, 10, 10, skewed, Vector3::zeros()).is_err()
        );
    }

    #[test]
    fn cameras_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        let cam = simple_camera();
        save_cameras(&path, &[cam.clone()]).unwrap();
        let loaded = load_cameras(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], cam);
    }
}
