//! Rigid poses, pinhole cameras, and voxel-grid addressing.
//!
//! Frame convention used throughout the crate: ego x forward, y left, z up.
//! Grid origins sit at the minimum corner; `voxel_to_world` returns cell
//! centers. All arithmetic is f64.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("intrinsics must have positive focal lengths and [2][2] = 1")]
    InvalidIntrinsics,
    #[error("voxel size must be positive")]
    InvalidVoxelSize,
    #[error("point is behind the camera")]
    BehindCamera,
}

const ROTATION_TOL: f64 = 1e-9;

/// Rigid transform `p' = R p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Build a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).norm();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > ROTATION_TOL || det_err > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z (counterclockwise when viewed from above).
    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_yaw_translation(yaw, Vector3::zeros())
    }

    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Relative transform mapping coordinates of frame `self` into frame `to`,
    /// when both poses express their frame in a common parent frame.
    pub fn relative_to(&self, to: &Pose) -> Pose {
        to.inverse().compose(self)
    }
}

/// Express a position given in frame t in frame t-j.
pub fn align_position(pose_t_to_tj: &Pose, position_ego_t: &Vector3<f64>) -> Vector3<f64> {
    pose_t_to_tj.apply(position_ego_t)
}

/// Pinhole camera: intrinsics plus a camera-from-ego extrinsic pose.
#[derive(Debug, Clone)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    extrinsics: Pose,
    /// (height, width) in pixels.
    image_size: (usize, usize),
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Pose,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let ok = intrinsics[(0, 0)] > 0.0
            && intrinsics[(1, 1)] > 0.0
            && (intrinsics[(2, 2)] - 1.0).abs() < 1e-12
            && intrinsics[(2, 0)] == 0.0
            && intrinsics[(2, 1)] == 0.0;
        if !ok {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            image_size,
        })
    }

    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsics: Pose,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, extrinsics, image_size)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Pose {
        &self.extrinsics
    }

    /// (height, width) in pixels.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }
}

/// Result of projecting an ego-frame point into a camera image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth in meters.
    pub depth: f64,
    /// False when (u, v) falls outside the image bounds.
    pub in_image: bool,
}

/// Homogeneous pinhole projection: `d [u v 1]^T = K (R p + t)`.
pub fn project_to_image(
    camera: &Camera,
    point_ego: &Vector3<f64>,
) -> Result<Projection, GeometryError> {
    let p_cam = camera.extrinsics.apply(point_ego);
    let d = p_cam.z;
    if d <= 1e-6 {
        return Err(GeometryError::BehindCamera);
    }
    let k = &camera.intrinsics;
    let u = k[(0, 0)] * p_cam.x / d + k[(0, 2)];
    let v = k[(1, 1)] * p_cam.y / d + k[(1, 2)];
    let (h, w) = camera.image_size;
    let in_image = u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64;
    Ok(Projection {
        u,
        v,
        depth: d,
        in_image,
    })
}

/// Inverse projection: image point (u, v) at camera-frame depth d, returned
/// in the ego frame.
pub fn back_project(camera: &Camera, u: f64, v: f64, depth: f64) -> Vector3<f64> {
    let k = &camera.intrinsics;
    let x = (u - k[(0, 2)]) / k[(0, 0)] * depth;
    let y = (v - k[(1, 2)]) / k[(1, 1)] * depth;
    let p_cam = Vector3::new(x, y, depth);
    camera.extrinsics.inverse().apply(&p_cam)
}

/// Dense grid addressing: voxel counts, edge length, and the ego-frame
/// position of the minimum corner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub dims: (usize, usize, usize),
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(
        dims: (usize, usize, usize),
        voxel_size: f64,
        origin: [f64; 3],
    ) -> Result<Self, GeometryError> {
        if voxel_size <= 0.0 {
            return Err(GeometryError::InvalidVoxelSize);
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }

    /// Linear index in ((x·Y + y)·Z + z) order.
    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims.1 + iy) * self.dims.2 + iz
    }

    pub fn unravel(&self, linear: usize) -> (usize, usize, usize) {
        let z = linear % self.dims.2;
        let rest = linear / self.dims.2;
        (rest / self.dims.1, rest % self.dims.1, z)
    }

    /// Containing voxel of an ego-frame point, or None when outside the grid.
    pub fn world_to_voxel(&self, point: &Vector3<f64>) -> Option<(usize, usize, usize)> {
        let rel = (point - self.origin_vec()) / self.voxel_size;
        let ix = rel.x.floor();
        let iy = rel.y.floor();
        let iz = rel.z.floor();
        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.dims.0 || iy >= self.dims.1 || iz >= self.dims.2 {
            return None;
        }
        Some((ix, iy, iz))
    }

    /// Ego-frame center of a voxel.
    pub fn voxel_to_world(&self, index: (usize, usize, usize)) -> Vector3<f64> {
        self.origin_vec()
            + Vector3::new(
                (index.0 as f64 + 0.5) * self.voxel_size,
                (index.1 as f64 + 0.5) * self.voxel_size,
                (index.2 as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Continuous cell coordinates where integers land on cell centers.
    pub fn continuous_cell(&self, point: &Vector3<f64>) -> Vector3<f64> {
        (point - self.origin_vec()) / self.voxel_size - Vector3::new(0.5, 0.5, 0.5)
    }

    /// Spec for a stage running at 1/factor resolution (same extent).
    pub fn downscaled(&self, factor: usize) -> GridSpec {
        GridSpec {
            dims: (
                self.dims.0 / factor,
                self.dims.1 / factor,
                self.dims.2 / factor,
            ),
            voxel_size: self.voxel_size * factor as f64,
            origin: self.origin,
        }
    }

    pub fn dims_divisible_by(&self, factor: usize) -> bool {
        self.dims.0 % factor == 0 && self.dims.1 % factor == 0 && self.dims.2 % factor == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn canonical_camera() -> Camera {
        Camera::pinhole(100.0, 100.0, 50.0, 50.0, Pose::identity(), (100, 100)).unwrap()
    }

    #[test]
    fn optical_axis_point_maps_to_principal_point() {
        let p = project_to_image(&canonical_camera(), &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_relative_eq!(p.u, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.depth, 10.0, epsilon = 1e-12);
        assert!(p.in_image);
    }

    #[test]
    fn off_axis_point_hand_projection() {
        // d·[u v 1] = K·[1 0 10 1]: u = 100·(1/10) + 50 = 60.
        let p = project_to_image(&canonical_camera(), &Vector3::new(1.0, 0.0, 10.0)).unwrap();
        assert_relative_eq!(p.u, 60.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.depth, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn point_behind_camera_is_rejected() {
        let err = project_to_image(&canonical_camera(), &Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(err, Err(GeometryError::BehindCamera));
    }

    #[test]
    fn out_of_image_is_flagged_not_error() {
        let p = project_to_image(&canonical_camera(), &Vector3::new(100.0, 0.0, 10.0)).unwrap();
        assert!(!p.in_image);
    }

    #[test]
    fn projection_scale_consistency() {
        let cam = canonical_camera();
        let base = Vector3::new(0.7, -0.3, 4.0);
        let p1 = project_to_image(&cam, &base).unwrap();
        let p2 = project_to_image(&cam, &(base * 3.5)).unwrap();
        assert_relative_eq!(p1.u, p2.u, epsilon = 1e-9);
        assert_relative_eq!(p1.v, p2.v, epsilon = 1e-9);
    }

    #[test]
    fn back_project_inverts_projection() {
        let cam = Camera::pinhole(
            80.0,
            90.0,
            32.0,
            24.0,
            Pose::from_yaw_translation(0.4, Vector3::new(0.2, -0.1, 1.0)),
            (48, 64),
        )
        .unwrap();
        let p = Vector3::new(1.0, 2.0, 3.0);
        let proj = project_to_image(&cam, &p).unwrap();
        let back = back_project(&cam, proj.u, proj.v, proj.depth);
        assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn align_identity() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(align_position(&Pose::identity(), &p), p);
    }

    #[test]
    fn align_pure_translation() {
        let pose = Pose::from_translation(Vector3::new(5.0, 0.0, 0.0));
        let out = align_position(&pose, &Vector3::new(1.0, 2.0, 3.0));
        assert_relative_eq!((out - Vector3::new(6.0, 2.0, 3.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn align_quarter_yaw() {
        let pose = Pose::from_yaw(std::f64::consts::FRAC_PI_2);
        let out = align_position(&pose, &Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!((out - Vector3::new(0.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_compose_inverse_is_identity() {
        let pose = Pose::from_yaw_translation(0.83, Vector3::new(1.5, -2.0, 0.25));
        let id = pose.compose(&pose.inverse());
        assert_relative_eq!((id.rotation() - Matrix3::identity()).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(id.translation().norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn align_then_inverse_align_roundtrips() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let pose = Pose::from_yaw_translation(
                rng.gen_range(-3.0..3.0),
                Vector3::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-1.0..1.0),
                ),
            );
            let p = Vector3::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(0.0..4.0),
            );
            let back = align_position(&pose.inverse(), &align_position(&pose, &p));
            assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0);
        assert_eq!(
            Pose::new(m, Vector3::zeros()),
            Err(GeometryError::InvalidRotation)
        );
        // Determinant -1 (reflection) is also invalid.
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert_eq!(
            Pose::new(r, Vector3::zeros()),
            Err(GeometryError::InvalidRotation)
        );
    }

    fn spec_half_meter() -> GridSpec {
        GridSpec::new((4, 4, 4), 0.5, [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn world_to_voxel_hand_case() {
        let spec = spec_half_meter();
        assert_eq!(
            spec.world_to_voxel(&Vector3::new(0.6, 0.0, 0.0)),
            Some((1, 0, 0))
        );
    }

    #[test]
    fn world_to_voxel_corner_and_outside() {
        let spec = spec_half_meter();
        assert_eq!(spec.world_to_voxel(&Vector3::zeros()), Some((0, 0, 0)));
        assert_eq!(spec.world_to_voxel(&Vector3::new(-0.1, 0.0, 0.0)), None);
        assert_eq!(spec.world_to_voxel(&Vector3::new(2.0, 0.0, 0.0)), None);
    }

    #[test]
    fn voxel_world_roundtrip_all_indices() {
        let spec = GridSpec::new((3, 5, 2), 0.25, [-1.0, 0.5, -0.25]).unwrap();
        for ix in 0..3 {
            for iy in 0..5 {
                for iz in 0..2 {
                    let center = spec.voxel_to_world((ix, iy, iz));
                    assert_eq!(spec.world_to_voxel(&center), Some((ix, iy, iz)));
                }
            }
        }
    }

    #[test]
    fn linear_index_unravel_roundtrip() {
        let spec = GridSpec::new((3, 4, 5), 1.0, [0.0; 3]).unwrap();
        for i in 0..spec.voxel_count() {
            let (x, y, z) = spec.unravel(i);
            assert_eq!(spec.linear_index(x, y, z), i);
        }
    }
}
