//! Poses, the continuous 6D rotation encoding and pose errors.
//!
//! Network inputs and outputs carry orientation as the first two columns of
//! the rotation matrix. Decoding runs Gram–Schmidt so any pair of
//! non-parallel 3-vectors maps back to a proper rotation.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating orthonormality and determinant.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
const DEGENERATE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation: max |RᵀR − I| = {ortho_err:e}, det = {det}")]
    NotOrthonormal { ortho_err: f64, det: f64 },
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
}

/// A validated 3×3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m` against the orthonormality and determinant invariants.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho_err = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if !ortho_err.is_finite()
            || ortho_err >= ORTHONORMAL_TOL
            || (det - 1.0).abs() >= ORTHONORMAL_TOL
        {
            return Err(GeometryError::NotOrthonormal { ortho_err, det });
        }
        Ok(Self(m))
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self(r.into_inner())
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self(Rotation3::new(*v).into_inner())
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Re-projects onto SO(3) after accumulated floating point drift.
    pub fn renormalized(m: &Matrix3<f64>) -> Self {
        let c0: Vector3<f64> = m.column(0).into();
        let c1: Vector3<f64> = m.column(1).into();
        let mut r6 = [0.0; 6];
        r6[..3].copy_from_slice(c0.as_slice());
        r6[3..].copy_from_slice(c1.as_slice());
        sixd_to_rotmat(&Rot6D(r6)).unwrap_or_else(|_| Self::identity())
    }

    /// Rotation vector (axis·angle) with angle in [0, π].
    pub fn log(&self) -> Vector3<f64> {
        rotation_log(&self.0)
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

/// First and second rotation-matrix columns, concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Reads off the first two columns. Non-rotations are rejected.
pub fn rotmat_to_6d(r: &Matrix3<f64>) -> Result<Rot6D, GeometryError> {
    let r = RotationMatrix::new(*r)?;
    Ok(encode_6d(&r))
}

/// Infallible variant for an already-validated rotation.
pub fn encode_6d(r: &RotationMatrix) -> Rot6D {
    let m = r.matrix();
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Gram–Schmidt decoding of an arbitrary 6-vector.
pub fn sixd_to_rotmat(r6: &Rot6D) -> Result<RotationMatrix, GeometryError> {
    let a1 = Vector3::new(r6.0[0], r6.0[1], r6.0[2]);
    let a2 = Vector3::new(r6.0[3], r6.0[4], r6.0[5]);
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 > DEGENERATE_TOL) || !(n2 > DEGENERATE_TOL) {
        return Err(GeometryError::DegenerateRotation("near-zero column"));
    }
    let b1 = a1 / n1;
    let ortho = a2 - b1 * b1.dot(&a2);
    let no = ortho.norm();
    if !(no > DEGENERATE_TOL * n2) {
        return Err(GeometryError::DegenerateRotation("parallel columns"));
    }
    let b2 = ortho / no;
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Log map. At angle π the axis is the eigenvector for eigenvalue 1, with
/// its largest-magnitude component made positive.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if angle < 1e-6 {
        // first-order: R ≈ I + [w]x
        return skew * 0.5;
    }
    if std::f64::consts::PI - angle > 1e-6 {
        return skew * (angle / (2.0 * angle.sin()));
    }
    // Near π: R = 2aaᵀ − I, so the largest diagonal entry picks a stable column.
    let b = (r + Matrix3::identity()) * 0.5;
    let mut best = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = b.column(best).into();
    axis /= axis.norm();
    let mut lead = 0;
    for i in 1..3 {
        if axis[i].abs() > axis[lead].abs() + 1e-12 {
            lead = i;
        }
    }
    if axis[lead] < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Position plus orientation of an end-effector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: RotationMatrix,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), rotation: RotationMatrix::identity() }
    }

    pub fn new(position: Vector3<f64>, rotation: RotationMatrix) -> Self {
        Self { position, rotation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), RotationMatrix::identity())
    }

    /// 9D encoding: position followed by the 6D rotation.
    pub fn to_pose9(&self) -> [f64; 9] {
        let r6 = encode_6d(&self.rotation);
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(self.position.as_slice());
        out[3..].copy_from_slice(&r6.0);
        out
    }

    /// Decodes a (possibly unnormalized) 9D vector.
    pub fn from_pose9(v: &[f64]) -> Result<Self, GeometryError> {
        assert!(v.len() >= 9, "pose9 needs 9 values");
        let mut r6 = [0.0; 6];
        r6.copy_from_slice(&v[3..9]);
        Ok(Self::new(Vector3::new(v[0], v[1], v[2]), sixd_to_rotmat(&Rot6D(r6))?))
    }

    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }

    pub fn as_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(self.rotation.matrix())
    }
}

/// Force (N) and torque (N·m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench { force: self.force + rhs.force, torque: self.torque + rhs.torque }
    }
}

impl std::ops::Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench { force: -self.force, torque: -self.torque }
    }
}

/// Translation error followed by the rotation vector of
/// `target.rotation · current.rotationᵀ`.
pub fn pose_error(current: &Pose, target: &Pose) -> Vector6<f64> {
    let dp = target.position - current.position;
    let dr = rotation_log(&(target.rotation.matrix() * current.rotation.matrix().transpose()));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}
