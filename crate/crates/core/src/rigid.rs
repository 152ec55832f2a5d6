//! Rigid transforms in 3D.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

/// `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation about +z followed by translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], yaw, translation)
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let axis = Unit::new_normalize(Vector3::from(axis));
        let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self::new(rotation, Vector3::from(translation))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q.x, q.y, q.z]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, from the trace.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        ortho <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Row-major `[R | t]`, 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vector3::new(v[3], v[7], v[11]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform::from_axis_angle([0.3, -0.2, 0.9], 0.4, [1.0, -2.0, 0.5]);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert!(t.is_proper(1e-12));
        assert!((t.rotation_angle() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_yaw(0.25, [3.0, 4.0, 5.0]);
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()), t);
    }
}
