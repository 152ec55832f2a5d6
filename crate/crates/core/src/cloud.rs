use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub intensity: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T, z: T, intensity: T) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz_f64(&self) -> [f64; 3] {
        [self.x.f64(), self.y.f64(), self.z.f64()]
    }

    pub fn range(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Points in the sensor frame, meters; intensity normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Point<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz_f64).collect()
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Self {
        Self::new(
            xyz.iter()
                .map(|p| Point::new(T::c(p[0]), T::c(p[1]), T::c(p[2]), T::zero()))
                .collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud::new(
            self.points
                .iter()
                .map(|p| Point::new(U::c(p.x.f64()), U::c(p.y.f64()), U::c(p.z.f64()), U::c(p.intensity.f64())))
                .collect(),
        )
    }

    /// Apply a rigid transform to every point; intensities are kept.
    pub fn transformed(&self, tf: &crate::rigid::RigidTransform) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| {
                    let q = tf.apply(p.xyz_f64());
                    Point::new(T::c(q[0]), T::c(q[1]), T::c(q[2]), p.intensity)
                })
                .collect(),
        )
    }
}
