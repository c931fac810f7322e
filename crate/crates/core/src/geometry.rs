//! Axis-aligned measurement volume and segment clipping.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in voxel units, usually the measurement volume Ω with
/// its minimum corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Box3 { min, max }
    }

    /// Volume `[0,w] x [0,h] x [0,d]` with the minimum corner at the origin.
    pub fn from_dims(w: f64, h: f64, d: f64) -> Self {
        Box3 { min: [0.0; 3], max: [w, h, d] }
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    /// Corners in (x-fastest) lexicographic order.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (n, corner) in out.iter_mut().enumerate() {
            for i in 0..3 {
                corner[i] = if (n >> i) & 1 == 1 { self.max[i] } else { self.min[i] };
            }
        }
        out
    }

    /// Clip the segment `a + t (b - a)`, `t in [0,1]`, against the box
    /// (slab method). Returns the clipped endpoints, or `None` when the
    /// segment misses the box.
    pub fn clip_segment(
        &self,
        a: &Vector3<f64>,
        b: &Vector3<f64>,
    ) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let d = b - a;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for i in 0..3 {
            if d[i].abs() < 1e-300 {
                if a[i] < self.min[i] || a[i] > self.max[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[i];
                let mut ta = (self.min[i] - a[i]) * inv;
                let mut tb = (self.max[i] - a[i]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((a + t0 * d, a + t1 * d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_through_z_planes() {
        let b = Box3::from_dims(10.0, 10.0, 5.0);
        let (e, x) = b
            .clip_segment(&Vector3::new(3.0, 4.0, -1.0), &Vector3::new(3.0, 4.0, 6.0))
            .unwrap();
        assert_eq!(e, Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(x, Vector3::new(3.0, 4.0, 5.0));
    }

    #[test]
    fn clip_exits_side_face() {
        let b = Box3::from_dims(10.0, 10.0, 5.0);
        let (e, x) = b
            .clip_segment(&Vector3::new(8.0, 5.0, 0.0), &Vector3::new(13.0, 5.0, 5.0))
            .unwrap();
        assert_eq!(e, Vector3::new(8.0, 5.0, 0.0));
        // exits through x = 10 at t = 0.4
        assert!((x - Vector3::new(10.0, 5.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn clip_miss() {
        let b = Box3::from_dims(10.0, 10.0, 5.0);
        assert!(b
            .clip_segment(&Vector3::new(20.0, 20.0, -1.0), &Vector3::new(20.0, 20.0, 6.0))
            .is_none());
    }
}
