//! Ground-truth scene generation on analytic, divergence-free flows.
//!
//! A scene is a set of uniformly seeded particles, their positions advected
//! by one explicit Euler step of an analytic flow (matching the two-frame
//! data model exactly), and the rendered image pair of a symmetric
//! four-camera rig. Everything is deterministic given the seed.

use crate::camera::{Camera, PinholeCamera};
use crate::geometry::Box3;
use crate::motion::MotionGrid;
use crate::scene::{render, BlobKernel, Image, ImageSet, ParticleSet};
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Analytic velocity fields with identically zero divergence, in voxel
/// units per frame interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalyticFlow {
    /// Constant displacement.
    Uniform { d: [f64; 3] },
    /// Instantaneous rotation velocity `omega * (axis x (x - center))`.
    RigidRotation { axis: [f64; 3], omega: f64, center: [f64; 3] },
    /// `u = (A sin(k1 x) cos(k2 y) cos(k3 z), B cos sin cos, C cos cos sin)`
    /// with `A k1 + B k2 + C k3 = 0`; wall-normal components vanish on the
    /// box faces when `k = pi n / extent`.
    TaylorGreen { amplitudes: [f64; 3], wavenumbers: [f64; 3] },
    /// Planar shear: `u[flow_axis] = rate * x[grad_axis]`.
    Shear { flow_axis: usize, grad_axis: usize, rate: f64 },
}

impl AnalyticFlow {
    /// Classic one-cell Taylor-Green vortex fitted to the volume, then
    /// rescaled so the maximum speed equals `max_magnitude`.
    pub fn taylor_green_for(omega: &Box3, max_magnitude: f64) -> AnalyticFlow {
        let e = omega.extent();
        let k = [
            std::f64::consts::PI / e.x,
            std::f64::consts::PI / e.y,
            std::f64::consts::PI / e.z,
        ];
        // balance A k1 + B k2 + C k3 = 0
        let a = 1.0;
        let b = 1.0;
        let c = -(a * k[0] + b * k[1]) / k[2];
        let flow = AnalyticFlow::TaylorGreen { amplitudes: [a, b, c], wavenumbers: k };
        flow.with_max_magnitude(omega, max_magnitude)
    }

    /// Rescale amplitudes so the sampled maximum speed over the volume
    /// equals `target`.
    pub fn with_max_magnitude(self, omega: &Box3, target: f64) -> AnalyticFlow {
        let mut max: f64 = 0.0;
        let n = 33;
        let e = omega.extent();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = Vector3::new(
                        omega.min[0] + e.x * i as f64 / (n - 1) as f64,
                        omega.min[1] + e.y * j as f64 / (n - 1) as f64,
                        omega.min[2] + e.z * k as f64 / (n - 1) as f64,
                    );
                    max = max.max(self.eval(&x).norm());
                }
            }
        }
        if max == 0.0 {
            return self;
        }
        let s = target / max;
        match self {
            AnalyticFlow::Uniform { d } => {
                AnalyticFlow::Uniform { d: [d[0] * s, d[1] * s, d[2] * s] }
            }
            AnalyticFlow::RigidRotation { axis, omega, center } => {
                AnalyticFlow::RigidRotation { axis, omega: omega * s, center }
            }
            AnalyticFlow::TaylorGreen { amplitudes, wavenumbers } => AnalyticFlow::TaylorGreen {
                amplitudes: [amplitudes[0] * s, amplitudes[1] * s, amplitudes[2] * s],
                wavenumbers,
            },
            AnalyticFlow::Shear { flow_axis, grad_axis, rate } => {
                AnalyticFlow::Shear { flow_axis, grad_axis, rate: rate * s }
            }
        }
    }

    pub fn eval(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match self {
            AnalyticFlow::Uniform { d } => Vector3::new(d[0], d[1], d[2]),
            AnalyticFlow::RigidRotation { axis, omega, center } => {
                let axis = Vector3::new(axis[0], axis[1], axis[2]).normalize();
                let r = x - Vector3::new(center[0], center[1], center[2]);
                *omega * axis.cross(&r)
            }
            AnalyticFlow::TaylorGreen { amplitudes, wavenumbers } => {
                let [a, b, c] = *amplitudes;
                let [k1, k2, k3] = *wavenumbers;
                let (s1, c1) = (k1 * x.x).sin_cos();
                let (s2, c2) = (k2 * x.y).sin_cos();
                let (s3, c3) = (k3 * x.z).sin_cos();
                Vector3::new(a * s1 * c2 * c3, b * c1 * s2 * c3, c * c1 * c2 * s3)
            }
            AnalyticFlow::Shear { flow_axis, grad_axis, rate } => {
                let mut u = Vector3::zeros();
                u[*flow_axis] = rate * x[*grad_axis];
                u
            }
        }
    }

    /// Symbolic divergence; identically zero for every kind (the Taylor-Green
    /// constructor balances its amplitudes).
    pub fn analytic_divergence(&self, x: &Vector3<f64>) -> f64 {
        match self {
            AnalyticFlow::Uniform { .. } | AnalyticFlow::Shear { .. } => 0.0,
            AnalyticFlow::RigidRotation { .. } => 0.0,
            AnalyticFlow::TaylorGreen { amplitudes, wavenumbers } => {
                let [a, b, c] = *amplitudes;
                let [k1, k2, k3] = *wavenumbers;
                (a * k1 + b * k2 + c * k3)
                    * (k1 * x.x).cos()
                    * (k2 * x.y).cos()
                    * (k3 * x.z).cos()
            }
        }
    }
}

/// Generated scene with full ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub particles_t0: ParticleSet,
    pub particles_t1: ParticleSet,
    pub flow: AnalyticFlow,
    pub images: ImageSet,
    pub cameras: Vec<Camera>,
    pub omega: Box3,
    pub ppp: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// The paper-style symmetric rig: four pinhole cameras at azimuth +-35
/// degrees (about the yz-plane) and elevation +-18 degrees (about the
/// xz-plane), far enough that the projection is close to orthographic, with
/// focal length fitted so the whole volume stays in frame.
pub fn default_rig(width: usize, height: usize, omega: &Box3) -> Vec<Camera> {
    let center = omega.center();
    let diag = omega.extent().norm();
    let dist = 12.0 * diag;
    let az = 35f64.to_radians();
    let el = 18f64.to_radians();

    let base = |elevation: f64| -> Matrix3x4<f64> {
        let v = Vector3::new(
            az.sin() * elevation.cos(),
            elevation.sin(),
            az.cos() * elevation.cos(),
        );
        let cam_pos = center + dist * v;
        let fwd = (center - cam_pos).normalize();
        let right = Vector3::new(0.0, 1.0, 0.0).cross(&fwd).normalize();
        let up = fwd.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), up.transpose(), fwd.transpose()]);
        let t = -rot * cam_pos;
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);

        // fit the focal length to the projected corner spread
        let mut nx: f64 = 0.0;
        let mut ny: f64 = 0.0;
        for corner in omega.corners() {
            let pc = rot * corner + t;
            nx = nx.max((pc.x / pc.z).abs());
            ny = ny.max((pc.y / pc.z).abs());
        }
        let cx = 0.5 * (width as f64 - 1.0);
        let cy = 0.5 * (height as f64 - 1.0);
        let fl = (0.9 * cx / nx).min(0.9 * cy / ny);
        let k = Matrix3::new(fl, 0.0, cx, 0.0, fl, cy, 0.0, 0.0, 1.0);
        k * rt
    };

    // mirror about the volume mid-plane x = center.x
    let mirror = {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        m[(0, 3)] = 2.0 * center.x;
        m
    };
    let p1 = base(el);
    let p2 = base(-el);
    let p3 = p1 * mirror;
    let p4 = p2 * mirror;
    [p1, p3, p2, p4]
        .into_iter()
        .map(|p| Camera::Pinhole(PinholeCamera::new(p)))
        .collect()
}

/// Generate a scene: `ppp * width * height` particles uniform in the volume,
/// intensities uniform in [0.5, 1], one Euler step of advection, rendered to
/// the default rig at both time steps, optional additive Gaussian noise.
pub fn generate(
    flow: &AnalyticFlow,
    ppp: f64,
    width: usize,
    height: usize,
    omega: &Box3,
    sigma: f64,
    noise: f64,
    seed: u64,
) -> SyntheticScene {
    let cameras = default_rig(width, height, omega);
    generate_with_rig(flow, ppp, width, height, omega, sigma, noise, seed, cameras)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_with_rig(
    flow: &AnalyticFlow,
    ppp: f64,
    width: usize,
    height: usize,
    omega: &Box3,
    sigma: f64,
    noise: f64,
    seed: u64,
    cameras: Vec<Camera>,
) -> SyntheticScene {
    assert!(ppp > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (ppp * width as f64 * height as f64).round() as usize;
    let mut positions = Vec::with_capacity(count);
    let mut intensities = Vec::with_capacity(count);
    for _ in 0..count {
        positions.push(Vector3::new(
            rng.random_range(omega.min[0]..omega.max[0]),
            rng.random_range(omega.min[1]..omega.max[1]),
            rng.random_range(omega.min[2]..omega.max[2]),
        ));
        intensities.push(rng.random_range(0.5..1.0));
    }
    let particles_t0 = ParticleSet::new(positions, intensities);
    let advected: Vec<Vector3<f64>> = particles_t0
        .positions
        .iter()
        .map(|p| p + flow.eval(p))
        .collect();
    let particles_t1 = ParticleSet::new(advected, particles_t0.intensities.clone());

    let kernel = BlobKernel::new(sigma);
    let mut t0: Vec<Image> = cameras
        .iter()
        .map(|c| render(&particles_t0, c, &kernel, width, height))
        .collect();
    let mut t1: Vec<Image> = cameras
        .iter()
        .map(|c| render(&particles_t1, c, &kernel, width, height))
        .collect();
    if noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, noise).expect("valid noise level");
        for img in t0.iter_mut().chain(t1.iter_mut()) {
            for v in img.data.iter_mut() {
                *v += rng.sample(normal);
            }
        }
    }
    SyntheticScene {
        particles_t0,
        particles_t1,
        flow: flow.clone(),
        images: ImageSet { t0, t1 },
        cameras,
        omega: *omega,
        ppp,
        sigma,
        seed,
    }
}

/// Sample the analytic flow at the vertices of a grid covering the volume.
pub fn sample_truth(flow: &AnalyticFlow, dims: [usize; 3], spacing: f64) -> MotionGrid {
    let mut g = MotionGrid::zeros(dims, spacing);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let u = flow.eval(&g.vertex_position(i, j, k));
                let v = g.vertex_index(i, j, k);
                for c in 0..3 {
                    g.coeffs[3 * v + c] = u[c];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    #[test]
    fn generation_is_deterministic() {
        let omega = Box3::from_dims(40.0, 40.0, 20.0);
        let flow = AnalyticFlow::Uniform { d: [1.0, 0.0, 0.0] };
        let ppp = 100.0 / (64.0 * 64.0);
        let a = generate(&flow, ppp, 64, 64, &omega, 1.0, 0.02, 7);
        let b = generate(&flow, ppp, 64, 64, &omega, 1.0, 0.02, 7);
        assert_eq!(a.particles_t0.len(), 100);
        assert_eq!(a.particles_t0, b.particles_t0);
        assert_eq!(a.images.t0[0].data, b.images.t0[0].data);
        assert_eq!(a.images.t1[3].data, b.images.t1[3].data);
    }

    #[test]
    fn uniform_flow_advects_exactly() {
        let omega = Box3::from_dims(40.0, 40.0, 20.0);
        let flow = AnalyticFlow::Uniform { d: [1.0, 0.0, 0.0] };
        let scene = generate(&flow, 0.01, 64, 64, &omega, 1.0, 0.0, 3);
        for (p0, p1) in scene.particles_t0.positions.iter().zip(&scene.particles_t1.positions) {
            assert_eq!(p1 - p0, Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn taylor_green_divergence_vanishes() {
        use rand::SeedableRng;
        let omega = Box3::from_dims(64.0, 48.0, 32.0);
        let flow = AnalyticFlow::taylor_green_for(&omega, 3.0);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.random_range(0.0..64.0),
                rng.random_range(0.0..48.0),
                rng.random_range(0.0..32.0),
            );
            assert!(flow.analytic_divergence(&x).abs() < 1e-12);
        }
    }

    #[test]
    fn taylor_green_hits_target_magnitude() {
        let omega = Box3::from_dims(64.0, 48.0, 32.0);
        let flow = AnalyticFlow::taylor_green_for(&omega, 3.0);
        let mut max: f64 = 0.0;
        for i in 0..40 {
            for j in 0..40 {
                for k in 0..40 {
                    let x = Vector3::new(64.0 * i as f64 / 39.0, 48.0 * j as f64 / 39.0, 32.0 * k as f64 / 39.0);
                    max = max.max(flow.eval(&x).norm());
                }
            }
        }
        assert!((max - 3.0).abs() < 0.05, "max speed {max}");
    }

    #[test]
    fn rotation_and_shear_are_divergence_free_pointwise() {
        use rand::SeedableRng;
        let rot = AnalyticFlow::RigidRotation {
            axis: [0.0, 0.0, 1.0],
            omega: 0.1,
            center: [10.0, 10.0, 10.0],
        };
        let shear = AnalyticFlow::Shear { flow_axis: 0, grad_axis: 1, rate: 0.05 };
        let mut rng = StdRng::seed_from_u64(9);
        let h = 1e-5;
        for flow in [rot, shear] {
            for _ in 0..100 {
                let x = Vector3::new(
                    rng.random_range(0.0..20.0),
                    rng.random_range(0.0..20.0),
                    rng.random_range(0.0..20.0),
                );
                // finite-difference divergence as an independent check
                let mut div = 0.0;
                for a in 0..3 {
                    let mut hi = x;
                    let mut lo = x;
                    hi[a] += h;
                    lo[a] -= h;
                    div += (flow.eval(&hi)[a] - flow.eval(&lo)[a]) / (2.0 * h);
                }
                assert!(div.abs() < 1e-9, "fd divergence {div}");
                assert_eq!(flow.analytic_divergence(&x), 0.0);
            }
        }
    }

    #[test]
    fn rig_centers_the_volume_in_every_view() {
        let omega = Box3::from_dims(200.0, 100.0, 60.0);
        let (w, h) = (300usize, 160usize);
        let cams = default_rig(w, h, &omega);
        assert_eq!(cams.len(), 4);
        for cam in &cams {
            let uv = cam.project(&omega.center()).unwrap();
            let dx = (uv.x - 0.5 * (w as f64 - 1.0)).abs() / w as f64;
            let dy = (uv.y - 0.5 * (h as f64 - 1.0)).abs() / h as f64;
            assert!(dx < 0.1 && dy < 0.1, "center projects to {uv:?}");
        }
    }

    #[test]
    fn rig_mirror_symmetry() {
        let omega = Box3::from_dims(200.0, 100.0, 60.0);
        let cams = default_rig(300, 160, &omega);
        let c = omega.center();
        let mirror = |p: &Vector3<f64>| Vector3::new(2.0 * c.x - p.x, p.y, p.z);
        let probes = [
            Vector3::new(30.0, 20.0, 10.0),
            Vector3::new(150.0, 80.0, 50.0),
            Vector3::new(100.0, 50.0, 30.0),
        ];
        // camera pairs (0,1) and (2,3) are mirrors of each other
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            for p in &probes {
                let lhs = cams[b].project(&mirror(p)).unwrap();
                let rhs = cams[a].project(p).unwrap();
                assert!((lhs - rhs).norm() < 1e-9, "mirror pair ({a},{b}) differs");
            }
        }
    }

    #[test]
    fn rig_keeps_all_corners_in_frame() {
        let omega = Box3::from_dims(200.0, 100.0, 60.0);
        let (w, h) = (300usize, 160usize);
        for cam in default_rig(w, h, &omega) {
            for corner in omega.corners() {
                let uv = cam.project(&corner).unwrap();
                assert!(uv.x >= 0.0 && uv.x <= (w - 1) as f64, "corner u {}", uv.x);
                assert!(uv.y >= 0.0 && uv.y <= (h - 1) as f64, "corner v {}", uv.y);
            }
        }
    }

    #[test]
    fn sample_truth_examples() {
        let omega = Box3::from_dims(20.0, 20.0, 20.0);
        let uniform = AnalyticFlow::Uniform { d: [2.0, -1.0, 0.5] };
        let g = sample_truth(&uniform, [5, 5, 5], 5.0);
        for v in 0..g.vertex_count() {
            assert_eq!(g.vertex_value(v), Vector3::new(2.0, -1.0, 0.5));
        }

        // rotation sampled on a grid agrees at the vertices
        let rot = AnalyticFlow::RigidRotation {
            axis: [0.0, 0.0, 1.0],
            omega: 0.05,
            center: [10.0, 10.0, 10.0],
        };
        let g = sample_truth(&rot, [5, 5, 5], 5.0);
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let x = g.vertex_position(i, j, k);
                    assert!((g.eval(&x) - rot.eval(&x)).norm() < 1e-12);
                }
            }
        }
        let _ = omega;
    }

    #[test]
    fn taylor_green_interpolation_error_decays_second_order() {
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let flow = AnalyticFlow::taylor_green_for(&omega, 3.0);
        let mut errors = Vec::new();
        for &n in &[5usize, 9, 17] {
            let spacing = 32.0 / (n - 1) as f64;
            let g = sample_truth(&flow, [n, n, n], spacing);
            let mut max_err: f64 = 0.0;
            for i in 0..20 {
                for j in 0..20 {
                    for k in 0..20 {
                        let x = Vector3::new(
                            32.0 * (i as f64 + 0.5) / 20.0,
                            32.0 * (j as f64 + 0.5) / 20.0,
                            32.0 * (k as f64 + 0.5) / 20.0,
                        );
                        max_err = max_err.max((g.eval(&x) - flow.eval(&x)).norm());
                    }
                }
            }
            errors.push(max_err);
        }
        // halving the spacing should cut the error by nearly 4x
        assert!(errors[1] < 0.35 * errors[0], "{errors:?}");
        assert!(errors[2] < 0.35 * errors[1], "{errors:?}");
    }

    #[test]
    fn detected_peaks_match_particle_count_at_low_density() {
        let omega = Box3::from_dims(40.0, 40.0, 20.0);
        let flow = AnalyticFlow::Uniform { d: [0.0, 0.0, 0.0] };
        // seed chosen so every pairwise projected distance exceeds 5 px in
        // all views (the count bookkeeping only holds without occlusions)
        let scene = generate(&flow, 6.0 / (96.0 * 96.0), 96, 96, &omega, 1.0, 0.0, 9);
        for cam in &scene.cameras {
            let uv: Vec<_> = scene
                .particles_t0
                .positions
                .iter()
                .map(|p| cam.project(p).unwrap())
                .collect();
            for i in 0..uv.len() {
                for j in 0..i {
                    assert!((uv[i] - uv[j]).norm() > 5.0, "premise: projections overlap");
                }
            }
        }
        for img in &scene.images.t0 {
            let peaks = crate::triangulate::detect_peaks(img, 0.25);
            assert_eq!(peaks.len(), scene.particles_t0.len());
        }
    }
}
