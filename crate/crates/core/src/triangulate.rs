//! Candidate-particle generation: peak detection with sub-pixel refinement,
//! multi-view triangulation, and the epipolar proposal search.
//!
//! Camera 1 is the reference. Every reference peak casts a ray through the
//! volume; the ray's entry/exit reproject into the other views as epipolar
//! segments, and peaks inside a corridor around each segment form putative
//! matches. Combinations consistent across all views are triangulated and
//! kept when the reprojection error stays below the tolerance. When `m`
//! proposals share one reference peak, each starts with intensity
//! `I_ref * K / (K - 1 + m)`.

use crate::camera::Camera;
use crate::geometry::Box3;
use crate::scene::{Image, ParticleSet};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

/// A 2D intensity peak at sub-pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub position: Vector2<f64>,
    pub intensity: f64,
}

/// A triangulated particle proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub position: Vector3<f64>,
    pub intensity: f64,
    /// Max reprojection error over cameras, pixels.
    pub error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ProposalParams {
    /// Triangulation tolerance and epipolar corridor half-width, pixels.
    pub epsilon: f64,
    /// Minimum peak intensity.
    pub i_min: f64,
    /// Cap on enumerated cross-view combinations per reference peak.
    pub max_combinations: usize,
    /// Candidates within this distance of an existing particle (or of an
    /// already accepted candidate of the same peak) are suppressed, voxels.
    pub dedup_radius: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams { epsilon: 0.8, i_min: 0.2, max_combinations: 64, dedup_radius: 0.5 }
    }
}

/// 1D 3-point log-parabola refinement: offset in [-0.5, 0.5] and the apex
/// log-value correction. Falls back to a plain parabola when a sample is not
/// positive (residual images can dip below zero next to a peak).
fn refine_axis(lo: f64, mid: f64, hi: f64) -> (f64, f64) {
    let (l0, l1, l2, logspace) = if lo > 0.0 && mid > 0.0 && hi > 0.0 {
        (lo.ln(), mid.ln(), hi.ln(), true)
    } else {
        (lo, mid, hi, false)
    };
    let denom = l0 - 2.0 * l1 + l2;
    if denom >= 0.0 || !denom.is_finite() {
        return (0.0, 0.0);
    }
    let delta = 0.5 * (l0 - l2) / denom;
    let delta = delta.clamp(-0.5, 0.5);
    let apex_corr = -(l0 - l2) * (l0 - l2) / (8.0 * denom);
    if logspace {
        (delta, apex_corr)
    } else {
        // parabola on raw values: return the value correction in log space
        // via the ratio so peak intensity stays consistent
        let apex = mid + apex_corr;
        (delta, if apex > 0.0 && mid > 0.0 { (apex / mid).ln() } else { 0.0 })
    }
}

/// Non-maximum suppression with a 3x3 kernel followed by per-axis Gaussian
/// (log-parabola) sub-pixel refinement. A pixel qualifies when strictly
/// greater than its 8 neighbors and at least `i_min`.
pub fn detect_peaks(image: &Image, i_min: f64) -> Vec<Peak> {
    let mut peaks = Vec::new();
    if image.width < 3 || image.height < 3 {
        return peaks;
    }
    for y in 1..image.height - 1 {
        for x in 1..image.width - 1 {
            let v = image.get(x, y);
            if v < i_min {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if image.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) >= v {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let (dx, cx) = refine_axis(image.get(x - 1, y), v, image.get(x + 1, y));
            let (dy, cy) = refine_axis(image.get(x, y - 1), v, image.get(x, y + 1));
            let intensity = if v > 0.0 { v * (cx + cy).exp() } else { v };
            peaks.push(Peak {
                position: Vector2::new(x as f64 + dx, y as f64 + dy),
                intensity,
            });
        }
    }
    peaks
}

/// 3D point minimizing the reprojection error of per-camera pixel
/// observations: a linear seed (DLT rows for pinhole cameras, the linear
/// polynomial part otherwise) polished by Gauss-Newton on the true residual.
/// Returns the point and the max per-camera pixel error, or `None` when the
/// solve degenerates.
pub fn triangulate_point(
    pixels: &[Vector2<f64>],
    cameras: &[Camera],
) -> Option<(Vector3<f64>, f64)> {
    let k = cameras.len();
    assert!(k >= 2, "triangulation needs at least two views");
    assert_eq!(pixels.len(), k);

    // linear seed: 2 rows per camera
    let mut a = DMatrix::zeros(2 * k, 3);
    let mut b = DVector::zeros(2 * k);
    for (ci, cam) in cameras.iter().enumerate() {
        match cam {
            Camera::Pinhole(pin) => {
                for row in 0..2 {
                    let coord = pixels[ci][row];
                    let r = pin.p.row(row) - coord * pin.p.row(2);
                    for col in 0..3 {
                        a[(2 * ci + row, col)] = r[col];
                    }
                    b[2 * ci + row] = -r[3];
                }
            }
            Camera::Polynomial(poly) => {
                for row in 0..2 {
                    for col in 0..3 {
                        a[(2 * ci + row, col)] = poly.a[1 + col][row];
                    }
                    b[2 * ci + row] = pixels[ci][row] - poly.a[0][row];
                }
            }
        }
    }
    let seed = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let mut p = Vector3::new(seed[0], seed[1], seed[2]);

    // Gauss-Newton polish on sum of squared reprojection errors
    for _ in 0..20 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut ok = true;
        for (ci, cam) in cameras.iter().enumerate() {
            let (proj, jac) = match (cam.project(&p), cam.project_jacobian(&p)) {
                (Ok(pr), Ok(j)) => (pr, j),
                _ => {
                    ok = false;
                    break;
                }
            };
            let r = proj - pixels[ci];
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        if !ok {
            return None;
        }
        let step = jtj.try_inverse().map(|inv| inv * jtr)?;
        p -= step;
        if !p.iter().all(|v| v.is_finite()) {
            return None;
        }
        if step.norm() < 1e-12 {
            break;
        }
    }
    let mut err = 0.0f64;
    for (ci, cam) in cameras.iter().enumerate() {
        match cam.project(&p) {
            Ok(proj) => err = err.max((proj - pixels[ci]).norm()),
            Err(_) => return None,
        }
    }
    if !err.is_finite() {
        return None;
    }
    Some((p, err))
}

/// Initial intensity of `m` proposals sharing one reference peak of
/// intensity `i_ref`, over `k` cameras.
pub fn proposal_intensity(i_ref: f64, k: usize, m: usize) -> f64 {
    i_ref * k as f64 / (k as f64 - 1.0 + m as f64)
}

fn dist_to_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

/// Epipolar proposal generation over residual images at t0. Camera 1
/// (index 0) is the reference; peaks must be found in all `K` views. The
/// result is deterministic: reference peaks are handled in raster order and
/// combinations enumerate lexicographically.
pub fn propose(
    residuals: &[Image],
    cameras: &[Camera],
    omega: &Box3,
    params: &ProposalParams,
    existing: &ParticleSet,
) -> Vec<Candidate> {
    assert_eq!(residuals.len(), cameras.len());
    let k = cameras.len();
    let peaks: Vec<Vec<Peak>> = residuals.iter().map(|r| detect_peaks(r, params.i_min)).collect();
    let mut out = Vec::new();
    if k < 2 {
        return out;
    }

    for ref_peak in &peaks[0] {
        let Ok(ray) = cameras[0].ray_through(&ref_peak.position, omega) else {
            continue;
        };
        // corridor peaks per secondary view
        let mut per_view: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
        let mut all_views_hit = true;
        for cam_idx in 1..k {
            let (Ok(a), Ok(b)) = (
                cameras[cam_idx].project(&ray.entry),
                cameras[cam_idx].project(&ray.exit),
            ) else {
                all_views_hit = false;
                break;
            };
            let hits: Vec<usize> = peaks[cam_idx]
                .iter()
                .enumerate()
                .filter(|(_, pk)| dist_to_segment(&pk.position, &a, &b) <= params.epsilon)
                .map(|(i, _)| i)
                .collect();
            if hits.is_empty() {
                all_views_hit = false;
                break;
            }
            per_view.push(hits);
        }
        if !all_views_hit {
            continue;
        }

        // lexicographic enumeration of cross-view combinations, capped
        let mut combo_count: usize = 1;
        for hits in &per_view {
            combo_count = combo_count.saturating_mul(hits.len());
        }
        let combo_count = combo_count.min(params.max_combinations);
        let mut survivors: Vec<Candidate> = Vec::new();
        for combo in 0..combo_count {
            let mut pixels = Vec::with_capacity(k);
            pixels.push(ref_peak.position);
            let mut rem = combo;
            for hits in &per_view {
                let pick = hits[rem % hits.len()];
                rem /= hits.len();
                pixels.push(peaks[pixels.len()][pick].position);
            }
            let Some((p, err)) = triangulate_point(&pixels, cameras) else {
                continue;
            };
            if err > params.epsilon || !omega.contains(&p, params.dedup_radius) {
                continue;
            }
            let p = omega.clamp(&p);
            survivors.push(Candidate { position: p, intensity: 0.0, error: err });
        }

        // suppress near-duplicates: keep the lower-error candidate
        survivors.sort_by(|a, b| a.error.total_cmp(&b.error));
        let mut kept: Vec<Candidate> = Vec::new();
        'cand: for c in survivors {
            for prev in &kept {
                if (prev.position - c.position).norm() < params.dedup_radius {
                    continue 'cand;
                }
            }
            for e in &existing.positions {
                if (e - c.position).norm() < params.dedup_radius {
                    continue 'cand;
                }
            }
            kept.push(c);
        }
        let m = kept.len();
        for mut c in kept {
            c.intensity = proposal_intensity(ref_peak.intensity, k, m);
            if c.intensity > 0.0 {
                out.push(c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{PinholeCamera, PolynomialCamera, SOLOFF_TERMS};
    use crate::scene::{render, BlobKernel};
    use nalgebra::Matrix3x4;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Orthographic-like camera `u = x + s (z - z0)`, `v = y + t (z - z0)`.
    fn shear_camera(s: f64, t: f64, z0: f64) -> Camera {
        shear_camera_off(s, t, z0, 0.0)
    }

    /// Same with a pixel offset so sheared projections stay in frame.
    fn shear_camera_off(s: f64, t: f64, z0: f64, off: f64) -> Camera {
        let mut a = [[0.0; 2]; SOLOFF_TERMS];
        a[0] = [-s * z0 + off, -t * z0 + off];
        a[1] = [1.0, 0.0];
        a[2] = [0.0, 1.0];
        a[3] = [s, t];
        Camera::Polynomial(PolynomialCamera::new(a))
    }

    /// Four-view rig: identity-like reference plus three sheared views.
    fn shear_rig(z0: f64) -> Vec<Camera> {
        vec![
            shear_camera(0.0, 0.0, z0),
            shear_camera(0.6, 0.0, z0),
            shear_camera(-0.6, 0.0, z0),
            shear_camera(0.0, 0.6, z0),
        ]
    }

    #[test]
    fn flat_image_has_no_peaks() {
        let img = Image::from_data(8, 8, vec![0.3; 64]);
        assert!(detect_peaks(&img, 0.1).is_empty());
    }

    #[test]
    fn rendered_blob_detected_subpixel() {
        let cam = Camera::Polynomial(PolynomialCamera::identity());
        let particles = ParticleSet::new(vec![Vector3::new(10.3, 20.7, 0.0)], vec![1.0]);
        let img = render(&particles, &cam, &BlobKernel::new(1.0), 32, 32);
        let peaks = detect_peaks(&img, 0.2);
        assert_eq!(peaks.len(), 1);
        let err = (peaks[0].position - Vector2::new(10.3, 20.7)).norm();
        assert!(err < 0.05, "sub-pixel error {err}");
        assert!((peaks[0].intensity - 1.0).abs() < 0.01, "peak intensity {}", peaks[0].intensity);
    }

    #[test]
    fn two_separated_blobs_give_two_peaks() {
        let cam = Camera::Polynomial(PolynomialCamera::identity());
        let particles = ParticleSet::new(
            vec![Vector3::new(8.0, 16.0, 0.0), Vector3::new(18.0, 16.0, 0.0)],
            vec![1.0, 0.8],
        );
        let img = render(&particles, &cam, &BlobKernel::new(1.0), 32, 32);
        assert_eq!(detect_peaks(&img, 0.2).len(), 2);
    }

    #[test]
    fn triangulate_exact_pinholes() {
        let mut rng = StdRng::seed_from_u64(51);
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(2.0..10.0),
                rng.random_range(2.0..10.0),
                rng.random_range(2.0..10.0),
            );
            let cameras: Vec<Camera> = (0..4)
                .map(|i| {
                    let ang = 0.3 + 0.25 * i as f64;
                    let mut m = Matrix3x4::zeros();
                    m[(0, 0)] = ang.cos();
                    m[(0, 2)] = ang.sin();
                    m[(1, 1)] = 1.0;
                    m[(2, 2)] = 0.01;
                    m[(2, 3)] = 1.0;
                    Camera::Pinhole(PinholeCamera::new(m))
                })
                .collect();
            let pixels: Vec<Vector2<f64>> =
                cameras.iter().map(|c| c.project(&p).unwrap()).collect();
            let (rec, err) = triangulate_point(&pixels, &cameras).unwrap();
            assert!((rec - p).norm() < 1e-9, "recovered {rec:?} for {p:?}");
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn triangulate_perturbed_pixels() {
        let mut rng = StdRng::seed_from_u64(52);
        let cameras = shear_rig(16.0);
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(8.0..24.0),
                rng.random_range(8.0..24.0),
                rng.random_range(8.0..24.0),
            );
            let pixels: Vec<Vector2<f64>> = cameras
                .iter()
                .map(|c| {
                    let mut px = c.project(&p).unwrap();
                    px.x += rng.random_range(-0.3..0.3);
                    px.y += rng.random_range(-0.3..0.3);
                    px
                })
                .collect();
            let (rec, err) = triangulate_point(&pixels, &cameras).unwrap();
            assert!(err <= 0.3 * f64::sqrt(2.0) + 1e-9, "error {err}");
            assert!((rec - p).norm() < 1.5, "drifted {} voxels", (rec - p).norm());
        }
    }

    #[test]
    fn intensity_formula_examples() {
        // isolated particle: full reference intensity
        assert_eq!(proposal_intensity(0.8, 4, 1), 0.8);
        // five putative matches over four cameras: half each
        assert_eq!(proposal_intensity(1.0, 4, 5), 0.5);
    }

    #[test]
    fn propose_on_zero_residuals_is_empty() {
        let cameras = shear_rig(16.0);
        let residuals = vec![Image::zeros(32, 32); 4];
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let out = propose(
            &residuals,
            &cameras,
            &omega,
            &ProposalParams::default(),
            &ParticleSet::empty(),
        );
        assert!(out.is_empty());
    }

    #[test]
    fn single_particle_proposed_with_full_intensity() {
        let cameras = shear_rig(16.0);
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let truth = ParticleSet::new(vec![Vector3::new(14.2, 17.8, 13.1)], vec![0.9]);
        let kernel = BlobKernel::new(1.0);
        let residuals: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 40, 40)).collect();
        let out = propose(
            &residuals,
            &cameras,
            &omega,
            &ProposalParams { i_min: 0.2, ..Default::default() },
            &ParticleSet::empty(),
        );
        assert_eq!(out.len(), 1, "expected exactly one candidate, got {}", out.len());
        assert!((out[0].position - truth.positions[0]).norm() < 0.1);
        // m = 1: intensity equals the detected reference peak intensity
        assert!((out[0].intensity - 0.9).abs() < 0.02);
    }

    #[test]
    fn stacked_particles_share_reference_intensity() {
        // two particles on the same reference line of sight; each is real,
        // so each view sees two corridor peaks and m = 2 survives
        let cameras = shear_rig(16.0);
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let truth = ParticleSet::new(
            vec![Vector3::new(15.0, 15.0, 8.0), Vector3::new(15.0, 15.0, 24.0)],
            vec![1.0, 1.0],
        );
        let kernel = BlobKernel::new(1.0);
        let residuals: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 40, 40)).collect();
        let out = propose(
            &residuals,
            &cameras,
            &omega,
            &ProposalParams { i_min: 0.2, epsilon: 1.0, ..Default::default() },
            &ParticleSet::empty(),
        );
        assert_eq!(out.len(), 2, "both stacked particles should survive");
        for c in &out {
            // reference peak is two overlapping blobs (intensity ~2) split
            // over m = 2: K/(K-1+m) = 4/5
            let expect = proposal_intensity(2.0, 4, 2);
            assert!(
                (c.intensity - expect).abs() < 0.1,
                "intensity {} vs {expect}",
                c.intensity
            );
        }
    }

    #[test]
    fn duplicates_of_existing_particles_are_suppressed() {
        let cameras = shear_rig(16.0);
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let truth = ParticleSet::new(vec![Vector3::new(14.2, 17.8, 13.1)], vec![0.9]);
        let kernel = BlobKernel::new(1.0);
        let residuals: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 40, 40)).collect();
        let out = propose(
            &residuals,
            &cameras,
            &omega,
            &ProposalParams::default(),
            &truth, // the particle is already reconstructed
        );
        assert!(out.is_empty());
    }

    #[test]
    fn proposer_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(53);
        let cameras = shear_rig(16.0);
        let omega = Box3::from_dims(32.0, 32.0, 32.0);
        let truth = ParticleSet::new(
            (0..40)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(4.0..28.0),
                        rng.random_range(4.0..28.0),
                        rng.random_range(4.0..28.0),
                    )
                })
                .collect(),
            (0..40).map(|_| rng.random_range(0.5..1.0)).collect(),
        );
        let kernel = BlobKernel::new(1.0);
        let residuals: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 48, 48)).collect();
        let params = ProposalParams::default();
        let a = propose(&residuals, &cameras, &omega, &params, &ParticleSet::empty());
        let b = propose(&residuals, &cameras, &omega, &params, &ParticleSet::empty());
        assert_eq!(a, b);
    }

    #[test]
    fn candidates_satisfy_error_and_domain_invariants() {
        let mut rng = StdRng::seed_from_u64(54);
        let cameras = shear_rig(16.0);
        let omega = Box3::from_dims(48.0, 48.0, 32.0);
        let truth = ParticleSet::new(
            (0..60)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(2.0..46.0),
                        rng.random_range(2.0..46.0),
                        rng.random_range(2.0..30.0),
                    )
                })
                .collect(),
            (0..60).map(|_| rng.random_range(0.5..1.0)).collect(),
        );
        let kernel = BlobKernel::new(1.0);
        let residuals: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 72, 60)).collect();
        let params = ProposalParams { epsilon: 1.0, ..Default::default() };
        let out = propose(&residuals, &cameras, &omega, &params, &ParticleSet::empty());
        assert!(!out.is_empty());
        for c in &out {
            assert!(c.error <= params.epsilon);
            assert!(c.intensity > 0.0);
            assert!(omega.contains(&c.position, 1e-9));
        }
    }

    #[test]
    fn proposer_recall_on_low_density_scene() {
        // 0.05 ppp at 64x64 reference pixels: ~200 particles. Overlapping
        // blobs hide some peaks from a single detection pass, so the
        // proposer is exercised the way the pipeline runs it: alternating
        // proposal rounds against residual images with already-found
        // candidates subtracted, relaxing the tolerance across rounds.
        let mut rng = StdRng::seed_from_u64(55);
        let cameras: Vec<Camera> = vec![
            shear_camera_off(0.0, 0.0, 16.0, 13.0),
            shear_camera_off(0.6, 0.0, 16.0, 13.0),
            shear_camera_off(-0.6, 0.0, 16.0, 13.0),
            shear_camera_off(0.0, 0.6, 16.0, 13.0),
        ];
        let omega = Box3::from_dims(64.0, 64.0, 32.0);
        let n = (0.05 * 64.0 * 64.0) as usize;
        let truth = ParticleSet::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(1.0..63.0),
                        rng.random_range(1.0..63.0),
                        rng.random_range(1.0..31.0),
                    )
                })
                .collect(),
            (0..n).map(|_| rng.random_range(0.5..1.0)).collect(),
        );
        let kernel = BlobKernel::new(1.0);
        let observed: Vec<Image> =
            cameras.iter().map(|c| render(&truth, c, &kernel, 92, 92)).collect();

        let mut accumulated = ParticleSet::empty();
        for round in 0..6 {
            let epsilon = 0.8 + 0.24 * round as f64; // 0.8 relaxed towards 2.0
            let residuals: Vec<Image> = cameras
                .iter()
                .zip(&observed)
                .map(|(c, obs)| {
                    let pred = render(&accumulated, c, &kernel, 92, 92);
                    crate::scene::residual(obs, &pred).unwrap()
                })
                .collect();
            let out = propose(
                &residuals,
                &cameras,
                &omega,
                &ProposalParams { epsilon, i_min: 0.15, ..Default::default() },
                &accumulated,
            );
            for c in out {
                accumulated.push(c.position, c.intensity);
            }
        }
        let mut found = 0;
        for t in &truth.positions {
            if accumulated.positions.iter().any(|c| (c - t).norm() < 1.0) {
                found += 1;
            }
        }
        let recall = found as f64 / n as f64;
        // The proposer alone saturates around 0.9 here: pairs that overlap
        // in every view triangulate with biased positions and split
        // intensities, and only the joint optimization separates them (the
        // end-to-end suite holds the full method to >= 0.95 recall at this
        // density). This audit pins the proposer's own cumulative recall.
        assert!(recall >= 0.85, "proposer recall {recall} over {n} particles");
    }
}
