//! Quantitative evaluation: endpoint / angular / divergence errors of the
//! flow and one-to-one precision/recall of the particle reconstruction.

use crate::error::{Error, Result};
use crate::motion::MotionGrid;
use crate::scene::ParticleSet;
use serde::{Deserialize, Serialize};

/// Flow-field error statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowMetrics {
    /// Mean endpoint error `|u_est - u_true|` over vertices, voxels.
    pub aee: f64,
    /// Mean 3D angle between estimate and truth, degrees; vertices where
    /// either vector is shorter than 1e-9 are skipped.
    pub aae: f64,
    /// Mean absolute per-voxel divergence of the estimate.
    pub aad: f64,
}

/// Particle reconstruction quality under greedy one-to-one matching.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParticleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub threshold: f64,
}

/// Compare two motion grids. When dimensions differ the truth is resampled
/// onto the estimate's grid first.
pub fn flow_metrics(estimate: &MotionGrid, truth: &MotionGrid) -> Result<FlowMetrics> {
    let resampled;
    let truth = if truth.dims != estimate.dims || (truth.spacing - estimate.spacing).abs() > 1e-12 {
        resampled = truth.prolongate(estimate.dims, estimate.spacing);
        &resampled
    } else {
        truth
    };
    if truth.dims != estimate.dims {
        return Err(Error::DimensionMismatch(format!(
            "flow grids {:?} vs {:?}",
            estimate.dims, truth.dims
        )));
    }
    let n = estimate.vertex_count();
    let mut aee = 0.0;
    let mut aae = 0.0;
    let mut angle_count = 0usize;
    for v in 0..n {
        let a = estimate.vertex_value(v);
        let b = truth.vertex_value(v);
        aee += (a - b).norm();
        let (na, nb) = (a.norm(), b.norm());
        if na >= 1e-9 && nb >= 1e-9 {
            let cosine = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
            aae += cosine.acos().to_degrees();
            angle_count += 1;
        }
    }
    aee /= n as f64;
    aae = if angle_count > 0 { aae / angle_count as f64 } else { 0.0 };

    let [vx, vy, vz] = estimate.voxel_dims();
    let mut aad = 0.0;
    for k in 0..vz {
        for j in 0..vy {
            for i in 0..vx {
                aad += estimate.voxel_divergence([i, j, k]).abs();
            }
        }
    }
    aad /= (vx * vy * vz) as f64;
    Ok(FlowMetrics { aee, aae, aad })
}

/// Greedy one-to-one matching by ascending pairwise distance among pairs
/// within the threshold. Precision = matched / |estimate|, recall =
/// matched / |truth| (an empty side scores 1.0 for its own ratio).
pub fn particle_metrics(
    estimate: &ParticleSet,
    truth: &ParticleSet,
    threshold: f64,
) -> ParticleMetrics {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in estimate.positions.iter().enumerate() {
        for (ti, t) in truth.positions.iter().enumerate() {
            let d = (e - t).norm();
            if d <= threshold {
                pairs.push((d, ei, ti));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut est_used = vec![false; estimate.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut matched = 0usize;
    for (_, ei, ti) in pairs {
        if !est_used[ei] && !truth_used[ti] {
            est_used[ei] = true;
            truth_used[ti] = true;
            matched += 1;
        }
    }
    let precision = if estimate.is_empty() { 1.0 } else { matched as f64 / estimate.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { matched as f64 / truth.len() as f64 };
    ParticleMetrics { precision, recall, matched, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_grid(rng: &mut impl Rng, dims: [usize; 3], spacing: f64) -> MotionGrid {
        let mut g = MotionGrid::zeros(dims, spacing);
        for c in g.coeffs.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn identical_grids_have_zero_errors() {
        let mut rng = StdRng::seed_from_u64(61);
        let g = random_grid(&mut rng, [5, 4, 4], 1.0);
        let m = flow_metrics(&g, &g).unwrap();
        assert_eq!(m.aee, 0.0);
        // acos of a unit cosine picks up sqrt rounding
        assert!(m.aae < 1e-6);
        // AAD is the divergence of the (random) estimate itself
        assert!(m.aad > 0.0);
    }

    #[test]
    fn constant_offset_gives_exact_aee() {
        let mut rng = StdRng::seed_from_u64(62);
        let truth = random_grid(&mut rng, [4, 4, 4], 1.0);
        let mut est = truth.clone();
        for v in 0..est.vertex_count() {
            est.coeffs[3 * v] += 1.0;
        }
        let m = flow_metrics(&est, &truth).unwrap();
        assert_relative_eq!(m.aee, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(63);
        let truth = random_grid(&mut rng, [4, 5, 3], 1.0);
        let est = random_grid(&mut rng, [4, 5, 3], 1.0);
        let m = flow_metrics(&est, &truth).unwrap();
        // per-vertex oracle
        let mut aee = 0.0;
        let mut aae = 0.0;
        let mut count = 0;
        for v in 0..truth.vertex_count() {
            let a = est.vertex_value(v);
            let b = truth.vertex_value(v);
            aee += (a - b).norm();
            if a.norm() >= 1e-9 && b.norm() >= 1e-9 {
                aae += (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees();
                count += 1;
            }
        }
        assert_relative_eq!(m.aee, aee / truth.vertex_count() as f64, epsilon = 1e-12);
        assert_relative_eq!(m.aae, aae / count as f64, epsilon = 1e-12);
    }

    #[test]
    fn truth_is_resampled_when_dims_differ() {
        // a linear field is represented exactly on both grids, so the
        // resampling is exact and the error is zero
        let mut coarse = MotionGrid::zeros([3, 3, 3], 2.0);
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    let p = coarse.vertex_position(i, j, k);
                    let v = coarse.vertex_index(i, j, k);
                    coarse.coeffs[3 * v] = 0.3 * p.x - 0.1 * p.y;
                    coarse.coeffs[3 * v + 1] = 0.2 * p.z;
                    coarse.coeffs[3 * v + 2] = -0.4 * p.x;
                }
            }
        }
        let fine = coarse.prolongate([5, 5, 5], 1.0);
        let m = flow_metrics(&fine, &coarse).unwrap();
        assert!(m.aee < 1e-12);
    }

    #[test]
    fn particle_metrics_examples() {
        let mut rng = StdRng::seed_from_u64(64);
        let truth = ParticleSet::new(
            (0..90)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..50.0),
                        rng.random_range(0.0..50.0),
                        rng.random_range(0.0..50.0),
                    )
                })
                .collect(),
            vec![1.0; 90],
        );
        let m = particle_metrics(&truth, &truth, 1.0);
        assert_eq!((m.precision, m.recall), (1.0, 1.0));

        // ten ghosts far from everything
        let mut est = truth.clone();
        for i in 0..10 {
            est.push(Vector3::new(100.0 + 3.0 * i as f64, 100.0, 100.0), 1.0);
        }
        let m = particle_metrics(&est, &truth, 1.0);
        assert_relative_eq!(m.precision, 0.9, epsilon = 1e-12);
        assert_relative_eq!(m.recall, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall() {
        let mut rng = StdRng::seed_from_u64(65);
        let a = ParticleSet::new(
            (0..30)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                    )
                })
                .collect(),
            vec![1.0; 30],
        );
        let b = ParticleSet::new(
            (0..40)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                        rng.random_range(0.0..20.0),
                    )
                })
                .collect(),
            vec![1.0; 40],
        );
        let ab = particle_metrics(&a, &b, 1.5);
        let ba = particle_metrics(&b, &a, 1.5);
        assert_relative_eq!(ab.precision, ba.recall, epsilon = 1e-12);
        assert_relative_eq!(ab.recall, ba.precision, epsilon = 1e-12);
    }

    /// Maximum-cardinality bipartite matching via augmenting paths, the
    /// optimal-assignment oracle for small instances.
    fn optimal_match_count(est: &ParticleSet, truth: &ParticleSet, threshold: f64) -> usize {
        let adj: Vec<Vec<usize>> = est
            .positions
            .iter()
            .map(|e| {
                truth
                    .positions
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| (e - *t).norm() <= threshold)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let mut truth_owner: Vec<Option<usize>> = vec![None; truth.len()];
        fn augment(
            e: usize,
            adj: &[Vec<usize>],
            owner: &mut [Option<usize>],
            visited: &mut [bool],
        ) -> bool {
            for &t in &adj[e] {
                if visited[t] {
                    continue;
                }
                visited[t] = true;
                if owner[t].is_none() || augment(owner[t].unwrap(), adj, owner, visited) {
                    owner[t] = Some(e);
                    return true;
                }
            }
            false
        }
        let mut count = 0;
        for e in 0..est.len() {
            let mut visited = vec![false; truth.len()];
            if augment(e, &adj, &mut truth_owner, &mut visited) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn greedy_matches_optimal_on_small_perturbed_sets() {
        let mut rng = StdRng::seed_from_u64(66);
        for _ in 0..50 {
            let n = rng.random_range(5..20);
            let truth = ParticleSet::new(
                (0..n)
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(0.0..30.0),
                            rng.random_range(0.0..30.0),
                            rng.random_range(0.0..30.0),
                        )
                    })
                    .collect(),
                vec![1.0; n],
            );
            let mut est = ParticleSet::empty();
            for p in &truth.positions {
                if rng.random_bool(0.85) {
                    est.push(
                        p + Vector3::new(
                            rng.random_range(-0.4..0.4),
                            rng.random_range(-0.4..0.4),
                            rng.random_range(-0.4..0.4),
                        ),
                        1.0,
                    );
                }
            }
            for _ in 0..rng.random_range(0..4) {
                est.push(
                    Vector3::new(
                        rng.random_range(0.0..30.0),
                        rng.random_range(0.0..30.0),
                        rng.random_range(0.0..30.0),
                    ),
                    1.0,
                );
            }
            let greedy = particle_metrics(&est, &truth, 1.0).matched;
            let optimal = optimal_match_count(&est, &truth, 1.0);
            assert_eq!(greedy, optimal, "greedy {greedy} vs optimal {optimal}");
        }
    }
}
