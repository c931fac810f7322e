//! Total variational energy `E = 1/2 E_D + (lambda/2) E_S + mu E_Sp` and the
//! analytic gradients of its smooth part.
//!
//! The data term compares rendered blob images against the observed images of
//! all cameras at both time steps; the second time step renders particles
//! displaced by the motion field, which couples particles and flow. Gradients
//! w.r.t. particle positions chain through the camera Jacobian and, for the
//! warped term, through `I + du/dp` of the trilinear field. Gradients w.r.t.
//! flow coefficients distribute over the 8 enclosing vertices of each
//! particle with its trilinear weights.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::motion::{self, MotionGrid};
use crate::prox::SparsityNorm;
use crate::scene::{render_warped, residual, render, BlobKernel, Image, ImageSet, ParticleSet};
use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

/// Incompressibility handling: hard projection (the divergence indicator is
/// enforced by the optimizer's prox step) or quadratic penalty with weight
/// `alpha` folded into the smooth part.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DivergenceMode {
    Hard,
    Soft(f64),
}

/// Weights and scales of the energy.
#[derive(Debug, Clone, Copy)]
pub struct EnergyParams {
    /// Smoothness weight (viscosity-like).
    pub lambda: f64,
    /// Sparsity weight.
    pub mu: f64,
    pub norm: SparsityNorm,
    pub divergence: DivergenceMode,
    /// Current blob standard deviation in pixels.
    pub sigma: f64,
}

/// Value and per-block gradients of the smooth part at one state.
#[derive(Debug, Clone)]
pub struct EnergyState {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_c: Vec<f64>,
    pub grad_u: Vec<f64>,
}

/// Raw data term `E_D` (Eq. 5 without the global 1/2) and its gradients.
#[derive(Debug, Clone)]
pub struct DataTerm {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_c: Vec<f64>,
    pub grad_u: Vec<f64>,
}

/// Per-particle pixel moments against one residual image:
/// `s0 = sum_x r(x) G(x)` and `s1 = sum_x r(x) G(x) (uv - x)`.
struct BlobMoments {
    s0: f64,
    s1: Vector2<f64>,
}

/// One camera/time-step contribution: squared-residual sum plus per-particle
/// moments and projection data needed for the chain rule.
struct TermContribution {
    value: f64,
    /// None when the particle's projection is degenerate (it is skipped).
    per_particle: Vec<Option<(BlobMoments, nalgebra::Matrix2x3<f64>)>>,
}

fn term_contribution(
    centers: &[Option<Vector2<f64>>],
    jacobians: &[Option<nalgebra::Matrix2x3<f64>>],
    intensities: &[f64],
    observed: &Image,
    kernel: &BlobKernel,
    with_moments: bool,
) -> TermContribution {
    // predicted image from the precomputed centers
    let mut predicted = Image::zeros(observed.width, observed.height);
    for (i, center) in centers.iter().enumerate() {
        if let Some(uv) = center {
            splat_for_energy(&mut predicted, uv, intensities[i], kernel);
        }
    }
    // signed residual r = predicted - observed, so dE/dpredicted = 2r
    let mut value = 0.0;
    let mut res = predicted;
    for (r, o) in res.data.iter_mut().zip(&observed.data) {
        *r -= o;
        value += *r * *r;
    }
    let per_particle = if with_moments {
        centers
            .iter()
            .enumerate()
            .map(|(i, center)| {
                let (uv, jac) = match (center, &jacobians[i]) {
                    (Some(uv), Some(j)) => (uv, *j),
                    _ => return None,
                };
                Some((blob_moments(&res, uv, kernel), jac))
            })
            .collect()
    } else {
        Vec::new()
    };
    TermContribution { value, per_particle }
}

/// Same truncated splat as `scene::render`, kept local so the energy and the
/// renderer can never disagree on the pixel set.
fn splat_for_energy(img: &mut Image, center: &Vector2<f64>, c: f64, kernel: &BlobKernel) {
    let r = kernel.radius();
    let inv_two_sigma2 = 1.0 / (2.0 * kernel.sigma * kernel.sigma);
    let x0 = (center.x - r).ceil().max(0.0) as usize;
    let x1 = (center.x + r).floor().min(img.width as f64 - 1.0);
    let y0 = (center.y - r).ceil().max(0.0) as usize;
    let y1 = (center.y + r).floor().min(img.height as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let r2 = r * r;
    for y in y0..=y1 {
        let dy = y as f64 - center.y;
        let wy = (-dy * dy * inv_two_sigma2).exp();
        let row = y * img.width;
        for x in x0..=x1 {
            let dx = x as f64 - center.x;
            if dx * dx + dy * dy <= r2 {
                img.data[row + x] += c * (-dx * dx * inv_two_sigma2).exp() * wy;
            }
        }
    }
}

fn blob_moments(res: &Image, center: &Vector2<f64>, kernel: &BlobKernel) -> BlobMoments {
    let r = kernel.radius();
    let inv_two_sigma2 = 1.0 / (2.0 * kernel.sigma * kernel.sigma);
    let mut m = BlobMoments { s0: 0.0, s1: Vector2::zeros() };
    let x0 = (center.x - r).ceil().max(0.0) as usize;
    let x1 = (center.x + r).floor().min(res.width as f64 - 1.0);
    let y0 = (center.y - r).ceil().max(0.0) as usize;
    let y1 = (center.y + r).floor().min(res.height as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
        return m;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let r2 = r * r;
    for y in y0..=y1 {
        let dy = y as f64 - center.y;
        let wy = (-dy * dy * inv_two_sigma2).exp();
        let row = y * res.width;
        for x in x0..=x1 {
            let dx = x as f64 - center.x;
            if dx * dx + dy * dy <= r2 {
                let rg = res.data[row + x] * (-dx * dx * inv_two_sigma2).exp() * wy;
                m.s0 += rg;
                // (uv - x) with x the pixel center
                m.s1.x += rg * (-dx);
                m.s1.y += rg * (-dy);
            }
        }
    }
    m
}

/// `E_D` restricted to the selected time steps, with gradients. The public
/// [`data_term`] uses both; the sequential ablation drops the warped term.
pub fn data_term_masked(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    images: &ImageSet,
    kernel: &BlobKernel,
    include_t0: bool,
    include_t1: bool,
    with_gradients: bool,
) -> Result<DataTerm> {
    let k = cameras.len();
    if k < 2 {
        return Err(Error::InvalidImageSet(format!("need at least 2 cameras, got {k}")));
    }
    if images.num_cameras() != k {
        return Err(Error::InvalidImageSet(format!(
            "{} cameras but {} image pairs",
            k,
            images.num_cameras()
        )));
    }
    let q = particles.len();
    let inv_k = 1.0 / k as f64;

    // per-particle projection data, shared across cameras of one time step
    let centers_t0: Vec<Vec<Option<Vector2<f64>>>>;
    let jac_t0: Vec<Vec<Option<nalgebra::Matrix2x3<f64>>>>;
    let mut warped_chain: Vec<Option<Matrix3<f64>>> = Vec::new();
    let mut warp_weights: Vec<([usize; 8], [f64; 8])> = Vec::new();
    let centers_t1: Vec<Vec<Option<Vector2<f64>>>>;
    let jac_t1: Vec<Vec<Option<nalgebra::Matrix2x3<f64>>>>;

    let project_all = |pos: &[Vector3<f64>]| {
        let centers: Vec<Vec<Option<Vector2<f64>>>> = cameras
            .iter()
            .map(|cam| pos.iter().map(|p| cam.project(p).ok()).collect())
            .collect();
        let jacs: Vec<Vec<Option<nalgebra::Matrix2x3<f64>>>> = if with_gradients {
            cameras
                .iter()
                .map(|cam| pos.iter().map(|p| cam.project_jacobian(p).ok()).collect())
                .collect()
        } else {
            vec![Vec::new(); cameras.len()]
        };
        (centers, jacs)
    };

    if include_t0 {
        let (c, j) = project_all(&particles.positions);
        centers_t0 = c;
        jac_t0 = j;
    } else {
        centers_t0 = Vec::new();
        jac_t0 = Vec::new();
    }
    if include_t1 {
        let mut warped = Vec::with_capacity(q);
        for p in &particles.positions {
            let (u, du) = grid.eval_with_jacobian(p);
            warped.push(p + u);
            if with_gradients {
                warped_chain.push(Some(Matrix3::identity() + du));
                warp_weights.push(grid.vertex_weights(p));
            }
        }
        let (c, j) = project_all(&warped);
        centers_t1 = c;
        jac_t1 = j;
    } else {
        centers_t1 = Vec::new();
        jac_t1 = Vec::new();
    }

    // one task per (time step, camera); each is internally deterministic and
    // they combine in fixed order below
    let mut tasks: Vec<(usize, usize)> = Vec::new();
    if include_t0 {
        tasks.extend((0..k).map(|i| (0, i)));
    }
    if include_t1 {
        tasks.extend((0..k).map(|i| (1, i)));
    }
    let contributions: Vec<TermContribution> = tasks
        .par_iter()
        .map(|&(t, cam)| {
            let (centers, jacs, observed) = if t == 0 {
                (&centers_t0[cam], &jac_t0[cam], &images.t0[cam])
            } else {
                (&centers_t1[cam], &jac_t1[cam], &images.t1[cam])
            };
            term_contribution(
                centers,
                jacs,
                &particles.intensities,
                observed,
                kernel,
                with_gradients,
            )
        })
        .collect();

    let mut out = DataTerm {
        value: 0.0,
        grad_p: vec![0.0; 3 * q],
        grad_c: vec![0.0; q],
        grad_u: vec![0.0; grid.coeffs.len()],
    };
    let inv_sigma2 = 1.0 / (kernel.sigma * kernel.sigma);
    for (&(t, _cam), contrib) in tasks.iter().zip(&contributions) {
        out.value += inv_k * contrib.value;
        if !with_gradients {
            continue;
        }
        for (i, entry) in contrib.per_particle.iter().enumerate() {
            let Some((m, jac)) = entry else { continue };
            let c_i = particles.intensities[i];
            // dE/dc = (2/K) sum r G;  dE/duv = -(2 c / (K sigma^2)) s1
            out.grad_c[i] += 2.0 * inv_k * m.s0;
            let g_pix = -(2.0 * c_i * inv_k * inv_sigma2) * m.s1;
            let g_pos = jac.transpose() * g_pix;
            if t == 0 {
                for a in 0..3 {
                    out.grad_p[3 * i + a] += g_pos[a];
                }
            } else {
                let chain = warped_chain[i].as_ref().expect("warped chain for t1");
                let g_p = chain.transpose() * g_pos;
                for a in 0..3 {
                    out.grad_p[3 * i + a] += g_p[a];
                }
                let (idx, w) = &warp_weights[i];
                for n in 0..8 {
                    for l in 0..3 {
                        out.grad_u[3 * idx[n] + l] += w[n] * g_pos[l];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full two-time-step data term `E_D` with gradients.
pub fn data_term(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    images: &ImageSet,
    kernel: &BlobKernel,
) -> Result<DataTerm> {
    data_term_masked(particles, grid, cameras, images, kernel, true, true, true)
}

/// Smooth part of the smoothness term `E_S` with gradient: always the
/// quadratic flow-gradient integral; in soft mode also `alpha |div u|^2`.
/// (In hard mode the divergence indicator lives in the optimizer's `F_u`.)
pub fn smoothness_term(grid: &MotionGrid, params: &EnergyParams) -> (f64, Vec<f64>) {
    let (mut value, mut grad) = motion::gradient_energy(grid);
    if let DivergenceMode::Soft(alpha) = params.divergence {
        if alpha != 0.0 {
            let (dv, dg) = motion::divergence_squared(grid);
            value += alpha * dv;
            for (g, d) in grad.iter_mut().zip(&dg) {
                *g += alpha * d;
            }
        }
    }
    (value, grad)
}

/// `E_Sp = sum_i |c_i|_norm + indicator(c_i >= 0)`; infinite when any
/// intensity is negative.
pub fn sparsity_term(intensities: &[f64], norm: SparsityNorm) -> f64 {
    let mut sum = 0.0;
    for &c in intensities {
        if c < 0.0 {
            return f64::INFINITY;
        }
        sum += match norm {
            SparsityNorm::L0 => {
                if c != 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SparsityNorm::L1 => c,
        };
    }
    sum
}

/// Smooth part `H = 1/2 E_D + (lambda/2) E_S,smooth` with per-block
/// gradients. This is the function the optimizer takes explicit steps on.
pub fn smooth_part(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    images: &ImageSet,
    params: &EnergyParams,
    include_t0: bool,
    include_t1: bool,
    with_gradients: bool,
) -> Result<EnergyState> {
    let kernel = BlobKernel::new(params.sigma);
    let data = data_term_masked(
        particles,
        grid,
        cameras,
        images,
        &kernel,
        include_t0,
        include_t1,
        with_gradients,
    )?;
    let (s_value, s_grad) = smoothness_term(grid, params);
    let mut state = EnergyState {
        value: 0.5 * data.value + 0.5 * params.lambda * s_value,
        grad_p: data.grad_p,
        grad_c: data.grad_c,
        grad_u: data.grad_u,
    };
    if with_gradients {
        for g in state.grad_p.iter_mut() {
            *g *= 0.5;
        }
        for g in state.grad_c.iter_mut() {
            *g *= 0.5;
        }
        for (g, s) in state.grad_u.iter_mut().zip(&s_grad) {
            *g = 0.5 * *g + 0.5 * params.lambda * s;
        }
    } else {
        state.grad_p.clear();
        state.grad_c.clear();
        state.grad_u.clear();
    }
    Ok(state)
}

/// Total energy `1/2 E_D + (lambda/2) E_S + mu E_Sp` with the smooth-part
/// gradients. Infinite when an intensity is negative; the hard-mode
/// divergence indicator is accounted by the optimizer, not here.
pub fn total_energy(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    images: &ImageSet,
    params: &EnergyParams,
) -> Result<EnergyState> {
    let mut state =
        smooth_part(particles, grid, cameras, images, params, true, true, true)?;
    state.value += params.mu * sparsity_term(&particles.intensities, params.norm);
    Ok(state)
}

/// Residual images `observed - predicted` at t0 for the proposal generator.
pub fn residuals_t0(
    particles: &ParticleSet,
    cameras: &[Camera],
    images: &ImageSet,
    kernel: &BlobKernel,
) -> Result<Vec<Image>> {
    cameras
        .iter()
        .zip(&images.t0)
        .map(|(cam, obs)| {
            let predicted = render(particles, cam, kernel, obs.width, obs.height);
            residual(obs, &predicted)
        })
        .collect()
}

/// Warped residual images at t1 (diagnostics).
pub fn residuals_t1(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    images: &ImageSet,
    kernel: &BlobKernel,
) -> Result<Vec<Image>> {
    cameras
        .iter()
        .zip(&images.t1)
        .map(|(cam, obs)| {
            let predicted = render_warped(particles, grid, cam, kernel, obs.width, obs.height);
            residual(obs, &predicted)
        })
        .collect()
}
