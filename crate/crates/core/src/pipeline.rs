//! Full reconstruction pipeline: a two-fold coarse-to-fine schedule over the
//! blob scale and the grid resolution, alternating candidate-particle
//! proposals with iPALM energy minimization.
//!
//! Per level (coarse to fine): set the blob scale and grid dims, carry the
//! flow up by prolongation, propose particles from the current t0 residuals
//! (the raw inputs on the first pass), minimize, and discard zero-intensity
//! particles. The triangulation tolerance relaxes linearly across levels.
//! After the last level the flow is upsampled to the output resolution and,
//! in hard mode, projected once at full tolerance.

use crate::camera::Camera;
use crate::energy::{self, DivergenceMode, EnergyParams};
use crate::error::{Error, Result};
use crate::geometry::Box3;
use crate::io;
use crate::ipalm::{self, Block, BlockState, ConvergenceReport, IpalmOptions, IpalmProblem, IpalmVars};
use crate::motion::MotionGrid;
use crate::prox::{prox_intensity, PoissonSolver, SparsityNorm};
use crate::scene::{gaussian_blur, BlobKernel, ImageSet, ParticleSet};
use crate::triangulate::{propose, ProposalParams};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// All tunables of the solver. Defaults follow the reference settings:
/// ten pyramid levels at factor 0.94, lambda 0.04, mu 1e-4, L0 sparsity,
/// hard divergence, triangulation tolerance relaxed from 0.8 to 2.0 px,
/// ten-fold grid subsampling, at most 40 inner iterations per level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub pyramid_levels: usize,
    pub pyramid_factor: f64,
    /// Finest grid spacing in voxels (the grid subsample factor).
    pub grid_subsample: f64,
    pub lambda: f64,
    pub mu: f64,
    pub norm: SparsityNorm,
    pub divergence: DivergenceMode,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Peak detection threshold for the proposal generator.
    pub i_min: f64,
    pub max_inner_iterations: usize,
    pub convergence_tol: f64,
    /// Blob scale at the finest level; the schedule anneals down to it.
    pub sigma_final: f64,
    /// Blob scale of the observed images. At coarser levels the observed
    /// images are pre-blurred to the level's blob scale so the rendered
    /// model can explain them exactly.
    pub sigma_input: f64,
    /// Inertia coefficient.
    pub tau: f64,
    /// In-loop pressure solve: relative tolerance and iteration cap.
    pub loop_pcg_tol: f64,
    pub loop_pcg_iters: usize,
    /// Final full-tolerance projection.
    pub final_pcg_tol: f64,
    /// Output grid spacing; `None` upsamples to full volume resolution.
    pub output_spacing: Option<f64>,
    pub min_grid_dims: usize,
    pub max_combinations: usize,
    pub dedup_radius: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            pyramid_levels: 10,
            pyramid_factor: 0.94,
            grid_subsample: 10.0,
            lambda: 0.04,
            mu: 1e-4,
            norm: SparsityNorm::L0,
            divergence: DivergenceMode::Hard,
            epsilon_start: 0.8,
            epsilon_end: 2.0,
            i_min: 0.2,
            max_inner_iterations: 40,
            convergence_tol: 1e-6,
            sigma_final: 1.0,
            sigma_input: 1.0,
            tau: 1.0 / f64::sqrt(2.0),
            loop_pcg_tol: 1e-3,
            loop_pcg_iters: 20,
            final_pcg_tol: 1e-10,
            output_spacing: None,
            min_grid_dims: 4,
            max_combinations: 64,
            dedup_radius: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_factor > 0.0 && self.pyramid_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pyramid factor must be in (0, 1), got {}",
                self.pyramid_factor
            )));
        }
        if self.pyramid_levels < 1 {
            return Err(Error::InvalidConfig("need at least one pyramid level".into()));
        }
        if self.epsilon_start > self.epsilon_end {
            return Err(Error::InvalidConfig(format!(
                "epsilon schedule must be non-decreasing, got {} > {}",
                self.epsilon_start, self.epsilon_end
            )));
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::InvalidConfig("weights must be nonnegative".into()));
        }
        if self.grid_subsample <= 0.0 || self.sigma_final <= 0.0 {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        Ok(())
    }

    fn sigma_at(&self, level: usize) -> f64 {
        let back = (self.pyramid_levels - 1 - level) as i32;
        (self.sigma_final * self.pyramid_factor.powi(-back)).max(self.sigma_final)
    }

    fn spacing_at(&self, level: usize) -> f64 {
        let back = (self.pyramid_levels - 1 - level) as i32;
        self.grid_subsample * self.pyramid_factor.powi(-back)
    }

    fn epsilon_at(&self, level: usize) -> f64 {
        if self.pyramid_levels <= 1 {
            return self.epsilon_start;
        }
        let t = level as f64 / (self.pyramid_levels - 1) as f64;
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

/// Per-level summary plus the full optimizer trace.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub grid_dims: [usize; 3],
    pub grid_spacing: f64,
    pub proposals: usize,
    pub particles_before: usize,
    pub particles_after: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Energy at every accepted iterate.
    pub energies: Vec<f64>,
    pub total_backtracks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: SolverConfig,
    pub mode: String,
    pub levels: Vec<LevelReport>,
    /// Set when no particle was ever proposed; the outputs are empty/zero.
    pub no_particles: bool,
    pub runtime_seconds: f64,
    /// Max absolute voxel divergence of the delivered flow.
    pub final_divergence: f64,
    #[serde(skip)]
    pub traces: Vec<ConvergenceReport>,
}

impl RunReport {
    /// Write the JSON summary and one optimizer-trace CSV per level.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_run_report(&dir.join("report.json"), self)?;
        for (i, trace) in self.traces.iter().enumerate() {
            io::save_convergence_csv(&dir.join(format!("trace_level{i:02}.csv")), trace)?;
        }
        Ok(())
    }
}

/// Result of a reconstruction run.
pub struct Reconstruction {
    pub particles: ParticleSet,
    pub flow: MotionGrid,
    pub report: RunReport,
}

/// The joint energy wired up for the optimizer, with a one-entry gradient
/// cache (value and gradient are often requested at the same point).
struct JointProblem<'a> {
    cameras: &'a [Camera],
    images: &'a ImageSet,
    params: EnergyParams,
    grid_dims: [usize; 3],
    grid_spacing: f64,
    poisson: PoissonSolver,
    include_t0: bool,
    include_t1: bool,
    enabled_blocks: [bool; 3],
    cache: Option<(IpalmVars, energy::EnergyState)>,
}

impl JointProblem<'_> {
    fn unpack(&self, vars: &IpalmVars) -> (ParticleSet, MotionGrid) {
        let q = vars.blocks[1].len();
        let mut positions = Vec::with_capacity(q);
        for i in 0..q {
            positions.push(Vector3::new(
                vars.blocks[0][3 * i],
                vars.blocks[0][3 * i + 1],
                vars.blocks[0][3 * i + 2],
            ));
        }
        let particles = ParticleSet::new(positions, vars.blocks[1].clone());
        let grid = MotionGrid {
            dims: self.grid_dims,
            spacing: self.grid_spacing,
            coeffs: vars.blocks[2].clone(),
        };
        (particles, grid)
    }

    fn evaluate(&mut self, vars: &IpalmVars, with_gradients: bool) -> energy::EnergyState {
        if let Some((cached_vars, state)) = &self.cache {
            if cached_vars == vars {
                return state.clone();
            }
        }
        let (particles, grid) = self.unpack(vars);
        let state = energy::smooth_part(
            &particles,
            &grid,
            self.cameras,
            self.images,
            &self.params,
            self.include_t0,
            self.include_t1,
            with_gradients,
        )
        .expect("validated inputs");
        if with_gradients {
            self.cache = Some((vars.clone(), state.clone()));
        }
        state
    }
}

impl IpalmProblem for JointProblem<'_> {
    fn smooth_value(&mut self, vars: &IpalmVars) -> f64 {
        if let Some((cached_vars, state)) = &self.cache {
            if cached_vars == vars {
                return state.value;
            }
        }
        self.evaluate(vars, false).value
    }

    fn smooth_grad(&mut self, vars: &IpalmVars, block: Block) -> Vec<f64> {
        let state = self.evaluate(vars, true);
        match block {
            Block::Positions => state.grad_p,
            Block::Intensities => state.grad_c,
            Block::Flow => state.grad_u,
        }
    }

    fn nonsmooth_value(&mut self, block: Block, z: &[f64]) -> f64 {
        match block {
            Block::Positions => 0.0,
            Block::Intensities => self.params.mu * energy::sparsity_term(z, self.params.norm),
            // hard mode: iterates are feasible by construction (every
            // accepted u comes out of the projection), so the indicator
            // reports zero; soft mode has no nonsmooth flow term at all
            Block::Flow => 0.0,
        }
    }

    fn prox(&mut self, block: Block, z: Vec<f64>, l: f64) -> Vec<f64> {
        match block {
            Block::Positions => z,
            Block::Intensities => prox_intensity(&z, l, self.params.mu, self.params.norm),
            Block::Flow => match self.params.divergence {
                DivergenceMode::Hard => {
                    let grid = MotionGrid {
                        dims: self.grid_dims,
                        spacing: self.grid_spacing,
                        coeffs: z,
                    };
                    self.poisson.project(&grid).coeffs
                }
                DivergenceMode::Soft(_) => z,
            },
        }
    }

    fn enabled(&self) -> [bool; 3] {
        self.enabled_blocks
    }
}

fn flatten_positions(particles: &ParticleSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * particles.len());
    for p in &particles.positions {
        out.extend_from_slice(&[p.x, p.y, p.z]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    /// Particles and flow together against both time steps.
    Joint,
    /// Particles only, against the first time step only.
    ParticlesOnly,
    /// Flow only, particles frozen.
    FlowOnly,
}

struct LevelOutcome {
    report: LevelReport,
    trace: ConvergenceReport,
}

/// One coarse-to-fine pass. Proposals run only in stages that optimize
/// particles.
#[allow(clippy::too_many_arguments)]
fn level_loop(
    images: &ImageSet,
    cameras: &[Camera],
    omega: &Box3,
    config: &SolverConfig,
    stage: Stage,
    particles: &mut ParticleSet,
    grid: &mut Option<MotionGrid>,
    outcomes: &mut Vec<LevelOutcome>,
) -> Result<()> {
    let extent = omega.extent();
    for level in 0..config.pyramid_levels {
        let sigma = config.sigma_at(level);
        let spacing = config.spacing_at(level);
        let epsilon = config.epsilon_at(level);
        let dims = MotionGrid::dims_covering(&extent, spacing, config.min_grid_dims);

        let mut level_grid = match grid.take() {
            Some(g) => {
                if g.dims == dims && (g.spacing - spacing).abs() < 1e-12 {
                    g
                } else {
                    g.prolongate(dims, spacing)
                }
            }
            None => MotionGrid::zeros(dims, spacing),
        };
        let mut poisson =
            PoissonSolver::new(dims, spacing, config.loop_pcg_tol, config.loop_pcg_iters);
        if matches!(config.divergence, DivergenceMode::Hard) {
            // prolongation does not preserve per-voxel divergence exactly;
            // restore feasibility before optimizing
            let mut restore = PoissonSolver::new(dims, spacing, 1e-8, 2000);
            level_grid = restore.project(&level_grid);
            poisson.pressure = restore.pressure;
        }

        // pre-blur the observations to the level's blob scale so rendered
        // and observed blobs agree; at the finest level this is a no-op
        let blur_std = (sigma * sigma - config.sigma_input * config.sigma_input).max(0.0).sqrt();
        let level_images = if blur_std > 1e-9 {
            ImageSet {
                t0: images.t0.iter().map(|im| gaussian_blur(im, blur_std)).collect(),
                t1: images.t1.iter().map(|im| gaussian_blur(im, blur_std)).collect(),
            }
        } else {
            images.clone()
        };

        let kernel = BlobKernel::new(sigma);
        let mut n_proposals = 0;
        if stage != Stage::FlowOnly {
            let residuals = energy::residuals_t0(particles, cameras, &level_images, &kernel)?;
            let proposals = propose(
                &residuals,
                cameras,
                omega,
                &ProposalParams {
                    epsilon,
                    i_min: config.i_min,
                    max_combinations: config.max_combinations,
                    dedup_radius: config.dedup_radius,
                },
                particles,
            );
            n_proposals = proposals.len();
            for c in &proposals {
                particles.push(c.position, c.intensity);
            }
        }
        let particles_before = particles.len();

        let params = EnergyParams {
            lambda: config.lambda,
            mu: config.mu,
            norm: config.norm,
            divergence: config.divergence,
            sigma,
        };
        let enabled_blocks = match stage {
            Stage::Joint => [true, true, true],
            Stage::ParticlesOnly => [true, true, false],
            Stage::FlowOnly => [false, false, true],
        };
        let mut problem = JointProblem {
            cameras,
            images: &level_images,
            params,
            grid_dims: dims,
            grid_spacing: spacing,
            poisson,
            include_t0: stage != Stage::FlowOnly || true,
            include_t1: stage != Stage::ParticlesOnly,
            enabled_blocks,
            cache: None,
        };
        // the t0 term is constant w.r.t. the flow; skip it in flow-only runs
        if stage == Stage::FlowOnly {
            problem.include_t0 = false;
        }

        let mut state = BlockState::new(IpalmVars::new(
            flatten_positions(particles),
            particles.intensities.clone(),
            level_grid.coeffs.clone(),
        ));
        state.tau = config.tau;
        let opts = IpalmOptions {
            max_iterations: config.max_inner_iterations,
            tolerance: config.convergence_tol,
            ..Default::default()
        };
        let trace = ipalm::run(&mut state, &mut problem, &opts)?;

        let (mut new_particles, new_grid) = problem.unpack(&state.current);
        new_particles = new_particles.prune_zero();
        *particles = new_particles;
        *grid = Some(new_grid);

        outcomes.push(LevelOutcome {
            report: LevelReport {
                level: outcomes.len(),
                sigma,
                epsilon,
                grid_dims: dims,
                grid_spacing: spacing,
                proposals: n_proposals,
                particles_before,
                particles_after: particles.len(),
                iterations: trace.iterations.len(),
                converged: trace.converged,
                energies: trace.iterations.iter().map(|r| r.energy).collect(),
                total_backtracks: trace.total_backtracks(),
            },
            trace,
        });
    }
    Ok(())
}

fn finalize(
    omega: &Box3,
    config: &SolverConfig,
    mode: &str,
    particles: ParticleSet,
    grid: Option<MotionGrid>,
    outcomes: Vec<LevelOutcome>,
    started: std::time::Instant,
) -> Result<Reconstruction> {
    let extent = omega.extent();
    let out_spacing = config.output_spacing.unwrap_or(1.0);
    let out_dims = MotionGrid::dims_covering(&extent, out_spacing, 2);
    let no_particles = particles.is_empty();

    let mut flow = match grid {
        Some(g) => g.prolongate(out_dims, out_spacing),
        None => MotionGrid::zeros(out_dims, out_spacing),
    };
    if matches!(config.divergence, DivergenceMode::Hard) {
        let mut solver = PoissonSolver::new(out_dims, out_spacing, config.final_pcg_tol, 20_000);
        flow = solver.project(&flow);
    }
    let final_divergence = flow.max_abs_voxel_divergence();

    let (levels, traces): (Vec<_>, Vec<_>) =
        outcomes.into_iter().map(|o| (o.report, o.trace)).unzip();
    Ok(Reconstruction {
        particles,
        flow,
        report: RunReport {
            config: config.clone(),
            mode: mode.into(),
            levels,
            no_particles,
            runtime_seconds: started.elapsed().as_secs_f64(),
            final_divergence,
            traces,
        },
    })
}

fn validate_inputs(images: &ImageSet, cameras: &[Camera]) -> Result<()> {
    if cameras.len() < 2 {
        return Err(Error::InvalidImageSet(format!(
            "need at least 2 calibrated cameras, got {}",
            cameras.len()
        )));
    }
    if images.num_cameras() != cameras.len() {
        return Err(Error::InvalidImageSet(format!(
            "{} cameras but {} image pairs",
            cameras.len(),
            images.num_cameras()
        )));
    }
    Ok(())
}

/// Joint reconstruction of particles and flow.
pub fn reconstruct(
    images: &ImageSet,
    cameras: &[Camera],
    omega: &Box3,
    config: &SolverConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    validate_inputs(images, cameras)?;
    let started = std::time::Instant::now();
    let mut particles = ParticleSet::empty();
    let mut grid = None;
    let mut outcomes = Vec::new();
    level_loop(images, cameras, omega, config, Stage::Joint, &mut particles, &mut grid, &mut outcomes)?;
    finalize(omega, config, "joint", particles, grid, outcomes, started)
}

/// Ablation baseline: reconstruct particles from the first time step only,
/// then freeze them and estimate the flow.
pub fn reconstruct_sequential(
    images: &ImageSet,
    cameras: &[Camera],
    omega: &Box3,
    config: &SolverConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    validate_inputs(images, cameras)?;
    let started = std::time::Instant::now();
    let mut particles = ParticleSet::empty();
    let mut grid = None;
    let mut outcomes = Vec::new();
    level_loop(
        images,
        cameras,
        omega,
        config,
        Stage::ParticlesOnly,
        &mut particles,
        &mut grid,
        &mut outcomes,
    )?;
    // stage 2: flow only, fresh pyramid
    grid = None;
    level_loop(images, cameras, omega, config, Stage::FlowOnly, &mut particles, &mut grid, &mut outcomes)?;
    finalize(omega, config, "sequential", particles, grid, outcomes, started)
}

/// Upper-bound variant: particles are given (e.g. ground truth) and only the
/// flow is optimized.
pub fn reconstruct_flow_only(
    images: &ImageSet,
    cameras: &[Camera],
    omega: &Box3,
    config: &SolverConfig,
    particles: ParticleSet,
) -> Result<Reconstruction> {
    config.validate()?;
    validate_inputs(images, cameras)?;
    let started = std::time::Instant::now();
    let mut particles = particles;
    let mut grid = None;
    let mut outcomes = Vec::new();
    level_loop(images, cameras, omega, config, Stage::FlowOnly, &mut particles, &mut grid, &mut outcomes)?;
    finalize(omega, config, "flow-only", particles, grid, outcomes, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval;
    use crate::synth::{self, AnalyticFlow};

    fn quick_config() -> SolverConfig {
        SolverConfig {
            pyramid_levels: 6,
            max_inner_iterations: 25,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = SolverConfig::default();
        c.pyramid_factor = 1.5;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.epsilon_start = 3.0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.pyramid_levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        let c = SolverConfig::default();
        let mut last_sigma = f64::INFINITY;
        let mut last_spacing = f64::INFINITY;
        let mut last_eps = 0.0;
        for level in 0..c.pyramid_levels {
            let s = c.sigma_at(level);
            let h = c.spacing_at(level);
            let e = c.epsilon_at(level);
            assert!(s <= last_sigma, "sigma must never increase");
            assert!(h <= last_spacing, "grid must never coarsen");
            assert!(e >= last_eps, "epsilon must be non-decreasing");
            last_sigma = s;
            last_spacing = h;
            last_eps = e;
        }
        assert_eq!(c.sigma_at(c.pyramid_levels - 1), 1.0);
        assert_eq!(c.spacing_at(c.pyramid_levels - 1), 10.0);
        assert_eq!(c.epsilon_at(0), 0.8);
        assert_eq!(c.epsilon_at(c.pyramid_levels - 1), 2.0);
    }

    #[test]
    fn empty_volume_returns_empty_result() {
        let omega = Box3::from_dims(32.0, 32.0, 16.0);
        let cameras = synth::default_rig(48, 48, &omega);
        let images = ImageSet::new(
            vec![crate::scene::Image::zeros(48, 48); 4],
            vec![crate::scene::Image::zeros(48, 48); 4],
        )
        .unwrap();
        let rec = reconstruct(&images, &cameras, &omega, &quick_config()).unwrap();
        assert!(rec.particles.is_empty());
        assert!(rec.report.no_particles);
        assert!(rec.flow.coeffs.iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn single_particle_static_scene() {
        let omega = Box3::from_dims(32.0, 32.0, 16.0);
        let flow = AnalyticFlow::Uniform { d: [0.0, 0.0, 0.0] };
        let scene = synth::generate(&flow, 1.0 / (64.0 * 64.0), 64, 64, &omega, 1.0, 0.0, 42);
        assert_eq!(scene.particles_t0.len(), 1);
        let config = SolverConfig { output_spacing: Some(4.0), ..quick_config() };
        let rec = reconstruct(&scene.images, &scene.cameras, &omega, &config).unwrap();
        assert_eq!(rec.particles.len(), 1, "expected exactly the one true particle");
        let err = (rec.particles.positions[0] - scene.particles_t0.positions[0]).norm();
        assert!(err < 0.1, "position error {err} voxels");
        let truth = synth::sample_truth(&flow, rec.flow.dims, rec.flow.spacing);
        let m = eval::flow_metrics(&rec.flow, &truth).unwrap();
        assert!(m.aee < 0.01, "AEE {}", m.aee);
    }

    #[test]
    fn single_particle_uniform_flow() {
        let omega = Box3::from_dims(32.0, 32.0, 16.0);
        let flow = AnalyticFlow::Uniform { d: [1.5, -0.5, 0.5] };
        let scene = synth::generate(&flow, 1.0 / (64.0 * 64.0), 64, 64, &omega, 1.0, 0.0, 43);
        let config = SolverConfig { output_spacing: Some(4.0), ..quick_config() };
        let rec = reconstruct(&scene.images, &scene.cameras, &omega, &config).unwrap();
        assert_eq!(rec.particles.len(), 1);
        let err = (rec.particles.positions[0] - scene.particles_t0.positions[0]).norm();
        assert!(err < 0.1, "position error {err} voxels");
        // flow is only observable near the particle; check it there
        let u = rec.flow.eval(&scene.particles_t0.positions[0]);
        let d = (u - Vector3::new(1.5, -0.5, 0.5)).norm();
        assert!(d < 0.25, "flow error at the particle {d}");
    }

    #[test]
    fn report_records_runtime_and_schedules() {
        let omega = Box3::from_dims(32.0, 32.0, 16.0);
        let cameras = synth::default_rig(48, 48, &omega);
        let images = ImageSet::new(
            vec![crate::scene::Image::zeros(48, 48); 4],
            vec![crate::scene::Image::zeros(48, 48); 4],
        )
        .unwrap();
        let config = quick_config();
        let rec = reconstruct(&images, &cameras, &omega, &config).unwrap();
        assert_eq!(rec.report.levels.len(), config.pyramid_levels);
        assert!(rec.report.runtime_seconds > 0.0);
        assert!(rec.report.final_divergence < 1e-8);
        for w in rec.report.levels.windows(2) {
            assert!(w[1].sigma <= w[0].sigma);
            assert!(w[1].epsilon >= w[0].epsilon);
        }
    }
}
