//! Inertial proximal alternating linearized minimization.
//!
//! Block order is positions, intensities, flow. Each block takes an inertial
//! extrapolation, an explicit gradient step on the smooth part `H` at the
//! extrapolated point, and a backward (prox) step on its nonsmooth part. The
//! step size `1/L` is validated with the descent-lemma inequality
//!
//! `E(z+) <= E(z) + <grad_z H(z), z+ - z> + (L/2) |z+ - z|^2`
//!
//! against the un-extrapolated previous iterate; failures double `L`. After
//! an accepted step the same test probes `L/2` so step sizes can grow again.

use crate::error::{Error, Result};

pub const BLOCK_NAMES: [&str; 3] = ["p", "c", "u"];

/// Variable block identifiers in their update order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Positions = 0,
    Intensities = 1,
    Flow = 2,
}

pub const BLOCKS: [Block; 3] = [Block::Positions, Block::Intensities, Block::Flow];

/// Stacked variable blocks `(p, c, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IpalmVars {
    pub blocks: [Vec<f64>; 3],
}

impl IpalmVars {
    pub fn new(p: Vec<f64>, c: Vec<f64>, u: Vec<f64>) -> Self {
        IpalmVars { blocks: [p, c, u] }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.blocks[b as usize]
    }
}

/// Problem interface the optimizer drives: smooth value/gradients plus the
/// per-block nonsmooth terms and their proximal maps.
pub trait IpalmProblem {
    fn smooth_value(&mut self, vars: &IpalmVars) -> f64;
    fn smooth_grad(&mut self, vars: &IpalmVars, block: Block) -> Vec<f64>;
    /// `F_block(z)`; may be infinite. Constant blocks cancel in the descent
    /// test, so only the stepped block's term is ever queried.
    fn nonsmooth_value(&mut self, block: Block, z: &[f64]) -> f64;
    /// `prox_{F_block / l}(z)`. Identity for smooth-free blocks.
    fn prox(&mut self, block: Block, z: Vec<f64>, l: f64) -> Vec<f64>;
    /// Blocks that participate in the optimization (the sequential ablation
    /// freezes some).
    fn enabled(&self) -> [bool; 3] {
        [true, true, true]
    }
}

/// Optimizer state: current and previous iterates plus per-block Lipschitz
/// estimates and the inertia coefficient.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub current: IpalmVars,
    pub previous: IpalmVars,
    pub lipschitz: [f64; 3],
    pub tau: f64,
}

impl BlockState {
    /// Previous iterate initialized to the current one, `L = 1`, `tau = 1/sqrt(2)`.
    pub fn new(init: IpalmVars) -> Self {
        BlockState {
            previous: init.clone(),
            current: init,
            lipschitz: [1.0; 3],
            tau: 1.0 / f64::sqrt(2.0),
        }
    }

    pub fn without_inertia(init: IpalmVars) -> Self {
        let mut s = Self::new(init);
        s.tau = 0.0;
        s
    }
}

/// Per-iteration record for the convergence report.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub energy: f64,
    pub lipschitz: [f64; 3],
    pub backtracks: [usize; 3],
    pub step_norms: [f64; 3],
    /// Smallest descent-test slack (rhs - lhs) across accepted block steps;
    /// nonnegative up to float noise.
    pub min_slack: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceReport {
    pub iterations: Vec<StepRecord>,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn final_energy(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.energy)
    }

    pub fn total_backtracks(&self) -> usize {
        self.iterations.iter().map(|r| r.backtracks.iter().sum::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IpalmOptions {
    pub max_iterations: usize,
    /// Relative step-norm convergence threshold over all enabled blocks.
    pub tolerance: f64,
    pub max_doublings: usize,
}

impl Default for IpalmOptions {
    fn default() -> Self {
        IpalmOptions { max_iterations: 40, tolerance: 1e-6, max_doublings: 60 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One sweep over the blocks in order p, c, u. Returns the record of the
/// sweep; `state` is advanced in place.
pub fn ipalm_step<P: IpalmProblem>(
    state: &mut BlockState,
    problem: &mut P,
    opts: &IpalmOptions,
) -> Result<StepRecord> {
    let enabled = problem.enabled();
    let mut work = state.current.clone();
    let mut record = StepRecord {
        energy: 0.0,
        lipschitz: state.lipschitz,
        backtracks: [0; 3],
        step_norms: [0.0; 3],
        min_slack: f64::INFINITY,
    };

    for &block in BLOCKS.iter() {
        let b = block as usize;
        if !enabled[b] || work.blocks[b].is_empty() {
            continue;
        }
        let z_n = state.current.blocks[b].clone();
        let z_prev = &state.previous.blocks[b];

        // inertial extrapolation
        let z_hat: Vec<f64> = z_n
            .iter()
            .zip(z_prev)
            .map(|(zc, zp)| zc + state.tau * (zc - zp))
            .collect();
        let mut hat_vars = work.clone();
        hat_vars.blocks[b] = z_hat.clone();
        let grad_hat = problem.smooth_grad(&hat_vars, block);

        // descent test baseline at the un-extrapolated iterate
        let h_n = problem.smooth_value(&work);
        let f_n = problem.nonsmooth_value(block, &z_n);
        let grad_n = if state.tau == 0.0 {
            grad_hat.clone()
        } else {
            problem.smooth_grad(&work, block)
        };
        let e_n = h_n + f_n;
        // float-noise guard only; large enough violations still double L
        let slack_tol = 1e-13 * (1.0 + e_n.abs());

        let mut l = state.lipschitz[b];
        let mut doublings = 0;
        let try_step = |problem: &mut P, work: &mut IpalmVars, l: f64| -> (Vec<f64>, f64, f64) {
            let cand: Vec<f64> = z_hat
                .iter()
                .zip(&grad_hat)
                .map(|(zh, g)| zh - g / l)
                .collect();
            let cand = problem.prox(block, cand, l);
            let old = std::mem::replace(&mut work.blocks[b], cand);
            let h_cand = problem.smooth_value(work);
            let cand = std::mem::replace(&mut work.blocks[b], old);
            let f_cand = problem.nonsmooth_value(block, &cand);
            let lhs = h_cand + f_cand;
            let diff: Vec<f64> = cand.iter().zip(&z_n).map(|(c, z)| c - z).collect();
            let rhs = e_n + dot(&grad_n, &diff) + 0.5 * l * dot(&diff, &diff);
            (cand, lhs, rhs)
        };
        let (cand, l_used) = loop {
            let (cand, lhs, rhs) = try_step(problem, &mut work, l);
            if lhs <= rhs + slack_tol {
                record.min_slack = record.min_slack.min(rhs - lhs);
                break (cand, l);
            }
            l *= 2.0;
            doublings += 1;
            if doublings > opts.max_doublings {
                return Err(Error::StepFailure {
                    block: BLOCK_NAMES[b],
                    doublings: opts.max_doublings,
                });
            }
        };
        record.backtracks[b] = doublings;

        // growth probe: keep L/2 for the next iteration when the test still holds
        let mut next_l = l_used;
        if doublings == 0 {
            let l_half = l_used / 2.0;
            let (_probe, lhs, rhs) = try_step(problem, &mut work, l_half);
            if lhs <= rhs + slack_tol {
                next_l = l_half;
            }
        }
        state.lipschitz[b] = next_l;
        record.lipschitz[b] = l_used;
        record.step_norms[b] = {
            let diff: Vec<f64> = cand.iter().zip(&z_n).map(|(c, z)| c - z).collect();
            norm(&diff)
        };
        work.blocks[b] = cand;
    }

    // total energy at the new iterate: H plus all nonsmooth parts
    let mut energy = problem.smooth_value(&work);
    for &block in BLOCKS.iter() {
        let b = block as usize;
        if !work.blocks[b].is_empty() {
            energy += problem.nonsmooth_value(block, &work.blocks[b]);
        }
    }
    record.energy = energy;
    if !record.min_slack.is_finite() {
        record.min_slack = 0.0;
    }

    state.previous = std::mem::replace(&mut state.current, work);
    Ok(record)
}

/// Iterate [`ipalm_step`] until the relative step norm of every enabled block
/// drops below the tolerance or the iteration cap is reached.
pub fn run<P: IpalmProblem>(
    state: &mut BlockState,
    problem: &mut P,
    opts: &IpalmOptions,
) -> Result<ConvergenceReport> {
    assert!(opts.max_iterations >= 1);
    let mut report = ConvergenceReport::default();
    for _ in 0..opts.max_iterations {
        let record = ipalm_step(state, problem, opts)?;
        let enabled = problem.enabled();
        let mut converged = true;
        for b in 0..3 {
            if !enabled[b] || state.current.blocks[b].is_empty() {
                continue;
            }
            let base = norm(&state.previous.blocks[b]).max(1e-12);
            if record.step_norms[b] / base >= opts.tolerance {
                converged = false;
            }
        }
        report.iterations.push(record);
        if converged {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}
