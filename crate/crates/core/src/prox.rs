//! Proximal maps: the closed-form intensity prox and the divergence-free
//! projection of the motion field.
//!
//! The intensity prox solves, pointwise,
//! `argmin_c  mu |c|_norm + indicator(c >= 0) + (t/2) (c - cbar)^2`.
//! The flow prox is the Euclidean projection onto `{u : D u = 0}`; its KKT
//! system reduces to a pressure Poisson problem `D D^T phi = D ubar` solved
//! with preconditioned conjugate gradients and a warm-started pressure field.

use crate::motion::{DivergenceOp, MotionGrid, PressureField};

/// Sparsity-inducing norm of the intensity prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SparsityNorm {
    L0,
    L1,
}

/// Closed-form prox of `mu |.|_norm + indicator(>= 0)` with step scale `t`,
/// applied elementwise.
///
/// L0: `0` if `t cbar^2 < 2 mu` or `cbar < 0`, else `cbar` (hard threshold).
/// L1: `max(0, cbar - mu / t)` (shrinkage).
pub fn prox_intensity(c_bar: &[f64], t: f64, mu: f64, norm: SparsityNorm) -> Vec<f64> {
    assert!(t > 0.0 && mu >= 0.0);
    c_bar
        .iter()
        .map(|&c| match norm {
            SparsityNorm::L0 => {
                if t * c * c < 2.0 * mu || c < 0.0 {
                    0.0
                } else {
                    c
                }
            }
            SparsityNorm::L1 => (c - mu / t).max(0.0),
        })
        .collect()
}

/// Convergence record of one PCG solve.
#[derive(Debug, Clone, Copy)]
pub struct PcgStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Pressure Poisson solver for the divergence-free projection, with the
/// pressure field kept across calls as the warm start.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    op: DivergenceOp,
    pub pressure: PressureField,
    /// Relative residual target; the in-loop default is loose because the
    /// projection is re-applied every outer iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Stats of the most recent solve.
    pub last_stats: Option<PcgStats>,
}

impl PoissonSolver {
    pub fn new(dims: [usize; 3], spacing: f64, tolerance: f64, max_iterations: usize) -> Self {
        let op = DivergenceOp::new(dims, spacing);
        let voxels = [dims[0] - 1, dims[1] - 1, dims[2] - 1];
        PoissonSolver {
            op,
            pressure: PressureField::zeros(voxels),
            tolerance,
            max_iterations,
            last_stats: None,
        }
    }

    /// In-loop solver: 20 iterations, loose tolerance.
    pub fn for_loop(dims: [usize; 3], spacing: f64) -> Self {
        Self::new(dims, spacing, 1e-3, 20)
    }

    /// Final solver: tight tolerance, generous iteration budget.
    pub fn full_tolerance(dims: [usize; 3], spacing: f64) -> Self {
        Self::new(dims, spacing, 1e-12, 20_000)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.op.dims
    }

    /// `out = D D^T phi`.
    fn apply_gram(&self, phi: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.op.apply_transpose(phi, scratch);
        self.op.apply(scratch, out);
    }

    /// Euclidean projection of `u_bar` onto the divergence-free subspace:
    /// `u_bar - D^T phi` with `D D^T phi = D u_bar`. Independent of the prox
    /// step size. Non-convergence within the iteration budget is reported in
    /// the returned stats, not an error: the projection is still applied with
    /// the best pressure iterate.
    pub fn project(&mut self, u_bar: &MotionGrid) -> MotionGrid {
        assert_eq!(u_bar.dims, self.op.dims, "solver dims must match grid");
        let n = self.op.rows();
        let mut rhs = vec![0.0; n];
        self.op.apply(&u_bar.coeffs, &mut rhs);
        let rhs_norm = norm(&rhs);
        let mut scratch = vec![0.0; self.op.cols()];

        let mut phi = std::mem::take(&mut self.pressure.data);
        let mut r = vec![0.0; n];
        let mut ap = vec![0.0; n];
        // r = rhs - A phi (warm start from the stored pressure)
        self.op.apply_transpose(&phi, &mut scratch);
        self.op.apply(&scratch, &mut r);
        for i in 0..n {
            r[i] = rhs[i] - r[i];
        }
        // Jacobi preconditioner: diag(D D^T) is constant (24 entries of
        // spacing^2/4 per row), so this is an exact diagonal scaling.
        let inv_diag = 1.0 / self.op.gram_diagonal();

        let mut stats = PcgStats { iterations: 0, rel_residual: 0.0, converged: true };
        if rhs_norm > 0.0 {
            let mut z: Vec<f64> = r.iter().map(|v| v * inv_diag).collect();
            let mut p = z.clone();
            let mut rz: f64 = dot(&r, &z);
            let tol = self.tolerance * rhs_norm;
            let mut res = norm(&r);
            let mut it = 0;
            while res > tol && it < self.max_iterations {
                self.apply_gram(&p, &mut scratch, &mut ap);
                let pap = dot(&p, &ap);
                if pap <= 0.0 {
                    break; // numerically semi-definite direction; stop
                }
                let alpha = rz / pap;
                for i in 0..n {
                    phi[i] += alpha * p[i];
                    r[i] -= alpha * ap[i];
                }
                for i in 0..n {
                    z[i] = r[i] * inv_diag;
                }
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                for i in 0..n {
                    p[i] = z[i] + beta * p[i];
                }
                res = norm(&r);
                it += 1;
            }
            stats = PcgStats {
                iterations: it,
                rel_residual: res / rhs_norm,
                converged: res <= tol,
            };
        }
        self.last_stats = Some(stats);
        self.pressure.data = phi;

        // u = u_bar - D^T phi
        self.op.apply_transpose(&self.pressure.data, &mut scratch);
        let mut out = u_bar.clone();
        for (o, s) in out.coeffs.iter_mut().zip(&scratch) {
            *o -= s;
        }
        out
    }
}

/// Free-function form of the projection.
pub fn project_divfree(u_bar: &MotionGrid, solver: &mut PoissonSolver) -> MotionGrid {
    solver.project(u_bar)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
