//! Eulerian motion field on a trilinear finite-element grid.
//!
//! The field `u(x) = sum_i b_i(x) u_i` lives on an `N x M x L` vertex lattice
//! with scalar spacing (voxel pitch). Coefficients are stored interleaved per
//! vertex, x-fastest vertex order, and are displacements in fine-volume voxel
//! units regardless of the grid resolution. Per-voxel divergence follows the
//! divergence theorem (exact for trilinear fields), and the smoothness energy
//! integrates `sum_l |grad u_l|^2` exactly per voxel.

use nalgebra::{Matrix3, Vector3};
use std::sync::OnceLock;

/// Trilinear basis function of vertex `i`, evaluated at `x` in grid
/// coordinates: `prod_l max(0, 1 - |x_l - i_l|)`.
pub fn basis_eval(vertex: [isize; 3], x: &Vector3<f64>) -> f64 {
    (0..3)
        .map(|l| (1.0 - (x[l] - vertex[l] as f64).abs()).max(0.0))
        .product()
}

/// Trilinear vector field: vertex counts, scalar spacing, interleaved
/// per-vertex coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionGrid {
    /// Vertex counts (N, M, L); each at least 2.
    pub dims: [usize; 3],
    /// Voxel pitch in fine-volume units.
    pub spacing: f64,
    /// `3 * N * M * L` values, `coeffs[3 * vertex + component]`.
    pub coeffs: Vec<f64>,
}

/// Scalar field with one value per voxel of the grid's voxel covering,
/// dims `(N-1, M-1, L-1)`. Physically the pressure multiplier of the
/// divergence-free projection; kept across solves for warm starting.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureField {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl PressureField {
    pub fn zeros(voxel_dims: [usize; 3]) -> Self {
        PressureField { dims: voxel_dims, data: vec![0.0; voxel_dims.iter().product()] }
    }
}

impl MotionGrid {
    pub fn zeros(dims: [usize; 3], spacing: f64) -> Self {
        assert!(dims.iter().all(|&d| d >= 2), "grid needs at least 2 vertices per axis");
        assert!(spacing > 0.0);
        MotionGrid { dims, spacing, coeffs: vec![0.0; 3 * dims.iter().product::<usize>()] }
    }

    pub fn constant(dims: [usize; 3], spacing: f64, value: Vector3<f64>) -> Self {
        let mut g = Self::zeros(dims, spacing);
        for v in 0..g.vertex_count() {
            for c in 0..3 {
                g.coeffs[3 * v + c] = value[c];
            }
        }
        g
    }

    /// Smallest grid with the given spacing whose voxel covering contains a
    /// volume of the given extents, with at least `min_dims` vertices per axis.
    pub fn dims_covering(extent: &Vector3<f64>, spacing: f64, min_dims: usize) -> [usize; 3] {
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let cells = (extent[i] / spacing - 1e-9).ceil().max(1.0) as usize;
            dims[i] = (cells + 1).max(min_dims);
        }
        dims
    }

    pub fn vertex_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_dims(&self) -> [usize; 3] {
        [self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_dims().iter().product()
    }

    #[inline]
    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn vertex_value(&self, v: usize) -> Vector3<f64> {
        Vector3::new(self.coeffs[3 * v], self.coeffs[3 * v + 1], self.coeffs[3 * v + 2])
    }

    /// Cell index and local coordinate for a point given in grid coordinates,
    /// clamped to the grid extent.
    #[inline]
    fn cell_of(&self, g: f64, axis: usize) -> (usize, f64) {
        let n = self.dims[axis];
        let gc = g.clamp(0.0, (n - 1) as f64);
        let cell = (gc.floor() as usize).min(n - 2);
        (cell, gc - cell as f64)
    }

    /// The 8 enclosing vertex indices and trilinear weights at volume point
    /// `x` (clamped to the grid extent).
    pub fn vertex_weights(&self, x: &Vector3<f64>) -> ([usize; 8], [f64; 8]) {
        let g = x / self.spacing;
        let (ci, fi) = self.cell_of(g.x, 0);
        let (cj, fj) = self.cell_of(g.y, 1);
        let (ck, fk) = self.cell_of(g.z, 2);
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for n in 0..8 {
            let (a, b, c) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            idx[n] = self.vertex_index(ci + a, cj + b, ck + c);
            w[n] = (if a == 1 { fi } else { 1.0 - fi })
                * (if b == 1 { fj } else { 1.0 - fj })
                * (if c == 1 { fk } else { 1.0 - fk });
        }
        (idx, w)
    }

    /// Evaluate the field at a volume point (clamped to the grid extent).
    pub fn eval(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let (idx, w) = self.vertex_weights(x);
        let mut out = Vector3::zeros();
        for n in 0..8 {
            out += w[n] * self.vertex_value(idx[n]);
        }
        out
    }

    /// Field value and spatial Jacobian `du_l/dx_m` in volume units.
    /// Outside the grid extent the field is the clamped constant extension,
    /// so the derivative along a clamped axis is zero.
    pub fn eval_with_jacobian(&self, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let g = x / self.spacing;
        let mut cells = [0usize; 3];
        let mut f = [0.0f64; 3];
        let mut active = [true; 3];
        for axis in 0..3 {
            let (c, fr) = self.cell_of(g[axis], axis);
            cells[axis] = c;
            f[axis] = fr;
            let top = (self.dims[axis] - 1) as f64;
            active[axis] = (0.0..=top).contains(&g[axis]);
        }
        let mut value = Vector3::zeros();
        let mut jac = Matrix3::zeros();
        let inv_h = 1.0 / self.spacing;
        for n in 0..8 {
            let bits = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            let v = self.vertex_index(cells[0] + bits[0], cells[1] + bits[1], cells[2] + bits[2]);
            let uv = self.vertex_value(v);
            let w: [f64; 3] = std::array::from_fn(|a| if bits[a] == 1 { f[a] } else { 1.0 - f[a] });
            let dw: [f64; 3] = std::array::from_fn(|a| if bits[a] == 1 { 1.0 } else { -1.0 });
            value += w[0] * w[1] * w[2] * uv;
            for m in 0..3 {
                if !active[m] {
                    continue;
                }
                let mut dwdm = inv_h;
                for a in 0..3 {
                    dwdm *= if a == m { dw[a] } else { w[a] };
                }
                for l in 0..3 {
                    jac[(l, m)] += dwdm * uv[l];
                }
            }
        }
        (value, jac)
    }

    /// Integral of `div u` over voxel `v` (divergence theorem; exact for the
    /// trilinear field). In grid coordinates this is the quarter-sum of
    /// corner differences adjacent per direction; the `spacing^2` factor
    /// converts face areas to volume units.
    pub fn voxel_divergence(&self, v: [usize; 3]) -> f64 {
        let mut sum = 0.0;
        for l in 0..3 {
            for n in 0..4 {
                let (s, t) = (n & 1, (n >> 1) & 1);
                // corner pair adjacent in direction l: hi has offset 1 along l,
                // (s, t) sweep the remaining two axes
                let mut hi_off = [0usize; 3];
                hi_off[l] = 1;
                hi_off[(l + 1) % 3] = s;
                hi_off[(l + 2) % 3] = t;
                let mut lo_off = hi_off;
                lo_off[l] = 0;
                let hi = self.vertex_index(v[0] + hi_off[0], v[1] + hi_off[1], v[2] + hi_off[2]);
                let lo = self.vertex_index(v[0] + lo_off[0], v[1] + lo_off[1], v[2] + lo_off[2]);
                sum += self.coeffs[3 * hi + l] - self.coeffs[3 * lo + l];
            }
        }
        0.25 * self.spacing * self.spacing * sum
    }

    pub fn max_abs_voxel_divergence(&self) -> f64 {
        let [vx, vy, vz] = self.voxel_dims();
        let mut max = 0.0f64;
        for k in 0..vz {
            for j in 0..vy {
                for i in 0..vx {
                    max = max.max(self.voxel_divergence([i, j, k]).abs());
                }
            }
        }
        max
    }

    /// Resample onto a new grid by evaluating this field at the new vertex
    /// positions. Exact on trilinear functions; used to refine the grid
    /// between pyramid levels. Coefficients are displacements in fine-volume
    /// units at every level, so no magnitude rescaling applies.
    pub fn prolongate(&self, new_dims: [usize; 3], new_spacing: f64) -> MotionGrid {
        let mut out = MotionGrid::zeros(new_dims, new_spacing);
        for k in 0..new_dims[2] {
            for j in 0..new_dims[1] {
                for i in 0..new_dims[0] {
                    let x = out.vertex_position(i, j, k);
                    let u = self.eval(&x);
                    let v = out.vertex_index(i, j, k);
                    for c in 0..3 {
                        out.coeffs[3 * v + c] = u[c];
                    }
                }
            }
        }
        out
    }

    /// Resample onto a coarser grid with full-weighting: a normalized tent
    /// kernel of the coarse pitch. Where the kernel support is clipped by the
    /// fine grid extent the weighted centroid drifts off the target vertex,
    /// so those vertices fall back to plain sampling.
    pub fn restrict(&self, new_dims: [usize; 3], new_spacing: f64) -> MotionGrid {
        let mut out = MotionGrid::zeros(new_dims, new_spacing);
        let h = self.spacing;
        for k in 0..new_dims[2] {
            for j in 0..new_dims[1] {
                for i in 0..new_dims[0] {
                    let y = out.vertex_position(i, j, k);
                    let mut ranges = [(0usize, 0usize); 3];
                    for a in 0..3 {
                        let lo = ((y[a] - new_spacing) / h).ceil().max(0.0) as usize;
                        let hi_f = ((y[a] + new_spacing) / h).floor();
                        let hi = (hi_f.max(0.0) as usize).min(self.dims[a] - 1);
                        ranges[a] = (lo.min(self.dims[a] - 1), hi);
                    }
                    let mut wsum = 0.0;
                    let mut acc = Vector3::zeros();
                    let mut centroid = Vector3::zeros();
                    for fk in ranges[2].0..=ranges[2].1 {
                        for fj in ranges[1].0..=ranges[1].1 {
                            for fi in ranges[0].0..=ranges[0].1 {
                                let p = self.vertex_position(fi, fj, fk);
                                let mut w = 1.0;
                                for a in 0..3 {
                                    w *= (1.0 - (p[a] - y[a]).abs() / new_spacing).max(0.0);
                                }
                                if w > 0.0 {
                                    wsum += w;
                                    acc += w * self.vertex_value(self.vertex_index(fi, fj, fk));
                                    centroid += w * p;
                                }
                            }
                        }
                    }
                    let u = if wsum > 0.0 && (centroid / wsum - y).norm() < 1e-9 * new_spacing {
                        acc / wsum
                    } else {
                        self.eval(&y)
                    };
                    let v = out.vertex_index(i, j, k);
                    for c in 0..3 {
                        out.coeffs[3 * v + c] = u[c];
                    }
                }
            }
        }
        out
    }
}

/// Matrix-free divergence operator `D`: stacked voxel divergence integrals
/// (rows = voxels) of the trilinear coefficient vector (columns = 3NML).
#[derive(Debug, Clone)]
pub struct DivergenceOp {
    pub dims: [usize; 3],
    pub spacing: f64,
}

impl DivergenceOp {
    pub fn new(dims: [usize; 3], spacing: f64) -> Self {
        assert!(dims.iter().all(|&d| d >= 2));
        DivergenceOp { dims, spacing }
    }

    pub fn rows(&self) -> usize {
        self.dims.iter().map(|d| d - 1).product()
    }

    pub fn cols(&self) -> usize {
        3 * self.dims.iter().product::<usize>()
    }

    #[inline]
    fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.dims[0] - 1) * (j + (self.dims[1] - 1) * k)
    }

    /// `out = D u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.cols());
        assert_eq!(out.len(), self.rows());
        let scale = 0.25 * self.spacing * self.spacing;
        let [nx, ny, nz] = self.dims;
        let sign = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut sum = 0.0;
                    for n in 0..8 {
                        let (a, b, c) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
                        let v = self.vertex_index(i + a, j + b, k + c);
                        sum += sign(a) * u[3 * v] + sign(b) * u[3 * v + 1] + sign(c) * u[3 * v + 2];
                    }
                    out[self.voxel_index(i, j, k)] = scale * sum;
                }
            }
        }
    }

    /// `out = D^T phi`.
    pub fn apply_transpose(&self, phi: &[f64], out: &mut [f64]) {
        assert_eq!(phi.len(), self.rows());
        assert_eq!(out.len(), self.cols());
        out.fill(0.0);
        let scale = 0.25 * self.spacing * self.spacing;
        let [nx, ny, nz] = self.dims;
        let sign = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let p = scale * phi[self.voxel_index(i, j, k)];
                    if p == 0.0 {
                        continue;
                    }
                    for n in 0..8 {
                        let (a, b, c) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
                        let v = self.vertex_index(i + a, j + b, k + c);
                        out[3 * v] += sign(a) * p;
                        out[3 * v + 1] += sign(b) * p;
                        out[3 * v + 2] += sign(c) * p;
                    }
                }
            }
        }
    }

    /// Diagonal entry of `D D^T` (constant across voxels): each voxel row of
    /// `D` has 24 entries of magnitude `spacing^2 / 4`. Used as the Jacobi
    /// preconditioner of the pressure Poisson system.
    pub fn gram_diagonal(&self) -> f64 {
        let s = 0.25 * self.spacing * self.spacing;
        24.0 * s * s
    }
}

/// 8x8 stiffness matrix of the trilinear element on the unit cube:
/// `S[a][b] = integral of grad b_a . grad b_b`. Evaluated once with 2-point
/// Gauss quadrature per axis, which is exact for this integrand.
fn element_stiffness() -> &'static [[f64; 8]; 8] {
    static S: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    S.get_or_init(|| {
        let gp = [0.5 - 0.5 / f64::sqrt(3.0), 0.5 + 0.5 / f64::sqrt(3.0)];
        let mut s = [[0.0; 8]; 8];
        for &gx in &gp {
            for &gy in &gp {
                for &gz in &gp {
                    let pt = [gx, gy, gz];
                    let mut grads = [[0.0; 3]; 8];
                    for (n, grad) in grads.iter_mut().enumerate() {
                        let bits = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
                        for m in 0..3 {
                            let mut g = 1.0;
                            for a in 0..3 {
                                g *= if a == m {
                                    if bits[a] == 1 {
                                        1.0
                                    } else {
                                        -1.0
                                    }
                                } else if bits[a] == 1 {
                                    pt[a]
                                } else {
                                    1.0 - pt[a]
                                };
                            }
                            grad[m] = g;
                        }
                    }
                    let w = 0.125; // (1/2)^3 quadrature weight
                    for a in 0..8 {
                        for b in 0..8 {
                            s[a][b] += w
                                * (grads[a][0] * grads[b][0]
                                    + grads[a][1] * grads[b][1]
                                    + grads[a][2] * grads[b][2]);
                        }
                    }
                }
            }
        }
        s
    })
}

/// `integral of sum_l |grad u_l|^2` over the grid in volume units, with its
/// analytic gradient w.r.t. the coefficients. Exact per voxel (the integrand
/// is polynomial and the element stiffness matrix integrates it exactly).
pub fn gradient_energy(grid: &MotionGrid) -> (f64, Vec<f64>) {
    let s = element_stiffness();
    let h = grid.spacing;
    let [nx, ny, nz] = grid.dims;
    let mut value = 0.0;
    let mut grad = vec![0.0; grid.coeffs.len()];
    let mut vertices = [0usize; 8];
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for (n, v) in vertices.iter_mut().enumerate() {
                    let (a, b, c) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
                    *v = grid.vertex_index(i + a, j + b, k + c);
                }
                for comp in 0..3 {
                    let f: [f64; 8] = std::array::from_fn(|n| grid.coeffs[3 * vertices[n] + comp]);
                    for a in 0..8 {
                        let mut sf = 0.0;
                        for b in 0..8 {
                            sf += s[a][b] * f[b];
                        }
                        value += h * f[a] * sf;
                        grad[3 * vertices[a] + comp] += 2.0 * h * sf;
                    }
                }
            }
        }
    }
    (value, grad)
}

/// `integral of |div u|^2` over the grid in volume units, with analytic
/// gradient, using the per-voxel-constant divergence of the conforming
/// discretization (voxel mean). This is the soft incompressibility penalty.
pub fn divergence_squared(grid: &MotionGrid) -> (f64, Vec<f64>) {
    let op = DivergenceOp::new(grid.dims, grid.spacing);
    let mut div = vec![0.0; op.rows()];
    op.apply(&grid.coeffs, &mut div);
    let vol = grid.spacing.powi(3);
    let value = div.iter().map(|d| d * d).sum::<f64>() / vol;
    for d in div.iter_mut() {
        *d *= 2.0 / vol;
    }
    let mut grad = vec![0.0; grid.coeffs.len()];
    op.apply_transpose(&div, &mut grad);
    (value, grad)
}
