//! Camera projection models.
//!
//! Two models share one projection contract: a pinhole camera (3x4 matrix,
//! projective division) for measurements in air, and the 19-monomial Soloff
//! polynomial camera (cubic in x and y, quadratic in z, no perspective
//! division) for multi-media setups. Both map volume coordinates (voxel
//! units) to pixel coordinates.

use crate::error::{Error, Result};
use crate::geometry::Box3;
use nalgebra::{Matrix2, Matrix2x3, Matrix3x4, Vector2, Vector3, Vector4};

/// Number of monomials in the Soloff polynomial model.
pub const SOLOFF_TERMS: usize = 19;

/// Pinhole camera `u = P1.p~ / P3.p~`, `v = P2.p~ / P3.p~`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    /// 3x4 projection matrix; the bottom row must not be the zero vector.
    pub p: Matrix3x4<f64>,
}

/// Soloff polynomial camera: 19 coefficient pairs, one (u, v) pair per
/// monomial. Evaluation is total on all of R^3.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialCamera {
    /// `a[i]` multiplies the i-th monomial; `a[i][0]` feeds u, `a[i][1]` feeds v.
    pub a: [[f64; 2]; SOLOFF_TERMS],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Camera {
    Pinhole(PinholeCamera),
    Polynomial(PolynomialCamera),
}

/// Straight ray segment through the measurement volume, stored as its entry
/// and exit points on the volume boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub entry: Vector3<f64>,
    pub exit: Vector3<f64>,
}

/// The 19 Soloff monomials evaluated at `p`, in coefficient order:
/// 1, x, y, z, x2, xy, y2, xz, yz, z2, x3, x2y, xy2, y3, x2z, xyz, y2z, xz2, yz2.
pub fn soloff_monomials(p: &Vector3<f64>) -> [f64; SOLOFF_TERMS] {
    let (x, y, z) = (p.x, p.y, p.z);
    [
        1.0,
        x,
        y,
        z,
        x * x,
        x * y,
        y * y,
        x * z,
        y * z,
        z * z,
        x * x * x,
        x * x * y,
        x * y * y,
        y * y * y,
        x * x * z,
        x * y * z,
        y * y * z,
        x * z * z,
        y * z * z,
    ]
}

/// Gradients of the 19 monomials w.r.t. (x, y, z), same order as
/// [`soloff_monomials`].
fn soloff_monomial_gradients(p: &Vector3<f64>) -> [[f64; 3]; SOLOFF_TERMS] {
    let (x, y, z) = (p.x, p.y, p.z);
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [2.0 * x, 0.0, 0.0],
        [y, x, 0.0],
        [0.0, 2.0 * y, 0.0],
        [z, 0.0, x],
        [0.0, z, y],
        [0.0, 0.0, 2.0 * z],
        [3.0 * x * x, 0.0, 0.0],
        [2.0 * x * y, x * x, 0.0],
        [y * y, 2.0 * x * y, 0.0],
        [0.0, 3.0 * y * y, 0.0],
        [2.0 * x * z, 0.0, x * x],
        [y * z, x * z, x * y],
        [0.0, 2.0 * y * z, y * y],
        [z * z, 0.0, 2.0 * x * z],
        [0.0, z * z, 2.0 * y * z],
    ]
}

impl PinholeCamera {
    pub fn new(p: Matrix3x4<f64>) -> Self {
        PinholeCamera { p }
    }

    /// `[I | 0]` — projects (x, y, z) to (x/z, y/z).
    pub fn identity() -> Self {
        let mut p = Matrix3x4::zeros();
        p[(0, 0)] = 1.0;
        p[(1, 1)] = 1.0;
        p[(2, 2)] = 1.0;
        PinholeCamera { p }
    }
}

impl PolynomialCamera {
    pub fn new(a: [[f64; 2]; SOLOFF_TERMS]) -> Self {
        PolynomialCamera { a }
    }

    /// Maps (x, y, z) to (x, y): a1 = (1,0), a2 = (0,1), all else zero.
    pub fn identity() -> Self {
        let mut a = [[0.0; 2]; SOLOFF_TERMS];
        a[1] = [1.0, 0.0];
        a[2] = [0.0, 1.0];
        PolynomialCamera { a }
    }
}

impl Camera {
    /// Project a volume point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        match self {
            Camera::Pinhole(cam) => {
                let ph = Vector4::new(p.x, p.y, p.z, 1.0);
                let r = cam.p * ph;
                let uv = Vector2::new(r.x / r.z, r.y / r.z);
                if uv.x.is_finite() && uv.y.is_finite() {
                    Ok(uv)
                } else {
                    Err(Error::DegenerateProjection)
                }
            }
            Camera::Polynomial(cam) => {
                let m = soloff_monomials(p);
                let mut uv = Vector2::zeros();
                for i in 0..SOLOFF_TERMS {
                    uv.x += cam.a[i][0] * m[i];
                    uv.y += cam.a[i][1] * m[i];
                }
                Ok(uv)
            }
        }
    }

    /// Analytic 2x3 Jacobian of [`Camera::project`] at `p`.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        match self {
            Camera::Pinhole(cam) => {
                let ph = Vector4::new(p.x, p.y, p.z, 1.0);
                let r = cam.p * ph;
                let d = r.z;
                if d == 0.0 || !(r.x / d).is_finite() || !(r.y / d).is_finite() {
                    return Err(Error::DegenerateProjection);
                }
                // d(n/d)/dp_j = (P_row_j * d - n * P3_j) / d^2
                let mut jac = Matrix2x3::zeros();
                for j in 0..3 {
                    jac[(0, j)] = (cam.p[(0, j)] * d - r.x * cam.p[(2, j)]) / (d * d);
                    jac[(1, j)] = (cam.p[(1, j)] * d - r.y * cam.p[(2, j)]) / (d * d);
                }
                Ok(jac)
            }
            Camera::Polynomial(cam) => {
                let g = soloff_monomial_gradients(p);
                let mut jac = Matrix2x3::zeros();
                for i in 0..SOLOFF_TERMS {
                    for j in 0..3 {
                        jac[(0, j)] += cam.a[i][0] * g[i][j];
                        jac[(1, j)] += cam.a[i][1] * g[i][j];
                    }
                }
                Ok(jac)
            }
        }
    }

    /// Invert the projection at a fixed depth plane: find (x, y) such that
    /// `project((x, y, z)) = pixel`.
    ///
    /// The pinhole case is an exact 2x2 linear solve; the polynomial case is
    /// a 2D Newton iteration started at `init` (typically the volume center).
    pub fn back_project(
        &self,
        pixel: &Vector2<f64>,
        z: f64,
        init: &Vector2<f64>,
    ) -> Result<Vector2<f64>> {
        match self {
            Camera::Pinhole(cam) => {
                // (P1 - u P3) . (x,y,z,1) = 0 and (P2 - v P3) . (x,y,z,1) = 0
                let mut m = Matrix2::zeros();
                let mut rhs = Vector2::zeros();
                for (row, &coord) in [pixel.x, pixel.y].iter().enumerate() {
                    let a = cam.p.row(row) - coord * cam.p.row(2);
                    m[(row, 0)] = a[0];
                    m[(row, 1)] = a[1];
                    rhs[row] = -(a[2] * z + a[3]);
                }
                m.try_inverse()
                    .map(|inv| inv * rhs)
                    .ok_or(Error::BackProjectionFailure { iterations: 0, residual: f64::INFINITY })
            }
            Camera::Polynomial(_) => {
                let max_iters = 50;
                let mut xy = *init;
                let mut residual = f64::INFINITY;
                for it in 0..max_iters {
                    let p = Vector3::new(xy.x, xy.y, z);
                    let f = self.project(&p)? - pixel;
                    residual = f.norm();
                    if residual < 1e-12 {
                        return Ok(xy);
                    }
                    let jac = self.project_jacobian(&p)?;
                    let jxy = Matrix2::new(jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]);
                    let step = jxy
                        .try_inverse()
                        .ok_or(Error::BackProjectionFailure { iterations: it, residual })?
                        * f;
                    xy -= step;
                }
                // accept if the final residual is still within tolerance
                let p = Vector3::new(xy.x, xy.y, z);
                let f = self.project(&p)? - pixel;
                if f.norm() < 1e-6 {
                    Ok(xy)
                } else {
                    Err(Error::BackProjectionFailure { iterations: max_iters, residual })
                }
            }
        }
    }

    /// The viewing ray through `pixel`, clipped to the volume: back-project
    /// at the two bounding z-planes of `omega` and clip the straight segment
    /// to the box.
    pub fn ray_through(&self, pixel: &Vector2<f64>, omega: &Box3) -> Result<Ray> {
        let c = omega.center();
        let init = Vector2::new(c.x, c.y);
        let near = self.back_project(pixel, omega.min[2], &init)?;
        let far = self.back_project(pixel, omega.max[2], &init)?;
        let a = Vector3::new(near.x, near.y, omega.min[2]);
        let b = Vector3::new(far.x, far.y, omega.max[2]);
        let (entry, exit) = omega
            .clip_segment(&a, &b)
            .ok_or(Error::EmptyRay { u: pixel.x, v: pixel.y })?;
        Ok(Ray { entry, exit })
    }
}

/// Fit a polynomial camera to 3D-to-2D correspondences by linear least
/// squares. The Soloff model is linear in its 38 coefficients, so a single
/// QR solve is exact; u- and v-coefficients share the monomial matrix.
pub fn fit_polynomial(correspondences: &[(Vector3<f64>, Vector2<f64>)]) -> Result<PolynomialCamera> {
    let n = correspondences.len();
    if n < SOLOFF_TERMS {
        return Err(Error::UnderdeterminedFit(format!(
            "{n} correspondences, need at least {SOLOFF_TERMS}"
        )));
    }
    let mut m = nalgebra::DMatrix::zeros(n, SOLOFF_TERMS);
    let mut rhs = nalgebra::DMatrix::zeros(n, 2);
    for (r, (p, px)) in correspondences.iter().enumerate() {
        let mono = soloff_monomials(p);
        for (c, &v) in mono.iter().enumerate() {
            m[(r, c)] = v;
        }
        rhs[(r, 0)] = px.x;
        rhs[(r, 1)] = px.y;
    }
    let qr = m.qr();
    let r = qr.r();
    let diag = r.diagonal();
    let max_diag = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    if max_diag == 0.0 || diag.iter().any(|d| d.abs() < 1e-10 * max_diag) {
        return Err(Error::UnderdeterminedFit(
            "rank-deficient monomial matrix (degenerate calibration target)".into(),
        ));
    }
    // thin-QR least squares: solve R x = Q^T rhs
    let qtb = qr.q().transpose() * rhs;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::UnderdeterminedFit("triangular solve failed".into()))?;
    let mut a = [[0.0; 2]; SOLOFF_TERMS];
    for i in 0..SOLOFF_TERMS {
        a[i] = [sol[(i, 0)], sol[(i, 1)]];
    }
    Ok(PolynomialCamera { a })
}
