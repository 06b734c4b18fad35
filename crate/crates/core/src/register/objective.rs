//! The M-step objective after eliminating the translation in closed form.
//!
//! Given the posteriors P (M x N, column-stochastic) the objective only
//! depends on the data through the 3x3 matrices A and B and the scalars K1
//! and K2, so each evaluation during the quasi-Newton search is O(1).

use nalgebra::{DMatrix, Matrix3};

use super::chart::{chart_to_quaternion, rotation_chart_jacobian, rotation_unchecked};
use crate::cloud::{PointCloud, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Sum of p_ji x^_i y^_j^T over centered positions.
    pub a: Matrix3<f64>,
    /// Sum of p_ji xn_i yn_j^T over normals.
    pub b: Matrix3<f64>,
    /// Row-sum weighted spread of the centered Y positions.
    pub k1: f64,
    /// Column-sum weighted spread of the centered X positions.
    pub k2: f64,
    /// Total posterior mass (equals |X| for column-stochastic P).
    pub np: f64,
    pub mu_x: Vec3,
    pub mu_y: Vec3,
}

impl SufficientStats {
    pub fn new(x: &PointCloud, y: &PointCloud, p: &DMatrix<f64>) -> Result<Self> {
        let (m, n) = (y.len(), x.len());
        if p.nrows() != m || p.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "posterior matrix is {}x{}, expected {m}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        let col: Vec<f64> = (0..n).map(|i| p.column(i).sum()).collect();
        let row: Vec<f64> = (0..m).map(|j| p.row(j).sum()).collect();
        let np: f64 = col.iter().sum();
        if np <= 0.0 {
            return Err(Error::Degenerate("posterior matrix has no mass".into()));
        }
        let mu_x = (0..n).fold(Vec3::zeros(), |acc, i| acc + x.position(i) * col[i]) / np;
        let mu_y = (0..m).fold(Vec3::zeros(), |acc, j| acc + y.position(j) * row[j]) / np;
        let xh: Vec<Vec3> = (0..n).map(|i| x.position(i) - mu_x).collect();
        let yh: Vec<Vec3> = (0..m).map(|j| y.position(j) - mu_y).collect();
        let k2 = (0..n).map(|i| col[i] * xh[i].norm_squared()).sum();
        let k1 = (0..m).map(|j| row[j] * yh[j].norm_squared()).sum();
        let mut a = Matrix3::zeros();
        let mut b = Matrix3::zeros();
        for i in 0..n {
            // Accumulate sum_j p_ji y_j first so the outer product is formed once per i.
            let mut wy = Vec3::zeros();
            let mut wn = Vec3::zeros();
            for j in 0..m {
                let pji = p[(j, i)];
                if pji != 0.0 {
                    wy += yh[j] * pji;
                    wn += y.normal(j) * pji;
                }
            }
            a += xh[i] * wy.transpose();
            b += x.normal(i) * wn.transpose();
        }
        Ok(Self {
            a,
            b,
            k1,
            k2,
            np,
            mu_x,
            mu_y,
        })
    }

    /// Expresses the statistics relative to a base rotation so that a chart
    /// centered at the identity can parameterize R = R_chart * R_base.
    pub fn rebased(&self, base: &Matrix3<f64>) -> Self {
        Self {
            a: self.a * base.transpose(),
            b: self.b * base.transpose(),
            ..self.clone()
        }
    }

    /// Translation minimizing Q for a fixed rotation and scale.
    pub fn translation(&self, rotation: &Matrix3<f64>, scale: f64) -> Vec3 {
        self.mu_x - rotation * self.mu_y * scale
    }

    /// Weighted squared residual K2 - 2 s tr(A^T R) + s^2 K1.
    pub fn residual(&self, rotation: &Matrix3<f64>, scale: f64) -> f64 {
        self.k2 - 2.0 * scale * self.a.dot(rotation) + scale * scale * self.k1
    }

    /// Variance that makes dQ/dsigma vanish for the given rotation and scale.
    pub fn stationary_sigma(&self, rotation: &Matrix3<f64>, scale: f64) -> f64 {
        (self.residual(rotation, scale).max(0.0) / (3.0 * self.np)).sqrt()
    }
}

/// ln(e^a - e^-a), stable for small and large a.
pub(crate) fn log_two_sinh(alpha: f64) -> f64 {
    alpha + (-(-2.0 * alpha).exp_m1()).ln()
}

pub(crate) fn coth(alpha: f64) -> f64 {
    1.0 / alpha.tanh()
}

/// The natural parameters of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Q(R, s, alpha, sigma), dropping parameter-independent constants. With
/// `use_normals = false` the concentration terms are removed entirely.
pub fn objective(stats: &SufficientStats, p: &ObjectiveParams, use_normals: bool) -> f64 {
    let n = stats.np;
    let mut q = stats.residual(&p.rotation, p.scale) / (2.0 * p.sigma * p.sigma) + 3.0 * n * p.sigma.ln();
    if use_normals {
        q += -p.alpha * stats.b.dot(&p.rotation) - n * p.alpha.ln() + n * log_two_sinh(p.alpha);
    }
    q
}

/// Partial derivatives in the natural parameters, with the rotation given
/// by a chart point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub psi: Vec3,
    pub scale: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Parameters with the rotation expressed as a chart point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartParams {
    pub psi: Vec3,
    pub scale: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl ChartParams {
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(&chart_to_quaternion(&self.psi))
    }

    pub fn natural(&self) -> ObjectiveParams {
        ObjectiveParams {
            rotation: self.rotation(),
            scale: self.scale,
            alpha: self.alpha,
            sigma: self.sigma,
        }
    }
}

pub fn objective_at_chart(stats: &SufficientStats, p: &ChartParams, use_normals: bool) -> f64 {
    objective(stats, &p.natural(), use_normals)
}

pub fn gradient_at_chart(stats: &SufficientStats, p: &ChartParams, use_normals: bool) -> Gradient {
    let r = p.rotation();
    let n = stats.np;
    let (s, sigma, alpha) = (p.scale, p.sigma, p.alpha);
    let s2 = sigma * sigma;
    let tr_ar = stats.a.dot(&r);
    let jac = rotation_chart_jacobian(&p.psi);
    let mut psi = Vec3::zeros();
    for k in 0..3 {
        psi[k] = -s / s2 * stats.a.dot(&jac[k]);
        if use_normals {
            psi[k] -= alpha * stats.b.dot(&jac[k]);
        }
    }
    Gradient {
        psi,
        scale: -tr_ar / s2 + s * stats.k1 / s2,
        alpha: if use_normals {
            -stats.b.dot(&r) - n / alpha + n * coth(alpha)
        } else {
            0.0
        },
        sigma: -stats.residual(&r, s) / (s2 * sigma) + 3.0 * n / sigma,
    }
}
