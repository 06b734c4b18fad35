//! Similarity registration of oriented point sets.
//!
//! Y is treated as the centroids of a mixture whose components combine an
//! isotropic Gaussian over positions with a Von Mises-Fisher density over
//! normals; X is the observed data. EM alternates posterior computation with
//! a quasi-Newton M-step over rotation (through a stereographic quaternion
//! chart), scale, concentration and noise scale, and a closed-form
//! translation. The fitted transform maps Y into the frame of X:
//! x ~ s R y + t, x_n ~ R y_n.

pub mod bfgs;
pub mod chart;
pub mod objective;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, SpatialIndex, Vec3};
use crate::error::{Error, Result};
use bfgs::{minimize, BfgsOptions};
use chart::{chart_to_quaternion, rotation_unchecked, IDENTITY_CHART};
use objective::log_two_sinh;

pub use chart::{rotation_error, QuaternionChart};
pub use objective::{gradient_at_chart, objective, objective_at_chart, ChartParams, Gradient, ObjectiveParams, SufficientStats};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, rename_all = "kebab-case")]
pub struct RegConfig {
    pub max_iterations: usize,
    /// EM stops when the relative change of the negative log-likelihood
    /// falls below this value.
    pub tolerance: f64,
    pub bfgs_max_iterations: usize,
    pub bfgs_gradient_tolerance: f64,
    pub alpha_max: f64,
    pub alpha_init: f64,
    /// Include the normal (Von Mises-Fisher) term; false gives position-only
    /// similarity registration.
    pub use_normals: bool,
    /// Lower bound on sigma relative to the RMS spread of X, keeping the
    /// likelihood bounded for exactly matching sets.
    pub sigma_floor_ratio: f64,
    pub select_distance_factor: f64,
    pub select_angle_deg: f64,
    /// Record (Q, sigma, s, alpha) after every M-step.
    pub trace: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            bfgs_max_iterations: 50,
            bfgs_gradient_tolerance: 1e-8,
            alpha_max: 10.0,
            alpha_init: 1.0,
            use_normals: true,
            sigma_floor_ratio: 1e-6,
            select_distance_factor: 1.5,
            select_angle_deg: 20.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vec3,
    pub alpha: f64,
    pub sigma: f64,
}

impl RegistrationParams {
    pub fn initial(alpha: f64, sigma: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vec3::zeros(),
            alpha,
            sigma,
        }
    }

    pub fn transform_point(&self, y: &Vec3) -> Vec3 {
        self.rotation * y * self.scale + self.translation
    }

    pub fn transform_normal(&self, n: &Vec3) -> Vec3 {
        self.rotation * n
    }
}

/// Posteriors p_ji as an M x N matrix (rows index Y, columns index X).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    p: DMatrix<f64>,
}

impl CorrespondenceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.p[(j, i)]
    }

    pub fn n_components(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_observations(&self) -> usize {
        self.p.ncols()
    }

    /// argmax_j p_ji, smallest j on ties.
    pub fn best_match(&self, i: usize) -> usize {
        let col = self.p.column(i);
        let mut best = 0;
        for j in 1..col.len() {
            if col[j] > col[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub nll: f64,
    pub q: f64,
    pub sigma: f64,
    pub scale: f64,
    pub alpha: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,nll,q,sigma,scale,alpha\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, r.nll, r.q, r.sigma, r.scale, r.alpha));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RegistrationReport {
    pub params: RegistrationParams,
    pub p: CorrespondenceMatrix,
    pub mean_best_match_angle: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Negative log-likelihood at the start of each EM iteration and at the end.
    pub nll_history: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

fn require_normals(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if !x.has_normals() || !y.has_normals() {
        return Err(Error::InvalidArgument("registration needs normals on both point sets".into()));
    }
    Ok(())
}

/// Posteriors and the negative log-likelihood of X under the mixture.
fn e_step_full(x: &PointCloud, y: &PointCloud, prm: &RegistrationParams, use_normals: bool) -> Result<(DMatrix<f64>, f64)> {
    let (m, n) = (y.len(), x.len());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("registration needs non-empty point sets".into()));
    }
    let ty: Vec<Vec3> = (0..m).map(|j| prm.transform_point(&y.position(j))).collect();
    let tn: Vec<Vec3> = (0..m).map(|j| prm.transform_normal(&y.normal(j))).collect();
    let inv = 1.0 / (2.0 * prm.sigma * prm.sigma);
    let alpha = if use_normals { prm.alpha } else { 0.0 };
    let mut log_norm = -1.5 * (2.0 * std::f64::consts::PI * prm.sigma * prm.sigma).ln() - (m as f64).ln();
    if use_normals {
        log_norm += prm.alpha.ln() - (2.0 * std::f64::consts::PI).ln() - log_two_sinh(prm.alpha);
    }
    let mut p = DMatrix::zeros(m, n);
    let mut nll = 0.0;
    for i in 0..n {
        let (xp, xn) = (x.position(i), x.normal(i));
        let mut col = p.column_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            let mut e = -(xp - ty[j]).norm_squared() * inv;
            if alpha != 0.0 {
                e += alpha * xn.dot(&tn[j]);
            }
            col[j] = e;
            max = max.max(e);
        }
        if !max.is_finite() {
            return Err(Error::Numerical(format!("non-finite posterior exponent for point {i}")));
        }
        let mut sum = 0.0;
        for j in 0..m {
            col[j] = (col[j] - max).exp();
            sum += col[j];
        }
        col /= sum;
        nll -= max + sum.ln() + log_norm;
    }
    Ok((p, nll))
}

/// Posterior probabilities of each Y component for each X point.
pub fn e_step(x: &PointCloud, y: &PointCloud, params: &RegistrationParams) -> Result<CorrespondenceMatrix> {
    e_step_with(x, y, params, true)
}

pub fn e_step_with(x: &PointCloud, y: &PointCloud, params: &RegistrationParams, use_normals: bool) -> Result<CorrespondenceMatrix> {
    if use_normals {
        require_normals(x, y)?;
    }
    Ok(CorrespondenceMatrix {
        p: e_step_full(x, y, params, use_normals)?.0,
    })
}

/// Negative log-likelihood of X under the mixture defined by Y and `params`.
pub fn negative_log_likelihood(x: &PointCloud, y: &PointCloud, params: &RegistrationParams, use_normals: bool) -> Result<f64> {
    Ok(e_step_full(x, y, params, use_normals)?.1)
}

#[derive(Debug, Clone, Copy)]
pub struct MStepOutcome {
    pub params: RegistrationParams,
    /// Objective at the warm start (with its optimal translation).
    pub q_before: f64,
    pub q_after: f64,
    pub bfgs_iterations: usize,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Maximizes the expected complete-data likelihood for fixed posteriors.
pub fn m_step(
    x: &PointCloud,
    y: &PointCloud,
    p: &CorrespondenceMatrix,
    warm: &RegistrationParams,
    cfg: &RegConfig,
) -> Result<MStepOutcome> {
    let stats = SufficientStats::new(x, y, &p.p)?;
    m_step_stats(&stats, warm, cfg)
}

fn m_step_stats(stats: &SufficientStats, warm: &RegistrationParams, cfg: &RegConfig) -> Result<MStepOutcome> {
    let use_normals = cfg.use_normals;
    let natural = |r: Matrix3<f64>, s: f64, a: f64, sg: f64| ObjectiveParams {
        rotation: r,
        scale: s,
        alpha: a,
        sigma: sg,
    };
    let q_before = objective(stats, &natural(warm.rotation, warm.scale, warm.alpha, warm.sigma), use_normals);
    if !q_before.is_finite() {
        return Err(Error::Numerical("objective is not finite at the warm start".into()));
    }
    let floor = cfg.sigma_floor_ratio * (stats.k2 / stats.np).sqrt().max(f64::MIN_POSITIVE);
    let alpha_max = cfg.alpha_max;

    let mut base = warm.rotation;
    let mut scale_log = warm.scale.ln();
    let mut alpha_u = {
        let frac = (warm.alpha / alpha_max).clamp(1e-12, 1.0 - 1e-12);
        (frac / (1.0 - frac)).ln()
    };
    let mut sigma_v = (warm.sigma - floor).max(floor).ln();
    let mut total_iterations = 0;

    for _recenter in 0..4 {
        let local = stats.rebased(&base);
        let dim = if use_normals { 6 } else { 5 };
        let mut z0 = DVector::zeros(dim);
        z0.fixed_rows_mut::<3>(0).copy_from(&Vec3::from(IDENTITY_CHART));
        z0[3] = scale_log;
        z0[4] = sigma_v;
        if use_normals {
            z0[5] = alpha_u;
        }
        let eval = |z: &DVector<f64>| -> (f64, DVector<f64>) {
            let psi = Vec3::new(z[0], z[1], z[2]);
            let s = z[3].exp();
            let sigma = floor + z[4].exp();
            let alpha = if use_normals { alpha_max * logistic(z[5]) } else { 1.0 };
            let cp = ChartParams {
                psi,
                scale: s,
                alpha,
                sigma,
            };
            let value = objective_at_chart(&local, &cp, use_normals);
            let g = gradient_at_chart(&local, &cp, use_normals);
            let mut grad = DVector::zeros(z.len());
            grad.fixed_rows_mut::<3>(0).copy_from(&g.psi);
            grad[3] = g.scale * s;
            grad[4] = g.sigma * (sigma - floor);
            if use_normals {
                grad[5] = g.alpha * alpha * (1.0 - alpha / alpha_max);
            }
            (value, grad)
        };
        let out = minimize(
            eval,
            z0,
            &BfgsOptions {
                max_iterations: cfg.bfgs_max_iterations.saturating_sub(total_iterations),
                gradient_tolerance: cfg.bfgs_gradient_tolerance,
                ..Default::default()
            },
        );
        total_iterations += out.iterations;
        if !out.value.is_finite() {
            return Err(Error::Numerical("objective diverged during the M-step".into()));
        }
        let psi = Vec3::new(out.x[0], out.x[1], out.x[2]);
        scale_log = out.x[3];
        sigma_v = out.x[4];
        if use_normals {
            alpha_u = out.x[5];
        }
        base = rotation_unchecked(&chart_to_quaternion(&psi)) * base;
        // Re-center and continue only when the chart drifted toward its pole
        // with iteration budget left.
        let drifted = psi.norm() > 1e3;
        if !drifted || out.converged || total_iterations >= cfg.bfgs_max_iterations {
            break;
        }
    }

    let rotation = orthonormalize(&base);
    let scale = scale_log.exp();
    let sigma = floor + sigma_v.exp();
    let alpha = if use_normals { alpha_max * logistic(alpha_u) } else { warm.alpha };
    let q_after = objective(stats, &natural(rotation, scale, alpha, sigma), use_normals);
    let params = if q_after <= q_before {
        RegistrationParams {
            rotation,
            scale,
            translation: stats.translation(&rotation, scale),
            alpha,
            sigma,
        }
    } else {
        RegistrationParams {
            translation: stats.translation(&warm.rotation, warm.scale),
            ..*warm
        }
    };
    Ok(MStepOutcome {
        params,
        q_before,
        q_after: q_after.min(q_before),
        bfgs_iterations: total_iterations,
    })
}

/// Projects a nearly orthogonal matrix back onto SO(3) via its quaternion.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    rotation_unchecked(&chart::rotation_to_quaternion(r))
}

/// Validates that X can anchor a registration: at least three points that
/// are not collinear.
pub fn check_registrable(x: &PointCloud) -> Result<()> {
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("registration needs at least 3 points, got {}", x.len())));
    }
    let all: Vec<usize> = (0..x.len()).collect();
    let (e1, e2) = crate::crosssec::scale_of(x, &all);
    if e2 <= 1e-12 * e1.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("registration source is collinear".into()));
    }
    Ok(())
}

/// Initial noise scale: mean squared X-Y distance over all pairs, over 3.
pub fn initial_sigma(x: &PointCloud, y: &PointCloud) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mx = x.positions().fold(Vec3::zeros(), |a, p| a + p) / n;
    let my = y.positions().fold(Vec3::zeros(), |a, p| a + p) / m;
    let sx = x.positions().map(|p| p.norm_squared()).sum::<f64>() / n;
    let sy = y.positions().map(|p| p.norm_squared()).sum::<f64>() / m;
    ((sx + sy - 2.0 * mx.dot(&my)).max(0.0) / 3.0).sqrt()
}

/// Expectation-maximization from R = I, s = 1, t = 0.
pub fn register(x: &PointCloud, y: &PointCloud, cfg: &RegConfig) -> Result<RegistrationReport> {
    require_normals(x, y)?;
    check_registrable(x)?;
    if y.is_empty() {
        return Err(Error::EmptyInput("registration target is empty".into()));
    }
    let sigma0 = initial_sigma(x, y);
    if sigma0 <= 0.0 {
        return Err(Error::Degenerate("point sets coincide at a single location".into()));
    }
    let mut params = RegistrationParams::initial(cfg.alpha_init.min(cfg.alpha_max), sigma0);
    let mut nll_history = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (mut p, mut nll) = e_step_full(x, y, &params, cfg.use_normals)?;
    nll_history.push(nll);

    while iterations < cfg.max_iterations {
        iterations += 1;
        let stats = SufficientStats::new(x, y, &p)?;
        let step = m_step_stats(&stats, &params, cfg)?;
        params = step.params;
        let (p_next, nll_next) = e_step_full(x, y, &params, cfg.use_normals)?;
        if cfg.trace {
            trace.push(TraceRow {
                iteration: iterations,
                nll: nll_next,
                q: step.q_after,
                sigma: params.sigma,
                scale: params.scale,
                alpha: params.alpha,
            });
        }
        let change = (nll - nll_next).abs();
        p = p_next;
        nll = nll_next;
        nll_history.push(nll);
        if change <= cfg.tolerance * nll.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let p = CorrespondenceMatrix { p };
    let mean_best_match_angle = mean_best_match_angle(x, y, &params, &p);
    Ok(RegistrationReport {
        params,
        p,
        mean_best_match_angle,
        iterations,
        converged,
        nll_history,
        trace,
    })
}

fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Mean angle (degrees) between each X normal and the rotated normal of its
/// most probable Y correspondent.
pub fn mean_best_match_angle(x: &PointCloud, y: &PointCloud, params: &RegistrationParams, p: &CorrespondenceMatrix) -> f64 {
    let total: f64 = (0..x.len())
        .map(|i| angle_deg(&x.normal(i), &params.transform_normal(&y.normal(p.best_match(i)))))
        .sum();
    total / x.len() as f64
}

/// Y points that, after transformation, have an X point within
/// 1.5 sigma whose normal differs by less than 20 degrees.
pub fn select_matched_points(x: &PointCloud, y: &PointCloud, report: &RegistrationReport) -> Vec<usize> {
    let cfg = RegConfig::default();
    select_matched_points_with(x, y, &report.params, cfg.select_distance_factor, cfg.select_angle_deg)
}

pub fn select_matched_points_with(
    x: &PointCloud,
    y: &PointCloud,
    params: &RegistrationParams,
    distance_factor: f64,
    angle_deg_max: f64,
) -> Vec<usize> {
    let index = SpatialIndex::new(x);
    let radius = distance_factor * params.sigma;
    (0..y.len())
        .filter(|&j| {
            let ty = params.transform_point(&y.position(j));
            let tn = params.transform_normal(&y.normal(j));
            index
                .within_radius(&ty, radius)
                .into_iter()
                .any(|i| angle_deg(&x.normal(i), &tn) < angle_deg_max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points on an ellipsoid with outward normals; asymmetric enough that
    /// the registration has a unique answer.
    fn ellipsoid(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axes = Vec3::new(3.0, 2.0, 1.0);
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        while pts.len() < n {
            let u = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if u.norm() < 0.2 || u.norm() > 1.0 || u.x < -0.3 {
                // Cutting one end breaks the ellipsoid's mirror symmetries.
                continue;
            }
            let u = u.normalize();
            pts.push(u.component_mul(&axes));
            nrm.push(u.component_div(&axes).normalize());
        }
        PointCloud::from_oriented(&pts, &nrm).unwrap()
    }

    fn transformed(y: &PointCloud, r: &Matrix3<f64>, s: f64, t: &Vec3) -> PointCloud {
        let pts: Vec<Vec3> = y.positions().map(|p| r * p * s + t).collect();
        let nrm: Vec<Vec3> = (0..y.len()).map(|j| r * y.normal(j)).collect();
        PointCloud::from_oriented(&pts, &nrm).unwrap()
    }

    #[test]
    fn single_component_takes_all_mass() {
        let x = ellipsoid(20, 1);
        let y = PointCloud::from_oriented(&[Vec3::zeros()], &[Vec3::x()]).unwrap();
        let p = e_step(&x, &y, &RegistrationParams::initial(1.0, 1.0)).unwrap();
        assert!((0..20).all(|i| p.get(0, i) == 1.0));
    }

    #[test]
    fn equidistant_components_split_evenly_without_concentration() {
        let x = PointCloud::from_oriented(&[Vec3::zeros()], &[Vec3::z()]).unwrap();
        let y = PointCloud::from_oriented(&[Vec3::x(), -Vec3::x()], &[Vec3::z(), Vec3::x()]).unwrap();
        let p = e_step(&x, &y, &RegistrationParams::initial(1e-12, 1.0)).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-9 && (p.get(1, 0) - 0.5).abs() < 1e-9);
        let q = e_step_with(&x, &y, &RegistrationParams::initial(5.0, 1.0), false).unwrap();
        assert_eq!(q.get(0, 0), q.get(1, 0));
    }

    #[test]
    fn aligned_normal_favored_by_exp_20() {
        let x = PointCloud::from_oriented(&[Vec3::zeros()], &[Vec3::z()]).unwrap();
        let y = PointCloud::from_oriented(&[Vec3::x() * 1e-3, -Vec3::x() * 1e-3], &[Vec3::z(), -Vec3::z()]).unwrap();
        let p = e_step(&x, &y, &RegistrationParams::initial(10.0, 1e6)).unwrap();
        let ratio = p.get(0, 0) / p.get(1, 0);
        assert!((ratio / 20f64.exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_columns_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (ellipsoid(40, 4), ellipsoid(25, 5));
        for _ in 0..10 {
            let prm = RegistrationParams {
                rotation: Rotation3::from_euler_angles(rng.gen_range(-3.0..3.0), 0.3, 0.1).into_inner(),
                scale: rng.gen_range(0.5..2.0),
                translation: Vec3::new(rng.gen_range(-1.0..1.0), 0.0, 0.0),
                alpha: rng.gen_range(0.01..10.0),
                sigma: rng.gen_range(0.01..3.0),
            };
            let p = e_step(&x, &y, &prm).unwrap();
            for i in 0..x.len() {
                let col = p.matrix().column(i);
                assert!((col.sum() - 1.0).abs() < 1e-9);
                assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let x = ellipsoid(10, 6);
        let mut prm = RegistrationParams::initial(1.0, 1.0);
        prm.translation = Vec3::new(f64::NAN, 0.0, 0.0);
        assert!(e_step(&x, &x, &prm).is_err());
    }

    #[test]
    fn self_match_is_a_fixed_point() {
        let x = ellipsoid(60, 7);
        let p = CorrespondenceMatrix {
            p: DMatrix::identity(60, 60),
        };
        let warm = RegistrationParams::initial(1.0, initial_sigma(&x, &x));
        let out = m_step(&x, &x, &p, &warm, &RegConfig::default()).unwrap();
        assert!((out.params.rotation - Matrix3::identity()).norm() < 1e-3);
        assert!((out.params.scale - 1.0).abs() < 1e-3);
        assert!(out.params.translation.norm() < 1e-3 * x.bbox_diagonal());
        assert!(out.q_after <= out.q_before + 1e-9);
    }

    fn random_stats(rng: &mut ChaCha8Rng) -> SufficientStats {
        let (x, y) = (ellipsoid(30, rng.gen()), ellipsoid(20, rng.gen()));
        let mut p = DMatrix::from_fn(20, 30, |_, _| rng.gen_range(0.0..1.0));
        for mut c in p.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        SufficientStats::new(&x, &y, &p).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let stats = random_stats(&mut rng);
            let cp = ChartParams {
                psi: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                scale: rng.gen_range(0.5..2.0),
                alpha: rng.gen_range(0.1..10.0),
                sigma: rng.gen_range(0.3..3.0),
            };
            let g = gradient_at_chart(&stats, &cp, true);
            let f = |c: ChartParams| objective_at_chart(&stats, &c, true);
            let h = 1e-6;
            let fd = |bump: &dyn Fn(&mut ChartParams, f64)| {
                let (mut a, mut b) = (cp, cp);
                bump(&mut a, h);
                bump(&mut b, -h);
                (f(a) - f(b)) / (2.0 * h)
            };
            let checks = [
                (g.psi.x, fd(&|c, d| c.psi.x += d)),
                (g.psi.y, fd(&|c, d| c.psi.y += d)),
                (g.psi.z, fd(&|c, d| c.psi.z += d)),
                (g.scale, fd(&|c, d| c.scale += d)),
                (g.alpha, fd(&|c, d| c.alpha += d)),
                (g.sigma, fd(&|c, d| c.sigma += d)),
            ];
            for (k, (a, n)) in checks.iter().enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(rel < 1e-5, "component {k}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn sigma_is_stationary_at_the_optimum() {
        let x = ellipsoid(50, 9);
        let r = Rotation3::from_euler_angles(0.2, -0.1, 0.3).into_inner();
        let y = transformed(&ellipsoid(50, 9), &r, 0.8, &Vec3::new(0.5, 0.0, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = DMatrix::from_fn(50, 50, |j, i| if i == j { 1.0 } else { rng.gen_range(0.0..0.05) });
        for mut c in p.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        let cfg = RegConfig {
            bfgs_max_iterations: 500,
            ..Default::default()
        };
        let stats = SufficientStats::new(&x, &y, &p).unwrap();
        let out = m_step_stats(&stats, &RegistrationParams::initial(1.0, 2.0), &cfg).unwrap();
        let closed = stats.stationary_sigma(&out.params.rotation, out.params.scale);
        assert!((closed - out.params.sigma).abs() < 1e-4, "{closed} vs {}", out.params.sigma);
    }

    #[test]
    fn recovers_an_exact_similarity() {
        let y = ellipsoid(150, 11);
        let r = Rotation3::from_euler_angles(0.3, -0.2, 0.4).into_inner();
        let x = transformed(&y, &r, 1.3, &Vec3::new(0.4, -0.3, 0.2));
        for use_normals in [true, false] {
            let cfg = RegConfig {
                use_normals,
                ..Default::default()
            };
            let rep = register(&x, &y, &cfg).unwrap();
            assert!(rotation_error(&rep.params.rotation, &r) < 0.05, "normals {use_normals}");
            assert!((rep.params.scale - 1.3).abs() / 1.3 < 0.02);
            assert!((rep.params.translation - Vec3::new(0.4, -0.3, 0.2)).norm() < 0.05);
            assert!(rep.mean_best_match_angle < 5.0);
            // Everything matches after an exact transform.
            assert_eq!(select_matched_points(&x, &y, &rep).len(), y.len());
        }
    }

    #[test]
    fn likelihood_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..5 {
            let y = ellipsoid(80, 100 + trial);
            let r = Rotation3::from_euler_angles(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let x = transformed(&ellipsoid(70, 200 + trial), r.matrix(), rng.gen_range(0.7..1.3), &Vec3::zeros());
            let rep = register(&x, &y, &RegConfig::default()).unwrap();
            for w in rep.nll_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-7, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn distant_clutter_gets_no_mass() {
        let x = ellipsoid(60, 13);
        let sigma0 = initial_sigma(&x, &x);
        let mut pts: Vec<Vec3> = x.positions().collect();
        let mut nrm: Vec<Vec3> = (0..x.len()).map(|i| x.normal(i)).collect();
        for k in 0..20 {
            pts.push(Vec3::new(15.0 * sigma0 + k as f64 * 0.1, 0.0, 0.0));
            nrm.push(Vec3::z());
        }
        let y = PointCloud::from_oriented(&pts, &nrm).unwrap();
        let rep = register(&x, &y, &RegConfig::default()).unwrap();
        for i in 0..x.len() {
            let clutter: f64 = (60..80).map(|j| rep.p.get(j, i)).sum();
            assert!(clutter < 0.01, "point {i}: {clutter}");
        }
    }

    #[test]
    fn selection_gates() {
        let x = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x(), Vec3::y()], &[Vec3::z(); 3]).unwrap();
        let params = RegistrationParams::initial(1.0, 0.1);
        let y = PointCloud::from_oriented(
            &[Vec3::new(0.05, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 0.05, 0.0)],
            &[Vec3::z(), Vec3::z(), -Vec3::z()],
        )
        .unwrap();
        assert_eq!(select_matched_points_with(&x, &y, &params, 1.5, 20.0), vec![0]);
    }

    #[test]
    fn refuses_degenerate_sources() {
        let line = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0, Vec3::x() * 3.0], &[Vec3::z(); 4]).unwrap();
        assert!(matches!(register(&line, &line, &RegConfig::default()), Err(Error::Degenerate(_))));
        let two = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x()], &[Vec3::z(); 2]).unwrap();
        assert!(register(&two, &line, &RegConfig::default()).is_err());
    }

    #[test]
    fn registration_is_equivariant() {
        let y = ellipsoid(80, 14);
        let r = Rotation3::from_euler_angles(0.2, 0.1, -0.2).into_inner();
        let x = transformed(&ellipsoid(90, 15), &r, 1.1, &Vec3::new(0.2, 0.1, 0.0));
        let g = Rotation3::from_euler_angles(1.0, -0.7, 2.1).into_inner();
        let (gx, gy) = (transformed(&x, &g, 1.0, &Vec3::zeros()), transformed(&y, &g, 1.0, &Vec3::zeros()));
        let a = register(&x, &y, &RegConfig::default()).unwrap();
        let b = register(&gx, &gy, &RegConfig::default()).unwrap();
        let conj = g * a.params.rotation * g.transpose();
        assert!((conj - b.params.rotation).norm() < 5e-3);
        assert!((a.params.scale - b.params.scale).abs() < 1e-6);
    }

    #[test]
    fn trace_is_recorded_on_request() {
        let y = ellipsoid(40, 16);
        let x = transformed(&y, &Matrix3::identity(), 1.2, &Vec3::zeros());
        let rep = register(
            &x,
            &y,
            &RegConfig {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rep.trace.len(), rep.iterations);
        let csv = trace_csv(&rep.trace);
        assert!(csv.starts_with("iteration,nll,q,sigma,scale,alpha\n"));
        assert_eq!(csv.lines().count(), rep.iterations + 1);
    }
}
