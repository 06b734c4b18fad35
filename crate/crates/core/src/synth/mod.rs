//! Synthetic generalized cylinders with exact ground truth.
//!
//! A GC is a planar contour swept along a 3D axis: at each axis sample the
//! contour is scaled, rotated into the local Frenet frame and translated to
//! the axis point. Because every slice is a known similarity transform of
//! the same contour, the relative transform between any two slices is known
//! exactly, which is what the registration experiments measure against.

pub mod experiment;
pub mod fixtures;

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Vec3};
use crate::error::{Error, Result};

pub use experiment::{
    run_neighborhood_size_experiment, run_registration_trial, run_trials, trials_csv, NeighborhoodSizeResult, NormalsMode, TrialConfig,
    TrialRecord,
};

/// How contour points are placed on each slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// The same equispaced contour parameters on every slice.
    Regular,
    /// Independent uniform parameters per slice.
    Random,
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Regular => "regular",
            Sampling::Random => "random",
        }
    }
}

impl std::str::FromStr for Sampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Sampling::Regular),
            "random" => Ok(Sampling::Random),
            other => Err(Error::InvalidArgument(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// The 2D cross-section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContourSpec {
    Circle {
        radius: f64,
    },
    /// Closed periodic cubic spline through eight points at angles k·π/4
    /// with the given distances from the origin.
    Spline {
        radii: [f64; 8],
    },
}

/// How far apart adjacent slices of a random GC may be.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SliceSpacing {
    /// Maximum distance between adjacent slice centres, relative to the mean
    /// cross-section radius (scale offset times mean contour radius).
    pub relative_distance: f64,
    /// Maximum rotation between adjacent slice frames.
    pub max_turn_deg: f64,
}

impl Default for SliceSpacing {
    fn default() -> Self {
        Self {
            relative_distance: 0.5,
            max_turn_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GCSpec {
    /// Axis (C1 cos t, C2 sin t, C3 t). C1 = C2 = 0 gives a straight axis.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Axis parameter interval, sampled uniformly at `axis_samples` values.
    pub t_range: (f64, f64),
    /// Scale s(t) = offset + amplitude · sin(t + phase).
    pub scale_offset: f64,
    pub scale_amplitude: f64,
    pub scale_phase: f64,
    pub contour: ContourSpec,
    pub axis_samples: usize,
    pub contour_samples: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl GCSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if !(0.0..50.0).contains(&c) {
                return bad(format!("{name} = {c} outside [0, 50)"));
            }
        }
        if !(self.c3 > 0.0 && self.c3 < 50.0) {
            return bad(format!("c3 = {} outside (0, 50)", self.c3));
        }
        if !(self.t_range.1 > self.t_range.0) || !self.t_range.0.is_finite() || !self.t_range.1.is_finite() {
            return bad(format!("empty axis parameter range {:?}", self.t_range));
        }
        if self.scale_offset - self.scale_amplitude.abs() < 1.0 || !self.scale_offset.is_finite() {
            return bad(format!(
                "scale function minimum {} is below 1",
                self.scale_offset - self.scale_amplitude.abs()
            ));
        }
        match &self.contour {
            ContourSpec::Circle { radius } if !(*radius > 0.0) => return bad(format!("contour radius {radius} must be positive")),
            ContourSpec::Spline { radii } if radii.iter().any(|r| !(*r > 0.0)) => {
                return bad(format!("contour radii {radii:?} must be positive"))
            }
            _ => {}
        }
        if self.axis_samples < 2 {
            return bad(format!("need at least 2 axis samples, got {}", self.axis_samples));
        }
        if self.contour_samples < 8 {
            return bad(format!("need at least 8 contour samples, got {}", self.contour_samples));
        }
        Ok(())
    }

    pub fn scale_at(&self, t: f64) -> f64 {
        self.scale_offset + self.scale_amplitude * (t + self.scale_phase).sin()
    }

    pub fn axis_point(&self, t: f64) -> Vec3 {
        Vec3::new(self.c1 * t.cos(), self.c2 * t.sin(), self.c3 * t)
    }

    fn derivatives(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let (s, c) = t.sin_cos();
        (
            Vec3::new(-self.c1 * s, self.c2 * c, self.c3),
            Vec3::new(-self.c1 * c, -self.c2 * s, 0.0),
            Vec3::new(self.c1 * s, -self.c2 * c, 0.0),
        )
    }

    /// Angular speed of the Frenet frame per unit parameter,
    /// |r'| · sqrt(κ² + τ²).
    fn frame_rate(&self, t: f64) -> f64 {
        let (d1, d2, d3) = self.derivatives(t);
        let cross = d1.cross(&d2);
        let speed = d1.norm();
        let c2 = cross.norm_squared();
        if c2 <= 0.0 {
            return 0.0;
        }
        let kappa = c2.sqrt() / speed.powi(3);
        let tau = cross.dot(&d3) / c2;
        speed * (kappa * kappa + tau * tau).sqrt()
    }

    pub fn t_values(&self) -> Vec<f64> {
        let (a, b) = self.t_range;
        let n = self.axis_samples;
        (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
    }

    /// A random GC with adjacent slices at most half a cross-section radius
    /// apart and frames turning at most 10° between them.
    pub fn random<R: Rng>(rng: &mut R, sampling: Sampling, axis_samples: usize, contour_samples: usize) -> Self {
        Self::random_with(rng, sampling, axis_samples, contour_samples, &SliceSpacing::default())
    }

    /// A random GC. Axis coefficients are drawn in (0, 50); the parameter
    /// step is chosen so that adjacent slices satisfy `spacing`.
    pub fn random_with<R: Rng>(
        rng: &mut R,
        sampling: Sampling,
        axis_samples: usize,
        contour_samples: usize,
        spacing: &SliceSpacing,
    ) -> Self {
        let open = |rng: &mut R| loop {
            let c: f64 = rng.gen_range(0.0..50.0);
            if c > 0.0 {
                break c;
            }
        };
        let (c1, c2, c3) = (open(rng), open(rng), open(rng));
        let mut radii = [0.0; 8];
        for r in &mut radii {
            *r = rng.gen_range(0.5..1.5);
        }
        let scale_offset = rng.gen_range(1.5..3.0);
        let scale_amplitude = rng.gen_range(0.0..=(scale_offset - 1.0));
        let scale_phase = rng.gen_range(0.0..TAU);
        let t0 = rng.gen_range(0.0..TAU);
        let seed = rng.gen();
        let mut spec = GCSpec {
            c1,
            c2,
            c3,
            t_range: (t0, t0 + 1.0),
            scale_offset,
            scale_amplitude,
            scale_phase,
            contour: ContourSpec::Spline { radii },
            axis_samples,
            contour_samples,
            sampling,
            seed,
        };
        let size = scale_offset * radii.iter().sum::<f64>() / 8.0;
        let dt = spec.parameter_step(spacing.relative_distance * size, spacing.max_turn_deg.to_radians());
        spec.t_range = (t0, t0 + dt * (axis_samples - 1) as f64);
        spec
    }

    /// Largest parameter step keeping slice spacing below `spacing` and the
    /// frame turn below `turn` everywhere on the axis.
    fn parameter_step(&self, spacing: f64, turn: f64) -> f64 {
        let grid = 512;
        let (mut speed, mut rate) = (0.0f64, 0.0f64);
        for k in 0..grid {
            let t = TAU * k as f64 / grid as f64;
            speed = speed.max(self.derivatives(t).0.norm());
            rate = rate.max(self.frame_rate(t));
        }
        (spacing / speed).min(if rate > 0.0 { turn / rate } else { f64::INFINITY })
    }
}

/// Closed periodic cubic spline through points at equal angular steps,
/// parameterized uniformly by u in [0, n).
#[derive(Debug, Clone)]
pub struct Contour {
    kind: ContourKind,
}

#[derive(Debug, Clone)]
enum ContourKind {
    Circle(f64),
    Spline {
        ctrl: Vec<Vector2<f64>>,
        second: Vec<Vector2<f64>>,
    },
}

impl Contour {
    pub fn new(spec: &ContourSpec) -> Result<Self> {
        let kind = match spec {
            ContourSpec::Circle { radius } => ContourKind::Circle(*radius),
            ContourSpec::Spline { radii } => {
                let n = radii.len();
                let ctrl: Vec<Vector2<f64>> = radii
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let a = k as f64 * TAU / n as f64;
                        Vector2::new(r * a.cos(), r * a.sin())
                    })
                    .collect();
                // Periodic second-derivative system M[k-1] + 4 M[k] + M[k+1] = 6 Δ²P[k].
                let a = DMatrix::from_fn(n, n, |i, j| {
                    let d = (i + n - j) % n;
                    match d {
                        0 => 4.0,
                        1 => 1.0,
                        d if d == n - 1 => 1.0,
                        _ => 0.0,
                    }
                });
                let lu = a.lu();
                let mut second = vec![Vector2::zeros(); n];
                for dim in 0..2 {
                    let rhs = DVector::from_fn(n, |k, _| {
                        6.0 * (ctrl[(k + 1) % n][dim] - 2.0 * ctrl[k][dim] + ctrl[(k + n - 1) % n][dim])
                    });
                    let m = lu
                        .solve(&rhs)
                        .ok_or_else(|| Error::Numerical("periodic spline system is singular".into()))?;
                    for k in 0..n {
                        second[k][dim] = m[k];
                    }
                }
                ContourKind::Spline { ctrl, second }
            }
        };
        Ok(Self { kind })
    }

    /// Parameter period.
    pub fn period(&self) -> f64 {
        match &self.kind {
            ContourKind::Circle(_) => TAU,
            ContourKind::Spline { ctrl, .. } => ctrl.len() as f64,
        }
    }

    /// Point and unit outward normal at parameter `u` (taken modulo the period).
    pub fn eval(&self, u: f64) -> (Vector2<f64>, Vector2<f64>) {
        match &self.kind {
            ContourKind::Circle(r) => {
                let (s, c) = u.sin_cos();
                (Vector2::new(r * c, r * s), Vector2::new(c, s))
            }
            ContourKind::Spline { ctrl, second } => {
                let n = ctrl.len();
                let u = u.rem_euclid(n as f64);
                let i = (u.floor() as usize).min(n - 1);
                let t = u - i as f64;
                let j = (i + 1) % n;
                let (p0, p1, m0, m1) = (ctrl[i], ctrl[j], second[i], second[j]);
                let w = 1.0 - t;
                let p = p0 * w + p1 * t + m0 * ((w * w * w - w) / 6.0) + m1 * ((t * t * t - t) / 6.0);
                let d = p1 - p0 + m0 * ((1.0 - 3.0 * w * w) / 6.0) + m1 * ((3.0 * t * t - 1.0) / 6.0);
                // Control points run counter-clockwise, so the outward normal is the
                // tangent turned clockwise.
                (p, Vector2::new(d.y, -d.x).normalize())
            }
        }
    }
}

/// Per-slice and per-point ground truth of a generated GC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub centers: Vec<Vec3>,
    /// Columns (normal, binormal, tangent): the contour plane is spanned by
    /// the first two, the third is the slice plane normal.
    pub rotations: Vec<Matrix3<f64>>,
    pub scales: Vec<f64>,
    /// Slice owning each point.
    pub owner: Vec<usize>,
    /// Slices whose frame came from parallel transport because the
    /// Frenet frame is undefined there.
    pub fallback_frames: Vec<usize>,
}

impl GroundTruth {
    pub fn n_slices(&self) -> usize {
        self.centers.len()
    }

    pub fn tangent(&self, k: usize) -> Vec3 {
        self.rotations[k].column(2).into_owned()
    }

    /// Point indices of slice `k`, ascending.
    pub fn slice_points(&self, k: usize) -> Vec<usize> {
        self.owner.iter().enumerate().filter(|(_, &o)| o == k).map(|(i, _)| i).collect()
    }

    /// The similarity (R, s, t) carrying slice `from` onto slice `to`:
    /// R = R_to R_fromᵀ, s = s_to / s_from, t = c_to − s R c_from.
    pub fn relative(&self, from: usize, to: usize) -> (Matrix3<f64>, f64, Vec3) {
        let r = self.rotations[to] * self.rotations[from].transpose();
        let s = self.scales[to] / self.scales[from];
        (r, s, self.centers[to] - r * self.centers[from] * s)
    }
}

fn frenet_frame(spec: &GCSpec, t: f64) -> Option<Matrix3<f64>> {
    let (d1, d2, _) = spec.derivatives(t);
    let tangent = d1.normalize();
    let b = d1.cross(&d2);
    if b.norm() <= 1e-9 * d1.norm().powi(3) {
        return None;
    }
    let binormal = b.normalize();
    let normal = binormal.cross(&tangent);
    Some(Matrix3::from_columns(&[normal, binormal, tangent]))
}

fn any_perpendicular(v: &Vec3) -> Vec3 {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&helper).normalize()
}

/// Rotates `prev` by the smallest rotation taking its tangent to `tangent`.
fn transported(prev: &Matrix3<f64>, tangent: &Vec3) -> Matrix3<f64> {
    let old_t = prev.column(2).into_owned();
    let normal = prev.column(0).into_owned();
    // Remove the tangent component and renormalize: exact for the minimal rotation
    // up to rounding, and keeps the frame orthonormal.
    let n = (normal - tangent * tangent.dot(&normal)).try_normalize(1e-12).unwrap_or_else(|| {
        let axis = old_t.cross(tangent);
        any_perpendicular(&if axis.norm() > 1e-12 { axis } else { *tangent })
    });
    Matrix3::from_columns(&[n, tangent.cross(&n), *tangent])
}

/// Builds the cloud (exact unit normals) and its ground truth.
pub fn generate_gc(spec: &GCSpec) -> Result<(PointCloud, GroundTruth)> {
    spec.validate()?;
    let contour = Contour::new(&spec.contour)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(spec.seed);
    let ts = spec.t_values();
    let m = spec.contour_samples;
    let period = contour.period();
    let regular: Vec<f64> = (0..m).map(|j| period * j as f64 / m as f64).collect();

    let mut truth = GroundTruth {
        centers: Vec::with_capacity(ts.len()),
        rotations: Vec::with_capacity(ts.len()),
        scales: Vec::with_capacity(ts.len()),
        owner: Vec::with_capacity(ts.len() * m),
        fallback_frames: Vec::new(),
    };
    let (mut positions, mut normals) = (Vec::new(), Vec::new());
    for (k, &t) in ts.iter().enumerate() {
        let rot = match frenet_frame(spec, t) {
            Some(r) => r,
            None => {
                truth.fallback_frames.push(k);
                let tangent = spec.derivatives(t).0.normalize();
                match truth.rotations.last() {
                    Some(prev) => transported(prev, &tangent),
                    None => {
                        let n = any_perpendicular(&tangent);
                        Matrix3::from_columns(&[n, tangent.cross(&n), tangent])
                    }
                }
            }
        };
        let center = spec.axis_point(t);
        let scale = spec.scale_at(t);
        let params: Vec<f64> = match spec.sampling {
            Sampling::Regular => regular.clone(),
            Sampling::Random => (0..m).map(|_| rng.gen_range(0.0..period)).collect(),
        };
        for u in params {
            let (p, n) = contour.eval(u);
            positions.push(center + rot * Vec3::new(p.x, p.y, 0.0) * scale);
            normals.push(rot * Vec3::new(n.x, n.y, 0.0));
            truth.owner.push(k);
        }
        truth.centers.push(center);
        truth.rotations.push(rot);
        truth.scales.push(scale);
    }
    let cloud = PointCloud::from_oriented(&positions, &normals)?;
    Ok((cloud, truth))
}

/// ‖I − R1 R2ᵀ‖_F, in [0, 2√2]. Both inputs must be proper rotations.
pub fn rotation_error(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> Result<f64> {
    for (name, r) in [("first", r1), ("second", r2)] {
        let orth = (r.transpose() * r - Matrix3::identity()).norm();
        let det = r.determinant();
        if !(orth < 1e-6 && (det - 1.0).abs() < 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "{name} matrix is not a rotation (‖RᵀR − I‖ = {orth:.3e}, det = {det:.6})"
            )));
        }
    }
    Ok(crate::register::rotation_error(r1, r2))
}

/// Angle between two directions in degrees.
pub(crate) fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos() * 180.0 / PI
}
