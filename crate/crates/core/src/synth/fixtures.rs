//! Test shapes built from swept tubes: a straight cylinder, a T junction and
//! a quadruped (torso with four legs, tail and neck).
//!
//! Every tube is sampled in rings perpendicular to its centreline with the
//! same ring spacing h and about 0.85·h between points on a ring. That ratio
//! matters: when the two spacings are commensurate, plane bands of width
//! comparable to the point spacing tie on whole rings. Where tubes overlap,
//! points inside another tube are dropped, giving a closed union surface.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Ratio of on-ring point spacing to ring spacing.
const RING_POINT_RATIO: f64 = 0.85;

/// A tube around a polyline centreline with a piecewise-linear radius
/// profile over normalized arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub centerline: Vec<Vec3>,
    /// (fraction of arc length in [0, 1], radius), fractions increasing.
    pub radius_profile: Vec<(f64, f64)>,
}

impl TubeSpec {
    pub fn straight(start: Vec3, end: Vec3, radius: f64) -> Self {
        Self {
            centerline: vec![start, end],
            radius_profile: vec![(0.0, radius), (1.0, radius)],
        }
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = vec![0.0];
        for w in self.centerline.windows(2) {
            acc.push(acc.last().unwrap() + (w[1] - w[0]).norm());
        }
        acc
    }

    pub fn length(&self) -> f64 {
        *self.cumulative().last().unwrap()
    }

    pub fn radius_at(&self, fraction: f64) -> f64 {
        let p = &self.radius_profile;
        if fraction <= p[0].0 {
            return p[0].1;
        }
        for w in p.windows(2) {
            if fraction <= w[1].0 {
                let t = (fraction - w[0].0) / (w[1].0 - w[0].0).max(f64::MIN_POSITIVE);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        p[p.len() - 1].1
    }

    /// Centreline point at arc length `s`.
    pub fn point_at(&self, s: f64) -> Vec3 {
        let cum = self.cumulative();
        let s = s.clamp(0.0, *cum.last().unwrap());
        let k = cum.windows(2).position(|w| s <= w[1]).unwrap_or(cum.len() - 2);
        let seg = cum[k + 1] - cum[k];
        let t = if seg > 0.0 { (s - cum[k]) / seg } else { 0.0 };
        self.centerline[k] + (self.centerline[k + 1] - self.centerline[k]) * t
    }

    /// Nearest centreline point: (distance, arc length there).
    pub fn nearest(&self, p: &Vec3) -> (f64, f64) {
        let cum = self.cumulative();
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in self.centerline.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len2 = d.norm_squared();
            let t = if len2 > 0.0 {
                ((p - w[0]).dot(&d) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = (p - (w[0] + d * t)).norm();
            if dist < best.0 {
                best = (dist, cum[k] + t * len2.sqrt());
            }
        }
        best
    }

    /// Strictly inside the tube: within the radius of a centreline point
    /// that is not an end point.
    pub fn contains(&self, p: &Vec3) -> bool {
        let len = self.length();
        let (d, s) = self.nearest(p);
        s > 1e-9 && s < len - 1e-9 && d < self.radius_at(s / len) - 1e-9
    }

    /// Surface area, for sizing the sampling.
    fn area(&self) -> f64 {
        let len = self.length();
        let n = 200;
        (0..n)
            .map(|k| TAU * self.radius_at((k as f64 + 0.5) / n as f64) * len / n as f64)
            .sum()
    }

    /// Ring-sampled surface points and outward normals.
    fn sample(&self, h: f64) -> (Vec<Vec3>, Vec<Vec3>) {
        let len = self.length();
        let rings = ((len / h).round() as usize).max(1);
        let step = len / rings as f64;
        let tangent_at = |s: f64| {
            let e = 0.5 * step;
            (self.point_at((s + e).min(len)) - self.point_at((s - e).max(0.0))).normalize()
        };
        let slope_at = |s: f64| {
            let e = 0.5 * step;
            let (a, b) = ((s - e).max(0.0), (s + e).min(len));
            (self.radius_at(b / len) - self.radius_at(a / len)) / (b - a)
        };
        let (mut pts, mut nrm) = (Vec::new(), Vec::new());
        let mut frame: Option<(Vec3, Vec3)> = None;
        for k in 0..=rings {
            let s = k as f64 * step;
            let t = tangent_at(s);
            // Parallel transport of the ring frame along the centreline.
            let n = match frame {
                Some((prev_n, _)) => (prev_n - t * t.dot(&prev_n)).normalize(),
                None => {
                    let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                    t.cross(&helper).normalize()
                }
            };
            let b = t.cross(&n);
            frame = Some((n, b));
            let r = self.radius_at(s / len);
            let count = ((TAU * r / (RING_POINT_RATIO * h)).round() as usize).max(8);
            let c = self.point_at(s);
            let slope = slope_at(s);
            for j in 0..count {
                let a = TAU * j as f64 / count as f64;
                let radial = n * a.cos() + b * a.sin();
                pts.push(c + radial * r);
                nrm.push((radial - t * slope).normalize());
            }
        }
        (pts, nrm)
    }
}

/// A union of tubes sampled as one oriented cloud.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub cloud: PointCloud,
    pub tubes: Vec<TubeSpec>,
    /// Ring spacing used for sampling.
    pub spacing: f64,
    /// Tube each point was sampled from.
    pub owner: Vec<usize>,
}

impl Fixture {
    /// Samples the union so that it has roughly `target_points` points.
    pub fn build(name: &str, tubes: Vec<TubeSpec>, target_points: usize) -> Result<Self> {
        if tubes.is_empty() || target_points == 0 {
            return Err(Error::InvalidArgument("a fixture needs tubes and a positive point count".into()));
        }
        for t in &tubes {
            if t.centerline.len() < 2 || t.radius_profile.is_empty() || t.radius_profile.iter().any(|&(_, r)| !(r > 0.0)) {
                return Err(Error::InvalidArgument(format!("malformed tube {t:?}")));
            }
        }
        let area: f64 = tubes.iter().map(TubeSpec::area).sum();
        let h = (area / (RING_POINT_RATIO * target_points as f64)).sqrt();
        let (mut pts, mut nrm, mut owner) = (Vec::new(), Vec::new(), Vec::new());
        for (ti, tube) in tubes.iter().enumerate() {
            let (p, n) = tube.sample(h);
            for (p, n) in p.into_iter().zip(n) {
                let buried = tubes.iter().enumerate().any(|(oi, o)| oi != ti && o.contains(&p));
                if !buried {
                    pts.push(p);
                    nrm.push(n);
                    owner.push(ti);
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            cloud: PointCloud::from_oriented(&pts, &nrm)?,
            tubes,
            spacing: h,
            owner,
        })
    }

    /// Distance from `p` to the nearest tube centreline.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        self.tubes.iter().map(|t| t.nearest(p).0).fold(f64::INFINITY, f64::min)
    }
}

/// Open straight cylinder of radius 1 and length 6 along z.
pub fn cylinder(target_points: usize) -> Result<Fixture> {
    Fixture::build(
        "cylinder",
        vec![TubeSpec::straight(Vec3::zeros(), Vec3::new(0.0, 0.0, 6.0), 1.0)],
        target_points,
    )
}

/// A stem of radius 0.8 rising along z into the middle of a crossbar of
/// radius 1 running along x at height 4.
pub fn t_junction(target_points: usize) -> Result<Fixture> {
    Fixture::build(
        "t-junction",
        vec![
            TubeSpec::straight(Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0), 0.8),
            TubeSpec::straight(Vec3::new(-3.0, 0.0, 4.0), Vec3::new(3.0, 0.0, 4.0), 1.0),
        ],
        target_points,
    )
}

/// Torso along x that tapers into a raised tail and neck, with four legs
/// hanging from the torso. Six limb tips, so the skeleton has six leaves.
pub fn quadruped(target_points: usize) -> Result<Fixture> {
    let bend = |x: f64| {
        if x < -1.5 {
            0.5 * (x + 1.5).powi(2)
        } else if x > 1.5 {
            0.9 * (x - 1.5).powi(2)
        } else {
            0.0
        }
    };
    let samples = 200;
    let spine: Vec<Vec3> = (0..=samples)
        .map(|k| {
            let x = -2.5 + 5.0 * k as f64 / samples as f64;
            Vec3::new(x, 0.0, bend(x))
        })
        .collect();
    // Radius profile over arc length, from the x breakpoints.
    let body = TubeSpec {
        centerline: spine.clone(),
        radius_profile: vec![(0.0, 1.0)],
    };
    let total = body.length();
    let frac = |x: f64| body.nearest(&Vec3::new(x, 0.0, bend(x))).1 / total;
    let spine_tube = TubeSpec {
        centerline: spine,
        radius_profile: vec![
            (0.0, 0.15),
            (frac(-1.9), 0.15),
            (frac(-1.3), 0.5),
            (frac(1.3), 0.5),
            (frac(1.9), 0.25),
            (1.0, 0.25),
        ],
    };
    let mut tubes = vec![spine_tube];
    for (x, y) in [(-0.9, 0.3), (-0.9, -0.3), (0.9, 0.3), (0.9, -0.3)] {
        tubes.push(TubeSpec::straight(Vec3::new(x, y, 0.0), Vec3::new(x, y, -1.8), 0.15));
    }
    Fixture::build("quadruped", tubes, target_points)
}
