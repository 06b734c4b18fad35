//! Thin cross-sectional clusters: plane inliers, the exhaustive plane search
//! around a seed point, the local plane set used while growing, and the
//! eigenvalue scale descriptor.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cloud::{normals::covariance, normals::sorted_eigen, PointCloud, Vec3};
use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;

pub const DEFAULT_DELTA_ANG_DEG: f64 = 12.5;
pub const DEFAULT_K_STEP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneHypothesis {
    pub theta: f64,
    pub phi: f64,
    pub normal: Vec3,
    pub anchor: Vec3,
}

impl PlaneHypothesis {
    pub fn new(theta: f64, phi: f64, anchor: Vec3) -> Self {
        Self {
            theta,
            phi,
            normal: spherical_normal(theta, phi),
            anchor,
        }
    }

    /// Recovers (theta, phi) from a direction; `normal` is normalized.
    pub fn from_normal(normal: Vec3, anchor: Vec3) -> Self {
        let n = normal.normalize();
        let phi = n.z.clamp(-1.0, 1.0).acos();
        let theta = if n.x == 0.0 && n.y == 0.0 { 0.0 } else { n.y.atan2(n.x) };
        Self {
            theta,
            phi,
            normal: n,
            anchor,
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
}

pub fn spherical_normal(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(theta.cos() * phi.sin(), theta.sin() * phi.sin(), phi.cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub member_indices: Vec<usize>,
    pub plane: PlaneHypothesis,
    pub center: Vec3,
    pub scale_eigs: (f64, f64),
    pub seed_index: usize,
}

impl CrossSection {
    /// Builds a section from its members, computing the center and scale.
    pub fn from_members(cloud: &PointCloud, members: Vec<usize>, plane: PlaneHypothesis, seed_index: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput("cross-section has no members".into()));
        }
        let center = crate::cloud::centroid(cloud, &members);
        let scale_eigs = scale_of(cloud, &members);
        Ok(Self {
            member_indices: members,
            plane,
            center,
            scale_eigs,
            seed_index,
        })
    }

    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// Points within `delta_pd` of the plane through the seed that are connected
/// to the seed through such points. Sorted by index; always contains the seed.
pub fn get_inliers(cloud: &PointCloud, cnct: &ConnectivityGraph, delta_pd: f64, seed: usize, normal: &Vec3) -> Vec<usize> {
    get_inliers_anchored(cloud, cnct, delta_pd, &cloud.position(seed), seed, normal)
}

/// As [`get_inliers`], but the plane passes through `anchor` rather than the
/// seed. Empty when the seed itself lies outside the band.
pub fn get_inliers_anchored(
    cloud: &PointCloud,
    cnct: &ConnectivityGraph,
    delta_pd: f64,
    anchor: &Vec3,
    seed: usize,
    normal: &Vec3,
) -> Vec<usize> {
    let d = normal.dot(anchor);
    let in_band = |i: usize| (normal.dot(&cloud.position(i)) - d).abs() <= delta_pd;
    if !in_band(seed) {
        return Vec::new();
    }
    let mut seen = std::collections::HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(seed);
    queue.push_back(seed);
    while let Some(u) = queue.pop_front() {
        for &v in cnct.neighbors(u) {
            if !seen.contains(&v) && in_band(v) {
                seen.insert(v);
                queue.push_back(v);
            }
        }
    }
    let mut out: Vec<usize> = seen.into_iter().collect();
    out.sort_unstable();
    out
}

/// Mean |n . x_n| over the inliers: 0 when every point normal lies in the plane.
pub fn plane_cost(cloud: &PointCloud, inliers: &[usize], normal: &Vec3) -> Result<f64> {
    if inliers.is_empty() {
        return Err(Error::EmptyInput("plane cost over an empty inlier set".into()));
    }
    if !cloud.has_normals() {
        return Err(Error::InvalidArgument("plane cost needs point normals".into()));
    }
    let sum: f64 = inliers.iter().map(|&i| normal.dot(&cloud.normal(i)).abs()).sum();
    Ok(sum / inliers.len() as f64)
}

/// The coarse orientation grid searched around a seed: twelve azimuths and
/// four zenith angles at pi/6 spacing, in (theta, phi) lexicographic order.
pub fn search_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(48);
    for i in 0..12 {
        for j in 0..4 {
            grid.push((i as f64 * PI / 6.0, j as f64 * PI / 6.0));
        }
    }
    grid
}

/// Exhaustive search for the plane through `seed` whose inliers' normals
/// are most nearly parallel to it.
pub fn find_cross_section(cloud: &PointCloud, cnct: &ConnectivityGraph, delta_pd: f64, seed: usize) -> Result<CrossSection> {
    if !cloud.has_normals() {
        return Err(Error::InvalidArgument("cross-section search needs point normals".into()));
    }
    if seed >= cloud.len() {
        return Err(Error::InvalidArgument(format!("seed {seed} out of range")));
    }
    let anchor = cloud.position(seed);
    let planes: Vec<PlaneHypothesis> = search_grid().into_iter().map(|(t, p)| PlaneHypothesis::new(t, p, anchor)).collect();
    best_plane(cloud, cnct, delta_pd, &planes, |_| Some(seed))?
        .ok_or_else(|| Error::Degenerate(format!("no plane through seed {seed} has inliers")))
}

/// Bands whose second scale eigenvalue is below this fraction of the first
/// are treated as strips rather than cross-sections.
pub const STRIP_EIGEN_RATIO: f64 = 1e-2;

/// True when the members are spread along a line (or are too few to span a
/// contour): the band of a plane that contains the axis of a surface of
/// revolution is a thin strip along one generator, whose normals lie in the
/// plane just like a true contour's.
pub fn is_strip(cloud: &PointCloud, members: &[usize]) -> bool {
    if members.len() < 3 {
        return true;
    }
    let (e1, e2) = scale_of(cloud, members);
    e2 < STRIP_EIGEN_RATIO * e1
}

/// A strip-shaped band is only chosen over a proper section when its cost is
/// lower by more than this margin.
pub const STRIP_COST_MARGIN: f64 = 0.1;

/// Evaluates each plane with the seed chosen by `seed_for`, returning the
/// lowest-cost section. Strip-shaped bands must beat the best proper section
/// by `STRIP_COST_MARGIN`; earlier planes win ties.
pub(crate) fn best_plane(
    cloud: &PointCloud,
    cnct: &ConnectivityGraph,
    delta_pd: f64,
    planes: &[PlaneHypothesis],
    mut seed_for: impl FnMut(&PlaneHypothesis) -> Option<usize>,
) -> Result<Option<CrossSection>> {
    type Candidate = (f64, PlaneHypothesis, Vec<usize>, usize);
    let mut proper: Option<Candidate> = None;
    let mut strip: Option<Candidate> = None;
    for plane in planes {
        let Some(seed) = seed_for(plane) else { continue };
        let inliers = get_inliers_anchored(cloud, cnct, delta_pd, &plane.anchor, seed, &plane.normal);
        if inliers.is_empty() {
            continue;
        }
        let cost = plane_cost(cloud, &inliers, &plane.normal)?;
        let slot = if is_strip(cloud, &inliers) { &mut strip } else { &mut proper };
        if slot.as_ref().is_none_or(|b| cost < b.0) {
            *slot = Some((cost, *plane, inliers, seed));
        }
    }
    let best = match (proper, strip) {
        (Some(p), Some(s)) => Some(if s.0 + STRIP_COST_MARGIN < p.0 { s } else { p }),
        (p, s) => p.or(s),
    };
    best.map(|(_, plane, members, seed)| CrossSection::from_members(cloud, members, plane, seed))
        .transpose()
}

/// `k_step` x `k_step` orientations around (theta0, phi0), spaced evenly over
/// [center - delta, center + delta] in each angle (`delta_ang` in degrees).
pub fn local_plane_set(base_theta: f64, base_phi: f64, delta_ang: f64, k_step: usize, anchor: Vec3) -> Vec<PlaneHypothesis> {
    let offsets = offsets(delta_ang.to_radians(), k_step);
    let mut out = Vec::with_capacity(k_step * k_step);
    for dt in &offsets {
        for dp in &offsets {
            out.push(PlaneHypothesis::new(base_theta + dt, base_phi + dp, anchor));
        }
    }
    out
}

fn offsets(delta: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..k).map(|i| -delta + 2.0 * delta * i as f64 / (k - 1) as f64).collect(),
    }
}

/// Two largest eigenvalues of the member-position covariance.
pub fn cluster_scale(cloud: &PointCloud, members: &[usize]) -> Result<(f64, f64)> {
    if members.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "cluster scale needs at least 3 members, got {}",
            members.len()
        )));
    }
    Ok(scale_of(cloud, members))
}

pub(crate) fn scale_of(cloud: &PointCloud, members: &[usize]) -> (f64, f64) {
    let pos: Vec<Vec3> = members.iter().map(|&i| cloud.position(i)).collect();
    let (values, _) = sorted_eigen(covariance(pos.iter()));
    (values[0].max(0.0), values[1].max(0.0))
}

/// How consecutive section scales are compared when growing by plane search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleJumpForm {
    /// |1 - d(prev, next) / |prev|| > threshold.
    #[default]
    Verbatim,
    /// d(prev, next) / |prev| > threshold.
    Ratio,
}

impl ScaleJumpForm {
    pub fn default_threshold(self) -> f64 {
        match self {
            ScaleJumpForm::Verbatim => 1.0,
            ScaleJumpForm::Ratio => 0.5,
        }
    }
}

/// The written scale-change test: |1 - d(prev, next) / |prev|| > delta_eg.
pub fn scale_jump(prev: (f64, f64), next: (f64, f64), delta_eg: f64) -> Result<bool> {
    scale_jump_with(ScaleJumpForm::Verbatim, prev, next, delta_eg)
}

pub fn scale_jump_with(form: ScaleJumpForm, prev: (f64, f64), next: (f64, f64), delta_eg: f64) -> Result<bool> {
    let norm = prev.0.hypot(prev.1);
    if norm == 0.0 {
        return Err(Error::InvalidArgument("previous scale vector is zero".into()));
    }
    let ratio = (prev.0 - next.0).hypot(prev.1 - next.1) / norm;
    Ok(match form {
        ScaleJumpForm::Verbatim => (1.0 - ratio).abs() > delta_eg,
        ScaleJumpForm::Ratio => ratio > delta_eg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_connectivity, build_mst, compute_thresholds};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn connectivity(cloud: &PointCloud) -> ConnectivityGraph {
        let mst = build_mst(cloud, 30).unwrap();
        build_connectivity(cloud, &compute_thresholds(&mst, cloud.len()).unwrap())
    }

    /// Cylinder of radius 1 along z with radial normals.
    fn cylinder(rot: &Rotation3<f64>) -> PointCloud {
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for k in 0..40 {
            for j in 0..24 {
                let t = j as f64 * 2.0 * PI / 24.0 + if k % 2 == 0 { 0.0 } else { PI / 24.0 };
                pts.push(rot * Vec3::new(t.cos(), t.sin(), k as f64 * 0.15));
                nrm.push(rot * Vec3::new(t.cos(), t.sin(), 0.0));
            }
        }
        PointCloud::from_oriented(&pts, &nrm).unwrap()
    }

    #[test]
    fn normal_matches_spherical_formula() {
        for (t, p) in search_grid() {
            let h = PlaneHypothesis::new(t, p, Vec3::zeros());
            let want = Vec3::new(t.cos() * p.sin(), t.sin() * p.sin(), p.cos());
            assert!((h.normal - want).norm() < 1e-9);
            assert!((h.normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn from_normal_round_trips() {
        let h = PlaneHypothesis::new(1.1, 0.7, Vec3::zeros());
        let back = PlaneHypothesis::from_normal(h.normal, Vec3::zeros());
        assert!((back.theta - 1.1).abs() < 1e-12 && (back.phi - 0.7).abs() < 1e-12);
    }

    #[test]
    fn singleton_inliers() {
        let cloud = PointCloud::from_oriented(&[Vec3::zeros()], &[Vec3::x()]).unwrap();
        let g = ConnectivityGraph::from_adjacency(vec![vec![]]);
        assert_eq!(get_inliers(&cloud, &g, 0.1, 0, &Vec3::z()), vec![0]);
    }

    #[test]
    fn wide_band_returns_everything() {
        let cloud = cylinder(&Rotation3::identity());
        let g = connectivity(&cloud);
        let all: Vec<usize> = (0..cloud.len()).collect();
        assert_eq!(get_inliers(&cloud, &g, 100.0, 5, &Vec3::z()), all);
    }

    #[test]
    fn band_component_excludes_parallel_ring() {
        // Two horizontal rings at z = 0, joined only by an arc rising to z = 4.
        let mut pts = Vec::new();
        for c in [0.0, 10.0] {
            for j in 0..60 {
                let t = j as f64 * 2.0 * PI / 60.0;
                pts.push(Vec3::new(c + t.cos(), t.sin(), 0.0));
            }
        }
        for j in 1..200 {
            let u = j as f64 / 200.0;
            pts.push(Vec3::new(1.0 + 8.0 * u, 0.0, 4.0 * (PI * u).sin()));
        }
        let cloud = PointCloud::from_oriented(&pts, &vec![Vec3::x(); pts.len()]).unwrap();
        let g = connectivity(&cloud);
        let got = get_inliers(&cloud, &g, 0.05, 15, &Vec3::z());
        assert!(got.iter().all(|&i| !(60..120).contains(&i)));
        assert!((0..60).all(|i| got.contains(&i)));
        // The far ring does lie in the band.
        assert!((60..120).all(|i| pts[i].z.abs() <= 0.05));
    }

    #[test]
    fn inliers_are_closed() {
        let cloud = cylinder(&Rotation3::from_euler_angles(0.2, 0.4, 0.0));
        let g = connectivity(&cloud);
        let n = spherical_normal(0.3, 0.9);
        let first = get_inliers(&cloud, &g, 0.2, 100, &n);
        let sub = PointCloud::new(cloud.subset(&first), true).unwrap();
        let local = first.iter().position(|&i| i == 100).unwrap();
        let sub_adj = first
            .iter()
            .map(|&i| g.neighbors(i).iter().filter_map(|j| first.binary_search(j).ok()).collect())
            .collect();
        let again = get_inliers(&sub, &ConnectivityGraph::from_adjacency(sub_adj), 0.2, local, &n);
        assert_eq!(again, (0..first.len()).collect::<Vec<_>>());
    }

    #[test]
    fn plane_cost_examples() {
        let cloud = cylinder(&Rotation3::identity());
        let all: Vec<usize> = (0..cloud.len()).collect();
        assert!(plane_cost(&cloud, &all, &Vec3::z()).unwrap() < 1e-6);

        let up = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x()], &[Vec3::z(); 2]).unwrap();
        assert_eq!(plane_cost(&up, &[0, 1], &Vec3::z()).unwrap(), 1.0);

        let tilted = Vec3::new(1.0, 0.0, 1.0).normalize();
        let c = PointCloud::from_oriented(&[Vec3::zeros()], &[tilted]).unwrap();
        assert!((plane_cost(&c, &[0], &Vec3::z()).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(plane_cost(&c, &[], &Vec3::z()).is_err());
    }

    #[test]
    fn cylinder_plane_is_perpendicular_to_axis() {
        let cloud = cylinder(&Rotation3::identity());
        let g = connectivity(&cloud);
        let seed = 20 * 24 + 3;
        let cs = find_cross_section(&cloud, &g, 0.05, seed).unwrap();
        assert!(cs.plane.normal.dot(&Vec3::z()).abs().acos() <= PI / 12.0);
        assert!(cs.member_indices.contains(&seed));
        let again = find_cross_section(&cloud, &g, 0.05, seed).unwrap();
        assert_eq!((cs.plane.theta, cs.plane.phi), (again.plane.theta, again.plane.phi));
    }

    /// Uniformly sampled cylinder (radius 1, length 6) with radial normals.
    fn random_cylinder(rot: &Rotation3<f64>, n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for _ in 0..n {
            let t = rng.gen_range(0.0..2.0 * PI);
            pts.push(rot * Vec3::new(t.cos(), t.sin(), rng.gen_range(0.0..6.0)));
            nrm.push(rot * Vec3::new(t.cos(), t.sin(), 0.0));
        }
        PointCloud::from_oriented(&pts, &nrm).unwrap()
    }

    #[test]
    fn grid_preserving_rotation_rotates_the_plane() {
        // Rotating about z by a multiple of pi/6 maps the search grid onto
        // itself, so the chosen normal must rotate exactly with the cloud.
        let tilt = Rotation3::from_euler_angles(0.4, -0.3, 0.2);
        let base = random_cylinder(&tilt, 2000, 3);
        let spin = Rotation3::from_axis_angle(&Vec3::z_axis(), PI / 3.0);
        let moved = PointCloud::from_oriented(
            &base.positions().map(|p| spin * p).collect::<Vec<_>>(),
            &(0..base.len()).map(|i| spin * base.normal(i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let run = |cloud: &PointCloud| {
            let mst = build_mst(cloud, 30).unwrap();
            let thr = compute_thresholds(&mst, cloud.len()).unwrap();
            let delta = crate::graph::lower_median(thr.d_max.clone()).unwrap();
            find_cross_section(cloud, &build_connectivity(cloud, &thr), delta, 1000).unwrap()
        };
        let (a, b) = (run(&base), run(&moved));
        let expected = spin * a.plane.normal;
        assert!((expected - b.plane.normal).norm().min((expected + b.plane.normal).norm()) < 1e-9);
        assert_eq!(a.member_indices, b.member_indices);
    }

    #[test]
    fn disc_plane_is_vertical() {
        let mut pts = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                pts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let normals: Vec<Vec3> = (0..pts.len()).map(|i| if i % 3 == 0 { -Vec3::z() } else { Vec3::z() }).collect();
        let cloud = PointCloud::from_oriented(&pts, &normals).unwrap();
        let g = connectivity(&cloud);
        let cs = find_cross_section(&cloud, &g, 0.02, 220).unwrap();
        assert!(cs.plane.normal.z.abs() < 1e-9);
        assert_eq!(cs.plane.phi, PI / 2.0);
        assert_eq!(cs.plane.theta, 0.0);
    }

    #[test]
    fn local_plane_set_spacing() {
        let one = local_plane_set(0.4, 0.9, 12.5, 1, Vec3::zeros());
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].theta, one[0].phi), (0.4, 0.9));
        assert_eq!(local_plane_set(0.4, 0.9, 12.5, 2, Vec3::zeros()).len(), 4);

        let nine = local_plane_set(0.4, 0.9, 12.5, 3, Vec3::zeros());
        assert_eq!(nine.len(), 9);
        let d = 12.5f64.to_radians();
        let mut thetas: Vec<f64> = nine.iter().map(|p| p.theta).collect();
        thetas.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(thetas.len(), 3);
        for (got, want) in thetas.iter().zip([0.4 - d, 0.4, 0.4 + d]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(nine.iter().any(|p| p.theta == 0.4 && p.phi == 0.9));
    }

    #[test]
    fn scale_of_circle() {
        let r = 2.5;
        let pts: Vec<Vec3> = (0..360)
            .map(|j| {
                let t = j as f64 * 2.0 * PI / 360.0;
                Vec3::new(r * t.cos(), r * t.sin(), 1.0)
            })
            .collect();
        let cloud = PointCloud::from_positions(&pts).unwrap();
        let all: Vec<usize> = (0..360).collect();
        let (e1, e2) = cluster_scale(&cloud, &all).unwrap();
        assert!((e1 - r * r / 2.0).abs() < 1e-9 && (e2 - r * r / 2.0).abs() < 1e-9);

        let doubled: Vec<Vec3> = pts.iter().map(|p| p * 2.0).collect();
        let (f1, f2) = cluster_scale(&PointCloud::from_positions(&doubled).unwrap(), &all).unwrap();
        assert!((f1 - 4.0 * e1).abs() < 1e-9 && (f2 - 4.0 * e2).abs() < 1e-9);

        let mut reversed = all.clone();
        reversed.reverse();
        let (g1, g2) = cluster_scale(&cloud, &reversed).unwrap();
        assert!((g1 - e1).abs() < 1e-12 && (g2 - e2).abs() < 1e-12);
    }

    #[test]
    fn scale_of_collinear_members() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let cloud = PointCloud::from_positions(&pts).unwrap();
        let (e1, e2) = cluster_scale(&cloud, &[0, 1, 2, 3, 4]).unwrap();
        assert!(e1 > 0.0 && e2.abs() < 1e-9);
        assert!(cluster_scale(&cloud, &[0, 1]).is_err());
    }

    #[test]
    fn scale_jump_algebra() {
        // Identical scales: the written expression is exactly 1.
        assert!(!scale_jump((2.0, 1.0), (2.0, 1.0), 1.0).unwrap());
        assert!(scale_jump((2.0, 1.0), (2.0, 1.0), 0.99).unwrap());
        // next = 2 * prev: d / |prev| = 1, expression 0.
        assert!(!scale_jump((2.0, 1.0), (4.0, 2.0), 0.0).unwrap());
        // prev = (1, 0), next = (1, 1): d = 1, expression 0.
        assert!(!scale_jump((1.0, 0.0), (1.0, 1.0), 0.0).unwrap());
        assert!(scale_jump((0.0, 0.0), (1.0, 1.0), 1.0).is_err());

        assert!(!scale_jump_with(ScaleJumpForm::Ratio, (2.0, 1.0), (2.0, 1.0), 0.5).unwrap());
        assert!(scale_jump_with(ScaleJumpForm::Ratio, (2.0, 1.0), (4.0, 2.0), 0.5).unwrap());
    }
}
