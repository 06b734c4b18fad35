//! Growing a part from its initial cross-section, one section at a time in
//! both directions along the axis.
//!
//! Two step rules are used. Sparse sections take a small step along the
//! section normal and search a fan of nearby plane orientations (method 1);
//! denser sections are registered against the points around that predicted
//! location and the matched points form the next section (method 2).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::Matrix3;

use crate::cloud::normals::sorted_eigen;
use crate::cloud::{PointCloud, SpatialIndex, Vec3};
use crate::crosssec::{
    best_plane, find_cross_section, get_inliers_anchored, local_plane_set, scale_jump_with, CrossSection, PlaneHypothesis, ScaleJumpForm,
    DEFAULT_DELTA_ANG_DEG, DEFAULT_K_STEP,
};
use crate::error::{Error, Result};
use crate::graph::{cluster_plane_threshold, AdaptiveThresholds, Clustering, ConnectivityGraph};
use crate::register::{check_registrable, register, select_matched_points_with, RegConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, rename_all = "kebab-case")]
pub struct GrowConfig {
    pub delta_ang_deg: f64,
    pub k_step: usize,
    /// Axial step of the plane search as a multiple of the band half-width.
    pub step_factor: f64,
    /// Sections with fewer members are grown by plane search, others by
    /// registration.
    pub min_points_for_registration: usize,
    /// Growth by registration stops when the mean best-match normal angle
    /// exceeds this value (degrees).
    pub match_angle_deg: f64,
    pub scale_jump_form: ScaleJumpForm,
    /// Threshold for the scale-jump test; the form's default when absent.
    pub delta_eg: Option<f64>,
    /// A candidate section whose members are at least this fraction already
    /// visited ends growth in that direction.
    pub visited_stop_fraction: f64,
    pub min_section_points: usize,
    /// Seeds for the next plane are searched within this multiple of the
    /// current section's radius around the predicted axis point.
    pub seed_search_factor: f64,
    /// Points between consecutive sections join the part when within this
    /// multiple of the sections' radius of the axis.
    pub sweep_radius_factor: f64,
    /// Points whose normal leans more than this (degrees) out of a section's
    /// plane are not added when completing a band or sweeping between
    /// sections; such points belong to a surface crossing the part.
    pub max_normal_tilt_deg: f64,
    pub registration: RegConfig,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            delta_ang_deg: DEFAULT_DELTA_ANG_DEG,
            k_step: DEFAULT_K_STEP,
            step_factor: 2.0,
            min_points_for_registration: 100,
            match_angle_deg: 15.0,
            scale_jump_form: ScaleJumpForm::default(),
            delta_eg: None,
            visited_stop_fraction: 0.9,
            min_section_points: 3,
            seed_search_factor: 2.0,
            sweep_radius_factor: 1.25,
            max_normal_tilt_deg: 45.0,
            registration: RegConfig::default(),
        }
    }
}

impl GrowConfig {
    fn delta_eg(&self) -> f64 {
        self.delta_eg.unwrap_or_else(|| self.scale_jump_form.default_threshold())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The initial section found by the exhaustive plane search.
    Seed,
    Method1,
    Method2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "reason", content = "detail")]
pub enum StopReason {
    ScaleJump,
    NoPoints,
    RegistrationMismatch,
    RegistrationFailure(String),
}

/// Which way along the seed section's normal a part is being grown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    /// The next section, its plane normal pointing in the growth direction.
    pub section: CrossSection,
    pub method: Method,
    /// Mean best-match angle of the registration that produced the section.
    pub registration_cost: Option<f64>,
    /// Points between the previous section and this one.
    pub swept: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Next(Step),
    Stop(StopReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub id: usize,
    pub seed_cluster: usize,
    /// Negative-direction sections reversed, the seed section, then the
    /// positive-direction sections.
    pub sections: Vec<CrossSection>,
    pub axis: Vec<Vec3>,
    /// Points lying between consecutive sections, sorted.
    pub swept: Vec<usize>,
    /// Sorted union of all section members and swept points.
    pub member_set: Vec<usize>,
    pub provenance: Vec<Method>,
    /// Registration cost (degrees) of consecutive section pairs, in axis order.
    pub per_pair_registration_cost: Vec<f64>,
    pub seed_position: usize,
    pub stop_negative: StopReason,
    pub stop_positive: StopReason,
}

impl Part {
    fn assemble(
        id: usize,
        seed_cluster: usize,
        seed: CrossSection,
        neg: Vec<Step>,
        pos: Vec<Step>,
        stops: (StopReason, StopReason),
    ) -> Self {
        let mut sections = Vec::with_capacity(neg.len() + pos.len() + 1);
        let mut provenance = Vec::with_capacity(sections.capacity());
        let mut costs = Vec::new();
        for step in neg.iter().rev() {
            sections.push(step.section.clone());
            provenance.push(step.method);
        }
        // Pair (k, k+1) on the negative side was produced while stepping from
        // k+1 to k, so its cost lives on the step that created section k.
        costs.extend(neg.iter().rev().filter_map(|s| s.registration_cost));
        let seed_position = sections.len();
        sections.push(seed);
        provenance.push(Method::Seed);
        for step in &pos {
            sections.push(step.section.clone());
            provenance.push(step.method);
        }
        costs.extend(pos.iter().filter_map(|s| s.registration_cost));
        let mut swept: Vec<usize> = neg.iter().chain(&pos).flat_map(|s| s.swept.iter().copied()).collect();
        swept.sort_unstable();
        let mut member_set: Vec<usize> = sections
            .iter()
            .flat_map(|s| s.member_indices.iter().copied())
            .chain(swept.iter().copied())
            .collect();
        member_set.sort_unstable();
        member_set.dedup();
        let axis = sections.iter().map(|s| s.center).collect();
        Part {
            id,
            seed_cluster,
            sections,
            axis,
            swept,
            member_set,
            provenance,
            per_pair_registration_cost: costs,
            seed_position,
            stop_negative: stops.0,
            stop_positive: stops.1,
        }
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    /// Sum of distances between consecutive axis points.
    pub fn axis_length(&self) -> f64 {
        self.axis.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// Read-only inputs shared by all growth workers.
pub struct GrowContext<'a> {
    pub cloud: &'a PointCloud,
    pub cnct: &'a ConnectivityGraph,
    pub thr: &'a AdaptiveThresholds,
    pub clustering: &'a Clustering,
    index: SpatialIndex,
}

impl<'a> GrowContext<'a> {
    pub fn new(cloud: &'a PointCloud, cnct: &'a ConnectivityGraph, thr: &'a AdaptiveThresholds, clustering: &'a Clustering) -> Self {
        Self {
            cloud,
            cnct,
            thr,
            clustering,
            index: SpatialIndex::new(cloud),
        }
    }
}

/// Per-direction mutable state.
struct Walker<'c, 'a> {
    ctx: &'c GrowContext<'a>,
    cfg: &'c GrowConfig,
    delta_pd: f64,
    visited: &'c mut [bool],
}

pub fn choose_method(current: &CrossSection, cfg: &GrowConfig) -> Method {
    if current.len() < cfg.min_points_for_registration {
        Method::Method1
    } else {
        Method::Method2
    }
}

fn section_radius(cloud: &PointCloud, s: &CrossSection) -> f64 {
    radius_about(cloud, &s.member_indices, &s.center)
}

fn radius_about(cloud: &PointCloud, members: &[usize], center: &Vec3) -> f64 {
    members.iter().map(|&i| (cloud.position(i) - center).norm()).fold(0.0, f64::max)
}

impl Walker<'_, '_> {
    /// The predicted next axis point. A full band of half-width delta_pd has
    /// its front at center + delta_pd, so stepping delta_pd past the
    /// front-most member advances by the nominal 2 delta_pd while keeping
    /// consecutive bands contiguous when the centroid drifts inside a band.
    fn predicted(&self, current: &CrossSection) -> Vec3 {
        let n = current.plane.normal;
        let front = current
            .member_indices
            .iter()
            .map(|&i| n.dot(&(self.ctx.cloud.position(i) - current.center)))
            .fold(0.0, f64::max);
        current.center + n * (front + (self.cfg.step_factor - 1.0) * self.delta_pd)
    }

    /// Plane fan around the current normal, anchored at the predicted axis point.
    fn fan(&self, current: &CrossSection, anchor: Vec3) -> Vec<PlaneHypothesis> {
        let base = PlaneHypothesis::from_normal(current.plane.normal, anchor);
        local_plane_set(base.theta, base.phi, self.cfg.delta_ang_deg, self.cfg.k_step, anchor)
    }

    /// The band point nearest `anchor` within the search radius (ties by index).
    fn seed_for(&self, plane: &PlaneHypothesis, near: &[(usize, f64)]) -> Option<usize> {
        near.iter()
            .find(|(i, _)| plane.signed_distance(&self.ctx.cloud.position(*i)).abs() <= self.delta_pd)
            .map(|&(i, _)| i)
    }

    fn neighborhood(&self, current: &CrossSection, anchor: &Vec3) -> Vec<(usize, f64)> {
        let cloud = self.ctx.cloud;
        let radius = self.cfg.seed_search_factor * section_radius(cloud, current) + self.cfg.step_factor * self.delta_pd;
        let mut near: Vec<(usize, f64)> = self
            .ctx
            .index
            .within_radius(anchor, radius)
            .into_iter()
            .map(|i| (i, (cloud.position(i) - anchor).norm()))
            .collect();
        near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        near
    }

    /// Whether point `i`'s normal lies within the tilt limit of the plane
    /// with normal `n`.
    fn lies_along(&self, i: usize, n: &Vec3) -> bool {
        n.dot(&self.ctx.cloud.normal(i)).abs() <= self.cfg.max_normal_tilt_deg.to_radians().sin()
    }

    fn visited_fraction(&self, members: &[usize]) -> f64 {
        members.iter().filter(|&&i| self.visited[i]).count() as f64 / members.len() as f64
    }

    /// Unvisited points between two consecutive sections: ahead of `prev`'s
    /// plane, behind `next`'s plane, connected to either section, and within
    /// the sections' radial extent of the segment joining their centers.
    fn sweep(&self, prev: &CrossSection, next: &CrossSection) -> Vec<usize> {
        let cloud = self.ctx.cloud;
        let axis = next.center - prev.center;
        let len2 = axis.norm_squared();
        let reach = self.cfg.sweep_radius_factor * section_radius(cloud, prev);
        let inside = |i: usize| {
            let p = cloud.position(i);
            if prev.plane.normal.dot(&(p - prev.center)) <= 0.0 || next.plane.normal.dot(&(p - next.center)) >= 0.0 {
                return false;
            }
            let t = if len2 > 0.0 {
                ((p - prev.center).dot(&axis) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p - (prev.center + axis * t)).norm() <= reach && self.lies_along(i, &next.plane.normal)
        };
        let mut taken = vec![false; cloud.len()];
        let mut queue = std::collections::VecDeque::new();
        for &i in prev.member_indices.iter().chain(&next.member_indices) {
            taken[i] = true;
            queue.push_back(i);
        }
        let mut swept = Vec::new();
        while let Some(u) = queue.pop_front() {
            for &v in self.ctx.cnct.neighbors(u) {
                if !taken[v] && !self.visited[v] && inside(v) {
                    taken[v] = true;
                    swept.push(v);
                    queue.push_back(v);
                }
            }
        }
        swept.sort_unstable();
        swept
    }

    /// Drops already-visited members, then applies the common acceptance
    /// checks. The returned section's normal points along the growth.
    fn finish(
        &self,
        current: &CrossSection,
        members: Vec<usize>,
        normal: Vec3,
        seed_hint: Vec3,
    ) -> Result<std::result::Result<CrossSection, StopReason>> {
        if members.is_empty() || self.visited_fraction(&members) >= self.cfg.visited_stop_fraction {
            return Ok(Err(StopReason::NoPoints));
        }
        let fresh: Vec<usize> = members.into_iter().filter(|&i| !self.visited[i]).collect();
        if fresh.len() < self.cfg.min_section_points {
            return Ok(Err(StopReason::NoPoints));
        }
        let cloud = self.ctx.cloud;
        let center = crate::cloud::centroid(cloud, &fresh);
        let displacement = center - current.center;
        if displacement.dot(&current.plane.normal) <= 0.0 {
            return Ok(Err(StopReason::NoPoints));
        }
        let normal = if normal.dot(&displacement) < 0.0 { -normal } else { normal };
        let seed = *fresh
            .iter()
            .min_by(|&&a, &&b| {
                (cloud.position(a) - seed_hint)
                    .norm()
                    .total_cmp(&(cloud.position(b) - seed_hint).norm())
            })
            .expect("non-empty");
        let plane = PlaneHypothesis::from_normal(normal, center);
        Ok(Ok(CrossSection::from_members(cloud, fresh, plane, seed)?))
    }

    /// Registration leaves the slice orientation unconstrained on surfaces
    /// with translational symmetry (every planar slice of a cylinder maps onto
    /// its neighbours), so the carried normal is refined with the fit-cost
    /// criterion: the direction minimizing sum (n . x_n)^2 over the matched
    /// normals. The refinement is kept only when it is well determined and
    /// stays within the local search range of the carried normal.
    fn refine_normal(&self, matched: &[usize], carried: Vec3) -> Vec3 {
        let cloud = self.ctx.cloud;
        let scatter = matched.iter().fold(Matrix3::zeros(), |acc, &i| {
            let n = cloud.normal(i);
            acc + n * n.transpose()
        });
        let (values, vectors) = sorted_eigen(scatter);
        let refined = if vectors[2].dot(&carried) < 0.0 { -vectors[2] } else { vectors[2] };
        let well_posed = values[2] < 0.5 * values[1];
        if well_posed && refined.angle(&carried) <= self.cfg.delta_ang_deg.to_radians() {
            refined
        } else {
            carried
        }
    }

    /// The full band of the plane through the matched points' centroid:
    /// unvisited points within delta_pd of that plane whose normals lie along
    /// it, within `reach` of the line through `axis_point` along the normal,
    /// and connected inside the band to a matched point. A partial or tilted
    /// match thus still yields a complete section whose centroid is an axis
    /// point, while surfaces leaving the part (a branch meeting it at a
    /// junction) stay out.
    fn complete_band(&self, matched: &[usize], normal: &Vec3, axis_point: &Vec3, reach: f64) -> Vec<usize> {
        let cloud = self.ctx.cloud;
        let mid = crate::cloud::centroid(cloud, matched);
        let in_band = |i: usize| {
            let p = cloud.position(i);
            let off = p - axis_point;
            normal.dot(&(p - mid)).abs() <= self.delta_pd && (off - normal * normal.dot(&off)).norm() <= reach && self.lies_along(i, normal)
        };
        let mut taken = vec![false; cloud.len()];
        let mut queue: std::collections::VecDeque<usize> = matched.iter().copied().filter(|&i| in_band(i)).collect();
        if queue.is_empty() {
            let nearest = matched.iter().copied().min_by(|&a, &b| {
                normal
                    .dot(&(cloud.position(a) - mid))
                    .abs()
                    .total_cmp(&normal.dot(&(cloud.position(b) - mid)).abs())
            });
            queue.extend(nearest);
        }
        let mut out: Vec<usize> = queue.iter().copied().collect();
        for &i in &out {
            taken[i] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &v in self.ctx.cnct.neighbors(u) {
                if !taken[v] && !self.visited[v] && in_band(v) {
                    taken[v] = true;
                    out.push(v);
                    queue.push_back(v);
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn method1(&self, current: &CrossSection) -> Result<StepOutcome> {
        let anchor = self.predicted(current);
        let planes = self.fan(current, anchor);
        let near = self.neighborhood(current, &anchor);
        let Some(best) = best_plane(self.ctx.cloud, self.ctx.cnct, self.delta_pd, &planes, |p| self.seed_for(p, &near))? else {
            return Ok(StepOutcome::Stop(StopReason::NoPoints));
        };
        let section = match self.finish(current, best.member_indices, best.plane.normal, anchor)? {
            Ok(s) => s,
            Err(reason) => return Ok(StepOutcome::Stop(reason)),
        };
        if current.scale_eigs.0.hypot(current.scale_eigs.1) > 0.0
            && scale_jump_with(
                self.cfg.scale_jump_form,
                current.scale_eigs,
                section.scale_eigs,
                self.cfg.delta_eg(),
            )?
        {
            return Ok(StepOutcome::Stop(StopReason::ScaleJump));
        }
        Ok(StepOutcome::Next(Step {
            section,
            method: Method::Method1,
            registration_cost: None,
            swept: Vec::new(),
        }))
    }

    fn method2(&self, current: &CrossSection) -> Result<StepOutcome> {
        let cloud = self.ctx.cloud;
        let anchor = self.predicted(current);
        let near = self.neighborhood(current, &anchor);
        let mut in_y = vec![false; cloud.len()];
        for plane in self.fan(current, anchor) {
            if let Some(seed) = self.seed_for(&plane, &near) {
                for i in get_inliers_anchored(cloud, self.ctx.cnct, self.delta_pd, &plane.anchor, seed, &plane.normal) {
                    in_y[i] = true;
                }
            }
        }
        for &i in &current.member_indices {
            in_y[i] = false;
        }
        let y_idx: Vec<usize> = (0..cloud.len()).filter(|&i| in_y[i] && !self.visited[i]).collect();
        if y_idx.len() < self.cfg.min_section_points {
            return Ok(StepOutcome::Stop(StopReason::NoPoints));
        }
        let x = PointCloud::new(cloud.subset(&current.member_indices), true)?;
        let y = PointCloud::new(cloud.subset(&y_idx), true)?;
        let report = match register(&x, &y, &self.cfg.registration) {
            Ok(r) => r,
            Err(e) => return Ok(StepOutcome::Stop(StopReason::RegistrationFailure(e.to_string()))),
        };
        if report.mean_best_match_angle > self.cfg.match_angle_deg {
            return Ok(StepOutcome::Stop(StopReason::RegistrationMismatch));
        }
        let reg = &self.cfg.registration;
        let matched: Vec<usize> = select_matched_points_with(&x, &y, &report.params, reg.select_distance_factor, reg.select_angle_deg)
            .into_iter()
            .map(|j| y_idx[j])
            .collect();
        if matched.is_empty() {
            return Ok(StepOutcome::Stop(StopReason::NoPoints));
        }
        // The fitted map takes the next section onto the current one, so the
        // current normal is carried forward by the inverse rotation.
        let carried = (report.params.rotation.transpose() * current.plane.normal).normalize();
        let normal = self.refine_normal(&matched, carried);
        // The fitted scale maps the next section onto the current one, so the
        // next section's extent is the current one divided by it.
        let reach = self.cfg.sweep_radius_factor * section_radius(cloud, current) / report.params.scale.min(1.0);
        let members = self.complete_band(&matched, &normal, &anchor, reach);
        match self.finish(current, members, normal, anchor)? {
            Ok(section) => Ok(StepOutcome::Next(Step {
                section,
                method: Method::Method2,
                registration_cost: Some(report.mean_best_match_angle),
                swept: Vec::new(),
            })),
            Err(reason) => Ok(StepOutcome::Stop(reason)),
        }
    }

    fn step(&self, current: &CrossSection) -> Result<StepOutcome> {
        match choose_method(current, self.cfg) {
            Method::Method2 => self.method2(current),
            _ => self.method1(current),
        }
    }

    fn walk(&mut self, seed: &CrossSection, direction: Direction) -> Result<(Vec<Step>, StopReason)> {
        let mut current = seed.clone();
        current.plane.normal *= direction.sign();
        let mut steps: Vec<Step> = Vec::new();
        loop {
            match self.step(&current)? {
                StepOutcome::Stop(reason) => return Ok((steps, reason)),
                StepOutcome::Next(mut step) => {
                    for &i in &step.section.member_indices {
                        self.visited[i] = true;
                    }
                    step.swept = self.sweep(&current, &step.section);
                    for &i in &step.swept {
                        self.visited[i] = true;
                    }
                    current = step.section.clone();
                    steps.push(step);
                }
            }
        }
    }
}

/// One plane-search step from `current` (normal oriented along the growth).
pub fn method1_step(
    ctx: &GrowContext,
    current: &CrossSection,
    delta_pd: f64,
    visited: &mut [bool],
    cfg: &GrowConfig,
) -> Result<StepOutcome> {
    Walker {
        ctx,
        cfg,
        delta_pd,
        visited,
    }
    .method1(current)
}

/// One registration step from `current` (normal oriented along the growth).
pub fn method2_step(
    ctx: &GrowContext,
    current: &CrossSection,
    delta_pd: f64,
    visited: &mut [bool],
    cfg: &GrowConfig,
) -> Result<StepOutcome> {
    Walker {
        ctx,
        cfg,
        delta_pd,
        visited,
    }
    .method2(current)
}

/// Grows the part seeded at `seed_cluster` in both directions.
pub fn grow_part(ctx: &GrowContext, seed_cluster: usize, cfg: &GrowConfig) -> Result<Part> {
    let cloud = ctx.cloud;
    if !cloud.has_normals() {
        return Err(Error::InvalidArgument("growing parts needs point normals".into()));
    }
    let delta_pd = cluster_plane_threshold(ctx.clustering, ctx.thr, seed_cluster)?;
    let seed_point = ctx.clustering.seeds[seed_cluster];
    let seed = find_cross_section(cloud, ctx.cnct, delta_pd, seed_point)?;
    let mut visited = vec![false; cloud.len()];
    for &i in &seed.member_indices {
        visited[i] = true;
    }
    let mut walker = Walker {
        ctx,
        cfg,
        delta_pd,
        visited: &mut visited,
    };
    let (mut pos, stop_pos) = walker.walk(&seed, Direction::Positive)?;
    let (mut neg, stop_neg) = walker.walk(&seed, Direction::Negative)?;
    fill_pair_costs(cloud, &seed, &mut pos, &cfg.registration);
    fill_pair_costs(cloud, &seed, &mut neg, &cfg.registration);
    Ok(Part::assemble(seed_cluster, seed_cluster, seed, neg, pos, (stop_neg, stop_pos)))
}

/// Steps taken by plane search carry no registration; register each such
/// section against its predecessor so every adjacent pair is scored alike.
fn fill_pair_costs(cloud: &PointCloud, seed: &CrossSection, steps: &mut [Step], reg: &RegConfig) {
    for k in 0..steps.len() {
        if steps[k].registration_cost.is_some() {
            continue;
        }
        let prev = if k == 0 { seed } else { &steps[k - 1].section };
        steps[k].registration_cost = pair_cost(cloud, prev, &steps[k].section, reg);
    }
}

/// Mean best-match angle after registering `next` onto `prev`, or None when
/// either section is too small or degenerate to register.
pub fn pair_cost(cloud: &PointCloud, prev: &CrossSection, next: &CrossSection, reg: &RegConfig) -> Option<f64> {
    let x = PointCloud::new(cloud.subset(&prev.member_indices), true).ok()?;
    let y = PointCloud::new(cloud.subset(&next.member_indices), true).ok()?;
    check_registrable(&x).ok()?;
    register(&x, &y, reg).ok().map(|r| r.mean_best_match_angle)
}

/// Grows one candidate per listed cluster in parallel. Candidates whose
/// initial section cannot be found are returned as errors in place.
pub fn grow_parts(ctx: &GrowContext, clusters: &[usize], cfg: &GrowConfig) -> Vec<Result<Part>> {
    clusters.par_iter().map(|&c| grow_part(ctx, c, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_connectivity, build_mst, cluster_cloud, compute_thresholds};

    struct Fixture {
        cloud: PointCloud,
        cnct: ConnectivityGraph,
        thr: AdaptiveThresholds,
        clustering: Clustering,
    }

    fn fixture(pts: Vec<Vec3>, nrm: Vec<Vec3>, clusters: usize) -> Fixture {
        let cloud = PointCloud::from_oriented(&pts, &nrm).unwrap();
        let mst = build_mst(&cloud, 30).unwrap();
        let thr = compute_thresholds(&mst, cloud.len()).unwrap();
        let cnct = build_connectivity(&cloud, &thr);
        let clustering = cluster_cloud(&cloud, clusters, 1, &cnct).unwrap();
        Fixture {
            cloud,
            cnct,
            thr,
            clustering,
        }
    }

    /// Regular rings on a z-aligned open cylinder: ring spacing `h`, points
    /// on a ring about 0.85 h apart, columns aligned.
    fn cylinder(radius: f64, length: f64, h: f64, _seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
        let per_ring = (std::f64::consts::TAU * radius / (0.85 * h)).round() as usize;
        let rings = (length / h).round() as usize + 1;
        let (mut pts, mut nrm) = (Vec::new(), Vec::new());
        for k in 0..rings {
            for j in 0..per_ring {
                let a = j as f64 * std::f64::consts::TAU / per_ring as f64;
                pts.push(Vec3::new(radius * a.cos(), radius * a.sin(), k as f64 * h));
                nrm.push(Vec3::new(a.cos(), a.sin(), 0.0));
            }
        }
        (pts, nrm)
    }

    fn section_at(f: &Fixture, z: f64) -> CrossSection {
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let seed = (0..f.cloud.len())
            .min_by(|&a, &b| (f.cloud.position(a).z - z).abs().total_cmp(&(f.cloud.position(b).z - z).abs()))
            .unwrap();
        let delta = crate::graph::lower_median(f.thr.d_max.clone()).unwrap();
        let mut s = find_cross_section(ctx.cloud, ctx.cnct, delta, seed).unwrap();
        if s.plane.normal.z < 0.0 {
            s.plane.normal = -s.plane.normal;
        }
        s
    }

    #[test]
    fn method_switch_threshold() {
        let (p, n) = cylinder(1.0, 3.0, 0.1, 1);
        let f = fixture(p, n, 5);
        let mut s = section_at(&f, 1.5);
        let cfg = GrowConfig::default();
        s.member_indices = (0..99).collect();
        assert_eq!(choose_method(&s, &cfg), Method::Method1);
        s.member_indices = (0..100).collect();
        assert_eq!(choose_method(&s, &cfg), Method::Method2);
        s.member_indices = (0..75).collect();
        let low = GrowConfig {
            min_points_for_registration: 50,
            ..Default::default()
        };
        assert_eq!(choose_method(&s, &low), Method::Method2);
    }

    #[test]
    fn plane_search_step_advances_along_the_axis() {
        let (p, n) = cylinder(1.0, 4.0, 0.1, 2);
        let f = fixture(p, n, 5);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let current = section_at(&f, 2.0);
        let delta = crate::graph::lower_median(f.thr.d_max.clone()).unwrap();
        let mut visited = vec![false; f.cloud.len()];
        current.member_indices.iter().for_each(|&i| visited[i] = true);
        let out = method1_step(&ctx, &current, delta, &mut visited, &GrowConfig::default()).unwrap();
        let StepOutcome::Next(step) = out else { panic!("{out:?}") };
        let dz = step.section.center.z - current.center.z;
        assert!((dz - 2.0 * delta).abs() < delta, "advance {dz} vs step {}", 2.0 * delta);
        assert!(step.section.plane.normal.angle(&Vec3::z()).to_degrees() <= 12.5 + 1e-9);
    }

    #[test]
    fn plane_search_stops_at_a_free_end() {
        let (p, n) = cylinder(1.0, 4.0, 0.1, 2);
        let f = fixture(p, n, 5);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let current = section_at(&f, 4.0);
        let delta = crate::graph::lower_median(f.thr.d_max.clone()).unwrap();
        let mut visited = vec![false; f.cloud.len()];
        current.member_indices.iter().for_each(|&i| visited[i] = true);
        let out = method1_step(&ctx, &current, delta, &mut visited, &GrowConfig::default()).unwrap();
        assert!(matches!(out, StepOutcome::Stop(StopReason::NoPoints)), "{out:?}");
    }

    #[test]
    fn registration_step_advances_along_the_axis() {
        let (p, n) = cylinder(1.0, 4.0, 0.04, 3);
        let f = fixture(p, n, 5);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let current = section_at(&f, 2.0);
        assert!(current.len() >= 100);
        let delta = crate::graph::lower_median(f.thr.d_max.clone()).unwrap();
        let mut visited = vec![false; f.cloud.len()];
        current.member_indices.iter().for_each(|&i| visited[i] = true);
        let out = method2_step(&ctx, &current, delta, &mut visited, &GrowConfig::default()).unwrap();
        let StepOutcome::Next(step) = out else { panic!("{out:?}") };
        assert!(step.section.center.z > current.center.z);
        assert!(step.registration_cost.unwrap() < 15.0);
        assert!(step.section.plane.normal.angle(&Vec3::z()).to_degrees() < 15.0);
    }

    #[test]
    fn grows_over_the_whole_cylinder() {
        let (p, n) = cylinder(1.0, 6.0, 0.06, 4);
        let f = fixture(p, n, 6);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let part = grow_part(&ctx, 0, &GrowConfig::default()).unwrap();
        let covered = part.member_set.len() as f64 / f.cloud.len() as f64;
        assert!(covered >= 0.95, "coverage {covered}");
        let rms = (part.axis.iter().map(|c| c.x * c.x + c.y * c.y).sum::<f64>() / part.axis.len() as f64).sqrt();
        assert!(rms < 0.1, "axis rms {rms}");
        let (lo, hi) = part
            .axis
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.z), hi.max(c.z)));
        assert!(lo < 2.0 * 0.06 && hi > 6.0 - 2.0 * 0.06, "axis spans {lo}..{hi}");
        for (k, s) in part.sections.iter().enumerate() {
            assert_eq!(part.axis[k], s.center);
        }
        // Sections are pairwise disjoint, never overlap the swept points, and
        // together with them make up the member set.
        let total: usize = part.sections.iter().map(|s| s.len()).sum();
        assert_eq!(total + part.swept.len(), part.member_set.len());
        // Axis runs monotonically from one end to the other.
        let dz: Vec<f64> = part.axis.windows(2).map(|w| w[1].z - w[0].z).collect();
        assert!(dz.iter().all(|&d| d > 0.0) || dz.iter().all(|&d| d < 0.0));
        assert_eq!(part.per_pair_registration_cost.len(), part.len() - 1);
    }

    /// A z-aligned stem of radius `rs` meeting a crossbar of radius `rb`
    /// running along x at height `zb`; points inside the other tube are
    /// dropped. Returns positions, normals and the height of the highest stem
    /// point (the junction plane).
    fn t_junction(rs: f64, rb: f64, zb: f64, half_bar: f64, h: f64) -> (Vec<Vec3>, Vec<Vec3>, f64) {
        let (mut pts, mut nrm) = (Vec::new(), Vec::new());
        let ring = |r: f64| (std::f64::consts::TAU * r / (0.85 * h)).round() as usize;
        for k in 0..=(zb / h).round() as usize {
            let z = k as f64 * h;
            for j in 0..ring(rs) {
                let a = j as f64 * std::f64::consts::TAU / ring(rs) as f64;
                let p = Vec3::new(rs * a.cos(), rs * a.sin(), z);
                if p.y * p.y + (p.z - zb).powi(2) >= rb * rb {
                    pts.push(p);
                    nrm.push(Vec3::new(a.cos(), a.sin(), 0.0));
                }
            }
        }
        let bar_rings = (2.0 * half_bar / h).round() as usize;
        for k in 0..=bar_rings {
            let x = -half_bar + k as f64 * h;
            for j in 0..ring(rb) {
                let a = j as f64 * std::f64::consts::TAU / ring(rb) as f64;
                let p = Vec3::new(x, rb * a.cos(), zb + rb * a.sin());
                if !(p.x * p.x + p.y * p.y < rs * rs && p.z < zb) {
                    pts.push(p);
                    nrm.push(Vec3::new(0.0, a.cos(), a.sin()));
                }
            }
        }
        (pts, nrm, zb - (rb * rb - rs * rs).sqrt())
    }

    #[test]
    fn growth_up_a_stem_stops_at_the_junction() {
        let (p, n, z_junction) = t_junction(0.8, 1.0, 4.0, 2.0, 0.05);
        let mut f = fixture(p, n, 8);
        let seed = (0..f.cloud.len())
            .min_by(|&a, &b| {
                let d = |i: usize| (f.cloud.position(i) - Vec3::new(0.8, 0.0, 1.5)).norm();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        f.clustering.seeds[0] = seed;
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let delta = cluster_plane_threshold(&f.clustering, &f.thr, 0).unwrap();
        let part = grow_part(&ctx, 0, &GrowConfig::default()).unwrap();
        let top = part
            .member_set
            .iter()
            .map(|&i| f.cloud.position(i).z)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(top <= z_junction + 2.0 * delta, "part reaches z = {top}, junction at {z_junction}");
        // It does reach the junction region and the base of the stem.
        let bottom = part.axis.iter().map(|c| c.z).fold(f64::INFINITY, f64::min);
        assert!(bottom < 0.1, "axis starts at {bottom}");
        assert!(top > z_junction - 0.8, "part stops at {top}");
    }

    #[test]
    fn isolated_ring_gives_a_single_section() {
        let (p, n) = cylinder(1.0, 0.0, 0.1, 5);
        let f = fixture(p, n, 1);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let part = grow_part(&ctx, 0, &GrowConfig::default()).unwrap();
        assert_eq!(part.len(), 1);
        assert_eq!(part.axis.len(), 1);
        assert!(part.per_pair_registration_cost.is_empty());
    }

    #[test]
    fn growth_is_deterministic() {
        let (p, n) = cylinder(1.0, 3.0, 0.1, 6);
        let f = fixture(p, n, 4);
        let ctx = GrowContext::new(&f.cloud, &f.cnct, &f.thr, &f.clustering);
        let a = grow_parts(&ctx, &[0, 1, 2, 3], &GrowConfig::default());
        let b = grow_parts(&ctx, &[0, 1, 2, 3], &GrowConfig::default());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref().unwrap(), y.as_ref().unwrap());
        }
    }
}
