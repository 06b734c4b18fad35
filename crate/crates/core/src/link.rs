//! Linking the selected parts into one skeleton graph.
//!
//! Parts whose end sections register well are merged end to end first. The
//! merged parts are then connected along their potential links (parts that
//! touch in the connectivity graph): a component in which every part touches
//! the others through one and the same end gets a single junction point,
//! every other touching pair gets a straight link.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Vec3};
use crate::crosssec::CrossSection;
use crate::error::Result;
use crate::graph::{ConnectivityGraph, DisjointSet};
use crate::grow::Part;
use crate::register::{register, RegConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, rename_all = "kebab-case")]
pub struct LinkConfig {
    /// Ends merge only when their registration cost is below this (degrees).
    pub merge_max_angle_deg: f64,
    /// ... and the fitted scale differs from one by less than this.
    pub merge_max_scale_diff: f64,
    /// ... and the two end-section planes are within this angle (degrees).
    /// Registration is blind to the sections' orientations: two equal
    /// sections in perpendicular planes register at zero cost.
    pub merge_max_tilt_deg: f64,
    /// A part's ray direction is taken over this many trailing axis segments.
    pub ray_span: usize,
    pub junction_tolerance: f64,
    pub registration: RegConfig,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            merge_max_angle_deg: 35.0,
            merge_max_scale_diff: 0.5,
            merge_max_tilt_deg: 35.0,
            ray_span: 3,
            junction_tolerance: 1e-9,
            registration: RegConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum End {
    /// The first section / axis vertex.
    Start,
    /// The last section / axis vertex.
    End,
}

impl End {
    pub fn other(self) -> Self {
        match self {
            End::Start => End::End,
            End::End => End::Start,
        }
    }
}

pub fn end_section(part: &Part, end: End) -> &CrossSection {
    match end {
        End::Start => &part.sections[0],
        End::End => part.sections.last().expect("parts have at least one section"),
    }
}

fn end_vertex(axis: &[Vec3], end: End) -> usize {
    match end {
        End::Start => 0,
        End::End => axis.len() - 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "reason", content = "detail")]
pub enum MergeRejection {
    Angle,
    Scale,
    RegistrationFailure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub a: usize,
    pub end_a: End,
    pub b: usize,
    pub end_b: End,
    /// Registration cost of the two end sections (degrees).
    pub cost: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeOutcome {
    Merged {
        part: Box<Part>,
        record: MergeRecord,
    },
    Rejected {
        reason: MergeRejection,
        cost: Option<f64>,
        scale: Option<f64>,
    },
}

/// Registers the two end sections, the lower-id part's section as the
/// fixed set, and decides whether the parts continue each other.
pub fn merge_test(
    cloud: &PointCloud,
    a: &Part,
    end_a: End,
    b: &Part,
    end_b: End,
    cfg: &LinkConfig,
) -> std::result::Result<MergeRecord, (MergeRejection, Option<f64>, Option<f64>)> {
    let ((x_part, x_end), (y_part, y_end)) = if a.id <= b.id {
        ((a, end_a), (b, end_b))
    } else {
        ((b, end_b), (a, end_a))
    };
    let fail = |e: String| (MergeRejection::RegistrationFailure(e), None, None);
    let (nx, ny) = (end_section(x_part, x_end).plane.normal, end_section(y_part, y_end).plane.normal);
    let tilt = nx.dot(&ny).abs().min(1.0).acos().to_degrees();
    let x = PointCloud::new(cloud.subset(&end_section(x_part, x_end).member_indices), true).map_err(|e| fail(e.to_string()))?;
    let y = PointCloud::new(cloud.subset(&end_section(y_part, y_end).member_indices), true).map_err(|e| fail(e.to_string()))?;
    if x.len() < 3 || y.len() < 3 {
        return Err(fail("end sections need at least 3 points".into()));
    }
    let report = register(&x, &y, &cfg.registration).map_err(|e| fail(e.to_string()))?;
    let (cost, scale) = (report.mean_best_match_angle, report.params.scale);
    if cost >= cfg.merge_max_angle_deg || tilt >= cfg.merge_max_tilt_deg {
        return Err((MergeRejection::Angle, Some(cost), Some(scale)));
    }
    if (1.0 - scale).abs() >= cfg.merge_max_scale_diff {
        return Err((MergeRejection::Scale, Some(cost), Some(scale)));
    }
    Ok(MergeRecord {
        a: a.id,
        end_a,
        b: b.id,
        end_b,
        cost,
        scale,
    })
}

pub fn try_merge(cloud: &PointCloud, a: &Part, end_a: End, b: &Part, end_b: End, cfg: &LinkConfig) -> MergeOutcome {
    match merge_test(cloud, a, end_a, b, end_b, cfg) {
        Ok(record) => MergeOutcome::Merged {
            part: Box::new(join_parts(a, end_a, b, end_b, record.cost)),
            record,
        },
        Err((reason, cost, scale)) => MergeOutcome::Rejected { reason, cost, scale },
    }
}

/// `part` with its sections in reverse order.
pub fn reversed(part: &Part) -> Part {
    let mut p = part.clone();
    p.sections.reverse();
    p.axis.reverse();
    p.provenance.reverse();
    p.per_pair_registration_cost.reverse();
    p.seed_position = p.sections.len() - 1 - p.seed_position;
    std::mem::swap(&mut p.stop_negative, &mut p.stop_positive);
    p
}

/// Concatenates `a` and `b` so that `end_a` and `end_b` meet. The result
/// keeps the lower id; `joint_cost` scores the new adjacent pair.
pub fn join_parts(a: &Part, end_a: End, b: &Part, end_b: End, joint_cost: f64) -> Part {
    let first = if end_a == End::End { a.clone() } else { reversed(a) };
    let second = if end_b == End::Start { b.clone() } else { reversed(b) };
    let mut out = first;
    out.id = a.id.min(b.id);
    out.seed_cluster = if a.id <= b.id { a.seed_cluster } else { b.seed_cluster };
    out.per_pair_registration_cost.push(joint_cost);
    out.per_pair_registration_cost.extend(second.per_pair_registration_cost);
    out.sections.extend(second.sections);
    out.axis.extend(second.axis);
    out.provenance.extend(second.provenance);
    out.stop_positive = second.stop_positive;
    out.swept = sorted_union(&out.swept, &second.swept);
    out.member_set = sorted_union(&out.member_set, &second.member_set);
    out
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Which ends of a part take part in a potential link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ends {
    pub start: bool,
    pub end: bool,
}

impl Ends {
    pub fn any(self) -> bool {
        self.start || self.end
    }

    pub fn contains(self, e: End) -> bool {
        match e {
            End::Start => self.start,
            End::End => self.end,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = End> {
        [(self.start, End::Start), (self.end, End::End)]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, e)| e)
    }
}

/// One potential link between parts `a < b` (positions in the part list).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub a: usize,
    pub b: usize,
    /// Ends of `a` whose terminal section touches `b`, and vice versa.
    pub a_ends: Ends,
    pub b_ends: Ends,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartAdjacency {
    pub n_parts: usize,
    pub edges: Vec<Adjacency>,
}

impl PartAdjacency {
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.a == i {
                    Some(e.b)
                } else if e.b == i {
                    Some(e.a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Connected components as sorted part positions, in order of their
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = DisjointSet::new(self.n_parts);
        for e in &self.edges {
            uf.union(e.a, e.b);
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..self.n_parts {
            groups.entry(uf.find(i)).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }
}

/// Two parts may be linked when a point of one is a connectivity neighbour
/// of (or is) a point of the other.
pub fn potential_links(parts: &[Part], cnct: &ConnectivityGraph) -> PartAdjacency {
    let n_points = cnct.len();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_points];
    for (k, p) in parts.iter().enumerate() {
        for &i in &p.member_set {
            owners[i].push(k);
        }
    }
    // Parts touched from a set of points.
    let touched = |points: &[usize], me: usize| -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &p in points {
            for &q in std::iter::once(&p).chain(cnct.neighbors(p)) {
                out.extend(owners[q].iter().copied().filter(|&o| o != me));
            }
        }
        out
    };
    let mut edges = Vec::new();
    for (a, part) in parts.iter().enumerate() {
        let all = touched(&part.member_set, a);
        let start = touched(&end_section(part, End::Start).member_indices, a);
        let end = if part.len() > 1 {
            touched(&end_section(part, End::End).member_indices, a)
        } else {
            BTreeSet::new()
        };
        for &b in all.iter().filter(|&&b| b > a) {
            let other = &parts[b];
            let b_start = end_section(other, End::Start)
                .member_indices
                .iter()
                .any(|&p| touches(p, &parts[a].member_set, cnct));
            let b_end = other.len() > 1
                && end_section(other, End::End)
                    .member_indices
                    .iter()
                    .any(|&p| touches(p, &parts[a].member_set, cnct));
            edges.push(Adjacency {
                a,
                b,
                a_ends: Ends {
                    start: start.contains(&b),
                    end: end.contains(&b),
                },
                b_ends: Ends {
                    start: b_start,
                    end: b_end,
                },
            });
        }
    }
    PartAdjacency {
        n_parts: parts.len(),
        edges,
    }
}

/// Whether point `p` is in, or a neighbour of a point in, the sorted set.
fn touches(p: usize, sorted: &[usize], cnct: &ConnectivityGraph) -> bool {
    std::iter::once(&p)
        .chain(cnct.neighbors(p))
        .any(|q| sorted.binary_search(q).is_ok())
}

/// The original parts making up one merged part, in axis order, each with
/// a flag telling whether it was reversed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub parts: Vec<(usize, bool)>,
    pub joints: Vec<MergeRecord>,
}

/// Merges chains of parts whose facing ends register well. Candidates are
/// every pair of touching ends; accepted merges are taken in ascending cost,
/// each end at most once and never closing a cycle. Returns the merged parts
/// and their chains, aligned.
pub fn merge_parts(
    cloud: &PointCloud,
    parts: &[Part],
    adjacency: &PartAdjacency,
    cfg: &LinkConfig,
) -> (Vec<Part>, Vec<Chain>, Vec<MergeRecord>) {
    let mut accepted: Vec<(MergeRecord, usize, usize)> = Vec::new();
    for e in &adjacency.edges {
        for ea in e.a_ends.iter() {
            for eb in e.b_ends.iter() {
                if let Ok(rec) = merge_test(cloud, &parts[e.a], ea, &parts[e.b], eb, cfg) {
                    accepted.push((rec, e.a, e.b));
                }
            }
        }
    }
    accepted.sort_by(|x, y| {
        x.0.cost
            .total_cmp(&y.0.cost)
            .then((x.1, x.2).cmp(&(y.1, y.2)))
            .then(x.0.end_a.cmp(&y.0.end_a))
            .then(x.0.end_b.cmp(&y.0.end_b))
    });

    let n = parts.len();
    let mut used = vec![[false; 2]; n];
    let slot = |e: End| if e == End::Start { 0 } else { 1 };
    let mut uf = DisjointSet::new(n);
    // links[i][end] = (other part, other end, record)
    let mut links: Vec<[Option<(usize, End, MergeRecord)>; 2]> = vec![[None, None]; n];
    let mut taken = Vec::new();
    for (rec, a, b) in accepted {
        // A one-section part has a single physical end.
        let (ia, ib) = (slot(rec.end_a), slot(rec.end_b));
        let busy = |k: usize, s: usize| used[k][s] || (parts[k].len() == 1 && (used[k][0] || used[k][1]));
        if busy(a, ia) || busy(b, ib) || uf.find(a) == uf.find(b) {
            continue;
        }
        uf.union(a, b);
        used[a][ia] = true;
        used[b][ib] = true;
        links[a][ia] = Some((b, rec.end_b, rec.clone()));
        links[b][ib] = Some((a, rec.end_a, rec.clone()));
        taken.push(rec);
    }

    // Without cycles every chain is a path; walk each from an end.
    let degree = |k: usize| links[k].iter().flatten().count();
    let mut merged = Vec::new();
    let mut chains = Vec::new();
    for head in (0..n).filter(|&k| degree(k) <= 1) {
        if chains.iter().any(|c: &Chain| c.parts.last().is_some_and(|&(k, _)| k == head)) {
            continue;
        }
        let exit = if links[head][0].is_some() { End::Start } else { End::End };
        let rev = exit == End::Start;
        let mut part = if rev { reversed(&parts[head]) } else { parts[head].clone() };
        let mut chain = Chain {
            parts: vec![(head, rev)],
            joints: Vec::new(),
        };
        let mut cur = head;
        let mut cur_exit = Some(exit);
        while let Some((next, entry, rec)) = cur_exit.and_then(|e| links[cur][slot(e)].clone()) {
            part = join_parts(&part, End::End, &parts[next], entry, rec.cost);
            chain.parts.push((next, entry == End::End));
            chain.joints.push(rec);
            cur = next;
            cur_exit = (parts[next].len() > 1).then(|| entry.other());
        }
        part.id = chain.parts.iter().map(|&(k, _)| parts[k].id).min().expect("non-empty chain");
        merged.push(part);
        chains.push(chain);
    }
    (merged, chains, taken)
}

/// A ray extending a part's axis beyond one of its ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn distance(&self, p: &Vec3) -> f64 {
        let t = (p - self.origin).dot(&self.direction).max(0.0);
        (p - (self.origin + self.direction * t)).norm()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Minimizes a function on [lo, hi] by golden-section search. The sum of
/// distances to rays is convex along a line, so this finds its minimum.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    // The ends of the bracket are candidates too: the optimum often sits at t = 0.
    [lo, (lo + hi) / 2.0, hi, 0.0]
        .into_iter()
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("non-empty")
}

/// For each ray, the point on it minimizing the summed distance to the other
/// rays; of these, the one with the least sum. Needs at least two rays.
pub fn junction_point(rays: &[Ray], tolerance: f64) -> Option<Vec3> {
    if rays.len() < 2 {
        return None;
    }
    let diameter = rays
        .iter()
        .flat_map(|a| rays.iter().map(move |b| (a.origin - b.origin).norm()))
        .fold(0.0, f64::max);
    let reach = if diameter > 0.0 { 3.0 * diameter } else { 1.0 };
    let sum_to_others = |k: usize, p: &Vec3| -> f64 { rays.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, r)| r.distance(p)).sum() };
    rays.iter()
        .enumerate()
        .map(|(k, ray)| {
            let t = golden_section(|t| sum_to_others(k, &ray.at(t)), 0.0, reach, tolerance);
            let p = ray.at(t);
            (sum_to_others(k, &p), p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
}

/// The outward ray at one end of an axis: along the last `span` segments,
/// or towards `toward` when the axis gives no direction.
pub fn end_ray(axis: &[Vec3], end: End, span: usize, toward: &Vec3) -> Ray {
    let k = end_vertex(axis, end);
    let back = match end {
        End::Start => span.min(axis.len() - 1),
        End::End => (axis.len() - 1).saturating_sub(span),
    };
    let origin = axis[k];
    let mut dir = origin - axis[back];
    if dir.norm() <= f64::EPSILON * origin.norm().max(1.0) {
        dir = toward - origin;
    }
    let direction = if dir.norm() > 0.0 { dir.normalize() } else { Vec3::x() };
    Ray { origin, direction }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub point: Vec3,
    /// (merged part position, end) of every part meeting here.
    pub members: Vec<(usize, End)>,
}

/// A straight link between axis vertices of two merged parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: usize,
    pub a_vertex: usize,
    pub b: usize,
    pub b_vertex: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub junctions: Vec<Junction>,
    pub links: Vec<Link>,
}

/// The single end through which `part` touches every neighbour in its
/// component, if there is one.
fn common_end(adjacency: &PartAdjacency, part: usize, parts: &[Part]) -> Option<End> {
    let mut seen: Option<End> = None;
    for e in adjacency.edges.iter().filter(|e| e.a == part || e.b == part) {
        let ends = if e.a == part { e.a_ends } else { e.b_ends };
        let end = if parts[part].len() == 1 {
            ends.any().then_some(End::Start)?
        } else {
            match (ends.start, ends.end) {
                (true, false) => End::Start,
                (false, true) => End::End,
                _ => return None,
            }
        };
        if seen.is_some_and(|s| s != end) {
            return None;
        }
        seen = Some(end);
    }
    seen
}

/// Candidate attachment vertices of a part for one link: its touching ends,
/// or every axis vertex when it is touched only in the middle.
fn attachment_candidates(part: &Part, ends: Ends) -> Vec<usize> {
    if ends.any() {
        let mut v: Vec<usize> = ends.iter().map(|e| end_vertex(&part.axis, e)).collect();
        v.dedup();
        v
    } else {
        (0..part.axis.len()).collect()
    }
}

fn closest_pair(a: &Part, ca: &[usize], b: &Part, cb: &[usize]) -> (usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for &i in ca {
        for &j in cb {
            let d = (a.axis[i] - b.axis[j]).norm();
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    (best.1, best.2)
}

pub fn resolve_components(adjacency: &PartAdjacency, parts: &[Part], cfg: &LinkConfig) -> Resolution {
    let mut out = Resolution::default();
    for comp in adjacency.components() {
        if comp.len() < 2 {
            continue;
        }
        let ends: Option<Vec<End>> = if comp.len() >= 3 {
            comp.iter().map(|&p| common_end(adjacency, p, parts)).collect()
        } else {
            None
        };
        if let Some(ends) = ends {
            let origins: Vec<Vec3> = comp
                .iter()
                .zip(&ends)
                .map(|(&p, &e)| parts[p].axis[end_vertex(&parts[p].axis, e)])
                .collect();
            let centroid = origins.iter().sum::<Vec3>() / origins.len() as f64;
            let rays: Vec<Ray> = comp
                .iter()
                .zip(&ends)
                .map(|(&p, &e)| end_ray(&parts[p].axis, e, cfg.ray_span, &centroid))
                .collect();
            let point = junction_point(&rays, cfg.junction_tolerance).expect("at least three rays");
            out.junctions.push(Junction {
                point,
                members: comp.iter().copied().zip(ends).collect(),
            });
            continue;
        }
        for e in adjacency.edges.iter().filter(|e| comp.contains(&e.a)) {
            let (pa, pb) = (&parts[e.a], &parts[e.b]);
            let (ia, ib) = closest_pair(pa, &attachment_candidates(pa, e.a_ends), pb, &attachment_candidates(pb, e.b_ends));
            out.links.push(Link {
                a: e.a,
                a_vertex: ia,
                b: e.b,
                b_vertex: ib,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexKind {
    Axis,
    Junction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    /// Between consecutive axis points of one part.
    Axis,
    /// Joining the facing ends of two merged parts.
    Merge,
    /// A straight link or a link to a junction.
    Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonVertex {
    pub position: Vec3,
    pub kind: VertexKind,
    /// Owning part id and axis index for axis vertices.
    pub part: Option<usize>,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
    /// Owning part id of axis edges.
    pub part: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub vertices: Vec<SkeletonVertex>,
    pub edges: Vec<SkeletonEdge>,
}

impl SkeletonGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.vertices.len()];
        for e in &self.edges {
            d[e.a] += 1;
            d[e.b] += 1;
        }
        d
    }

    /// Vertices of degree one.
    pub fn leaves(&self) -> Vec<usize> {
        self.degrees().iter().enumerate().filter(|(_, &d)| d == 1).map(|(i, _)| i).collect()
    }

    pub fn component_count(&self) -> usize {
        let mut uf = DisjointSet::new(self.vertices.len());
        let mut count = self.vertices.len();
        for e in &self.edges {
            if uf.union(e.a, e.b) {
                count -= 1;
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() <= 1
    }

    /// Wavefront OBJ: one `v` line per vertex, one `l` polyline per part
    /// axis, then one two-vertex `l` line per merge or link edge.
    pub fn to_obj(&self) -> String {
        use std::fmt::Write;
        let mut s = String::from("# curve skeleton\n");
        for v in &self.vertices {
            writeln!(s, "v {} {} {}", v.position.x, v.position.y, v.position.z).expect("writing to a string");
        }
        let mut i = 0;
        while i < self.edges.len() {
            let e = &self.edges[i];
            if e.kind == EdgeKind::Axis {
                // Consecutive axis edges of one part form a run a-b, b-c, ...
                let mut poly = vec![e.a + 1, e.b + 1];
                let mut j = i + 1;
                while j < self.edges.len()
                    && self.edges[j].kind == EdgeKind::Axis
                    && self.edges[j].part == e.part
                    && self.edges[j].a + 1 == *poly.last().expect("non-empty")
                {
                    poly.push(self.edges[j].b + 1);
                    j += 1;
                }
                let items: Vec<String> = poly.iter().map(|k| k.to_string()).collect();
                writeln!(s, "l {}", items.join(" ")).expect("writing to a string");
                i = j;
            } else {
                writeln!(s, "l {} {}", e.a + 1, e.b + 1).expect("writing to a string");
                i += 1;
            }
        }
        s
    }
}

/// Builds the skeleton from the merged parts, their chains and the link
/// resolution. Vertices closer than 1e-9 are identified.
pub fn assemble_skeleton(originals: &[Part], chains: &[Chain], resolution: &Resolution) -> SkeletonGraph {
    let mut g = SkeletonGraph::default();
    // Vertex index of axis vertex k of merged part m.
    let mut merged_vertex: Vec<Vec<usize>> = Vec::with_capacity(chains.len());
    for chain in chains {
        let mut ids = Vec::new();
        for (piece, &(k, rev)) in chain.parts.iter().enumerate() {
            let part = &originals[k];
            let n = part.axis.len();
            let base = g.vertices.len();
            for step in 0..n {
                let idx = if rev { n - 1 - step } else { step };
                g.vertices.push(SkeletonVertex {
                    position: part.axis[idx],
                    kind: VertexKind::Axis,
                    part: Some(part.id),
                    index: Some(idx),
                });
            }
            if piece > 0 {
                g.edges.push(SkeletonEdge {
                    a: *ids.last().expect("previous piece"),
                    b: base,
                    kind: EdgeKind::Merge,
                    part: None,
                });
            }
            for step in 1..n {
                g.edges.push(SkeletonEdge {
                    a: base + step - 1,
                    b: base + step,
                    kind: EdgeKind::Axis,
                    part: Some(part.id),
                });
            }
            ids.extend(base..base + n);
        }
        merged_vertex.push(ids);
    }
    for j in &resolution.junctions {
        let v = g.vertices.len();
        g.vertices.push(SkeletonVertex {
            position: j.point,
            kind: VertexKind::Junction,
            part: None,
            index: None,
        });
        for &(m, end) in &j.members {
            let k = match end {
                End::Start => 0,
                End::End => merged_vertex[m].len() - 1,
            };
            g.edges.push(SkeletonEdge {
                a: merged_vertex[m][k],
                b: v,
                kind: EdgeKind::Link,
                part: None,
            });
        }
    }
    for l in &resolution.links {
        g.edges.push(SkeletonEdge {
            a: merged_vertex[l.a][l.a_vertex],
            b: merged_vertex[l.b][l.b_vertex],
            kind: EdgeKind::Link,
            part: None,
        });
    }
    dedup_vertices(g, 1e-9)
}

fn dedup_vertices(g: SkeletonGraph, tol: f64) -> SkeletonGraph {
    let n = g.vertices.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g.vertices[a].position.x.total_cmp(&g.vertices[b].position.x).then(a.cmp(&b)));
    let mut rep: Vec<usize> = (0..n).collect();
    for (k, &i) in order.iter().enumerate() {
        if rep[i] != i {
            continue;
        }
        for &j in &order[k + 1..] {
            if g.vertices[j].position.x - g.vertices[i].position.x > tol {
                break;
            }
            if rep[j] == j && (g.vertices[j].position - g.vertices[i].position).norm() <= tol {
                rep[j] = i.min(j);
            }
        }
    }
    let mut new_index = vec![usize::MAX; n];
    let mut vertices = Vec::new();
    for i in 0..n {
        if rep[i] == i {
            new_index[i] = vertices.len();
            vertices.push(g.vertices[i].clone());
        }
    }
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for e in g.edges {
        let (a, b) = (new_index[rep[e.a]], new_index[rep[e.b]]);
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        edges.push(SkeletonEdge { a, b, ..e });
    }
    SkeletonGraph { vertices, edges }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub merges: Vec<MergeRecord>,
    pub chains: Vec<Chain>,
    /// Potential links among the merged parts.
    pub adjacency: PartAdjacency,
    pub resolution: Resolution,
    pub skeleton: SkeletonGraph,
}

/// The whole linking stage over the selected parts.
pub fn link_parts(cloud: &PointCloud, cnct: &ConnectivityGraph, parts: &[Part], cfg: &LinkConfig) -> Result<LinkResult> {
    let adjacency = potential_links(parts, cnct);
    let (merged, chains, merges) = merge_parts(cloud, parts, &adjacency, cfg);
    let adjacency = potential_links(&merged, cnct);
    let resolution = resolve_components(&adjacency, &merged, cfg);
    let skeleton = assemble_skeleton(parts, &chains, &resolution);
    Ok(LinkResult {
        merges,
        chains,
        adjacency,
        resolution,
        skeleton,
    })
}
