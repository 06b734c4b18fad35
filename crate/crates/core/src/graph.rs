//! Spanning trees, locally adaptive distance thresholds, point and cluster
//! connectivity, and k-means seeding of candidate-part locations.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, SpatialIndex, Vec3};
use crate::error::{Error, Result};

/// Multiplier applied to the largest incident tree edge.
pub const DEFAULT_THRESHOLD_FACTOR: f64 = 1.5;
/// Neighbors per point in the graph the spanning tree is computed over.
pub const DEFAULT_MST_KNN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// A spanning tree (or forest, when `components > 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub edges: Vec<Edge>,
    pub n_points: usize,
    pub components: usize,
}

impl EdgeList {
    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal's algorithm over the k-nearest-neighbor graph.
pub fn build_mst(cloud: &PointCloud, knn: usize) -> Result<EdgeList> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("spanning tree needs at least 2 points, got {n}")));
    }
    let index = SpatialIndex::new(cloud);
    let k = knn.min(n - 1).max(1);
    let mut candidates: Vec<Edge> = Vec::with_capacity(n * k);
    for i in 0..n {
        for (j, d) in index.knn(&cloud.position(i), k + 1) {
            if j != i {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                candidates.push(Edge { a, b, length: d });
            }
        }
    }
    candidates.sort_by(|x, y| x.length.total_cmp(&y.length).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    candidates.dedup_by(|x, y| x.a == y.a && x.b == y.b);

    let mut sets = DisjointSet::new(n);
    let mut edges = Vec::with_capacity(n - 1);
    for e in candidates {
        if sets.union(e.a, e.b) {
            edges.push(e);
            if edges.len() == n - 1 {
                break;
            }
        }
    }
    let components = n - edges.len();
    if components > 1 {
        log::warn!("k-nearest-neighbor graph is disconnected: {components} components");
    }
    Ok(EdgeList {
        edges,
        n_points: n,
        components,
    })
}

/// Per-point distance scales derived from the spanning tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThresholds {
    pub d_max: Vec<f64>,
    pub delta_cnct: Vec<f64>,
}

impl AdaptiveThresholds {
    pub fn max_threshold(&self) -> f64 {
        self.delta_cnct.iter().copied().fold(0.0, f64::max)
    }
}

pub fn compute_thresholds(mst: &EdgeList, n_points: usize) -> Result<AdaptiveThresholds> {
    compute_thresholds_with(mst, n_points, DEFAULT_THRESHOLD_FACTOR)
}

pub fn compute_thresholds_with(mst: &EdgeList, n_points: usize, factor: f64) -> Result<AdaptiveThresholds> {
    let mut d_max = vec![f64::NAN; n_points];
    for e in &mst.edges {
        if e.a >= n_points || e.b >= n_points {
            return Err(Error::InvalidArgument(format!("edge ({}, {}) out of range", e.a, e.b)));
        }
        for v in [e.a, e.b] {
            d_max[v] = if d_max[v].is_nan() { e.length } else { d_max[v].max(e.length) };
        }
    }
    if let Some(i) = d_max.iter().position(|d| d.is_nan()) {
        return Err(Error::Degenerate(format!("point {i} has no spanning-tree edge")));
    }
    let delta_cnct = d_max.iter().map(|d| factor * d).collect();
    Ok(AdaptiveThresholds { d_max, delta_cnct })
}

/// Undirected point adjacency; neighbor lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGraph {
    adjacency: Vec<Vec<usize>>,
}

impl ConnectivityGraph {
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Self { adjacency }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Connects i and j iff dist(i, j) <= max(delta_cnct[i], delta_cnct[j]).
pub fn build_connectivity(cloud: &PointCloud, thr: &AdaptiveThresholds) -> ConnectivityGraph {
    let index = SpatialIndex::new(cloud);
    let reach = thr.max_threshold();
    let mut adjacency = vec![Vec::new(); cloud.len()];
    for (i, list) in adjacency.iter_mut().enumerate() {
        let p = cloud.position(i);
        for j in index.within_radius(&p, reach) {
            if j != i && (cloud.position(j) - p).norm() <= thr.delta_cnct[i].max(thr.delta_cnct[j]) {
                list.push(j);
            }
        }
    }
    ConnectivityGraph { adjacency }
}

/// Connected components of a point graph as a label per point.
pub fn component_labels(graph: &ConnectivityGraph) -> (Vec<usize>, usize) {
    let n = graph.len();
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for root in 0..n {
        if labels[root] != usize::MAX {
            continue;
        }
        labels[root] = count;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            for &v in graph.neighbors(u) {
                if labels[v] == usize::MAX {
                    labels[v] = count;
                    queue.push_back(v);
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec3>,
    pub seeds: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    /// Sorted (a, b) pairs with a < b.
    pub cluster_adjacency: BTreeSet<(usize, usize)>,
}

impl Clustering {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Convergence when no centroid moves more than this fraction of the
    /// bounding-box diagonal.
    pub shift_tolerance: f64,
    pub max_reseeds: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            shift_tolerance: 1e-6,
            max_reseeds: 5,
        }
    }
}

pub fn cluster_cloud(cloud: &PointCloud, m: usize, rng_seed: u64, cnct: &ConnectivityGraph) -> Result<Clustering> {
    cluster_cloud_with(cloud, m, rng_seed, cnct, &KMeansConfig::default())
}

/// k-means (k-means++ initialization, Lloyd iterations) over positions.
pub fn cluster_cloud_with(cloud: &PointCloud, m: usize, rng_seed: u64, cnct: &ConnectivityGraph, cfg: &KMeansConfig) -> Result<Clustering> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("cluster count {m} not in [1, {n}]")));
    }
    let pos: Vec<Vec3> = cloud.positions().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centers = kmeans_plus_plus(&pos, m, &mut rng);
    let tol = cfg.shift_tolerance * cloud.bbox_diagonal();
    let mut labels = vec![0usize; n];
    let mut reseeds = 0;

    let mut iteration = 0;
    loop {
        assign(&pos, &centers, &mut labels);
        let mut sums = vec![Vec3::zeros(); m];
        let mut counts = vec![0usize; m];
        for (p, &l) in pos.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            if reseeds == cfg.max_reseeds {
                return Err(Error::Degenerate(format!("cluster {empty} stayed empty after {reseeds} re-seeds")));
            }
            reseeds += 1;
            // Re-seed from the point farthest from its own centroid.
            let far = (0..n)
                .max_by(|&a, &b| {
                    (pos[a] - centers[labels[a]])
                        .norm_squared()
                        .total_cmp(&(pos[b] - centers[labels[b]]).norm_squared())
                        .then(b.cmp(&a))
                })
                .unwrap();
            centers[empty] = pos[far];
            continue;
        }
        let mut shift: f64 = 0.0;
        for c in 0..m {
            let next = sums[c] / counts[c] as f64;
            shift = shift.max((next - centers[c]).norm());
            centers[c] = next;
        }
        iteration += 1;
        if shift <= tol || iteration >= cfg.max_iterations {
            break;
        }
    }
    assign(&pos, &centers, &mut labels);

    let mut members = vec![Vec::new(); m];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("cluster {empty} is empty after convergence")));
    }
    let seeds = members
        .iter()
        .zip(&centers)
        .map(|(ms, c)| {
            *ms.iter()
                .min_by(|&&a, &&b| (pos[a] - c).norm_squared().total_cmp(&(pos[b] - c).norm_squared()).then(a.cmp(&b)))
                .unwrap()
        })
        .collect();
    let mut cluster_adjacency = BTreeSet::new();
    for i in 0..n {
        for &j in cnct.neighbors(i) {
            let (a, b) = (labels[i], labels[j]);
            if a != b {
                cluster_adjacency.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(Clustering {
        labels,
        centers,
        seeds,
        members,
        cluster_adjacency,
    })
}

fn kmeans_plus_plus(pos: &[Vec3], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let n = pos.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centers = vec![pos[first]];
    let mut d2: Vec<f64> = pos.iter().map(|p| (p - pos[first]).norm_squared()).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a center; take unchosen ones in order.
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        centers.push(pos[pick]);
        for (i, p) in pos.iter().enumerate() {
            d2[i] = d2[i].min((p - pos[pick]).norm_squared());
        }
    }
    centers
}

fn assign(pos: &[Vec3], centers: &[Vec3], labels: &mut [usize]) {
    let index = SpatialIndex::from_positions(centers.to_vec());
    for (p, l) in pos.iter().zip(labels.iter_mut()) {
        *l = index.knn(p, 1)[0].0;
    }
}

/// Lower median of the members' largest incident tree-edge length.
pub fn cluster_plane_threshold(clustering: &Clustering, thr: &AdaptiveThresholds, cluster_id: usize) -> Result<f64> {
    let members = clustering
        .members
        .get(cluster_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no cluster {cluster_id}")))?;
    lower_median(members.iter().map(|&i| thr.d_max[i]).collect()).ok_or_else(|| Error::EmptyInput(format!("cluster {cluster_id} is empty")))
}

pub(crate) fn lower_median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[(values.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud_of(pts: &[Vec3]) -> PointCloud {
        PointCloud::from_positions(pts).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..3.0)))
            .collect();
        cloud_of(&pts)
    }

    /// Prim's algorithm on the complete graph.
    fn complete_mst_weight(cloud: &PointCloud) -> f64 {
        let n = cloud.len();
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        best[0] = 0.0;
        let mut total = 0.0;
        for _ in 0..n {
            let u = (0..n)
                .filter(|&i| !in_tree[i])
                .min_by(|&a, &b| best[a].total_cmp(&best[b]))
                .unwrap();
            in_tree[u] = true;
            total += best[u];
            for v in 0..n {
                if !in_tree[v] {
                    best[v] = best[v].min((cloud.position(u) - cloud.position(v)).norm());
                }
            }
        }
        total
    }

    #[test]
    fn chain_mst() {
        let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mst = build_mst(&cloud_of(&pts), 100).unwrap();
        let mut pairs: Vec<(usize, usize)> = mst.edges.iter().map(|e| (e.a, e.b)).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(mst.total_length(), 3.0);
        assert_eq!(mst.components, 1);
    }

    #[test]
    fn mst_matches_complete_graph_oracle() {
        let cloud = random_cloud(50, 11);
        let mst = build_mst(&cloud, 49).unwrap();
        assert!((mst.total_length() - complete_mst_weight(&cloud)).abs() < 1e-9);
    }

    #[test]
    fn separated_blobs_give_a_forest() {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push(Vec3::new(i as f64 * 0.1, 0.0, 0.0));
            pts.push(Vec3::new(100.0 + i as f64 * 0.1, 0.0, 0.0));
        }
        let mst = build_mst(&cloud_of(&pts), 3).unwrap();
        assert_eq!(mst.components, 2);
        assert_eq!(mst.edges.len(), 8);
    }

    #[test]
    fn mst_needs_two_points() {
        assert!(build_mst(&cloud_of(&[Vec3::zeros()]), 5).is_err());
    }

    #[test]
    fn thresholds_on_chains() {
        let mst = EdgeList {
            edges: vec![Edge { a: 0, b: 1, length: 1.0 }, Edge { a: 1, b: 2, length: 1.0 }],
            n_points: 3,
            components: 1,
        };
        let thr = compute_thresholds(&mst, 3).unwrap();
        assert_eq!(thr.d_max, vec![1.0, 1.0, 1.0]);
        assert_eq!(thr.delta_cnct, vec![1.5, 1.5, 1.5]);

        let mst = EdgeList {
            edges: vec![Edge { a: 0, b: 1, length: 1.0 }, Edge { a: 1, b: 2, length: 3.0 }],
            n_points: 3,
            components: 1,
        };
        assert_eq!(compute_thresholds(&mst, 3).unwrap().d_max, vec![1.0, 3.0, 3.0]);
    }

    #[test]
    fn isolated_point_is_an_error() {
        let mst = EdgeList {
            edges: vec![Edge { a: 0, b: 1, length: 1.0 }],
            n_points: 3,
            components: 2,
        };
        assert!(compute_thresholds(&mst, 3).is_err());
    }

    #[test]
    fn threshold_ratio_is_exact() {
        let cloud = random_cloud(100, 3);
        let thr = compute_thresholds(&build_mst(&cloud, 100).unwrap(), 100).unwrap();
        for (d, t) in thr.d_max.iter().zip(&thr.delta_cnct) {
            assert_eq!(*t, 1.5 * d);
        }
    }

    fn two_point_graph(dist: f64, t: (f64, f64)) -> ConnectivityGraph {
        let cloud = cloud_of(&[Vec3::zeros(), Vec3::new(dist, 0.0, 0.0)]);
        let thr = AdaptiveThresholds {
            d_max: vec![t.0 / 1.5, t.1 / 1.5],
            delta_cnct: vec![t.0, t.1],
        };
        build_connectivity(&cloud, &thr)
    }

    #[test]
    fn connectivity_uses_the_larger_threshold() {
        assert!(two_point_graph(1.0, (1.5, 0.1)).contains(0, 1));
        assert!(two_point_graph(1.0, (1.5, 0.1)).contains(1, 0));
        assert!(!two_point_graph(2.0, (1.5, 1.5)).contains(0, 1));
    }

    #[test]
    fn connectivity_matches_brute_force() {
        let cloud = random_cloud(200, 5);
        let thr = compute_thresholds(&build_mst(&cloud, 100).unwrap(), 200).unwrap();
        let g = build_connectivity(&cloud, &thr);
        for i in 0..200 {
            for j in 0..200 {
                let d = (cloud.position(i) - cloud.position(j)).norm();
                let want = i != j && d <= thr.delta_cnct[i].max(thr.delta_cnct[j]);
                assert_eq!(g.contains(i, j), want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn connectivity_contains_every_tree_edge() {
        for seed in 0..20 {
            let cloud = random_cloud(120, 100 + seed);
            let mst = build_mst(&cloud, 30).unwrap();
            let g = build_connectivity(&cloud, &compute_thresholds(&mst, cloud.len()).unwrap());
            for e in &mst.edges {
                assert!(g.contains(e.a, e.b));
            }
        }
    }

    fn blobs() -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        for c in [Vec3::zeros(), Vec3::new(50.0, 0.0, 0.0)] {
            for _ in 0..40 {
                pts.push(c + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            }
        }
        cloud_of(&pts)
    }

    fn graph_of(cloud: &PointCloud) -> ConnectivityGraph {
        let mst = build_mst(cloud, 100).unwrap();
        build_connectivity(cloud, &compute_thresholds(&mst, cloud.len()).unwrap())
    }

    #[test]
    fn separable_blobs_cluster_cleanly() {
        let cloud = blobs();
        let g = graph_of(&cloud);
        let c = cluster_cloud(&cloud, 2, 7, &g).unwrap();
        let first = c.labels[0];
        assert!(c.labels[..40].iter().all(|&l| l == first));
        assert!(c.labels[40..].iter().all(|&l| l != first));
        for k in 0..2 {
            let center = c.centers[k];
            let best = c.members[k]
                .iter()
                .copied()
                .min_by(|&a, &b| (cloud.position(a) - center).norm().total_cmp(&(cloud.position(b) - center).norm()))
                .unwrap();
            assert_eq!(c.seeds[k], best);
            assert_eq!(c.labels[c.seeds[k]], k);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let cloud = random_cloud(30, 8);
        let g = graph_of(&cloud);
        let c = cluster_cloud(&cloud, 30, 1, &g).unwrap();
        for (k, ms) in c.members.iter().enumerate() {
            assert_eq!(ms.len(), 1);
            assert_eq!(c.seeds[k], ms[0]);
        }
    }

    #[test]
    fn connected_cloud_has_adjacent_clusters() {
        let cloud = random_cloud(300, 12);
        let g = graph_of(&cloud);
        let c = cluster_cloud(&cloud, 2, 3, &g).unwrap();
        assert!(c.cluster_adjacency.contains(&(0, 1)));
        let witness = (0..300).any(|i| g.neighbors(i).iter().any(|&j| c.labels[i] != c.labels[j]));
        assert!(witness);
    }

    #[test]
    fn clustering_is_a_deterministic_partition() {
        let cloud = random_cloud(400, 21);
        let g = graph_of(&cloud);
        let a = cluster_cloud(&cloud, 12, 5, &g).unwrap();
        let b = cluster_cloud(&cloud, 12, 5, &g).unwrap();
        assert_eq!(a, b);
        let mut seen = vec![0; 400];
        for ms in &a.members {
            for &i in ms {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn plane_threshold_uses_lower_median() {
        let clustering = Clustering {
            labels: vec![0; 4],
            centers: vec![Vec3::zeros(), Vec3::zeros(), Vec3::zeros()],
            seeds: vec![0, 0, 0],
            members: vec![vec![0, 1, 2], vec![0, 1, 2, 3], vec![1, 3]],
            cluster_adjacency: BTreeSet::new(),
        };
        let thr = AdaptiveThresholds {
            d_max: vec![3.0, 1.0, 2.0, 4.0],
            delta_cnct: vec![4.5, 1.5, 3.0, 6.0],
        };
        assert_eq!(cluster_plane_threshold(&clustering, &thr, 0).unwrap(), 2.0);
        assert_eq!(cluster_plane_threshold(&clustering, &thr, 1).unwrap(), 2.0);
        let uniform = AdaptiveThresholds {
            d_max: vec![0.7; 4],
            delta_cnct: vec![1.05; 4],
        };
        assert_eq!(cluster_plane_threshold(&clustering, &uniform, 2).unwrap(), 0.7);
    }
}
