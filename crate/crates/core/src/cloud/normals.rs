use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen};

use super::{PointCloud, SpatialIndex, Vec3};
use crate::error::{Error, Result};
use crate::graph::EdgeList;

/// Output of [`estimate_normals`]: the cloud with unsigned normals plus the
/// indices whose neighborhood covariance had rank < 2.
#[derive(Debug, Clone)]
pub struct NormalEstimation {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

/// Sorted eigen-decomposition of a symmetric 3x3 matrix, largest eigenvalue
/// first. Returns (eigenvalues, eigenvectors as columns).
pub(crate) fn sorted_eigen(m: Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (values, vectors)
}

/// Population covariance of a set of positions.
pub(crate) fn covariance<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> Matrix3<f64> {
    let mut n = 0usize;
    let mut mean = Vec3::zeros();
    for p in points.clone() {
        mean += p;
        n += 1;
    }
    if n == 0 {
        return Matrix3::zeros();
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / n as f64
}

/// Plane-fit normals: the least-variance direction of each point's `k`
/// nearest neighbors (the point itself included). Signs are arbitrary.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimation> {
    if k < 3 || cloud.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "normal estimation needs N > k >= 3 (N = {}, k = {k})",
            cloud.len()
        )));
    }
    let index = SpatialIndex::new(cloud);
    let mut normals = Vec::with_capacity(cloud.len());
    let mut degenerate = Vec::new();
    for i in 0..cloud.len() {
        let nbrs: Vec<Vec3> = index
            .knn(&cloud.position(i), k)
            .into_iter()
            .map(|(j, _)| cloud.position(j))
            .collect();
        let (values, vectors) = sorted_eigen(covariance(nbrs.iter()));
        if values[1] <= 1e-12 * values[0].max(f64::MIN_POSITIVE) {
            degenerate.push(i);
            normals.push(Vec3::z());
        } else {
            normals.push(vectors[2].normalize());
        }
    }
    Ok(NormalEstimation {
        cloud: cloud.with_normals(normals),
        degenerate,
    })
}

fn tree_adjacency(mst: &EdgeList) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); mst.n_points];
    for e in &mst.edges {
        adj[e.a].push(e.b);
        adj[e.b].push(e.a);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

fn propagate(cloud: &PointCloud, adj: &[Vec<usize>]) -> (Vec<Vec3>, usize) {
    let n = cloud.len();
    let mut normals: Vec<Vec3> = (0..n).map(|i| cloud.normal(i)).collect();
    let mut seen = vec![false; n];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for root in 0..n {
        if seen[root] {
            continue;
        }
        components += 1;
        seen[root] = true;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    if normals[v].dot(&normals[u]) < 0.0 {
                        normals[v] = -normals[v];
                    }
                    queue.push_back(v);
                }
            }
        }
    }
    (normals, components)
}

/// Makes normal signs consistent by breadth-first propagation over the
/// spanning tree from the lowest-index point.
pub fn orient_normals(cloud: &PointCloud, mst: &EdgeList) -> Result<PointCloud> {
    check_normals(cloud, mst)?;
    let (normals, components) = propagate(cloud, &tree_adjacency(mst));
    if components != 1 {
        return Err(Error::Disconnected { components });
    }
    Ok(cloud.with_normals(normals))
}

/// Like [`orient_normals`] but accepts a spanning forest, orienting each
/// tree from its lowest-index point. Returns the number of trees.
pub fn orient_normals_forest(cloud: &PointCloud, mst: &EdgeList) -> Result<(PointCloud, usize)> {
    check_normals(cloud, mst)?;
    let (normals, components) = propagate(cloud, &tree_adjacency(mst));
    Ok((cloud.with_normals(normals), components))
}

fn check_normals(cloud: &PointCloud, mst: &EdgeList) -> Result<()> {
    if !cloud.has_normals() {
        return Err(Error::InvalidArgument("orientation needs normals".into()));
    }
    if mst.n_points != cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "tree covers {} points, cloud has {}",
            mst.n_points,
            cloud.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_mst, Edge};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let len = v.norm();
                if len > 0.1 && len <= 1.0 {
                    break v / len;
                }
            })
            .collect()
    }

    #[test]
    fn plane_normals_are_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), 0.0))
            .collect();
        let est = estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 10).unwrap();
        assert!(est.degenerate.is_empty());
        for p in est.cloud.points() {
            assert!((p.normal.z.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = sphere(2000, 2);
        let est = estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 15).unwrap();
        let limit = 5f64.to_radians().cos();
        for (p, q) in est.cloud.points().iter().zip(&pts) {
            assert!(p.normal.dot(q).abs() >= limit);
        }
    }

    #[test]
    fn collinear_neighborhood_is_flagged() {
        let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let est = estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 3).unwrap();
        assert_eq!(est.degenerate, vec![0, 1, 2, 3]);
        for p in est.cloud.points() {
            assert!((p.normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn estimation_rejects_small_clouds() {
        let pts: Vec<Vec3> = (0..3).map(|i| Vec3::new(i as f64, 1.0, 0.0)).collect();
        assert!(estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 3).is_err());
    }

    #[test]
    fn normals_follow_rigid_motion() {
        let pts = sphere(500, 3);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let moved: Vec<Vec3> = pts.iter().map(|p| rot * p + Vec3::new(1.0, 2.0, 3.0)).collect();
        let a = estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 12).unwrap();
        let b = estimate_normals(&PointCloud::from_positions(&moved).unwrap(), 12).unwrap();
        for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
            let r = rot * p.normal;
            let err = (r - q.normal).norm().min((r + q.normal).norm());
            assert!(err < 1e-5, "err {err}");
        }
    }

    #[test]
    fn one_edge_flip() {
        let cloud = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x()], &[Vec3::z(), -Vec3::z()]).unwrap();
        let mst = EdgeList {
            edges: vec![Edge { a: 0, b: 1, length: 1.0 }],
            n_points: 2,
            components: 1,
        };
        let out = orient_normals(&cloud, &mst).unwrap();
        assert_eq!(out.normal(1), Vec3::z());
    }

    #[test]
    fn random_plane_signs_become_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), 0.0))
            .collect();
        let nrm: Vec<Vec3> = (0..400).map(|_| if rng.gen_bool(0.5) { Vec3::z() } else { -Vec3::z() }).collect();
        let cloud = PointCloud::from_oriented(&pts, &nrm).unwrap();
        let mst = build_mst(&cloud, 10).unwrap();
        let out = orient_normals(&cloud, &mst).unwrap();
        let first = out.normal(0);
        assert!(out.points().iter().all(|p| p.normal == first));
        let again = orient_normals(&out, &mst).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn sphere_orientation_is_globally_consistent() {
        let pts = sphere(2000, 5);
        let est = estimate_normals(&PointCloud::from_positions(&pts).unwrap(), 15).unwrap();
        let mst = build_mst(&est.cloud, 20).unwrap();
        let out = orient_normals(&est.cloud, &mst).unwrap();
        let outward = out.points().iter().zip(&pts).filter(|(p, q)| p.normal.dot(q) > 0.0).count();
        let agree = outward.max(pts.len() - outward);
        assert!(agree as f64 >= 0.95 * pts.len() as f64, "{agree}");
    }

    #[test]
    fn disconnected_tree_is_an_error() {
        let cloud = PointCloud::from_oriented(&[Vec3::zeros(), Vec3::x(), Vec3::y()], &[Vec3::z(); 3]).unwrap();
        let mst = EdgeList {
            edges: vec![Edge { a: 0, b: 1, length: 1.0 }],
            n_points: 3,
            components: 2,
        };
        assert!(matches!(orient_normals(&cloud, &mst), Err(Error::Disconnected { components: 2 })));
        assert_eq!(orient_normals_forest(&cloud, &mst).unwrap().1, 2);
    }
}
