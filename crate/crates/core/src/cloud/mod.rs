//! Oriented point clouds: representation, file I/O, neighbor queries and
//! normal estimation with consistent orientation.

mod io;
mod kdtree;
pub(crate) mod normals;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_cloud, parse_cloud, write_cloud, CloudFormat};
pub use kdtree::SpatialIndex;
pub use normals::{estimate_normals, orient_normals, orient_normals_forest, NormalEstimation};

pub type Vec3 = Vector3<f64>;

/// Tolerance on normal length for clouds that carry normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

impl OrientedPoint {
    pub fn new(position: Vec3, normal: Vec3) -> Self {
        Self { position, normal }
    }

    /// A point without normal information. The normal slot holds +z.
    pub fn bare(position: Vec3) -> Self {
        Self {
            position,
            normal: Vec3::z(),
        }
    }
}

/// An ordered set of points. Indices are stable for a whole pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<OrientedPoint>,
    has_normals: bool,
}

impl PointCloud {
    pub fn new(points: Vec<OrientedPoint>, has_normals: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point cloud has no points".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("point {i} has a non-finite position")));
            }
            if has_normals && (p.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has a non-unit normal (length {})",
                    p.normal.norm()
                )));
            }
        }
        Ok(Self { points, has_normals })
    }

    pub fn from_positions(positions: &[Vec3]) -> Result<Self> {
        Self::new(positions.iter().copied().map(OrientedPoint::bare).collect(), false)
    }

    /// Builds an oriented cloud, normalizing each normal.
    pub fn from_oriented(positions: &[Vec3], normals: &[Vec3]) -> Result<Self> {
        if positions.len() != normals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions but {} normals",
                positions.len(),
                normals.len()
            )));
        }
        let mut points = Vec::with_capacity(positions.len());
        for (i, (p, n)) in positions.iter().zip(normals).enumerate() {
            let len = n.norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::InvalidArgument(format!("point {i} has a zero normal")));
            }
            points.push(OrientedPoint::new(*p, n / len));
        }
        Self::new(points, true)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.has_normals
    }

    pub fn points(&self) -> &[OrientedPoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &OrientedPoint {
        &self.points[i]
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.points[i].position
    }

    pub fn normal(&self, i: usize) -> Vec3 {
        self.points[i].normal
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(|p| p.position)
    }

    /// Copies out the points at `indices`, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Vec<OrientedPoint> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    /// Axis-aligned bounding box (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(&p.position);
            hi = hi.sup(&p.position);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub(crate) fn with_normals(&self, normals: Vec<Vec3>) -> Self {
        let points = self
            .points
            .iter()
            .zip(normals)
            .map(|(p, n)| OrientedPoint::new(p.position, n))
            .collect();
        Self { points, has_normals: true }
    }
}

/// Mean of the positions at `indices`.
pub fn centroid(cloud: &PointCloud, indices: &[usize]) -> Vec3 {
    let mut c = Vec3::zeros();
    for &i in indices {
        c += cloud.position(i);
    }
    c / indices.len().max(1) as f64
}
