//! Incremental world-frame point map: voxel-downsampled insertion, exact
//! k-nearest-neighbor queries, and local plane fitting.
//!
//! The index is a k-d tree over the stored points, rebuilt when enough fresh
//! points accumulate; fresh points are scanned linearly in the meantime so
//! queries stay exact. Deletion is unused in this pipeline.

use std::collections::HashSet;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type MapPoint = Vector3<f64>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MapConfig {
    pub downsample_voxel: f64,
    pub knn_k: usize,
    pub plane_threshold: f64,
    pub max_neighbor_dist: f64,
    /// Insertion confidence gate: a point enters the map only when its
    /// world-frame 1-sigma placement uncertainty (position std plus rotation
    /// std times the point's lever arm) is below this. Keeps poorly estimated
    /// bodies from seeding ghost surfaces that later fits would lock onto.
    pub insert_sigma_gate: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            downsample_voxel: 0.05,
            // Range noise scales with distance; at a few meters a 5-point
            // fit gives normals too noisy to converge on. 12 neighbors keeps
            // the tilt error well below the joint-bias signal.
            knn_k: 12,
            plane_threshold: 0.05,
            max_neighbor_dist: 1.0,
            insert_sigma_gate: 0.02,
        }
    }
}

/// Local plane fit around a query point. `valid == false` is a value, not an
/// error; the estimator simply skips the corresponding measurement row.
#[derive(Clone, Debug)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub point: Vector3<f64>,
    pub valid: bool,
    pub rms_residual: f64,
}

impl PlaneFit {
    fn invalid() -> Self {
        PlaneFit {
            normal: Vector3::zeros(),
            point: Vector3::zeros(),
            valid: false,
            rms_residual: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub accepted: usize,
    pub rejected: usize,
}

struct KdNode {
    point_idx: u32,
    axis: u8,
    // Preorder layout: left child is the next node; u32::MAX means no child.
    right_child: u32,
    has_left: bool,
}

const NO_CHILD: u32 = u32::MAX;

struct KdTree {
    nodes: Vec<KdNode>,
}

impl KdTree {
    fn build(points: &[Vector3<f64>], count: usize) -> KdTree {
        let mut idx: Vec<u32> = (0..count as u32).collect();
        let mut nodes = Vec::with_capacity(count);
        Self::build_rec(points, &mut idx[..], 0, &mut nodes);
        KdTree { nodes }
    }

    fn build_rec(points: &[Vector3<f64>], idx: &mut [u32], depth: usize, nodes: &mut Vec<KdNode>) {
        if idx.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
        });
        let node_pos = nodes.len();
        nodes.push(KdNode {
            point_idx: idx[mid],
            axis: axis as u8,
            right_child: NO_CHILD,
            has_left: mid > 0,
        });
        let (left, rest) = idx.split_at_mut(mid);
        let right = &mut rest[1..];
        Self::build_rec(points, left, depth + 1, nodes);
        if !right.is_empty() {
            nodes[node_pos].right_child = nodes.len() as u32;
            Self::build_rec(points, right, depth + 1, nodes);
        }
    }

    fn search(
        &self,
        points: &[Vector3<f64>],
        node: usize,
        query: &Vector3<f64>,
        best: &mut Neighbors,
    ) {
        let n = &self.nodes[node];
        let p = &points[n.point_idx as usize];
        best.offer((query - p).norm_squared(), n.point_idx);
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta <= 0.0 {
            (
                if n.has_left { Some(node + 1) } else { None },
                if n.right_child != NO_CHILD {
                    Some(n.right_child as usize)
                } else {
                    None
                },
            )
        } else {
            (
                if n.right_child != NO_CHILD {
                    Some(n.right_child as usize)
                } else {
                    None
                },
                if n.has_left { Some(node + 1) } else { None },
            )
        };
        if let Some(c) = near {
            self.search(points, c, query, best);
        }
        if let Some(c) = far {
            if delta * delta <= best.worst() {
                self.search(points, c, query, best);
            }
        }
    }
}

/// Bounded candidate set, kept sorted ascending by squared distance.
/// Ties break toward the lower point index so results are deterministic.
struct Neighbors {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl Neighbors {
    fn new(k: usize) -> Self {
        Neighbors {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, dist2: f64, idx: u32) {
        let pos = self
            .items
            .partition_point(|&(d, i)| d < dist2 || (d == dist2 && i < idx));
        if pos < self.k {
            self.items.insert(pos, (dist2, idx));
            self.items.truncate(self.k);
        }
    }

    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }
}

pub struct PointMap {
    points: Vec<Vector3<f64>>,
    occupied: HashSet<(i64, i64, i64)>,
    voxel: f64,
    tree: KdTree,
    /// Points at indices >= indexed_len are not in the tree yet.
    indexed_len: usize,
}

impl PointMap {
    pub fn new(downsample_voxel: f64) -> Self {
        assert!(downsample_voxel > 0.0);
        PointMap {
            points: Vec::new(),
            occupied: HashSet::new(),
            voxel: downsample_voxel,
            tree: KdTree { nodes: Vec::new() },
            indexed_len: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    fn voxel_key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.voxel).floor() as i64,
            (p.y / self.voxel).floor() as i64,
            (p.z / self.voxel).floor() as i64,
        )
    }

    /// Insert with voxel downsampling: at most one point per voxel, first
    /// point wins.
    pub fn insert(&mut self, points: &[MapPoint]) -> InsertReport {
        let mut report = InsertReport::default();
        for p in points {
            debug_assert!(p.iter().all(|c| c.is_finite()));
            if self.occupied.insert(self.voxel_key(p)) {
                self.points.push(*p);
                report.accepted += 1;
            } else {
                report.rejected += 1;
            }
        }
        // A bounded fresh buffer keeps queries near O(log n): the linear scan
        // over unindexed points must never dominate the tree descent.
        let fresh = self.points.len() - self.indexed_len;
        if fresh > 64 && (fresh > 512 || fresh * 2 > self.indexed_len) {
            self.tree = KdTree::build(&self.points, self.points.len());
            self.indexed_len = self.points.len();
        }
        report
    }

    /// Exact k nearest neighbors, ascending by distance. Returns fewer than
    /// `k` points only when the map is smaller than `k`.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<MapPoint> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut best = Neighbors::new(k);
        if !self.tree.nodes.is_empty() {
            self.tree.search(&self.points, 0, query, &mut best);
        }
        for (i, p) in self.points[self.indexed_len..].iter().enumerate() {
            best.offer((query - p).norm_squared(), (self.indexed_len + i) as u32);
        }
        best.items
            .iter()
            .map(|&(_, i)| self.points[i as usize])
            .collect()
    }

    /// Total-least-squares plane through the `knn_k` neighborhood of `query`.
    pub fn fit_plane(&self, query: &Vector3<f64>, cfg: &MapConfig) -> PlaneFit {
        let neighbors = self.knn(query, cfg.knn_k);
        if neighbors.len() < cfg.knn_k {
            return PlaneFit::invalid();
        }
        if (query - neighbors[0]).norm() > cfg.max_neighbor_dist {
            return PlaneFit::invalid();
        }
        let centroid = neighbors.iter().sum::<Vector3<f64>>() / neighbors.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in &neighbors {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let min_i = eig.eigenvalues.imin();
        // The neighborhood must span a genuine 2-D patch: with nearly
        // collinear neighbors (typical at the boundary of mapped coverage)
        // the normal direction is arbitrary and poisons the update.
        let mut sorted = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let half_voxel_sq = 0.25 * self.voxel * self.voxel;
        if sorted[1] < half_voxel_sq {
            return PlaneFit::invalid();
        }
        let mut normal: Vector3<f64> = eig.eigenvectors.column(min_i).into_owned();
        normal.normalize_mut();
        // Deterministic sign: largest-magnitude component positive.
        if normal[normal.abs().imax()] < 0.0 {
            normal = -normal;
        }
        let mut sq_sum = 0.0;
        for p in &neighbors {
            let d = normal.dot(&(p - centroid));
            if d.abs() > cfg.plane_threshold {
                return PlaneFit::invalid();
            }
            sq_sum += d * d;
        }
        PlaneFit {
            normal,
            // Anchor at the centroid: it sits on the fitted plane, so signed
            // distances don't inherit the full noise of any single neighbor.
            point: centroid,
            valid: true,
            rms_residual: (sq_sum / neighbors.len() as f64).sqrt(),
        }
    }

    /// Write every stored point as an ASCII "x y z" line with 6 decimals.
    pub fn export<W: Write>(&self, sink: &mut W) -> std::io::Result<()> {
        for p in &self.points {
            writeln!(sink, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.iter()
    }
}
