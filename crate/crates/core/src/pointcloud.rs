//! Point cloud normalization, exact nearest-neighbour search and Gaussian
//! query sampling around surface samples.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Point3 = [f64; 3];

/// Floor applied to per-point scales when duplicates make the k-th
/// neighbour distance zero.
pub const MIN_SIGMA: f64 = 1e-6;
const LEAF_SIZE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("k = {k} must be smaller than the cloud size {n}")]
    Parameter { k: usize, n: usize },
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// Points in normalized units together with the map back to the source
/// frame: `raw = point / scale + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub scale: f64,
    pub translation: Point3,
}

impl PointCloud {
    /// Centers on the bounding-box center and scales uniformly so the largest
    /// half-extent becomes `target_half_extent`.
    pub fn normalize(raw: &[Point3], target_half_extent: f64) -> Result<Self, GeometryError> {
        if raw.len() < 2 {
            return Err(GeometryError::Degenerate(format!(
                "need at least 2 points, got {}",
                raw.len()
            )));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::Degenerate("non-finite coordinate".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in raw {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        if half <= 0.0 {
            return Err(GeometryError::Degenerate("all points coincide".into()));
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let scale = target_half_extent / half;
        let points = raw
            .iter()
            .map(|p| {
                [
                    (p[0] - center[0]) * scale,
                    (p[1] - center[1]) * scale,
                    (p[2] - center[2]) * scale,
                ]
            })
            .collect();
        Ok(Self {
            points,
            scale,
            translation: center,
        })
    }

    /// Wraps points that are already in normalized units.
    pub fn from_normalized(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::Degenerate(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        Ok(Self {
            points,
            scale: 1.0,
            translation: [0.0; 3],
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_normalized(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.translation[0]) * self.scale,
            (p[1] - self.translation[1]) * self.scale,
            (p[2] - self.translation[2]) * self.scale,
        ]
    }

    pub fn denormalize(&self, p: &Point3) -> Point3 {
        [
            p[0] / self.scale + self.translation[0],
            p[1] / self.scale + self.translation[1],
            p[2] / self.scale + self.translation[2],
        ]
    }

    pub fn denormalized_points(&self) -> Vec<Point3> {
        self.points.iter().map(|p| self.denormalize(p)).collect()
    }
}

#[derive(Clone, Debug)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Kd-tree over a fixed point set. Results are exact and ties are broken by
/// the lower point index.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

/// Max-heap entry keyed by `(squared distance, index)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KnnIndex {
    pub fn build(points: &[Point3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Self::build(&cloud.points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points as `(distance, index)`, sorted by distance then
    /// index.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<(f64, usize)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut found: Vec<Candidate> = heap.into_vec();
        found.sort();
        found.into_iter().map(|c| (c.d2.sqrt(), c.index)).collect()
    }

    pub fn nearest(&self, query: &Point3) -> Option<(f64, usize)> {
        self.knn(query, 1).into_iter().next()
    }

    fn search(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equal distances may still hide a lower index on the far side.
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Exact nearest cloud point to `q`; ties go to the lowest index.
pub fn nearest_surface_point(index: &KnnIndex, q: &Point3) -> (Point3, usize) {
    let (_, i) = index.nearest(q).expect("index is non-empty");
    (index.points[i], i)
}

/// Distance from each point to its k-th nearest other point.
pub fn per_point_sigma(index: &KnnIndex, k: usize) -> Result<Vec<f64>, GeometryError> {
    let n = index.len();
    if k == 0 || k >= n {
        return Err(GeometryError::Parameter { k, n });
    }
    Ok(index
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn(p, k + 1)
                .into_iter()
                .filter(|&(_, j)| j != i)
                .nth(k - 1)
                .map(|(d, _)| d)
                .unwrap_or(0.0)
        })
        .collect())
}

/// Queries placed around surface samples.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<Point3>,
    pub anchors: Vec<usize>,
    pub sigma_used: Vec<f64>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// `count` queries `P_a + N(0, σ_a² I)` with anchors drawn uniformly, either
/// from the whole cloud or from `subset` when given.
pub fn sample_queries_from(
    points: &[Point3],
    sigmas: &[f64],
    subset: Option<&[usize]>,
    count: usize,
    rng: &mut impl Rng,
) -> QueryBatch {
    let mut batch = QueryBatch {
        queries: Vec::with_capacity(count),
        anchors: Vec::with_capacity(count),
        sigma_used: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let anchor = match subset {
            Some(s) => s[rng.gen_range(0..s.len())],
            None => rng.gen_range(0..points.len()),
        };
        let sigma = sigmas[anchor].max(MIN_SIGMA);
        let p = points[anchor];
        let mut q = [0.0; 3];
        for k in 0..3 {
            let e: f64 = StandardNormal.sample(rng);
            q[k] = p[k] + sigma * e;
        }
        batch.queries.push(q);
        batch.anchors.push(anchor);
        batch.sigma_used.push(sigma);
    }
    batch
}

pub fn sample_queries(cloud: &PointCloud, sigmas: &[f64], count: usize, seed: u64) -> QueryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_queries_from(&cloud.points, sigmas, None, count, &mut rng)
}
