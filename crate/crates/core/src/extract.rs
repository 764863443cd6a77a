//! Iso-surface extraction, mesh connectivity, surface sampling and the
//! point-set metrics used for evaluation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{loss_significant, partition_features, PartitionRule};
use crate::mc_table::TRIANGLE_TABLE;
use crate::model::SdfModel;
use crate::persistence::{grid_spacing, persistence0, sample_grid, Domain, Filtration};
use crate::pointcloud::{dist, KnnIndex, Point3};
use crate::synthetic::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("marching cubes needs resolution >= 8, got {0}")]
    Resolution(usize),
    #[error("field never crosses iso level {iso} (min {min}, max {max})")]
    EmptyMesh { iso: f64, min: f64, max: f64 },
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("point set is empty")]
    EmptySet,
}

/// Anything that can be sampled on a batch of points.
pub trait ScalarField {
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64>;
}

impl ScalarField for SdfModel {
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        self.evaluate(points)
    }
}

impl ScalarField for Shape {
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        points.iter().map(|p| self.sdf(p)).collect()
    }
}

/// Adapts a closure into a [`ScalarField`].
pub struct FnField<F>(pub F);

impl<F: Fn(&Point3) -> f64> ScalarField for FnField<F> {
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        points.iter().map(&self.0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    /// Component id per triangle, filled by [`mesh_components`].
    pub component_labels: Vec<usize>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            component_labels: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (cx[0] * cx[0] + cx[1] * cx[1] + cx[2] * cx[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

// Corner offsets and edge endpoints in the table's convention.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangulates `{field = iso}` on a `resolution³` vertex lattice over
/// `domain`. The field is sampled one z-slice at a time, and vertices on
/// shared cell edges are merged.
pub fn marching_cubes(
    field: &dyn ScalarField,
    resolution: usize,
    domain: Domain,
    iso: f64,
) -> Result<TriangleMesh, ExtractError> {
    if resolution < 8 {
        return Err(ExtractError::Resolution(resolution));
    }
    let n = resolution;
    let dims = [n; 3];
    let h = grid_spacing(dims, &domain);
    let pos = |c: [usize; 3]| -> Point3 {
        [
            domain.min[0] + c[0] as f64 * h[0],
            domain.min[1] + c[1] as f64 * h[1],
            domain.min[2] + c[2] as f64 * h[2],
        ]
    };
    let slice = |z: usize| -> Vec<f64> {
        let pts: Vec<Point3> = (0..n * n).map(|i| pos([i % n, i / n, z])).collect();
        field.eval_batch(&pts)
    };

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<usize, usize> = HashMap::new();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut lower = slice(0);
    for z in 0..n - 1 {
        let upper = slice(z + 1);
        for v in lower.iter().chain(if z == n - 2 { upper.iter() } else { [].iter() }) {
            min = min.min(*v);
            max = max.max(*v);
        }
        let value = |c: [usize; 3]| -> f64 {
            let s = if c[2] == z { &lower } else { &upper };
            s[c[0] + n * c[1]]
        };
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let mut corner_c = [[0usize; 3]; 8];
                let mut corner_v = [0.0; 8];
                let mut case = 0usize;
                for (i, off) in CORNERS.iter().enumerate() {
                    let c = [x + off[0], y + off[1], z + off[2]];
                    corner_c[i] = c;
                    corner_v[i] = value(c);
                    if corner_v[i] < iso {
                        case |= 1 << i;
                    }
                }
                let row = &TRIANGLE_TABLE[case];
                if row[0] < 0 {
                    continue;
                }
                let mut vertex_of = |e: usize| -> usize {
                    let [a, b] = EDGES[e];
                    let (ca, cb) = (corner_c[a], corner_c[b]);
                    let axis = (0..3).find(|&k| ca[k] != cb[k]).expect("edge spans one axis");
                    let base = if ca[axis] < cb[axis] { ca } else { cb };
                    let key = 3 * (base[0] + n * (base[1] + n * base[2])) + axis;
                    *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (corner_v[a], corner_v[b]);
                        let t = (iso - va) / (vb - va);
                        let (pa, pb) = (pos(ca), pos(cb));
                        mesh.vertices.push([
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ]);
                        mesh.vertices.len() - 1
                    })
                };
                for tri in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                    let idx = [
                        vertex_of(tri[0] as usize),
                        vertex_of(tri[1] as usize),
                        vertex_of(tri[2] as usize),
                    ];
                    if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
                        mesh.triangles.push(idx);
                    }
                }
            }
        }
        lower = upper;
    }
    if mesh.triangles.is_empty() {
        return Err(ExtractError::EmptyMesh { iso, min, max });
    }
    Ok(mesh)
}

/// Connected components of triangles sharing a vertex. Labels are assigned
/// in order of first appearance; sizes count triangles.
pub fn mesh_components(mesh: &mut TriangleMesh) -> (usize, Vec<usize>) {
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for t in &mesh.triangles {
        for k in 1..3 {
            let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label_of_root: HashMap<usize, usize> = HashMap::new();
    let mut sizes = Vec::new();
    mesh.component_labels = mesh
        .triangles
        .iter()
        .map(|t| {
            let root = find(&mut parent, t[0]);
            let next = label_of_root.len();
            let label = *label_of_root.entry(root).or_insert(next);
            if label == sizes.len() {
                sizes.push(0);
            }
            sizes[label] += 1;
            label
        })
        .collect();
    (sizes.len(), sizes)
}

/// `n` area-weighted uniform samples on the mesh.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Point3>, ExtractError> {
    if mesh.is_empty() {
        return Err(ExtractError::EmptySet);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(ExtractError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.gen_range(0.0..total);
            let t = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
            let s = rng.gen_range(0.0f64..1.0).sqrt();
            let u = rng.gen_range(0.0..1.0);
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - u), s * u);
            [
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ]
        })
        .collect())
}

fn nearest_distances(p: &[Point3], q: &[Point3]) -> Result<Vec<f64>, ExtractError> {
    if p.is_empty() || q.is_empty() {
        return Err(ExtractError::EmptySet);
    }
    let index = KnnIndex::build(q);
    Ok(p.iter()
        .map(|x| {
            let (_, j) = index.nearest(x).expect("non-empty index");
            dist(x, &q[j])
        })
        .collect())
}

/// `(1/|P|) Σ_i min_j ‖P_i − Q_j‖`
pub fn chamfer_one_sided(p: &[Point3], q: &[Point3]) -> Result<f64, ExtractError> {
    let d = nearest_distances(p, q)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub fn chamfer_two_sided(p: &[Point3], q: &[Point3]) -> Result<f64, ExtractError> {
    Ok(0.5 * (chamfer_one_sided(p, q)? + chamfer_one_sided(q, p)?))
}

/// Directed `max_i min_j ‖P_i − Q_j‖`, or the max of both directions.
pub fn hausdorff(p: &[Point3], q: &[Point3], two_sided: bool) -> Result<f64, ExtractError> {
    let directed = |a: &[Point3], b: &[Point3]| -> Result<f64, ExtractError> {
        Ok(nearest_distances(a, b)?.into_iter().fold(0.0, f64::max))
    };
    let forward = directed(p, q)?;
    if two_sided {
        Ok(forward.max(directed(q, p)?))
    } else {
        Ok(forward)
    }
}

/// `|L_S|` of the model's `|f|` grid under the top-`k` partition with the
/// surviving component capped at the grid maximum. Unweighted.
pub fn significant_feature_loss(model: &SdfModel, grid_resolution: usize, k: usize) -> f64 {
    let grid = sample_grid(model, grid_resolution, Domain::default(), Filtration::Absolute)
        .expect("resolution checked by caller and model output finite");
    let diagram = persistence0(&grid);
    let partition = partition_features(&diagram, PartitionRule::TopK(k)).expect("grid has at least one vertex");
    loss_significant(&diagram, &partition).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd_one_sided_pred_to_gt: f64,
    pub cd_one_sided_gt_to_pred: f64,
    pub cd_two_sided: f64,
    pub hd_one_sided_pred_to_gt: f64,
    pub hd_one_sided_gt_to_pred: f64,
    pub hd_two_sided: f64,
    /// Absolute value of `L_S`, unweighted, top-1 partition, essential bar
    /// capped at the grid maximum. `None` without a model.
    pub significant_feature_loss: Option<f64>,
    pub significant_feature_grid: usize,
    pub component_count: usize,
    pub samples_pred: usize,
    pub samples_gt: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsConfig {
    pub samples: usize,
    pub seed: u64,
    pub significant_grid: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 30_000,
            seed: 0,
            significant_grid: 16,
        }
    }
}

/// Compares a mesh against ground-truth points. The mesh is sampled with
/// `cfg.samples` points; the ground truth is used as given.
pub fn evaluate(
    mesh: &TriangleMesh,
    gt: &[Point3],
    model: Option<&SdfModel>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, ExtractError> {
    let pred = sample_surface(mesh, cfg.samples, cfg.seed)?;
    let pred_to_gt = nearest_distances(&pred, gt)?;
    let gt_to_pred = nearest_distances(gt, &pred)?;
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let maxd = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    let mut m = mesh.clone();
    let (components, _) = mesh_components(&mut m);
    let (cd_pg, cd_gp) = (mean(&pred_to_gt), mean(&gt_to_pred));
    let (hd_pg, hd_gp) = (maxd(&pred_to_gt), maxd(&gt_to_pred));
    Ok(MetricsReport {
        cd_one_sided_pred_to_gt: cd_pg,
        cd_one_sided_gt_to_pred: cd_gp,
        cd_two_sided: 0.5 * (cd_pg + cd_gp),
        hd_one_sided_pred_to_gt: hd_pg,
        hd_one_sided_gt_to_pred: hd_gp,
        hd_two_sided: hd_pg.max(hd_gp),
        significant_feature_loss: model.map(|m| significant_feature_loss(m, cfg.significant_grid, 1)),
        significant_feature_grid: cfg.significant_grid,
        component_count: components,
        samples_pred: pred.len(),
        samples_gt: gt.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashSet, VecDeque};

    fn brute_one_sided(p: &[Point3], q: &[Point3]) -> Vec<f64> {
        p.iter()
            .map(|a| q.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .collect()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn metric_examples() {
        let p = [[0.0, 0.0, 0.0]];
        let q = [[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        assert_eq!(chamfer_one_sided(&p, &q).unwrap(), 1.0);
        assert_eq!(chamfer_one_sided(&q, &p).unwrap(), 3.0);
        assert_eq!(chamfer_two_sided(&p, &q).unwrap(), 2.0);
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[0.0, 0.0, 0.0]];
        assert_eq!(hausdorff(&a, &b, false).unwrap(), 1.0);
        assert_eq!(hausdorff(&b, &a, false).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b, true).unwrap(), 1.0);
        assert!(chamfer_one_sided(&[], &b).is_err());
        assert!(hausdorff(&a, &[], true).is_err());
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let (np, nq) = (rng.gen_range(1..200), rng.gen_range(1..200));
            let p = random_set(&mut rng, np);
            let q = random_set(&mut rng, nq);
            let d = brute_one_sided(&p, &q);
            assert_eq!(chamfer_one_sided(&p, &q).unwrap(), d.iter().sum::<f64>() / np as f64);
            assert_eq!(hausdorff(&p, &q, false).unwrap(), d.iter().copied().fold(0.0, f64::max));
            assert_eq!(chamfer_one_sided(&p, &p).unwrap(), 0.0);
            assert_eq!(hausdorff(&p, &p, true).unwrap(), 0.0);
        }
    }

    fn tetra(offset: f64) -> (Vec<Point3>, Vec<[usize; 3]>) {
        (
            vec![
                [offset, 0.0, 0.0],
                [offset + 1.0, 0.0, 0.0],
                [offset, 1.0, 0.0],
                [offset, 0.0, 1.0],
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
    }

    #[test]
    fn components_of_tetrahedra() {
        let (v, t) = tetra(0.0);
        let mut one = TriangleMesh::new(v.clone(), t.clone());
        assert_eq!(mesh_components(&mut one), (1, vec![4]));
        let (v2, t2) = tetra(3.0);
        let mut verts = v;
        verts.extend(v2);
        let mut tris = t;
        tris.extend(t2.iter().map(|t| t.map(|i| i + 4)));
        let mut two = TriangleMesh::new(verts, tris);
        assert_eq!(mesh_components(&mut two), (2, vec![4, 4]));
        assert_eq!(two.component_labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    fn bfs_components(mesh: &TriangleMesh) -> usize {
        let mut by_vertex: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, t) in mesh.triangles.iter().enumerate() {
            for v in t {
                by_vertex.entry(*v).or_default().push(i);
            }
        }
        let mut seen = HashSet::new();
        let mut count = 0;
        for start in 0..mesh.triangles.len() {
            if !seen.insert(start) {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            while let Some(t) = queue.pop_front() {
                for v in mesh.triangles[t] {
                    for &u in &by_vertex[&v] {
                        if seen.insert(u) {
                            queue.push_back(u);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn components_match_bfs_on_random_soup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let nv = rng.gen_range(3..60);
            let nt = rng.gen_range(1..40);
            let tris: Vec<[usize; 3]> = (0..nt)
                .map(|_| {
                    let a = rng.gen_range(0..nv);
                    let b = (a + rng.gen_range(1..nv)) % nv;
                    let mut c = rng.gen_range(0..nv);
                    while c == a || c == b {
                        c = rng.gen_range(0..nv);
                    }
                    [a, b, c]
                })
                .collect();
            let mut mesh = TriangleMesh::new(vec![[0.0; 3]; nv], tris);
            let expected = bfs_components(&mesh);
            let (count, sizes) = mesh_components(&mut mesh);
            assert_eq!(count, expected);
            assert_eq!(sizes.iter().sum::<usize>(), nt);
        }
    }

    #[test]
    fn sphere_mesh_is_closed_and_has_correct_area() {
        let r = 0.5;
        let mesh = marching_cubes(&Shape::Sphere { radius: r }, 64, Domain::default(), 0.0).unwrap();
        let area = mesh.area();
        let exact = 4.0 * std::f64::consts::PI * r * r;
        assert!((area - exact).abs() / exact < 0.03, "area {area} vs {exact}");
        // Every directed edge appears once and its reverse once: closed and
        // consistently oriented.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &c) in &directed {
            assert_eq!(c, 1);
            assert_eq!(directed.get(&(b, a)), Some(&1));
        }
        let mut m = mesh.clone();
        assert_eq!(mesh_components(&mut m).0, 1);
    }

    #[test]
    fn every_case_closes_inside_a_box() {
        // A random field on a small grid, extracted with a margin of positive
        // values, must give a closed surface for any corner configuration.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = 9;
            let vals: Vec<f64> = (0..n * n * n)
                .map(|i| {
                    let c = [i % n, (i / n) % n, i / (n * n)];
                    if c.iter().any(|&k| k == 0 || k == n - 1) {
                        1.0
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect();
            let field = FnField(move |p: &Point3| {
                let idx = |x: f64| ((x + 1.0) / 2.0 * (n - 1) as f64).round() as usize;
                vals[idx(p[0]) + n * (idx(p[1]) + n * idx(p[2]))]
            });
            let mesh = marching_cubes(&field, n, Domain::default(), 0.0).unwrap();
            let mut undirected: HashMap<(usize, usize), usize> = HashMap::new();
            for t in &mesh.triangles {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    *undirected.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            assert!(undirected.values().all(|&c| c == 2));
        }
    }

    #[test]
    fn plane_is_reproduced_exactly() {
        let mesh = marching_cubes(&FnField(|p: &Point3| p[0] - 0.1234), 16, Domain::default(), 0.0).unwrap();
        for v in &mesh.vertices {
            assert!((v[0] - 0.1234).abs() < 1e-12);
        }
        let err = marching_cubes(&FnField(|p: &Point3| p[0]), 16, Domain::default(), -5.0).unwrap_err();
        assert!(matches!(err, ExtractError::EmptyMesh { .. }));
        assert!(marching_cubes(&FnField(|p: &Point3| p[0]), 4, Domain::default(), 0.0).is_err());
    }

    #[test]
    fn surface_sampling() {
        let tri = TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
        for p in sample_surface(&tri, 1000, 1).unwrap() {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0);
        }
        assert_eq!(sample_surface(&tri, 10, 4).unwrap(), sample_surface(&tri, 10, 4).unwrap());

        // Areas 9:1.
        let two = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0], [10.0, 1.0, 0.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let n = 10_000;
        let big = sample_surface(&two, n, 2).unwrap().iter().filter(|p| p[0] < 5.0).count() as f64;
        let sd = (n as f64 * 0.9 * 0.1).sqrt();
        assert!((big - 9000.0).abs() < 3.0 * sd, "{big}");

        let flat = TriangleMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]);
        assert_eq!(sample_surface(&flat, 1, 0), Err(ExtractError::ZeroArea));
    }

    #[test]
    fn constant_field_has_zero_significant_loss() {
        let arch = crate::model::Architecture::new(2, 4, 1).unwrap();
        let mut flat = vec![0.0; arch.parameter_count()];
        *flat.last_mut().unwrap() = 0.3;
        let model = SdfModel::from_flat(arch, &flat).unwrap();
        assert_eq!(significant_feature_loss(&model, 8, 1), 0.0);
    }

    #[test]
    fn report_fields_are_consistent() {
        let mesh = marching_cubes(&Shape::Sphere { radius: 0.5 }, 32, Domain::default(), 0.0).unwrap();
        let gt = crate::synthetic::generate(&crate::synthetic::ShapeSpec::new(Shape::Sphere { radius: 0.5 }, 2000, 0)).unwrap();
        let r = evaluate(&mesh, &gt, None, &MetricsConfig { samples: 3000, ..MetricsConfig::default() }).unwrap();
        assert!((r.cd_two_sided - 0.5 * (r.cd_one_sided_pred_to_gt + r.cd_one_sided_gt_to_pred)).abs() < 1e-12);
        assert_eq!(r.hd_two_sided, r.hd_one_sided_pred_to_gt.max(r.hd_one_sided_gt_to_pred));
        assert_eq!(r.component_count, 1);
        assert!(r.cd_two_sided < 0.02);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }
}
