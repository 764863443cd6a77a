//! 0-dimensional sublevel persistence of a scalar field sampled on a regular
//! grid.
//!
//! Vertices carry the field values and are joined to their six axis
//! neighbours; an edge enters the filtration at the larger of its two
//! endpoint values. Only vertices and edges affect connected components, so
//! squares and cubes are never materialized.
//!
//! The sweep visits vertices in `(value, linear index)` order and merges
//! each with its already-visited neighbours through union-find. When two
//! existing components meet, the younger one (larger root key) dies at the
//! current vertex. Every pair records the vertex indices of its birth and
//! death so loss gradients can be routed back onto individual grid values.

use thiserror::Error;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::model::{ModelError, ParamNodes, SdfModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersistenceError {
    #[error("grid needs at least 2 samples per axis, got {0:?}")]
    Resolution([usize; 3]),
    #[error("grid has {got} values, dims {dims:?} need {expected}")]
    Length {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("non-finite grid value at vertex {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Domain {
    fn default() -> Self {
        Self::cube(1.0)
    }
}

impl Domain {
    /// `[-half, half]³`
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }
}

/// Which function of the SDF drives the filtration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filtration {
    Raw,
    Absolute,
}

impl Filtration {
    pub fn as_str(&self) -> &'static str {
        match self {
            Filtration::Raw => "raw",
            Filtration::Absolute => "absolute",
        }
    }
}

/// Samples on a regular lattice, linearized as `x + nx·(y + ny·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    dims: [usize; 3],
    domain: Domain,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: [usize; 3], domain: Domain, values: Vec<f64>) -> Result<Self, PersistenceError> {
        if dims.iter().any(|&d| d < 1) || dims.iter().all(|&d| d < 2) {
            return Err(PersistenceError::Resolution(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(PersistenceError::Length {
                dims,
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PersistenceError::NonFinite(i));
        }
        Ok(Self { dims, domain, values })
    }

    /// `R×R×R` over `domain`.
    pub fn cubic(resolution: usize, domain: Domain, values: Vec<f64>) -> Result<Self, PersistenceError> {
        if resolution < 2 {
            return Err(PersistenceError::Resolution([resolution; 3]));
        }
        Self::new([resolution; 3], domain, values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        grid_spacing(self.dims, &self.domain)
    }

    pub fn position(&self, index: usize) -> [f64; 3] {
        vertex_position(self.dims, &self.domain, self.coords(index))
    }

    /// Calls `f` for each 6-neighbour of `index`.
    pub fn for_each_neighbor(&self, index: usize, mut f: impl FnMut(usize)) {
        let [x, y, z] = self.coords(index);
        let [nx, ny, nz] = self.dims;
        let stride_y = nx;
        let stride_z = nx * ny;
        if x > 0 {
            f(index - 1);
        }
        if x + 1 < nx {
            f(index + 1);
        }
        if y > 0 {
            f(index - stride_y);
        }
        if y + 1 < ny {
            f(index + stride_y);
        }
        if z > 0 {
            f(index - stride_z);
        }
        if z + 1 < nz {
            f(index + stride_z);
        }
    }
}

pub(crate) fn grid_spacing(dims: [usize; 3], domain: &Domain) -> [f64; 3] {
    let mut s = [0.0; 3];
    for k in 0..3 {
        s[k] = if dims[k] > 1 {
            (domain.max[k] - domain.min[k]) / (dims[k] - 1) as f64
        } else {
            0.0
        };
    }
    s
}

pub(crate) fn vertex_position(dims: [usize; 3], domain: &Domain, c: [usize; 3]) -> [f64; 3] {
    let s = grid_spacing(dims, domain);
    [
        domain.min[0] + c[0] as f64 * s[0],
        domain.min[1] + c[1] as f64 * s[1],
        domain.min[2] + c[2] as f64 * s[2],
    ]
}

/// All vertex positions of a grid in linear order.
pub fn grid_positions(dims: [usize; 3], domain: &Domain) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(vertex_position(dims, domain, [x, y, z]));
            }
        }
    }
    out
}

/// Where the grid values live on a tape, for routing diagram gradients.
#[derive(Clone, Debug)]
pub struct GridBinding {
    /// Raw network output at each vertex, shape `[V]`.
    pub raw_node: NodeId,
    /// `sign(f)` per vertex with `sign(0) = 0`; all ones for the raw filtration.
    pub signs: Vec<f64>,
    pub dims: [usize; 3],
    pub filtration: Filtration,
}

/// Evaluates the network at every grid vertex on `tape` and returns the
/// filtration values (`|f|` or `f`).
pub fn eval_grid(
    model: &SdfModel,
    params: &ParamNodes,
    resolution: usize,
    domain: Domain,
    tape: &mut Tape,
    filtration: Filtration,
) -> Result<(ScalarGrid, GridBinding), PersistenceError> {
    if resolution < 2 {
        return Err(PersistenceError::Resolution([resolution; 3]));
    }
    let dims = [resolution; 3];
    let positions = grid_positions(dims, &domain);
    let input = tape.leaf(Tensor::from_points(&positions));
    let trace = model.forward_on_tape(tape, params, input)?;
    let raw = tape.value(trace.output).data().to_vec();
    let (values, signs) = match filtration {
        Filtration::Absolute => (
            raw.iter().map(|v| v.abs()).collect(),
            raw.iter()
                .map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                .collect(),
        ),
        Filtration::Raw => (raw, vec![1.0; positions.len()]),
    };
    let grid = ScalarGrid::new(dims, domain, values)?;
    Ok((
        grid,
        GridBinding {
            raw_node: trace.output,
            signs,
            dims,
            filtration,
        },
    ))
}

/// Tape-free variant for evaluation.
pub fn sample_grid(
    model: &SdfModel,
    resolution: usize,
    domain: Domain,
    filtration: Filtration,
) -> Result<ScalarGrid, PersistenceError> {
    if resolution < 2 {
        return Err(PersistenceError::Resolution([resolution; 3]));
    }
    let dims = [resolution; 3];
    let mut values = model.evaluate(&grid_positions(dims, &domain));
    if filtration == Filtration::Absolute {
        values.iter_mut().for_each(|v| *v = v.abs());
    }
    ScalarGrid::new(dims, domain, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    pub birth_vertex: usize,
    pub death_vertex: usize,
    /// The surviving component, its death capped at the grid maximum.
    pub essential: bool,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersistenceDiagram {
    pub pairs: Vec<PersistencePair>,
    pub dims: [usize; 3],
    pub filtration: Filtration,
}

impl PersistenceDiagram {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn essential(&self) -> Option<&PersistencePair> {
        self.pairs.iter().find(|p| p.essential)
    }

    /// Copy without the essential pair.
    pub fn without_essential(&self) -> Self {
        Self {
            pairs: self.pairs.iter().filter(|p| !p.essential).copied().collect(),
            dims: self.dims,
            filtration: self.filtration,
        }
    }

    /// Number of bars alive at `t`, i.e. `birth ≤ t < death`, with the
    /// essential bar counted for every `t ≥ birth`.
    pub fn betti0_at(&self, t: f64) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.birth <= t && (p.essential || t < p.death))
            .count()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut node: usize) -> usize {
        let mut root = node;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[node] != root {
            let next = self.parent[node];
            self.parent[node] = root;
            node = next;
        }
        root
    }
}

/// 0-dimensional persistence diagram of the grid's sublevel filtration.
///
/// Roots are always the oldest vertex of their component, so the elder rule
/// reduces to comparing root ranks. Merges in which the vertex being added
/// is itself the younger root pair a vertex with its own incoming edge at
/// the same value; they carry no feature and are not emitted.
pub fn persistence0(grid: &ScalarGrid) -> PersistenceDiagram {
    let values = grid.values();
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![usize::MAX; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }

    let mut uf = UnionFind::new(n);
    let mut pairs = Vec::new();
    let mut neighbors = Vec::with_capacity(6);
    for &v in &order {
        neighbors.clear();
        grid.for_each_neighbor(v, |u| {
            if rank[u] < rank[v] {
                neighbors.push(u);
            }
        });
        for &u in &neighbors {
            let ru = uf.find(u);
            let rv = uf.find(v);
            if ru == rv {
                continue;
            }
            let (elder, younger) = if rank[ru] < rank[rv] { (ru, rv) } else { (rv, ru) };
            uf.parent[younger] = elder;
            if younger != v {
                pairs.push(PersistencePair {
                    birth: values[younger],
                    death: values[v],
                    birth_vertex: younger,
                    death_vertex: v,
                    essential: false,
                });
            }
        }
    }
    if let (Some(&first), Some(&last)) = (order.first(), order.last()) {
        pairs.push(PersistencePair {
            birth: values[first],
            death: values[last],
            birth_vertex: first,
            death_vertex: last,
            essential: true,
        });
    }
    PersistenceDiagram {
        pairs,
        dims: grid.dims(),
        filtration: Filtration::Absolute,
    }
}

/// Same as [`persistence0`] but tagged with the filtration that produced the
/// grid.
pub fn persistence0_tagged(grid: &ScalarGrid, filtration: Filtration) -> PersistenceDiagram {
    let mut d = persistence0(grid);
    d.filtration = filtration;
    d
}

/// Σ (death − birth) over the finite pairs.
pub fn diagram_total_persistence(diagram: &PersistenceDiagram) -> f64 {
    diagram
        .pairs
        .iter()
        .filter(|p| !p.essential)
        .map(|p| p.persistence())
        .sum()
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force flood fill, independent of the sweep.
    use super::ScalarGrid;

    /// Number of 6-connected components of `{v : values[v] ≤ t}`.
    pub fn components_at(grid: &ScalarGrid, t: f64) -> usize {
        let n = grid.len();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] || grid.values()[start] > t {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(v) = stack.pop() {
                grid.for_each_neighbor(v, |u| {
                    if !seen[u] && grid.values()[u] <= t {
                        seen[u] = true;
                        stack.push(u);
                    }
                });
            }
        }
        count
    }

    /// Σ deaths − Σ births over the finite bars, for distinct grid values.
    /// Births are local minima; deaths at `t` follow from the change in
    /// component count.
    pub fn finite_persistence_sum(grid: &ScalarGrid) -> f64 {
        let mut ts: Vec<f64> = grid.values().to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let mut prev = 0usize;
        let mut births = 0.0;
        let mut deaths = 0.0;
        for &t in &ts {
            let c = components_at(grid, t);
            let minima_at_t = (0..grid.len())
                .filter(|&v| grid.values()[v] == t)
                .filter(|&v| {
                    let mut is_min = true;
                    grid.for_each_neighbor(v, |u| {
                        if grid.values()[u] < t {
                            is_min = false;
                        }
                    });
                    is_min
                })
                .count();
            let born = minima_at_t;
            let died = prev + born - c;
            births += born as f64 * t;
            deaths += died as f64 * t;
            prev = c;
        }
        // The essential bar is born at the global minimum.
        deaths - (births - ts[0])
    }
}
