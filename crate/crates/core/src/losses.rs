//! Pull loss, topological losses on the persistence diagram, and the sparse
//! gradient routing from diagram pairs back onto grid values.

use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::model::{ModelError, ParamNodes, SdfModel};
use crate::persistence::{
    eval_grid, persistence0_tagged, sample_grid, Domain, Filtration, GridBinding, PersistenceDiagram,
    PersistenceError,
};
use crate::pointcloud::{nearest_surface_point, KnnIndex, Point3};

/// Gradient norms below this drop the query from the batch.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("all {0} queries had a vanishing spatial gradient")]
    DegenerateBatch(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("pulled has {pulled} rows, targets {targets}")]
    TargetCount { pulled: usize, targets: usize },
    #[error("diagram is empty")]
    EmptyDiagram,
    #[error("diagram ({diagram_dims:?}, {diagram_tag:?}) does not match grid ({grid_dims:?}, {grid_tag:?})")]
    Consistency {
        diagram_dims: [usize; 3],
        diagram_tag: Filtration,
        grid_dims: [usize; 3],
        grid_tag: Filtration,
    },
    #[error("negative loss weight")]
    Weights,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionRule {
    TopK(usize),
    Threshold(f64),
}

impl Default for PartitionRule {
    fn default() -> Self {
        PartitionRule::TopK(1)
    }
}

/// Indices into a diagram's pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePartition {
    pub significant: Vec<usize>,
    pub noise: Vec<usize>,
    pub rule: PartitionRule,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub curriculum_start_iter: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 5.0,
            curriculum_start_iter: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1 >= 0.0 && self.lambda2 >= 0.0 {
            Ok(())
        } else {
            Err(LossError::Weights)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0
    }
}

/// Which pairs contribute their birth values to `L_N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BirthTermSet {
    #[default]
    Noise,
    Significant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EssentialMode {
    /// The surviving component dies at the grid maximum.
    #[default]
    Capped,
    /// The surviving component is left out of the losses.
    Excluded,
}

/// Per-term switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermToggles {
    pub significant: bool,
    pub noise_birth: bool,
    pub noise_persistence: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            significant: true,
            noise_birth: true,
            noise_persistence: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopoConfig {
    pub resolution: usize,
    pub domain: Domain,
    pub filtration: Filtration,
    pub rule: PartitionRule,
    pub essential: EssentialMode,
    pub birth_terms: BirthTermSet,
    pub terms: TermToggles,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            domain: Domain::default(),
            filtration: Filtration::Absolute,
            rule: PartitionRule::default(),
            essential: EssentialMode::default(),
            birth_terms: BirthTermSet::default(),
            terms: TermToggles::default(),
        }
    }
}

/// Pulled query locations on the tape.
#[derive(Clone, Debug)]
pub struct PulledBatch {
    /// `w×3` node of `q − f(q)·∇f/‖∇f‖` for the kept queries.
    pub pulled: NodeId,
    /// Indices of the kept queries in the input batch.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// `c' = q − f(q)·∇ₓf(q)/‖∇ₓf(q)‖`, differentiable in the parameters
/// through both `f` and the normalized gradient.
pub fn pulled_location(
    model: &SdfModel,
    params: &ParamNodes,
    queries: &[Point3],
    tape: &mut Tape,
) -> Result<PulledBatch, LossError> {
    if queries.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let q_all = tape.leaf(Tensor::from_points(queries));
    let trace = model.forward_on_tape(tape, params, q_all)?;
    let grad_all = model.input_gradient_on_tape(tape, params, &trace)?;

    let kept: Vec<usize> = tape
        .value(grad_all)
        .data()
        .chunks_exact(3)
        .enumerate()
        .filter(|(_, g)| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() >= MIN_GRADIENT_NORM)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(LossError::DegenerateBatch(queries.len()));
    }
    let dropped = queries.len() - kept.len();
    let (q, f, grad) = if dropped == 0 {
        (q_all, trace.output, grad_all)
    } else {
        (
            tape.gather_rows(q_all, kept.clone())?,
            tape.gather_rows(trace.output, kept.clone())?,
            tape.gather_rows(grad_all, kept.clone())?,
        )
    };
    let norm = tape.row_norm(grad)?;
    let direction = tape.div_rows(grad, norm)?;
    let step = tape.scale_rows(direction, f)?;
    let pulled = tape.sub(q, step)?;
    Ok(PulledBatch { pulled, kept, dropped })
}

/// `(1/w) Σ ‖c'_j − c_j‖²`
pub fn pull_loss(pulled: NodeId, targets: &[Point3], tape: &mut Tape) -> Result<NodeId, LossError> {
    let rows = tape.value(pulled).rows();
    if rows == 0 || targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if rows != targets.len() {
        return Err(LossError::TargetCount {
            pulled: rows,
            targets: targets.len(),
        });
    }
    let t = tape.leaf(Tensor::from_points(targets));
    let diff = tape.sub(pulled, t)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, 1.0 / rows as f64)?)
}

/// Splits the pairs into significant and noise features.
pub fn partition_features(diagram: &PersistenceDiagram, rule: PartitionRule) -> Result<FeaturePartition, LossError> {
    if diagram.is_empty() {
        return Err(LossError::EmptyDiagram);
    }
    let pairs = &diagram.pairs;
    let mut significant = Vec::new();
    let mut noise = Vec::new();
    match rule {
        PartitionRule::TopK(k) => {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.sort_by(|&a, &b| {
                pairs[b]
                    .persistence()
                    .total_cmp(&pairs[a].persistence())
                    .then(pairs[a].birth_vertex.cmp(&pairs[b].birth_vertex))
            });
            let k = k.min(order.len());
            significant.extend_from_slice(&order[..k]);
            noise.extend_from_slice(&order[k..]);
            significant.sort_unstable();
            noise.sort_unstable();
        }
        PartitionRule::Threshold(tau) => {
            for (i, p) in pairs.iter().enumerate() {
                if p.persistence() >= tau {
                    significant.push(i);
                } else {
                    noise.push(i);
                }
            }
        }
    }
    Ok(FeaturePartition { significant, noise, rule })
}

/// `L_S = −Σ_{i∈S} (d_i − b_i)`
pub fn loss_significant(diagram: &PersistenceDiagram, partition: &FeaturePartition) -> f64 {
    -partition
        .significant
        .iter()
        .map(|&i| diagram.pairs[i].persistence())
        .sum::<f64>()
}

/// `L_N = Σ_{i∈N} b_i + Σ_{j∈N} (d_j − b_j)`
pub fn loss_noise(diagram: &PersistenceDiagram, partition: &FeaturePartition) -> f64 {
    let births: f64 = partition.noise.iter().map(|&i| diagram.pairs[i].birth).sum();
    let persistence: f64 = partition.noise.iter().map(|&i| diagram.pairs[i].persistence()).sum();
    births + persistence
}

/// Topological loss terms under a configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TopoLosses {
    pub significant: f64,
    pub noise_birth: f64,
    pub noise_persistence: f64,
}

impl TopoLosses {
    pub fn noise(&self) -> f64 {
        self.noise_birth + self.noise_persistence
    }

    /// `λ₁ L_S + λ₂ L_N`
    pub fn weighted(&self, weights: &LossWeights) -> f64 {
        weights.lambda1 * self.significant + weights.lambda2 * self.noise()
    }
}

fn birth_set<'a>(partition: &'a FeaturePartition, cfg: &TopoConfig) -> &'a [usize] {
    match cfg.birth_terms {
        BirthTermSet::Noise => &partition.noise,
        BirthTermSet::Significant => &partition.significant,
    }
}

pub fn topo_losses(diagram: &PersistenceDiagram, partition: &FeaturePartition, cfg: &TopoConfig) -> TopoLosses {
    let mut out = TopoLosses::default();
    if cfg.terms.significant {
        out.significant = loss_significant(diagram, partition);
    }
    if cfg.terms.noise_birth {
        out.noise_birth = birth_set(partition, cfg).iter().map(|&i| diagram.pairs[i].birth).sum();
    }
    if cfg.terms.noise_persistence {
        out.noise_persistence = partition.noise.iter().map(|&i| diagram.pairs[i].persistence()).sum();
    }
    out
}

/// Gradient of `λ₁ L_S + λ₂ L_N` with respect to the filtration values,
/// as sparse `(vertex, value)` entries. Repeated vertices are kept as
/// separate entries; the injection sums them.
pub fn topo_grid_gradient(
    diagram: &PersistenceDiagram,
    partition: &FeaturePartition,
    weights: &LossWeights,
    cfg: &TopoConfig,
) -> Vec<(usize, f64)> {
    let (l1, l2) = (weights.lambda1, weights.lambda2);
    let mut grad = Vec::new();
    if cfg.terms.significant {
        for &i in &partition.significant {
            let p = &diagram.pairs[i];
            grad.push((p.birth_vertex, l1));
            grad.push((p.death_vertex, -l1));
        }
    }
    if cfg.terms.noise_birth {
        for &i in birth_set(partition, cfg) {
            grad.push((diagram.pairs[i].birth_vertex, l2));
        }
    }
    if cfg.terms.noise_persistence {
        for &i in &partition.noise {
            let p = &diagram.pairs[i];
            grad.push((p.birth_vertex, -l2));
            grad.push((p.death_vertex, l2));
        }
    }
    grad
}

/// Applies the chain rule through `|f|` and queues the result on the raw
/// grid node, so the next backward reaches the parameters.
pub fn topo_backward(
    diagram: &PersistenceDiagram,
    partition: &FeaturePartition,
    weights: &LossWeights,
    cfg: &TopoConfig,
    binding: &GridBinding,
    tape: &mut Tape,
) -> Result<(), LossError> {
    if diagram.dims != binding.dims || diagram.filtration != binding.filtration {
        return Err(LossError::Consistency {
            diagram_dims: diagram.dims,
            diagram_tag: diagram.filtration,
            grid_dims: binding.dims,
            grid_tag: binding.filtration,
        });
    }
    let sparse: Vec<(usize, f64)> = topo_grid_gradient(diagram, partition, weights, cfg)
        .into_iter()
        .map(|(v, g)| (v, g * binding.signs[v]))
        .collect();
    tape.inject_external_gradient(binding.raw_node, &sparse)?;
    Ok(())
}

/// Diagram and partition with the essential mode applied.
pub fn analyze_grid(
    grid: &crate::persistence::ScalarGrid,
    cfg: &TopoConfig,
) -> Result<(PersistenceDiagram, FeaturePartition), LossError> {
    let mut diagram = persistence0_tagged(grid, cfg.filtration);
    if cfg.essential == EssentialMode::Excluded {
        diagram = diagram.without_essential();
    }
    let partition = partition_features(&diagram, cfg.rule)?;
    Ok((diagram, partition))
}

/// One evaluation of `L = L_g + λ₁ L_S + λ₂ L_N`.
#[derive(Clone, Debug)]
pub struct UnifiedLoss {
    /// Scalar `L_g` node; seed backward here. Topological gradients are
    /// already injected when active.
    pub pull_node: NodeId,
    pub pull: f64,
    pub topo: Option<TopoLosses>,
    pub total: f64,
    pub diagram: Option<PersistenceDiagram>,
    pub partition: Option<FeaturePartition>,
    pub dropped: usize,
}

/// Builds the loss for one iteration on `tape`. Pull targets are the nearest
/// cloud points to each query. The topological part is active from
/// `weights.curriculum_start_iter` on; with both weights zero the diagram
/// is still reported but nothing is injected.
#[allow(clippy::too_many_arguments)]
pub fn unified_loss(
    model: &SdfModel,
    params: &ParamNodes,
    index: &KnnIndex,
    queries: &[Point3],
    topo_cfg: &TopoConfig,
    weights: &LossWeights,
    iter: usize,
    tape: &mut Tape,
) -> Result<UnifiedLoss, LossError> {
    weights.validate()?;
    let batch = pulled_location(model, params, queries, tape)?;
    let targets: Vec<Point3> = batch
        .kept
        .iter()
        .map(|&i| nearest_surface_point(index, &queries[i]).0)
        .collect();
    let pull_node = pull_loss(batch.pulled, &targets, tape)?;
    let pull = tape.value(pull_node).item();

    let mut out = UnifiedLoss {
        pull_node,
        pull,
        topo: None,
        total: pull,
        diagram: None,
        partition: None,
        dropped: batch.dropped,
    };
    if iter < weights.curriculum_start_iter {
        return Ok(out);
    }
    let (diagram, partition, losses) = if weights.is_zero() {
        let grid = sample_grid(model, topo_cfg.resolution, topo_cfg.domain, topo_cfg.filtration)?;
        let (d, p) = analyze_grid(&grid, topo_cfg)?;
        let l = topo_losses(&d, &p, topo_cfg);
        (d, p, l)
    } else {
        let (grid, binding) = eval_grid(
            model,
            params,
            topo_cfg.resolution,
            topo_cfg.domain,
            tape,
            topo_cfg.filtration,
        )?;
        let (d, p) = analyze_grid(&grid, topo_cfg)?;
        topo_backward(&d, &p, weights, topo_cfg, &binding, tape)?;
        let l = topo_losses(&d, &p, topo_cfg);
        (d, p, l)
    };
    out.total = pull + losses.weighted(weights);
    out.topo = Some(losses);
    out.diagram = Some(diagram);
    out.partition = Some(partition);
    Ok(out)
}
