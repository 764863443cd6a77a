//! Optimization loop: query resampling, unified loss, and parameter updates
//! with either Adam under a cosine schedule or Robbins–Monro SGD.

use std::f64::consts::PI;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::losses::{unified_loss, LossError, LossWeights, TopoConfig};
use crate::model::{Architecture, ModelError, SdfModel};
use crate::persistence::PersistenceDiagram;
use crate::pointcloud::{per_point_sigma, sample_queries_from, GeometryError, KnnIndex, PointCloud, Point3};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("gradient has {got} entries, optimizer expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite loss at iteration {iter}: pull {pull}, significant {significant}, noise {noise}")]
    NonFinite {
        iter: usize,
        pull: f64,
        significant: f64,
        noise: f64,
    },
    #[error("history has {len} records, need at least {needed}")]
    ShortHistory { len: usize, needed: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam,
    /// `α_t = base_lr / (1 + t)` with optional Gaussian gradient noise.
    SgdRobbinsMonro { noise_std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Radius of the sphere the network starts from; `None` uses standard init.
    pub init_radius: Option<f64>,
    pub iterations: usize,
    pub batch_points: usize,
    pub batch_queries: usize,
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub topo: TopoConfig,
    pub weights: LossWeights,
    /// Neighbour rank whose distance sets each point's query spread.
    pub sigma_k: usize,
    pub seed: u64,
    /// Keep every n-th topological diagram; the last one is always kept.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let iterations = 40_000;
        Self {
            architecture: Architecture::default(),
            init_radius: Some(0.5),
            iterations,
            batch_points: 20_000,
            batch_queries: 4096,
            optimizer: Optimizer::Adam,
            base_lr: 0.001,
            warmup_iters: 1000,
            topo: TopoConfig::default(),
            weights: LossWeights {
                curriculum_start_iter: iterations - 500,
                ..LossWeights::default()
            },
            sigma_k: 50,
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    /// Reduced profile: 4×64 net, 5000 iterations, 8³ topology grid over the
    /// last 500 iterations, 2000 points.
    pub fn desk() -> Self {
        let iterations = 5000;
        Self {
            architecture: Architecture::desk(),
            iterations,
            batch_points: 2000,
            batch_queries: 512,
            topo: TopoConfig {
                resolution: 8,
                ..TopoConfig::default()
            },
            weights: LossWeights {
                curriculum_start_iter: iterations - 500,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return fail("iterations must be positive");
        }
        if self.optimizer == Optimizer::Adam && self.iterations <= self.warmup_iters {
            return fail("iterations must exceed warmup_iters");
        }
        if self.batch_queries == 0 || self.batch_points == 0 {
            return fail("batch sizes must be positive");
        }
        if self.weights.curriculum_start_iter > self.iterations {
            return fail("curriculum_start_iter exceeds iterations");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be finite and non-negative");
        }
        if let Optimizer::SgdRobbinsMonro { noise_std } = self.optimizer {
            if !(noise_std >= 0.0 && noise_std.is_finite()) {
                return fail("noise_std must be finite and non-negative");
            }
        }
        if self.topo.resolution < 2 {
            return fail("topology grid resolution must be at least 2");
        }
        if self.sigma_k == 0 {
            return fail("sigma_k must be positive");
        }
        self.weights.validate()?;
        Ok(())
    }
}

pub fn lr_schedule(config: &TrainConfig, iter: usize) -> f64 {
    match config.optimizer {
        Optimizer::Adam => {
            if iter < config.warmup_iters {
                config.base_lr
            } else {
                let span = (config.iterations - config.warmup_iters) as f64;
                let t = (iter - config.warmup_iters) as f64 / span;
                config.base_lr * 0.5 * (1.0 + (PI * t).cos())
            }
        }
        Optimizer::SgdRobbinsMonro { .. } => config.base_lr / (1.0 + iter as f64),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update on a flat parameter vector.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - AdamState::BETA1.powi(state.t as i32);
    let c2 = 1.0 - AdamState::BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = AdamState::BETA1 * state.m[i] + (1.0 - AdamState::BETA1) * g;
        state.v[i] = AdamState::BETA2 * state.v[i] + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
    }
    Ok(())
}

/// `θ ← θ − α(g + ζ)` with `ζ ~ N(0, noise_std²)`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::Shape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    for (p, g) in params.iter_mut().zip(grads) {
        let zeta = noise.as_ref().map_or(0.0, |n| n.sample(rng));
        *p -= lr * (g + zeta);
    }
    Ok(())
}

fn write_back(model: &mut SdfModel, flat: &[f64]) {
    let mut offset = 0;
    for t in model.parameters_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

pub fn adam_step(model: &mut SdfModel, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    let mut flat = model.to_flat();
    adam_update(&mut flat, grads, state, lr)?;
    write_back(model, &flat);
    Ok(())
}

pub fn sgd_step(model: &mut SdfModel, grads: &[f64], lr: f64, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<(), TrainError> {
    let mut flat = model.to_flat();
    sgd_update(&mut flat, grads, lr, noise_std, rng)?;
    write_back(model, &flat);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    pub pull: f64,
    pub significant: f64,
    pub noise: f64,
    pub total: f64,
    pub lr: f64,
    pub dropped: usize,
    pub topo_active: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub snapshots: Vec<(usize, PersistenceDiagram)>,
}

impl TrainHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

/// Points used for training: all of them, or a seeded subset of
/// `batch_points`.
pub fn training_points(cloud: &PointCloud, batch_points: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    if cloud.len() <= batch_points {
        return cloud.points.clone();
    }
    let mut idx = index::sample(rng, cloud.len(), batch_points).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cloud.points[i]).collect()
}

pub fn initial_model(config: &TrainConfig) -> Result<SdfModel, TrainError> {
    Ok(match config.init_radius {
        Some(r) => SdfModel::init_geometric(config.architecture, r, config.seed)?,
        None => SdfModel::init_standard(config.architecture, config.seed),
    })
}

pub fn train(cloud: &PointCloud, config: &TrainConfig) -> Result<(SdfModel, TrainHistory), TrainError> {
    let model = initial_model(config)?;
    train_from(model, cloud, config, |_| {})
}

/// Runs the loop from `model`, calling `on_record` after each iteration.
pub fn train_from(
    mut model: SdfModel,
    cloud: &PointCloud,
    config: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(SdfModel, TrainHistory), TrainError> {
    config.validate()?;
    if cloud.len() < 2 {
        return Err(TrainError::Config("cloud needs at least 2 points".into()));
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);

    let points = training_points(cloud, config.batch_points, &mut sample_rng);
    let index = KnnIndex::build(&points);
    let sigmas = per_point_sigma(&index, config.sigma_k.min(points.len() - 1))?;

    let n_params = config.architecture.parameter_count();
    let mut adam = AdamState::new(n_params);
    let mut history = TrainHistory::default();
    let mut last_diagram = None;

    for iter in 0..config.iterations {
        let batch = sample_queries_from(&points, &sigmas, None, config.batch_queries, &mut sample_rng);
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let loss = unified_loss(
            &model,
            &params,
            &index,
            &batch.queries,
            &config.topo,
            &config.weights,
            iter,
            &mut tape,
        )?;
        let topo = loss.topo.unwrap_or_default();
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite {
                iter,
                pull: loss.pull,
                significant: topo.significant,
                noise: topo.noise(),
            });
        }
        let grads_map = tape.backward(loss.pull_node, Tensor::scalar(1.0))?;
        let mut grads = Vec::with_capacity(n_params);
        for node in params.iter() {
            match grads_map.get(node) {
                Some(g) => grads.extend_from_slice(g.data()),
                None => grads.extend(std::iter::repeat_n(0.0, tape.value(node).len())),
            }
        }

        let lr = lr_schedule(config, iter);
        match config.optimizer {
            Optimizer::Adam => adam_step(&mut model, &grads, &mut adam, lr)?,
            Optimizer::SgdRobbinsMonro { noise_std } => sgd_step(&mut model, &grads, lr, noise_std, &mut noise_rng)?,
        }

        let record = TrainRecord {
            iter,
            pull: loss.pull,
            significant: topo.significant,
            noise: topo.noise(),
            total: loss.total,
            lr,
            dropped: loss.dropped,
            topo_active: loss.topo.is_some(),
        };
        on_record(&record);
        history.records.push(record);
        if let Some(d) = loss.diagram {
            if config.snapshot_every.is_some_and(|n| n > 0 && iter % n == 0) {
                history.snapshots.push((iter, d.clone()));
            }
            last_diagram = Some((iter, d));
        }
    }
    if let Some((iter, d)) = last_diagram {
        if history.snapshots.last().map(|(i, _)| *i) != Some(iter) {
            history.snapshots.push((iter, d));
        }
    }
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub slope: f64,
    pub converged: bool,
}

/// Slope tolerance per iteration for declaring convergence.
pub const CONVERGENCE_SLOPE: f64 = 1e-6;

/// Least-squares slope of the total loss over the last `window` records.
pub fn convergence_report(history: &TrainHistory, window: usize) -> Result<ConvergenceReport, TrainError> {
    let needed = 2 * window.max(1);
    if history.records.len() < needed {
        return Err(TrainError::ShortHistory {
            len: history.records.len(),
            needed,
        });
    }
    let tail = &history.records[history.records.len() - window..];
    let slope = least_squares_slope(&tail.iter().map(|r| r.total).collect::<Vec<_>>());
    Ok(ConvergenceReport {
        slope,
        converged: slope <= CONVERGENCE_SLOPE,
    })
}

fn least_squares_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (v - y_mean);
        den += dx * dx;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fibonacci_sphere;

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert_eq!(lr_schedule(&cfg, 999), 0.001);
        assert_eq!(lr_schedule(&cfg, 1000), 0.001);
        let mid = lr_schedule(&cfg, 1000 + 19_500);
        assert!((mid - 0.0005).abs() < 1e-15);
        assert!(lr_schedule(&cfg, 39_999) < 1e-11);
    }

    #[test]
    fn robbins_monro_schedule() {
        let cfg = TrainConfig {
            optimizer: Optimizer::SgdRobbinsMonro { noise_std: 0.0 },
            base_lr: 0.5,
            iterations: 1_000_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 0.5);
        assert_eq!(lr_schedule(&cfg, 9), 0.05);
        // Partial sums: Σα grows like log n, Σα² is bounded by 0.25·π²/6.
        let (mut s1, mut s2) = (0.0, 0.0);
        for t in 0..cfg.iterations {
            let a = lr_schedule(&cfg, t);
            s1 += a;
            s2 += a * a;
        }
        assert!(s1 > 0.5 * (1e6f64).ln());
        assert!(s2 < 0.25 * PI * PI / 6.0);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert!(adam_update(&mut p, &[0.0], &mut s, 0.1).is_err());
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for _ in 0..200 {
            let before = p[0];
            adam_update(&mut p, &[3.0], &mut s, 0.01).unwrap();
            assert!(((before - p[0]) - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn optimizers_solve_quadratic_bowl() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        let mut reached = None;
        for step in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam_update(&mut p, &g, &mut s, 0.01).unwrap();
            if reached.is_none() && p.iter().map(|x| x * x).sum::<f64>() < 1e-4 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());

        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        for step in 0..5000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam_update(&mut p, &g, &mut s, 0.01 / (1.0 + step as f64 / 100.0)).unwrap();
        }
        assert!(p.iter().map(|x| x * x).sum::<f64>() < 1e-6);

        let mut p = vec![1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            sgd_update(&mut p, &g, 0.9 / (1.0 + t as f64), 0.0, &mut rng).unwrap();
            let loss = p.iter().map(|x| x * x).sum::<f64>();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn noisy_sgd_decreases_on_average() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = vec![1.0, 1.0];
            let mut losses = Vec::new();
            for t in 0..2000 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                sgd_update(&mut p, &g, 0.4 / (1.0 + t as f64), 0.5, &mut rng).unwrap();
                losses.push(p.iter().map(|x| x * x).sum::<f64>());
            }
            let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
            let tail: f64 = losses[1900..].iter().sum::<f64>() / 100.0;
            assert!(tail < head, "seed {seed}: {tail} vs {head}");
        }
        let mut p = vec![1.0, 2.0];
        sgd_update(&mut p, &[5.0, 5.0], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    fn history_of(values: &[f64]) -> TrainHistory {
        TrainHistory {
            records: values
                .iter()
                .enumerate()
                .map(|(iter, &total)| TrainRecord {
                    iter,
                    pull: total,
                    significant: 0.0,
                    noise: 0.0,
                    total,
                    lr: 0.0,
                    dropped: 0,
                    topo_active: false,
                })
                .collect(),
            snapshots: vec![],
        }
    }

    #[test]
    fn convergence_on_synthetic_histories() {
        let down: Vec<f64> = (0..1000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(convergence_report(&history_of(&down), 500).unwrap().converged);
        let up: Vec<f64> = (0..1000).map(|i| i as f64 * 1e-3).collect();
        let r = convergence_report(&history_of(&up), 500).unwrap();
        assert!(!r.converged);
        assert!((r.slope - 1e-3).abs() < 1e-12);
        assert!(convergence_report(&history_of(&up[..999]), 500).is_err());
    }

    fn small_sphere_cloud() -> PointCloud {
        let pts: Vec<Point3> = fibonacci_sphere(300).into_iter().map(|p| [p[0] * 0.6, p[1] * 0.6, p[2] * 0.6]).collect();
        PointCloud::from_normalized(pts).unwrap()
    }

    fn small_config(weights: LossWeights) -> TrainConfig {
        TrainConfig {
            architecture: Architecture::new(3, 16, 1).unwrap(),
            iterations: 60,
            warmup_iters: 10,
            batch_queries: 64,
            batch_points: 300,
            topo: TopoConfig {
                resolution: 4,
                ..TopoConfig::default()
            },
            weights,
            sigma_k: 10,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_curriculum_gated() {
        let cloud = small_sphere_cloud();
        let topo = LossWeights {
            curriculum_start_iter: 40,
            ..LossWeights::default()
        };
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            curriculum_start_iter: 40,
        };
        let (m1, h1) = train(&cloud, &small_config(topo)).unwrap();
        let (m2, h2) = train(&cloud, &small_config(topo)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        let (_, h0) = train(&cloud, &small_config(zero)).unwrap();
        assert_eq!(h0.records[..40], h1.records[..40]);
        assert_ne!(h0.records[40..], h1.records[40..]);
        assert!(h1.records[..40].iter().all(|r| !r.topo_active));
        assert!(h1.records[40..].iter().all(|r| r.topo_active));
        for r in &h1.records {
            let sum = r.pull + 0.5 * r.significant + 5.0 * r.noise;
            assert!((r.total - sum).abs() < 1e-12);
        }
        assert_eq!(h1.snapshots.len(), 1);
        assert!(h1.records[0].pull > h1.records[59].pull);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            warmup_iters: 50_000,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_queries: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::desk();
        bad.weights.curriculum_start_iter = 6000;
        assert!(bad.validate().is_err());
    }
}
