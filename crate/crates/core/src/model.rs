//! The SDF network: a ReLU MLP mapping 3D points to signed distance, with
//! one skip layer that re-reads the raw input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{affine_kernel, relu_kernel, AutodiffError, NodeId, Tape, Tensor};

/// Standard deviation of the final-layer weights under geometric init.
const GEOMETRIC_FINAL_STD: f64 = 1e-4;
/// Directions used to normalize the radial gain of geometric init.
const RADIAL_PROBES: usize = 512;
/// Rows per chunk for tape-free batch evaluation.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("geometric init radius must be positive, got {0}")]
    Radius(f64),
    #[error("parameter blob has {got} values, architecture needs {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Layer layout of the network. `layer_count` counts affine layers, the
/// last of which maps to the scalar output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    layer_count: usize,
    hidden_width: usize,
    skip_layer: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layer_count: 8,
            hidden_width: 256,
            skip_layer: 4,
        }
    }
}

impl Architecture {
    pub const INPUT_DIM: usize = 3;
    pub const OUTPUT_DIM: usize = 1;

    pub fn new(layer_count: usize, hidden_width: usize, skip_layer: usize) -> Result<Self, ModelError> {
        if hidden_width == 0 {
            return Err(ModelError::Architecture("hidden_width must be positive".into()));
        }
        if skip_layer == 0 || skip_layer >= layer_count {
            return Err(ModelError::Architecture(format!(
                "skip_layer {skip_layer} must satisfy 0 < skip_layer < layer_count {layer_count}"
            )));
        }
        Ok(Self {
            layer_count,
            hidden_width,
            skip_layer,
        })
    }

    /// Skip connection placed at the middle layer.
    pub fn with_middle_skip(layer_count: usize, hidden_width: usize) -> Result<Self, ModelError> {
        Self::new(layer_count, hidden_width, layer_count / 2)
    }

    /// 4 layers of width 64.
    pub fn desk() -> Self {
        Self {
            layer_count: 4,
            hidden_width: 64,
            skip_layer: 2,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn skip_layer(&self) -> usize {
        self.skip_layer
    }

    /// `(fan_in, fan_out)` per layer, including the widened skip input.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layer_count)
            .map(|l| {
                let fan_in = if l == 0 {
                    Self::INPUT_DIM
                } else if l == self.skip_layer {
                    self.hidden_width + Self::INPUT_DIM
                } else {
                    self.hidden_width
                };
                let fan_out = if l + 1 == self.layer_count {
                    Self::OUTPUT_DIM
                } else {
                    self.hidden_width
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    Geometric { radius: f64 },
    Standard,
    /// Parameters came from a file.
    Loaded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitDescriptor {
    pub scheme: InitScheme,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfModel {
    architecture: Architecture,
    layers: Vec<Layer>,
    init: InitDescriptor,
}

/// Parameter leaves of a model registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Nodes recorded by one forward pass, kept for building input gradients.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: NodeId,
    /// Pre-activation output of every layer.
    pub pre_activations: Vec<NodeId>,
    /// Network output reshaped to `[n]`.
    pub output: NodeId,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, mean: f64, std: f64) -> Tensor {
    let dist = Normal::new(mean, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl SdfModel {
    /// Initialization whose untrained output approximates `‖x‖ − radius`.
    pub fn init_geometric(arch: Architecture, radius: f64, seed: u64) -> Result<Self, ModelError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(ModelError::Radius(radius));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = arch.hidden_width as f64;
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                if l == last {
                    let mut weight = normal_tensor(
                        &mut rng,
                        vec![fan_in, fan_out],
                        std::f64::consts::PI.sqrt() / width.sqrt(),
                        GEOMETRIC_FINAL_STD,
                    );
                    zero_skip_rows(&mut weight, l, &arch);
                    Layer {
                        weight,
                        bias: Tensor::filled(vec![fan_out], -radius),
                    }
                } else {
                    let mut weight =
                        normal_tensor(&mut rng, vec![fan_in, fan_out], 0.0, (2.0 / width).sqrt());
                    zero_skip_rows(&mut weight, l, &arch);
                    Layer {
                        weight,
                        bias: Tensor::zeros(vec![fan_out]),
                    }
                }
            })
            .collect();
        let mut model = Self {
            architecture: arch,
            layers,
            init: InitDescriptor {
                scheme: InitScheme::Geometric { radius },
                seed,
            },
        };
        model.calibrate_radial_scale(radius);
        Ok(model)
    }

    /// Hidden layers are bias-free, so the network is positively
    /// homogeneous: `f(x) + radius = ‖x‖·φ(x/‖x‖)`. Rescales the output
    /// weights so that `φ` averages to 1 over a fixed set of directions,
    /// removing the seed-dependent radial gain of deep random ReLU stacks.
    fn calibrate_radial_scale(&mut self, radius: f64) {
        let probes = fibonacci_sphere(RADIAL_PROBES);
        let values = self.evaluate(&probes);
        let gain = values.iter().map(|v| v + radius).sum::<f64>() / values.len() as f64;
        if gain > 0.0 && gain.is_finite() {
            let last = self.layers.last_mut().expect("at least one layer");
            for w in last.weight.data_mut() {
                *w /= gain;
            }
        }
    }

    /// Kaiming normal init, `N(0, sqrt(2 / fan_in))`, zero biases.
    pub fn init_standard(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: normal_tensor(&mut rng, vec![fan_in, fan_out], 0.0, (2.0 / fan_in as f64).sqrt()),
                bias: Tensor::zeros(vec![fan_out]),
            })
            .collect();
        Self {
            architecture: arch,
            layers,
            init: InitDescriptor {
                scheme: InitScheme::Standard,
                seed,
            },
        }
    }

    /// Rebuilds a model from a flat layer-major blob (weights then bias).
    pub fn from_flat(arch: Architecture, params: &[f64]) -> Result<Self, ModelError> {
        let expected = arch.parameter_count();
        if params.len() != expected {
            return Err(ModelError::ParameterCount {
                expected,
                got: params.len(),
            });
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = params[offset..offset + n].to_vec();
            offset += n;
            s
        };
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Tensor::new(vec![i, o], take(i * o)).expect("sized"),
                bias: Tensor::new(vec![o], take(o)).expect("sized"),
            })
            .collect();
        Ok(Self {
            architecture: arch,
            layers,
            init: InitDescriptor {
                scheme: InitScheme::Loaded,
                seed: 0,
            },
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.architecture.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn init_descriptor(&self) -> InitDescriptor {
        self.init
    }

    /// Parameter tensors in layer-major order: `w0, b0, w1, b1, ...`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Records `f(points)` on the tape; `points` is an `n×3` node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        points: NodeId,
    ) -> Result<ForwardTrace, ModelError> {
        let n = tape.value(points).rows();
        let mut h = points;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (l, &(w, b)) in params.layers.iter().enumerate() {
            let input = if l == self.architecture.skip_layer {
                tape.concat_cols(h, points)?
            } else {
                h
            };
            let z = tape.affine(input, w, b)?;
            pre_activations.push(z);
            h = if l + 1 == self.layers.len() { z } else { tape.relu(z)? };
        }
        let output = tape.reshape(h, vec![n])?;
        Ok(ForwardTrace {
            input: points,
            pre_activations,
            output,
        })
    }

    /// `f(points)` recorded on `tape`, registering fresh parameter leaves.
    pub fn sdf_forward(&self, points: &Tensor, tape: &mut Tape) -> Result<(Tensor, ForwardTrace, ParamNodes), ModelError> {
        let params = self.register(tape);
        let input = tape.leaf(points.clone());
        let trace = self.forward_on_tape(tape, &params, input)?;
        Ok((tape.value(trace.output).clone(), trace, params))
    }

    /// Builds `∇ₓf` as ordinary tape operations so that downstream losses
    /// can differentiate through it with respect to the parameters. ReLU
    /// derivatives enter as constant masks.
    pub fn input_gradient_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        trace: &ForwardTrace,
    ) -> Result<NodeId, ModelError> {
        let n = tape.value(trace.output).len();
        let width = self.architecture.hidden_width;
        let last = self.layers.len() - 1;
        // Adjoint of the current layer's pre-activation.
        let mut adjoint = tape.leaf(Tensor::filled(vec![n, 1], 1.0));
        let mut from_skip: Option<NodeId> = None;
        for l in (0..=last).rev() {
            let (w, _) = params.layers[l];
            let d_in = tape.matmul_t(adjoint, w)?;
            let d_hidden = if l == self.architecture.skip_layer {
                let d_x = tape.slice_cols(d_in, width, width + Architecture::INPUT_DIM)?;
                from_skip = Some(d_x);
                tape.slice_cols(d_in, 0, width)?
            } else {
                d_in
            };
            if l == 0 {
                return Ok(match from_skip {
                    Some(skip) => tape.add(d_hidden, skip)?,
                    None => d_hidden,
                });
            }
            let z = tape.value(trace.pre_activations[l - 1]);
            let mask = Tensor::new(
                z.shape().to_vec(),
                z.data().iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect(),
            )?;
            adjoint = tape.mul_const(d_hidden, mask)?;
        }
        unreachable!("layer 0 returns")
    }

    /// `∇ₓf` per point by reverse mode on a private tape.
    pub fn spatial_gradient(&self, points: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let (values, trace, _) = self.sdf_forward(points, &mut tape)?;
        let grads = tape.backward(trace.output, Tensor::filled(values.shape().to_vec(), 1.0))?;
        Ok(grads.get_or_zeros(trace.input, points))
    }

    /// Tape-free forward evaluation over a batch of points.
    pub fn evaluate(&self, points: &[[f64; 3]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let rows = chunk.len();
            let x: Vec<f64> = chunk.iter().flat_map(|p| p.iter().copied()).collect();
            let mut h = x.clone();
            let mut h_dim = Architecture::INPUT_DIM;
            for (l, layer) in self.layers.iter().enumerate() {
                let (input, d_in) = if l == self.architecture.skip_layer {
                    let d = h_dim + Architecture::INPUT_DIM;
                    let mut cat = Vec::with_capacity(rows * d);
                    for i in 0..rows {
                        cat.extend_from_slice(&h[i * h_dim..(i + 1) * h_dim]);
                        cat.extend_from_slice(&x[i * 3..i * 3 + 3]);
                    }
                    (cat, d)
                } else {
                    (h, h_dim)
                };
                h = affine_kernel(&input, rows, d_in, layer.weight.data(), layer.bias.data());
                h_dim = layer.bias.len();
                if l + 1 < self.layers.len() {
                    relu_kernel(&mut h);
                }
            }
            out.extend_from_slice(&h);
        }
        out
    }

    pub fn evaluate_point(&self, p: [f64; 3]) -> f64 {
        self.evaluate(&[p])[0]
    }
}

/// Near-uniform unit directions on a golden-angle spiral.
pub(crate) fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), y, r * t.sin()]
        })
        .collect()
}

/// Geometric init leaves the raw-input rows of the skip layer at zero so
/// the initial field stays radially symmetric in expectation.
fn zero_skip_rows(weight: &mut Tensor, layer: usize, arch: &Architecture) {
    if layer != arch.skip_layer {
        return;
    }
    let cols = weight.cols();
    let start = arch.hidden_width * cols;
    for v in &mut weight.data_mut()[start..] {
        *v = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(seed: u64, n: usize, scale: f64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                ]
            })
            .collect()
    }

    fn unit_sphere_points(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let v: [f64; 3] = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / r, v[1] / r, v[2] / r]
            })
            .collect()
    }

    #[test]
    fn architecture_validation_and_counts() {
        assert!(Architecture::new(4, 64, 0).is_err());
        assert!(Architecture::new(4, 64, 4).is_err());
        let arch = Architecture::default();
        assert_eq!(arch.layer_dims()[4], (259, 256));
        assert_eq!(arch.layer_dims()[7], (256, 1));
        let desk = Architecture::desk();
        assert_eq!(desk.parameter_count(), 3 * 64 + 64 + 64 * 64 + 64 + 67 * 64 + 64 + 64 + 1);
    }

    #[test]
    fn geometric_init_signs_and_determinism() {
        let arch = Architecture::default();
        let a = SdfModel::init_geometric(arch, 0.5, 3).unwrap();
        let b = SdfModel::init_geometric(arch, 0.5, 3).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert!(a.evaluate_point([0.0, 0.0, 0.0]) < 0.0);
        assert!(a.evaluate_point([1.0, 1.0, 1.0]) > 0.0);
        assert!(SdfModel::init_geometric(arch, 0.0, 3).is_err());
    }

    #[test]
    fn geometric_init_mean_on_unit_sphere() {
        let radius = 0.5;
        let pts = unit_sphere_points(99, 1000);
        for seed in 0..10 {
            let m = SdfModel::init_geometric(Architecture::default(), radius, seed).unwrap();
            let vals = m.evaluate(&pts);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - (1.0 - radius)).abs() < 0.25, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn geometric_init_near_zero_on_init_sphere() {
        let m = SdfModel::init_geometric(Architecture::default(), 0.5, 1).unwrap();
        let pts: Vec<[f64; 3]> = unit_sphere_points(5, 50)
            .into_iter()
            .map(|p| [p[0] * 0.5, p[1] * 0.5, p[2] * 0.5])
            .collect();
        for v in m.evaluate(&pts) {
            assert!(v.abs() < 0.3, "{v}");
        }
    }

    #[test]
    fn standard_init_determinism_and_variance() {
        let arch = Architecture::default();
        let a = SdfModel::init_standard(arch, 9);
        let b = SdfModel::init_standard(arch, 9);
        assert_eq!(a, b);
        assert!(a.evaluate_point([0.0, 0.0, 0.0]).is_finite());
        for (layer, (fan_in, _)) in a.layers().iter().zip(arch.layer_dims()) {
            let w = layer.weight.data();
            if w.len() < 1000 {
                continue;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            let expected = 2.0 / fan_in as f64;
            assert!((var / expected - 1.0).abs() < 0.2, "var {var} expected {expected}");
        }
    }

    #[test]
    fn tape_and_tape_free_forward_agree() {
        let m = SdfModel::init_geometric(Architecture::desk(), 0.5, 2).unwrap();
        let pts = random_points(4, 37, 1.0);
        let mut tape = Tape::new();
        let (vals, _, _) = m.sdf_forward(&Tensor::from_points(&pts), &mut tape).unwrap();
        assert_eq!(vals.shape(), &[37]);
        assert_eq!(vals.data(), m.evaluate(&pts).as_slice());
        assert_eq!(m.evaluate(&pts), m.evaluate(&pts));
    }

    #[test]
    fn spatial_gradient_of_linear_model() {
        // Single hidden layer with identity-like positive weights makes f linear
        // on the positive orthant.
        let arch = Architecture::new(2, 3, 1).unwrap();
        let mut flat = vec![0.0; arch.parameter_count()];
        // layer 0: 3x3 identity, bias 10 keeps ReLU active.
        for i in 0..3 {
            flat[i * 3 + i] = 1.0;
        }
        for b in &mut flat[9..12] {
            *b = 10.0;
        }
        // layer 1 (skip): (3 + 3) x 1 weights [a, 0]
        let a = [0.5, -2.0, 1.5];
        flat[12..15].copy_from_slice(&a);
        let m = SdfModel::from_flat(arch, &flat).unwrap();
        let pts = random_points(1, 10, 1.0);
        let g = m.spatial_gradient(&Tensor::from_points(&pts)).unwrap();
        for row in g.to_points() {
            for k in 0..3 {
                assert!((row[k] - a[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spatial_gradient_radial_far_from_origin() {
        let dirs = fibonacci_sphere(200);
        for seed in 0..3 {
            let m = SdfModel::init_geometric(Architecture::default(), 0.5, seed).unwrap();
            let pts: Vec<[f64; 3]> = dirs.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect();
            let g = m.spatial_gradient(&Tensor::from_points(&pts)).unwrap().to_points();
            let mean_angle = dirs
                .iter()
                .zip(g)
                .map(|(u, d)| {
                    let dot = u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    (dot / norm).clamp(-1.0, 1.0).acos().to_degrees()
                })
                .sum::<f64>()
                / dirs.len() as f64;
            assert!(mean_angle < 30.0, "seed {seed}: mean angle {mean_angle}");
        }
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let m = SdfModel::init_geometric(Architecture::desk(), 0.5, 12).unwrap();
        let pts = random_points(13, 40, 1.0);
        let g = m.spatial_gradient(&Tensor::from_points(&pts)).unwrap().to_points();
        let h = 1e-5;
        for (p, grad) in pts.iter().zip(g) {
            for k in 0..3 {
                let mut plus = *p;
                plus[k] += h;
                let mut minus = *p;
                minus[k] -= h;
                let fd = (m.evaluate_point(plus) - m.evaluate_point(minus)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
                assert!(rel < 1e-5, "fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn on_tape_gradient_matches_reverse_mode() {
        for arch in [Architecture::desk(), Architecture::new(3, 16, 2).unwrap(), Architecture::new(3, 16, 1).unwrap()] {
            let m = SdfModel::init_geometric(arch, 0.5, 4).unwrap();
            let pts = Tensor::from_points(&random_points(2, 25, 1.0));
            let reference = m.spatial_gradient(&pts).unwrap();
            let mut tape = Tape::new();
            let params = m.register(&mut tape);
            let input = tape.leaf(pts.clone());
            let trace = m.forward_on_tape(&mut tape, &params, input).unwrap();
            let g = m.input_gradient_on_tape(&mut tape, &params, &trace).unwrap();
            for (a, b) in tape.value(g).data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let m = SdfModel::init_standard(Architecture::desk(), 1);
        let back = SdfModel::from_flat(m.architecture(), &m.to_flat()).unwrap();
        assert_eq!(back.to_flat(), m.to_flat());
        assert!(SdfModel::from_flat(m.architecture(), &[0.0; 3]).is_err());
    }
}
