//! The two players of the min-max game: small target classifiers
//! `f(x; w)` and the generative initialization network `g(x, s_x; θ)`.
//!
//! Parameters live outside any graph as named tensors; each forward pass
//! binds them onto a fresh [`Graph`] as leaves. Batch-norm running
//! statistics are non-trainable buffers on the same parameter set and are
//! refreshed only by training-mode forwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Whether a forward pass uses batch statistics (and refreshes the running
/// buffers) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

// ── Parameter storage ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Ordered, name-addressable collection of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> ParamSet<S> {
        ParamSet { entries: Vec::new() }
    }

    fn add(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn value(&self, idx: usize) -> &Tensor<S> {
        &self.entries[idx].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        assert_eq!(entry.value.shape(), value.shape(), "shape change for {name}");
        entry.value = value;
    }

    pub fn set_by_index(&mut self, idx: usize, value: Tensor<S>) {
        assert_eq!(self.entries[idx].value.shape(), value.shape());
        self.entries[idx].value = value;
    }

    /// Number of scalar parameters in trainable entries.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Binds every entry as a leaf on `graph`. Trainable entries require
    /// gradients when `param_grads` is set.
    pub fn bind(&self, graph: &mut Graph<S>, param_grads: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| graph.leaf(e.value.clone(), e.trainable && param_grads))
            .collect();
        Binding { vars }
    }

    /// Bit-exact equality of every entry, used by parameter-disjointness
    /// tests.
    pub fn bits_eq(&self, other: &ParamSet<S>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

/// Graph leaves for one bound parameter set, aligned with entry order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients per entry after a backward pass (None where absent).
    pub fn grads<S: Scalar>(&self, graph: &Graph<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|&v| graph.grad(v)).collect()
    }
}

// ── Initialization ──────────────────────────────────────────────────

fn he_normal<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| s(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}

// ── Layer handles ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    run_mean: usize,
    run_var: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
}

fn add_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> ConvIdx {
    let w = params.add(
        &format!("{name}.weight"),
        Tensor::zeros(vec![c_out, c_in, k, k]),
        true,
    );
    ConvIdx { w, stride, padding }
}

fn add_bn<S: Scalar>(params: &mut ParamSet<S>, name: &str, c: usize) -> BnIdx {
    let gamma = params.add(&format!("{name}.gamma"), Tensor::full(vec![c], S::one()), true);
    let beta = params.add(&format!("{name}.beta"), Tensor::zeros(vec![c]), true);
    let run_mean = params.add(&format!("{name}.running_mean"), Tensor::zeros(vec![c]), false);
    let run_var = params.add(
        &format!("{name}.running_var"),
        Tensor::full(vec![c], S::one()),
        false,
    );
    BnIdx {
        gamma,
        beta,
        run_mean,
        run_var,
    }
}

fn add_linear<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> LinearIdx {
    let w = params.add(&format!("{name}.weight"), Tensor::zeros(vec![d_in, d_out]), true);
    let b = params.add(&format!("{name}.bias"), Tensor::zeros(vec![d_out]), true);
    LinearIdx { w, b }
}

/// Applies batch normalization, collecting running-statistic refreshes
/// into `pending` when in training mode.
fn bn_forward<S: Scalar>(
    graph: &mut Graph<S>,
    binding: &Binding,
    params: &ParamSet<S>,
    pending: &mut Vec<(usize, Tensor<S>)>,
    bn: BnIdx,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let eps = s::<S>(BN_EPS);
    match mode {
        Mode::Train => {
            let (mean, var) = graph.channel_stats(x);
            let n = graph.value(x).len() / mean.len();
            // Running buffers keep `momentum` of their old value; the
            // variance update uses the unbiased batch estimate.
            let m = s::<S>(BN_MOMENTUM);
            let one_minus = S::one() - m;
            let unbias = if n > 1 {
                s::<S>(n as f64 / (n as f64 - 1.0))
            } else {
                S::one()
            };
            let old_mean = params.value(bn.run_mean).data();
            let old_var = params.value(bn.run_var).data();
            let new_mean: Vec<S> = old_mean
                .iter()
                .zip(&mean)
                .map(|(&o, &b)| m * o + one_minus * b)
                .collect();
            let new_var: Vec<S> = old_var
                .iter()
                .zip(&var)
                .map(|(&o, &b)| m * o + one_minus * b * unbias)
                .collect();
            pending.push((bn.run_mean, Tensor::new(vec![mean.len()], new_mean)));
            pending.push((bn.run_var, Tensor::new(vec![var.len()], new_var)));
            graph.batchnorm2d(x, binding.var(bn.gamma), binding.var(bn.beta), mean, var, eps, true)
        }
        Mode::Eval => {
            let mean = params.value(bn.run_mean).data().to_vec();
            let var = params.value(bn.run_var).data().to_vec();
            graph.batchnorm2d(x, binding.var(bn.gamma), binding.var(bn.beta), mean, var, eps, false)
        }
    }
}

fn linear_forward<S: Scalar>(
    graph: &mut Graph<S>,
    binding: &Binding,
    fc: LinearIdx,
    x: Var,
) -> Result<Var> {
    let prod = graph.matmul(x, binding.var(fc.w))?;
    graph.add_row_bias(prod, binding.var(fc.b))
}

// ── Target network ──────────────────────────────────────────────────

/// Architecture of the target classifier. Desk-scale stand-ins for the
/// residual networks used at full scale; all take `[B,C,H,W]` images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetArch {
    /// Flatten + single linear layer.
    Linear,
    /// Flatten + two linear layers with a ReLU between.
    Mlp { hidden: usize },
    /// Two conv+BN+ReLU blocks (stride 2 each) and a linear head.
    SmallCnn { c1: usize, c2: usize },
}

impl Default for TargetArch {
    fn default() -> Self {
        TargetArch::SmallCnn { c1: 16, c2: 32 }
    }
}

enum TargetLayers {
    Linear {
        fc: LinearIdx,
    },
    Mlp {
        fc1: LinearIdx,
        fc2: LinearIdx,
    },
    Cnn {
        conv1: ConvIdx,
        bn1: BnIdx,
        conv2: ConvIdx,
        bn2: BnIdx,
        fc: LinearIdx,
    },
}

/// Target classifier `f(x; w)`.
pub struct TargetNet<S> {
    arch: TargetArch,
    in_shape: [usize; 3],
    num_classes: usize,
    params: ParamSet<S>,
    layers: TargetLayers,
}

impl<S: Scalar> TargetNet<S> {
    pub fn new(arch: TargetArch, in_shape: [usize; 3], num_classes: usize) -> TargetNet<S> {
        let [c, h, w] = in_shape;
        let d_in = c * h * w;
        let mut params = ParamSet::new();
        let layers = match arch {
            TargetArch::Linear => TargetLayers::Linear {
                fc: add_linear(&mut params, "fc", d_in, num_classes),
            },
            TargetArch::Mlp { hidden } => TargetLayers::Mlp {
                fc1: add_linear(&mut params, "fc1", d_in, hidden),
                fc2: add_linear(&mut params, "fc2", hidden, num_classes),
            },
            TargetArch::SmallCnn { c1, c2 } => {
                let conv1 = add_conv(&mut params, "conv1", c, c1, 3, 2, 1);
                let bn1 = add_bn(&mut params, "bn1", c1);
                let conv2 = add_conv(&mut params, "conv2", c1, c2, 3, 2, 1);
                let bn2 = add_bn(&mut params, "bn2", c2);
                let h_out = (h + 1) / 2;
                let h_out = (h_out + 1) / 2;
                let w_out = (w + 1) / 2;
                let w_out = (w_out + 1) / 2;
                let fc = add_linear(&mut params, "fc", c2 * h_out * w_out, num_classes);
                TargetLayers::Cnn {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    fc,
                }
            }
        };
        TargetNet {
            arch,
            in_shape,
            num_classes,
            params,
            layers,
        }
    }

    /// Builds and randomly initializes a network.
    pub fn init(
        arch: TargetArch,
        in_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> TargetNet<S> {
        let mut net = TargetNet::new(arch, in_shape, num_classes);
        net.init_params(seed);
        net
    }

    /// He fan-in init for conv/linear weights, zeros for biases, identity
    /// for batch-norm; fully determined by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_param_set(&mut self.params, &mut rng);
    }

    pub fn arch(&self) -> &TargetArch {
        &self.arch
    }

    pub fn in_shape(&self) -> [usize; 3] {
        self.in_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.in_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::BadShape {
                op: "target_forward",
                expected: format!("[B, {c}, {h}, {w}]"),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn pipeline(
        &self,
        graph: &mut Graph<S>,
        x: Var,
        mode: Mode,
        param_grads: bool,
        pending: &mut Vec<(usize, Tensor<S>)>,
    ) -> Result<(Var, Binding)> {
        self.check_input(graph.value(x).shape())?;
        let binding = self.params.bind(graph, param_grads);
        let logits = match &self.layers {
            TargetLayers::Linear { fc } => {
                let flat = graph.flatten(x)?;
                linear_forward(graph, &binding, *fc, flat)?
            }
            TargetLayers::Mlp { fc1, fc2 } => {
                let flat = graph.flatten(x)?;
                let h = linear_forward(graph, &binding, *fc1, flat)?;
                let h = graph.relu(h);
                linear_forward(graph, &binding, *fc2, h)?
            }
            TargetLayers::Cnn {
                conv1,
                bn1,
                conv2,
                bn2,
                fc,
            } => {
                let h = graph.conv2d(x, binding.var(conv1.w), None, conv1.stride, conv1.padding)?;
                let h = bn_forward(graph, &binding, &self.params, pending, *bn1, h, mode)?;
                let h = graph.relu(h);
                let h = graph.conv2d(h, binding.var(conv2.w), None, conv2.stride, conv2.padding)?;
                let h = bn_forward(graph, &binding, &self.params, pending, *bn2, h, mode)?;
                let h = graph.relu(h);
                let flat = graph.flatten(h)?;
                linear_forward(graph, &binding, *fc, flat)?
            }
        };
        Ok((logits, binding))
    }

    /// Eval-mode forward; never touches running statistics, so it is safe
    /// for concurrent use on shared parameters.
    pub fn forward_eval(&self, graph: &mut Graph<S>, x: Var) -> Result<Var> {
        let mut pending = Vec::new();
        let (logits, _) = self.pipeline(graph, x, Mode::Eval, false, &mut pending)?;
        debug_assert!(pending.is_empty());
        Ok(logits)
    }

    /// Training-mode forward with parameter gradients; refreshes BN
    /// running statistics once.
    pub fn forward_train(&mut self, graph: &mut Graph<S>, x: Var) -> Result<(Var, Binding)> {
        let mut pending = Vec::new();
        let out = self.pipeline(graph, x, Mode::Train, true, &mut pending)?;
        for (idx, value) in pending {
            self.params.set_by_index(idx, value);
        }
        Ok(out)
    }

    /// Eval-mode forward that also binds parameters for gradient harvest;
    /// used by gradient-check oracles.
    pub fn forward_eval_with_grads(&self, graph: &mut Graph<S>, x: Var) -> Result<(Var, Binding)> {
        let mut pending = Vec::new();
        self.pipeline(graph, x, Mode::Eval, true, &mut pending)
    }
}

fn init_param_set<S: Scalar>(params: &mut ParamSet<S>, rng: &mut ChaCha8Rng) {
    for i in 0..params.entries().len() {
        let entry = &params.entries()[i];
        let shape = entry.value.shape().to_vec();
        let name = entry.name.clone();
        if name.ends_with(".weight") {
            let fan_in = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let value = he_normal(shape, fan_in, rng);
            params.set_by_index(i, value);
        }
        // Biases, BN scale/shift and running stats keep their
        // construction-time values (0, 1, 0, 0, 1).
    }
}

// ── Generator network ───────────────────────────────────────────────

/// Architecture descriptor for the generative initialization network.
/// The layer stack itself is fixed: conv(2C→64)+BN+ReLU, a 64-channel
/// ResBlock, conv(64→C)+BN, and a tanh squashing the output to [-1, 1].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub image_channels: usize,
    /// Toggle point for spectrally normalized ResBlock weights; not
    /// implemented, must stay false.
    #[serde(default)]
    pub spectral_norm: bool,
}

impl GeneratorArch {
    pub fn for_channels(image_channels: usize) -> GeneratorArch {
        GeneratorArch {
            image_channels,
            spectral_norm: false,
        }
    }
}

const GEN_WIDTH: usize = 64;

struct ResBlockIdx {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
}

struct GeneratorLayers {
    conv1: ConvIdx,
    bn1: BnIdx,
    res: ResBlockIdx,
    conv3: ConvIdx,
    bn3: BnIdx,
}

/// Generative network `g(x, s_x; θ)` producing values in `[-1, 1]`.
pub struct GeneratorNet<S> {
    arch: GeneratorArch,
    params: ParamSet<S>,
    layers: GeneratorLayers,
}

impl<S: Scalar> GeneratorNet<S> {
    pub fn new(arch: GeneratorArch) -> Result<GeneratorNet<S>> {
        if arch.spectral_norm {
            return Err(Error::Config(
                "spectral_norm is an architecture toggle without an implementation".into(),
            ));
        }
        let c = arch.image_channels;
        let mut params = ParamSet::new();
        let conv1 = add_conv(&mut params, "conv1", 2 * c, GEN_WIDTH, 3, 1, 1);
        let bn1 = add_bn(&mut params, "bn1", GEN_WIDTH);
        let res = ResBlockIdx {
            conv1: add_conv(&mut params, "res.conv1", GEN_WIDTH, GEN_WIDTH, 3, 1, 1),
            bn1: add_bn(&mut params, "res.bn1", GEN_WIDTH),
            conv2: add_conv(&mut params, "res.conv2", GEN_WIDTH, GEN_WIDTH, 3, 1, 1),
            bn2: add_bn(&mut params, "res.bn2", GEN_WIDTH),
        };
        let conv3 = add_conv(&mut params, "conv3", GEN_WIDTH, c, 3, 1, 1);
        let bn3 = add_bn(&mut params, "bn3", c);
        Ok(GeneratorNet {
            arch,
            params,
            layers: GeneratorLayers {
                conv1,
                bn1,
                res,
                conv3,
                bn3,
            },
        })
    }

    pub fn init(arch: GeneratorArch, seed: u64) -> Result<GeneratorNet<S>> {
        let mut net = GeneratorNet::new(arch)?;
        net.init_params(seed);
        Ok(net)
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_param_set(&mut self.params, &mut rng);
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Zeroes the final BN scale/shift so the generator output is exactly
    /// zero everywhere; used by reduction tests.
    pub fn force_zero_output(&mut self) {
        let c = self.arch.image_channels;
        self.params.set("bn3.gamma", Tensor::zeros(vec![c]));
        self.params.set("bn3.beta", Tensor::zeros(vec![c]));
    }

    fn pipeline(
        &self,
        graph: &mut Graph<S>,
        x: Var,
        s_x: Var,
        mode: Mode,
        param_grads: bool,
        pending: &mut Vec<(usize, Tensor<S>)>,
    ) -> Result<(Var, Binding)> {
        let (sx_shape, x_shape) = (graph.value(s_x).shape(), graph.value(x).shape());
        if sx_shape != x_shape {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                lhs: x_shape.to_vec(),
                rhs: sx_shape.to_vec(),
            });
        }
        if x_shape.len() != 4 || x_shape[1] != self.arch.image_channels {
            return Err(Error::BadShape {
                op: "generator_forward",
                expected: format!("[B, {}, H, W]", self.arch.image_channels),
                got: x_shape.to_vec(),
            });
        }
        let binding = self.params.bind(graph, param_grads);
        let l = &self.layers;

        let input = graph.concat_channels(x, s_x)?;
        let h = graph.conv2d(input, binding.var(l.conv1.w), None, 1, 1)?;
        let h = bn_forward(graph, &binding, &self.params, pending, l.bn1, h, mode)?;
        let h = graph.relu(h);

        // ResBlock: conv-BN-ReLU-conv-BN plus identity skip, ReLU after
        // the sum.
        let r = graph.conv2d(h, binding.var(l.res.conv1.w), None, 1, 1)?;
        let r = bn_forward(graph, &binding, &self.params, pending, l.res.bn1, r, mode)?;
        let r = graph.relu(r);
        let r = graph.conv2d(r, binding.var(l.res.conv2.w), None, 1, 1)?;
        let r = bn_forward(graph, &binding, &self.params, pending, l.res.bn2, r, mode)?;
        let h = graph.add(h, r)?;
        let h = graph.relu(h);

        let h = graph.conv2d(h, binding.var(l.conv3.w), None, 1, 1)?;
        let h = bn_forward(graph, &binding, &self.params, pending, l.bn3, h, mode)?;
        let out = graph.tanh(h);
        Ok((out, binding))
    }

    /// Forward pass. The output shape equals the image shape and every
    /// entry lies in `[-1, 1]`.
    pub fn forward(
        &mut self,
        graph: &mut Graph<S>,
        x: Var,
        s_x: Var,
        mode: Mode,
        param_grads: bool,
    ) -> Result<(Var, Binding)> {
        let mut pending = Vec::new();
        let out = self.pipeline(graph, x, s_x, mode, param_grads, &mut pending)?;
        for (idx, value) in pending {
            self.params.set_by_index(idx, value);
        }
        Ok(out)
    }

    /// Eval-mode forward without any state updates.
    pub fn forward_eval(&self, graph: &mut Graph<S>, x: Var, s_x: Var) -> Result<Var> {
        let mut pending = Vec::new();
        let (out, _) = self.pipeline(graph, x, s_x, Mode::Eval, false, &mut pending)?;
        debug_assert!(pending.is_empty());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(batch: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![batch, c, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_weight_linear_gives_zero_logits() {
        let net: TargetNet<f32> = TargetNet::new(TargetArch::Linear, [3, 4, 4], 5);
        let mut g = Graph::new();
        let x = g.constant(images(2, 3, 4, 4, 0));
        let logits = net.forward_eval(&mut g, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 5]);
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_logits_shape_and_determinism() {
        let mut net: TargetNet<f32> =
            TargetNet::init(TargetArch::default(), [3, 16, 16], 10, 42);
        let x_t = images(4, 3, 16, 16, 1);

        let run = |net: &mut TargetNet<f32>, x_t: &Tensor<f32>| {
            let mut g = Graph::new();
            let x = g.constant(x_t.clone());
            let logits = net.forward_eval(&mut g, x).unwrap();
            g.value(logits).clone()
        };
        let a = run(&mut net, &x_t);
        assert_eq!(a.shape(), &[4, 10]);
        assert!(a.all_finite());
        let b = run(&mut net, &x_t);
        // Bit-identical across runs on one platform.
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net: TargetNet<f32> = TargetNet::new(TargetArch::Linear, [3, 4, 4], 5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 5, 5]));
        assert!(net.forward_eval(&mut g, x).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a: TargetNet<f32> = TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 7);
        let b: TargetNet<f32> = TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 7);
        assert!(a.params.bits_eq(&b.params));
        let c: TargetNet<f32> = TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 8);
        assert!(!a.params.bits_eq(&c.params));
    }

    #[test]
    fn bn_scale_initialized_to_one() {
        let net: TargetNet<f32> = TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 7);
        let gamma = net.params().get("bn1.gamma").unwrap();
        assert!(gamma.iter().all(|&v| v == 1.0));
        let beta = net.params().get("bn1.beta").unwrap();
        assert!(beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_variance_near_two_over_fan_in() {
        // conv with fan_in 2*3*3*3 = 54 (generator conv1 at C=3) has > 10k
        // weights at width 64? 64*6*9 = 3456; use the generator res conv:
        // 64*64*9 = 36864 elements, fan_in 576.
        let gen: GeneratorNet<f64> =
            GeneratorNet::init(GeneratorArch::for_channels(3), 3).unwrap();
        let w = gen.params().get("res.conv1.weight").unwrap();
        assert!(w.len() > 10_000);
        let fan_in = 64.0 * 9.0;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / fan_in;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "var {var} vs expected {expect}"
        );
    }

    #[test]
    fn generator_output_bounded_and_shaped() {
        let mut gen: GeneratorNet<f32> =
            GeneratorNet::init(GeneratorArch::for_channels(3), 11).unwrap();
        let x_t = images(2, 3, 8, 8, 2);
        let s_t = x_t.map(|v| if v > 0.5 { 1.0 } else { -1.0 });
        let mut g = Graph::new();
        let x = g.constant(x_t);
        let sx = g.constant(s_t);
        let (out, _) = gen.forward(&mut g, x, sx, Mode::Train, false).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 3, 8, 8]);
        assert!(g.value(out).linf_norm() <= 1.0);
    }

    #[test]
    fn generator_rejects_mismatched_signed_gradient() {
        let mut gen: GeneratorNet<f32> =
            GeneratorNet::init(GeneratorArch::for_channels(3), 11).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2, 3, 8, 8, 2));
        let sx = g.constant(Tensor::zeros(vec![2, 3, 4, 4]));
        assert!(gen.forward(&mut g, x, sx, Mode::Eval, false).is_err());
    }

    #[test]
    fn spectral_norm_toggle_is_rejected() {
        let arch = GeneratorArch {
            image_channels: 3,
            spectral_norm: true,
        };
        assert!(GeneratorNet::<f32>::new(arch).is_err());
    }

    #[test]
    fn resblock_with_zeroed_branch_is_identity_on_nonnegative_input() {
        // Zero the residual branch and give every BN identity running
        // statistics; in eval mode the whole generator then reduces to
        // tanh(identity-normalized conv stack). We probe just the block by
        // checking that zeroing res.* makes layer-1 output pass through:
        // g(x) with zeroed branch == g(x) with the branch removed. The
        // observable contract: res output equals res input (which is
        // post-ReLU, hence nonnegative).
        let mut gen: GeneratorNet<f64> =
            GeneratorNet::init(GeneratorArch::for_channels(3), 5).unwrap();
        let w64 = GEN_WIDTH;
        gen.params_mut()
            .set("res.conv1.weight", Tensor::zeros(vec![w64, w64, 3, 3]));
        gen.params_mut()
            .set("res.conv2.weight", Tensor::zeros(vec![w64, w64, 3, 3]));
        gen.params_mut().set("res.bn2.beta", Tensor::zeros(vec![w64]));

        // Build the block in isolation: feed a nonnegative tensor through
        // conv-bn-relu-conv-bn + skip with eval-mode identity stats.
        let mut g = Graph::new();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::<f64>::uniform(vec![2, w64, 4, 4], 0.0, 1.0, &mut rng);
        let x = g.constant(input.clone());
        let binding = gen.params().bind(&mut g, false);
        let l = &gen.layers;
        let mut pending = Vec::new();
        let r = g.conv2d(x, binding.var(l.res.conv1.w), None, 1, 1).unwrap();
        let r = bn_forward(&mut g, &binding, &gen.params, &mut pending, l.res.bn1, r, Mode::Eval)
            .unwrap();
        let r = g.relu(r);
        let r = g.conv2d(r, binding.var(l.res.conv2.w), None, 1, 1).unwrap();
        let r = bn_forward(&mut g, &binding, &gen.params, &mut pending, l.res.bn2, r, Mode::Eval)
            .unwrap();
        let sum = g.add(x, r).unwrap();
        let out = g.relu(sum);
        for (a, b) in g.value(out).iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_and_generator_params_disjoint() {
        let mut net: TargetNet<f32> = TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 7);
        let gen: GeneratorNet<f32> =
            GeneratorNet::init(GeneratorArch::for_channels(3), 7).unwrap();
        let gen_before = gen.params().clone();
        // Mutating the target leaves the generator untouched.
        let w = net.params().get("fc.weight").unwrap().map(|v| v + 1.0);
        net.params_mut().set("fc.weight", w);
        assert!(gen.params().bits_eq(&gen_before));
    }

    #[test]
    fn eval_mode_output_independent_of_batch_composition() {
        let mut net: TargetNet<f32> =
            TargetNet::init(TargetArch::default(), [3, 8, 8], 4, 3);
        // Refresh running stats once so they are not the init values.
        let xw = images(6, 3, 8, 8, 10);
        let mut g = Graph::new();
        let x = g.constant(xw.clone());
        net.forward_train(&mut g, x).unwrap();

        // Same example evaluated alone and inside a different batch.
        let single = images(1, 3, 8, 8, 20);
        let mut other = single.data().to_vec();
        other.extend_from_slice(images(3, 3, 8, 8, 21).data());
        let batch = Tensor::new(vec![4, 3, 8, 8], other);

        let mut g1 = Graph::new();
        let x1 = g1.constant(single);
        let l1 = net.forward_eval(&mut g1, x1).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(batch);
        let l2 = net.forward_eval(&mut g2, x2).unwrap();
        for i in 0..4 {
            let a = g1.value(l1).data()[i];
            let b = g2.value(l2).data()[i];
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
