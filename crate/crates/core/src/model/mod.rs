//! Network definitions and parameter storage.
//!
//! A [`ModelSpec`] is a declarative layer list; a [`ParameterSet`] holds the
//! named tensors it needs. The CNNs follow a fixed block plan: each block is
//! `conv3x3 -> batch_norm -> leaky_relu`, with 2x2 max-pools after blocks 2
//! and 4, a global average pool after block 5, and a final linear layer.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use crate::autodiff::{BatchStats, Graph, NormMode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_RATE: f64 = 0.1;

/// Channel plan of the large CNN: output channels of blocks 1 to 5.
const LARGE_CNN_CHANNELS: [usize; 5] = [128, 128, 256, 256, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    LargeCnn,
    SmallCnn,
    /// Two hidden layers of 100 units.
    Mlp,
    /// Softmax regression: a single affine map.
    Linear,
}

impl ModelKind {
    pub fn is_cnn(self) -> bool {
        matches!(self, ModelKind::LargeCnn | ModelKind::SmallCnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::LargeCnn => "large_cnn",
            ModelKind::SmallCnn => "small_cnn",
            ModelKind::Mlp => "mlp",
            ModelKind::Linear => "linear",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large_cnn" => Ok(ModelKind::LargeCnn),
            "small_cnn" => Ok(ModelKind::SmallCnn),
            "mlp" => Ok(ModelKind::Mlp),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected large_cnn, small_cnn, mlp or linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    LeakyRelu,
    MaxPool,
    GlobalAvgPool,
    /// Flattens its input to `(B, in_features)` first.
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Channels for CNNs, feature count otherwise.
    pub input_channels: usize,
    pub class_count: usize,
    pub layers: Vec<Layer>,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_channels: usize, class_count: usize) -> Self {
        let layers = match kind {
            ModelKind::LargeCnn => cnn_layers(input_channels, class_count, &LARGE_CNN_CHANNELS),
            ModelKind::SmallCnn => {
                let halved = LARGE_CNN_CHANNELS.map(|c| c / 2);
                cnn_layers(input_channels, class_count, &halved)
            }
            ModelKind::Mlp => vec![
                linear("fc1", input_channels, 100),
                Layer::LeakyRelu,
                linear("fc2", 100, 100),
                Layer::LeakyRelu,
                linear("fc3", 100, class_count),
            ],
            ModelKind::Linear => vec![linear("fc", input_channels, class_count)],
        };
        ModelSpec {
            kind,
            input_channels,
            class_count,
            layers,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// `(name, dims, fan_in)` of every trainable tensor, in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    name,
                    in_channels,
                    out_channels,
                } => {
                    let fan_in = in_channels * 9;
                    out.push((
                        format!("{name}.weight"),
                        vec![*out_channels, *in_channels, 3, 3],
                        fan_in,
                    ));
                    out.push((format!("{name}.bias"), vec![*out_channels], fan_in));
                }
                Layer::BatchNorm { name, channels } => {
                    out.push((format!("{name}.gamma"), vec![*channels], 0));
                    out.push((format!("{name}.beta"), vec![*channels], 0));
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    out.push((
                        format!("{name}.weight"),
                        vec![*out_features, *in_features],
                        *in_features,
                    ));
                    out.push((format!("{name}.bias"), vec![*out_features], *in_features));
                }
                Layer::LeakyRelu | Layer::MaxPool | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    /// `(name, dims)` of every non-trainable buffer (batch-norm running
    /// statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::BatchNorm { name, channels } = layer {
                out.push((format!("{name}.running_mean"), vec![*channels]));
                out.push((format!("{name}.running_var"), vec![*channels]));
                out.push((format!("{name}.updates"), vec![1]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, d, _)| d.iter().product::<usize>())
            .sum()
    }

    /// Validates the per-sample input dims `(C, H, W)` or `(D)`.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        if self.kind.is_cnn() {
            let &[_, c, h, w] = dims else {
                return Err(Error::Shape(format!(
                    "{} expects (B, C, H, W) input, got {dims:?}",
                    self.kind
                )));
            };
            if c != self.input_channels {
                return Err(Error::Shape(format!(
                    "{} expects {} input channels, got {c}",
                    self.kind, self.input_channels
                )));
            }
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::Shape(format!(
                    "{} needs spatial dims divisible by 4, got {h}x{w}",
                    self.kind
                )));
            }
        } else if dims.len() != 2 || dims[1] != self.input_channels {
            return Err(Error::Shape(format!(
                "{} expects (B, {}) input, got {dims:?}",
                self.kind, self.input_channels
            )));
        }
        Ok(())
    }
}

fn linear(name: &str, in_features: usize, out_features: usize) -> Layer {
    Layer::Linear {
        name: name.into(),
        in_features,
        out_features,
    }
}

fn cnn_layers(input_channels: usize, class_count: usize, channels: &[usize; 5]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = input_channels;
    for (i, &cout) in channels.iter().enumerate() {
        let block = format!("block{}", i + 1);
        layers.push(Layer::Conv {
            name: format!("{block}.conv"),
            in_channels: cin,
            out_channels: cout,
        });
        layers.push(Layer::BatchNorm {
            name: format!("{block}.bn"),
            channels: cout,
        });
        layers.push(Layer::LeakyRelu);
        if i == 1 || i == 3 {
            layers.push(Layer::MaxPool);
        }
        cin = cout;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear("fc", cin, class_count));
    layers
}

/// Named trainable tensors plus batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, unit
    /// gamma, zero beta; running mean 0 and variance 1, not yet updated.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Self {
        let mut params = BTreeMap::new();
        for (name, dims, fan_in) in spec.parameter_shapes() {
            let t = if name.ends_with(".weight") {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&dims, |_| std * rng.normal())
            } else if name.ends_with(".gamma") {
                Tensor::full(&dims, 1.0)
            } else {
                Tensor::zeros(&dims)
            };
            params.insert(name, t);
        }
        let buffers = spec
            .buffer_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let fill = if name.ends_with(".running_var") { 1.0 } else { 0.0 };
                (name, Tensor::full(&dims, fill))
            })
            .collect();
        ParameterSet { params, buffers }
    }

    /// Assembles a set from named tensors, checking names and shapes against
    /// `spec`. Errors name the first missing or mismatched tensor.
    pub fn from_named(spec: &ModelSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pool: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in named {
            if pool.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let mut take = |name: &str, dims: &[usize]| -> Result<Tensor> {
            let t = pool
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}` for {}", spec.kind)))?;
            if t.dims() != dims {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dims {:?}, {} expects {dims:?}",
                    t.dims(),
                    spec.kind
                )));
            }
            Ok(t)
        };
        let mut params = BTreeMap::new();
        for (name, dims, _) in spec.parameter_shapes() {
            let t = take(&name, &dims)?;
            params.insert(name, t);
        }
        let mut buffers = BTreeMap::new();
        for (name, dims) in spec.buffer_shapes() {
            let t = take(&name, &dims)?;
            buffers.insert(name, t);
        }
        if let Some(name) = pool.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor `{name}` for {}",
                spec.kind
            )));
        }
        Ok(ParameterSet { params, buffers })
    }

    /// Trainable tensors then buffers, each in name order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    fn running_stats(&self, bn: &str) -> RunningStats {
        let get = |suffix: &str| &self.buffers[&format!("{bn}.{suffix}")];
        RunningStats {
            mean: get("running_mean").data().to_vec(),
            var: get("running_var").data().to_vec(),
            updates: get("updates").data()[0] as u64,
        }
    }

    /// Folds batch statistics from a training forward into the running
    /// estimates.
    pub fn absorb_stats(&mut self, stats: &[(String, BatchStats)], rate: f64) {
        for (bn, batch) in stats {
            let mut state = self.running_stats(bn);
            state.absorb(batch, rate);
            let mut put = |suffix: &str, values: &[f64]| {
                self.buffers
                    .get_mut(&format!("{bn}.{suffix}"))
                    .expect("buffer exists for every batch-norm layer")
                    .data_mut()
                    .copy_from_slice(values);
            };
            put("running_mean", &state.mean);
            put("running_var", &state.var);
            put("updates", &[state.updates as f64]);
        }
    }
}

/// Parameter leaves bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Reads back the gradient buffers after [`Graph::backward`]. Parameters
    /// bound without gradients are skipped.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }
}

/// Result of [`Model::forward`].
pub struct ForwardPass {
    pub logits: Var,
    /// Batch statistics to fold into the running estimates. Only filled for
    /// `NormMode::Train { update_stats: true }`.
    pub stat_updates: Vec<(String, BatchStats)>,
}

/// One row of a table-granularity shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub label: String,
    /// Per-sample output dims.
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Self {
        let params = ParameterSet::init(&spec, rng);
        Model { spec, params }
    }

    /// Builds one of the CNNs for grayscale input and two classes.
    pub fn build_cnn(kind: ModelKind, rng: &mut Rng) -> Result<Self> {
        if !kind.is_cnn() {
            return Err(Error::Config(format!("{kind} is not a CNN")));
        }
        Ok(Self::new(ModelSpec::new(kind, 1, 2), rng))
    }

    /// Builds the `2 -> 100 -> 100 -> 2` MLP.
    pub fn build_mlp(rng: &mut Rng) -> Self {
        Self::new(ModelSpec::new(ModelKind::Mlp, 2, 2), rng)
    }

    /// Deep copy used as the frozen parameter estimate.
    pub fn snapshot(&self) -> Model {
        self.clone()
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var, mode: NormMode) -> Result<ForwardPass> {
        self.run_layers(g, bound, x, mode, None)
    }

    /// Logits for `x` without recording gradients.
    pub fn logits(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mode = match mode {
            NormMode::Train { .. } => NormMode::Train { update_stats: false },
            NormMode::Eval => NormMode::Eval,
        };
        let pass = self.forward(&mut g, &bound, xv, mode)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Per-sample output dims after each block, pool and the linear layer.
    /// Batch norm uses batch statistics without touching running state.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<TraceRow>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rows = Vec::new();
        self.run_layers(
            &mut g,
            &bound,
            xv,
            NormMode::Train { update_stats: false },
            Some(&mut rows),
        )?;
        Ok(rows)
    }

    fn run_layers(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mode: NormMode,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<ForwardPass> {
        self.spec.check_input(g.value(x).dims())?;
        let mut h = x;
        let mut stat_updates = Vec::new();
        let mut blocks = 0;
        let mut record = |g: &Graph, v: Var, label: String| {
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceRow {
                    label,
                    dims: g.value(v).dims()[1..].to_vec(),
                });
            }
        };
        for layer in &self.spec.layers {
            h = match layer {
                Layer::Conv { name, .. } => g.conv2d(
                    h,
                    bound.var(&format!("{name}.weight")),
                    bound.var(&format!("{name}.bias")),
                )?,
                Layer::BatchNorm { name, .. } => {
                    let gamma = bound.var(&format!("{name}.gamma"));
                    let beta = bound.var(&format!("{name}.beta"));
                    match mode {
                        NormMode::Train { update_stats } => {
                            let (out, stats) = g.batch_norm_train(h, gamma, beta, BN_EPS)?;
                            if update_stats {
                                stat_updates.push((name.clone(), stats));
                            }
                            out
                        }
                        NormMode::Eval => {
                            let state = self.params.running_stats(name);
                            g.batch_norm_eval(h, gamma, beta, &state, BN_EPS)
                                .map_err(|e| match e {
                                    Error::UninitializedStats(_) => Error::UninitializedStats(name.clone()),
                                    other => other,
                                })?
                        }
                    }
                }
                Layer::LeakyRelu => {
                    let out = g.leaky_relu(h, self.spec.leaky_slope);
                    if self.spec.kind.is_cnn() {
                        blocks += 1;
                        record(g, out, format!("Block {blocks}"));
                    }
                    out
                }
                Layer::MaxPool => {
                    let out = g.max_pool2(h)?;
                    record(g, out, "MaxPool".into());
                    out
                }
                Layer::GlobalAvgPool => {
                    let out = g.global_avg_pool(h)?;
                    record(g, out, "AdaptiveAvgPool".into());
                    out
                }
                Layer::Linear { name, .. } => {
                    let dims = g.value(h).dims().to_vec();
                    let flat = if dims.len() > 2 {
                        let batch = dims[0];
                        g.reshape(h, &[batch, dims[1..].iter().product()])?
                    } else {
                        h
                    };
                    let out = g.affine(
                        flat,
                        bound.var(&format!("{name}.weight")),
                        bound.var(&format!("{name}.bias")),
                    )?;
                    record(g, out, "Linear".into());
                    out
                }
            };
        }
        Ok(ForwardPass {
            logits: h,
            stat_updates,
        })
    }
}
