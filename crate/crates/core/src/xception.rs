//! The modified Xception classifier: the Xception feature extractor (entry,
//! middle and exit flows with residual shortcuts) followed by a
//! GAP → Dense(128) → ReLU → BN → Dropout(0.2) → Dense(1) → Sigmoid head.
//!
//! The graph is an ordered node list over a named parameter registry.
//! Parameter names are slash-separated layer paths such as
//! `entry/block2/sepconv1/pointwise_kernel` or `head/dense1/bias`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::head::HeadParams;
use crate::tensor::{
    self, batch_norm_apply, conv2d, dense_affine, dropout_mask, global_average_pool, max_pool2d,
    separable_conv2d, Activation, ConvSpec, Mode, Padding, Tensor, TensorError,
};

/// Input side length used by the published model.
pub const PAPER_INPUT_SIDE: usize = 224;
pub const INPUT_CHANNELS: usize = 3;
pub const BASE_BN_EPSILON: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input batch shape {got:?} does not match the model contract N×{side}×{side}×3")]
    InputShape { got: Vec<usize>, side: usize },
    #[error("model weights have not been loaded or initialized")]
    WeightsNotLoaded,
    #[error("parameter `{name}` contains a non-finite value")]
    NonFiniteWeight { name: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("input side {0} is too small for the Xception base")]
    InputTooSmall(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Batch moments of one BN node: (moving-mean param, mean, moving-variance param, variance).
type BnMoments = (ParamId, Vec<f32>, ParamId, Vec<f32>);

/// Backbone family. Only Xception is implemented; the enum is the extension
/// point for alternative feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Xception,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub dense1_units: usize,
    pub dropout_rate: f32,
    pub dense2_units: usize,
    pub bn_epsilon: f32,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            dense1_units: 128,
            dropout_rate: 0.2,
            dense2_units: 1,
            bn_epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Base,
    Head,
}

/// What a parameter tensor is, which also fixes how it is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvKernel { fan_in: usize },
    DenseKernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub trainable: bool,
    pub section: Section,
    pub role: ParamRole,
    pub values: Tensor,
}

impl ParamTensor {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv2d {
        kernel: ParamId,
        spec: ConvSpec,
        shortcut: bool,
    },
    SeparableConv2d {
        depthwise: ParamId,
        pointwise: ParamId,
        spec: ConvSpec,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        variance: ParamId,
        epsilon: f32,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    Add,
    GlobalAvgPool,
    Dense {
        kernel: ParamId,
        bias: ParamId,
    },
    Dropout {
        rate: f32,
    },
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub section: Section,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    backbone: BackboneKind,
    input_side: usize,
    head: HeadSpec,
    nodes: Vec<Node>,
    params: Vec<ParamTensor>,
    index: HashMap<String, ParamId>,
    base_output: NodeId,
    pooled: NodeId,
    weights_loaded: bool,
}

struct Builder {
    nodes: Vec<Node>,
    params: Vec<ParamTensor>,
    index: HashMap<String, ParamId>,
    section: Section,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, role: ParamRole) -> ParamId {
        let trainable = !matches!(role, ParamRole::MovingMean | ParamRole::MovingVariance);
        let id = ParamId(self.params.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(ParamTensor {
            name,
            trainable,
            section: self.section,
            role,
            values: Tensor::zeros(shape),
        });
        id
    }

    fn node(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs: inputs.to_vec(),
            section: self.section,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        path: &str,
        x: NodeId,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        shortcut: bool,
    ) -> NodeId {
        let kernel = self.param(
            format!("{path}/kernel"),
            vec![k, k, cin, cout],
            ParamRole::ConvKernel { fan_in: k * k * cin },
        );
        let spec = ConvSpec::new(k, stride, padding);
        self.node(path, Op::Conv2d { kernel, spec, shortcut }, &[x])
    }

    fn sepconv(&mut self, path: &str, x: NodeId, cin: usize, cout: usize) -> NodeId {
        let depthwise = self.param(
            format!("{path}/depthwise_kernel"),
            vec![3, 3, cin],
            ParamRole::ConvKernel { fan_in: 9 },
        );
        let pointwise = self.param(
            format!("{path}/pointwise_kernel"),
            vec![1, 1, cin, cout],
            ParamRole::ConvKernel { fan_in: cin },
        );
        let spec = ConvSpec::new(3, 1, Padding::Same);
        self.node(
            path,
            Op::SeparableConv2d {
                depthwise,
                pointwise,
                spec,
            },
            &[x],
        )
    }

    fn bn(&mut self, path: &str, x: NodeId, c: usize, epsilon: f32) -> NodeId {
        let gamma = self.param(format!("{path}/gamma"), vec![c], ParamRole::Gamma);
        let beta = self.param(format!("{path}/beta"), vec![c], ParamRole::Beta);
        let mean = self.param(format!("{path}/moving_mean"), vec![c], ParamRole::MovingMean);
        let variance = self.param(
            format!("{path}/moving_variance"),
            vec![c],
            ParamRole::MovingVariance,
        );
        self.node(
            path,
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                variance,
                epsilon,
            },
            &[x],
        )
    }

    fn relu(&mut self, path: &str, x: NodeId) -> NodeId {
        self.node(path, Op::Relu, &[x])
    }

    fn pool(&mut self, path: &str, x: NodeId) -> NodeId {
        self.node(
            path,
            Op::MaxPool {
                window: 3,
                stride: 2,
                padding: Padding::Same,
            },
            &[x],
        )
    }

    /// `[relu] → sepconv → bn → relu → sepconv → bn → maxpool`, added to a
    /// strided 1×1 conv + BN shortcut.
    fn down_block(&mut self, path: &str, x: NodeId, cin: usize, mid: usize, cout: usize, lead_relu: bool) -> NodeId {
        let sc = self.conv(&format!("{path}/shortcut"), x, cin, cout, 1, 2, Padding::Same, true);
        let sc = self.bn(&format!("{path}/shortcut_bn"), sc, cout, BASE_BN_EPSILON);
        let mut y = x;
        if lead_relu {
            y = self.relu(&format!("{path}/sepconv1_act"), y);
        }
        y = self.sepconv(&format!("{path}/sepconv1"), y, cin, mid);
        y = self.bn(&format!("{path}/sepconv1_bn"), y, mid, BASE_BN_EPSILON);
        y = self.relu(&format!("{path}/sepconv2_act"), y);
        y = self.sepconv(&format!("{path}/sepconv2"), y, mid, cout);
        y = self.bn(&format!("{path}/sepconv2_bn"), y, cout, BASE_BN_EPSILON);
        y = self.pool(&format!("{path}/pool"), y);
        self.node(format!("{path}/add"), Op::Add, &[y, sc])
    }
}

/// Builds the modified Xception for the published 224×224×3 input.
pub fn build_modified_xception(head: HeadSpec) -> ModelGraph {
    build_with_input_side(head, PAPER_INPUT_SIDE).expect("224 is a valid input side")
}

/// Builds the same graph for a square input of another side length.
/// Anything other than 224 is non-published geometry, intended for
/// reduced-cost experiments.
pub fn build_with_input_side(head: HeadSpec, side: usize) -> Result<ModelGraph> {
    // conv1 (3×3 s2 VALID) then conv2 (3×3 VALID) must leave at least one pixel.
    if side < 7 {
        return Err(ModelError::InputTooSmall(side));
    }
    let mut b = Builder {
        nodes: Vec::new(),
        params: Vec::new(),
        index: HashMap::new(),
        section: Section::Base,
    };
    let eps = BASE_BN_EPSILON;
    let input = b.node("input", Op::Input, &[]);

    // Entry flow.
    let mut x = b.conv("entry/block1/conv1", input, 3, 32, 3, 2, Padding::Valid, false);
    x = b.bn("entry/block1/conv1_bn", x, 32, eps);
    x = b.relu("entry/block1/conv1_act", x);
    x = b.conv("entry/block1/conv2", x, 32, 64, 3, 1, Padding::Valid, false);
    x = b.bn("entry/block1/conv2_bn", x, 64, eps);
    x = b.relu("entry/block1/conv2_act", x);
    x = b.down_block("entry/block2", x, 64, 128, 128, false);
    x = b.down_block("entry/block3", x, 128, 256, 256, true);
    x = b.down_block("entry/block4", x, 256, 728, 728, true);

    // Middle flow.
    for blk in 5..=12 {
        let residual = x;
        let mut y = x;
        for i in 1..=3 {
            let path = format!("middle/block{blk}/sepconv{i}");
            y = b.relu(&format!("{path}_act"), y);
            y = b.sepconv(&path, y, 728, 728);
            y = b.bn(&format!("{path}_bn"), y, 728, eps);
        }
        x = b.node(format!("middle/block{blk}/add"), Op::Add, &[y, residual]);
    }

    // Exit flow.
    x = b.down_block("exit/block13", x, 728, 728, 1024, true);
    x = b.sepconv("exit/block14/sepconv1", x, 1024, 1536);
    x = b.bn("exit/block14/sepconv1_bn", x, 1536, eps);
    x = b.relu("exit/block14/sepconv1_act", x);
    x = b.sepconv("exit/block14/sepconv2", x, 1536, 2048);
    x = b.bn("exit/block14/sepconv2_bn", x, 2048, eps);
    let base_output = b.relu("exit/block14/sepconv2_act", x);

    // Head.
    b.section = Section::Head;
    let pooled = b.node("head/global_average_pooling", Op::GlobalAvgPool, &[base_output]);
    let d1k = b.param(
        "head/dense1/kernel".into(),
        vec![2048, head.dense1_units],
        ParamRole::DenseKernel,
    );
    let d1b = b.param("head/dense1/bias".into(), vec![head.dense1_units], ParamRole::Bias);
    let mut h = b.node(
        "head/dense1",
        Op::Dense {
            kernel: d1k,
            bias: d1b,
        },
        &[pooled],
    );
    h = b.relu("head/dense1_act", h);
    h = b.bn("head/bn", h, head.dense1_units, head.bn_epsilon);
    h = b.node(
        "head/dropout",
        Op::Dropout {
            rate: head.dropout_rate,
        },
        &[h],
    );
    let d2k = b.param(
        "head/dense2/kernel".into(),
        vec![head.dense1_units, head.dense2_units],
        ParamRole::DenseKernel,
    );
    let d2b = b.param("head/dense2/bias".into(), vec![head.dense2_units], ParamRole::Bias);
    h = b.node(
        "head/dense2",
        Op::Dense {
            kernel: d2k,
            bias: d2b,
        },
        &[h],
    );
    b.node("head/sigmoid", Op::Sigmoid, &[h]);

    Ok(ModelGraph {
        backbone: BackboneKind::Xception,
        input_side: side,
        head,
        nodes: b.nodes,
        params: b.params,
        index: b.index,
        base_output,
        pooled,
        weights_loaded: false,
    })
}

/// Marks every base tensor non-trainable; head dense weights/biases and BN
/// gamma/beta stay trainable, head BN moving statistics do not.
pub fn freeze_base(mut model: ModelGraph) -> ModelGraph {
    model.freeze_base_in_place();
    model
}

pub fn count_params(model: &ModelGraph) -> ParamCounts {
    model.params.iter().fold(
        ParamCounts {
            total: 0,
            trainable: 0,
        },
        |acc, p| ParamCounts {
            total: acc.total + p.numel(),
            trainable: acc.trainable + if p.trainable { p.numel() } else { 0 },
        },
    )
}

/// Class-1 (Non-COVID) probability for every slice in `batch`.
pub fn forward(model: &ModelGraph, batch: &Tensor, mode: Mode, seed: u64) -> Result<Vec<f32>> {
    model.forward(batch, mode, seed)
}

impl ModelGraph {
    pub fn backbone(&self) -> BackboneKind {
        self.backbone
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|id| &self.params[id.0])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|id| &mut self.params[id.0])
    }

    pub fn weights_loaded(&self) -> bool {
        self.weights_loaded
    }

    /// Declares the registry fully populated (after binding or initializing).
    pub fn mark_loaded(&mut self) {
        self.weights_loaded = true;
    }

    pub fn freeze_base_in_place(&mut self) {
        for p in &mut self.params {
            p.trainable = p.section == Section::Head
                && !matches!(p.role, ParamRole::MovingMean | ParamRole::MovingVariance);
        }
    }

    pub fn base_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.section == Section::Base)
            .map(ParamTensor::numel)
            .sum()
    }

    /// Convolution-bearing base layers; a separable conv counts once and the
    /// 1×1 shortcut projections are excluded.
    pub fn conv_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.section == Section::Base)
            .filter(|n| {
                matches!(n.op, Op::SeparableConv2d { .. } | Op::Conv2d { shortcut: false, .. })
            })
            .count()
    }

    /// Per-image `[h, w, c]` of the base output, from shape propagation alone.
    pub fn base_output_shape(&self) -> [usize; 3] {
        let shapes = self.infer_shapes();
        shapes[self.base_output.0]
    }

    /// `[h, w, c]` (or `[1, 1, f]` for flat tensors) of every node output.
    pub fn infer_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inp = node.inputs.first().map(|i| shapes[i.0]);
            let s = match &node.op {
                Op::Input => [self.input_side, self.input_side, INPUT_CHANNELS],
                Op::Conv2d { kernel, spec, .. } => {
                    let [h, w, _] = inp.unwrap();
                    let cout = self.params[kernel.0].shape()[3];
                    let (oh, ow, _, _) = spec.output_geometry("shape", h, w).expect("valid geometry");
                    [oh, ow, cout]
                }
                Op::SeparableConv2d { pointwise, .. } => {
                    let [h, w, _] = inp.unwrap();
                    [h, w, self.params[pointwise.0].shape()[3]]
                }
                Op::MaxPool {
                    window,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = inp.unwrap();
                    let (oh, _) = padding.geometry(h, *window, *stride).expect("valid geometry");
                    let (ow, _) = padding.geometry(w, *window, *stride).expect("valid geometry");
                    [oh, ow, c]
                }
                Op::GlobalAvgPool => [1, 1, inp.unwrap()[2]],
                Op::Dense { kernel, .. } => [1, 1, self.params[kernel.0].shape()[1]],
                _ => inp.unwrap(),
            };
            shapes.push(s);
        }
        shapes
    }

    /// Fails if the registry was never populated or holds non-finite values.
    pub fn check_weights(&self) -> Result<()> {
        if !self.weights_loaded {
            return Err(ModelError::WeightsNotLoaded);
        }
        for p in &self.params {
            if p.values.data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteWeight { name: p.name.clone() });
            }
        }
        Ok(())
    }

    /// Seeded random initialization of every tensor. Convolution kernels use
    /// He-normal scaling; head dense kernels a normal with stddev 0.05
    /// truncated at two standard deviations; biases and BN shifts zero; BN
    /// scales and variances one.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            init_param(p, &mut rng);
        }
        self.weights_loaded = true;
    }

    /// Sets every base BN moving mean and variance to the per-channel
    /// statistics its input has on `probe`, in graph order, so a randomly
    /// initialized base produces unit-scale activations. Head tensors are
    /// untouched.
    pub fn calibrate_base_bn(&mut self, probe: &Tensor) -> Result<()> {
        self.check_batch(probe)?;
        self.check_weights()?;
        let mut stats = Vec::new();
        self.run_with(probe.clone(), self.base_output, Some(&mut stats))?;
        for (mid, m, vid, v) in stats {
            self.params[mid.0].values.data_mut().copy_from_slice(&m);
            self.params[vid.0].values.data_mut().copy_from_slice(&v);
        }
        self.check_weights()
    }

    /// Re-initializes only the head tensors (seeded).
    pub fn init_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut().filter(|p| p.section == Section::Head) {
            init_param(p, &mut rng);
        }
    }

    fn data(&self, id: ParamId) -> &[f32] {
        self.params[id.0].values.data()
    }

    fn named(&self, name: &str) -> &[f32] {
        self.param(name).expect("head parameter exists").values.data()
    }

    fn named_mut(&mut self, name: &str) -> &mut [f32] {
        self.param_mut(name).expect("head parameter exists").values.data_mut()
    }

    /// Snapshot of the head parameters in the layout the head kernels use.
    pub fn head_params(&self) -> HeadParams<f32> {
        HeadParams {
            in_features: 2048,
            hidden: self.head.dense1_units,
            dense1_kernel: self.named("head/dense1/kernel").to_vec(),
            dense1_bias: self.named("head/dense1/bias").to_vec(),
            bn_gamma: self.named("head/bn/gamma").to_vec(),
            bn_beta: self.named("head/bn/beta").to_vec(),
            bn_moving_mean: self.named("head/bn/moving_mean").to_vec(),
            bn_moving_variance: self.named("head/bn/moving_variance").to_vec(),
            bn_epsilon: self.head.bn_epsilon,
            dense2_kernel: self.named("head/dense2/kernel").to_vec(),
            dense2_bias: self.named("head/dense2/bias").to_vec(),
        }
    }

    pub fn set_head_params(&mut self, head: &HeadParams<f32>) -> Result<()> {
        head.check()?;
        if head.in_features != 2048 || head.hidden != self.head.dense1_units {
            return Err(TensorError::InvalidArgument {
                op: "set_head_params",
                msg: format!("head geometry {}x{} does not match the model", head.in_features, head.hidden),
            }
            .into());
        }
        self.named_mut("head/dense1/kernel").copy_from_slice(&head.dense1_kernel);
        self.named_mut("head/dense1/bias").copy_from_slice(&head.dense1_bias);
        self.named_mut("head/bn/gamma").copy_from_slice(&head.bn_gamma);
        self.named_mut("head/bn/beta").copy_from_slice(&head.bn_beta);
        self.named_mut("head/bn/moving_mean").copy_from_slice(&head.bn_moving_mean);
        self.named_mut("head/bn/moving_variance").copy_from_slice(&head.bn_moving_variance);
        self.named_mut("head/dense2/kernel").copy_from_slice(&head.dense2_kernel);
        self.named_mut("head/dense2/bias").copy_from_slice(&head.dense2_bias);
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        match batch.shape() {
            &[n, h, w, c] if h == self.input_side && w == self.input_side && c == INPUT_CHANNELS => Ok(n),
            other => Err(ModelError::InputShape {
                got: other.to_vec(),
                side: self.input_side,
            }),
        }
    }

    /// Evaluates nodes `0..=stop` on a single-image (or small) batch.
    fn run(&self, input: Tensor, stop: NodeId) -> Result<Tensor> {
        self.run_with(input, stop, None)
    }

    /// With `record`, every BN node normalizes with the statistics of its own
    /// input and pushes them as `(mean id, mean, variance id, variance)`.
    fn run_with(
        &self,
        input: Tensor,
        stop: NodeId,
        mut record: Option<&mut Vec<BnMoments>>,
    ) -> Result<Tensor> {
        let end = stop.0 + 1;
        let mut uses = vec![0usize; end];
        for node in &self.nodes[..end] {
            for i in &node.inputs {
                uses[i.0] += 1;
            }
        }
        uses[stop.0] += 1;
        let mut values: Vec<Option<Tensor>> = vec![None; end];
        let mut input = Some(input);

        for (idx, node) in self.nodes[..end].iter().enumerate() {
            let mut take = |id: NodeId| -> Tensor {
                uses[id.0] -= 1;
                if uses[id.0] == 0 {
                    values[id.0].take().expect("value computed before use")
                } else {
                    values[id.0].clone().expect("value computed before use")
                }
            };
            let out = match &node.op {
                Op::Input => input.take().expect("single input node"),
                Op::Conv2d { kernel, spec, .. } => {
                    let x = take(node.inputs[0]);
                    conv2d(&x, &self.params[kernel.0].values, spec, None)?
                }
                Op::SeparableConv2d {
                    depthwise,
                    pointwise,
                    spec,
                } => {
                    let x = take(node.inputs[0]);
                    separable_conv2d(
                        &x,
                        &self.params[depthwise.0].values,
                        &self.params[pointwise.0].values,
                        spec,
                    )?
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    variance,
                    epsilon,
                } => {
                    let mut x = take(node.inputs[0]);
                    if let Some(rec) = record.as_deref_mut() {
                        let (m, v) = channel_moments(&x);
                        batch_norm_apply(x.data_mut(), self.data(*gamma), self.data(*beta), &m, &v, *epsilon);
                        rec.push((*mean, m, *variance, v));
                    } else {
                        batch_norm_apply(
                            x.data_mut(),
                            self.data(*gamma),
                            self.data(*beta),
                            self.data(*mean),
                            self.data(*variance),
                            *epsilon,
                        );
                    }
                    x
                }
                Op::Relu => {
                    let mut x = take(node.inputs[0]);
                    tensor::activation_inplace(&mut x, Activation::Relu);
                    x
                }
                Op::Sigmoid => {
                    let mut x = take(node.inputs[0]);
                    tensor::activation_inplace(&mut x, Activation::Sigmoid);
                    x
                }
                Op::MaxPool {
                    window,
                    stride,
                    padding,
                } => max_pool2d(&take(node.inputs[0]), *window, *stride, *padding)?,
                Op::Add => {
                    let mut a = take(node.inputs[0]);
                    let b = take(node.inputs[1]);
                    if a.shape() != b.shape() {
                        return Err(TensorError::InvalidArgument {
                            op: "add",
                            msg: format!("{:?} vs {:?} at {}", a.shape(), b.shape(), node.name),
                        }
                        .into());
                    }
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    a
                }
                Op::GlobalAvgPool => global_average_pool(&take(node.inputs[0]))?,
                Op::Dense { kernel, bias } => {
                    dense_affine(&take(node.inputs[0]), &self.params[kernel.0].values, self.data(*bias))?
                }
                // Dropout is the identity outside training.
                Op::Dropout { .. } => take(node.inputs[0]),
            };
            values[idx] = Some(out);
        }
        Ok(values[stop.0].take().expect("stop node evaluated"))
    }

    fn per_image(&self, batch: &Tensor, stop: NodeId) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.check_weights()?;
        let n = batch.shape()[0];
        let outs = (0..n)
            .into_par_iter()
            .map(|i| self.run(batch.slice_rows(i, i + 1)?, stop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat_rows(&outs)?)
    }

    /// Base feature maps, `N×7×7×2048` for 224-pixel input.
    pub fn base_output(&self, batch: &Tensor) -> Result<Tensor> {
        self.per_image(batch, self.base_output)
    }

    /// Globally pooled base features, `N×2048`. The base is frozen and its
    /// BN layers always run on moving statistics, so these are the same in
    /// training and inference.
    pub fn pooled_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.per_image(batch, self.pooled)
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode, seed: u64) -> Result<Vec<f32>> {
        match mode {
            Mode::Infer => {
                let last = NodeId(self.nodes.len() - 1);
                Ok(self.per_image(batch, last)?.into_data())
            }
            Mode::Train => {
                let features = self.pooled_features(batch)?;
                let n = features.shape()[0];
                let head = self.head_params();
                let mask = dropout_mask(n * head.hidden, self.head.dropout_rate, seed)?;
                let (probs, _) = head.forward_train(features.data(), n, &mask)?;
                Ok(probs)
            }
        }
    }
}

/// Per-channel mean and biased variance over all leading axes, accumulated
/// in f64.
fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let c = x.channels();
    let rows = (x.len() / c.max(1)).max(1) as f64;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for row in x.data().chunks_exact(c) {
        for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
            *s += v as f64;
            *q += v as f64 * v as f64;
        }
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / rows) as f32).collect();
    let var = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / rows) - (s / rows) * (s / rows)).max(0.0) as f32)
        .collect();
    (mean, var)
}

fn init_param(p: &mut ParamTensor, rng: &mut ChaCha8Rng) {
    let data = p.values.data_mut();
    match p.role {
        ParamRole::ConvKernel { fan_in } => {
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive stddev");
            data.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        ParamRole::DenseKernel => {
            let normal = Normal::new(0.0f32, 0.05).expect("positive stddev");
            for v in data.iter_mut() {
                *v = loop {
                    let s = normal.sample(rng);
                    if s.abs() <= 0.1 {
                        break s;
                    }
                };
            }
        }
        ParamRole::Bias | ParamRole::Beta | ParamRole::MovingMean => data.fill(0.0),
        ParamRole::Gamma | ParamRole::MovingVariance => data.fill(1.0),
    }
}
