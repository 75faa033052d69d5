//! Network modules `H_i(h, θ_i)` and the two architectures used for training.
//!
//! A [`LayerModule`] is one pipeline stage. It can contain several primitive
//! layers (conv + relu, or a whole decoder) and is differentiated exactly
//! through them. It keeps a single-slot cache holding the last input it saw;
//! the backward pass is always evaluated at that cached input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Padding, Scalar, Tensor, TensorError};

/// Channel widths of the five-layer convolutional stack used for classification.
pub const SIMPLE_CNN_CHANNELS: [usize; 5] = [32, 64, 64, 128, 256];

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("module {module}: backward requested with an empty activation cache")]
    GradientWithoutActivation { module: usize },
    #[error("module {module}: input shape {actual:?} does not match expected {expected:?}")]
    InputShape {
        module: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("task {task} cannot score target {target}")]
    TargetMismatch {
        task: &'static str,
        target: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// A primitive layer. Shapes only; parameters live in the owning module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Deconv {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
}

impl LayerSpec {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::Deconv {
                in_channels,
                out_channels,
                ..
            } => vec![vec![KERNEL_SIZE, KERNEL_SIZE, in_channels, out_channels]],
            LayerSpec::Linear {
                inputs,
                outputs,
                bias,
            } => {
                let mut shapes = vec![vec![inputs, outputs]];
                if bias {
                    shapes.push(vec![outputs]);
                }
                shapes
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_channels, .. } | LayerSpec::Deconv { in_channels, .. } => {
                KERNEL_SIZE * KERNEL_SIZE * in_channels
            }
            LayerSpec::Linear { inputs, .. } => inputs,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Deconv { .. } => "deconv",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "pool",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[2] != in_channels {
                    return None;
                }
                let h = tensor::conv2d_output_len(input[0], KERNEL_SIZE, stride, padding)?;
                let w = tensor::conv2d_output_len(input[1], KERNEL_SIZE, stride, padding)?;
                Some(vec![h, w, out_channels])
            }
            LayerSpec::Deconv {
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[2] != in_channels {
                    return None;
                }
                Some(vec![
                    tensor::deconv2d_output_len(input[0], KERNEL_SIZE, stride, padding),
                    tensor::deconv2d_output_len(input[1], KERNEL_SIZE, stride, padding),
                    out_channels,
                ])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::GlobalAvgPool => (input.len() == 3).then(|| vec![input[2]]),
            LayerSpec::Linear {
                inputs, outputs, ..
            } => (input.iter().product::<usize>() == inputs).then(|| vec![outputs]),
        }
    }
}

/// Coarse classification of a module, by its layer content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Conv,
    Deconv,
    Relu,
    Pool,
    Linear,
    Composite,
}

/// Activation cached by a module together with the frame it originated from.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedInput<T> {
    pub value: Tensor<T>,
    pub origin: usize,
}

/// One pipeline stage: a chain of primitive layers with a single-slot input cache.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerModule<T> {
    index: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    cache: Option<CachedInput<T>>,
}

/// Gradients for one module, in the order of [`LayerModule::params`].
pub type ParamGrads<T> = Vec<Tensor<T>>;

impl<T: Scalar> LayerModule<T> {
    /// Builds a module with zero parameters; `index` is 1-based.
    pub fn new(index: usize, layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::Architecture(format!("module {index} has no layers")));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                NetworkError::Architecture(format!(
                    "module {index}: {} layer cannot take input {shape:?}",
                    layer.name()
                ))
            })?;
        }
        let params = layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|s| Tensor::zeros(&s))
            .collect();
        Ok(Self {
            index,
            layers,
            params,
            input_shape,
            output_shape: shape,
            cache: None,
        })
    }

    /// He-uniform initialisation of every weight; biases start at zero.
    pub fn init_he_uniform(&mut self, rng: &mut impl Rng) {
        let mut p = 0;
        for layer in &self.layers {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for (j, _) in layer.param_shapes().iter().enumerate() {
                let is_bias = matches!(layer, LayerSpec::Linear { .. }) && j == 1;
                for v in self.params[p].data_mut() {
                    *v = if is_bias {
                        T::zero()
                    } else {
                        T::from_f64(rng.gen_range(-bound..bound))
                    };
                }
                p += 1;
            }
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn kind(&self) -> ModuleKind {
        if self.layers.len() > 1 {
            return ModuleKind::Composite;
        }
        match self.layers[0] {
            LayerSpec::Conv { .. } => ModuleKind::Conv,
            LayerSpec::Deconv { .. } => ModuleKind::Deconv,
            LayerSpec::Relu => ModuleKind::Relu,
            LayerSpec::GlobalAvgPool => ModuleKind::Pool,
            LayerSpec::Linear { .. } => ModuleKind::Linear,
        }
    }

    pub fn cache(&self) -> Option<&CachedInput<T>> {
        self.cache.as_ref()
    }

    pub fn cached_origin(&self) -> Option<usize> {
        self.cache.as_ref().map(|c| c.origin)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NetworkError::InputShape {
                module: self.index,
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Evaluates `H_i(input, θ_i)` without touching the cache.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut acts = self.run_layers(input, false)?;
        Ok(acts.pop().expect("at least one layer"))
    }

    /// Runs the layer chain. With `keep_all`, returns every intermediate
    /// activation (input excluded); otherwise only the final output.
    fn run_layers(&self, input: &Tensor<T>, keep_all: bool) -> Result<Vec<Tensor<T>>> {
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut p = 0;
        for layer in &self.layers {
            let x = acts.last().unwrap_or(input);
            let y = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let y = tensor::conv2d_forward(x, &self.params[p], stride, padding)?;
                    p += 1;
                    y
                }
                LayerSpec::Deconv { stride, padding, .. } => {
                    let y = tensor::deconv2d_forward(x, &self.params[p], stride, padding)?;
                    p += 1;
                    y
                }
                LayerSpec::Relu => tensor::relu_forward(x),
                LayerSpec::GlobalAvgPool => tensor::global_avg_pool_forward(x)?,
                LayerSpec::Linear { bias, .. } => {
                    let b = bias.then(|| &self.params[p + 1]);
                    let y = tensor::linear_forward(x, &self.params[p], b)?;
                    p += if bias { 2 } else { 1 };
                    y
                }
            };
            if !keep_all {
                acts.clear();
            }
            acts.push(y);
        }
        Ok(acts)
    }

    /// Forward pass that also overwrites the single-slot cache with `input`.
    pub fn forward(&mut self, input: Tensor<T>, origin: usize) -> Result<Tensor<T>> {
        let out = self.apply(&input)?;
        self.cache = Some(CachedInput {
            value: input,
            origin,
        });
        Ok(out)
    }

    /// Vector-Jacobian products at an arbitrary input: `(upstream·J_θ, upstream·J_h)`.
    ///
    /// Intermediate activations inside the module are recomputed from `input`.
    pub fn vjp_at(
        &self,
        input: &Tensor<T>,
        upstream: &Tensor<T>,
        want_input: bool,
    ) -> Result<(ParamGrads<T>, Option<Tensor<T>>)> {
        self.check_input(input)?;
        if upstream.shape() != self.output_shape.as_slice() {
            return Err(NetworkError::Tensor(TensorError::Dimension {
                op: "module_backward",
                axis: "upstream",
                expected: self.output_shape.iter().product(),
                actual: upstream.len(),
            }));
        }
        let acts = self.run_layers(input, true)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut p_end = self.params.len();
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = if l == 0 { input } else { &acts[l - 1] };
            let need_x = want_input || l > 0;
            g = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    p_end -= 1;
                    let (gx, gk) =
                        tensor::conv2d_vjp(x, &self.params[p_end], &g, stride, padding, need_x)?;
                    grads[p_end] = Some(gk);
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Deconv { stride, padding, .. } => {
                    p_end -= 1;
                    let (gx, gk) =
                        tensor::deconv2d_vjp(x, &self.params[p_end], &g, stride, padding, need_x)?;
                    grads[p_end] = Some(gk);
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Relu => tensor::relu_vjp(x, &g)?,
                LayerSpec::GlobalAvgPool => tensor::global_avg_pool_vjp(x.shape(), &g)?,
                LayerSpec::Linear { bias, .. } => {
                    p_end -= if bias { 2 } else { 1 };
                    let b = bias.then(|| &self.params[p_end + 1]);
                    let (gx, gw, gb) = tensor::linear_vjp(x, &self.params[p_end], b, &g)?;
                    grads[p_end] = Some(gw);
                    if let Some(gb) = gb {
                        grads[p_end + 1] = Some(gb);
                    }
                    gx
                }
            };
        }
        let grads = grads
            .into_iter()
            .map(|g| g.expect("every parameter receives a gradient"))
            .collect();
        Ok((grads, want_input.then_some(g)))
    }

    /// Backward pass evaluated at the cached input, whatever frame it came from.
    /// The cache is left in place.
    pub fn backward(&self, upstream: &Tensor<T>) -> Result<(ParamGrads<T>, Tensor<T>)> {
        let (grads, gx) = self.backward_with(upstream, true)?;
        Ok((grads, gx.expect("input gradient requested")))
    }

    pub fn backward_with(
        &self,
        upstream: &Tensor<T>,
        want_input: bool,
    ) -> Result<(ParamGrads<T>, Option<Tensor<T>>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(NetworkError::GradientWithoutActivation { module: self.index })?;
        self.vjp_at(&cache.value, upstream, want_input)
    }

    pub fn cast<U: Scalar>(&self) -> LayerModule<U> {
        LayerModule {
            index: self.index,
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            cache: self.cache.as_ref().map(|c| CachedInput {
                value: c.value.cast(),
                origin: c.origin,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { num_classes: usize },
    Autoencoding,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Autoencoding => "autoencoding",
        }
    }
}

/// What a loss is computed against.
#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a, T> {
    Label(usize),
    Frame(&'a Tensor<T>),
}

/// Loss of `output` against `target` for the given task: softmax
/// cross-entropy for classification, mean squared error for autoencoding.
pub fn task_loss<T: Scalar>(task: Task, output: &Tensor<T>, target: LossTarget<'_, T>) -> Result<(T, Tensor<T>)> {
    match (task, target) {
        (Task::Classification { .. }, LossTarget::Label(label)) => Ok(tensor::softmax_xent(output, label)?),
        (Task::Autoencoding, LossTarget::Frame(frame)) => Ok(tensor::mse(output, frame)?),
        (Task::Classification { .. }, LossTarget::Frame(_)) => Err(NetworkError::TargetMismatch {
            task: "classification",
            target: "frame",
        }),
        (Task::Autoencoding, LossTarget::Label(_)) => Err(NetworkError::TargetMismatch {
            task: "autoencoding",
            target: "label",
        }),
    }
}

/// Serializable architecture description (no parameter values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub task: Task,
    pub input_shape: Vec<usize>,
    pub modules: Vec<Vec<LayerSpec>>,
}

/// The composition `H_D ∘ … ∘ H_1` split into `D` pipeline modules.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    pub task: Task,
    pub modules: Vec<LayerModule<T>>,
}

impl<T: Scalar> NetworkSpec<T> {
    /// Builds modules from a layout with all parameters zero.
    pub fn from_layout(layout: &NetworkLayout) -> Result<Self> {
        if layout.modules.is_empty() {
            return Err(NetworkError::Architecture("network needs at least one module".into()));
        }
        let mut shape = layout.input_shape.clone();
        let mut modules = Vec::with_capacity(layout.modules.len());
        for (i, layers) in layout.modules.iter().enumerate() {
            let m = LayerModule::new(i + 1, layers.clone(), shape)?;
            shape = m.output_shape().to_vec();
            modules.push(m);
        }
        let net = Self {
            task: layout.task,
            modules,
        };
        net.check_output_shape(&layout.input_shape)?;
        Ok(net)
    }

    fn check_output_shape(&self, input_shape: &[usize]) -> Result<()> {
        let out = self.output_shape();
        match self.task {
            Task::Classification { num_classes } if out != [num_classes] => Err(
                NetworkError::Architecture(format!("classifier emits {out:?}, expected [{num_classes}]")),
            ),
            Task::Autoencoding if out != input_shape => Err(NetworkError::Architecture(format!(
                "autoencoder emits {out:?} for input {input_shape:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Layout plus seeded He-uniform initialisation.
    pub fn initialized(layout: &NetworkLayout, seed: u64) -> Result<Self> {
        let mut net = Self::from_layout(layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in &mut net.modules {
            m.init_he_uniform(&mut rng);
        }
        Ok(net)
    }

    pub fn layout(&self) -> NetworkLayout {
        NetworkLayout {
            task: self.task,
            input_shape: self.input_shape().to_vec(),
            modules: self.modules.iter().map(|m| m.layers().to_vec()).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.modules.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.modules[0].input_shape()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.modules.last().expect("non-empty").output_shape()
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(LayerModule::param_count).sum()
    }

    pub fn clear_caches(&mut self) {
        for m in &mut self.modules {
            m.clear_cache();
        }
    }

    /// Pure forward pass; returns `[h_0 = x, h_1, …, h_D]`.
    pub fn activations(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut acts = Vec::with_capacity(self.depth() + 1);
        acts.push(x.clone());
        for m in &self.modules {
            let h = m.apply(acts.last().unwrap())?;
            acts.push(h);
        }
        Ok(acts)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.activations(x)?.pop().unwrap())
    }

    pub fn loss(&self, output: &Tensor<T>, target: LossTarget<'_, T>) -> Result<(T, Tensor<T>)> {
        task_loss(self.task, output, target)
    }

    /// Exact per-frame gradient `∇_θ L(M_θ(x), y)` for every module, by
    /// chaining module VJPs at the activations of `x`. Returns the loss too.
    pub fn frame_gradient(
        &self,
        x: &Tensor<T>,
        target: LossTarget<'_, T>,
    ) -> Result<(T, Vec<ParamGrads<T>>)> {
        let acts = self.activations(x)?;
        let (loss, mut g) = self.loss(acts.last().unwrap(), target)?;
        let mut grads = vec![Vec::new(); self.depth()];
        for (i, m) in self.modules.iter().enumerate().rev() {
            let (gp, gx) = m.vjp_at(&acts[i], &g, i > 0)?;
            grads[i] = gp;
            if let Some(gx) = gx {
                g = gx;
            }
        }
        Ok((loss, grads))
    }

    pub fn cast<U: Scalar>(&self) -> NetworkSpec<U> {
        NetworkSpec {
            task: self.task,
            modules: self.modules.iter().map(LayerModule::cast).collect(),
        }
    }
}

/// Five 3×3 conv+relu modules with strides `2,1,2,1,2,…`, then a pooling +
/// linear head (bias only here) as the final module. `D = channels.len() + 1`.
pub fn simple_cnn_layout(channels: &[usize], num_classes: usize, input_shape: [usize; 3]) -> Result<NetworkLayout> {
    if channels.is_empty() {
        return Err(NetworkError::Architecture("channels must be non-empty".into()));
    }
    if num_classes == 0 {
        return Err(NetworkError::Architecture("num_classes must be positive".into()));
    }
    let mut modules = Vec::with_capacity(channels.len() + 1);
    let mut cin = input_shape[2];
    for (i, &c) in channels.iter().enumerate() {
        modules.push(vec![
            LayerSpec::Conv {
                in_channels: cin,
                out_channels: c,
                stride: if i % 2 == 0 { 2 } else { 1 },
                padding: Padding::Same,
            },
            LayerSpec::Relu,
        ]);
        cin = c;
    }
    modules.push(vec![
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            inputs: cin,
            outputs: num_classes,
            bias: true,
        },
    ]);
    Ok(NetworkLayout {
        task: Task::Classification { num_classes },
        input_shape: input_shape.to_vec(),
        modules,
    })
}

pub fn build_simple_cnn<T: Scalar>(
    channels: &[usize],
    num_classes: usize,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<NetworkSpec<T>> {
    NetworkSpec::initialized(&simple_cnn_layout(channels, num_classes, input_shape)?, seed)
}

/// Conv encoder (one module per block) followed by a mirrored deconvolution
/// decoder packed into a single composite module. `D = channels.len() + 1`.
pub fn autoencoder_layout(channels: &[usize], input_shape: [usize; 3]) -> Result<NetworkLayout> {
    if channels.is_empty() {
        return Err(NetworkError::Architecture("channels must be non-empty".into()));
    }
    let stride = |i: usize| if i.is_multiple_of(2) { 2 } else { 1 };
    let mut modules = Vec::with_capacity(channels.len() + 1);
    let mut cin = input_shape[2];
    for (i, &c) in channels.iter().enumerate() {
        modules.push(vec![
            LayerSpec::Conv {
                in_channels: cin,
                out_channels: c,
                stride: stride(i),
                padding: Padding::Same,
            },
            LayerSpec::Relu,
        ]);
        cin = c;
    }
    let mut decoder = Vec::with_capacity(2 * channels.len());
    for i in (0..channels.len()).rev() {
        let out = if i == 0 { input_shape[2] } else { channels[i - 1] };
        decoder.push(LayerSpec::Deconv {
            in_channels: channels[i],
            out_channels: out,
            stride: stride(i),
            padding: Padding::Same,
        });
        if i > 0 {
            decoder.push(LayerSpec::Relu);
        }
    }
    modules.push(decoder);
    Ok(NetworkLayout {
        task: Task::Autoencoding,
        input_shape: input_shape.to_vec(),
        modules,
    })
}

pub fn build_autoencoder<T: Scalar>(channels: &[usize], input_shape: [usize; 3], seed: u64) -> Result<NetworkSpec<T>> {
    NetworkSpec::initialized(&autoencoder_layout(channels, input_shape)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{relative_error, Tensor};
    use crate::testutil::{finite_difference, random_tensor};

    fn identity_linear(n: usize) -> LayerModule<f64> {
        let mut m = LayerModule::new(
            1,
            vec![LayerSpec::Linear {
                inputs: n,
                outputs: n,
                bias: false,
            }],
            vec![n],
        )
        .unwrap();
        for (i, v) in m.params_mut()[0].data_mut().iter_mut().enumerate() {
            *v = if i % (n + 1) == 0 { 1.0 } else { 0.0 };
        }
        m
    }

    #[test]
    fn identity_module_caches_input() {
        let mut m = identity_linear(3);
        let x = random_tensor(&[3], 1);
        let y = m.forward(x.clone(), 7).unwrap();
        assert_eq!(y, x);
        assert_eq!(m.cache().unwrap().value, x);
        assert_eq!(m.cached_origin(), Some(7));
    }

    #[test]
    fn cache_keeps_only_latest_input() {
        let mut m = identity_linear(3);
        let a = random_tensor(&[3], 1);
        let b = random_tensor(&[3], 2);
        m.forward(a, 1).unwrap();
        m.forward(b.clone(), 2).unwrap();
        assert_eq!(m.cache().unwrap().value, b);
        assert_eq!(m.cached_origin(), Some(2));
    }

    #[test]
    fn backward_without_activation_fails() {
        let m = identity_linear(2);
        let err = m.backward(&Tensor::zeros(&[2])).unwrap_err();
        assert_eq!(err, NetworkError::GradientWithoutActivation { module: 1 });
    }

    #[test]
    fn conv_relu_module_matches_kernel_chain() {
        let net = build_simple_cnn::<f64>(&[4], 2, [6, 6, 2], 3).unwrap();
        let m = &net.modules[0];
        let x = random_tensor(&[6, 6, 2], 4);
        let y = m.apply(&x).unwrap();
        let chained = tensor::relu_forward(
            &tensor::conv2d_forward(&x, &m.params()[0], 2, Padding::Same).unwrap(),
        );
        assert!(y.max_abs_diff(&chained) <= 1e-12);
    }

    #[test]
    fn backward_uses_cached_activation() {
        // Cache from frame a, upstream from frame b: result equals the VJP at h^a.
        let net = build_simple_cnn::<f64>(&[3], 2, [5, 5, 2], 5).unwrap();
        let mut m = net.modules[0].clone();
        let a = random_tensor(&[5, 5, 2], 6);
        let b = random_tensor(&[5, 5, 2], 7);
        m.forward(a.clone(), 1).unwrap();
        let g = random_tensor(m.output_shape(), 8);
        let (gp, gx) = m.backward(&g).unwrap();
        let (ep, ex) = m.vjp_at(&a, &g, true).unwrap();
        assert_eq!(gp, ep);
        assert_eq!(gx, ex.unwrap());
        let (bp, _) = m.vjp_at(&b, &g, true).unwrap();
        assert_ne!(gp, bp);
        // Explicit unrolled product: conv-kernel VJP of relu'(conv(a)) ⊙ g.
        let pre = tensor::conv2d_forward(&a, &m.params()[0], 2, Padding::Same).unwrap();
        let masked = tensor::relu_vjp(&pre, &g).unwrap();
        let (_, gk) = tensor::conv2d_vjp(&a, &m.params()[0], &masked, 2, Padding::Same, false).unwrap();
        assert!(gk.max_abs_diff(&gp[0]) <= 1e-12);
        assert_eq!(m.cached_origin(), Some(1));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut net = build_autoencoder::<f64>(&[2, 2], [4, 4, 1], 9).unwrap();
        let x = random_tensor(&[4, 4, 1], 10);
        let h = net.modules[0].forward(x, 1).unwrap();
        net.modules[1].forward(h, 1).unwrap();
        let up = Tensor::zeros(net.modules[1].output_shape());
        let (gp, gx) = net.modules[1].backward(&up).unwrap();
        assert!(gp.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simple_cnn_default_geometry() {
        let layout = simple_cnn_layout(&SIMPLE_CNN_CHANNELS, 51, [112, 112, 3]).unwrap();
        let net = NetworkSpec::<f32>::from_layout(&layout).unwrap();
        assert_eq!(net.depth(), 6);
        let spatial: Vec<usize> = net.modules[..5].iter().map(|m| m.output_shape()[0]).collect();
        assert_eq!(spatial, vec![56, 56, 28, 28, 14]);
        assert_eq!(net.output_shape(), &[51]);
        let minimal = build_simple_cnn::<f64>(&[4], 2, [8, 8, 3], 0).unwrap();
        assert_eq!(minimal.depth(), 2);
        assert!(simple_cnn_layout(&[], 2, [8, 8, 3]).is_err());
    }

    #[test]
    fn autoencoder_geometry() {
        let net = build_autoencoder::<f32>(&SIMPLE_CNN_CHANNELS, [32, 32, 3], 1).unwrap();
        assert_eq!(net.depth(), 6);
        assert_eq!(net.modules[5].kind(), ModuleKind::Composite);
        assert_eq!(net.modules[5].layers().iter().filter(|l| l.name() == "deconv").count(), 5);
        assert_eq!(net.output_shape(), &[32, 32, 3]);
        // 30 is not divisible by 8 so the decoder cannot restore it.
        assert!(build_autoencoder::<f32>(&SIMPLE_CNN_CHANNELS, [30, 30, 3], 1).is_err());
    }

    #[test]
    fn autoencoder_zero_frame_is_finite() {
        let net = build_autoencoder::<f64>(&[4, 4, 4, 4, 4], [16, 16, 3], 2).unwrap();
        let x = Tensor::zeros(&[16, 16, 3]);
        let y = net.predict(&x).unwrap();
        let (loss, _) = net.loss(&y, LossTarget::Frame(&x)).unwrap();
        assert!(y.is_finite() && loss.is_finite());
    }

    #[test]
    fn composite_decoder_vjp_matches_finite_differences() {
        let net = build_autoencoder::<f64>(&[2, 3, 2], [8, 8, 1], 3).unwrap();
        let dec = &net.modules[3];
        let h = random_tensor(dec.input_shape(), 4).map(|v| v.abs());
        let up = random_tensor(dec.output_shape(), 5);
        let (gp, gx) = dec.vjp_at(&h, &up, true).unwrap();
        let fd_x = finite_difference(&h, 1e-5, |h| dec.apply(h).unwrap().dot(&up).unwrap());
        assert!(relative_error(&gx.unwrap(), &fd_x) <= 1e-6);
        for (p, g) in gp.iter().enumerate() {
            let fd = finite_difference(&dec.params()[p], 1e-5, |w| {
                let mut m = dec.clone();
                m.params_mut()[p] = w.clone();
                m.apply(&h).unwrap().dot(&up).unwrap()
            });
            assert!(relative_error(g, &fd) <= 1e-6, "decoder param {p}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = build_simple_cnn::<f64>(&[4, 4], 3, [8, 8, 3], 11).unwrap();
        let b = build_simple_cnn::<f64>(&[4, 4], 3, [8, 8, 3], 11).unwrap();
        let c = build_simple_cnn::<f64>(&[4, 4], 3, [8, 8, 3], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bias = &a.modules[2].params()[1];
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }
}
