//! Layer-sequence architectures, parameter initialization and forward passes.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::{argmax, Tensor};

/// One layer of a sequential network. Shapes are per sample (no batch axis).
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Layer {
    /// `y = W x + b` with `W: [outputs, inputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Cross-correlation with kernel `[out_channels, in_channels, kernel, kernel]`
    /// plus a per-channel bias.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
    /// Non-overlapping `size×size` mean pooling.
    AvgPool { size: usize },
    /// Adds the output of layer `from` (an earlier layer with the same
    /// output shape) to the running activation.
    ResidualAdd { from: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::AvgPool { .. } => "avgpool",
            Layer::ResidualAdd { .. } => "residual_add",
        }
    }

    fn output_shape(&self, index: usize, input: &[usize], earlier: &[Vec<usize>]) -> Result<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(dim_err!("layer {}: dense expects [{}], got {:?}", index, inputs, input));
                }
                if outputs == 0 {
                    return Err(dim_err!("layer {}: dense with zero outputs", index));
                }
                Ok(vec![outputs])
            }
            Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = match input {
                    [c, h, w] => [*c, *h, *w],
                    _ => return Err(dim_err!("layer {}: conv2d expects [C,H,W], got {:?}", index, input)),
                };
                if c != in_channels {
                    return Err(dim_err!("layer {}: conv2d expects {} channels, got {}", index, in_channels, c));
                }
                if out_channels == 0 || stride == 0 || kernel == 0 {
                    return Err(dim_err!("layer {}: degenerate conv2d hyperparameters", index));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(dim_err!("layer {}: kernel {} larger than padded input {:?}", index, kernel, input));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::AvgPool { size } => match input {
                [c, h, w] if size > 0 && *h >= size && *w >= size => Ok(vec![*c, h / size, w / size]),
                _ => Err(dim_err!("layer {}: avgpool({}) cannot reduce {:?}", index, size, input)),
            },
            Layer::ResidualAdd { from } => {
                if from >= index {
                    return Err(dim_err!("layer {}: residual source {} is not an earlier layer", index, from));
                }
                if earlier[from + 1] != input {
                    return Err(dim_err!(
                        "layer {}: residual source {} has shape {:?}, expected {:?}",
                        index,
                        from,
                        earlier[from + 1],
                        input
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Weight and bias shapes, for layers that carry parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Architecture description: the layer chain plus input shape and class count.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// Validates the chain and returns the input shape followed by the
    /// output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(dim_err!("invalid input shape {:?}", self.input_shape));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, &shapes[i], &shapes)?;
            shapes.push(next);
        }
        let last = shapes.last().unwrap();
        if last != &[self.classes] {
            return Err(dim_err!("network output {:?} does not match {} classes", last, self.classes));
        }
        Ok(shapes)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `Conv(16,3×3,s1,p1)–ReLU–Conv(32,3×3,s2,p1)–ReLU–AvgPool(2)–Flatten–Dense(128)–ReLU–Dense(k)`.
    pub fn simple_cnn(input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let [c, h, w] = input_shape;
        if h < 8 || w < 8 {
            return Err(dim_err!("simple_cnn needs spatial dims >= 8, got {}x{}", h, w));
        }
        let (h2, w2) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let flat = 32 * (h2 / 2) * (w2 / 2);
        let arch = Architecture {
            name: "simple_cnn".into(),
            input_shape: input_shape.to_vec(),
            classes,
            layers: vec![
                Layer::Conv2d { in_channels: c, out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                Layer::Relu,
                Layer::Conv2d { in_channels: 16, out_channels: 32, kernel: 3, stride: 2, padding: 1 },
                Layer::Relu,
                Layer::AvgPool { size: 2 },
                Layer::Flatten,
                Layer::Dense { inputs: flat, outputs: 128 },
                Layer::Relu,
                Layer::Dense { inputs: 128, outputs: classes },
            ],
        };
        arch.shapes()?;
        Ok(arch)
    }

    /// Alternating Dense/ReLU with a final Dense(k); inputs of rank > 1 are
    /// flattened first. An empty hidden list gives a linear model.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize) -> Result<Self> {
        if input_shape.contains(&0) || hidden.contains(&0) || classes == 0 {
            return Err(contract_err!("mlp dimensions must be positive"));
        }
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(Layer::Dense { inputs: width, outputs: h });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense { inputs: width, outputs: classes });
        let arch =
            Architecture { name: "mlp".into(), input_shape: input_shape.to_vec(), classes, layers };
        arch.shapes()?;
        Ok(arch)
    }

    /// A stem convolution followed by two identity-skip residual blocks
    /// `Conv–ReLU–Conv–Add–ReLU`, mean pooling and a linear head.
    pub fn mini_resnet(input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let [c, h, w] = input_shape;
        if h < 8 || w < 8 {
            return Err(dim_err!("mini_resnet needs spatial dims >= 8, got {}x{}", h, w));
        }
        let width = 8;
        let conv = |cin| Layer::Conv2d { in_channels: cin, out_channels: width, kernel: 3, stride: 1, padding: 1 };
        let mut layers = vec![
            Layer::Conv2d { in_channels: c, out_channels: width, kernel: 3, stride: 2, padding: 1 },
            Layer::Relu,
        ];
        for _ in 0..2 {
            let skip = layers.len() - 1;
            layers.extend([conv(width), Layer::Relu, conv(width), Layer::ResidualAdd { from: skip }, Layer::Relu]);
        }
        let (h2, w2) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        layers.extend([
            Layer::AvgPool { size: 2 },
            Layer::Flatten,
            Layer::Dense { inputs: width * (h2 / 2) * (w2 / 2), outputs: classes },
        ]);
        let arch = Architecture { name: "mini_resnet".into(), input_shape: input_shape.to_vec(), classes, layers };
        arch.shapes()?;
        Ok(arch)
    }
}

/// Trainable parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelMeta {
    pub dataset: String,
    pub seed: u64,
    /// Digest of the training configuration that produced the weights.
    pub train_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f64> {
    arch: Architecture,
    /// One entry per layer; `None` for parameter-free layers.
    params: Vec<Option<LayerParams<T>>>,
    pub meta: ModelMeta,
}

/// Parameters placed on a [`Graph`] for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    /// Weight/bias variables in layer order, skipping parameter-free layers.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<T: Real> Model<T> {
    /// He-uniform weights `U(±sqrt(6 / fan_in))` and zero biases, drawn from
    /// the seed.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shapes()?;
        let mut r = rng::stream(seed, 0);
        let params = arch
            .layers
            .iter()
            .map(|layer| {
                layer.param_shapes().map(|(ws, bs)| {
                    let bound = num_traits::Float::sqrt(6.0 / layer.fan_in() as f64);
                    let n: usize = ws.iter().product();
                    let w = (0..n).map(|_| T::cast_from(r.random_range(-bound..bound))).collect();
                    LayerParams { weight: Tensor::from_parts(ws, w), bias: Tensor::zeros(bs) }
                })
            })
            .collect();
        Ok(Model { arch, params, meta: ModelMeta { seed, ..ModelMeta::default() } })
    }

    /// All weights and biases zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.shapes()?;
        let params = arch
            .layers
            .iter()
            .map(|l| {
                l.param_shapes()
                    .map(|(ws, bs)| LayerParams { weight: Tensor::zeros(ws), bias: Tensor::zeros(bs) })
            })
            .collect();
        Ok(Model { arch, params, meta: ModelMeta::default() })
    }

    /// Assembles a model from explicit parameters, one entry per layer.
    pub fn from_params(
        arch: Architecture,
        params: Vec<Option<LayerParams<T>>>,
        meta: ModelMeta,
    ) -> Result<Self> {
        arch.shapes()?;
        if params.len() != arch.layers.len() {
            return Err(dim_err!("{} parameter slots for {} layers", params.len(), arch.layers.len()));
        }
        for (i, (layer, p)) in arch.layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => return Err(dim_err!("layer {} ({}): parameter shapes do not match", i, layer.kind())),
            }
        }
        Ok(Model { arch, params, meta })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.arch.layers
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    /// Parameters flattened into one vector, layer by layer, weight then bias.
    pub fn flat_params(&self) -> Vec<T> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    /// Replaces parameters from tensors in [`BoundParams::trainable`] order.
    pub fn set_trainable(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let mut it = tensors.into_iter();
        for p in self.params.iter_mut().flatten() {
            let (w, b) = match (it.next(), it.next()) {
                (Some(w), Some(b)) => (w, b),
                _ => return Err(contract_err!("too few parameter tensors")),
            };
            if w.shape() != p.weight.shape() || b.shape() != p.bias.shape() {
                return Err(dim_err!("parameter shape changed"));
            }
            p.weight = w;
            p.bias = b;
        }
        if it.next().is_some() {
            return Err(contract_err!("too many parameter tensors"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.as_ref().map(|p| LayerParams { weight: p.weight.cast(), bias: p.bias.cast() }))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Places the parameters on `g`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    (g.leaf(p.weight.clone(), trainable), g.leaf(p.bias.clone(), trainable))
                })
            })
            .collect();
        BoundParams { vars }
    }

    /// Logits `[N, k]` for a batch `x` whose trailing elements per sample
    /// match the input shape.
    pub fn forward(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Var> {
        Ok(*self.forward_trace(g, params, x)?.last().unwrap())
    }

    /// Like [`Model::forward`], returning the reshaped input followed by the
    /// output of every layer.
    pub fn forward_trace(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Vec<Var>> {
        let per_sample = self.arch.input_len();
        let total = g.value(x).numel();
        let n = g.shape(x).first().copied().unwrap_or(0);
        if n == 0 || total != n * per_sample {
            return Err(dim_err!(
                "batch of shape {:?} does not match input shape {:?}",
                g.shape(x),
                self.arch.input_shape
            ));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.arch.input_shape);
        let mut h = g.reshape(x, &shape)?;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.arch.layers.len() + 1);
        outputs.push(h);
        for (i, layer) in self.arch.layers.iter().enumerate() {
            h = match *layer {
                Layer::Dense { .. } => {
                    let (w, b) = params.vars[i].ok_or_else(|| contract_err!("unbound layer {}", i))?;
                    let y = g.matmul_t(h, w, false, true)?;
                    g.add(y, b)?
                }
                Layer::Conv2d { stride, padding, .. } => {
                    let (w, b) = params.vars[i].ok_or_else(|| contract_err!("unbound layer {}", i))?;
                    let y = g.conv2d(h, w, stride, padding)?;
                    g.channel_bias(y, b)?
                }
                Layer::Relu => g.relu(h)?,
                Layer::Flatten => {
                    let len = g.value(h).numel() / n;
                    g.reshape(h, &[n, len])?
                }
                Layer::AvgPool { size } => g.avg_pool(h, size)?,
                Layer::ResidualAdd { from } => g.add(h, outputs[from + 1])?,
            };
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Logits for a batch `[N, ...]` or a single sample with the input shape.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let single = x.shape() == self.arch.input_shape.as_slice();
        let mut g = Graph::inference();
        let params = self.bind(&mut g, false);
        let input = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            g.constant(x.reshape(s)?)
        } else {
            g.constant(x.clone())
        };
        let out = self.forward(&mut g, &params, input)?;
        let out = g.value(out).clone();
        if single {
            out.reshape(vec![self.arch.classes])
        } else {
            Ok(out)
        }
    }

    /// Predicted class of a single sample.
    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        let logits = self.logits(x)?;
        if logits.numel() != self.arch.classes {
            return Err(contract_err!("predict takes one sample"));
        }
        Ok(argmax(logits.data()).map(|(i, _)| i).unwrap_or(0))
    }

    /// Predicted classes of a batch. Large batches run in chunks so that
    /// the intermediate activations stay small.
    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        const CHUNK: usize = 64;
        let n = x.shape().first().copied().unwrap_or(0);
        if x.rank() < 2 || n <= CHUNK {
            return Ok(self.classes_of(&self.logits(x)?));
        }
        let per = x.numel() / n;
        let mut out = Vec::with_capacity(n);
        for rows in x.data().chunks(CHUNK * per) {
            let mut shape = x.shape().to_vec();
            shape[0] = rows.len() / per;
            out.extend(self.classes_of(&self.logits(&Tensor::new(shape, rows.to_vec())?)?));
        }
        Ok(out)
    }

    fn classes_of(&self, logits: &Tensor<T>) -> Vec<usize> {
        logits.data().chunks(self.arch.classes).map(|row| argmax(row).map(|(i, _)| i).unwrap_or(0)).collect()
    }

    pub fn describe(&self) -> String {
        let mut s = self.arch.name.to_string();
        for l in &self.arch.layers {
            s.push('-');
            s.push_str(l.kind());
        }
        s
    }
}
