//! Sequential composition of layers: shape inference, parameter bookkeeping,
//! forward/backward over batches, a Keras-style summary table and checkpoints.

mod checkpoint;

use std::fmt::{self, Write as _};
use std::str::FromStr;

pub use checkpoint::{from_bytes, load, save, to_bytes, MAGIC};

use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, DenseParams, Mode, Padding, Param, PoolCache};
use crate::loss::sparse_cce_grad_logits;
use crate::tensor::{Real, Rng, Shape, Tensor};

/// Pixel scale applied by the leading rescaling layer.
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Rescaling { scale: f64 },
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    MaxPool2D { pool: usize, stride: usize },
    ReLU,
    Flatten,
    Dense { units: usize },
    Dropout { rate: f64 },
    Softmax,
}

impl LayerSpec {
    pub fn conv3x3(filters: usize) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel: (3, 3),
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn pool2x2() -> Self {
        LayerSpec::MaxPool2D { pool: 2, stride: 2 }
    }

    /// Lowercase identifier used in layer names and checkpoint headers.
    pub fn key(&self) -> &'static str {
        match self {
            LayerSpec::Rescaling { .. } => "rescaling",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::MaxPool2D { .. } => "max_pooling2d",
            LayerSpec::ReLU => "re_lu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Rescaling { .. } => "Rescaling",
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool2D { .. } => "MaxPooling2D",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Softmax => "Softmax",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerSpec::Rescaling { scale } if !scale.is_finite() => bad(format!("rescaling factor {scale}")),
            LayerSpec::Conv2D { filters, kernel, stride, .. }
                if filters == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 =>
            {
                bad(format!("conv2d needs positive filters/kernel/stride, got {self:?}"))
            }
            LayerSpec::MaxPool2D { pool, stride } if pool == 0 || stride == 0 => {
                bad(format!("pooling needs positive size and stride, got {self:?}"))
            }
            LayerSpec::Dense { units: 0 } => bad("dense layer with 0 units".into()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate {rate} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Output extents (without the batch axis) for the given input extents.
    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let image = |what: &str| match *input {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Config(format!("{what} needs an [H, W, C] input, got {input:?}"))),
        };
        Ok(match *self {
            LayerSpec::Rescaling { .. } | LayerSpec::ReLU | LayerSpec::Dropout { .. } | LayerSpec::Softmax => {
                input.to_vec()
            }
            LayerSpec::Conv2D { filters, kernel, stride, padding } => {
                let (h, w, _) = image("conv2d")?;
                let out = |n: usize, k: usize| match padding {
                    Padding::Same => Ok(n.div_ceil(stride)),
                    Padding::Valid if k <= n => Ok((n - k) / stride + 1),
                    Padding::Valid => Err(Error::Config(format!("kernel {k} larger than input {n}"))),
                };
                vec![out(h, kernel.0)?, out(w, kernel.1)?, filters]
            }
            LayerSpec::MaxPool2D { pool, stride } => {
                let (h, w, c) = image("max pooling")?;
                let (oh, ow) = layers::pool_output_hw(h, w, pool, stride)
                    .map_err(|e| Error::Config(e.to_string()))?;
                vec![oh, ow, c]
            }
            LayerSpec::Flatten => {
                let (h, w, c) = image("flatten")?;
                vec![h * w * c]
            }
            LayerSpec::Dense { units } => match *input {
                [_] => vec![units],
                _ => return Err(Error::Config(format!("dense needs a flat input, got {input:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Four conv/pool stages with 8, 16, 32 and 64 filters.
    Canonical,
    /// Three conv/pool stages with 16, 32 and 64 filters.
    ThreeBlock,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Architecture::Canonical),
            "three-block" => Ok(Architecture::ThreeBlock),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected canonical or three-block)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Canonical => "canonical",
            Architecture::ThreeBlock => "three-block",
        })
    }
}

impl Architecture {
    fn filters(self) -> &'static [usize] {
        match self {
            Architecture::Canonical => &[8, 16, 32, 64],
            Architecture::ThreeBlock => &[16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `[H, W, C]`
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Rescaling, conv/ReLU/pool stages, flatten, a 512-unit dense layer with
    /// ReLU and 20% dropout, then a `num_classes`-way softmax head.
    pub fn new(arch: Architecture, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::with_head(arch.filters(), 512, input_shape, num_classes)
    }

    pub fn canonical(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::new(Architecture::Canonical, input_shape, num_classes)
    }

    pub fn with_head(filters: &[usize], dense_units: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Rescaling { scale: PIXEL_SCALE }];
        for &f in filters {
            layers.extend([LayerSpec::conv3x3(f), LayerSpec::ReLU, LayerSpec::pool2x2()]);
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense { units: dense_units },
            LayerSpec::ReLU,
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Dense { units: num_classes },
            LayerSpec::Softmax,
        ]);
        ModelConfig {
            input_shape,
            layers,
            num_classes,
        }
    }

    /// Output extents after every layer, checking the whole chain.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?}", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let mut dims = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            spec.validate()?;
            dims = spec.output_dims(&dims)?;
            out.push(dims.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) if dims == [self.num_classes] => Ok(out),
            Some(LayerSpec::Softmax) => Err(Error::Config(format!(
                "softmax head produces {dims:?}, expected [{}]",
                self.num_classes
            ))),
            _ => Err(Error::Config("the final layer must be a softmax".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer<T> {
    Rescaling(T),
    Conv(ConvParams<T>),
    MaxPool { pool: usize, stride: usize },
    Relu,
    Flatten,
    Dense(DenseParams<T>),
    Dropout(f64),
    Softmax,
}

impl<T: Real> Layer<T> {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(p) => p.param_count(),
            Layer::Dense(p) => p.param_count(),
            _ => 0,
        }
    }
}

/// What each layer keeps from a training forward pass.
#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    Pool(PoolCache),
    Mask(Option<Tensor<T>>),
    Shape(Shape),
    Probs(Tensor<T>),
    Nothing,
}

#[derive(Debug, Clone)]
pub struct SequentialModel<T = f32> {
    config: ModelConfig,
    class_names: Vec<String>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
    caches: Option<Vec<Cache<T>>>,
}

impl<T: Real> SequentialModel<T> {
    /// Builds the model with Glorot-uniform weights and zero biases drawn from
    /// `seed`. Equal `(config, seed)` pairs give bitwise-equal parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.infer_shapes()?;
        let mut rng = Rng::new(seed);
        let mut input = config.input_shape.to_vec();
        let mut built = Vec::with_capacity(config.layers.len());
        for (spec, out) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Rescaling { scale } => Layer::Rescaling(T::of(scale)),
                LayerSpec::Conv2D { filters, kernel, stride, padding } => {
                    Layer::Conv(ConvParams::glorot(kernel, input[2], filters, stride, padding, &mut rng)?)
                }
                LayerSpec::MaxPool2D { pool, stride } => Layer::MaxPool { pool, stride },
                LayerSpec::ReLU => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { units } => Layer::Dense(DenseParams::glorot(input[0], units, &mut rng)?),
                LayerSpec::Dropout { rate } => Layer::Dropout(rate),
                LayerSpec::Softmax => Layer::Softmax,
            };
            built.push(layer);
            input = out.clone();
        }
        let class_names = (0..config.num_classes).map(|i| i.to_string()).collect();
        Ok(SequentialModel {
            config,
            class_names,
            layers: built,
            shapes,
            caches: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        self.set_class_names(names)?;
        Ok(self)
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                names.len(),
                self.config.num_classes
            )));
        }
        self.class_names = names;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Per-layer output extents, without the batch axis.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::param_count).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Learnable tensors in layer order, kernel/weights before bias.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(p) => out.extend([&p.kernel, &p.bias]),
                Layer::Dense(p) => out.extend([&p.weights, &p.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(p) => out.extend([&mut p.kernel, &mut p.bias]),
                Layer::Dense(p) => out.extend([&mut p.weights, &mut p.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Copies parameter values from a model with the same architecture.
    pub fn copy_params_from(&mut self, other: &SequentialModel<T>) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("cannot copy parameters between different architectures".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1..] != self.config.input_shape {
            return Err(Error::Shape(format!(
                "batch {} does not match model input (N, {}, {}, {})",
                batch.shape(),
                self.config.input_shape[0],
                self.config.input_shape[1],
                self.config.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass: `[N, H, W, C] -> [N, K]` probabilities.
    /// A pure function of the parameters and the input.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Rescaling(s) => layers::rescale_forward(&x, *s)?,
                Layer::Conv(p) => layers::conv2d_forward(&x, p)?,
                Layer::MaxPool { pool, stride } => layers::maxpool2d_forward(&x, *pool, *stride)?.0,
                Layer::Relu => layers::relu(&x),
                Layer::Flatten => layers::flatten(&x)?,
                Layer::Dense(p) => layers::dense_forward(&x, p)?,
                Layer::Dropout(_) => x,
                Layer::Softmax => layers::softmax(&x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass over a batch. `Train` mode applies dropout and keeps the
    /// caches [`backward`](Self::backward) needs; `Infer` mode is [`predict`](Self::predict).
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        self.caches = None;
        if mode == Mode::Infer {
            return self.predict(batch);
        }
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Rescaling(s) => (layers::rescale_forward(&x, *s)?, Cache::Nothing),
                Layer::Conv(p) => (layers::conv2d_forward(&x, p)?, Cache::Input(x)),
                Layer::MaxPool { pool, stride } => {
                    let (y, c) = layers::maxpool2d_forward(&x, *pool, *stride)?;
                    (y, Cache::Pool(c))
                }
                Layer::Relu => (layers::relu(&x), Cache::Input(x)),
                Layer::Flatten => (layers::flatten(&x)?, Cache::Shape(x.shape().clone())),
                Layer::Dense(p) => (layers::dense_forward(&x, p)?, Cache::Input(x)),
                Layer::Dropout(rate) => {
                    let (y, mask) = layers::dropout(&x, *rate, mode, rng)?;
                    (y, Cache::Mask(mask))
                }
                Layer::Softmax => {
                    let p = layers::softmax(&x)?;
                    (p.clone(), Cache::Probs(p))
                }
            };
            caches.push(cache);
            x = y;
        }
        self.caches = Some(caches);
        Ok(x)
    }

    /// Backpropagates the mean sparse cross-entropy of the last training
    /// forward pass, accumulating into every parameter gradient. The softmax
    /// head and the loss are differentiated together: `(p - onehot) / N`.
    pub fn backward(&mut self, labels: &[usize]) -> Result<()> {
        let mut caches = self.caches.take().ok_or(Error::NoForwardCache)?;
        let Some(Cache::Probs(probs)) = caches.pop() else {
            return Err(Error::NoForwardCache);
        };
        let mut grad = sparse_cce_grad_logits(&probs, labels)?;
        let body = self.layers.len() - 1;
        for (layer, cache) in self.layers[..body].iter_mut().zip(caches).rev() {
            grad = match (layer, cache) {
                (Layer::Rescaling(s), _) => layers::rescale_backward(&grad, *s)?,
                (Layer::Conv(p), Cache::Input(x)) => layers::conv2d_backward(&grad, &x, p)?,
                (Layer::MaxPool { .. }, Cache::Pool(c)) => layers::maxpool2d_backward(&grad, &c)?,
                (Layer::Relu, Cache::Input(x)) => layers::relu_backward(&grad, &x)?,
                (Layer::Flatten, Cache::Shape(s)) => layers::unflatten(&grad, &s)?,
                (Layer::Dense(p), Cache::Input(x)) => layers::dense_backward(&grad, &x, p)?,
                (Layer::Dropout(_), Cache::Mask(m)) => layers::dropout_backward(&grad, m.as_ref())?,
                (Layer::Softmax, _) => {
                    return Err(Error::Config("softmax is only supported as the final layer".into()))
                }
                _ => return Err(Error::NoForwardCache),
            };
        }
        Ok(())
    }

    /// Plain-text table with one row per layer and a parameter-count footer.
    pub fn summary(&self) -> String {
        let mut seen = std::collections::HashMap::<&str, usize>::new();
        let mut rows = Vec::with_capacity(self.layers.len());
        for ((spec, dims), params) in self.config.layers.iter().zip(&self.shapes).zip(self.layer_param_counts()) {
            let n = seen.entry(spec.key()).or_insert(0);
            let name = if *n == 0 {
                spec.key().to_string()
            } else {
                format!("{}_{}", spec.key(), n)
            };
            *n += 1;
            let shape = format!(
                "(None, {})",
                dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            );
            rows.push((format!("{name} ({})", spec.type_name()), shape, params));
        }
        let w0 = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(12) + 3;
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(12) + 3;
        let w2 = rows.iter().map(|r| group_digits(r.2).len()).max().unwrap_or(0).max(7);
        let rule = |c: char| c.to_string().repeat(w0 + w1 + w2);

        let mut out = String::new();
        let _ = writeln!(out, "{}", rule('_'));
        let _ = writeln!(out, "{:<w0$}{:<w1$}{:<w2$}", "Layer (type)", "Output Shape", "Param #");
        let _ = writeln!(out, "{}", rule('='));
        for (i, (name, shape, params)) in rows.iter().enumerate() {
            let _ = writeln!(out, "{name:<w0$}{shape:<w1$}{}", group_digits(*params));
            let _ = writeln!(out, "{}", if i + 1 == rows.len() { rule('=') } else { rule('_') });
        }
        let total = self.total_params();
        let _ = writeln!(out, "Total params: {}", group_digits(total));
        let _ = writeln!(out, "Trainable params: {}", group_digits(total));
        let _ = writeln!(out, "Non-trainable params: 0");
        out
    }
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Stacks `[H, W, C]` images into a `[N, H, W, C]` batch.
pub fn stack<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::Empty("batch"))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "cannot batch {} with {}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut dims = vec![images.len()];
    dims.extend_from_slice(first.dims());
    Ok(Tensor::from_parts(Shape::new(dims)?, data))
}
