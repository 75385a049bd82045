//! Forward and backward passes for every layer type in the network.
//!
//! Each pass is a free function. Callers keep whatever the backward pass needs
//! (the forward input, the pooling argmax, the dropout mask) and hand it back
//! explicitly. Image layers accept either a single image `[H, W, C]` or a batch
//! `[N, H, W, C]` and return the same rank they were given.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Rng, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// A learnable tensor with its gradient buffer.
///
/// `has_grad` is set by a backward pass and cleared when an optimizer consumes
/// the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub has_grad: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::from_parts(value.shape().clone(), vec![T::zero(); value.len()]);
        Param {
            value,
            grad,
            has_grad: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        self.has_grad = false;
    }

    fn accumulate(&mut self, delta: &[T]) {
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
        self.has_grad = true;
    }
}

fn glorot<T: Real>(dims: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.uniform_range(-limit, limit)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[kh, kw, Cin, Cout]`
    pub kernel: Param<T>,
    /// `[Cout]`
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        let &[_, _, _, cout] = kernel.dims() else {
            return Err(Error::Shape(format!(
                "conv kernel must be [kh, kw, Cin, Cout], got {}",
                kernel.shape()
            )));
        };
        if bias.dims() != [cout] {
            return Err(Error::Shape(format!(
                "conv bias {} does not match {cout} filters",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        Ok(ConvParams {
            kernel: Param::new(kernel),
            bias: Param::new(bias),
            stride,
            padding,
        })
    }

    /// Glorot-uniform kernel, zero bias.
    pub fn glorot(
        kernel: (usize, usize),
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let k = glorot(vec![kh, kw, cin, cout], kh * kw * cin, kh * kw * cout, rng)?;
        Self::new(k, Tensor::zeros([cout])?, stride, padding)
    }

    /// `(kh, kw, Cin, Cout)`
    pub fn geometry(&self) -> (usize, usize, usize, usize) {
        let d = self.kernel.value.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn param_count(&self) -> usize {
        let (kh, kw, cin, cout) = self.geometry();
        (kh * kw * cin + 1) * cout
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw, _, _) = self.geometry();
        let rows = conv_axis(h, kh, self.stride, self.padding)?;
        let cols = conv_axis(w, kw, self.stride, self.padding)?;
        Ok((rows.out, cols.out))
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    out: usize,
    pad_before: usize,
}

fn conv_axis(input: usize, k: usize, stride: usize, padding: Padding) -> Result<Axis> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok(Axis {
                out,
                pad_before: total / 2,
            })
        }
        Padding::Valid => {
            if k > input {
                return Err(Error::Shape(format!(
                    "kernel extent {k} exceeds input extent {input}"
                )));
            }
            Ok(Axis {
                out: (input - k) / stride + 1,
                pad_before: 0,
            })
        }
    }
}

/// Splits an image or image batch into `(n, h, w, c, batched)`.
fn image_dims(shape: &Shape, what: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape.dims() {
        [h, w, c] => Ok((1, h, w, c, false)),
        [n, h, w, c] => Ok((n, h, w, c, true)),
        _ => Err(Error::Shape(format!(
            "{what}: expected [H, W, C] or [N, H, W, C], got {shape}"
        ))),
    }
}

fn image_shape(n: usize, h: usize, w: usize, c: usize, batched: bool) -> Shape {
    let dims = if batched { vec![n, h, w, c] } else { vec![h, w, c] };
    Shape::new(dims).expect("extents are positive")
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    batched: bool,
}

impl ConvGeometry {
    fn new<T: Real>(x: &Shape, p: &ConvParams<T>) -> Result<Self> {
        let (n, h, w, cin, batched) = image_dims(x, "conv2d")?;
        let (kh, kw, kcin, _) = p.geometry();
        if cin != kcin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        let rows = conv_axis(h, kh, p.stride, p.padding)?;
        let cols = conv_axis(w, kw, p.stride, p.padding)?;
        Ok(ConvGeometry {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            oh: rows.out,
            ow: cols.out,
            stride: p.stride,
            pad_top: rows.pad_before,
            pad_left: cols.pad_before,
            batched,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Source pixel offset for output `(oy, ox)` and kernel tap `(dh, dw)`,
    /// or `None` when the tap lands in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, dh: usize, dw: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + dh).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + dw).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unrolls input patches into rows of `[N*OH*OW, kh*kw*Cin]`, matching the
/// row-major layout of a `[kh, kw, Cin, Cout]` kernel viewed as a matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let mut row = 0;
    for b in 0..g.n {
        let img = &x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for dh in 0..g.kh {
                    for dw in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, dh, dw) {
                            let src = (y * g.w + xx) * g.cin;
                            let off = (dh * g.kw + dw) * g.cin;
                            dst[off..off + g.cin].copy_from_slice(&img[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for b in 0..g.n {
        let img = &mut dx[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for dh in 0..g.kh {
                    for dw in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, dh, dw) {
                            let dst = (y * g.w + xx) * g.cin;
                            let off = (dh * g.kw + dw) * g.cin;
                            for c in 0..g.cin {
                                img[dst + c] += src[off + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

pub fn rescale_forward<T: Real>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    x.scale(scale)
}

pub fn rescale_backward<T: Real>(upstream: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    upstream.scale(scale)
}

/// 2-D convolution (cross-correlation) over channels-last input.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), p)?;
    let (_, _, _, cout) = p.geometry();
    let cols = im2col(x.data(), &g);
    let bias = p.bias.value.data();
    let mut out = Vec::with_capacity(g.rows() * cout);
    for _ in 0..g.rows() {
        out.extend_from_slice(bias);
    }
    gemm(&cols, p.kernel.value.data(), &mut out, g.rows(), g.patch_len(), cout);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("conv2d output".into()));
    }
    Ok(Tensor::from_parts(
        image_shape(g.n, g.oh, g.ow, cout, g.batched),
        out,
    ))
}

/// Returns dL/dx and accumulates dL/dkernel, dL/dbias into `p`.
pub fn conv2d_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    p: &mut ConvParams<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), p)?;
    let (_, _, _, cout) = p.geometry();
    let expected = image_shape(g.n, g.oh, g.ow, cout, g.batched);
    if upstream.shape() != &expected {
        return Err(Error::Shape(format!(
            "conv2d backward: upstream {} but forward produced {expected}",
            upstream.shape()
        )));
    }
    let dy = upstream.data();
    let rows = g.rows();
    let plen = g.patch_len();

    let mut dbias = vec![T::zero(); cout];
    for r in dy.chunks(cout) {
        for (acc, &v) in dbias.iter_mut().zip(r) {
            *acc += v;
        }
    }

    let cols = im2col(x.data(), &g);
    let cols_t = Tensor::from_parts(Shape::new([rows, plen])?, cols).transpose2d()?;
    let mut dkernel = vec![T::zero(); plen * cout];
    gemm(cols_t.data(), dy, &mut dkernel, plen, rows, cout);

    let kernel_t = Tensor::from_parts(Shape::new([plen, cout])?, p.kernel.value.data().to_vec())
        .transpose2d()?;
    let mut dcols = vec![T::zero(); rows * plen];
    gemm(dy, kernel_t.data(), &mut dcols, rows, cout, plen);
    let dx = col2im(&dcols, &g);

    p.kernel.accumulate(&dkernel);
    p.bias.accumulate(&dbias);
    Ok(Tensor::from_parts(x.shape().clone(), dx))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_parts(x.shape().clone(), data)
}

/// Passes the upstream gradient where `x > 0`; the derivative at 0 is 0.
pub fn relu_backward<T: Real>(upstream: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "relu backward: upstream {} vs input {}",
            upstream.shape(),
            x.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.shape().clone(), data))
}

/// What max pooling remembers for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolCache {
    input_shape: Shape,
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

pub fn pool_output_hw(h: usize, w: usize, pool: usize, stride: usize) -> Result<(usize, usize)> {
    if pool == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool size and stride must be >= 1".into()));
    }
    if h < pool || w < pool {
        return Err(Error::Shape(format!(
            "max pooling window {pool}x{pool} does not fit a {h}x{w} input"
        )));
    }
    Ok(((h - pool) / stride + 1, (w - pool) / stride + 1))
}

/// Max pooling with a square window. Trailing rows or columns that do not
/// fill a window are dropped; ties go to the first element in row-major order.
pub fn maxpool2d_forward<T: Real>(
    x: &Tensor<T>,
    pool: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let (n, h, w, c, batched) = image_dims(x.shape(), "maxpool2d")?;
    let (oh, ow) = pool_output_hw(h, w, pool, stride)?;
    let src = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = base + ((oy * stride) * w + ox * stride) * c + ch;
                    for dy in 0..pool {
                        for dx in 0..pool {
                            let idx = base + ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(image_shape(n, oh, ow, c, batched), out),
        PoolCache {
            input_shape: x.shape().clone(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Real>(upstream: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    if upstream.len() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool backward: upstream has {} elements, forward produced {}",
            upstream.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = vec![T::zero(); cache.input_shape.numel()];
    for (&u, &i) in upstream.data().iter().zip(&cache.argmax) {
        dx[i] += u;
    }
    Ok(Tensor::from_parts(cache.input_shape.clone(), dx))
}

/// `[H, W, C] -> [H*W*C]`, or `[N, H, W, C] -> [N, H*W*C]` keeping the batch axis.
pub fn flatten<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c, batched) = image_dims(x.shape(), "flatten")?;
    let dims = if batched { vec![n, h * w * c] } else { vec![h * w * c] };
    x.clone().reshape(dims)
}

pub fn unflatten<T: Real>(upstream: &Tensor<T>, shape: &Shape) -> Result<Tensor<T>> {
    upstream.clone().reshape(shape.dims().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[in, out]`
    pub weights: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
}

impl<T: Real> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let &[_, out] = weights.dims() else {
            return Err(Error::Shape(format!(
                "dense weights must be [in, out], got {}",
                weights.shape()
            )));
        };
        if bias.dims() != [out] {
            return Err(Error::Shape(format!(
                "dense bias {} does not match {out} units",
                bias.shape()
            )));
        }
        Ok(DenseParams {
            weights: Param::new(weights),
            bias: Param::new(bias),
        })
    }

    pub fn glorot(inputs: usize, units: usize, rng: &mut Rng) -> Result<Self> {
        let w = glorot(vec![inputs, units], inputs, units, rng)?;
        Self::new(w, Tensor::zeros([units])?)
    }

    pub fn inputs(&self) -> usize {
        self.weights.value.dims()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.value.dims()[1]
    }

    pub fn param_count(&self) -> usize {
        (self.inputs() + 1) * self.units()
    }
}

fn dense_rows<T: Real>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<usize> {
    let (rows, len) = match *x.dims() {
        [len] => (1, len),
        [n, len] => (n, len),
        _ => {
            return Err(Error::Shape(format!(
                "dense: expected [in] or [N, in], got {}",
                x.shape()
            )))
        }
    };
    if len != p.inputs() {
        return Err(Error::Shape(format!(
            "dense: input length {len}, layer expects {}",
            p.inputs()
        )));
    }
    Ok(rows)
}

/// `y = x W + b`
pub fn dense_forward<T: Real>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let rows = dense_rows(x, p)?;
    let units = p.units();
    let mut out = Vec::with_capacity(rows * units);
    for _ in 0..rows {
        out.extend_from_slice(p.bias.value.data());
    }
    gemm(x.data(), p.weights.value.data(), &mut out, rows, p.inputs(), units);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("dense output".into()));
    }
    let dims = if x.shape().rank() == 1 { vec![units] } else { vec![rows, units] };
    Ok(Tensor::from_parts(Shape::new(dims)?, out))
}

pub fn dense_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    p: &mut DenseParams<T>,
) -> Result<Tensor<T>> {
    let rows = dense_rows(x, p)?;
    let (inputs, units) = (p.inputs(), p.units());
    if upstream.len() != rows * units {
        return Err(Error::Shape(format!(
            "dense backward: upstream {} for {rows} rows of {units} units",
            upstream.shape()
        )));
    }
    let dy = upstream.data();
    let mut dbias = vec![T::zero(); units];
    for r in dy.chunks(units) {
        for (acc, &v) in dbias.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let x_t = Tensor::from_parts(Shape::new([rows, inputs])?, x.data().to_vec()).transpose2d()?;
    let mut dw = vec![T::zero(); inputs * units];
    gemm(x_t.data(), dy, &mut dw, inputs, rows, units);
    let w_t = p.weights.value.transpose2d()?;
    let mut dx = vec![T::zero(); rows * inputs];
    gemm(dy, w_t.data(), &mut dx, rows, units, inputs);

    p.weights.accumulate(&dw);
    p.bias.accumulate(&dbias);
    Ok(Tensor::from_parts(x.shape().clone(), dx))
}

/// Inverted dropout. In `Train` mode each element survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; the returned mask holds those
/// per-element multipliers. `Infer` mode and `rate == 0` are the identity.
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
        .collect();
    let mask = Tensor::from_parts(x.shape().clone(), mask);
    let y = x.hadamard(&mask)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Real>(upstream: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => upstream.hadamard(m),
        None => Ok(upstream.clone()),
    }
}

/// Row-wise softmax over the last axis, shifted by the row maximum.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let k = *x.dims().last().ok_or(Error::Empty("softmax"))?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}
