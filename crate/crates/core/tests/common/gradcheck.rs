//! Central finite-difference checks in f64 for every layer and for a small
//! end-to-end model. Each check returns the worst relative error
//! `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over all the
//! gradients it compares.
#![allow(dead_code)]

use kcr_core::layers::{self, ConvParams, DenseParams, Mode, Padding};
use kcr_core::loss::{sparse_cce, sparse_cce_grad_logits};
use kcr_core::model::{LayerSpec, ModelConfig, SequentialModel};
use kcr_core::{Rng, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn random(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.uniform_range(-1.0, 1.0)).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| {
        let m = rng.uniform_range(0.05, 1.0);
        if rng.uniform() < 0.5 { -m } else { m }
    })
    .unwrap()
}

/// Distinct values at least 0.01 apart so pooling windows have no near ties.
fn distinct(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    rng.shuffle(&mut values);
    Tensor::new(dims.to_vec(), values).unwrap()
}

fn dot(a: &Tensor<f64>, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with(x: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(x.dims().to_vec(), data.to_vec()).unwrap()
}

/// Checks a parameter-free layer `y = f(x)` against its backward pass.
fn check_unary(
    x: &Tensor<f64>,
    forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    rng: &mut Rng,
) -> f64 {
    let y = forward(x);
    let r = random(y.dims(), rng);
    let analytic = backward(&r, x);
    let numeric = numeric_grad(x.data(), |v| dot(&forward(&with(x, v)), r.data()));
    rel_error(analytic.data(), &numeric)
}

pub fn check_rescale(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = random(&[2, 3, 3, 2], &mut rng);
    check_unary(
        &x,
        |x| layers::rescale_forward(x, 0.37).unwrap(),
        |up, _| layers::rescale_backward(up, 0.37).unwrap(),
        &mut rng,
    )
}

pub fn check_relu(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = away_from_zero(&[2, 4, 3, 2], &mut rng);
    check_unary(&x, layers::relu, |up, x| layers::relu_backward(up, x).unwrap(), &mut rng)
}

pub fn check_maxpool(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (pool, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][rng.below(4)];
    let (h, w) = (pool + rng.below(4), pool + rng.below(4));
    let x = distinct(&[1 + rng.below(2), h, w, 1 + rng.below(3)], &mut rng);
    check_unary(
        &x,
        |x| layers::maxpool2d_forward(x, pool, stride).unwrap().0,
        |up, x| {
            let (_, cache) = layers::maxpool2d_forward(x, pool, stride).unwrap();
            layers::maxpool2d_backward(up, &cache).unwrap()
        },
        &mut rng,
    )
}

pub fn check_flatten(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = random(&[2, 3, 2, 2], &mut rng);
    check_unary(
        &x,
        |x| layers::flatten(x).unwrap(),
        |up, x| layers::unflatten(up, x.shape()).unwrap(),
        &mut rng,
    )
}

pub fn check_dropout(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = random(&[3, 10], &mut rng);
    let mask_seed = rng.next_u64();
    let (_, mask) = layers::dropout(&x, 0.3, Mode::Train, &mut Rng::new(mask_seed)).unwrap();
    check_unary(
        &x,
        |x| layers::dropout(x, 0.3, Mode::Train, &mut Rng::new(mask_seed)).unwrap().0,
        |up, _| layers::dropout_backward(up, mask.as_ref()).unwrap(),
        &mut rng,
    )
}

pub fn check_conv(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (kh, kw) = (1 + rng.below(3), 1 + rng.below(3));
    let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
    let stride = 1 + rng.below(2);
    let padding = if rng.uniform() < 0.5 { Padding::Same } else { Padding::Valid };
    let (h, w) = (kh + 1 + rng.below(4), kw + 1 + rng.below(4));
    let x = random(&[1 + rng.below(2), h, w, cin], &mut rng);
    let kernel = random(&[kh, kw, cin, cout], &mut rng);
    let bias = random(&[cout], &mut rng);
    let make = |k: &Tensor<f64>, b: &Tensor<f64>| ConvParams::new(k.clone(), b.clone(), stride, padding).unwrap();

    let mut p = make(&kernel, &bias);
    let y = layers::conv2d_forward(&x, &p).unwrap();
    let r = random(y.dims(), &mut rng);
    let dx = layers::conv2d_backward(&r, &x, &mut p).unwrap();

    let num_dx = numeric_grad(x.data(), |v| dot(&layers::conv2d_forward(&with(&x, v), &p).unwrap(), r.data()));
    let num_dk = numeric_grad(kernel.data(), |v| {
        dot(&layers::conv2d_forward(&x, &make(&with(&kernel, v), &bias)).unwrap(), r.data())
    });
    let num_db = numeric_grad(bias.data(), |v| {
        dot(&layers::conv2d_forward(&x, &make(&kernel, &with(&bias, v))).unwrap(), r.data())
    });
    rel_error(dx.data(), &num_dx)
        .max(rel_error(p.kernel.grad.data(), &num_dk))
        .max(rel_error(p.bias.grad.data(), &num_db))
}

pub fn check_dense(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, inputs, units) = (1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(5));
    let x = random(&[n, inputs], &mut rng);
    let w = random(&[inputs, units], &mut rng);
    let b = random(&[units], &mut rng);
    let make = |w: &Tensor<f64>, b: &Tensor<f64>| DenseParams::new(w.clone(), b.clone()).unwrap();

    let mut p = make(&w, &b);
    let y = layers::dense_forward(&x, &p).unwrap();
    let r = random(y.dims(), &mut rng);
    let dx = layers::dense_backward(&r, &x, &mut p).unwrap();

    let num_dx = numeric_grad(x.data(), |v| dot(&layers::dense_forward(&with(&x, v), &p).unwrap(), r.data()));
    let num_dw = numeric_grad(w.data(), |v| dot(&layers::dense_forward(&x, &make(&with(&w, v), &b)).unwrap(), r.data()));
    let num_db = numeric_grad(b.data(), |v| dot(&layers::dense_forward(&x, &make(&w, &with(&b, v))).unwrap(), r.data()));
    rel_error(dx.data(), &num_dx)
        .max(rel_error(p.weights.grad.data(), &num_dw))
        .max(rel_error(p.bias.grad.data(), &num_db))
}

/// Softmax followed by the cross-entropy, against the fused logit gradient.
pub fn check_softmax_cce(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, k) = (1 + rng.below(4), 2 + rng.below(6));
    let z = Tensor::from_fn([n, k], |_| rng.uniform_range(-3.0, 3.0)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let loss = |z: &Tensor<f64>| sparse_cce(&layers::softmax(z).unwrap(), &labels).unwrap().value;
    let analytic = sparse_cce_grad_logits(&layers::softmax(&z).unwrap(), &labels).unwrap();
    let numeric = numeric_grad(z.data(), |v| loss(&with(&z, v)));
    rel_error(analytic.data(), &numeric)
}

/// 8x8x1 input, a 2-filter conv, pooling, two dense layers with dropout
/// between them, softmax and cross-entropy, checked for every parameter.
pub fn check_tiny_model(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let config = ModelConfig {
        input_shape: [8, 8, 1],
        layers: vec![
            LayerSpec::Rescaling { scale: 1.0 / 255.0 },
            LayerSpec::conv3x3(2),
            LayerSpec::ReLU,
            LayerSpec::pool2x2(),
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 5 },
            LayerSpec::ReLU,
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Dense { units: 3 },
            LayerSpec::Softmax,
        ],
        num_classes: 3,
    };
    let mut model = SequentialModel::<f64>::build(config, seed).unwrap();
    // Non-zero biases so the check covers their effect on later layers.
    for p in model.params_mut() {
        if p.value.dims().len() == 1 {
            for v in p.value.data_mut() {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        }
    }
    let batch = Tensor::from_fn([3, 8, 8, 1], |_| rng.uniform_range(0.0, 255.0)).unwrap();
    let labels: Vec<usize> = (0..3).map(|_| rng.below(3)).collect();
    let mask_seed = rng.next_u64();

    let loss = |m: &mut SequentialModel<f64>| {
        let probs = m.forward(&batch, Mode::Train, &mut Rng::new(mask_seed)).unwrap();
        sparse_cce(&probs, &labels).unwrap().value
    };
    loss(&mut model);
    model.backward(&labels).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let start = model.params()[i].value.data().to_vec();
        let numeric = numeric_grad(&start, |v| {
            model.params_mut()[i].value.data_mut().copy_from_slice(v);
            loss(&mut model)
        });
        model.params_mut()[i].value.data_mut().copy_from_slice(&start);
        worst = worst.max(rel_error(grad, &numeric));
    }
    worst
}

pub type Check = (&'static str, fn(u64) -> f64);

pub const ALL_CHECKS: [Check; 9] = [
    ("rescaling", check_rescale),
    ("conv2d", check_conv),
    ("relu", check_relu),
    ("max_pooling2d", check_maxpool),
    ("flatten", check_flatten),
    ("dense", check_dense),
    ("dropout", check_dropout),
    ("softmax+cross-entropy", check_softmax_cce),
    ("tiny model end to end", check_tiny_model),
];
