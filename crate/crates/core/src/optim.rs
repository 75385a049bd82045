//! ADAM and plain SGD over a list of [`Param`]s.
//!
//! Both optimizers consume the gradients they apply: after a step every
//! gradient buffer is zeroed and marked absent. Stepping again before a new
//! backward pass is rejected with [`Error::MissingGradient`] and leaves the
//! parameters untouched.

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || self.beta1 == 0.0 || self.beta2 == 0.0 {
            return Err(Error::InvalidArgument("ADAM betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("ADAM epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// First-moment estimates, one per parameter.
    m: Vec<Tensor<T>>,
    /// Second-moment estimates, one per parameter.
    v: Vec<Tensor<T>>,
    t: u64,
}

fn check_ready<T: Real>(params: &[&mut Param<T>]) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if !p.has_grad || p.grad.shape() != p.value.shape() {
            return Err(Error::MissingGradient(i));
        }
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    Ok(())
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        check_ready(params)?;
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(Tensor::zeros(p.value.dims().to_vec())?);
                self.v.push(Tensor::zeros(p.value.dims().to_vec())?);
            }
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(Error::Shape("parameter set changed between ADAM steps".into()));
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let correct1 = 1.0 - beta1.powi(self.t as i32);
        let correct2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (c1, c2) = (T::of(correct1), T::of(correct2));
        let (lr, eps) = (T::of(lr), T::of(eps));

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data().to_vec();
            let theta = p.value.data_mut();
            for (((th, &g), mi), vi) in theta
                .iter_mut()
                .zip(&grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// `theta <- theta - lr * g`
pub fn sgd_step<T: Real>(params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
    check_ready(params)?;
    let lr = T::of(lr);
    for p in params.iter_mut() {
        let grads = p.grad.data().to_vec();
        for (th, g) in p.value.data_mut().iter_mut().zip(grads) {
            *th = *th - lr * g;
        }
        p.zero_grad();
    }
    Ok(())
}
