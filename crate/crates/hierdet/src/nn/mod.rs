//! Minimal layer toolkit for the detector: fully connected and convolution
//! layers with hand-written backward passes, He-style initialization, and
//! SGD with momentum and weight decay.
//!
//! Layers accumulate gradients into their own `g*` buffers; the optimizer
//! consumes and zeroes them through [`visit`](ParamMut) traversal, which is
//! also how checkpoints and parameter counts are produced.

mod conv;
mod linear;

pub use conv::{im2col, Conv2d};
pub use linear::Linear;

use crate::scalar::Scalar;
use ndarray::{ArrayViewMutD, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Callback used to traverse named parameters and their gradients in a
/// stable order.
pub type ParamMut<'a, T> = dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>) + 'a;

/// Draw from a normal distribution in `f64` and cast, so initialization is
/// identical across scalar types for a fixed seed.
pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, std: f64) -> T {
    let n = Normal::new(0.0, std).expect("valid std");
    T::of(n.sample(rng))
}

/// He initialization scale for a layer with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// In-place ReLU.
pub fn relu_inplace<T: Scalar, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) {
    a.mapv_inplace(|v| v.max(T::zero()));
}

/// Backward through ReLU given the post-activation output: zero the
/// gradient wherever the activation was clamped.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<T, D>,
    output: &ndarray::Array<T, D>,
) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// SGD with momentum and decoupled-from-nothing weight decay folded into
/// the gradient: `v = m v + (g + wd w); w -= lr v`.
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<String, ndarray::ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Update one parameter in place and zero its gradient.
    pub fn step_param(
        &mut self,
        name: &str,
        mut value: ArrayViewMutD<'_, T>,
        mut grad: ArrayViewMutD<'_, T>,
    ) {
        let (lr, momentum, wd) = (self.lr, self.momentum, self.weight_decay);
        let vel = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| ndarray::ArrayD::zeros(value.raw_dim()));
        Zip::from(vel)
            .and(&mut value)
            .and(&mut grad)
            .for_each(|v, w, g| {
                *v = momentum * *v + (*g + wd * *w);
                *w = *w - lr * *v;
                *g = T::zero();
            });
    }
}
