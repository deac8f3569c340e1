//! Fully connected layer.

use crate::nn::{normal_init, ParamMut};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// `y = x W^T + b` over a batch of row vectors.
pub struct Linear<T> {
    /// Weights, shape `(out, in)`.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, weight_std: f64, rng: &mut R) -> Self {
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| normal_init(rng, weight_std));
        Self {
            w,
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `x`: `(n, in)` → `(n, out)`.
    pub fn forward(&self, x: &ArrayView2<'_, T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.out_dim()));
        general_mat_mul(T::one(), x, &self.w.t(), T::zero(), &mut y);
        y += &self.b;
        y
    }

    /// Accumulates `gw`, `gb` and returns `dL/dx`.
    pub fn backward(&mut self, x: &ArrayView2<'_, T>, dy: &ArrayView2<'_, T>) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut self.gw);
        self.gb += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros((x.nrows(), self.in_dim()));
        general_mat_mul(T::one(), dy, &self.w, T::zero(), &mut dx);
        dx
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn visit(&mut self, name: &str, f: &mut ParamMut<'_, T>) {
        f(
            &format!("{name}.w"),
            self.w.view_mut().into_dyn(),
            self.gw.view_mut().into_dyn(),
        );
        f(
            &format!("{name}.b"),
            self.b.view_mut().into_dyn(),
            self.gb.view_mut().into_dyn(),
        );
    }
}
