//! 2D convolution via im2col + GEMM, with zero padding.

use crate::nn::{normal_init, ParamMut};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;

/// Unfold `(C, H, W)` into patch columns `(C*k*k, OH*OW)` for the given
/// kernel size, stride, and symmetric zero padding. Row order matches the
/// row-major flattening of `(C, k, k)` weights.
pub fn im2col<T: Scalar>(
    x: &ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im<T: Scalar>(
    cols: &ArrayView2<'_, T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

pub struct Conv2d<T> {
    /// Weights, shape `(out_channels, in_channels, k, k)`.
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub gw: Array4<T>,
    pub gb: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight_std: f64,
        rng: &mut R,
    ) -> Self {
        let w = Array4::from_shape_fn((out_channels, in_channels, k, k), |_| {
            normal_init(rng, weight_std)
        });
        Self {
            w,
            b: Array1::zeros(out_channels),
            gw: Array4::zeros((out_channels, in_channels, k, k)),
            gb: Array1::zeros(out_channels),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Forward for one image `(C, H, W)` → `(OC, OH, OW)`.
    pub fn forward_one(&self, x: &ArrayView3<'_, T>) -> Array3<T> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad);
        let oc = self.out_channels();
        let wmat = self
            .w
            .view()
            .into_shape_with_order((oc, self.w.len() / oc))
            .expect("contiguous conv weights");
        let mut y = Array2::<T>::zeros((oc, oh * ow));
        general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut y);
        for (mut row, &bias) in y.outer_iter_mut().zip(self.b.iter()) {
            row += bias;
        }
        y.into_shape_with_order((oc, oh, ow)).expect("output shape")
    }

    /// Pure per-image backward: recomputes the im2col expansion and returns
    /// `(dL/dx, dL/dw, dL/db)` without touching the accumulators, so batch
    /// items can run in parallel and reduce in a fixed order.
    pub fn grads_one(
        &self,
        x: &ArrayView3<'_, T>,
        dy: &ArrayView3<'_, T>,
    ) -> (Array3<T>, Array4<T>, Array1<T>) {
        let (c, h, w) = x.dim();
        let (oc, oh, ow) = dy.dim();
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad);
        let dy_mat = dy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("contiguous grad");
        let mut gw = Array2::<T>::zeros((oc, c * k * k));
        general_mat_mul(T::one(), &dy_mat, &cols.t(), T::zero(), &mut gw);
        let gb = dy_mat.sum_axis(Axis(1));
        let wmat = self
            .w
            .view()
            .into_shape_with_order((oc, c * k * k))
            .expect("contiguous conv weights");
        let mut dcols = Array2::<T>::zeros((c * k * k, oh * ow));
        general_mat_mul(T::one(), &wmat.t(), &dy_mat, T::zero(), &mut dcols);
        let dx = col2im(&dcols.view(), c, h, w, k, self.stride, self.pad);
        let gw = gw
            .into_shape_with_order((oc, c, k, k))
            .expect("weight shape");
        (dx, gw, gb)
    }

    /// Backward for one image, accumulating `gw`/`gb` and returning `dL/dx`.
    pub fn backward_one(&mut self, x: &ArrayView3<'_, T>, dy: &ArrayView3<'_, T>) -> Array3<T> {
        let (dx, gw, gb) = self.grads_one(x, dy);
        self.gw += &gw;
        self.gb += &gb;
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
