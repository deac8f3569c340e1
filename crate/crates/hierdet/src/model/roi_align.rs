//! Quantization-free ROI alignment: bilinear sampling at 2x2 regularly
//! spaced points per output bin, averaged.

use crate::boxgeom::BBox;
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3};

/// One bilinear tap: four corner indices and weights for a continuous
/// sample position, or `None` when the point lies outside the map.
#[inline]
fn bilinear_taps<T: Scalar>(
    y: T,
    x: T,
    height: usize,
    width: usize,
) -> Option<([usize; 4], [usize; 4], [T; 4])> {
    let hf = T::of(height as f64);
    let wf = T::of(width as f64);
    if y < -T::one() || y > hf || x < -T::one() || x > wf {
        return None;
    }
    let y = y.max(T::zero());
    let x = x.max(T::zero());
    let mut y_low = y.to_usize().unwrap_or(0).min(height - 1);
    let mut x_low = x.to_usize().unwrap_or(0).min(width - 1);
    let (y_high, yy) = if y_low >= height - 1 {
        y_low = height - 1;
        (y_low, T::of(y_low as f64))
    } else {
        (y_low + 1, y)
    };
    let (x_high, xx) = if x_low >= width - 1 {
        x_low = width - 1;
        (x_low, T::of(x_low as f64))
    } else {
        (x_low + 1, x)
    };
    let ly = yy - T::of(y_low as f64);
    let lx = xx - T::of(x_low as f64);
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    Some((
        [y_low, y_low, y_high, y_high],
        [x_low, x_high, x_low, x_high],
        [hy * hx, hy * lx, ly * hx, ly * lx],
    ))
}

/// Iterate the sample positions and bin indices of an ROI. `emit` receives
/// `(bin_y, bin_x, sample_y, sample_x, mean_weight)`.
fn for_each_sample<T: Scalar>(
    roi: &BBox<T>,
    out_size: usize,
    spatial_scale: T,
    samples: usize,
    mut emit: impl FnMut(usize, usize, T, T, T),
) {
    let half = T::of(0.5);
    // Continuous feature coordinates with pixel-center alignment.
    let x1 = roi.x1() * spatial_scale - half;
    let y1 = roi.y1() * spatial_scale - half;
    let bin_w = (roi.x2() - roi.x1()) * spatial_scale / T::of(out_size as f64);
    let bin_h = (roi.y2() - roi.y1()) * spatial_scale / T::of(out_size as f64);
    let inv_count = T::one() / T::of((samples * samples) as f64);
    let inv_samples = T::one() / T::of(samples as f64);
    for by in 0..out_size {
        for bx in 0..out_size {
            for sy in 0..samples {
                let y = y1
                    + (T::of(by as f64) + (T::of(sy as f64) + half) * inv_samples) * bin_h;
                for sx in 0..samples {
                    let x = x1
                        + (T::of(bx as f64) + (T::of(sx as f64) + half) * inv_samples) * bin_w;
                    emit(by, bx, y, x, inv_count);
                }
            }
        }
    }
}

/// Pool each box into an `out_size x out_size` grid of channel vectors.
/// `features` is a `(C, H, W)` map; boxes are in image coordinates and
/// `spatial_scale` is `1 / stride`.
pub fn roi_align<T: Scalar>(
    features: &ArrayView3<'_, T>,
    boxes: &[BBox<T>],
    out_size: usize,
    spatial_scale: T,
    samples: usize,
) -> Array4<T> {
    let (c, h, w) = features.dim();
    let mut out = Array4::<T>::zeros((boxes.len(), c, out_size, out_size));
    for (bi, roi) in boxes.iter().enumerate() {
        for_each_sample(roi, out_size, spatial_scale, samples, |by, bx, y, x, wgt| {
            if let Some((ys, xs, ws)) = bilinear_taps(y, x, h, w) {
                for ci in 0..c {
                    let mut v = T::zero();
                    for t in 0..4 {
                        v += ws[t] * features[[ci, ys[t], xs[t]]];
                    }
                    out[[bi, ci, by, bx]] += v * wgt;
                }
            }
        });
    }
    out
}

/// Scatter pooled-feature gradients back onto the feature map.
pub fn roi_align_backward<T: Scalar>(
    d_features: &mut ArrayViewMut3<'_, T>,
    boxes: &[BBox<T>],
    d_pooled: &ndarray::ArrayView4<'_, T>,
    out_size: usize,
    spatial_scale: T,
    samples: usize,
) {
    let (c, h, w) = d_features.dim();
    for (bi, roi) in boxes.iter().enumerate() {
        for_each_sample(roi, out_size, spatial_scale, samples, |by, bx, y, x, wgt| {
            if let Some((ys, xs, ws)) = bilinear_taps(y, x, h, w) {
                for ci in 0..c {
                    let g = d_pooled[[bi, ci, by, bx]] * wgt;
                    for t in 0..4 {
                        d_features[[ci, ys[t], xs[t]]] += ws[t] * g;
                    }
                }
            }
        });
    }
}

/// Reference bilinear interpolation at a single point, shared with tests.
pub fn bilinear_at<T: Scalar>(plane: &ArrayView3<'_, T>, ci: usize, y: T, x: T) -> T {
    let (_, h, w) = plane.dim();
    match bilinear_taps(y, x, h, w) {
        Some((ys, xs, ws)) => (0..4).map(|t| ws[t] * plane[[ci, ys[t], xs[t]]]).sum(),
        None => T::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Naive oracle: average of independently interpolated sample points.
    fn oracle_pool(
        features: &Array3<f64>,
        roi: &BBox<f64>,
        out_size: usize,
        scale: f64,
        samples: usize,
    ) -> Array3<f64> {
        let (c, _, _) = features.dim();
        let mut out = Array3::<f64>::zeros((c, out_size, out_size));
        let bin_w = (roi.x2() - roi.x1()) * scale / out_size as f64;
        let bin_h = (roi.y2() - roi.y1()) * scale / out_size as f64;
        for ci in 0..c {
            for by in 0..out_size {
                for bxx in 0..out_size {
                    let mut acc = 0.0;
                    for sy in 0..samples {
                        for sx in 0..samples {
                            let y = roi.y1() * scale - 0.5
                                + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
                            let x = roi.x1() * scale - 0.5
                                + (bxx as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
                            acc += bilinear_at(&features.view(), ci, y, x);
                        }
                    }
                    out[[ci, by, bxx]] = acc / (samples * samples) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let features = Array3::<f64>::from_elem((3, 12, 12), 2.75);
        let rois = [bx(8.0, 8.0, 40.0, 56.0)];
        let pooled = roi_align(&features.view(), &rois, 7, 1.0 / 8.0, 2);
        for v in pooled.iter() {
            assert!((v - 2.75).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_matches_oracle() {
        let features =
            Array3::<f64>::from_shape_fn((2, 10, 10), |(c, y, x)| c as f64 + 0.3 * y as f64 + 0.7 * x as f64);
        let rois = [bx(5.0, 3.0, 61.0, 49.0)];
        let pooled = roi_align(&features.view(), &rois, 7, 1.0 / 8.0, 2);
        let expect = oracle_pool(&features, &rois[0], 7, 1.0 / 8.0, 2);
        for ((_, c, y, x), v) in pooled.indexed_iter() {
            assert!((v - expect[[c, y, x]]).abs() < 1e-6);
        }
    }

    #[test]
    fn full_image_box_on_matching_grid_recovers_map() {
        // 7x7 feature map, stride 1, box covering exactly the pixel centers.
        let features = Array3::<f64>::from_shape_fn((1, 7, 7), |(_, y, x)| (y * 7 + x) as f64);
        // Box chosen so each output bin's sample points straddle one pixel center.
        let rois = [bx(0.0, 0.0, 7.0, 7.0)];
        let pooled = roi_align(&features.view(), &rois, 7, 1.0, 2);
        let expect = oracle_pool(&features, &rois[0], 7, 1.0, 2);
        for ((_, c, y, x), v) in pooled.indexed_iter() {
            assert!((v - expect[[c, y, x]]).abs() < 1e-9);
        }
        // Center bin samples sit symmetrically around the center pixel.
        assert!((pooled[[0, 3, 3, 3]] - features[[0, 3, 3]]).abs() < 1e-9);
    }

    #[test]
    fn random_maps_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let h = rng.gen_range(4..14);
            let w = rng.gen_range(4..14);
            let c = rng.gen_range(1..4);
            let features = Array3::<f64>::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0));
            let scale = 1.0 / 8.0;
            let x1 = rng.gen_range(0.0..(w as f64 * 8.0 - 10.0));
            let y1 = rng.gen_range(0.0..(h as f64 * 8.0 - 10.0));
            let roi = bx(
                x1,
                y1,
                x1 + rng.gen_range(4.0..(w as f64 * 8.0 - x1).max(5.0)),
                y1 + rng.gen_range(4.0..(h as f64 * 8.0 - y1).max(5.0)),
            );
            let pooled = roi_align(&features.view(), &[roi], 7, scale, 2);
            let expect = oracle_pool(&features, &roi, 7, scale, 2);
            for ((_, ci, y, x), v) in pooled.indexed_iter() {
                assert!((v - expect[[ci, y, x]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let features = Array3::<f64>::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let roi = bx(6.0, 4.0, 30.0, 38.0);
        let scale = 1.0 / 8.0;
        let pooled = roi_align(&features.view(), &[roi], 7, scale, 2);
        let d_pooled = Array4::<f64>::from_shape_fn(pooled.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let mut d_feat = Array3::<f64>::zeros(features.raw_dim());
        roi_align_backward(&mut d_feat.view_mut(), &[roi], &d_pooled.view(), 7, scale, 2);
        let h = 1e-6;
        let objective = |f: &Array3<f64>| -> f64 {
            (&roi_align(&f.view(), &[roi], 7, scale, 2) * &d_pooled).sum()
        };
        for c in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    let mut fp = features.clone();
                    fp[[c, y, x]] += h;
                    let mut fm = features.clone();
                    fm[[c, y, x]] -= h;
                    let numeric = (objective(&fp) - objective(&fm)) / (2.0 * h);
                    assert!(
                        (numeric - d_feat[[c, y, x]]).abs() < 1e-6,
                        "({c},{y},{x}): {numeric} vs {}",
                        d_feat[[c, y, x]]
                    );
                }
            }
        }
    }
}
