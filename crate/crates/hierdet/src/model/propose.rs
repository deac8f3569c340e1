//! Region proposals from raw RPN outputs: decode anchor deltas, clip to the
//! image, keep the top-k by objectness, and apply NMS.

use crate::boxgeom::{decode_deltas, nms, BBox, BoxDeltas};
use crate::scalar::Scalar;
use ndarray::ArrayView2;

/// Log-scale deltas are clamped here before `exp` so early-training outputs
/// cannot produce overflow-sized boxes.
pub const DELTA_CLAMP: f64 = 4.0;

pub struct ProposeParams<T> {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_thresh: T,
    pub min_size: T,
    pub image_size: T,
}

/// `objectness[i]` and `deltas` row `i` correspond to `anchors[i]`.
/// Returns at most `post_nms` boxes sorted by descending objectness
/// (ties by lower anchor index).
pub fn propose<T: Scalar>(
    objectness: &[T],
    deltas: &ArrayView2<'_, T>,
    anchors: &[BBox<T>],
    params: &ProposeParams<T>,
) -> Vec<BBox<T>> {
    debug_assert_eq!(objectness.len(), anchors.len());
    debug_assert_eq!(deltas.nrows(), anchors.len());
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| {
        objectness[b]
            .partial_cmp(&objectness[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(params.pre_nms);

    let clamp = T::of(DELTA_CLAMP);
    let mut boxes: Vec<BBox<T>> = Vec::with_capacity(order.len());
    let mut scores: Vec<T> = Vec::with_capacity(order.len());
    for &i in &order {
        let d = BoxDeltas {
            tx: deltas[[i, 0]],
            ty: deltas[[i, 1]],
            tw: deltas[[i, 2]].min(clamp),
            th: deltas[[i, 3]].min(clamp),
        };
        let decoded = decode_deltas(&anchors[i], &d);
        if let Some(clipped) = decoded.clip(params.image_size, params.image_size, params.min_size)
        {
            boxes.push(clipped);
            scores.push(objectness[i]);
        }
    }
    // Scores are already descending; nms preserves that order in its output.
    let kept = nms(&boxes, &scores, params.nms_thresh).expect("equal lengths");
    kept.into_iter()
        .take(params.post_nms)
        .map(|k| boxes[k])
        .collect()
}
