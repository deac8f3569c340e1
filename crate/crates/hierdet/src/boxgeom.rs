//! Axis-aligned box arithmetic: IoU, delta encoding/decoding, anchor
//! generation, non-maximum suppression, and COCO size bucketing.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` with `x1 < x2`,
//! `y1 < y2`; coordinates are continuous pixels. The COCO `[x, y, w, h]`
//! convention is converted at the dataset boundary.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("degenerate box: ({0}, {1}, {2}, {3}) requires x1 < x2 and y1 < y2")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("non-finite box coordinate: ({0}, {1}, {2}, {3})")]
    NonFiniteBox(f64, f64, f64, f64),
    #[error("boxes and scores differ in length: {boxes} vs {scores}")]
    LengthMismatch { boxes: usize, scores: usize },
}

/// Axis-aligned bounding box with corners `(x1, y1)` top-left and
/// `(x2, y2)` bottom-right, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeomError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeomError::NonFiniteBox(
                x1.as_f64(),
                y1.as_f64(),
                x2.as_f64(),
                y2.as_f64(),
            ));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeomError::DegenerateBox(
                x1.as_f64(),
                y1.as_f64(),
                x2.as_f64(),
                y2.as_f64(),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// COCO-style `[x, y, width, height]` to corner convention.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Result<Self, GeomError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [T; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    /// Clip to the image rectangle `[0, w] x [0, h]`. Returns `None` when the
    /// clipped box collapses below `min_size` in either dimension.
    pub fn clip(&self, img_w: T, img_h: T, min_size: T) -> Option<Self> {
        let x1 = self.x1.max(T::zero()).min(img_w);
        let y1 = self.y1.max(T::zero()).min(img_h);
        let x2 = self.x2.max(T::zero()).min(img_w);
        let y2 = self.y2.max(T::zero()).min(img_h);
        if x2 - x1 > min_size && y2 - y1 > min_size {
            Some(Self { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }
}

/// Box regression offsets: center shifts normalized by the reference box
/// size and log-scale width/height ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas<T> {
    pub tx: T,
    pub ty: T,
    pub tw: T,
    pub th: T,
}

impl<T: Scalar> BoxDeltas<T> {
    pub fn zero() -> Self {
        Self {
            tx: T::zero(),
            ty: T::zero(),
            tw: T::zero(),
            th: T::zero(),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

/// Intersection area over union area, in `[0, 1]`. Symmetric.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(T::zero());
    let ih = (iy2 - iy1).max(T::zero());
    let inter = iw * ih;
    if inter == T::zero() {
        return T::zero();
    }
    inter / (a.area() + b.area() - inter)
}

/// Encode `target` relative to `reference`:
/// `tx = (cx_t - cx_r)/w_r`, `ty = (cy_t - cy_r)/h_r`,
/// `tw = ln(w_t/w_r)`, `th = ln(h_t/h_r)`.
pub fn encode_deltas<T: Scalar>(reference: &BBox<T>, target: &BBox<T>) -> BoxDeltas<T> {
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    let rw = reference.width();
    let rh = reference.height();
    BoxDeltas {
        tx: (tcx - rcx) / rw,
        ty: (tcy - rcy) / rh,
        tw: (target.width() / rw).ln(),
        th: (target.height() / rh).ln(),
    }
}

/// Exact inverse of [`encode_deltas`]. The result is not clipped; callers
/// clip to image bounds where needed.
pub fn decode_deltas<T: Scalar>(reference: &BBox<T>, d: &BoxDeltas<T>) -> BBox<T> {
    let (rcx, rcy) = reference.center();
    let rw = reference.width();
    let rh = reference.height();
    let cx = rcx + d.tx * rw;
    let cy = rcy + d.ty * rh;
    let w = rw * d.tw.exp();
    let h = rh * d.th.exp();
    let half = T::of(0.5);
    BBox {
        x1: cx - w * half,
        y1: cy - h * half,
        x2: cx + w * half,
        y2: cy + h * half,
    }
}

/// Anchor boxes for a feature grid. For each cell (row-major), each scale,
/// then each ratio, an anchor of area `scale^2` and height/width ratio
/// `ratio` is centered on the cell center.
pub fn generate_anchors<T: Scalar>(
    feature_h: usize,
    feature_w: usize,
    stride: T,
    scales: &[T],
    ratios: &[T],
) -> Vec<BBox<T>> {
    let half = T::of(0.5);
    let mut anchors = Vec::with_capacity(feature_h * feature_w * scales.len() * ratios.len());
    for gy in 0..feature_h {
        for gx in 0..feature_w {
            let cy = (T::of(gy as f64) + half) * stride;
            let cx = (T::of(gx as f64) + half) * stride;
            for &s in scales {
                for &r in ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    anchors.push(BBox {
                        x1: cx - w * half,
                        y1: cy - h * half,
                        x2: cx + w * half,
                        y2: cy + h * half,
                    });
                }
            }
        }
    }
    anchors
}

/// Greedy non-maximum suppression. Boxes are visited in descending score
/// order (ties broken by lower index); a box is kept when its IoU with every
/// previously kept box is at most `iou_threshold`. Returns kept indices in
/// visit order.
pub fn nms<T: Scalar>(
    boxes: &[BBox<T>],
    scores: &[T],
    iou_threshold: T,
) -> Result<Vec<usize>, GeomError> {
    if boxes.len() != scores.len() {
        return Err(GeomError::LengthMismatch {
            boxes: boxes.len(),
            scores: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// COCO object-size bucket derived from box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// Small is strict `area < 32^2`, large is strict `area > 96^2`, medium is
/// the closed middle.
pub fn size_bucket<T: Scalar>(b: &BBox<T>) -> SizeBucket {
    let area = b.area().as_f64();
    if area < 1024.0 {
        SizeBucket::Small
    } else if area > 9216.0 {
        SizeBucket::Large
    } else {
        SizeBucket::Medium
    }
}
