//! Supervision assignment: anchor labels for the RPN and per-proposal
//! classification/regression targets for the detection heads.

use crate::boxgeom::{encode_deltas, iou, BBox};
use crate::losses::AnchorLabel;
use crate::scalar::Scalar;
use crate::taxonomy::Taxonomy;
use ndarray::Array2;

/// RPN anchor supervision for one image.
pub struct AnchorAssignment<T> {
    pub labels: Vec<AnchorLabel>,
    /// Regression target per anchor; meaningful only where the label is
    /// positive.
    pub delta_targets: Array2<T>,
}

/// Label each anchor against the ground truth: positive when its best IoU
/// exceeds `pos_iou`, negative below `neg_iou`, ignored in between. With
/// `force_match`, each ground truth's single best anchor is positive even
/// below the threshold. No ground truth yields all-negative labels.
pub fn label_anchors<T: Scalar>(
    anchors: &[BBox<T>],
    gt_boxes: &[BBox<T>],
    pos_iou: T,
    neg_iou: T,
    force_match: bool,
) -> AnchorAssignment<T> {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut delta_targets = Array2::<T>::zeros((n, 4));
    if gt_boxes.is_empty() {
        return AnchorAssignment {
            labels,
            delta_targets,
        };
    }
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![T::zero(); n];
    let mut gt_best_anchor = vec![0usize; gt_boxes.len()];
    let mut gt_best_iou = vec![T::neg_infinity(); gt_boxes.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best_iou[gi] {
                gt_best_iou[gi] = v;
                gt_best_anchor[gi] = ai;
            }
        }
    }
    for ai in 0..n {
        if best_iou[ai] > pos_iou {
            labels[ai] = AnchorLabel::Positive;
        } else if best_iou[ai] < neg_iou {
            labels[ai] = AnchorLabel::Negative;
        } else {
            labels[ai] = AnchorLabel::Ignore;
        }
    }
    if force_match {
        for (gi, &ai) in gt_best_anchor.iter().enumerate() {
            labels[ai] = AnchorLabel::Positive;
            best_gt[ai] = gi;
        }
    }
    for ai in 0..n {
        if matches!(labels[ai], AnchorLabel::Positive) {
            let d = encode_deltas(&anchors[ai], &gt_boxes[best_gt[ai]]);
            for (c, v) in d.to_array().into_iter().enumerate() {
                delta_targets[[ai, c]] = v;
            }
        }
    }
    AnchorAssignment {
        labels,
        delta_targets,
    }
}

/// Per-proposal head supervision: fine and coarse labels (background = 0
/// on both levels for negatives) plus regression targets for positives.
pub struct ProposalTargets<T> {
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
    /// Shape `(proposals, 4)`; rows of negatives are zero.
    pub deltas: Array2<T>,
    pub positive: Vec<bool>,
}

/// Match each proposal to its highest-IoU ground truth. Positive iff that
/// IoU exceeds `pos_iou`; positives take the matched fine label, its mapped
/// coarse label, and the encoded regression target.
pub fn assign_targets<T: Scalar>(
    proposals: &[BBox<T>],
    gt_boxes: &[BBox<T>],
    gt_fine: &[usize],
    taxonomy: &Taxonomy,
    pos_iou: T,
) -> ProposalTargets<T> {
    debug_assert_eq!(gt_boxes.len(), gt_fine.len());
    let n = proposals.len();
    let mut fine = vec![0usize; n];
    let mut coarse = vec![0usize; n];
    let mut deltas = Array2::<T>::zeros((n, 4));
    let mut positive = vec![false; n];
    for (pi, proposal) in proposals.iter().enumerate() {
        let mut best = T::zero();
        let mut best_gi = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let v = iou(proposal, gt);
            if v > best {
                best = v;
                best_gi = Some(gi);
            }
        }
        if let Some(gi) = best_gi {
            if best > pos_iou {
                positive[pi] = true;
                fine[pi] = gt_fine[gi];
                coarse[pi] = taxonomy
                    .fine_to_coarse(gt_fine[gi])
                    .expect("ground truth labels are valid");
                let d = encode_deltas(proposal, &gt_boxes[gi]);
                for (c, v) in d.to_array().into_iter().enumerate() {
                    deltas[[pi, c]] = v;
                }
            }
        }
    }
    ProposalTargets {
        fine,
        coarse,
        deltas,
        positive,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn toy_taxonomy() -> Taxonomy {
        Taxonomy::from_groups(&[
            ("top".into(), vec!["vest".into(), "sling".into()]),
            (
                "one-piece dress".into(),
                vec!["vest dress".into(), "sling dress".into()],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn proposal_above_threshold_gets_both_labels() {
        let tax = toy_taxonomy();
        let gt = bx(10.0, 10.0, 40.0, 40.0);
        let proposal = bx(13.0, 10.0, 43.0, 40.0); // IoU = 27/33 > 0.5
        let vest_dress = tax.fine_label("vest dress").unwrap();
        let t = assign_targets(&[proposal], &[gt], &[vest_dress], &tax, 0.5);
        assert!(t.positive[0]);
        assert_eq!(t.fine[0], vest_dress);
        assert_eq!(
            tax.coarse_name(t.coarse[0]).unwrap(),
            "one-piece dress"
        );
    }

    #[test]
    fn low_iou_is_background_on_both_levels() {
        let tax = toy_taxonomy();
        let gt = bx(0.0, 0.0, 20.0, 20.0);
        let proposal = bx(14.0, 14.0, 34.0, 34.0); // IoU = 36/764 << 0.5
        let t = assign_targets(&[proposal], &[gt], &[1], &tax, 0.5);
        assert!(!t.positive[0]);
        assert_eq!((t.fine[0], t.coarse[0]), (0, 0));
    }

    #[test]
    fn exact_match_has_zero_regression_target() {
        let tax = toy_taxonomy();
        let gt = bx(5.0, 5.0, 25.0, 30.0);
        let t = assign_targets(&[gt], &[gt], &[2], &tax, 0.5);
        assert!(t.positive[0]);
        for c in 0..4 {
            assert_eq!(t.deltas[[0, c]], 0.0);
        }
    }

    #[test]
    fn no_ground_truth_yields_all_background() {
        let tax = toy_taxonomy();
        let t = assign_targets(&[bx(0.0, 0.0, 10.0, 10.0)], &[], &[], &tax, 0.5);
        assert!(!t.positive[0]);
        assert_eq!(t.fine[0], 0);
    }

    #[test]
    fn anchor_labels_partition_by_iou() {
        let anchors = [
            bx(10.0, 10.0, 40.0, 40.0), // IoU 1.0 with gt
            bx(0.0, 0.0, 12.0, 12.0),   // small overlap
            bx(60.0, 60.0, 90.0, 90.0), // disjoint
        ];
        let gt = [bx(10.0, 10.0, 40.0, 40.0)];
        let a = label_anchors(&anchors, &gt, 0.5, 0.3, false);
        assert!(matches!(a.labels[0], AnchorLabel::Positive));
        assert!(matches!(a.labels[2], AnchorLabel::Negative));
    }

    #[test]
    fn force_match_recovers_uncovered_ground_truth() {
        let anchors = [bx(0.0, 0.0, 30.0, 30.0), bx(48.0, 48.0, 96.0, 96.0)];
        // Ground truth overlapping the first anchor only slightly.
        let gt = [bx(20.0, 20.0, 44.0, 44.0)];
        let without = label_anchors(&anchors, &gt, 0.5, 0.1, false);
        assert!(!without
            .labels
            .iter()
            .any(|l| matches!(l, AnchorLabel::Positive)));
        let with = label_anchors(&anchors, &gt, 0.5, 0.1, true);
        assert!(matches!(with.labels[0], AnchorLabel::Positive));
    }

    #[test]
    fn empty_gt_labels_all_negative() {
        let anchors = [bx(0.0, 0.0, 30.0, 30.0)];
        let a = label_anchors::<f64>(&anchors, &[], 0.5, 0.3, true);
        assert!(matches!(a.labels[0], AnchorLabel::Negative));
    }
}
