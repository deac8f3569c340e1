//! One training step: sampled RPN and head supervision, loss evaluation,
//! and the hand-chained backward pass through heads, ROI alignment,
//! projection, RPN, and backbone. Gradients accumulate into the layers;
//! the optimizer consumes them afterwards.

use crate::boxgeom::BBox;
use crate::losses::{
    multilevel_ce_grad, multilevel_loc_grad, rpn_loss_grad, total_loss, AnchorLabel,
    LossBreakdown, LossError, LossWeights,
};
use crate::model::{
    assign_targets, conv_forward_batch, label_anchors, propose, roi_align, roi_align_backward,
    stack_batch, Model, ModelError, Variant, BACKBONE_STRIDE,
};
use crate::nn::relu_backward;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss failure at iteration {iteration}: {source}")]
    Loss {
        iteration: u64,
        source: LossError,
    },
    #[error("batch has {images} images but {gts} ground-truth sets")]
    BatchMismatch { images: usize, gts: usize },
}

/// Ground truth for one image: boxes with fine labels.
pub struct ImageGt<T> {
    pub boxes: Vec<BBox<T>>,
    pub fine: Vec<usize>,
}

fn sample_indices(
    candidates: &mut Vec<usize>,
    keep: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if candidates.len() > keep {
        candidates.shuffle(rng);
        candidates.truncate(keep);
    }
    candidates.clone()
}

/// Run forward + backward on one minibatch, accumulating parameter
/// gradients, and return the loss breakdown.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Array4<T>,
    gts: &[ImageGt<T>],
    weights: &LossWeights<T>,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, TrainError> {
    let batch = images.dim().0;
    if gts.len() != batch {
        return Err(TrainError::BatchMismatch {
            images: batch,
            gts: gts.len(),
        });
    }
    let cfg = model.cfg.clone();
    let iteration = model.iteration;
    let loss_err = |source: LossError| TrainError::Loss { iteration, source };

    // Forward trunk.
    let acts = model.backbone_forward_cached(images);
    let features = acts.last().expect("backbone layers");
    let projected = model.project_features(features);
    let (obj, rpn_deltas, rpn_hidden) = model.rpn_forward(features);
    let (a_per_cell, fh, fw) = (
        cfg.anchors_per_cell(),
        cfg.feature_size(),
        cfg.feature_size(),
    );

    // Per-image RPN supervision and proposal selection.
    let inv_batch = T::one() / T::of(batch as f64);
    let mut d_obj = Array4::<T>::zeros(obj.raw_dim());
    let mut d_rpn_deltas = Array4::<T>::zeros(rpn_deltas.raw_dim());
    let mut rpn_cls_total = T::zero();
    let mut rpn_loc_total = T::zero();
    let mut rois: Vec<Vec<BBox<T>>> = Vec::with_capacity(batch);
    let mut fine_targets: Vec<usize> = Vec::new();
    let mut coarse_targets: Vec<usize> = Vec::new();
    let mut positive: Vec<bool> = Vec::new();
    let mut delta_target_rows: Vec<[T; 4]> = Vec::new();

    let propose_params = model.propose_params(true);
    for i in 0..batch {
        let gt = &gts[i];
        let (flat_obj, flat_deltas) = model.flatten_rpn_outputs(
            &obj.index_axis(Axis(0), i),
            &rpn_deltas.index_axis(Axis(0), i),
        );

        // Anchor labels, subsampled to the configured batch.
        let assignment = label_anchors(
            model.anchors(),
            &gt.boxes,
            T::of(cfg.rpn.pos_iou),
            T::of(cfg.rpn.neg_iou),
            cfg.rpn.force_match,
        );
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (ai, l) in assignment.labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive => pos.push(ai),
                AnchorLabel::Negative => neg.push(ai),
                AnchorLabel::Ignore => {}
            }
        }
        let keep_pos = ((cfg.rpn.batch_anchors as f64 * cfg.rpn.positive_fraction).round()
            as usize)
            .min(pos.len());
        let keep_neg = (cfg.rpn.batch_anchors - keep_pos).min(neg.len());
        let pos = sample_indices(&mut pos, keep_pos, rng);
        let neg = sample_indices(&mut neg, keep_neg, rng);
        let mut sampled = vec![AnchorLabel::Ignore; assignment.labels.len()];
        for &ai in &pos {
            sampled[ai] = AnchorLabel::Positive;
        }
        for &ai in &neg {
            sampled[ai] = AnchorLabel::Negative;
        }

        let obj_arr = ndarray::Array1::from_vec(flat_obj.clone());
        let (cls_i, loc_i, d_obj_flat, d_delta_flat) = rpn_loss_grad(
            obj_arr.view(),
            flat_deltas.view(),
            &sampled,
            assignment.delta_targets.view(),
        )
        .map_err(loss_err)?;
        rpn_cls_total += cls_i * inv_batch;
        rpn_loc_total += loc_i * inv_batch;
        // Scatter flat anchor grads back to the (A, h, w) maps.
        for y in 0..fh {
            for x in 0..fw {
                for ai in 0..a_per_cell {
                    let idx = (y * fw + x) * a_per_cell + ai;
                    d_obj[[i, ai, y, x]] = d_obj_flat[idx] * inv_batch;
                    for c in 0..4 {
                        d_rpn_deltas[[i, 4 * ai + c, y, x]] =
                            d_delta_flat[[idx, c]] * inv_batch;
                    }
                }
            }
        }

        // Proposals for the head stage (no gradient flows through them).
        let mut proposals = propose(&flat_obj, &flat_deltas.view(), model.anchors(), &propose_params);
        if cfg.head.add_gt_proposals {
            proposals.extend(gt.boxes.iter().copied());
        }
        let targets = assign_targets(
            &proposals,
            &gt.boxes,
            &gt.fine,
            &model.taxonomy,
            T::of(cfg.head.pos_iou),
        );
        let mut pos_p: Vec<usize> = Vec::new();
        let mut neg_p: Vec<usize> = Vec::new();
        for (pi, &is_pos) in targets.positive.iter().enumerate() {
            if is_pos {
                pos_p.push(pi);
            } else {
                neg_p.push(pi);
            }
        }
        let keep_pos = ((cfg.head.samples_per_image as f64 * cfg.head.positive_fraction)
            .round() as usize)
            .min(pos_p.len());
        let keep_neg = (cfg.head.samples_per_image - keep_pos).min(neg_p.len());
        let pos_p = sample_indices(&mut pos_p, keep_pos, rng);
        let neg_p = sample_indices(&mut neg_p, keep_neg, rng);
        let mut selected: Vec<usize> = pos_p;
        selected.extend(neg_p);
        selected.sort_unstable();

        let mut boxes_i = Vec::with_capacity(selected.len());
        for &pi in &selected {
            boxes_i.push(proposals[pi]);
            fine_targets.push(targets.fine[pi]);
            coarse_targets.push(targets.coarse[pi]);
            positive.push(targets.positive[pi]);
            delta_target_rows.push([
                targets.deltas[[pi, 0]],
                targets.deltas[[pi, 1]],
                targets.deltas[[pi, 2]],
                targets.deltas[[pi, 3]],
            ]);
        }
        rois.push(boxes_i);
    }

    // Pool all sampled ROIs and run the head once over the whole batch.
    let total_rois: usize = rois.iter().map(|r| r.len()).sum();
    let scale = T::one() / T::of(BACKBONE_STRIDE as f64);
    let pooled_per_image: Vec<Array4<T>> = (0..batch)
        .into_par_iter()
        .map(|i| {
            roi_align(
                &projected.index_axis(Axis(0), i),
                &rois[i],
                cfg.roi_pool_size,
                scale,
                cfg.roi_samples,
            )
        })
        .collect();
    let feature_dim = cfg.head_input_dim();
    let mut pooled_flat = Array2::<T>::zeros((total_rois, feature_dim));
    let mut row = 0usize;
    for p in &pooled_per_image {
        let n = p.dim().0;
        if n > 0 {
            let flat = p
                .view()
                .into_shape_with_order((n, feature_dim))
                .expect("contiguous pooled");
            pooled_flat
                .slice_mut(ndarray::s![row..row + n, ..])
                .assign(&flat);
        }
        row += n;
    }

    let (outputs, head_cache) = model.head_forward_cached(&pooled_flat.view());

    // Classification supervision per variant.
    let (score_views, target_slices, ce_weights): (Vec<_>, Vec<&[usize]>, LossWeights<T>) =
        match cfg.variant {
            Variant::Baseline | Variant::Merged => (
                vec![outputs.level_scores[0].view()],
                vec![fine_targets.as_slice()],
                LossWeights::single_level(),
            ),
            Variant::MultiGroup => (
                outputs.level_scores.iter().map(|s| s.view()).collect(),
                vec![coarse_targets.as_slice(), fine_targets.as_slice()],
                weights.clone(),
            ),
            Variant::MultiNoGroup => (
                outputs.level_scores.iter().map(|s| s.view()).collect(),
                vec![fine_targets.as_slice(), fine_targets.as_slice()],
                weights.clone(),
            ),
        };
    let (e_ce, d_scores) =
        multilevel_ce_grad(&score_views, &target_slices, &ce_weights).map_err(loss_err)?;

    // Regression supervision: deltas read out at each positive's true class.
    let mut deltas_at_true = Array2::<T>::zeros((total_rois, 4));
    for (r, (&is_pos, &class)) in positive.iter().zip(fine_targets.iter()).enumerate() {
        if is_pos {
            for c in 0..4 {
                deltas_at_true[[r, c]] = outputs.deltas[[r, 4 * (class - 1) + c]];
            }
        }
    }
    let mut delta_targets = Array2::<T>::zeros((total_rois, 4));
    for (r, row_t) in delta_target_rows.iter().enumerate() {
        for c in 0..4 {
            delta_targets[[r, c]] = row_t[c];
        }
    }
    let levels = model.supervision_levels();
    let (loc_views, loc_weights): (Vec<_>, LossWeights<T>) = if levels == 2 {
        // The coarse branch has no regression head; its slot exists so the
        // zero coarse weight is explicit.
        (
            vec![delta_targets.view(), deltas_at_true.view()],
            weights.clone(),
        )
    } else {
        (vec![deltas_at_true.view()], LossWeights::single_level())
    };
    let (e_loc, d_loc) = multilevel_loc_grad(
        &loc_views,
        delta_targets.view(),
        &positive,
        &loc_weights,
    )
    .map_err(loss_err)?;
    let fine_loc_grad = d_loc.last().expect("at least one level");
    let mut d_deltas_full = Array2::<T>::zeros(outputs.deltas.raw_dim());
    for (r, (&is_pos, &class)) in positive.iter().zip(fine_targets.iter()).enumerate() {
        if is_pos {
            for c in 0..4 {
                d_deltas_full[[r, 4 * (class - 1) + c]] = fine_loc_grad[[r, c]];
            }
        }
    }

    let breakdown = total_loss(
        e_ce.as_f64(),
        e_loc.as_f64(),
        rpn_cls_total.as_f64(),
        rpn_loc_total.as_f64(),
    )
    .map_err(loss_err)?;

    // Backward: heads -> pooled features -> projected map.
    let d_pooled_flat =
        model.head_backward(&pooled_flat.view(), &head_cache, &d_scores, &d_deltas_full);
    let mut d_projected = Array4::<T>::zeros(projected.raw_dim());
    let mut row = 0usize;
    for i in 0..batch {
        let n = rois[i].len();
        if n > 0 {
            let d_pooled = d_pooled_flat
                .slice(ndarray::s![row..row + n, ..])
                .into_shape_with_order((n, cfg.head_channels, cfg.roi_pool_size, cfg.roi_pool_size))
                .expect("contiguous pooled grad");
            roi_align_backward(
                &mut d_projected.index_axis_mut(Axis(0), i),
                &rois[i],
                &d_pooled,
                cfg.roi_pool_size,
                scale,
                cfg.roi_samples,
            );
        }
        row += n;
    }
    relu_backward(&mut d_projected, &projected);
    let d_feat_proj = conv_backward_batch(&mut model.proj, features, &d_projected);

    // Backward: RPN heads -> hidden -> features.
    let mut d_hidden = conv_backward_batch(&mut model.rpn_obj, &rpn_hidden, &d_obj);
    d_hidden += &conv_backward_batch(&mut model.rpn_delta, &rpn_hidden, &d_rpn_deltas);
    relu_backward(&mut d_hidden, &rpn_hidden);
    let d_feat_rpn = conv_backward_batch(&mut model.rpn_conv, features, &d_hidden);

    // Backward: backbone chain.
    let mut d_cur = d_feat_proj + d_feat_rpn;
    for layer in (0..model.convs.len()).rev() {
        relu_backward(&mut d_cur, &acts[layer]);
        let input_owned;
        let input = if layer == 0 {
            images
        } else {
            input_owned = acts[layer - 1].clone();
            &input_owned
        };
        d_cur = conv_backward_batch(&mut model.convs[layer], input, &d_cur);
    }

    model.iteration += 1;
    Ok(breakdown)
}

/// Parallel batched conv backward with ordered gradient reduction.
fn conv_backward_batch<T: Scalar>(
    conv: &mut crate::nn::Conv2d<T>,
    x: &Array4<T>,
    dy: &Array4<T>,
) -> Array4<T> {
    let batch = x.dim().0;
    let parts: Vec<(Array3<T>, _, _)> = (0..batch)
        .into_par_iter()
        .map(|i| conv.grads_one(&x.index_axis(Axis(0), i), &dy.index_axis(Axis(0), i)))
        .collect();
    let mut dxs = Vec::with_capacity(batch);
    for (dx, gw, gb) in parts {
        conv.gw += &gw;
        conv.gb += &gb;
        dxs.push(dx);
    }
    stack_batch(&dxs)
}
