//! The two-stage detector: small convolutional backbone, region proposal
//! network, ROI alignment, target assignment, and the four detection-head
//! variants (single branch, multi-grained with/without superclass grouping,
//! merged).
//!
//! All variants share the identical backbone, projection, and RPN so
//! head-structure comparisons are isolated. The single-branch baseline
//! stacks three fully connected layers so its parameter count matches the
//! two-branch variants within 5%.

mod assign;
mod propose;
mod roi_align;
mod trainer;

pub use assign::{label_anchors, assign_targets, AnchorAssignment, ProposalTargets};
pub use propose::{propose, ProposeParams, DELTA_CLAMP};
pub use roi_align::{bilinear_at, roi_align, roi_align_backward};
pub use trainer::{train_step, TrainError};

use crate::boxgeom::{self, generate_anchors, BBox};
use crate::nn::{he_std, relu_backward, relu_inplace, Conv2d, Linear, ParamMut};
use crate::scalar::Scalar;
use crate::taxonomy::Taxonomy;
use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image_size {0} must be a positive multiple of the backbone stride 8")]
    BadImageSize(usize),
    #[error("anchor scales and ratios must be non-empty")]
    EmptyAnchors,
    #[error("threshold {name} = {value} outside [0, 1]")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("input has shape {got:?}, expected {expected:?}")]
    BadInputShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Detection-head configuration under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    MultiNoGroup,
    MultiGroup,
    Merged,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::MultiNoGroup,
        Variant::Merged,
        Variant::MultiGroup,
    ];

    /// Row label used in comparison reports.
    pub fn report_label(&self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::MultiNoGroup => "W/O Group",
            Variant::MultiGroup => "W Group",
            Variant::Merged => "Merged",
        }
    }

    pub fn config_name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MultiNoGroup => "multi_no_group",
            Variant::MultiGroup => "multi_group",
            Variant::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Also mark each ground truth's highest-IoU anchor positive so every
    /// object trains the RPN even when no anchor clears `pos_iou`.
    pub force_match: bool,
    pub batch_anchors: usize,
    pub positive_fraction: f64,
    pub pre_nms: usize,
    pub post_nms_train: usize,
    pub post_nms_infer: usize,
    pub nms_thresh: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.3,
            force_match: true,
            batch_anchors: 64,
            positive_fraction: 0.5,
            pre_nms: 600,
            post_nms_train: 128,
            post_nms_infer: 64,
            nms_thresh: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Proposal is positive when its best ground-truth IoU exceeds this.
    pub pos_iou: f64,
    pub samples_per_image: usize,
    pub positive_fraction: f64,
    /// Append ground-truth boxes to the proposal set during training.
    pub add_gt_proposals: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            samples_per_image: 64,
            positive_fraction: 0.25,
            add_gt_proposals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_dets: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    /// Output channels of the four backbone blocks (stride 2, 2, 2, 1).
    pub backbone_channels: [usize; 4],
    /// ROI-head input channels after the shared 1x1 projection.
    pub head_channels: usize,
    pub branch_width: usize,
    pub roi_pool_size: usize,
    pub roi_samples: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
    pub inference: InferenceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            image_size: 96,
            backbone_channels: [16, 32, 64, 128],
            head_channels: 24,
            branch_width: 1024,
            roi_pool_size: 7,
            roi_samples: 2,
            anchor_scales: vec![12.0, 18.0, 26.0, 36.0, 48.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn: RpnConfig::default(),
            head: HeadConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

pub const BACKBONE_STRIDE: usize = 8;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.image_size % BACKBONE_STRIDE != 0 {
            return Err(ModelError::BadImageSize(self.image_size));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(ModelError::EmptyAnchors);
        }
        for (name, value) in [
            ("rpn.pos_iou", self.rpn.pos_iou),
            ("rpn.neg_iou", self.rpn.neg_iou),
            ("rpn.nms_thresh", self.rpn.nms_thresh),
            ("rpn.positive_fraction", self.rpn.positive_fraction),
            ("head.pos_iou", self.head.pos_iou),
            ("head.positive_fraction", self.head.positive_fraction),
            ("inference.score_thresh", self.inference.score_thresh),
            ("inference.nms_thresh", self.inference.nms_thresh),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ModelError::BadThreshold { name, value });
            }
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / BACKBONE_STRIDE
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Flattened ROI feature width entering the head branches.
    pub fn head_input_dim(&self) -> usize {
        self.head_channels * self.roi_pool_size * self.roi_pool_size
    }
}

/// Class-score matrices and fine-level box deltas produced by a detection
/// head. `level_scores` holds raw (pre-normalization) scores per
/// supervision level, coarse level first when present; the merged variant
/// populates a single final level.
pub struct HeadOutputs<T> {
    pub level_scores: Vec<Array2<T>>,
    /// Shape `(proposals, 4 * num_fine)`; columns `4(c-1)..4c` belong to
    /// fine class `c`.
    pub deltas: Array2<T>,
}

/// Post-ReLU activations needed to run the head backward pass.
pub struct HeadCache<T> {
    activations: Vec<Array2<T>>,
}

enum Heads<T> {
    Baseline {
        fcs: Vec<Linear<T>>,
        cls: Linear<T>,
        reg: Linear<T>,
    },
    Multi {
        coarse_fc: Linear<T>,
        coarse_cls: Linear<T>,
        fine_fc1: Linear<T>,
        fine_fc2: Linear<T>,
        fine_cls: Linear<T>,
        reg: Linear<T>,
    },
    Merged {
        coarse_fc: Linear<T>,
        fine_fc1: Linear<T>,
        fine_fc2: Linear<T>,
        merge_fc: Linear<T>,
        cls: Linear<T>,
        reg: Linear<T>,
    },
}

/// One detection emitted by [`Model::detect`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox<f64>,
    pub fine: usize,
    pub coarse: usize,
    pub score: f64,
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub taxonomy: Taxonomy,
    convs: Vec<Conv2d<T>>,
    proj: Conv2d<T>,
    rpn_conv: Conv2d<T>,
    rpn_obj: Conv2d<T>,
    rpn_delta: Conv2d<T>,
    heads: Heads<T>,
    anchors: Vec<BBox<T>>,
    /// Training iterations applied to these parameters.
    pub iteration: u64,
}

impl<T: Scalar> Model<T> {
    /// Build a model with seeded parameter initialization.
    pub fn build(cfg: ModelConfig, taxonomy: Taxonomy, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        let mut convs = Vec::new();
        let mut in_ch = 3usize;
        for (ch, stride) in [(c1, 2), (c2, 2), (c3, 2), (c4, 1)] {
            convs.push(Conv2d::new(
                in_ch,
                ch,
                3,
                stride,
                1,
                he_std(in_ch * 9),
                &mut rng,
            ));
            in_ch = ch;
        }
        let proj = Conv2d::new(c4, cfg.head_channels, 1, 1, 0, he_std(c4), &mut rng);
        let a = cfg.anchors_per_cell();
        let rpn_conv = Conv2d::new(c4, c4, 3, 1, 1, he_std(c4 * 9), &mut rng);
        let rpn_obj = Conv2d::new(c4, a, 1, 1, 0, 0.01, &mut rng);
        let rpn_delta = Conv2d::new(c4, 4 * a, 1, 1, 0, 0.001, &mut rng);

        let f = cfg.head_input_dim();
        let w = cfg.branch_width;
        let fine_vocab = taxonomy.fine_vocab();
        let reg_width = 4 * taxonomy.num_fine();
        let heads = match cfg.variant {
            Variant::Baseline => Heads::Baseline {
                fcs: vec![
                    Linear::new(f, w, he_std(f), &mut rng),
                    Linear::new(w, w, he_std(w), &mut rng),
                    Linear::new(w, w, he_std(w), &mut rng),
                ],
                cls: Linear::new(w, fine_vocab, 0.01, &mut rng),
                reg: Linear::new(w, reg_width, 0.001, &mut rng),
            },
            Variant::MultiNoGroup | Variant::MultiGroup => {
                let coarse_vocab = if cfg.variant == Variant::MultiGroup {
                    taxonomy.coarse_vocab()
                } else {
                    fine_vocab
                };
                Heads::Multi {
                    coarse_fc: Linear::new(f, w, he_std(f), &mut rng),
                    coarse_cls: Linear::new(w, coarse_vocab, 0.01, &mut rng),
                    fine_fc1: Linear::new(f, w, he_std(f), &mut rng),
                    fine_fc2: Linear::new(w, w, he_std(w), &mut rng),
                    fine_cls: Linear::new(w, fine_vocab, 0.01, &mut rng),
                    reg: Linear::new(w, reg_width, 0.001, &mut rng),
                }
            }
            Variant::Merged => Heads::Merged {
                coarse_fc: Linear::new(f, w, he_std(f), &mut rng),
                fine_fc1: Linear::new(f, w, he_std(f), &mut rng),
                fine_fc2: Linear::new(w, w, he_std(w), &mut rng),
                merge_fc: Linear::new(2 * w, w, he_std(2 * w), &mut rng),
                cls: Linear::new(w, fine_vocab, 0.01, &mut rng),
                reg: Linear::new(w, reg_width, 0.001, &mut rng),
            },
        };

        let fs = cfg.feature_size();
        let anchors = generate_anchors(
            fs,
            fs,
            T::of(BACKBONE_STRIDE as f64),
            &cfg.anchor_scales.iter().map(|&s| T::of(s)).collect::<Vec<_>>(),
            &cfg.anchor_ratios.iter().map(|&r| T::of(r)).collect::<Vec<_>>(),
        );

        Ok(Self {
            cfg,
            taxonomy,
            convs,
            proj,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            heads,
            anchors,
            iteration: 0,
        })
    }

    pub fn anchors(&self) -> &[BBox<T>] {
        &self.anchors
    }

    /// Number of supervision levels this variant trains with.
    pub fn supervision_levels(&self) -> usize {
        match self.cfg.variant {
            Variant::Baseline | Variant::Merged => 1,
            Variant::MultiNoGroup | Variant::MultiGroup => 2,
        }
    }

    /// Class-score widths per level, coarse first, as built.
    pub fn level_widths(&self) -> Vec<usize> {
        match &self.heads {
            Heads::Baseline { cls, .. } => vec![cls.out_dim()],
            Heads::Multi {
                coarse_cls,
                fine_cls,
                ..
            } => vec![coarse_cls.out_dim(), fine_cls.out_dim()],
            Heads::Merged { cls, .. } => vec![cls.out_dim()],
        }
    }

    fn check_images(&self, images: &Array4<T>) -> Result<(), ModelError> {
        let (_, c, h, w) = images.dim();
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(ModelError::BadInputShape {
                got: vec![c, h, w],
                expected: vec![3, s, s],
            });
        }
        Ok(())
    }

    /// Backbone features for a batch of images: `(B, C4, S/8, S/8)`.
    pub fn backbone_forward(&self, images: &Array4<T>) -> Result<Array4<T>, ModelError> {
        self.check_images(images)?;
        let mut acts = self.backbone_forward_cached(images);
        Ok(acts.pop().expect("backbone has layers"))
    }

    /// Per-layer post-ReLU activations, last entry is the feature map.
    pub(crate) fn backbone_forward_cached(&self, images: &Array4<T>) -> Vec<Array4<T>> {
        let mut acts: Vec<Array4<T>> = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let mut out = if i == 0 {
                conv_forward_batch(conv, images)
            } else {
                conv_forward_batch(conv, &acts[i - 1])
            };
            relu_inplace(&mut out);
            acts.push(out);
        }
        acts
    }

    /// Shared 1x1 projection (post-ReLU) feeding ROI alignment.
    pub(crate) fn project_features(&self, features: &Array4<T>) -> Array4<T> {
        let mut out = conv_forward_batch(&self.proj, features);
        relu_inplace(&mut out);
        out
    }

    /// RPN raw outputs: per-anchor objectness logits `(B, A, h, w)` and
    /// box deltas `(B, 4A, h, w)`, plus the hidden activation for backward.
    pub fn rpn_forward(&self, features: &Array4<T>) -> (Array4<T>, Array4<T>, Array4<T>) {
        let mut hidden = conv_forward_batch(&self.rpn_conv, features);
        relu_inplace(&mut hidden);
        let obj = conv_forward_batch(&self.rpn_obj, &hidden);
        let deltas = conv_forward_batch(&self.rpn_delta, &hidden);
        (obj, deltas, hidden)
    }

    /// Flatten one image's RPN maps into anchor-ordered vectors matching
    /// [`Model::anchors`]: index `(y * W + x) * A + a`.
    pub fn flatten_rpn_outputs(
        &self,
        obj: &ArrayView3<'_, T>,
        deltas: &ArrayView3<'_, T>,
    ) -> (Vec<T>, Array2<T>) {
        let (a, h, w) = obj.dim();
        let mut flat_obj = Vec::with_capacity(a * h * w);
        let mut flat_deltas = Array2::zeros((a * h * w, 4));
        for y in 0..h {
            for x in 0..w {
                for ai in 0..a {
                    let idx = (y * w + x) * a + ai;
                    flat_obj.push(obj[[ai, y, x]]);
                    for c in 0..4 {
                        flat_deltas[[idx, c]] = deltas[[4 * ai + c, y, x]];
                    }
                }
            }
        }
        (flat_obj, flat_deltas)
    }

    pub(crate) fn propose_params(&self, training: bool) -> ProposeParams<T> {
        ProposeParams {
            pre_nms: self.cfg.rpn.pre_nms,
            post_nms: if training {
                self.cfg.rpn.post_nms_train
            } else {
                self.cfg.rpn.post_nms_infer
            },
            nms_thresh: T::of(self.cfg.rpn.nms_thresh),
            min_size: T::one(),
            image_size: T::of(self.cfg.image_size as f64),
        }
    }

    /// Pool ROI features and run the head. Returns the variant-appropriate
    /// outputs together with the cache needed for backward.
    pub fn head_forward_cached(&self, pooled_flat: &ArrayView2<'_, T>) -> (HeadOutputs<T>, HeadCache<T>) {
        match &self.heads {
            Heads::Baseline { fcs, cls, reg } => {
                let mut acts: Vec<Array2<T>> = Vec::with_capacity(fcs.len());
                for (i, fc) in fcs.iter().enumerate() {
                    let mut h = if i == 0 {
                        fc.forward(pooled_flat)
                    } else {
                        fc.forward(&acts[i - 1].view())
                    };
                    relu_inplace(&mut h);
                    acts.push(h);
                }
                let top = acts.last().expect("layers");
                let scores = cls.forward(&top.view());
                let deltas = reg.forward(&top.view());
                (
                    HeadOutputs {
                        level_scores: vec![scores],
                        deltas,
                    },
                    HeadCache { activations: acts },
                )
            }
            Heads::Multi {
                coarse_fc,
                coarse_cls,
                fine_fc1,
                fine_fc2,
                fine_cls,
                reg,
            } => {
                let mut hc = coarse_fc.forward(pooled_flat);
                relu_inplace(&mut hc);
                let coarse_scores = coarse_cls.forward(&hc.view());
                let mut hf1 = fine_fc1.forward(pooled_flat);
                relu_inplace(&mut hf1);
                let mut hf2 = fine_fc2.forward(&hf1.view());
                relu_inplace(&mut hf2);
                let fine_scores = fine_cls.forward(&hf2.view());
                let deltas = reg.forward(&hf2.view());
                (
                    HeadOutputs {
                        level_scores: vec![coarse_scores, fine_scores],
                        deltas,
                    },
                    HeadCache {
                        activations: vec![hc, hf1, hf2],
                    },
                )
            }
            Heads::Merged {
                coarse_fc,
                fine_fc1,
                fine_fc2,
                merge_fc,
                cls,
                reg,
            } => {
                let mut hc = coarse_fc.forward(pooled_flat);
                relu_inplace(&mut hc);
                let mut hf1 = fine_fc1.forward(pooled_flat);
                relu_inplace(&mut hf1);
                let mut hf2 = fine_fc2.forward(&hf1.view());
                relu_inplace(&mut hf2);
                let cat = concatenate(Axis(1), &[hc.view(), hf2.view()]).expect("same rows");
                let mut hm = merge_fc.forward(&cat.view());
                relu_inplace(&mut hm);
                let scores = cls.forward(&hm.view());
                let deltas = reg.forward(&hm.view());
                (
                    HeadOutputs {
                        level_scores: vec![scores],
                        deltas,
                    },
                    HeadCache {
                        activations: vec![hc, hf1, hf2, cat, hm],
                    },
                )
            }
        }
    }

    /// Variant-appropriate head outputs for pooled features.
    pub fn head_forward(&self, pooled_flat: &ArrayView2<'_, T>) -> HeadOutputs<T> {
        self.head_forward_cached(pooled_flat).0
    }

    /// Backward through the head. `d_scores` aligns with
    /// `HeadOutputs::level_scores`, `d_deltas` with `HeadOutputs::deltas`.
    /// Accumulates layer gradients and returns `dL/d(pooled_flat)`.
    pub(crate) fn head_backward(
        &mut self,
        pooled_flat: &ArrayView2<'_, T>,
        cache: &HeadCache<T>,
        d_scores: &[Array2<T>],
        d_deltas: &Array2<T>,
    ) -> Array2<T> {
        match &mut self.heads {
            Heads::Baseline { fcs, cls, reg } => {
                let acts = &cache.activations;
                let top = &acts[2];
                let mut d_top = cls.backward(&top.view(), &d_scores[0].view());
                d_top += &reg.backward(&top.view(), &d_deltas.view());
                relu_backward(&mut d_top, top);
                let mut d_h1 = fcs[2].backward(&acts[1].view(), &d_top.view());
                relu_backward(&mut d_h1, &acts[1]);
                let mut d_h0 = fcs[1].backward(&acts[0].view(), &d_h1.view());
                relu_backward(&mut d_h0, &acts[0]);
                fcs[0].backward(pooled_flat, &d_h0.view())
            }
            Heads::Multi {
                coarse_fc,
                coarse_cls,
                fine_fc1,
                fine_fc2,
                fine_cls,
                reg,
            } => {
                let (hc, hf1, hf2) = (
                    &cache.activations[0],
                    &cache.activations[1],
                    &cache.activations[2],
                );
                let mut d_hc = coarse_cls.backward(&hc.view(), &d_scores[0].view());
                relu_backward(&mut d_hc, hc);
                let mut dx = coarse_fc.backward(pooled_flat, &d_hc.view());
                let mut d_hf2 = fine_cls.backward(&hf2.view(), &d_scores[1].view());
                d_hf2 += &reg.backward(&hf2.view(), &d_deltas.view());
                relu_backward(&mut d_hf2, hf2);
                let mut d_hf1 = fine_fc2.backward(&hf1.view(), &d_hf2.view());
                relu_backward(&mut d_hf1, hf1);
                dx += &fine_fc1.backward(pooled_flat, &d_hf1.view());
                dx
            }
            Heads::Merged {
                coarse_fc,
                fine_fc1,
                fine_fc2,
                merge_fc,
                cls,
                reg,
            } => {
                let (hc, hf1, hf2, cat, hm) = (
                    &cache.activations[0],
                    &cache.activations[1],
                    &cache.activations[2],
                    &cache.activations[3],
                    &cache.activations[4],
                );
                let mut d_hm = cls.backward(&hm.view(), &d_scores[0].view());
                d_hm += &reg.backward(&hm.view(), &d_deltas.view());
                relu_backward(&mut d_hm, hm);
                let d_cat = merge_fc.backward(&cat.view(), &d_hm.view());
                let width = hc.ncols();
                let mut d_hc = d_cat.slice(s![.., ..width]).to_owned();
                relu_backward(&mut d_hc, hc);
                let mut dx = coarse_fc.backward(pooled_flat, &d_hc.view());
                let mut d_hf2 = d_cat.slice(s![.., width..]).to_owned();
                relu_backward(&mut d_hf2, hf2);
                let mut d_hf1 = fine_fc2.backward(&hf1.view(), &d_hf2.view());
                relu_backward(&mut d_hf1, hf1);
                dx += &fine_fc1.backward(pooled_flat, &d_hf1.view());
                dx
            }
        }
    }

    /// Run the full pipeline on a batch of images and emit thresholded,
    /// per-class-NMS-filtered detections. Scores and boxes come from the
    /// final supervision level (fine branch, or the merged head); each
    /// record carries the taxonomy-derived coarse label.
    pub fn detect(&self, images: &Array4<T>) -> Result<Vec<Vec<Detection>>, ModelError> {
        self.check_images(images)?;
        let features = self.backbone_forward(images)?;
        let projected = self.project_features(&features);
        let (obj, rpn_deltas, _) = self.rpn_forward(&features);
        let params = self.propose_params(false);
        let num_fine = self.taxonomy.num_fine();
        let scale = T::one() / T::of(BACKBONE_STRIDE as f64);
        let batch = images.dim().0;
        let mut results = Vec::with_capacity(batch);
        for i in 0..batch {
            let (flat_obj, flat_deltas) =
                self.flatten_rpn_outputs(&obj.index_axis(Axis(0), i), &rpn_deltas.index_axis(Axis(0), i));
            let proposals = propose(&flat_obj, &flat_deltas.view(), &self.anchors, &params);
            if proposals.is_empty() {
                results.push(Vec::new());
                continue;
            }
            let pooled = roi_align(
                &projected.index_axis(Axis(0), i),
                &proposals,
                self.cfg.roi_pool_size,
                scale,
                self.cfg.roi_samples,
            );
            let p = proposals.len();
            let flat = pooled
                .into_shape_with_order((p, self.cfg.head_input_dim()))
                .expect("contiguous pooled features");
            let outputs = self.head_forward(&flat.view());
            let scores = outputs
                .level_scores
                .last()
                .expect("at least one level");
            let probs = softmax_rows(&scores.view());
            let mut dets: Vec<Detection> = Vec::new();
            for class in 1..=num_fine {
                let mut class_boxes: Vec<BBox<T>> = Vec::new();
                let mut class_scores: Vec<T> = Vec::new();
                for r in 0..p {
                    let score = probs[[r, class]];
                    if score.as_f64() <= self.cfg.inference.score_thresh {
                        continue;
                    }
                    let d = boxgeom::BoxDeltas {
                        tx: outputs.deltas[[r, 4 * (class - 1)]],
                        ty: outputs.deltas[[r, 4 * (class - 1) + 1]],
                        tw: outputs.deltas[[r, 4 * (class - 1) + 2]].min(T::of(DELTA_CLAMP)),
                        th: outputs.deltas[[r, 4 * (class - 1) + 3]].min(T::of(DELTA_CLAMP)),
                    };
                    let decoded = boxgeom::decode_deltas(&proposals[r], &d);
                    if let Some(clipped) = decoded.clip(
                        T::of(self.cfg.image_size as f64),
                        T::of(self.cfg.image_size as f64),
                        T::one(),
                    ) {
                        class_boxes.push(clipped);
                        class_scores.push(score);
                    }
                }
                if class_boxes.is_empty() {
                    continue;
                }
                let kept = boxgeom::nms(
                    &class_boxes,
                    &class_scores,
                    T::of(self.cfg.inference.nms_thresh),
                )
                .expect("equal lengths");
                let coarse = self
                    .taxonomy
                    .fine_to_coarse(class)
                    .expect("valid fine label");
                for k in kept {
                    dets.push(Detection {
                        bbox: class_boxes[k].cast::<f64>(),
                        fine: class,
                        coarse,
                        score: class_scores[k].as_f64(),
                    });
                }
            }
            dets.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.fine.cmp(&b.fine))
            });
            dets.truncate(self.cfg.inference.max_dets);
            results.push(dets);
        }
        Ok(results)
    }

    /// Visit every named parameter with its gradient, in a stable order.
    pub fn visit_params(&mut self, f: &mut ParamMut<'_, T>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit(&format!("backbone.conv{}", i + 1), f);
        }
        self.proj.visit("proj", f);
        self.rpn_conv.visit("rpn.conv", f);
        self.rpn_obj.visit("rpn.obj", f);
        self.rpn_delta.visit("rpn.delta", f);
        match &mut self.heads {
            Heads::Baseline { fcs, cls, reg } => {
                for (i, fc) in fcs.iter_mut().enumerate() {
                    fc.visit(&format!("head.fc{}", i + 1), f);
                }
                cls.visit("head.cls", f);
                reg.visit("head.reg", f);
            }
            Heads::Multi {
                coarse_fc,
                coarse_cls,
                fine_fc1,
                fine_fc2,
                fine_cls,
                reg,
            } => {
                coarse_fc.visit("head.coarse_fc", f);
                coarse_cls.visit("head.coarse_cls", f);
                fine_fc1.visit("head.fine_fc1", f);
                fine_fc2.visit("head.fine_fc2", f);
                fine_cls.visit("head.fine_cls", f);
                reg.visit("head.reg", f);
            }
            Heads::Merged {
                coarse_fc,
                fine_fc1,
                fine_fc2,
                merge_fc,
                cls,
                reg,
            } => {
                coarse_fc.visit("head.coarse_fc", f);
                fine_fc1.visit("head.fine_fc1", f);
                fine_fc2.visit("head.fine_fc2", f);
                merge_fc.visit("head.merge_fc", f);
                cls.visit("head.cls", f);
                reg.visit("head.reg", f);
            }
        }
    }

    pub fn num_params(&mut self) -> usize {
        let mut total = 0usize;
        self.visit_params(&mut |_, value, _| total += value.len());
        total
    }

    /// Order-stable FNV-1a checksum over all parameter bytes.
    pub fn param_checksum(&mut self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params(&mut |_, value, _| {
            for v in value.iter() {
                for b in v.as_f64().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x1000_0000_01b3);
                }
            }
        });
        hash
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &ArrayView2<'_, T>) -> Array2<T> {
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

/// Apply a convolution to each image of a batch in parallel.
pub(crate) fn conv_forward_batch<T: Scalar>(conv: &Conv2d<T>, x: &Array4<T>) -> Array4<T> {
    let batch = x.dim().0;
    let outs: Vec<Array3<T>> = (0..batch)
        .into_par_iter()
        .map(|i| conv.forward_one(&x.index_axis(Axis(0), i)))
        .collect();
    stack_batch(&outs)
}

pub(crate) fn stack_batch<T: Scalar>(items: &[Array3<T>]) -> Array4<T> {
    let views: Vec<ArrayView3<'_, T>> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_taxonomy() -> Taxonomy {
        Taxonomy::from_groups(&[
            (
                "polygon".into(),
                vec!["triangle".into(), "square".into(), "pentagon".into()],
            ),
            (
                "ellipse".into(),
                vec!["circle".into(), "wide ellipse".into(), "tall ellipse".into()],
            ),
        ])
        .unwrap()
    }

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn level_widths_follow_shape_rule() {
        let tax = toy_taxonomy();
        let m = Model::<f32>::build(cfg(Variant::MultiGroup), tax.clone(), 0).unwrap();
        assert_eq!(m.level_widths(), vec![3, 7]);
        let m = Model::<f32>::build(cfg(Variant::MultiNoGroup), tax.clone(), 0).unwrap();
        assert_eq!(m.level_widths(), vec![7, 7]);
        let m = Model::<f32>::build(cfg(Variant::Baseline), tax.clone(), 0).unwrap();
        assert_eq!(m.level_widths(), vec![7]);
        let m = Model::<f32>::build(cfg(Variant::Merged), tax, 0).unwrap();
        assert_eq!(m.level_widths(), vec![7]);
    }

    #[test]
    fn baseline_and_grouped_param_counts_within_five_percent() {
        let tax = toy_taxonomy();
        let mut base = Model::<f32>::build(cfg(Variant::Baseline), tax.clone(), 0).unwrap();
        let mut grouped = Model::<f32>::build(cfg(Variant::MultiGroup), tax, 0).unwrap();
        let (b, g) = (base.num_params() as f64, grouped.num_params() as f64);
        let rel = (b - g).abs() / g;
        assert!(rel <= 0.05, "relative difference {rel:.4} (|{b}| vs |{g}|)");
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let tax = toy_taxonomy();
        let m = Model::<f32>::build(cfg(Variant::Baseline), tax, 7).unwrap();
        let images = Array4::<f32>::from_elem((2, 3, 96, 96), 0.25);
        let f1 = m.backbone_forward(&images).unwrap();
        assert_eq!(f1.dim(), (2, 128, 12, 12));
        let f2 = m.backbone_forward(&images).unwrap();
        assert_eq!(f1, f2);
        let zero = Array4::<f32>::zeros((1, 3, 96, 96));
        let fz = m.backbone_forward(&zero).unwrap();
        assert_eq!(fz.dim(), (1, 128, 12, 12));
        // Wrong input shape is rejected.
        let bad = Array4::<f32>::zeros((1, 3, 64, 96));
        assert!(m.backbone_forward(&bad).is_err());
    }

    #[test]
    fn rpn_prediction_count_matches_anchor_grid() {
        let tax = toy_taxonomy();
        let m = Model::<f32>::build(cfg(Variant::Baseline), tax, 7).unwrap();
        assert_eq!(m.anchors().len(), 12 * 12 * 15);
        let images = Array4::<f32>::from_elem((1, 3, 96, 96), 0.1);
        let features = m.backbone_forward(&images).unwrap();
        let (obj, deltas, _) = m.rpn_forward(&features);
        assert_eq!(obj.dim(), (1, 15, 12, 12));
        assert_eq!(deltas.dim(), (1, 60, 12, 12));
        let (flat_obj, flat_deltas) = m.flatten_rpn_outputs(
            &obj.index_axis(Axis(0), 0),
            &deltas.index_axis(Axis(0), 0),
        );
        assert_eq!(flat_obj.len(), 2160);
        assert_eq!(flat_deltas.dim(), (2160, 4));
    }

    #[test]
    fn head_output_shapes_per_variant() {
        let tax = toy_taxonomy();
        let pooled = Array2::<f32>::from_elem((50, 24 * 49), 0.1);
        for (variant, expected_levels) in [
            (Variant::Baseline, vec![7]),
            (Variant::MultiNoGroup, vec![7, 7]),
            (Variant::MultiGroup, vec![3, 7]),
            (Variant::Merged, vec![7]),
        ] {
            let m = Model::<f32>::build(cfg(variant), tax.clone(), 3).unwrap();
            let out = m.head_forward(&pooled.view());
            let widths: Vec<usize> = out.level_scores.iter().map(|s| s.ncols()).collect();
            assert_eq!(widths, expected_levels, "{variant:?}");
            assert!(out.level_scores.iter().all(|s| s.nrows() == 50));
            assert_eq!(out.deltas.dim(), (50, 24));
        }
    }

    #[test]
    fn merged_head_concatenates_branch_features() {
        let tax = toy_taxonomy();
        let m = Model::<f32>::build(cfg(Variant::Merged), tax, 3).unwrap();
        match &m.heads {
            Heads::Merged { merge_fc, .. } => assert_eq!(merge_fc.in_dim(), 2048),
            _ => unreachable!(),
        }
    }

    #[test]
    fn zeroed_classifier_yields_no_detections() {
        let tax = toy_taxonomy();
        let mut cfg = cfg(Variant::Baseline);
        cfg.inference.score_thresh = 0.5;
        let mut m = Model::<f32>::build(cfg, tax, 11).unwrap();
        // Zero every head parameter: softmax scores become uniform (1/7 < 0.5).
        m.visit_params(&mut |name, mut value, _| {
            if name.starts_with("head.") {
                value.fill(0.0);
            }
        });
        let images = Array4::<f32>::from_elem((1, 3, 96, 96), 0.3);
        let dets = m.detect(&images).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn detection_coarse_labels_follow_taxonomy() {
        let tax = toy_taxonomy();
        let m = Model::<f32>::build(cfg(Variant::MultiGroup), tax.clone(), 5).unwrap();
        let images = Array4::<f32>::from_elem((1, 3, 96, 96), 0.6);
        for det in m.detect(&images).unwrap().remove(0) {
            assert_eq!(det.coarse, tax.fine_to_coarse(det.fine).unwrap());
        }
    }

    #[test]
    fn param_checksum_is_seed_stable() {
        let tax = toy_taxonomy();
        let mut a = Model::<f32>::build(cfg(Variant::MultiGroup), tax.clone(), 42).unwrap();
        let mut b = Model::<f32>::build(cfg(Variant::MultiGroup), tax.clone(), 42).unwrap();
        let mut c = Model::<f32>::build(cfg(Variant::MultiGroup), tax, 43).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), c.param_checksum());
    }
}
