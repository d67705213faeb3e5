//! Teacher-side pseudo-label pipeline.
//!
//! Candidates come from decoding the teacher on a weakly augmented
//! view. Two-view refinement matches each original-view box to its
//! max-IoU partner among the flipped-view boxes (mapped back to
//! original coordinates) and averages matched pairs; an image-level
//! multi-label head then filters classes the teacher does not believe
//! exist in the image; finally two thresholds on the indicator score
//! split the surviving labels into a regression set and a stricter
//! classification set.

use serde::{Deserialize, Serialize};

use crate::geometry::{match_max_iou, nms, BBox, ScoredBox};
use crate::model::{decode, PredictionMaps};

/// Pipeline stage a label set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Decoded teacher candidates after NMS.
    Raw,
    /// After two-view refinement.
    Refined,
    /// After global-view filtering.
    Filtered,
    /// Regression split (indicator >= sigma_reg).
    Reg,
    /// Classification split (indicator >= sigma_cls).
    Cls,
}

/// A set of pseudo-labels for one image at one pipeline stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<ScoredBox>,
    pub source_image_id: u64,
    pub stage: Stage,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Classes present in the set (argmax class per label).
    pub fn present_classes(&self, num_classes: usize) -> Vec<bool> {
        let mut present = vec![false; num_classes];
        for l in &self.labels {
            present[l.class()] = true;
        }
        present
    }
}

/// Decodes teacher prediction maps into raw candidates (confidence
/// floor + NMS), each carrying its indicator score.
pub fn extract_candidates(
    teacher_pm: &PredictionMaps,
    image_id: u64,
    conf_floor: f64,
    nms_thr: f64,
) -> PseudoLabelSet {
    PseudoLabelSet {
        labels: decode(teacher_pm, conf_floor, nms_thr),
        source_image_id: image_id,
        stage: Stage::Raw,
    }
}

/// Two-view refinement.
///
/// For each original-view box, the flipped-view box (already mapped
/// back to original coordinates) with the largest IoU is selected; if
/// that IoU is strictly above `delta` the two are averaged elementwise
/// (coordinates, confidence, class probabilities, with the indicator
/// recomputed), otherwise the original box passes through unchanged.
/// Augmented-view boxes never create outputs on their own, so the
/// output cardinality always equals the input cardinality. Matching is
/// independent per original box; one augmented box may partner several
/// originals.
pub fn augmented_view_refine(
    y_uo: &PseudoLabelSet,
    y_ua_flipped_back: &PseudoLabelSet,
    delta: f64,
) -> PseudoLabelSet {
    let pool: Vec<BBox> = y_ua_flipped_back.labels.iter().map(|l| l.bbox).collect();
    let labels = y_uo
        .labels
        .iter()
        .map(|orig| match match_max_iou(&orig.bbox, &pool) {
            Some((j, iou)) if iou > delta => average_pair(orig, &y_ua_flipped_back.labels[j]),
            _ => orig.clone(),
        })
        .collect();
    PseudoLabelSet { labels, source_image_id: y_uo.source_image_id, stage: Stage::Refined }
}

fn average_pair(a: &ScoredBox, b: &ScoredBox) -> ScoredBox {
    debug_assert_eq!(a.cls_probs.len(), b.cls_probs.len());
    let bbox = BBox::new(
        0.5 * (a.bbox.x1 + b.bbox.x1),
        0.5 * (a.bbox.y1 + b.bbox.y1),
        0.5 * (a.bbox.x2 + b.bbox.x2),
        0.5 * (a.bbox.y2 + b.bbox.y2),
    );
    let conf = 0.5 * (a.conf + b.conf);
    let probs: Vec<f64> = a
        .cls_probs
        .iter()
        .zip(&b.cls_probs)
        .map(|(&x, &y)| 0.5 * (x + y))
        .collect();
    ScoredBox::new(bbox, conf, probs)
}

/// Global-view filtering: drop every label whose argmax class `k` has
/// image-level probability `gls_probs[k] < sigma_g`.
pub fn global_view_filter(labels: &PseudoLabelSet, gls_probs: &[f64], sigma_g: f64) -> PseudoLabelSet {
    let kept = labels
        .labels
        .iter()
        .filter(|l| gls_probs[l.class()] >= sigma_g)
        .cloned()
        .collect();
    PseudoLabelSet { labels: kept, source_image_id: labels.source_image_id, stage: Stage::Filtered }
}

/// Task-specific threshold split on the indicator score:
/// `Y_ur = {indicator >= sigma_reg}`, `Y_uc = {indicator >= sigma_cls}`.
pub fn split_task_labels(
    labels: &PseudoLabelSet,
    sigma_reg: f64,
    sigma_cls: f64,
) -> (PseudoLabelSet, PseudoLabelSet) {
    let reg: Vec<ScoredBox> = labels
        .labels
        .iter()
        .filter(|l| l.indicator >= sigma_reg)
        .cloned()
        .collect();
    let cls: Vec<ScoredBox> = labels
        .labels
        .iter()
        .filter(|l| l.indicator >= sigma_cls)
        .cloned()
        .collect();
    (
        PseudoLabelSet { labels: reg, source_image_id: labels.source_image_id, stage: Stage::Reg },
        PseudoLabelSet { labels: cls, source_image_id: labels.source_image_id, stage: Stage::Cls },
    )
}

/// Ablation baseline: union both views, then NMS. No matching gate, no
/// averaging; contrast case for the two-view refinement.
pub fn flip_ensemble_refine(
    y_uo: &PseudoLabelSet,
    y_ua_flipped_back: &PseudoLabelSet,
    nms_thr: f64,
) -> PseudoLabelSet {
    let mut pool: Vec<ScoredBox> = y_uo.labels.clone();
    pool.extend(y_ua_flipped_back.labels.iter().cloned());
    let kept = nms(&pool, nms_thr);
    PseudoLabelSet {
        labels: kept.into_iter().map(|i| pool[i].clone()).collect(),
        source_image_id: y_uo.source_image_id,
        stage: Stage::Refined,
    }
}
