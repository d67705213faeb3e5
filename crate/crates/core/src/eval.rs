//! COCO-style detection evaluation and pseudo-label quality
//! analytics.
//!
//! Average precision uses greedy confidence-descending matching with
//! each ground truth matched at most once, 101-point interpolated
//! precision-recall integration, IoU thresholds 0.50:0.05:0.95, and a
//! macro average over classes that have at least one ground-truth
//! box.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, ScoredBox};
use crate::pseudolabel::PseudoLabelSet;

/// The ten standard IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub gts: usize,
    pub preds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP averaged over classes and all IoU thresholds.
    pub map: f64,
    /// AP averaged over classes at IoU 0.50.
    pub ap50: f64,
    /// Per-class AP over all thresholds; `None` for classes without
    /// ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub counts: EvalCounts,
}

/// Average precision of per-image predictions against per-image
/// ground truth. `preds[i]` and `gts[i]` describe image `i`; a
/// prediction's class is the argmax of its class probabilities.
pub fn average_precision(
    preds: &[Vec<ScoredBox>],
    gts: &[Vec<(BBox, usize)>],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "per-image lists must align");

    let counts = EvalCounts {
        images: preds.len(),
        gts: gts.iter().map(Vec::len).sum(),
        preds: preds.iter().map(Vec::len).sum(),
    };

    let mut per_class_ap = vec![None; num_classes];
    let mut ap50 = Vec::new();
    for class in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut aps = Vec::with_capacity(iou_thresholds.len());
        for &thr in iou_thresholds {
            aps.push(class_ap(preds, gts, class, thr, n_gt));
        }
        per_class_ap[class] = Some(mean(&aps));
        ap50.push(class_ap(preds, gts, class, 0.5, n_gt));
    }

    let class_means: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    EvalReport {
        map: if class_means.is_empty() { 0.0 } else { mean(&class_means) },
        ap50: if ap50.is_empty() { 0.0 } else { mean(&ap50) },
        per_class_ap,
        counts,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ranked detections of one class across all images: greedy matching
/// per image, then a global precision-recall sweep with 101-point
/// interpolation.
fn class_ap(preds: &[Vec<ScoredBox>], gts: &[Vec<(BBox, usize)>], class: usize, thr: f64, n_gt: usize) -> f64 {
    // (conf, image, per-image rank) with a deterministic global order.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, plist) in preds.iter().enumerate() {
        for (rank, p) in plist.iter().enumerate() {
            if p.class() == class {
                dets.push((p.conf, img, rank));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    // Greedy matching in global rank order; each GT used once.
    let mut gt_used: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| g.iter().map(|(_, c)| *c != class).collect())
        .collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &(_, img, rank) in &dets {
        let pbox = preds[img][rank].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gbox, gclass)) in gts[img].iter().enumerate() {
            if *gclass != class || gt_used[img][gi] {
                continue;
            }
            let v = iou(&pbox, gbox);
            if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[img][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Precision-recall curve over ranked prefixes.
    let mut tps = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (i, &tp) in tp_flags.iter().enumerate() {
        if tp {
            tps += 1;
        }
        precision.push(tps as f64 / (i + 1) as f64);
        recall.push(tps as f64 / n_gt as f64);
    }

    // Monotone envelope from the right, then 101-point sampling.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut acc = 0.0;
    let mut idx = 0usize;
    for r in 0..=100 {
        let want = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < want {
            idx += 1;
        }
        if idx < recall.len() {
            acc += precision[idx];
        }
    }
    acc / 101.0
}

/// Aggregate quality of one pseudo-label set against ground truth.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PseudoQualityRow {
    pub step: usize,
    /// Mean over pseudo-boxes of the best IoU against any GT box
    /// (0 when either side is empty).
    pub avg_iou: f64,
    /// Fraction of pseudo-boxes overlapping a GT box of their class
    /// at IoU >= 0.5.
    pub accuracy: f64,
    pub count: usize,
}

pub fn pseudo_quality(pseudo: &PseudoLabelSet, gt: &[(BBox, usize)]) -> PseudoQualityRow {
    if pseudo.is_empty() {
        return PseudoQualityRow { step: 0, avg_iou: 0.0, accuracy: 0.0, count: 0 };
    }
    let mut iou_sum = 0.0;
    let mut correct = 0usize;
    for label in &pseudo.labels {
        let best_any = gt.iter().map(|(b, _)| iou(&label.bbox, b)).fold(0.0, f64::max);
        iou_sum += best_any;
        let best_class = gt
            .iter()
            .filter(|(_, c)| *c == label.class())
            .map(|(b, _)| iou(&label.bbox, b))
            .fold(0.0, f64::max);
        if best_class >= 0.5 {
            correct += 1;
        }
    }
    let n = pseudo.len();
    PseudoQualityRow {
        step: 0,
        avg_iou: iou_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        count: n,
    }
}

/// Merge of several quality rows (e.g. over the images of a batch),
/// weighted by box counts.
pub fn merge_quality(rows: &[PseudoQualityRow]) -> PseudoQualityRow {
    let count: usize = rows.iter().map(|r| r.count).sum();
    if count == 0 {
        return PseudoQualityRow::default();
    }
    let avg_iou = rows.iter().map(|r| r.avg_iou * r.count as f64).sum::<f64>() / count as f64;
    let accuracy = rows.iter().map(|r| r.accuracy * r.count as f64).sum::<f64>() / count as f64;
    PseudoQualityRow { step: 0, avg_iou, accuracy, count }
}

/// Per-bin `(correct, wrong)` counts of pseudo-boxes binned by
/// indicator score. Bins partition `[0, 1]` evenly; a box is correct
/// iff it overlaps a GT box of its class at IoU >= 0.5.
pub fn confidence_histogram(
    sets: &[(&PseudoLabelSet, &[(BBox, usize)])],
    bins: usize,
) -> Vec<(usize, usize)> {
    assert!(bins > 0);
    let mut hist = vec![(0usize, 0usize); bins];
    for (set, gt) in sets {
        for label in &set.labels {
            let slot = ((label.indicator * bins as f64).floor() as usize).min(bins - 1);
            let best_class = gt
                .iter()
                .filter(|(_, c)| *c == label.class())
                .map(|(b, _)| iou(&label.bbox, b))
                .fold(0.0, f64::max);
            if best_class >= 0.5 {
                hist[slot].0 += 1;
            } else {
                hist[slot].1 += 1;
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::Stage;
    use rand::Rng;

    fn sb(b: BBox, conf: f64, class: usize, num_classes: usize) -> ScoredBox {
        let mut probs = vec![0.1; num_classes];
        probs[class] = 0.9;
        ScoredBox::new(b, conf, probs)
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![
            vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0usize), (BBox::new(20.0, 20.0, 30.0, 30.0), 1usize)],
            vec![(BBox::new(5.0, 5.0, 15.0, 15.0), 1usize)],
        ];
        let preds: Vec<Vec<ScoredBox>> = gts
            .iter()
            .map(|g| g.iter().map(|(b, c)| sb(*b, 1.0, *c, 3)).collect())
            .collect();
        let rep = average_precision(&preds, &gts, &coco_iou_thresholds(), 3);
        assert!((rep.map - 1.0).abs() < 1e-12);
        assert!((rep.ap50 - 1.0).abs() < 1e-12);
        assert_eq!(rep.per_class_ap[2], None);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0usize)]];
        let preds = vec![vec![]];
        let rep = average_precision(&preds, &gts, &coco_iou_thresholds(), 1);
        assert_eq!(rep.map, 0.0);
        assert_eq!(rep.counts.preds, 0);
        assert_eq!(rep.counts.gts, 1);
    }

    #[test]
    fn ranked_tp_then_fp_is_ap_one_at_matching_threshold() {
        // 1 GT; rank-1 prediction overlaps at IoU 0.6, rank-2 is a
        // miss. At thr 0.5 the interpolated AP is 1.0; at 0.7 it's 0.
        let gt_box = BBox::new(0.0, 0.0, 10.0, 10.0);
        let hit = BBox::new(0.0, 0.0, 10.0, 6.0); // IoU 0.6
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        let gts = vec![vec![(gt_box, 0usize)]];
        let preds = vec![vec![sb(hit, 0.9, 0, 1), sb(miss, 0.8, 0, 1)]];
        let at_05 = average_precision(&preds, &gts, &[0.5], 1);
        assert!((at_05.map - 1.0).abs() < 1e-12, "got {}", at_05.map);
        let at_07 = average_precision(&preds, &gts, &[0.7], 1);
        assert_eq!(at_07.map, 0.0);
    }

    #[test]
    fn map_is_mean_over_thresholds_of_mean_ap() {
        let mut rng = crate::rng::stream(42, "map-identity", 0);
        let (preds, gts) = random_instance(&mut rng, 4, 3);
        let thresholds = coco_iou_thresholds();
        let rep = average_precision(&preds, &gts, &thresholds, 3);

        let mut per_thr = Vec::new();
        for &t in &thresholds {
            let r = average_precision(&preds, &gts, &[t], 3);
            per_thr.push(r.map);
        }
        let mean_thr = per_thr.iter().sum::<f64>() / per_thr.len() as f64;
        assert!((rep.map - mean_thr).abs() < 1e-12, "{} vs {mean_thr}", rep.map);
    }

    fn random_instance(
        rng: &mut rand_chacha::ChaCha8Rng,
        images: usize,
        classes: usize,
    ) -> (Vec<Vec<ScoredBox>>, Vec<Vec<(BBox, usize)>>) {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let n_gt = rng.gen_range(0usize..=4);
            let gt: Vec<(BBox, usize)> = (0..n_gt)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.0..60.0);
                    let y: f64 = rng.gen_range(0.0..60.0);
                    (
                        BBox::new(x, y, x + rng.gen_range(4.0..20.0), y + rng.gen_range(4.0..20.0)),
                        rng.gen_range(0..classes),
                    )
                })
                .collect();
            let n_pred = rng.gen_range(0usize..=6);
            let pred: Vec<ScoredBox> = (0..n_pred)
                .map(|_| {
                    // Half the predictions jitter a GT box, half are noise.
                    let (bbox, class) = if !gt.is_empty() && rng.gen_bool(0.5) {
                        let (b, c) = gt[rng.gen_range(0..gt.len())];
                        let j = rng.gen_range(-3.0..3.0);
                        (BBox::new(b.x1 + j, b.y1 + j, b.x2 + j, b.y2 + j), c)
                    } else {
                        let x: f64 = rng.gen_range(0.0..60.0);
                        let y: f64 = rng.gen_range(0.0..60.0);
                        (
                            BBox::new(x, y, x + rng.gen_range(4.0..20.0), y + rng.gen_range(4.0..20.0)),
                            rng.gen_range(0..classes),
                        )
                    };
                    sb(bbox, rng.gen_range(0.01..0.99), class, classes)
                })
                .collect();
            preds.push(pred);
            gts.push(gt);
        }
        (preds, gts)
    }

    /// Brute-force oracle: for every ranked prefix recompute the
    /// greedy matching from scratch, then integrate the interpolated
    /// PR curve explicitly.
    fn oracle_class_ap(
        preds: &[Vec<ScoredBox>],
        gts: &[Vec<(BBox, usize)>],
        class: usize,
        thr: f64,
    ) -> Option<f64> {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
        if n_gt == 0 {
            return None;
        }
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (img, plist) in preds.iter().enumerate() {
            for (rank, p) in plist.iter().enumerate() {
                if p.class() == class {
                    dets.push((p.conf, img, rank));
                }
            }
        }
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        let match_prefix = |m: usize| -> usize {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tps = 0;
            for &(_, img, rank) in dets.iter().take(m) {
                let pbox = preds[img][rank].bbox;
                let mut best: Option<(usize, f64)> = None;
                for (gi, (gbox, gclass)) in gts[img].iter().enumerate() {
                    if *gclass != class || used[img][gi] {
                        continue;
                    }
                    let v = iou(&pbox, gbox);
                    if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    used[img][gi] = true;
                    tps += 1;
                }
            }
            tps
        };

        let mut pr: Vec<(f64, f64)> = Vec::new();
        for m in 1..=dets.len() {
            let tp = match_prefix(m);
            pr.push((tp as f64 / n_gt as f64, tp as f64 / m as f64));
        }
        let mut acc = 0.0;
        for r in 0..=100 {
            let want = r as f64 / 100.0;
            let best = pr
                .iter()
                .filter(|(rec, _)| *rec >= want)
                .map(|(_, p)| *p)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                acc += best;
            }
        }
        Some(acc / 101.0)
    }

    #[test]
    fn average_precision_matches_prefix_enumeration_oracle() {
        let mut rng = crate::rng::stream(7, "ap-oracle", 0);
        for trial in 0..200 {
            let classes = rng.gen_range(1usize..=5);
            let images = rng.gen_range(1usize..=3);
            let (preds, gts) = random_instance(&mut rng, images, classes);
            for thr in [0.5, 0.75] {
                for class in 0..classes {
                    let n_gt: usize =
                        gts.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
                    let got = if n_gt == 0 { None } else { Some(class_ap(&preds, &gts, class, thr, n_gt)) };
                    let want = oracle_class_ap(&preds, &gts, class, thr);
                    match (got, want) {
                        (None, None) => {}
                        (Some(g), Some(w)) => {
                            assert!((g - w).abs() < 1e-12, "trial {trial} class {class} thr {thr}: {g} vs {w}")
                        }
                        other => panic!("trial {trial}: {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn ap50_at_least_map() {
        let mut rng = crate::rng::stream(13, "ap50-ge", 0);
        for _ in 0..100 {
            let (preds, gts) = random_instance(&mut rng, 3, 3);
            let rep = average_precision(&preds, &gts, &coco_iou_thresholds(), 3);
            assert!(
                rep.ap50 >= rep.map - 1e-12,
                "ap50 {} < map {} (flagging for inspection)",
                rep.ap50,
                rep.map
            );
        }
    }

    #[test]
    fn pseudo_quality_identity_and_degenerates() {
        let gt = vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 1usize)];
        let exact = PseudoLabelSet {
            labels: vec![sb(gt[0].0, 0.9, 1, 3)],
            source_image_id: 0,
            stage: Stage::Filtered,
        };
        let row = pseudo_quality(&exact, &gt);
        assert_eq!(row.avg_iou, 1.0);
        assert_eq!(row.accuracy, 1.0);
        assert_eq!(row.count, 1);

        let empty = PseudoLabelSet { labels: vec![], source_image_id: 0, stage: Stage::Filtered };
        let row = pseudo_quality(&empty, &gt);
        assert_eq!((row.avg_iou, row.accuracy, row.count), (0.0, 0.0, 0));

        // IoU 0.6 but wrong class: contributes to avg_iou, not accuracy.
        let wrong = PseudoLabelSet {
            labels: vec![sb(BBox::new(0.0, 0.0, 10.0, 6.0), 0.9, 2, 3)],
            source_image_id: 0,
            stage: Stage::Filtered,
        };
        let row = pseudo_quality(&wrong, &gt);
        assert!((row.avg_iou - 0.6).abs() < 1e-12);
        assert_eq!(row.accuracy, 0.0);
    }

    #[test]
    fn histogram_conserves_counts_and_separates_correct() {
        let gt: Vec<(BBox, usize)> = vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 0usize)];
        let correct = sb(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9, 0, 2);
        let wrong = sb(BBox::new(40.0, 40.0, 50.0, 50.0), 0.3, 0, 2);
        let set = PseudoLabelSet {
            labels: vec![correct, wrong],
            source_image_id: 0,
            stage: Stage::Filtered,
        };
        let hist = confidence_histogram(&[(&set, &gt)], 10);
        let total: usize = hist.iter().map(|(a, b)| a + b).sum();
        assert_eq!(total, 2);
        let all_correct: usize = hist.iter().map(|(a, _)| *a).sum();
        assert_eq!(all_correct, 1);

        // All-correct set: wrong counts all zero.
        let set2 = PseudoLabelSet {
            labels: vec![sb(gt[0].0, 0.7, 0, 2)],
            source_image_id: 0,
            stage: Stage::Filtered,
        };
        let hist2 = confidence_histogram(&[(&set2, &gt)], 4);
        assert!(hist2.iter().all(|(_, w)| *w == 0));
    }
}
