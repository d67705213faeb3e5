//! Bounding-box algebra: IoU, greedy NMS, max-IoU matching, and
//! horizontal-flip coordinate transforms.
//!
//! Boxes are corner-format `(x1, y1, x2, y2)` in image pixels. All
//! functions here are pure; none of them mutate shared state.

use serde::{Deserialize, Serialize};

/// An axis-aligned box with `x1 <= x2`, `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clamp the box to `[0, w] x [0, h]`.
    pub fn clamp_to(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

/// A detection candidate: box, objectness confidence, per-class
/// probabilities, and the selection indicator `conf * max(cls_probs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub conf: f64,
    pub cls_probs: Vec<f64>,
    pub indicator: f64,
}

impl ScoredBox {
    /// Builds a candidate, recomputing the indicator from `conf` and
    /// the class probabilities so the two can never drift apart.
    pub fn new(bbox: BBox, conf: f64, cls_probs: Vec<f64>) -> Self {
        let indicator = conf * max_prob(&cls_probs);
        ScoredBox { bbox, conf, cls_probs, indicator }
    }

    /// Argmax class; ties broken by the lowest index.
    pub fn class(&self) -> usize {
        argmax(&self.cls_probs)
    }
}

fn max_prob(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Intersection over union. Degenerate zero-area boxes have IoU 0 with
/// everything, including themselves; a zero union also yields 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let v = inter / union;
    if a.area() <= 0.0 || b.area() <= 0.0 {
        0.0
    } else {
        v
    }
}

/// Reflect a box across the vertical centerline of an image of width
/// `image_width`. Involutive: `flip_box(flip_box(b, w), w) == b`.
pub fn flip_box(b: &BBox, image_width: f64) -> BBox {
    BBox {
        x1: image_width - b.x2,
        y1: b.y1,
        x2: image_width - b.x1,
        y2: b.y2,
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in descending confidence (ties: lower
/// original index first); a candidate is dropped iff it overlaps an
/// already-kept box with IoU strictly above `iou_thr`. Returns kept
/// indices into `cands`, ordered by descending confidence.
pub fn nms(cands: &[ScoredBox], iou_thr: f64) -> Vec<usize> {
    assert!(iou_thr > 0.0 && iou_thr <= 1.0, "iou_thr must be in (0, 1]");
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .conf
            .partial_cmp(&cands[a].conf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&cands[k].bbox, &cands[i].bbox) > iou_thr);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Index and IoU of the pool box with the largest IoU against `query`;
/// ties broken by the lowest index. `None` on an empty pool.
pub fn match_max_iou(query: &BBox, pool: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in pool.iter().enumerate() {
        let v = iou(query, b);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sb(b: BBox, conf: f64) -> ScoredBox {
        ScoredBox::new(b, conf, vec![0.5, 0.5])
    }

    #[test]
    fn iou_identity() {
        let b = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_overlapping_quarter() {
        // Closed form: intersection 1, union 4 + 4 - 1 = 7. Cross-checked
        // by the rasterized overlap count in `iou_matches_raster_oracle`.
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_matches_raster_oracle() {
        // Rasterize both boxes at 1000x resolution over their joint
        // extent and count cells; an independent route to the same area
        // ratio, up to discretization.
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let n = 1000usize;
        let (lo, hi) = (0.0, 3.0);
        let step = (hi - lo) / n as f64;
        let mut inter = 0u64;
        let mut union = 0u64;
        for iy in 0..n {
            let y = lo + (iy as f64 + 0.5) * step;
            for ix in 0..n {
                let x = lo + (ix as f64 + 0.5) * step;
                let in_a = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
                let in_b = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        let raster = inter as f64 / union as f64;
        assert!((raster - iou(&a, &b)).abs() < 1e-3, "raster {raster}");
    }

    #[test]
    fn iou_zero_area_is_zero_even_with_itself() {
        let degenerate = BBox::new(2.0, 2.0, 2.0, 5.0);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&degenerate, &b), 0.0);
    }

    #[test]
    fn flip_box_examples() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        assert_eq!(flip_box(&b, 96.0), BBox::new(76.0, 10.0, 86.0, 20.0));
        // Centered box is unchanged.
        let c = BBox::new(40.0, 5.0, 56.0, 9.0);
        assert_eq!(flip_box(&c, 96.0), c);
        // Involution.
        assert_eq!(flip_box(&flip_box(&b, 96.0), 96.0), b);
    }

    #[test]
    fn nms_keeps_disjoint_drops_overlap() {
        // B overlaps A with IoU 0.6 > 0.5 and loses on confidence;
        // C is disjoint and survives.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 6.0); // IoU(a, b) = 60/100 = 0.6
        let c = BBox::new(50.0, 50.0, 60.0, 60.0);
        let cands = vec![sb(a, 0.9), sb(b, 0.8), sb(c, 0.7)];
        assert_eq!(nms(&cands, 0.5), vec![0, 2]);
    }

    #[test]
    fn nms_single_box_kept() {
        let cands = vec![sb(BBox::new(0.0, 0.0, 4.0, 4.0), 0.3)];
        assert_eq!(nms(&cands, 0.5), vec![0]);
    }

    #[test]
    fn nms_identical_boxes_keep_highest_conf() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let cands = vec![sb(b, 0.8), sb(b, 0.9)];
        assert_eq!(nms(&cands, 0.5), vec![1]);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_conf_tie_breaks_by_lower_index() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let cands = vec![sb(b, 0.9), sb(b, 0.9)];
        assert_eq!(nms(&cands, 0.5), vec![0]);
    }

    #[test]
    fn match_max_iou_contains_query() {
        let q = BBox::new(1.0, 1.0, 5.0, 5.0);
        let pool = vec![BBox::new(0.0, 0.0, 2.0, 2.0), q, BBox::new(3.0, 3.0, 9.0, 9.0)];
        assert_eq!(match_max_iou(&q, &pool), Some((1, 1.0)));
    }

    #[test]
    fn match_max_iou_empty_pool() {
        assert_eq!(match_max_iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &[]), None);
    }

    #[test]
    fn match_max_iou_equals_exhaustive_argmax() {
        let mut rng = crate::rng::stream(11, "geometry-test", 0);
        for _ in 0..200 {
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..80.0);
                let y1: f64 = rng.gen_range(0.0..80.0);
                let w: f64 = rng.gen_range(1.0..16.0);
                let h: f64 = rng.gen_range(1.0..16.0);
                BBox::new(x1, y1, x1 + w, y1 + h)
            };
            let q = rand_box(&mut rng);
            let pool: Vec<BBox> = (0..5).map(|_| rand_box(&mut rng)).collect();
            let got = match_max_iou(&q, &pool).unwrap();
            // Exhaustive argmax with lowest-index tie-break.
            let mut want = (0usize, iou(&q, &pool[0]));
            for (i, b) in pool.iter().enumerate() {
                let v = iou(&q, b);
                if v > want.1 {
                    want = (i, v);
                }
            }
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(
            ax in 0.0..50.0f64, ay in 0.0..50.0f64, aw in 0.0..20.0f64, ah in 0.0..20.0f64,
            bx in 0.0..50.0f64, by in 0.0..50.0f64, bw in 0.0..20.0f64, bh in 0.0..20.0f64,
        ) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            prop_assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits());
        }

        #[test]
        fn iou_is_flip_invariant(
            ax in 0.0..50.0f64, ay in 0.0..50.0f64, aw in 0.5..20.0f64, ah in 0.5..20.0f64,
            bx in 0.0..50.0f64, by in 0.0..50.0f64, bw in 0.5..20.0f64, bh in 0.5..20.0f64,
        ) {
            let w = 96.0;
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            let lhs = iou(&a, &b);
            let rhs = iou(&flip_box(&a, w), &flip_box(&b, w));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn nms_result_independent_of_input_order(seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "nms-perm", 0);
            let n = rng.gen_range(1usize..8);
            let cands: Vec<ScoredBox> = (0..n).map(|_| {
                let x1: f64 = rng.gen_range(0.0..40.0);
                let y1: f64 = rng.gen_range(0.0..40.0);
                let w: f64 = rng.gen_range(2.0..20.0);
                let h: f64 = rng.gen_range(2.0..20.0);
                // Distinct confidences so the documented tie-break is not in play.
                sb(BBox::new(x1, y1, x1 + w, y1 + h), rng.gen_range(0.01..0.99))
            }).collect();

            let baseline: Vec<BBox> = nms(&cands, 0.5).iter().map(|&i| cands[i].bbox).collect();

            // Rotate the input; kept boxes must be the same set in the
            // same conf order.
            let mut rotated = cands.clone();
            rotated.rotate_left(n / 2);
            let rotated_kept: Vec<BBox> =
                nms(&rotated, 0.5).iter().map(|&i| rotated[i].bbox).collect();
            prop_assert_eq!(baseline, rotated_kept);
        }
    }
}
