//! Detection scaffolding: boxes, anchors, prediction decoding, IoU
//! matching, the hard training loss, and the mAP@0.5 evaluator.

pub mod dataset;
pub mod hardloss;
pub mod map;

use thiserror::Error;

use crate::tensor::Tensor;

pub use dataset::{gen_dataset, gen_images, load_dataset, save_dataset, Dataset, DatasetConfig};
pub use hardloss::{assign_targets, HardLoss, HardLossCfg, PosTarget};
pub use map::{eval_map, ApInterp, EvalConfig, MapReport};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detect: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Axis-aligned box in normalized center/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }
}

/// A scored decoded detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn as_box(&self) -> BoxLabel {
        BoxLabel { class_id: self.class_id, cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

/// Per-scale anchor boxes, normalized (w, h), three per scale at strides
/// 8/16/32.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub per_scale: [Vec<(f64, f64)>; 3],
}

impl Anchors {
    pub fn count_per_scale(&self) -> usize {
        self.per_scale[0].len()
    }

    pub fn flat(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for (s, list) in self.per_scale.iter().enumerate() {
            for (a, &(w, h)) in list.iter().enumerate() {
                out.push((s, a, w, h));
            }
        }
        out
    }
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two width/height pairs aligned at a common center; anchor
/// assignment uses this shape-only overlap.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layout of one raw head tensor `[N, A*(5+C), G, G]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub anchors: usize,
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl HeadLayout {
    pub fn of(t: &Tensor, anchors: usize, classes: usize) -> Result<Self> {
        let (_, c, h, w) = t
            .dims4()
            .ok_or_else(|| DetectError::Invalid(format!("head tensor rank {:?}", t.shape)))?;
        if c != anchors * (5 + classes) {
            return Err(DetectError::Invalid(format!(
                "head has {c} channels, expected {}",
                anchors * (5 + classes)
            )));
        }
        Ok(HeadLayout { anchors, classes, grid_h: h, grid_w: w })
    }

    /// Flat offset of channel `ch` at cell `(gy, gx)` for image `img`.
    #[inline]
    pub fn at(&self, img: usize, ch: usize, gy: usize, gx: usize) -> usize {
        ((img * self.anchors * (5 + self.classes) + ch) * self.grid_h + gy) * self.grid_w + gx
    }
}

/// Decode one image's raw predictions at one scale.
#[allow(clippy::too_many_arguments)]
fn decode_scale(
    head: &Tensor,
    layout: &HeadLayout,
    img: usize,
    anchors: &[(f64, f64)],
    conf_thresh: f64,
    out: &mut Vec<Detection>,
) {
    let (gh, gw) = (layout.grid_h, layout.grid_w);
    let nc = layout.classes;
    for a in 0..layout.anchors {
        let base = a * (5 + nc);
        let (aw, ah) = anchors[a];
        for gy in 0..gh {
            for gx in 0..gw {
                let obj = sigmoid(head.data[layout.at(img, base + 4, gy, gx)]);
                if obj < conf_thresh {
                    continue; // class prob can only shrink the score
                }
                // softmax over classes
                let mut mx = f64::NEG_INFINITY;
                for c in 0..nc {
                    mx = mx.max(head.data[layout.at(img, base + 5 + c, gy, gx)]);
                }
                let mut denom = 0.0;
                let mut best_c = 0;
                let mut best_e = 0.0;
                for c in 0..nc {
                    let e = (head.data[layout.at(img, base + 5 + c, gy, gx)] - mx).exp();
                    denom += e;
                    if e > best_e {
                        best_e = e;
                        best_c = c;
                    }
                }
                let score = obj * best_e / denom;
                if score < conf_thresh {
                    continue;
                }
                let tx = head.data[layout.at(img, base, gy, gx)];
                let ty = head.data[layout.at(img, base + 1, gy, gx)];
                let tw = head.data[layout.at(img, base + 2, gy, gx)].clamp(-10.0, 10.0);
                let th = head.data[layout.at(img, base + 3, gy, gx)].clamp(-10.0, 10.0);
                out.push(Detection {
                    class_id: best_c,
                    score,
                    cx: (sigmoid(tx) + gx as f64) / gw as f64,
                    cy: (sigmoid(ty) + gy as f64) / gh as f64,
                    w: aw * tw.exp(),
                    h: ah * th.exp(),
                });
            }
        }
    }
}

/// Greedy same-class suppression at fixed overlap 0.45.
pub const NMS_IOU: f64 = 0.45;

fn nms(mut dets: Vec<Detection>) -> Vec<Detection> {
    // stable order: score desc, then insertion order
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for &i in &idx {
        let d = dets[i];
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.as_box(), &d.as_box()) > NMS_IOU);
        if !suppressed {
            keep.push(d);
        }
    }
    dets.clear();
    keep
}

/// Decode raw head tensors into per-image scored boxes with suppression.
pub fn decode_predictions(
    heads: &[Tensor],
    anchors: &Anchors,
    classes: usize,
    conf_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    if heads.len() != 3 {
        return Err(DetectError::Invalid(format!("expected 3 head tensors, got {}", heads.len())));
    }
    let n = heads[0].shape[0];
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for (s, head) in heads.iter().enumerate() {
        let layout = HeadLayout::of(head, anchors.per_scale[s].len(), classes)?;
        for (img, dets) in out.iter_mut().enumerate() {
            decode_scale(head, &layout, img, &anchors.per_scale[s], conf_thresh, dets);
        }
    }
    Ok(out.into_iter().map(nms).collect())
}

/// Candidate positions whose decoded boxes overlap ground truth.
///
/// Returns, per scale, the `(img, anchor, gy, gx)` positions whose decoded
/// box reaches `iou_thresh` against some ground-truth box of that image.
/// This defines the candidate set for the soft box-regression loss.
pub fn match_candidates(
    heads: &[Tensor],
    anchors: &Anchors,
    classes: usize,
    ground_truth: &[Vec<BoxLabel>],
    iou_thresh: f64,
) -> Result<Vec<Vec<(usize, usize, usize, usize)>>> {
    let mut out = Vec::with_capacity(heads.len());
    for (s, head) in heads.iter().enumerate() {
        let layout = HeadLayout::of(head, anchors.per_scale[s].len(), classes)?;
        let (gh, gw) = (layout.grid_h, layout.grid_w);
        let mut matched = Vec::new();
        for (img, gts) in ground_truth.iter().enumerate() {
            if gts.is_empty() {
                continue;
            }
            for a in 0..layout.anchors {
                let base = a * (5 + classes);
                let (aw, ah) = anchors.per_scale[s][a];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tx = head.data[layout.at(img, base, gy, gx)];
                        let ty = head.data[layout.at(img, base + 1, gy, gx)];
                        let tw = head.data[layout.at(img, base + 2, gy, gx)].clamp(-10.0, 10.0);
                        let th = head.data[layout.at(img, base + 3, gy, gx)].clamp(-10.0, 10.0);
                        let db = BoxLabel {
                            class_id: 0,
                            cx: (sigmoid(tx) + gx as f64) / gw as f64,
                            cy: (sigmoid(ty) + gy as f64) / gh as f64,
                            w: aw * tw.exp(),
                            h: ah * th.exp(),
                        };
                        if gts.iter().any(|g| iou(g, &db) >= iou_thresh) {
                            matched.push((img, a, gy, gx));
                        }
                    }
                }
            }
        }
        out.push(matched);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxLabel {
        BoxLabel { class_id: 0, cx, cy, w, h }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_corner_boxes_one_seventh() {
        // (0,0)-(2,2) and (1,1)-(3,3): intersection 1, union 7
        let a = bx(1.0, 1.0, 2.0, 2.0);
        let b = bx(2.0, 2.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..1.0f64, ay in 0.0..1.0f64, aw in 0.01..0.9f64, ah in 0.01..0.9f64,
            bx_ in 0.0..1.0f64, by in 0.0..1.0f64, bw in 0.01..0.9f64, bh in 0.01..0.9f64,
        ) {
            let a = bx(ax, ay, aw, ah);
            let b = bx(bx_, by, bw, bh);
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    fn test_anchors() -> Anchors {
        Anchors {
            per_scale: [
                vec![(0.1, 0.1), (0.2, 0.15)],
                vec![(0.3, 0.3), (0.4, 0.3)],
                vec![(0.6, 0.5), (0.8, 0.8)],
            ],
        }
    }

    fn empty_heads(n: usize, classes: usize, fill: f64) -> Vec<Tensor> {
        [12usize, 6, 3]
            .iter()
            .map(|&g| Tensor::filled(vec![n, 2 * (5 + classes), g, g], fill))
            .collect()
    }

    #[test]
    fn all_low_logits_decode_empty() {
        let heads = empty_heads(1, 3, -40.0);
        let dets = decode_predictions(&heads, &test_anchors(), 3, 0.25).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn hot_cell_decodes_to_cell_center_and_anchor_size() {
        let classes = 3;
        let mut heads = empty_heads(1, classes, -40.0);
        // scale 1, anchor 0, cell (2, 3): tx=ty=tw=th=0, obj hot, class 1 hot
        let layout = HeadLayout::of(&heads[1], 2, classes).unwrap();
        let base = 0;
        heads[1].data[layout.at(0, base, 2, 3)] = 0.0;
        heads[1].data[layout.at(0, base + 1, 2, 3)] = 0.0;
        heads[1].data[layout.at(0, base + 2, 2, 3)] = 0.0;
        heads[1].data[layout.at(0, base + 3, 2, 3)] = 0.0;
        heads[1].data[layout.at(0, base + 4, 2, 3)] = 40.0;
        heads[1].data[layout.at(0, base + 5 + 1, 2, 3)] = 40.0;
        let dets = decode_predictions(&heads, &test_anchors(), classes, 0.25).unwrap();
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert_eq!(d.class_id, 1);
        // sigmoid(0) = 0.5 puts the box at the cell center; size = anchor
        assert!((d.cx - 3.5 / 6.0).abs() < 1e-12);
        assert!((d.cy - 2.5 / 6.0).abs() < 1e-12);
        assert!((d.w - 0.3).abs() < 1e-12);
        assert!((d.h - 0.3).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_suppressed() {
        let classes = 3;
        let mut heads = empty_heads(1, classes, -40.0);
        let layout = HeadLayout::of(&heads[1], 2, classes).unwrap();
        for a in 0..2 {
            let base = a * (5 + classes);
            for ch in 0..4 {
                heads[1].data[layout.at(0, base + ch, 2, 3)] = 0.0;
            }
            heads[1].data[layout.at(0, base + 4, 2, 3)] = 40.0;
            heads[1].data[layout.at(0, base + 5, 2, 3)] = 40.0;
        }
        // anchor sizes differ; make anchor 1 shrink to anchor 0's size so
        // both anchors decode to the same box
        let base1 = 5 + classes;
        heads[1].data[layout.at(0, base1 + 2, 2, 3)] = (0.3f64 / 0.4).ln();
        let dets = decode_predictions(&heads, &test_anchors(), classes, 0.25).unwrap();
        assert_eq!(dets[0].len(), 1);
    }

    #[test]
    fn match_candidates_empty_without_gt() {
        let heads = empty_heads(1, 3, 0.0);
        let m = match_candidates(&heads, &test_anchors(), 3, &[vec![]], 0.5).unwrap();
        assert!(m.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn match_candidates_monotone_in_threshold() {
        let classes = 3;
        let mut heads = empty_heads(2, classes, 0.0);
        for t in heads.iter_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
            }
        }
        let gts = vec![
            vec![bx(0.4, 0.4, 0.3, 0.3)],
            vec![bx(0.7, 0.2, 0.2, 0.4), bx(0.2, 0.8, 0.4, 0.2)],
        ];
        let lo = match_candidates(&heads, &test_anchors(), classes, &gts, 0.3).unwrap();
        let hi = match_candidates(&heads, &test_anchors(), classes, &gts, 0.6).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            assert!(b.len() <= a.len());
            for m in b {
                assert!(a.contains(m));
            }
        }
    }
}
