//! Mean average precision at a fixed IoU threshold.

use super::{iou, BoxLabel, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApInterp {
    /// Area under the exact precision envelope (modern VOC convention).
    AllPoint,
    /// Classic 11-point interpolation, kept for comparison runs.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub interp: ApInterp,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresh: 0.5, interp: ApInterp::AllPoint }
    }
}

#[derive(Debug, Clone)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Debug, Clone)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over classes that have ground truth.
    pub map: f64,
    /// Classes with zero ground truth, excluded from the mean.
    pub skipped_classes: Vec<usize>,
}

/// Evaluate detections against ground truth.
///
/// Detections are sorted by confidence (ties broken by original index) and
/// greedily matched: a detection is a true positive when its best
/// still-unmatched ground-truth box of the same class and image reaches
/// the IoU threshold. Each ground truth matches at most once.
pub fn eval_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxLabel>],
    cfg: &EvalConfig,
) -> MapReport {
    assert_eq!(
        detections.len(),
        ground_truth.len(),
        "detections and ground truth must cover the same images"
    );
    let n_classes = ground_truth
        .iter()
        .flatten()
        .map(|g| g.class_id + 1)
        .chain(detections.iter().flatten().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(0);

    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for class in 0..n_classes {
        let gt_count: usize =
            ground_truth.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
        // flat detection list: (image, original index, detection)
        let mut dets: Vec<(usize, usize, Detection)> = Vec::new();
        for (img, list) in detections.iter().enumerate() {
            for (i, d) in list.iter().enumerate() {
                if d.class_id == class {
                    dets.push((img, img * 100_000 + i, *d));
                }
            }
        }
        if gt_count == 0 {
            skipped.push(class);
            per_class.push(ClassAp { class_id: class, ap: 0.0, gt_count, det_count: dets.len() });
            continue;
        }
        dets.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap().then(a.1.cmp(&b.1)));

        let mut matched: Vec<Vec<bool>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).map(|_| false).collect())
            .collect();
        let gt_boxes: Vec<Vec<&BoxLabel>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).collect())
            .collect();

        let mut tp = vec![false; dets.len()];
        for (di, (img, _, d)) in dets.iter().enumerate() {
            let mut best_iou = 0.0;
            let mut best_gi = None;
            for (gi, gt) in gt_boxes[*img].iter().enumerate() {
                if matched[*img][gi] {
                    continue;
                }
                let v = iou(gt, &d.as_box());
                if v > best_iou {
                    best_iou = v;
                    best_gi = Some(gi);
                }
            }
            if let (Some(gi), true) = (best_gi, best_iou >= cfg.iou_thresh) {
                matched[*img][gi] = true;
                tp[di] = true;
            }
        }

        // precision/recall curve in detection order
        let mut cum_tp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len()); // (recall, precision)
        for (i, &is_tp) in tp.iter().enumerate() {
            if is_tp {
                cum_tp += 1;
            }
            curve.push((cum_tp as f64 / gt_count as f64, cum_tp as f64 / (i + 1) as f64));
        }
        let ap = match cfg.interp {
            ApInterp::AllPoint => all_point_ap(&curve),
            ApInterp::ElevenPoint => eleven_point_ap(&curve),
        };
        per_class.push(ClassAp { class_id: class, ap, gt_count, det_count: dets.len() });
        ap_sum += ap;
        ap_n += 1;
    }
    MapReport { per_class, map: if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 }, skipped_classes: skipped }
}

/// Exact area under the precision envelope.
fn all_point_ap(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // envelope: precision at recall r is the max precision at recall >= r
    let mut env: Vec<(f64, f64)> = curve.to_vec();
    let mut best = 0.0;
    for p in env.iter_mut().rev() {
        best = f64::max(best, p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &env {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    ap
}

fn eleven_point_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(cr, _)| *cr >= r - 1e-12)
            .map(|(_, cp)| *cp)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 11.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> BoxLabel {
        BoxLabel { class_id: class, cx, cy, w, h }
    }

    fn det(class: usize, score: f64, b: &BoxLabel) -> Detection {
        Detection { class_id: class, score, cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }

    #[test]
    fn single_perfect_detection() {
        let g = gt(0, 0.5, 0.5, 0.2, 0.2);
        let report = eval_map(&[vec![det(0, 0.9, &g)]], &[vec![g]], &EvalConfig::default());
        assert_eq!(report.map, 1.0);
        assert_eq!(report.per_class[0].ap, 1.0);
    }

    #[test]
    fn high_conf_fp_then_tp_gives_half() {
        // hand-built PR curve: FP at rank 1, TP at rank 2
        // points: (0, 0), (1, 1/2); envelope precision at recall 1 is 1/2
        let g = gt(0, 0.5, 0.5, 0.2, 0.2);
        let fp = Detection { class_id: 0, score: 0.9, cx: 0.1, cy: 0.1, w: 0.05, h: 0.05 };
        let tp = det(0, 0.5, &g);
        let report = eval_map(&[vec![fp, tp]], &[vec![g]], &EvalConfig::default());
        assert!((report.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_detections_zero_map() {
        let g = gt(0, 0.5, 0.5, 0.2, 0.2);
        let report = eval_map(&[vec![]], &[vec![g]], &EvalConfig::default());
        assert_eq!(report.map, 0.0);
    }

    #[test]
    fn order_invariance() {
        let g0 = gt(0, 0.3, 0.3, 0.2, 0.2);
        let g1 = gt(0, 0.7, 0.7, 0.2, 0.2);
        let d0 = det(0, 0.8, &g0);
        let d1 = det(0, 0.6, &g1);
        let fp = Detection { class_id: 0, score: 0.7, cx: 0.1, cy: 0.9, w: 0.05, h: 0.05 };
        let a = eval_map(&[vec![d0, d1, fp]], &[vec![g0, g1]], &EvalConfig::default());
        let b = eval_map(&[vec![fp, d1, d0]], &[vec![g1, g0]], &EvalConfig::default());
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn zero_gt_class_excluded_from_mean() {
        let g = gt(1, 0.5, 0.5, 0.2, 0.2);
        // a stray class-0 detection must not drag the mean down
        let stray = Detection { class_id: 0, score: 0.9, cx: 0.2, cy: 0.2, w: 0.1, h: 0.1 };
        let report = eval_map(&[vec![stray, det(1, 0.8, &g)]], &[vec![g]], &EvalConfig::default());
        assert_eq!(report.map, 1.0);
        assert!(report.skipped_classes.contains(&0));
    }

    #[test]
    fn each_gt_matches_once() {
        let g = gt(0, 0.5, 0.5, 0.2, 0.2);
        let d1 = det(0, 0.9, &g);
        let d2 = det(0, 0.8, &g); // duplicate becomes FP
        let report = eval_map(&[vec![d1, d2]], &[vec![g]], &EvalConfig::default());
        // PR: (1, 1), (1, 1/2) -> AP = 1.0
        assert!((report.map - 1.0).abs() < 1e-12);
    }
}
