//! Ground-truth detection loss.
//!
//! Each ground-truth box is assigned to the single best shape-IoU anchor
//! across all scales; the loss is objectness binary cross-entropy over
//! every position, class cross-entropy on positives, and squared error on
//! the four box components of positives.

use std::collections::HashMap;

use super::{shape_iou, Anchors, BoxLabel, HeadLayout};
use crate::engine::{Aux, EngineError, Result as EngResult, TapeOp};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct HardLossCfg {
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
}

impl Default for HardLossCfg {
    fn default() -> Self {
        HardLossCfg { lambda_obj: 2.0, lambda_noobj: 0.5, lambda_cls: 1.5, lambda_box: 4.0 }
    }
}

/// One positive cell: where the assigned anchor sits and what it must
/// predict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosTarget {
    pub img: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    /// sigmoid(tx) target: sub-cell x offset in [0, 1)
    pub off_x: f64,
    pub off_y: f64,
    /// raw tw/th target: ln(size / anchor size)
    pub tw: f64,
    pub th: f64,
    pub class: usize,
}

/// Assign each ground-truth box to its best anchor (scale, index) and
/// translate it into raw-prediction targets. First-come-first-served on
/// cell collisions keeps assignment deterministic.
pub fn assign_targets(
    ground_truth: &[Vec<BoxLabel>],
    anchors: &Anchors,
    grids: &[(usize, usize); 3],
) -> [Vec<PosTarget>; 3] {
    let flat = anchors.flat();
    let mut out: [Vec<PosTarget>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut taken: HashMap<(usize, usize, usize, usize, usize), ()> = HashMap::new();
    for (img, labels) in ground_truth.iter().enumerate() {
        for gt in labels {
            let (scale, anchor, aw, ah) = flat
                .iter()
                .copied()
                .max_by(|a, b| {
                    shape_iou(gt.w, gt.h, a.2, a.3)
                        .partial_cmp(&shape_iou(gt.w, gt.h, b.2, b.3))
                        .unwrap()
                })
                .unwrap();
            let (gh, gw) = grids[scale];
            let fx = (gt.cx * gw as f64).min(gw as f64 - 1e-9);
            let fy = (gt.cy * gh as f64).min(gh as f64 - 1e-9);
            let (gx, gy) = (fx.floor() as usize, fy.floor() as usize);
            if taken.insert((img, scale, anchor, gy, gx), ()).is_some() {
                continue; // cell already owns a target
            }
            out[scale].push(PosTarget {
                img,
                anchor,
                gy,
                gx,
                off_x: fx - gx as f64,
                off_y: fy - gy as f64,
                tw: (gt.w / aw).ln(),
                th: (gt.h / ah).ln(),
                class: gt.class_id,
            });
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable BCE-with-logits and its derivative w.r.t. the logit.
fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// Fused detection loss over the three raw head tensors.
///
/// Inputs: `(head_s8, head_s16, head_s32)`; output: scalar, averaged over
/// the batch.
pub struct HardLoss {
    pub cfg: HardLossCfg,
    pub anchors_per_scale: usize,
    pub classes: usize,
    pub targets: [Vec<PosTarget>; 3],
}

impl HardLoss {
    fn scale_loss(
        &self,
        head: &Tensor,
        targets: &[PosTarget],
        grad: Option<&mut Vec<f64>>,
    ) -> EngResult<f64> {
        let layout = HeadLayout::of(head, self.anchors_per_scale, self.classes).map_err(|e| {
            EngineError::ShapeMismatch { op: "hard_loss", detail: e.to_string() }
        })?;
        let n = head.shape[0];
        let nc = self.classes;
        let mut pos: HashMap<(usize, usize, usize, usize), &PosTarget> = HashMap::new();
        for t in targets {
            pos.insert((t.img, t.anchor, t.gy, t.gx), t);
        }
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad = grad;
        for img in 0..n {
            for a in 0..self.anchors_per_scale {
                let base = a * (5 + nc);
                for gy in 0..layout.grid_h {
                    for gx in 0..layout.grid_w {
                        let target = pos.get(&(img, a, gy, gx));
                        let obj_idx = layout.at(img, base + 4, gy, gx);
                        let (is_pos, w_obj) = match target {
                            Some(_) => (1.0, self.cfg.lambda_obj),
                            None => (0.0, self.cfg.lambda_noobj),
                        };
                        let (obj_loss, obj_d) = bce_with_logits(head.data[obj_idx], is_pos);
                        loss += w_obj * obj_loss * inv_n;
                        if let Some(g) = grad.as_deref_mut() {
                            g[obj_idx] += w_obj * obj_d * inv_n;
                        }
                        let Some(t) = target else { continue };

                        // box terms: sigmoid offsets and raw log sizes
                        let ix = layout.at(img, base, gy, gx);
                        let iy = layout.at(img, base + 1, gy, gx);
                        let iw = layout.at(img, base + 2, gy, gx);
                        let ih = layout.at(img, base + 3, gy, gx);
                        let sx = sigmoid(head.data[ix]);
                        let sy = sigmoid(head.data[iy]);
                        let dx = sx - t.off_x;
                        let dy = sy - t.off_y;
                        let dw = head.data[iw] - t.tw;
                        let dh = head.data[ih] - t.th;
                        loss += self.cfg.lambda_box
                            * (dx * dx + dy * dy + dw * dw + dh * dh)
                            * inv_n;
                        if let Some(g) = grad.as_deref_mut() {
                            let k = 2.0 * self.cfg.lambda_box * inv_n;
                            g[ix] += k * dx * sx * (1.0 - sx);
                            g[iy] += k * dy * sy * (1.0 - sy);
                            g[iw] += k * dw;
                            g[ih] += k * dh;
                        }

                        // class cross-entropy over the softmax
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..nc {
                            mx = mx.max(head.data[layout.at(img, base + 5 + c, gy, gx)]);
                        }
                        let mut denom = 0.0;
                        for c in 0..nc {
                            denom += (head.data[layout.at(img, base + 5 + c, gy, gx)] - mx).exp();
                        }
                        let z_t = head.data[layout.at(img, base + 5 + t.class, gy, gx)];
                        loss += self.cfg.lambda_cls * (denom.ln() + mx - z_t) * inv_n;
                        if let Some(g) = grad.as_deref_mut() {
                            for c in 0..nc {
                                let idx = layout.at(img, base + 5 + c, gy, gx);
                                let p = (head.data[idx] - mx).exp() / denom;
                                let onehot = if c == t.class { 1.0 } else { 0.0 };
                                g[idx] += self.cfg.lambda_cls * (p - onehot) * inv_n;
                            }
                        }
                    }
                }
            }
        }
        Ok(loss)
    }
}

impl TapeOp for HardLoss {
    fn name(&self) -> &'static str {
        "hard_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> EngResult<(Tensor, Aux)> {
        if inputs.len() != 3 {
            return Err(EngineError::InvalidArg {
                op: "hard_loss",
                detail: format!("expected 3 head tensors, got {}", inputs.len()),
            });
        }
        let mut total = 0.0;
        for (s, head) in inputs.iter().enumerate() {
            total += self.scale_loss(head, &self.targets[s], None)?;
        }
        Ok((Tensor::scalar(total), Aux::None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        for (s, head) in inputs.iter().enumerate() {
            if let Some(g) = input_grads[s].as_mut() {
                let mut local = vec![0.0; g.len()];
                self.scale_loss(head, &self.targets[s], Some(&mut local))
                    .expect("shape checked in forward");
                for (gv, lv) in g.iter_mut().zip(&local) {
                    *gv += out_grad[0] * lv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::gradcheck::{check_grads, FD_STEP, FD_TOL};

    fn anchors2() -> Anchors {
        Anchors {
            per_scale: [
                vec![(0.1, 0.12), (0.18, 0.2)],
                vec![(0.3, 0.28), (0.42, 0.36)],
                vec![(0.55, 0.6), (0.8, 0.75)],
            ],
        }
    }

    fn grids() -> [(usize, usize); 3] {
        [(8, 8), (4, 4), (2, 2)]
    }

    fn heads(n: usize, classes: usize, fill: f64) -> Vec<Tensor> {
        [(8, 8), (4, 4), (2, 2)]
            .iter()
            .map(|&(h, w)| Tensor::filled(vec![n, 2 * (5 + classes), h, w], fill))
            .collect()
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        let classes = 3;
        let gts = vec![vec![BoxLabel { class_id: 1, cx: 0.31, cy: 0.47, w: 0.32, h: 0.3 }]];
        let anchors = anchors2();
        let targets = assign_targets(&gts, &anchors, &grids());
        let mut h = heads(1, classes, 0.0);
        // negatives everywhere
        for t in h.iter_mut() {
            let c = t.shape[1];
            let plane = t.shape[2] * t.shape[3];
            for a in 0..2 {
                let obj_ch = a * (5 + classes) + 4;
                for i in 0..plane {
                    t.data[obj_ch * plane + i] = -40.0;
                }
                let _ = c;
            }
        }
        // write the exact positive back in
        for (s, list) in targets.iter().enumerate() {
            let layout = HeadLayout::of(&h[s], 2, classes).unwrap();
            for t in list {
                let base = t.anchor * (5 + classes);
                let logit = |p: f64| (p / (1.0 - p)).ln();
                h[s].data[layout.at(t.img, base, t.gy, t.gx)] = logit(t.off_x.clamp(1e-6, 1.0 - 1e-6));
                h[s].data[layout.at(t.img, base + 1, t.gy, t.gx)] =
                    logit(t.off_y.clamp(1e-6, 1.0 - 1e-6));
                h[s].data[layout.at(t.img, base + 2, t.gy, t.gx)] = t.tw;
                h[s].data[layout.at(t.img, base + 3, t.gy, t.gx)] = t.th;
                h[s].data[layout.at(t.img, base + 4, t.gy, t.gx)] = 40.0;
                for c in 0..classes {
                    h[s].data[layout.at(t.img, base + 5 + c, t.gy, t.gx)] =
                        if c == t.class { 40.0 } else { -40.0 };
                }
            }
        }
        let op = HardLoss { cfg: HardLossCfg::default(), anchors_per_scale: 2, classes, targets };
        let mut tape = Tape::new();
        let ids: Vec<_> = h.into_iter().map(|t| tape.constant(t)).collect();
        let loss = tape.apply(op, &ids).unwrap();
        assert!(tape.value(loss).item() < 1e-6, "loss {}", tape.value(loss).item());
    }

    #[test]
    fn empty_image_reduces_to_negative_objectness() {
        let classes = 2;
        let targets = assign_targets(&[vec![]], &anchors2(), &grids());
        assert!(targets.iter().all(|t| t.is_empty()));
        let h = heads(1, classes, 0.3);
        let op = HardLoss {
            cfg: HardLossCfg::default(),
            anchors_per_scale: 2,
            classes,
            targets,
        };
        let mut tape = Tape::new();
        let ids: Vec<_> = h.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = tape.apply(op, &ids).unwrap();
        // analytic: lambda_noobj * bce(0.3, 0) per position
        let cells: usize = [(8, 8), (4, 4), (2, 2)].iter().map(|(a, b)| a * b).sum::<usize>() * 2;
        let per = 0.3f64.max(0.0) + (-(0.3f64).abs()).exp().ln_1p();
        let expect = 0.5 * per * cells as f64;
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let classes = 2;
        let gts = vec![
            vec![BoxLabel { class_id: 0, cx: 0.3, cy: 0.42, w: 0.3, h: 0.28 }],
            vec![BoxLabel { class_id: 1, cx: 0.7, cy: 0.6, w: 0.12, h: 0.1 }],
        ];
        let anchors = anchors2();
        // 2-cell-per-side fixture keeps finite differences fast
        let grids = [(2, 2), (2, 2), (2, 2)];
        let targets = assign_targets(&gts, &anchors, &grids);
        let mut leaves: Vec<Tensor> = Vec::new();
        let mut v = 0.13f64;
        for _ in 0..3 {
            let mut t = Tensor::zeros(vec![2, 2 * (5 + classes), 2, 2]);
            for x in t.data.iter_mut() {
                v = (v * 1.37 + 0.21).rem_euclid(2.0) - 1.0;
                *x = v;
            }
            leaves.push(t);
        }
        let res = check_grads(&leaves, FD_STEP, |tape, ids| {
            let op = HardLoss {
                cfg: HardLossCfg::default(),
                anchors_per_scale: 2,
                classes,
                targets: targets.clone(),
            };
            tape.apply(op, ids).unwrap()
        });
        assert!(res.max_rel_err < FD_TOL, "rel err {}", res.max_rel_err);
    }
}
