//! Group spatial-attention distillation.
//!
//! The student imitates three things from a frozen teacher: per-group
//! spatial attention maps (channelwise sum of squared activations,
//! flattened and L2-normalized), temperature-softened class distributions,
//! and box predictions at candidate positions that overlap ground truth.

use thiserror::Error;

use crate::detectcore::HeadLayout;
use crate::engine::{Aux, EngineError, Result as EngResult, TapeOp};
use crate::netgraph::{Graph, NodeKind};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distill: {0}")]
    Invalid(String),
    #[error("non-finite {0} component in total loss")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Spatial attention of one feature map, flattened and unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub q: Vec<f64>,
    pub source_scale: (usize, usize),
    pub group: usize,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Per-group attention gains.
    pub betas: Vec<f64>,
    pub temperature: f64,
    pub iou_thresh: f64,
    pub soft_cls_weight: f64,
    pub soft_box_weight: f64,
    /// Optional per-group feature-map side length selecting the tap; when
    /// absent, the highest-resolution feature map inside each group.
    pub tap_scales: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            betas: vec![1000.0, 1000.0, 1000.0, 10000.0, 10000.0],
            temperature: 3.0,
            iou_thresh: 0.5,
            soft_cls_weight: 1.0,
            soft_box_weight: 1.0,
            tap_scales: None,
        }
    }
}

impl DistillConfig {
    /// Every distillation term disabled: training degenerates to plain
    /// fine-tuning on the hard loss.
    pub fn disabled(groups: usize) -> Self {
        DistillConfig {
            betas: vec![0.0; groups],
            temperature: 3.0,
            iou_thresh: 0.5,
            soft_cls_weight: 0.0,
            soft_box_weight: 0.0,
            tap_scales: None,
        }
    }

    pub fn all_disabled(&self) -> bool {
        self.betas.iter().all(|&b| b == 0.0)
            && self.soft_cls_weight == 0.0
            && self.soft_box_weight == 0.0
    }
}

const ZERO_NORM_GUARD: f64 = 1e-12;

/// Spatial attention of a single `[C, H, W]` feature map: per-position
/// channel sum of squares, flattened row-major, L2-normalized (or the zero
/// vector for an all-zero map).
pub fn attention_map(feature: &Tensor) -> Result<AttentionMap> {
    let [c, h, w] = feature.shape.as_slice() else {
        return Err(DistillError::Invalid(format!(
            "attention_map expects [C,H,W], got {:?}",
            feature.shape
        )));
    };
    let (c, h, w) = (*c, *h, *w);
    let plane = h * w;
    let mut v = vec![0.0f64; plane];
    for ch in 0..c {
        for (i, vi) in v.iter_mut().enumerate() {
            let a = feature.data[ch * plane + i];
            *vi += a * a;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm >= ZERO_NORM_GUARD {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(AttentionMap { q: v, source_scale: (h, w), group: 0 })
}

/// Weighted sum of attention-map distances per group.
pub fn attention_loss(
    teacher: &[AttentionMap],
    student: &[AttentionMap],
    betas: &[f64],
) -> Result<f64> {
    if teacher.len() != student.len() || teacher.len() != betas.len() {
        return Err(DistillError::Invalid(format!(
            "attention_loss arity mismatch: {} teacher, {} student, {} betas",
            teacher.len(),
            student.len(),
            betas.len()
        )));
    }
    let mut total = 0.0;
    for ((t, s), beta) in teacher.iter().zip(student).zip(betas) {
        if t.q.len() != s.q.len() {
            return Err(DistillError::Invalid(format!(
                "attention maps disagree on length: {} vs {}",
                t.q.len(),
                s.q.len()
            )));
        }
        let dist =
            t.q.iter().zip(&s.q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        total += beta * dist;
    }
    Ok(total)
}

/// Temperature-softened class imitation loss (KL form), averaged per prior
/// and summed over scales. Teacher and student tensors must agree in
/// shape.
pub fn soft_class_loss(
    teacher_heads: &[Tensor],
    student_heads: &[Tensor],
    anchors_per_scale: usize,
    classes: usize,
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(DistillError::Invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let op = SoftClsLoss { anchors_per_scale, classes, temperature };
    let mut inputs: Vec<&Tensor> = student_heads.iter().collect();
    inputs.extend(teacher_heads.iter());
    let (t, _) = op
        .forward(&inputs)
        .map_err(|e| DistillError::Invalid(e.to_string()))?;
    Ok(t.item())
}

/// Euclidean distance between teacher and student decoded boxes at the
/// matched candidate positions.
pub fn soft_box_loss(
    teacher_heads: &[Tensor],
    student_heads: &[Tensor],
    anchors: &crate::detectcore::Anchors,
    classes: usize,
    matches: &[Vec<(usize, usize, usize, usize)>],
) -> Result<f64> {
    let op = SoftBoxLoss {
        anchors: anchors.clone(),
        classes,
        matches: matches.to_vec(),
    };
    let mut inputs: Vec<&Tensor> = student_heads.iter().collect();
    inputs.extend(teacher_heads.iter());
    let (t, _) =
        op.forward(&inputs).map_err(|e| DistillError::Invalid(e.to_string()))?;
    Ok(t.item())
}

/// Total student loss: hard + soft (class and box) + attention.
pub fn total_distill_loss(hard: f64, soft_cls: f64, soft_box: f64, at: f64) -> Result<f64> {
    for (name, v) in
        [("hard", hard), ("soft_cls", soft_cls), ("soft_box", soft_box), ("attention", at)]
    {
        if !v.is_finite() {
            return Err(DistillError::NonFinite(match name {
                "hard" => "hard",
                "soft_cls" => "soft_cls",
                "soft_box" => "soft_box",
                _ => "attention",
            }));
        }
    }
    Ok(hard + soft_cls + soft_box + at)
}

/// Distill a pruned student against a frozen teacher. The teacher runs in
/// eval mode throughout and is never mutated; with every term disabled the
/// run is exactly plain fine-tuning.
pub fn distill_train(
    student: &mut crate::network::Network,
    teacher: &crate::network::Network,
    data: &crate::detectcore::Dataset,
    cfg: &DistillConfig,
    opts: &crate::trainer::TrainOpts,
) -> crate::trainer::Result<crate::trainer::FitResult> {
    crate::trainer::fit(student, data, opts, crate::trainer::FitMode::Distill { teacher, cfg })
}

/// Resolve per-group attention taps: the act node with the largest feature
/// map inside each group (or the explicitly configured scale), checked to
/// exist with identical geometry in both graphs.
pub fn resolve_taps(
    graph: &Graph,
    input_hw: (usize, usize),
    cfg: &DistillConfig,
) -> Result<Vec<(usize, usize)>> {
    let strides = graph
        .strides()
        .map_err(|e| DistillError::Invalid(e.to_string()))?;
    let groups = graph.group_count();
    let mut taps = Vec::new();
    for g in 1..=groups {
        let mut best: Option<(usize, usize)> = None; // (side, node id)
        for node in &graph.nodes {
            if node.group != Some(g) || !matches!(node.kind, NodeKind::Act { .. }) {
                continue;
            }
            let side = input_hw.0 / strides[node.id];
            match cfg.tap_scales.as_ref().and_then(|v| v.get(g - 1)) {
                Some(&want) => {
                    if side == want && best.is_none() {
                        best = Some((side, node.id));
                    }
                }
                None => {
                    if best.map_or(true, |(bs, _)| side > bs) {
                        best = Some((side, node.id));
                    }
                }
            }
        }
        if let Some((_, id)) = best {
            taps.push((g, id));
        } else if cfg.tap_scales.is_some() {
            return Err(DistillError::Invalid(format!(
                "no activation at the configured tap scale exists in group {g}"
            )));
        }
    }
    Ok(taps)
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

/// Batched attention map: `[N,C,H,W] -> [N, H*W]`, each row normalized.
pub struct AttentionMapOp;

impl TapeOp for AttentionMapOp {
    fn name(&self) -> &'static str {
        "attention_map"
    }

    fn forward(&self, inputs: &[&Tensor]) -> EngResult<(Tensor, Aux)> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().ok_or(EngineError::ShapeMismatch {
            op: "attention_map",
            detail: format!("expected NCHW, got {:?}", x.shape),
        })?;
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, plane]);
        let mut norms = vec![0.0f64; n];
        for img in 0..n {
            let row = &mut out.data[img * plane..(img + 1) * plane];
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for (i, r) in row.iter_mut().enumerate() {
                    let a = x.data[base + i];
                    *r += a * a;
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[img] = norm;
            if norm >= ZERO_NORM_GUARD {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok((out, Aux::Floats(vec![norms])))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let Some(dx) = input_grads[0].as_mut() else { return };
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().unwrap();
        let plane = h * w;
        let Aux::Floats(norms) = aux else { unreachable!() };
        for img in 0..n {
            let norm = norms[0][img];
            if norm < ZERO_NORM_GUARD {
                continue; // zero map: subgradient 0
            }
            let q = &output.data[img * plane..(img + 1) * plane];
            let g = &out_grad[img * plane..(img + 1) * plane];
            let q_dot_g: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
            // dL/dv_i = (g_i - q_i * (q . g)) / norm; dv_i/dx = 2x
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let dv = (g[i] - q[i] * q_dot_g) / norm;
                    dx[base + i] += 2.0 * x.data[base + i] * dv;
                }
            }
        }
    }
}

/// Mean over rows of the Euclidean distance between two `[N, D]` tensors.
pub struct RowDistance;

impl TapeOp for RowDistance {
    fn name(&self) -> &'static str {
        "row_distance"
    }

    fn forward(&self, inputs: &[&Tensor]) -> EngResult<(Tensor, Aux)> {
        let [a, b] = inputs else {
            return Err(EngineError::InvalidArg {
                op: "row_distance",
                detail: format!("expected 2 inputs, got {}", inputs.len()),
            });
        };
        if a.shape != b.shape || a.shape.len() != 2 {
            return Err(EngineError::ShapeMismatch {
                op: "row_distance",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let (n, d) = (a.shape[0], a.shape[1]);
        let mut dists = Vec::with_capacity(n);
        let mut total = 0.0;
        for i in 0..n {
            let s: f64 = (0..d)
                .map(|j| {
                    let diff = a.data[i * d + j] - b.data[i * d + j];
                    diff * diff
                })
                .sum();
            let dist = s.sqrt();
            dists.push(dist);
            total += dist;
        }
        Ok((Tensor::scalar(total / n as f64), Aux::Floats(vec![dists])))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, d) = (a.shape[0], a.shape[1]);
        let Aux::Floats(dists) = aux else { unreachable!() };
        let scale = out_grad[0] / n as f64;
        for i in 0..n {
            let dist = dists[0][i];
            if dist < ZERO_NORM_GUARD {
                continue;
            }
            for j in 0..d {
                let diff = (a.data[i * d + j] - b.data[i * d + j]) / dist * scale;
                if let Some(da) = input_grads[0].as_mut() {
                    da[i * d + j] += diff;
                }
                if let Some(db) = input_grads[1].as_mut() {
                    db[i * d + j] -= diff;
                }
            }
        }
    }
}

/// Class-distribution imitation over the three scales.
///
/// Inputs: `(s8, s16, s32, t8, t16, t32)`. Per scale, the KL divergence
/// between the teacher's temperature softmax and the student's temperature
/// log-softmax is summed over priors, divided by the prior count, and
/// averaged over the batch.
pub struct SoftClsLoss {
    pub anchors_per_scale: usize,
    pub classes: usize,
    pub temperature: f64,
}

impl SoftClsLoss {
    fn scale_term(
        &self,
        student: &Tensor,
        teacher: &Tensor,
        grad: Option<&mut Vec<f64>>,
    ) -> EngResult<f64> {
        let layout = HeadLayout::of(student, self.anchors_per_scale, self.classes)
            .map_err(|e| EngineError::ShapeMismatch { op: "soft_cls", detail: e.to_string() })?;
        if student.shape != teacher.shape {
            return Err(EngineError::ShapeMismatch {
                op: "soft_cls",
                detail: format!("student {:?} vs teacher {:?}", student.shape, teacher.shape),
            });
        }
        let n = student.shape[0];
        let nc = self.classes;
        let t = self.temperature;
        let k = (self.anchors_per_scale * layout.grid_h * layout.grid_w) as f64;
        if k == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        let mut grad = grad;
        let mut m = vec![0.0f64; nc];
        let mut p = vec![0.0f64; nc];
        for img in 0..n {
            for a in 0..self.anchors_per_scale {
                let base = a * (5 + nc);
                for gy in 0..layout.grid_h {
                    for gx in 0..layout.grid_w {
                        // teacher softmax at temperature
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..nc {
                            mx = mx.max(teacher.data[layout.at(img, base + 5 + c, gy, gx)] / t);
                        }
                        let mut denom = 0.0;
                        for c in 0..nc {
                            let e =
                                (teacher.data[layout.at(img, base + 5 + c, gy, gx)] / t - mx).exp();
                            m[c] = e;
                            denom += e;
                        }
                        for v in m.iter_mut() {
                            *v /= denom;
                        }
                        // student log-softmax at temperature
                        let mut sx = f64::NEG_INFINITY;
                        for c in 0..nc {
                            sx = sx.max(student.data[layout.at(img, base + 5 + c, gy, gx)] / t);
                        }
                        let mut sdenom = 0.0;
                        for c in 0..nc {
                            let e =
                                (student.data[layout.at(img, base + 5 + c, gy, gx)] / t - sx).exp();
                            p[c] = e;
                            sdenom += e;
                        }
                        let log_sdenom = sdenom.ln();
                        for v in p.iter_mut() {
                            *v /= sdenom;
                        }
                        let mut kl = 0.0;
                        for c in 0..nc {
                            let log_m = if m[c] > 0.0 { m[c].ln() } else { -745.0 };
                            let log_n =
                                student.data[layout.at(img, base + 5 + c, gy, gx)] / t - sx - log_sdenom;
                            kl += m[c] * (log_m - log_n);
                        }
                        total += kl / k;
                        if let Some(g) = grad.as_deref_mut() {
                            for c in 0..nc {
                                let idx = layout.at(img, base + 5 + c, gy, gx);
                                g[idx] += (p[c] - m[c]) / (t * k * n as f64);
                            }
                        }
                    }
                }
            }
        }
        Ok(total / n as f64)
    }
}

impl TapeOp for SoftClsLoss {
    fn name(&self) -> &'static str {
        "soft_cls_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> EngResult<(Tensor, Aux)> {
        if inputs.len() != 6 {
            return Err(EngineError::InvalidArg {
                op: "soft_cls_loss",
                detail: format!("expected 6 head tensors, got {}", inputs.len()),
            });
        }
        let mut total = 0.0;
        for s in 0..3 {
            total += self.scale_term(inputs[s], inputs[s + 3], None)?;
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
        for s in 0..3 {
            if let Some(g) = input_grads[s].as_mut() {
                let mut local = vec![0.0; g.len()];
                self.scale_term(inputs[s], inputs[s + 3], Some(&mut local))
                    .expect("shape checked in forward");
                for (gv, lv) in g.iter_mut().zip(&local) {
                    *gv += out_grad[0] * lv;
                }
            }
        }
    }
}

/// Box imitation at IoU-gated candidate positions.
///
/// Inputs: `(s8, s16, s32, t8, t16, t32)`. For every match `(img, anchor,
/// gy, gx)` the decoded `(x, y, w, h)` of student and teacher are compared
/// by Euclidean norm; the sum is averaged over the batch.
pub struct SoftBoxLoss {
    pub anchors: crate::detectcore::Anchors,
    pub classes: usize,
    pub matches: Vec<Vec<(usize, usize, usize, usize)>>,
}

impl SoftBoxLoss {
    #[allow(clippy::type_complexity)]
    fn decode(
        head: &Tensor,
        layout: &HeadLayout,
        anchors: &[(f64, f64)],
        m: (usize, usize, usize, usize),
    ) -> ((f64, f64, f64, f64), (usize, usize, usize, usize), (f64, f64)) {
        let (img, a, gy, gx) = m;
        let base = a * (5 + layout.classes);
        let ix = layout.at(img, base, gy, gx);
        let iy = layout.at(img, base + 1, gy, gx);
        let iw = layout.at(img, base + 2, gy, gx);
        let ih = layout.at(img, base + 3, gy, gx);
        let (aw, ah) = anchors[a];
        let sx = sigmoid(head.data[ix]);
        let sy = sigmoid(head.data[iy]);
        let bw = aw * head.data[iw].clamp(-10.0, 10.0).exp();
        let bh = ah * head.data[ih].clamp(-10.0, 10.0).exp();
        (
            (
                (sx + gx as f64) / layout.grid_w as f64,
                (sy + gy as f64) / layout.grid_h as f64,
                bw,
                bh,
            ),
            (ix, iy, iw, ih),
            (sx, sy),
        )
    }

    fn scale_term(
        &self,
        scale: usize,
        student: &Tensor,
        teacher: &Tensor,
        grad: Option<&mut Vec<f64>>,
    ) -> EngResult<f64> {
        let a_n = self.anchors.per_scale[scale].len();
        let layout = HeadLayout::of(student, a_n, self.classes)
            .map_err(|e| EngineError::ShapeMismatch { op: "soft_box", detail: e.to_string() })?;
        let n = student.shape[0] as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for &m in &self.matches[scale] {
            let (ps, idx, (sx, sy)) =
                Self::decode(student, &layout, &self.anchors.per_scale[scale], m);
            let (pt, _, _) = Self::decode(teacher, &layout, &self.anchors.per_scale[scale], m);
            let d = (ps.0 - pt.0, ps.1 - pt.1, ps.2 - pt.2, ps.3 - pt.3);
            let dist = (d.0 * d.0 + d.1 * d.1 + d.2 * d.2 + d.3 * d.3).sqrt();
            total += dist / n;
            if let Some(g) = grad.as_deref_mut() {
                if dist >= ZERO_NORM_GUARD {
                    let k = 1.0 / (dist * n);
                    g[idx.0] += k * d.0 * sx * (1.0 - sx) / layout.grid_w as f64;
                    g[idx.1] += k * d.1 * sy * (1.0 - sy) / layout.grid_h as f64;
                    g[idx.2] += k * d.2 * ps.2; // d(bw)/d(tw) = bw
                    g[idx.3] += k * d.3 * ps.3;
                }
            }
        }
        Ok(total)
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

impl TapeOp for SoftBoxLoss {
    fn name(&self) -> &'static str {
        "soft_box_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> EngResult<(Tensor, Aux)> {
        if inputs.len() != 6 {
            return Err(EngineError::InvalidArg {
                op: "soft_box_loss",
                detail: format!("expected 6 head tensors, got {}", inputs.len()),
            });
        }
        if self.matches.len() != 3 {
            return Err(EngineError::InvalidArg {
                op: "soft_box_loss",
                detail: format!("expected 3 match lists, got {}", self.matches.len()),
            });
        }
        let mut total = 0.0;
        for s in 0..3 {
            total += self.scale_term(s, inputs[s], inputs[s + 3], None)?;
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
        for s in 0..3 {
            if let Some(g) = input_grads[s].as_mut() {
                let mut local = vec![0.0; g.len()];
                self.scale_term(s, inputs[s], inputs[s + 3], Some(&mut local))
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
    use crate::detectcore::Anchors;
    use crate::engine::Tape;
    use crate::gradcheck::{check_grads, FD_STEP, FD_TOL};

    #[test]
    fn attention_map_two_channel_example() {
        // A1 = [[1,0],[0,1]], A2 = [[0,1],[1,0]] -> F = ones -> q = 0.5s
        let f = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let m = attention_map(&f).unwrap();
        for v in &m.q {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_map_zero_and_spike() {
        let zero = Tensor::zeros(vec![3, 2, 2]);
        assert!(attention_map(&zero).unwrap().q.iter().all(|&v| v == 0.0));

        let mut spike = Tensor::zeros(vec![1, 2, 2]);
        spike.data[3] = 2.5;
        let q = attention_map(&spike).unwrap().q;
        assert_eq!(q, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_map_invariances() {
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let f = Tensor::new(vec![3, 4, 4], data.clone());
        let base = attention_map(&f).unwrap();

        // channel permutation: rotate channels
        let mut rot = data[16..48].to_vec();
        rot.extend_from_slice(&data[0..16]);
        let fp = Tensor::new(vec![3, 4, 4], rot);
        let perm = attention_map(&fp).unwrap();
        for (a, b) in base.q.iter().zip(&perm.q) {
            assert!((a - b).abs() < 1e-12);
        }

        // scaling invariance for c != 0
        let scaled = Tensor::new(vec![3, 4, 4], data.iter().map(|v| v * -3.7).collect());
        let sc = attention_map(&scaled).unwrap();
        for (a, b) in base.q.iter().zip(&sc.q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_loss_examples() {
        let t = AttentionMap { q: vec![1.0, 0.0], source_scale: (1, 2), group: 1 };
        let s = AttentionMap { q: vec![0.0, 1.0], source_scale: (1, 2), group: 1 };
        // identical maps
        assert_eq!(attention_loss(&[t.clone()], &[t.clone()], &[1000.0]).unwrap(), 0.0);
        // unit vectors at right angles: distance sqrt(2)
        let l = attention_loss(&[t.clone()], &[s.clone()], &[1000.0]).unwrap();
        assert!((l - 1000.0 * 2.0f64.sqrt()).abs() < 1e-9);
        // disabled gains
        assert_eq!(attention_loss(&[t], &[s], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn attention_loss_length_mismatch_rejected() {
        let t = AttentionMap { q: vec![1.0, 0.0], source_scale: (1, 2), group: 1 };
        let s = AttentionMap { q: vec![0.0, 1.0, 0.0], source_scale: (1, 3), group: 1 };
        assert!(attention_loss(&[t], &[s], &[1.0]).is_err());
    }

    fn anchors1() -> Anchors {
        Anchors {
            per_scale: [vec![(0.2, 0.25)], vec![(0.4, 0.35)], vec![(0.6, 0.7)]],
        }
    }

    fn heads_pair(fill_s: f64, fill_t: f64, classes: usize) -> (Vec<Tensor>, Vec<Tensor>) {
        let mk = |fill: f64| -> Vec<Tensor> {
            [(4usize, 4usize), (2, 2), (1, 1)]
                .iter()
                .map(|&(h, w)| Tensor::filled(vec![1, 5 + classes, h, w], fill))
                .collect()
        };
        (mk(fill_s), mk(fill_t))
    }

    #[test]
    fn soft_class_identical_logits_zero() {
        let (s, t) = heads_pair(0.37, 0.37, 3);
        let l = soft_class_loss(&t, &s, 1, 3, 3.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn soft_class_two_class_hand_value() {
        // k=1 prior, 2 classes, T=1, teacher [1,0], student [0,1] -> 0.4622
        let classes = 2;
        let mut s = Tensor::zeros(vec![1, 7, 1, 1]);
        let mut t = Tensor::zeros(vec![1, 7, 1, 1]);
        t.data[5] = 1.0;
        t.data[6] = 0.0;
        s.data[5] = 0.0;
        s.data[6] = 1.0;
        let pad = Tensor::zeros(vec![1, 7, 1, 1]);
        // single scale with one cell; other scales identical so they add 0
        let l = soft_class_loss(
            &[t, pad.clone(), pad.clone()],
            &[s, pad.clone(), pad],
            1,
            classes,
            1.0,
        )
        .unwrap();
        assert!((l - 0.4622).abs() < 1e-4, "got {l}");
    }

    #[test]
    fn soft_class_high_temperature_flattens() {
        let classes = 3;
        let mut s_heads = Vec::new();
        let mut t_heads = Vec::new();
        let mut v = 0.71f64;
        for &(h, w) in &[(4usize, 4usize), (2, 2), (1, 1)] {
            let mut s = Tensor::zeros(vec![1, 8, h, w]);
            let mut t = Tensor::zeros(vec![1, 8, h, w]);
            for x in s.data.iter_mut().chain(t.data.iter_mut()) {
                v = (v * 1.618 + 0.31).rem_euclid(4.0) - 2.0;
                *x = v;
            }
            s_heads.push(s);
            t_heads.push(t);
        }
        let hot = soft_class_loss(&t_heads, &s_heads, 1, classes, 1.0).unwrap();
        let cold = soft_class_loss(&t_heads, &s_heads, 1, classes, 1000.0).unwrap();
        assert!(cold < hot, "T=1000 gives {cold}, T=1 gives {hot}");
        assert!(hot >= 0.0 && cold >= 0.0);
    }

    #[test]
    fn soft_box_examples() {
        let classes = 2;
        let (mut s, mut t) = heads_pair(0.0, 0.0, classes);
        // identical boxes -> 0 on any match set
        let matches = vec![vec![(0usize, 0usize, 1usize, 1usize)], vec![], vec![]];
        let l = soft_box_loss(&t, &s, &anchors1(), classes, &matches).unwrap();
        assert_eq!(l, 0.0);

        // teacher (0.5,0.5,0.2,0.2) student (0.5,0.5,0.2,0.4): distance 0.2
        // grid 1x1 cell (scale 2), sigmoid(0)=0.5 centers both at 0.5
        let layout = HeadLayout::of(&s[2], 1, classes).unwrap();
        // anchor at scale 2 is (0.6, 0.7); pick tw/th so sizes come out right
        t[2].data[layout.at(0, 2, 0, 0)] = (0.2f64 / 0.6).ln();
        t[2].data[layout.at(0, 3, 0, 0)] = (0.2f64 / 0.7).ln();
        s[2].data[layout.at(0, 2, 0, 0)] = (0.2f64 / 0.6).ln();
        s[2].data[layout.at(0, 3, 0, 0)] = (0.4f64 / 0.7).ln();
        let matches = vec![vec![], vec![], vec![(0, 0, 0, 0)]];
        let l = soft_box_loss(&t, &s, &anchors1(), classes, &matches).unwrap();
        assert!((l - 0.2).abs() < 1e-12, "got {l}");

        // empty match set -> 0
        let l0 = soft_box_loss(&t, &s, &anchors1(), classes, &[vec![], vec![], vec![]]).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn total_loss_additivity_and_nan_abort() {
        assert_eq!(total_distill_loss(1.0, 2.0, 3.0, 4.0).unwrap(), 10.0);
        assert_eq!(total_distill_loss(1.5, 0.0, 0.0, 0.0).unwrap(), 1.5);
        let err = total_distill_loss(1.0, f64::NAN, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("soft_cls"));
    }

    #[test]
    fn attention_op_gradient_matches_fd() {
        let data: Vec<f64> =
            (0..2 * 3 * 3 * 3).map(|i| 0.2 + ((i * 29 % 23) as f64) / 10.0).collect();
        let x = Tensor::new(vec![2, 3, 3, 3], data);
        let target = {
            let mut t = Tensor::zeros(vec![2, 9]);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 13 % 7) as f64) / 7.0;
            }
            t
        };
        let res = check_grads(&[x], FD_STEP, |tape, ids| {
            let q = tape.apply(AttentionMapOp, &[ids[0]]).unwrap();
            let t = tape.constant(target.clone());
            tape.apply(RowDistance, &[q, t]).unwrap()
        });
        assert!(res.max_rel_err < FD_TOL, "rel err {}", res.max_rel_err);
    }

    #[test]
    fn soft_losses_gradient_matches_fd() {
        let classes = 2;
        let mut leaves = Vec::new();
        let mut v = 0.43f64;
        for &(h, w) in &[(2usize, 2usize), (2, 2), (1, 1)] {
            let mut t = Tensor::zeros(vec![1, 7, h, w]);
            for x in t.data.iter_mut() {
                v = (v * 1.7 + 0.47).rem_euclid(2.0) - 1.0;
                *x = v;
            }
            leaves.push(t);
        }
        let teacher: Vec<Tensor> = leaves
            .iter()
            .map(|t| {
                let mut u = t.clone();
                for x in u.data.iter_mut() {
                    *x = (*x * 0.7 + 0.1).sin();
                }
                u
            })
            .collect();

        let res = check_grads(&leaves, FD_STEP, |tape, ids| {
            let t_ids: Vec<_> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
            let mut all = ids.to_vec();
            all.extend(t_ids);
            tape.apply(
                SoftClsLoss { anchors_per_scale: 1, classes, temperature: 2.5 },
                &all,
            )
            .unwrap()
        });
        assert!(res.max_rel_err < FD_TOL, "soft_cls rel err {}", res.max_rel_err);

        let matches = vec![vec![(0, 0, 1, 0)], vec![(0, 0, 0, 1)], vec![(0, 0, 0, 0)]];
        let res = check_grads(&leaves, FD_STEP, |tape, ids| {
            let t_ids: Vec<_> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
            let mut all = ids.to_vec();
            all.extend(t_ids);
            tape.apply(
                SoftBoxLoss { anchors: anchors1(), classes, matches: matches.clone() },
                &all,
            )
            .unwrap()
        });
        assert!(res.max_rel_err < FD_TOL, "soft_box rel err {}", res.max_rel_err);
    }

    #[test]
    fn taps_pick_highest_resolution_per_group() {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny-det.graph");
        let mut graph =
            crate::netgraph::parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap();
        crate::netgraph::assign_groups(&mut graph).unwrap();
        let cfg = DistillConfig::default();
        let taps = resolve_taps(&graph, (96, 96), &cfg).unwrap();
        assert_eq!(taps.len(), 5);
        let strides = graph.strides().unwrap();
        // group 1 taps the stride-2 feature (48x48); group 4 the 12x12
        assert_eq!(strides[taps[0].1], 2);
        assert_eq!(strides[taps[3].1], 8);
        assert_eq!(strides[taps[4].1], 8);
    }
}
