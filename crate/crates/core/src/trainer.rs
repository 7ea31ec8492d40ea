//! The one training loop behind plain training, sparse training,
//! fine-tuning, and distillation.
//!
//! All four stages share this code: they differ only in which extra loss
//! terms join the hard detection loss. Batch order comes from a named
//! substream of the master seed, so two runs with the same seed, stream
//! and configuration produce bit-identical weights regardless of mode
//! flags that evaluate to no-ops.

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::detectcore::{
    assign_targets, decode_predictions, eval_map, match_candidates, Dataset, DetectError,
    EvalConfig, HardLoss, HardLossCfg,
};
use crate::distill::{
    resolve_taps, AttentionMapOp, DistillConfig, DistillError, RowDistance, SoftBoxLoss,
    SoftClsLoss,
};
use crate::engine::{cosine_lr, EngineError, Sgd, SgdConfig, Tape, TensorId, WeightedSum};
use crate::netgraph::{NodeKind, ParamRole};
use crate::network::{Network, RunError};
use crate::rng::stream;
use crate::sparsetrain::{
    histogram_of, mean_abs_gamma, schedule_rates, sparse_penalty, SparseError, SparseSchedule,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("training diverged at epoch {epoch} step {step}: non-finite {component}")]
    Diverged { epoch: usize, step: usize, component: String },
    #[error("training needs a non-empty training split")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Substream family for batch order ("train" for base/sparse stages,
    /// "recover" for fine-tune/distill stages).
    pub stream_name: String,
    pub hard_cfg: HardLossCfg,
    /// Confidence threshold for validation decoding.
    pub conf_thresh: f64,
    /// Record validation mAP every k epochs (0: only at the end).
    pub eval_map_every: usize,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
}

impl TrainOpts {
    pub fn new(epochs: usize, batch_size: usize, lr0: f64, seed: u64, stream_name: &str) -> Self {
        TrainOpts {
            epochs,
            batch_size,
            sgd: SgdConfig::new(lr0),
            seed,
            stream_name: stream_name.to_string(),
            hard_cfg: HardLossCfg::default(),
            conf_thresh: 0.1,
            eval_map_every: 0,
            grad_clip: 10.0,
        }
    }
}

pub enum FitMode<'a> {
    /// Hard detection loss only.
    Standard,
    /// Hard loss plus the L1 gamma penalty on the given schedule.
    Sparse(&'a SparseSchedule),
    /// Hard loss plus attention and soft-target terms from a frozen
    /// teacher; with every term disabled this is plain fine-tuning.
    Distill { teacher: &'a Network, cfg: &'a DistillConfig },
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-step total loss.
    pub loss: f64,
    pub hard: f64,
    pub penalty: f64,
    pub soft_cls: f64,
    pub soft_box: f64,
    pub attention: f64,
    pub mean_abs_gamma: f64,
    pub gamma_hist: Vec<(f64, f64, usize)>,
    pub val_map: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochLog>,
    pub val_hard: f64,
    pub val_map: f64,
}

fn stack_images(images: &[&Tensor]) -> Tensor {
    let per = images[0].numel();
    let mut data = Vec::with_capacity(per * images.len());
    for img in images {
        data.extend_from_slice(&img.data);
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&images[0].shape);
    Tensor::new(shape, data)
}

/// Gamma values in canonical order (bn node id ascending, channel
/// ascending), as one flat vector.
fn flat_gammas(net: &Network) -> Vec<f64> {
    net.store.all_gammas().iter().flat_map(|(_, g)| g.iter().copied()).collect()
}

/// Head grid sizes for the current dataset resolution.
fn head_grids(net: &Network, image_size: usize) -> Result<[(usize, usize); 3]> {
    let strides = net.graph.strides().map_err(RunError::Graph)?;
    let mut grids = [(0, 0); 3];
    for (i, &h) in net.graph.heads.iter().enumerate() {
        let s = strides[net.graph.nodes[h].inputs[0]];
        grids[i] = (image_size / s, image_size / s);
    }
    Ok(grids)
}

fn head_meta(net: &Network) -> (usize, usize) {
    for n in &net.graph.nodes {
        if let NodeKind::DetectHead { anchors, classes, .. } = n.kind {
            return (anchors, classes);
        }
    }
    unreachable!("validated graphs carry three detect heads")
}

/// Train `net` in place; returns the per-epoch history and final
/// validation metrics.
pub fn fit(net: &mut Network, data: &Dataset, opts: &TrainOpts, mode: FitMode) -> Result<FitResult> {
    if data.train_images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let image_size = data.cfg.image_size;
    let grids = head_grids(net, image_size)?;
    let (anchors_per_scale, classes) = head_meta(net);
    let mut sgd = Sgd::new(opts.sgd);
    let mut batch_rng = stream(opts.seed, &format!("{}.batches", opts.stream_name));

    // sparse: gamma snapshot frozen at the switch epoch
    let mut gamma_snapshot: Option<Vec<f64>> = None;

    // distill: resolve taps once (teacher and student share node ids)
    let taps: Vec<(usize, usize)> = match &mode {
        FitMode::Distill { cfg, .. } if !cfg.all_disabled() => {
            resolve_taps(&net.graph, (image_size, image_size), cfg)?
        }
        _ => Vec::new(),
    };

    let mut history = Vec::with_capacity(opts.epochs);
    let n_train = data.train_images.len();

    for epoch in 0..opts.epochs {
        let lr = cosine_lr(&opts.sgd, epoch, opts.epochs);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut batch_rng);

        // epoch-level sparse rates
        let rates = match &mode {
            FitMode::Sparse(sched) => {
                let switch = sched.switch_epoch(opts.epochs);
                if epoch >= switch && gamma_snapshot.is_none() {
                    gamma_snapshot = Some(flat_gammas(net));
                }
                let gammas_now;
                let gammas_ref: &[f64] = match &gamma_snapshot {
                    Some(s) => s,
                    None => {
                        gammas_now = flat_gammas(net);
                        &gammas_now
                    }
                };
                Some(schedule_rates(sched, epoch, opts.epochs, gammas_ref)?)
            }
            _ => None,
        };

        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0); // total, hard, penalty, soft_cls, soft_box, at
        let mut steps = 0usize;

        for batch in order.chunks(opts.batch_size) {
            let images = stack_images(&batch.iter().map(|&i| &data.train_images[i]).collect::<Vec<_>>());
            let gts: Vec<Vec<crate::detectcore::BoxLabel>> =
                batch.iter().map(|&i| data.train_labels[i].clone()).collect();
            let targets = assign_targets(&gts, &data.anchors, &grids);

            let mut tape = Tape::new();
            let fw = net.forward(&mut tape, images.clone(), true, true)?;
            let hard_id = tape.apply(
                HardLoss {
                    cfg: opts.hard_cfg,
                    anchors_per_scale,
                    classes,
                    targets,
                },
                &fw.heads,
            )?;

            let mut terms: Vec<(TensorId, f64, &'static str)> = vec![(hard_id, 1.0, "hard")];

            if let FitMode::Distill { teacher, cfg } = &mode {
                if !cfg.all_disabled() {
                    let t_fw = teacher.forward(&mut tape, images, false, false)?;
                    if cfg.betas.iter().any(|&b| b > 0.0) {
                        for &(group, tap_node) in &taps {
                            let beta = cfg.betas.get(group - 1).copied().unwrap_or(0.0);
                            if beta == 0.0 {
                                continue;
                            }
                            let qs = tape.apply(AttentionMapOp, &[fw.node_out[tap_node]])?;
                            let qt = tape.apply(AttentionMapOp, &[t_fw.node_out[tap_node]])?;
                            let d = tape.apply(RowDistance, &[qs, qt])?;
                            terms.push((d, beta, "attention"));
                        }
                    }
                    let mut all_heads: Vec<TensorId> = fw.heads.clone();
                    all_heads.extend(t_fw.heads.iter().copied());
                    if cfg.soft_cls_weight > 0.0 {
                        let sc = tape.apply(
                            SoftClsLoss {
                                anchors_per_scale,
                                classes,
                                temperature: cfg.temperature,
                            },
                            &all_heads,
                        )?;
                        terms.push((sc, cfg.soft_cls_weight, "soft_cls"));
                    }
                    if cfg.soft_box_weight > 0.0 {
                        let teacher_heads: Vec<Tensor> =
                            t_fw.heads.iter().map(|&h| tape.value(h).clone()).collect();
                        let matches = match_candidates(
                            &teacher_heads,
                            &data.anchors,
                            classes,
                            &gts,
                            cfg.iou_thresh,
                        )?;
                        let sb = tape.apply(
                            SoftBoxLoss {
                                anchors: data.anchors.clone(),
                                classes,
                                matches,
                            },
                            &all_heads,
                        )?;
                        terms.push((sb, cfg.soft_box_weight, "soft_box"));
                    }
                }
            }

            // penalty is computed outside the tape; its subgradient goes
            // straight onto the gamma gradients below
            let penalty = match &rates {
                Some(r) => {
                    let gammas = flat_gammas(net);
                    Some(sparse_penalty(&gammas, r))
                }
                None => None,
            };

            let loss_id = if terms.len() == 1 {
                hard_id
            } else {
                let ids: Vec<TensorId> = terms.iter().map(|t| t.0).collect();
                let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
                tape.apply(WeightedSum { weights }, &ids)?
            };

            // divergence check with a named component
            for (id, _, name) in &terms {
                let v = tape.value(*id).item();
                if !v.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step: steps,
                        component: name.to_string(),
                    });
                }
            }
            let penalty_value = penalty.as_ref().map(|(p, _)| *p).unwrap_or(0.0);
            let total_value = tape.value(loss_id).item() + penalty_value;
            if !total_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: steps,
                    component: "total".to_string(),
                });
            }

            tape.backward(loss_id)?;
            let mut grads = net.collect_grads(&tape, &fw)?;

            if let Some((_, subgrad)) = &penalty {
                // gamma order in `grads` follows parameter collection;
                // rebuild the canonical order to index the subgradient
                let mut offset = 0usize;
                let mut gamma_offsets = std::collections::BTreeMap::new();
                for (bn_id, g) in net.store.all_gammas() {
                    gamma_offsets.insert(bn_id, offset);
                    offset += g.len();
                }
                for (key, grad) in grads.iter_mut() {
                    if key.1 == ParamRole::Gamma {
                        let start = gamma_offsets[&key.0];
                        for (gi, gv) in grad.iter_mut().enumerate() {
                            *gv += subgrad[start + gi];
                        }
                    }
                }
            }

            if opts.grad_clip > 0.0 {
                let norm: f64 = grads
                    .iter()
                    .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > opts.grad_clip {
                    let scale = opts.grad_clip / norm;
                    for (_, g) in grads.iter_mut() {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }

            net.update_running_stats(&tape, &fw);
            net.apply_grads(&grads, &mut sgd, lr);

            // accumulate component means
            sums.0 += total_value;
            sums.1 += tape.value(hard_id).item();
            sums.2 += penalty_value;
            for (id, w, name) in &terms {
                let v = *w * tape.value(*id).item();
                match *name {
                    "soft_cls" => sums.3 += v,
                    "soft_box" => sums.4 += v,
                    "attention" => sums.5 += v,
                    _ => {}
                }
            }
            steps += 1;
        }

        let inv = 1.0 / steps.max(1) as f64;
        let gammas = flat_gammas(net);
        let val_map = if opts.eval_map_every > 0
            && ((epoch + 1) % opts.eval_map_every == 0 || epoch + 1 == opts.epochs)
        {
            Some(validate_map(net, data, opts.conf_thresh)?)
        } else {
            None
        };
        history.push(EpochLog {
            epoch,
            lr,
            loss: sums.0 * inv,
            hard: sums.1 * inv,
            penalty: sums.2 * inv,
            soft_cls: sums.3 * inv,
            soft_box: sums.4 * inv,
            attention: sums.5 * inv,
            mean_abs_gamma: mean_abs_gamma(&net.store),
            gamma_hist: histogram_of(&gammas, 16),
            val_map,
            steps,
        });
    }

    let val_hard = validate_hard(net, data, opts, anchors_per_scale, classes, &grids)?;
    let val_map = validate_map(net, data, opts.conf_thresh)?;
    Ok(FitResult { history, val_hard, val_map })
}

/// Eval-mode hard loss over the validation split.
fn validate_hard(
    net: &Network,
    data: &Dataset,
    opts: &TrainOpts,
    anchors_per_scale: usize,
    classes: usize,
    grids: &[(usize, usize); 3],
) -> Result<f64> {
    if data.val_images.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    let idx: Vec<usize> = (0..data.val_images.len()).collect();
    for batch in idx.chunks(opts.batch_size.max(1)) {
        let images =
            stack_images(&batch.iter().map(|&i| &data.val_images[i]).collect::<Vec<_>>());
        let gts: Vec<Vec<crate::detectcore::BoxLabel>> =
            batch.iter().map(|&i| data.val_labels[i].clone()).collect();
        let targets = assign_targets(&gts, &data.anchors, grids);
        let mut tape = Tape::new();
        let fw = net.forward(&mut tape, images, false, false)?;
        let loss = tape.apply(
            HardLoss { cfg: opts.hard_cfg, anchors_per_scale, classes, targets },
            &fw.heads,
        )?;
        total += tape.value(loss).item();
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Validation mAP@0.5 with the given decode confidence.
pub fn validate_map(net: &Network, data: &Dataset, conf_thresh: f64) -> Result<f64> {
    if data.val_images.is_empty() {
        return Ok(0.0);
    }
    let (_, classes) = head_meta(net);
    let mut dets = Vec::with_capacity(data.val_images.len());
    for img in &data.val_images {
        let mut shape = vec![1];
        shape.extend_from_slice(&img.shape);
        let heads = net.predict(Tensor::new(shape, img.data.clone()))?;
        let mut d = decode_predictions(&heads, &data.anchors, classes, conf_thresh)?;
        dets.push(d.remove(0));
    }
    let report = eval_map(&dets, &data.val_labels, &EvalConfig::default());
    Ok(report.map)
}

/// History rows as CSV text (one row per epoch).
pub fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(
        "epoch,lr,loss,hard,penalty,soft_cls,soft_box,attention,mean_abs_gamma,val_map,steps\n",
    );
    for e in history {
        let map = e.val_map.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.lr,
            e.loss,
            e.hard,
            e.penalty,
            e.soft_cls,
            e.soft_box,
            e.attention,
            e.mean_abs_gamma,
            map,
            e.steps
        ));
    }
    out
}

/// Per-epoch gamma histogram as CSV text.
pub fn gamma_hist_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,bin_lo,bin_hi,count\n");
    for e in history {
        for (lo, hi, c) in &e.gamma_hist {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, lo, hi, c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectcore::DatasetConfig;
    use crate::netgraph::{assign_groups, parse_graph, WeightStore};

    fn tiny_net(seed: u64) -> Network {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny-det.graph");
        let mut graph = parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap();
        assign_groups(&mut graph).unwrap();
        let store = WeightStore::init(&graph, &mut stream(seed, "init")).unwrap();
        Network::new(graph, store)
    }

    fn tiny_data(seed: u64) -> Dataset {
        crate::detectcore::gen_dataset(&DatasetConfig {
            seed,
            n_train: 8,
            n_val: 4,
            image_size: 96,
            n_classes: 3,
        })
        .unwrap()
    }

    #[test]
    fn one_epoch_one_batch_bookkeeping() {
        let mut net = tiny_net(1);
        let data = tiny_data(1);
        let opts = TrainOpts::new(1, 8, 0.01, 1, "train");
        let res = fit(&mut net, &data, &opts, FitMode::Standard).unwrap();
        assert_eq!(res.history.len(), 1);
        assert_eq!(res.history[0].steps, 1);
        assert!(res.history[0].loss.is_finite());
    }

    #[test]
    fn sparse_zero_rate_identical_to_standard() {
        let data = tiny_data(2);
        let mut a = tiny_net(2);
        let mut b = tiny_net(2);
        let opts = TrainOpts::new(3, 4, 0.02, 2, "train");
        fit(&mut a, &data, &opts, FitMode::Standard).unwrap();
        let sched = SparseSchedule { s0: 0.0, ..SparseSchedule::default() };
        fit(&mut b, &data, &opts, FitMode::Sparse(&sched)).unwrap();
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    }

    #[test]
    fn disabled_distill_identical_to_standard() {
        let data = tiny_data(3);
        let teacher = tiny_net(99);
        let mut a = tiny_net(3);
        let mut b = tiny_net(3);
        let opts = TrainOpts::new(2, 4, 0.02, 3, "recover");
        fit(&mut a, &data, &opts, FitMode::Standard).unwrap();
        let cfg = DistillConfig::disabled(5);
        fit(&mut b, &data, &opts, FitMode::Distill { teacher: &teacher, cfg: &cfg }).unwrap();
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    }

    #[test]
    fn teacher_unchanged_by_distillation() {
        let data = tiny_data(4);
        let teacher = tiny_net(4);
        let before = teacher.store.to_bytes();
        let mut student = tiny_net(5);
        let opts = TrainOpts::new(1, 4, 0.01, 4, "recover");
        let cfg = DistillConfig {
            betas: vec![1.0; 5],
            soft_cls_weight: 1.0,
            soft_box_weight: 1.0,
            ..DistillConfig::default()
        };
        let res =
            fit(&mut student, &data, &opts, FitMode::Distill { teacher: &teacher, cfg: &cfg })
                .unwrap();
        assert_eq!(teacher.store.to_bytes(), before);
        let log = &res.history[0];
        assert!(log.hard.is_finite() && log.soft_cls.is_finite());
        assert!(log.soft_cls >= 0.0);
        assert!(log.attention >= 0.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = tiny_data(6);
        let mut a = tiny_net(6);
        let mut b = tiny_net(6);
        let opts = TrainOpts::new(2, 4, 0.05, 6, "train");
        fit(&mut a, &data, &opts, FitMode::Standard).unwrap();
        fit(&mut b, &data, &opts, FitMode::Standard).unwrap();
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    }
}
