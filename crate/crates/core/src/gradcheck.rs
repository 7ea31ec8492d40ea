//! Finite-difference verification of gradients.
//!
//! The checker only ever calls forward passes: for each leaf element it
//! rebuilds the computation at `x ± h` and compares the central difference
//! against whatever `Tape::backward` produced. It is therefore an oracle
//! that is independent of every backward implementation it checks.

use crate::engine::{Tape, TensorId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error tolerance used by the built-in suites.
pub const FD_TOL: f64 = 1e-4;

/// Relative error between an analytic and a numeric derivative.
///
/// Differences below an absolute noise floor (scaled by the loss magnitude)
/// count as zero; otherwise the difference is normalized by the larger
/// magnitude.
pub fn rel_err(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let floor = 1e-8 * loss_scale.abs().max(1.0);
    if diff <= floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of checking one op over one fixture.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub elements: usize,
}

/// Check the gradients of a scalar-valued computation w.r.t. every leaf.
///
/// `build` receives a fresh tape plus the leaf ids (in the order of
/// `leaves`) and must return the scalar loss id. Leaves are registered
/// with `needs_grad = true`.
pub fn check_grads<F>(leaves: &[Tensor], step: f64, mut build: F) -> CheckResult
where
    F: FnMut(&mut Tape, &[TensorId]) -> TensorId,
{
    let eval = |tensors: &[Tensor], build: &mut F| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    let loss_value = tape.value(loss).item();
    tape.backward(loss).expect("backward failed in gradient check");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(id, t)| tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();

    // Numeric pass, element by element.
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_err = 0.0f64;
    let mut elements = 0;
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].data.len() {
            let orig = work[li].data[ei];
            work[li].data[ei] = orig + step;
            let up = eval(&work, &mut build);
            work[li].data[ei] = orig - step;
            let down = eval(&work, &mut build);
            work[li].data[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic[li][ei], numeric, loss_value);
            if err > max_err {
                max_err = err;
            }
            elements += 1;
        }
    }
    CheckResult { max_rel_err: max_err, elements }
}

/// Result of sweeping one operation over many random fixtures.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub op: &'static str,
    pub fixtures: usize,
    pub max_rel_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

/// Run the full gradient suite: every differentiable operation against
/// central finite differences on `fixtures_per_op` random micro-fixtures.
pub fn run_gradient_suite(seed: u64, fixtures_per_op: usize) -> Vec<SuiteReport> {
    suite::run(seed, fixtures_per_op)
}

mod suite {
    use super::{check_grads, SuiteReport, FD_STEP};
    use crate::detectcore::{assign_targets, Anchors, BoxLabel, HardLoss, HardLossCfg};
    use crate::distill::{AttentionMapOp, RowDistance, SoftBoxLoss, SoftClsLoss};
    use crate::engine::{
        Add, BatchNormEval, BatchNormTrain, ConcatChannels, Conv2d, LeakyRelu, MaxPool, Mish,
        Tape, TensorId, UpsampleNearest,
    };
    use crate::rng::stream;
    use crate::sparsetrain::{sparse_penalty, ChannelRateMap};
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Uniform values bounded away from activation kinks at zero.
    fn smooth_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.0);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// All-distinct values with gaps far above the FD step, so max-pool
    /// argmax positions cannot flip during differencing.
    fn distinct_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let mut levels: Vec<f64> = (0..n).map(|i| -1.0 + 0.005 * i as f64).collect();
        levels.shuffle(rng);
        Tensor::new(shape, levels)
    }


    /// sum over elements of y .* probe, with probe constant. Implemented
    /// with RowDistance against -probe... simpler: treat as leaf-free op.
    struct DotProbe {
        probe: Vec<f64>,
    }

    impl crate::engine::TapeOp for DotProbe {
        fn name(&self) -> &'static str {
            "dot_probe"
        }

        fn forward(
            &self,
            inputs: &[&Tensor],
        ) -> crate::engine::Result<(Tensor, crate::engine::Aux)> {
            let x = inputs[0];
            let v = x.data.iter().zip(&self.probe).map(|(a, b)| a * b).sum();
            Ok((Tensor::scalar(v), crate::engine::Aux::None))
        }

        fn backward(
            &self,
            _inputs: &[&Tensor],
            _output: &Tensor,
            _aux: &crate::engine::Aux,
            out_grad: &[f64],
            input_grads: &mut [Option<Vec<f64>>],
        ) {
            if let Some(dx) = input_grads[0].as_mut() {
                for (d, p) in dx.iter_mut().zip(&self.probe) {
                    *d += out_grad[0] * p;
                }
            }
        }
    }

    fn probe_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn run(seed: u64, fixtures: usize) -> Vec<SuiteReport> {
        let mut reports = Vec::new();
        let mut rng = stream(seed, "gradsuite");

        // conv2d stride 1, 3x3
        reports.push(sweep("conv2d_s1_k3", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![1, 2, 5, 5]);
            let w = smooth_tensor(rng, vec![3, 2, 3, 3]);
            let probe = probe_for(rng, 75);
            (vec![x, w], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(Conv2d { stride: 1 }, &[ids[0], ids[1]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // conv2d stride 2
        reports.push(sweep("conv2d_s2_k3", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![2, 2, 6, 6]);
            let w = smooth_tensor(rng, vec![2, 2, 3, 3]);
            let probe = probe_for(rng, 2 * 2 * 3 * 3);
            (vec![x, w], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(Conv2d { stride: 2 }, &[ids[0], ids[1]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // pointwise conv
        reports.push(sweep("conv2d_s1_k1", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![1, 4, 4, 4]);
            let w = smooth_tensor(rng, vec![3, 4, 1, 1]);
            let probe = probe_for(rng, 48);
            (vec![x, w], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(Conv2d { stride: 1 }, &[ids[0], ids[1]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // batch norm, training statistics
        reports.push(sweep("batchnorm_train", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let g = smooth_tensor(rng, vec![3]);
            let b = smooth_tensor(rng, vec![3]);
            let probe = probe_for(rng, 54);
            (vec![x, g, b], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(BatchNormTrain { eps: 1e-5 }, ids).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // batch norm, eval statistics
        reports.push(sweep("batchnorm_eval", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let g = smooth_tensor(rng, vec![3]);
            let b = smooth_tensor(rng, vec![3]);
            let mean = smooth_tensor(rng, vec![3]);
            let var = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(0.3..2.0)).collect());
            let probe = probe_for(rng, 54);
            (vec![x, g, b], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let m = tape.constant(mean.clone());
                let v = tape.constant(var.clone());
                let y = tape
                    .apply(BatchNormEval { eps: 1e-5 }, &[ids[0], ids[1], ids[2], m, v])
                    .unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // activations
        reports.push(sweep("mish", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![2, 3, 4, 4]);
            let probe = probe_for(rng, 96);
            (vec![x], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(Mish, &[ids[0]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        reports.push(sweep("leaky_relu", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![2, 3, 4, 4]);
            let probe = probe_for(rng, 96);
            (vec![x], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(LeakyRelu { slope: 0.1 }, &[ids[0]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // structure
        reports.push(sweep("add", fixtures, &mut rng, |rng| {
            let a = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let b = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let probe = probe_for(rng, 54);
            (vec![a, b], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(Add, &[ids[0], ids[1]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        reports.push(sweep("concat", fixtures, &mut rng, |rng| {
            let a = smooth_tensor(rng, vec![2, 2, 3, 3]);
            let b = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let probe = probe_for(rng, 2 * 5 * 9);
            (vec![a, b], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(ConcatChannels, &[ids[0], ids[1]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        reports.push(sweep("upsample", fixtures, &mut rng, |rng| {
            let x = smooth_tensor(rng, vec![1, 3, 3, 3]);
            let probe = probe_for(rng, 3 * 36);
            (vec![x], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(UpsampleNearest { factor: 2 }, &[ids[0]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        reports.push(sweep("maxpool", fixtures, &mut rng, |rng| {
            let x = distinct_tensor(rng, vec![1, 2, 5, 5]);
            let probe = probe_for(rng, 50);
            (vec![x], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let y = tape.apply(MaxPool { k: 3, stride: 1 }, &[ids[0]]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // SPP block: three same-pad pools concatenated with the identity
        reports.push(sweep("spp", fixtures, &mut rng, |rng| {
            let x = distinct_tensor(rng, vec![1, 2, 4, 4]);
            let probe = probe_for(rng, 2 * 4 * 16);
            (vec![x], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let p5 = tape.apply(MaxPool { k: 5, stride: 1 }, &[ids[0]]).unwrap();
                let p9 = tape.apply(MaxPool { k: 9, stride: 1 }, &[ids[0]]).unwrap();
                let p13 = tape.apply(MaxPool { k: 13, stride: 1 }, &[ids[0]]).unwrap();
                let y = tape.apply(ConcatChannels, &[ids[0], p5, p9, p13]).unwrap();
                tape.apply(DotProbe { probe: probe.clone() }, &[y]).unwrap()
            }))
        }));

        // attention term: map + normalized distance
        reports.push(sweep("attention", fixtures, &mut rng, |rng| {
            let s = smooth_tensor(rng, vec![2, 3, 3, 3]);
            let t = smooth_tensor(rng, vec![2, 4, 3, 3]);
            (vec![s], Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let qs = tape.apply(AttentionMapOp, &[ids[0]]).unwrap();
                let t_id = tape.constant(t.clone());
                let qt = tape.apply(AttentionMapOp, &[t_id]).unwrap();
                tape.apply(RowDistance, &[qs, qt]).unwrap()
            }))
        }));

        // soft class loss
        reports.push(sweep("soft_cls", fixtures, &mut rng, |rng| {
            let classes = 3;
            let mk = |rng: &mut ChaCha8Rng, h: usize| smooth_tensor(rng, vec![1, 8, h, h]);
            let s = vec![mk(rng, 2), mk(rng, 2), mk(rng, 1)];
            let t: Vec<Tensor> = (0..3).map(|i| smooth_tensor(rng, s[i].shape.clone())).collect();
            (s, Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let mut all = ids.to_vec();
                for tt in &t {
                    all.push(tape.constant(tt.clone()));
                }
                tape.apply(
                    SoftClsLoss { anchors_per_scale: 1, classes, temperature: 2.0 },
                    &all,
                )
                .unwrap()
            }))
        }));

        // soft box loss
        reports.push(sweep("soft_box", fixtures, &mut rng, |rng| {
            let classes = 3;
            let anchors = Anchors {
                per_scale: [vec![(0.2, 0.2)], vec![(0.35, 0.3)], vec![(0.6, 0.55)]],
            };
            let mk = |rng: &mut ChaCha8Rng, h: usize| smooth_tensor(rng, vec![1, 8, h, h]);
            let s = vec![mk(rng, 2), mk(rng, 2), mk(rng, 1)];
            let t: Vec<Tensor> = (0..3).map(|i| smooth_tensor(rng, s[i].shape.clone())).collect();
            let matches = vec![
                vec![(0, 0, 0, 1), (0, 0, 1, 0)],
                vec![(0, 0, 1, 1)],
                vec![(0, 0, 0, 0)],
            ];
            (s, Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                let mut all = ids.to_vec();
                for tt in &t {
                    all.push(tape.constant(tt.clone()));
                }
                tape.apply(
                    SoftBoxLoss {
                        anchors: anchors.clone(),
                        classes,
                        matches: matches.clone(),
                    },
                    &all,
                )
                .unwrap()
            }))
        }));

        // hard detection loss
        reports.push(sweep("hard_loss", fixtures, &mut rng, |rng| {
            let classes = 2;
            let anchors = Anchors {
                per_scale: [vec![(0.15, 0.2)], vec![(0.3, 0.35)], vec![(0.6, 0.5)]],
            };
            let gts = vec![vec![
                BoxLabel {
                    class_id: rng.gen_range(0..classes),
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.1..0.5),
                    h: rng.gen_range(0.1..0.5),
                },
            ]];
            let grids = [(2, 2), (2, 2), (1, 1)];
            let targets = assign_targets(&gts, &anchors, &grids);
            let mk = |rng: &mut ChaCha8Rng, h: usize| smooth_tensor(rng, vec![1, 7, h, h]);
            let s = vec![mk(rng, 2), mk(rng, 2), mk(rng, 1)];
            (s, Box::new(move |tape: &mut Tape, ids: &[TensorId]| {
                tape.apply(
                    HardLoss {
                        cfg: HardLossCfg::default(),
                        anchors_per_scale: 1,
                        classes,
                        targets: targets.clone(),
                    },
                    ids,
                )
                .unwrap()
            }))
        }));

        // sparse penalty: direct finite differences, no tape
        reports.push({
            let mut max_err = 0.0f64;
            for _ in 0..fixtures {
                let n = rng.gen_range(3..12);
                let gammas: Vec<f64> = (0..n)
                    .map(|_| {
                        let mag: f64 = rng.gen_range(0.05..1.5);
                        if rng.gen::<bool>() {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                let rates = ChannelRateMap {
                    rates: (0..n).map(|_| rng.gen_range(0.0..0.02)).collect(),
                };
                let (_, grad) = sparse_penalty(&gammas, &rates);
                for i in 0..n {
                    let mut up = gammas.clone();
                    up[i] += FD_STEP;
                    let mut down = gammas.clone();
                    down[i] -= FD_STEP;
                    let fd = (sparse_penalty(&up, &rates).0 - sparse_penalty(&down, &rates).0)
                        / (2.0 * FD_STEP);
                    max_err = max_err.max(super::rel_err(grad[i], fd, 1.0));
                }
            }
            SuiteReport { op: "sparse_penalty", fixtures, max_rel_err: max_err }
        });

        reports
    }

    type BuildFn = Box<dyn FnMut(&mut Tape, &[TensorId]) -> TensorId>;

    fn sweep(
        op: &'static str,
        fixtures: usize,
        rng: &mut ChaCha8Rng,
        mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, BuildFn),
    ) -> SuiteReport {
        let mut max_err = 0.0f64;
        for _ in 0..fixtures {
            let (leaves, mut build) = make(rng);
            let res = check_grads(&leaves, FD_STEP, |tape, ids| build(tape, ids));
            max_err = max_err.max(res.max_rel_err);
        }
        SuiteReport { op, fixtures, max_rel_err: max_err }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Conv2d, SumAll};

    #[test]
    fn fd_matches_linear_function() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.2]);
        let res = check_grads(&[x], FD_STEP, |tape, ids| {
            tape.apply(SumAll, &[ids[0]]).unwrap()
        });
        assert!(res.max_rel_err < 1e-10, "rel err {}", res.max_rel_err);
    }

    #[test]
    fn checker_detects_wrong_gradients() {
        // an op whose backward is off by 10% must be flagged
        struct SlightlyWrongScale;
        impl crate::engine::TapeOp for SlightlyWrongScale {
            fn name(&self) -> &'static str {
                "wrong_scale"
            }
            fn forward(
                &self,
                inputs: &[&Tensor],
            ) -> crate::engine::Result<(Tensor, crate::engine::Aux)> {
                let v = inputs[0].data.iter().map(|x| 3.0 * x).sum();
                Ok((Tensor::scalar(v), crate::engine::Aux::None))
            }
            fn backward(
                &self,
                _inputs: &[&Tensor],
                _output: &Tensor,
                _aux: &crate::engine::Aux,
                out_grad: &[f64],
                input_grads: &mut [Option<Vec<f64>>],
            ) {
                if let Some(dx) = input_grads[0].as_mut() {
                    for d in dx.iter_mut() {
                        *d += 3.3 * out_grad[0]; // should be 3.0
                    }
                }
            }
        }
        let x = Tensor::new(vec![4], vec![0.4, -0.2, 0.9, 0.1]);
        let res = check_grads(&[x], FD_STEP, |tape, ids| {
            tape.apply(SlightlyWrongScale, &[ids[0]]).unwrap()
        });
        assert!(res.max_rel_err > 0.05, "mutation must be detected, got {}", res.max_rel_err);
    }

    #[test]
    fn spec_conv_example_fd() {
        // sum(conv(x, w)) on a 1x1x4x4 input with a 3x3 kernel
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
        let w = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect());
        let res = check_grads(&[x, w], FD_STEP, |tape, ids| {
            let c = tape.apply(Conv2d { stride: 1 }, &[ids[0], ids[1]]).unwrap();
            tape.apply(SumAll, &[c]).unwrap()
        });
        assert!(res.max_rel_err < FD_TOL, "rel err {}", res.max_rel_err);
    }
}
