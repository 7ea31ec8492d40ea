//! Graph execution: binds a parsed [`Graph`] and its [`WeightStore`] to the
//! autodiff tape, one trace per forward pass.

use thiserror::Error;

use crate::engine::{
    Add, Aux, BatchNormEval, BatchNormTrain, ConcatChannels, Conv2d, Conv2dBias, EngineError,
    LeakyRelu, MaxPool, Mish, Tape, TensorId, UpsampleNearest, RUNNING_STAT_MOMENTUM,
};
use crate::netgraph::{
    ActKind, Graph, GraphError, NodeKind, NodeWeights, ParamKey, ParamRole, WeightStore,
};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {0} has no weights in the store")]
    MissingWeights(usize),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// A detection network ready to run: topology plus parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub graph: Graph,
    pub store: WeightStore,
}

/// Handles produced by one traced forward pass.
pub struct ForwardPass {
    /// Output tensor per node id (detect heads alias their producer).
    pub node_out: Vec<TensorId>,
    /// Raw head-conv outputs ordered by stride (8, 16, 32).
    pub heads: Vec<TensorId>,
    /// Trainable parameter leaves pushed for this trace.
    pub params: Vec<(ParamKey, TensorId)>,
    /// Batch-norm tape nodes (bn node id, output id) for stat updates.
    bn_nodes: Vec<(usize, TensorId)>,
}

impl Network {
    pub fn new(graph: Graph, store: WeightStore) -> Self {
        Network { graph, store }
    }

    /// Trace one forward pass over a batch of images `[N,3,H,W]`.
    ///
    /// `training` selects batch-statistics batch norm; `track_grads` pushes
    /// parameters as differentiable leaves (teacher passes leave it off).
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Tensor,
        training: bool,
        track_grads: bool,
    ) -> Result<ForwardPass> {
        let n_nodes = self.graph.nodes.len();
        let mut node_out: Vec<TensorId> = Vec::with_capacity(n_nodes);
        let mut params = Vec::new();
        let mut bn_nodes = Vec::new();

        for node in &self.graph.nodes {
            let out = match &node.kind {
                NodeKind::Input { channels } => {
                    debug_assert_eq!(images.shape.get(1), Some(channels));
                    tape.constant(images.clone())
                }
                NodeKind::Conv { stride, .. } => {
                    let (weight, bias) = self
                        .store
                        .conv(node.id)
                        .ok_or(RunError::MissingWeights(node.id))?;
                    let x = node_out[node.inputs[0]];
                    let w = tape.leaf(weight.clone(), track_grads);
                    if track_grads {
                        params.push(((node.id, ParamRole::ConvWeight), w));
                    }
                    match bias {
                        Some(b) => {
                            let b_id =
                                tape.leaf(Tensor::new(vec![b.len()], b.to_vec()), track_grads);
                            if track_grads {
                                params.push(((node.id, ParamRole::ConvBias), b_id));
                            }
                            tape.apply(Conv2dBias { stride: *stride }, &[x, w, b_id])?
                        }
                        None => tape.apply(Conv2d { stride: *stride }, &[x, w])?,
                    }
                }
                NodeKind::Bn => {
                    let p = self.store.bn(node.id).ok_or(RunError::MissingWeights(node.id))?;
                    let x = node_out[node.inputs[0]];
                    let c = p.channels();
                    let g = tape.leaf(Tensor::new(vec![c], p.gamma.clone()), track_grads);
                    let b = tape.leaf(Tensor::new(vec![c], p.beta.clone()), track_grads);
                    if track_grads {
                        params.push(((node.id, ParamRole::Gamma), g));
                        params.push(((node.id, ParamRole::Beta), b));
                    }
                    let out = if training {
                        tape.apply(BatchNormTrain { eps: p.eps }, &[x, g, b])?
                    } else {
                        let m = tape.constant(Tensor::new(vec![c], p.running_mean.clone()));
                        let v = tape.constant(Tensor::new(vec![c], p.running_var.clone()));
                        tape.apply(BatchNormEval { eps: p.eps }, &[x, g, b, m, v])?
                    };
                    if training {
                        bn_nodes.push((node.id, out));
                    }
                    out
                }
                NodeKind::Act { act } => {
                    let x = node_out[node.inputs[0]];
                    match act {
                        ActKind::Mish => tape.apply(Mish, &[x])?,
                        ActKind::Leaky => tape.apply(LeakyRelu { slope: LEAKY_SLOPE }, &[x])?,
                    }
                }
                NodeKind::Add => {
                    tape.apply(Add, &[node_out[node.inputs[0]], node_out[node.inputs[1]]])?
                }
                NodeKind::Concat => {
                    let ids: Vec<TensorId> =
                        node.inputs.iter().map(|&i| node_out[i]).collect();
                    tape.apply(ConcatChannels, &ids)?
                }
                NodeKind::Upsample { factor } => {
                    tape.apply(UpsampleNearest { factor: *factor }, &[node_out[node.inputs[0]]])?
                }
                NodeKind::MaxPool { k, stride } => {
                    tape.apply(MaxPool { k: *k, stride: *stride }, &[node_out[node.inputs[0]]])?
                }
                NodeKind::DetectHead { .. } => node_out[node.inputs[0]],
            };
            node_out.push(out);
        }

        let heads =
            self.graph.heads.iter().map(|&h| node_out[self.graph.nodes[h].inputs[0]]).collect();
        Ok(ForwardPass { node_out, heads, params, bn_nodes })
    }

    /// Fold the batch statistics recorded during a training forward into
    /// the stored running statistics (EMA, fixed momentum).
    pub fn update_running_stats(&mut self, tape: &Tape, fw: &ForwardPass) {
        let m = RUNNING_STAT_MOMENTUM;
        for &(bn_id, out) in &fw.bn_nodes {
            if let Aux::Floats(stats) = tape.aux(out) {
                let p = self.store.bn_mut(bn_id).expect("bn weights present");
                for (r, b) in p.running_mean.iter_mut().zip(&stats[0]) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in p.running_var.iter_mut().zip(&stats[1]) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    /// Write tape gradients for this pass back into grad buffers keyed by
    /// parameter, preserving tape order. Errors if any trainable parameter
    /// was left without a gradient.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        fw: &ForwardPass,
    ) -> Result<Vec<(ParamKey, Vec<f64>)>> {
        let mut out = Vec::with_capacity(fw.params.len());
        for &(key, id) in &fw.params {
            let g = tape
                .grad(id)
                .ok_or_else(|| EngineError::MissingGrad(format!("node {} {:?}", key.0, key.1)))?;
            out.push((key, g.to_vec()));
        }
        Ok(out)
    }

    /// Apply one SGD step to every parameter collected from a pass.
    pub fn apply_grads(
        &mut self,
        grads: &[(ParamKey, Vec<f64>)],
        sgd: &mut crate::engine::Sgd<ParamKey>,
        lr: f64,
    ) {
        for (key, grad) in grads {
            let (node, role) = *key;
            match self.store.by_node.get_mut(&node) {
                Some(NodeWeights::Conv { weight, bias }) => match role {
                    ParamRole::ConvWeight => sgd.step(key, &mut weight.data, grad, lr),
                    ParamRole::ConvBias => {
                        if let Some(b) = bias {
                            sgd.step(key, b, grad, lr)
                        }
                    }
                    _ => {}
                },
                Some(NodeWeights::Bn(p)) => match role {
                    ParamRole::Gamma => sgd.step(key, &mut p.gamma, grad, lr),
                    ParamRole::Beta => sgd.step(key, &mut p.beta, grad, lr),
                    _ => {}
                },
                None => {}
            }
        }
    }

    /// Eval-mode forward returning the raw head tensors (stride order).
    pub fn predict(&self, images: Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let fw = self.forward(&mut tape, images, false, false)?;
        Ok(fw.heads.iter().map(|&h| tape.value(h).clone()).collect())
    }
}

/// Stateless single-layer forward used by tests and by shape probing.
///
/// Parameter-carrying kinds take their parameters after the data inputs:
/// conv expects `[x, w]` (plus `[b]` when biased), bn expects
/// `[x, gamma, beta, running_mean, running_var]` and runs in eval mode.
pub fn layer_forward(node: &NodeKind, inputs: &[&Tensor]) -> Result<Tensor> {
    use crate::engine::TapeOp;
    let (t, _aux) = match node {
        NodeKind::Input { .. } => {
            return Ok((*inputs[0]).clone());
        }
        NodeKind::Conv { stride, bias, .. } => {
            if *bias {
                Conv2dBias { stride: *stride }.forward(inputs)?
            } else {
                Conv2d { stride: *stride }.forward(inputs)?
            }
        }
        NodeKind::Bn => BatchNormEval { eps: crate::netgraph::weights::BN_EPS }.forward(inputs)?,
        NodeKind::Act { act: ActKind::Mish } => Mish.forward(inputs)?,
        NodeKind::Act { act: ActKind::Leaky } => LeakyRelu { slope: LEAKY_SLOPE }.forward(inputs)?,
        NodeKind::Add => Add.forward(inputs)?,
        NodeKind::Concat => ConcatChannels.forward(inputs)?,
        NodeKind::Upsample { factor } => UpsampleNearest { factor: *factor }.forward(inputs)?,
        NodeKind::MaxPool { k, stride } => MaxPool { k: *k, stride: *stride }.forward(inputs)?,
        NodeKind::DetectHead { .. } => return Ok((*inputs[0]).clone()),
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::parse_graph;
    use crate::rng::stream;

    fn tiny() -> Network {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny-det.graph");
        let mut graph = parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap();
        crate::netgraph::assign_groups(&mut graph).unwrap();
        let store = WeightStore::init(&graph, &mut stream(1, "init")).unwrap();
        Network::new(graph, store)
    }

    fn random_images(n: usize, hw: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = stream(seed, "probe");
        let data: Vec<f64> = (0..n * 3 * hw * hw).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![n, 3, hw, hw], data)
    }

    #[test]
    fn forward_shapes_match_strides() {
        let net = tiny();
        let heads = net.predict(random_images(2, 96, 3)).unwrap();
        assert_eq!(heads.len(), 3);
        assert_eq!(heads[0].shape, vec![2, 24, 12, 12]);
        assert_eq!(heads[1].shape, vec![2, 24, 6, 6]);
        assert_eq!(heads[2].shape, vec![2, 24, 3, 3]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = tiny();
        let imgs = random_images(1, 96, 9);
        let a = net.predict(imgs.clone()).unwrap();
        let b = net.predict(imgs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data.iter().zip(&y.data).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn training_forward_populates_grads() {
        let net = tiny();
        let mut tape = Tape::new();
        let fw = net.forward(&mut tape, random_images(2, 96, 5), true, true).unwrap();
        let loss = tape.apply(crate::engine::SumAll, &[fw.heads[0]]).unwrap();
        tape.backward(loss).unwrap();
        // every parameter upstream of head 0 has a grad; at minimum the
        // first conv does
        let first_conv = fw.params.iter().find(|(k, _)| k.0 == 1).unwrap();
        assert!(tape.grad(first_conv.1).is_some());
    }

    #[test]
    fn identity_conv_layer_forward() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let y = layer_forward(
            &NodeKind::Conv { k: 1, stride: 1, out_channels: 1, bias: false },
            &[&x, &w],
        )
        .unwrap();
        assert_eq!(y.data, x.data);
    }
}
