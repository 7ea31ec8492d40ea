//! Weight store and the `.wts` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SLIMWTS\0" | version u32 | record count u32
//! per record, sorted by (node id, role):
//!   node id u32 | role u8 | rank u8 | dims u32 x rank | data f32 x numel
//! crc32 u32 over everything before it
//! ```
//!
//! Values are stored as `f32`; the in-memory store is `f64` and is snapped
//! to `f32` at init and load, so `load(save(w)) == w` holds bit-exactly
//! for any store that passed through either path.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError, NodeKind, Result};
use crate::engine::BnParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SLIMWTS\0";
const VERSION: u32 = 1;

/// Batch-norm epsilon used across the toolkit.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRole {
    ConvWeight = 0,
    ConvBias = 1,
    Gamma = 2,
    Beta = 3,
    RunningMean = 4,
    RunningVar = 5,
}

impl ParamRole {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ParamRole::ConvWeight,
            1 => ParamRole::ConvBias,
            2 => ParamRole::Gamma,
            3 => ParamRole::Beta,
            4 => ParamRole::RunningMean,
            5 => ParamRole::RunningVar,
            _ => return None,
        })
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// Ordered parameter address: (node id, role).
pub type ParamKey = (usize, ParamRole);

#[derive(Debug, Clone, PartialEq)]
pub enum NodeWeights {
    Conv { weight: Tensor, bias: Option<Vec<f64>> },
    Bn(BnParams),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub by_node: BTreeMap<usize, NodeWeights>,
}

impl WeightStore {
    /// He-normal initialization for conv weights, identity batch norms,
    /// and a negative objectness bias on the detection-head convs so early
    /// training is not flooded by positive predictions.
    pub fn init(graph: &Graph, rng: &mut ChaCha8Rng) -> Result<Self> {
        let channels = graph.channels()?;
        let head_convs = graph.head_conv_ids();
        let mut store = WeightStore::default();
        for node in &graph.nodes {
            match node.kind {
                NodeKind::Conv { k, out_channels, bias, .. } => {
                    let cin = channels[node.inputs[0]];
                    let fan_in = (k * k * cin) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let n = out_channels * cin * k * k;
                    let data: Vec<f64> = (0..n).map(|_| normal(rng) * std).collect();
                    let weight = Tensor::new(vec![out_channels, cin, k, k], data);
                    let bias = if bias {
                        let mut b = vec![0.0; out_channels];
                        if head_convs.contains(&node.id) {
                            if let Some(&head) = graph
                                .consumers()[node.id]
                                .iter()
                                .find(|&&c| matches!(graph.nodes[c].kind, NodeKind::DetectHead { .. }))
                            {
                                if let NodeKind::DetectHead { anchors, classes, .. } =
                                    graph.nodes[head].kind
                                {
                                    for a in 0..anchors {
                                        b[a * (5 + classes) + 4] = -2.0;
                                    }
                                }
                            }
                        }
                        Some(b)
                    } else {
                        None
                    };
                    store.by_node.insert(node.id, NodeWeights::Conv { weight, bias });
                }
                NodeKind::Bn => {
                    let c = channels[node.id];
                    store.by_node.insert(node.id, NodeWeights::Bn(BnParams::identity(c, BN_EPS)));
                }
                _ => {}
            }
        }
        store.snap_f32();
        Ok(store)
    }

    /// Round every value to its nearest `f32`, the canonical stored width.
    pub fn snap_f32(&mut self) {
        for w in self.by_node.values_mut() {
            match w {
                NodeWeights::Conv { weight, bias } => {
                    for v in &mut weight.data {
                        *v = *v as f32 as f64;
                    }
                    if let Some(b) = bias {
                        for v in b.iter_mut() {
                            *v = *v as f32 as f64;
                        }
                    }
                }
                NodeWeights::Bn(p) => {
                    for vec in [&mut p.gamma, &mut p.beta, &mut p.running_mean, &mut p.running_var]
                    {
                        for v in vec.iter_mut() {
                            *v = *v as f32 as f64;
                        }
                    }
                }
            }
        }
    }

    /// Flat (key, values) listing in deterministic order.
    pub fn entries(&self) -> Vec<(ParamKey, &[f64], Vec<usize>)> {
        let mut out: Vec<(ParamKey, &[f64], Vec<usize>)> = Vec::new();
        for (&id, w) in &self.by_node {
            match w {
                NodeWeights::Conv { weight, bias } => {
                    out.push(((id, ParamRole::ConvWeight), &weight.data, weight.shape.clone()));
                    if let Some(b) = bias {
                        out.push(((id, ParamRole::ConvBias), b, vec![b.len()]));
                    }
                }
                NodeWeights::Bn(p) => {
                    let c = p.channels();
                    out.push(((id, ParamRole::Gamma), &p.gamma, vec![c]));
                    out.push(((id, ParamRole::Beta), &p.beta, vec![c]));
                    out.push(((id, ParamRole::RunningMean), &p.running_mean, vec![c]));
                    out.push(((id, ParamRole::RunningVar), &p.running_var, vec![c]));
                }
            }
        }
        out
    }

    pub fn conv(&self, id: usize) -> Option<(&Tensor, Option<&[f64]>)> {
        match self.by_node.get(&id) {
            Some(NodeWeights::Conv { weight, bias }) => Some((weight, bias.as_deref())),
            _ => None,
        }
    }

    pub fn bn(&self, id: usize) -> Option<&BnParams> {
        match self.by_node.get(&id) {
            Some(NodeWeights::Bn(p)) => Some(p),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, id: usize) -> Option<&mut BnParams> {
        match self.by_node.get_mut(&id) {
            Some(NodeWeights::Bn(p)) => Some(p),
            _ => None,
        }
    }

    /// All batch-norm gammas as (bn node id, values), ascending by id.
    pub fn all_gammas(&self) -> Vec<(usize, &[f64])> {
        self.by_node
            .iter()
            .filter_map(|(&id, w)| match w {
                NodeWeights::Bn(p) => Some((id, p.gamma.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Check stored shapes against a graph; errors name the first
    /// offending node.
    pub fn validate_against(&self, graph: &Graph) -> Result<()> {
        let channels = graph.channels()?;
        for node in &graph.nodes {
            match node.kind {
                NodeKind::Conv { k, out_channels, bias, .. } => {
                    let cin = channels[node.inputs[0]];
                    match self.by_node.get(&node.id) {
                        Some(NodeWeights::Conv { weight, bias: b }) => {
                            let want = vec![out_channels, cin, k, k];
                            if weight.shape != want {
                                return Err(GraphError::Weights(format!(
                                    "node {}: conv weight shape {:?} does not match graph {:?}",
                                    node.id, weight.shape, want
                                )));
                            }
                            if bias != b.is_some() {
                                return Err(GraphError::Weights(format!(
                                    "node {}: bias presence mismatch",
                                    node.id
                                )));
                            }
                            if let Some(b) = b {
                                if b.len() != out_channels {
                                    return Err(GraphError::Weights(format!(
                                        "node {}: bias length {} != {}",
                                        node.id,
                                        b.len(),
                                        out_channels
                                    )));
                                }
                            }
                        }
                        _ => {
                            return Err(GraphError::Weights(format!(
                                "node {}: missing conv weights",
                                node.id
                            )))
                        }
                    }
                }
                NodeKind::Bn => match self.by_node.get(&node.id) {
                    Some(NodeWeights::Bn(p)) => {
                        if p.channels() != channels[node.id] {
                            return Err(GraphError::Weights(format!(
                                "node {}: bn has {} channels, graph expects {}",
                                node.id,
                                p.channels(),
                                channels[node.id]
                            )));
                        }
                    }
                    _ => {
                        return Err(GraphError::Weights(format!(
                            "node {}: missing bn parameters",
                            node.id
                        )))
                    }
                },
                _ => {}
            }
        }
        Ok(())
    }

    /// Serialized byte representation (shared by save and hashing).
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for ((id, role), data, shape) in entries {
            buf.extend_from_slice(&(id as u32).to_le_bytes());
            buf.push(role as u8);
            buf.push(shape.len() as u8);
            for d in &shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on uniform draws; branchless enough and fully seeded.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Size in bytes a `.wts` file for this graph occupies.
pub fn wts_size_for_graph(graph: &Graph) -> Result<u64> {
    let channels = graph.channels()?;
    let mut size = 16u64; // magic + version + count
    for node in &graph.nodes {
        match node.kind {
            NodeKind::Conv { k, out_channels, bias, .. } => {
                let cin = channels[node.inputs[0]] as u64;
                size += record_size(4, (k * k) as u64 * cin * out_channels as u64);
                if bias {
                    size += record_size(1, out_channels as u64);
                }
            }
            NodeKind::Bn => {
                size += 4 * record_size(1, channels[node.id] as u64);
            }
            _ => {}
        }
    }
    Ok(size + 4) // crc
}

fn record_size(rank: u64, numel: u64) -> u64 {
    4 + 1 + 1 + 4 * rank + 4 * numel
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let bytes = store.to_bytes();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a `.wts` file and validate it against the graph.
pub fn load_weights(graph: &Graph, path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path)?;
    let store = store_from_bytes(&bytes)?;
    store.validate_against(graph)?;
    Ok(store)
}

fn store_from_bytes(bytes: &[u8]) -> Result<WeightStore> {
    let werr = |msg: String| GraphError::Weights(msg);
    if bytes.len() < 20 {
        return Err(werr("file too short for header and checksum".to_string()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(werr("checksum mismatch (truncated or corrupt file)".to_string()));
    }
    if &body[..8] != MAGIC {
        return Err(werr("bad magic bytes".to_string()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(werr(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;

    let mut pos = 16;
    let mut records: Vec<(usize, ParamRole, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 6 > body.len() {
            return Err(werr("unexpected end of record header".to_string()));
        }
        let id = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize;
        let role = ParamRole::from_u8(body[pos + 4])
            .ok_or_else(|| werr(format!("unknown parameter role {}", body[pos + 4])))?;
        let rank = body[pos + 5] as usize;
        pos += 6;
        if pos + 4 * rank > body.len() {
            return Err(werr("unexpected end of shape data".to_string()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let numel: usize = shape.iter().product();
        if pos + 4 * numel > body.len() {
            return Err(werr("unexpected end of tensor data".to_string()));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let v = f32::from_le_bytes(body[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap());
            data.push(v as f64);
        }
        pos += 4 * numel;
        records.push((id, role, shape, data));
    }
    if pos != body.len() {
        return Err(werr("trailing bytes after records".to_string()));
    }

    let mut store = WeightStore::default();
    for (id, role, shape, data) in records {
        match role {
            ParamRole::ConvWeight => {
                if shape.len() != 4 {
                    return Err(werr(format!("node {id}: conv weight must be rank 4")));
                }
                let entry = store
                    .by_node
                    .entry(id)
                    .or_insert_with(|| NodeWeights::Conv { weight: Tensor::zeros(vec![0]), bias: None });
                if let NodeWeights::Conv { weight, .. } = entry {
                    *weight = Tensor::new(shape, data);
                }
            }
            ParamRole::ConvBias => {
                let entry = store
                    .by_node
                    .entry(id)
                    .or_insert_with(|| NodeWeights::Conv { weight: Tensor::zeros(vec![0]), bias: None });
                if let NodeWeights::Conv { bias, .. } = entry {
                    *bias = Some(data);
                }
            }
            _ => {
                let entry = store
                    .by_node
                    .entry(id)
                    .or_insert_with(|| NodeWeights::Bn(BnParams::identity(0, BN_EPS)));
                if let NodeWeights::Bn(p) = entry {
                    match role {
                        ParamRole::Gamma => p.gamma = data,
                        ParamRole::Beta => p.beta = data,
                        ParamRole::RunningMean => p.running_mean = data,
                        ParamRole::RunningVar => p.running_var = data,
                        _ => unreachable!(),
                    }
                } else {
                    return Err(werr(format!("node {id}: mixes conv and bn records")));
                }
            }
        }
    }
    // bn blocks must be complete
    for (id, w) in &store.by_node {
        if let NodeWeights::Bn(p) = w {
            let c = p.gamma.len();
            if c == 0
                || p.beta.len() != c
                || p.running_mean.len() != c
                || p.running_var.len() != c
            {
                return Err(werr(format!("node {id}: incomplete bn record")));
            }
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::parse_graph;
    use crate::rng::stream;

    fn toy_graph() -> Graph {
        parse_graph(
            "\
0 input c=3
1 conv k=3 s=2 c=4 group=1 inputs=[0]
2 bn inputs=[1]
3 act fn=mish inputs=[2]
4 conv k=3 s=2 c=4 group=1 inputs=[3]
5 bn inputs=[4]
6 act fn=mish inputs=[5]
7 conv k=3 s=2 c=8 group=1 inputs=[6]
8 bn inputs=[7]
9 act fn=mish inputs=[8]
10 conv k=1 s=1 c=14 bias=1 group=5 inputs=[9]
11 detect_head stride=8 anchors=2 classes=2 inputs=[10]
12 conv k=3 s=2 c=8 group=2 inputs=[9]
13 bn inputs=[12]
14 act fn=leaky inputs=[13]
15 conv k=1 s=1 c=14 bias=1 group=5 inputs=[14]
16 detect_head stride=16 anchors=2 classes=2 inputs=[15]
17 conv k=3 s=2 c=8 group=3 inputs=[14]
18 bn inputs=[17]
19 act fn=leaky inputs=[18]
20 conv k=1 s=1 c=14 bias=1 group=5 inputs=[19]
21 detect_head stride=32 anchors=2 classes=2 inputs=[20]
",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = toy_graph();
        let store = WeightStore::init(&g, &mut stream(7, "init")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wts");
        save_weights(&store, &path).unwrap();
        let loaded = load_weights(&g, &path).unwrap();
        assert_eq!(store, loaded);
        // and the serialized bytes are identical too
        assert_eq!(store.to_bytes(), loaded.to_bytes());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let g = toy_graph();
        let store = WeightStore::init(&g, &mut stream(7, "init")).unwrap();
        let bytes = store.to_bytes();
        let cut = &bytes[..bytes.len() - 9];
        let err = store_from_bytes(cut).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let g = toy_graph();
        let mut store = WeightStore::init(&g, &mut stream(7, "init")).unwrap();
        // drop one output channel of conv 7, as pruning would
        if let Some(NodeWeights::Conv { weight, .. }) = store.by_node.get_mut(&7) {
            let cin_kk = weight.shape[1] * weight.shape[2] * weight.shape[3];
            weight.data.truncate(7 * cin_kk);
            weight.shape[0] = 7;
        }
        let err = store.validate_against(&g).unwrap_err();
        assert!(err.to_string().contains("node 7"), "got: {err}");
    }

    #[test]
    fn wts_size_matches_actual_bytes() {
        let g = toy_graph();
        let store = WeightStore::init(&g, &mut stream(3, "init")).unwrap();
        assert_eq!(store.to_bytes().len() as u64, wts_size_for_graph(&g).unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let g = toy_graph();
        let a = WeightStore::init(&g, &mut stream(11, "init")).unwrap();
        let b = WeightStore::init(&g, &mut stream(11, "init")).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
