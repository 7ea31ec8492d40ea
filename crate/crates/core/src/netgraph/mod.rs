//! Model-graph data model.
//!
//! A detection network is described by a line-based text descriptor, one
//! node per line:
//!
//! ```text
//! # comment
//! <id> <kind> key=value ... inputs=[i,j,...]
//! ```
//!
//! Kinds: `input`, `conv` (`k=`, `s=`, `c=`, optional `bias=1`, optional
//! `group=`), `bn`, `act` (`fn=mish|leaky`), `add`, `concat`, `upsample`
//! (`f=`, default 2), `maxpool` (`k=`, `s=`), `detect_head` (`stride=`,
//! `anchors=`, `classes=`). Node ids are contiguous from 0 and every input
//! id is smaller than the node's own id. Each `conv` is immediately
//! followed by its `bn` and `act` nodes, except convs feeding a
//! `detect_head`.
//!
//! "Layers" are counted the way detection frameworks number them: a
//! conv+bn+act triple is one layer, as is each add/concat/pool/upsample/
//! detect_head; the input node is not a layer.

pub mod cost;
pub mod weights;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub use cost::{count_cost, CostReport, GroupCost};
pub use weights::{load_weights, save_weights, NodeWeights, ParamKey, ParamRole, WeightStore};

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("graph validation: {0}")]
    Invalid(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn perr<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(GraphError::Parse { line, msg: msg.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Mish,
    Leaky,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input { channels: usize },
    Conv { k: usize, stride: usize, out_channels: usize, bias: bool },
    Bn,
    Act { act: ActKind },
    Add,
    Concat,
    Upsample { factor: usize },
    MaxPool { k: usize, stride: usize },
    DetectHead { stride: usize, anchors: usize, classes: usize },
}

impl NodeKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::Bn => "bn",
            NodeKind::Act { .. } => "act",
            NodeKind::Add => "add",
            NodeKind::Concat => "concat",
            NodeKind::Upsample { .. } => "upsample",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::DetectHead { .. } => "detect_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: usize,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub group: Option<usize>,
}

/// Convolutions whose output-channel masks must be identical because they
/// feed a common chain of residual additions.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSet {
    pub conv_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<NodeSpec>,
    /// detect_head node ids ordered by stride (8, 16, 32).
    pub heads: Vec<usize>,
    pub coupled: Vec<CoupledSet>,
}

impl Graph {
    pub fn node(&self, id: usize) -> &NodeSpec {
        &self.nodes[id]
    }

    pub fn group_of(&self, id: usize) -> Option<usize> {
        self.nodes[id].group
    }

    pub fn group_count(&self) -> usize {
        self.nodes.iter().filter_map(|n| n.group).max().unwrap_or(0)
    }

    /// Ids of all conv nodes, ascending.
    pub fn conv_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Conv { .. }))
            .map(|n| n.id)
            .collect()
    }

    /// The bn node owned by a conv (adjacency invariant), if any.
    pub fn bn_of(&self, conv_id: usize) -> Option<usize> {
        match self.nodes.get(conv_id + 1) {
            Some(n) if matches!(n.kind, NodeKind::Bn) && n.inputs == [conv_id] => Some(n.id),
            _ => None,
        }
    }

    /// Convs that feed a detect_head directly; excluded from pruning since
    /// their width is fixed by anchors x (5 + classes).
    pub fn head_conv_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|&h| self.nodes[h].inputs[0]).collect()
    }

    /// Prunable convs: all convs except the detect-head ones.
    pub fn prunable_conv_ids(&self) -> Vec<usize> {
        let head_convs = self.head_conv_ids();
        self.conv_ids().into_iter().filter(|id| !head_convs.contains(id)).collect()
    }

    /// Consumers of each node.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                out[i].push(n.id);
            }
        }
        out
    }

    /// Output channel count per node.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            ch[n.id] = match &n.kind {
                NodeKind::Input { channels } => *channels,
                NodeKind::Conv { out_channels, .. } => *out_channels,
                NodeKind::Concat => n.inputs.iter().map(|&i| ch[i]).sum(),
                NodeKind::Add => {
                    let a = ch[n.inputs[0]];
                    let b = ch[n.inputs[1]];
                    if a != b {
                        return Err(GraphError::Invalid(format!(
                            "add node {} joins {a} and {b} channels",
                            n.id
                        )));
                    }
                    a
                }
                NodeKind::DetectHead { anchors, classes, .. } => {
                    let c = ch[n.inputs[0]];
                    let want = anchors * (5 + classes);
                    if c != want {
                        return Err(GraphError::Invalid(format!(
                            "detect_head {} expects {want} channels, producer has {c}",
                            n.id
                        )));
                    }
                    c
                }
                _ => ch[n.inputs[0]],
            };
        }
        Ok(ch)
    }

    /// Cumulative stride (input resolution / node resolution) per node.
    pub fn strides(&self) -> Result<Vec<usize>> {
        let mut st = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            st[n.id] = match &n.kind {
                NodeKind::Input { .. } => 1,
                NodeKind::Conv { stride, .. } | NodeKind::MaxPool { stride, .. } => {
                    st[n.inputs[0]] * stride
                }
                NodeKind::Upsample { factor } => {
                    let s = st[n.inputs[0]];
                    if s % factor != 0 {
                        return Err(GraphError::Invalid(format!(
                            "upsample {} would produce fractional stride",
                            n.id
                        )));
                    }
                    s / factor
                }
                NodeKind::Concat | NodeKind::Add => {
                    let s = st[n.inputs[0]];
                    for &i in &n.inputs[1..] {
                        if st[i] != s {
                            return Err(GraphError::Invalid(format!(
                                "node {} merges strides {s} and {}",
                                n.id, st[i]
                            )));
                        }
                    }
                    s
                }
                _ => st[n.inputs[0]],
            };
        }
        Ok(st)
    }

    /// Framework-style layer numbering. Returns (layer count, node -> layer).
    pub fn layer_map(&self) -> (usize, Vec<Option<usize>>) {
        let mut map = vec![None; self.nodes.len()];
        let mut layer = 0usize;
        let mut i = 0;
        while i < self.nodes.len() {
            match self.nodes[i].kind {
                NodeKind::Input { .. } => {
                    i += 1;
                }
                NodeKind::Conv { .. } => {
                    map[i] = Some(layer);
                    let mut j = i + 1;
                    if j < self.nodes.len()
                        && matches!(self.nodes[j].kind, NodeKind::Bn)
                        && self.nodes[j].inputs == [i]
                    {
                        map[j] = Some(layer);
                        j += 1;
                        if j < self.nodes.len()
                            && matches!(self.nodes[j].kind, NodeKind::Act { .. })
                            && self.nodes[j].inputs == [j - 1]
                        {
                            map[j] = Some(layer);
                            j += 1;
                        }
                    }
                    layer += 1;
                    i = j;
                }
                _ => {
                    map[i] = Some(layer);
                    layer += 1;
                    i += 1;
                }
            }
        }
        (layer, map)
    }

    pub fn layer_count(&self) -> usize {
        self.layer_map().0
    }

    /// Canonical text form; `parse` of the output reproduces the graph.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let _ = write!(s, "{} {}", n.id, n.kind.kind_name());
            match &n.kind {
                NodeKind::Input { channels } => {
                    let _ = write!(s, " c={channels}");
                }
                NodeKind::Conv { k, stride, out_channels, bias } => {
                    let _ = write!(s, " k={k} s={stride} c={out_channels}");
                    if *bias {
                        let _ = write!(s, " bias=1");
                    }
                }
                NodeKind::Act { act } => {
                    let _ = write!(
                        s,
                        " fn={}",
                        match act {
                            ActKind::Mish => "mish",
                            ActKind::Leaky => "leaky",
                        }
                    );
                }
                NodeKind::Upsample { factor } => {
                    let _ = write!(s, " f={factor}");
                }
                NodeKind::MaxPool { k, stride } => {
                    let _ = write!(s, " k={k} s={stride}");
                }
                NodeKind::DetectHead { stride, anchors, classes } => {
                    let _ = write!(s, " stride={stride} anchors={anchors} classes={classes}");
                }
                _ => {}
            }
            if let Some(g) = n.group {
                let _ = write!(s, " group={g}");
            }
            if !n.inputs.is_empty() {
                let list =
                    n.inputs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
                let _ = write!(s, " inputs=[{list}]");
            }
            s.push('\n');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn parse_kv(tok: &str, line: usize) -> Result<(&str, &str)> {
    match tok.split_once('=') {
        Some((k, v)) => Ok((k, v)),
        None => perr(line, format!("expected key=value, got `{tok}`")),
    }
}

fn parse_usize(v: &str, line: usize, what: &str) -> Result<usize> {
    v.parse().map_err(|_| GraphError::Parse { line, msg: format!("bad {what}: `{v}`") })
}

/// Parse and validate a descriptor document.
pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut nodes: Vec<NodeSpec> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let mut toks = stripped.split_whitespace();
        let id: usize = match toks.next().unwrap().parse() {
            Ok(v) => v,
            Err(_) => return perr(line, "node id must be an integer"),
        };
        let kind_name = match toks.next() {
            Some(k) => k,
            None => return perr(line, "missing node kind"),
        };
        let mut attrs: BTreeMap<&str, &str> = BTreeMap::new();
        let mut inputs: Vec<usize> = Vec::new();
        for tok in toks {
            let (k, v) = parse_kv(tok, line)?;
            if k == "inputs" {
                let list = v.trim_start_matches('[').trim_end_matches(']');
                if !list.is_empty() {
                    for part in list.split(',') {
                        inputs.push(parse_usize(part.trim(), line, "input id")?);
                    }
                }
            } else {
                attrs.insert(k, v);
            }
        }
        let get = |key: &str| -> Option<&str> { attrs.get(key).copied() };
        let need = |key: &str| -> Result<&str> {
            get(key).ok_or(GraphError::Parse { line, msg: format!("{kind_name} requires {key}=") })
        };
        let kind = match kind_name {
            "input" => NodeKind::Input { channels: parse_usize(need("c")?, line, "c")? },
            "conv" => NodeKind::Conv {
                k: parse_usize(need("k")?, line, "k")?,
                stride: parse_usize(need("s")?, line, "s")?,
                out_channels: parse_usize(need("c")?, line, "c")?,
                bias: get("bias") == Some("1"),
            },
            "bn" => NodeKind::Bn,
            "act" => NodeKind::Act {
                act: match need("fn")? {
                    "mish" => ActKind::Mish,
                    "leaky" => ActKind::Leaky,
                    other => return perr(line, format!("unknown activation `{other}`")),
                },
            },
            "add" => NodeKind::Add,
            "concat" => NodeKind::Concat,
            "upsample" => NodeKind::Upsample {
                factor: match get("f") {
                    Some(v) => parse_usize(v, line, "f")?,
                    None => 2,
                },
            },
            "maxpool" => NodeKind::MaxPool {
                k: parse_usize(need("k")?, line, "k")?,
                stride: parse_usize(need("s")?, line, "s")?,
            },
            "detect_head" => NodeKind::DetectHead {
                stride: parse_usize(need("stride")?, line, "stride")?,
                anchors: parse_usize(need("anchors")?, line, "anchors")?,
                classes: parse_usize(need("classes")?, line, "classes")?,
            },
            other => return perr(line, format!("unknown node kind `{other}`")),
        };
        let group = match get("group") {
            Some(v) => Some(parse_usize(v, line, "group")?),
            None => None,
        };

        if id != nodes.len() {
            return perr(line, format!("node ids must be contiguous; expected {}, got {id}", nodes.len()));
        }
        if matches!(kind, NodeKind::Input { .. }) != inputs.is_empty() {
            return perr(line, "exactly input nodes take no inputs");
        }
        for &i in &inputs {
            if i >= id {
                return perr(
                    line,
                    format!("input id {i} does not precede node {id} (cycle or forward reference)"),
                );
            }
        }
        nodes.push(NodeSpec { id, kind, inputs, group });
    }

    if nodes.is_empty() {
        return perr(0, "empty node list");
    }
    build_graph(nodes)
}

/// Validate a node list and derive heads plus coupled sets.
pub fn build_graph(nodes: Vec<NodeSpec>) -> Result<Graph> {
    if !matches!(nodes.first().map(|n| &n.kind), Some(NodeKind::Input { .. })) {
        return Err(GraphError::Invalid("first node must be the input".to_string()));
    }
    if nodes.iter().skip(1).any(|n| matches!(n.kind, NodeKind::Input { .. })) {
        return Err(GraphError::Invalid("only one input node allowed".to_string()));
    }
    for n in &nodes {
        let arity_ok = match n.kind {
            NodeKind::Input { .. } => n.inputs.is_empty(),
            NodeKind::Add => n.inputs.len() == 2,
            NodeKind::Concat => !n.inputs.is_empty(),
            _ => n.inputs.len() == 1,
        };
        if !arity_ok {
            return Err(GraphError::Invalid(format!(
                "node {} ({}) has {} inputs",
                n.id,
                n.kind.kind_name(),
                n.inputs.len()
            )));
        }
        if let NodeKind::Conv { k, stride, out_channels, .. } = n.kind {
            if k % 2 == 0 || k == 0 || !(1..=2).contains(&stride) || out_channels == 0 {
                return Err(GraphError::Invalid(format!(
                    "conv {} has invalid attributes (k={k}, s={stride}, c={out_channels})",
                    n.id
                )));
            }
        }
    }

    let mut graph = Graph { nodes, heads: Vec::new(), coupled: Vec::new() };

    // conv -> bn -> act adjacency, except convs feeding a detect_head
    let consumers = graph.consumers();
    for n in &graph.nodes {
        match n.kind {
            NodeKind::Conv { .. } => {
                let feeds_head = consumers[n.id]
                    .iter()
                    .all(|&c| matches!(graph.nodes[c].kind, NodeKind::DetectHead { .. }))
                    && !consumers[n.id].is_empty();
                if feeds_head {
                    continue;
                }
                let bn_ok = graph
                    .nodes
                    .get(n.id + 1)
                    .map(|b| matches!(b.kind, NodeKind::Bn) && b.inputs == [n.id])
                    .unwrap_or(false);
                let act_ok = graph
                    .nodes
                    .get(n.id + 2)
                    .map(|a| matches!(a.kind, NodeKind::Act { .. }) && a.inputs == [n.id + 1])
                    .unwrap_or(false);
                if !bn_ok || !act_ok {
                    return Err(GraphError::Invalid(format!(
                        "conv {} must be immediately followed by bn and act",
                        n.id
                    )));
                }
            }
            NodeKind::Bn => {
                if !matches!(graph.nodes[n.inputs[0]].kind, NodeKind::Conv { .. }) {
                    return Err(GraphError::Invalid(format!("bn {} input is not a conv", n.id)));
                }
            }
            _ => {}
        }
    }

    // shape sanity (also validates add channel agreement, head widths)
    let channels = graph.channels()?;
    let strides = graph.strides()?;

    // heads: exactly three, strides 8/16/32
    let mut heads: Vec<(usize, usize)> = graph
        .nodes
        .iter()
        .filter_map(|n| match n.kind {
            NodeKind::DetectHead { stride, .. } => Some((stride, n.id)),
            _ => None,
        })
        .collect();
    heads.sort_unstable();
    if heads.len() != 3 || heads.iter().map(|(s, _)| *s).collect::<Vec<_>>() != vec![8, 16, 32] {
        return Err(GraphError::Invalid(format!(
            "expected exactly 3 detect heads at strides 8/16/32, found {:?}",
            heads.iter().map(|(s, _)| *s).collect::<Vec<_>>()
        )));
    }
    for &(declared, id) in &heads {
        let actual = strides[graph.nodes[id].inputs[0]];
        if actual != declared {
            return Err(GraphError::Invalid(format!(
                "detect_head {id} declares stride {declared} but sits at stride {actual}"
            )));
        }
    }
    graph.heads = heads.into_iter().map(|(_, id)| id).collect();

    graph.coupled = derive_coupled_sets(&graph, &channels)?;
    Ok(graph)
}

/// Walk back from every `add` through channel-preserving nodes to the convs
/// whose output channels it couples, then union overlapping groups.
fn derive_coupled_sets(graph: &Graph, channels: &[usize]) -> Result<Vec<CoupledSet>> {
    let n = graph.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }

    let mut touched = vec![false; n];
    for node in &graph.nodes {
        if !matches!(node.kind, NodeKind::Add) {
            continue;
        }
        let mut convs: Vec<usize> = Vec::new();
        let mut stack: Vec<usize> = node.inputs.clone();
        while let Some(cur) = stack.pop() {
            match graph.nodes[cur].kind {
                NodeKind::Conv { .. } => convs.push(cur),
                NodeKind::Bn | NodeKind::Act { .. } | NodeKind::Add => {
                    stack.extend(graph.nodes[cur].inputs.iter().copied())
                }
                _ => {
                    return Err(GraphError::Invalid(format!(
                        "add {} is fed through unsupported node {} ({})",
                        node.id,
                        cur,
                        graph.nodes[cur].kind.kind_name()
                    )))
                }
            }
        }
        for &c in &convs {
            touched[c] = true;
            let (a, b) = (find(&mut parent, convs[0]), find(&mut parent, c));
            parent[a.max(b)] = a.min(b);
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for conv in 0..n {
        if touched[conv] {
            let root = find(&mut parent, conv);
            groups.entry(root).or_default().push(conv);
        }
    }
    let mut sets = Vec::new();
    for (_, mut conv_ids) in groups {
        conv_ids.sort_unstable();
        let c0 = channels[conv_ids[0]];
        if let Some(&bad) = conv_ids.iter().find(|&&c| channels[c] != c0) {
            return Err(GraphError::Invalid(format!(
                "coupled convs {conv_ids:?} disagree on channels (conv {bad})"
            )));
        }
        sets.push(CoupledSet { conv_ids });
    }
    Ok(sets)
}

// ---------------------------------------------------------------------------
// Group assignment
// ---------------------------------------------------------------------------

/// Populate group indices for every conv/bn/act node.
///
/// When the descriptor tags every conv with `group=`, tags are propagated
/// to the owned bn/act nodes. Otherwise groups are inferred from topology:
/// convs feeding a detect_head go to the last group, convs downstream of
/// an upsample to the enhancement group, and backbone convs split by
/// feature-map stride (<=8, 16, >=32). The inference is a fallback for
/// untagged toy graphs; the bundled descriptors carry explicit tags.
pub fn assign_groups(graph: &mut Graph) -> Result<()> {
    let conv_ids = graph.conv_ids();
    let all_tagged = conv_ids.iter().all(|&id| graph.nodes[id].group.is_some());

    if !all_tagged {
        let strides = graph.strides()?;
        let consumers = graph.consumers();
        // nodes downstream of any upsample
        let mut downstream = vec![false; graph.nodes.len()];
        let mut stack: Vec<usize> = graph
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Upsample { .. }))
            .map(|n| n.id)
            .collect();
        while let Some(cur) = stack.pop() {
            for &c in &consumers[cur] {
                if !downstream[c] {
                    downstream[c] = true;
                    stack.push(c);
                }
            }
        }
        for &id in &conv_ids {
            if graph.nodes[id].group.is_some() {
                continue;
            }
            let feeds_head = consumers[id]
                .iter()
                .any(|&c| matches!(graph.nodes[c].kind, NodeKind::DetectHead { .. }));
            let g = if feeds_head {
                5
            } else if downstream[id] {
                4
            } else {
                match strides[id] {
                    0 => {
                        return Err(GraphError::Invalid(format!(
                            "conv {id} has undetermined scale"
                        )))
                    }
                    s if s <= 8 => 1,
                    16 => 2,
                    _ => 3,
                }
            };
            graph.nodes[id].group = Some(g);
        }
    }

    // propagate conv tags to the owned bn/act nodes
    for i in 0..graph.nodes.len() {
        if matches!(graph.nodes[i].kind, NodeKind::Bn) {
            let g = graph.nodes[graph.nodes[i].inputs[0]].group;
            graph.nodes[i].group = g;
            if let Some(a) = graph.nodes.get(i + 1) {
                if matches!(a.kind, NodeKind::Act { .. }) && a.inputs == [i] {
                    graph.nodes[i + 1].group = g;
                }
            }
        }
    }
    Ok(())
}
