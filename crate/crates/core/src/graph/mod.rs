//! Model description: the graph document, tensor archive, executor, layer
//! pairing and size accounting.
//!
//! The graph document is JSON:
//!
//! ```json
//! {
//!   "input_shape": [3, 32, 32],
//!   "nodes": [
//!     {"id": "conv1", "op": "conv2d", "inputs": ["input"], "weight": "conv1.weight",
//!      "stride": 1, "padding": 1, "groups": 1},
//!     {"id": "bn1", "op": "bn", "inputs": ["conv1"], "gamma": "bn1.weight",
//!      "beta": "bn1.bias", "mean": "bn1.running_mean", "var": "bn1.running_var", "eps": 1e-5},
//!     {"id": "relu1", "op": "relu", "inputs": ["bn1"]}
//!   ],
//!   "output": "relu1",
//!   "pairs": [{"low": "conv1", "high": "conv2"}],
//!   "exempt": [{"layer": "conv1", "bits": 8}]
//! }
//! ```
//!
//! `input` is the reserved id of the graph input. See `docs/graph-format.md`
//! for every op kind and its fields.

pub mod archive;
pub mod exec;
pub mod plan;
pub mod size;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchNormParams, ConvParams, Tensor, TensorError, WeightedOp};

pub use archive::{load_archive, save_archive, ArchiveError, TensorMap};

/// Reserved id of the graph input.
pub const INPUT_ID: &str = "input";

pub const OP_KINDS: &[&str] = &[
    "conv2d", "linear", "bn", "relu", "add", "concat", "avgpool", "maxpool", "flatten",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("schema violation{}: {message}", node.as_ref().map(|n| format!(" at node `{n}`")).unwrap_or_default())]
    Schema {
        node: Option<String>,
        message: String,
    },
    #[error("node `{node}` has unknown op kind `{op}` (expected one of {})", OP_KINDS.join(", "))]
    UnknownOp { node: String, op: String },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` reads undefined input `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("cycle detected among nodes [{}]", .0.join(", "))]
    Cycle(Vec<String>),
    #[error("channel mismatch at node `{node}`: {message}")]
    ChannelMismatch { node: String, message: String },
    #[error("node `{node}` references tensor `{name}` missing from the archive")]
    MissingTensor { node: String, name: String },
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("at node `{node}`: {source}")]
    Tensor {
        node: String,
        #[source]
        source: TensorError,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

fn default_one() -> usize {
    1
}

fn default_eps() -> f32 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Conv2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_one")]
        groups: usize,
    },
    Linear {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Bn {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        #[serde(default = "default_eps")]
        eps: f32,
    },
    Relu,
    Add,
    Concat,
    Avgpool {
        #[serde(default)]
        global: bool,
        #[serde(default)]
        kernel: usize,
        #[serde(default)]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Flatten,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Bn { .. } => "bn",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Avgpool { .. } => "avgpool",
            Op::Maxpool { .. } => "maxpool",
            Op::Flatten => "flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::Linear { .. })
    }

    /// Conv/linear layer kind, for weighted ops.
    pub fn weighted_op(&self) -> Option<WeightedOp> {
        match *self {
            Op::Conv2d {
                stride,
                padding,
                groups,
                ..
            } => Some(WeightedOp::Conv(ConvParams {
                stride,
                padding,
                groups,
            })),
            Op::Linear { .. } => Some(WeightedOp::Linear),
            _ => None,
        }
    }

    pub fn weight_name(&self) -> Option<&str> {
        match self {
            Op::Conv2d { weight, .. } | Op::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias_name(&self) -> Option<&str> {
        match self {
            Op::Conv2d { bias, .. } | Op::Linear { bias, .. } => bias.as_deref(),
            _ => None,
        }
    }

    /// Every archive tensor this op reads.
    pub fn tensor_names(&self) -> Vec<&str> {
        match self {
            Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias } => {
                std::iter::once(weight.as_str())
                    .chain(bias.as_deref())
                    .collect()
            }
            Op::Bn {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![gamma, beta, mean, var],
            _ => Vec::new(),
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub low: String,
    pub high: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemptAnnotation {
    pub layer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    pub nodes: Vec<Node>,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<PairAnnotation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exempt: Option<Vec<ExemptAnnotation>>,
}

/// Parses and structurally validates a graph document.
pub fn parse_graph(text: &str) -> Result<ModelGraph> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GraphError::Schema {
        node: None,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| GraphError::Schema {
        node: None,
        message: "document must be an object".into(),
    })?;
    for key in obj.keys() {
        if !matches!(
            key.as_str(),
            "nodes" | "output" | "pairs" | "exempt" | "input_shape"
        ) {
            return Err(GraphError::Schema {
                node: None,
                message: format!("unknown top-level key `{key}`"),
            });
        }
    }
    let nodes = obj
        .get("nodes")
        .and_then(|n| n.as_array())
        .ok_or_else(|| GraphError::Schema {
            node: None,
            message: "missing `nodes` array".into(),
        })?;
    for (i, node) in nodes.iter().enumerate() {
        let id = node
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| format!("#{i}"));
        match node.get("op").and_then(|v| v.as_str()) {
            Some(op) if OP_KINDS.contains(&op) => {}
            Some(op) => {
                return Err(GraphError::UnknownOp {
                    node: id,
                    op: op.to_owned(),
                })
            }
            None => {
                return Err(GraphError::Schema {
                    node: Some(id),
                    message: "missing string field `op`".into(),
                })
            }
        }
        serde_json::from_value::<Node>(node.clone()).map_err(|e| GraphError::Schema {
            node: Some(id),
            message: e.to_string(),
        })?;
    }
    let graph: ModelGraph = serde_json::from_value(value).map_err(|e| GraphError::Schema {
        node: None,
        message: e.to_string(),
    })?;
    graph.validate()?;
    Ok(graph)
}

impl ModelGraph {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes") + "\n"
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Structural checks: unique ids, resolvable inputs, arity, acyclicity.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if n.id == INPUT_ID {
                return Err(GraphError::Schema {
                    node: Some(n.id.clone()),
                    message: format!("`{INPUT_ID}` is reserved for the graph input"),
                });
            }
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
        }
        for n in &self.nodes {
            match n.op.arity() {
                Some(k) if n.inputs.len() != k => {
                    return Err(GraphError::Schema {
                        node: Some(n.id.clone()),
                        message: format!(
                            "`{}` takes {k} input(s), got {}",
                            n.op.kind(),
                            n.inputs.len()
                        ),
                    })
                }
                None if n.inputs.is_empty() => {
                    return Err(GraphError::Schema {
                        node: Some(n.id.clone()),
                        message: format!("`{}` needs at least one input", n.op.kind()),
                    })
                }
                _ => {}
            }
            for input in &n.inputs {
                if input != INPUT_ID && !ids.contains(input.as_str()) {
                    return Err(GraphError::UnknownInput {
                        node: n.id.clone(),
                        input: input.clone(),
                    });
                }
            }
            if let Op::Conv2d { stride, groups, .. } = n.op {
                if stride == 0 || groups == 0 {
                    return Err(GraphError::Schema {
                        node: Some(n.id.clone()),
                        message: "stride and groups must be positive".into(),
                    });
                }
            }
            match n.op {
                Op::Maxpool { kernel, stride, .. } if kernel == 0 || stride == 0 => {
                    return Err(GraphError::Schema {
                        node: Some(n.id.clone()),
                        message: "pool kernel and stride must be positive".into(),
                    })
                }
                Op::Avgpool {
                    global: false,
                    kernel,
                    stride,
                    ..
                } if kernel == 0 || stride == 0 => {
                    return Err(GraphError::Schema {
                        node: Some(n.id.clone()),
                        message: "non-global avgpool needs positive kernel and stride".into(),
                    })
                }
                _ => {}
            }
        }
        if !ids.contains(self.output.as_str()) {
            return Err(GraphError::UnknownInput {
                node: "<output>".into(),
                input: self.output.clone(),
            });
        }
        self.topo_order()?;
        Ok(())
    }

    /// Kahn's algorithm; ties are broken by document order.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for input in &n.inputs {
                if let Some(&src) = index.get(input.as_str()) {
                    indegree[i] += 1;
                    users[src].push(i);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..self.nodes.len())
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let mut stuck: Vec<String> = (0..self.nodes.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            stuck.sort();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Node ids consuming each node's output, in document order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in &self.nodes {
            for input in &n.inputs {
                map.entry(input.as_str()).or_default().push(n.id.as_str());
            }
        }
        map
    }

    /// Weighted layers (conv/linear) in topological order.
    pub fn weighted_layers(&self) -> Vec<&Node> {
        self.topo_order()
            .map(|order| {
                order
                    .into_iter()
                    .map(|i| &self.nodes[i])
                    .filter(|n| n.op.is_weighted())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Checks that every referenced tensor exists and that channel counts
    /// agree along every edge.
    pub fn check_tensors(&self, weights: &TensorMap) -> Result<()> {
        #[derive(Clone, Copy)]
        struct Feat {
            channels: Option<usize>,
            unit_spatial: bool,
        }
        let mut feats: HashMap<&str, Feat> = HashMap::new();
        let input_channels = self
            .input_shape
            .as_ref()
            .map(|s| s.iter().product::<usize>());
        feats.insert(
            INPUT_ID,
            Feat {
                channels: self.input_shape.as_ref().and_then(|s| s.first().copied()),
                unit_spatial: self
                    .input_shape
                    .as_ref()
                    .is_some_and(|s| s.iter().skip(1).all(|&d| d == 1)),
            },
        );
        let mismatch = |node: &str, message: String| GraphError::ChannelMismatch {
            node: node.to_owned(),
            message,
        };
        for i in self.topo_order()? {
            let n = &self.nodes[i];
            for name in n.op.tensor_names() {
                if !weights.contains_key(name) {
                    return Err(GraphError::MissingTensor {
                        node: n.id.clone(),
                        name: name.to_owned(),
                    });
                }
            }
            let ins: Vec<Feat> = n.inputs.iter().map(|s| feats[s.as_str()]).collect();
            let x = ins[0];
            let out = match &n.op {
                Op::Conv2d {
                    weight,
                    bias,
                    groups,
                    ..
                } => {
                    let (o, ipg, _, _) = weights[weight]
                        .oikk()
                        .map_err(|e| mismatch(&n.id, e.to_string()))?;
                    if weights[weight].shape().len() != 4 {
                        return Err(mismatch(&n.id, "conv2d weight must be 4-D".into()));
                    }
                    if let Some(c) = x.channels {
                        if c != ipg * groups {
                            return Err(mismatch(
                                &n.id,
                                format!("input has {c} channels, weight expects {ipg} × {groups} groups"),
                            ));
                        }
                    }
                    if o % groups != 0 {
                        return Err(mismatch(
                            &n.id,
                            format!("{o} output channels not divisible by {groups} groups"),
                        ));
                    }
                    check_vector(weights, bias.as_deref(), o, &n.id)?;
                    Feat {
                        channels: Some(o),
                        unit_spatial: false,
                    }
                }
                Op::Linear { weight, bias } => {
                    let shape = weights[weight].shape();
                    let (o, i) = match shape {
                        [o, i] => (*o, *i),
                        _ => {
                            return Err(mismatch(
                                &n.id,
                                format!("linear weight must be 2-D, got {shape:?}"),
                            ))
                        }
                    };
                    let features = if n.inputs[0] == INPUT_ID {
                        input_channels
                    } else if x.unit_spatial {
                        x.channels
                    } else {
                        None
                    };
                    if let Some(f) = features {
                        if f != i {
                            return Err(mismatch(
                                &n.id,
                                format!("input has {f} features, weight expects {i}"),
                            ));
                        }
                    }
                    check_vector(weights, bias.as_deref(), o, &n.id)?;
                    Feat {
                        channels: Some(o),
                        unit_spatial: true,
                    }
                }
                Op::Bn {
                    gamma,
                    beta,
                    mean,
                    var,
                    ..
                } => {
                    let len = weights[gamma].len();
                    for name in [beta, mean, var] {
                        if weights[name].len() != len {
                            return Err(mismatch(
                                &n.id,
                                "batch-norm vectors differ in length".into(),
                            ));
                        }
                    }
                    if let Some(c) = x.channels {
                        if c != len {
                            return Err(mismatch(
                                &n.id,
                                format!("input has {c} channels, batch-norm has {len}"),
                            ));
                        }
                    }
                    x
                }
                Op::Relu | Op::Maxpool { .. } => x,
                Op::Avgpool { global, .. } => Feat {
                    channels: x.channels,
                    unit_spatial: *global || x.unit_spatial,
                },
                Op::Flatten => Feat {
                    channels: if x.unit_spatial { x.channels } else { None },
                    unit_spatial: true,
                },
                Op::Add => {
                    let known: Vec<usize> = ins.iter().filter_map(|f| f.channels).collect();
                    if known.windows(2).any(|w| w[0] != w[1]) {
                        return Err(mismatch(
                            &n.id,
                            format!("add operands have channels {known:?}"),
                        ));
                    }
                    Feat {
                        channels: known.first().copied(),
                        unit_spatial: ins.iter().all(|f| f.unit_spatial),
                    }
                }
                Op::Concat => Feat {
                    channels: ins.iter().map(|f| f.channels).sum(),
                    unit_spatial: ins.iter().all(|f| f.unit_spatial),
                },
            };
            feats.insert(n.id.as_str(), out);
        }
        Ok(())
    }

    /// Batch-norm parameters of a `bn` node.
    pub fn bn_params(&self, node: &Node, weights: &TensorMap) -> Result<BatchNormParams> {
        let Op::Bn {
            gamma,
            beta,
            mean,
            var,
            eps,
        } = &node.op
        else {
            return Err(GraphError::Schema {
                node: Some(node.id.clone()),
                message: "not a batch-norm node".into(),
            });
        };
        let get = |name: &String| -> Result<Vec<f32>> {
            let t = weights.get(name).ok_or_else(|| GraphError::MissingTensor {
                node: node.id.clone(),
                name: name.clone(),
            })?;
            t.as_f32()
                .map(<[f32]>::to_vec)
                .map_err(|source| GraphError::Tensor {
                    node: node.id.clone(),
                    source,
                })
        };
        BatchNormParams::new(get(gamma)?, get(beta)?, get(mean)?, get(var)?, *eps).map_err(
            |source| GraphError::Tensor {
                node: node.id.clone(),
                source,
            },
        )
    }

    /// Ids of every node, sorted; used for structural comparisons.
    pub fn node_ids(&self) -> BTreeMap<&str, &Node> {
        self.nodes.iter().map(|n| (n.id.as_str(), n)).collect()
    }
}

fn check_vector(weights: &TensorMap, name: Option<&str>, len: usize, node: &str) -> Result<()> {
    if let Some(name) = name {
        let got = weights[name].len();
        if got != len {
            return Err(GraphError::ChannelMismatch {
                node: node.to_owned(),
                message: format!("bias `{name}` has {got} entries, layer has {len} outputs"),
            });
        }
    }
    Ok(())
}

/// Convenience: resolve a required tensor for a node.
pub(crate) fn tensor<'w>(weights: &'w TensorMap, node: &str, name: &str) -> Result<&'w Tensor> {
    weights.get(name).ok_or_else(|| GraphError::MissingTensor {
        node: node.to_owned(),
        name: name.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"{"nodes": [{"id": "c", "op": "conv2d", "inputs": ["input"], "weight": "w"}], "output": "c"}"#;

    #[test]
    fn minimal_document() {
        let g = parse_graph(SINGLE).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(
            g.nodes[0].op,
            Op::Conv2d {
                weight: "w".into(),
                bias: None,
                stride: 1,
                padding: 0,
                groups: 1
            }
        );
    }

    #[test]
    fn cycle_lists_ids() {
        let doc = r#"{"nodes": [
            {"id": "a", "op": "relu", "inputs": ["b"]},
            {"id": "b", "op": "relu", "inputs": ["a"]},
            {"id": "c", "op": "relu", "inputs": ["input"]}
        ], "output": "c"}"#;
        assert_eq!(
            parse_graph(doc).unwrap_err(),
            GraphError::Cycle(vec!["a".into(), "b".into()])
        );
    }

    #[test]
    fn distinct_diagnostics() {
        let unknown =
            r#"{"nodes": [{"id": "x", "op": "softmax", "inputs": ["input"]}], "output": "x"}"#;
        assert!(
            matches!(parse_graph(unknown), Err(GraphError::UnknownOp { node, .. }) if node == "x")
        );

        let dup = r#"{"nodes": [{"id": "x", "op": "relu", "inputs": ["input"]},
                                 {"id": "x", "op": "relu", "inputs": ["input"]}], "output": "x"}"#;
        assert_eq!(
            parse_graph(dup).unwrap_err(),
            GraphError::DuplicateId("x".into())
        );

        let dangling =
            r#"{"nodes": [{"id": "x", "op": "relu", "inputs": ["nope"]}], "output": "x"}"#;
        assert!(matches!(
            parse_graph(dangling),
            Err(GraphError::UnknownInput { .. })
        ));

        let missing =
            r#"{"nodes": [{"id": "x", "op": "conv2d", "inputs": ["input"]}], "output": "x"}"#;
        assert!(
            matches!(parse_graph(missing), Err(GraphError::Schema { node: Some(n), .. }) if n == "x")
        );

        let extra = r#"{"nodes": [], "output": "x", "colour": 1}"#;
        assert!(matches!(parse_graph(extra), Err(GraphError::Schema { .. })));

        assert!(matches!(
            parse_graph("not json"),
            Err(GraphError::Schema { .. })
        ));
    }

    #[test]
    fn serialize_round_trip() {
        let g = parse_graph(SINGLE).unwrap();
        assert_eq!(parse_graph(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn channel_checks() {
        let g = parse_graph(SINGLE).unwrap();
        let mut w = TensorMap::new();
        assert!(matches!(
            g.check_tensors(&w),
            Err(GraphError::MissingTensor { .. })
        ));
        w.insert("w".into(), Tensor::zeros(vec![4, 3, 3, 3]));
        g.check_tensors(&w).unwrap();

        let mut g2 = g.clone();
        g2.input_shape = Some(vec![2, 8, 8]);
        assert!(matches!(
            g2.check_tensors(&w),
            Err(GraphError::ChannelMismatch { .. })
        ));
    }
}
