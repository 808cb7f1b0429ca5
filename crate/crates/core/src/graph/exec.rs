//! Reference graph executor.

use std::collections::BTreeMap;

use super::{tensor, GraphError, ModelGraph, Op, Result, TensorMap, INPUT_ID};
use crate::tensor::{self as k, PoolKind, Tensor};

/// Evaluates the graph on one input and returns every node's output, keyed
/// by node id.
pub fn execute_graph(
    graph: &ModelGraph,
    weights: &TensorMap,
    input: &Tensor,
) -> Result<BTreeMap<String, Tensor>> {
    let mut outputs: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in graph.topo_order()? {
        let node = &graph.nodes[i];
        let wrap = |source| GraphError::Tensor {
            node: node.id.clone(),
            source,
        };
        let fetch = |id: &str| -> &Tensor {
            if id == INPUT_ID {
                input
            } else {
                &outputs[id]
            }
        };
        let x = fetch(&node.inputs[0]);
        let y = match &node.op {
            Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias } => {
                let w = tensor(weights, &node.id, weight)?;
                let b = bias
                    .as_deref()
                    .map(|b| tensor(weights, &node.id, b)?.as_f32().map_err(wrap))
                    .transpose()?;
                let op = node.op.weighted_op().expect("weighted op");
                op.apply(w, b, x).map_err(wrap)?
            }
            Op::Bn { .. } => {
                let p = graph.bn_params(node, weights)?;
                k::batch_norm(x, &p).map_err(wrap)?
            }
            Op::Relu => k::relu(x).map_err(wrap)?,
            Op::Add => {
                let mut acc = x.clone();
                for other in &node.inputs[1..] {
                    acc = k::add(&acc, fetch(other)).map_err(wrap)?;
                }
                acc
            }
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|s| fetch(s)).collect();
                k::concat(&parts).map_err(wrap)?
            }
            Op::Avgpool { global: true, .. } => k::global_avg_pool(x).map_err(wrap)?,
            Op::Avgpool {
                kernel,
                stride,
                padding,
                ..
            } => k::pool2d(x, PoolKind::Avg, *kernel, *stride, *padding).map_err(wrap)?,
            Op::Maxpool {
                kernel,
                stride,
                padding,
            } => k::pool2d(x, PoolKind::Max, *kernel, *stride, *padding).map_err(wrap)?,
            Op::Flatten => k::flatten(x).map_err(wrap)?,
        };
        outputs.insert(node.id.clone(), y);
    }
    Ok(outputs)
}

/// Output of the graph's designated output node.
pub fn run_output(graph: &ModelGraph, weights: &TensorMap, input: &Tensor) -> Result<Tensor> {
    let mut all = execute_graph(graph, weights, input)?;
    Ok(all.remove(&graph.output).expect("output id validated"))
}
