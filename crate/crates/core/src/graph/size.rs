//! Model size accounting.

use std::collections::HashSet;

use super::plan::QuantPlan;
use super::{GraphError, ModelGraph, Result, TensorMap};

pub const BYTES_PER_MB: f64 = 1e6;
pub const BYTES_PER_MIB: f64 = 1_048_576.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSize {
    pub layer: String,
    pub params: usize,
    pub bits: u32,
    pub code_bytes: f64,
    /// `f32` side data: quantization scale and compensation coefficients.
    pub overhead_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    /// Parameters outside layer weights (batch-norm, biases), stored as `f32`.
    pub other_params: usize,
    pub total_bytes: f64,
}

impl SizeReport {
    pub fn code_bytes(&self) -> f64 {
        self.layers.iter().map(|l| l.code_bytes).sum()
    }

    pub fn megabytes(&self) -> f64 {
        self.total_bytes / BYTES_PER_MB
    }

    pub fn mebibytes(&self) -> f64 {
        self.total_bytes / BYTES_PER_MIB
    }

    pub fn total_params(&self) -> usize {
        self.other_params + self.layers.iter().map(|l| l.params).sum::<usize>()
    }
}

/// Size of the model under `plan`. Layers below 32 bits carry one `f32`
/// scale; the high layer of each pair also carries one `f32` coefficient per
/// input channel. Every tensor the graph reads besides layer weights counts
/// at 32 bits.
pub fn size_report(
    graph: &ModelGraph,
    plan: &QuantPlan,
    weights: &TensorMap,
) -> Result<SizeReport> {
    plan.check_coverage(graph)?;
    let bits = plan.bits();
    let highs: HashSet<&str> = plan.pairs.iter().map(|p| p.high.as_str()).collect();

    let mut layers = Vec::new();
    let mut weight_names = HashSet::new();
    for node in graph.weighted_layers() {
        let name = node.op.weight_name().expect("weighted");
        weight_names.insert(name);
        let w = super::tensor(weights, &node.id, name)?;
        let b = bits[node.id.as_str()];
        let mut overhead = if b < 32 { 4 } else { 0 };
        if highs.contains(node.id.as_str()) {
            let (_, ipg, ..) = w.oikk().map_err(|source| GraphError::Tensor {
                node: node.id.clone(),
                source,
            })?;
            overhead += 4 * ipg * node.op.weighted_op().map_or(1, |op| op.groups());
        }
        layers.push(LayerSize {
            layer: node.id.clone(),
            params: w.len(),
            bits: b,
            code_bytes: w.len() as f64 * f64::from(b) / 8.0,
            overhead_bytes: overhead,
        });
    }

    let mut seen = HashSet::new();
    let mut other_params = 0;
    for node in &graph.nodes {
        for name in node.op.tensor_names() {
            if weight_names.contains(name) || !seen.insert(name) {
                continue;
            }
            other_params += super::tensor(weights, &node.id, name)?.len();
        }
    }

    let total_bytes = layers
        .iter()
        .map(|l| l.code_bytes + l.overhead_bytes as f64)
        .sum::<f64>()
        + 4.0 * other_params as f64;
    Ok(SizeReport {
        layers,
        other_params,
        total_bytes,
    })
}
