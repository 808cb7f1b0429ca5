//! Model comparison metrics and synthetic probes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::exec::execute_graph;
use crate::graph::{GraphError, ModelGraph, TensorMap};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("{labels} labels supplied for {probes} probes")]
    LabelCount { labels: usize, probes: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `count` tensors of i.i.d. standard normal entries from a seeded ChaCha8 stream.
pub fn gaussian_probes(shape: &[usize], count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(EvalError::Argument("probe count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Ok((0..count)
        .map(|_| {
            let data = (0..n)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            Tensor::from_f32(shape.to_vec(), data).expect("shape matches")
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f32)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ if v.is_nan() => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Mean squared error of every node output, averaged over elements and probes.
    pub per_layer_mse: BTreeMap<String, f64>,
    pub final_mse: f64,
    /// Top-1 accuracy of the second (quantized) model.
    pub top1: Option<f64>,
    /// Top-1 accuracy of the first (reference) model.
    pub top1_reference: Option<f64>,
    pub probe_count: usize,
    pub seed: Option<u64>,
}

fn check_topology(a: &ModelGraph, b: &ModelGraph) -> Result<()> {
    if a.output != b.output || a.nodes.len() != b.nodes.len() {
        return Err(EvalError::Topology("node count or output differs".into()));
    }
    let bn = b.node_ids();
    for n in &a.nodes {
        match bn.get(n.id.as_str()) {
            Some(m) if m.inputs == n.inputs && m.op.kind() == n.op.kind() => {}
            _ => return Err(EvalError::Topology(format!("node `{}` differs", n.id))),
        }
    }
    Ok(())
}

struct ProbeResult {
    sq_err: BTreeMap<String, (f64, usize)>,
    ref_class: usize,
    class: usize,
}

/// Runs both models on every probe and accumulates the error of the second
/// model against the first.
pub fn compare_models(
    reference: (&ModelGraph, &TensorMap),
    candidate: (&ModelGraph, &TensorMap),
    probes: &[Tensor],
    labels: Option<&[usize]>,
) -> Result<MetricReport> {
    check_topology(reference.0, candidate.0)?;
    if probes.is_empty() {
        return Err(EvalError::Argument("no probes supplied".into()));
    }
    if let Some(l) = labels {
        if l.len() != probes.len() {
            return Err(EvalError::LabelCount {
                labels: l.len(),
                probes: probes.len(),
            });
        }
    }
    let results: Vec<ProbeResult> = probes
        .par_iter()
        .map(|probe| -> Result<ProbeResult> {
            let a = execute_graph(reference.0, reference.1, probe)?;
            let b = execute_graph(candidate.0, candidate.1, probe)?;
            let mut sq_err = BTreeMap::new();
            for (id, x) in &a {
                let y = &b[id];
                let (xs, ys) = (
                    x.as_f32().map_err(|source| GraphError::Tensor {
                        node: id.clone(),
                        source,
                    })?,
                    y.as_f32().map_err(|source| GraphError::Tensor {
                        node: id.clone(),
                        source,
                    })?,
                );
                if xs.len() != ys.len() {
                    return Err(EvalError::Topology(format!(
                        "node `{id}` output shapes differ"
                    )));
                }
                let s: f64 = xs
                    .iter()
                    .zip(ys)
                    .map(|(p, q)| {
                        let d = f64::from(*p) - f64::from(*q);
                        d * d
                    })
                    .sum();
                sq_err.insert(id.clone(), (s, xs.len()));
            }
            let out = &reference.0.output;
            Ok(ProbeResult {
                sq_err,
                ref_class: argmax(a[out].as_f32().unwrap_or(&[])).unwrap_or(0),
                class: argmax(b[out].as_f32().unwrap_or(&[])).unwrap_or(0),
            })
        })
        .collect::<Result<_>>()?;

    let mut totals: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &results {
        for (id, (s, n)) in &r.sq_err {
            let e = totals.entry(id.clone()).or_default();
            e.0 += s;
            e.1 += n;
        }
    }
    let per_layer_mse: BTreeMap<String, f64> = totals
        .into_iter()
        .map(|(id, (s, n))| (id, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect();
    let final_mse = per_layer_mse[&reference.0.output];
    let accuracy = |pick: fn(&ProbeResult) -> usize| {
        labels.map(|l| {
            let hits = results.iter().zip(l).filter(|(r, &y)| pick(r) == y).count();
            hits as f64 / results.len() as f64
        })
    };
    Ok(MetricReport {
        per_layer_mse,
        final_mse,
        top1: accuracy(|r| r.class),
        top1_reference: accuracy(|r| r.ref_class),
        probe_count: probes.len(),
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;

    fn model() -> (ModelGraph, TensorMap) {
        let g = parse_graph(
            r#"{"input_shape": [2, 4, 4], "nodes": [
                {"id": "c", "op": "conv2d", "inputs": ["input"], "weight": "w", "padding": 1},
                {"id": "r", "op": "relu", "inputs": ["c"]},
                {"id": "p", "op": "avgpool", "inputs": ["r"], "global": true},
                {"id": "f", "op": "flatten", "inputs": ["p"]}
            ], "output": "f"}"#,
        )
        .unwrap();
        let mut w = TensorMap::new();
        let data = (0..54)
            .map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0)
            .collect();
        w.insert(
            "w".into(),
            Tensor::from_f32(vec![3, 2, 3, 3], data).unwrap(),
        );
        (g, w)
    }

    #[test]
    fn probes_are_seeded() {
        let a = gaussian_probes(&[2, 3], 4, 7).unwrap();
        assert_eq!(a, gaussian_probes(&[2, 3], 4, 7).unwrap());
        assert_ne!(a, gaussian_probes(&[2, 3], 4, 8).unwrap());
        assert!(matches!(
            gaussian_probes(&[2], 0, 1),
            Err(EvalError::Argument(_))
        ));
    }

    #[test]
    fn probe_mean_is_near_zero() {
        let p = gaussian_probes(&[1000], 1000, 42).unwrap();
        let sum: f64 = p
            .iter()
            .flat_map(|t| t.as_f32().unwrap())
            .map(|&x| f64::from(x))
            .sum();
        assert!((sum / 1e6).abs() < 0.01);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(argmax(&[-1.0]), Some(0));
    }

    #[test]
    fn identical_models_have_zero_error() {
        let (g, w) = model();
        let probes = gaussian_probes(&[2, 4, 4], 8, 1).unwrap();
        let fp = compare_models((&g, &w), (&g, &w), &probes, None).unwrap();
        assert!(fp.per_layer_mse.values().all(|&v| v == 0.0));
        assert_eq!(fp.top1, None);

        let labels: Vec<usize> = probes
            .iter()
            .map(|p| {
                let y = crate::graph::exec::run_output(&g, &w, p).unwrap();
                argmax(y.as_f32().unwrap()).unwrap()
            })
            .collect();
        let r = compare_models((&g, &w), (&g, &w), &probes, Some(&labels)).unwrap();
        assert_eq!(r.top1, Some(1.0));
        assert_eq!(r.top1_reference, Some(1.0));
        assert!(matches!(
            compare_models((&g, &w), (&g, &w), &probes, Some(&labels[1..])),
            Err(EvalError::LabelCount { .. })
        ));
    }

    #[test]
    fn mse_is_symmetric() {
        let (g, w) = model();
        let mut w2 = w.clone();
        w2.insert("w".into(), w["w"].scale(0.9).unwrap());
        let probes = gaussian_probes(&[2, 4, 4], 5, 3).unwrap();
        let ab = compare_models((&g, &w), (&g, &w2), &probes, None).unwrap();
        let ba = compare_models((&g, &w2), (&g, &w), &probes, None).unwrap();
        assert_eq!(ab.per_layer_mse, ba.per_layer_mse);
        assert!(ab.final_mse > 0.0);
    }

    #[test]
    fn topology_mismatch() {
        let (g, w) = model();
        let mut g2 = g.clone();
        g2.nodes[1].inputs = vec!["input".into()];
        let probes = gaussian_probes(&[2, 4, 4], 1, 3).unwrap();
        assert!(matches!(
            compare_models((&g, &w), (&g2, &w), &probes, None),
            Err(EvalError::Topology(_))
        ));
    }
}
