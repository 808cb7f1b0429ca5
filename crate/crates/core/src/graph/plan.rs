//! Layer pairing and bit-width assignment.
//!
//! Two weighted layers form a link when the first one's output reaches the
//! second through a single-consumer chain of `bn`/`relu` nodes only. Maximal
//! chains of links are split into consecutive (low, high) pairs; a layer left
//! without a partner is exempt and keeps the high bit-width. Branch points
//! (residual adds, concatenations, pooling, shared inputs) break chains, so
//! stems, shortcut projections and classifiers end up exempt on their own.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{GraphError, ModelGraph, Op, Result, TensorMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairAssignment {
    pub low: String,
    pub high: String,
    pub low_bits: u32,
    pub high_bits: u32,
    /// Ids of the `bn`/`relu` nodes between the two layers, in order.
    pub between: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemption {
    pub layer: String,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantPlan {
    pub pairs: Vec<PairAssignment>,
    pub exempt: Vec<Exemption>,
}

impl QuantPlan {
    /// Every weighted layer exempt at `bits`.
    pub fn uniform(graph: &ModelGraph, bits: u32) -> Self {
        let mut exempt: Vec<Exemption> = graph
            .weighted_layers()
            .into_iter()
            .map(|n| Exemption {
                layer: n.id.clone(),
                bits,
            })
            .collect();
        exempt.sort_by(|a, b| a.layer.cmp(&b.layer));
        Self {
            pairs: Vec::new(),
            exempt,
        }
    }

    /// Bit-width assigned to each layer.
    pub fn bits(&self) -> BTreeMap<&str, u32> {
        let mut m = BTreeMap::new();
        for p in &self.pairs {
            m.insert(p.low.as_str(), p.low_bits);
            m.insert(p.high.as_str(), p.high_bits);
        }
        for e in &self.exempt {
            m.insert(e.layer.as_str(), e.bits);
        }
        m
    }

    /// Every weighted layer appears exactly once.
    pub fn check_coverage(&self, graph: &ModelGraph) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for p in &self.pairs {
            *seen.entry(&p.low).or_default() += 1;
            *seen.entry(&p.high).or_default() += 1;
        }
        for e in &self.exempt {
            *seen.entry(&e.layer).or_default() += 1;
        }
        for n in graph.weighted_layers() {
            match seen.remove(n.id.as_str()) {
                Some(1) => {}
                Some(k) => {
                    return Err(GraphError::Coverage(format!(
                        "layer `{}` is assigned {k} times",
                        n.id
                    )))
                }
                None => {
                    return Err(GraphError::Coverage(format!(
                        "layer `{}` is not covered",
                        n.id
                    )))
                }
            }
        }
        if let Some(extra) = seen.keys().next() {
            return Err(GraphError::Coverage(format!(
                "`{extra}` is not a weighted layer of the graph"
            )));
        }
        Ok(())
    }
}

/// The weighted layer reached from `layer` through only bn/relu nodes, with
/// the intermediate node ids.
fn successor(
    graph: &ModelGraph,
    consumers: &HashMap<&str, Vec<&str>>,
    layer: &str,
) -> Option<(String, Vec<String>)> {
    let mut current = layer;
    let mut between = Vec::new();
    loop {
        if current == graph.output {
            return None;
        }
        let next = match consumers.get(current).map(Vec::as_slice) {
            Some([only]) => *only,
            _ => return None,
        };
        let node = graph.node(next)?;
        match node.op {
            Op::Bn { .. } | Op::Relu => {
                between.push(next.to_owned());
                current = next;
            }
            Op::Conv2d { .. } | Op::Linear { .. } => return Some((next.to_owned(), between)),
            _ => return None,
        }
    }
}

fn channels(weights: &TensorMap, graph: &ModelGraph, id: &str) -> Result<(usize, usize)> {
    let node = graph.node(id).expect("layer exists");
    let name = node.op.weight_name().expect("weighted layer");
    let w = super::tensor(weights, id, name)?;
    let (o, ipg, ..) = w.oikk().map_err(|source| GraphError::Tensor {
        node: id.to_owned(),
        source,
    })?;
    let groups = node.op.weighted_op().map_or(1, |op| op.groups());
    Ok((o, ipg * groups))
}

fn check_pair_channels(
    weights: &TensorMap,
    graph: &ModelGraph,
    low: &str,
    high: &str,
) -> Result<()> {
    let (out, _) = channels(weights, graph, low)?;
    let (_, inp) = channels(weights, graph, high)?;
    if out != inp {
        return Err(GraphError::Pairing(format!(
            "`{low}` has {out} output channels but `{high}` consumes {inp}"
        )));
    }
    Ok(())
}

/// Builds the quantization plan for `graph`. Pair and exemption annotations
/// in the document take precedence over discovery.
pub fn discover_pairs(
    graph: &ModelGraph,
    weights: &TensorMap,
    low_bits: u32,
    high_bits: u32,
) -> Result<QuantPlan> {
    let consumers = graph.consumers();
    let layers = graph.weighted_layers();
    let weighted: HashSet<&str> = layers.iter().map(|n| n.id.as_str()).collect();

    let mut exempt_bits: BTreeMap<String, u32> = BTreeMap::new();
    for e in graph.exempt.iter().flatten() {
        if !weighted.contains(e.layer.as_str()) {
            return Err(GraphError::Pairing(format!(
                "exempt entry `{}` is not a weighted layer",
                e.layer
            )));
        }
        exempt_bits.insert(e.layer.clone(), e.bits.unwrap_or(high_bits));
    }

    let mut pairs = Vec::new();
    if let Some(annotated) = &graph.pairs {
        for a in annotated {
            for id in [&a.low, &a.high] {
                if !weighted.contains(id.as_str()) {
                    return Err(GraphError::Pairing(format!(
                        "`{id}` is not a weighted layer"
                    )));
                }
            }
            let between = match successor(graph, &consumers, &a.low) {
                Some((next, between)) if next == a.high => between,
                _ => {
                    return Err(GraphError::Pairing(format!(
                        "`{}` does not feed `{}` through only bn/relu nodes",
                        a.low, a.high
                    )))
                }
            };
            check_pair_channels(weights, graph, &a.low, &a.high)?;
            let (lo, hi) = (
                a.low_bits.unwrap_or(low_bits),
                a.high_bits.unwrap_or(high_bits),
            );
            if lo > hi {
                return Err(GraphError::Pairing(format!(
                    "pair `{}`/`{}` has low bits {lo} above high bits {hi}",
                    a.low, a.high
                )));
            }
            pairs.push(PairAssignment {
                low: a.low.clone(),
                high: a.high.clone(),
                low_bits: lo,
                high_bits: hi,
                between,
            });
        }
    } else {
        let mut links: BTreeMap<&str, (String, Vec<String>)> = BTreeMap::new();
        let mut has_pred: HashSet<String> = HashSet::new();
        for n in &layers {
            if exempt_bits.contains_key(&n.id) {
                continue;
            }
            if let Some((next, between)) = successor(graph, &consumers, &n.id) {
                if exempt_bits.contains_key(&next) {
                    continue;
                }
                has_pred.insert(next.clone());
                links.insert(n.id.as_str(), (next, between));
            }
        }
        for n in &layers {
            if has_pred.contains(&n.id) || !links.contains_key(n.id.as_str()) {
                continue;
            }
            let mut current = n.id.clone();
            while let Some((next, between)) = links.get(current.as_str()) {
                check_pair_channels(weights, graph, &current, next)?;
                pairs.push(PairAssignment {
                    low: current.clone(),
                    high: next.clone(),
                    low_bits,
                    high_bits,
                    between: between.clone(),
                });
                // The high layer may start the next pair only through its own successor.
                match links.get(next.as_str()) {
                    Some((after, _)) => current = after.clone(),
                    None => break,
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.low.cmp(&b.low));

    let paired: HashSet<&str> = pairs
        .iter()
        .flat_map(|p| [p.low.as_str(), p.high.as_str()])
        .collect();
    let mut exempt: Vec<Exemption> = layers
        .iter()
        .filter(|n| !paired.contains(n.id.as_str()))
        .map(|n| Exemption {
            layer: n.id.clone(),
            bits: exempt_bits.get(&n.id).copied().unwrap_or(high_bits),
        })
        .collect();
    exempt.sort_by(|a, b| a.layer.cmp(&b.layer));

    let plan = QuantPlan { pairs, exempt };
    plan.check_coverage(graph)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;
    use crate::tensor::Tensor;

    fn conv(id: &str, input: &str) -> String {
        format!(
            r#"{{"id": "{id}", "op": "conv2d", "inputs": ["{input}"], "weight": "{id}.w", "padding": 1}}"#
        )
    }

    fn bn(id: &str, input: &str) -> String {
        format!(
            r#"{{"id": "{id}", "op": "bn", "inputs": ["{input}"], "gamma": "{id}.g", "beta": "{id}.b", "mean": "{id}.m", "var": "{id}.v"}}"#
        )
    }

    fn relu(id: &str, input: &str) -> String {
        format!(r#"{{"id": "{id}", "op": "relu", "inputs": ["{input}"]}}"#)
    }

    fn doc(nodes: &[String], output: &str) -> String {
        format!(
            r#"{{"nodes": [{}], "output": "{output}"}}"#,
            nodes.join(",")
        )
    }

    fn weights_for(g: &ModelGraph, c: usize) -> TensorMap {
        let mut w = TensorMap::new();
        for n in &g.nodes {
            for name in n.op.tensor_names() {
                let t = if n.op.is_weighted() {
                    Tensor::zeros(vec![c, c, 3, 3])
                } else {
                    Tensor::from_f32(vec![c], vec![1.0; c]).unwrap()
                };
                w.insert(name.to_owned(), t);
            }
        }
        w
    }

    #[test]
    fn chain_forms_one_pair() {
        let g = parse_graph(&doc(
            &[
                conv("a", "input"),
                bn("n", "a"),
                relu("r", "n"),
                conv("b", "r"),
            ],
            "b",
        ))
        .unwrap();
        let plan = discover_pairs(&g, &weights_for(&g, 4), 2, 6).unwrap();
        assert_eq!(
            plan.pairs,
            vec![PairAssignment {
                low: "a".into(),
                high: "b".into(),
                low_bits: 2,
                high_bits: 6,
                between: vec!["n".into(), "r".into()],
            }]
        );
        assert!(plan.exempt.is_empty());
    }

    fn basic_block() -> String {
        doc(
            &[
                conv("stem", "input"),
                bn("stem_bn", "stem"),
                relu("stem_relu", "stem_bn"),
                conv("conv1", "stem_relu"),
                bn("bn1", "conv1"),
                relu("relu1", "bn1"),
                conv("conv2", "relu1"),
                bn("bn2", "conv2"),
                r#"{"id": "sum", "op": "add", "inputs": ["bn2", "stem_relu"]}"#.into(),
                relu("out", "sum"),
            ],
            "out",
        )
    }

    #[test]
    fn basic_block_pairs_inner_convs() {
        let g = parse_graph(&basic_block()).unwrap();
        let plan = discover_pairs(&g, &weights_for(&g, 4), 2, 6).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(
            (plan.pairs[0].low.as_str(), plan.pairs[0].high.as_str()),
            ("conv1", "conv2")
        );
        assert_eq!(
            plan.exempt,
            vec![Exemption {
                layer: "stem".into(),
                bits: 6
            }]
        );
    }

    #[test]
    fn odd_chain_leaves_last_exempt_and_isolated_conv_is_exempt() {
        let g = parse_graph(&doc(
            &[
                conv("a", "input"),
                relu("r1", "a"),
                conv("b", "r1"),
                relu("r2", "b"),
                conv("c", "r2"),
            ],
            "c",
        ))
        .unwrap();
        let plan = discover_pairs(&g, &weights_for(&g, 2), 2, 6).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(
            plan.exempt,
            vec![Exemption {
                layer: "c".into(),
                bits: 6
            }]
        );

        let g = parse_graph(&doc(&[conv("only", "input")], "only")).unwrap();
        let plan = discover_pairs(&g, &weights_for(&g, 2), 2, 6).unwrap();
        assert!(plan.pairs.is_empty());
        assert_eq!(
            plan.exempt,
            vec![Exemption {
                layer: "only".into(),
                bits: 6
            }]
        );
    }

    #[test]
    fn stable_under_node_reordering() {
        let mut g = parse_graph(&basic_block()).unwrap();
        let w = weights_for(&g, 4);
        let plan = discover_pairs(&g, &w, 2, 6).unwrap();
        g.nodes.reverse();
        assert_eq!(discover_pairs(&g, &w, 2, 6).unwrap(), plan);
        g.nodes.swap(1, 4);
        assert_eq!(discover_pairs(&g, &w, 2, 6).unwrap(), plan);
    }

    #[test]
    fn annotations_override_discovery() {
        let mut g = parse_graph(&basic_block()).unwrap();
        let w = weights_for(&g, 4);
        g.exempt = Some(vec![super::super::ExemptAnnotation {
            layer: "conv1".into(),
            bits: Some(8),
        }]);
        let plan = discover_pairs(&g, &w, 2, 6).unwrap();
        assert!(plan.pairs.is_empty());
        assert!(plan.exempt.contains(&Exemption {
            layer: "conv1".into(),
            bits: 8
        }));

        g.exempt = None;
        g.pairs = Some(vec![super::super::PairAnnotation {
            low: "stem".into(),
            high: "conv2".into(),
            low_bits: None,
            high_bits: None,
        }]);
        assert!(matches!(
            discover_pairs(&g, &w, 2, 6),
            Err(GraphError::Pairing(_))
        ));
    }

    #[test]
    fn channel_mismatch_in_pair() {
        let g = parse_graph(&doc(
            &[conv("a", "input"), relu("r", "a"), conv("b", "r")],
            "b",
        ))
        .unwrap();
        let mut w = weights_for(&g, 4);
        w.insert("b.w".into(), Tensor::zeros(vec![4, 3, 3, 3]));
        assert!(matches!(
            discover_pairs(&g, &w, 2, 6),
            Err(GraphError::Pairing(_))
        ));
    }

    #[test]
    fn coverage_detects_gaps() {
        let g = parse_graph(&doc(&[conv("a", "input")], "a")).unwrap();
        let plan = QuantPlan::default();
        assert!(matches!(
            plan.check_coverage(&g),
            Err(GraphError::Coverage(_))
        ));
        QuantPlan::uniform(&g, 32).check_coverage(&g).unwrap();
    }
}
