#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mpcq::graph::{parse_graph, save_archive, ModelGraph, Op, TensorMap, INPUT_ID};
use mpcq::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

pub fn fixture(name: &str) -> ModelGraph {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::from_f32(shape.to_vec(), data).unwrap()
}

/// He-initialized conv weight whose output channels have varying ranges.
pub fn conv_weight(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> Tensor {
    let fan_in = (i * k * k) as f32;
    let spread = Uniform::new(0.5f32, 1.5);
    let per = i * k * k;
    let mut data = Vec::with_capacity(o * per);
    for _ in 0..o {
        let std = rng.sample(spread) * (2.0 / fan_in).sqrt();
        data.extend((0..per).map(|_| std * rng.sample::<f32, _>(StandardNormal)));
    }
    Tensor::from_f32(vec![o, i, k, k], data).unwrap()
}

fn vector(data: Vec<f32>) -> Tensor {
    Tensor::from_f32(vec![data.len()], data).unwrap()
}

/// Random weights for a graph: every non-grouped conv emits `width`
/// channels, kernels are `2·padding + 1`, the classifier emits `classes`.
pub fn random_weights(graph: &ModelGraph, width: usize, classes: usize, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels: HashMap<String, usize> = HashMap::new();
    channels.insert(INPUT_ID.into(), graph.input_shape.as_ref().unwrap()[0]);
    let mut w = TensorMap::new();
    for i in graph.topo_order().unwrap() {
        let node = &graph.nodes[i];
        let c = channels[&node.inputs[0]];
        let out = match &node.op {
            Op::Conv2d {
                weight,
                bias,
                padding,
                groups,
                ..
            } => {
                let k = 2 * padding + 1;
                let o = if *groups > 1 { c } else { width };
                w.insert(weight.clone(), conv_weight(&mut rng, o, c / groups, k));
                if let Some(b) = bias {
                    w.insert(b.clone(), gaussian(&mut rng, &[o], 0.1));
                }
                o
            }
            Op::Linear { weight, bias } => {
                let t = gaussian(&mut rng, &[classes, c], (1.0 / c as f32).sqrt());
                w.insert(weight.clone(), t);
                if let Some(b) = bias {
                    w.insert(b.clone(), gaussian(&mut rng, &[classes], 0.1));
                }
                classes
            }
            Op::Bn {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let u = Uniform::new(0.5f32, 1.5);
                w.insert(
                    gamma.clone(),
                    vector((0..c).map(|_| rng.sample(u)).collect()),
                );
                w.insert(beta.clone(), gaussian(&mut rng, &[c], 0.1));
                w.insert(mean.clone(), gaussian(&mut rng, &[c], 0.1));
                w.insert(var.clone(), vector((0..c).map(|_| rng.sample(u)).collect()));
                c
            }
            Op::Concat => node.inputs.iter().map(|s| channels[s]).sum(),
            _ => c,
        };
        channels.insert(node.id.clone(), out);
    }
    w
}

/// `conv(3→mid) → [relu] → conv(mid→out)` with 3×3 kernels on 8×8 inputs.
pub fn two_conv(seed: u64, with_relu: bool) -> (ModelGraph, TensorMap) {
    let mid = if with_relu {
        r#"{"id": "act", "op": "relu", "inputs": ["conv1"]},"#
    } else {
        ""
    };
    let second_input = if with_relu { "act" } else { "conv1" };
    let doc = format!(
        r#"{{"input_shape": [3, 8, 8], "nodes": [
            {{"id": "conv1", "op": "conv2d", "inputs": ["input"], "weight": "conv1.weight", "padding": 1}},
            {mid}
            {{"id": "conv2", "op": "conv2d", "inputs": ["{second_input}"], "weight": "conv2.weight", "padding": 1}}
        ], "output": "conv2"}}"#
    );
    let graph = parse_graph(&doc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = TensorMap::new();
    w.insert("conv1.weight".into(), conv_weight(&mut rng, 16, 3, 3));
    w.insert("conv2.weight".into(), conv_weight(&mut rng, 8, 16, 3));
    (graph, w)
}

pub fn write_model(dir: &Path, graph: &ModelGraph, weights: &TensorMap) -> (PathBuf, PathBuf) {
    let model = dir.join("model.mpct");
    let graph_path = dir.join("graph.json");
    save_archive(weights, &model).unwrap();
    std::fs::write(&graph_path, graph.to_text()).unwrap();
    (model, graph_path)
}
