//! End-to-end commands: quantize, sweep, hist, eval and size.
//!
//! Quantization itself never touches activation data; only `sweep` and
//! `eval` read probes. All file reads go through a [`Source`] so callers can
//! observe what each command opens.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::compensation::{
    self, apply_compensation, scale_input_channels, CompensationError, CompensationResult,
    Interlude, LayerPair, LayerRef, PreparedPair, Regularization,
};
use crate::eval::{self, compare_models, EvalError, MetricReport};
use crate::graph::archive::{decode_archive, encode_archive, ArchiveError};
use crate::graph::plan::{discover_pairs, QuantPlan};
use crate::graph::size::{size_report, SizeReport};
use crate::graph::{parse_graph, GraphError, ModelGraph, Node, Op, TensorMap};
use crate::quant::{self, QuantError, QuantRecord, TernaryQuant, UniformQuant};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("`{path}`: {source}")]
    Archive {
        path: PathBuf,
        #[source]
        source: ArchiveError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: CompensationError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("data: {0}")]
    Data(String),
}

impl PipelineError {
    /// 1 for usage errors, 2 for data and format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Read { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                1
            }
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn layer_err(layer: &str) -> impl FnOnce(CompensationError) -> PipelineError + '_ {
    move |source| PipelineError::Layer {
        layer: layer.to_owned(),
        source,
    }
}

fn tensor_err(layer: &str) -> impl FnOnce(TensorError) -> PipelineError + '_ {
    move |source| PipelineError::Layer {
        layer: layer.to_owned(),
        source: CompensationError::Tensor(source),
    }
}

fn quant_err(layer: &str) -> impl FnOnce(QuantError) -> PipelineError + '_ {
    move |source| PipelineError::Layer {
        layer: layer.to_owned(),
        source: CompensationError::Quant(source),
    }
}

/// Where commands read their inputs from.
pub trait Source {
    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>>;
}

/// Reads from the filesystem.
#[derive(Debug, Default)]
pub struct FsSource;

impl Source for FsSource {
    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>> {
        std::fs::read(path)
    }
}

/// Filesystem source that records every path it is asked for.
#[derive(Debug, Default)]
pub struct RecordingSource {
    pub reads: RefCell<Vec<PathBuf>>,
}

impl Source for RecordingSource {
    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>> {
        self.reads.borrow_mut().push(path.to_owned());
        std::fs::read(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub graph: PathBuf,
    pub out: Option<PathBuf>,
    pub low_bits: u32,
    pub high_bits: u32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub probes: usize,
}

impl RunConfig {
    pub fn new(model: impl Into<PathBuf>, graph: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            graph: graph.into(),
            out: None,
            low_bits: 2,
            high_bits: 6,
            lambda1: 0.5,
            lambda2: 0.0,
            seed: 0,
            probes: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("low", self.low_bits), ("high", self.high_bits)] {
            if !(1..=quant::MAX_BITS).contains(&bits) {
                return Err(PipelineError::Usage(format!(
                    "--{name}-bits must be in 1..=8, got {bits}"
                )));
            }
        }
        if self.low_bits > self.high_bits {
            return Err(PipelineError::Usage(
                "--low-bits must not exceed --high-bits".into(),
            ));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(PipelineError::Usage("lambdas must be non-negative".into()));
        }
        if self.probes == 0 {
            return Err(PipelineError::Usage(
                "probe count must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn regularization(&self) -> Result<Regularization> {
        Regularization::new(self.lambda1, self.lambda2)
            .map_err(|e| PipelineError::Usage(e.to_string()))
    }
}

fn read_archive(src: &dyn Source, path: &Path) -> Result<TensorMap> {
    let bytes = src.read(path).map_err(|source| PipelineError::Read {
        path: path.to_owned(),
        source,
    })?;
    decode_archive(&bytes).map_err(|source| PipelineError::Archive {
        path: path.to_owned(),
        source,
    })
}

fn read_graph(src: &dyn Source, path: &Path) -> Result<ModelGraph> {
    let bytes = src.read(path).map_err(|source| PipelineError::Read {
        path: path.to_owned(),
        source,
    })?;
    let text = String::from_utf8(bytes)
        .map_err(|_| PipelineError::Data(format!("`{}` is not UTF-8", path.display())))?;
    Ok(parse_graph(&text)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| PipelineError::Write {
        path: path.to_owned(),
        source,
    })
}

/// A model with its graph and full-precision weights, checked for consistency.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: ModelGraph,
    pub weights: TensorMap,
}

impl Model {
    pub fn new(graph: ModelGraph, weights: TensorMap) -> Result<Self> {
        graph.check_tensors(&weights)?;
        Ok(Self { graph, weights })
    }

    pub fn load(src: &dyn Source, cfg: &RunConfig) -> Result<Self> {
        let graph = read_graph(src, &cfg.graph)?;
        let weights = read_archive(src, &cfg.model)?;
        Self::new(graph, weights)
    }

    fn layer(&self, id: &str) -> Result<(&Node, &Tensor)> {
        let node = self
            .graph
            .node(id)
            .ok_or_else(|| PipelineError::Data(format!("no layer `{id}`")))?;
        let name = node
            .op
            .weight_name()
            .ok_or_else(|| PipelineError::Data(format!("`{id}` is not a weighted layer")))?;
        Ok((node, crate::graph::tensor(&self.weights, id, name)?))
    }

    fn bias(&self, node: &Node) -> Result<Option<&[f32]>> {
        node.op
            .bias_name()
            .map(|b| {
                crate::graph::tensor(&self.weights, &node.id, b)?
                    .as_f32()
                    .map_err(tensor_err(&node.id))
            })
            .transpose()
    }

    fn layer_ref(&self, id: &str) -> Result<LayerRef<'_>> {
        let (node, weight) = self.layer(id)?;
        Ok(LayerRef {
            name: &node.id,
            weight,
            bias: self.bias(node)?,
            op: node.op.weighted_op().expect("weighted"),
        })
    }
}

/// Quantization of one exempt layer.
#[derive(Debug, Clone)]
pub enum ExemptQuant {
    FullPrecision,
    Uniform(UniformQuant),
}

/// Everything about a model's quantization that does not depend on the
/// regularization weights.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub plan: QuantPlan,
    pub pairs: Vec<PreparedPair>,
    pub exempt: Vec<ExemptQuant>,
}

pub fn prepare_model(model: &Model, low_bits: u32, high_bits: u32) -> Result<PreparedModel> {
    let plan = discover_pairs(&model.graph, &model.weights, low_bits, high_bits)?;
    let pairs = plan
        .pairs
        .par_iter()
        .map(|p| -> Result<PreparedPair> {
            let norms = p
                .between
                .iter()
                .map(|id| {
                    let node = model.graph.node(id).expect("plan ids exist");
                    match node.op {
                        Op::Bn { .. } => model.graph.bn_params(node, &model.weights).map(Some),
                        _ => Ok(None),
                    }
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let between = norms
                .iter()
                .map(|bn| bn.as_ref().map_or(Interlude::Relu, Interlude::BatchNorm))
                .collect();
            let pair = LayerPair::new(
                model.layer_ref(&p.low)?,
                model.layer_ref(&p.high)?,
                p.low_bits,
                p.high_bits,
                between,
            )
            .map_err(layer_err(&p.low))?;
            pair.prepare().map_err(layer_err(&p.low))
        })
        .collect::<Result<Vec<_>>>()?;
    let exempt = plan
        .exempt
        .par_iter()
        .map(|e| -> Result<ExemptQuant> {
            if e.bits >= 32 {
                return Ok(ExemptQuant::FullPrecision);
            }
            let (_, w) = model.layer(&e.layer)?;
            Ok(ExemptQuant::Uniform(
                quant::uniform_quantize(w, e.bits).map_err(quant_err(&e.layer))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedModel {
        plan,
        pairs,
        exempt,
    })
}

/// Per-pair solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub low: String,
    pub high: String,
    pub low_bits: u32,
    pub high_bits: u32,
    pub result: CompensationResult,
}

/// Output of a quantization run.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// Codes, scales and coefficients plus untouched non-weight tensors.
    pub archive: TensorMap,
    /// Full-precision weights with every quantized layer replaced by its
    /// dequantized (and compensated) value.
    pub dequantized: TensorMap,
    pub reports: Vec<PairReport>,
}

fn scalar(v: f32) -> Tensor {
    Tensor::scalar(v)
}

fn store_record(archive: &mut TensorMap, layer: &str, rec: &QuantRecord) {
    match rec {
        QuantRecord::Ternary(t) => {
            archive.insert(format!("{layer}.codes"), t.codes.clone());
            archive.insert(format!("{layer}.alpha"), scalar(t.alpha));
            archive.insert(format!("{layer}.delta"), scalar(t.delta));
            archive.insert(
                format!("{layer}.bits"),
                Tensor::from_i32(vec![1], vec![2]).unwrap(),
            );
        }
        QuantRecord::Uniform(u) => {
            archive.insert(format!("{layer}.codes"), u.codes.clone());
            archive.insert(format!("{layer}.scale"), scalar(u.scale));
            archive.insert(
                format!("{layer}.bits"),
                Tensor::from_i32(vec![1], vec![u.bits as i32]).unwrap(),
            );
        }
    }
}

impl PreparedModel {
    /// Solves every pair with `reg` (or uses `c = 1` when `compensate` is
    /// false) and assembles the quantized model.
    pub fn materialize(
        &self,
        model: &Model,
        reg: &Regularization,
        compensate: bool,
    ) -> Result<QuantizedModel> {
        let solved: Vec<CompensationResult> = self
            .pairs
            .par_iter()
            .map(|p| {
                let mut r = compensation::solve_prepared(p, reg);
                if !compensate {
                    let ones = vec![1.0; p.channel_count()];
                    let (_, j) = p.objective_value(&ones, reg).expect("lengths match");
                    r = CompensationResult {
                        c: ones,
                        objective_after: j,
                        ..r
                    };
                }
                r
            })
            .collect();

        let mut archive = model.weights.clone();
        let mut dequantized = model.weights.clone();
        let mut reports = Vec::with_capacity(self.pairs.len());
        for ((assign, prepared), result) in self.plan.pairs.iter().zip(&self.pairs).zip(solved) {
            let (low_node, _) = model.layer(&assign.low)?;
            let (high_node, _) = model.layer(&assign.high)?;
            let low_name = low_node.op.weight_name().expect("weighted");
            let high_name = high_node.op.weight_name().expect("weighted");

            archive.remove(low_name);
            store_record(&mut archive, &assign.low, &prepared.low);
            dequantized.insert(
                low_name.to_owned(),
                prepared.low.dequantize().map_err(quant_err(&assign.low))?,
            );

            let comp = apply_compensation(prepared, &result.c).map_err(layer_err(&assign.high))?;
            archive.remove(high_name);
            store_record(
                &mut archive,
                &assign.high,
                &QuantRecord::Uniform(comp.quant.clone()),
            );
            archive.insert(
                format!("{}.coeff", assign.high),
                Tensor::from_f32(vec![comp.coeff.len()], comp.coeff.clone()).unwrap(),
            );
            dequantized.insert(
                high_name.to_owned(),
                comp.dequantize().map_err(layer_err(&assign.high))?,
            );
            reports.push(PairReport {
                low: assign.low.clone(),
                high: assign.high.clone(),
                low_bits: assign.low_bits,
                high_bits: assign.high_bits,
                result,
            });
        }
        for (e, q) in self.plan.exempt.iter().zip(&self.exempt) {
            if let ExemptQuant::Uniform(u) = q {
                let (node, _) = model.layer(&e.layer)?;
                let name = node.op.weight_name().expect("weighted");
                archive.remove(name);
                store_record(&mut archive, &e.layer, &QuantRecord::Uniform(u.clone()));
                dequantized.insert(
                    name.to_owned(),
                    u.dequantize().map_err(quant_err(&e.layer))?,
                );
            }
        }
        Ok(QuantizedModel {
            archive,
            dequantized,
            reports,
        })
    }
}

/// Rebuilds float weights from a quantized archive.
pub fn dequantize_archive(graph: &ModelGraph, archive: &TensorMap) -> Result<TensorMap> {
    let mut out = archive.clone();
    for node in graph.weighted_layers() {
        let id = &node.id;
        let Some(codes) = archive.get(&format!("{id}.codes")) else {
            continue;
        };
        let get = |suffix: &str| archive.get(&format!("{id}.{suffix}"));
        let scalar_of = |suffix: &str| -> Result<f32> {
            get(suffix)
                .and_then(|t| t.as_f32().ok())
                .and_then(|v| v.first().copied())
                .ok_or_else(|| PipelineError::Data(format!("layer `{id}` lacks `{id}.{suffix}`")))
        };
        let record = if get("alpha").is_some() {
            let q = TernaryQuant {
                codes: codes.clone(),
                alpha: scalar_of("alpha")?,
                delta: scalar_of("delta")?,
            };
            q.validate().map_err(quant_err(id))?;
            QuantRecord::Ternary(q)
        } else {
            let bits = get("bits")
                .and_then(|t| t.as_i32().ok())
                .and_then(|v| v.first().copied())
                .ok_or_else(|| PipelineError::Data(format!("layer `{id}` lacks `{id}.bits`")))?;
            let q = UniformQuant {
                codes: codes.clone(),
                bits: bits as u32,
                scale: scalar_of("scale")?,
            };
            q.validate().map_err(quant_err(id))?;
            QuantRecord::Uniform(q)
        };
        let mut w = record.dequantize().map_err(quant_err(id))?;
        if let Some(coeff) = get("coeff") {
            let c = coeff.as_f32().map_err(tensor_err(id))?;
            let groups = node.op.weighted_op().map_or(1, |op| op.groups());
            w = scale_input_channels(&w, groups, c).map_err(layer_err(id))?;
        }
        out.insert(node.op.weight_name().expect("weighted").to_owned(), w);
    }
    Ok(out)
}

pub fn pair_report_csv(reports: &[PairReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "low",
        "high",
        "low_bits",
        "high_bits",
        "channels",
        "gamma_sq",
        "theta_sq",
        "objective_before",
        "objective_after",
        "c_min",
        "c_mean",
        "c_max",
        "lambda1",
        "lambda2",
    ])
    .expect("in-memory write");
    for r in reports {
        let c = &r.result.c;
        let n = c.len().max(1) as f64;
        w.write_record([
            r.low.clone(),
            r.high.clone(),
            r.low_bits.to_string(),
            r.high_bits.to_string(),
            c.len().to_string(),
            r.result.gamma_sq.iter().sum::<f64>().to_string(),
            r.result.theta_sq.iter().sum::<f64>().to_string(),
            r.result.objective_before.to_string(),
            r.result.objective_after.to_string(),
            c.iter().copied().fold(f64::INFINITY, f64::min).to_string(),
            (c.iter().sum::<f64>() / n).to_string(),
            c.iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .to_string(),
            r.result.lambda1.to_string(),
            r.result.lambda2.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Sidecar report path: `q.mpct` → `q.report.csv`.
pub fn report_path(out: &Path) -> PathBuf {
    out.with_extension("report.csv")
}

pub fn cmd_quantize(src: &dyn Source, cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| PipelineError::Usage("quantize needs --out".into()))?;
    let model = Model::load(src, cfg)?;
    let prepared = prepare_model(&model, cfg.low_bits, cfg.high_bits)?;
    let q = prepared.materialize(&model, &cfg.regularization()?, true)?;
    write_file(out, &encode_archive(&q.archive))?;
    let csv = pair_report_csv(&q.reports);
    write_file(&report_path(out), csv.as_bytes())?;

    let mut summary = format!(
        "quantized {} pair(s), {} exempt layer(s) at MP{}/{}\n",
        prepared.plan.pairs.len(),
        prepared.plan.exempt.len(),
        cfg.low_bits,
        cfg.high_bits
    );
    for r in &q.reports {
        let _ = writeln!(
            summary,
            "  {} -> {}: objective {:.6e} -> {:.6e}",
            r.low, r.high, r.result.objective_before, r.result.objective_after
        );
    }
    Ok(summary)
}

/// Inclusive range `a:b:step`.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || {
        PipelineError::Usage(format!(
            "range `{text}` must be start:end:step or a single value"
        ))
    };
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    match nums.as_slice() {
        [v] => Ok(vec![*v]),
        [a, b, step] if *step > 0.0 && b >= a => {
            let n = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=n)
                .map(|i| {
                    let v = a + i as f64 * step;
                    // Snap accumulated binary error: 0.1 + 2·0.1 prints as 0.3.
                    (v * 1e12).round() / 1e12
                })
                .collect())
        }
        _ => Err(bad()),
    }
}

/// Evaluation inputs: explicit data, or seeded Gaussian probes.
pub struct Probes {
    pub inputs: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

pub fn load_probes(
    src: &dyn Source,
    graph: &ModelGraph,
    data: Option<&Path>,
    labels: Option<&Path>,
    count: usize,
    seed: u64,
) -> Result<Probes> {
    let (inputs, mut found_labels, seed) = match data {
        Some(path) => {
            let archive = read_archive(src, path)?;
            let batch = archive
                .get("inputs")
                .or_else(|| archive.values().find(|t| t.as_f32().is_ok()))
                .ok_or_else(|| {
                    PipelineError::Data(format!("`{}` has no f32 `inputs` tensor", path.display()))
                })?;
            let shape = batch.shape();
            if shape.len() < 2 {
                return Err(PipelineError::Data(
                    "`inputs` must be N × sample-shape".into(),
                ));
            }
            let per: usize = shape[1..].iter().product();
            let data = batch
                .as_f32()
                .map_err(|e| PipelineError::Data(e.to_string()))?;
            let inputs = data
                .chunks(per.max(1))
                .map(|c| Tensor::from_f32(shape[1..].to_vec(), c.to_vec()).expect("chunk matches"))
                .collect();
            (inputs, archive.get("labels").cloned(), None)
        }
        None => {
            let shape = graph.input_shape.as_ref().ok_or_else(|| {
                PipelineError::Usage("graph has no `input_shape`; pass --data".into())
            })?;
            (eval::gaussian_probes(shape, count, seed)?, None, Some(seed))
        }
    };
    if let Some(path) = labels {
        let archive = read_archive(src, path)?;
        found_labels = Some(archive.get("labels").cloned().ok_or_else(|| {
            PipelineError::Data(format!("`{}` has no `labels` tensor", path.display()))
        })?);
    }
    let labels = found_labels
        .map(|t| -> Result<Vec<usize>> {
            let v = t
                .as_i32()
                .map_err(|_| PipelineError::Data("`labels` must be i32".into()))?;
            v.iter()
                .map(|&l| {
                    usize::try_from(l)
                        .map_err(|_| PipelineError::Data(format!("negative label {l}")))
                })
                .collect()
        })
        .transpose()?;
    if let Some(l) = &labels {
        if l.len() != inputs.len() {
            return Err(EvalError::LabelCount {
                labels: l.len(),
                probes: inputs.len(),
            }
            .into());
        }
    }
    Ok(Probes {
        inputs,
        labels,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub recon_mse: f64,
    pub top1: Option<f64>,
}

pub fn sweep(
    model: &Model,
    prepared: &PreparedModel,
    probes: &Probes,
    lambda1: &[f64],
    lambda2: &[f64],
) -> Result<Vec<SweepRow>> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(PipelineError::Usage(
            "lambda ranges must be non-empty".into(),
        ));
    }
    let mut rows = Vec::with_capacity(lambda1.len() * lambda2.len());
    for &l1 in lambda1 {
        for &l2 in lambda2 {
            let reg =
                Regularization::new(l1, l2).map_err(|e| PipelineError::Usage(e.to_string()))?;
            let q = prepared.materialize(model, &reg, true)?;
            let m = compare_models(
                (&model.graph, &model.weights),
                (&model.graph, &q.dequantized),
                &probes.inputs,
                probes.labels.as_deref(),
            )?;
            rows.push(SweepRow {
                lambda1: l1,
                lambda2: l2,
                recon_mse: m.final_mse,
                top1: m.top1,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda1", "lambda2", "recon_mse", "top1"])
        .expect("in-memory");
    for r in rows {
        w.write_record([
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            r.recon_mse.to_string(),
            r.top1.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

pub fn cmd_sweep(src: &dyn Source, cfg: &RunConfig, args: &SweepArgs) -> Result<String> {
    cfg.validate()?;
    let model = Model::load(src, cfg)?;
    let probes = load_probes(
        src,
        &model.graph,
        args.data.as_deref(),
        args.labels.as_deref(),
        cfg.probes,
        cfg.seed,
    )?;
    let prepared = prepare_model(&model, cfg.low_bits, cfg.high_bits)?;
    let rows = sweep(&model, &prepared, &probes, &args.lambda1, &args.lambda2)?;
    let csv = sweep_csv(&rows);
    emit(cfg.out.as_deref(), csv)
}

fn emit(out: Option<&Path>, text: String) -> Result<String> {
    match out {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub plain: Vec<usize>,
    pub compensated: Vec<usize>,
    pub mean_plain: f64,
    pub mean_compensated: f64,
}

/// Histograms of a high-bit layer's dequantized weights with and without
/// its compensation coefficients, over a shared range.
pub fn histogram(plain: &[f32], compensated: &[f32], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(PipelineError::Usage("--bins must be positive".into()));
    }
    let all = plain.iter().chain(compensated).map(|&v| f64::from(v));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |vals: &[f32]| {
        let mut h = vec![0usize; bins];
        for &v in vals {
            let i = if width > 0.0 {
                (((f64::from(v) - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            h[i] += 1;
        }
        h
    };
    let mean =
        |vals: &[f32]| vals.iter().map(|&v| f64::from(v)).sum::<f64>() / vals.len().max(1) as f64;
    Ok(Histogram {
        edges,
        plain: count(plain),
        compensated: count(compensated),
        mean_plain: mean(plain),
        mean_compensated: mean(compensated),
    })
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_start", "bin_end", "plain", "compensated"])
        .expect("in-memory");
    for i in 0..h.plain.len() {
        w.write_record([
            h.edges[i].to_string(),
            h.edges[i + 1].to_string(),
            h.plain[i].to_string(),
            h.compensated[i].to_string(),
        ])
        .expect("in-memory");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn cmd_hist(src: &dyn Source, cfg: &RunConfig, layer: &str, bins: usize) -> Result<String> {
    cfg.validate()?;
    let model = Model::load(src, cfg)?;
    let prepared = prepare_model(&model, cfg.low_bits, cfg.high_bits)?;
    let idx = prepared
        .plan
        .pairs
        .iter()
        .position(|p| p.high == layer)
        .ok_or_else(|| {
            PipelineError::Usage(format!("`{layer}` is not the high-bit layer of any pair"))
        })?;
    let pair = &prepared.pairs[idx];
    let result = compensation::solve_prepared(pair, &cfg.regularization()?);
    let plain = pair.high.dequantize().map_err(quant_err(layer))?;
    let comp = apply_compensation(pair, &result.c)
        .and_then(|c| c.dequantize())
        .map_err(layer_err(layer))?;
    let h = histogram(
        plain.as_f32().map_err(tensor_err(layer))?,
        comp.as_f32().map_err(tensor_err(layer))?,
        bins,
    )?;
    let summary = format!(
        "{layer}: mean(plain) = {:.6e}, mean(compensated) = {:.6e}, |plain| {} |compensated|\n",
        h.mean_plain,
        h.mean_compensated,
        if h.mean_compensated.abs() < h.mean_plain.abs() {
            ">"
        } else {
            "<="
        },
    );
    let csv = histogram_csv(&h);
    match &cfg.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            Ok(summary)
        }
        None => Ok(csv + &summary),
    }
}

/// Labelled metric blocks, one per evaluated variant.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub variants: Vec<(String, MetricReport)>,
}

pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    probes: &Probes,
    quantized: Option<&TensorMap>,
) -> Result<EvalOutcome> {
    let mut variants = Vec::new();
    let fp = (&model.graph, &model.weights);
    let with_seed = |mut r: MetricReport| {
        r.seed = probes.seed;
        r
    };
    match quantized {
        Some(q) => {
            let m = compare_models(
                fp,
                (&model.graph, q),
                &probes.inputs,
                probes.labels.as_deref(),
            )?;
            variants.push(("quantized".to_owned(), with_seed(m)));
        }
        None => {
            let prepared = prepare_model(model, cfg.low_bits, cfg.high_bits)?;
            let reg = cfg.regularization()?;
            for (name, compensate) in [("naive", false), ("compensated", true)] {
                let q = prepared.materialize(model, &reg, compensate)?;
                let m = compare_models(
                    fp,
                    (&model.graph, &q.dequantized),
                    &probes.inputs,
                    probes.labels.as_deref(),
                )?;
                variants.push((name.to_owned(), with_seed(m)));
            }
        }
    }
    Ok(EvalOutcome { variants })
}

pub fn eval_csv(outcome: &EvalOutcome) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "metric", "node", "value"])
        .expect("in-memory");
    for (name, m) in &outcome.variants {
        for (node, mse) in &m.per_layer_mse {
            w.write_record([name.as_str(), "mse", node, &mse.to_string()])
                .expect("in-memory");
        }
        w.write_record([name.as_str(), "final_mse", "", &m.final_mse.to_string()])
            .expect("in-memory");
        if let Some(t) = m.top1_reference {
            w.write_record([name.as_str(), "top1_fp", "", &t.to_string()])
                .expect("in-memory");
        }
        if let Some(t) = m.top1 {
            w.write_record([name.as_str(), "top1", "", &t.to_string()])
                .expect("in-memory");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn eval_summary(outcome: &EvalOutcome) -> String {
    let mut s = String::new();
    for (name, m) in &outcome.variants {
        let _ = writeln!(s, "[{name}] probes: {}", m.probe_count);
        let _ = writeln!(s, "  final-output MSE: {:.6e}", m.final_mse);
        if let (Some(fp), Some(q)) = (m.top1_reference, m.top1) {
            let _ = writeln!(
                s,
                "  top-1: {:.2}% (full precision {:.2}%)",
                100.0 * q,
                100.0 * fp
            );
        }
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
}

pub fn cmd_eval(src: &dyn Source, cfg: &RunConfig, args: &EvalArgs) -> Result<String> {
    cfg.validate()?;
    let model = Model::load(src, cfg)?;
    let probes = load_probes(
        src,
        &model.graph,
        args.data.as_deref(),
        args.labels.as_deref(),
        cfg.probes,
        cfg.seed,
    )?;
    let quantized = args
        .quantized
        .as_deref()
        .map(|p| -> Result<TensorMap> { dequantize_archive(&model.graph, &read_archive(src, p)?) })
        .transpose()?;
    let outcome = evaluate(&model, cfg, &probes, quantized.as_ref())?;
    let summary = eval_summary(&outcome);
    let csv = eval_csv(&outcome);
    match &cfg.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            Ok(summary)
        }
        None => Ok(csv + &summary),
    }
}

pub fn size_csv(report: &SizeReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "params", "bits", "code_bytes", "overhead_bytes"])
        .expect("in-memory");
    for l in &report.layers {
        w.write_record([
            l.layer.clone(),
            l.params.to_string(),
            l.bits.to_string(),
            l.code_bytes.to_string(),
            l.overhead_bytes.to_string(),
        ])
        .expect("in-memory");
    }
    w.write_record([
        "<other>".to_owned(),
        report.other_params.to_string(),
        "32".to_owned(),
        (4 * report.other_params).to_string(),
        "0".to_owned(),
    ])
    .expect("in-memory");
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn cmd_size(src: &dyn Source, cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let model = Model::load(src, cfg)?;
    let fp = size_report(
        &model.graph,
        &QuantPlan::uniform(&model.graph, 32),
        &model.weights,
    )?;
    let plan = discover_pairs(&model.graph, &model.weights, cfg.low_bits, cfg.high_bits)?;
    let mixed = size_report(&model.graph, &plan, &model.weights)?;
    let mut summary = format!("parameters: {}\n", fp.total_params());
    for (label, r) in [
        ("FP32".to_owned(), &fp),
        (format!("MP{}/{}", cfg.low_bits, cfg.high_bits), &mixed),
    ] {
        let _ = writeln!(
            summary,
            "{label}: {:.0} B = {:.2} MB (10^6) = {:.2} MiB (2^20)",
            r.total_bytes,
            r.megabytes(),
            r.mebibytes()
        );
    }
    if let Some(path) = &cfg.out {
        write_file(path, size_csv(&mixed).as_bytes())?;
    }
    Ok(summary)
}
