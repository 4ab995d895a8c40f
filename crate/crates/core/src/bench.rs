//! Scenario harness: config parsing, workflow comparison matrices, the
//! training parity demo, and CSV/JSON reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpcore::{accumulate_micro_batches, dp_adam_step, dp_sgd_step, DPConfig, OptimizerState, Reduction};
use crate::error::{Error, Result};
use crate::memmodel::{MemSpec, TrafficReport};
use crate::tensor::{matmul, Tensor};
use crate::tiling::{plan_blocks, BlockPlan, LayerDims};
use crate::workflows::{run_workflow, BackwardResult, WorkflowKind};

/// Shape of one linear layer, without the batch extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub label: String,
    pub t: usize,
    pub p: usize,
    pub d: usize,
}

impl LayerShape {
    pub fn new(label: impl Into<String>, t: usize, p: usize, d: usize) -> Self {
        Self { label: label.into(), t, p, d }
    }

    pub fn dims(&self, batch: usize) -> Result<LayerDims> {
        LayerDims::new(batch, self.t, self.p, self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Layers(Vec<LayerShape>),
}

/// Linear layers of one transformer block: the three attention projections
/// (`P×P`), the MLP expansion (`P→4P`) and contraction (`4P→P`).
fn transformer_block(p: usize, t: usize) -> Vec<LayerShape> {
    let h = 4 * p;
    vec![
        LayerShape::new("w_q", t, p, p),
        LayerShape::new("w_k", t, p, p),
        LayerShape::new("w_v", t, p, p),
        LayerShape::new("w_1", t, p, h),
        LayerShape::new("w_2", t, h, p),
    ]
}

pub const PRESETS: [&str; 3] = ["gpt2-small-mini", "gpt2-medium-mini", "gpt2-large-mini"];

pub fn preset_layers(name: &str) -> Result<Vec<LayerShape>> {
    let p = match name {
        "gpt2-small-mini" => 64,
        "gpt2-medium-mini" => 96,
        "gpt2-large-mini" => 128,
        _ => {
            return Err(Error::Config {
                path: "model_preset".into(),
                message: format!("unknown preset `{name}`, expected one of {PRESETS:?}"),
            })
        }
    };
    Ok(transformer_block(p, 32))
}

impl ModelSpec {
    pub fn layers(&self) -> Result<Vec<LayerShape>> {
        match self {
            ModelSpec::Preset(name) => preset_layers(name),
            ModelSpec::Layers(layers) => Ok(layers.clone()),
        }
    }
}

/// Gradient accumulation: each logical batch of `size · accumulation_steps`
/// samples runs as `accumulation_steps` micro-batches of `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroBatch {
    pub size: usize,
    pub accumulation_steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub in_features: usize,
    pub out_features: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
    /// Noise scales to sweep; empty means `dp.sigma` only.
    #[serde(default)]
    pub sigmas: Vec<f64>,
}

fn default_repetitions() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model_preset: ModelSpec,
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub micro_batch: Option<MicroBatch>,
    pub workflows: Vec<WorkflowKind>,
    pub mem: MemSpec,
    pub dp: DPConfig,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.model_preset.layers()?;
        if layers.is_empty() {
            return Err(config_err("model_preset", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.t == 0 || l.p == 0 || l.d == 0 {
                return Err(config_err(&format!("model_preset[{i}]"), "extents must be positive"));
            }
        }
        if self.batch_sizes.is_empty() {
            return Err(config_err("batch_sizes", "must not be empty"));
        }
        if let Some(i) = self.batch_sizes.iter().position(|&b| b == 0) {
            return Err(config_err(&format!("batch_sizes[{i}]"), "must be positive"));
        }
        if self.workflows.is_empty() {
            return Err(config_err("workflows", "must not be empty"));
        }
        if self.repetitions == 0 {
            return Err(config_err("repetitions", "must be at least 1"));
        }
        self.mem.validate().map_err(|e| config_err("mem", e.to_string()))?;
        self.dp.validate().map_err(|e| config_err("dp", e.to_string()))?;
        if let Some(mb) = self.micro_batch {
            if mb.size == 0 || mb.accumulation_steps == 0 {
                return Err(config_err("micro_batch", "size and accumulation_steps must be positive"));
            }
            let logical = mb.size * mb.accumulation_steps;
            if let Some(i) = self.batch_sizes.iter().position(|&b| b != logical) {
                return Err(config_err(
                    &format!("batch_sizes[{i}]"),
                    format!("must equal micro_batch.size * accumulation_steps = {logical}"),
                ));
            }
        }
        if let Some(t) = &self.train {
            if t.steps == 0 || t.batch == 0 || t.seq == 0 || t.in_features == 0 || t.out_features == 0 {
                return Err(config_err("train", "steps and shape extents must be positive"));
            }
            if !(t.eta.is_finite() && t.eta >= 0.0) {
                return Err(config_err("train.eta", "must be finite and >= 0"));
            }
            if let Some(s) = t.sigmas.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(config_err(&format!("train.sigmas[{s}]"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub workflow: WorkflowKind,
    pub layer: String,
    #[serde(rename = "B")]
    pub batch: usize,
    pub bytes_loaded: u64,
    pub input_bytes_loaded: u64,
    pub bytes_stored: u64,
    pub per_sample_grad_bytes_stored: u64,
    pub flops: u64,
    pub redundant_flops: u64,
    pub kernel_launches: u64,
    pub barriers: u64,
    pub peak_scratch_bytes: u64,
    pub relative_traffic: f64,
    pub grad_checksum: f64,
}

pub const CSV_HEADER: [&str; 14] = [
    "workflow",
    "layer",
    "B",
    "bytes_loaded",
    "input_bytes_loaded",
    "bytes_stored",
    "per_sample_grad_bytes_stored",
    "flops",
    "redundant_flops",
    "kernel_launches",
    "barriers",
    "peak_scratch_bytes",
    "relative_traffic",
    "grad_checksum",
];

fn cell_seed(seed: u64, layer: usize, batch: usize) -> u64 {
    // SplitMix64 over (seed, layer, batch)
    let mut h = seed;
    for w in [layer as u64, batch as u64] {
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15) ^ w;
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())
}

/// Seeded `X: B×T×P` and `dY: B×T×D` with entries in `[-1, 1]`.
pub fn cell_inputs(seed: u64, layer_index: usize, dims: LayerDims) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, layer_index, dims.B));
    let x = uniform_tensor(&mut rng, vec![dims.B, dims.T, dims.P])?;
    let dy = uniform_tensor(&mut rng, vec![dims.B, dims.T, dims.D])?;
    Ok((x, dy))
}

fn sample_slice(t: &Tensor<f64>, range: std::ops::Range<usize>) -> Result<Tensor<f64>> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = range.len();
    Tensor::new(shape, t.data()[range.start * per..range.end * per].to_vec())
}

/// Runs one workflow on a cell, through gradient accumulation when configured.
pub fn run_cell(
    kind: WorkflowKind,
    x: &Tensor<f64>,
    dy: &Tensor<f64>,
    dp: &DPConfig,
    mem: MemSpec,
    micro_batch: Option<MicroBatch>,
) -> Result<BackwardResult<f64>> {
    let Some(mb) = micro_batch else {
        return run_workflow(kind, x, dy, dp, mem);
    };
    let clip_only = DPConfig { sigma: 0.0, reduction: Reduction::Sum, ..*dp };
    let mut report = TrafficReport::default();
    let mut partials = Vec::with_capacity(mb.accumulation_steps);
    let mut norms = Vec::new();
    let mut input_bytes_loaded = 0;
    for step in 0..mb.accumulation_steps {
        let range = step * mb.size..(step + 1) * mb.size;
        let r = run_workflow(kind, &sample_slice(x, range.clone())?, &sample_slice(dy, range)?, &clip_only, mem)?;
        report.merge(&r.report);
        input_bytes_loaded += r.input_bytes_loaded;
        norms.extend(r.per_sample_norms_sq);
        partials.push(r.grad_w);
    }
    let total = mb.size * mb.accumulation_steps;
    let grad_w = if kind.is_private() {
        accumulate_micro_batches(&partials, total, dp)?
    } else {
        let mut acc = partials[0].clone();
        for p in &partials[1..] {
            for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        acc
    };
    Ok(BackwardResult { grad_w, report, per_sample_norms_sq: norms, input_bytes_loaded })
}

fn run_cell_rows(
    cfg: &ScenarioConfig,
    layer_index: usize,
    layer: &LayerShape,
    batch: usize,
) -> Result<Vec<ComparisonRow>> {
    let dims = layer.dims(batch)?;
    let (x, dy) = cell_inputs(cfg.dp.seed, layer_index, dims)?;
    let dp = cfg.dp.with_layer(layer_index as u64);
    let baseline = run_cell(WorkflowKind::NonDp, &x, &dy, &dp, cfg.mem, cfg.micro_batch)?;
    let base_bytes = baseline.report.total_bytes() as f64;
    cfg.workflows
        .iter()
        .map(|&kind| {
            let r = if kind == WorkflowKind::NonDp {
                baseline.clone()
            } else {
                run_cell(kind, &x, &dy, &dp, cfg.mem, cfg.micro_batch)?
            };
            let rep = r.report;
            Ok(ComparisonRow {
                workflow: kind,
                layer: layer.label.clone(),
                batch,
                bytes_loaded: rep.bytes_loaded,
                input_bytes_loaded: r.input_bytes_loaded,
                bytes_stored: rep.bytes_stored,
                per_sample_grad_bytes_stored: rep.per_sample_grad_bytes_stored,
                flops: rep.flops,
                redundant_flops: rep.redundant_flops,
                kernel_launches: rep.kernel_launches,
                barriers: rep.barriers,
                peak_scratch_bytes: rep.peak_scratch_bytes,
                relative_traffic: rep.total_bytes() as f64 / base_bytes,
                grad_checksum: r.grad_w.sum(),
            })
        })
        .collect()
}

/// One row per (repetition, layer, batch size, workflow), in config order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ComparisonRow>> {
    cfg.validate()?;
    let layers = cfg.model_preset.layers()?;
    let cells: Vec<(usize, &LayerShape, usize)> =
        layers.iter().enumerate().flat_map(|(i, l)| cfg.batch_sizes.iter().map(move |&b| (i, l, b))).collect();
    let mut rows = Vec::new();
    for _ in 0..cfg.repetitions {
        let per_cell: Vec<Vec<ComparisonRow>> =
            cells.par_iter().map(|&(i, l, b)| run_cell_rows(cfg, i, l, b)).collect::<Result<_>>()?;
        rows.extend(per_cell.into_iter().flatten());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanRow {
    pub layer: String,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(flatten)]
    pub plan: BlockPlan,
}

/// The block plan every (layer, batch size) cell would use.
pub fn scenario_plans(cfg: &ScenarioConfig) -> Result<Vec<PlanRow>> {
    let mut out = Vec::new();
    for layer in cfg.model_preset.layers()? {
        for &b in &cfg.batch_sizes {
            let plan = plan_blocks(layer.dims(b)?, cfg.mem)?;
            out.push(PlanRow { layer: layer.label.clone(), batch: b, plan });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn write_report<W: Write>(rows: &[ComparisonRow], format: ReportFormat, out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::usage("no rows to report"));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn emit_report(rows: &[ComparisonRow], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::usage("no rows to report"));
    }
    let file = fs::File::create(path)?;
    write_report(rows, format, std::io::BufWriter::new(file))
}

pub fn read_json_report(text: &str) -> Result<Vec<ComparisonRow>> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub workflow: WorkflowKind,
    pub sigma: f64,
    pub losses: Vec<f64>,
}

/// Fixed regression task for [`train_demo`]: inputs, targets and the
/// starting weights.
struct TrainTask {
    x: Tensor<f64>,
    target: Tensor<f64>,
    w0: Tensor<f64>,
}

fn train_task(t: &TrainConfig, seed: u64) -> Result<TrainTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, usize::MAX, t.batch));
    let x = uniform_tensor(&mut rng, vec![t.batch, t.seq, t.in_features])?;
    let w_true = uniform_tensor(&mut rng, vec![t.out_features, t.in_features])?;
    let clean = forward(&x, &w_true)?;
    let noise: Vec<f64> = (0..clean.len()).map(|_| 0.1 * rng.gen_range(-1.0..=1.0)).collect();
    let target = Tensor::new(clean.shape().to_vec(), clean.data().iter().zip(&noise).map(|(a, b)| a + b).collect())?;
    let w0 = Tensor::zeros(vec![t.out_features, t.in_features])?;
    Ok(TrainTask { x, target, w0 })
}

/// `Y[b] = X[b]·Wᵀ` for every sample.
pub fn forward(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (b, t) = (x.shape()[0], x.shape()[1]);
    let d = w.shape()[0];
    let wt = w.transpose()?;
    let mut out = Vec::with_capacity(b * t * d);
    for s in 0..b {
        out.extend_from_slice(matmul(&x.sample(s)?, &wt)?.data());
    }
    Tensor::new(vec![b, t, d], out)
}

/// Mean squared error and its gradient with respect to `Y`.
fn loss_and_grad(y: &Tensor<f64>, target: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&a, &b) in y.data().iter().zip(target.data()) {
        let r = a - b;
        loss += r * r;
        grad.push(2.0 * r / n);
    }
    Ok((loss / n, Tensor::new(y.shape().to_vec(), grad)?))
}

fn train_one(
    cfg: &ScenarioConfig,
    t: &TrainConfig,
    task: &TrainTask,
    kind: WorkflowKind,
    sigma: f64,
) -> Result<Vec<f64>> {
    let dp = DPConfig { sigma, ..cfg.dp };
    let mut sgd_w = task.w0.clone();
    let mut adam = OptimizerState::new(task.w0.clone(), t.eta, t.beta1, t.beta2, t.eps_adam)?;
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let w = match t.optimizer {
            OptimizerKind::Sgd => &sgd_w,
            OptimizerKind::Adam => &adam.theta,
        };
        let y = forward(&task.x, w)?;
        let (loss, dy) = loss_and_grad(&y, &task.target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let g = run_workflow(kind, &task.x, &dy, &dp.with_step(step as u64), cfg.mem)?.grad_w;
        match t.optimizer {
            OptimizerKind::Sgd => sgd_w = dp_sgd_step(&sgd_w, &g, t.eta)?,
            OptimizerKind::Adam => adam = dp_adam_step(&adam, &g)?,
        }
    }
    Ok(losses)
}

/// Trains one linear layer with every configured workflow and noise scale.
/// All workflows share the data, initial weights and noise keys.
pub fn train_demo(cfg: &ScenarioConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let t = cfg.train.as_ref().ok_or_else(|| config_err("train", "train-demo needs a `train` section"))?;
    if cfg.workflows.iter().filter(|k| k.is_private()).count() < 2 {
        return Err(config_err("workflows", "train-demo needs at least two DP workflows"));
    }
    let task = train_task(t, cfg.dp.seed)?;
    let sigmas = if t.sigmas.is_empty() { vec![cfg.dp.sigma] } else { t.sigmas.clone() };
    let jobs: Vec<(f64, WorkflowKind)> =
        sigmas.iter().flat_map(|&s| cfg.workflows.iter().map(move |&k| (s, k))).collect();
    jobs.par_iter()
        .map(|&(sigma, kind)| Ok(Trajectory { workflow: kind, sigma, losses: train_one(cfg, t, &task, kind, sigma)? }))
        .collect()
}

/// Largest per-step loss gap between any two private-workflow trajectories
/// that share a noise scale.
pub fn max_parity_gap(trajectories: &[Trajectory]) -> f64 {
    let mut gap = 0.0f64;
    for (i, a) in trajectories.iter().enumerate() {
        for b in &trajectories[i + 1..] {
            if a.sigma != b.sigma || !a.workflow.is_private() || !b.workflow.is_private() {
                continue;
            }
            for (x, y) in a.losses.iter().zip(&b.losses) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    gap
}

pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], format: ReportFormat, out: W) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["sigma", "workflow", "step", "loss"])?;
            for tr in trajectories {
                for (step, loss) in tr.losses.iter().enumerate() {
                    w.write_record([
                        tr.sigma.to_string(),
                        tr.workflow.to_string(),
                        step.to_string(),
                        loss.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, trajectories)?;
            writeln!(out)?;
        }
    }
    Ok(())
}
