//! Experiment configuration, the training loop used by every experiment,
//! metric emission and the experiment suite behind the CLI.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{fd_check, Graph, Var};
use crate::data::{self, Dataset, LabelColumn, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::layers::SgdConfig;
use crate::losses::{self, InvarianceDivisor, LossBreakdown, LossConfig, LossTerms, VarianceDivisor};
use crate::network::{Activation, Network, NetworkSpec, ProjectorSpec, TrainingMode};
use crate::pipeline::{self, ModuleCost, PipelineConfig, SimMode, StageCost};
use crate::tensor::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Gradprofile,
    NoiseSweep,
    AlphaSweep,
    Ablation,
    PipelineSim,
    Speedup,
    Gradcheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Train,
        ExperimentKind::Gradprofile,
        ExperimentKind::NoiseSweep,
        ExperimentKind::AlphaSweep,
        ExperimentKind::Ablation,
        ExperimentKind::PipelineSim,
        ExperimentKind::Speedup,
        ExperimentKind::Gradcheck,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    Spirals {
        arms: usize,
        per_arm: usize,
        noise: f64,
        turns: f64,
    },
    Csv {
        path: PathBuf,
        /// Column name, or a zero-based index written as a number.
        label: serde_json::Value,
        #[serde(default = "yes")]
        header: bool,
    },
}

fn yes() -> bool {
    true
}

impl DatasetSpec {
    /// Spirals are generated from `seed`; CSV files ignore it.
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        let mut rng = RngState::new(seed).fork(DATA_STREAM);
        match self {
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                separation,
            } => data::gen_blobs(*classes, *per_class, *dim, *separation, &mut rng),
            DatasetSpec::Spirals {
                arms,
                per_arm,
                noise,
                turns,
            } => data::gen_spirals(*arms, *per_arm, *noise, *turns, &mut rng),
            DatasetSpec::Csv { path, label, header } => {
                let col = match label {
                    serde_json::Value::String(s) => LabelColumn::Name(s.clone()),
                    serde_json::Value::Number(n) if n.as_u64().is_some() => LabelColumn::Index(n.as_u64().unwrap_or(0) as usize),
                    other => return Err(Error::Config(format!("dataset label must be a column name or index, got {other}"))),
                };
                data::load_csv(path, &col, *header)
            }
        }
    }

    fn shape(&self) -> Option<(usize, usize)> {
        match *self {
            DatasetSpec::Blobs { classes, dim, .. } => Some((dim, classes)),
            DatasetSpec::Spirals { arms, .. } => Some((2, arms)),
            DatasetSpec::Csv { .. } => None,
        }
    }
}

/// Stacked MLP modules: each encoder is one dense layer of `width` and the
/// activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub projector: ProjectorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub modules: Vec<ModuleCost>,
    #[serde(default)]
    pub transfer: f64,
    pub devices: usize,
    #[serde(default = "one")]
    pub batches: usize,
}

fn one() -> usize {
    1
}

impl SimulationSpec {
    /// Four modules on four devices with forward 1, loss 1, backward 2 and
    /// update 1 unit each.
    pub fn reference_schedule() -> Self {
        SimulationSpec {
            modules: vec![
                ModuleCost {
                    forward: 1.0,
                    loss: 1.0,
                    backward: 2.0,
                    update: 1.0,
                };
                4
            ],
            transfer: 0.0,
            devices: 4,
            batches: 1,
        }
    }

    pub fn costs(&self) -> StageCost {
        StageCost {
            modules: self.modules.clone(),
            transfer: self.transfer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    /// Z-score features with training-split statistics.
    pub standardize: bool,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    /// Optimizer for bp-mode runs; `optimizer` is used when absent.
    pub bp_optimizer: Option<SgdConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub mode: TrainingMode,
    pub workers: usize,
    pub queue_capacity: usize,
    /// Busy time added per module per batch in speedup runs.
    pub padding_ms: f64,
    /// Depth grid for gradprofile.
    pub depths: Vec<usize>,
    /// Label-noise grid for noise-sweep.
    pub thetas: Vec<f64>,
    /// Cross-entropy weight grid for alpha-sweep.
    pub alphas: Vec<f64>,
    pub simulation: SimulationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Train,
            dataset: DatasetSpec::Spirals {
                arms: 3,
                per_arm: 1000,
                noise: 0.05,
                turns: 1.0,
            },
            standardize: true,
            model: ModelSpec {
                depth: 4,
                width: 64,
                activation: Activation::Relu,
                projector: ProjectorSpec::Identity,
            },
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            bp_optimizer: None,
            epochs: 100,
            batch_size: 128,
            seeds: vec![0, 1, 2, 3, 4],
            mode: TrainingMode::Deinforeg,
            workers: 1,
            queue_capacity: 2,
            padding_ms: 10.0,
            depths: vec![4, 8, 12],
            thetas: vec![0.0, 0.2, 0.4, 0.6],
            alphas: vec![1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            simulation: SimulationSpec::reference_schedule(),
        }
    }
}

const DATA_STREAM: u64 = 1_000;
const NOISE_STREAM: u64 = 2_000;
const BATCH_STREAM: u64 = 3_000;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn optimizer_for(&self, mode: TrainingMode) -> SgdConfig {
        match (mode, self.bp_optimizer) {
            (TrainingMode::Bp, Some(o)) => o,
            _ => self.optimizer,
        }
    }

    pub fn network_spec(&self, input_width: usize, classes: usize, depth: usize, mode: TrainingMode, loss: LossConfig) -> NetworkSpec {
        NetworkSpec::mlp(
            input_width,
            classes,
            depth,
            self.model.width,
            self.model.activation,
            self.model.projector.clone(),
            loss,
            mode,
        )
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.workers == 0 || self.queue_capacity == 0 {
            return bad("workers and queue_capacity must be at least 1".into());
        }
        if !(self.padding_ms >= 0.0 && self.padding_ms.is_finite()) {
            return bad(format!("padding_ms must be a nonnegative number, got {}", self.padding_ms));
        }
        if self.model.depth == 0 || self.model.width == 0 {
            return bad("model depth and width must be positive".into());
        }
        if self.depths.contains(&0) {
            return bad("depths must be at least 1".into());
        }
        if self.thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("thetas must lie in [0, 1]".into());
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("alphas must be nonnegative".into());
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(o) = &self.bp_optimizer {
            o.validate()?;
        }
        if let Some((width, classes)) = self.dataset.shape() {
            if classes < 2 {
                return bad("dataset needs at least 2 classes".into());
            }
            let mut depths = vec![self.model.depth];
            depths.extend(&self.depths);
            for d in depths {
                self.network_spec(width, classes, d, self.mode, self.loss).validate()?;
            }
        }
        if self.kind == ExperimentKind::PipelineSim {
            if self.simulation.devices == 0 {
                return bad("simulation needs at least one device".into());
            }
            if self.simulation.modules.is_empty() {
                return bad("simulation needs at least one module".into());
            }
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`: a model's state after `epoch` epochs.
/// Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub mode: TrainingMode,
    pub seed: u64,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Per module, averaged over the epoch's batches.
    pub module_losses: Vec<LossBreakdown>,
    /// Per module mean |encoder gradient|, averaged over the epoch's batches.
    pub encoder_grads: Vec<f64>,
    /// Smallest column standard deviation of the final module's normalized
    /// test-split embeddings.
    pub embedding_min_std: f64,
}

/// Wall-clock data, kept apart from the metrics so those stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run: String,
    pub seed: u64,
    pub epoch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    pub summary: Vec<SummaryRow>,
    /// Extra machine-readable lines (simulation results, gradient checks).
    pub extra: Vec<serde_json::Value>,
    pub gantt: Vec<pipeline::ScheduleEvent>,
}

impl ExperimentOutput {
    fn absorb(&mut self, other: ExperimentOutput) {
        self.records.extend(other.records);
        self.timings.extend(other.timings);
        self.extra.extend(other.extra);
    }

    /// Summary rows for one run id, or `None` if absent.
    pub fn row(&self, run: &str, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.run == run && r.metric == metric)
    }

    pub fn mean(&self, run: &str, metric: &str) -> f64 {
        self.row(run, metric).map_or(f64::NAN, |r| r.mean)
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub const SUMMARY_METRICS: [&str; 7] = [
    "final_test_accuracy",
    "best_test_accuracy",
    "final_val_accuracy",
    "first_module_grad",
    "last_module_grad",
    "embedding_min_std",
    "epochs",
];

fn per_seed_metric(records: &[&MetricsRecord], metric: &str) -> f64 {
    let last = records.last().expect("non-empty");
    // Gradient magnitudes of the trained network: the final epoch's mean.
    let grad = |pick: fn(&[f64]) -> f64| if last.epoch > 0 { pick(&last.encoder_grads) } else { 0.0 };
    match metric {
        "final_test_accuracy" => last.test_accuracy,
        "best_test_accuracy" => records.iter().map(|r| r.test_accuracy).fold(f64::NEG_INFINITY, f64::max),
        "final_val_accuracy" => last.val_accuracy,
        "first_module_grad" => grad(|g| g.first().copied().unwrap_or(0.0)),
        "last_module_grad" => grad(|g| g.last().copied().unwrap_or(0.0)),
        "embedding_min_std" => last.embedding_min_std,
        "epochs" => last.epoch as f64,
        _ => f64::NAN,
    }
}

/// Groups records by run id (first-appearance order) and seed, then reports
/// mean and standard deviation across seeds.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut runs: Vec<&str> = Vec::new();
    for r in records {
        if !runs.contains(&r.run.as_str()) {
            runs.push(&r.run);
        }
    }
    let mut rows = Vec::new();
    for run in runs {
        let mut seeds: Vec<u64> = Vec::new();
        for r in records.iter().filter(|r| r.run == run) {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        for metric in SUMMARY_METRICS {
            let values: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    let mut rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.run == run && r.seed == s).collect();
                    rs.sort_by_key(|r| r.epoch);
                    per_seed_metric(&rs, metric)
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                run: run.to_string(),
                metric: metric.to_string(),
                mean,
                std,
                n: values.len(),
            });
        }
    }
    rows
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn split_accuracy(net: &mut Network, ds: &Dataset, split: Split) -> Result<f64> {
    let (x, y) = ds.subset(split);
    if y.is_empty() {
        return Ok(0.0);
    }
    Ok(accuracy(&net.predict(&x)?, &y))
}

fn min_column_std(m: &Matrix) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    let mean = m.column_means();
    (0..m.cols())
        .map(|j| {
            let var = (0..m.rows()).map(|r| (m.get(r, j) - mean.get(0, j)).powi(2)).sum::<f64>() / m.rows() as f64;
            var.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Training batches for one epoch. A trailing single-row batch is dropped:
/// batch statistics are undefined for it.
fn epoch_batches(ds: &Dataset, batch_size: usize, rng: &mut RngState) -> Result<Vec<(Matrix, Matrix)>> {
    Ok(data::batches(ds, Split::Train, batch_size, true, rng)?
        .into_iter()
        .filter(|b| b.indices.len() >= 2)
        .map(|b| (b.features, b.labels))
        .collect())
}

struct EpochStats {
    losses: Vec<LossBreakdown>,
    grads: Vec<f64>,
    steps: usize,
}

impl EpochStats {
    fn new(depth: usize) -> Self {
        EpochStats {
            losses: vec![LossBreakdown::default(); depth],
            grads: vec![0.0; depth],
            steps: 0,
        }
    }

    fn add(&mut self, report: &crate::network::TrainStepReport) {
        for (l, m) in report.modules.iter().enumerate() {
            let acc = &mut self.losses[l];
            acc.variance += m.losses.variance;
            acc.invariance += m.losses.invariance;
            acc.covariance += m.losses.covariance;
            acc.local_total += m.losses.local_total;
            acc.cross_entropy += m.losses.cross_entropy;
            acc.module_total += m.losses.module_total;
            self.grads[l] += m.encoder_grad;
        }
        self.steps += 1;
    }

    fn finish(mut self) -> (Vec<LossBreakdown>, Vec<f64>) {
        let k = self.steps.max(1) as f64;
        for l in &mut self.losses {
            l.variance /= k;
            l.invariance /= k;
            l.covariance /= k;
            l.local_total /= k;
            l.cross_entropy /= k;
            l.module_total /= k;
        }
        for g in &mut self.grads {
            *g /= k;
        }
        (self.losses, self.grads)
    }
}

/// How a single training run executes its steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Executor {
    Sequential,
    Pipelined(PipelineConfig),
}

/// Trains one network on `ds` and records every epoch (epoch 0 first).
pub fn train_run(
    run: &str,
    spec: &NetworkSpec,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    executor: Executor,
) -> Result<(ExperimentOutput, Network)> {
    let mut net = Network::build(spec, cfg.optimizer_for(spec.mode), seed)?;
    let mut rng = RngState::new(seed).fork(BATCH_STREAM);
    let mut out = ExperimentOutput::default();
    let depth = net.depth();
    let (test_x, _) = ds.subset(Split::Test);
    let record = |net: &mut Network, epoch: usize, losses: Vec<LossBreakdown>, grads: Vec<f64>| -> Result<MetricsRecord> {
        let embedding_min_std = if test_x.rows() > 0 {
            min_column_std(&net.final_embeddings(&test_x)?)
        } else {
            0.0
        };
        Ok(MetricsRecord {
            run: run.to_string(),
            mode: spec.mode,
            seed,
            epoch,
            train_accuracy: split_accuracy(net, ds, Split::Train)?,
            val_accuracy: split_accuracy(net, ds, Split::Val)?,
            test_accuracy: split_accuracy(net, ds, Split::Test)?,
            module_losses: losses,
            encoder_grads: grads,
            embedding_min_std,
        })
    };
    out.records.push(record(&mut net, 0, vec![LossBreakdown::default(); depth], vec![0.0; depth])?);
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(ds, cfg.batch_size, &mut rng)?;
        let start = Instant::now();
        let mut stats = EpochStats::new(depth);
        match executor {
            Executor::Sequential => {
                for (x, y) in &batches {
                    stats.add(&net.train_step(x, y)?);
                }
            }
            Executor::Pipelined(pc) => {
                let run = pipeline::run_pipelined(net, std::slice::from_ref(&batches), pc)?;
                for r in run.reports.iter().flatten() {
                    stats.add(r);
                }
                net = run.network;
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let (losses, grads) = stats.finish();
        let rec = record(&mut net, epoch, losses, grads)?;
        for (l, loss) in rec.module_losses.iter().enumerate() {
            if !loss.module_total.is_finite() {
                return Err(Error::domain(
                    "train",
                    format!("{run} seed {seed}: module {l} loss diverged at epoch {epoch}"),
                ));
            }
        }
        out.records.push(rec);
        out.timings.push(TimingRecord {
            run: run.to_string(),
            seed,
            epoch,
            seconds,
        });
    }
    Ok((out, net))
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let ds = cfg.dataset.build(seed)?;
    if cfg.standardize {
        ds.standardized()
    } else {
        Ok(ds)
    }
}

fn mode_name(mode: TrainingMode) -> &'static str {
    match mode {
        TrainingMode::Deinforeg => "deinforeg",
        TrainingMode::Bp => "bp",
    }
}

fn sequential_or_pipelined(cfg: &ExperimentConfig, mode: TrainingMode) -> Executor {
    if mode == TrainingMode::Deinforeg && cfg.workers > 1 {
        Executor::Pipelined(PipelineConfig {
            workers: cfg.workers,
            queue_capacity: cfg.queue_capacity,
            padding: Duration::ZERO,
        })
    } else {
        Executor::Sequential
    }
}

/// Runs `cfg.seeds` for each variant and summarizes.
fn sweep(cfg: &ExperimentConfig, variants: &[(String, usize, TrainingMode, LossConfig, f64)]) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for &seed in &cfg.seeds {
        let clean = load_dataset(cfg, seed)?;
        for (run, depth, mode, loss, theta) in variants {
            let ds = if *theta > 0.0 {
                data::inject_label_noise(
                    &clean,
                    NoiseSpec {
                        theta: *theta,
                        seed: RngState::new(seed).fork(NOISE_STREAM).below(u32::MAX as usize) as u64,
                    },
                )?
                .0
            } else {
                clean.clone()
            };
            let spec = cfg.network_spec(ds.dim(), ds.classes, *depth, *mode, *loss);
            let (o, _) = train_run(run, &spec, &ds, cfg, seed, sequential_or_pipelined(cfg, *mode))?;
            out.absorb(o);
        }
    }
    out.summary = summarize(&out.records);
    Ok(out)
}

pub fn experiment_train(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    sweep(cfg, &[(mode_name(cfg.mode).to_string(), cfg.model.depth, cfg.mode, cfg.loss, 0.0)])
}

pub fn depth_run_id(mode: TrainingMode, depth: usize) -> String {
    format!("{}-L{depth}", mode_name(mode))
}

pub fn experiment_depth_sweep(cfg: &ExperimentConfig, depths: &[usize]) -> Result<ExperimentOutput> {
    let mut variants = Vec::new();
    for &d in depths {
        for mode in [TrainingMode::Bp, TrainingMode::Deinforeg] {
            variants.push((depth_run_id(mode, d), d, mode, cfg.loss, 0.0));
        }
    }
    sweep(cfg, &variants)
}

pub fn noise_run_id(mode: TrainingMode, theta: f64) -> String {
    format!("{}-theta{theta}", mode_name(mode))
}

pub fn experiment_noise_sweep(cfg: &ExperimentConfig, thetas: &[f64]) -> Result<ExperimentOutput> {
    let mut variants = Vec::new();
    for &t in thetas {
        for mode in [TrainingMode::Bp, TrainingMode::Deinforeg] {
            variants.push((noise_run_id(mode, t), cfg.model.depth, mode, cfg.loss, t));
        }
    }
    sweep(cfg, &variants)
}

pub fn alpha_run_id(alpha: f64) -> String {
    format!("alpha{alpha:e}")
}

pub fn experiment_alpha_sweep(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<ExperimentOutput> {
    let variants: Vec<_> = alphas
        .iter()
        .map(|&a| {
            let loss = LossConfig { alpha: a, ..cfg.loss };
            (alpha_run_id(a), cfg.model.depth, TrainingMode::Deinforeg, loss, 0.0)
        })
        .collect();
    sweep(cfg, &variants)
}

pub fn ablation_run_id(name: &str) -> String {
    format!("ablation-{name}")
}

pub fn experiment_ablation(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let variants: Vec<_> = LossTerms::ablation_grid()
        .iter()
        .map(|(name, terms)| {
            let loss = LossConfig { terms: *terms, ..cfg.loss };
            (ablation_run_id(name), cfg.model.depth, TrainingMode::Deinforeg, loss, 0.0)
        })
        .collect();
    sweep(cfg, &variants)
}

pub fn experiment_pipeline_sim(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let sim = &cfg.simulation;
    let costs = sim.costs();
    let mut out = ExperimentOutput::default();
    for (name, mode) in [("bp", SimMode::Bp), ("nmp", SimMode::Nmp), ("deinforeg", SimMode::Deinforeg)] {
        let s = pipeline::simulate(mode, &costs, sim.devices, sim.batches)?;
        out.extra.push(serde_json::json!({ "run": format!("sim-{name}"), "makespan": s.makespan, "events": s.events.len() }));
        out.summary.push(SummaryRow {
            run: format!("sim-{name}"),
            metric: "makespan".into(),
            mean: s.makespan,
            std: 0.0,
            n: 1,
        });
        if mode == SimMode::Deinforeg {
            out.gantt = s.events;
        }
    }
    Ok(out)
}

/// Times the decoupled network on one worker and on `cfg.workers` workers
/// with `cfg.padding_ms` of extra work per module and batch. Metrics come
/// from the multi-worker run (the single-worker run is identical).
pub fn experiment_speedup(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let padding = Duration::from_secs_f64(cfg.padding_ms / 1e3);
    let mut out = ExperimentOutput::default();
    let mut speedups = Vec::new();
    let mut times: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, seed)?;
        let spec = cfg.network_spec(ds.dim(), ds.classes, cfg.model.depth, TrainingMode::Deinforeg, cfg.loss);
        let mut per_worker = [0.0; 2];
        for (slot, workers) in [1, cfg.workers].into_iter().enumerate() {
            let pc = PipelineConfig {
                workers,
                queue_capacity: cfg.queue_capacity,
                padding,
            };
            let run = format!("pipelined-w{workers}");
            let (o, _) = train_run(&run, &spec, &ds, cfg, seed, Executor::Pipelined(pc))?;
            let total: f64 = o.timings.iter().map(|t| t.seconds).sum();
            per_worker[slot] = total / o.timings.len().max(1) as f64;
            out.timings.extend(o.timings);
            if slot == 1 {
                out.records.extend(o.records);
            }
        }
        times[0].push(per_worker[0]);
        times[1].push(per_worker[1]);
        speedups.push(per_worker[0] / per_worker[1]);
    }
    let mut rows = summarize(&out.records);
    for (slot, w) in [1, cfg.workers].into_iter().enumerate() {
        let (mean, std) = mean_std(&times[slot]);
        rows.push(SummaryRow {
            run: format!("pipelined-w{w}"),
            metric: "epoch_seconds".into(),
            mean,
            std,
            n: times[slot].len(),
        });
    }
    let (mean, std) = mean_std(&speedups);
    rows.push(SummaryRow {
        run: format!("pipelined-w{}", cfg.workers),
        metric: "speedup".into(),
        mean,
        std,
        n: speedups.len(),
    });
    out.summary = rows;
    Ok(out)
}

/// One finite-difference probe of the gradient-check suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub name: String,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub relative_error: f64,
}

const FD_STEP: f64 = 1e-6;

/// Values bounded away from zero, so kinks sit far from the probe points.
fn away_from_zero(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    rng.normal(rows, cols, 0.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum().max(0.0) * 0.1 + 0.05 } else { v })
}

fn positive(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| 0.5 + 1.5 * rng.uniform()).collect()).expect("sized")
}

fn one_hot_batch(rng: &mut RngState, n: usize, k: usize) -> Matrix {
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    data::one_hot(&labels, k)
}

/// Reduces any node to a scalar through a fixed random weighting so every
/// entry of the adjoint is exercised.
fn project(g: &mut Graph, v: Var, rng: &mut RngState) -> Result<Var> {
    let (r, c) = g.value(v).shape();
    let w = g.constant(rng.normal(r, c, 0.0, 1.0));
    let h = g.hadamard(v, w)?;
    g.sum_all(h)
}

/// Finite-difference checks for every graph op and every composed loss on
/// one random shape drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = RngState::new(seed);
    let n = 2 + rng.below(7);
    let c = 2 + rng.below(7);
    let k = 2 + rng.below(3);
    let mut results = Vec::new();
    let mut push = |name: &str, g: &Graph, root: Var, leaves: &[Var]| -> Result<()> {
        let mut worst = 0.0f64;
        for &leaf in leaves {
            worst = worst.max(fd_check(g, root, leaf, FD_STEP)?);
        }
        results.push(GradcheckResult {
            name: name.to_string(),
            seed,
            rows: n,
            cols: c,
            relative_error: worst,
        });
        Ok(())
    };

    type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 4] = [
        ("add", Graph::add),
        ("sub", Graph::sub),
        ("hadamard", Graph::hadamard),
        ("div", Graph::div),
    ];
    for (name, op) in binaries {
        for (suffix, shape) in [("", (n, c)), ("_row", (1, c)), ("_col", (n, 1)), ("_scalar", (1, 1))] {
            let mut g = Graph::new();
            let a = g.param(rng.normal(n, c, 0.0, 1.0));
            let b = g.param(if name == "div" { positive(&mut rng, shape.0, shape.1) } else { rng.normal(shape.0, shape.1, 0.0, 1.0) });
            let y = op(&mut g, a, b)?;
            let root = project(&mut g, y, &mut rng)?;
            push(&format!("{name}{suffix}"), &g, root, &[a, b])?;
        }
    }
    {
        let mut g = Graph::new();
        let a = g.param(rng.normal(n, c, 0.0, 1.0));
        let b = g.param(rng.normal(c, k, 0.0, 1.0));
        let y = g.matmul(a, b)?;
        let root = project(&mut g, y, &mut rng)?;
        push("matmul", &g, root, &[a, b])?;
    }
    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unaries: [(&str, Unary, bool); 11] = [
        ("transpose", Graph::transpose, false),
        ("relu", Graph::relu, false),
        ("tanh", Graph::tanh, false),
        ("exp", Graph::exp, false),
        ("log", Graph::log, true),
        ("sqrt", Graph::sqrt, true),
        ("square", Graph::square, false),
        ("sum_all", Graph::sum_all, false),
        ("mean_columns", Graph::mean_columns, false),
        ("mean_rows", Graph::mean_rows, false),
        ("softmax_rows", Graph::softmax_rows, false),
    ];
    for (name, op, needs_positive) in unaries {
        let mut g = Graph::new();
        let x = g.param(if needs_positive { positive(&mut rng, n, c) } else { away_from_zero(&mut rng, n, c) });
        let y = op(&mut g, x)?;
        let root = project(&mut g, y, &mut rng)?;
        push(name, &g, root, &[x])?;
    }
    {
        let mut g = Graph::new();
        let x = g.param(away_from_zero(&mut rng, n, c));
        let y = g.scale(x, -1.7)?;
        let root = project(&mut g, y, &mut rng)?;
        push("scale", &g, root, &[x])?;

        let mut g = Graph::new();
        let x = g.param(away_from_zero(&mut rng, n, c));
        let y = g.offset(x, 0.3)?;
        let root = project(&mut g, y, &mut rng)?;
        push("offset", &g, root, &[x])?;

        let mut g = Graph::new();
        // Inputs in [0.3, 1.2], kept at least 0.1 away from the kink at 1.
        let x = g.param(positive(&mut rng, n, c).map(|v| v * 0.6).map(|v| if (v - 1.0).abs() < 0.1 { v + 0.25 } else { v }));
        let y = g.hinge(x, 1.0)?;
        let root = project(&mut g, y, &mut rng)?;
        push("hinge", &g, root, &[x])?;

        let mut g = Graph::new();
        let x = g.param(rng.normal(n, c, 0.0, 1.0));
        let y = g.row_l2_normalize(x, 1e-8)?;
        let root = project(&mut g, y, &mut rng)?;
        push("row_l2_normalize", &g, root, &[x])?;

        let mut g = Graph::new();
        let x = g.param(rng.normal(c, c, 0.0, 1.0));
        let y = g.select_off_diagonal(x)?;
        let root = project(&mut g, y, &mut rng)?;
        push("select_off_diagonal", &g, root, &[x])?;

        let mut g = Graph::new();
        let x = g.param(rng.normal(n, k, 0.0, 1.0));
        let labels = one_hot_batch(&mut rng, n, k);
        let root = g.softmax_cross_entropy(x, &labels)?;
        push("softmax_cross_entropy", &g, root, &[x])?;
    }

    let labels = one_hot_batch(&mut rng, n, k);
    let divisors = [
        (VarianceDivisor::Eq4, InvarianceDivisor::Eq5),
        (VarianceDivisor::Algorithm1, InvarianceDivisor::MseAllEntries),
    ];
    for (vd, id) in divisors {
        for center in [false, true] {
            // gamma is set high so the hinge stays active for every column.
            let cfg = LossConfig {
                gamma: 5.0,
                variance_divisor: vd,
                invariance_divisor: id,
                center_before_sim: center,
                ..LossConfig::default()
            };
            let tag = format!("{vd:?}/{id:?}/center={center}").to_lowercase();
            let e = rng.normal(n, c, 0.0, 1.0);

            let mut g = Graph::new();
            let x = g.param(e.clone());
            let root = losses::variance_loss(&mut g, x, &cfg)?;
            push(&format!("variance_loss[{tag}]"), &g, root, &[x])?;

            let mut g = Graph::new();
            let x = g.param(e.clone());
            let root = losses::invariance_loss(&mut g, x, &labels, &cfg)?;
            push(&format!("invariance_loss[{tag}]"), &g, root, &[x])?;

            let mut g = Graph::new();
            let x = g.param(e.clone());
            let root = losses::covariance_loss(&mut g, x)?;
            push(&format!("covariance_loss[{tag}]"), &g, root, &[x])?;

            let mut g = Graph::new();
            let x = g.param(e.clone());
            let nodes = losses::local_loss(&mut g, x, &labels, &cfg)?;
            push(&format!("local_loss[{tag}]"), &g, nodes.total, &[x])?;

            let mut g = Graph::new();
            let x = g.param(e.clone());
            let w = g.param(rng.normal(c, k, 0.0, 1.0));
            let nodes = losses::local_loss(&mut g, x, &labels, &cfg)?;
            let logits = g.matmul(x, w)?;
            let ce = losses::cross_entropy_loss(&mut g, logits, &labels)?;
            let root = losses::module_total(&mut g, nodes.total, ce, &LossConfig { alpha: 0.5, ..cfg })?;
            push(&format!("module_total[{tag}]"), &g, root, &[x, w])?;
        }
    }
    {
        let mut g = Graph::new();
        let x = g.param(rng.normal(n, k, 0.0, 1.0));
        let root = losses::cross_entropy_loss(&mut g, x, &labels)?;
        push("cross_entropy_loss", &g, root, &[x])?;
    }
    Ok(results)
}

pub fn experiment_gradcheck(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    let mut all: Vec<GradcheckResult> = Vec::new();
    for &seed in &cfg.seeds {
        let rs = gradcheck_suite(seed)?;
        for r in &rs {
            out.extra.push(serde_json::to_value(r)?);
        }
        all.extend(rs);
    }
    let mut names: Vec<&str> = Vec::new();
    for r in &all {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    for name in names {
        let errs: Vec<f64> = all.iter().filter(|r| r.name == name).map(|r| r.relative_error).collect();
        out.summary.push(SummaryRow {
            run: format!("gradcheck-{name}"),
            metric: "max_relative_error".into(),
            mean: errs.iter().copied().fold(0.0, f64::max),
            std: 0.0,
            n: errs.len(),
        });
    }
    Ok(out)
}

/// Dispatches on `cfg.kind`.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::Train => experiment_train(cfg),
        ExperimentKind::Gradprofile => experiment_depth_sweep(cfg, &cfg.depths),
        ExperimentKind::NoiseSweep => experiment_noise_sweep(cfg, &cfg.thetas),
        ExperimentKind::AlphaSweep => experiment_alpha_sweep(cfg, &cfg.alphas),
        ExperimentKind::Ablation => experiment_ablation(cfg),
        ExperimentKind::PipelineSim => experiment_pipeline_sim(cfg),
        ExperimentKind::Speedup => experiment_speedup(cfg),
        ExperimentKind::Gradcheck => experiment_gradcheck(cfg),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.jsonl`, `timing.jsonl`, `summary.csv` and, when the
/// experiment produced a schedule, `gantt.csv` into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.jsonl");
    let records = out.records.iter().map(|r| serde_json::to_value(r).expect("records serialize"));
    write_jsonl(&metrics, records.chain(out.extra.iter().cloned()))?;
    write_jsonl(&dir.join("timing.jsonl"), &out.timings)?;
    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    for row in &out.summary {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    if !out.gantt.is_empty() {
        pipeline::emit_gantt(&out.gantt, dir.join("gantt.csv"))?;
    }
    Ok(())
}

/// Reads back the training records of a `metrics.jsonl`, skipping lines of
/// other shapes.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if value.get("epoch").is_some() {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}
