use std::ops::Range;
use std::sync::mpsc::{channel, sync_channel, Receiver, Sender, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Block, ModuleReport, Network, TrainStepReport, TrainingMode};
use crate::tensor::Matrix;

/// One batch travelling downstream. The activation is a plain value with no
/// graph attached.
#[derive(Clone, Debug)]
pub struct HandoffPacket {
    pub epoch: usize,
    pub batch: usize,
    pub activation: Matrix,
    pub labels: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    /// Extra busy time per module per batch, split evenly between the
    /// forward and the loss/backward/update phase.
    #[serde(with = "duration_ms")]
    pub padding: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: 1,
            queue_capacity: 2,
            padding: Duration::ZERO,
        }
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Duration::try_from_secs_f64(ms / 1e3).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug)]
pub struct PipelineRun {
    pub network: Network,
    /// Wall-clock seconds per epoch, measured at the collector.
    pub epoch_seconds: Vec<f64>,
    /// Per epoch, per batch.
    pub reports: Vec<Vec<TrainStepReport>>,
    pub workers: usize,
}

impl PipelineRun {
    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

/// Contiguous module ranges, one per worker. Worker counts above the module
/// count are capped.
pub fn partition(modules: usize, workers: usize) -> Vec<Range<usize>> {
    let w = workers.min(modules).max(1);
    (0..w).map(|i| i * modules / w..(i + 1) * modules / w).collect()
}

struct Metric {
    epoch: usize,
    batch: usize,
    module: usize,
    report: ModuleReport,
}

enum Outcome {
    Done(Vec<Block>),
    Failed(String),
    /// Stopped because a neighbour went away; the neighbour holds the cause.
    Orphaned(Vec<Block>),
}

fn spin(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

fn worker_loop(
    mut blocks: Vec<Block>,
    inbox: Receiver<HandoffPacket>,
    outbox: Option<SyncSender<HandoffPacket>>,
    metrics: Sender<Metric>,
    padding: Duration,
) -> Outcome {
    let half = padding / 2;
    while let Ok(packet) = inbox.recv() {
        let mut input = packet.activation;
        let mut states = Vec::with_capacity(blocks.len());
        for block in &mut blocks {
            let state = match block.encode_train(&input) {
                Ok(s) => s,
                Err(e) => return Outcome::Failed(format!("module {}: {e}", block.index)),
            };
            spin(half);
            input = state.output().clone();
            states.push(state);
        }
        if let Some(out) = &outbox {
            let next = HandoffPacket {
                epoch: packet.epoch,
                batch: packet.batch,
                activation: input,
                labels: packet.labels.clone(),
            };
            if out.send(next).is_err() {
                return Outcome::Orphaned(blocks);
            }
        }
        for (block, state) in blocks.iter_mut().zip(states) {
            let report = match block.finish_train(state, &packet.labels) {
                Ok(r) => r,
                Err(e) => return Outcome::Failed(format!("module {}: {e}", block.index)),
            };
            spin(padding - half);
            let m = Metric {
                epoch: packet.epoch,
                batch: packet.batch,
                module: block.index,
                report,
            };
            if metrics.send(m).is_err() {
                return Outcome::Orphaned(blocks);
            }
        }
    }
    Outcome::Done(blocks)
}

/// Trains a decoupled network over `epochs` (each a list of feature/one-hot
/// label batches) with modules split contiguously over worker threads.
/// Parameters end up identical to sequential decoupled training on the same
/// batch sequence.
pub fn run_pipelined(mut net: Network, epochs: &[Vec<(Matrix, Matrix)>], config: PipelineConfig) -> Result<PipelineRun> {
    if net.mode() != TrainingMode::Deinforeg {
        return Err(Error::Config("pipelined execution needs a deinforeg network".into()));
    }
    if config.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    if config.queue_capacity == 0 {
        return Err(Error::Config("queue capacity must be at least 1".into()));
    }
    for (e, batches) in epochs.iter().enumerate() {
        for (b, (x, y)) in batches.iter().enumerate() {
            if x.cols() != net.spec.input_width || y.cols() != net.spec.classes || x.rows() != y.rows() {
                return Err(Error::shape(
                    "run_pipelined",
                    format!("epoch {e} batch {b}: features {:?}, labels {:?}", x.shape(), y.shape()),
                ));
            }
        }
    }

    let depth = net.depth();
    let ranges = partition(depth, config.workers);
    let mut all_blocks = std::mem::take(&mut net.blocks).into_iter();
    let groups: Vec<Vec<Block>> = ranges.iter().map(|r| all_blocks.by_ref().take(r.len()).collect()).collect();

    let (metric_tx, metric_rx) = channel::<Metric>();
    // Link 0 feeds worker 0; link w carries worker w-1's output to worker w.
    let (mut senders, mut receivers): (Vec<_>, Vec<_>) =
        (0..groups.len()).map(|_| sync_channel::<HandoffPacket>(config.queue_capacity)).unzip();
    let feed_tx = senders.remove(0);
    let mut reports: Vec<Vec<TrainStepReport>> = epochs
        .iter()
        .map(|b| {
            vec![
                TrainStepReport {
                    modules: vec![ModuleReport::default(); depth],
                    accuracy: 0.0,
                };
                b.len()
            ]
        })
        .collect();
    let mut epoch_seconds = vec![0.0; epochs.len()];

    let outcomes: Vec<std::result::Result<Outcome, String>> = thread::scope(|s| {
        let mut handles = Vec::with_capacity(groups.len());
        let mut outboxes = senders.drain(..).map(Some).chain(std::iter::once(None));
        for (w, (blocks, inbox)) in groups.into_iter().zip(receivers.drain(..)).enumerate() {
            let outbox = outboxes.next().flatten();
            let metrics = metric_tx.clone();
            let padding = config.padding;
            handles.push(
                thread::Builder::new()
                    .name(format!("pipeline-worker-{w}"))
                    .spawn_scoped(s, move || worker_loop(blocks, inbox, outbox, metrics, padding))
                    .expect("spawning a worker thread"),
            );
        }
        drop(metric_tx);

        let start = Instant::now();
        let feeder = s.spawn(move || {
            for (e, batches) in epochs.iter().enumerate() {
                for (b, (x, y)) in batches.iter().enumerate() {
                    let p = HandoffPacket {
                        epoch: e,
                        batch: b,
                        activation: x.clone(),
                        labels: y.clone(),
                    };
                    if feed_tx.send(p).is_err() {
                        return;
                    }
                }
            }
        });

        let mut remaining: Vec<usize> = epochs.iter().map(|b| b.len() * depth).collect();
        let mut mark = start;
        for m in metric_rx.iter() {
            let step = &mut reports[m.epoch][m.batch];
            step.modules[m.module] = m.report;
            if m.module + 1 == depth {
                step.accuracy = m.report.accuracy;
            }
            remaining[m.epoch] -= 1;
            if remaining[m.epoch] == 0 {
                let now = Instant::now();
                epoch_seconds[m.epoch] = (now - mark).as_secs_f64();
                mark = now;
            }
        }
        let _ = feeder.join();
        handles
            .into_iter()
            .enumerate()
            .map(|(w, h)| {
                h.join().map_err(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "unknown panic".into());
                    format!("worker {w} panicked: {msg}")
                })
            })
            .collect()
    });

    let mut blocks = Vec::with_capacity(depth);
    let mut failure: Option<String> = None;
    let mut orphaned = false;
    for (w, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Outcome::Done(b)) => blocks.extend(b),
            Ok(Outcome::Orphaned(b)) => {
                orphaned = true;
                blocks.extend(b);
            }
            Ok(Outcome::Failed(msg)) => {
                failure.get_or_insert(format!("worker {w}: {msg}"));
            }
            Err(msg) => {
                failure.get_or_insert(msg);
            }
        }
    }
    if let Some(msg) = failure {
        return Err(Error::Worker(msg));
    }
    if orphaned {
        return Err(Error::Worker("a worker stopped early".into()));
    }
    net.blocks = blocks;
    Ok(PipelineRun {
        network: net,
        epoch_seconds,
        reports,
        workers: ranges.len(),
    })
}
