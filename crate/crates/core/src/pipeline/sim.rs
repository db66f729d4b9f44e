use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Bp,
    Nmp,
    Deinforeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "FW")]
    Forward,
    #[serde(rename = "LOSS")]
    Loss,
    #[serde(rename = "BW")]
    Backward,
    #[serde(rename = "UP")]
    Update,
    #[serde(rename = "XFER")]
    Transfer,
}

/// Durations of one module's stages, in abstract time units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub forward: f64,
    pub loss: f64,
    pub backward: f64,
    pub update: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub modules: Vec<ModuleCost>,
    /// Cost of moving an activation (or adjoint) between adjacent devices.
    pub transfer: f64,
}

impl StageCost {
    pub fn uniform(modules: usize, cost: ModuleCost, transfer: f64) -> Self {
        StageCost {
            modules: vec![cost; modules],
            transfer,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::domain("simulate", "no modules"));
        }
        let all = self
            .modules
            .iter()
            .flat_map(|m| [m.forward, m.loss, m.backward, m.update])
            .chain([self.transfer]);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain("simulate", format!("stage duration {v} is not a finite nonnegative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub device: usize,
    pub stage: StageKind,
    pub module: usize,
    pub batch: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub makespan: f64,
    /// Sorted by start time; ties keep dispatch order.
    pub events: Vec<ScheduleEvent>,
}

#[derive(Clone, Debug)]
pub(super) struct Task {
    pub device: usize,
    pub stage: StageKind,
    pub module: usize,
    pub batch: usize,
    pub duration: f64,
    pub deps: Vec<usize>,
}

struct TaskList {
    tasks: Vec<Task>,
}

impl TaskList {
    fn push(&mut self, device: usize, stage: StageKind, module: usize, batch: usize, duration: f64, deps: Vec<usize>) -> usize {
        self.tasks.push(Task {
            device,
            stage,
            module,
            batch,
            duration,
            deps,
        });
        self.tasks.len() - 1
    }
}

/// Module `l` of `modules` lives on device `l * d / modules`, with `d`
/// capped at the module count.
pub(super) fn device_of(l: usize, modules: usize, devices: usize) -> usize {
    let d = devices.min(modules);
    l * d / modules
}

/// Builds the task graph. Each device executes its tasks in insertion
/// order, and every dependency precedes its dependent in the list.
pub(super) fn build_tasks(mode: SimMode, costs: &StageCost, devices: usize, batches: usize) -> Vec<Task> {
    use StageKind::*;
    let n = costs.modules.len();
    let c = &costs.modules;
    let mut t = TaskList { tasks: Vec::new() };
    let mut last: Option<usize> = None;
    let after = |last: Option<usize>| last.into_iter().collect::<Vec<_>>();
    match mode {
        SimMode::Bp => {
            for b in 0..batches {
                for l in 0..n {
                    last = Some(t.push(0, Forward, l, b, c[l].forward, after(last)));
                }
                last = Some(t.push(0, Loss, n - 1, b, c[n - 1].loss, after(last)));
                for l in (0..n).rev() {
                    last = Some(t.push(0, Backward, l, b, c[l].backward, after(last)));
                }
                for l in 0..n {
                    last = Some(t.push(0, Update, l, b, c[l].update, after(last)));
                }
            }
        }
        SimMode::Nmp => {
            let dev = |l| device_of(l, n, devices);
            for b in 0..batches {
                for l in 0..n {
                    if l > 0 && dev(l) != dev(l - 1) {
                        last = Some(t.push(dev(l - 1), Transfer, l - 1, b, costs.transfer, after(last)));
                    }
                    last = Some(t.push(dev(l), Forward, l, b, c[l].forward, after(last)));
                }
                last = Some(t.push(dev(n - 1), Loss, n - 1, b, c[n - 1].loss, after(last)));
                for l in (0..n).rev() {
                    if l + 1 < n && dev(l) != dev(l + 1) {
                        last = Some(t.push(dev(l + 1), Transfer, l + 1, b, costs.transfer, after(last)));
                    }
                    last = Some(t.push(dev(l), Backward, l, b, c[l].backward, after(last)));
                }
                for l in 0..n {
                    last = Some(t.push(dev(l), Update, l, b, c[l].update, after(last)));
                }
            }
        }
        SimMode::Deinforeg => {
            let d = devices.min(n);
            let groups: Vec<Vec<usize>> = (0..d).map(|g| (0..n).filter(|&l| device_of(l, n, devices) == g).collect()).collect();
            for b in 0..batches {
                let mut arrival: Option<usize> = None;
                for (g, group) in groups.iter().enumerate() {
                    let mut prev = arrival;
                    let mut fw_ids = Vec::with_capacity(group.len());
                    for &l in group {
                        let fw = t.push(g, Forward, l, b, c[l].forward, after(prev));
                        fw_ids.push(fw);
                        prev = Some(fw);
                    }
                    arrival = if g + 1 < d {
                        let sender = *group.last().expect("groups are non-empty");
                        Some(t.push(g, Transfer, sender, b, costs.transfer, after(prev)))
                    } else {
                        None
                    };
                    for (&l, &fw) in group.iter().zip(&fw_ids) {
                        let loss = t.push(g, Loss, l, b, c[l].loss, vec![fw]);
                        let bw = t.push(g, Backward, l, b, c[l].backward, vec![loss]);
                        t.push(g, Update, l, b, c[l].update, vec![bw]);
                    }
                }
            }
        }
    }
    t.tasks
}

/// Earliest-start list schedule with a fixed task order per device.
pub fn simulate(mode: SimMode, costs: &StageCost, devices: usize, batches: usize) -> Result<Schedule> {
    costs.validate()?;
    if devices == 0 {
        return Err(Error::domain("simulate", "need at least one device"));
    }
    let tasks = build_tasks(mode, costs, devices, batches);
    let ndev = devices.min(costs.modules.len());
    let mut device_free = vec![0.0f64; ndev];
    let mut end = vec![0.0f64; tasks.len()];
    let mut events = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let ready = task.deps.iter().map(|&d| end[d]).fold(0.0, f64::max);
        let start = ready.max(device_free[task.device]);
        end[i] = start + task.duration;
        device_free[task.device] = end[i];
        events.push(ScheduleEvent {
            device: task.device,
            stage: task.stage,
            module: task.module,
            batch: task.batch,
            start,
            end: end[i],
        });
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start));
    let makespan = end.iter().copied().fold(0.0, f64::max);
    Ok(Schedule { makespan, events })
}

/// Writes `device,stage,module,batch,start,end` rows sorted by start time.
pub fn emit_gantt(events: &[ScheduleEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["device", "stage", "module", "batch", "start", "end"])?;
    for e in &sorted {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_gantt(path: impl AsRef<Path>) -> Result<Vec<ScheduleEvent>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
