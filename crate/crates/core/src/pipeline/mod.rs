//! Schedule simulation for end-to-end, naive model-parallel and decoupled
//! training, and a threaded executor that trains decoupled modules
//! concurrently.

mod executor;
mod sim;

pub use executor::{partition, run_pipelined, HandoffPacket, PipelineConfig, PipelineRun};
pub use sim::{emit_gantt, parse_gantt, simulate, ModuleCost, Schedule, ScheduleEvent, SimMode, StageCost, StageKind};
