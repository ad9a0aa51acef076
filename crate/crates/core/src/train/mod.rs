//! Pre-training: warm-up on paired data, then K epochs of IDAE, CDAE and
//! the gradient-free translation refresh.
//!
//! A run directory holds `config.json`, `metrics.jsonl` (deterministic),
//! `timing.jsonl` (wall clock) and per-checkpoint files `epoch-NNNN.dmc`,
//! `.optim.dmc`, `.state.json` and `.dms`, plus `final.dmc`.

mod config;
mod optim;
mod trainer;

pub use config::{Mode, TrainConfig};
pub use optim::{clip_global_norm, lr_schedule, Adam};
pub use trainer::{checkpoint_path, store_path, EpochSummary, PassSummary, RunState, Trainer};
