//! Two-level training: the unrolled hypergradient, per-level steps, the
//! search and retraining phases, run logs, and analytic test problems.

pub mod config;
pub mod engine;
pub mod hypergrad;
pub mod optim;
pub mod oracle;
pub mod phases;
pub mod problem;
pub mod trajectory;

pub use config::{BilevelConfig, Mode};
pub use engine::{Engine, LevelOptimizer, LowerReport, UpperReport};
pub use hypergrad::{hypergradient, Hypergradient, MIN_PROBE_NORM};
pub use optim::{scheduled_lr, AdamParams, OptimizerKind, OptimizerState, Schedule};
pub use oracle::{exact_hypergradient_oracle, AnalyticBilevel, InnerLoss};
pub use phases::{retrain_phase, search_phase, train_single_loop, Checkpointer, LoopOutcome, SearchOutcome};
pub use problem::{Bilevel, Evaluation};
pub use trajectory::{Event, Phase, Record, TrajectoryLog, WdaEntry};
