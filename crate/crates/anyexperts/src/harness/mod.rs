//! Training and evaluation harness: synthetic data with planted importance,
//! a toy single-block model, an adaptive-moment training loop, budget sweeps,
//! and importance-trace export.

pub mod data;
pub mod model;
pub mod sweep;
pub mod trace;
pub mod train;

pub use data::{generate, Modality, Sequence, SyntheticStream, Token};
pub use model::{ForwardPass, LayerMode, Model};
pub use sweep::{budget_sweep, SweepReport, SweepRow};
pub use trace::{export_importance_trace, ImportanceTrace, SpanAggregate, TraceRecord};
pub use train::{evaluate, train, EvalMetrics, StepRecord, TrainState};
