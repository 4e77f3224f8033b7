//! Fairness-aware strongly adaptive online meta-learning.
//!
//! A pool of interval-indexed experts runs primal-dual adaptation under
//! group-fairness constraints; a confidence-potential weighting combines
//! them into a projected meta update each round.

pub mod engine;
pub mod error;
pub mod experts;
pub mod intervals;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod stream;
pub mod weights;

pub use engine::{run, run_ablation, run_baseline_single_expert, AblationFlags, Learner, Mode, RoundRecord, RunConfig, RunOutput};
pub use error::{Error, Result};
pub use intervals::{Interval, IntervalScheme, SchemeKind};
pub use model::{FairnessKind, FairnessSpec, LossSpec, ParamPair, TaskBatch};
