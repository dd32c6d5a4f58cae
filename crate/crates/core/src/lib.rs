//! Performance-aware neural architecture search.
//!
//! Convolutional networks are described by [`archspec`], costed exactly by
//! [`costmodel`], proposed by a Tree-structured Parzen Estimator ([`tpe`]),
//! scored by an [`evaluator`] and reduced to accuracy/cost Pareto frontiers
//! ([`pareto`]). The [`engine`] alternates search phases with refinement
//! steps that freeze the most common frontier setting.

pub mod archspec;
pub mod costmodel;
pub mod engine;
pub mod evaluator;
pub mod pareto;
pub mod reference;
pub mod report;
pub mod tpe;
pub mod util;

pub use archspec::{
    Assignment, ConvLayerSpec, NetworkArch, Padding, ParamDomain, ParamId, ParamKind, ParamValue,
    SearchSpace, TensorShape,
};
pub use costmodel::{network_cost, NetworkCost};
pub use engine::{
    run_experiment, Engine, EngineError, EngineState, ExperimentConfig, LogRecord, SolverSettings,
    TrialLog,
};
pub use evaluator::{EvalRequest, EvalResponse, Evaluator, Surrogate};
pub use pareto::{dominates, frontier, ScoredPoint};
pub use tpe::{TpeConfig, TpeState};
