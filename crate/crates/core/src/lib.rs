//! Desk-scale dynamic layer-skipping inference runtime.
//!
//! A small trained transformer executes each layer in one of four states —
//! full precision, simulated int8, simulated int4, or skipped with a
//! calibrated scale correction — chosen per input, per layer, by a learned
//! scorer that runs one decision ahead of the compute stream. The crates
//! here cover the whole loop: base-model training, scale calibration,
//! redundancy profiling, the scoring policy and its REINFORCE training,
//! the synchronous and pipelined runtimes, a budget controller, and exact
//! small-model oracles for ground truth.
//!
//! Layer states are coded 0 (skip), 1 (int4), 2 (int8), 4 (full); a path
//! like `40124` lists one code per layer. First and last layers always run
//! in state 4. Path cost is the sum of codes; quality is task accuracy or
//! perplexity. Everything is deterministic given its seeds.

pub mod calibration;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod profiler;
pub mod quant;
pub mod rewards;
pub mod runtime;
pub mod task;
pub mod train;

pub use calibration::{compute_scale_table, ScaleTable};
pub use checkpoint::{config_hash, Checkpoint};
pub use error::{DashError, Result};
pub use model::{
    full_path, full_path_cost, path_cost, path_from_string, path_to_string, validate_path,
    LayerState, ModelConfig, ModelParams, ToyModel, ALL_STATES,
};
pub use numerics::Matrix;
pub use oracle::{enumerate_paths, pareto_frontier, random_skip_baseline, PathEvaluation};
pub use policy::{
    score_candidates, DecisionStep, DecisionTrace, ScorerConfig, ScorerParams, StateSet,
};
pub use profiler::{io_similarity_profile, static_skip_sweep, SimilarityProfile};
pub use rewards::{
    acc_reward_classification, acc_reward_perplexity, assign_rewards, efficiency_reward,
    position_weight, reinforce_gradient, step_reward, train_scorer, PplSignMode, RewardConfig,
    StepReward, TrainMode, TrainScorerConfig,
};
pub use runtime::{
    budget_sweep, evaluate_policy, run_async, run_sync, AsyncOptions, BudgetRow, PipelineReport,
    RunMode,
};
pub use task::{Episode, TaskKind, TaskSpec};
pub use train::train_base_model;
