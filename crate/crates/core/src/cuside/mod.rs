//! Context-sensitive chunking with simulated future context: the joint
//! front-end/back-end model, the future-context simulator and training.

mod model;
mod sim;
mod train;

pub use model::{inference_modes, ChunkForward, FeatureNorm, Model, ModelConfig};
pub use sim::{simulate_future, simulation_loss, total_loss, SimNetConfig, SimState};
pub use train::{
    average_checkpoints, mix_seed, train_step, utterance_objective, validate, BranchModes, Objective,
    SchedulerState, StepMetrics, TrainSummary, Trainer, TrainingConfig, Utterance, ValMetrics,
};
