//! Knowledge-graph guided reinforcement-learning attacks that promote a target
//! item in a black-box recommender, plus the simulated targets, baseline
//! attackers and evaluation harness around them.

pub mod baselines;
pub mod encoder;
pub mod env;
pub mod error;
pub mod harness;
pub mod ids;
pub mod kg;
pub mod numeric;
pub mod policy;
pub mod trainer;
pub mod transe;

pub use baselines::{generate_baseline_profile, run_baseline, BaselineKind};
pub use encoder::{AttentionScale, EncoderConfig, StateEncoder, StateRepr};
pub use env::{BlackBoxTarget, EnvConfig, EnvMode, InteractionMatrix, MfConfig, RecommenderEnv, RewardRecord};
pub use error::{Error, Result};
pub use harness::{
    ablation_sweep, generate_synthetic, run_experiment, run_experiment_on, AttackerKind, DataConfig, DataFiles, Dataset,
    ExperimentConfig, ExperimentResult, ResultRow, SweepAxis, SweepTable, SyntheticData, SyntheticSpec,
};
pub use ids::{EntityId, ItemId, RelationId, UserId, Vocab};
pub use policy::{AnchorSource, FakeProfile, HierarchicalAction, ItemSource};
pub use kg::{load_kg, KnowledgeGraph, LoadReport, Triple};
pub use trainer::{run_attack, AttackContext, AttackRun, EpisodeMetrics, TrainConfig};
pub use transe::{pretrain, KgEmbeddings, PretrainConfig};
