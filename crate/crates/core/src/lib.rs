//! Data-parallel training simulator: N workers run local momentum SGD on
//! disjoint shards and synchronize every block by model averaging or BMUF,
//! while MA and EMA shadow models observe the global model without ever being
//! sent back to the workers.

pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod sync;

pub use checkpoint::{Checkpoint, Strategy};
pub use comm::{
    decentralized_aggregate, make_shard_plan, BlockReport, Cluster, ClusterConfig, ClusterSetup, ExecMode, ShardPlan,
    Transport,
};
pub use config::{ExperimentConfig, ModelKind};
pub use error::{Error, Result};
pub use models::{Batch, LossValue, LstmSpec, MlpSpec, ModelSpec};
pub use numerics::{axpy, mean_reduce, ParamVector, Rng};
pub use optim::{sgd_step, SgdState};
pub use sync::{bmuf_sync, final_models, model_average_sync, shadow_update, FinalModels, ShadowState, SyncState};
