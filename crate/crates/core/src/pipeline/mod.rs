//! Data, losses, metrics, persistence and the training loop.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{FusionMode, Profile, TrainConfig};
pub use loss::{joint_loss, LossConfig, LossTerms};
pub use metrics::{metrics, Metrics};
pub use model::{DepthModel, ForwardOutput, PreparedSample};
pub use scene::{generate_scene, SceneSample, SceneSpec};
pub use train::{evaluate, predict, Trainer};
