//! Multi-view report generation with topic-structured embeddings and a
//! weighted image-text contrastive objective.
//!
//! [`data`] and [`synth`] produce studies, [`train::prepare_examples`] turns
//! them into tensors (segmenting each view first), [`model::Model`] holds the
//! network, [`objectives`] the losses, [`train::Trainer`] the optimization
//! loop and [`infer::Generator`] tape-free decoding.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod train;

pub use config::{BackendKind, ModelConfig, PathsConfig, RunConfig, TrainConfig};
pub use data::{load_dataset, split_dataset, Study, TopicState, Vocabulary};
pub use error::{CoreError, Result};
pub use infer::{Decoding, Generator};
pub use model::{Model, StudyInput};
pub use objectives::{LabelMode, LossBundle};
pub use train::{Example, Trainer};
