//! Hierarchical visual question answering: a small reverse-mode autodiff
//! engine, question and image encoders, question-guided attention, a
//! categorize-then-answer head, training, data plumbing and metrics.

mod binio;

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod hier;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{AttentionResult, FusionParams};
pub use config::{Profile, RunConfig};
pub use data::{
    generate_synthetic, load_manifest, Dataset, DatasetDims, DatasetManifest, Sample,
    SyntheticData, SyntheticSpec,
};
pub use encoders::{EmbeddingTable, FeatureFile, LstmParams, RegionFeatures};
pub use error::{Error, ErrorKind, Result};
pub use hier::{build_answer_space, AnswerSpace, RoutingMode};
pub use metrics::EvalReport;
pub use model::{Model, ModelDims, ModelKind, Prediction};
pub use optim::{AdamaxState, LrSchedule};
pub use tape::{Tape, Var};
pub use tensor::{Precision, Scalar, Tensor};
pub use train::{EpochLog, TrainConfig};
