//! Lightweight acoustic CNN engine: tensors with reverse-mode gradients,
//! log-Mel frontend, FA/FASC blocks, the ShuffleFAC network, analytic
//! complexity accounting, training and latency profiling.

pub mod blocks;
pub mod complexity;
pub mod dataset;
mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod profiler;
pub mod sft;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use blocks::{FaBlock, FaGate, FascBlock};
pub use complexity::{ComplexityReport, CostEntry, CostKind};
pub use dataset::{Dataset, Manifest, ManifestRow, Sample};
pub use error::{Error, Result};
pub use frontend::{Clip, LogMel, MelConfig};
pub use metrics::Metrics;
pub use model::{Model, ShuffleFacConfig, Summary};
pub use nn::{Mode, ParamKind, Parameters};
pub use ops::ConvSpec;
pub use profiler::{EnergyParams, ProfileOptions, ProfileReport};
pub use tape::{Gradients, OpCategory, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{AdamConfig, EpochLog, TrainConfig, TrainOutcome};
