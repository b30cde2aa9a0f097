//! Instruction-conditioned person re-identification core: the gated editing
//! transformer, instruction-aware losses, memory banks, retrieval, mAP-τ
//! metrics, a synthetic data harness and the on-disk formats.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod editing;
pub mod error;
pub mod gradcheck;
pub mod instructions;
pub mod io;
pub mod loss;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::{
    Depth, EmbeddingVector, EmptyQueryPolicy, Instruction, PersonRecord, RankEvalConfig, RankList,
    RankedItem, Role, TaskKind, Violation,
};
pub use retrieval::{ModelParams, RetrievalMode};
pub use synth::SynthConfig;
pub use tensor::Matrix;
pub use train::{Recipe, TrainConfig};
