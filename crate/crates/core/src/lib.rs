//! Fixed-capacity feature memory for matching-based video object
//! segmentation: top-k affinity reads, usage-frequency eviction, and the
//! memorization strategies compared in the bench harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the common choices.

pub mod attention;
pub mod membank;
pub mod scalar;
pub mod simstream;
pub mod strategies;
pub mod types;

pub use attention::{
    affinity_dropout, compute_affinity, compute_affinity_vectors, full_read, masked, reallocate_support_attention,
    select_topk, selection_weights, softmax_weights, weighted_read, AffinityMatrix, AttentionError, ReallocationSpace,
    TopKSelection, ValueTable,
};
pub use membank::{
    BankError, CapacityPolicy, CounterMode, LfuScore, MemoryBank, ReadResult, SlotRecord, WriteOutcome,
};
pub use scalar::Scalar;
pub use strategies::{
    run_sequence, FrameInput, FrameRecord, FrameStats, Predictor, SequenceError, SequenceOutput, SequenceState,
    StepResult,
};
pub use types::{
    validate_config, ConfigError, FeatureGrid, FrameFeatures, GridError, MemorySlot, ObjectId, Regularizer, Strategy,
    StrategyConfig, UnknownStrategy, Violation,
};

pub type FeatureGrid32 = FeatureGrid<f32>;
pub type FeatureGrid64 = FeatureGrid<f64>;
pub type FrameFeatures32 = FrameFeatures<f32>;
pub type FrameFeatures64 = FrameFeatures<f64>;
pub type AffinityMatrix32 = AffinityMatrix<f32>;
pub type AffinityMatrix64 = AffinityMatrix<f64>;
pub type MemoryBank32 = MemoryBank<f32>;
pub type MemoryBank64 = MemoryBank<f64>;
pub type SequenceState32 = SequenceState<f32>;
pub type SequenceState64 = SequenceState<f64>;
pub type Sequence32 = simstream::Sequence<f32>;
pub type Sequence64 = simstream::Sequence<f64>;
