//! Domain types shared by the attention kernels, the memory bank and the
//! sequence strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;

/// Identifier of a tracked object. Label maps reserve `0` for background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u8);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {height}x{width}x{channels}")]
    ZeroDimension {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("grid data length {actual} does not match {expected} = height x width x channels")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("vector at position {position} has {actual} channels, expected {expected}")]
    RaggedVectors {
        position: usize,
        expected: usize,
        actual: usize,
    },
    #[error("value grid for object {object} is {actual:?}, key grid is {expected:?}")]
    ValueDims {
        object: ObjectId,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("value grids disagree on channel count ({first} vs {other})")]
    ValueChannels { first: usize, other: usize },
}

/// Dense `height x width` grid holding one `channels`-long vector per
/// position, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self, GridError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(GridError::ZeroDimension {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self, GridError> {
        Self::new(height, width, channels, vec![T::zero(); height * width * channels])
    }

    /// Builds a grid from one vector per position (row-major position order).
    pub fn from_vectors(height: usize, width: usize, vectors: &[Vec<T>]) -> Result<Self, GridError> {
        let channels = vectors.first().map_or(0, Vec::len);
        if vectors.len() != height * width {
            return Err(GridError::LengthMismatch {
                expected: height * width * channels,
                actual: vectors.iter().map(Vec::len).sum(),
            });
        }
        let mut data = Vec::with_capacity(height * width * channels);
        for (position, v) in vectors.iter().enumerate() {
            if v.len() != channels {
                return Err(GridError::RaggedVectors {
                    position,
                    expected: channels,
                    actual: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        Self::new(height, width, channels, data)
    }

    pub fn to_vectors(&self) -> Vec<Vec<T>> {
        self.data.chunks_exact(self.channels).map(<[T]>::to_vec).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of grid positions, `height x width`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, position: usize) -> &[T] {
        &self.data[position * self.channels..(position + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Converts the element type, e.g. `f32` trace data into `f64` grids.
    pub fn cast<U: Scalar>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// One frame as written to memory: object-agnostic keys plus per-object values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures<T> {
    pub frame_index: u64,
    pub keys: FeatureGrid<T>,
    pub values: BTreeMap<ObjectId, FeatureGrid<T>>,
}

impl<T: Scalar> FrameFeatures<T> {
    pub fn new(
        frame_index: u64,
        keys: FeatureGrid<T>,
        values: BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<Self, GridError> {
        let mut value_channels = None;
        for (&object, grid) in &values {
            if grid.dims() != keys.dims() {
                return Err(GridError::ValueDims {
                    object,
                    expected: keys.dims(),
                    actual: grid.dims(),
                });
            }
            match value_channels {
                None => value_channels = Some(grid.channels()),
                Some(first) if first != grid.channels() => {
                    return Err(GridError::ValueChannels {
                        first,
                        other: grid.channels(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            frame_index,
            keys,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.keys.dims()
    }
}

/// Owned copy of one bank slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot<T> {
    pub slot_id: u64,
    pub key: Vec<T>,
    pub values: BTreeMap<ObjectId, Vec<T>>,
    pub source_frame: u64,
    pub insertion_frame: u64,
    /// Number of top-k appearances ("index").
    pub usage_count: u64,
    /// Accumulated softmax weight, only advanced by the softmax-index counter.
    pub weight_mass: f64,
}

/// Memory write policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    EveryK,
    FirstAndLatest,
    AdaptiveLfu,
    SoftmaxIndex,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::EveryK,
        Strategy::FirstAndLatest,
        Strategy::AdaptiveLfu,
        Strategy::SoftmaxIndex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::EveryK => "every-k",
            Strategy::FirstAndLatest => "first-latest",
            Strategy::AdaptiveLfu => "adaptive-lfu",
            Strategy::SoftmaxIndex => "softmax-index",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown strategy `{0}` (expected every-k, first-latest, adaptive-lfu or softmax-index)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "every-k" | "every-5" | "everyk" => Ok(Strategy::EveryK),
            "first-latest" | "first-and-latest" => Ok(Strategy::FirstAndLatest),
            "adaptive-lfu" | "adaptive" | "lfu" => Ok(Strategy::AdaptiveLfu),
            "softmax-index" | "softmax" => Ok(Strategy::SoftmaxIndex),
            other => Err(UnknownStrategy(other.to_string())),
        }
    }
}

/// Optional affinity regularizer applied on the read path before top-k.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Regularizer {
    #[default]
    None,
    /// Drops each support/query connection with probability `q`.
    Dropout { q: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Bank capacity in frames worth of features (`H x W` slots each).
    pub capacity_frames: usize,
    pub write_interval: usize,
    pub top_k: usize,
    pub pin_first_frame: bool,
    pub rng_seed: u64,
    pub regularizer: Regularizer,
    /// Hard ceiling for the unbounded every-k bank, in frames.
    pub growth_ceiling_frames: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::AdaptiveLfu,
            capacity_frames: 2,
            write_interval: 5,
            top_k: 50,
            pin_first_frame: false,
            rng_seed: 0,
            regularizer: Regularizer::None,
            growth_ceiling_frames: 10_000,
        }
    }
}

impl StrategyConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid configuration: {}", .violations.iter().map(|v| format!("{}: {}", v.field, v.reason)).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl ConfigError {
    pub fn fields(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.field).collect()
    }
}

/// Checks every [`StrategyConfig`] invariant and reports all violations at once.
pub fn validate_config(cfg: &StrategyConfig) -> Result<(), ConfigError> {
    let mut violations = Vec::new();
    let mut positive = |field: &'static str, value: usize| {
        if value == 0 {
            violations.push(Violation {
                field,
                reason: "must be at least 1".into(),
            });
        }
    };
    positive("capacity_frames", cfg.capacity_frames);
    positive("write_interval", cfg.write_interval);
    positive("top_k", cfg.top_k);
    positive("growth_ceiling_frames", cfg.growth_ceiling_frames);
    if let Regularizer::Dropout { q } = cfg.regularizer {
        if !(0.0..=1.0).contains(&q) {
            violations.push(Violation {
                field: "regularizer.q",
                reason: format!("dropout probability {q} outside [0, 1]"),
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConfigError { violations })
    }
}
