//! Feature-stream sources: a seeded generator, the surrogate decoder and
//! aggregation, and the binary trace codec.

pub mod decode;
pub mod synth;
pub mod trace;

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::types::{FrameFeatures, ObjectId};

pub use decode::{
    annotation_values, encode_probability, iou, prob_to_values, soft_aggregate, surrogate_decode, Aggregated,
    DecodeError, KeyGuidedEncoder, PredictError, SurrogatePredictor, PROB_EPS,
};
pub use synth::{generate, ObjectSpec, ScenarioError, SyntheticScenario};
pub use trace::{decode_trace, encode_trace, read_trace, write_trace, TraceError, TRACE_EXTENSION};

/// Frames with ground-truth values for every object, label maps, and the
/// frame at which each object is first annotated.
///
/// Every frame carries a value grid for every object in `entries`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<T> {
    pub frames: Vec<FrameFeatures<T>>,
    pub labels: Vec<Vec<u8>>,
    pub entries: BTreeMap<ObjectId, u64>,
}

impl<T: Scalar> Sequence<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| f.dims())
    }

    pub fn c_key(&self) -> Option<usize> {
        self.frames.first().map(|f| f.keys.channels())
    }

    pub fn c_value(&self) -> Option<usize> {
        self.frames.first().and_then(|f| f.values.values().next()).map(|g| g.channels())
    }

    pub fn objects(&self) -> Vec<ObjectId> {
        self.entries.keys().copied().collect()
    }

    pub fn cast<U: Scalar>(&self) -> Sequence<U> {
        Sequence {
            frames: self
                .frames
                .iter()
                .map(|f| FrameFeatures {
                    frame_index: f.frame_index,
                    keys: f.keys.cast(),
                    values: f.values.iter().map(|(&o, g)| (o, g.cast())).collect(),
                })
                .collect(),
            labels: self.labels.clone(),
            entries: self.entries.clone(),
        }
    }
}
