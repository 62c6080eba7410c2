//! Memory write policies driven over a frame sequence.
//!
//! Every policy reads the current frame from the bank with the same top-k
//! read; they differ in when frames are written and what is removed:
//!
//! * `every-k`: write every `write_interval`-th frame, never evict.
//! * `first-and-latest`: keep the first frame plus the previous frame.
//! * `adaptive-lfu`: write every `write_interval`-th frame, count top-k hits
//!   per slot and evict the lowest `hits / age` slots to fit the capacity.
//! * `softmax-index`: as `adaptive-lfu`, counting softmax weight instead of hits.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::time::Instant;

use thiserror::Error;

use crate::membank::{BankError, CapacityPolicy, CounterMode, MemoryBank, ReadResult};
use crate::scalar::Scalar;
use crate::types::{validate_config, ConfigError, FeatureGrid, FrameFeatures, GridError, ObjectId, Strategy, StrategyConfig};

/// Per-object value grids keyed by object.
pub type ObjectValues<T> = BTreeMap<ObjectId, FeatureGrid<T>>;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("sequence needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame index {got} does not follow {previous}")]
    NonIncreasingFrame { previous: u64, got: u64 },
    #[error("object {object} is annotated at frame {frame}, which is not in the sequence")]
    AnnotationOutsideSequence { object: ObjectId, frame: u64 },
    #[error("frame {frame} lacks the annotation values of object {object}")]
    MissingAnnotation { object: ObjectId, frame: u64 },
    #[error("frames disagree on grid dims: {expected:?} vs {actual:?}")]
    MixedDims {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("predictor failed: {0}")]
    Predictor(Box<dyn StdError + Send + Sync>),
}

/// Turns memory reads into values to write back, e.g. decode then re-encode.
pub trait Predictor<T: Scalar> {
    /// Per-frame result kept by the caller, typically a label map.
    type Output;
    type Error: StdError + Send + Sync + 'static;

    /// Combines the read of the tracked objects with the annotations of
    /// objects entering at this frame. Returns the value grids of every
    /// active object plus the frame's output.
    fn predict(
        &mut self,
        keys: &FeatureGrid<T>,
        read: Option<&ReadResult<T>>,
        annotations: &BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<(ObjectValues<T>, Self::Output), Self::Error>;

    /// Value encoding applied to everything written into the bank.
    fn encode(
        &mut self,
        _keys: &FeatureGrid<T>,
        values: BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<BTreeMap<ObjectId, FeatureGrid<T>>, Self::Error> {
        Ok(values)
    }
}

/// One row per processed query frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub frame: u64,
    pub live_slots: usize,
    /// Live slots after the step divided by `H x W`.
    pub bank_frames_equivalent: f64,
    pub read_seconds: f64,
    pub write_seconds: f64,
    /// Whole step: read, counters, prediction and write.
    pub step_seconds: f64,
    pub evictions: usize,
    pub wrote: bool,
}

/// Input of one sequence step.
#[derive(Clone, Debug)]
pub struct FrameInput<'a, T> {
    pub frame_index: u64,
    pub keys: &'a FeatureGrid<T>,
    /// Objects read from memory at this frame.
    pub tracked: &'a [ObjectId],
    /// Ground-truth values of objects first annotated at this frame.
    pub annotations: BTreeMap<ObjectId, FeatureGrid<T>>,
}

impl<T> FrameInput<'_, T> {
    /// Whether the frame is read from memory; annotation-only frames are just written.
    pub fn reads_memory(&self) -> bool {
        !self.tracked.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StepResult<T, O> {
    pub read: Option<ReadResult<T>>,
    pub output: O,
    pub wrote: bool,
}

/// Bank plus policy bookkeeping for one sequence.
#[derive(Clone, Debug)]
pub struct SequenceState<T> {
    pub bank: MemoryBank<T>,
    pub policy: StrategyConfig,
    frame_cursor: Option<u64>,
    start_frame: Option<u64>,
    latest_written: Option<u64>,
    first_written: Option<u64>,
    writes: usize,
    stats: Vec<FrameStats>,
}

impl<T: Scalar> SequenceState<T> {
    pub fn new(policy: StrategyConfig, dims: (usize, usize), c_key: usize) -> Result<Self, SequenceError> {
        validate_config(&policy)?;
        let frame_slots = dims.0 * dims.1;
        let (capacity, counter) = match policy.strategy {
            Strategy::EveryK => (
                CapacityPolicy::Grow {
                    ceiling_slots: policy.growth_ceiling_frames * frame_slots,
                },
                CounterMode::TopKHits,
            ),
            Strategy::FirstAndLatest => (
                CapacityPolicy::Evict {
                    capacity_slots: 2 * frame_slots,
                },
                CounterMode::TopKHits,
            ),
            Strategy::AdaptiveLfu => (
                CapacityPolicy::Evict {
                    capacity_slots: policy.capacity_frames * frame_slots,
                },
                CounterMode::TopKHits,
            ),
            Strategy::SoftmaxIndex => (
                CapacityPolicy::Evict {
                    capacity_slots: policy.capacity_frames * frame_slots,
                },
                CounterMode::SoftmaxMass,
            ),
        };
        Ok(Self {
            bank: MemoryBank::new(dims, c_key, capacity, counter),
            policy,
            frame_cursor: None,
            start_frame: None,
            latest_written: None,
            first_written: None,
            writes: 0,
            stats: Vec::new(),
        })
    }

    pub fn stats(&self) -> &[FrameStats] {
        &self.stats
    }

    pub fn writes(&self) -> usize {
        self.writes
    }

    pub fn frame_cursor(&self) -> Option<u64> {
        self.frame_cursor
    }

    fn counts_usage(&self) -> bool {
        matches!(self.policy.strategy, Strategy::AdaptiveLfu | Strategy::SoftmaxIndex)
    }

    fn scheduled_write(&self, frame_index: u64) -> bool {
        match self.policy.strategy {
            Strategy::FirstAndLatest => true,
            _ => {
                let start = self.start_frame.unwrap_or(frame_index);
                (frame_index - start).is_multiple_of(self.policy.write_interval as u64)
            }
        }
    }

    /// Reads, predicts and conditionally writes one frame.
    pub fn step<P: Predictor<T>>(
        &mut self,
        input: FrameInput<'_, T>,
        predictor: &mut P,
    ) -> Result<StepResult<T, P::Output>, SequenceError> {
        let step_start = Instant::now();
        if let Some(previous) = self.frame_cursor {
            if input.frame_index <= previous {
                return Err(SequenceError::NonIncreasingFrame {
                    previous,
                    got: input.frame_index,
                });
            }
        }
        while self.bank.current_frame() < input.frame_index {
            self.bank.advance_frame();
        }
        self.frame_cursor = Some(input.frame_index);
        self.start_frame.get_or_insert(input.frame_index);

        let mut read_seconds = 0.0;
        let read = if input.reads_memory() {
            let t = Instant::now();
            let read = self.bank.query(input.keys, input.tracked, &self.policy)?;
            if self.counts_usage() {
                self.bank.record(&read)?;
            }
            read_seconds = t.elapsed().as_secs_f64();
            Some(read)
        } else {
            None
        };

        let (values, output) = predictor
            .predict(input.keys, read.as_ref(), &input.annotations)
            .map_err(|e| SequenceError::Predictor(Box::new(e)))?;

        let wants_write = self.scheduled_write(input.frame_index) || !input.annotations.is_empty();
        let mut wrote = false;
        let mut evictions = 0;
        let mut write_seconds = 0.0;
        if wants_write && !values.is_empty() {
            let t = Instant::now();
            let encoded = predictor
                .encode(input.keys, values)
                .map_err(|e| SequenceError::Predictor(Box::new(e)))?;
            let frame = FrameFeatures::new(input.frame_index, input.keys.clone(), encoded)?;
            if self.policy.strategy == Strategy::FirstAndLatest {
                if let Some(latest) = self.latest_written {
                    if Some(latest) != self.first_written {
                        evictions += self.bank.remove_source_frame(latest).len();
                    }
                }
            }
            let outcome = self.bank.write_frame(&frame, self.policy.pin_first_frame)?;
            evictions += outcome.evicted.len();
            self.first_written.get_or_insert(input.frame_index);
            self.latest_written = Some(input.frame_index);
            self.writes += 1;
            wrote = true;
            write_seconds = t.elapsed().as_secs_f64();
        }

        if read.is_some() {
            self.stats.push(FrameStats {
                frame: input.frame_index,
                live_slots: self.bank.len(),
                bank_frames_equivalent: self.bank.frames_equivalent(),
                read_seconds,
                write_seconds,
                step_seconds: step_start.elapsed().as_secs_f64(),
                evictions,
                wrote,
            });
        }
        Ok(StepResult { read, output, wrote })
    }
}

/// Result of one frame of [`run_sequence`].
#[derive(Clone, Debug)]
pub struct FrameRecord<T, O> {
    pub frame_index: u64,
    pub tracked: Vec<ObjectId>,
    pub read: Option<ReadResult<T>>,
    pub output: O,
    pub wrote: bool,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput<T, O> {
    /// One record per frame with at least one active object.
    pub records: Vec<FrameRecord<T, O>>,
    pub stats: Vec<FrameStats>,
    pub writes: usize,
    /// Wall time of the whole loop, bootstrap writes included.
    pub total_seconds: f64,
    pub final_bank: MemoryBank<T>,
}

/// Segments a sequence: objects are written from their annotation frame and
/// read (then re-written from predictions) on every later frame.
pub fn run_sequence<T: Scalar, P: Predictor<T>>(
    frames: &[FrameFeatures<T>],
    first_annotated: &BTreeMap<ObjectId, u64>,
    cfg: &StrategyConfig,
    predictor: &mut P,
) -> Result<SequenceOutput<T, P::Output>, SequenceError> {
    if frames.len() < 2 {
        return Err(SequenceError::TooShort(frames.len()));
    }
    let dims = frames[0].dims();
    for pair in frames.windows(2) {
        if pair[1].frame_index <= pair[0].frame_index {
            return Err(SequenceError::NonIncreasingFrame {
                previous: pair[0].frame_index,
                got: pair[1].frame_index,
            });
        }
        if pair[1].dims() != dims {
            return Err(SequenceError::MixedDims {
                expected: dims,
                actual: pair[1].dims(),
            });
        }
    }
    for (&object, &frame) in first_annotated {
        if !frames.iter().any(|f| f.frame_index == frame) {
            return Err(SequenceError::AnnotationOutsideSequence { object, frame });
        }
    }

    let mut state = SequenceState::new(cfg.clone(), dims, frames[0].keys.channels())?;
    let mut records = Vec::with_capacity(frames.len());
    let start = Instant::now();
    for frame in frames {
        let t = frame.frame_index;
        let tracked: Vec<ObjectId> = first_annotated
            .iter()
            .filter(|&(_, &entry)| entry < t)
            .map(|(&id, _)| id)
            .collect();
        let mut annotations = BTreeMap::new();
        for (&object, _) in first_annotated.iter().filter(|&(_, &entry)| entry == t) {
            let values = frame
                .values
                .get(&object)
                .ok_or(SequenceError::MissingAnnotation { object, frame: t })?;
            annotations.insert(object, values.clone());
        }
        if tracked.is_empty() && annotations.is_empty() {
            continue;
        }
        let input = FrameInput {
            frame_index: t,
            keys: &frame.keys,
            tracked: &tracked,
            annotations,
        };
        let step = state.step(input, predictor)?;
        records.push(FrameRecord {
            frame_index: t,
            tracked,
            read: step.read,
            output: step.output,
            wrote: step.wrote,
        });
    }
    let total_seconds = start.elapsed().as_secs_f64();
    Ok(SequenceOutput {
        records,
        stats: state.stats.clone(),
        writes: state.writes,
        total_seconds,
        final_bank: state.bank,
    })
}
