//! Seeded synthetic feature streams.
//!
//! Each object is a rectangle moving across the grid. It owns `poses`
//! appearance modes: the object prototype plus a fixed per-pose offset, each
//! drifting by its own gaussian random walk of `drift_rate` per frame. The
//! object starts in pose 0 and, on every frame after entry, jumps to a
//! different pose with probability `pose_switch`. A covered position holds
//! the current pose prototype plus independent gaussian noise; uncovered
//! positions hold the background prototype plus noise. During an occlusion
//! window the object covers nothing. Any frame after the first is, with
//! probability `burst_prob`, a burst frame whose noise is `burst_sigma`
//! instead of `noise_sigma`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::simstream::decode::annotation_values;
use crate::simstream::Sequence;
use crate::types::{FeatureGrid, FrameFeatures, GridError, ObjectId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("grid and channel dimensions must be positive")]
    ZeroGrid,
    #[error("scenario needs at least one frame")]
    NoFrames,
    #[error("object id 0 is reserved for background")]
    ReservedObjectId,
    #[error("object {0} is declared twice")]
    DuplicateObject(ObjectId),
    #[error("object {object} enters at frame {entry}, scenario has {num_frames} frames")]
    EntryAfterEnd {
        object: ObjectId,
        entry: u64,
        num_frames: u64,
    },
    #[error("object {object} of size {size:?} does not fit the {grid:?} grid")]
    ObjectTooLarge {
        object: ObjectId,
        size: (usize, usize),
        grid: (usize, usize),
    },
    #[error("objects {a} and {b} overlap at frame {frame}")]
    Overlap { frame: u64, a: ObjectId, b: ObjectId },
    #[error("object {0} needs at least one pose")]
    NoPoses(ObjectId),
    #[error("{field} must be finite and non-negative (probabilities at most 1)")]
    NegativeParameter { field: &'static str },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub entry_frame: u64,
    /// Rectangle size in cells, `(rows, cols)`.
    pub size: (usize, usize),
    /// Top-left corner at frame 0, may be fractional.
    pub start: (f64, f64),
    /// Cells per frame; the rectangle bounces off the grid border.
    pub velocity: (f64, f64),
    pub drift_rate: f64,
    pub poses: usize,
    /// Standard deviation of each pose's offset from the object prototype.
    pub pose_spread: f64,
    /// Per-frame probability of jumping to another pose.
    pub pose_switch: f64,
    /// Half-open `[from, to)` frame windows where the object is hidden.
    pub occlusions: Vec<(u64, u64)>,
}

impl ObjectSpec {
    pub fn new(id: u8, size: (usize, usize), start: (f64, f64)) -> Self {
        Self {
            id: ObjectId(id),
            entry_frame: 0,
            size,
            start,
            velocity: (0.0, 0.0),
            drift_rate: 0.0,
            poses: 1,
            pose_spread: 0.0,
            pose_switch: 0.0,
            occlusions: Vec::new(),
        }
    }

    pub fn occluded(&self, frame: u64) -> bool {
        self.occlusions.iter().any(|&(a, b)| (a..b).contains(&frame))
    }

    pub fn visible(&self, frame: u64) -> bool {
        frame >= self.entry_frame && !self.occluded(frame)
    }

    /// Top-left cell at `frame`, reflecting off the borders.
    pub fn origin(&self, frame: u64, grid: (usize, usize)) -> (usize, usize) {
        let axis = |start: f64, velocity: f64, extent: usize, size: usize| {
            let span = (extent - size) as f64;
            if span == 0.0 {
                return 0;
            }
            let pos = (start + velocity * frame as f64).rem_euclid(2.0 * span);
            let pos = if pos > span { 2.0 * span - pos } else { pos };
            (pos.round() as usize).min(extent - size)
        };
        (
            axis(self.start.0, self.velocity.0, grid.0, self.size.0),
            axis(self.start.1, self.velocity.1, grid.1, self.size.1),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenario {
    pub num_frames: u64,
    pub height: usize,
    pub width: usize,
    pub c_key: usize,
    pub noise_sigma: f64,
    pub burst_prob: f64,
    pub burst_sigma: f64,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    pub objects: Vec<ObjectSpec>,
    pub rng_seed: u64,
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.height == 0 || self.width == 0 || self.c_key == 0 {
            return Err(ScenarioError::ZeroGrid);
        }
        if self.num_frames == 0 {
            return Err(ScenarioError::NoFrames);
        }
        for (field, v) in [
            ("noise_sigma", self.noise_sigma),
            ("burst_sigma", self.burst_sigma),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ScenarioError::NegativeParameter { field });
            }
        }
        if !(0.0..=1.0).contains(&self.burst_prob) {
            return Err(ScenarioError::NegativeParameter { field: "burst_prob" });
        }
        let mut seen = Vec::new();
        for o in &self.objects {
            if o.id.0 == 0 {
                return Err(ScenarioError::ReservedObjectId);
            }
            if seen.contains(&o.id) {
                return Err(ScenarioError::DuplicateObject(o.id));
            }
            seen.push(o.id);
            if o.entry_frame >= self.num_frames {
                return Err(ScenarioError::EntryAfterEnd {
                    object: o.id,
                    entry: o.entry_frame,
                    num_frames: self.num_frames,
                });
            }
            if o.size.0 == 0 || o.size.1 == 0 || o.size.0 > self.height || o.size.1 > self.width {
                return Err(ScenarioError::ObjectTooLarge {
                    object: o.id,
                    size: o.size,
                    grid: (self.height, self.width),
                });
            }
            if o.poses == 0 {
                return Err(ScenarioError::NoPoses(o.id));
            }
            for (field, v) in [("drift_rate", o.drift_rate), ("pose_spread", o.pose_spread)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ScenarioError::NegativeParameter { field });
                }
            }
            if !(0.0..=1.0).contains(&o.pose_switch) {
                return Err(ScenarioError::NegativeParameter { field: "pose_switch" });
            }
        }
        Ok(())
    }

    /// Ground-truth label map of `frame`.
    pub fn labels(&self, frame: u64) -> Result<Vec<u8>, ScenarioError> {
        let dims = (self.height, self.width);
        let mut labels = vec![0u8; self.height * self.width];
        for o in self.objects.iter().filter(|o| o.visible(frame)) {
            let (r0, c0) = o.origin(frame, dims);
            for r in r0..r0 + o.size.0 {
                for c in c0..c0 + o.size.1 {
                    let cell = &mut labels[r * self.width + c];
                    if *cell != 0 {
                        return Err(ScenarioError::Overlap {
                            frame,
                            a: ObjectId(*cell),
                            b: o.id,
                        });
                    }
                    *cell = o.id.0;
                }
            }
        }
        Ok(labels)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

/// Renders the scenario into frames with ground-truth values and label maps.
pub fn generate<T: Scalar>(scenario: &SyntheticScenario) -> Result<Sequence<T>, ScenarioError> {
    scenario.validate()?;
    let dims = (scenario.height, scenario.width);
    let c = scenario.c_key;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
    let background = gaussian_vec(&mut rng, c, scenario.prototype_scale);
    // prototypes[m][p]: current key of pose p of object m.
    let mut prototypes: Vec<Vec<Vec<f64>>> = scenario
        .objects
        .iter()
        .map(|o| {
            let base = gaussian_vec(&mut rng, c, scenario.prototype_scale);
            (0..o.poses)
                .map(|_| {
                    let offset = gaussian_vec(&mut rng, c, o.pose_spread);
                    base.iter().zip(offset).map(|(b, d)| b + d).collect()
                })
                .collect()
        })
        .collect();
    let mut pose = vec![0usize; scenario.objects.len()];

    let mut frames = Vec::with_capacity(scenario.num_frames as usize);
    let mut label_maps = Vec::with_capacity(scenario.num_frames as usize);
    for t in 0..scenario.num_frames {
        for (m, spec) in scenario.objects.iter().enumerate() {
            if t > 0 && spec.drift_rate > 0.0 {
                for proto in prototypes[m].iter_mut() {
                    for (p, step) in proto.iter_mut().zip(gaussian_vec(&mut rng, c, spec.drift_rate)) {
                        *p += step;
                    }
                }
            }
            if t > spec.entry_frame && spec.poses > 1 && rng.random_bool(spec.pose_switch) {
                let jump = rng.random_range(1..spec.poses);
                pose[m] = (pose[m] + jump) % spec.poses;
            }
        }
        let sigma = if t > 0 && scenario.burst_prob > 0.0 && rng.random_bool(scenario.burst_prob) {
            scenario.burst_sigma
        } else {
            scenario.noise_sigma
        };
        let labels = scenario.labels(t)?;
        let mut keys = Vec::with_capacity(labels.len() * c);
        for &label in &labels {
            let base = if label == 0 {
                &background
            } else {
                let m = scenario.objects.iter().position(|o| o.id.0 == label).unwrap_or(0);
                &prototypes[m][pose[m]]
            };
            let noise = gaussian_vec(&mut rng, c, sigma);
            keys.extend(base.iter().zip(noise).map(|(&b, n)| T::of(b + n)));
        }
        let keys = FeatureGrid::new(dims.0, dims.1, c, keys)?;
        let values = scenario
            .objects
            .iter()
            .map(|o| Ok((o.id, annotation_values(&labels, dims, o.id)?)))
            .collect::<Result<BTreeMap<_, _>, GridError>>()?;
        frames.push(FrameFeatures::new(t, keys, values)?);
        label_maps.push(labels);
    }
    Ok(Sequence {
        frames,
        labels: label_maps,
        entries: scenario.objects.iter().map(|o| (o.id, o.entry_frame)).collect(),
    })
}
