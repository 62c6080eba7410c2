//! Surrogate decoder, multi-object soft aggregation and the value encoding
//! that closes the predict-then-write loop.
//!
//! Values are two-channel `(fg, bg)` logit pairs: a read `[a, b]` decodes to
//! the foreground probability `sigmoid(a - b)`, and a probability `p` encodes
//! back to `(l / 2, -l / 2)` with `l = logit(p)`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{compute_affinity, select_topk, selection_weights, weighted_read, AttentionError, ValueTable};
use crate::membank::ReadResult;
use crate::scalar::Scalar;
use crate::strategies::Predictor;
use crate::types::{FeatureGrid, GridError, ObjectId};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("object {object} read has {channels} channels, the surrogate decoder needs 2")]
    WrongChannels { object: ObjectId, channels: usize },
    #[error("probability grids disagree on dims")]
    MixedDims,
    #[error("probability {value} of object {object} outside [0, 1]")]
    InvalidProbability { object: ObjectId, value: f64 },
    #[error("nothing to aggregate")]
    NoObjects,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Foreground probability per position of each object's two-channel read.
pub fn surrogate_decode<T: Scalar>(
    read: &BTreeMap<ObjectId, FeatureGrid<T>>,
) -> Result<BTreeMap<ObjectId, FeatureGrid<T>>, DecodeError> {
    read.iter()
        .map(|(&object, grid)| {
            if grid.channels() != 2 {
                return Err(DecodeError::WrongChannels {
                    object,
                    channels: grid.channels(),
                });
            }
            let probs = grid
                .as_slice()
                .chunks_exact(2)
                .map(|v| T::of(clamp_prob(sigmoid(v[0].as_f64() - v[1].as_f64()))))
                .collect();
            Ok((object, FeatureGrid::new(grid.height(), grid.width(), 1, probs)?))
        })
        .collect()
}

/// Per-position distribution over background (index 0) and each object.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated<T> {
    pub objects: Vec<ObjectId>,
    pub dims: (usize, usize),
    /// `positions x (objects + 1)`, background first.
    pub data: Vec<T>,
}

impl<T: Scalar> Aggregated<T> {
    pub fn classes(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn row(&self, position: usize) -> &[T] {
        let c = self.classes();
        &self.data[position * c..(position + 1) * c]
    }

    /// Share of `object` at every position.
    pub fn share(&self, object: ObjectId) -> Option<Vec<T>> {
        let idx = self.objects.iter().position(|&o| o == object)? + 1;
        Some(self.data.chunks_exact(self.classes()).map(|r| r[idx]).collect())
    }

    /// Argmax label map; `0` is background, ties go to the lower class.
    pub fn labels(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.classes())
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                if best == 0 {
                    0
                } else {
                    self.objects[best - 1].0
                }
            })
            .collect()
    }
}

/// Odds-normalized merge of independent per-object foreground probabilities.
///
/// Background probability is `prod(1 - p_m)`; every class probability is
/// clamped, turned into odds `p / (1 - p)`, and the odds are normalized.
pub fn soft_aggregate<T: Scalar>(probs: &BTreeMap<ObjectId, FeatureGrid<T>>) -> Result<Aggregated<T>, DecodeError> {
    let first = probs.values().next().ok_or(DecodeError::NoObjects)?;
    let dims = first.dims();
    if probs.values().any(|g| g.dims() != dims || g.channels() != 1) {
        return Err(DecodeError::MixedDims);
    }
    for (&object, grid) in probs {
        if let Some(&bad) = grid.as_slice().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
            return Err(DecodeError::InvalidProbability {
                object,
                value: bad.as_f64(),
            });
        }
    }
    let objects: Vec<ObjectId> = probs.keys().copied().collect();
    let grids: Vec<&[T]> = probs.values().map(FeatureGrid::as_slice).collect();
    let positions = dims.0 * dims.1;
    let mut data = Vec::with_capacity(positions * (objects.len() + 1));
    let mut odds = vec![0.0; objects.len() + 1];
    for p in 0..positions {
        let mut background = 1.0;
        for (m, g) in grids.iter().enumerate() {
            let prob = g[p].as_f64();
            background *= 1.0 - prob;
            let prob = clamp_prob(prob);
            odds[m + 1] = prob / (1.0 - prob);
        }
        let background = clamp_prob(background);
        odds[0] = background / (1.0 - background);
        let total: f64 = odds.iter().sum();
        data.extend(odds.iter().map(|&o| T::of(o / total)));
    }
    Ok(Aggregated { objects, dims, data })
}

/// Encodes a foreground probability as a `(fg, bg)` logit pair.
pub fn encode_probability<T: Scalar>(p: f64) -> [T; 2] {
    let p = clamp_prob(p);
    let half = 0.5 * (p / (1.0 - p)).ln();
    [T::of(half), T::of(-half)]
}

/// Value grids whose surrogate decoding reproduces each object's aggregated share.
pub fn prob_to_values<T: Scalar>(aggregated: &Aggregated<T>) -> Result<BTreeMap<ObjectId, FeatureGrid<T>>, DecodeError> {
    let (h, w) = aggregated.dims;
    aggregated
        .objects
        .iter()
        .map(|&object| {
            let share = aggregated.share(object).unwrap_or_default();
            let data = share.iter().flat_map(|p| encode_probability::<T>(p.as_f64())).collect();
            Ok((object, FeatureGrid::new(h, w, 2, data)?))
        })
        .collect()
}

/// Ground-truth values of one object: saturated logits of its hard mask.
pub fn annotation_values<T: Scalar>(
    labels: &[u8],
    dims: (usize, usize),
    object: ObjectId,
) -> Result<FeatureGrid<T>, GridError> {
    let data = labels
        .iter()
        .flat_map(|&l| encode_probability::<T>(if l == object.0 { 1.0 } else { 0.0 }))
        .collect();
    FeatureGrid::new(dims.0, dims.1, 2, data)
}

/// Intersection over union of `object` in two label maps; 1 when both are empty.
pub fn iou(pred: &[u8], truth: &[u8], object: ObjectId) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p == object.0, t == object.0);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Stand-in for the value encoder: re-expresses each written value as a
/// top-k soft average over positions of the same frame with similar keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyGuidedEncoder {
    pub top_k: usize,
}

impl KeyGuidedEncoder {
    pub fn encode<T: Scalar>(
        &self,
        keys: &FeatureGrid<T>,
        values: BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<BTreeMap<ObjectId, FeatureGrid<T>>, DecodeError> {
        if values.is_empty() {
            return Ok(values);
        }
        let aff = compute_affinity(keys.as_slice(), keys.as_slice(), keys.channels())?;
        let selection = select_topk(&aff, self.top_k)?;
        let weights = selection_weights(&aff, &selection)?;
        values
            .into_iter()
            .map(|(object, grid)| {
                let mut table = ValueTable::new(grid.channels());
                for p in 0..grid.positions() {
                    table.push(Some(grid.vector(p)))?;
                }
                Ok((object, weighted_read(&weights, &selection, &table, keys.dims())?))
            })
            .collect()
    }
}

/// Surrogate segmentation head: decode, aggregate, label, re-encode.
#[derive(Clone, Debug, Default)]
pub struct SurrogatePredictor {
    pub encoder: Option<KeyGuidedEncoder>,
}

impl SurrogatePredictor {
    pub fn new(encoder: Option<KeyGuidedEncoder>) -> Self {
        Self { encoder }
    }
}

#[derive(Debug, Error)]
#[error(transparent)]
pub struct PredictError(#[from] DecodeError);

impl<T: Scalar> Predictor<T> for SurrogatePredictor {
    type Output = Vec<u8>;
    type Error = PredictError;

    fn predict(
        &mut self,
        keys: &FeatureGrid<T>,
        read: Option<&ReadResult<T>>,
        annotations: &BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<(BTreeMap<ObjectId, FeatureGrid<T>>, Vec<u8>), PredictError> {
        let (mut values, mut labels) = match read {
            Some(read) => {
                let aggregated = soft_aggregate(&surrogate_decode(&read.objects)?)?;
                (prob_to_values(&aggregated)?, aggregated.labels())
            }
            None => (BTreeMap::new(), vec![0; keys.positions()]),
        };
        // Annotated pixels belong to their object alone, in labels and in the
        // values written for every other object.
        let mut claimed = vec![false; keys.positions()];
        for (&object, grid) in annotations {
            for ((label, taken), v) in labels.iter_mut().zip(&mut claimed).zip(grid.as_slice().chunks_exact(2)) {
                if v[0] > v[1] {
                    *label = object.0;
                    *taken = true;
                }
            }
        }
        let absent = encode_probability::<T>(0.0);
        for (object, grid) in values.iter_mut() {
            if annotations.contains_key(object) {
                continue;
            }
            let mut data = grid.as_slice().to_vec();
            for (v, _) in data.chunks_exact_mut(2).zip(&claimed).filter(|(_, &taken)| taken) {
                v.copy_from_slice(&absent);
            }
            *grid = FeatureGrid::new(grid.height(), grid.width(), 2, data).map_err(DecodeError::from)?;
        }
        for (&object, grid) in annotations {
            values.insert(object, grid.clone());
        }
        Ok((values, labels))
    }

    fn encode(
        &mut self,
        keys: &FeatureGrid<T>,
        values: BTreeMap<ObjectId, FeatureGrid<T>>,
    ) -> Result<BTreeMap<ObjectId, FeatureGrid<T>>, PredictError> {
        match self.encoder {
            Some(encoder) => Ok(encoder.encode(keys, values)?),
            None => Ok(values),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(read: [f64; 2]) -> f64 {
        let grid = FeatureGrid::new(1, 1, 2, read.to_vec()).unwrap();
        let probs = surrogate_decode(&BTreeMap::from([(ObjectId(1), grid)])).unwrap();
        probs[&ObjectId(1)].as_slice()[0]
    }

    #[test]
    fn decode_examples() {
        let e = std::f64::consts::E;
        assert!((one([1.0, 0.0]) - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(one([3.0, 3.0]), 0.5);
        let expected = 1.0 / (1.0 + 10f64.exp());
        assert!((one([0.0, 10.0]) - expected).abs() < 1e-15);
        assert!(expected > PROB_EPS);
        assert_eq!(one([0.0, 40.0]), PROB_EPS);
        let bad = FeatureGrid::new(1, 1, 3, vec![0.0f64; 3]).unwrap();
        assert!(matches!(
            surrogate_decode(&BTreeMap::from([(ObjectId(2), bad)])),
            Err(DecodeError::WrongChannels { channels: 3, .. })
        ));
    }

    fn probs(entries: &[(u8, Vec<f64>)]) -> BTreeMap<ObjectId, FeatureGrid<f64>> {
        entries
            .iter()
            .map(|(id, p)| (ObjectId(*id), FeatureGrid::new(1, p.len(), 1, p.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let agg = soft_aggregate(&probs(&[(1, vec![0.5])])).unwrap();
        assert!((agg.row(0)[0] - 0.5).abs() < 1e-12 && (agg.row(0)[1] - 0.5).abs() < 1e-12);

        let agg = soft_aggregate(&probs(&[(1, vec![0.9]), (2, vec![0.1])])).unwrap();
        assert_eq!(agg.labels(), vec![1]);
        assert!((agg.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(matches!(
            soft_aggregate(&probs(&[(1, vec![1.5])])),
            Err(DecodeError::InvalidProbability { .. })
        ));
        assert!(matches!(
            soft_aggregate::<f64>(&BTreeMap::new()),
            Err(DecodeError::NoObjects)
        ));
    }

    #[test]
    fn probability_round_trips_through_values() {
        for p in [0.5, 0.73, 0.01, 0.999] {
            let agg = soft_aggregate(&probs(&[(1, vec![p])])).unwrap();
            let values = prob_to_values(&agg).unwrap();
            let v = values[&ObjectId(1)].as_slice();
            let back = one([v[0], v[1]]);
            assert!((back - clamp_prob(agg.row(0)[1])).abs() < 1e-9);
        }
        let agg = soft_aggregate(&probs(&[(1, vec![0.5])])).unwrap();
        let v = prob_to_values(&agg).unwrap()[&ObjectId(1)].clone();
        assert!((v.as_slice()[0] - v.as_slice()[1]).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let o = ObjectId(3);
        assert_eq!(iou(&[3, 3, 0], &[3, 3, 0], o), 1.0);
        assert_eq!(iou(&[3, 0, 0], &[0, 3, 0], o), 0.0);
        assert_eq!(iou(&[3, 0, 0, 0], &[3, 3, 0, 0], o), 0.5);
        assert_eq!(iou(&[0, 0], &[1, 1], o), 1.0);
    }

    #[test]
    fn annotation_values_decode_to_mask() {
        let labels = [0u8, 2, 2, 1];
        let grid = annotation_values::<f64>(&labels, (2, 2), ObjectId(2)).unwrap();
        let p = surrogate_decode(&BTreeMap::from([(ObjectId(2), grid)])).unwrap();
        let p = p[&ObjectId(2)].as_slice();
        assert_eq!(p[0], PROB_EPS);
        assert!((p[1] - (1.0 - PROB_EPS)).abs() < 1e-12);
    }

    #[test]
    fn encoder_preserves_uniform_classes() {
        // Two well separated key clusters; values constant per cluster.
        let keys = FeatureGrid::new(1, 4, 2, vec![0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let vals = FeatureGrid::new(1, 4, 2, vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        let out = KeyGuidedEncoder { top_k: 2 }
            .encode(&keys, BTreeMap::from([(ObjectId(1), vals.clone())]))
            .unwrap();
        assert_eq!(out[&ObjectId(1)], vals);
    }
}
