//! Memory read kernels.
//!
//! The affinity between support slot `i` and query position `j` is the
//! negative squared euclidean distance of their keys scaled by `1/sqrt(C)`.
//! Reads either soft-max over every support slot (the dense path) or only
//! over each query's `k` closest slots (the inference path).
//!
//! Affinity matrices are stored query-major: all `S` support entries of a
//! query column are contiguous, which is the access pattern of selection,
//! softmax and the weighted read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::types::{FeatureGrid, GridError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("channel count must be positive")]
    ZeroChannels,
    #[error("top-k requires k >= 1")]
    ZeroK,
    #[error("softmax over an empty list")]
    EmptyInput,
    #[error("every affinity entry of query {query} is masked")]
    AllMasked { query: usize },
    #[error("slot {slot} selected for query {query} has no value for the requested object")]
    MissingValue { slot: usize, query: usize },
    #[error("no support slot holds a value for the requested object")]
    NoSupport,
    #[error("dropout probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("support reallocation needs at least one foreground slot")]
    EmptyForeground,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Which scale the support reallocation rule ranks and multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReallocationSpace {
    /// Rank by summed positive distances, rescale, negate back.
    #[default]
    RawDistance,
    /// Rank by summed (non-positive) affinities.
    Affinity,
}

/// Scaled negative squared distances between `S` support keys and `Q` query keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    num_support: usize,
    num_query: usize,
    data: Vec<T>,
}

impl<T: Scalar> AffinityMatrix<T> {
    /// Builds a matrix from query-major data (`data[j * S + i]`).
    pub fn from_query_major(num_support: usize, num_query: usize, data: Vec<T>) -> Result<Self, AttentionError> {
        if data.len() != num_support * num_query {
            return Err(AttentionError::DimensionMismatch {
                what: "affinity data length",
                expected: num_support * num_query,
                actual: data.len(),
            });
        }
        Ok(Self {
            num_support,
            num_query,
            data,
        })
    }

    pub fn num_support(&self) -> usize {
        self.num_support
    }

    pub fn num_query(&self) -> usize {
        self.num_query
    }

    /// Entry for support slot `i` and query position `j`.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[j * self.num_support + i]
    }

    pub fn column(&self, j: usize) -> &[T] {
        &self.data[j * self.num_support..(j + 1) * self.num_support]
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == masked::<T>()
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == masked::<T>()).count()
    }

    /// Swaps the roles of support and query.
    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.num_support {
            for j in 0..self.num_query {
                data.push(self.get(i, j));
            }
        }
        Self {
            num_support: self.num_query,
            num_query: self.num_support,
            data,
        }
    }

    /// Support-major copy, `S` rows of `Q` entries.
    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.num_support)
            .map(|i| (0..self.num_query).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

/// Sentinel for dropped connections. Masked entries never enter a softmax.
pub fn masked<T: Scalar>() -> T {
    T::neg_infinity()
}

const SUPPORT_BLOCK_BYTES: usize = 32 * 1024;

#[inline]
pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for lane in 0..8 {
            let d = x[lane] - y[lane];
            acc[lane] = acc[lane] + d * d;
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        let d = x - y;
        tail = tail + d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Affinity of flat support keys (`S x c_key`) against flat query keys (`Q x c_key`).
pub fn compute_affinity<T: Scalar>(
    support_keys: &[T],
    query_keys: &[T],
    c_key: usize,
) -> Result<AffinityMatrix<T>, AttentionError> {
    if c_key == 0 {
        return Err(AttentionError::ZeroChannels);
    }
    for (what, keys) in [("support key length", support_keys), ("query key length", query_keys)] {
        if keys.len() % c_key != 0 {
            return Err(AttentionError::DimensionMismatch {
                what,
                expected: c_key * (keys.len() / c_key + 1),
                actual: keys.len(),
            });
        }
    }
    let num_support = support_keys.len() / c_key;
    let num_query = query_keys.len() / c_key;
    let scale = T::of(c_key as f64).sqrt();
    let mut data = vec![T::zero(); num_support * num_query];
    // Support blocks small enough to stay cached while every query passes over them.
    let block = (SUPPORT_BLOCK_BYTES / (c_key * std::mem::size_of::<T>())).max(1);
    for (b, support_block) in support_keys.chunks(block * c_key).enumerate() {
        let base = b * block;
        for (q, query) in query_keys.chunks_exact(c_key).enumerate() {
            let row = &mut data[q * num_support + base..];
            for (out, s) in row.iter_mut().zip(support_block.chunks_exact(c_key)) {
                *out = -squared_distance(s, query) / scale;
            }
        }
    }
    Ok(AffinityMatrix {
        num_support,
        num_query,
        data,
    })
}

/// [`compute_affinity`] over individual key vectors, rejecting any vector whose
/// length differs from `c_key`.
pub fn compute_affinity_vectors<T: Scalar>(
    support: &[Vec<T>],
    query: &[Vec<T>],
    c_key: usize,
) -> Result<AffinityMatrix<T>, AttentionError> {
    let flatten = |what, vs: &[Vec<T>]| -> Result<Vec<T>, AttentionError> {
        let mut flat = Vec::with_capacity(vs.len() * c_key);
        for v in vs {
            if v.len() != c_key {
                return Err(AttentionError::DimensionMismatch {
                    what,
                    expected: c_key,
                    actual: v.len(),
                });
            }
            flat.extend_from_slice(v);
        }
        Ok(flat)
    };
    compute_affinity(&flatten("support key", support)?, &flatten("query key", query)?, c_key)
}

/// Per-query lists of the `k` closest support indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKSelection {
    pub k: usize,
    pub num_support: usize,
    /// Bank generation the indices refer to (0 outside a bank).
    pub generation: u64,
    pub lists: Vec<Vec<u32>>,
}

impl TopKSelection {
    pub fn num_query(&self) -> usize {
        self.lists.len()
    }

    pub fn total_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

fn topk_column<T: Scalar>(column: &[T], k: usize) -> Vec<u32> {
    let cmp = |a: &u32, b: &u32| {
        column[*b as usize]
            .partial_cmp(&column[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let neg_inf = masked::<T>();
    let mut idx: Vec<u32> = (0..column.len() as u32)
        .filter(|&i| column[i as usize] != neg_inf)
        .collect();
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.shrink_to_fit();
    idx
}

/// Selects, per query column, the `min(k, S)` largest entries in descending
/// order with ties broken by ascending support index. Masked entries are never
/// selected.
pub fn select_topk<T: Scalar>(aff: &AffinityMatrix<T>, k: usize) -> Result<TopKSelection, AttentionError> {
    if k == 0 {
        return Err(AttentionError::ZeroK);
    }
    let lists = (0..aff.num_query)
        .map(|j| topk_column(aff.column(j), k))
        .collect();
    Ok(TopKSelection {
        k,
        num_support: aff.num_support,
        generation: 0,
        lists,
    })
}

/// Numerically stable softmax. Masked entries receive weight zero.
pub fn softmax_weights<T: Scalar>(entries: &[T]) -> Result<Vec<T>, AttentionError> {
    if entries.is_empty() {
        return Err(AttentionError::EmptyInput);
    }
    let max = entries.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(AttentionError::AllMasked { query: 0 });
    }
    let mut weights: Vec<T> = entries.iter().map(|&a| (a - max).exp()).collect();
    let total = weights.iter().fold(T::zero(), |acc, &w| acc + w);
    for w in &mut weights {
        *w = *w / total;
    }
    Ok(weights)
}

/// Softmax of each query's selected affinities.
pub fn selection_weights<T: Scalar>(
    aff: &AffinityMatrix<T>,
    selection: &TopKSelection,
) -> Result<Vec<Vec<T>>, AttentionError> {
    selection
        .lists
        .iter()
        .enumerate()
        .map(|(j, list)| {
            let column = aff.column(j);
            let entries: Vec<T> = list.iter().map(|&i| column[i as usize]).collect();
            softmax_weights(&entries).map_err(|e| match e {
                AttentionError::AllMasked { .. } | AttentionError::EmptyInput => AttentionError::AllMasked { query: j },
                other => other,
            })
        })
        .collect()
}

/// Per-slot value vectors of one object; slots without a value are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable<T> {
    channels: usize,
    data: Vec<T>,
    present: Vec<bool>,
}

impl<T: Scalar> ValueTable<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            data: Vec::new(),
            present: Vec::new(),
        }
    }

    pub fn from_options(channels: usize, values: &[Option<Vec<T>>]) -> Result<Self, AttentionError> {
        let mut table = Self::new(channels);
        for v in values {
            table.push(v.as_deref())?;
        }
        Ok(table)
    }

    pub fn push(&mut self, value: Option<&[T]>) -> Result<(), AttentionError> {
        match value {
            Some(v) => {
                if v.len() != self.channels {
                    return Err(AttentionError::DimensionMismatch {
                        what: "value vector length",
                        expected: self.channels,
                        actual: v.len(),
                    });
                }
                self.data.extend_from_slice(v);
                self.present.push(true);
            }
            None => {
                self.data.extend(std::iter::repeat_n(T::zero(), self.channels));
                self.present.push(false);
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn has(&self, slot: usize) -> bool {
        self.present[slot]
    }

    pub fn any_present(&self) -> bool {
        self.present.iter().any(|&p| p)
    }

    pub fn get(&self, slot: usize) -> Option<&[T]> {
        self.present[slot].then(|| &self.data[slot * self.channels..(slot + 1) * self.channels])
    }

    /// Keeps the slots whose flag in `keep` is set, preserving order.
    pub(crate) fn retain(&mut self, keep: &[bool]) {
        let c = self.channels;
        let mut w = 0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                if r != w {
                    self.data.copy_within(r * c..(r + 1) * c, w * c);
                    self.present[w] = self.present[r];
                }
                w += 1;
            }
        }
        self.data.truncate(w * c);
        self.present.truncate(w);
    }
}

/// Output position `j` is `sum_i weights[j][i] * value(selection[j][i])`.
pub fn weighted_read<T: Scalar>(
    weights: &[Vec<T>],
    selection: &TopKSelection,
    values: &ValueTable<T>,
    dims: (usize, usize),
) -> Result<FeatureGrid<T>, AttentionError> {
    let (height, width) = dims;
    let positions = height * width;
    if selection.lists.len() != positions || weights.len() != positions {
        return Err(AttentionError::DimensionMismatch {
            what: "query positions",
            expected: positions,
            actual: selection.lists.len().min(weights.len()),
        });
    }
    let c = values.channels();
    let mut out = vec![T::zero(); positions * c];
    for (j, (list, w)) in selection.lists.iter().zip(weights).enumerate() {
        if list.len() != w.len() {
            return Err(AttentionError::DimensionMismatch {
                what: "weights for query",
                expected: list.len(),
                actual: w.len(),
            });
        }
        let acc = &mut out[j * c..(j + 1) * c];
        for (&slot, &weight) in list.iter().zip(w) {
            let slot = slot as usize;
            if slot >= values.len() {
                return Err(AttentionError::DimensionMismatch {
                    what: "slot index bound",
                    expected: values.len(),
                    actual: slot,
                });
            }
            let v = values.get(slot).ok_or(AttentionError::MissingValue { slot, query: j })?;
            for (a, &x) in acc.iter_mut().zip(v) {
                *a = *a + weight * x;
            }
        }
    }
    Ok(FeatureGrid::new(height, width, c, out)?)
}

/// Dense read: softmax over every support slot holding the object's values.
pub fn full_read<T: Scalar>(
    support_keys: &[T],
    values: &ValueTable<T>,
    query_keys: &FeatureGrid<T>,
) -> Result<FeatureGrid<T>, AttentionError> {
    let aff = compute_affinity(support_keys, query_keys.as_slice(), query_keys.channels())?;
    if aff.num_support() != values.len() {
        return Err(AttentionError::DimensionMismatch {
            what: "value table slots",
            expected: aff.num_support(),
            actual: values.len(),
        });
    }
    if !values.any_present() {
        return Err(AttentionError::NoSupport);
    }
    let holders: Vec<u32> = (0..values.len() as u32).filter(|&i| values.has(i as usize)).collect();
    let selection = TopKSelection {
        k: holders.len(),
        num_support: aff.num_support(),
        generation: 0,
        lists: vec![holders; aff.num_query()],
    };
    let weights = selection_weights(&aff, &selection)?;
    weighted_read(&weights, &selection, values, query_keys.dims())
}

/// Independently masks each entry with probability `q`.
pub fn affinity_dropout<T: Scalar>(
    aff: &AffinityMatrix<T>,
    q: f64,
    rng_seed: u64,
) -> Result<AffinityMatrix<T>, AttentionError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AttentionError::InvalidProbability(q));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let data = aff
        .data
        .iter()
        .map(|&v| if rng.random::<f64>() < q { masked() } else { v })
        .collect();
    Ok(AffinityMatrix { data, ..*aff })
}

/// Rescales the rows of foreground support slots by their normalized attention rank.
///
/// The attention of slot `i` is the sum of its row (in distance or affinity
/// space); slots are ranked by descending attention, rank 1 first, and row `i`
/// is multiplied by `rank_i / sum(ranks)`. Background rows pass through.
pub fn reallocate_support_attention<T: Scalar>(
    aff: &AffinityMatrix<T>,
    foreground: &[bool],
    space: ReallocationSpace,
) -> Result<AffinityMatrix<T>, AttentionError> {
    if foreground.len() != aff.num_support {
        return Err(AttentionError::DimensionMismatch {
            what: "foreground mask length",
            expected: aff.num_support,
            actual: foreground.len(),
        });
    }
    let fg: Vec<usize> = (0..aff.num_support).filter(|&i| foreground[i]).collect();
    if fg.is_empty() {
        return Err(AttentionError::EmptyForeground);
    }
    let neg_inf = masked::<T>();
    let attention: Vec<f64> = fg
        .iter()
        .map(|&i| {
            (0..aff.num_query)
                .map(|j| aff.get(i, j))
                .filter(|&v| v != neg_inf)
                .map(|v| match space {
                    ReallocationSpace::RawDistance => -v.as_f64(),
                    ReallocationSpace::Affinity => v.as_f64(),
                })
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..fg.len()).collect();
    order.sort_by(|&a, &b| {
        attention[b]
            .partial_cmp(&attention[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n = fg.len() as f64;
    let rank_total = n * (n + 1.0) / 2.0;
    let mut multiplier = vec![T::one(); aff.num_support];
    for (rank0, &pos) in order.iter().enumerate() {
        multiplier[fg[pos]] = T::of((rank0 + 1) as f64 / rank_total);
    }
    // Negating, scaling and negating back equals scaling in place, so both
    // spaces only differ in how the rows are ranked.
    let mut data = aff.data.clone();
    for col in data.chunks_exact_mut(aff.num_support) {
        for (v, &m) in col.iter_mut().zip(&multiplier) {
            if *v != neg_inf {
                *v = *v * m;
            }
        }
    }
    Ok(AffinityMatrix { data, ..*aff })
}
