//! Fixed-capacity feature memory with shared usage/age counters.
//!
//! Every slot holds one key vector and, per object, an optional value
//! vector. Keys are object-agnostic, so a single top-k selection and a single
//! usage counter per slot serve every object. Eviction removes the slots with
//! the lowest `usage / age` score, where age counts the frames the slot has
//! spent in the bank including the current one.
//!
//! Slots are kept in insertion order, which is also ascending `slot_id`
//! order; selection tie-breaks on support index therefore break ties on
//! `slot_id`.

use std::cmp::Ordering;
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{
    affinity_dropout, compute_affinity, select_topk, selection_weights, softmax_weights, weighted_read,
    AttentionError, TopKSelection, ValueTable,
};
use crate::scalar::Scalar;
use crate::types::{FeatureGrid, FrameFeatures, MemorySlot, ObjectId, Regularizer, StrategyConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("memory bank is empty")]
    Empty,
    #[error("no slot holds values for object {0}")]
    NoSupport(ObjectId),
    #[error("{what}: bank expects {expected:?}, got {actual:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("capacity of {capacity} slots cannot hold one frame of {frame_slots} slots")]
    CapacityTooSmall { capacity: usize, frame_slots: usize },
    #[error("growing bank would need {required} slots, above the ceiling of {ceiling}")]
    CeilingExceeded { ceiling: usize, required: usize },
    #[error("cannot evict {requested} slots, only {available} are evictable")]
    InsufficientEvictable { requested: usize, available: usize },
    #[error("selection refers to bank generation {selection} but the bank is at {bank}")]
    StaleSelection { bank: u64, selection: u64 },
    #[error("selection has {selection} support slots, bank holds {live}")]
    SelectionSize { live: usize, selection: usize },
    #[error("frame {0} carries no object values")]
    NoObjects(u64),
    #[error("value channels {actual} differ from the bank's {expected}")]
    ValueChannels { expected: usize, actual: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// What the per-slot usage counter accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CounterMode {
    /// One per appearance in a query position's top-k list.
    #[default]
    TopKHits,
    /// Softmax weight each slot received over its top-k appearances.
    SoftmaxMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapacityPolicy {
    /// Evict lowest-LFU slots to stay within `capacity_slots`.
    Evict { capacity_slots: usize },
    /// Never evict; fail once the bank would exceed `ceiling_slots`.
    Grow { ceiling_slots: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct SlotMeta {
    slot_id: u64,
    source_frame: u64,
    insertion_frame: u64,
    usage_count: u64,
    weight_mass: f64,
}

/// Usage over age for one live slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfuScore {
    pub slot_id: u64,
    pub usage: f64,
    pub age: u64,
    pub score: f64,
}

/// Diagnostic row of a bank snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub slot_id: u64,
    pub source_frame: u64,
    pub insertion_frame: u64,
    pub usage_count: u64,
    pub weight_mass: f64,
    pub lfu_score: f64,
}

/// Per-object reads of one query frame plus the shared selection behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult<T> {
    pub objects: BTreeMap<ObjectId, FeatureGrid<T>>,
    pub selection: TopKSelection,
    /// Softmax over each query's selected entries, before object masking.
    pub weights: Vec<Vec<T>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WriteOutcome {
    pub evicted: Vec<u64>,
    pub inserted: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    dims: (usize, usize),
    c_key: usize,
    c_value: Option<usize>,
    capacity: CapacityPolicy,
    counter: CounterMode,
    current_frame: u64,
    keys: Vec<T>,
    meta: Vec<SlotMeta>,
    values: BTreeMap<ObjectId, ValueTable<T>>,
    next_slot_id: u64,
    generation: u64,
    first_frame: Option<u64>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(dims: (usize, usize), c_key: usize, capacity: CapacityPolicy, counter: CounterMode) -> Self {
        Self {
            dims,
            c_key,
            c_value: None,
            capacity,
            counter,
            current_frame: 0,
            keys: Vec::new(),
            meta: Vec::new(),
            values: BTreeMap::new(),
            next_slot_id: 0,
            generation: 0,
            first_frame: None,
        }
    }

    /// Bounded bank of `capacity_frames x H x W` slots with top-k hit counting.
    pub fn with_capacity_frames(dims: (usize, usize), c_key: usize, capacity_frames: usize) -> Self {
        Self::new(
            dims,
            c_key,
            CapacityPolicy::Evict {
                capacity_slots: capacity_frames * dims.0 * dims.1,
            },
            CounterMode::TopKHits,
        )
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn frame_slots(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    pub fn c_key(&self) -> usize {
        self.c_key
    }

    pub fn capacity(&self) -> CapacityPolicy {
        self.capacity
    }

    pub fn counter_mode(&self) -> CounterMode {
        self.counter
    }

    pub fn current_frame(&self) -> u64 {
        self.current_frame
    }

    /// Incremented by every structural change; selections carry it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Live slots in units of one frame's grid.
    pub fn frames_equivalent(&self) -> f64 {
        self.len() as f64 / self.frame_slots() as f64
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn object_ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.values.keys().copied()
    }

    pub fn object_values(&self, object: ObjectId) -> Option<&ValueTable<T>> {
        self.values.get(&object)
    }

    pub fn supports(&self, object: ObjectId) -> bool {
        self.values.get(&object).is_some_and(ValueTable::any_present)
    }

    pub fn slot_ids(&self) -> Vec<u64> {
        self.meta.iter().map(|m| m.slot_id).collect()
    }

    pub fn slot(&self, index: usize) -> MemorySlot<T> {
        let m = &self.meta[index];
        MemorySlot {
            slot_id: m.slot_id,
            key: self.keys[index * self.c_key..(index + 1) * self.c_key].to_vec(),
            values: self
                .values
                .iter()
                .filter_map(|(&id, t)| t.get(index).map(|v| (id, v.to_vec())))
                .collect(),
            source_frame: m.source_frame,
            insertion_frame: m.insertion_frame,
            usage_count: m.usage_count,
            weight_mass: m.weight_mass,
        }
    }

    pub fn slots(&self) -> Vec<MemorySlot<T>> {
        (0..self.len()).map(|i| self.slot(i)).collect()
    }

    /// Source frames currently represented in the bank, ascending.
    pub fn source_frames(&self) -> Vec<u64> {
        let mut frames: Vec<u64> = self.meta.iter().map(|m| m.source_frame).collect();
        frames.sort_unstable();
        frames.dedup();
        frames
    }

    fn age(&self, m: &SlotMeta) -> u64 {
        self.current_frame - m.insertion_frame + 1
    }

    fn usage(&self, m: &SlotMeta) -> f64 {
        match self.counter {
            CounterMode::TopKHits => m.usage_count as f64,
            CounterMode::SoftmaxMass => m.weight_mass,
        }
    }

    pub fn lfu_scores(&self) -> Vec<LfuScore> {
        self.meta
            .iter()
            .map(|m| {
                let age = self.age(m);
                let usage = self.usage(m);
                LfuScore {
                    slot_id: m.slot_id,
                    usage,
                    age,
                    score: usage / age as f64,
                }
            })
            .collect()
    }

    pub fn snapshot(&self) -> Vec<SlotRecord> {
        self.meta
            .iter()
            .zip(self.lfu_scores())
            .map(|(m, s)| SlotRecord {
                slot_id: m.slot_id,
                source_frame: m.source_frame,
                insertion_frame: m.insertion_frame,
                usage_count: m.usage_count,
                weight_mass: m.weight_mass,
                lfu_score: s.score,
            })
            .collect()
    }

    /// Eviction order: lower score first, then older, then smaller slot id.
    fn eviction_cmp(&self, a: &SlotMeta, b: &SlotMeta) -> Ordering {
        let (age_a, age_b) = (self.age(a), self.age(b));
        let by_score = match self.counter {
            // Exact rational comparison of usage / age.
            CounterMode::TopKHits => {
                (a.usage_count as u128 * age_b as u128).cmp(&(b.usage_count as u128 * age_a as u128))
            }
            CounterMode::SoftmaxMass => (a.weight_mass / age_a as f64)
                .partial_cmp(&(b.weight_mass / age_b as f64))
                .unwrap_or(Ordering::Equal),
        };
        by_score.then(age_b.cmp(&age_a)).then(a.slot_id.cmp(&b.slot_id))
    }

    fn is_pinned(&self, m: &SlotMeta, pin_first: bool) -> bool {
        pin_first && Some(m.source_frame) == self.first_frame
    }

    /// Removes the `n` lowest-LFU slots and returns their ids in eviction order.
    pub fn evict(&mut self, n: usize, pin_first: bool) -> Result<Vec<u64>, BankError> {
        let mut candidates: Vec<usize> = (0..self.len())
            .filter(|&i| !self.is_pinned(&self.meta[i], pin_first))
            .collect();
        if n > candidates.len() {
            return Err(BankError::InsufficientEvictable {
                requested: n,
                available: candidates.len(),
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let cmp = |&a: &usize, &b: &usize| self.eviction_cmp(&self.meta[a], &self.meta[b]);
        if n < candidates.len() {
            candidates.select_nth_unstable_by(n - 1, cmp);
            candidates.truncate(n);
        }
        candidates.sort_unstable_by(cmp);
        let evicted = candidates.iter().map(|&i| self.meta[i].slot_id).collect();
        let mut keep = vec![true; self.len()];
        for &i in &candidates {
            keep[i] = false;
        }
        self.retain(&keep);
        Ok(evicted)
    }

    /// Removes every slot written from `source_frame`.
    pub fn remove_source_frame(&mut self, source_frame: u64) -> Vec<u64> {
        let keep: Vec<bool> = self.meta.iter().map(|m| m.source_frame != source_frame).collect();
        let removed = self
            .meta
            .iter()
            .filter(|m| m.source_frame == source_frame)
            .map(|m| m.slot_id)
            .collect();
        self.retain(&keep);
        removed
    }

    fn retain(&mut self, keep: &[bool]) {
        let c = self.c_key;
        let mut w = 0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                if r != w {
                    self.keys.copy_within(r * c..(r + 1) * c, w * c);
                    self.meta.swap(w, r);
                }
                w += 1;
            }
        }
        self.keys.truncate(w * c);
        self.meta.truncate(w);
        for table in self.values.values_mut() {
            table.retain(keep);
        }
        self.generation += 1;
    }

    pub fn advance_frame(&mut self) {
        self.current_frame += 1;
    }

    /// Inserts one slot per grid position, evicting first when the bank is bounded.
    pub fn write_frame(&mut self, frame: &FrameFeatures<T>, pin_first: bool) -> Result<WriteOutcome, BankError> {
        if frame.dims() != self.dims {
            return Err(BankError::DimensionMismatch {
                what: "frame grid",
                expected: self.dims,
                actual: frame.dims(),
            });
        }
        if frame.keys.channels() != self.c_key {
            return Err(BankError::DimensionMismatch {
                what: "key channels",
                expected: (self.c_key, 0),
                actual: (frame.keys.channels(), 0),
            });
        }
        if frame.values.is_empty() {
            return Err(BankError::NoObjects(frame.frame_index));
        }
        let c_value = frame.values.values().next().map(FeatureGrid::channels).unwrap_or(0);
        if let Some(expected) = self.c_value {
            if expected != c_value {
                return Err(BankError::ValueChannels {
                    expected,
                    actual: c_value,
                });
            }
        }
        let incoming = self.frame_slots();
        let evicted = match self.capacity {
            CapacityPolicy::Evict { capacity_slots } => {
                if capacity_slots < incoming {
                    return Err(BankError::CapacityTooSmall {
                        capacity: capacity_slots,
                        frame_slots: incoming,
                    });
                }
                let overflow = (self.len() + incoming).saturating_sub(capacity_slots);
                self.evict(overflow, pin_first)?
            }
            CapacityPolicy::Grow { ceiling_slots } => {
                if self.len() + incoming > ceiling_slots {
                    return Err(BankError::CeilingExceeded {
                        ceiling: ceiling_slots,
                        required: self.len() + incoming,
                    });
                }
                Vec::new()
            }
        };
        self.c_value = Some(c_value);

        let live = self.len();
        for &object in frame.values.keys() {
            if let Entry::Vacant(slot) = self.values.entry(object) {
                let mut table = ValueTable::new(c_value);
                for _ in 0..live {
                    table.push(None)?;
                }
                slot.insert(table);
            }
        }
        self.keys.extend_from_slice(frame.keys.as_slice());
        for p in 0..incoming {
            self.meta.push(SlotMeta {
                slot_id: self.next_slot_id,
                source_frame: frame.frame_index,
                insertion_frame: self.current_frame,
                usage_count: 0,
                weight_mass: 0.0,
            });
            self.next_slot_id += 1;
            for (object, table) in self.values.iter_mut() {
                table.push(frame.values.get(object).map(|g| g.vector(p)))?;
            }
        }
        self.first_frame.get_or_insert(frame.frame_index);
        self.generation += 1;
        Ok(WriteOutcome {
            evicted,
            inserted: incoming,
        })
    }

    /// Reads every requested object for one query frame.
    ///
    /// Affinity and top-k selection are computed once from the keys. Each
    /// object then soft-maxes over the selected slots holding its values; a
    /// query whose selection holds none of them falls back to the top-k among
    /// the object's own slots. Counters are not touched.
    pub fn query(
        &self,
        query_keys: &FeatureGrid<T>,
        object_ids: &[ObjectId],
        cfg: &StrategyConfig,
    ) -> Result<ReadResult<T>, BankError> {
        if self.is_empty() {
            return Err(BankError::Empty);
        }
        if query_keys.channels() != self.c_key {
            return Err(BankError::DimensionMismatch {
                what: "query key channels",
                expected: (self.c_key, 0),
                actual: (query_keys.channels(), 0),
            });
        }
        for &object in object_ids {
            if !self.supports(object) {
                return Err(BankError::NoSupport(object));
            }
        }
        let mut aff = compute_affinity(&self.keys, query_keys.as_slice(), self.c_key)?;
        if let Regularizer::Dropout { q } = cfg.regularizer {
            let seed = cfg.rng_seed ^ self.current_frame.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            aff = affinity_dropout(&aff, q, seed)?;
        }
        let mut selection = select_topk(&aff, cfg.top_k)?;
        selection.generation = self.generation;
        let weights = selection_weights(&aff, &selection)?;

        let mut objects = BTreeMap::new();
        for &object in object_ids {
            let table = &self.values[&object];
            let mut lists = Vec::with_capacity(selection.lists.len());
            let mut object_weights = Vec::with_capacity(selection.lists.len());
            for (j, (list, w)) in selection.lists.iter().zip(&weights).enumerate() {
                if list.iter().all(|&i| table.has(i as usize)) {
                    lists.push(list.clone());
                    object_weights.push(w.clone());
                    continue;
                }
                let column = aff.column(j);
                let mut held: Vec<u32> = list.iter().copied().filter(|&i| table.has(i as usize)).collect();
                if held.is_empty() {
                    held = restricted_topk(column, table, cfg.top_k);
                }
                let entries: Vec<T> = held.iter().map(|&i| column[i as usize]).collect();
                let ws = softmax_weights(&entries).map_err(|_| AttentionError::AllMasked { query: j })?;
                lists.push(held);
                object_weights.push(ws);
            }
            let object_selection = TopKSelection {
                lists,
                ..selection.clone()
            };
            let grid = weighted_read(&object_weights, &object_selection, table, query_keys.dims())?;
            objects.insert(object, grid);
        }
        Ok(ReadResult {
            objects,
            selection,
            weights,
        })
    }

    fn check_selection(&self, selection: &TopKSelection) -> Result<(), BankError> {
        if selection.generation != self.generation {
            return Err(BankError::StaleSelection {
                bank: self.generation,
                selection: selection.generation,
            });
        }
        if selection.num_support != self.len() {
            return Err(BankError::SelectionSize {
                live: self.len(),
                selection: selection.num_support,
            });
        }
        Ok(())
    }

    /// Adds one hit per appearance in any query's top-k list; returns the total added.
    pub fn record_usage(&mut self, selection: &TopKSelection) -> Result<u64, BankError> {
        self.check_selection(selection)?;
        let mut total = 0;
        for list in &selection.lists {
            for &i in list {
                self.meta[i as usize].usage_count += 1;
                total += 1;
            }
        }
        Ok(total)
    }

    /// Adds each selected slot's softmax weight to its real-valued counter.
    pub fn record_weight_mass(&mut self, selection: &TopKSelection, weights: &[Vec<T>]) -> Result<f64, BankError> {
        self.check_selection(selection)?;
        let mut total = 0.0;
        for (list, w) in selection.lists.iter().zip(weights) {
            for (&i, &weight) in list.iter().zip(w) {
                let weight = weight.as_f64();
                self.meta[i as usize].weight_mass += weight;
                total += weight;
            }
        }
        Ok(total)
    }

    /// Updates whichever counter this bank scores by.
    pub fn record(&mut self, read: &ReadResult<T>) -> Result<(), BankError> {
        match self.counter {
            CounterMode::TopKHits => self.record_usage(&read.selection).map(|_| ()),
            CounterMode::SoftmaxMass => self.record_weight_mass(&read.selection, &read.weights).map(|_| ()),
        }
    }
}

fn restricted_topk<T: Scalar>(column: &[T], table: &ValueTable<T>, k: usize) -> Vec<u32> {
    let neg_inf = T::neg_infinity();
    let mut idx: Vec<u32> = (0..column.len() as u32)
        .filter(|&i| table.has(i as usize) && column[i as usize] != neg_inf)
        .collect();
    idx.sort_by(|&a, &b| {
        column[b as usize]
            .partial_cmp(&column[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.shrink_to_fit();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(index: u64, keys: Vec<f64>, dims: (usize, usize), objects: &[(u8, Vec<f64>)]) -> FrameFeatures<f64> {
        let c_key = keys.len() / (dims.0 * dims.1);
        let keys = FeatureGrid::new(dims.0, dims.1, c_key, keys).unwrap();
        let values = objects
            .iter()
            .map(|(id, v)| {
                let c = v.len() / (dims.0 * dims.1);
                (ObjectId(*id), FeatureGrid::new(dims.0, dims.1, c, v.clone()).unwrap())
            })
            .collect();
        FrameFeatures::new(index, keys, values).unwrap()
    }

    fn cfg(k: usize) -> StrategyConfig {
        StrategyConfig {
            top_k: k,
            ..StrategyConfig::default()
        }
    }

    #[test]
    fn age_and_lfu_examples() {
        let mut bank = MemoryBank::<f64>::with_capacity_frames((1, 1), 1, 4);
        for _ in 0..3 {
            bank.advance_frame();
        }
        bank.write_frame(&frame(3, vec![0.0], (1, 1), &[(1, vec![1.0])]), false).unwrap();
        assert_eq!(bank.lfu_scores()[0].age, 1);
        assert_eq!(bank.lfu_scores()[0].score, 0.0);
        for _ in 0..4 {
            bank.advance_frame();
        }
        assert_eq!(bank.current_frame(), 7);
        assert_eq!(bank.lfu_scores()[0].age, 5);
        bank.meta[0].usage_count = 10;
        assert_eq!(bank.lfu_scores()[0].score, 2.0);
        bank.advance_frame();
        bank.advance_frame();
        bank.meta[0].usage_count = 7;
        assert_eq!(bank.lfu_scores()[0].score, 1.0);
    }

    #[test]
    fn evict_examples() {
        let mut bank = MemoryBank::<f64>::with_capacity_frames((1, 3), 1, 3);
        bank.write_frame(&frame(0, vec![0.0, 1.0, 2.0], (1, 3), &[(1, vec![0.0; 3])]), false)
            .unwrap();
        // Scores 2.0, 0.5, 1.0 at age 2.
        bank.advance_frame();
        bank.meta[0].usage_count = 4;
        bank.meta[1].usage_count = 1;
        bank.meta[2].usage_count = 2;
        let mut b = bank.clone();
        assert_eq!(b.evict(1, false).unwrap(), vec![1]);

        let mut b = bank.clone();
        for m in &mut b.meta {
            m.usage_count = 3;
        }
        assert_eq!(b.evict(1, false).unwrap(), vec![0]);

        let mut b = bank.clone();
        assert_eq!(b.evict(3, false).unwrap().len(), 3);
        assert!(b.is_empty());

        let mut b = bank.clone();
        assert_eq!(
            b.evict(1, true),
            Err(BankError::InsufficientEvictable {
                requested: 1,
                available: 0
            })
        );
    }

    #[test]
    fn eviction_prefers_older_slot_on_equal_score() {
        let mut bank = MemoryBank::<f64>::with_capacity_frames((1, 1), 1, 3);
        bank.write_frame(&frame(0, vec![0.0], (1, 1), &[(1, vec![0.0])]), false).unwrap();
        bank.advance_frame();
        bank.write_frame(&frame(1, vec![1.0], (1, 1), &[(1, vec![0.0])]), false).unwrap();
        // Both unused: score 0, slot 0 is older.
        assert_eq!(bank.evict(1, false).unwrap(), vec![0]);
    }

    #[test]
    fn write_respects_capacity() {
        let dims = (2, 2);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 1, 2);
        for t in 0..3u64 {
            let keys = (0..4).map(|p| (t * 4 + p) as f64).collect();
            bank.write_frame(&frame(t, keys, dims, &[(1, vec![1.0; 4])]), false).unwrap();
            bank.advance_frame();
        }
        assert_eq!(bank.len(), 8);
        assert_eq!(bank.frames_equivalent(), 2.0);
    }

    #[test]
    fn write_errors() {
        let mut bank = MemoryBank::<f64>::new(
            (1, 2),
            1,
            CapacityPolicy::Evict { capacity_slots: 1 },
            CounterMode::TopKHits,
        );
        assert_eq!(
            bank.write_frame(&frame(0, vec![0.0, 1.0], (1, 2), &[(1, vec![0.0; 2])]), false),
            Err(BankError::CapacityTooSmall {
                capacity: 1,
                frame_slots: 2
            })
        );
        let mut bank = MemoryBank::<f64>::with_capacity_frames((1, 2), 1, 2);
        assert!(matches!(
            bank.write_frame(&frame(0, vec![0.0], (1, 1), &[(1, vec![0.0])]), false),
            Err(BankError::DimensionMismatch { .. })
        ));
        assert_eq!(
            bank.write_frame(&frame(4, vec![0.0, 1.0], (1, 2), &[]), false),
            Err(BankError::NoObjects(4))
        );
        let mut grow = MemoryBank::<f64>::new(
            (1, 1),
            1,
            CapacityPolicy::Grow { ceiling_slots: 1 },
            CounterMode::TopKHits,
        );
        grow.write_frame(&frame(0, vec![0.0], (1, 1), &[(1, vec![0.0])]), false).unwrap();
        assert!(matches!(
            grow.write_frame(&frame(1, vec![0.0], (1, 1), &[(1, vec![0.0])]), false),
            Err(BankError::CeilingExceeded { .. })
        ));
    }

    #[test]
    fn query_self_match_reproduces_values() {
        let dims = (2, 2);
        let keys = vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0, 5.0, 5.0];
        let v1 = vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.8];
        let v2 = vec![0.3, 0.3, 0.1, 0.9, 0.0, 0.0, 1.0, 1.0];
        let f = frame(0, keys.clone(), dims, &[(1, v1.clone()), (2, v2.clone())]);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 2, 1);
        bank.write_frame(&f, false).unwrap();
        let read = bank.query(&f.keys, &[ObjectId(1), ObjectId(2)], &cfg(1)).unwrap();
        assert_eq!(read.objects[&ObjectId(1)].as_slice(), v1.as_slice());
        assert_eq!(read.objects[&ObjectId(2)].as_slice(), v2.as_slice());
    }

    #[test]
    fn query_errors() {
        let bank = MemoryBank::<f64>::with_capacity_frames((1, 1), 1, 1);
        let q = FeatureGrid::new(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(bank.query(&q, &[ObjectId(1)], &cfg(1)), Err(BankError::Empty));
        let mut bank = bank;
        bank.write_frame(&frame(0, vec![0.0], (1, 1), &[(1, vec![1.0])]), false).unwrap();
        assert_eq!(
            bank.query(&q, &[ObjectId(2)], &cfg(1)),
            Err(BankError::NoSupport(ObjectId(2)))
        );
    }

    #[test]
    fn usage_counting() {
        let dims = (2, 2);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 1, 1);
        let f = frame(0, vec![0.0, 1.0, 2.0, 3.0], dims, &[(1, vec![0.0; 4])]);
        bank.write_frame(&f, false).unwrap();
        let read = bank.query(&f.keys, &[ObjectId(1)], &cfg(2)).unwrap();
        assert_eq!(bank.record_usage(&read.selection).unwrap(), 8);
        let total: u64 = bank.snapshot().iter().map(|r| r.usage_count).sum();
        assert_eq!(total, 8);

        let read = bank.query(&f.keys, &[ObjectId(1)], &cfg(4)).unwrap();
        bank.record_usage(&read.selection).unwrap();
        // With k = S every slot appears in all four lists.
        assert!(bank.snapshot().iter().all(|r| r.usage_count >= 4));
    }

    #[test]
    fn stale_selection_is_rejected() {
        let dims = (1, 2);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 1, 2);
        let f = frame(0, vec![0.0, 1.0], dims, &[(1, vec![0.0; 2])]);
        bank.write_frame(&f, false).unwrap();
        let read = bank.query(&f.keys, &[ObjectId(1)], &cfg(1)).unwrap();
        bank.write_frame(&frame(1, vec![2.0, 3.0], dims, &[(1, vec![0.0; 2])]), false)
            .unwrap();
        assert!(matches!(
            bank.record_usage(&read.selection),
            Err(BankError::StaleSelection { .. })
        ));
    }

    #[test]
    fn late_object_is_masked_for_older_slots() {
        let dims = (1, 2);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 1, 3);
        bank.write_frame(&frame(0, vec![0.0, 1.0], dims, &[(1, vec![1.0, 1.0])]), false)
            .unwrap();
        bank.advance_frame();
        bank.write_frame(
            &frame(1, vec![10.0, 11.0], dims, &[(1, vec![0.0, 0.0]), (5, vec![7.0, 9.0])]),
            false,
        )
        .unwrap();
        let table = bank.object_values(ObjectId(5)).unwrap();
        assert!(!table.has(0) && !table.has(1) && table.has(2));

        // Query keys sit on the old slots; object 5 still reads only its own slots.
        let q = FeatureGrid::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let read = bank.query(&q, &[ObjectId(1), ObjectId(5)], &cfg(2)).unwrap();
        assert_eq!(read.selection.lists[0], vec![0, 1]);
        let v5 = read.objects[&ObjectId(5)].as_slice();
        assert!(v5.iter().all(|&v| (7.0..=9.0).contains(&v)));
    }

    #[test]
    fn pinned_first_frame_survives() {
        let dims = (1, 2);
        let mut bank = MemoryBank::<f64>::with_capacity_frames(dims, 1, 2);
        for t in 0..5u64 {
            let f = frame(t, vec![t as f64, t as f64 + 0.5], dims, &[(1, vec![0.0; 2])]);
            bank.write_frame(&f, true).unwrap();
            let read = bank.query(&f.keys, &[ObjectId(1)], &cfg(1)).unwrap();
            bank.record_usage(&read.selection).unwrap();
            bank.advance_frame();
        }
        assert_eq!(bank.source_frames(), vec![0, 4]);
    }

    #[test]
    fn softmax_mass_counter() {
        let dims = (1, 2);
        let mut bank = MemoryBank::<f64>::new(
            dims,
            1,
            CapacityPolicy::Evict { capacity_slots: 4 },
            CounterMode::SoftmaxMass,
        );
        let f = frame(0, vec![0.0, 1.0], dims, &[(1, vec![0.0; 2])]);
        bank.write_frame(&f, false).unwrap();
        let read = bank.query(&f.keys, &[ObjectId(1)], &cfg(2)).unwrap();
        bank.record(&read).unwrap();
        let mass: f64 = bank.snapshot().iter().map(|r| r.weight_mass).sum();
        assert!((mass - 2.0).abs() < 1e-12);
        assert!(bank.snapshot().iter().all(|r| r.usage_count == 0));
    }
}
