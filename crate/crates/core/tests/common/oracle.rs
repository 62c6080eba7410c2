//! Scalar brute-force references for the bank kernels. Deliberately naive:
//! no chunking, no partial sorts, no shared code with the crate.

#![allow(dead_code)]

/// `rows[i][j] = -|s_i - q_j|^2 / sqrt(c)`.
pub fn affinity(support: &[Vec<f64>], query: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = support.first().or(query.first()).map_or(1, Vec::len) as f64;
    support
        .iter()
        .map(|s| {
            query
                .iter()
                .map(|q| {
                    let mut d = 0.0;
                    for k in 0..s.len() {
                        d += (s[k] - q[k]) * (s[k] - q[k]);
                    }
                    -d / c.sqrt()
                })
                .collect()
        })
        .collect()
}

/// Full stable sort of the column, descending, ties by ascending index,
/// masked entries dropped, truncated to `k`.
pub fn topk(column: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).filter(|&i| column[i] != f64::NEG_INFINITY).collect();
    // Insertion sort keeps this independent of the library sort routines.
    for a in 1..idx.len() {
        let mut b = a;
        while b > 0 && column[idx[b]] > column[idx[b - 1]] {
            idx.swap(b, b - 1);
            b -= 1;
        }
    }
    idx.truncate(k);
    idx
}

/// `w_i = 1 / sum_l exp(x_l - x_i)`, masked entries get 0.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            if xi == f64::NEG_INFINITY {
                return 0.0;
            }
            let denom: f64 = x
                .iter()
                .filter(|&&xl| xl != f64::NEG_INFINITY)
                .map(|&xl| (xl - xi).exp())
                .sum();
            1.0 / denom
        })
        .collect()
}

/// `out[j] = sum_n w[j][n] * values[list[j][n]]`.
pub fn read(weights: &[Vec<f64>], lists: &[Vec<usize>], values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = values.first().map_or(0, Vec::len);
    lists
        .iter()
        .zip(weights)
        .map(|(list, w)| {
            let mut out = vec![0.0; c];
            for n in 0..list.len() {
                for ch in 0..c {
                    out[ch] += w[n] * values[list[n]][ch];
                }
            }
            out
        })
        .collect()
}

/// Bookkeeping mirror of one live slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSlot {
    pub id: u64,
    pub inserted: u64,
    pub usage: u64,
}

/// Reference bank state: slots in insertion order plus a frame clock.
#[derive(Clone, Debug, Default)]
pub struct ModelBank {
    pub slots: Vec<ModelSlot>,
    pub frame: u64,
    pub next_id: u64,
}

impl ModelBank {
    pub fn age(&self, s: &ModelSlot) -> u64 {
        self.frame - s.inserted + 1
    }

    pub fn scores(&self) -> Vec<(u64, f64)> {
        self.slots.iter().map(|s| (s.id, s.usage as f64 / self.age(s) as f64)).collect()
    }

    /// True when `a` must be evicted before `b`.
    fn before(&self, a: &ModelSlot, b: &ModelSlot) -> bool {
        let (aa, ab) = (self.age(a) as u128, self.age(b) as u128);
        let (lhs, rhs) = (a.usage as u128 * ab, b.usage as u128 * aa);
        if lhs != rhs {
            return lhs < rhs;
        }
        if aa != ab {
            return aa > ab;
        }
        a.id < b.id
    }

    /// Ids of the `n` slots to evict, found by repeated minimum search.
    pub fn eviction_set(&self, n: usize) -> Vec<u64> {
        let mut remaining: Vec<&ModelSlot> = self.slots.iter().collect();
        let mut out = Vec::new();
        for _ in 0..n {
            let mut best = 0;
            for i in 1..remaining.len() {
                if self.before(remaining[i], remaining[best]) {
                    best = i;
                }
            }
            out.push(remaining.remove(best).id);
        }
        out
    }

    pub fn evict(&mut self, n: usize) -> Vec<u64> {
        let gone = self.eviction_set(n);
        self.slots.retain(|s| !gone.contains(&s.id));
        gone
    }

    pub fn insert(&mut self, count: usize) {
        for _ in 0..count {
            self.slots.push(ModelSlot {
                id: self.next_id,
                inserted: self.frame,
                usage: 0,
            });
            self.next_id += 1;
        }
    }

    /// Counts one hit per list entry, indices referring to slot positions.
    pub fn record(&mut self, lists: &[Vec<usize>]) {
        for list in lists {
            for &i in list {
                self.slots[i].usage += 1;
            }
        }
    }
}
