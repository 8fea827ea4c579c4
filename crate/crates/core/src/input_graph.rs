//! Chord-style input graph: fingers, greedy routing, and load/congestion measurement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{clockwise_distance, IdPoint, RingSet};
use crate::seed::stream;

/// Finger offsets `2^(i-1) / 2^64` for `i = 1..=64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FingerSchedule;

impl FingerSchedule {
    pub const COUNT: u32 = 64;

    pub fn offset(self, i: u32) -> u64 {
        assert!((1..=Self::COUNT).contains(&i), "finger index {i} out of range");
        1u64 << (i - 1)
    }

    pub fn targets(self, w: IdPoint) -> impl Iterator<Item = IdPoint> {
        (1..=Self::COUNT).map(move |i| w.offset(self.offset(i)))
    }
}

/// What a group graph needs from its underlying overlay.
pub trait Overlay: Sync {
    fn ids(&self) -> &RingSet;
    /// Neighbor indices of the ID at `index`.
    fn neighbor_indices(&self, index: usize) -> &[u32];
    /// Visit the route from `origin` toward `key`; `visit` returns false to halt.
    fn walk<F: FnMut(usize) -> bool>(&self, origin: usize, key: IdPoint, visit: F) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub origin: IdPoint,
    pub key: IdPoint,
    pub path: Vec<IdPoint>,
    pub resolved: IdPoint,
}

impl SearchTrace {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct InputGraph {
    ids: RingSet,
    schedule: FingerSchedule,
    max_hops: usize,
    // sorted by clockwise distance from the owner
    neighbors: Vec<Vec<u32>>,
}

impl InputGraph {
    pub fn build(ids: RingSet) -> Result<InputGraph> {
        let n = ids.len();
        if n < 2 {
            return Err(Error::TooFewIds(n));
        }
        let schedule = FingerSchedule;
        let neighbors = (0..n).map(|i| derive_neighbors(&ids, schedule, i)).collect();
        Ok(InputGraph {
            max_hops: n.min(FingerSchedule::COUNT as usize + 1),
            ids,
            schedule,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    pub fn schedule(&self) -> FingerSchedule {
        self.schedule
    }

    fn require(&self, w: IdPoint) -> Result<usize> {
        self.ids.index_of(w).ok_or(Error::UnknownId(w))
    }

    pub fn neighbor_set(&self, w: IdPoint) -> Result<Vec<IdPoint>> {
        let i = self.require(w)?;
        let mut out: Vec<IdPoint> = self.neighbors[i].iter().map(|&j| self.ids.get(j as usize)).collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn degree(&self, index: usize) -> usize {
        self.neighbors[index].len()
    }

    /// Number of IDs that list each ID as a neighbor.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.len()];
        for list in &self.neighbors {
            for &j in list {
                counts[j as usize] += 1;
            }
        }
        counts
    }

    pub fn route(&self, origin: IdPoint, key: IdPoint) -> Result<SearchTrace> {
        let o = self.require(origin)?;
        let path = self.route_indices(o, key)?;
        Ok(SearchTrace {
            origin,
            key,
            resolved: self.ids.get(*path.last().expect("path never empty")),
            path: path.into_iter().map(|i| self.ids.get(i)).collect(),
        })
    }

    pub fn route_indices(&self, origin: usize, key: IdPoint) -> Result<Vec<usize>> {
        let mut path = Vec::with_capacity(16);
        self.walk(origin, key, |i| {
            path.push(i);
            true
        })?;
        Ok(path)
    }

    /// Owned key-space share of `w`: the arc from its predecessor to itself.
    pub fn load_share(&self, w: IdPoint) -> Result<f64> {
        let i = self.require(w)?;
        let pred = self.ids.get(self.ids.predecessor_index(i));
        Ok(clockwise_distance(pred, w))
    }

    /// Re-derive `w`'s links by search and check whether `u` is among them.
    pub fn verify_neighbor_claim(&self, u: IdPoint, w: IdPoint) -> bool {
        if u == w || !self.ids.contains(w) || !self.ids.contains(u) {
            return false;
        }
        let resolve = |key: IdPoint| self.route(w, key).map(|t| t.resolved).ok();
        // successor link: the first ID strictly after w
        if resolve(w.offset(1)) == Some(u) {
            return true;
        }
        // predecessor link: nothing lies strictly between u and w
        if resolve(u.offset(1)) == Some(w) {
            return true;
        }
        self.schedule.targets(w).any(|x| resolve(x) == Some(u))
    }

    /// Empirical traversal frequency per ID over random (origin, key) pairs.
    pub fn measure_congestion(&self, trials: usize, seed: u64) -> Result<Congestion> {
        if trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        const SHARD: usize = 2048;
        let shards = trials.div_ceil(SHARD);
        let n = self.len();
        let counts = (0..shards)
            .into_par_iter()
            .map(|s| -> Result<Vec<u64>> {
                use rand::Rng;
                let mut rng = stream(seed, "congestion", s as u64);
                let mut counts = vec![0u64; n];
                let todo = SHARD.min(trials - s * SHARD);
                for _ in 0..todo {
                    let origin = rng.random_range(0..n);
                    let key = IdPoint::random(&mut rng);
                    self.walk(origin, key, |i| {
                        counts[i] += 1;
                        true
                    })?;
                }
                Ok(counts)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(vec![0u64; n], |mut acc, c| {
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                acc
            });
        Ok(Congestion {
            ids: self.ids.points().to_vec(),
            frequency: counts.into_iter().map(|c| c as f64 / trials as f64).collect(),
        })
    }

    pub fn adjacency(&self) -> Vec<AdjacencyEntry> {
        (0..self.len())
            .map(|i| AdjacencyEntry {
                id: self.ids.get(i),
                neighbors: self.neighbor_set(self.ids.get(i)).expect("own ID"),
            })
            .collect()
    }

    pub fn adjacency_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.adjacency())?)
    }
}

impl Overlay for InputGraph {
    fn ids(&self) -> &RingSet {
        &self.ids
    }

    fn neighbor_indices(&self, index: usize) -> &[u32] {
        &self.neighbors[index]
    }

    fn walk<F: FnMut(usize) -> bool>(&self, origin: usize, key: IdPoint, mut visit: F) -> Result<()> {
        let target = self.ids.successor_index(key);
        let mut cur = origin;
        let mut visited = 1;
        if !visit(cur) {
            return Ok(());
        }
        while cur != target {
            let here = self.ids.get(cur);
            let remaining = here.distance_to(self.ids.get(target));
            let list = &self.neighbors[cur];
            // farthest neighbor that does not pass the target
            let k = list.partition_point(|&j| here.distance_to(self.ids.get(j as usize)) <= remaining);
            if k == 0 || visited >= self.max_hops {
                return Err(Error::RoutingDivergence {
                    origin: self.ids.get(origin),
                    key,
                    hops: visited,
                });
            }
            cur = list[k - 1] as usize;
            visited += 1;
            if !visit(cur) {
                return Ok(());
            }
        }
        Ok(())
    }
}

fn derive_neighbors(ids: &RingSet, schedule: FingerSchedule, i: usize) -> Vec<u32> {
    let w = ids.get(i);
    let mut out: Vec<u32> = Vec::with_capacity(24);
    out.push(ids.predecessor_index(i) as u32);
    out.push(ids.next_index(i) as u32);
    out.extend(schedule.targets(w).map(|x| ids.successor_index(x) as u32));
    out.retain(|&j| j as usize != i);
    out.sort_unstable_by_key(|&j| w.distance_to(ids.get(j as usize)));
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyEntry {
    pub id: IdPoint,
    pub neighbors: Vec<IdPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Congestion {
    pub ids: Vec<IdPoint>,
    pub frequency: Vec<f64>,
}

impl Congestion {
    /// The empirical congestion Ĉ.
    pub fn max(&self) -> f64 {
        self.frequency.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, w: IdPoint) -> Option<f64> {
        self.ids.binary_search(&w).ok().map(|i| self.frequency[i])
    }
}
