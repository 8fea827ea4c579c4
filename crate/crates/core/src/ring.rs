//! The ID space `[0, 1)` viewed as a unit ring.
//!
//! Points are 64-bit fractions: the value `v` stands for `v / 2^64`. Ring
//! arithmetic is plain wrapping `u64` arithmetic.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const TWO_POW_64: f64 = 18_446_744_073_709_551_616.0;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct IdPoint(pub u64);

impl IdPoint {
    pub const ZERO: IdPoint = IdPoint(0);

    /// Nearest representable point to `x`, taken modulo 1.
    pub fn from_fraction(x: f64) -> IdPoint {
        let frac = x.rem_euclid(1.0);
        let scaled = frac * TWO_POW_64;
        if scaled >= TWO_POW_64 {
            IdPoint(0)
        } else {
            IdPoint(scaled as u64)
        }
    }

    pub fn as_fraction(self) -> f64 {
        self.0 as f64 / TWO_POW_64
    }

    /// Point reached by moving `offset` units clockwise.
    pub fn offset(self, offset: u64) -> IdPoint {
        IdPoint(self.0.wrapping_add(offset))
    }

    /// Clockwise distance to `other` in raw units.
    pub fn distance_to(self, other: IdPoint) -> u64 {
        other.0.wrapping_sub(self.0)
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<IdPoint> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(IdPoint)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> IdPoint {
        IdPoint(rng.random())
    }
}

impl fmt::Debug for IdPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdPoint({:.6})", self.as_fraction())
    }
}

impl fmt::Display for IdPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for IdPoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for IdPoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        IdPoint::from_hex(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad 16-digit hex ID: {s:?}")))
    }
}

/// Clockwise distance from `a` to `b`, as a fraction of the ring.
pub fn clockwise_distance(a: IdPoint, b: IdPoint) -> f64 {
    a.distance_to(b) as f64 / TWO_POW_64
}

/// Sorted, duplicate-free set of ring points.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RingSet {
    points: Vec<IdPoint>,
}

impl RingSet {
    pub fn new(mut points: Vec<IdPoint>) -> Result<RingSet> {
        points.sort_unstable();
        if let Some(w) = points.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::IdCollision(w[0]));
        }
        Ok(RingSet { points })
    }

    /// `n` distinct u.a.r. points.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> RingSet {
        let mut points: Vec<IdPoint> = (0..n).map(|_| IdPoint::random(rng)).collect();
        points.sort_unstable();
        points.dedup();
        while points.len() < n {
            let p = IdPoint::random(rng);
            if let Err(pos) = points.binary_search(&p) {
                points.insert(pos, p);
            }
        }
        RingSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[IdPoint] {
        &self.points
    }

    pub fn get(&self, index: usize) -> IdPoint {
        self.points[index]
    }

    pub fn contains(&self, x: IdPoint) -> bool {
        self.points.binary_search(&x).is_ok()
    }

    pub fn index_of(&self, x: IdPoint) -> Option<usize> {
        self.points.binary_search(&x).ok()
    }

    /// Index of the first point at or clockwise after `x`. Ring must be non-empty.
    pub fn successor_index(&self, x: IdPoint) -> usize {
        debug_assert!(!self.points.is_empty());
        let i = self.points.partition_point(|p| *p < x);
        if i == self.points.len() {
            0
        } else {
            i
        }
    }

    pub fn successor(&self, x: IdPoint) -> Result<IdPoint> {
        if self.points.is_empty() {
            return Err(Error::EmptyRing);
        }
        Ok(self.points[self.successor_index(x)])
    }

    pub fn predecessor_index(&self, index: usize) -> usize {
        if index == 0 {
            self.points.len() - 1
        } else {
            index - 1
        }
    }

    pub fn next_index(&self, index: usize) -> usize {
        if index + 1 == self.points.len() {
            0
        } else {
            index + 1
        }
    }

    /// Clockwise gaps between consecutive points (the last wraps to the first).
    pub fn adjacent_distances(&self) -> Vec<f64> {
        let n = self.points.len();
        if n < 2 {
            return Vec::new();
        }
        (0..n)
            .map(|i| clockwise_distance(self.points[i], self.points[(i + 1) % n]))
            .collect()
    }

    /// For each point `p`, the number of points in the clockwise arc `[p, p + len)`.
    pub fn arc_counts(&self, len: u64) -> Vec<usize> {
        let n = self.points.len();
        let mut counts = Vec::with_capacity(n);
        let mut end = 0usize; // points[start..start+end) lie inside the arc
        for start in 0..n {
            if end == 0 {
                end = 1;
            }
            while end < n {
                let q = self.points[(start + end) % n];
                if self.points[start].distance_to(q) < len {
                    end += 1;
                } else {
                    break;
                }
            }
            counts.push(end);
            end -= 1;
        }
        counts
    }

    pub fn into_points(self) -> Vec<IdPoint> {
        self.points
    }
}

/// Median over samples of `ln ln (1/d)`; tracks `ln ln n` within an additive constant.
pub fn estimate_loglog_n(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut values = Vec::with_capacity(samples.len());
    for &d in samples {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::InvalidSample(d));
        }
        values.push((1.0 / d).ln().ln());
    }
    Ok(median(&mut values))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
