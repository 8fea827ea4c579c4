//! Simulator and protocol library for Byzantine-tolerant overlays built from
//! groups of `O(log log n)` IDs.

#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod epochs;
pub mod error;
pub mod gossip;
pub mod group;
pub mod hashing;
pub mod input_graph;
pub mod oracle;
pub mod pow;
pub mod ring;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
pub use ring::{IdPoint, RingSet};
