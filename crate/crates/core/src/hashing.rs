//! Domain-separated SHA-256 hashes onto the ring.

use sha2::{Digest, Sha256};

use crate::ring::IdPoint;

/// Hash `parts` under `tag` and read the leading 64 bits as a ring point.
pub fn hash_to_point(tag: &str, parts: &[&[u8]]) -> IdPoint {
    let mut hasher = Sha256::new();
    hasher.update(b"tinygroups/");
    hasher.update((tag.len() as u64).to_be_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    IdPoint(u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes")))
}

/// Which graph of a pair a membership hash belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum GraphTag {
    G1,
    G2,
}

impl GraphTag {
    pub const BOTH: [GraphTag; 2] = [GraphTag::G1, GraphTag::G2];

    pub fn as_str(self) -> &'static str {
        match self {
            GraphTag::G1 => "g1",
            GraphTag::G2 => "g2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            GraphTag::G1 => 0,
            GraphTag::G2 => 1,
        }
    }
}

/// `h_tag(w, i)`: the point whose successor becomes slot `i` of `G_w`.
pub fn membership_point(tag: GraphTag, w: IdPoint, slot: u32) -> IdPoint {
    hash_to_point(tag.as_str(), &[&w.0.to_be_bytes(), &slot.to_be_bytes()])
}

pub fn xor_bytes(a: &[u8], b: &[u8]) -> Vec<u8> {
    assert_eq!(a.len(), b.len(), "xor of unequal lengths");
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_hash_is_recomputable() {
        let w = IdPoint(0x1234_5678_9abc_def0);
        assert_eq!(membership_point(GraphTag::G1, w, 3), membership_point(GraphTag::G1, w, 3));
        assert_ne!(membership_point(GraphTag::G1, w, 3), membership_point(GraphTag::G2, w, 3));
        assert_ne!(membership_point(GraphTag::G1, w, 3), membership_point(GraphTag::G1, w, 4));
    }

    #[test]
    fn tags_are_separated() {
        assert_ne!(hash_to_point("f", &[b"x"]), hash_to_point("g", &[b"x"]));
        assert_ne!(hash_to_point("f", &[b"ab"]), hash_to_point("f", &[b"a", b"b"]));
    }

    #[test]
    fn xor_identity() {
        assert_eq!(xor_bytes(&[1, 2, 3], &[1, 2, 3]), vec![0, 0, 0]);
    }
}
