//! Adversary strategies: which bad IDs to field, how red groups answer
//! searches, false requests aimed at good IDs, and gossip/PoW behavior.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::{membership_point, GraphTag};
use crate::input_graph::FingerSchedule;
use crate::ring::{IdPoint, RingSet};
use crate::seed::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum IdSubsetRule {
    All,
    RandomHalf,
    /// Keep only bad IDs in the clockwise arc `[start, start + len)`.
    ContiguousArc { start: f64, len: f64 },
    /// Keep the numerically smallest `fraction` of bad IDs.
    LowestFraction { fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchBehavior {
    Drop,
    MisrouteToRed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpam {
    pub memberships: bool,
    pub neighbors: bool,
    /// Claims sent per target, as a multiple of the plausible ones.
    pub volume: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "behavior")]
pub enum GossipBehavior {
    None,
    /// Hold back the smallest strings found over the epoch and release them this many
    /// steps before Phase 2 ends (0 = its final step).
    DelayRelease { steps_before_phase2_end: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowBehavior {
    HonestRate,
    BiasSmallOutputs,
    PrecomputeHoard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryStrategy {
    pub id_subset_rule: IdSubsetRule,
    pub search_behavior: SearchBehavior,
    pub request_behavior: RequestSpam,
    pub gossip_behavior: GossipBehavior,
    pub pow_behavior: PowBehavior,
}

impl AdversaryStrategy {
    /// Every hostile arm switched on.
    pub fn worst() -> AdversaryStrategy {
        AdversaryStrategy {
            id_subset_rule: IdSubsetRule::All,
            search_behavior: SearchBehavior::MisrouteToRed,
            request_behavior: RequestSpam {
                memberships: true,
                neighbors: true,
                volume: 1,
            },
            gossip_behavior: GossipBehavior::DelayRelease { steps_before_phase2_end: 0 },
            pow_behavior: PowBehavior::BiasSmallOutputs,
        }
    }

    pub fn passive() -> AdversaryStrategy {
        AdversaryStrategy {
            id_subset_rule: IdSubsetRule::All,
            search_behavior: SearchBehavior::Drop,
            request_behavior: RequestSpam::default(),
            gossip_behavior: GossipBehavior::None,
            pow_behavior: PowBehavior::HonestRate,
        }
    }
}

impl Default for AdversaryStrategy {
    fn default() -> Self {
        AdversaryStrategy::worst()
    }
}

/// The bad IDs the adversary chooses to field.
pub fn select_id_subset(bad_ids: &[IdPoint], rule: IdSubsetRule, rng: &mut SimRng) -> Vec<IdPoint> {
    let mut out: Vec<IdPoint> = match rule {
        IdSubsetRule::All => bad_ids.to_vec(),
        IdSubsetRule::RandomHalf => {
            let mut v = bad_ids.to_vec();
            v.sort_unstable();
            v.shuffle(rng);
            v.truncate(bad_ids.len() / 2);
            v
        }
        IdSubsetRule::ContiguousArc { start, len } => {
            let s = IdPoint::from_fraction(start);
            let l = (len.clamp(0.0, 1.0) * 18_446_744_073_709_551_616.0) as u128;
            bad_ids
                .iter()
                .copied()
                .filter(|x| (s.distance_to(*x) as u128) < l)
                .collect()
        }
        IdSubsetRule::LowestFraction { fraction } => {
            let mut v = bad_ids.to_vec();
            v.sort_unstable();
            v.truncate((fraction.clamp(0.0, 1.0) * bad_ids.len() as f64).round() as usize);
            v
        }
    };
    out.sort_unstable();
    out
}

/// What a red group does with a search that reached it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "response")]
pub enum AdversarialResponse {
    Dropped,
    /// Hands back this bad ID as the answer.
    Misrouted { answer: IdPoint },
}

/// Answer for a failed search toward `key`; `None` for searches that succeeded.
///
/// Misrouting names the bad ID closest clockwise from `key`: the lie most likely to
/// survive a "closest candidate wins" comparison.
pub fn act_on_search(
    behavior: SearchBehavior,
    succeeded: bool,
    key: IdPoint,
    bad_ids: &RingSet,
) -> Option<AdversarialResponse> {
    if succeeded {
        return None;
    }
    Some(match behavior {
        SearchBehavior::Drop => AdversarialResponse::Dropped,
        SearchBehavior::MisrouteToRed => match bad_ids.successor(key) {
            Ok(answer) => AdversarialResponse::Misrouted { answer },
            Err(_) => AdversarialResponse::Dropped,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpamRequest {
    /// "Join group `group` as slot `slot` of the `tag` graph; `point` is `h_tag(group, slot)`."
    Membership {
        target: IdPoint,
        group: IdPoint,
        slot: u32,
        tag: GraphTag,
        point: IdPoint,
    },
    /// "Link to `claimant`, since you are the successor of `key` in its linking rule."
    Neighbor {
        target: IdPoint,
        claimant: IdPoint,
        key: IdPoint,
    },
}

impl SpamRequest {
    pub fn target(&self) -> IdPoint {
        match *self {
            SpamRequest::Membership { target, .. } | SpamRequest::Neighbor { target, .. } => target,
        }
    }

    pub fn point(&self) -> IdPoint {
        match *self {
            SpamRequest::Membership { point, .. } => point,
            SpamRequest::Neighbor { key, .. } => key,
        }
    }
}

/// Claim points precomputed for a set of bad leaders, sorted.
#[derive(Clone, Debug, Default)]
pub struct ClaimIndex {
    membership: Vec<(IdPoint, IdPoint, u32, GraphTag)>,
    neighbor: Vec<(IdPoint, IdPoint)>,
}

impl ClaimIndex {
    pub fn build(bad_leaders: &[IdPoint], slots: u32, tags: &[GraphTag]) -> ClaimIndex {
        let mut membership = Vec::with_capacity(bad_leaders.len() * slots as usize * tags.len());
        let mut neighbor = Vec::with_capacity(bad_leaders.len() * 66);
        for &b in bad_leaders {
            for &tag in tags {
                for s in 1..=slots {
                    membership.push((membership_point(tag, b, s), b, s, tag));
                }
            }
            neighbor.push((b.offset(1), b));
            neighbor.extend(FingerSchedule.targets(b).map(|x| (x, b)));
        }
        membership.sort_unstable_by_key(|e| (e.0, e.1, e.2, e.3.index()));
        neighbor.sort_unstable();
        neighbor.dedup();
        ClaimIndex { membership, neighbor }
    }

    fn in_window<T: Copy>(list: &[T], key: impl Fn(&T) -> IdPoint, target: IdPoint, window: u64) -> Vec<T> {
        // clockwise arc [target - window, target)
        let lo = IdPoint(target.0.wrapping_sub(window));
        let at = |x: IdPoint| list.partition_point(|e| key(e) < x);
        if lo <= target {
            list[at(lo)..at(target)].to_vec()
        } else {
            let mut out = list[at(lo)..].to_vec();
            out.extend_from_slice(&list[..at(target)]);
            out
        }
    }
}

/// False requests aimed at `targets`. Plausible claims are those whose point lies
/// within `window` counter-clockwise of the target; with `volume > 1` the stream is
/// padded with implausible claims.
pub fn spam_requests(
    spam: RequestSpam,
    index: &ClaimIndex,
    membership_targets: &[IdPoint],
    neighbor_targets: &[IdPoint],
    window: u64,
    rng: &mut SimRng,
) -> Vec<SpamRequest> {
    let mut out = Vec::new();
    let volume = spam.volume.max(1) as usize;
    if spam.memberships && !index.membership.is_empty() {
        for &t in membership_targets {
            let hits = ClaimIndex::in_window(&index.membership, |e| e.0, t, window);
            let plausible = hits.len();
            for (point, group, slot, tag) in hits {
                out.push(SpamRequest::Membership { target: t, group, slot, tag, point });
            }
            for _ in 0..plausible * (volume - 1) {
                let (point, group, slot, tag) = index.membership[rng.random_range(0..index.membership.len())];
                out.push(SpamRequest::Membership { target: t, group, slot, tag, point });
            }
        }
    }
    if spam.neighbors && !index.neighbor.is_empty() {
        for &t in neighbor_targets {
            let hits = ClaimIndex::in_window(&index.neighbor, |e| e.0, t, window);
            let plausible = hits.len();
            for (key, claimant) in hits {
                if claimant != t {
                    out.push(SpamRequest::Neighbor { target: t, claimant, key });
                }
            }
            for _ in 0..plausible * (volume - 1) {
                let (key, claimant) = index.neighbor[rng.random_range(0..index.neighbor.len())];
                out.push(SpamRequest::Neighbor { target: t, claimant, key });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input_graph::InputGraph;
    use crate::seed::stream;

    fn p(x: f64) -> IdPoint {
        IdPoint::from_fraction(x)
    }

    #[test]
    fn subset_all_is_identity() {
        let bad = vec![p(0.1), p(0.4), p(0.7)];
        assert_eq!(select_id_subset(&bad, IdSubsetRule::All, &mut stream(0, "adv", 0)), bad);
    }

    #[test]
    fn subset_arc_keeps_only_arc() {
        let bad = vec![p(0.1), p(0.4), p(0.7), p(0.99)];
        let rule = IdSubsetRule::ContiguousArc { start: 0.0, len: 0.5 };
        assert_eq!(select_id_subset(&bad, rule, &mut stream(0, "adv", 0)), vec![p(0.1), p(0.4)]);
        let wrap = IdSubsetRule::ContiguousArc { start: 0.9, len: 0.3 };
        assert_eq!(select_id_subset(&bad, wrap, &mut stream(0, "adv", 0)), vec![p(0.1), p(0.99)]);
    }

    #[test]
    fn subset_sizes() {
        let bad: Vec<IdPoint> = (0..100).map(|i| IdPoint(i * 1000 + 7)).collect();
        let mut rng = stream(1, "adv", 0);
        assert_eq!(select_id_subset(&bad, IdSubsetRule::RandomHalf, &mut rng).len(), 50);
        let low = select_id_subset(&bad, IdSubsetRule::LowestFraction { fraction: 0.3 }, &mut rng);
        assert_eq!(low, bad[..30].to_vec());
    }

    #[test]
    fn graph_properties_survive_every_subset_rule() {
        let n = 1024usize;
        let beta = 0.05;
        let rules = [
            IdSubsetRule::All,
            IdSubsetRule::RandomHalf,
            IdSubsetRule::ContiguousArc { start: 0.0, len: 0.5 },
            IdSubsetRule::LowestFraction { fraction: 0.5 },
        ];
        for (k, rule) in rules.into_iter().enumerate() {
            let mut rng = stream(k as u64, "adv-prop", 0);
            let all = RingSet::random(n, &mut rng);
            let n_bad = (beta * n as f64) as usize;
            let (bad, good) = all.points().split_at(n_bad);
            let kept = select_id_subset(bad, rule, &mut rng);
            let mut ids = good.to_vec();
            ids.extend(kept);
            let ring = RingSet::new(ids).unwrap();
            let g = InputGraph::build(ring.clone()).unwrap();
            let log2n = (ring.len() as f64).log2();
            for _ in 0..2000 {
                let o = ring.get(rng.random_range(0..ring.len()));
                let key = IdPoint::random(&mut rng);
                let t = g.route(o, key).unwrap();
                assert_eq!(t.resolved, ring.successor(key).unwrap());
                assert!(t.hops() as f64 <= 2.0 * log2n);
            }
            for &w in ring.points().iter().take(64) {
                for u in g.neighbor_set(w).unwrap() {
                    assert!(g.verify_neighbor_claim(u, w));
                }
            }
        }
    }

    #[test]
    fn successful_searches_are_never_touched() {
        let bad = RingSet::new(vec![p(0.3)]).unwrap();
        assert_eq!(act_on_search(SearchBehavior::MisrouteToRed, true, p(0.1), &bad), None);
        assert_eq!(act_on_search(SearchBehavior::Drop, true, p(0.1), &bad), None);
    }

    #[test]
    fn failed_search_responses() {
        let bad = RingSet::new(vec![p(0.3), p(0.8)]).unwrap();
        assert_eq!(
            act_on_search(SearchBehavior::MisrouteToRed, false, p(0.5), &bad),
            Some(AdversarialResponse::Misrouted { answer: p(0.8) })
        );
        assert_eq!(act_on_search(SearchBehavior::Drop, false, p(0.5), &bad), Some(AdversarialResponse::Dropped));
    }

    #[test]
    fn spam_claims_are_local_and_padded() {
        let mut rng = stream(3, "adv", 1);
        let bad: Vec<IdPoint> = (0..40).map(|_| IdPoint::random(&mut rng)).collect();
        let index = ClaimIndex::build(&bad, 40, &GraphTag::BOTH);
        let targets: Vec<IdPoint> = (0..50).map(|_| IdPoint::random(&mut rng)).collect();
        let window = IdPoint::from_fraction(0.01).0;
        let spam = RequestSpam { memberships: true, neighbors: true, volume: 1 };
        let base = spam_requests(spam, &index, &targets, &targets, window, &mut rng);
        assert!(!base.is_empty());
        for r in &base {
            assert!(r.point().distance_to(r.target()) <= window && r.point() != r.target());
        }
        let loud = spam_requests(RequestSpam { volume: 10, ..spam }, &index, &targets, &targets, window, &mut rng);
        assert!(loud.len() >= 9 * base.len());
        let none = spam_requests(RequestSpam::default(), &index, &targets, &targets, window, &mut rng);
        assert!(none.is_empty());
    }
}
