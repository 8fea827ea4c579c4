//! The group graph: one group per input-graph ID, blue/red coloring, search
//! paths that halt at the first red group, and secure-routing accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{membership_point, GraphTag};
use crate::input_graph::{InputGraph, Overlay};
use crate::ring::IdPoint;
use crate::seed::{stream, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allegiance {
    Good,
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goodness {
    Good,
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Blue,
    Red,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ColoringMode {
    /// Each group red independently with probability `p_f`.
    Synthetic { p_f: f64 },
    /// Red iff bad or confused.
    Organic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub id: IdPoint,
    pub allegiance: Allegiance,
}

/// Size and composition thresholds for a good group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRules {
    pub loglog_n: f64,
    pub d1: f64,
    pub d2: f64,
    pub beta: f64,
    pub delta: f64,
}

impl GroupRules {
    pub fn for_n(n: usize, d1: f64, d2: f64, beta: f64, delta: f64) -> GroupRules {
        GroupRules {
            loglog_n: (n as f64).ln().ln(),
            d1,
            d2,
            beta,
            delta,
        }
    }

    /// Number of membership slots, `⌈d₂ ln ln n⌉`.
    pub fn slots(&self) -> usize {
        (self.d2 * self.loglog_n).ceil() as usize
    }

    pub fn min_size(&self) -> f64 {
        self.d1 * self.loglog_n
    }

    pub fn bad_threshold(&self) -> f64 {
        (1.0 + self.delta) * self.beta
    }

    pub fn is_good(&self, size: usize, bad: usize) -> bool {
        size as f64 >= self.min_size() && size <= self.slots() && bad as f64 <= self.bad_threshold() * size as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub leader: IdPoint,
    pub members: Vec<Member>,
    pub goodness: Goodness,
    pub confused: bool,
    pub color: Color,
}

impl Group {
    pub fn new(leader: IdPoint, members: Vec<Member>, rules: &GroupRules) -> Group {
        let mut g = Group {
            leader,
            members,
            goodness: Goodness::Good,
            confused: false,
            color: Color::Blue,
        };
        g.classify(rules);
        g
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn bad_count(&self) -> usize {
        self.members.iter().filter(|m| m.allegiance == Allegiance::Bad).count()
    }

    pub fn good_count(&self) -> usize {
        self.size() - self.bad_count()
    }

    pub fn has_good_majority(&self) -> bool {
        2 * self.good_count() > self.size()
    }

    /// Recompute goodness from membership; color follows the organic rule.
    pub fn classify(&mut self, rules: &GroupRules) {
        self.goodness = if rules.is_good(self.size(), self.bad_count()) {
            Goodness::Good
        } else {
            Goodness::Bad
        };
        self.color = self.organic_color();
    }

    pub fn organic_color(&self) -> Color {
        if self.goodness == Goodness::Bad || self.confused {
            Color::Red
        } else {
            Color::Blue
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLedger {
    pub group_internal: u64,
    pub inter_group: u64,
    pub gossip: u64,
}

impl MessageLedger {
    pub fn merge(&mut self, other: &MessageLedger) {
        self.group_internal += other.group_internal;
        self.inter_group += other.inter_group;
        self.gossip += other.gossip;
    }

    pub fn total(&self) -> u64 {
        self.group_internal + self.inter_group + self.gossip
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Success,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub kind: OutcomeKind,
    pub path: Vec<IdPoint>,
    pub blocking_group: Option<IdPoint>,
}

impl SearchOutcome {
    pub fn succeeded(&self) -> bool {
        self.kind == OutcomeKind::Success
    }

    /// Leader of the group that resolved the key, on success.
    pub fn resolved(&self) -> Option<IdPoint> {
        self.succeeded().then(|| *self.path.last().expect("non-empty path"))
    }
}

/// Result of one search in index space, without the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    /// Index of the last group visited: the responsible group on success, the blocker on failure.
    pub end: usize,
    pub success: bool,
    pub hops: usize,
}

#[derive(Clone, Debug)]
pub struct GroupGraph {
    base: Arc<InputGraph>,
    groups: Vec<Group>,
    red: Vec<bool>,
    adversary_edges: BTreeSet<(IdPoint, IdPoint)>,
    mode: ColoringMode,
    pub ledger: MessageLedger,
}

impl GroupGraph {
    /// One group per base ID, in ring order, with matching leaders.
    pub fn new(base: Arc<InputGraph>, groups: Vec<Group>) -> Result<GroupGraph> {
        if groups.len() != base.len() {
            return Err(Error::InvalidParameter(format!(
                "{} groups for {} IDs",
                groups.len(),
                base.len()
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.leader != base.ids().get(i) {
                return Err(Error::UnknownId(g.leader));
            }
        }
        let red = groups.iter().map(|g| g.color == Color::Red).collect();
        Ok(GroupGraph {
            base,
            groups,
            red,
            adversary_edges: BTreeSet::new(),
            mode: ColoringMode::Organic,
            ledger: MessageLedger::default(),
        })
    }

    /// Groups whose slot `i` holds the successor of `h_tag(w, i)` in the base ring.
    pub fn with_hashed_membership(
        base: Arc<InputGraph>,
        tag: GraphTag,
        rules: &GroupRules,
        allegiance: impl Fn(usize) -> Allegiance,
    ) -> Result<GroupGraph> {
        let ids = base.ids();
        let slots = rules.slots();
        let groups = (0..ids.len())
            .map(|i| {
                let w = ids.get(i);
                let members = (1..=slots as u32)
                    .map(|s| {
                        let j = ids.successor_index(membership_point(tag, w, s));
                        Member {
                            id: ids.get(j),
                            allegiance: allegiance(j),
                        }
                    })
                    .collect();
                Group::new(w, members, rules)
            })
            .collect();
        GroupGraph::new(base, groups)
    }

    pub fn base(&self) -> &Arc<InputGraph> {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, index: usize) -> &Group {
        &self.groups[index]
    }

    pub fn group_of(&self, leader: IdPoint) -> Result<&Group> {
        self.index_of(leader).map(|i| &self.groups[i])
    }

    pub fn index_of(&self, leader: IdPoint) -> Result<usize> {
        self.base.ids().index_of(leader).ok_or(Error::UnknownId(leader))
    }

    pub fn mode(&self) -> ColoringMode {
        self.mode
    }

    pub fn is_red(&self, index: usize) -> bool {
        self.red[index]
    }

    pub fn red_count(&self) -> usize {
        self.red.iter().filter(|&&r| r).count()
    }

    pub fn red_fraction(&self) -> f64 {
        self.red_count() as f64 / self.len() as f64
    }

    pub fn confused_fraction(&self) -> f64 {
        self.groups.iter().filter(|g| g.confused).count() as f64 / self.len() as f64
    }

    pub fn bad_fraction(&self) -> f64 {
        self.groups.iter().filter(|g| g.goodness == Goodness::Bad).count() as f64 / self.len() as f64
    }

    pub fn set_color(&mut self, index: usize, color: Color) {
        self.groups[index].color = color;
        self.red[index] = color == Color::Red;
        if color == Color::Blue {
            let pruned: Vec<_> = self
                .adversary_edges
                .iter()
                .copied()
                .filter(|&(a, b)| a == self.groups[index].leader || b == self.groups[index].leader)
                .collect();
            for e in pruned {
                self.adversary_edges.remove(&e);
            }
        }
    }

    pub fn mark_colors(&mut self, mode: ColoringMode, rng: &mut SimRng) -> Result<()> {
        match mode {
            ColoringMode::Synthetic { p_f } => {
                if !(0.0..=1.0).contains(&p_f) {
                    return Err(Error::InvalidProbability(p_f));
                }
                for i in 0..self.len() {
                    let red = rng.random_bool(p_f);
                    self.set_color(i, if red { Color::Red } else { Color::Blue });
                }
            }
            ColoringMode::Organic => {
                for i in 0..self.len() {
                    let c = self.groups[i].organic_color();
                    self.set_color(i, c);
                }
            }
        }
        self.mode = mode;
        Ok(())
    }

    /// Adversary-chosen link between two red groups.
    pub fn add_adversary_edge(&mut self, a: IdPoint, b: IdPoint) -> Result<()> {
        for x in [a, b] {
            let i = self.index_of(x)?;
            if !self.red[i] {
                return Err(Error::InvalidParameter(format!("adversary edge touches blue group {x}")));
            }
        }
        self.adversary_edges.insert((a, b));
        Ok(())
    }

    pub fn adversary_edges(&self) -> &BTreeSet<(IdPoint, IdPoint)> {
        &self.adversary_edges
    }

    /// Neighbor set `L_w`: leaders of the groups for `w`'s input-graph neighbors.
    pub fn neighbor_leaders(&self, leader: IdPoint) -> Result<Vec<IdPoint>> {
        let i = self.index_of(leader)?;
        if self.red[i] {
            let mut out: Vec<IdPoint> = self
                .adversary_edges
                .iter()
                .filter(|(a, _)| *a == leader)
                .map(|(_, b)| *b)
                .collect();
            out.extend(self.base.neighbor_indices(i).iter().map(|&j| self.base.ids().get(j as usize)));
            out.sort_unstable();
            out.dedup();
            return Ok(out);
        }
        self.base.neighbor_set(leader)
    }

    /// Index-level search: walk the input-graph route, stopping at the first red group.
    pub fn probe(&self, origin: usize, key: IdPoint) -> Result<Probe> {
        let mut end = origin;
        let mut hops = 0usize;
        let mut blocked = false;
        let mut first = true;
        self.base.walk(origin, key, |i| {
            if !first {
                hops += 1;
            }
            first = false;
            end = i;
            if self.red[i] {
                blocked = true;
                return false;
            }
            true
        })?;
        Ok(Probe {
            end,
            success: !blocked,
            hops,
        })
    }

    /// Like [`probe`](Self::probe), also recording visited indices.
    pub fn probe_path(&self, origin: usize, key: IdPoint, path: &mut Vec<usize>) -> Result<Probe> {
        path.clear();
        let mut blocked = false;
        self.base.walk(origin, key, |i| {
            path.push(i);
            if self.red[i] {
                blocked = true;
                return false;
            }
            true
        })?;
        Ok(Probe {
            end: *path.last().expect("walk visits the origin"),
            success: !blocked,
            hops: path.len() - 1,
        })
    }

    /// Search from a blue origin group, without touching the ledger.
    pub fn search(&self, origin_leader: IdPoint, key: IdPoint) -> Result<SearchOutcome> {
        let o = self.index_of(origin_leader)?;
        if self.red[o] {
            return Err(Error::RedOrigin(origin_leader));
        }
        let mut path = Vec::new();
        let probe = self.probe_path(o, key, &mut path)?;
        let ids = self.base.ids();
        Ok(SearchOutcome {
            kind: if probe.success { OutcomeKind::Success } else { OutcomeKind::Fail },
            path: path.iter().map(|&i| ids.get(i)).collect(),
            blocking_group: (!probe.success).then(|| ids.get(probe.end)),
        })
    }

    /// Search from a blue origin group, charging the secure-routing cost.
    pub fn search_path(&mut self, origin_leader: IdPoint, key: IdPoint) -> Result<SearchOutcome> {
        let outcome = self.search(origin_leader, key)?;
        self.ledger.inter_group += self.secure_route_cost(&outcome)?;
        Ok(outcome)
    }

    /// `Σ |G_a|·|G_b|` over consecutive groups on the path.
    pub fn secure_route_cost(&self, outcome: &SearchOutcome) -> Result<u64> {
        let sizes = outcome
            .path
            .iter()
            .map(|&l| self.group_of(l).map(|g| g.size() as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(sizes.windows(2).map(|w| w[0] * w[1]).sum())
    }

    /// Secure-routing cost of a path given as group indices.
    pub fn path_cost(&self, path: &[usize]) -> u64 {
        path.windows(2)
            .map(|w| (self.groups[w[0]].size() * self.groups[w[1]].size()) as u64)
            .sum()
    }

    /// A u.a.r. blue group index by rejection, so that recoloring a group that is
    /// never drawn leaves the stream untouched.
    pub fn sample_blue(&self, rng: &mut SimRng) -> Result<usize> {
        if self.red.iter().all(|&r| r) {
            return Err(Error::InvalidParameter("no blue group to start a search from".into()));
        }
        loop {
            let i = rng.random_range(0..self.len());
            if !self.red[i] {
                return Ok(i);
            }
        }
    }

    /// Random searches from u.a.r. blue origins to u.a.r. keys on one shared trial set.
    pub fn measure(&self, trials: usize, seed: u64) -> Result<Measurement> {
        if trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        const SHARD: usize = 4096;
        let n = self.len();
        let shards = trials.div_ceil(SHARD);
        let parts = (0..shards)
            .into_par_iter()
            .map(|s| -> Result<Measurement> {
                let mut rng = stream(seed, "search-trials", s as u64);
                let mut m = Measurement::empty(n);
                let mut path = Vec::with_capacity(16);
                for _ in 0..SHARD.min(trials - s * SHARD) {
                    let o = self.sample_blue(&mut rng)?;
                    let key = IdPoint::random(&mut rng);
                    let probe = self.probe_path(o, key, &mut path)?;
                    m.trials += 1;
                    if !probe.success {
                        m.failures += 1;
                    }
                    for &i in &path {
                        m.traversals[i] += 1;
                    }
                    m.cost_total += self.path_cost(&path);
                    // unconditional variant: origin over all groups, red origins fail
                    let u = rng.random_range(0..n);
                    if self.red[u] || !self.probe(u, key)?.success {
                        m.unconditional_failures += 1;
                    }
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Measurement::empty(n);
        for p in &parts {
            total.absorb(p);
        }
        total.red = self.red.clone();
        Ok(total)
    }

    pub fn estimate_responsibility(&self, target: IdPoint, trials: usize, seed: u64) -> Result<f64> {
        let i = self.index_of(target)?;
        Ok(self.measure(trials, seed)?.rho(i))
    }

    pub fn measure_failure(&self, trials: usize, seed: u64) -> Result<f64> {
        Ok(self.measure(trials, seed)?.x_hat())
    }

    /// Leaders mutually reachable by successful searches among blue groups: the
    /// largest strongly connected component of the "search u → v succeeds" relation.
    pub fn giant_component(&self) -> Vec<IdPoint> {
        let n = self.len();
        let ids = self.base.ids();
        let blue: Vec<usize> = (0..n).filter(|&i| !self.red[i]).collect();
        if blue.is_empty() {
            return Vec::new();
        }
        let adj: Vec<Vec<u32>> = blue
            .par_iter()
            .map(|&u| {
                blue.iter()
                    .filter(|&&v| v != u && self.probe(u, ids.get(v)).map(|p| p.success).unwrap_or(false))
                    .map(|&v| v as u32)
                    .collect()
            })
            .collect();
        let mut full = vec![Vec::new(); n];
        for (k, &u) in blue.iter().enumerate() {
            full[u] = adj[k].clone();
        }
        let comp = largest_scc(&full, &blue);
        comp.into_iter().map(|i| ids.get(i)).collect()
    }
}

/// Tarjan's algorithm restricted to `nodes`, iterative.
fn largest_scc(adj: &[Vec<u32>], nodes: &[usize]) -> Vec<usize> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0usize;
    let mut best: Vec<usize> = Vec::new();
    for &root in nodes {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut k)) = call.last_mut() {
            if *k < adj[v].len() {
                let w = adj[v][*k] as usize;
                *k += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("scc stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    if comp.len() > best.len() {
                        best = comp;
                    }
                }
            }
        }
    }
    best.sort_unstable();
    best
}

/// Counts from one shared set of search trials.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub trials: u64,
    pub failures: u64,
    pub unconditional_failures: u64,
    /// Per group: trials whose search path contained it.
    pub traversals: Vec<u64>,
    pub cost_total: u64,
    pub red: Vec<bool>,
}

impl Measurement {
    fn empty(n: usize) -> Measurement {
        Measurement {
            trials: 0,
            failures: 0,
            unconditional_failures: 0,
            traversals: vec![0; n],
            cost_total: 0,
            red: Vec::new(),
        }
    }

    fn absorb(&mut self, other: &Measurement) {
        self.trials += other.trials;
        self.failures += other.failures;
        self.unconditional_failures += other.unconditional_failures;
        self.cost_total += other.cost_total;
        self.traversals.iter_mut().zip(&other.traversals).for_each(|(a, b)| *a += b);
    }

    pub fn x_hat(&self) -> f64 {
        self.failures as f64 / self.trials as f64
    }

    pub fn x_hat_unconditional(&self) -> f64 {
        self.unconditional_failures as f64 / self.trials as f64
    }

    pub fn rho(&self, index: usize) -> f64 {
        self.traversals[index] as f64 / self.trials as f64
    }

    pub fn max_rho(&self) -> f64 {
        self.traversals.iter().copied().max().unwrap_or(0) as f64 / self.trials as f64
    }

    /// Count-level union bound: Σ over red groups of traversal counts.
    pub fn red_traversals(&self) -> u64 {
        self.traversals
            .iter()
            .zip(&self.red)
            .filter(|(_, &r)| r)
            .map(|(t, _)| *t)
            .sum()
    }

    pub fn sum_red_rho(&self) -> f64 {
        self.red_traversals() as f64 / self.trials as f64
    }

    pub fn mean_cost(&self) -> f64 {
        self.cost_total as f64 / self.trials as f64
    }
}

/// Payload reported by a strict majority of distinct senders.
pub fn majority_filter<P: Clone + Ord>(received: &[(IdPoint, P)]) -> Result<P> {
    if received.is_empty() {
        return Err(Error::EmptyFilterInput);
    }
    let mut by_sender: BTreeMap<IdPoint, &P> = BTreeMap::new();
    for (sender, payload) in received {
        by_sender.entry(*sender).or_insert(payload);
    }
    let mut tally: BTreeMap<&P, usize> = BTreeMap::new();
    for p in by_sender.values() {
        *tally.entry(*p).or_default() += 1;
    }
    let senders = by_sender.len();
    tally
        .into_iter()
        .find(|(_, c)| 2 * c > senders)
        .map(|(p, _)| p.clone())
        .ok_or(Error::FilterInconclusive(senders))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::RingSet;
    use crate::seed::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rules() -> GroupRules {
        GroupRules::for_n(1024, 8.0, 24.0, 0.05, 2.0)
    }

    fn all_good_graph(n: usize, seed: u64) -> GroupGraph {
        let base = Arc::new(InputGraph::build(RingSet::random(n, &mut stream(seed, "gg-test", 0))).unwrap());
        GroupGraph::with_hashed_membership(base, GraphTag::G1, &rules(), |_| Allegiance::Good).unwrap()
    }

    fn synthetic(n: usize, p_f: f64, seed: u64) -> GroupGraph {
        let mut q = all_good_graph(n, seed);
        q.mark_colors(ColoringMode::Synthetic { p_f }, &mut stream(seed, "gg-color", 0)).unwrap();
        q
    }

    #[test]
    fn extreme_probabilities() {
        assert_eq!(synthetic(128, 0.0, 1).red_count(), 0);
        assert_eq!(synthetic(128, 1.0, 1).red_count(), 128);
        let mut q = all_good_graph(16, 1);
        let err = q.mark_colors(ColoringMode::Synthetic { p_f: 1.5 }, &mut stream(1, "x", 0));
        assert!(matches!(err, Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn red_fraction_concentrates() {
        let mut ok = 0;
        let base = Arc::new(InputGraph::build(RingSet::random(4096, &mut stream(0, "gg-test", 1))).unwrap());
        let mut q = GroupGraph::with_hashed_membership(base, GraphTag::G1, &rules(), |_| Allegiance::Good).unwrap();
        for seed in 0..200 {
            q.mark_colors(ColoringMode::Synthetic { p_f: 0.01 }, &mut stream(seed, "gg-color", 1)).unwrap();
            if (0.007..=0.013).contains(&q.red_fraction()) {
                ok += 1;
            }
        }
        use statrs::distribution::{Binomial, DiscreteCDF};
        let bin = Binomial::new(0.01, 4096).unwrap();
        let lo = (0.007f64 * 4096.0).ceil() as u64;
        let hi = (0.013f64 * 4096.0).floor() as u64;
        let exact = bin.cdf(hi) - bin.cdf(lo - 1);
        let sd = (exact * (1.0 - exact) / 200.0).sqrt();
        let got = ok as f64 / 200.0;
        assert!(got >= exact - 3.0 * sd, "{got} vs exact {exact}");
    }

    #[test]
    fn all_blue_searches_resolve_successor() {
        let mut q = all_good_graph(256, 2);
        let mut rng = stream(2, "gg-test", 2);
        for _ in 0..500 {
            let o = q.base().ids().get(rng.random_range(0..256));
            let key = IdPoint::random(&mut rng);
            let out = q.search_path(o, key).unwrap();
            assert!(out.succeeded());
            assert_eq!(out.resolved(), Some(q.base().ids().successor(key).unwrap()));
        }
        assert!(q.ledger.inter_group > 0);
    }

    #[test]
    fn red_origin_is_rejected() {
        let q = synthetic(64, 1.0, 3);
        let o = q.base().ids().get(0);
        assert!(matches!(q.search(o, IdPoint(5)), Err(Error::RedOrigin(_))));
        assert!(matches!(q.search(IdPoint(12345), IdPoint(5)), Err(Error::UnknownId(_))));
    }

    #[test]
    fn planted_red_group_blocks_route() {
        let mut q = all_good_graph(64, 4);
        let mut rng = stream(4, "gg-test", 4);
        loop {
            let o = rng.random_range(0..64);
            let key = IdPoint::random(&mut rng);
            let route = q.base().route_indices(o, key).unwrap();
            if route.len() < 3 {
                continue;
            }
            let victim = route[route.len() / 2];
            q.set_color(victim, Color::Red);
            let out = q.search(q.base().ids().get(o), key).unwrap();
            assert_eq!(out.kind, OutcomeKind::Fail);
            assert_eq!(out.blocking_group, Some(q.base().ids().get(victim)));
            assert_eq!(out.path.len(), route.len() / 2 + 1);
            break;
        }
    }

    #[test]
    fn responsibility_with_two_groups() {
        let q = all_good_graph(2, 5);
        let m = q.measure(2000, 5).unwrap();
        assert!(m.rho(0) >= 0.5 && m.rho(1) >= 0.5);
    }

    #[test]
    fn all_blue_responsibility_matches_congestion() {
        let q = all_good_graph(256, 6);
        let m = q.measure(200_000, 6).unwrap();
        let c = q.base().measure_congestion(200_000, 60).unwrap();
        for i in 0..256 {
            let (a, b) = (m.rho(i), c.frequency[i]);
            // two independent binomial estimates; 5 sigma of their difference
            let sigma = (2.0 * a.max(b) * (1.0 - a.max(b)) / 200_000.0).sqrt();
            assert!((a - b).abs() <= 5.0 * sigma + 1e-9, "group {i}: {a} vs {b}");
        }
    }

    #[test]
    fn responsibility_at_1024_reports_kappa() {
        let q = synthetic(1024, 0.02, 7);
        let m = q.measure(100_000, 7).unwrap();
        let log2n = 10.0f64;
        let kappa = m.max_rho() / (log2n * log2n / 1024.0);
        eprintln!("fitted responsibility kappa at n=1024, p_f=0.02: {kappa:.3}");
        assert!(kappa < 10.0);
    }

    #[test]
    fn failure_zero_without_red() {
        let q = synthetic(512, 0.0, 8);
        assert_eq!(q.measure_failure(5000, 8).unwrap(), 0.0);
    }

    #[test]
    fn route_cost_examples() {
        let r = rules();
        let mk = |x: u64, k: usize| Group::new(IdPoint(x), vec![Member { id: IdPoint(x), allegiance: Allegiance::Good }; k], &r);
        let base = Arc::new(InputGraph::build(RingSet::new(vec![IdPoint(1), IdPoint(2)]).unwrap()).unwrap());
        let q = GroupGraph::new(base, vec![mk(1, 5), mk(2, 7)]).unwrap();
        let two = SearchOutcome { kind: OutcomeKind::Success, path: vec![IdPoint(1), IdPoint(2)], blocking_group: None };
        assert_eq!(q.secure_route_cost(&two).unwrap(), 35);
        let one = SearchOutcome { kind: OutcomeKind::Success, path: vec![IdPoint(1)], blocking_group: None };
        assert_eq!(q.secure_route_cost(&one).unwrap(), 0);
    }

    #[test]
    fn mean_route_cost_at_1024() {
        let q = all_good_graph(1024, 9);
        let m = q.measure(20_000, 9).unwrap();
        let lnln = (1024f64).ln().ln();
        let kappa = m.mean_cost() / (10.0 * lnln * lnln);
        eprintln!("fitted route-cost kappa at n=1024: {kappa:.3}");
        assert!(kappa < 24.0 * 24.0);
    }

    #[test]
    fn majority_filter_examples() {
        let s = |x| IdPoint(x);
        let got = majority_filter(&[(s(1), 'v'), (s(2), 'v'), (s(3), 'v'), (s(4), 'x'), (s(5), 'y')]).unwrap();
        assert_eq!(got, 'v');
        let tie = majority_filter(&[(s(1), 'v'), (s(2), 'v'), (s(3), 'x'), (s(4), 'x')]);
        assert!(matches!(tie, Err(Error::FilterInconclusive(4))));
        assert_eq!(majority_filter(&[(s(9), 7u8)]).unwrap(), 7);
        assert!(matches!(majority_filter::<u8>(&[]), Err(Error::EmptyFilterInput)));
        // a sender repeating itself counts once
        let dup = majority_filter(&[(s(1), 'x'), (s(1), 'x'), (s(1), 'x'), (s(2), 'v'), (s(3), 'v')]).unwrap();
        assert_eq!(dup, 'v');
    }

    #[test]
    fn group_rules_classify() {
        let r = GroupRules { loglog_n: 2.0, d1: 2.0, d2: 5.0, beta: 0.1, delta: 1.0 };
        assert_eq!(r.slots(), 10);
        assert!(r.is_good(10, 2));
        assert!(!r.is_good(10, 3));
        assert!(!r.is_good(3, 0));
        assert!(!r.is_good(11, 0));
    }

    #[test]
    fn giant_component_of_all_blue_is_everything() {
        let q = synthetic(128, 0.0, 10);
        assert_eq!(q.giant_component().len(), 128);
    }

    #[test]
    fn giant_component_excludes_red() {
        let q = synthetic(256, 0.05, 11);
        let comp = q.giant_component();
        assert!(comp.len() <= 256 - q.red_count());
        assert!(comp.iter().all(|&l| !q.is_red(q.index_of(l).unwrap())));
    }

    #[test]
    fn scc_on_small_digraph() {
        // 0 -> 1 -> 2 -> 0, 2 -> 3, 3 -> 4 -> 3
        let adj = vec![vec![1], vec![2], vec![0, 3], vec![4], vec![3]];
        assert_eq!(largest_scc(&adj, &[0, 1, 2, 3, 4]), vec![0, 1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn search_path_is_route_prefix(n in 2usize..64, seed in any::<u64>(), p_f in 0.0f64..0.5) {
            let q = synthetic(n, p_f, seed);
            let ids = q.base().ids().clone();
            let mut rng = stream(seed, "prefix", 0);
            for _ in 0..40 {
                let o = rng.random_range(0..n);
                if q.is_red(o) { continue; }
                let key = IdPoint::random(&mut rng);
                let out = q.search(ids.get(o), key).unwrap();
                let route = q.base().route(ids.get(o), key).unwrap();
                prop_assert!(route.path.starts_with(&out.path));
                if let Some(b) = out.blocking_group {
                    let first_red = route.path.iter().position(|&l| q.is_red(q.index_of(l).unwrap())).unwrap();
                    prop_assert_eq!(route.path[first_red], b);
                }
            }
        }

        #[test]
        fn failure_bounded_by_red_responsibility(seed in any::<u64>(), p_f in 0.0f64..0.3) {
            let q = synthetic(200, p_f, seed);
            prop_assume!(q.red_count() < 200);
            let m = q.measure(3000, seed).unwrap();
            prop_assert!(m.failures <= m.red_traversals());
        }

        #[test]
        fn red_red_edges_change_nothing(seed in any::<u64>()) {
            let q = synthetic(128, 0.1, seed);
            let reds: Vec<IdPoint> = (0..128).filter(|&i| q.is_red(i)).map(|i| q.base().ids().get(i)).collect();
            prop_assume!(reds.len() >= 2);
            let mut tampered = q.clone();
            let mut rng = stream(seed, "tamper", 0);
            for _ in 0..50 {
                let a = reds[rng.random_range(0..reds.len())];
                let b = reds[rng.random_range(0..reds.len())];
                tampered.add_adversary_edge(a, b).unwrap();
            }
            prop_assert_eq!(q.measure(2000, seed).unwrap(), tampered.measure(2000, seed).unwrap());
        }

        #[test]
        fn reddening_an_untraversed_group_keeps_x(seed in any::<u64>()) {
            let q = synthetic(512, 0.02, seed);
            let m = q.measure(300, seed).unwrap();
            if let Some(idle) = (0..512).find(|&i| m.traversals[i] == 0 && !q.is_red(i)) {
                let mut q2 = q.clone();
                q2.set_color(idle, Color::Red);
                let m2 = q2.measure(300, seed).unwrap();
                prop_assert_eq!(m.failures, m2.failures);
            }
        }
    }
}
