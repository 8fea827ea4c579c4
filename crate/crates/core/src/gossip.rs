//! Global random strings: local generation, gated flooding through bins and counters,
//! and solution sets.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::GossipBehavior;
use crate::error::{Error, Result};
use crate::group::GroupGraph;
use crate::hashing::{hash_to_point, xor_bytes};
use crate::input_graph::Overlay;
use crate::pow::random_string;
use crate::ring::IdPoint;
use crate::seed::stream;

/// `t = h(s ⊕ r_prev)`.
pub fn string_output(s: &[u8], r_prev: &[u8]) -> IdPoint {
    hash_to_point("gossip-output", &[&xor_bytes(s, r_prev)])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringMsg {
    #[serde(with = "hex_vec")]
    pub s: Vec<u8>,
    pub t: IdPoint,
    pub origin: IdPoint,
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl StringMsg {
    pub fn generate(s: Vec<u8>, r_prev: &[u8], origin: IdPoint) -> StringMsg {
        let t = string_output(&s, r_prev);
        StringMsg { s, t, origin }
    }

    pub fn verify(&self, r_prev: &[u8]) -> bool {
        self.s.len() == r_prev.len() && string_output(&self.s, r_prev) == self.t
    }
}

/// Number of bins `⌈b · ln(nT)⌉`.
pub fn bin_count(b: f64, n: usize, t_steps: u64) -> usize {
    ((b * ((n as f64).ln() + (t_steps as f64).ln())).ceil() as usize).max(1)
}

/// The `j` with `t ∈ [2^{-j}, 2^{-(j-1)})`, capped at `bins`; `t = 0` goes to the deepest bin.
pub fn bin_index(t: IdPoint, bins: usize) -> usize {
    if t.0 == 0 {
        return bins;
    }
    (t.0.leading_zeros() as usize + 1).min(bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offer {
    Forward,
    Drop,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Bin {
    min: Option<IdPoint>,
    counter: u32,
    /// Every verified string that landed here, by output.
    seen: BTreeMap<(IdPoint, usize), ()>,
}

/// One ID's bins `B_1..B_J` and counters `C_j`. Strings are referred to by their index
/// in a shared arena.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinTable {
    bins: Vec<Bin>,
    cap: u32,
    forwards: u32,
    flagged: Vec<IdPoint>,
}

impl BinTable {
    /// `bins` bins with counter cap `⌊c₀ ln n⌋` (at least 1).
    pub fn new(bins: usize, c0: f64, n: usize) -> BinTable {
        BinTable {
            bins: vec![Bin::default(); bins],
            cap: ((c0 * (n as f64).ln()).floor() as u32).max(1),
            forwards: 0,
            flagged: Vec::new(),
        }
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn counter(&self, j: usize) -> u32 {
        self.bins[j - 1].counter
    }

    pub fn forwards(&self) -> u32 {
        self.forwards
    }

    /// Origins whose strings failed recomputation.
    pub fn flagged(&self) -> &[IdPoint] {
        &self.flagged
    }

    /// Gate `msg`: forward iff it strictly beats its bin's minimum and the bin's counter is
    /// below the cap. `verified` is the outcome of recomputing `t`.
    pub fn offer(&mut self, msg: &StringMsg, index: usize, verified: bool) -> Offer {
        if !verified {
            self.flagged.push(msg.origin);
            return Offer::Drop;
        }
        let j = bin_index(msg.t, self.bins.len());
        let bin = &mut self.bins[j - 1];
        bin.seen.insert((msg.t, index), ());
        let record = bin.min.is_none_or(|m| msg.t < m);
        if record {
            bin.min = Some(msg.t);
        }
        if record && bin.counter < self.cap {
            bin.counter += 1;
            self.forwards += 1;
            Offer::Forward
        } else {
            Offer::Drop
        }
    }

    /// Smallest output seen so far, with its arena index.
    pub fn minimum(&self) -> Option<(IdPoint, usize)> {
        self.bins.iter().rev().find_map(|b| b.seen.keys().next().copied())
    }

    pub fn contains(&self, index: usize, t: IdPoint) -> bool {
        let j = bin_index(t, self.bins.len());
        self.bins[j - 1].seen.contains_key(&(t, index))
    }
}

/// `R^w`: arena indices sorted by output, deepest bin first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub strings: Vec<usize>,
    pub outputs: Vec<IdPoint>,
    pub chosen_min: Option<usize>,
}

impl SolutionSet {
    pub fn contains(&self, index: usize) -> bool {
        self.strings.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }
}

/// Collect from the largest occupied `j` downward until `limit` strings are held.
pub fn assemble_solution_set(table: &BinTable, limit: usize, chosen_min: Option<usize>) -> Result<SolutionSet> {
    let mut strings = Vec::with_capacity(limit);
    let mut outputs = Vec::with_capacity(limit);
    'bins: for bin in table.bins.iter().rev() {
        for &(t, i) in bin.seen.keys() {
            if strings.len() == limit {
                break 'bins;
            }
            strings.push(i);
            outputs.push(t);
        }
    }
    if strings.is_empty() {
        return Err(Error::NoStringsObserved);
    }
    Ok(SolutionSet {
        strings,
        outputs,
        chosen_min,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    One,
    Two,
    Three,
}

/// Phase 1 = steps `1..=T/2 − 2L`, Phase 2 the next `L`, Phase 3 the final `L`, with
/// `L = ⌈d′ ln n⌉`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseClock {
    pub half: u64,
    pub phase_len: u64,
}

impl PhaseClock {
    pub fn new(t_steps: u64, phase_len: u64) -> Result<PhaseClock> {
        let half = t_steps / 2;
        if phase_len == 0 || half <= 2 * phase_len {
            return Err(Error::InvalidParameter(format!(
                "T/2 = {half} leaves no Phase 1 with phases of {phase_len} steps"
            )));
        }
        Ok(PhaseClock { half, phase_len })
    }

    pub fn from_d_prime(t_steps: u64, d_prime: f64, n: usize) -> Result<PhaseClock> {
        PhaseClock::new(t_steps, (d_prime * (n as f64).ln()).ceil() as u64)
    }

    pub fn phase1_end(&self) -> u64 {
        self.half - 2 * self.phase_len
    }

    pub fn phase2_end(&self) -> u64 {
        self.half - self.phase_len
    }

    pub fn phase3_end(&self) -> u64 {
        self.half
    }

    pub fn phase(&self, step: u64) -> Option<Phase> {
        match step {
            0 => None,
            s if s <= self.phase1_end() => Some(Phase::One),
            s if s <= self.phase2_end() => Some(Phase::Two),
            s if s <= self.phase3_end() => Some(Phase::Three),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GossipParams {
    pub b: f64,
    pub c0: f64,
    pub d0: f64,
    pub string_bytes: usize,
    /// Fixed `d′`; `None` calibrates it to twice the giant component's diameter.
    pub d_prime: Option<f64>,
}

impl Default for GossipParams {
    fn default() -> GossipParams {
        GossipParams {
            b: 1.0,
            c0: 4.0,
            d0: 4.0,
            string_bytes: 8,
            d_prime: None,
        }
    }
}

/// Strings the adversary delivers straight to `targets` at `step`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub step: u64,
    pub strings: Vec<StringMsg>,
    pub targets: Vec<IdPoint>,
}

/// Undirected flood topology over group-graph links.
pub fn flood_neighbors(q: &GroupGraph) -> Vec<Vec<u32>> {
    let base = q.base();
    let mut adj: Vec<Vec<u32>> = (0..q.len()).map(|i| base.neighbor_indices(i).to_vec()).collect();
    for i in 0..q.len() {
        for &j in base.neighbor_indices(i) {
            adj[j as usize].push(i as u32);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Largest flood distance between two members of `component`, moving through blue groups.
pub fn component_diameter(q: &GroupGraph, adj: &[Vec<u32>], component: &[usize]) -> u64 {
    let mut inside = vec![false; q.len()];
    for &c in component {
        inside[c] = true;
    }
    component
        .par_iter()
        .map(|&src| {
            let mut dist = vec![u32::MAX; q.len()];
            dist[src] = 0;
            let mut queue = VecDeque::from([src]);
            let mut far = 0;
            while let Some(u) = queue.pop_front() {
                if inside[u] {
                    far = far.max(dist[u]);
                }
                for &v in &adj[u] {
                    let v = v as usize;
                    if dist[v] == u32::MAX && !q.is_red(v) {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            far as u64
        })
        .max()
        .unwrap_or(0)
}

/// Local Phase 1 minimum of each blue group: one candidate per step.
pub fn phase1_minima(q: &GroupGraph, clock: &PhaseClock, r_prev: &[u8], bytes: usize, seed: u64) -> Vec<Option<StringMsg>> {
    (0..q.len())
        .into_par_iter()
        .map(|i| {
            if q.is_red(i) {
                return None;
            }
            let origin = q.group(i).leader;
            let mut rng = stream(seed, "gossip-generate", i as u64);
            (0..clock.phase1_end())
                .map(|_| StringMsg::generate(random_string(bytes, &mut rng), r_prev, origin))
                .min_by_key(|m| m.t)
        })
        .collect()
}

/// The adversary's `keep` smallest strings from `units` candidates per step over `steps` steps.
pub fn adversary_strings(units: u64, steps: u64, keep: usize, r_prev: &[u8], bytes: usize, origin: IdPoint, seed: u64) -> Vec<StringMsg> {
    let mut all: Vec<StringMsg> = (0..units)
        .into_par_iter()
        .flat_map_iter(|u| {
            let mut rng = stream(seed, "gossip-adversary", u);
            let mut best: Vec<StringMsg> = Vec::with_capacity(keep + 1);
            for _ in 0..steps {
                let m = StringMsg::generate(random_string(bytes, &mut rng), r_prev, origin);
                if best.len() < keep || m.t < best[best.len() - 1].t {
                    let at = best.partition_point(|b| b.t < m.t);
                    best.insert(at, m);
                    best.truncate(keep);
                }
            }
            best
        })
        .collect();
    all.sort_by_key(|m| m.t);
    all.truncate(keep);
    all
}

/// Result of one epoch of string propagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GossipOutcome {
    pub clock: PhaseClock,
    pub d_prime: f64,
    pub diameter: u64,
    pub strings: Vec<StringMsg>,
    /// Group indices of the giant component, ascending.
    pub giant: Vec<usize>,
    /// `s^{i*}_w` per group (arena index), `None` for red groups.
    pub chosen: Vec<Option<usize>>,
    pub solution_sets: Vec<Option<SolutionSet>>,
    pub solution_limit: usize,
    pub messages: u64,
    pub gossip_cost: u64,
    pub max_forwards: u32,
    pub forward_cap: u64,
    /// Arena index of the smallest Phase 1 string among blue groups.
    pub good_min: Option<usize>,
}

impl GossipOutcome {
    /// Pairs `(w, u)` of giant-component IDs with `s^{i*}_w ∉ R^u`.
    pub fn agreement_violations(&self) -> u64 {
        let mut chosen: Vec<usize> = self.giant.iter().filter_map(|&w| self.chosen[w]).collect();
        chosen.sort_unstable();
        let mut holders: BTreeMap<usize, u64> = BTreeMap::new();
        for &c in &chosen {
            *holders.entry(c).or_default() += 1;
        }
        self.giant
            .iter()
            .map(|&u| match &self.solution_sets[u] {
                Some(r) => holders.iter().filter(|(c, _)| !r.contains(**c)).map(|(_, k)| *k).sum(),
                None => chosen.len() as u64,
            })
            .sum::<u64>()
            + self.giant.iter().filter(|&&w| self.chosen[w].is_none()).count() as u64 * self.giant.len() as u64
    }

    pub fn distinct_chosen(&self) -> usize {
        let mut c: Vec<usize> = self.giant.iter().filter_map(|&w| self.chosen[w]).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    }

    pub fn max_solution_size(&self) -> usize {
        self.solution_sets.iter().flatten().map(SolutionSet::len).max().unwrap_or(0)
    }

    /// Whether every giant-component ID saw the smallest good string.
    pub fn good_min_everywhere(&self) -> bool {
        match self.good_min {
            None => true,
            Some(g) => self.giant.iter().all(|&w| self.solution_sets[w].as_ref().is_some_and(|r| r.contains(g))),
        }
    }
}

/// Run Phases 1 to 3 over `q`; red groups never forward.
pub fn run_gossip(q: &GroupGraph, params: &GossipParams, t_steps: u64, r_prev: &[u8], injections: &[Injection], seed: u64) -> Result<GossipOutcome> {
    if r_prev.len() != params.string_bytes {
        return Err(Error::InvalidParameter(format!(
            "r_prev has {} bytes, strings have {}",
            r_prev.len(),
            params.string_bytes
        )));
    }
    let n = q.len();
    let ln_n = (n as f64).ln();
    let adj = flood_neighbors(q);
    let giant: Vec<usize> = {
        let mut g: Vec<usize> = q.giant_component().into_iter().map(|l| q.index_of(l)).collect::<Result<_>>()?;
        g.sort_unstable();
        g
    };
    let diameter = component_diameter(q, &adj, &giant);
    let d_prime = params.d_prime.unwrap_or((2 * diameter.max(1)) as f64 / ln_n);
    let clock = PhaseClock::from_d_prime(t_steps, d_prime, n)?;
    let bins = bin_count(params.b, n, t_steps);
    let mut tables: Vec<BinTable> = (0..n).map(|_| BinTable::new(bins, params.c0, n)).collect();

    let mut strings: Vec<StringMsg> = Vec::new();
    let mut valid: Vec<bool> = Vec::new();
    let mut own = vec![None; n];
    for (i, m) in phase1_minima(q, &clock, r_prev, params.string_bytes, seed).into_iter().enumerate() {
        if let Some(m) = m {
            own[i] = Some(strings.len());
            valid.push(true);
            strings.push(m);
        }
    }
    let good_min = own.iter().flatten().copied().min_by_key(|&i| strings[i].t);
    let mut scheduled: BTreeMap<u64, Vec<(u32, u32, u32)>> = BTreeMap::new();
    for inj in injections {
        let p = clock.phase(inj.step);
        if !matches!(p, Some(Phase::Two) | Some(Phase::Three)) {
            return Err(Error::InvalidParameter(format!("injection at step {} outside Phases 2-3", inj.step)));
        }
        for m in &inj.strings {
            let idx = strings.len() as u32;
            valid.push(m.verify(r_prev));
            strings.push(m.clone());
            for &t in &inj.targets {
                let to = q.index_of(t)? as u32;
                scheduled.entry(inj.step).or_default().push((to, u32::MAX, idx));
            }
        }
    }

    let sizes: Vec<u64> = q.groups().iter().map(|g| g.size() as u64).collect();
    let mut messages = 0u64;
    let mut cost = 0u64;
    let mut chosen = vec![None; n];
    let start = clock.phase1_end() + 1;
    let mut inbox: Vec<(u32, u32, u32)> = (0..n).filter_map(|i| own[i].map(|s| (i as u32, u32::MAX, s as u32))).collect();
    for step in start..=clock.phase3_end() {
        if let Some(extra) = scheduled.remove(&step) {
            inbox.extend(extra);
        }
        inbox.sort_unstable();
        let mut next = Vec::new();
        for &(to, from, s) in &inbox {
            let u = to as usize;
            if q.is_red(u) {
                continue;
            }
            if tables[u].offer(&strings[s as usize], s as usize, valid[s as usize]) == Offer::Forward {
                for &v in &adj[u] {
                    if v != from {
                        next.push((v, to, s));
                        messages += 1;
                        cost += sizes[u] * sizes[v as usize];
                    }
                }
            }
        }
        inbox = next;
        if step == clock.phase2_end() {
            for (w, c) in chosen.iter_mut().enumerate() {
                if !q.is_red(w) {
                    *c = tables[w].minimum().map(|(_, i)| i);
                }
            }
        }
    }

    let limit = (params.d0 * ln_n).floor().max(1.0) as usize;
    let solution_sets = (0..n)
        .map(|w| {
            if q.is_red(w) {
                None
            } else {
                assemble_solution_set(&tables[w], limit, chosen[w]).ok()
            }
        })
        .collect();
    Ok(GossipOutcome {
        clock,
        d_prime,
        diameter,
        strings,
        giant,
        chosen,
        solution_sets,
        solution_limit: limit,
        messages,
        gossip_cost: cost,
        max_forwards: tables.iter().map(BinTable::forwards).max().unwrap_or(0),
        forward_cap: tables[0].cap() as u64 * bins as u64,
        good_min,
    })
}

/// Delayed release per `behavior`: the adversary's smallest strings reach a u.a.r. half
/// of the blue groups at the chosen step.
pub fn delayed_release(q: &GroupGraph, behavior: GossipBehavior, clock: &PhaseClock, units: u64, keep: usize, r_prev: &[u8], bytes: usize, seed: u64) -> Result<Vec<Injection>> {
    let GossipBehavior::DelayRelease { steps_before_phase2_end } = behavior else {
        return Ok(Vec::new());
    };
    let step = clock.phase2_end().checked_sub(steps_before_phase2_end).filter(|&s| s > clock.phase1_end()).ok_or_else(|| {
        Error::InvalidParameter(format!("release {steps_before_phase2_end} steps before Phase 2 ends falls outside Phase 2"))
    })?;
    let origin = IdPoint(0);
    let strings = adversary_strings(units, step, keep, r_prev, bytes, origin, seed);
    let blue: Vec<IdPoint> = (0..q.len()).filter(|&i| !q.is_red(i)).map(|i| q.group(i).leader).collect();
    let mut rng = stream(seed, "gossip-targets", 0);
    let mut targets: Vec<IdPoint> = sample(&mut rng, blue.len(), blue.len() / 2).into_iter().map(|i| blue[i]).collect();
    targets.sort_unstable();
    Ok(vec![Injection { step, strings, targets }])
}

/// Total gossip messages weighted by the `|G_a|·|G_b|` member factor.
pub fn count_gossip_messages(outcome: &GossipOutcome) -> u64 {
    outcome.gossip_cost
}

/// `κ̂ = cost / (n · ln T · ln³ n)`.
pub fn fitted_kappa(cost: u64, n: usize, t_steps: u64) -> f64 {
    let ln_n = (n as f64).ln();
    cost as f64 / (n as f64 * (t_steps as f64).ln() * ln_n.powi(3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Allegiance, ColoringMode, Group, GroupRules, Member};
    use crate::hashing::GraphTag;
    use crate::input_graph::InputGraph;
    use crate::ring::RingSet;
    use std::sync::Arc;

    fn graph(n: usize, p_f: f64, seed: u64) -> GroupGraph {
        let ring = RingSet::random(n, &mut stream(seed, "gossip-ring", 0));
        let base = Arc::new(InputGraph::build(ring).unwrap());
        let rules = GroupRules::for_n(n, 8.0, 24.0, 0.05, 2.0);
        let mut q = GroupGraph::with_hashed_membership(base, GraphTag::G1, &rules, |_| Allegiance::Good).unwrap();
        q.mark_colors(ColoringMode::Synthetic { p_f }, &mut stream(seed, "gossip-color", 0)).unwrap();
        q
    }

    fn t_of(f: f64) -> IdPoint {
        IdPoint::from_fraction(f)
    }

    #[test]
    fn bin_index_examples() {
        assert_eq!(bin_index(t_of(0.3), 40), 2);
        assert_eq!(bin_index(t_of(0.5), 40), 1);
        assert_eq!(bin_index(t_of(1.5 / 1024.0), 40), 10);
        assert_eq!(bin_index(IdPoint(0), 40), 40);
        assert_eq!(bin_index(t_of(1.0 / 1024.0), 5), 5);
    }

    fn msg(t: f64) -> StringMsg {
        StringMsg {
            s: vec![0; 8],
            t: t_of(t),
            origin: IdPoint(1),
        }
    }

    #[test]
    fn offer_rules() {
        let mut tab = BinTable::new(16, 1.0, 8);
        assert_eq!(tab.cap(), 2);
        assert_eq!(tab.offer(&msg(0.3), 0, true), Offer::Forward);
        assert_eq!(tab.offer(&msg(0.3), 1, true), Offer::Drop);
        assert_eq!(tab.offer(&msg(0.28), 2, true), Offer::Forward);
        assert_eq!(tab.counter(2), 2);
        assert_eq!(tab.offer(&msg(0.26), 3, true), Offer::Drop);
        assert_eq!(tab.counter(2), 2);
        assert_eq!(tab.offer(&msg(0.6), 4, true), Offer::Forward);
        assert_eq!(tab.offer(&msg(0.01), 5, false), Offer::Drop);
        assert_eq!(tab.flagged(), &[IdPoint(1)]);
        assert_eq!(tab.minimum().unwrap().1, 3);
    }

    #[test]
    fn tampered_output_fails_verification() {
        let r = vec![7u8; 8];
        let m = StringMsg::generate(vec![1; 8], &r, IdPoint(3));
        assert!(m.verify(&r));
        let forged = StringMsg { t: IdPoint(1), ..m };
        assert!(!forged.verify(&r));
    }

    #[test]
    fn solution_set_assembly() {
        let mut tab = BinTable::new(16, 4.0, 1024);
        assert!(matches!(assemble_solution_set(&tab, 3, None), Err(Error::NoStringsObserved)));
        for (i, t) in [0.6, 0.3, 0.01, 0.2, 0.004].iter().enumerate() {
            tab.offer(&msg(*t), i, true);
        }
        let r = assemble_solution_set(&tab, 3, None).unwrap();
        assert_eq!(r.strings, vec![4, 2, 3]);
        assert!(r.outputs.windows(2).all(|w| w[0] < w[1]));
        let all = assemble_solution_set(&tab, 5, None).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.strings[0], 4);
    }

    #[test]
    fn phase_clock_partitions_half_epoch() {
        let c = PhaseClock::new(400, 30).unwrap();
        assert_eq!(c.phase1_end(), 140);
        assert_eq!(c.phase(140), Some(Phase::One));
        assert_eq!(c.phase(141), Some(Phase::Two));
        assert_eq!(c.phase(170), Some(Phase::Two));
        assert_eq!(c.phase(171), Some(Phase::Three));
        assert_eq!(c.phase(200), Some(Phase::Three));
        assert_eq!(c.phase(201), None);
        assert!(PhaseClock::new(100, 25).is_err());
    }

    #[test]
    fn path_flood_counts() {
        // four groups of sizes 1..4 in a line, one string from the end
        let ring = RingSet::new((1..=4).map(|i| IdPoint(i << 60)).collect()).unwrap();
        let base = Arc::new(InputGraph::build(ring.clone()).unwrap());
        let rules = GroupRules::for_n(4, 1.0, 2.0, 0.05, 2.0);
        let groups = (0..4)
            .map(|i| {
                let m = (0..=i).map(|_| Member { id: ring.get(i), allegiance: Allegiance::Good }).collect();
                Group::new(ring.get(i), m, &rules)
            })
            .collect();
        let q = GroupGraph::new(base, groups).unwrap();
        let adj = flood_neighbors(&q);
        assert!(adj.iter().all(|a| a.len() == 3));
        assert_eq!(component_diameter(&q, &adj, &[0, 1, 2, 3]), 1);
    }

    #[test]
    fn zero_strings_zero_messages() {
        let q = graph(64, 1.0, 1);
        let out = run_gossip(&q, &GossipParams::default(), 400, &[0; 8], &[], 1).unwrap();
        assert_eq!(out.messages, 0);
        assert_eq!(count_gossip_messages(&out), 0);
        assert!(out.giant.is_empty());
    }

    #[test]
    fn honest_run_agrees_on_global_min() {
        let q = graph(256, 0.0, 2);
        let r = vec![5u8; 8];
        let out = run_gossip(&q, &GossipParams::default(), 1024, &r, &[], 2).unwrap();
        // centralized minimum, recomputed from scratch
        let clock = out.clock;
        let mut best: Option<IdPoint> = None;
        for i in 0..q.len() {
            let mut rng = stream(2, "gossip-generate", i as u64);
            for _ in 0..clock.phase1_end() {
                let t = string_output(&random_string(8, &mut rng), &r);
                best = Some(best.map_or(t, |b| b.min(t)));
            }
        }
        assert_eq!(out.giant.len(), 256);
        for w in 0..256 {
            assert_eq!(out.strings[out.chosen[w].unwrap()].t, best.unwrap());
        }
        assert_eq!(out.agreement_violations(), 0);
        assert!(out.max_solution_size() <= out.solution_limit);
        assert!(out.max_forwards as u64 <= out.forward_cap);
    }

    #[test]
    fn late_release_splits_choice_but_not_solution_sets() {
        let q = graph(256, 0.0, 3);
        let r = vec![9u8; 8];
        let honest = run_gossip(&q, &GossipParams::default(), 1024, &r, &[], 3).unwrap();
        let floor = honest.strings[honest.good_min.unwrap()].t;
        let mut rng = stream(3, "smaller", 0);
        let planted = loop {
            let m = StringMsg::generate(random_string(8, &mut rng), &r, IdPoint(0));
            if m.t < floor {
                break m;
            }
        };
        let targets: Vec<IdPoint> = (0..128).map(|i| q.group(2 * i).leader).collect();
        let inj = Injection {
            step: honest.clock.phase2_end(),
            strings: vec![planted],
            targets,
        };
        let out = run_gossip(&q, &GossipParams::default(), 1024, &r, &[inj], 3).unwrap();
        assert_eq!(out.distinct_chosen(), 2);
        assert_eq!(out.agreement_violations(), 0);
        assert!(out.good_min_everywhere());
    }

    #[test]
    fn injections_outside_phases_rejected() {
        let q = graph(64, 0.0, 4);
        let inj = Injection {
            step: 1,
            strings: Vec::new(),
            targets: Vec::new(),
        };
        assert!(run_gossip(&q, &GossipParams::default(), 400, &[0; 8], &[inj], 4).is_err());
    }

    #[test]
    fn delayed_release_schedule() {
        let q = graph(64, 0.1, 5);
        let clock = PhaseClock::new(400, 20).unwrap();
        let inj = delayed_release(&q, GossipBehavior::DelayRelease { steps_before_phase2_end: 0 }, &clock, 3, 4, &[0; 8], 8, 5).unwrap();
        assert_eq!(inj[0].step, clock.phase2_end());
        assert_eq!(inj[0].strings.len(), 4);
        assert!(inj[0].strings.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(inj[0].targets.iter().all(|&t| !q.is_red(q.index_of(t).unwrap())));
        assert!(delayed_release(&q, GossipBehavior::None, &clock, 3, 4, &[0; 8], 8, 5).unwrap().is_empty());
        assert!(delayed_release(&q, GossipBehavior::DelayRelease { steps_before_phase2_end: 25 }, &clock, 3, 4, &[0; 8], 8, 5).is_err());
    }
}
