//! Epochs: the two old group graphs build two new ones through searches, with
//! request verification, churn under the departure cap, and ID lifecycles.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{act_on_search, select_id_subset, spam_requests, AdversarialResponse, AdversaryStrategy, ClaimIndex, SpamRequest};
use crate::error::{Error, Result};
use crate::group::{Allegiance, ColoringMode, Group, GroupGraph, GroupRules, Member, MessageLedger};
use crate::hashing::{membership_point, GraphTag};
use crate::input_graph::{InputGraph, Overlay};
use crate::pow::{expire_ids, Lifecycle};
use crate::ring::{estimate_loglog_n, IdPoint, RingSet};
use crate::seed::{stream, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Dual,
    /// Ablation: one old graph, single searches, single verification.
    Single,
}

impl GraphMode {
    pub fn tags(self) -> &'static [GraphTag] {
        match self {
            GraphMode::Dual => &GraphTag::BOTH,
            GraphMode::Single => &GraphTag::BOTH[..1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    pub n: usize,
    pub beta: f64,
    pub delta: f64,
    pub d1: f64,
    pub d2: f64,
    pub t_steps: u64,
    pub mode: GraphMode,
    pub strategy: AdversaryStrategy,
    /// `c''` in the `c'' ln n / n` window inside which a request is plausible.
    pub locality: f64,
    /// Share of expiring good IDs that try to leave before their epoch ends.
    pub early_departure: f64,
}

impl EpochConfig {
    pub fn new(n: usize, beta: f64, delta: f64) -> EpochConfig {
        EpochConfig {
            n,
            beta,
            delta,
            d1: 8.0,
            d2: 24.0,
            t_steps: 4 * n as u64,
            mode: GraphMode::Dual,
            strategy: AdversaryStrategy::worst(),
            locality: 2.0,
            early_departure: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lnln = (self.n as f64).ln().ln();
        if !(self.beta >= 0.0 && self.beta < 0.5) {
            return Err(Error::Config(format!("beta = {} must lie in [0, 1/2)", self.beta)));
        }
        if !(self.d1 < self.d2) {
            return Err(Error::Config(format!("d1 = {} must be below d2 = {}", self.d1, self.d2)));
        }
        if (1.0 + self.delta) * self.beta >= 0.5 {
            return Err(Error::Config(format!(
                "(1+delta)·beta = {} leaves no good majority",
                (1.0 + self.delta) * self.beta
            )));
        }
        if !(self.d1 * lnln >= 3.0) {
            return Err(Error::Config(format!(
                "d1·ln ln n = {:.3} is below 3 at n = {}",
                self.d1 * lnln,
                self.n
            )));
        }
        if self.t_steps < 2 {
            return Err(Error::Config("T must be at least 2 steps".into()));
        }
        if !(0.0..=1.0).contains(&self.early_departure) {
            return Err(Error::Config(format!("early_departure = {} outside [0, 1]", self.early_departure)));
        }
        Ok(())
    }

    /// `ε' = 1 − 2(1+δ)β`.
    pub fn eps_prime(&self) -> f64 {
        1.0 - 2.0 * (1.0 + self.delta) * self.beta
    }

    fn window(&self) -> u64 {
        let n = self.n as f64;
        IdPoint::from_fraction((self.locality * n.ln() / n).min(0.5)).0
    }
}

/// One generation of IDs with the adversary's share marked.
#[derive(Clone, Debug)]
pub struct Population {
    ring: RingSet,
    bad: Vec<bool>,
    bad_ring: RingSet,
}

impl Population {
    /// `n` u.a.r. IDs of which `⌊βn⌋` belong to the adversary, who then fields the
    /// subset its rule selects.
    pub fn generate(n: usize, beta: f64, strategy: &AdversaryStrategy, seed: u64, generation: u64) -> Result<Population> {
        let mut rng = stream(seed, "population", generation);
        let mut seen = BTreeSet::new();
        let mut draws = Vec::with_capacity(n);
        while draws.len() < n {
            let x = IdPoint::random(&mut rng);
            if seen.insert(x) {
                draws.push(x);
            }
        }
        let n_bad = (beta * n as f64).floor() as usize;
        let (bad, good) = draws.split_at(n_bad);
        let fielded = select_id_subset(bad, strategy.id_subset_rule, &mut stream(seed, "adversary-ids", generation));
        Population::from_parts(good.to_vec(), fielded)
    }

    pub fn from_parts(good: Vec<IdPoint>, bad: Vec<IdPoint>) -> Result<Population> {
        let bad_ring = RingSet::new(bad.clone())?;
        let mut all = good;
        all.extend(bad);
        let ring = RingSet::new(all)?;
        let flags = ring.points().iter().map(|x| bad_ring.contains(*x)).collect();
        Ok(Population { ring, bad: flags, bad_ring })
    }

    pub fn ring(&self) -> &RingSet {
        &self.ring
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_bad(&self, index: usize) -> bool {
        self.bad[index]
    }

    pub fn allegiance(&self, index: usize) -> Allegiance {
        if self.bad[index] {
            Allegiance::Bad
        } else {
            Allegiance::Good
        }
    }

    pub fn bad_ring(&self) -> &RingSet {
        &self.bad_ring
    }

    pub fn good_count(&self) -> usize {
        self.bad.iter().filter(|b| !**b).count()
    }

    /// Share of the key space owned by bad IDs.
    pub fn bad_key_share(&self) -> f64 {
        let pts = self.ring.points();
        (0..pts.len())
            .filter(|&i| self.bad[i])
            .map(|i| pts[self.ring.predecessor_index(i)].distance_to(pts[i]) as f64 / 18_446_744_073_709_551_616.0)
            .map(|d| if d == 0.0 { 1.0 } else { d })
            .sum()
    }
}

/// Groups over `base` whose slot `i` is the true successor of `h_tag(w, i)` among `members`.
pub fn direct_graph(base: Arc<InputGraph>, members: &Population, tag: GraphTag, rules: &GroupRules) -> Result<GroupGraph> {
    let ids = base.ids().clone();
    let groups = (0..ids.len())
        .map(|i| {
            let w = ids.get(i);
            let list = (1..=rules.slots() as u32)
                .map(|s| {
                    let j = members.ring.successor_index(membership_point(tag, w, s));
                    Member {
                        id: members.ring.get(j),
                        allegiance: members.allegiance(j),
                    }
                })
                .collect();
            Group::new(w, list, rules)
        })
        .collect();
    GroupGraph::new(base, groups)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub searches: u64,
    pub failed: u64,
    pub cost: u64,
}

impl SearchStats {
    fn absorb(&mut self, o: &SearchStats) {
        self.searches += o.searches;
        self.failed += o.failed;
        self.cost += o.cost;
    }
}

/// Run one search in `q` and report the resolved old-ring index on success.
fn run_search(q: &GroupGraph, origin: Option<usize>, key: IdPoint, stats: &mut SearchStats, path: &mut Vec<usize>) -> Result<Option<usize>> {
    stats.searches += 1;
    let Some(o) = origin else {
        stats.failed += 1;
        return Ok(None);
    };
    if q.is_red(o) {
        stats.failed += 1;
        return Ok(None);
    }
    let probe = q.probe_path(o, key, path)?;
    stats.cost += q.path_cost(path);
    if probe.success {
        Ok(Some(probe.end))
    } else {
        stats.failed += 1;
        Ok(None)
    }
}

/// Candidate for slot point `x` from searches in each old graph; on disagreement the
/// candidate closest clockwise from `x` wins.
pub fn locate_candidate(
    old: &[GroupGraph],
    members: &Population,
    origins: &[Option<usize>],
    x: IdPoint,
    strategy: &AdversaryStrategy,
    stats: &mut SearchStats,
) -> Result<Option<usize>> {
    let mut path = Vec::with_capacity(16);
    let mut best: Option<usize> = None;
    for (q, &o) in old.iter().zip(origins) {
        let found = match run_search(q, o, x, stats, &mut path)? {
            Some(i) => Some(i),
            None => match act_on_search(strategy.search_behavior, false, x, members.bad_ring()) {
                Some(AdversarialResponse::Misrouted { answer }) => members.ring.index_of(answer),
                _ => None,
            },
        };
        best = match (best, found) {
            (Some(a), Some(b)) => {
                let (da, db) = (x.distance_to(members.ring.get(a)), x.distance_to(members.ring.get(b)));
                Some(if db < da { b } else { a })
            }
            (a, b) => a.or(b),
        };
    }
    Ok(best)
}

/// `u` (old-ring index) checks the slot point `x` by searching from its own group in
/// every old graph; accepted iff some search returns `u`. A red own group counts as a
/// failed search, and failed searches are answered by the adversary: with
/// `failure_accepts` it claims `u`, otherwise it names someone else.
pub fn verify_membership(old: &[GroupGraph], u: usize, x: IdPoint, failure_accepts: bool, stats: &mut SearchStats) -> Result<bool> {
    let mut path = Vec::with_capacity(16);
    for q in old {
        match run_search(q, Some(u), x, stats, &mut path)? {
            Some(end) if end == u => return Ok(true),
            Some(_) => {}
            None if failure_accepts => return Ok(true),
            None => {}
        }
    }
    Ok(false)
}

/// Neighbor-side check by a new ID through its bootstrap origins. `truth` is whether
/// the claim actually holds.
fn verify_neighbor(old: &[GroupGraph], origins: &[Option<usize>], key: IdPoint, truth: bool, failure_accepts: bool, stats: &mut SearchStats) -> Result<bool> {
    let mut path = Vec::with_capacity(16);
    for (q, &o) in old.iter().zip(origins) {
        match run_search(q, o, key, stats, &mut path)? {
            Some(_) if truth => return Ok(true),
            Some(_) => {}
            None if failure_accepts => return Ok(true),
            None => {}
        }
    }
    Ok(false)
}

/// Members of `G_w` for one new graph.
pub fn build_membership(
    old: &[GroupGraph],
    members: &Population,
    w: IdPoint,
    tag: GraphTag,
    origins: &[Option<usize>],
    rules: &GroupRules,
    strategy: &AdversaryStrategy,
    stats: &mut SearchStats,
) -> Result<Vec<Member>> {
    let mut out = Vec::with_capacity(rules.slots());
    for s in 1..=rules.slots() as u32 {
        let x = membership_point(tag, w, s);
        let Some(u) = locate_candidate(old, members, origins, x, strategy, stats)? else {
            continue;
        };
        // bad candidates always accept; good ones verify
        if members.is_bad(u) || verify_membership(old, u, x, false, stats)? {
            out.push(Member {
                id: members.ring.get(u),
                allegiance: members.allegiance(u),
            });
        }
    }
    Ok(out)
}

/// Link outcome for `G_w` (new-ring index `k`): number of neighbors in `L_w` that
/// were not both located and accepted.
pub fn build_neighbors(
    old: &[GroupGraph],
    new_base: &InputGraph,
    k: usize,
    boots: &[Vec<Option<usize>>],
    stats: &mut SearchStats,
) -> Result<usize> {
    let mut path = Vec::with_capacity(16);
    let mut missing = 0;
    for &u in new_base.neighbor_indices(k) {
        let u = u as usize;
        let key = new_base.ids().get(u);
        let mut located = false;
        for (q, &o) in old.iter().zip(&boots[k]) {
            if run_search(q, o, key, stats, &mut path)?.is_some() {
                located = true;
                break;
            }
        }
        if !located || !verify_neighbor(old, &boots[u], key, true, false, stats)? {
            missing += 1;
        }
    }
    Ok(missing)
}

/// Bootstrap set: union of several u.a.r. groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSample {
    pub groups: Vec<IdPoint>,
    pub members: usize,
    pub good_members: usize,
}

impl BootstrapSample {
    pub fn good_majority(&self) -> bool {
        2 * self.good_members > self.members
    }
}

/// `⌈c_b · ln n / ln ln n⌉` u.a.r. groups of `q`, members pooled.
pub fn sample_bootstrap(q: &GroupGraph, c_b: f64, rng: &mut SimRng) -> Result<BootstrapSample> {
    let n = q.len() as f64;
    let needed = (c_b * n.ln() / n.ln().ln()).ceil().max(1.0) as usize;
    if q.len() < needed {
        return Err(Error::TooFewGroups {
            needed,
            available: q.len(),
        });
    }
    let picked = rand::seq::index::sample(rng, q.len(), needed).into_vec();
    let mut pool: BTreeMap<IdPoint, Allegiance> = BTreeMap::new();
    for &i in &picked {
        for m in &q.group(i).members {
            pool.insert(m.id, m.allegiance);
        }
    }
    let good_members = pool.values().filter(|a| **a == Allegiance::Good).count();
    Ok(BootstrapSample {
        groups: picked.iter().map(|&i| q.group(i).leader).collect(),
        members: pool.len(),
        good_members,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub step: u64,
    /// An expiring ID leaving early, if one could do so under the cap.
    pub departure: Option<IdPoint>,
    pub arrival: IdPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnSchedule {
    pub events: Vec<ChurnEvent>,
    /// Per old graph, per group: good departures scheduled and the allowed maximum.
    pub good_departures: Vec<Vec<u32>>,
    pub caps: Vec<Vec<u32>>,
}

impl ChurnSchedule {
    /// Arrivals at u.a.r. steps in the second half of the epoch, each paired with an
    /// early departure of an expiring good ID when every old group it belongs to stays
    /// within `⌊(ε'/2)·|G|⌋` good departures. Bad IDs stay put.
    pub fn generate(joining: &Population, expiring: &Population, old: &[GroupGraph], eps_prime: f64, early: f64, t_steps: u64, rng: &mut SimRng) -> ChurnSchedule {
        let caps: Vec<Vec<u32>> = old
            .iter()
            .map(|q| q.groups().iter().map(|g| ((eps_prime / 2.0) * g.size() as f64).floor() as u32).collect())
            .collect();
        let mut good_departures: Vec<Vec<u32>> = old.iter().map(|q| vec![0; q.len()]).collect();
        let mut homes: BTreeMap<IdPoint, Vec<(usize, usize)>> = BTreeMap::new();
        for (g, q) in old.iter().enumerate() {
            for (i, grp) in q.groups().iter().enumerate() {
                for m in &grp.members {
                    let v = homes.entry(m.id).or_default();
                    if v.last() != Some(&(g, i)) {
                        v.push((g, i));
                    }
                }
            }
        }
        let mut arrivals: Vec<(u64, IdPoint)> = joining
            .ring
            .points()
            .iter()
            .map(|&a| (rng.random_range(t_steps / 2..t_steps), a))
            .collect();
        arrivals.sort_unstable();
        let mut leavers: Vec<IdPoint> = (0..expiring.len()).filter(|&i| !expiring.is_bad(i)).map(|i| expiring.ring.get(i)).collect();
        leavers.shuffle(rng);
        leavers.truncate((early * leavers.len() as f64).round() as usize);
        let mut departures = Vec::new();
        for id in leavers {
            let slots = homes.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            if slots.iter().all(|&(g, i)| good_departures[g][i] < caps[g][i]) {
                for &(g, i) in slots {
                    good_departures[g][i] += 1;
                }
                departures.push(id);
            }
        }
        let events = arrivals
            .into_iter()
            .enumerate()
            .map(|(k, (step, arrival))| ChurnEvent {
                step,
                departure: departures.get(k).copied(),
                arrival,
            })
            .collect();
        ChurnSchedule {
            events,
            good_departures,
            caps,
        }
    }

    pub fn within_caps(&self) -> bool {
        self.good_departures
            .iter()
            .zip(&self.caps)
            .all(|(d, c)| d.iter().zip(c).all(|(a, b)| a <= b))
    }

    pub fn departures(&self) -> usize {
        self.events.iter().filter(|e| e.departure.is_some()).count()
    }
}

/// Per-epoch measurements of the new graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub red_fraction_g1: f64,
    pub red_fraction_g2: Option<f64>,
    pub bad_fraction: f64,
    pub confused_fraction: f64,
    /// Share of build searches in the old graphs that hit a red group.
    pub search_failure: f64,
    pub mean_memberships: f64,
    pub max_memberships: usize,
    pub mean_distinct_groups: f64,
    pub mean_links: f64,
    pub erroneous_accepts_mean: f64,
    pub spam_requests: u64,
    pub early_departures: usize,
    pub msg_totals: MessageLedger,
}

impl EpochReport {
    pub fn max_red_fraction(&self) -> f64 {
        self.red_fraction_g1.max(self.red_fraction_g2.unwrap_or(0.0))
    }

    pub fn red_fractions(&self) -> Vec<f64> {
        std::iter::once(self.red_fraction_g1).chain(self.red_fraction_g2).collect()
    }
}

#[derive(Clone, Debug)]
struct Build {
    joined: Vec<bool>,
    /// `[tag][leader]`
    members: Vec<Vec<Vec<Member>>>,
    /// `[tag][leader][old graph]`
    boots: Vec<Vec<Vec<Option<usize>>>>,
    next_event: usize,
    stats: SearchStats,
}

/// Census of per-ID state at the end of an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateCensus {
    /// Member slots per graph held by a good ID. An ID filling two slots of one group counts twice.
    pub mean_memberships: f64,
    pub max_memberships: usize,
    /// Distinct groups per graph a good ID belongs to.
    pub mean_distinct_groups: f64,
    /// Links to and from a good leader's group, per graph.
    pub mean_links: f64,
    pub erroneous_memberships_mean: f64,
    pub erroneous_neighbors_mean: f64,
    pub spam_requests: u64,
}

pub struct EpochState {
    config: EpochConfig,
    seed: u64,
    epoch: u64,
    step: u64,
    rules: GroupRules,
    passive: Arc<Population>,
    active: Arc<Population>,
    joining: Arc<Population>,
    old: Vec<GroupGraph>,
    new_base: Arc<InputGraph>,
    build: Build,
    lifecycle: BTreeMap<IdPoint, Lifecycle>,
    churn: ChurnSchedule,
    departed: BTreeSet<IdPoint>,
    ledger: MessageLedger,
}

impl EpochState {
    /// Epoch 1, with old graphs constructed directly and correctly linked.
    pub fn new(config: EpochConfig, seed: u64) -> Result<EpochState> {
        config.validate()?;
        let gen = |g: u64| Population::generate(config.n, config.beta, &config.strategy, seed, g).map(Arc::new);
        let (passive, active, joining) = (gen(0)?, gen(1)?, gen(2)?);
        let rules = Self::rules_for(&config, &active)?;
        let base = Arc::new(InputGraph::build(active.ring.clone())?);
        let old = config
            .mode
            .tags()
            .iter()
            .map(|&t| direct_graph(base.clone(), &passive, t, &rules))
            .collect::<Result<Vec<_>>>()?;
        let mut lifecycle = BTreeMap::new();
        for (pop, state) in [(&passive, Lifecycle::Passive), (&active, Lifecycle::Active), (&joining, Lifecycle::Joining)] {
            for &id in pop.ring.points() {
                lifecycle.insert(id, state);
            }
        }
        let mut s = EpochState {
            new_base: Arc::new(InputGraph::build(joining.ring.clone())?),
            build: Build {
                joined: Vec::new(),
                members: Vec::new(),
                boots: Vec::new(),
                next_event: 0,
                stats: SearchStats::default(),
            },
            churn: ChurnSchedule {
                events: Vec::new(),
                good_departures: Vec::new(),
                caps: Vec::new(),
            },
            config,
            seed,
            epoch: 1,
            step: 0,
            rules,
            passive,
            active,
            joining,
            old,
            lifecycle,
            departed: BTreeSet::new(),
            ledger: MessageLedger::default(),
        };
        s.open_epoch();
        Ok(s)
    }

    fn rules_for(config: &EpochConfig, pop: &Population) -> Result<GroupRules> {
        let loglog_n = estimate_loglog_n(&pop.ring.adjacent_distances())?;
        Ok(GroupRules {
            loglog_n,
            d1: config.d1,
            d2: config.d2,
            beta: config.beta,
            delta: config.delta,
        })
    }

    fn open_epoch(&mut self) {
        let tags = self.config.mode.tags().len();
        let n_new = self.joining.len();
        self.build = Build {
            joined: vec![false; n_new],
            members: vec![vec![Vec::new(); n_new]; tags],
            boots: vec![vec![Vec::new(); n_new]; tags],
            next_event: 0,
            stats: SearchStats::default(),
        };
        let mut rng = stream(self.seed, "churn", self.epoch);
        self.churn = ChurnSchedule::generate(
            &self.joining,
            &self.passive,
            &self.old,
            self.config.eps_prime(),
            self.config.early_departure,
            self.config.t_steps,
            &mut rng,
        );
        self.departed.clear();
        self.ledger = MessageLedger::default();
    }

    pub fn config(&self) -> &EpochConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rules(&self) -> &GroupRules {
        &self.rules
    }

    pub fn old_graphs(&self) -> &[GroupGraph] {
        &self.old
    }

    pub fn active(&self) -> &Population {
        &self.active
    }

    pub fn passive(&self) -> &Population {
        &self.passive
    }

    pub fn joining(&self) -> &Population {
        &self.joining
    }

    pub fn churn(&self) -> &ChurnSchedule {
        &self.churn
    }

    pub fn lifecycle(&self, id: IdPoint) -> Lifecycle {
        self.lifecycle.get(&id).copied().unwrap_or(Lifecycle::Expired)
    }

    pub fn departed(&self) -> &BTreeSet<IdPoint> {
        &self.departed
    }

    /// Recolor the old graphs, e.g. all blue for isolating membership effects.
    pub fn recolor_old(&mut self, mode: ColoringMode) -> Result<()> {
        for (g, q) in self.old.iter_mut().enumerate() {
            q.mark_colors(mode, &mut stream(self.seed, "recolor", self.epoch * 4 + g as u64))?;
        }
        Ok(())
    }

    /// Red fractions of the current old graphs.
    pub fn old_red_fractions(&self) -> Vec<f64> {
        self.old.iter().map(GroupGraph::red_fraction).collect()
    }

    /// Remove a departing ID from the groups it serves; a group whose leader leaves
    /// stays, and one left without members is a null link.
    pub fn apply_departure(&mut self, id: IdPoint) {
        self.departed.insert(id);
    }

    /// Members of old group `index` in graph `g` still present.
    pub fn live_members(&self, g: usize, index: usize) -> usize {
        self.old[g].group(index).members.iter().filter(|m| !self.departed.contains(&m.id)).count()
    }

    pub fn is_null_link(&self, g: usize, index: usize) -> bool {
        self.live_members(g, index) == 0
    }

    /// Process every join and departure scheduled up to `step`.
    pub fn step_to(&mut self, step: u64) -> Result<()> {
        if step >= self.config.t_steps || step < self.step {
            return Err(Error::InvalidParameter(format!(
                "step {step} outside [{}, {})",
                self.step, self.config.t_steps
            )));
        }
        let start = self.build.next_event;
        let end = start + self.churn.events[start..].partition_point(|e| e.step <= step);
        let batch: Vec<ChurnEvent> = self.churn.events[start..end].to_vec();
        let mut rng = stream(self.seed, "bootstrap", self.epoch * 1_000_003 + start as u64);
        let tags = self.config.mode.tags();
        let mut work = Vec::with_capacity(batch.len());
        for e in &batch {
            if let Some(d) = e.departure {
                self.apply_departure(d);
            }
            let k = self.joining.ring.index_of(e.arrival).ok_or(Error::UnknownId(e.arrival))?;
            for t in 0..tags.len() {
                self.build.boots[t][k] = self.old.iter().map(|q| q.sample_blue(&mut rng).ok()).collect();
            }
            work.push(k);
        }
        let (old, active, joining, rules, strategy, boots) =
            (&self.old, &*self.active, &*self.joining, &self.rules, &self.config.strategy, &self.build.boots);
        let built: Vec<(usize, Vec<Vec<Member>>, SearchStats)> = work
            .par_iter()
            .map(|&k| {
                let mut stats = SearchStats::default();
                let w = joining.ring.get(k);
                let lists = tags
                    .iter()
                    .enumerate()
                    .map(|(t, &tag)| build_membership(old, active, w, tag, &boots[t][k], rules, strategy, &mut stats))
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, lists, stats))
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, lists, stats) in built {
            for (t, l) in lists.into_iter().enumerate() {
                self.ledger.group_internal += l.len() as u64;
                self.build.members[t][k] = l;
            }
            self.build.joined[k] = true;
            self.build.stats.absorb(&stats);
        }
        self.build.next_event = end;
        self.step = step;
        Ok(())
    }

    fn complete(&self) -> bool {
        self.step + 1 == self.config.t_steps && self.build.joined.iter().all(|&j| j)
    }

    /// Final link state, colors, spam and census for the new graphs.
    fn finalize(&mut self) -> Result<(Vec<GroupGraph>, EpochReport)> {
        let tags = self.config.mode.tags();
        let n_new = self.joining.len();
        let (old, base, boots) = (&self.old, &*self.new_base, &self.build.boots);
        let mut stats = self.build.stats;
        let mut graphs = Vec::new();
        let mut link_cost = 0u64;
        let mut links_present = 0u64;
        for (t, &tag) in tags.iter().enumerate() {
            let missing: Vec<(usize, SearchStats)> = (0..n_new)
                .into_par_iter()
                .map(|k| {
                    let mut s = SearchStats::default();
                    let m = build_neighbors(old, base, k, &boots[t], &mut s)?;
                    Ok((m, s))
                })
                .collect::<Result<Vec<_>>>()?;
            let groups: Vec<Group> = (0..n_new)
                .map(|k| {
                    let mut g = Group::new(self.joining.ring.get(k), self.build.members[t][k].clone(), &self.rules);
                    g.confused = missing[k].0 > 0;
                    g.classify(&self.rules);
                    g
                })
                .collect();
            for (k, (m, s)) in missing.iter().enumerate() {
                stats.absorb(s);
                let deg = base.neighbor_indices(k).len();
                links_present += (deg - m) as u64;
                for &u in base.neighbor_indices(k) {
                    link_cost += (groups[k].size() * groups[u as usize].size()) as u64;
                }
            }
            let _ = tag;
            graphs.push(GroupGraph::new(self.new_base.clone(), groups)?);
        }
        self.ledger.inter_group += stats.cost + link_cost;
        let census = self.census(&graphs, links_present)?;
        let g = graphs.len() as f64;
        let report = EpochReport {
            epoch: self.epoch,
            red_fraction_g1: graphs[0].red_fraction(),
            red_fraction_g2: graphs.get(1).map(GroupGraph::red_fraction),
            bad_fraction: graphs.iter().map(GroupGraph::bad_fraction).sum::<f64>() / g,
            confused_fraction: graphs.iter().map(GroupGraph::confused_fraction).sum::<f64>() / g,
            search_failure: if stats.searches == 0 { 0.0 } else { stats.failed as f64 / stats.searches as f64 },
            mean_memberships: census.mean_memberships,
            max_memberships: census.max_memberships,
            mean_distinct_groups: census.mean_distinct_groups,
            mean_links: census.mean_links,
            erroneous_accepts_mean: census.erroneous_memberships_mean + census.erroneous_neighbors_mean,
            spam_requests: census.spam_requests,
            early_departures: self.churn.departures(),
            msg_totals: self.ledger,
        };
        Ok((graphs, report))
    }

    fn census(&mut self, graphs: &[GroupGraph], links_present: u64) -> Result<StateCensus> {
        let active = &*self.active;
        let mut per_id = vec![0usize; active.len()];
        let mut distinct = vec![0usize; active.len()];
        for q in graphs {
            for grp in q.groups() {
                for m in &grp.members {
                    if let Some(i) = active.ring.index_of(m.id) {
                        per_id[i] += 1;
                    }
                }
                let mut seen: Vec<IdPoint> = grp.members.iter().map(|m| m.id).collect();
                seen.sort_unstable();
                seen.dedup();
                for id in seen {
                    if let Some(i) = active.ring.index_of(id) {
                        distinct[i] += 1;
                    }
                }
            }
        }
        let good_active: Vec<usize> = (0..active.len()).filter(|&i| !active.is_bad(i)).collect();
        let g = graphs.len() as f64;
        let total: usize = good_active.iter().map(|&i| per_id[i]).sum();
        let mean_memberships = total as f64 / (good_active.len().max(1) as f64 * g);
        let mean_distinct_groups = good_active.iter().map(|&i| distinct[i]).sum::<usize>() as f64 / (good_active.len().max(1) as f64 * g);
        let max_memberships = good_active.iter().map(|&i| per_id[i]).max().unwrap_or(0);
        // each present link is state at both ends
        let good_joining = self.joining.good_count().max(1) as f64;
        let mean_links = 2.0 * links_present as f64 / (self.joining.len() as f64 * g) * (self.joining.len() as f64 / good_joining).min(1.0);
        let (err_m, err_n, volume) = self.spam()?;
        Ok(StateCensus {
            mean_memberships,
            max_memberships,
            mean_distinct_groups,
            mean_links,
            erroneous_memberships_mean: err_m as f64 / good_active.len().max(1) as f64,
            erroneous_neighbors_mean: err_n as f64 / good_joining,
            spam_requests: volume,
        })
    }

    /// Adversarial requests against good IDs; returns erroneous accepts (membership,
    /// neighbor) and the number of requests sent.
    fn spam(&mut self) -> Result<(u64, u64, u64)> {
        let spam = self.config.strategy.request_behavior;
        if !spam.memberships && !spam.neighbors {
            return Ok((0, 0, 0));
        }
        let (active, joining) = (&*self.active, &*self.joining);
        let bad_leaders: Vec<IdPoint> = joining.bad_ring().points().to_vec();
        let index = ClaimIndex::build(&bad_leaders, self.rules.slots() as u32, self.config.mode.tags());
        let m_targets: Vec<IdPoint> = (0..active.len()).filter(|&i| !active.is_bad(i)).map(|i| active.ring.get(i)).collect();
        let n_targets: Vec<IdPoint> = (0..joining.len()).filter(|&i| !joining.is_bad(i)).map(|i| joining.ring.get(i)).collect();
        let window = self.config.window();
        let mut rng = stream(self.seed, "adversary-spam", self.epoch);
        let requests = spam_requests(spam, &index, &m_targets, &n_targets, window, &mut rng);
        let (old, boots) = (&self.old, &self.build.boots[0]);
        let results: Vec<(bool, bool, SearchStats)> = requests
            .par_iter()
            .map(|r| {
                let mut s = SearchStats::default();
                let local = r.point() != r.target() && r.point().distance_to(r.target()) <= window;
                let (is_member, accepted) = match *r {
                    SpamRequest::Membership { target, point, .. } => {
                        let u = active.ring.index_of(target).ok_or(Error::UnknownId(target))?;
                        let legit = active.ring.successor_index(point) == u;
                        let acc = local && !legit && verify_membership(old, u, point, true, &mut s)?;
                        (true, acc)
                    }
                    SpamRequest::Neighbor { target, key, .. } => {
                        let u = joining.ring.index_of(target).ok_or(Error::UnknownId(target))?;
                        let legit = joining.ring.successor_index(key) == u;
                        let acc = local && !legit && verify_neighbor(old, &boots[u], key, false, true, &mut s)?;
                        (false, acc)
                    }
                };
                Ok((is_member, accepted, s))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stats = SearchStats::default();
        let (mut err_m, mut err_n) = (0u64, 0u64);
        for (is_member, acc, s) in &results {
            stats.absorb(s);
            match (is_member, acc) {
                (true, true) => err_m += 1,
                (false, true) => err_n += 1,
                _ => {}
            }
        }
        self.ledger.inter_group += stats.cost;
        Ok((err_m, err_n, requests.len() as u64))
    }

    /// Finish the epoch: finalize the new graphs, make them the old ones and open the next epoch.
    pub fn advance_epoch(&mut self) -> Result<EpochReport> {
        if !self.complete() {
            let pending = self.build.joined.iter().filter(|j| !**j).count();
            return Err(Error::EpochUnderrun(format!(
                "epoch {} at step {} of {} with {pending} joins pending",
                self.epoch, self.step, self.config.t_steps
            )));
        }
        let (graphs, report) = self.finalize()?;
        self.old = graphs;
        let next = Population::generate(self.config.n, self.config.beta, &self.config.strategy, self.seed, self.epoch + 2)?;
        self.passive = std::mem::replace(&mut self.active, std::mem::replace(&mut self.joining, Arc::new(next)));
        expire_ids(&mut self.lifecycle);
        for &id in self.joining.ring.points() {
            self.lifecycle.insert(id, Lifecycle::Joining);
        }
        self.rules = Self::rules_for(&self.config, &self.active)?;
        self.new_base = Arc::new(InputGraph::build(self.joining.ring.clone())?);
        self.epoch += 1;
        self.step = 0;
        self.open_epoch();
        Ok(report)
    }

    /// Run the rest of the current epoch and roll over.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        self.step_to(self.config.t_steps - 1)?;
        self.advance_epoch()
    }

    /// Red fractions of the initial graphs and reports for `epochs` constructed epochs.
    pub fn run(config: EpochConfig, seed: u64, epochs: u64) -> Result<(Vec<f64>, Vec<EpochReport>)> {
        let mut s = EpochState::new(config, seed)?;
        let initial = s.old_red_fractions();
        let reports = (0..epochs).map(|_| s.run_epoch()).collect::<Result<Vec<_>>>()?;
        Ok((initial, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{RequestSpam, SearchBehavior};
    use crate::group::Color;
    use crate::oracle::chernoff_group_failure;

    fn quiet(n: usize) -> EpochConfig {
        let mut c = EpochConfig::new(n, 0.05, 4.0);
        c.strategy = AdversaryStrategy::passive();
        c
    }

    #[test]
    fn config_guards() {
        assert!(EpochConfig::new(1024, 0.05, 4.0).validate().is_ok());
        let mut tiny = EpochConfig::new(1024, 0.05, 2.0);
        tiny.d1 = 0.5;
        assert!(matches!(tiny.validate(), Err(Error::Config(_))));
        let mut c = EpochConfig::new(1024, 0.05, 2.0);
        c.d1 = 30.0;
        assert!(c.validate().is_err());
        assert!(EpochConfig::new(1024, 0.2, 2.0).validate().is_err());
    }

    #[test]
    fn all_blue_membership_is_true_successors() {
        let mut s = EpochState::new(quiet(256), 1).unwrap();
        s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 }).unwrap();
        let mut stats = SearchStats::default();
        let active = s.active().clone();
        let w = s.joining().ring().get(17);
        let origins: Vec<Option<usize>> = vec![Some(3), Some(200)];
        for tag in GraphTag::BOTH {
            let got = build_membership(s.old_graphs(), &active, w, tag, &origins, s.rules(), &AdversaryStrategy::worst(), &mut stats).unwrap();
            let want: Vec<IdPoint> = (1..=s.rules().slots() as u32)
                .map(|i| {
                    let x = membership_point(tag, w, i);
                    *active.ring().points().iter().find(|p| **p >= x).unwrap_or(&active.ring().get(0))
                })
                .collect();
            assert_eq!(got.iter().map(|m| m.id).collect::<Vec<_>>(), want);
        }
        assert_eq!(stats.failed, 0);
    }

    fn tiny_old(red: &[bool]) -> (Vec<GroupGraph>, Population) {
        let good: Vec<IdPoint> = (0..64).map(|i| IdPoint::from_fraction(i as f64 / 64.0 + 0.001)).collect();
        let pop = Population::from_parts(good, Vec::new()).unwrap();
        let rules = GroupRules::for_n(64, 1.0, 2.0, 0.05, 2.0);
        let base = Arc::new(InputGraph::build(pop.ring().clone()).unwrap());
        let mut q1 = direct_graph(base.clone(), &pop, GraphTag::G1, &rules).unwrap();
        let mut q2 = direct_graph(base, &pop, GraphTag::G2, &rules).unwrap();
        for (i, &r) in red.iter().enumerate() {
            if r {
                q1.set_color(i, Color::Red);
                q2.set_color(i, Color::Red);
            }
        }
        (vec![q1, q2], pop)
    }

    #[test]
    fn verification_examples() {
        let (old, pop) = tiny_old(&[]);
        let x = IdPoint::from_fraction(0.3);
        let u = pop.ring().successor_index(x);
        let mut s = SearchStats::default();
        assert!(verify_membership(&old, u, x, false, &mut s).unwrap());
        assert!(!verify_membership(&old, (u + 5) % 64, x, false, &mut s).unwrap());
    }

    #[test]
    fn blocked_verification_rejects_true_successor() {
        let x = IdPoint::from_fraction(0.8);
        let (probe_old, pop) = tiny_old(&[]);
        let u = pop.ring().successor_index(x);
        let route = probe_old[0].base().route_indices(u, x).unwrap();
        // the successor's own group is the first hop; red it in both graphs
        let mut red = vec![false; 64];
        red[route[0]] = true;
        let (old, _) = tiny_old(&red);
        let mut s = SearchStats::default();
        assert!(!verify_membership(&old, u, x, false, &mut s).unwrap());
        // one graph clean is enough
        let mut mixed = old.clone();
        mixed[1].set_color(route[0], Color::Blue);
        assert!(verify_membership(&mixed, u, x, false, &mut s).unwrap());
    }

    #[test]
    fn misroute_loses_to_true_successor() {
        let good: Vec<IdPoint> = (0..60).map(|i| IdPoint::from_fraction(i as f64 / 60.0 + 0.002)).collect();
        let bad: Vec<IdPoint> = (0..4).map(|i| IdPoint::from_fraction(i as f64 / 4.0 + 0.0005)).collect();
        let pop = Population::from_parts(good, bad).unwrap();
        let rules = GroupRules::for_n(64, 1.0, 2.0, 0.05, 2.0);
        let base = Arc::new(InputGraph::build(pop.ring().clone()).unwrap());
        let clean = direct_graph(base.clone(), &pop, GraphTag::G1, &rules).unwrap();
        let mut dead = direct_graph(base, &pop, GraphTag::G2, &rules).unwrap();
        for i in 0..64 {
            if i != 0 {
                dead.set_color(i, Color::Red);
            }
        }
        let x = IdPoint::from_fraction(0.3);
        let strategy = AdversaryStrategy::worst();
        let mut s = SearchStats::default();
        let both = locate_candidate(&[clean.clone(), dead.clone()], &pop, &[Some(0), Some(0)], x, &strategy, &mut s).unwrap();
        assert_eq!(both, Some(pop.ring().successor_index(x)));
        let lone = locate_candidate(&[dead.clone()], &pop, &[Some(0)], x, &strategy, &mut s).unwrap().unwrap();
        let route = dead.base().route_indices(0, x).unwrap();
        if route.len() > 1 {
            assert!(pop.is_bad(lone));
        }
        let drop = AdversaryStrategy { search_behavior: SearchBehavior::Drop, ..strategy };
        if route.len() > 1 {
            assert_eq!(locate_candidate(&[dead], &pop, &[Some(0)], x, &drop, &mut s).unwrap(), None);
        }
    }

    #[test]
    fn links_with_all_blue_old_graphs_are_complete() {
        let mut s = EpochState::new(quiet(256), 2).unwrap();
        s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 }).unwrap();
        let report = s.run_epoch().unwrap();
        assert_eq!(report.confused_fraction, 0.0);
        assert_eq!(report.search_failure, 0.0);
    }

    #[test]
    fn lifecycle_rolls_and_expired_ids_never_rejoin() {
        let mut s = EpochState::new(quiet(256), 3).unwrap();
        let first_passive: Vec<IdPoint> = s.passive().ring().points().to_vec();
        let first_active: Vec<IdPoint> = s.active().ring().points().to_vec();
        s.run_epoch().unwrap();
        assert!(first_passive.iter().all(|&id| s.lifecycle(id) == Lifecycle::Expired));
        assert!(first_active.iter().all(|&id| s.lifecycle(id) == Lifecycle::Passive));
        // the graphs just built are old now: members were active, leaders were joining
        for q in s.old_graphs() {
            for g in q.groups() {
                assert_eq!(s.lifecycle(g.leader), Lifecycle::Active);
                for m in &g.members {
                    assert_eq!(s.lifecycle(m.id), Lifecycle::Passive);
                    assert!(!first_passive.contains(&m.id));
                }
            }
        }
        // same leader IDs in both graphs of the pair
        let (a, b) = (&s.old_graphs()[0], &s.old_graphs()[1]);
        assert!(Arc::ptr_eq(a.base(), b.base()));
    }

    #[test]
    fn underrun_is_an_error() {
        let mut s = EpochState::new(quiet(256), 4).unwrap();
        s.step_to(10).unwrap();
        assert!(matches!(s.advance_epoch(), Err(Error::EpochUnderrun(_))));
        assert!(s.step_to(5).is_err());
    }

    #[test]
    fn churn_respects_caps() {
        for seed in 0..5 {
            let mut c = quiet(256);
            c.early_departure = 1.0;
            let s = EpochState::new(c, seed).unwrap();
            let ch = s.churn();
            assert!(ch.within_caps());
            assert!(ch.departures() > 0);
            assert_eq!(ch.events.len(), s.joining().len());
            assert!(ch.events.windows(2).all(|w| w[0].step <= w[1].step));
            for e in &ch.events {
                assert!(e.step >= s.config().t_steps / 2 && e.step < s.config().t_steps);
                if let Some(d) = e.departure {
                    let i = s.passive().ring().index_of(d).unwrap();
                    assert!(!s.passive().is_bad(i));
                }
            }
        }
    }

    #[test]
    fn departures_leave_groups_standing() {
        let mut c = quiet(256);
        c.early_departure = 1.0;
        let mut s = EpochState::new(c, 9).unwrap();
        let leader = s.old_graphs()[0].group(0).leader;
        s.apply_departure(leader);
        assert!(s.old_graphs()[0].group_of(leader).is_ok());
        let members: Vec<IdPoint> = s.old_graphs()[0].group(1).members.iter().map(|m| m.id).collect();
        for m in members {
            s.apply_departure(m);
        }
        assert!(s.is_null_link(0, 1));
        assert!(!s.is_null_link(0, 2));
    }

    #[test]
    fn bootstrap_samples() {
        let s = EpochState::new(quiet(1024), 5).unwrap();
        let q = &s.old_graphs()[0];
        let mut rng = stream(5, "boot", 0);
        let c_b = 2.0;
        let ln = 1024f64.ln();
        for _ in 0..200 {
            let b = sample_bootstrap(q, c_b, &mut rng).unwrap();
            assert!(b.good_majority());
            assert!(b.members as f64 >= c_b * 8.0 * ln / 2.0);
            assert!(b.members as f64 <= c_b * 24.0 * 2.0 * ln);
        }
        let small = direct_graph(
            Arc::new(InputGraph::build(RingSet::random(4, &mut rng)).unwrap()),
            s.active(),
            GraphTag::G1,
            s.rules(),
        )
        .unwrap();
        assert!(matches!(sample_bootstrap(&small, 50.0, &mut rng), Err(Error::TooFewGroups { .. })));
    }

    #[test]
    fn goodness_tracks_binomial_tail() {
        let mut c = quiet(1024);
        c.delta = 2.0;
        let mut bad = 0usize;
        let mut total = 0usize;
        let mut oracle = 0.0;
        for seed in 0..6 {
            let mut s = EpochState::new(c.clone(), seed).unwrap();
            s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 }).unwrap();
            let share = s.active().bad_key_share();
            let m = s.rules().slots() as u64;
            let r = s.run_epoch().unwrap();
            bad += (r.bad_fraction * 2048.0).round() as usize;
            total += 2048;
            oracle += 2048.0 * chernoff_group_failure(m, share, 0.15).unwrap().exact;
        }
        let got = bad as f64 / total as f64;
        let want = oracle / total as f64;
        let sd = (want / total as f64).sqrt();
        assert!((got - want).abs() <= 4.0 * sd + 0.1 * want, "{got} vs {want}");
    }

    #[test]
    fn membership_census_is_order_log_log_n() {
        let c = quiet(1024);
        let lnln = (1024f64).ln().ln();
        let (lo, hi) = (c.d1 * lnln * 0.9, c.d2 * lnln * 1.1);
        let mut s = EpochState::new(c, 4).unwrap();
        s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 }).unwrap();
        let r = s.run_epoch().unwrap();
        assert!(r.mean_memberships >= lo && r.mean_memberships <= hi, "{} not in [{lo}, {hi}]", r.mean_memberships);
        assert!(r.mean_distinct_groups <= r.mean_memberships);
        assert!(r.max_memberships as f64 >= r.mean_memberships);
    }

    #[test]
    fn spam_is_rejected_on_clean_graphs() {
        let mut c = quiet(256);
        c.strategy.request_behavior = RequestSpam { memberships: true, neighbors: true, volume: 3 };
        let mut s = EpochState::new(c, 6).unwrap();
        s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 }).unwrap();
        let r = s.run_epoch().unwrap();
        assert!(r.spam_requests > 0);
        assert_eq!(r.erroneous_accepts_mean, 0.0);
    }

    #[test]
    fn same_seed_same_reports() {
        let a = EpochState::run(quiet(256), 7, 2).unwrap();
        let b = EpochState::run(quiet(256), 7, 2).unwrap();
        assert_eq!(a, b);
    }
}
