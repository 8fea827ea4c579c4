//! Experiment orchestration: configuration, the five experiments, checks and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::adversary::{AdversaryStrategy, PowBehavior};
use crate::epochs::{EpochConfig, EpochState, GraphMode};
use crate::error::{Error, Result};
use crate::gossip::{delayed_release, fitted_kappa, run_gossip, GossipParams, PhaseClock};
use crate::group::{Allegiance, ColoringMode, GroupGraph, GroupRules};
use crate::hashing::GraphTag;
use crate::input_graph::InputGraph;
use crate::oracle::{chernoff_group_failure, size_groups_for_target};
use crate::pow::{adversary_generate, calibrate_tau, chi_square_uniform, precompute_attack, random_string, ComputeBudget, HashMode, PuzzleParams};
use crate::ring::{IdPoint, RingSet};
use crate::seed::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Experiment> {
        match s.to_ascii_lowercase().as_str() {
            "e1" => Ok(Experiment::E1),
            "e2" => Ok(Experiment::E2),
            "e3" => Ok(Experiment::E3),
            "e4" => Ok(Experiment::E4),
            "e5" => Ok(Experiment::E5),
            _ => Err(Error::Config(format!("unknown experiment {s:?}, expected e1..e5"))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::E1 => "e1",
            Experiment::E2 => "e2",
            Experiment::E3 => "e3",
            Experiment::E4 => "e4",
            Experiment::E5 => "e5",
        };
        f.write_str(s)
    }
}

/// Half-open seed range `a..b`; a bare `a` is the single seed `a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.end).collect()
    }
}

impl FromStr for SeedRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<SeedRange> {
        let bad = || Error::Config(format!("bad seed range {s:?}, expected a..b"));
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let a: u64 = s.trim().parse().map_err(|_| bad())?;
                (a, a + 1)
            }
        };
        if end <= start {
            return Err(Error::Config(format!("empty seed range {s:?}")));
        }
        Ok(SeedRange { start, end })
    }
}

impl Serialize for SeedRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}..{}", self.start, self.end))
    }
}

impl<'de> Deserialize<'de> for SeedRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SeedRange, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    /// `"worst"` or `"passive"`.
    Preset(String),
    Custom(AdversaryStrategy),
}

impl StrategySpec {
    pub fn resolve(&self) -> Result<AdversaryStrategy> {
        match self {
            StrategySpec::Preset(p) if p == "worst" => Ok(AdversaryStrategy::worst()),
            StrategySpec::Preset(p) if p == "passive" => Ok(AdversaryStrategy::passive()),
            StrategySpec::Preset(p) => Err(Error::Config(format!("unknown adversary preset {p:?}"))),
            StrategySpec::Custom(s) => Ok(*s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    /// `τ = 2 / (rate · T)`.
    Calibrated,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialColoring {
    Organic,
    AllBlue,
}

/// Flat experiment configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub beta: f64,
    pub delta: f64,
    pub d1: f64,
    pub d2: f64,
    /// Target exponent: when set, `d1` is sized so that a group is bad w.p. at most `ln^{-k} n`.
    pub k: Option<f64>,
    /// Epoch length; defaults to `4n`.
    #[serde(rename = "T")]
    pub t_steps: Option<u64>,
    pub epochs: u64,
    pub c0: f64,
    pub d0: f64,
    pub b: f64,
    pub tau_policy: TauPolicy,
    pub tau: Option<f64>,
    pub pow_rate: f64,
    pub ell: f64,
    pub epsilon: f64,
    pub adversary: StrategySpec,
    pub locality: f64,
    pub early_departure: f64,
    pub initial_coloring: InitialColoring,
    pub p_f: Vec<f64>,
    pub search_trials: usize,
    pub chi_square_bins: usize,
    pub seeds: Option<SeedRange>,
    pub experiment: Option<Experiment>,
    pub out: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            n: 1024,
            beta: 0.05,
            delta: 4.0,
            d1: 8.0,
            d2: 24.0,
            k: None,
            t_steps: None,
            epochs: 3,
            c0: 4.0,
            d0: 4.0,
            b: 1.0,
            tau_policy: TauPolicy::Calibrated,
            tau: None,
            pow_rate: 1.0,
            ell: 1.0,
            epsilon: 0.1,
            adversary: StrategySpec::Preset("worst".into()),
            locality: 2.0,
            early_departure: 0.5,
            initial_coloring: InitialColoring::Organic,
            p_f: vec![0.005, 0.01, 0.02],
            search_trials: 20_000,
            chi_square_bins: 64,
            seeds: None,
            experiment: None,
            out: None,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SimConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        SimConfig::from_json(&text)
    }

    pub fn t_steps(&self) -> u64 {
        self.t_steps.unwrap_or(4 * self.n as u64)
    }

    pub fn effective_d1(&self) -> Result<f64> {
        match self.k {
            None => Ok(self.d1),
            Some(k) => {
                let target = (self.n as f64).ln().powf(-k);
                Ok(size_groups_for_target(self.beta, self.delta, 0.0, target, self.n)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .d1)
            }
        }
    }

    pub fn tau(&self) -> Result<f64> {
        match (self.tau_policy, self.tau) {
            (TauPolicy::Calibrated, _) => calibrate_tau(self.t_steps(), self.pow_rate).map_err(|e| Error::Config(e.to_string())),
            (TauPolicy::Fixed, Some(t)) if t > 0.0 && t < 1.0 => Ok(t),
            (TauPolicy::Fixed, t) => Err(Error::Config(format!("fixed tau policy needs tau in (0, 1), got {t:?}"))),
        }
    }

    pub fn epoch_config(&self, mode: GraphMode) -> Result<EpochConfig> {
        let mut c = EpochConfig::new(self.n, self.beta, self.delta);
        c.d1 = self.effective_d1()?;
        c.d2 = self.d2;
        c.t_steps = self.t_steps();
        c.mode = mode;
        c.strategy = self.adversary.resolve()?;
        c.locality = self.locality;
        c.early_departure = self.early_departure;
        Ok(c)
    }

    pub fn puzzle(&self) -> Result<PuzzleParams> {
        let mut p = PuzzleParams::calibrated(self.n, self.t_steps(), self.pow_rate, self.ell, self.epsilon)
            .map_err(|e| Error::Config(e.to_string()))?;
        p.tau = self.tau()?;
        Ok(p)
    }

    pub fn gossip_params(&self) -> GossipParams {
        GossipParams {
            b: self.b,
            c0: self.c0,
            d0: self.d0,
            string_bytes: crate::pow::string_bytes(self.n, self.ell),
            d_prime: None,
        }
    }

    /// Every check that can fail before a trial starts.
    pub fn validate(&self) -> Result<()> {
        if self.n < 16 {
            return Err(Error::Config(format!("n = {} is below 16", self.n)));
        }
        self.epoch_config(GraphMode::Dual)?.validate()?;
        self.tau()?;
        for &p in &self.p_f {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p_f = {p} outside [0, 1]")));
            }
        }
        if self.search_trials == 0 || self.chi_square_bins < 2 {
            return Err(Error::Config("search_trials must be positive and chi_square_bins at least 2".into()));
        }
        if !(self.c0 >= 1.0 && self.d0 > 0.0 && self.b >= 1.0) {
            return Err(Error::Config(format!("need c0 >= 1, d0 > 0, b >= 1; got {}, {}, {}", self.c0, self.d0, self.b)));
        }
        if !(self.pow_rate > 0.0 && self.ell > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("pow_rate, ell and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One stage of one trial: a `p_f` value, an epoch, or a PoW window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub stage: u64,
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Row {
    fn new(stage: u64, label: impl Into<String>) -> Row {
        Row {
            stage,
            label: label.into(),
            metrics: BTreeMap::new(),
        }
    }

    fn set(&mut self, key: &str, v: f64) -> &mut Row {
        self.metrics.insert(key.to_string(), v);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub experiment: Experiment,
    pub seed: u64,
    pub rows: Vec<Row>,
}

impl TrialResult {
    pub fn metric(&self, stage: u64, key: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).and_then(|r| r.get(key))
    }
}

/// Run `experiment` on every seed; results come back in seed order.
pub fn run_experiment(config: &SimConfig, experiment: Experiment, seeds: &[u64]) -> Result<Vec<TrialResult>> {
    config.validate()?;
    seeds.par_iter().map(|&seed| run_trial(config, experiment, seed)).collect()
}

pub fn run_trial(config: &SimConfig, experiment: Experiment, seed: u64) -> Result<TrialResult> {
    let rows = match experiment {
        Experiment::E1 => static_trial(config, seed)?,
        Experiment::E2 => epoch_trial(config, GraphMode::Dual, seed)?,
        Experiment::E3 => pow_trial(config, seed)?,
        Experiment::E4 => gossip_trial(config, seed)?,
        Experiment::E5 => ablation_trial(config, seed)?,
    };
    Ok(TrialResult { experiment, seed, rows })
}

fn all_good_graph(n: usize, rules: &GroupRules, seed: u64) -> Result<GroupGraph> {
    let ring = RingSet::random(n, &mut stream(seed, "e1-ring", 0));
    let base = Arc::new(InputGraph::build(ring)?);
    GroupGraph::with_hashed_membership(base, GraphTag::G1, rules, |_| Allegiance::Good)
}

/// E1: static search failure under synthetic red groups.
fn static_trial(config: &SimConfig, seed: u64) -> Result<Vec<Row>> {
    let rules = GroupRules::for_n(config.n, config.effective_d1()?, config.d2, config.beta, config.delta);
    let mut q = all_good_graph(config.n, &rules, seed)?;
    // congestion factor: expected number of groups on a search path
    let factor: f64 = q.base().measure_congestion(config.search_trials, derive_seed(seed, "e1-congestion", 0))?.frequency.iter().sum();
    let mut rows = Vec::new();
    for (i, &p_f) in config.p_f.iter().enumerate() {
        q.mark_colors(ColoringMode::Synthetic { p_f }, &mut stream(seed, "e1-color", i as u64))?;
        let red = q.red_count();
        let m = if red == q.len() { None } else { Some(q.measure(config.search_trials, derive_seed(seed, "e1-search", i as u64))?) };
        let mut row = Row::new(i as u64, format!("p_f={p_f}"));
        row.set("p_f", p_f).set("red_fraction", q.red_fraction()).set("congestion_factor", factor);
        if let Some(m) = m {
            row.set("x_hat", m.x_hat())
                .set("x_hat_unconditional", m.x_hat_unconditional())
                .set("sum_red_rho", m.sum_red_rho())
                .set("max_rho", m.max_rho())
                .set("failures", m.failures as f64)
                .set("red_traversals", m.red_traversals() as f64)
                .set("mean_cost", m.mean_cost());
            if p_f > 0.0 {
                row.set("x_over_p_f", m.x_hat() / p_f);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn epoch_rows(config: &SimConfig, mode: GraphMode, seed: u64) -> Result<Vec<Row>> {
    let mut s = EpochState::new(config.epoch_config(mode)?, seed)?;
    if config.initial_coloring == InitialColoring::AllBlue {
        s.recolor_old(ColoringMode::Synthetic { p_f: 0.0 })?;
    }
    let mut rows = Vec::new();
    let init = s.old_red_fractions();
    let mut row = Row::new(0, "initial");
    row.set("red_fraction_g1", init[0]).set("max_red_fraction", init.iter().copied().fold(0.0, f64::max));
    if let Some(&g2) = init.get(1) {
        row.set("red_fraction_g2", g2);
    }
    rows.push(row);
    for e in 1..=config.epochs {
        let share = s.active().bad_key_share();
        let slots = s.rules().slots() as u64;
        let threshold = (1.0 + config.delta) * config.beta;
        let oracle = chernoff_group_failure(slots, share.min(1.0), threshold)?.exact;
        let r = s.run_epoch()?;
        let mut row = Row::new(e, format!("epoch {}", r.epoch));
        row.set("red_fraction_g1", r.red_fraction_g1)
            .set("max_red_fraction", r.max_red_fraction())
            .set("bad_fraction", r.bad_fraction)
            .set("bad_fraction_oracle", oracle)
            .set("bad_key_share", share)
            .set("slots", slots as f64)
            .set("confused_fraction", r.confused_fraction)
            .set("search_failure", r.search_failure)
            .set("mean_memberships", r.mean_memberships)
            .set("max_memberships", r.max_memberships as f64)
            .set("mean_distinct_groups", r.mean_distinct_groups)
            .set("mean_links", r.mean_links)
            .set("erroneous_accepts_mean", r.erroneous_accepts_mean)
            .set("spam_requests", r.spam_requests as f64)
            .set("early_departures", r.early_departures as f64)
            .set("msg_group_internal", r.msg_totals.group_internal as f64)
            .set("msg_inter_group", r.msg_totals.inter_group as f64)
            .set("msg_total", r.msg_totals.total() as f64);
        if let Some(g2) = r.red_fraction_g2 {
            row.set("red_fraction_g2", g2);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// E2: dual-graph epochs.
fn epoch_trial(config: &SimConfig, mode: GraphMode, seed: u64) -> Result<Vec<Row>> {
    epoch_rows(config, mode, seed)
}

/// E5: single-graph epochs next to dual-graph epochs on the same seed.
fn ablation_trial(config: &SimConfig, seed: u64) -> Result<Vec<Row>> {
    let single = epoch_rows(config, GraphMode::Single, seed)?;
    let dual = epoch_rows(config, GraphMode::Dual, seed)?;
    Ok(single
        .into_iter()
        .zip(dual)
        .map(|(s, d)| {
            let mut row = Row::new(s.stage, s.label.clone());
            for (k, v) in &s.metrics {
                row.set(&format!("single_{k}"), *v);
            }
            for (k, v) in &d.metrics {
                row.set(&format!("dual_{k}"), *v);
            }
            row
        })
        .collect())
}

/// E3: adversary certificates over a `1.1 · T/2` window, uniformity, and the
/// single-hash ablation with small inputs.
fn pow_trial(config: &SimConfig, seed: u64) -> Result<Vec<Row>> {
    let params = config.puzzle()?;
    let budget = ComputeBudget::for_population(config.n, config.beta);
    let r = random_string(params.string_bytes, &mut stream(seed, "e3-string", 0));
    let window = (1.1 * params.t_steps as f64 / 2.0).floor() as u64;
    let honest = adversary_generate(&budget, window, &r, 1, &params, PowBehavior::HonestRate, HashMode::Composed, derive_seed(seed, "e3-honest", 0))?;
    let biased = adversary_generate(&budget, window, &r, 1, &params, PowBehavior::BiasSmallOutputs, HashMode::SingleHash, derive_seed(seed, "e3-biased", 0))?;
    let composed_bias = adversary_generate(&budget, window, &r, 1, &params, PowBehavior::BiasSmallOutputs, HashMode::Composed, derive_seed(seed, "e3-biased", 0))?;
    let hoard = precompute_attack(&budget, 2, true, &params, derive_seed(seed, "e3-hoard", 0))?;
    let bound = (1.0 + params.epsilon) * config.beta * config.n as f64 * 1.1;
    let mut row = Row::new(0, "window 1.1T/2");
    row.set("adversary_units", budget.adversary_units as f64)
        .set("window_steps", window as f64)
        .set("tau", params.tau)
        .set("certificates", honest.len() as f64)
        .set("bound", bound)
        .set("expected", budget.adversary_units as f64 * window as f64 * params.attempts_per_unit_step * params.tau)
        .set("biased_single_certificates", biased.len() as f64)
        .set("biased_composed_certificates", composed_bias.len() as f64)
        .set("hoard_released", hoard.released as f64)
        .set("hoard_accepted", hoard.accepted as f64);
    let bins = config.chi_square_bins;
    for (key, set) in [("chi_p_composed", &honest), ("chi_p_biased_single", &biased), ("chi_p_biased_composed", &composed_bias)] {
        if set.len() >= bins {
            let ids: Vec<IdPoint> = set.iter().map(|c| c.id).collect();
            row.set(key, chi_square_uniform(&ids, bins)?.p_value);
        }
    }
    Ok(vec![row])
}

/// Adversary IDs of every E3 trial, honest composed and biased single-hash, pooled.
pub fn pooled_pow_ids(config: &SimConfig, seeds: &[u64]) -> Result<(Vec<IdPoint>, Vec<IdPoint>)> {
    let params = config.puzzle()?;
    let budget = ComputeBudget::for_population(config.n, config.beta);
    let window = (1.1 * params.t_steps as f64 / 2.0).floor() as u64;
    let per: Vec<(Vec<IdPoint>, Vec<IdPoint>)> = seeds
        .par_iter()
        .map(|&seed| {
            let r = random_string(params.string_bytes, &mut stream(seed, "e3-string", 0));
            let h = adversary_generate(&budget, window, &r, 1, &params, PowBehavior::HonestRate, HashMode::Composed, derive_seed(seed, "e3-honest", 0))?;
            let b = adversary_generate(&budget, window, &r, 1, &params, PowBehavior::BiasSmallOutputs, HashMode::SingleHash, derive_seed(seed, "e3-biased", 0))?;
            Ok((h.iter().map(|c| c.id).collect(), b.iter().map(|c| c.id).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().fold((Vec::new(), Vec::new()), |(mut a, mut b), (h, s)| {
        a.extend(h);
        b.extend(s);
        (a, b)
    }))
}

fn gossip_cost(config: &SimConfig, n: usize, t_steps: u64, seed: u64) -> Result<(crate::gossip::GossipOutcome, GroupGraph)> {
    let mut c = config.clone();
    c.n = n;
    let s = EpochState::new(c.epoch_config(GraphMode::Dual)?, seed)?;
    let q = s.old_graphs()[0].clone();
    let params = c.gossip_params();
    let r = random_string(params.string_bytes, &mut stream(seed, "e4-string", 0));
    // the release schedule needs the clock, which depends on the measured diameter
    let probe = run_gossip(&q, &params, t_steps, &r, &[], derive_seed(seed, "e4-gossip", n as u64))?;
    let strategy = c.adversary.resolve()?;
    let units = (c.beta * n as f64).floor() as u64;
    let keep = (c.c0 * (n as f64).ln()).floor() as usize;
    let clock: PhaseClock = probe.clock;
    let inj = delayed_release(&q, strategy.gossip_behavior, &clock, units, keep, &r, params.string_bytes, derive_seed(seed, "e4-adversary", n as u64))?;
    if inj.is_empty() {
        return Ok((probe, q));
    }
    let out = run_gossip(&q, &params, t_steps, &r, &inj, derive_seed(seed, "e4-gossip", n as u64))?;
    Ok((out, q))
}

/// E4: string propagation on the epoch-1 graph with the configured release schedule,
/// plus a run at `n/4` for calibrating `κ`.
fn gossip_trial(config: &SimConfig, seed: u64) -> Result<Vec<Row>> {
    let n = config.n;
    let t = config.t_steps();
    let (out, q) = gossip_cost(config, n, t, seed)?;
    let n_cal = (n / 4).max(64);
    let t_cal = (t / 4).max(64);
    let (cal, _) = gossip_cost(config, n_cal, t_cal, seed)?;
    let mut row = Row::new(0, "epoch 1");
    row.set("n", n as f64)
        .set("t_steps", t as f64)
        .set("red_fraction", q.red_fraction())
        .set("giant_size", out.giant.len() as f64)
        .set("diameter", out.diameter as f64)
        .set("d_prime", out.d_prime)
        .set("phase1_end", out.clock.phase1_end() as f64)
        .set("phase2_end", out.clock.phase2_end() as f64)
        .set("phase3_end", out.clock.phase3_end() as f64)
        .set("agreement_violations", out.agreement_violations() as f64)
        .set("agreement", if out.agreement_violations() == 0 { 1.0 } else { 0.0 })
        .set("distinct_chosen", out.distinct_chosen() as f64)
        .set("good_min_everywhere", if out.good_min_everywhere() { 1.0 } else { 0.0 })
        .set("max_solution_size", out.max_solution_size() as f64)
        .set("solution_limit", out.solution_limit as f64)
        .set("messages", out.messages as f64)
        .set("gossip_cost", out.gossip_cost as f64)
        .set("kappa", fitted_kappa(out.gossip_cost, n, t))
        .set("kappa_calibration", fitted_kappa(cal.gossip_cost, n_cal, t_cal))
        .set("max_forwards", out.max_forwards as f64)
        .set("forward_cap", out.forward_cap as f64);
    Ok(vec![row])
}

/// One pass/fail line of an acceptance check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn share(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Whether every epoch's new graphs stay within twice the red fraction of the graphs
/// in place at epoch 1.
pub fn no_accumulation(rows: &[Row], prefix: &str) -> bool {
    let key = format!("{prefix}max_red_fraction");
    let Some(base) = rows.iter().find(|r| r.stage == 0).and_then(|r| r.get(&key)) else {
        return false;
    };
    rows.iter().filter(|r| r.stage > 0).all(|r| r.get(&key).is_some_and(|v| v <= 2.0 * base))
}

/// Whether the constructed graphs' red fraction rises strictly from epoch to epoch.
pub fn strictly_increasing(rows: &[Row], prefix: &str) -> bool {
    let key = format!("{prefix}max_red_fraction");
    let v: Vec<f64> = rows.iter().filter(|r| r.stage > 0).filter_map(|r| r.get(&key)).collect();
    v.len() >= 2 && v.windows(2).all(|w| w[0] < w[1])
}

/// Pass/fail lines for `--check` mode.
pub fn check(config: &SimConfig, experiment: Experiment, results: &[TrialResult]) -> Result<Vec<CheckLine>> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let total = results.len();
    let mut lines = Vec::new();
    match experiment {
        Experiment::E1 => {
            let union = results.iter().all(|t| t.rows.iter().all(|r| r.get("failures").unwrap_or(0.0) <= r.get("red_traversals").unwrap_or(0.0)));
            lines.push(CheckLine {
                name: "e1 union bound".into(),
                passed: union,
                detail: "failed searches never exceed red traversals".into(),
            });
            for (i, p) in config.p_f.iter().enumerate() {
                let ok = results
                    .iter()
                    .filter(|t| match (t.metric(i as u64, "x_over_p_f"), t.metric(i as u64, "congestion_factor")) {
                        (Some(x), Some(f)) => x <= 1.5 * f,
                        _ => *p == 0.0,
                    })
                    .count();
                lines.push(CheckLine {
                    name: format!("e1 factor p_f={p}"),
                    passed: share(ok, total) >= 0.95,
                    detail: format!("{ok}/{total} seeds with X/p_f <= 1.5 x congestion factor"),
                });
            }
        }
        Experiment::E2 => {
            let ok = results.iter().filter(|t| no_accumulation(&t.rows, "")).count();
            lines.push(CheckLine {
                name: "e2 no accumulation".into(),
                passed: share(ok, total) >= 0.9,
                detail: format!("{ok}/{total} seeds within 2x the epoch-1 red fraction"),
            });
        }
        Experiment::E3 => {
            let ok = results.iter().filter(|t| t.metric(0, "certificates") <= t.metric(0, "bound")).count();
            lines.push(CheckLine {
                name: "e3 certificate bound".into(),
                passed: share(ok, total) >= 0.99,
                detail: format!("{ok}/{total} seeds within (1+eps)·beta·n·1.1"),
            });
            let seeds: Vec<u64> = results.iter().map(|t| t.seed).collect();
            let (honest, biased) = pooled_pow_ids(config, &seeds)?;
            let h = chi_square_uniform(&honest, config.chi_square_bins)?;
            lines.push(CheckLine {
                name: "e3 uniform IDs".into(),
                passed: h.passes(0.01),
                detail: format!("pooled chi-square p = {:.4} over {} IDs", h.p_value, honest.len()),
            });
            let fails = match chi_square_uniform(&biased, config.chi_square_bins) {
                Ok(b) => !b.passes(0.01),
                Err(_) => false,
            };
            lines.push(CheckLine {
                name: "e3 single-hash ablation".into(),
                passed: fails,
                detail: format!("biased single-hash IDs ({}) fail uniformity: {fails}", biased.len()),
            });
        }
        Experiment::E4 => {
            let agree = results.iter().all(|t| t.metric(0, "agreement_violations") == Some(0.0));
            lines.push(CheckLine {
                name: "e4 agreement".into(),
                passed: agree,
                detail: "every chosen string sits in every giant-component solution set".into(),
            });
            let size = results.iter().all(|t| t.metric(0, "max_solution_size") <= t.metric(0, "solution_limit"));
            lines.push(CheckLine {
                name: "e4 solution size".into(),
                passed: size,
                detail: "|R| <= d0 ln n".into(),
            });
            let kappa = results.iter().filter_map(|t| t.metric(0, "kappa_calibration")).fold(0.0, f64::max);
            let worst = results.iter().filter_map(|t| t.metric(0, "kappa")).fold(0.0, f64::max);
            lines.push(CheckLine {
                name: "e4 message bound".into(),
                passed: worst <= 1.5 * kappa,
                detail: format!("kappa at n = {}: {worst:.2}, calibrated at n/4: {kappa:.2}", config.n),
            });
        }
        Experiment::E5 => {
            let dual = results.iter().filter(|t| no_accumulation(&t.rows, "dual_")).count();
            let single = results.iter().filter(|t| strictly_increasing(&t.rows, "single_")).count();
            lines.push(CheckLine {
                name: "e5 single graph accumulates".into(),
                passed: share(single, total) >= 0.7 && share(dual, total) >= 0.9,
                detail: format!("single strictly increasing in {single}/{total}; dual within 2x in {dual}/{total}"),
            });
        }
    }
    Ok(lines)
}

/// Where `emit_report` put its files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub jsonl: PathBuf,
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub digest: PathBuf,
}

/// JSON-lines for every trial, one CSV row per trial stage, a percentile summary and a
/// text digest.
pub fn emit_report(results: &[TrialResult], dir: &Path) -> Result<ReportPaths> {
    let first = results.first().ok_or(Error::EmptyResults)?;
    fs::create_dir_all(dir)?;
    let stem = first.experiment.to_string();
    let paths = ReportPaths {
        jsonl: dir.join(format!("{stem}.jsonl")),
        csv: dir.join(format!("{stem}.csv")),
        summary: dir.join(format!("{stem}_summary.csv")),
        digest: dir.join(format!("{stem}_digest.txt")),
    };
    let mut jsonl = String::new();
    for t in results {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    fs::write(&paths.jsonl, jsonl)?;

    let keys: BTreeSet<&str> = results.iter().flat_map(|t| t.rows.iter().flat_map(|r| r.metrics.keys().map(String::as_str))).collect();
    let mut csv = String::from("seed,stage,label");
    for k in &keys {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push('\n');
    for t in results {
        for r in &t.rows {
            csv.push_str(&format!("{},{},{}", t.seed, r.stage, r.label));
            for k in &keys {
                csv.push(',');
                if let Some(v) = r.metrics.get(*k) {
                    csv.push_str(&v.to_string());
                }
            }
            csv.push('\n');
        }
    }
    fs::write(&paths.csv, csv)?;

    let mut grouped: BTreeMap<(u64, &str, &str), Vec<f64>> = BTreeMap::new();
    for t in results {
        for r in &t.rows {
            for (k, v) in &r.metrics {
                grouped.entry((r.stage, r.label.as_str(), k.as_str())).or_default().push(*v);
            }
        }
    }
    let mut summary = String::from("stage,label,metric,count,mean,p5,p50,p95\n");
    let mut digest = format!("experiment {stem}: {} trials, seeds {}..={}\n", results.len(), first.seed, results[results.len() - 1].seed);
    let mut last_stage = None;
    for ((stage, label, metric), vals) in &grouped {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let mut d = Data::new(vals.clone());
        let (p5, p50, p95) = (d.percentile(5), d.percentile(50), d.percentile(95));
        summary.push_str(&format!("{stage},{label},{metric},{},{mean},{p5},{p50},{p95}\n", vals.len()));
        if last_stage != Some(*stage) {
            digest.push_str(&format!("\n[{label}]\n"));
            last_stage = Some(*stage);
        }
        digest.push_str(&format!("  {metric:<28} mean {mean:<12.6} p5 {p5:<12.6} p50 {p50:<12.6} p95 {p95:.6}\n"));
    }
    fs::write(&paths.summary, summary)?;
    let mut f = fs::File::create(&paths.digest)?;
    f.write_all(digest.as_bytes())?;
    Ok(paths)
}

/// Sized parameters printed by `tinygroups params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizedParams {
    pub n: usize,
    pub beta: f64,
    pub k: f64,
    pub delta: f64,
    pub d1: f64,
    pub group_size: u64,
    pub bad_group_probability: f64,
    pub tau: f64,
    pub t_steps: u64,
    pub d_prime: f64,
    pub phase1_end: u64,
    pub phase2_end: u64,
    pub phase3_end: u64,
}

/// Size `d1` for `p_f ≤ ln^{-k} n`, calibrate `τ` and lay out the gossip phases with
/// `d′ = 2·diameter / ln n` measured on an all-blue graph of `n` groups.
pub fn sized_params(beta: f64, n: usize, k: f64, delta: f64, t_steps: Option<u64>, seed: u64) -> Result<SizedParams> {
    let target = (n as f64).ln().powf(-k);
    let sizing = size_groups_for_target(beta, delta, 0.0, target, n)?;
    let t = t_steps.unwrap_or(4 * n as u64);
    let tau = calibrate_tau(t, 1.0)?;
    let rules = GroupRules::for_n(n, sizing.d1, sizing.d1 * 3.0, beta, delta);
    let q = all_good_graph(n, &rules, seed)?;
    let adj = crate::gossip::flood_neighbors(&q);
    let sources: Vec<usize> = (0..n).step_by((n / 32).max(1)).collect();
    let diameter = sampled_eccentricity(&adj, &sources);
    let d_prime = (2 * diameter.max(1)) as f64 / (n as f64).ln();
    let clock = PhaseClock::from_d_prime(t, d_prime, n)?;
    Ok(SizedParams {
        n,
        beta,
        k,
        delta,
        d1: sizing.d1,
        group_size: sizing.m,
        bad_group_probability: sizing.tail.exact,
        tau,
        t_steps: t,
        d_prime,
        phase1_end: clock.phase1_end(),
        phase2_end: clock.phase2_end(),
        phase3_end: clock.phase3_end(),
    })
}

fn sampled_eccentricity(adj: &[Vec<u32>], sources: &[usize]) -> u64 {
    sources
        .iter()
        .map(|&s| {
            let mut dist = vec![u32::MAX; adj.len()];
            dist[s] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            let mut far = 0;
            while let Some(u) = queue.pop_front() {
                far = far.max(dist[u]);
                for &v in &adj[u] {
                    if dist[v as usize] == u32::MAX {
                        dist[v as usize] = dist[u] + 1;
                        queue.push_back(v as usize);
                    }
                }
            }
            far as u64
        })
        .max()
        .unwrap_or(0)
}
