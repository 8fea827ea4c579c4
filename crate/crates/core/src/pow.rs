//! Proof-of-work IDs: puzzles over two composed hashes, threshold calibration,
//! certificate checks, expiry, and the adversary's generation rate.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::adversary::PowBehavior;
use crate::error::{Error, Result};
use crate::hashing::{hash_to_point, xor_bytes};
use crate::ring::IdPoint;
use crate::seed::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuzzleParams {
    pub tau: f64,
    /// Epoch length in steps.
    pub t_steps: u64,
    pub attempts_per_unit_step: f64,
    /// Length of σ and of the epoch strings, in bytes.
    pub string_bytes: usize,
    pub epsilon: f64,
}

impl PuzzleParams {
    /// Calibrated τ for `n` IDs with strings of `ℓ ln n` bits (rounded up to bytes, at least 64 bits).
    pub fn calibrated(n: usize, t_steps: u64, rate: f64, ell: f64, epsilon: f64) -> Result<PuzzleParams> {
        let tau = calibrate_tau(t_steps, rate)?;
        Ok(PuzzleParams {
            tau,
            t_steps,
            attempts_per_unit_step: rate,
            string_bytes: string_bytes(n, ell),
            epsilon,
        })
    }

    fn threshold(&self) -> u64 {
        if self.tau >= 1.0 {
            u64::MAX
        } else {
            IdPoint::from_fraction(self.tau).0
        }
    }
}

/// `ℓ ln n` bits rounded up to whole bytes, never below 8 bytes.
pub fn string_bytes(n: usize, ell: f64) -> usize {
    let bits = (ell * (n.max(2) as f64).ln()).ceil() as usize;
    bits.div_ceil(8).max(8)
}

/// `τ = 2 / (rate · T)`: one unit expects to need `T/2` steps.
pub fn calibrate_tau(t_steps: u64, rate: f64) -> Result<f64> {
    if t_steps == 0 || !(rate > 0.0) {
        return Err(Error::InvalidParameter(format!("T = {t_steps} and rate = {rate} must be positive")));
    }
    let tau = 2.0 / (rate * t_steps as f64);
    if tau >= 1.0 {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be below 1; lengthen T or raise the rate")));
    }
    Ok(tau)
}

/// How puzzle outputs become IDs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashMode {
    /// ID `f(g(σ ⊕ r))`.
    Composed,
    /// Ablation: the puzzle input `σ ⊕ r` itself is the ID.
    SingleHash,
}

fn g_hash(x: &[u8]) -> IdPoint {
    hash_to_point("pow-g", &[x])
}

fn f_hash(y: IdPoint) -> IdPoint {
    hash_to_point("pow-f", &[&y.0.to_be_bytes()])
}

/// Fingerprint naming an epoch string inside certificates.
pub fn string_fingerprint(r: &[u8]) -> IdPoint {
    hash_to_point("epoch-string", &[r])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCertificate {
    #[serde(rename = "sigma_hex", with = "hex_bytes")]
    sigma: Vec<u8>,
    pub string_ref: IdPoint,
    pub epoch: u64,
    #[serde(rename = "id_hex")]
    pub id: IdPoint,
    pub owner: u64,
    pub mode: HashMode,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl IdCertificate {
    /// Trust boundary: stands in for a zero-knowledge proof of the pre-image.
    /// Only the verifier and tests read σ through this channel.
    pub fn reveal_for_verification(&self) -> &[u8] {
        &self.sigma
    }

    /// Copy with a different claimed ID, as a forger would send it.
    pub fn with_claimed_id(&self, id: IdPoint) -> IdCertificate {
        IdCertificate { id, ..self.clone() }
    }
}

/// Evaluate one puzzle input; `Some(id)` if it solves the puzzle.
pub fn solve(sigma: &[u8], r_prev: &[u8], params: &PuzzleParams, mode: HashMode) -> Option<IdPoint> {
    let x = xor_bytes(sigma, r_prev);
    let g = g_hash(&x);
    if g.0 > params.threshold() {
        return None;
    }
    Some(match mode {
        HashMode::Composed => f_hash(g),
        HashMode::SingleHash => IdPoint(u64::from_be_bytes(x[..8].try_into().expect("strings are at least 8 bytes"))),
    })
}

/// Draw puzzle inputs for up to `steps · rate` attempts; the first solution wins.
pub fn attempt_generate(
    r_prev: &[u8],
    epoch: u64,
    owner: u64,
    steps: u64,
    params: &PuzzleParams,
    rng: &mut impl RngCore,
) -> Option<(IdCertificate, u64)> {
    let attempts = (steps as f64 * params.attempts_per_unit_step).floor() as u64;
    let mut sigma = vec![0u8; r_prev.len()];
    for a in 0..attempts {
        rng.fill_bytes(&mut sigma);
        if let Some(id) = solve(&sigma, r_prev, params, HashMode::Composed) {
            let cert = IdCertificate {
                sigma: sigma.clone(),
                string_ref: string_fingerprint(r_prev),
                epoch,
                id,
                owner,
                mode: HashMode::Composed,
            };
            return Some((cert, a + 1));
        }
    }
    None
}

/// Steps a unit needs to find its first solution, capped at `max_steps`.
pub fn first_success_step(r_prev: &[u8], max_steps: u64, params: &PuzzleParams, rng: &mut impl RngCore) -> Option<u64> {
    attempt_generate(r_prev, 0, 0, max_steps, params, rng)
        .map(|(_, attempts)| (attempts as f64 / params.attempts_per_unit_step).ceil() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeBudget {
    pub good_units: u64,
    pub adversary_units: u64,
}

impl ComputeBudget {
    /// Adversary share must not exceed `beta`.
    pub fn new(good_units: u64, adversary_units: u64, beta: f64) -> Result<ComputeBudget> {
        let total = good_units + adversary_units;
        if total > 0 && adversary_units as f64 > beta * total as f64 + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "adversary holds {adversary_units} of {total} units, above beta = {beta}"
            )));
        }
        Ok(ComputeBudget { good_units, adversary_units })
    }

    /// `beta · n` adversary units against `(1 - beta) · n` good ones.
    pub fn for_population(n: usize, beta: f64) -> ComputeBudget {
        let adversary_units = (beta * n as f64).floor() as u64;
        ComputeBudget {
            good_units: n as u64 - adversary_units,
            adversary_units,
        }
    }
}

/// Every certificate the adversary's units find in `window_steps` of hashing against `r_prev`.
///
/// `BiasSmallOutputs` confines puzzle inputs to a small region so that, under the
/// single-hash ablation, IDs cluster near zero.
pub fn adversary_generate(
    budget: &ComputeBudget,
    window_steps: u64,
    r_prev: &[u8],
    epoch: u64,
    params: &PuzzleParams,
    behavior: PowBehavior,
    mode: HashMode,
    seed: u64,
) -> Result<Vec<IdCertificate>> {
    if 2 * window_steps > 3 * params.t_steps {
        return Err(Error::InvalidParameter(format!(
            "window {window_steps} exceeds 3T/2 = {}",
            3 * params.t_steps / 2
        )));
    }
    let attempts = (window_steps as f64 * params.attempts_per_unit_step).floor() as u64;
    let len = r_prev.len();
    let fingerprint = string_fingerprint(r_prev);
    let per_unit: Vec<Vec<IdCertificate>> = (0..budget.adversary_units)
        .into_par_iter()
        .map(|unit| {
            let mut rng = stream(seed, "pow-adversary", unit);
            let mut found = Vec::new();
            let mut x = vec![0u8; len];
            for _ in 0..attempts {
                match behavior {
                    PowBehavior::BiasSmallOutputs => {
                        // input σ ⊕ r with 32 leading zero bits
                        x[..4].fill(0);
                        rng.fill_bytes(&mut x[4..]);
                    }
                    PowBehavior::HonestRate | PowBehavior::PrecomputeHoard => rng.fill_bytes(&mut x),
                }
                let sigma = xor_bytes(&x, r_prev);
                if let Some(id) = solve(&sigma, r_prev, params, mode) {
                    found.push(IdCertificate {
                        sigma,
                        string_ref: fingerprint,
                        epoch,
                        id,
                        owner: unit,
                        mode,
                    });
                }
            }
            found
        })
        .collect();
    Ok(per_unit.into_iter().flatten().collect())
}

/// Valid iff the certificate names a string in `solution_set`, solves the puzzle
/// against it, and the claimed ID recomputes.
pub fn verify_certificate(cert: &IdCertificate, solution_set: &[Vec<u8>], params: &PuzzleParams) -> bool {
    let Some(r) = solution_set.iter().find(|r| string_fingerprint(r) == cert.string_ref) else {
        return false;
    };
    let sigma = cert.reveal_for_verification();
    if sigma.len() != r.len() {
        return false;
    }
    solve(sigma, r, params, cert.mode) == Some(cert.id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    /// Generated this epoch; usable from the next.
    Joining,
    Active,
    Passive,
    Expired,
}

/// Status in `current` of an ID generated in epoch `generated`.
pub fn lifecycle_at(generated: u64, current: u64) -> Lifecycle {
    match current.checked_sub(generated) {
        None | Some(0) => Lifecycle::Joining,
        Some(1) => Lifecycle::Active,
        Some(2) => Lifecycle::Passive,
        Some(_) => Lifecycle::Expired,
    }
}

impl Lifecycle {
    /// Status one epoch later.
    pub fn next(self) -> Lifecycle {
        match self {
            Lifecycle::Joining => Lifecycle::Active,
            Lifecycle::Active => Lifecycle::Passive,
            Lifecycle::Passive | Lifecycle::Expired => Lifecycle::Expired,
        }
    }
}

/// Roll every status forward one epoch, dropping and returning IDs that expire.
pub fn expire_ids(lifecycle: &mut BTreeMap<IdPoint, Lifecycle>) -> Vec<IdPoint> {
    let mut gone = Vec::new();
    lifecycle.retain(|&id, state| {
        *state = state.next();
        if *state == Lifecycle::Expired {
            gone.push(id);
            false
        } else {
            true
        }
    });
    gone
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
}

impl ChiSquare {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Pearson goodness-of-fit of ring points against the uniform law over `bins` equal bins.
pub fn chi_square_uniform(ids: &[IdPoint], bins: usize) -> Result<ChiSquare> {
    if ids.is_empty() || bins < 2 {
        return Err(Error::InvalidParameter("chi-square needs samples and at least 2 bins".into()));
    }
    let mut counts = vec![0u64; bins];
    for id in ids {
        let b = ((id.0 as u128 * bins as u128) >> 64) as usize;
        counts[b] += 1;
    }
    let expect = ids.len() as f64 / bins as f64;
    let statistic: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Fresh epoch string.
pub fn random_string(bytes: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut r = vec![0u8; bytes];
    rng.fill_bytes(&mut r);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoardOutcome {
    /// Certificates the adversary releases at once.
    pub released: u64,
    /// Those that verify against the current solution set.
    pub accepted: u64,
}

/// Compute for `epochs` windows of `T/2` steps, then release every hoarded certificate.
/// With `fresh_strings` each window signs against a new string and only the last
/// window's certificates survive verification.
pub fn precompute_attack(
    budget: &ComputeBudget,
    epochs: u64,
    fresh_strings: bool,
    params: &PuzzleParams,
    seed: u64,
) -> Result<HoardOutcome> {
    let mut rng = stream(seed, "pow-strings", 0);
    let fixed = random_string(params.string_bytes, &mut rng);
    let mut hoard = Vec::new();
    let mut last = fixed.clone();
    for e in 0..epochs {
        let r = if fresh_strings { random_string(params.string_bytes, &mut rng) } else { fixed.clone() };
        let certs = adversary_generate(
            budget,
            params.t_steps / 2,
            &r,
            e,
            params,
            PowBehavior::PrecomputeHoard,
            HashMode::Composed,
            crate::seed::derive_seed(seed, "pow-hoard", e),
        )?;
        hoard.extend(certs);
        last = r;
    }
    let current = vec![last];
    let accepted = hoard.iter().filter(|c| verify_certificate(c, &current, params)).count() as u64;
    Ok(HoardOutcome {
        released: hoard.len() as u64,
        accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::geometric_cdf;

    fn params(t: u64) -> PuzzleParams {
        PuzzleParams::calibrated(1024, t, 1.0, 12.0, 0.1).unwrap()
    }

    #[test]
    fn tau_calibration() {
        assert!((calibrate_tau(1000, 1.0).unwrap() - 0.002).abs() < 1e-15);
        assert!((1.0 / calibrate_tau(1000, 1.0).unwrap() - 500.0).abs() < 1e-9);
        assert!(calibrate_tau(2, 1.0).is_err());
        assert!(calibrate_tau(0, 1.0).is_err());
        assert!(calibrate_tau(10, -1.0).is_err());
    }

    #[test]
    fn string_length_rounds_to_bytes() {
        // 12 · ln 1024 = 83.2 bits -> 84 -> 11 bytes
        assert_eq!(string_bytes(1024, 12.0), 11);
        assert_eq!(string_bytes(16, 1.0), 8);
    }

    #[test]
    fn tau_one_succeeds_at_once() {
        let p = PuzzleParams { tau: 1.0, ..params(1000) };
        let r = vec![7u8; p.string_bytes];
        let (_, attempts) = attempt_generate(&r, 0, 0, 10, &p, &mut stream(0, "pow", 0)).unwrap();
        assert_eq!(attempts, 1);
    }

    #[test]
    fn sigma_equal_to_r_hashes_zero_string() {
        let p = params(1000);
        let r = vec![0x5au8; p.string_bytes];
        let zero = vec![0u8; p.string_bytes];
        let expected = g_hash(&zero).as_fraction() <= p.tau;
        assert_eq!(solve(&r, &r, &p, HashMode::Composed).is_some(), expected);
        let wide = PuzzleParams { tau: 1.0, ..p };
        assert_eq!(solve(&r, &r, &wide, HashMode::Composed), Some(f_hash(g_hash(&zero))));
    }

    #[test]
    fn certificate_round_trip_and_forgery() {
        let p = params(200);
        let mut rng = stream(1, "pow", 0);
        let r = random_string(p.string_bytes, &mut rng);
        let (cert, _) = attempt_generate(&r, 3, 9, 10_000, &p, &mut rng).unwrap();
        assert!(verify_certificate(&cert, std::slice::from_ref(&r), &p));
        assert!(!verify_certificate(&cert.with_claimed_id(cert.id.offset(1)), std::slice::from_ref(&r), &p));
        let other = random_string(p.string_bytes, &mut rng);
        assert!(!verify_certificate(&cert, std::slice::from_ref(&other), &p));
        assert!(verify_certificate(&cert, &[other, r], &p));
        let json = serde_json::to_string(&cert).unwrap();
        assert!(json.contains("sigma_hex") && json.contains("id_hex"));
        assert_eq!(serde_json::from_str::<IdCertificate>(&json).unwrap(), cert);
    }

    #[test]
    fn stale_certificate_fails_two_epochs_later() {
        let p = params(200);
        let mut rng = stream(2, "pow", 0);
        let strings: Vec<Vec<u8>> = (0..3).map(|_| random_string(p.string_bytes, &mut rng)).collect();
        let (cert, _) = attempt_generate(&strings[0], 0, 0, 10_000, &p, &mut rng).unwrap();
        // epoch 2 holds only strings from epochs 1 and 2
        assert!(!verify_certificate(&cert, &strings[1..], &p));
    }

    #[test]
    fn lifecycle_table() {
        assert_eq!(lifecycle_at(4, 4), Lifecycle::Joining);
        assert_eq!(lifecycle_at(4, 5), Lifecycle::Active);
        assert_eq!(lifecycle_at(4, 6), Lifecycle::Passive);
        assert_eq!(lifecycle_at(4, 7), Lifecycle::Expired);
        let mut m = BTreeMap::new();
        m.insert(IdPoint(1), Lifecycle::Passive);
        m.insert(IdPoint(2), Lifecycle::Active);
        m.insert(IdPoint(3), Lifecycle::Joining);
        assert_eq!(expire_ids(&mut m), vec![IdPoint(1)]);
        assert_eq!(m[&IdPoint(2)], Lifecycle::Passive);
        assert_eq!(m[&IdPoint(3)], Lifecycle::Active);
    }

    #[test]
    fn timing_matches_geometric_law() {
        let t = 400u64;
        let p = params(t);
        let r = vec![3u8; p.string_bytes];
        let units = 4000u64;
        let (lo, hi) = ((0.8 * t as f64 / 2.0) as u64, (1.2 * t as f64 / 2.0) as u64);
        let inside = (0..units)
            .filter(|&u| {
                let s = first_success_step(&r, 10 * t, &p, &mut stream(3, "pow-time", u));
                matches!(s, Some(s) if s > lo && s <= hi)
            })
            .count() as f64
            / units as f64;
        let mass = geometric_cdf(p.tau, hi) - geometric_cdf(p.tau, lo);
        let sd = (mass * (1.0 - mass) / units as f64).sqrt();
        eprintln!("finishing within (1±0.2)T/2: {inside:.4} (geometric mass {mass:.4})");
        assert!(inside >= mass - 3.0 * sd);
    }

    #[test]
    fn zero_adversary_units_find_nothing() {
        let p = params(200);
        let b = ComputeBudget::new(100, 0, 0.05).unwrap();
        let got = adversary_generate(&b, 100, &[0u8; 11], 0, &p, PowBehavior::HonestRate, HashMode::Composed, 0).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn budget_and_window_guards() {
        assert!(ComputeBudget::new(90, 11, 0.1).is_err());
        assert!(ComputeBudget::new(90, 10, 0.1).is_ok());
        let p = params(200);
        let b = ComputeBudget::for_population(100, 0.05);
        assert_eq!(b.adversary_units, 5);
        assert!(adversary_generate(&b, 301, &[0u8; 11], 0, &p, PowBehavior::HonestRate, HashMode::Composed, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = params(200);
        let b = ComputeBudget::for_population(400, 0.05);
        let r = vec![1u8; p.string_bytes];
        let a = adversary_generate(&b, 100, &r, 0, &p, PowBehavior::HonestRate, HashMode::Composed, 5).unwrap();
        let c = adversary_generate(&b, 100, &r, 0, &p, PowBehavior::HonestRate, HashMode::Composed, 5).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn chi_square_detects_clumping() {
        let even: Vec<IdPoint> = (0..1600).map(|i| IdPoint::from_fraction((i as f64 + 0.5) / 1600.0)).collect();
        assert!(chi_square_uniform(&even, 16).unwrap().passes(0.01));
        let low: Vec<IdPoint> = (0..1600).map(|i| IdPoint::from_fraction(i as f64 / 3200.0)).collect();
        assert!(!chi_square_uniform(&low, 16).unwrap().passes(0.01));
        assert!(chi_square_uniform(&[], 16).is_err());
    }

    #[test]
    fn hoarding_only_pays_without_fresh_strings() {
        let p = params(200);
        let b = ComputeBudget::for_population(2000, 0.05);
        let stale = precompute_attack(&b, 5, false, &p, 7).unwrap();
        let fresh = precompute_attack(&b, 5, true, &p, 7).unwrap();
        let bound = (1.0 + 2.0 * p.epsilon) * 0.05 * 2000.0;
        assert!(stale.accepted as f64 > bound);
        assert!(fresh.accepted as f64 <= bound);
        assert!(fresh.released > fresh.accepted);
    }
}
