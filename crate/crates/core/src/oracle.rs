//! Analytic tail calculators used to size parameters and to check Monte Carlo output.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBounds {
    /// `P[Bin(m, p) > threshold·m]`.
    pub exact: f64,
    /// Multiplicative Chernoff bound on the same event.
    pub chernoff: f64,
}

/// `P[Bin(m, p) > k]`, summed in log space.
pub fn binomial_upper_tail(m: u64, p: f64, k: u64) -> f64 {
    if k >= m {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let sum: f64 = ((k + 1)..=m)
        .map(|i| (ln_binomial(m, i) + i as f64 * lp + (m - i) as f64 * lq).exp())
        .sum();
    sum.min(1.0)
}

/// Upper bound on `P[X > (1+d)·μ]` for a sum of independent indicators with mean `μ`.
pub fn chernoff_upper(mu: f64, d: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    if d <= 0.0 {
        return 1.0;
    }
    let bound = if d < 1.0 {
        (-d * d * mu / 3.0).exp()
    } else {
        // the e^{-d²μ/3} form needs d < 1; this one holds for every d > 0
        (mu * (d - (1.0 + d) * (1.0 + d).ln())).exp()
    };
    bound.min(1.0)
}

/// Exact and Chernoff tails for a group of `m` slots, each bad with probability `p`,
/// exceeding `threshold_fraction · m` bad members.
pub fn chernoff_group_failure(m: u64, p: f64, threshold_fraction: f64) -> Result<TailBounds> {
    if m == 0 {
        return Err(Error::InvalidParameter("group size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    let limit = threshold_fraction * m as f64;
    let k = if limit < 0.0 { None } else { Some(limit.floor() as u64) };
    let exact = match k {
        None => 1.0,
        Some(k) => binomial_upper_tail(m, p, k),
    };
    let mu = m as f64 * p;
    let chernoff = if mu == 0.0 { 0.0 } else { chernoff_upper(mu, limit / mu - 1.0) };
    Ok(TailBounds { exact, chernoff })
}

/// Bounded-differences tail `exp(-2t² / Σ cᵢ²)`.
pub fn mobd_tail(t: f64, c: &[f64]) -> f64 {
    let s: f64 = c.iter().map(|x| x * x).sum();
    if s == 0.0 {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    (-2.0 * t * t / s).exp().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSizing {
    pub d1: f64,
    /// Group size `⌈d₁ ln ln n⌉`.
    pub m: u64,
    pub tail: TailBounds,
}

/// Smallest group size (as `d₁`) whose exact bad-group tail is at most `target_pf`.
///
/// The tail is not monotone in `m` because of the floor in the threshold, so every
/// size is scanned in order rather than bisected.
pub fn size_groups_for_target(beta: f64, delta: f64, delta2: f64, target_pf: f64, n: usize) -> Result<GroupSizing> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(Error::Infeasible(format!("beta = {beta} must lie in (0, 1/2)")));
    }
    if (1.0 + delta) * beta >= 0.5 {
        return Err(Error::Infeasible(format!(
            "(1+delta)·beta = {} leaves no good majority",
            (1.0 + delta) * beta
        )));
    }
    if !(0.0..=1.0).contains(&target_pf) {
        return Err(Error::InvalidProbability(target_pf));
    }
    let lnln = (n as f64).ln().ln();
    if !(lnln > 0.0) {
        return Err(Error::InvalidParameter(format!("n = {n} too small for ln ln n > 0")));
    }
    let p = ((1.0 + delta2) * beta).min(1.0);
    let max_m = (1000.0 * lnln).ceil() as u64;
    for m in 3..=max_m {
        let tail = chernoff_group_failure(m, p, (1.0 + delta) * beta)?;
        if tail.exact <= target_pf {
            return Ok(GroupSizing {
                // nudged down so that ⌈d₁ ln ln n⌉ lands on m despite rounding
                d1: m as f64 / lnln * (1.0 - 1e-12),
                m,
                tail,
            });
        }
    }
    let best = chernoff_group_failure(max_m, p, (1.0 + delta) * beta)?;
    Err(Error::Infeasible(format!(
        "target p_f = {target_pf:e} unreachable for d1 <= 1000 (m <= {max_m}, tail at max = {:e}, p = {p})",
        best.exact
    )))
}

/// `P[Geom(τ) <= k]`: success within `k` attempts.
pub fn geometric_cdf(tau: f64, k: u64) -> f64 {
    1.0 - (1.0 - tau).powf(k as f64)
}
