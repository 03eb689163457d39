//! Spectral graph weighted coherence of order `(k, T)`, its analytic floors,
//! and the resulting sample-complexity budgets.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::sampling::{Budget, Regime, SamplingDistribution};
use crate::spectral::{DiffusionModel, ExtendedBasis};

/// Coherence of one distribution against one extended basis.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceReport {
    regime: Regime,
    nu_squared: Vec<f64>,
    floor: Vec<f64>,
    achievable: f64,
    degenerate: bool,
}

impl CoherenceReport {
    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// `nu^2` (one entry) or `nu_t^2` per instant (regime 2).
    pub fn nu_squared(&self) -> &[f64] {
        &self.nu_squared
    }

    /// `nu^2` for regimes 1 and 3, `sum_t nu_t^2` for regime 2.
    pub fn total(&self) -> f64 {
        self.nu_squared.iter().sum()
    }

    /// Analytic lower bound, shaped like [`nu_squared`](Self::nu_squared).
    pub fn floor(&self) -> &[f64] {
        &self.floor
    }

    /// Smallest value [`total`](Self::total) can take over all
    /// distributions on this basis. Equals `k` for regimes 2 and 3 and
    /// `sum_i |U~(i:n:Tn, :)|_2^2` for regime 1, which lies in `[k/T, k]`
    /// because each block's squared spectral norm is between `1/T` of its
    /// squared Frobenius norm and the full squared Frobenius norm.
    pub fn achievable(&self) -> f64 {
        self.achievable
    }

    /// Whether the distribution attains the minimum coherence (within 1e-9).
    pub fn is_optimal(&self) -> bool {
        let tol = 1e-9;
        match self.regime {
            Regime::PerTimeNodes => self
                .nu_squared
                .iter()
                .zip(&self.floor)
                .all(|(nu, f)| (nu - f).abs() <= tol),
            _ => (self.total() - self.achievable).abs() <= tol,
        }
    }

    /// Some location with positive energy has zero probability, so the
    /// coherence is infinite.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

fn ratio(energy: f64, prob: f64) -> f64 {
    if prob > 0.0 {
        energy / prob
    } else if energy == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn check_shapes(eb: &ExtendedBasis, dist: &SamplingDistribution) -> Result<()> {
    if eb.n() != dist.n() || eb.horizon() != dist.horizon() {
        return Err(invalid(format!(
            "basis has n = {}, T = {} but distribution has n = {}, T = {}",
            eb.n(),
            eb.horizon(),
            dist.n(),
            dist.horizon()
        )));
    }
    Ok(())
}

/// Energy of every sampling unit: block norms for regime 1, row norms
/// otherwise, indexed like the distribution's components.
fn unit_energies(regime: Regime, eb: &ExtendedBasis) -> Vec<Vec<f64>> {
    let (n, horizon) = (eb.n(), eb.horizon());
    match regime {
        Regime::FixedNodes => vec![(0..n).into_par_iter().map(|i| eb.node_block_norm_sq(i)).collect()],
        Regime::PerTimeNodes => (0..horizon)
            .map(|t| (0..n).map(|i| eb.row_norm_sq(i + t * n)).collect())
            .collect(),
        Regime::SpaceTime => vec![(0..horizon * n).map(|idx| eb.row_norm_sq(idx)).collect()],
    }
}

fn per_time_floor(eb: &ExtendedBasis) -> Vec<f64> {
    let n = eb.n();
    (0..eb.horizon())
        .map(|t| (0..n).map(|i| eb.row_norm_sq(i + t * n)).sum())
        .collect()
}

pub fn coherence(regime: Regime, eb: &ExtendedBasis, dist: &SamplingDistribution) -> Result<CoherenceReport> {
    if regime != dist.regime() {
        return Err(Error::RegimeMismatch {
            expected: regime.number(),
            found: dist.regime().number(),
        });
    }
    check_shapes(eb, dist)?;
    let energies = unit_energies(regime, eb);
    let mut degenerate = false;
    let nu_squared: Vec<f64> = energies
        .iter()
        .zip(dist.components())
        .map(|(e, p)| {
            let worst = e.iter().zip(p).map(|(&e, &p)| ratio(e, p)).fold(0.0f64, f64::max);
            degenerate |= worst.is_infinite();
            worst
        })
        .collect();
    let k = eb.bandwidth() as f64;
    let (floor, achievable) = match regime {
        Regime::FixedNodes => (vec![k / eb.horizon() as f64], energies[0].iter().sum()),
        Regime::PerTimeNodes => (per_time_floor(eb), k),
        Regime::SpaceTime => (vec![k], k),
    };
    Ok(CoherenceReport {
        regime,
        nu_squared,
        floor,
        achievable,
        degenerate,
    })
}

/// The analytic lower bound on the coherence: `k` for regime 3,
/// `sum_{l<k} lambda_l^{2t} / f_T(lambda_l)^2` for each instant in regime 2,
/// and `k / T` for regime 1 (a `T x k` block has squared spectral norm at
/// least `1/T` of its squared Frobenius norm, and those sum to `k`).
pub fn coherence_floor(regime: Regime, model: &DiffusionModel) -> Vec<f64> {
    let k = model.bandwidth();
    match regime {
        Regime::PerTimeNodes => (0..model.horizon())
            .map(|t| {
                model.powers(t)[..k]
                    .iter()
                    .zip(&model.energy()[..k])
                    .map(|(p, f)| (p / f).powi(2))
                    .sum()
            })
            .collect(),
        Regime::FixedNodes => vec![k as f64 / model.horizon() as f64],
        Regime::SpaceTime => vec![k as f64],
    }
}

fn raw_bound(nu_squared: f64, k: usize, delta: f64, epsilon: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!(
            "delta and epsilon must lie in (0, 1), got {delta} and {epsilon}"
        )));
    }
    if k == 0 || !(nu_squared >= 0.0) {
        return Err(invalid("k must be positive and nu^2 nonnegative"));
    }
    Ok(3.0 / (delta * delta) * nu_squared * (2.0 * k as f64 / epsilon).ln())
}

/// `ceil(3 / delta^2 * nu^2 * ln(2k / epsilon))`, but never below `k`.
pub fn sample_complexity(nu_squared: f64, k: usize, delta: f64, epsilon: f64) -> Result<usize> {
    let bound = raw_bound(nu_squared, k, delta, epsilon)?;
    if !bound.is_finite() {
        return Err(invalid("coherence is infinite; no finite budget suffices"));
    }
    Ok((bound.ceil() as usize).max(k))
}

/// Draw budget that satisfies the embedding condition for `report`.
///
/// Regime 2 applies the bound per instant with `nu_t^2` (at least one draw
/// each); if the total falls short of `k`, the earliest instants get the
/// extra draws.
pub fn budget_for(report: &CoherenceReport, k: usize, delta: f64, epsilon: f64) -> Result<Budget> {
    match report.regime() {
        Regime::PerTimeNodes => {
            let mut per_t = report
                .nu_squared()
                .iter()
                .map(|&nu| {
                    let b = raw_bound(nu, k, delta, epsilon)?;
                    if !b.is_finite() {
                        return Err(invalid("coherence is infinite; no finite budget suffices"));
                    }
                    Ok((b.ceil() as usize).max(1))
                })
                .collect::<Result<Vec<_>>>()?;
            let horizon = per_t.len();
            let mut t = 0;
            while per_t.iter().sum::<usize>() < k {
                per_t[t % horizon] += 1;
                t += 1;
            }
            Ok(Budget::PerTime(per_t))
        }
        _ => Ok(Budget::Count(sample_complexity(report.total(), k, delta, epsilon)?)),
    }
}

/// Per-unit coherence profile as CSV with header
/// `regime,t,node,row_norm,prob,ratio`. Regime 1 rows use `t = -1` and the
/// block spectral norm; `row_norm` is the (unsquared) norm and `ratio` the
/// squared norm over the probability.
pub fn profile_csv(regime: Regime, eb: &ExtendedBasis, dist: &SamplingDistribution) -> Result<String> {
    if regime != dist.regime() {
        return Err(Error::RegimeMismatch {
            expected: regime.number(),
            found: dist.regime().number(),
        });
    }
    check_shapes(eb, dist)?;
    let n = eb.n();
    let energies = unit_energies(regime, eb);
    let mut out = String::from("regime,t,node,row_norm,prob,ratio\n");
    let r = regime.number();
    for (c, (e, p)) in energies.iter().zip(dist.components()).enumerate() {
        for (j, (&e, &p)) in e.iter().zip(p).enumerate() {
            let (t, node) = match regime {
                Regime::FixedNodes => (-1i64, j),
                Regime::PerTimeNodes => (c as i64, j),
                Regime::SpaceTime => ((j / n) as i64, j % n),
            };
            let _ = writeln!(out, "{r},{t},{node},{:e},{:e},{:e}", e.sqrt(), p, ratio(e, p));
        }
    }
    Ok(out)
}
