//! Sampling distributions for the three space-time regimes, with-replacement
//! draws of sample sets, and the selection / weighting / probability
//! operators built from a draw.
//!
//! Space-time locations are flattened as `idx = i + t n` for node `i` at
//! instant `t`.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::spectral::ExtendedBasis;

/// How space-time locations are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    /// `m` random nodes, each observed at every instant.
    FixedNodes,
    /// `m_t` random nodes drawn independently at each instant `t`.
    PerTimeNodes,
    /// `m` random space-time locations.
    SpaceTime,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::FixedNodes, Regime::PerTimeNodes, Regime::SpaceTime];

    pub fn number(self) -> u8 {
        match self {
            Regime::FixedNodes => 1,
            Regime::PerTimeNodes => 2,
            Regime::SpaceTime => 3,
        }
    }

    pub fn from_number(number: u8) -> Result<Self> {
        match number {
            1 => Ok(Regime::FixedNodes),
            2 => Ok(Regime::PerTimeNodes),
            3 => Ok(Regime::SpaceTime),
            other => Err(invalid(format!("regime must be 1, 2 or 3, got {other}"))),
        }
    }

    fn check(self, found: Regime) -> Result<()> {
        if self != found {
            return Err(Error::RegimeMismatch {
                expected: self.number(),
                found: found.number(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Probability vectors for one regime.
///
/// Regime 1 holds one vector over the `n` nodes, regime 2 one vector over
/// the nodes per instant, regime 3 one vector over all `Tn` locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    regime: Regime,
    n: usize,
    horizon: usize,
    probs: Vec<Vec<f64>>,
    non_degenerate: bool,
}

impl SamplingDistribution {
    pub fn new(regime: Regime, n: usize, horizon: usize, probs: Vec<Vec<f64>>) -> Result<Self> {
        if n == 0 || horizon == 0 {
            return Err(invalid("n and T must be positive"));
        }
        let (parts, len) = match regime {
            Regime::FixedNodes => (1, n),
            Regime::PerTimeNodes => (horizon, n),
            Regime::SpaceTime => (1, horizon * n),
        };
        if probs.len() != parts || probs.iter().any(|p| p.len() != len) {
            return Err(invalid(format!(
                "regime {regime} expects {parts} probability vector(s) of length {len}"
            )));
        }
        for (c, p) in probs.iter().enumerate() {
            if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(invalid(format!("probability vector {c} has invalid entry {bad}")));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("probability vector {c} sums to {total}, not 1")));
            }
        }
        let non_degenerate = probs.iter().flatten().all(|&v| v > 0.0);
        Ok(Self {
            regime,
            n,
            horizon,
            probs,
            non_degenerate,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Whether every entry is strictly positive.
    pub fn is_non_degenerate(&self) -> bool {
        self.non_degenerate
    }

    /// The constituent probability vectors (one, or `T` for regime 2).
    pub fn components(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Probability attached to space-time location `idx = i + t n`, i.e. the
    /// diagonal entry of `P_j`.
    pub fn prob_at(&self, idx: usize) -> f64 {
        let (t, i) = (idx / self.n, idx % self.n);
        match self.regime {
            Regime::FixedNodes => self.probs[0][i],
            Regime::PerTimeNodes => self.probs[t][i],
            Regime::SpaceTime => self.probs[0][idx],
        }
    }
}

pub fn uniform_distribution(regime: Regime, n: usize, horizon: usize) -> Result<SamplingDistribution> {
    if n == 0 || horizon == 0 {
        return Err(invalid("n and T must be positive"));
    }
    let probs = match regime {
        Regime::FixedNodes => vec![vec![1.0 / n as f64; n]],
        Regime::PerTimeNodes => vec![vec![1.0 / n as f64; n]; horizon],
        Regime::SpaceTime => vec![vec![1.0 / (horizon * n) as f64; horizon * n]],
    };
    SamplingDistribution::new(regime, n, horizon, probs)
}

/// The coherence-minimizing distribution of each regime.
///
/// Regime 1 weights node `i` by the squared spectral norm of its `T x k`
/// block of the extended basis, regime 2 weights `(i, t)` by the squared row
/// norm within instant `t`, regime 3 by the squared row norm over all
/// locations. Each vector is divided by its own total, which equals the
/// analytic normalizer (`sum_l lambda_l^{2t} / f_T^2` for regime 2, `k` for
/// regime 3) up to rounding. Exact zeros stay zero.
pub fn optimal_distribution(regime: Regime, eb: &ExtendedBasis) -> Result<SamplingDistribution> {
    let (n, horizon) = (eb.n(), eb.horizon());
    let normalize = |mut v: Vec<f64>| {
        let total: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= total);
        v
    };
    let probs = match regime {
        Regime::FixedNodes => vec![normalize((0..n).map(|i| eb.node_block_norm_sq(i)).collect())],
        Regime::PerTimeNodes => (0..horizon)
            .map(|t| normalize((0..n).map(|i| eb.row_norm_sq(i + t * n)).collect()))
            .collect(),
        Regime::SpaceTime => vec![normalize((0..horizon * n).map(|idx| eb.row_norm_sq(idx)).collect())],
    };
    SamplingDistribution::new(regime, n, horizon, probs)
}

/// Number of draws: `m` for regimes 1 and 3, `(m_0, ..., m_{T-1})` for
/// regime 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Budget {
    Count(usize),
    PerTime(Vec<usize>),
}

impl Budget {
    /// Converts a total sample count `M` into a budget.
    ///
    /// Regime 1 observes each drawn node `T` times, so `m = floor(M / T)`.
    /// Regime 2 splits `M` evenly over the instants, giving the remainder to
    /// the earliest ones.
    pub fn from_total(regime: Regime, total: usize, horizon: usize) -> Result<Self> {
        match regime {
            Regime::FixedNodes => {
                let m = total / horizon;
                if m == 0 {
                    return Err(invalid(format!("regime 1 needs M >= T ({horizon}), got {total}")));
                }
                Ok(Budget::Count(m))
            }
            Regime::PerTimeNodes => {
                if total < horizon {
                    return Err(invalid(format!("regime 2 needs M >= T ({horizon}), got {total}")));
                }
                let (base, extra) = (total / horizon, total % horizon);
                Ok(Budget::PerTime(
                    (0..horizon).map(|t| base + usize::from(t < extra)).collect(),
                ))
            }
            Regime::SpaceTime => {
                if total == 0 {
                    return Err(invalid("M must be positive"));
                }
                Ok(Budget::Count(total))
            }
        }
    }

    /// Total number of space-time samples `M` this budget produces.
    pub fn total_samples(&self, regime: Regime, horizon: usize) -> usize {
        match (regime, self) {
            (Regime::FixedNodes, Budget::Count(m)) => m * horizon,
            (_, Budget::Count(m)) => *m,
            (_, Budget::PerTime(ms)) => ms.iter().sum(),
        }
    }
}

/// A drawn sample set. Regimes 1 and 3 hold a single list (nodes, resp.
/// space-time indices); regime 2 holds one node list per instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    regime: Regime,
    n: usize,
    horizon: usize,
    draws: Vec<Vec<usize>>,
}

impl SampleSet {
    pub fn new(regime: Regime, n: usize, horizon: usize, draws: Vec<Vec<usize>>) -> Result<Self> {
        let (parts, bound) = match regime {
            Regime::FixedNodes => (1, n),
            Regime::PerTimeNodes => (horizon, n),
            Regime::SpaceTime => (1, horizon * n),
        };
        if draws.len() != parts {
            return Err(invalid(format!(
                "regime {regime} expects {parts} draw list(s), got {}",
                draws.len()
            )));
        }
        if draws.iter().any(Vec::is_empty) {
            return Err(invalid("every draw list must be non-empty"));
        }
        if let Some(bad) = draws.iter().flatten().find(|&&d| d >= bound) {
            return Err(invalid(format!("drawn index {bad} out of range {bound}")));
        }
        Ok(Self {
            regime,
            n,
            horizon,
            draws,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn draws(&self) -> &[Vec<usize>] {
        &self.draws
    }

    /// Total number of space-time samples `M`.
    pub fn total(&self) -> usize {
        match self.regime {
            Regime::FixedNodes => self.horizon * self.draws[0].len(),
            _ => self.draws.iter().map(Vec::len).sum(),
        }
    }

    /// Space-time index selected by each row of the sampling matrix `S`,
    /// in row order. Regime 1 repeats the node list once per instant.
    pub fn rows(&self) -> Vec<usize> {
        let n = self.n;
        match self.regime {
            Regime::FixedNodes => (0..self.horizon)
                .flat_map(|t| self.draws[0].iter().map(move |&i| i + t * n))
                .collect(),
            Regime::PerTimeNodes => self
                .draws
                .iter()
                .enumerate()
                .flat_map(|(t, nodes)| nodes.iter().map(move |&i| i + t * n))
                .collect(),
            Regime::SpaceTime => self.draws[0].clone(),
        }
    }

    /// Text form: a `# regime <r> nodes <n> horizon <T>` header, then
    /// `regime t node` lines (regimes 1 and 2; regime 1 lists its nodes once
    /// with `t = 0`) or `regime idx` lines (regime 3).
    pub fn to_text(&self) -> String {
        let r = self.regime.number();
        let mut out = format!("# regime {r} nodes {} horizon {}\n", self.n, self.horizon);
        match self.regime {
            Regime::SpaceTime => {
                for idx in &self.draws[0] {
                    let _ = writeln!(out, "{r} {idx}");
                }
            }
            _ => {
                for (t, nodes) in self.draws.iter().enumerate() {
                    for node in nodes {
                        let _ = writeln!(out, "{r} {t} {node}");
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let perr = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let mut header: Option<(Regime, usize, usize)> = None;
        let mut draws: Vec<Vec<usize>> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let nums: Vec<&str> = trimmed.trim_start_matches('#').split_whitespace().collect();
            if trimmed.starts_with('#') {
                if let ["regime", r, "nodes", n, "horizon", t] = nums.as_slice() {
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| perr(line, "bad header value"));
                    let regime = Regime::from_number(parse(r)? as u8)?;
                    let (n, t) = (parse(n)?, parse(t)?);
                    draws = vec![Vec::new(); if regime == Regime::PerTimeNodes { t } else { 1 }];
                    header = Some((regime, n, t));
                }
                continue;
            }
            let (regime, _, _) = header.ok_or_else(|| perr(line, "sample line before header"))?;
            let values: Vec<usize> = nums
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| perr(line, "bad integer")))
                .collect::<Result<_>>()?;
            if values.first().copied() != Some(regime.number() as usize) {
                return Err(perr(line, "regime column disagrees with header"));
            }
            match (regime, values.as_slice()) {
                (Regime::SpaceTime, [_, idx]) => draws[0].push(*idx),
                (Regime::FixedNodes, [_, 0, node]) => draws[0].push(*node),
                (Regime::PerTimeNodes, [_, t, node]) if *t < draws.len() => draws[*t].push(*node),
                _ => return Err(perr(line, "malformed sample line")),
            }
        }
        let (regime, n, horizon) = header.ok_or_else(|| perr(1, "missing header"))?;
        Self::new(regime, n, horizon, draws)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th independent stream under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Draws a sample set i.i.d. with replacement from `dist`.
pub fn draw_sample_set(dist: &SamplingDistribution, budget: &Budget, seed: u64) -> Result<SampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = |p: &[f64]| WeightedIndex::new(p).map_err(|e| invalid(format!("cannot sample distribution: {e}")));
    let draws = match (dist.regime(), budget) {
        (Regime::FixedNodes | Regime::SpaceTime, Budget::Count(m)) => {
            if *m == 0 {
                return Err(invalid("budget must be positive"));
            }
            let w = sampler(&dist.components()[0])?;
            vec![(0..*m).map(|_| w.sample(&mut rng)).collect()]
        }
        (Regime::PerTimeNodes, Budget::PerTime(ms)) => {
            if ms.len() != dist.horizon() || ms.contains(&0) {
                return Err(invalid(format!(
                    "regime 2 needs {} positive per-instant budgets",
                    dist.horizon()
                )));
            }
            dist.components()
                .iter()
                .zip(ms)
                .map(|(p, &m)| {
                    let w = sampler(p)?;
                    Ok((0..m).map(|_| w.sample(&mut rng)).collect())
                })
                .collect::<Result<Vec<_>>>()?
        }
        (regime, _) => {
            return Err(invalid(format!("budget shape does not fit regime {regime}")));
        }
    };
    SampleSet::new(dist.regime(), dist.n(), dist.horizon(), draws)
}

/// `S`, `W` and `P_Omega` for one draw. `S` is stored as the list of
/// selected space-time indices; `W` and `P_Omega` as their diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOperators {
    regime: Regime,
    n: usize,
    horizon: usize,
    rows: Vec<usize>,
    weights: Vec<f64>,
    probs: Vec<f64>,
}

pub fn build_operators(omega: &SampleSet, dist: &SamplingDistribution) -> Result<SamplingOperators> {
    dist.regime().check(omega.regime())?;
    if omega.n() != dist.n() || omega.horizon() != dist.horizon() {
        return Err(invalid("sample set and distribution disagree on n or T"));
    }
    let rows = omega.rows();
    let weights: Vec<f64> = match omega.regime() {
        Regime::FixedNodes => vec![1.0 / omega.draws()[0].len() as f64; rows.len()],
        Regime::PerTimeNodes => omega
            .draws()
            .iter()
            .flat_map(|nodes| std::iter::repeat_n(1.0 / nodes.len() as f64, nodes.len()))
            .collect(),
        Regime::SpaceTime => vec![1.0 / rows.len() as f64; rows.len()],
    };
    let mut probs = Vec::with_capacity(rows.len());
    for (row, &idx) in rows.iter().enumerate() {
        let p = dist.prob_at(idx);
        if p <= 0.0 {
            return Err(Error::ZeroProbabilitySample { row, index: idx });
        }
        probs.push(p);
    }
    Ok(SamplingOperators {
        regime: omega.regime(),
        n: omega.n(),
        horizon: omega.horizon(),
        rows,
        weights,
        probs,
    })
}

impl SamplingOperators {
    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of rows `M`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Selected space-time index per row of `S`.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Diagonal of `W`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Diagonal of `P_Omega`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Diagonal of `P_Omega^{-1/2} W^{1/2}`.
    pub fn scales(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.probs)
            .map(|(w, p)| (w / p).sqrt())
            .collect()
    }

    /// `|P_Omega^{-1/2} W^{1/2} e|_2`.
    pub fn weighted_norm(&self, e: &[f64]) -> f64 {
        assert_eq!(e.len(), self.len());
        e.iter()
            .zip(self.weights.iter().zip(&self.probs))
            .map(|(v, (w, p))| v * v * w / p)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense `M x Tn` selection matrix.
    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.len(), self.n * self.horizon);
        for (r, &idx) in self.rows.iter().enumerate() {
            s[(r, idx)] = 1.0;
        }
        s
    }

    /// Dense `P_Omega^{-1/2} W^{1/2} S`.
    pub fn weighted_selection_matrix(&self) -> DMatrix<f64> {
        let d = DVector::from_vec(self.scales());
        DMatrix::from_diagonal(&d) * self.selection_matrix()
    }
}

/// `|P_Omega^{-1/2} W^{1/2} S|_2`.
///
/// `S` has a single one per row, so the Gram of the weighted selection is
/// diagonal with entry `sum W_rr / P_rr` over rows selecting that column;
/// the norm is the square root of the largest such entry. Without repeated
/// draws this is `max_r sqrt(W_rr / P_rr)`.
pub fn operator_norm_weighted(ops: &SamplingOperators) -> f64 {
    let mut column_mass = vec![0.0; ops.n * ops.horizon];
    for ((&idx, w), p) in ops.rows.iter().zip(&ops.weights).zip(&ops.probs) {
        column_mass[idx] += w / p;
    }
    column_mass.into_iter().fold(0.0f64, f64::max).sqrt()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::{build_community_graph, build_disconnected_regular, normalized_laplacian};
    use crate::spectral::{eigendecompose, extended_basis, make_diffusion};

    fn small_basis(sizes: &[usize], t: usize, k: usize) -> ExtendedBasis {
        let g = build_community_graph(sizes, 0.5, 0.05, 17).unwrap();
        let b = Arc::new(eigendecompose(&normalized_laplacian(&g).unwrap()).unwrap());
        extended_basis(&make_diffusion(b, 1.5, t, k).unwrap())
    }

    #[test]
    fn uniform_distributions() {
        let d = uniform_distribution(Regime::SpaceTime, 2, 3).unwrap();
        assert!(d.components()[0].iter().all(|&p| p == 1.0 / 6.0));
        let d = uniform_distribution(Regime::PerTimeNodes, 7, 4).unwrap();
        assert_eq!(d.components().len(), 4);
        for p in d.components() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let d = uniform_distribution(Regime::FixedNodes, 1000, 20).unwrap();
        assert!(d.components()[0].iter().all(|&p| p == 0.001));
        assert!(d.is_non_degenerate());
    }

    #[test]
    fn distribution_validation() {
        assert!(SamplingDistribution::new(Regime::FixedNodes, 2, 1, vec![vec![0.5, 0.6]]).is_err());
        assert!(SamplingDistribution::new(Regime::FixedNodes, 2, 1, vec![vec![1.5, -0.5]]).is_err());
        assert!(SamplingDistribution::new(Regime::SpaceTime, 2, 2, vec![vec![0.5, 0.5]]).is_err());
        let d = SamplingDistribution::new(Regime::FixedNodes, 2, 3, vec![vec![1.0, 0.0]]).unwrap();
        assert!(!d.is_non_degenerate());
        assert_eq!(d.prob_at(2), 1.0);
        assert_eq!(d.prob_at(5), 0.0);
    }

    #[test]
    fn optimal_distributions_sum_to_one() {
        let eb = small_basis(&[8, 10, 12], 4, 3);
        for regime in Regime::ALL {
            let d = optimal_distribution(regime, &eb).unwrap();
            for p in d.components() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let total: f64 = (0..eb.n() * eb.horizon()).map(|i| eb.row_norm_sq(i)).sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_on_disconnected_components() {
        let sizes = [3, 5, 8];
        let g = build_disconnected_regular(&sizes).unwrap();
        let b = Arc::new(eigendecompose(&normalized_laplacian(&g).unwrap()).unwrap());
        let t = 4;
        let eb = extended_basis(&make_diffusion(b, 2.0, t, 3).unwrap());
        let owner: Vec<usize> = sizes.iter().flat_map(|&s| std::iter::repeat_n(s, s)).collect();
        let k = sizes.len() as f64;
        let p1 = optimal_distribution(Regime::FixedNodes, &eb).unwrap();
        let p2 = optimal_distribution(Regime::PerTimeNodes, &eb).unwrap();
        let p3 = optimal_distribution(Regime::SpaceTime, &eb).unwrap();
        for (i, &nj) in owner.iter().enumerate() {
            let nj = nj as f64;
            assert!((p1.components()[0][i] - 1.0 / (k * nj)).abs() < 1e-9);
            for s in 0..t {
                assert!((p2.components()[s][i] - 1.0 / (k * nj)).abs() < 1e-9);
                assert!((p3.components()[0][i + s * 16] - 1.0 / (k * nj * t as f64)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn budget_from_total() {
        assert_eq!(
            Budget::from_total(Regime::FixedNodes, 400, 20).unwrap(),
            Budget::Count(20)
        );
        assert_eq!(
            Budget::from_total(Regime::PerTimeNodes, 11, 4).unwrap(),
            Budget::PerTime(vec![3, 3, 3, 2])
        );
        assert_eq!(Budget::from_total(Regime::SpaceTime, 7, 4).unwrap(), Budget::Count(7));
        assert!(Budget::from_total(Regime::FixedNodes, 3, 4).is_err());
        assert!(Budget::from_total(Regime::PerTimeNodes, 3, 4).is_err());
        let b = Budget::from_total(Regime::FixedNodes, 410, 20).unwrap();
        assert_eq!(b.total_samples(Regime::FixedNodes, 20), 400);
    }

    #[test]
    fn point_mass_draws() {
        let mut p = vec![0.0; 6];
        p[4] = 1.0;
        let d = SamplingDistribution::new(Regime::SpaceTime, 3, 2, vec![p]).unwrap();
        let s = draw_sample_set(&d, &Budget::Count(50), 9).unwrap();
        assert!(s.draws()[0].iter().all(|&i| i == 4));
    }

    #[test]
    fn draws_never_hit_zero_probability() {
        let p = vec![0.0, 0.3, 0.0, 0.0, 0.7, 0.0];
        let d = SamplingDistribution::new(Regime::FixedNodes, 6, 3, vec![p]).unwrap();
        let s = draw_sample_set(&d, &Budget::Count(5000), 1).unwrap();
        assert!(s.draws()[0].iter().all(|&i| i == 1 || i == 4));
    }

    #[test]
    fn uniform_draw_frequencies_within_three_sigma() {
        // Multinomial: each count ~ Binomial(m, 1/20), sd = sqrt(m p (1-p)).
        let d = uniform_distribution(Regime::SpaceTime, 5, 4).unwrap();
        let m = 100_000;
        let s = draw_sample_set(&d, &Budget::Count(m), 2024).unwrap();
        let mut counts = [0usize; 20];
        for &i in &s.draws()[0] {
            counts[i] += 1;
        }
        let p = 1.0 / 20.0;
        let sd = (m as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - m as f64 * p).abs() <= 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let d = uniform_distribution(Regime::PerTimeNodes, 30, 5).unwrap();
        let b = Budget::from_total(Regime::PerTimeNodes, 23, 5).unwrap();
        assert_eq!(
            draw_sample_set(&d, &b, 77).unwrap(),
            draw_sample_set(&d, &b, 77).unwrap()
        );
        assert_ne!(
            draw_sample_set(&d, &b, 77).unwrap(),
            draw_sample_set(&d, &b, 78).unwrap()
        );
        assert!(draw_sample_set(&d, &Budget::Count(4), 1).is_err());
    }

    #[test]
    fn full_cover_gives_identity() {
        let (n, t) = (4, 3);
        let d = uniform_distribution(Regime::SpaceTime, n, t).unwrap();
        let omega = SampleSet::new(
            Regime::SpaceTime,
            n,
            t,
            vec![vec![5, 0, 11, 2, 7, 1, 9, 3, 6, 4, 10, 8]],
        )
        .unwrap();
        let ops = build_operators(&omega, &d).unwrap();
        let m = ops.weighted_selection_matrix();
        let gram = m.transpose() * &m;
        assert!((gram - DMatrix::identity(12, 12)).amax() < 1e-12);
        assert!((operator_norm_weighted(&ops) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn operator_structure() {
        let d = uniform_distribution(Regime::PerTimeNodes, 10, 3).unwrap();
        let omega = draw_sample_set(&d, &Budget::PerTime(vec![4, 4, 4]), 3).unwrap();
        let ops = build_operators(&omega, &d).unwrap();
        assert!(ops.weights().iter().all(|&w| w == 0.25));
        let s = ops.selection_matrix();
        for r in 0..s.nrows() {
            assert_eq!(s.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(s.row(r).sum(), 1.0);
        }
        let col_sums = s.row_sum();
        let mut mult = vec![0.0; 30];
        for &idx in ops.rows() {
            mult[idx] += 1.0;
        }
        assert_eq!(col_sums.iter().copied().collect::<Vec<_>>(), mult);

        // Regime 1 repeats the node block at every instant.
        let d1 = uniform_distribution(Regime::FixedNodes, 10, 3).unwrap();
        let omega1 = draw_sample_set(&d1, &Budget::Count(4), 5).unwrap();
        let ops1 = build_operators(&omega1, &d1).unwrap();
        assert_eq!(ops1.len(), 12);
        for t in 0..3 {
            for j in 0..4 {
                assert_eq!(ops1.rows()[t * 4 + j], omega1.draws()[0][j] + 10 * t);
            }
        }
        assert!(ops1.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn operator_regime_mismatch() {
        let d1 = uniform_distribution(Regime::FixedNodes, 10, 3).unwrap();
        let d3 = uniform_distribution(Regime::SpaceTime, 10, 3).unwrap();
        let omega = draw_sample_set(&d3, &Budget::Count(5), 5).unwrap();
        assert_eq!(
            build_operators(&omega, &d1),
            Err(Error::RegimeMismatch { expected: 1, found: 3 })
        );
    }

    #[test]
    fn operator_rejects_zero_probability_selection() {
        let d = SamplingDistribution::new(Regime::FixedNodes, 3, 2, vec![vec![0.5, 0.5, 0.0]]).unwrap();
        let omega = SampleSet::new(Regime::FixedNodes, 3, 2, vec![vec![0, 2]]).unwrap();
        assert!(matches!(
            build_operators(&omega, &d),
            Err(Error::ZeroProbabilitySample { index: 2, .. })
        ));
    }

    #[test]
    fn operator_norm_closed_form_and_svd_oracle() {
        let (n, t, m) = (6, 4, 9);
        let d = uniform_distribution(Regime::SpaceTime, n, t).unwrap();
        // Distinct draws: every scale is sqrt(Tn / m).
        let omega = SampleSet::new(Regime::SpaceTime, n, t, vec![(0..m).map(|i| 2 * i).collect()]).unwrap();
        let ops = build_operators(&omega, &d).unwrap();
        let expect = ((t * n) as f64 / m as f64).sqrt();
        assert!((operator_norm_weighted(&ops) - expect).abs() < 1e-12);

        // With repeats the norm aggregates per column; compare with the SVD.
        for (seed, regime) in [
            (1, Regime::FixedNodes),
            (2, Regime::PerTimeNodes),
            (3, Regime::SpaceTime),
        ] {
            let eb = small_basis(&[5, 7], 3, 2);
            let dist = optimal_distribution(regime, &eb).unwrap();
            let budget = Budget::from_total(regime, 30, 3).unwrap();
            let omega = draw_sample_set(&dist, &budget, seed).unwrap();
            let ops = build_operators(&omega, &dist).unwrap();
            let top = ops.weighted_selection_matrix().singular_values().max();
            assert!((operator_norm_weighted(&ops) - top).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_set_text_round_trip() {
        for regime in Regime::ALL {
            let d = uniform_distribution(regime, 9, 3).unwrap();
            let b = Budget::from_total(regime, 12, 3).unwrap();
            let s = draw_sample_set(&d, &b, 42).unwrap();
            assert_eq!(SampleSet::parse(&s.to_text()).unwrap(), s);
        }
        assert!(SampleSet::parse("1 0 3\n").is_err());
        assert!(SampleSet::parse("# regime 3 nodes 2 horizon 2\n3 9\n").is_err());
    }

    #[test]
    fn weighted_expectation_is_identity() {
        // Mean of (P^-1/2 W^1/2 S U~)^T (P^-1/2 W^1/2 S U~) over many draws.
        let eb = small_basis(&[6, 8, 6], 3, 3);
        let trials = 2000;
        for regime in Regime::ALL {
            for dist in [
                uniform_distribution(regime, eb.n(), 3).unwrap(),
                optimal_distribution(regime, &eb).unwrap(),
            ] {
                let budget = Budget::from_total(regime, 12, 3).unwrap();
                let mut mean = DMatrix::zeros(3, 3);
                for trial in 0..trials {
                    let omega = draw_sample_set(&dist, &budget, derive_seed(99, trial)).unwrap();
                    let ops = build_operators(&omega, &dist).unwrap();
                    let b = ops.weighted_selection_matrix() * eb.matrix();
                    mean += b.transpose() * b;
                }
                mean /= trials as f64;
                let dev = (mean - DMatrix::identity(3, 3)).amax();
                assert!(dev <= 5.0 / (trials as f64).sqrt(), "regime {regime}: {dev}");
            }
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(5, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(5, 0), derive_seed(6, 0));
    }
}
