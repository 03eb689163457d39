//! Lower embedding constant of a sampling draw and Monte Carlo estimates of
//! the probability that a design stably embeds the bandlimited signals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::sampling::{build_operators, derive_seed, draw_sample_set, Budget, SamplingDistribution, SamplingOperators};
use crate::spectral::DiffusionModel;

const PSD_SLACK: f64 = 1e-10;

/// The `M x k` matrix `P^{-1/2} W^{1/2} S pi U_k`, one row per sample.
pub fn weighted_band_matrix(ops: &SamplingOperators, model: &DiffusionModel) -> Result<DMatrix<f64>> {
    check(ops, model)?;
    let k = model.bandwidth();
    let scales = ops.scales();
    let mut b = DMatrix::zeros(ops.len(), k);
    for (r, (&idx, &d)) in ops.rows().iter().zip(&scales).enumerate() {
        for (l, v) in model.lifted_band_row(idx).enumerate() {
            b[(r, l)] = d * v;
        }
    }
    Ok(b)
}

fn check(ops: &SamplingOperators, model: &DiffusionModel) -> Result<()> {
    if ops.n() != model.n() || ops.horizon() != model.horizon() {
        return Err(invalid(format!(
            "operators have n = {}, T = {} but the model has n = {}, T = {}",
            ops.n(),
            ops.horizon(),
            model.n(),
            model.horizon()
        )));
    }
    Ok(())
}

/// `B^T B` for `B` from [`weighted_band_matrix`], accumulated once per
/// distinct space-time location.
pub fn weighted_gram(ops: &SamplingOperators, model: &DiffusionModel) -> Result<DMatrix<f64>> {
    check(ops, model)?;
    let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
    for ((&idx, w), p) in ops.rows().iter().zip(ops.weights()).zip(ops.probs()) {
        *mass.entry(idx).or_insert(0.0) += w / p;
    }
    let k = model.bandwidth();
    let mut b = DMatrix::zeros(mass.len(), k);
    for (r, (&idx, &m)) in mass.iter().enumerate() {
        let d = m.sqrt();
        for (l, v) in model.lifted_band_row(idx).enumerate() {
            b[(r, l)] = d * v;
        }
    }
    let gram = b.tr_mul(&b);
    Ok((&gram + gram.transpose()) * 0.5)
}

/// Extreme eigenvalues of the weighted sampled Gram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConstants {
    pub lower: f64,
    pub upper: f64,
}

pub fn embedding_constants(ops: &SamplingOperators, model: &DiffusionModel) -> Result<EmbeddingConstants> {
    let eig = weighted_gram(ops, model)?.symmetric_eigenvalues();
    let (mut lower, upper) = (eig.min(), eig.max());
    if lower < -PSD_SLACK {
        return Err(Error::NotPositiveSemidefinite(lower));
    }
    if lower < 0.0 {
        lower = 0.0;
    }
    Ok(EmbeddingConstants { lower, upper })
}

/// `lambda_min(B^T B)`, the lower embedding constant.
pub fn lower_embedding_constant(ops: &SamplingOperators, model: &DiffusionModel) -> Result<f64> {
    embedding_constants(ops, model).map(|c| c.lower)
}

/// Outcome of repeated random draws of one design.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEstimate {
    pub total_samples: usize,
    pub trials: usize,
    pub threshold: f64,
    pub prob: f64,
    /// Lower embedding constant of each trial, in trial order.
    pub delta_lower: Vec<f64>,
    /// Largest Gram eigenvalue of each trial, in trial order.
    pub delta_upper: Vec<f64>,
}

impl EmbeddingEstimate {
    pub fn median_lower(&self) -> f64 {
        let mut v = self.delta_lower.clone();
        v.sort_by(f64::total_cmp);
        let h = v.len() / 2;
        if v.len() % 2 == 1 {
            v[h]
        } else {
            0.5 * (v[h - 1] + v[h])
        }
    }

    /// Fraction of trials with lower constant at least `level`.
    pub fn fraction_at_least(&self, level: f64) -> f64 {
        self.delta_lower.iter().filter(|&&d| d >= level).count() as f64 / self.trials as f64
    }

    pub const CSV_HEADER: &'static str = "M,trials,threshold,prob,delta_min_median";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{:e}",
            self.total_samples,
            self.trials,
            self.threshold,
            self.prob,
            self.median_lower()
        );
        s
    }
}

/// Draws `trials` sample sets (trial `i` seeded by `derive_seed(master_seed,
/// i)`) and records how often the lower embedding constant reaches
/// `threshold`. The result does not depend on the number of threads.
pub fn embedding_probability(
    model: &DiffusionModel,
    dist: &SamplingDistribution,
    budget: &Budget,
    trials: usize,
    threshold: f64,
    master_seed: u64,
) -> Result<EmbeddingEstimate> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    let constants = (0..trials)
        .into_par_iter()
        .map(|i| {
            let omega = draw_sample_set(dist, budget, derive_seed(master_seed, i as u64))?;
            embedding_constants(&build_operators(&omega, dist)?, model)
        })
        .collect::<Result<Vec<_>>>()?;
    let delta_lower: Vec<f64> = constants.iter().map(|c| c.lower).collect();
    let hits = delta_lower.iter().filter(|&&d| d >= threshold).count();
    Ok(EmbeddingEstimate {
        total_samples: budget.total_samples(dist.regime(), dist.horizon()),
        trials,
        threshold,
        prob: hits as f64 / trials as f64,
        delta_upper: constants.iter().map(|c| c.upper).collect(),
        delta_lower,
    })
}
