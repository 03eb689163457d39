//! Noisy observation of a diffusion trajectory at sampled space-time
//! locations, direct and regularized least-squares recovery of the initial
//! signal, and the matching error bounds.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::weighted_band_matrix;
use crate::error::{invalid, Error, Result};
use crate::sampling::{operator_norm_weighted, SampleSet, SamplingOperators};
use crate::spectral::{lift, DiffusionModel, PenaltySpec};

/// Above this many nodes the regularized system is solved by conjugate
/// gradients instead of a dense factorization.
pub const DENSE_LIMIT: usize = 2000;

/// Sampled trajectory values with the noise that was added to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    rows: Vec<usize>,
    y: DVector<f64>,
    noise: DVector<f64>,
    noise_sigma: f64,
}

impl Observation {
    /// Space-time index of each sample.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// The realized noise vector `e`.
    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// `y - e`, the noiseless samples.
    pub fn clean(&self) -> DVector<f64> {
        &self.y - &self.noise
    }
}

/// Samples `lift(x0)` at the rows of `omega` and adds i.i.d. Gaussian noise
/// of standard deviation `noise_sigma`, one draw per row (repeated
/// locations get independent noise).
pub fn observe(
    x0: &DVector<f64>,
    model: &DiffusionModel,
    omega: &SampleSet,
    noise_sigma: f64,
    seed: u64,
) -> Result<Observation> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid(format!("noise level must be >= 0, got {noise_sigma}")));
    }
    if x0.len() != model.n() || x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("signal must be finite with one entry per node"));
    }
    if omega.n() != model.n() || omega.horizon() != model.horizon() {
        return Err(invalid("sample set and model disagree on n or T"));
    }
    let trajectory = lift(model, x0);
    let rows = omega.rows();
    let noise = if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_iterator(rows.len(), (0..rows.len()).map(|_| normal.sample(&mut rng)))
    } else {
        DVector::zeros(rows.len())
    };
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| trajectory[r])) + &noise;
    Ok(Observation {
        rows,
        y,
        noise,
        noise_sigma,
    })
}

/// A reconstructed initial signal split into its in-band and out-of-band
/// parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub x_star: DVector<f64>,
    /// `U_k U_k^T x*`.
    pub alpha_star: DVector<f64>,
    /// `x* - alpha*`.
    pub beta_star: DVector<f64>,
    /// The least-squares problem had no unique solution and the
    /// minimum-norm one was returned.
    pub non_unique: bool,
}

/// Errors of a reconstruction against a bandlimited ground truth `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconErrors {
    pub total: f64,
    /// `|alpha* - x|`.
    pub alpha: f64,
    /// `|beta*|`.
    pub beta: f64,
}

impl ReconResult {
    fn from_spectral(model: &DiffusionModel, coeffs: &DVector<f64>, non_unique: bool) -> Self {
        let u = model.basis().vectors();
        let k = model.bandwidth();
        let n = model.n();
        let alpha_star = u.columns(0, k) * coeffs.rows(0, k);
        let beta_star = u.columns(k, n - k) * coeffs.rows(k, n - k);
        Self {
            x_star: &alpha_star + &beta_star,
            alpha_star,
            beta_star,
            non_unique,
        }
    }

    pub fn errors(&self, x: &DVector<f64>) -> ReconErrors {
        ReconErrors {
            total: (&self.x_star - x).norm(),
            alpha: (&self.alpha_star - x).norm(),
            beta: self.beta_star.norm(),
        }
    }
}

fn check_observation(obs: &Observation, ops: &SamplingOperators, model: &DiffusionModel) -> Result<()> {
    if obs.rows() != ops.rows() {
        return Err(invalid("observation rows do not match the sampling operators"));
    }
    if ops.n() != model.n() || ops.horizon() != model.horizon() {
        return Err(invalid("sampling operators and model disagree on n or T"));
    }
    Ok(())
}

/// Weighted least squares over `span(U_k)`: minimizes
/// `|P^{-1/2} W^{1/2} (S pi(U_k z) - y)|` and returns `x* = U_k z`.
pub fn reconstruct_direct(obs: &Observation, ops: &SamplingOperators, model: &DiffusionModel) -> Result<ReconResult> {
    check_observation(obs, ops, model)?;
    let b = weighted_band_matrix(ops, model)?;
    let scales = DVector::from_vec(ops.scales());
    let rhs = obs.y().component_mul(&scales);
    let k = model.bandwidth();

    let full_rank_solution = if b.nrows() >= k {
        let qr = b.clone().qr();
        let r = qr.r();
        let diag_max = r.diagonal().amax();
        let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if diag_max > 0.0 && diag_min > 1e-12 * diag_max {
            let qty = qr.q().tr_mul(&rhs);
            r.solve_upper_triangular(&qty)
        } else {
            None
        }
    } else {
        None
    };
    let (z, non_unique) = match full_rank_solution {
        Some(z) => (z, false),
        None => {
            let svd = b.svd(true, true);
            let cutoff = svd.singular_values.max() * (ops.len().max(k) as f64) * f64::EPSILON;
            let z = svd.solve(&rhs, cutoff).map_err(|e| invalid(e.to_string()))?;
            (z, true)
        }
    };
    let mut coeffs = DVector::zeros(model.n());
    coeffs.rows_mut(0, k).copy_from(&z);
    Ok(ReconResult::from_spectral(model, &coeffs, non_unique))
}

/// How to solve the regularized normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    /// Dense up to [`DENSE_LIMIT`] nodes, conjugate gradients above.
    #[default]
    Auto,
    Dense,
    ConjugateGradient,
}

enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    PseudoInverse(DMatrix<f64>),
    Iterative { preconditioner: DVector<f64> },
}

/// The regularized system for one draw, `gamma` and `g`, factorized once and
/// reusable across observations.
///
/// Works in spectral coordinates `c = U^T x`, where `pi` is diagonal per
/// instant, so the system reads
/// `(F^T F + gamma diag(g(sigma))) c = F^T z` with one row of `F` per
/// distinct sampled location.
pub struct RegularizedSolver<'a> {
    model: &'a DiffusionModel,
    rows: Vec<usize>,
    /// Position of each sample's location among the rows of `f`.
    slot: Vec<usize>,
    /// `W_rr / P_rr` per sample.
    row_mass: Vec<f64>,
    /// `sqrt` of the summed mass per distinct location.
    slot_scale: Vec<f64>,
    f: DMatrix<f64>,
    penalty: DVector<f64>,
    factor: Factor,
    non_unique: bool,
}

impl fmt::Debug for RegularizedSolver<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.factor {
            Factor::Cholesky(_) => "cholesky",
            Factor::PseudoInverse(_) => "pseudo-inverse",
            Factor::Iterative { .. } => "conjugate-gradient",
        };
        f.debug_struct("RegularizedSolver")
            .field("samples", &self.rows.len())
            .field("locations", &self.f.nrows())
            .field("solver", &kind)
            .field("non_unique", &self.non_unique)
            .finish()
    }
}

impl<'a> RegularizedSolver<'a> {
    pub fn new(
        ops: &SamplingOperators,
        model: &'a DiffusionModel,
        gamma: f64,
        g: PenaltySpec,
        choice: SolverChoice,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("gamma must be positive, got {gamma}")));
        }
        g.validate()?;
        if ops.n() != model.n() || ops.horizon() != model.horizon() {
            return Err(invalid("sampling operators and model disagree on n or T"));
        }
        let n = model.n();
        let mut positions: BTreeMap<usize, usize> = BTreeMap::new();
        for &idx in ops.rows() {
            let next = positions.len();
            positions.entry(idx).or_insert(next);
        }
        let slot: Vec<usize> = ops.rows().iter().map(|idx| positions[idx]).collect();
        let row_mass: Vec<f64> = ops.weights().iter().zip(ops.probs()).map(|(w, p)| w / p).collect();
        let mut mass = vec![0.0; positions.len()];
        for (&s, &m) in slot.iter().zip(&row_mass) {
            mass[s] += m;
        }
        let slot_scale: Vec<f64> = mass.iter().map(|m| m.sqrt()).collect();
        let mut f = DMatrix::zeros(positions.len(), n);
        for (&idx, &s) in &positions {
            for (l, v) in model.lifted_full_row(idx).enumerate() {
                f[(s, l)] = slot_scale[s] * v;
            }
        }
        let penalty = DVector::from_iterator(n, model.basis().sigma().iter().map(|&s| gamma * g.eval(s)));

        let dense = match choice {
            SolverChoice::Auto => n <= DENSE_LIMIT,
            SolverChoice::Dense => true,
            SolverChoice::ConjugateGradient => false,
        };
        let (factor, non_unique) = if dense {
            let mut normal = f.tr_mul(&f);
            normal = (&normal + normal.transpose()) * 0.5;
            for l in 0..n {
                normal[(l, l)] += penalty[l];
            }
            match normal.clone().cholesky() {
                Some(ch) => (Factor::Cholesky(ch), false),
                None => {
                    let eig = normal.symmetric_eigen();
                    let top = eig.eigenvalues.amax();
                    let cutoff = top * n as f64 * f64::EPSILON;
                    let inv = eig.eigenvalues.map(|v| if v > cutoff { 1.0 / v } else { 0.0 });
                    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
                    (Factor::PseudoInverse(pinv), true)
                }
            }
        } else {
            let mut diag = DVector::zeros(n);
            let mut singular = false;
            for l in 0..n {
                let d = f.column(l).norm_squared() + penalty[l];
                singular |= d == 0.0;
                diag[l] = if d > 0.0 { 1.0 / d } else { 1.0 };
            }
            (Factor::Iterative { preconditioner: diag }, singular)
        };
        Ok(Self {
            model,
            rows: ops.rows().to_vec(),
            slot,
            row_mass,
            slot_scale,
            f,
            penalty,
            factor,
            non_unique,
        })
    }

    /// Whether the system was singular and a minimum-norm solution is used.
    pub fn is_non_unique(&self) -> bool {
        self.non_unique
    }

    fn apply(&self, c: &DVector<f64>) -> DVector<f64> {
        self.f.tr_mul(&(&self.f * c)) + self.penalty.component_mul(c)
    }

    fn conjugate_gradient(&self, rhs: &DVector<f64>, preconditioner: &DVector<f64>) -> Result<DVector<f64>> {
        let n = rhs.len();
        let norm_b = rhs.norm();
        let mut x = DVector::zeros(n);
        if norm_b == 0.0 {
            return Ok(x);
        }
        let mut r = rhs.clone();
        let mut z = r.component_mul(preconditioner);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        let cap = 20 * n;
        for _ in 0..cap {
            let ap = self.apply(&p);
            let alpha = rz / p.dot(&ap);
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            if r.norm() <= 1e-10 * norm_b {
                return Ok(x);
            }
            z = r.component_mul(preconditioner);
            let rz_next = r.dot(&z);
            p = &z + &p * (rz_next / rz);
            rz = rz_next;
        }
        Err(Error::NoConvergence {
            iterations: cap,
            residual: r.norm() / norm_b,
        })
    }

    pub fn solve(&self, obs: &Observation) -> Result<ReconResult> {
        if obs.rows() != self.rows.as_slice() {
            return Err(invalid("observation rows do not match the sampling operators"));
        }
        let mut z = DVector::zeros(self.f.nrows());
        for ((&s, &m), &y) in self.slot.iter().zip(&self.row_mass).zip(obs.y().iter()) {
            z[s] += m * y;
        }
        for (zs, &scale) in z.iter_mut().zip(&self.slot_scale) {
            *zs /= scale;
        }
        let rhs = self.f.tr_mul(&z);
        let coeffs = match &self.factor {
            Factor::Cholesky(ch) => ch.solve(&rhs),
            Factor::PseudoInverse(pinv) => pinv * &rhs,
            Factor::Iterative { preconditioner } => self.conjugate_gradient(&rhs, preconditioner)?,
        };
        Ok(ReconResult::from_spectral(self.model, &coeffs, self.non_unique))
    }
}

/// Minimizes `|P^{-1/2} W^{1/2} (S pi(x) - y)|^2 + gamma x^T g(L) x` over all
/// of `R^n`.
pub fn reconstruct_regularized(
    obs: &Observation,
    ops: &SamplingOperators,
    model: &DiffusionModel,
    gamma: f64,
    g: PenaltySpec,
) -> Result<ReconResult> {
    check_observation(obs, ops, model)?;
    RegularizedSolver::new(ops, model, gamma, g, SolverChoice::Auto)?.solve(obs)
}

/// `|P^{-1/2} W^{1/2} e|`.
pub fn weighted_noise_norm(ops: &SamplingOperators, e: &DVector<f64>) -> Result<f64> {
    if e.len() != ops.len() {
        return Err(invalid("noise vector length differs from the number of samples"));
    }
    Ok(ops.weighted_norm(e.as_slice()))
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `2 |P^{-1/2} W^{1/2} e| / (sqrt(1 - delta) f_T(lambda_k))`.
pub fn error_bound_direct(
    ops: &SamplingOperators,
    model: &DiffusionModel,
    e: &DVector<f64>,
    delta: f64,
) -> Result<f64> {
    check_delta(delta)?;
    let noise = weighted_noise_norm(ops, e)?;
    Ok(2.0 * noise / ((1.0 - delta).sqrt() * model.energy_at_band_edge()))
}

/// Right-hand sides of the in-band and out-of-band error bounds of the
/// regularized estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedBounds {
    /// Bound on `|alpha* - x|`.
    pub alpha: f64,
    /// Bound on `|beta*|`.
    pub beta: f64,
}

/// Scalar ingredients of [`RegularizedBounds`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// `|P^{-1/2} W^{1/2} e|`.
    pub noise: f64,
    /// Upper bound on `|P^{-1/2} W^{1/2} S|`.
    pub m_max: f64,
    /// `f_T(lambda_k)`.
    pub f_k: f64,
    /// `f_T(lambda_{k+1})`.
    pub f_next: f64,
    /// `g(sigma_k)`.
    pub g_k: f64,
    /// `g(sigma_{k+1})`.
    pub g_next: f64,
    pub gamma: f64,
    pub delta: f64,
    /// `|x|`.
    pub x_norm: f64,
}

impl BoundInputs {
    pub fn bounds(&self) -> Result<RegularizedBounds> {
        check_delta(self.delta)?;
        if !(self.g_next > 0.0) {
            return Err(Error::UnsupportedPenalty(
                "g(sigma_k+1) must be positive for the regularized bound".into(),
            ));
        }
        let root_gg = (self.gamma * self.g_next).sqrt();
        let ratio = (self.g_k / self.g_next).sqrt();
        let beta = self.noise / root_gg + ratio * self.x_norm;
        let mf = self.m_max * self.f_next;
        let alpha = ((2.0 + mf / root_gg) * self.noise + (mf * ratio + (self.gamma * self.g_k).sqrt()) * self.x_norm)
            / ((1.0 - self.delta).sqrt() * self.f_k);
        Ok(RegularizedBounds { alpha, beta })
    }
}

/// Evaluates both regularized bounds for one draw, using
/// [`operator_norm_weighted`] as `M_max` and `W^{1/2}` in the noise term.
#[allow(clippy::too_many_arguments)]
pub fn error_bound_regularized(
    ops: &SamplingOperators,
    model: &DiffusionModel,
    e: &DVector<f64>,
    delta: f64,
    gamma: f64,
    g: PenaltySpec,
    x_norm: f64,
) -> Result<RegularizedBounds> {
    g.validate()?;
    if !g.is_nondecreasing() {
        return Err(Error::UnsupportedPenalty(format!(
            "{g} is not nondecreasing; the regularized bound does not apply"
        )));
    }
    if !(gamma > 0.0) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    let k = model.bandwidth();
    let f_next = model
        .energy_past_band_edge()
        .ok_or_else(|| invalid("the regularized bound needs k < n"))?;
    let sigma = model.basis().sigma();
    BoundInputs {
        noise: weighted_noise_norm(ops, e)?,
        m_max: operator_norm_weighted(ops),
        f_k: model.energy_at_band_edge(),
        f_next,
        g_k: g.eval(sigma[k - 1]),
        g_next: g.eval(sigma[k]),
        gamma,
        delta,
        x_norm,
    }
    .bounds()
}

/// One line of a reconstruction sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconRow {
    pub regime: u8,
    pub total_samples: usize,
    pub sigma: f64,
    /// `None` for direct reconstruction.
    pub gamma: Option<f64>,
    pub g: Option<PenaltySpec>,
    pub err_total: f64,
    pub err_alpha: f64,
    pub err_beta: f64,
    /// Empty in the CSV when the bound does not apply to `g`.
    pub bound_alpha: Option<f64>,
    pub bound_beta: Option<f64>,
    pub delta_lower: f64,
}

impl ReconRow {
    pub const CSV_HEADER: &'static str =
        "regime,M,sigma,gamma,g,err_total,err_alpha,err_beta,bound_alpha,bound_beta,delta_lower";

    pub fn csv_row(&self) -> String {
        let gamma = self.gamma.map_or_else(|| "direct".to_string(), |g| format!("{g:e}"));
        let g = self.g.map_or_else(|| "direct".to_string(), |g| g.to_string());
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:e}"));
        format!(
            "{},{},{},{},{},{:e},{:e},{:e},{},{},{:e}",
            self.regime,
            self.total_samples,
            self.sigma,
            gamma,
            g,
            self.err_total,
            self.err_alpha,
            self.err_beta,
            opt(self.bound_alpha),
            opt(self.bound_beta),
            self.delta_lower
        )
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::embedding::lower_embedding_constant;
    use crate::graph::{
        build_community_graph, build_disconnected_regular, build_ring_graph, normalized_laplacian, Graph,
    };
    use crate::sampling::{
        build_operators, derive_seed, draw_sample_set, optimal_distribution, uniform_distribution, Budget, Regime,
    };
    use crate::spectral::{eigendecompose, extended_basis, make_diffusion, trajectory_energy};

    fn model_for(g: &Graph, dt: f64, t: usize, k: usize) -> DiffusionModel {
        let b = Arc::new(eigendecompose(&normalized_laplacian(g).unwrap()).unwrap());
        make_diffusion(b, dt, t, k).unwrap()
    }

    fn bandlimited(model: &DiffusionModel, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = model.bandwidth();
        let c = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let x = model.basis().vectors().columns(0, k) * c;
        &x / x.norm()
    }

    fn draw(
        model: &DiffusionModel,
        regime: Regime,
        total: usize,
        seed: u64,
        optimal: bool,
    ) -> (SampleSet, SamplingOperators) {
        let dist = if optimal {
            optimal_distribution(regime, &extended_basis(model)).unwrap()
        } else {
            uniform_distribution(regime, model.n(), model.horizon()).unwrap()
        };
        let budget = Budget::from_total(regime, total, model.horizon()).unwrap();
        let omega = draw_sample_set(&dist, &budget, seed).unwrap();
        let ops = build_operators(&omega, &dist).unwrap();
        (omega, ops)
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let g = build_ring_graph(12).unwrap();
        let m = model_for(&g, 1.0, 4, 3);
        let x = bandlimited(&m, 1);
        let (omega, _) = draw(&m, Regime::SpaceTime, 20, 2, false);
        let obs = observe(&x, &m, &omega, 0.0, 3).unwrap();
        let traj = lift(&m, &x);
        for (r, &idx) in omega.rows().iter().enumerate() {
            assert_eq!(obs.y()[r], traj[idx]);
        }
        assert!(observe(&x, &m, &omega, -0.1, 3).is_err());
        assert!(observe(&DVector::from_element(12, f64::NAN), &m, &omega, 0.0, 3).is_err());
    }

    #[test]
    fn repeated_locations_get_independent_noise() {
        let g = build_ring_graph(6).unwrap();
        let m = model_for(&g, 1.0, 2, 1);
        let x = bandlimited(&m, 4);
        let omega = SampleSet::new(Regime::SpaceTime, 6, 2, vec![vec![3, 3, 3]]).unwrap();
        let obs = observe(&x, &m, &omega, 0.0015, 9).unwrap();
        assert_ne!(obs.y()[0], obs.y()[1]);
        assert_ne!(obs.y()[1], obs.y()[2]);
        let clean = obs.clean();
        assert!((clean[0] - clean[1]).abs() < 1e-15);
        assert!((obs.y() - obs.noise() - clean).amax() == 0.0);
    }

    #[test]
    fn direct_recovers_noiseless_signals() {
        let g = build_community_graph(&[15, 20, 25], 0.3, 0.02, 6).unwrap();
        let m = model_for(&g, 4.0, 5, 3);
        let mut checked = 0;
        for (i, regime) in Regime::ALL.iter().cycle().take(15).enumerate() {
            let (omega, ops) = draw(&m, *regime, 30, derive_seed(1, i as u64), i % 2 == 0);
            if lower_embedding_constant(&ops, &m).unwrap() <= 1e-8 {
                continue;
            }
            let x = bandlimited(&m, i as u64);
            let obs = observe(&x, &m, &omega, 0.0, 0).unwrap();
            let rec = reconstruct_direct(&obs, &ops, &m).unwrap();
            assert!(!rec.non_unique);
            assert!(rec.errors(&x).total <= 1e-6, "regime {regime}");
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn direct_flags_rank_deficiency() {
        let g = build_ring_graph(10).unwrap();
        let m = model_for(&g, 1.0, 2, 3);
        let d = uniform_distribution(Regime::SpaceTime, 10, 2).unwrap();
        let omega = SampleSet::new(Regime::SpaceTime, 10, 2, vec![vec![4, 4]]).unwrap();
        let ops = build_operators(&omega, &d).unwrap();
        let x = bandlimited(&m, 3);
        let obs = observe(&x, &m, &omega, 0.0, 0).unwrap();
        let rec = reconstruct_direct(&obs, &ops, &m).unwrap();
        assert!(rec.non_unique);
        // Minimum-norm: the band coefficients lie in the row space of B.
        let b = weighted_band_matrix(&ops, &m).unwrap();
        let z = m.basis().vectors().columns(0, 3).tr_mul(&rec.x_star);
        let row = b.row(0).transpose();
        assert!((&z - &row * (row.dot(&z) / row.norm_squared())).amax() < 1e-12);
    }

    #[test]
    fn decomposition_is_orthogonal() {
        let g = build_community_graph(&[10, 12], 0.4, 0.05, 2).unwrap();
        let m = model_for(&g, 2.0, 3, 2);
        let x = bandlimited(&m, 5);
        let (omega, ops) = draw(&m, Regime::PerTimeNodes, 12, 7, false);
        let obs = observe(&x, &m, &omega, 0.01, 1).unwrap();
        let rec = reconstruct_regularized(&obs, &ops, &m, 0.1, PenaltySpec::Power(2)).unwrap();
        let uk = m.basis().vectors().columns(0, 2);
        assert!(uk.tr_mul(&rec.beta_star).amax() < 1e-10);
        assert!((&rec.alpha_star + &rec.beta_star - &rec.x_star).amax() < 1e-15);
        let projected = uk * uk.tr_mul(&rec.x_star);
        assert!((projected - &rec.alpha_star).amax() < 1e-12);
    }

    #[test]
    fn uniform_noise_weighting_identities() {
        let g = build_ring_graph(9).unwrap();
        let m = model_for(&g, 1.0, 4, 3);
        let (n, t) = (9.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for regime in [Regime::FixedNodes, Regime::SpaceTime] {
            let (_, ops) = draw(&m, regime, 24, 1, false);
            let e = DVector::from_fn(ops.len(), |_, _| rng.random::<f64>());
            let lhs = weighted_noise_norm(&ops, &e).unwrap().powi(2);
            let expect = n * t / ops.len() as f64 * e.norm_squared();
            assert!((lhs - expect).abs() < 1e-12 * expect);
        }
        let ops = build_operators(
            &SampleSet::new(
                Regime::PerTimeNodes,
                9,
                4,
                vec![vec![0, 1], vec![2, 3, 4], vec![5], vec![6, 7, 8, 0]],
            )
            .unwrap(),
            &uniform_distribution(Regime::PerTimeNodes, 9, 4).unwrap(),
        )
        .unwrap();
        let e = DVector::from_fn(ops.len(), |_, _| rng.random::<f64>());
        let lhs = weighted_noise_norm(&ops, &e).unwrap().powi(2);
        let parts = [(0, 2), (2, 3), (5, 1), (6, 4)];
        let expect: f64 = parts
            .iter()
            .map(|&(s, len)| n / len as f64 * e.rows(s, len).norm_squared())
            .sum();
        assert!((lhs - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn direct_bound_basics() {
        let g = build_ring_graph(9).unwrap();
        let m = model_for(&g, 1.0, 4, 3);
        let (_, ops) = draw(&m, Regime::SpaceTime, 24, 1, false);
        let e = DVector::from_fn(ops.len(), |i, _| (i as f64).sin());
        assert_eq!(error_bound_direct(&ops, &m, &DVector::zeros(24), 0.5).unwrap(), 0.0);
        let b1 = error_bound_direct(&ops, &m, &e, 0.5).unwrap();
        let b3 = error_bound_direct(&ops, &m, &(&e * -3.0), 0.5).unwrap();
        assert!((b3 - 3.0 * b1).abs() < 1e-12 * b3);
        assert!(error_bound_direct(&ops, &m, &e, 1.0).is_err());
    }

    #[test]
    fn direct_bound_holds_whenever_embedding_holds() {
        let g = build_community_graph(&[15, 20, 25], 0.3, 0.02, 6).unwrap();
        let m = model_for(&g, 4.0, 5, 3);
        let delta = 0.5;
        let level = (1.0 - delta) * m.energy_at_band_edge().powi(2);
        let mut checked = 0;
        for i in 0..60u64 {
            let regime = Regime::ALL[(i % 3) as usize];
            let (omega, ops) = draw(&m, regime, 40, derive_seed(2, i), true);
            if lower_embedding_constant(&ops, &m).unwrap() < level {
                continue;
            }
            let x = bandlimited(&m, i);
            let obs = observe(&x, &m, &omega, 0.01, i).unwrap();
            let rec = reconstruct_direct(&obs, &ops, &m).unwrap();
            let bound = error_bound_direct(&ops, &m, obs.noise(), delta).unwrap();
            assert!(rec.errors(&x).total <= bound);
            checked += 1;
        }
        assert!(checked >= 20, "{checked}");
    }

    #[test]
    fn regularized_matches_node_space_oracle() {
        // Assemble pi^T S^T W P^-1 S pi + gamma g(L) in node coordinates.
        let g = build_community_graph(&[6, 8, 7], 0.5, 0.05, 9).unwrap();
        let n = g.n();
        let lap = normalized_laplacian(&g).unwrap();
        let m = model_for(&g, 1.5, 3, 3);
        let u = m.basis().vectors();
        let a = u * DMatrix::from_diagonal(&DVector::from_column_slice(m.powers(1))) * u.transpose();
        let mut pi = DMatrix::zeros(3 * n, n);
        let mut at = DMatrix::identity(n, n);
        for t in 0..3 {
            pi.rows_mut(t * n, n).copy_from(&at);
            at = &a * at;
        }
        let x = bandlimited(&m, 8);
        for regime in Regime::ALL {
            let (omega, ops) = draw(&m, regime, 15, 4, true);
            let obs = observe(&x, &m, &omega, 0.02, 5).unwrap();
            for (gamma, spec, power) in [(0.3, PenaltySpec::Power(1), 1), (1e-2, PenaltySpec::Power(3), 3)] {
                let d = ops.weighted_selection_matrix() * &pi;
                let mut gl = DMatrix::identity(n, n);
                for _ in 0..power {
                    gl = &lap * gl;
                }
                let lhs = d.tr_mul(&d) + gl * gamma;
                let dy = DVector::from_vec(ops.scales()).component_mul(obs.y());
                let rhs = d.tr_mul(&dy);
                let oracle = lhs.lu().solve(&rhs).unwrap();
                for choice in [SolverChoice::Dense, SolverChoice::ConjugateGradient] {
                    let rec = RegularizedSolver::new(&ops, &m, gamma, spec, choice)
                        .unwrap()
                        .solve(&obs)
                        .unwrap();
                    assert!((&rec.x_star - &oracle).amax() < 1e-8, "regime {regime} {choice:?}");
                }
            }
        }
    }

    #[test]
    fn perfect_recovery_when_penalty_vanishes_on_band() {
        let g = build_disconnected_regular(&[5, 7, 9]).unwrap();
        let m = model_for(&g, 2.0, 3, 3);
        let x = bandlimited(&m, 1);
        for regime in Regime::ALL {
            let (omega, ops) = draw(&m, regime, 30, 12, false);
            assert!(lower_embedding_constant(&ops, &m).unwrap() > 1e-8);
            let obs = observe(&x, &m, &omega, 0.0, 0).unwrap();
            for gamma in [1e-3, 1.0, 1e2] {
                let rec = reconstruct_regularized(&obs, &ops, &m, gamma, PenaltySpec::Power(1)).unwrap();
                assert!(rec.errors(&x).total <= 1e-6 * x.norm());
            }
            let b = error_bound_regularized(
                &ops,
                &m,
                &DVector::zeros(ops.len()),
                0.5,
                1.0,
                PenaltySpec::Power(2),
                1.0,
            )
            .unwrap();
            // sigma_k is zero up to rounding, so both bounds vanish to rounding.
            assert!(b.alpha < 1e-12 && b.beta < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn regularized_bounds_hold() {
        let g = build_community_graph(&[15, 20, 25], 0.3, 0.02, 6).unwrap();
        let m = model_for(&g, 4.0, 5, 3);
        let delta = 0.5;
        let level = (1.0 - delta) * m.energy_at_band_edge().powi(2);
        let mut alpha_checked = 0;
        for i in 0..30u64 {
            let regime = Regime::ALL[(i % 3) as usize];
            let (omega, ops) = draw(&m, regime, 45, derive_seed(3, i), i % 2 == 0);
            let x = bandlimited(&m, i);
            let obs = observe(&x, &m, &omega, 0.01, i).unwrap();
            for (gamma, spec) in [(1e-3, PenaltySpec::Power(1)), (1e-1, PenaltySpec::Power(4))] {
                let rec = reconstruct_regularized(&obs, &ops, &m, gamma, spec).unwrap();
                let err = rec.errors(&x);
                let b = error_bound_regularized(&ops, &m, obs.noise(), delta, gamma, spec, x.norm()).unwrap();
                assert!(err.beta <= b.beta * (1.0 + 1e-12));
                if lower_embedding_constant(&ops, &m).unwrap() >= level {
                    assert!(err.alpha <= b.alpha * (1.0 + 1e-12));
                    alpha_checked += 1;
                }
            }
        }
        assert!(alpha_checked >= 10);
    }

    #[test]
    fn regularized_bound_refusals() {
        let g = build_ring_graph(8).unwrap();
        let m = model_for(&g, 1.0, 2, 3);
        let (_, ops) = draw(&m, Regime::SpaceTime, 10, 1, false);
        let e = DVector::zeros(10);
        assert!(matches!(
            error_bound_regularized(&ops, &m, &e, 0.5, 1.0, PenaltySpec::ExpShift, 1.0),
            Err(Error::UnsupportedPenalty(_))
        ));
        let zero_next = BoundInputs {
            noise: 0.0,
            m_max: 1.0,
            f_k: 1.0,
            f_next: 1.0,
            g_k: 0.0,
            g_next: 0.0,
            gamma: 1.0,
            delta: 0.5,
            x_norm: 1.0,
        };
        assert!(matches!(zero_next.bounds(), Err(Error::UnsupportedPenalty(_))));
        let full = model_for(&g, 1.0, 2, 8);
        let (_, opsf) = draw(&full, Regime::SpaceTime, 10, 1, false);
        assert!(error_bound_regularized(&opsf, &full, &e, 0.5, 1.0, PenaltySpec::Power(1), 1.0).is_err());
        assert!(RegularizedSolver::new(&ops, &m, 0.0, PenaltySpec::Power(1), SolverChoice::Auto).is_err());
    }

    #[test]
    fn regularized_converges_to_direct_as_gamma_shrinks() {
        // Needs a nonsingular data term, so every node is sampled.
        let g = build_community_graph(&[5, 6, 5], 0.6, 0.1, 3).unwrap();
        let m = model_for(&g, 1.0, 3, 3);
        let x = bandlimited(&m, 2);
        let d = uniform_distribution(Regime::FixedNodes, 16, 3).unwrap();
        let omega = SampleSet::new(Regime::FixedNodes, 16, 3, vec![(0..16).collect()]).unwrap();
        let ops = build_operators(&omega, &d).unwrap();
        let obs = observe(&x, &m, &omega, 0.0, 0).unwrap();
        let direct = reconstruct_direct(&obs, &ops, &m).unwrap();
        let mut prev = f64::INFINITY;
        for p in 1..=8 {
            let gamma = 10f64.powi(-p);
            let rec = reconstruct_regularized(&obs, &ops, &m, gamma, PenaltySpec::Power(2)).unwrap();
            let gap = (&rec.x_star - &direct.x_star).norm();
            assert!(gap <= prev + 1e-9, "gamma {gamma}: {gap} > {prev}");
            prev = gap;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn higher_penalty_power_helps_noiseless() {
        let g = build_community_graph(&[20, 25, 30, 25], 0.3, 0.005, 14).unwrap();
        let m = model_for(&g, 4.0, 5, 4);
        let (omega, ops) = draw(&m, Regime::SpaceTime, 40, 3, true);
        let solvers: Vec<RegularizedSolver> = [1, 2, 4]
            .iter()
            .map(|&p| RegularizedSolver::new(&ops, &m, 1e-3, PenaltySpec::Power(p), SolverChoice::Auto).unwrap())
            .collect();
        let mut mean = [0.0; 3];
        for s in 0..10 {
            let x = bandlimited(&m, 100 + s);
            let obs = observe(&x, &m, &omega, 0.0, 0).unwrap();
            for (acc, solver) in mean.iter_mut().zip(&solvers) {
                *acc += solver.solve(&obs).unwrap().errors(&x).total / 10.0;
            }
        }
        assert!(mean[2] <= mean[1] && mean[1] <= mean[0], "{mean:?}");
    }

    #[test]
    fn csv_row_shape() {
        let row = ReconRow {
            regime: 2,
            total_samples: 200,
            sigma: 0.0015,
            gamma: Some(1e-3),
            g: Some(PenaltySpec::Power(4)),
            err_total: 0.1,
            err_alpha: 0.05,
            err_beta: 0.02,
            bound_alpha: Some(3.0),
            bound_beta: Some(1.0),
            delta_lower: 0.2,
        };
        let line = row.csv_row();
        assert_eq!(line.split(',').count(), ReconRow::CSV_HEADER.split(',').count());
        assert!(line.starts_with("2,200,0.0015,1e-3,L^4,"));
        let direct = ReconRow {
            gamma: None,
            g: None,
            ..row
        };
        assert!(direct.csv_row().contains(",direct,direct,"));
        let unbounded = ReconRow {
            bound_alpha: None,
            bound_beta: None,
            ..row
        };
        assert!(unbounded.csv_row().contains(",,,"));
    }

    fn bound_at(t: usize, m: &DiffusionModel) -> f64 {
        let k = m.bandwidth();
        let lam = m.lambda();
        let sigma = m.basis().sigma();
        let g = PenaltySpec::Power(2);
        BoundInputs {
            noise: 0.0,
            m_max: 3.0,
            f_k: trajectory_energy(lam[k - 1], t),
            f_next: trajectory_energy(lam[k], t),
            g_k: g.eval(sigma[k - 1]),
            g_next: g.eval(sigma[k]),
            gamma: 1e-2,
            delta: 0.5,
            x_norm: 1.0,
        }
        .bounds()
        .unwrap()
        .alpha
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn noiseless_bound_nonincreasing_in_horizon(seed in 0u64..500, k in 1usize..4) {
            let g = build_community_graph(&[6, 8, 10], 0.5, 0.05, seed).unwrap();
            let b = Arc::new(eigendecompose(&normalized_laplacian(&g).unwrap()).unwrap());
            let model = make_diffusion(b, 1.0, 1, k);
            prop_assume!(model.is_ok());
            let m = model.unwrap();
            let mut prev = f64::INFINITY;
            for t in 1..=20 {
                let b = bound_at(t, &m);
                prop_assert!(b <= prev * (1.0 + 1e-12));
                prev = b;
            }
        }

        #[test]
        fn direct_bound_is_homogeneous(scale in -10.0f64..10.0, seed in 0u64..100) {
            let g = build_ring_graph(9).unwrap();
            let m = model_for(&g, 1.0, 3, 3);
            let (_, ops) = draw(&m, Regime::PerTimeNodes, 12, seed, false);
            let e = DVector::from_fn(ops.len(), |i, _| ((i as u64 + seed) as f64).cos());
            let b = error_bound_direct(&ops, &m, &e, 0.3).unwrap();
            let bs = error_bound_direct(&ops, &m, &(&e * scale), 0.3).unwrap();
            prop_assert!((bs - scale.abs() * b).abs() <= 1e-12 * (1.0 + bs));
        }
    }
}
