//! Eigen-decomposition of the normalized Laplacian, the heat-diffusion model
//! `A = exp(-dt L)` observed over `T` instants, and the orthonormal basis of
//! lifted bandlimited trajectories.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    sigma: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    /// Eigenvalues in ascending order.
    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    /// Orthonormal eigenvectors; column `i` pairs with `sigma()[i]`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }
}

/// Full symmetric eigen-decomposition with ascending eigenvalues.
///
/// Each eigenvector is flipped so that its first entry above `1e-12` in
/// magnitude is positive.
pub fn eigendecompose(l: &DMatrix<f64>) -> Result<SpectralBasis> {
    let n = l.nrows();
    if n == 0 || l.ncols() != n {
        return Err(invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            l.nrows(),
            l.ncols()
        )));
    }
    let max_asymmetry = (l - l.transpose()).amax();
    if !(max_asymmetry <= 1e-10) {
        return Err(Error::NotSymmetric { max_asymmetry });
    }
    let sym = (l + l.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 100 * n.max(10))
        .ok_or(Error::EigenNoConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));

    let sigma = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(SpectralBasis { sigma, vectors })
}

/// `f_T(lambda) = sqrt(sum_{t < T} lambda^{2t})`.
pub fn trajectory_energy(lambda: f64, horizon: usize) -> f64 {
    let l2 = lambda * lambda;
    let mut acc = 0.0;
    let mut term = 1.0;
    for _ in 0..horizon {
        acc += term;
        term *= l2;
    }
    acc.sqrt()
}

/// Heat diffusion `x_t = A^t x_0` with `A = exp(-dt L)`, observed at
/// `t = 0, ..., T-1`, for signals of bandwidth `k`.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    basis: Arc<SpectralBasis>,
    delta_t: f64,
    horizon: usize,
    bandwidth: usize,
    lambda: Vec<f64>,
    energy: Vec<f64>,
    /// `powers[t][l] = lambda_l^t`.
    powers: Vec<Vec<f64>>,
}

pub fn make_diffusion(
    basis: Arc<SpectralBasis>,
    delta_t: f64,
    horizon: usize,
    bandwidth: usize,
) -> Result<DiffusionModel> {
    let n = basis.n();
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(invalid(format!("time step must be positive, got {delta_t}")));
    }
    if horizon == 0 {
        return Err(invalid("horizon T must be at least 1"));
    }
    if bandwidth == 0 || bandwidth > n {
        return Err(invalid(format!(
            "bandwidth must satisfy 1 <= k <= n = {n}, got {bandwidth}"
        )));
    }
    if bandwidth < n {
        let sigma_k = basis.sigma[bandwidth - 1];
        let sigma_next = basis.sigma[bandwidth];
        if !(sigma_k < sigma_next - 1e-10) {
            return Err(Error::BandEdgeTie {
                k: bandwidth,
                sigma_k,
                sigma_next,
            });
        }
    }
    let lambda: Vec<f64> = basis.sigma.iter().map(|&s| (-delta_t * s).exp()).collect();
    let energy = lambda.iter().map(|&l| trajectory_energy(l, horizon)).collect();
    let mut powers = Vec::with_capacity(horizon);
    let mut current = vec![1.0; n];
    for _ in 0..horizon {
        powers.push(current.clone());
        for (c, &l) in current.iter_mut().zip(&lambda) {
            *c *= l;
        }
    }
    Ok(DiffusionModel {
        basis,
        delta_t,
        horizon,
        bandwidth,
        lambda,
        energy,
        powers,
    })
}

impl DiffusionModel {
    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn shared_basis(&self) -> Arc<SpectralBasis> {
        Arc::clone(&self.basis)
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Diffusion eigenvalues `exp(-dt sigma_i)`, nonincreasing.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `f_T(lambda_i)` for every mode, not only the band.
    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    /// `lambda_l^t` for all modes at time `t`.
    pub fn powers(&self, t: usize) -> &[f64] {
        &self.powers[t]
    }

    /// `f_T(lambda_k)`, the lower embedding constant of the lifting map.
    pub fn energy_at_band_edge(&self) -> f64 {
        self.energy[self.bandwidth - 1]
    }

    /// `f_T(lambda_{k+1})`, or `None` when `k = n`.
    pub fn energy_past_band_edge(&self) -> Option<f64> {
        self.energy.get(self.bandwidth).copied()
    }

    /// Row `idx = i + t n` of the lifted band basis `pi U_k`, i.e.
    /// `u_l(i) lambda_l^t` for `l < k`.
    pub fn lifted_band_row(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.n();
        let (t, i) = (idx / n, idx % n);
        let u = self.basis.vectors.row(i);
        (0..self.bandwidth).map(move |l| u[l] * self.powers[t][l])
    }

    /// Like [`lifted_band_row`](Self::lifted_band_row) over all `n` modes.
    pub fn lifted_full_row(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.n();
        let (t, i) = (idx / n, idx % n);
        let u = self.basis.vectors.row(i);
        (0..n).map(move |l| u[l] * self.powers[t][l])
    }
}

/// The `Tn x k` matrix whose block `t` is `U_k diag(lambda^t / f_T(lambda))`.
/// Its columns are orthonormal and span the lifted bandlimited signals.
#[derive(Debug, Clone)]
pub struct ExtendedBasis {
    matrix: DMatrix<f64>,
    n: usize,
    horizon: usize,
}

pub fn extended_basis(model: &DiffusionModel) -> ExtendedBasis {
    let n = model.n();
    let (horizon, k) = (model.horizon(), model.bandwidth());
    let u = model.basis().vectors();
    let matrix = DMatrix::from_fn(horizon * n, k, |row, l| {
        let (t, i) = (row / n, row % n);
        u[(i, l)] * model.powers(t)[l] / model.energy()[l]
    });
    ExtendedBasis { matrix, n, horizon }
}

impl ExtendedBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn bandwidth(&self) -> usize {
        self.matrix.ncols()
    }

    /// `|U~^T delta_idx|^2` for a space-time index `idx = i + t n`.
    pub fn row_norm_sq(&self, idx: usize) -> f64 {
        self.matrix.row(idx).norm_squared()
    }

    /// The `T x k` submatrix of rows `i, i + n, ..., i + (T-1) n`.
    pub fn node_block(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizon, self.bandwidth(), |t, l| self.matrix[(i + t * self.n, l)])
    }

    /// Squared spectral norm of [`node_block`](Self::node_block), i.e. the
    /// largest eigenvalue of the smaller of its two Gram matrices.
    pub fn node_block_norm_sq(&self, i: usize) -> f64 {
        let block = self.node_block(i);
        let gram = if block.nrows() <= block.ncols() {
            &block * block.transpose()
        } else {
            block.transpose() * &block
        };
        gram.symmetric_eigenvalues().max().max(0.0)
    }
}

/// `pi(x) = [x; A x; ...; A^{T-1} x]`, computed in the eigenbasis.
pub fn lift(model: &DiffusionModel, x: &DVector<f64>) -> DVector<f64> {
    let n = model.n();
    assert_eq!(x.len(), n, "signal length must match the graph");
    let u = model.basis().vectors();
    let coeffs = u.tr_mul(x);
    let mut out = DVector::zeros(model.horizon() * n);
    for t in 0..model.horizon() {
        let scaled = coeffs.component_mul(&DVector::from_column_slice(model.powers(t)));
        out.rows_mut(t * n, n).copy_from(&(u * scaled));
    }
    out
}

/// Spectral penalty `g(L)` used by regularized reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltySpec {
    /// `g(L) = L^p` with `p >= 1`.
    Power(u32),
    /// `g(L) = exp(I - L)`, decreasing in the eigenvalue.
    ExpShift,
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PenaltySpec::Power(0) => Err(Error::UnsupportedPenalty("power must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, sigma: f64) -> f64 {
        match *self {
            PenaltySpec::Power(p) => sigma.max(0.0).powi(p as i32),
            PenaltySpec::ExpShift => (1.0 - sigma).exp(),
        }
    }

    pub fn is_nondecreasing(&self) -> bool {
        matches!(self, PenaltySpec::Power(_))
    }
}

impl fmt::Display for PenaltySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltySpec::Power(1) => f.write_str("L"),
            PenaltySpec::Power(p) => write!(f, "L^{p}"),
            PenaltySpec::ExpShift => f.write_str("exp(I-L)"),
        }
    }
}

impl FromStr for PenaltySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let spec = match compact.as_str() {
            "L" => PenaltySpec::Power(1),
            "exp(I-L)" | "exp-shift" => PenaltySpec::ExpShift,
            other => {
                let power = other
                    .strip_prefix("L^")
                    .map(|p| p.trim_start_matches('{').trim_end_matches('}'))
                    .ok_or_else(|| Error::UnsupportedPenalty(s.to_string()))?;
                let p = power
                    .parse::<u32>()
                    .map_err(|_| Error::UnsupportedPenalty(s.to_string()))?;
                PenaltySpec::Power(p)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `U diag(g(sigma)) U^T x`.
pub fn apply_penalty_spectrum(basis: &SpectralBasis, g: PenaltySpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    g.validate()?;
    let u = basis.vectors();
    let mut coeffs = u.tr_mul(x);
    for (c, &s) in coeffs.iter_mut().zip(basis.sigma().iter()) {
        *c *= g.eval(s);
    }
    Ok(u * coeffs)
}
