use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use diffusion_sampling::coherence::{coherence, profile_csv};
use diffusion_sampling::embedding::{embedding_probability, lower_embedding_constant, EmbeddingEstimate};
use diffusion_sampling::graph::{build_knn_feature_graph, normalized_laplacian};
use diffusion_sampling::reconstruct::{
    error_bound_direct, error_bound_regularized, observe, reconstruct_direct, Observation, ReconRow, RegularizedSolver,
    SolverChoice,
};
use diffusion_sampling::sampling::{
    build_operators, derive_seed, draw_sample_set, optimal_distribution, uniform_distribution, Budget, Regime,
    SampleSet, SamplingDistribution, SamplingOperators,
};
use diffusion_sampling::spectral::{
    eigendecompose, extended_basis, make_diffusion, DiffusionModel, ExtendedBasis, PenaltySpec,
};
use diffusion_sampling::Error;

use crate::config::{DistributionKind, ExperimentConfig};
use crate::manifest::Manifest;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenGraph,
    Coherence,
    EmbedSweep,
    ReconSweep,
    FeatureDemo,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::GenGraph,
        Command::Coherence,
        Command::EmbedSweep,
        Command::ReconSweep,
        Command::FeatureDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenGraph => "gen-graph",
            Command::Coherence => "coherence",
            Command::EmbedSweep => "embed-sweep",
            Command::ReconSweep => "recon-sweep",
            Command::FeatureDemo => "feature-demo",
        }
    }
}

/// Seed streams derived from the master seed.
mod stream {
    pub const SIGNALS: u64 = 2;
    pub const FEATURES: u64 = 4;
    pub const EMBED: u64 = 1000;
    pub const RECON_DRAW: u64 = 2000;
    pub const RECON_NOISE: u64 = 3000;
    pub const FEATURE_DRAW: u64 = 4000;
}

struct Outputs {
    dir: PathBuf,
    paths: Vec<PathBuf>,
    manifest: Manifest,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.manifest.record(&path, contents.as_bytes());
        info!("wrote {}", path.display());
        self.paths.push(path);
        Ok(())
    }

    fn note(&mut self, message: String) {
        warn!("{message}");
        self.manifest.notes.push(message);
    }
}

/// Runs one command with a resolved configuration.
pub fn execute(command: Command, config: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    let mut out = Outputs {
        dir,
        paths: Vec::new(),
        manifest: Manifest::new(command.name(), config),
    };
    match command {
        Command::GenGraph => gen_graph(config, &mut out)?,
        Command::Coherence => coherence_report(config, &mut out)?,
        Command::EmbedSweep => embed_sweep(config, &mut out)?,
        Command::ReconSweep => recon_sweep(config, &mut out)?,
        Command::FeatureDemo => feature_demo(config, &mut out)?,
    }
    let path = out.dir.join(format!("manifest-{}.json", command.name()));
    fs::write(&path, out.manifest.to_json())?;
    out.paths.push(path);
    Ok(out.paths)
}

fn distribution(kind: DistributionKind, regime: Regime, eb: &ExtendedBasis) -> Result<SamplingDistribution, Error> {
    match kind {
        DistributionKind::Uniform => uniform_distribution(regime, eb.n(), eb.horizon()),
        DistributionKind::Optimal => optimal_distribution(regime, eb),
    }
}

fn dist_index(kind: DistributionKind) -> u64 {
    match kind {
        DistributionKind::Uniform => 0,
        DistributionKind::Optimal => 1,
    }
}

fn regimes(numbers: &[u8]) -> Vec<Regime> {
    numbers
        .iter()
        .map(|&r| Regime::from_number(r).expect("validated"))
        .collect()
}

fn gen_graph(config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let graph = config.build_graph()?;
    out.write("graph.txt", &graph.to_edge_list())?;
    let basis = eigendecompose(&normalized_laplacian(&graph)?)?;
    let mut csv = String::from("index,sigma\n");
    for (i, s) in basis.sigma().iter().enumerate() {
        let _ = writeln!(csv, "{},{:e}", i + 1, s);
    }
    out.write("spectrum.csv", &csv)
}

fn coherence_report(config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let basis = config.build_basis()?;
    let kinds = [DistributionKind::Uniform, DistributionKind::Optimal];
    let rows = config
        .coherence
        .horizons
        .par_iter()
        .map(|&t| -> Result<Vec<String>, CliError> {
            let model = config.diffusion_model(Arc::clone(&basis), t)?;
            let eb = extended_basis(&model);
            let mut lines = Vec::new();
            for kind in kinds {
                let mut values = Vec::with_capacity(3);
                let mut degenerate = false;
                for regime in Regime::ALL {
                    let d = distribution(kind, regime, &eb)?;
                    let report = coherence(regime, &eb, &d)?;
                    degenerate |= report.is_degenerate();
                    values.push(report.total());
                }
                let tf = t as f64;
                lines.push(format!(
                    "{t},{kind},{:e},{:e},{:e},{}",
                    values[0],
                    values[1] / tf,
                    values[2] / tf,
                    u8::from(degenerate)
                ));
            }
            Ok(lines)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("T,distribution,nu1_sq,nu2_sq_sum_over_T,nu3_sq_over_T,degenerate\n");
    for line in rows.into_iter().flatten() {
        csv.push_str(&line);
        csv.push('\n');
    }
    out.write("coherence.csv", &csv)?;

    if config.coherence.profiles {
        let model = config.diffusion_model(basis, config.diffusion.horizon)?;
        let eb = extended_basis(&model);
        for regime in Regime::ALL {
            for kind in kinds {
                let d = distribution(kind, regime, &eb)?;
                let text = profile_csv(regime, &eb, &d)?;
                out.write(&format!("profile_r{}_{kind}.csv", regime.number()), &text)?;
            }
        }
    }
    Ok(())
}

fn embed_sweep(config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let master = config.master_seed()?;
    let basis = config.build_basis()?;
    let horizon = config.diffusion.horizon;
    let model = config.diffusion_model(basis, horizon)?;
    let eb = extended_basis(&model);
    let e = &config.embed;
    for regime in regimes(&e.regimes) {
        for &kind in &e.distributions {
            let d = distribution(kind, regime, &eb)?;
            let stream = derive_seed(
                master,
                stream::EMBED + 10 * u64::from(regime.number()) + dist_index(kind),
            );
            let estimates = e
                .budgets
                .iter()
                .enumerate()
                .map(|(b, &total)| {
                    let budget = Budget::from_total(regime, total, horizon)?;
                    embedding_probability(
                        &model,
                        &d,
                        &budget,
                        e.trials,
                        e.threshold,
                        derive_seed(stream, b as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut csv = format!("{}\n", EmbeddingEstimate::CSV_HEADER);
            for est in &estimates {
                csv.push_str(&est.csv_row());
                csv.push('\n');
            }
            out.write(&format!("embed_r{}_{kind}.csv", regime.number()), &csv)?;
            for (i, a) in estimates.iter().enumerate() {
                for b in &estimates[i + 1..] {
                    if b.total_samples >= 2 * a.total_samples && b.prob < a.prob - 0.1 {
                        out.note(format!(
                            "regime {} {kind}: probability drops from {} at M={} to {} at M={}",
                            regime.number(),
                            a.prob,
                            a.total_samples,
                            b.prob,
                            b.total_samples
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// `count` unit-norm signals `U_k c` with Gaussian coefficients `c`.
pub fn random_bandlimited_signals(model: &DiffusionModel, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.bandwidth();
    let u = model.basis().vectors().columns(0, k);
    (0..count)
        .map(|_| {
            let c = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = u * c;
            let norm = x.norm();
            x / norm
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Method {
    Direct,
    Regularized(PenaltySpec, f64),
}

struct Design<'a> {
    model: &'a DiffusionModel,
    omega: SampleSet,
    ops: SamplingOperators,
    delta_lower: f64,
}

fn recon_sweep(config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let master = config.master_seed()?;
    let basis = config.build_basis()?;
    let horizon = config.diffusion.horizon;
    let model = config.diffusion_model(basis, horizon)?;
    let eb = extended_basis(&model);
    let r = &config.recon;
    let signals = random_bandlimited_signals(&model, r.signals, derive_seed(master, stream::SIGNALS));

    let mut methods = vec![Method::Direct];
    for g in config.penalties() {
        for &gamma in &r.gammas {
            methods.push(Method::Regularized(g, gamma));
        }
    }

    let mut csv = format!("{}\n", ReconRow::CSV_HEADER);
    let mut best = String::from("regime,g,sigma,best_gamma,best_err_total\n");
    for regime in regimes(&r.regimes) {
        let d = distribution(r.distribution, regime, &eb)?;
        let budget = Budget::from_total(regime, r.samples, horizon)?;
        let omega = draw_sample_set(
            &d,
            &budget,
            derive_seed(master, stream::RECON_DRAW + u64::from(regime.number())),
        )?;
        let ops = build_operators(&omega, &d)?;
        let design = Design {
            model: &model,
            delta_lower: lower_embedding_constant(&ops, &model)?,
            omega,
            ops,
        };
        let noise_stream = derive_seed(master, stream::RECON_NOISE + u64::from(regime.number()));
        let observations = r
            .noise
            .iter()
            .enumerate()
            .map(|(si, &sigma)| {
                signals
                    .iter()
                    .enumerate()
                    .map(|(s, x)| {
                        let seed = derive_seed(noise_stream, (si * signals.len() + s) as u64);
                        observe(x, &model, &design.omega, sigma, seed)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;

        // rows[method][noise level]
        let rows = methods
            .par_iter()
            .map(|&method| method_rows(&design, method, &signals, &observations, r.noise.as_slice(), r.delta))
            .collect::<Result<Vec<_>, CliError>>()?;
        for si in 0..r.noise.len() {
            for per_method in &rows {
                csv.push_str(&per_method[si].csv_row());
                csv.push('\n');
            }
        }

        for g in config.penalties() {
            let mut previous: Option<f64> = None;
            for (si, &sigma) in r.noise.iter().enumerate() {
                let (gamma, err) = rows
                    .iter()
                    .filter(|row| row[si].g == Some(g))
                    .map(|row| (row[si].gamma.expect("regularized row"), row[si].err_total))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("at least one gamma");
                let _ = writeln!(best, "{},{g},{sigma},{gamma:e},{err:e}", regime.number());
                if let Some(prev) = previous {
                    if err < 0.8 * prev {
                        out.note(format!(
                            "regime {} {g}: best error falls from {prev:e} to {err:e} at sigma {sigma}",
                            regime.number()
                        ));
                    }
                }
                previous = Some(err);
            }
        }
    }
    out.write("recon.csv", &csv)?;
    out.write("recon_best.csv", &best)
}

fn method_rows(
    design: &Design<'_>,
    method: Method,
    signals: &[DVector<f64>],
    observations: &[Vec<Observation>],
    noise: &[f64],
    delta: f64,
) -> Result<Vec<ReconRow>, CliError> {
    let model = design.model;
    let ops = &design.ops;
    let solver = match method {
        Method::Direct => None,
        Method::Regularized(g, gamma) => Some(RegularizedSolver::new(ops, model, gamma, g, SolverChoice::Auto)?),
    };
    let count = signals.len() as f64;
    let mut rows = Vec::with_capacity(noise.len());
    for (si, &sigma) in noise.iter().enumerate() {
        let (mut total, mut alpha, mut beta) = (0.0, 0.0, 0.0);
        let (mut bound_alpha, mut bound_beta) = (Some(0.0), Some(0.0));
        for (x, obs) in signals.iter().zip(&observations[si]) {
            let result = match &solver {
                None => reconstruct_direct(obs, ops, model)?,
                Some(s) => s.solve(obs)?,
            };
            let err = result.errors(x);
            total += err.total / count;
            alpha += err.alpha / count;
            beta += err.beta / count;
            let bounds = match method {
                Method::Direct => (Some(error_bound_direct(ops, model, obs.noise(), delta)?), None),
                Method::Regularized(g, gamma) => {
                    match error_bound_regularized(ops, model, obs.noise(), delta, gamma, g, x.norm()) {
                        Ok(b) => (Some(b.alpha), Some(b.beta)),
                        Err(Error::UnsupportedPenalty(_) | Error::InvalidParameter(_)) => (None, None),
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            bound_alpha = bound_alpha.zip(bounds.0).map(|(a, b)| a + b / count);
            bound_beta = bound_beta.zip(bounds.1).map(|(a, b)| a + b / count);
        }
        let (gamma, g) = match method {
            Method::Direct => (None, None),
            Method::Regularized(g, gamma) => (Some(gamma), Some(g)),
        };
        rows.push(ReconRow {
            regime: ops.regime().number(),
            total_samples: ops.len(),
            sigma,
            gamma,
            g,
            err_total: total,
            err_alpha: alpha,
            err_beta: beta,
            bound_alpha,
            bound_beta,
            delta_lower: design.delta_lower,
        });
    }
    Ok(rows)
}

/// Piecewise-smooth `d x n` feature matrix plus Gaussian noise.
///
/// Columns are split into `clusters` groups of geometrically decreasing
/// size, mimicking image regions. A column is its group's random centre plus
/// a smooth part that mixes the `rank` lowest nonconstant cosine modes
/// `cos(pi a z_1) cos(pi b z_2)` of a point `z` drawn uniformly from the
/// unit square.
pub fn synthetic_features(d: usize, n: usize, rank: usize, clusters: usize, noise: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = clusters.clamp(1, n);
    let shares: Vec<f64> = (0..clusters).map(|c| 0.6f64.powi(c as i32)).collect();
    let total: f64 = shares.iter().sum();
    let mut group = Vec::with_capacity(n);
    for (c, share) in shares.iter().enumerate() {
        let size = if c + 1 == clusters {
            n - group.len()
        } else {
            ((share / total) * n as f64).round().max(1.0) as usize
        };
        group.extend(std::iter::repeat_n(c, size.min(n - group.len())));
    }
    let centres = DMatrix::from_fn(d, clusters, |_, _| rng.sample::<f64, _>(StandardNormal));
    let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let mut modes = Vec::with_capacity(rank);
    'outer: for level in 1usize.. {
        for a in 0..=level {
            modes.push((a as f64, (level - a) as f64));
            if modes.len() == rank {
                break 'outer;
            }
        }
    }
    let phi = DMatrix::from_fn(rank, n, |j, i| {
        let (a, b) = modes[j];
        let [z1, z2] = points[i];
        (std::f64::consts::PI * a * z1).cos() * (std::f64::consts::PI * b * z2).cos()
    });
    let mix = DMatrix::from_fn(d, rank, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let mut x = mix * phi;
    for (i, &c) in group.iter().enumerate() {
        let mut col = x.column_mut(i);
        col += centres.column(c);
    }
    if noise > 0.0 {
        for v in x.iter_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    x
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn feature_demo(config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let master = config.master_seed()?;
    let f = &config.feature;
    let features = synthetic_features(
        f.features,
        f.nodes,
        f.rank,
        f.clusters,
        f.noise,
        derive_seed(master, stream::FEATURES),
    );
    out.write("feature_matrix.csv", &matrix_csv(&features))?;
    let graph = build_knn_feature_graph(&features, f.neighbors)?;
    let basis = Arc::new(eigendecompose(&normalized_laplacian(&graph)?)?);
    let model = make_diffusion(basis, f.delta_t, f.horizon, f.bandwidth)?;
    let eb = extended_basis(&model);
    let g: PenaltySpec = f.penalty.parse()?;
    let norm = features.norm();

    let mut errors = String::from("regime,distribution,row,rel_error\n");
    let mut snr = String::from("regime,distribution,M,delta_lower,snr_db\n");
    let mut table = Vec::new();
    for regime in regimes(&f.regimes) {
        for &kind in &f.distributions {
            let d = distribution(kind, regime, &eb)?;
            let budget = Budget::from_total(regime, f.samples, f.horizon)?;
            let seed = derive_seed(
                master,
                stream::FEATURE_DRAW + 10 * u64::from(regime.number()) + dist_index(kind),
            );
            let omega = draw_sample_set(&d, &budget, seed)?;
            let ops = build_operators(&omega, &d)?;
            let delta_lower = lower_embedding_constant(&ops, &model)?;
            let solver = RegularizedSolver::new(&ops, &model, f.gamma, g, SolverChoice::Auto)?;
            let rows = (0..f.features)
                .into_par_iter()
                .map(|r| -> Result<DVector<f64>, CliError> {
                    let x = features.row(r).transpose();
                    let obs = observe(&x, &model, &omega, 0.0, 0)?;
                    Ok(solver.solve(&obs)?.x_star)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let recon = DMatrix::from_fn(f.features, f.nodes, |r, i| rows[r][i]);
            for r in 0..f.features {
                let x = features.row(r);
                let rel = (recon.row(r) - x).norm() / x.norm();
                let _ = writeln!(errors, "{},{kind},{r},{rel:e}", regime.number());
            }
            let value = 20.0 * (norm / (&recon - &features).norm()).log10();
            let _ = writeln!(
                snr,
                "{},{kind},{},{delta_lower:e},{value:e}",
                regime.number(),
                ops.len()
            );
            table.push((regime, kind, value));
            out.write(
                &format!("feature_recon_r{}_{kind}.csv", regime.number()),
                &matrix_csv(&recon),
            )?;
        }
    }
    out.write("feature_errors.csv", &errors)?;
    out.write("feature_snr.csv", &snr)?;

    let lookup =
        |regime: Regime, kind: DistributionKind| table.iter().find(|e| e.0 == regime && e.1 == kind).map(|e| e.2);
    for regime in [Regime::PerTimeNodes, Regime::SpaceTime] {
        if let (Some(u), Some(o)) = (
            lookup(regime, DistributionKind::Uniform),
            lookup(regime, DistributionKind::Optimal),
        ) {
            if o < u {
                out.note(format!(
                    "regime {regime}: optimal SNR {o:.2} dB below uniform {u:.2} dB"
                ));
            }
        }
        for kind in [DistributionKind::Uniform, DistributionKind::Optimal] {
            if let (Some(one), Some(v)) = (lookup(Regime::FixedNodes, kind), lookup(regime, kind)) {
                if v < one {
                    out.note(format!(
                        "{kind}: regime {regime} SNR {v:.2} dB below regime 1 {one:.2} dB"
                    ));
                }
            }
        }
    }
    Ok(())
}
