//! Experiment configuration: a TOML document with one section per command.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffusion_sampling::graph::{
    build_community_graph, build_disconnected_regular, build_path_graph, build_ring_graph, build_sensor_graph,
    normalized_laplacian, Graph,
};
use diffusion_sampling::sampling::{derive_seed, Regime};
use diffusion_sampling::spectral::{eigendecompose, make_diffusion, DiffusionModel, PenaltySpec, SpectralBasis};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Every random stream of a run is derived from it.
    pub seed: Option<u64>,
    pub out_dir: String,
    pub graph: GraphConfig,
    pub diffusion: DiffusionConfig,
    pub coherence: CoherenceConfig,
    pub embed: EmbedConfig,
    pub recon: ReconConfig,
    pub feature: FeatureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            out_dir: "out".into(),
            graph: GraphConfig::default(),
            diffusion: DiffusionConfig::default(),
            coherence: CoherenceConfig::default(),
            embed: EmbedConfig::default(),
            recon: ReconConfig::default(),
            feature: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Community,
    Path,
    Ring,
    Sensor,
    Disconnected,
    EdgeList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub kind: GraphKind,
    /// Community sizes (community) or component sizes (disconnected).
    pub sizes: Vec<usize>,
    /// Node count for path, ring and sensor graphs.
    pub nodes: usize,
    /// Neighbour count for sensor graphs.
    pub neighbors: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Edge-list file for `kind = "edge-list"`.
    pub path: Option<String>,
    /// Generator seed; derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let mut sizes = vec![13];
        sizes.extend([109; 8]);
        sizes.push(115);
        GraphConfig {
            kind: GraphKind::Community,
            sizes,
            nodes: 1000,
            neighbors: 8,
            p_intra: 0.3,
            p_inter: 0.002,
            path: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub delta_t: f64,
    pub horizon: usize,
    pub bandwidth: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            delta_t: 4.0,
            horizon: 20,
            bandwidth: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Uniform,
    Optimal,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionKind::Uniform => "uniform",
            DistributionKind::Optimal => "optimal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceConfig {
    pub horizons: Vec<usize>,
    /// Also write per-location profiles at the diffusion horizon.
    pub profiles: bool,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            horizons: (1..=20).collect(),
            profiles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub regimes: Vec<u8>,
    pub distributions: Vec<DistributionKind>,
    /// Total sample counts M.
    pub budgets: Vec<usize>,
    pub trials: usize,
    pub threshold: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            regimes: vec![1, 2, 3],
            distributions: vec![DistributionKind::Uniform, DistributionKind::Optimal],
            budgets: (1..=25).map(|i| 20 * i).collect(),
            trials: 250,
            threshold: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub regimes: Vec<u8>,
    pub distribution: DistributionKind,
    pub samples: usize,
    pub signals: usize,
    pub noise: Vec<f64>,
    pub gammas: Vec<f64>,
    pub penalties: Vec<String>,
    /// Embedding level used by the error bounds.
    pub delta: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            regimes: vec![1, 2, 3],
            distribution: DistributionKind::Optimal,
            samples: 200,
            signals: 10,
            noise: vec![0.0, 1.5e-3, 3.7e-3, 8.8e-3, 2.1e-2, 5.0e-2],
            gammas: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            penalties: vec!["L".into(), "L^2".into(), "L^4".into(), "exp(I-L)".into()],
            delta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Number of feature vectors, i.e. graph nodes.
    pub nodes: usize,
    /// Feature dimension, i.e. number of reconstructed rows.
    pub features: usize,
    /// Rank of the smooth part of the feature matrix.
    pub rank: usize,
    /// Number of feature groups, of geometrically decreasing size.
    pub clusters: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub neighbors: usize,
    pub delta_t: f64,
    pub horizon: usize,
    pub bandwidth: usize,
    pub samples: usize,
    pub gamma: f64,
    pub penalty: String,
    pub regimes: Vec<u8>,
    pub distributions: Vec<DistributionKind>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            nodes: 600,
            features: 24,
            rank: 6,
            clusters: 6,
            noise: 0.01,
            neighbors: 20,
            delta_t: 1.0,
            horizon: 6,
            bandwidth: 30,
            samples: 720,
            gamma: 1e-5,
            penalty: "L^4".into(),
            regimes: vec![1, 2, 3],
            distributions: vec![DistributionKind::Uniform, DistributionKind::Optimal],
        }
    }
}

/// Invalid configuration value, located in the source text when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) if self.key.is_empty() => write!(f, "line {line}: {}", self.message),
            Some(line) => write!(f, "line {line}: {}: {}", self.key, self.message),
            None if self.key.is_empty() => f.write_str(&self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            line: None,
            key: key.into(),
            message: message.into(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `section.key` (or a top-level `key`) in `text`.
fn locate(text: &str, key: &str) -> Option<usize> {
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (Some(s), n),
        None => (None, key),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            current = Some(header.trim_end_matches(']').trim().to_string());
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let matches_section = match (section, current.as_deref()) {
            (None, None) => lhs == name,
            (Some(s), Some(c)) => c == s && lhs == name,
            (Some(s), None) => lhs == key || lhs == format!("{s}.{name}"),
            (None, Some(_)) => false,
        };
        if matches_section {
            return Some(i + 1);
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates a configuration document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::load(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides and validates the result.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parsed: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            key: String::new(),
            message: e.message().trim().to_string(),
        })?;
        let config = if overrides.is_empty() {
            parsed
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::at("", e.message()))?;
            for item in overrides {
                apply_override(&mut table, item)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::at("--set", e.message().trim()))?
        };
        config.validate().map_err(|mut e| {
            if e.line.is_none() {
                e.line = locate(text, &e.key);
            }
            e
        })?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// Serialization without the output directory, which does not affect
    /// any result.
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        c.to_toml()
    }

    /// SHA-256 of [`Self::canonical_toml`].
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.graph;
        match g.kind {
            GraphKind::Community => {
                if g.sizes.is_empty() || g.sizes.contains(&0) {
                    return Err(ConfigError::at("graph.sizes", "community sizes must be positive"));
                }
                check_prob("graph.p_intra", g.p_intra)?;
                check_prob("graph.p_inter", g.p_inter)?;
            }
            GraphKind::Disconnected => {
                if g.sizes.is_empty() || g.sizes.iter().any(|&s| s < 2) {
                    return Err(ConfigError::at("graph.sizes", "component sizes must be at least 2"));
                }
            }
            GraphKind::Path | GraphKind::Ring => {
                if g.nodes < 3 {
                    return Err(ConfigError::at("graph.nodes", "need at least 3 nodes"));
                }
            }
            GraphKind::Sensor => {
                if g.neighbors == 0 || g.neighbors >= g.nodes {
                    return Err(ConfigError::at("graph.neighbors", "need 1 <= neighbors < nodes"));
                }
            }
            GraphKind::EdgeList => {
                if g.path.is_none() {
                    return Err(ConfigError::at("graph.path", "edge-list graphs need a path"));
                }
            }
        }
        let d = &self.diffusion;
        check_positive("diffusion.delta_t", d.delta_t)?;
        if d.horizon == 0 {
            return Err(ConfigError::at("diffusion.horizon", "horizon must be at least 1"));
        }
        if d.bandwidth == 0 {
            return Err(ConfigError::at("diffusion.bandwidth", "bandwidth must be at least 1"));
        }
        if self.coherence.horizons.is_empty() || self.coherence.horizons.contains(&0) {
            return Err(ConfigError::at(
                "coherence.horizons",
                "horizons must be a nonempty list of positive integers",
            ));
        }

        let e = &self.embed;
        check_regimes("embed.regimes", &e.regimes)?;
        if e.distributions.is_empty() {
            return Err(ConfigError::at("embed.distributions", "list is empty"));
        }
        if e.budgets.is_empty() || e.budgets.contains(&0) {
            return Err(ConfigError::at(
                "embed.budgets",
                "budgets must be a nonempty list of positive integers",
            ));
        }
        for &m in &e.budgets {
            for &r in &e.regimes {
                if (r == 1 || r == 2) && m < d.horizon {
                    return Err(ConfigError::at(
                        "embed.budgets",
                        format!("budget {m} is below the horizon {} required by regime {r}", d.horizon),
                    ));
                }
            }
        }
        if e.trials == 0 {
            return Err(ConfigError::at("embed.trials", "trials must be at least 1"));
        }
        if !(e.threshold >= 0.0 && e.threshold.is_finite()) {
            return Err(ConfigError::at(
                "embed.threshold",
                "threshold must be a finite value >= 0",
            ));
        }

        let r = &self.recon;
        check_regimes("recon.regimes", &r.regimes)?;
        if r.samples < d.horizon && r.regimes.iter().any(|&x| x != 3) {
            return Err(ConfigError::at(
                "recon.samples",
                "regimes 1 and 2 need at least one sample per time",
            ));
        }
        if r.samples == 0 {
            return Err(ConfigError::at("recon.samples", "samples must be at least 1"));
        }
        if r.signals == 0 {
            return Err(ConfigError::at("recon.signals", "signals must be at least 1"));
        }
        if r.noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(ConfigError::at("recon.noise", "noise levels must be finite and >= 0"));
        }
        if r.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(ConfigError::at("recon.gammas", "gammas must be finite and > 0"));
        }
        for p in &r.penalties {
            parse_penalty("recon.penalties", p)?;
        }
        if !(r.delta > 0.0 && r.delta < 1.0) {
            return Err(ConfigError::at("recon.delta", "delta must lie in (0, 1)"));
        }

        let f = &self.feature;
        if f.nodes < 2 || f.neighbors == 0 || f.neighbors >= f.nodes {
            return Err(ConfigError::at("feature.neighbors", "need 1 <= neighbors < nodes"));
        }
        if f.features == 0 || f.rank == 0 {
            return Err(ConfigError::at("feature.rank", "features and rank must be positive"));
        }
        if f.clusters == 0 || f.clusters > f.nodes {
            return Err(ConfigError::at("feature.clusters", "need 1 <= clusters <= nodes"));
        }
        if !(f.noise >= 0.0 && f.noise.is_finite()) {
            return Err(ConfigError::at("feature.noise", "noise must be finite and >= 0"));
        }
        check_positive("feature.delta_t", f.delta_t)?;
        check_positive("feature.gamma", f.gamma)?;
        if f.horizon == 0 {
            return Err(ConfigError::at("feature.horizon", "horizon must be at least 1"));
        }
        if f.bandwidth == 0 || f.bandwidth >= f.nodes {
            return Err(ConfigError::at("feature.bandwidth", "need 1 <= bandwidth < nodes"));
        }
        if f.samples < f.horizon {
            return Err(ConfigError::at("feature.samples", "need at least one sample per time"));
        }
        parse_penalty("feature.penalty", &f.penalty)?;
        check_regimes("feature.regimes", &f.regimes)?;
        if f.distributions.is_empty() {
            return Err(ConfigError::at("feature.distributions", "list is empty"));
        }
        Ok(())
    }

    pub fn penalties(&self) -> Vec<PenaltySpec> {
        self.recon
            .penalties
            .iter()
            .map(|p| p.parse().expect("validated"))
            .collect()
    }

    /// Builds the configured graph. Random generators need `graph.seed` or
    /// a master seed.
    pub fn build_graph(&self) -> Result<Graph, CliError> {
        let g = &self.graph;
        let seed = || -> Result<u64, CliError> {
            g.seed
                .or(self.seed.map(|m| derive_seed(m, 0)))
                .ok_or_else(|| CliError::Config("random graphs need graph.seed or --seed".into()))
        };
        let graph = match g.kind {
            GraphKind::Community => build_community_graph(&g.sizes, g.p_intra, g.p_inter, seed()?)?,
            GraphKind::Path => build_path_graph(g.nodes)?,
            GraphKind::Ring => build_ring_graph(g.nodes)?,
            GraphKind::Sensor => build_sensor_graph(g.nodes, g.neighbors, seed()?)?,
            GraphKind::Disconnected => build_disconnected_regular(&g.sizes)?,
            GraphKind::EdgeList => {
                let path = g.path.as_deref().expect("validated");
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
                Graph::parse_edge_list(&text)?
            }
        };
        Ok(graph)
    }

    /// Spectral basis of the configured graph.
    pub fn build_basis(&self) -> Result<Arc<SpectralBasis>, CliError> {
        let graph = self.build_graph()?;
        Ok(Arc::new(eigendecompose(&normalized_laplacian(&graph)?)?))
    }

    pub fn diffusion_model(&self, basis: Arc<SpectralBasis>, horizon: usize) -> Result<DiffusionModel, CliError> {
        Ok(make_diffusion(
            basis,
            self.diffusion.delta_t,
            horizon,
            self.diffusion.bandwidth,
        )?)
    }

    /// Master seed, required by the randomized commands.
    pub fn master_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("this command needs a seed (--seed or top-level `seed`)".into()))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::at("--set", format!("expected key=value, got `{item}`")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ConfigError::at("--set", "empty key"))?;
    let mut current = table;
    for part in parts {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::at(key, "is not a section"))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

fn check_prob(key: &str, p: f64) -> Result<(), ConfigError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(ConfigError::at(key, format!("must lie in (0, 1], got {p}")))
    }
}

fn check_positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::at(key, format!("must be finite and positive, got {v}")))
    }
}

fn check_regimes(key: &str, regimes: &[u8]) -> Result<(), ConfigError> {
    if regimes.is_empty() {
        return Err(ConfigError::at(key, "list is empty"));
    }
    for &r in regimes {
        Regime::from_number(r).map_err(|_| ConfigError::at(key, format!("unknown regime {r}")))?;
    }
    Ok(())
}

fn parse_penalty(key: &str, text: &str) -> Result<PenaltySpec, ConfigError> {
    let p: PenaltySpec = text.parse().map_err(|e| ConfigError::at(key, format!("{e}")))?;
    p.validate().map_err(|e| ConfigError::at(key, format!("{e}")))?;
    Ok(p)
}
