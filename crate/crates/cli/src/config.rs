//! Experiment configuration: TOML file + flag overrides, fully serialized
//! into every run's output directory for reproducibility.

use fedcast_core::data::ArchetypeSpec;
use fedcast_core::neural::OptimizerConfig;
use fedcast_core::schemes::Scheme;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "FEDCAST_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_lstm_hidden")]
    pub lstm_hidden: usize,
    pub out_dir: PathBuf,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub centralized_scope: CentralizedScope,
    #[serde(default)]
    pub centralized_alp: CentralizedAlp,
    /// Client chosen for the clustering ablation curves; defaults to the
    /// lexicographically first client.
    #[serde(default)]
    pub probe_client: Option<String>,
    /// Emit per-prediction CSV traces (timestamp, actual kWh, predicted kWh).
    #[serde(default)]
    pub emit_traces: bool,
    pub data: DataSource,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_lookback() -> usize {
    24
}
fn default_train_fraction() -> f64 {
    0.75
}
fn default_lstm_hidden() -> usize {
    20
}
fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Federated, Scheme::Centralized, Scheme::Local]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentralizedScope {
    /// Pool data within each cluster (fills the per-cluster tables).
    #[default]
    PerCluster,
    /// One model over the whole fleet's pooled data.
    WholeFleet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentralizedAlp {
    /// Train a dedicated model on the cluster's aggregate series.
    #[default]
    AggregateTrained,
    /// Sum the centralized per-client forecasts instead.
    Summed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic { length_hours: usize, archetypes: Vec<ArchetypeSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_fc1")]
    pub fc1: Vec<usize>,
    #[serde(default = "default_fc2")]
    pub fc2: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: Vec<usize>,
    /// Cap candidate epochs during the search to keep desk-scale runs fast.
    #[serde(default)]
    pub fast: bool,
}

fn default_fc1() -> Vec<usize> {
    vec![32, 44, 56, 68]
}
fn default_fc2() -> Vec<usize> {
    vec![85, 127, 198]
}
fn default_epochs() -> Vec<usize> {
    vec![103, 148, 247, 291]
}

impl Default for GridSection {
    fn default() -> Self {
        Self { fc1: default_fc1(), fc2: default_fc2(), epochs: default_epochs(), fast: false }
    }
}

impl GridSection {
    pub fn to_grid(&self) -> fedcast_core::hypertune::HyperGrid {
        fedcast_core::hypertune::HyperGrid {
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
            epochs: self.epochs.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default)]
    pub mode: ClusterMode,
    /// Cluster count in fixed mode.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Relative inertia drop below which the elbow stops.
    #[serde(default = "default_drop_threshold")]
    pub drop_threshold: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Largest k the elbow scan tries (clamped to the client count).
    #[serde(default = "default_k_max")]
    pub k_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    #[default]
    Fixed,
    Elbow,
}

fn default_k() -> usize {
    5
}
fn default_drop_threshold() -> f64 {
    0.15
}
fn default_restarts() -> usize {
    10
}
fn default_k_max() -> usize {
    10
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            mode: ClusterMode::Fixed,
            k: default_k(),
            drop_threshold: default_drop_threshold(),
            restarts: default_restarts(),
            k_max: default_k_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    /// Communication rounds T; when absent, each cluster runs
    /// ceil(cluster epochs / local_epochs) rounds so the total training
    /// budget matches the tuned epoch count.
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_removal_factor")]
    pub removal_factor: f64,
    #[serde(default = "default_removal_lag")]
    pub removal_lag: usize,
    /// Deterrent detection on/off (off runs plain FedAvg).
    #[serde(default = "default_removal_enabled")]
    pub removal_enabled: bool,
}

fn default_local_epochs() -> usize {
    5
}
fn default_removal_factor() -> f64 {
    1.6
}
fn default_removal_lag() -> usize {
    20
}
fn default_removal_enabled() -> bool {
    true
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds: None,
            local_epochs: default_local_epochs(),
            removal_factor: default_removal_factor(),
            removal_lag: default_removal_lag(),
            removal_enabled: default_removal_enabled(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config `{}`: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lookback == 0 {
            return Err("lookback must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err("train_fraction must lie strictly between 0 and 1".into());
        }
        if self.lstm_hidden == 0 {
            return Err("lstm_hidden must be >= 1".into());
        }
        if self.schemes.is_empty() {
            return Err("at least one scheme must be selected".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for scheme in &self.schemes {
            if !seen.insert(scheme) {
                return Err(format!("scheme `{scheme}` listed twice"));
            }
        }
        self.grid.to_grid().validate().map_err(|e| e.to_string())?;
        if self.cluster.k == 0 || self.cluster.k_max == 0 {
            return Err("cluster.k and cluster.k_max must be >= 1".into());
        }
        if self.cluster.restarts == 0 {
            return Err("cluster.restarts must be >= 1".into());
        }
        if !(self.cluster.drop_threshold > 0.0 && self.cluster.drop_threshold < 1.0) {
            return Err("cluster.drop_threshold must lie in (0, 1)".into());
        }
        if self.federation.local_epochs == 0 {
            return Err("federation.local_epochs must be >= 1".into());
        }
        if self.federation.rounds == Some(0) {
            return Err("federation.rounds must be >= 1 when set".into());
        }
        if self.federation.removal_factor.is_nan() || self.federation.removal_factor <= 1.0 {
            return Err("federation.removal_factor must exceed 1".into());
        }
        if self.federation.removal_lag == 0 {
            return Err("federation.removal_lag must be >= 1".into());
        }
        match &self.data {
            DataSource::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err("data.path must not be empty".into());
                }
            }
            DataSource::Synthetic { length_hours, archetypes } => {
                if *length_hours < self.lookback + 2 {
                    return Err(format!(
                        "data.length_hours must be at least lookback + 2 = {}",
                        self.lookback + 2
                    ));
                }
                if archetypes.is_empty() || archetypes.iter().all(|a| a.clients == 0) {
                    return Err("data.archetypes must define at least one client".into());
                }
            }
        }
        Ok(())
    }

    /// Hash of the experiment parameters. The output location is normalized
    /// away: two runs of the same experiment writing to different
    /// directories share a hash; artifacts from different experiments never do.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.out_dir = PathBuf::new();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..16])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}
