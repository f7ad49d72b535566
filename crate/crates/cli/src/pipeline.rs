//! Stage orchestration: synthesize/ingest, tune, cluster, federate,
//! centralize, localize, report, and the clustering ablation.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts back there, so any stage can be re-run from its predecessor's
//! persisted outputs. All artifacts embed the config hash and are
//! byte-deterministic for a fixed config, at any parallelism level.

use crate::config::{CentralizedAlp, CentralizedScope, ClusterMode, DataSource, ExperimentConfig};
use crate::CliError;
use anyhow::{anyhow, bail, Context, Result};
use fedcast_core::clustering::{
    consolidate_hyperparams, elbow_select, inertia_curve, kmeans, ClusterAssignment, ClusterModel,
};
use fedcast_core::data::{
    aggregate, ingest_csv, make_windows, prepare_client, split, synthesize_fleet, write_csv,
    FleetSpec, LoadSeries, PreparedClient, Scaler, WindowedDataset,
};
use fedcast_core::federated::{
    run_federation, ClientState, FederationConfig, RoundLog,
};
use fedcast_core::hypertune::{
    grid_search, hyperparam_vector, GridSearchConfig, HyperGrid, HyperParams, TuningRecord,
};
use fedcast_core::neural::NetworkSpec;
use fedcast_core::params::ParameterVector;
use fedcast_core::schemes::{
    build_report, pool_windows, predict_alp_aggregate, predict_alp_summed, predict_ilp,
    train_centralized, train_local, write_report_csv, ClusterReport, Scheme, SchemeResult,
};
use fedcast_core::seeds::{client_train_seed, cluster_init_seed, derive_seed};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Tune,
    Cluster,
    Federate,
    Centralize,
    Localize,
    Report,
    Ablate,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Tune => "tune",
            Stage::Cluster => "cluster",
            Stage::Federate => "federate",
            Stage::Centralize => "centralize",
            Stage::Localize => "localize",
            Stage::Report => "report",
            Stage::Ablate => "ablate",
        }
    }
}

/// The stages `pipeline` runs, in order (the ablation is a separate command).
pub const PIPELINE_STAGES: [Stage; 7] = [
    Stage::Synth,
    Stage::Tune,
    Stage::Cluster,
    Stage::Federate,
    Stage::Centralize,
    Stage::Localize,
    Stage::Report,
];

pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct TuningArtifact {
    config_hash: String,
    records: Vec<TuningRecord>,
}

#[derive(Serialize, Deserialize)]
struct ElbowInfo {
    curve: Vec<(usize, f64)>,
    drop_threshold: f64,
    selected: usize,
}

#[derive(Serialize, Deserialize)]
struct ClustersArtifact {
    config_hash: String,
    assignment: ClusterAssignment,
    consolidated: BTreeMap<usize, HyperParams>,
    elbow: Option<ElbowInfo>,
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
pub struct AblationArtifact {
    pub config_hash: String,
    pub probe_client: String,
    pub clustered_k: usize,
    pub rounds: usize,
    /// Probe client's per-round training loss under clustered federation.
    pub clustered_loss: Vec<f64>,
    /// Same client under a single all-clients cluster.
    pub unclustered_loss: Vec<f64>,
}

#[derive(Serialize)]
struct ReportArtifact<'a> {
    config_hash: &'a str,
    report: &'a ClusterReport,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        config.validate().map_err(CliError::Config)?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn base_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.config.lstm_hidden, 1, 1)
    }

    fn grid(&self) -> HyperGrid {
        self.config.grid.to_grid()
    }

    fn wants(&self, scheme: Scheme) -> bool {
        self.config.schemes.contains(&scheme)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<(), CliError> {
        let run = || -> Result<()> {
            std::fs::create_dir_all(self.out())
                .with_context(|| format!("creating {}", self.out().display()))?;
            self.write_config_snapshot()?;
            match stage {
                Stage::Synth => self.stage_synth(),
                Stage::Tune => self.stage_tune(),
                Stage::Cluster => self.stage_cluster(),
                Stage::Federate => self.stage_federate(),
                Stage::Centralize => self.stage_centralize(),
                Stage::Localize => self.stage_localize(),
                Stage::Report => self.stage_report(),
                Stage::Ablate => self.stage_ablate(),
            }
        };
        run().map_err(|source| CliError::Stage { stage: stage.name(), source })
    }

    pub fn run_pipeline(&self) -> Result<(), CliError> {
        for stage in PIPELINE_STAGES {
            match stage {
                Stage::Federate if !self.wants(Scheme::Federated) => continue,
                Stage::Centralize if !self.wants(Scheme::Centralized) => continue,
                Stage::Localize if !self.wants(Scheme::Local) => continue,
                _ => {}
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn write_config_snapshot(&self) -> Result<()> {
        let path = self.out().join("config.toml");
        let body = format!("# config_hash={}\n{}", self.hash, self.config.to_toml());
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    // -- artifact paths ----------------------------------------------------

    fn fleet_path(&self) -> PathBuf {
        self.out().join("fleet.csv")
    }

    fn tuning_path(&self) -> PathBuf {
        self.out().join("tuning.json")
    }

    fn clusters_path(&self) -> PathBuf {
        self.out().join("clusters.json")
    }

    fn rounds_path(&self, cluster: usize) -> PathBuf {
        self.out().join(format!("rounds_cluster{cluster}.jsonl"))
    }

    fn federated_weights_path(&self, cluster: usize) -> PathBuf {
        self.out().join(format!("weights_cluster{cluster}.pvec"))
    }

    fn centralized_weights_path(&self, cluster: Option<usize>) -> PathBuf {
        match cluster {
            Some(c) => self.out().join(format!("weights_centralized_cluster{c}.pvec")),
            None => self.out().join("weights_centralized_fleet.pvec"),
        }
    }

    fn centralized_alp_weights_path(&self, cluster: usize) -> PathBuf {
        self.out().join(format!("weights_centralized_alp_cluster{cluster}.pvec"))
    }

    fn local_weights_path(&self, client: &str) -> PathBuf {
        self.out().join(format!("weights_local_{client}.pvec"))
    }

    fn report_path(&self, cluster: usize, ext: &str) -> PathBuf {
        self.out().join(format!("report_cluster{cluster}.{ext}"))
    }

    // -- shared loading ----------------------------------------------------

    fn load_fleet(&self) -> Result<Vec<LoadSeries>> {
        let path = self.fleet_path();
        let mut fleet = ingest_csv(&path)
            .with_context(|| format!("reading {} (run `synth` first)", path.display()))?;
        fleet.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        Ok(fleet)
    }

    fn load_tuning(&self) -> Result<Vec<TuningRecord>> {
        let path = self.tuning_path();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {} (run `tune` first)", path.display()))?;
        let artifact: TuningArtifact = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        self.check_hash(&artifact.config_hash, &path)?;
        Ok(artifact.records)
    }

    fn load_clusters(&self) -> Result<(ClusterAssignment, BTreeMap<usize, HyperParams>)> {
        let path = self.clusters_path();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {} (run `cluster` first)", path.display()))?;
        let artifact: ClustersArtifact = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        self.check_hash(&artifact.config_hash, &path)?;
        Ok((artifact.assignment, artifact.consolidated))
    }

    fn check_hash(&self, found: &str, path: &Path) -> Result<()> {
        if found != self.hash {
            bail!(
                "{} was produced by config {} but the current config hashes to {}",
                path.display(),
                found,
                self.hash
            );
        }
        Ok(())
    }

    fn prepare(&self, series: &LoadSeries) -> Result<PreparedClient> {
        prepare_client(series, self.config.lookback, self.config.train_fraction)
            .with_context(|| format!("preparing windows for `{}`", series.client_id))
    }

    /// Train/test windows for one series under an externally fitted scaler
    /// (the centralized scheme's pooled scaler).
    fn prepare_with_scaler(
        &self,
        series: &LoadSeries,
        scaler: &Scaler,
    ) -> Result<(WindowedDataset, WindowedDataset)> {
        let dataset = make_windows(series, self.config.lookback, scaler)?;
        Ok(split(dataset, self.config.train_fraction)?)
    }

    /// Min-max scaler fitted on the concatenated training-visible prefixes
    /// of the given series.
    fn pooled_scaler(&self, members: &[&LoadSeries]) -> Result<Scaler> {
        let mut values = Vec::new();
        for series in members {
            let train_count = fedcast_core::data::train_window_count(
                series.len(),
                self.config.lookback,
                self.config.train_fraction,
            );
            values.extend_from_slice(&series.values[..train_count + self.config.lookback]);
        }
        Ok(Scaler::fit(&values)?)
    }

    fn fleet_modal_hp(&self, records: &[TuningRecord]) -> Result<HyperParams> {
        fedcast_core::clustering::modal_hyperparams(records.iter().map(|r| r.hyperparams()))
            .ok_or_else(|| anyhow!("no tuning records"))
    }

    /// Rounds for one cluster: explicit config value, or the tuned epoch
    /// budget spread over local epochs.
    fn rounds_for(&self, hp: &HyperParams) -> usize {
        self.config
            .federation
            .rounds
            .unwrap_or_else(|| hp.epochs.div_ceil(self.config.federation.local_epochs))
    }

    fn federation_config(&self, rounds: usize) -> FederationConfig {
        FederationConfig {
            rounds,
            local_epochs: self.config.federation.local_epochs,
            removal_factor: if self.config.federation.removal_enabled {
                self.config.federation.removal_factor
            } else {
                f64::INFINITY
            },
            removal_lag: self.config.federation.removal_lag,
            seed: self.config.master_seed,
        }
    }

    // -- stages ------------------------------------------------------------

    fn stage_synth(&self) -> Result<()> {
        let mut fleet = match &self.config.data {
            DataSource::Synthetic { length_hours, archetypes } => {
                let spec = FleetSpec {
                    archetypes: archetypes.clone(),
                    length_hours: *length_hours,
                    seed: derive_seed(self.config.master_seed, &["synth"]),
                };
                synthesize_fleet(&spec)?
            }
            DataSource::Csv { path } => ingest_csv(path)
                .with_context(|| format!("ingesting {}", path.display()))?,
        };
        fleet.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        write_csv(&self.fleet_path(), &fleet, Some(&format!("config_hash={}", self.hash)))?;
        println!("synth: wrote {} clients to {}", fleet.len(), self.fleet_path().display());
        Ok(())
    }

    fn stage_tune(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let grid = self.grid();
        let base = self.base_spec();
        let search = GridSearchConfig { optimizer: self.config.optimizer, fast: self.config.grid.fast };

        let records: Vec<TuningRecord> = fleet
            .par_iter()
            .map(|series| -> Result<TuningRecord> {
                let prepared = self.prepare(series)?;
                let seed = derive_seed(self.config.master_seed, &["tune", &series.client_id]);
                let (hp, score) = grid_search(&prepared.train, &grid, &base, &search, seed)
                    .with_context(|| format!("tuning `{}`", series.client_id))?;
                Ok(TuningRecord::new(series.client_id.clone(), hp, score))
            })
            .collect::<Result<_>>()?;

        let artifact = TuningArtifact { config_hash: self.hash.clone(), records };
        write_json(&self.tuning_path(), &artifact)?;
        println!("tune: wrote {} records to {}", artifact.records.len(), self.tuning_path().display());
        Ok(())
    }

    fn stage_cluster(&self) -> Result<()> {
        let records = self.load_tuning()?;
        let grid = self.grid();
        let vectors: BTreeMap<String, [f64; 3]> = records
            .iter()
            .map(|r| Ok((r.client_id.clone(), hyperparam_vector(&r.hyperparams(), &grid)?)))
            .collect::<Result<_>>()?;
        let seed = derive_seed(self.config.master_seed, &["cluster"]);
        let restarts = self.config.cluster.restarts;

        let (assignment, elbow) = match self.config.cluster.mode {
            ClusterMode::Fixed => {
                let k = self.config.cluster.k.min(vectors.len());
                (kmeans(&vectors, k, seed, restarts)?, None)
            }
            ClusterMode::Elbow => {
                let k_max = self.config.cluster.k_max.min(vectors.len());
                let curve = inertia_curve(&vectors, 1..=k_max, seed, restarts)?;
                let selected = elbow_select(&curve, self.config.cluster.drop_threshold)?;
                let info = ElbowInfo {
                    curve: curve.clone(),
                    drop_threshold: self.config.cluster.drop_threshold,
                    selected,
                };
                write_inertia_csv(&self.out().join("inertia_curve.csv"), &self.hash, &curve)?;
                (kmeans(&vectors, selected, seed, restarts)?, Some(info))
            }
        };

        let tuned: BTreeMap<String, HyperParams> =
            records.iter().map(|r| (r.client_id.clone(), r.hyperparams())).collect();
        let consolidated = consolidate_hyperparams(&assignment, &tuned)?;

        println!(
            "cluster: k={} inertia={:.6} sizes={:?}",
            assignment.k,
            assignment.inertia,
            (0..assignment.k).map(|c| assignment.members_of(c).len()).collect::<Vec<_>>()
        );
        let artifact = ClustersArtifact {
            config_hash: self.hash.clone(),
            assignment,
            consolidated,
            elbow,
        };
        write_json(&self.clusters_path(), &artifact)?;
        Ok(())
    }

    fn stage_federate(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let (assignment, consolidated) = self.load_clusters()?;
        let by_id: BTreeMap<&str, &LoadSeries> =
            fleet.iter().map(|s| (s.client_id.as_str(), s)).collect();
        let base = self.base_spec();

        for cluster_idx in 0..assignment.k {
            let members = assignment.members_of(cluster_idx);
            let hp = consolidated
                .get(&cluster_idx)
                .ok_or_else(|| anyhow!("cluster {cluster_idx} missing consolidated hyperparameters"))?;
            let spec = hp.spec(&base);

            let mut clients: Vec<ClientState> = members
                .iter()
                .map(|id| -> Result<ClientState> {
                    let series = by_id
                        .get(id.as_str())
                        .ok_or_else(|| anyhow!("client `{id}` not present in fleet"))?;
                    let prepared = self.prepare(series)?;
                    Ok(ClientState::new(
                        id.clone(),
                        prepared.train,
                        prepared.test,
                        prepared.scaler,
                        spec,
                        self.config.optimizer,
                        client_train_seed(self.config.master_seed, id),
                    ))
                })
                .collect::<Result<_>>()?;

            let mut cluster = ClusterModel {
                index: cluster_idx,
                members: members.clone(),
                hyperparams: *hp,
                weights: fedcast_core::neural::init_forecaster(
                    &spec,
                    cluster_init_seed(self.config.master_seed, cluster_idx),
                )?,
            };

            let rounds = self.rounds_for(hp);
            let fed_config = self.federation_config(rounds);
            let run = run_federation(&mut cluster, &mut clients, &fed_config, &spec)
                .with_context(|| format!("federating cluster {cluster_idx}"))?;

            write_logs_artifact(&self.rounds_path(cluster_idx), &self.hash, &run.logs)?;
            save_weights(&self.federated_weights_path(cluster_idx), &run.final_weights, &self.hash)?;

            let removed: Vec<&str> = run
                .logs
                .iter()
                .flat_map(|l| l.removed.iter().map(String::as_str))
                .collect();
            println!(
                "federate: cluster {cluster_idx} ran {rounds} rounds over {} clients (removed: {})",
                members.len(),
                if removed.is_empty() { "none".to_string() } else { removed.join(",") }
            );
        }
        Ok(())
    }

    fn stage_centralize(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let records = self.load_tuning()?;
        let (assignment, _) = self.load_clusters()?;
        let base = self.base_spec();
        let modal = self.fleet_modal_hp(&records)?;

        match self.config.centralized_scope {
            CentralizedScope::WholeFleet => {
                let members: Vec<&LoadSeries> = fleet.iter().collect();
                let scaler = self.pooled_scaler(&members)?;
                let mut trains = Vec::new();
                for series in &members {
                    let (train, _) = self.prepare_with_scaler(series, &scaler)?;
                    trains.push(train);
                }
                let refs: Vec<&WindowedDataset> = trains.iter().collect();
                let pool = pool_windows(&refs)?;
                let seed = derive_seed(self.config.master_seed, &["centralized", "fleet"]);
                let report = train_centralized(&pool, &modal, &base, self.config.optimizer, seed)?;
                save_weights(&self.centralized_weights_path(None), &report.weights, &self.hash)?;
                println!(
                    "centralize: whole-fleet model over {} pooled windows ({modal:?})",
                    pool.len()
                );
            }
            CentralizedScope::PerCluster => {
                for cluster_idx in 0..assignment.k {
                    let members = assignment.members_of(cluster_idx);
                    let series: Vec<&LoadSeries> = fleet
                        .iter()
                        .filter(|s| members.contains(&s.client_id))
                        .collect();
                    let scaler = self.pooled_scaler(&series)?;
                    let mut trains = Vec::new();
                    for s in &series {
                        let (train, _) = self.prepare_with_scaler(s, &scaler)?;
                        trains.push(train);
                    }
                    let refs: Vec<&WindowedDataset> = trains.iter().collect();
                    let pool = pool_windows(&refs)?;
                    let seed = derive_seed(
                        self.config.master_seed,
                        &["centralized", &cluster_idx.to_string()],
                    );
                    let report =
                        train_centralized(&pool, &modal, &base, self.config.optimizer, seed)?;
                    save_weights(
                        &self.centralized_weights_path(Some(cluster_idx)),
                        &report.weights,
                        &self.hash,
                    )?;
                    println!(
                        "centralize: cluster {cluster_idx} model over {} pooled windows",
                        pool.len()
                    );
                }
            }
        }

        // Aggregate-trained ALP models are always per cluster.
        if self.config.centralized_alp == CentralizedAlp::AggregateTrained {
            for cluster_idx in 0..assignment.k {
                let members = assignment.members_of(cluster_idx);
                let series: Vec<LoadSeries> = fleet
                    .iter()
                    .filter(|s| members.contains(&s.client_id))
                    .cloned()
                    .collect();
                let agg = aggregate(&series)?;
                let prepared = self.prepare(&agg)?;
                let seed = derive_seed(
                    self.config.master_seed,
                    &["centralized-alp", &cluster_idx.to_string()],
                );
                let report = train_centralized(
                    &prepared.train,
                    &modal,
                    &base,
                    self.config.optimizer,
                    seed,
                )?;
                save_weights(
                    &self.centralized_alp_weights_path(cluster_idx),
                    &report.weights,
                    &self.hash,
                )?;
            }
        }
        Ok(())
    }

    fn stage_localize(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let records = self.load_tuning()?;
        let tuned: BTreeMap<&str, HyperParams> =
            records.iter().map(|r| (r.client_id.as_str(), r.hyperparams())).collect();
        let base = self.base_spec();

        fleet
            .par_iter()
            .map(|series| -> Result<()> {
                let hp = tuned
                    .get(series.client_id.as_str())
                    .ok_or_else(|| anyhow!("client `{}` has no tuning record", series.client_id))?;
                let prepared = self.prepare(series)?;
                let seed = client_train_seed(self.config.master_seed, &series.client_id);
                let report =
                    train_local(&prepared.train, hp, &base, self.config.optimizer, seed)?;
                save_weights(&self.local_weights_path(&series.client_id), &report.weights, &self.hash)
            })
            .collect::<Result<()>>()?;
        println!("localize: trained {} client models", fleet.len());
        Ok(())
    }

    fn stage_report(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let records = self.load_tuning()?;
        let (assignment, consolidated) = self.load_clusters()?;
        let base = self.base_spec();
        let modal = self.fleet_modal_hp(&records)?;
        let tuned: BTreeMap<&str, HyperParams> =
            records.iter().map(|r| (r.client_id.as_str(), r.hyperparams())).collect();

        // Whole-fleet centralized artifacts are shared across clusters.
        let fleet_central: Option<(ParameterVector, Scaler)> =
            if self.wants(Scheme::Centralized)
                && self.config.centralized_scope == CentralizedScope::WholeFleet
            {
                let members: Vec<&LoadSeries> = fleet.iter().collect();
                let scaler = self.pooled_scaler(&members)?;
                let weights = load_weights(&self.centralized_weights_path(None))?;
                Some((weights, scaler))
            } else {
                None
            };

        for cluster_idx in 0..assignment.k {
            let members = assignment.members_of(cluster_idx);
            let member_series: Vec<LoadSeries> = fleet
                .iter()
                .filter(|s| members.contains(&s.client_id))
                .cloned()
                .collect();

            let mut ilp_results: Vec<SchemeResult> = Vec::new();
            let mut alp_results: Vec<SchemeResult> = Vec::new();

            if self.wants(Scheme::Federated) {
                let hp = consolidated
                    .get(&cluster_idx)
                    .ok_or_else(|| anyhow!("cluster {cluster_idx} missing hyperparameters"))?;
                let spec = hp.spec(&base);
                let weights = load_weights(&self.federated_weights_path(cluster_idx))?;
                let mut per_client = Vec::new();
                for series in &member_series {
                    let prepared = self.prepare(series)?;
                    per_client.push(predict_ilp(
                        Scheme::Federated,
                        &series.client_id,
                        &weights,
                        &spec,
                        &prepared.train,
                        &prepared.test,
                    )?);
                }
                alp_results.push(predict_alp_summed(Scheme::Federated, &per_client)?);
                ilp_results.extend(per_client);
            }

            if self.wants(Scheme::Local) {
                let mut per_client = Vec::new();
                for series in &member_series {
                    let hp = tuned
                        .get(series.client_id.as_str())
                        .ok_or_else(|| anyhow!("client `{}` untuned", series.client_id))?;
                    let spec = hp.spec(&base);
                    let weights = load_weights(&self.local_weights_path(&series.client_id))?;
                    let prepared = self.prepare(series)?;
                    per_client.push(predict_ilp(
                        Scheme::Local,
                        &series.client_id,
                        &weights,
                        &spec,
                        &prepared.train,
                        &prepared.test,
                    )?);
                }
                alp_results.push(predict_alp_summed(Scheme::Local, &per_client)?);
                ilp_results.extend(per_client);
            }

            if self.wants(Scheme::Centralized) {
                let spec = modal.spec(&base);
                let (weights, scaler) = match &fleet_central {
                    Some((weights, scaler)) => (weights.clone(), *scaler),
                    None => {
                        let series_refs: Vec<&LoadSeries> = member_series.iter().collect();
                        let scaler = self.pooled_scaler(&series_refs)?;
                        (load_weights(&self.centralized_weights_path(Some(cluster_idx)))?, scaler)
                    }
                };
                let mut per_client = Vec::new();
                for series in &member_series {
                    let (train, test) = self.prepare_with_scaler(series, &scaler)?;
                    per_client.push(predict_ilp(
                        Scheme::Centralized,
                        &series.client_id,
                        &weights,
                        &spec,
                        &train,
                        &test,
                    )?);
                }
                let alp = match self.config.centralized_alp {
                    CentralizedAlp::Summed => predict_alp_summed(Scheme::Centralized, &per_client)?,
                    CentralizedAlp::AggregateTrained => {
                        let agg = aggregate(&member_series)?;
                        let prepared = self.prepare(&agg)?;
                        let alp_weights =
                            load_weights(&self.centralized_alp_weights_path(cluster_idx))?;
                        predict_alp_aggregate(
                            Scheme::Centralized,
                            &alp_weights,
                            &spec,
                            &prepared.train,
                            &prepared.test,
                        )?
                    }
                };
                alp_results.push(alp);
                ilp_results.extend(per_client);
            }

            let report = build_report(
                cluster_idx,
                &self.config.schemes,
                &ilp_results,
                &alp_results,
                &member_series,
            )?;

            write_json(
                &self.report_path(cluster_idx, "json"),
                &ReportArtifact { config_hash: &self.hash, report: &report },
            )?;
            let csv_file = std::fs::File::create(self.report_path(cluster_idx, "csv"))?;
            write_report_csv(std::io::BufWriter::new(csv_file), &report, &self.hash)?;

            if self.config.emit_traces {
                self.write_traces(cluster_idx, &member_series, &ilp_results, &alp_results)?;
            }
            println!(
                "report: cluster {cluster_idx} written ({} members, {} schemes)",
                members.len(),
                self.config.schemes.len()
            );
        }
        Ok(())
    }

    /// Test-split forecast traces for plotting: timestamp, actual kWh,
    /// predicted kWh.
    fn write_traces(
        &self,
        cluster: usize,
        member_series: &[LoadSeries],
        ilp: &[SchemeResult],
        alp: &[SchemeResult],
    ) -> Result<()> {
        let dir = self.out().join("traces");
        std::fs::create_dir_all(&dir)?;
        let by_id: BTreeMap<&str, &LoadSeries> =
            member_series.iter().map(|s| (s.client_id.as_str(), s)).collect();
        let agg = aggregate(member_series)?;

        for result in ilp.iter().chain(alp) {
            let series = match result.task {
                fedcast_core::schemes::Task::Ilp => *by_id
                    .get(result.client_id.as_str())
                    .ok_or_else(|| anyhow!("trace for unknown client `{}`", result.client_id))?,
                fedcast_core::schemes::Task::Alp => &agg,
            };
            let task = match result.task {
                fedcast_core::schemes::Task::Ilp => "ilp",
                fedcast_core::schemes::Task::Alp => "alp",
            };
            let path = dir.join(format!(
                "cluster{cluster}_{}_{task}_{}.csv",
                result.scheme, result.client_id
            ));
            let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(out, "# config_hash={}", self.hash)?;
            writeln!(out, "timestamp,actual_kwh,predicted_kwh")?;
            let train_count = fedcast_core::data::train_window_count(
                series.len(),
                self.config.lookback,
                self.config.train_fraction,
            );
            for (i, (actual, predicted)) in
                result.test.actual.iter().zip(&result.test.predicted).enumerate()
            {
                let ts = series.timestamp(self.config.lookback + train_count + i);
                writeln!(
                    out,
                    "{},{actual},{predicted}",
                    ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
                )?;
            }
        }
        Ok(())
    }

    fn stage_ablate(&self) -> Result<()> {
        let fleet = self.load_fleet()?;
        let records = self.load_tuning()?;
        let (assignment, consolidated) = self.load_clusters()?;
        let base = self.base_spec();
        let modal = self.fleet_modal_hp(&records)?;

        let probe = match &self.config.probe_client {
            Some(id) => id.clone(),
            None => fleet[0].client_id.clone(),
        };
        if !fleet.iter().any(|s| s.client_id == probe) {
            bail!("probe client `{probe}` is not in the fleet");
        }

        // Both runs use the same round count so the curves are comparable.
        let rounds = self.rounds_for(&modal);

        // Clustered run: the probe client trains inside its own cluster.
        let probe_cluster = *assignment
            .labels
            .get(&probe)
            .ok_or_else(|| anyhow!("probe client `{probe}` is unclustered"))?;
        let clustered_loss = self.probe_losses(
            &fleet,
            &assignment.members_of(probe_cluster),
            consolidated
                .get(&probe_cluster)
                .ok_or_else(|| anyhow!("cluster {probe_cluster} missing hyperparameters"))?,
            probe_cluster,
            rounds,
            &probe,
            &base,
        )?;

        // Unclustered run: every client in one cluster with fleet-modal
        // hyperparameters.
        let all_members: Vec<String> = fleet.iter().map(|s| s.client_id.clone()).collect();
        let unclustered_loss =
            self.probe_losses(&fleet, &all_members, &modal, 0, rounds, &probe, &base)?;

        let artifact = AblationArtifact {
            config_hash: self.hash.clone(),
            probe_client: probe.clone(),
            clustered_k: assignment.k,
            rounds,
            clustered_loss,
            unclustered_loss,
        };
        write_json(&self.out().join("ablation.json"), &artifact)?;

        let mut csv = std::io::BufWriter::new(
            std::fs::File::create(self.out().join("ablation.csv"))?,
        );
        writeln!(csv, "# config_hash={}", self.hash)?;
        writeln!(csv, "round,clustered_loss,unclustered_loss")?;
        for (i, (c, u)) in artifact.clustered_loss.iter().zip(&artifact.unclustered_loss).enumerate()
        {
            writeln!(csv, "{},{c},{u}", i + 1)?;
        }
        println!(
            "ablate: probe `{probe}` final-round loss clustered {:.6e} vs unclustered {:.6e}",
            artifact.clustered_loss.last().copied().unwrap_or(f64::NAN),
            artifact.unclustered_loss.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    /// Runs one federation over `members` and extracts the probe client's
    /// per-round training loss.
    #[allow(clippy::too_many_arguments)]
    fn probe_losses(
        &self,
        fleet: &[LoadSeries],
        members: &[String],
        hp: &HyperParams,
        cluster_index: usize,
        rounds: usize,
        probe: &str,
        base: &NetworkSpec,
    ) -> Result<Vec<f64>> {
        let by_id: BTreeMap<&str, &LoadSeries> =
            fleet.iter().map(|s| (s.client_id.as_str(), s)).collect();
        let spec = hp.spec(base);
        let mut clients: Vec<ClientState> = members
            .iter()
            .map(|id| -> Result<ClientState> {
                let series = by_id
                    .get(id.as_str())
                    .ok_or_else(|| anyhow!("client `{id}` not present in fleet"))?;
                let prepared = self.prepare(series)?;
                Ok(ClientState::new(
                    id.clone(),
                    prepared.train,
                    prepared.test,
                    prepared.scaler,
                    spec,
                    self.config.optimizer,
                    client_train_seed(self.config.master_seed, id),
                ))
            })
            .collect::<Result<_>>()?;

        let mut cluster = ClusterModel {
            index: cluster_index,
            members: members.to_vec(),
            hyperparams: *hp,
            weights: fedcast_core::neural::init_forecaster(
                &spec,
                cluster_init_seed(self.config.master_seed, cluster_index),
            )?,
        };
        let fed_config = self.federation_config(rounds);
        let run = run_federation(&mut cluster, &mut clients, &fed_config, &spec)?;
        run.logs
            .iter()
            .map(|log| {
                log.client_losses
                    .get(probe)
                    .copied()
                    .ok_or_else(|| anyhow!("probe `{probe}` missing at round {}", log.round))
            })
            .collect()
    }
}

// -- artifact helpers -------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn save_weights(path: &Path, weights: &ParameterVector, hash: &str) -> Result<()> {
    let meta: BTreeMap<String, String> =
        [("config_hash".to_string(), hash.to_string())].into_iter().collect();
    weights
        .save_with_meta(path, meta)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_weights(path: &Path) -> Result<ParameterVector> {
    ParameterVector::load(path).with_context(|| format!("reading {}", path.display()))
}

/// JSON-lines round log: a header line carrying the config hash, then one
/// RoundLog object per line.
fn write_logs_artifact(path: &Path, hash: &str, logs: &[RoundLog]) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    let header = serde_json::to_string(&JsonlHeader { config_hash: hash.to_string() })?;
    writeln!(out, "{header}")?;
    fedcast_core::federated::write_round_logs(&mut out, logs)?;
    Ok(())
}

pub fn read_logs_artifact(path: &Path) -> Result<(String, Vec<RoundLog>)> {
    let file = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut reader = std::io::BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: JsonlHeader = serde_json::from_str(&first)
        .with_context(|| format!("parsing header of {}", path.display()))?;
    let logs = fedcast_core::federated::read_round_logs(reader)?;
    Ok((header.config_hash, logs))
}

fn write_inertia_csv(path: &Path, hash: &str, curve: &[(usize, f64)]) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# config_hash={hash}")?;
    writeln!(out, "k,inertia")?;
    for (k, inertia) in curve {
        writeln!(out, "{k},{inertia}")?;
    }
    Ok(())
}
