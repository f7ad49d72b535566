//! The clustered federated training loop: broadcast, parallel local
//! training, deterrent-client detection and removal, FedAvg aggregation,
//! and round logging.
//!
//! Determinism contract: clients enter sorted by id, local rounds may run on
//! any number of threads, and aggregation always consumes updates in
//! ascending client-id order, so results are independent of scheduling.

use crate::clustering::ClusterModel;
use crate::data::{Scaler, WindowedDataset};
use crate::neural::{NetworkSpec, NeuralError, OptimizerConfig, TrainingSession};
use crate::params::{ParamError, ParameterVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederatedError {
    #[error("federation config invalid: {0}")]
    BadConfig(String),
    #[error("no weight updates to aggregate")]
    EmptyUpdateList,
    #[error("update from `{0}` has a zero sample count")]
    ZeroSampleCount(String),
    #[error("update from `{0}` contains non-finite weights")]
    NonFiniteWeights(String),
    #[error("duplicate client id `{0}`")]
    DuplicateClient(String),
    #[error("clients must be sorted by ascending client id")]
    ClientsNotSorted,
    #[error("client `{0}` is inactive and cannot run a local round")]
    InactiveClient(String),
    #[error("all clients were removed at round {round}; federation cannot continue")]
    AllClientsRemoved { round: usize, logs: Vec<RoundLog> },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Communication-loop parameters. `removal_factor`/`removal_lag` implement
/// the deterrent rule: drop a client whose round loss exceeds
/// `factor * loss(lag rounds earlier)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub removal_factor: f64,
    pub removal_lag: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(rounds: usize, local_epochs: usize, seed: u64) -> Self {
        Self { rounds, local_epochs, removal_factor: 1.6, removal_lag: 20, seed }
    }

    pub fn validate(&self) -> Result<(), FederatedError> {
        if self.rounds == 0 {
            return Err(FederatedError::BadConfig("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(FederatedError::BadConfig("local_epochs must be >= 1".into()));
        }
        if self.removal_factor.is_nan() || self.removal_factor <= 1.0 {
            return Err(FederatedError::BadConfig("removal_factor must exceed 1".into()));
        }
        if self.removal_lag == 0 {
            return Err(FederatedError::BadConfig("removal_lag must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one client sends back after a local round.
#[derive(Debug, Clone)]
pub struct WeightUpdate {
    pub client_id: String,
    pub weights: ParameterVector,
    /// Training windows the client used (its FedAvg weight).
    pub sample_count: usize,
    /// Final-epoch training MSE of this round, scaled units.
    pub train_loss: f64,
}

/// One communication round as persisted to the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub cluster: usize,
    pub round: usize,
    /// Per-client training loss this round (removed clients included).
    pub client_losses: BTreeMap<String, f64>,
    /// Clients deactivated this round, ascending.
    pub removed: Vec<String>,
    /// Checksum of the aggregated global weights.
    pub checksum: String,
}

/// A participant in the federation. The standard implementation is
/// [`ClientState`]; tests substitute adversarial behaviours.
pub trait FederatedNode: Send {
    fn client_id(&self) -> &str;
    fn is_active(&self) -> bool;
    fn deactivate(&mut self);
    /// Adopt the broadcast weights, train `epochs` local epochs, and report
    /// the update. `round` is 1-based.
    fn local_round(
        &mut self,
        broadcast: &ParameterVector,
        epochs: usize,
        round: usize,
    ) -> Result<WeightUpdate, FederatedError>;
}

/// One simulated smart-meter client: its windowed data, scaler, loss
/// history, and a persistent training session (optimizer moments and the
/// shuffle stream survive across rounds, so a single-client federation
/// follows exactly the trajectory of uninterrupted local training).
#[derive(Debug, Clone)]
pub struct ClientState {
    client_id: String,
    train: WindowedDataset,
    test: WindowedDataset,
    scaler: Scaler,
    loss_history: Vec<f64>,
    active: bool,
    spec: NetworkSpec,
    optimizer: OptimizerConfig,
    seed: u64,
    session: Option<TrainingSession>,
}

impl ClientState {
    pub fn new(
        client_id: impl Into<String>,
        train: WindowedDataset,
        test: WindowedDataset,
        scaler: Scaler,
        spec: NetworkSpec,
        optimizer: OptimizerConfig,
        seed: u64,
    ) -> Self {
        Self {
            client_id: client_id.into(),
            train,
            test,
            scaler,
            loss_history: Vec::new(),
            active: true,
            spec,
            optimizer,
            seed,
            session: None,
        }
    }

    pub fn train_data(&self) -> &WindowedDataset {
        &self.train
    }

    pub fn test_data(&self) -> &WindowedDataset {
        &self.test
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Swap in new training windows (used by adversarial test doubles).
    pub fn replace_train_data(&mut self, train: WindowedDataset) {
        self.train = train;
    }
}

impl FederatedNode for ClientState {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn is_active(&self) -> bool {
        self.active
    }

    fn deactivate(&mut self) {
        self.active = false;
    }

    fn local_round(
        &mut self,
        broadcast: &ParameterVector,
        epochs: usize,
        _round: usize,
    ) -> Result<WeightUpdate, FederatedError> {
        if !self.active {
            return Err(FederatedError::InactiveClient(self.client_id.clone()));
        }
        let session = match &mut self.session {
            Some(session) => {
                session.set_weights(broadcast)?;
                session
            }
            None => {
                let session =
                    TrainingSession::new(broadcast.clone(), &self.spec, self.optimizer, self.seed)?;
                self.session.insert(session)
            }
        };
        let losses = session.run_epochs(&self.train, epochs)?;
        let train_loss = *losses.last().expect("epochs >= 1");
        self.loss_history.push(train_loss);
        Ok(WeightUpdate {
            client_id: self.client_id.clone(),
            weights: session.weights().clone(),
            sample_count: self.train.len(),
            train_loss,
        })
    }
}

/// Weighted average `w = sum_c (n_c / n) * w_c` with `n = sum_c n_c`.
/// Updates are processed in ascending client-id order regardless of input
/// order, so the result is bitwise permutation-invariant.
pub fn fedavg(updates: &[WeightUpdate]) -> Result<ParameterVector, FederatedError> {
    if updates.is_empty() {
        return Err(FederatedError::EmptyUpdateList);
    }
    let mut order: Vec<&WeightUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for pair in order.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FederatedError::DuplicateClient(pair[0].client_id.clone()));
        }
    }

    let first = order[0];
    let mut total = 0usize;
    for update in &order {
        first.weights.ensure_same_manifest(&update.weights)?;
        update
            .weights
            .ensure_finite()
            .map_err(|_| FederatedError::NonFiniteWeights(update.client_id.clone()))?;
        if update.sample_count == 0 {
            return Err(FederatedError::ZeroSampleCount(update.client_id.clone()));
        }
        total += update.sample_count;
    }

    let n = total as f64;
    let mut out = first.weights.zeros_like();
    let acc = out.values_mut();
    for update in &order {
        let coefficient = update.sample_count as f64 / n;
        for (slot, w) in acc.iter_mut().zip(update.weights.values()) {
            *slot += coefficient * w;
        }
    }
    Ok(out)
}

/// Flags active clients whose newest round loss exceeds
/// `factor * loss(lag rounds earlier)`, strictly. A client needs more than
/// `lag` recorded rounds before it can be flagged, so nothing is removed
/// while `t < lag` and the first possible removal is at round `lag + 1`.
pub fn detect_deterrents(
    histories: &BTreeMap<String, Vec<f64>>,
    active: &BTreeSet<String>,
    factor: f64,
    lag: usize,
) -> Vec<String> {
    let mut flagged = Vec::new();
    for (client, history) in histories {
        if !active.contains(client) || history.len() <= lag {
            continue;
        }
        let current = history[history.len() - 1];
        let reference = history[history.len() - 1 - lag];
        if current > factor * reference {
            flagged.push(client.clone());
        }
    }
    flagged
}

/// Outcome of one cluster's federation.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub final_weights: ParameterVector,
    pub logs: Vec<RoundLog>,
}

/// Runs `config.rounds` communication rounds over the cluster's clients:
/// broadcast, parallel local training, deterrent removal, FedAvg. A client
/// flagged in round `t` is excluded from round `t`'s aggregation and from
/// every later broadcast. `cluster.weights` is updated in place each round.
pub fn run_federation<N: FederatedNode>(
    cluster: &mut ClusterModel,
    clients: &mut [N],
    config: &FederationConfig,
    spec: &NetworkSpec,
) -> Result<FederationRun, FederatedError> {
    config.validate()?;
    if clients.is_empty() {
        return Err(FederatedError::EmptyUpdateList);
    }
    for pair in clients.windows(2) {
        match pair[0].client_id().cmp(pair[1].client_id()) {
            std::cmp::Ordering::Less => {}
            std::cmp::Ordering::Equal => {
                return Err(FederatedError::DuplicateClient(pair[0].client_id().to_string()))
            }
            std::cmp::Ordering::Greater => return Err(FederatedError::ClientsNotSorted),
        }
    }
    cluster.weights.ensure_same_manifest(&ParameterVector::zeros(spec.manifest()))?;

    let mut histories: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut logs: Vec<RoundLog> = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let broadcast = cluster.weights.clone();

        // Clients are sorted by id, and par_iter_mut preserves slice order,
        // so `updates` comes back in ascending client-id order at any
        // parallelism level.
        let updates: Vec<Option<WeightUpdate>> = clients
            .par_iter_mut()
            .map(|client| {
                if client.is_active() {
                    client.local_round(&broadcast, config.local_epochs, round).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_, _>>()?;
        let updates: Vec<WeightUpdate> = updates.into_iter().flatten().collect();
        if updates.is_empty() {
            return Err(FederatedError::AllClientsRemoved { round, logs });
        }

        let mut active: BTreeSet<String> = BTreeSet::new();
        for update in &updates {
            histories.entry(update.client_id.clone()).or_default().push(update.train_loss);
            active.insert(update.client_id.clone());
        }

        let removed = detect_deterrents(&histories, &active, config.removal_factor, config.removal_lag);
        for client in clients.iter_mut() {
            if removed.contains(&client.client_id().to_string()) {
                client.deactivate();
            }
        }

        let remaining: Vec<WeightUpdate> =
            updates.iter().filter(|u| !removed.contains(&u.client_id)).cloned().collect();
        if remaining.is_empty() {
            return Err(FederatedError::AllClientsRemoved { round, logs });
        }

        let aggregated = fedavg(&remaining)?;
        let checksum = aggregated.checksum();
        cluster.weights = aggregated;

        logs.push(RoundLog {
            cluster: cluster.index,
            round,
            client_losses: updates.iter().map(|u| (u.client_id.clone(), u.train_loss)).collect(),
            removed,
            checksum,
        });
    }

    Ok(FederationRun { final_weights: cluster.weights.clone(), logs })
}

/// Writes round logs as JSON lines.
pub fn write_round_logs<W: std::io::Write>(mut writer: W, logs: &[RoundLog]) -> std::io::Result<()> {
    for log in logs {
        let line = serde_json::to_string(log).expect("RoundLog serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Reads a JSON-lines round log stream.
pub fn read_round_logs<R: std::io::BufRead>(reader: R) -> std::io::Result<Vec<RoundLog>> {
    let mut logs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let log = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        logs.push(log);
    }
    Ok(logs)
}
