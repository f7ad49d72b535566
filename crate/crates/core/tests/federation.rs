//! End-to-end federation behaviour: degenerate equivalences, checksum
//! integrity, scheduling independence, and deterrent removal.

use fedcast_core::clustering::ClusterModel;
use fedcast_core::data::{prepare_client, synthetic_epoch, LoadSeries, Window, WindowedDataset};
use fedcast_core::federated::{
    run_federation, ClientState, FederatedError, FederatedNode, FederationConfig, WeightUpdate,
    fedavg,
};
use fedcast_core::hypertune::HyperParams;
use fedcast_core::neural::{init_forecaster, train, NetworkSpec, OptimizerConfig};
use fedcast_core::params::ParameterVector;
use fedcast_core::seeds::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

fn sine_series(id: &str, hours: usize, noise_seed: u64) -> LoadSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let values: Vec<f64> = (0..hours)
        .map(|t| {
            0.5 + 1.2 * (t as f64 * std::f64::consts::TAU / 24.0).sin().max(0.0)
                + 0.05 * rng.random::<f64>()
        })
        .collect();
    LoadSeries::new(id, synthetic_epoch(), values).unwrap()
}

fn client(id: &str, noise_seed: u64, train_seed: u64, spec: &NetworkSpec) -> ClientState {
    let prepared = prepare_client(&sine_series(id, 26 * 7, noise_seed), 24, 0.75).unwrap();
    ClientState::new(
        id,
        prepared.train,
        prepared.test,
        prepared.scaler,
        *spec,
        OptimizerConfig::default(),
        train_seed,
    )
}

fn cluster_with(spec: &NetworkSpec, members: Vec<String>, init_seed: u64) -> ClusterModel {
    ClusterModel {
        index: 0,
        members,
        hyperparams: HyperParams::new(spec.fc1_neurons, spec.fc2_neurons, 10),
        weights: init_forecaster(spec, init_seed).unwrap(),
    }
}

#[test]
fn single_client_federation_equals_local_training() {
    let spec = NetworkSpec::new(4, 6, 6);
    let rounds = 6;
    let epochs_per_round = 3;
    let train_seed = 99;

    let mut node = client("solo", 7, train_seed, &spec);
    let train_data = node.train_data().clone();
    let mut cluster = cluster_with(&spec, vec!["solo".to_string()], 5);
    let initial = cluster.weights.clone();

    let config = FederationConfig::new(rounds, epochs_per_round, 1);
    let run = run_federation(&mut cluster, std::slice::from_mut(&mut node), &config, &spec).unwrap();

    // Oracle: uninterrupted local training with the same budget and seeds.
    let oracle = train(
        initial,
        &spec,
        &train_data,
        rounds * epochs_per_round,
        OptimizerConfig::default(),
        train_seed,
    )
    .unwrap();

    assert_eq!(run.final_weights, oracle.weights);
    assert_eq!(run.logs.len(), rounds);
    // Round losses are the final epoch of each E-epoch block.
    for (log, chunk) in run.logs.iter().zip(oracle.epoch_losses.chunks(epochs_per_round)) {
        assert_eq!(log.client_losses["solo"], *chunk.last().unwrap());
    }
}

#[test]
fn identical_clients_average_to_either_update() {
    let spec = NetworkSpec::new(3, 4, 4);
    // Same data and same training seed: the two clients are bitwise twins.
    let mut twins =
        vec![client("a", 11, 42, &spec), client("b", 11, 42, &spec)];
    let mut cluster = cluster_with(&spec, vec!["a".into(), "b".into()], 9);

    let mut solo = vec![client("z", 11, 42, &spec)];
    let mut solo_cluster = cluster_with(&spec, vec!["z".into()], 9);

    let config = FederationConfig::new(5, 2, 1);
    let pair_run = run_federation(&mut cluster, &mut twins, &config, &spec).unwrap();
    let solo_run = run_federation(&mut solo_cluster, &mut solo, &config, &spec).unwrap();

    // Averaging two identical updates with equal counts is exact, so the
    // global trajectory matches the single twin's trajectory bitwise.
    assert_eq!(pair_run.final_weights, solo_run.final_weights);
    for (a, b) in pair_run.logs.iter().zip(&solo_run.logs) {
        assert_eq!(a.checksum, b.checksum);
    }
}

/// Wrapper that records every update it returns, so tests can recompute the
/// aggregation from what was actually sent.
struct Recording<'a> {
    inner: ClientState,
    sink: &'a Mutex<Vec<(usize, WeightUpdate)>>,
}

impl FederatedNode for Recording<'_> {
    fn client_id(&self) -> &str {
        self.inner.client_id()
    }
    fn is_active(&self) -> bool {
        self.inner.is_active()
    }
    fn deactivate(&mut self) {
        self.inner.deactivate()
    }
    fn local_round(
        &mut self,
        broadcast: &ParameterVector,
        epochs: usize,
        round: usize,
    ) -> Result<WeightUpdate, FederatedError> {
        let update = self.inner.local_round(broadcast, epochs, round)?;
        self.sink.lock().unwrap().push((round, update.clone()));
        Ok(update)
    }
}

#[test]
fn logged_checksums_match_recomputed_fedavg() {
    let spec = NetworkSpec::new(3, 4, 4);
    let sink = Mutex::new(Vec::new());
    let mut nodes: Vec<Recording> = (0..3)
        .map(|i| Recording {
            inner: client(&format!("c{i}"), 100 + i as u64, 200 + i as u64, &spec),
            sink: &sink,
        })
        .collect();
    let members = nodes.iter().map(|n| n.client_id().to_string()).collect();
    let mut cluster = cluster_with(&spec, members, 3);

    let config = FederationConfig::new(4, 2, 1);
    let run = run_federation(&mut cluster, &mut nodes, &config, &spec).unwrap();

    let recorded = sink.into_inner().unwrap();
    for log in &run.logs {
        let mut round_updates: Vec<WeightUpdate> = recorded
            .iter()
            .filter(|(round, update)| *round == log.round && !log.removed.contains(&update.client_id))
            .map(|(_, update)| update.clone())
            .collect();
        round_updates.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        let recomputed = fedavg(&round_updates).unwrap();
        assert_eq!(recomputed.checksum(), log.checksum, "round {}", log.round);
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = NetworkSpec::new(3, 4, 4);
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut nodes: Vec<ClientState> = (0..6)
                .map(|i| client(&format!("c{i}"), 300 + i as u64, 400 + i as u64, &spec))
                .collect();
            let members = nodes.iter().map(|n| n.client_id().to_string()).collect();
            let mut cluster = cluster_with(&spec, members, 8);
            let config = FederationConfig::new(3, 2, 1);
            run_federation(&mut cluster, &mut nodes, &config, &spec).unwrap()
        })
    };

    let serial = run_with(1);
    let parallel = run_with(4);
    assert_eq!(serial.final_weights, parallel.final_weights);
    assert_eq!(serial.logs, parallel.logs);
}

#[test]
fn rejects_unsorted_or_duplicate_clients() {
    let spec = NetworkSpec::new(2, 2, 2);
    let config = FederationConfig::new(2, 1, 1);

    let mut unsorted = vec![client("b", 1, 1, &spec), client("a", 2, 2, &spec)];
    let mut cluster = cluster_with(&spec, vec!["a".into(), "b".into()], 1);
    assert!(matches!(
        run_federation(&mut cluster, &mut unsorted, &config, &spec),
        Err(FederatedError::ClientsNotSorted)
    ));

    let mut duplicated = vec![client("a", 1, 1, &spec), client("a", 2, 2, &spec)];
    assert!(matches!(
        run_federation(&mut cluster, &mut duplicated, &config, &spec),
        Err(FederatedError::DuplicateClient(_))
    ));
}

/// Client whose targets are freshly re-randomized each round with a growing
/// amplitude; its training loss keeps rising, so the deterrent rule must
/// remove it.
struct Adversarial {
    inner: ClientState,
    rng: ChaCha8Rng,
    base_amplitude: f64,
    growth_per_round: f64,
}

impl Adversarial {
    fn randomize_targets(&mut self, round: usize) {
        let amplitude = self.base_amplitude * (1.0 + self.growth_per_round * round as f64);
        let data = self.inner.train_data();
        let lookback = data.lookback();
        let scaler = *data.scaler();
        let windows: Vec<Window> = data
            .windows()
            .iter()
            .map(|w| {
                let target = self.rng.random::<f64>() * amplitude;
                Window { input: w.input.clone(), target, target_raw: scaler.invert(target) }
            })
            .collect();
        self.inner.replace_train_data(WindowedDataset::from_windows(windows, lookback, scaler));
    }
}

impl FederatedNode for Adversarial {
    fn client_id(&self) -> &str {
        self.inner.client_id()
    }
    fn is_active(&self) -> bool {
        self.inner.is_active()
    }
    fn deactivate(&mut self) {
        self.inner.deactivate()
    }
    fn local_round(
        &mut self,
        broadcast: &ParameterVector,
        epochs: usize,
        round: usize,
    ) -> Result<WeightUpdate, FederatedError> {
        self.randomize_targets(round);
        self.inner.local_round(broadcast, epochs, round)
    }
}

enum Node {
    Honest(Box<ClientState>),
    Hostile(Box<Adversarial>),
}

impl FederatedNode for Node {
    fn client_id(&self) -> &str {
        match self {
            Node::Honest(c) => c.client_id(),
            Node::Hostile(a) => a.client_id(),
        }
    }
    fn is_active(&self) -> bool {
        match self {
            Node::Honest(c) => c.is_active(),
            Node::Hostile(a) => a.is_active(),
        }
    }
    fn deactivate(&mut self) {
        match self {
            Node::Honest(c) => c.deactivate(),
            Node::Hostile(a) => a.deactivate(),
        }
    }
    fn local_round(
        &mut self,
        broadcast: &ParameterVector,
        epochs: usize,
        round: usize,
    ) -> Result<WeightUpdate, FederatedError> {
        match self {
            Node::Honest(c) => c.local_round(broadcast, epochs, round),
            Node::Hostile(a) => a.local_round(broadcast, epochs, round),
        }
    }
}

#[test]
fn growing_loss_client_is_removed_and_round_continues() {
    let spec = NetworkSpec::new(3, 4, 4);
    let lag = 4;
    let rounds = 14;

    let mut nodes: Vec<Node> = vec![
        Node::Honest(Box::new(client("a", 1, 10, &spec))),
        Node::Honest(Box::new(client("b", 2, 11, &spec))),
        Node::Hostile(Box::new(Adversarial {
            inner: client("c", 3, 12, &spec),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(5, &["adversary"])),
            base_amplitude: 1.0,
            growth_per_round: 0.6,
        })),
    ];
    let mut cluster =
        cluster_with(&spec, vec!["a".into(), "b".into(), "c".into()], 2);
    let config = FederationConfig {
        rounds,
        local_epochs: 2,
        removal_factor: 1.6,
        removal_lag: lag,
        seed: 1,
    };

    let run = run_federation(&mut cluster, &mut nodes, &config, &spec).unwrap();
    let removal_round = run
        .logs
        .iter()
        .find(|log| log.removed.contains(&"c".to_string()))
        .map(|log| log.round)
        .expect("adversarial client must be removed");
    assert!(removal_round > lag, "cannot be flagged before lag+1");

    // After removal the federation keeps running with the honest clients.
    for log in run.logs.iter().filter(|l| l.round > removal_round) {
        assert!(!log.client_losses.contains_key("c"));
        assert_eq!(log.client_losses.len(), 2);
    }
    assert_eq!(run.logs.len(), rounds);
}

#[test]
fn all_clients_removed_is_a_terminal_error() {
    let spec = NetworkSpec::new(2, 2, 2);
    let mut nodes: Vec<Node> = vec![Node::Hostile(Box::new(Adversarial {
        inner: client("only", 4, 13, &spec),
        rng: ChaCha8Rng::seed_from_u64(77),
        base_amplitude: 1.0,
        growth_per_round: 1.0,
    }))];
    let mut cluster = cluster_with(&spec, vec!["only".into()], 1);
    let config = FederationConfig {
        rounds: 30,
        local_epochs: 1,
        removal_factor: 1.6,
        removal_lag: 3,
        seed: 1,
    };
    match run_federation(&mut cluster, &mut nodes, &config, &spec) {
        Err(FederatedError::AllClientsRemoved { round, logs }) => {
            assert!(round > 3);
            // Rounds before the removal were logged.
            assert_eq!(logs.len(), round - 1);
        }
        other => panic!("expected AllClientsRemoved, got {other:?}"),
    }
}
