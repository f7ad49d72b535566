//! K-means over client hyperparameter vectors.
//!
//! Lloyd's algorithm with k-means++ seeding, best-of-restarts by inertia.
//! Clients are always processed in ascending id order, so results do not
//! depend on how the input map was built. Also provides the inertia curve
//! for cluster-count selection, the relative-drop elbow rule, and per-field
//! modal consolidation of tuned hyperparameters.

use crate::hypertune::HyperParams;
use crate::params::ParameterVector;
use crate::seeds::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k={k} exceeds the number of clients ({clients})")]
    TooManyClusters { k: usize, clients: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("restarts must be at least 1")]
    ZeroRestarts,
    #[error("no client vectors supplied")]
    EmptyInput,
    #[error("k range is empty or out of [1, client count]")]
    BadKRange,
    #[error("inertia curve needs at least 2 entries with strictly increasing k")]
    BadCurve,
    #[error("client `{0}` has no tuning record")]
    MissingTuning(String),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
}

/// Outcome of one k-means run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// client id -> cluster index (every cluster 0..k is non-empty).
    pub labels: BTreeMap<String, usize>,
    pub centroids: Vec<[f64; 3]>,
    /// Sum of squared distances from each client to its own centroid.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn members_of(&self, cluster: usize) -> Vec<String> {
        self.labels
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// One cluster's consolidated configuration and its global model weights.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub index: usize,
    /// Ascending client ids.
    pub members: Vec<String>,
    pub hyperparams: HyperParams,
    pub weights: ParameterVector,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia wins (earlier restart on ties). Deterministic for a fixed seed.
pub fn kmeans(
    vectors: &BTreeMap<String, [f64; 3]>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterAssignment, ClusterError> {
    if vectors.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if restarts == 0 {
        return Err(ClusterError::ZeroRestarts);
    }
    let n = vectors.len();
    if k > n {
        return Err(ClusterError::TooManyClusters { k, clients: n });
    }

    // BTreeMap iteration gives ascending client ids; all math runs over this
    // fixed ordering, making results independent of input construction order.
    let ids: Vec<&String> = vectors.keys().collect();
    let points: Vec<[f64; 3]> = vectors.values().copied().collect();

    let mut best: Option<(Vec<usize>, Vec<[f64; 3]>, f64)> = None;
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["kmeans", &restart.to_string()]));
        let (labels, centroids, inertia) = lloyd(&points, k, &mut rng);
        let better = match &best {
            None => true,
            Some((_, _, best_inertia)) => inertia < *best_inertia,
        };
        if better {
            best = Some((labels, centroids, inertia));
        }
    }

    let (labels, centroids, inertia) = best.expect("at least one restart ran");
    let labels = ids
        .into_iter()
        .zip(labels)
        .map(|(id, c)| (id.clone(), c))
        .collect();
    Ok(ClusterAssignment { k, labels, centroids, inertia })
}

fn lloyd(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<[f64; 3]>, f64) {
    let n = points.len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels = vec![usize::MAX; n];

    for _ in 0..MAX_LLOYD_ITERATIONS {
        // Assignment step; nearest centroid, lowest index on ties.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best_c = 0;
            let mut best_d = dist2(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, centroid);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        repair_empty_clusters(points, &mut labels, &centroids, k);

        if !changed {
            break;
        }

        // Update step: mean of assigned points.
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            for d in 0..3 {
                sums[c][d] += p[d];
            }
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..3 {
                    centroids[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
    }

    // Final centroids as means of the converged assignment.
    let mut sums = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(&labels) {
        for d in 0..3 {
            sums[c][d] += p[d];
        }
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            for d in 0..3 {
                centroids[c][d] = sums[c][d] / counts[c] as f64;
            }
        }
    }

    let inertia = points.iter().zip(&labels).map(|(p, &c)| dist2(p, &centroids[c])).sum();
    (labels, centroids, inertia)
}

/// Moves the globally farthest point (from its own centroid) into each empty
/// cluster, preferring donors that leave their cluster non-empty.
fn repair_empty_clusters(points: &[[f64; 3]], labels: &mut [usize], centroids: &[[f64; 3]], k: usize) {
    for empty in 0..k {
        if labels.contains(&empty) {
            continue;
        }
        let mut counts = vec![0usize; k];
        for &c in labels.iter() {
            counts[c] += 1;
        }
        let mut farthest: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] <= 1 {
                continue;
            }
            let d = dist2(p, &centroids[labels[i]]);
            let better = match farthest {
                None => true,
                Some((_, best)) => d > best,
            };
            if better {
                farthest = Some((i, d));
            }
        }
        if let Some((i, _)) = farthest {
            labels[i] = empty;
        }
    }
}

/// k-means++: first centroid uniform, then proportional to squared distance
/// from the nearest chosen centroid.
fn plus_plus_init(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)]);

    let mut dist = vec![0.0f64; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let d = centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min);
            dist[i] = d;
            total += d;
        }
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass is on duplicates of chosen centroids.
            rng.random_range(0..n)
        };
        centroids.push(points[idx]);
    }
    centroids
}

/// One k-means run per k, emitted as (k, inertia) pairs for plotting.
pub fn inertia_curve(
    vectors: &BTreeMap<String, [f64; 3]>,
    k_range: impl IntoIterator<Item = usize>,
    seed: u64,
    restarts: usize,
) -> Result<Vec<(usize, f64)>, ClusterError> {
    let ks: Vec<usize> = k_range.into_iter().collect();
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > vectors.len()) {
        return Err(ClusterError::BadKRange);
    }
    ks.into_iter()
        .map(|k| kmeans(vectors, k, seed, restarts).map(|a| (k, a.inertia)))
        .collect()
}

/// Returns the smallest k whose relative inertia drop to the next entry,
/// `(I_k - I_next) / I_k`, falls below `drop_threshold`; the largest k in
/// the curve if none does. A zero inertia counts as a zero drop.
pub fn elbow_select(curve: &[(usize, f64)], drop_threshold: f64) -> Result<usize, ClusterError> {
    if curve.len() < 2 || curve.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(ClusterError::BadCurve);
    }
    for pair in curve.windows(2) {
        let (k, inertia) = pair[0];
        let (_, next) = pair[1];
        let drop = if inertia > 0.0 { (inertia - next) / inertia } else { 0.0 };
        if drop < drop_threshold {
            return Ok(k);
        }
    }
    Ok(curve[curve.len() - 1].0)
}

/// Per cluster and per field independently, the modal value among members;
/// ties break to the smallest value.
pub fn consolidate_hyperparams(
    assignment: &ClusterAssignment,
    tuned: &BTreeMap<String, HyperParams>,
) -> Result<BTreeMap<usize, HyperParams>, ClusterError> {
    let mut members: BTreeMap<usize, Vec<&HyperParams>> = BTreeMap::new();
    for (client, &cluster) in &assignment.labels {
        let hp = tuned.get(client).ok_or_else(|| ClusterError::MissingTuning(client.clone()))?;
        members.entry(cluster).or_default().push(hp);
    }

    let mut out = BTreeMap::new();
    for cluster in 0..assignment.k {
        let list = members.get(&cluster).ok_or(ClusterError::EmptyCluster(cluster))?;
        let hp = HyperParams::new(
            field_mode(list.iter().map(|hp| hp.fc1_neurons)),
            field_mode(list.iter().map(|hp| hp.fc2_neurons)),
            field_mode(list.iter().map(|hp| hp.epochs)),
        );
        out.insert(cluster, hp);
    }
    Ok(out)
}

/// Per-field modal tuple over any set of tuned hyperparameters (used for
/// fleet-wide consolidation in the centralized scheme). `None` on empty
/// input.
pub fn modal_hyperparams(values: impl Iterator<Item = HyperParams>) -> Option<HyperParams> {
    let list: Vec<HyperParams> = values.collect();
    if list.is_empty() {
        return None;
    }
    Some(HyperParams::new(
        field_mode(list.iter().map(|hp| hp.fc1_neurons)),
        field_mode(list.iter().map(|hp| hp.fc2_neurons)),
        field_mode(list.iter().map(|hp| hp.epochs)),
    ))
}

/// Mode with smallest-value tie-break (ascending scan keeps the first max).
fn field_mode(values: impl Iterator<Item = usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    let mut best_value = 0;
    let mut best_count = 0;
    for (value, count) in counts {
        if count > best_count {
            best_count = count;
            best_value = value;
        }
    }
    best_value
}
