//! Federated short-term electrical load forecasting.
//!
//! Clients train small LSTM forecasters on their own smart-meter data, a
//! simulated server aggregates weights per cluster with FedAvg, clients that
//! deter the global model are detected and dropped, and the federated scheme
//! is benchmarked against centralized and local learning for individual
//! (ILP) and aggregate (ALP) load prediction.
//!
//! Modules:
//! - [`neural`]: the from-scratch LSTM + dense forecaster (exact gradients,
//!   Adam).
//! - [`data`]: ingestion, synthetic fleets, scaling, sliding windows,
//!   chronological splits, aggregation.
//! - [`hypertune`]: per-client grid search over (fc1, fc2, epochs).
//! - [`clustering`]: k-means over hyperparameter vectors, inertia curves,
//!   elbow selection, per-cluster hyperparameter consolidation.
//! - [`federated`]: the clustered federated training loop with deterrent
//!   removal and round logging.
//! - [`schemes`]: federated/centralized/local evaluation, RMSE metrics,
//!   cluster report tables.

pub mod clustering;
pub mod data;
pub mod federated;
pub mod hypertune;
pub mod neural;
pub mod params;
pub mod schemes;
pub mod seeds;
