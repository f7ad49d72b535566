//! Load-series ingestion, synthetic fleet generation, scaling, windowing,
//! chronological splitting, and fleet aggregation.
//!
//! CSV format: header `timestamp,<client_id>,...`, one row per hour,
//! ISO-8601 UTC timestamps, kWh values. Lines starting with `#` are treated
//! as comments so artifacts can carry a config-hash line.

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv structure error: {0}")]
    Csv(String),
    #[error("empty or header-only file")]
    Empty,
    #[error("header must start with `timestamp` and name at least one client")]
    BadHeader,
    #[error("duplicate client id `{0}` in header")]
    DuplicateClient(String),
    #[error("row {row}: bad timestamp `{value}`")]
    BadTimestamp { row: usize, value: String },
    #[error("row {row}: timestamps must increase hourly; `{value}` does not follow the previous row")]
    NonMonotoneTimestamp { row: usize, value: String },
    #[error("row {row}: gap before `{value}`; hourly rows must be contiguous")]
    TimestampGap { row: usize, value: String },
    #[error("row {row}, client `{client}`: bad value `{value}`")]
    BadValue { row: usize, client: String, value: String },
    #[error("row {row}, client `{client}`: negative consumption {value} kWh")]
    NegativeValue { row: usize, client: String, value: f64 },
    #[error("series must contain at least {min} hourly values, got {actual}")]
    TooShort { min: usize, actual: usize },
    #[error("scaler requires at least one value")]
    EmptyScalerFit,
    #[error("series length {len} does not exceed lookback {lookback}")]
    LookbackTooLong { len: usize, lookback: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("fleet spec must contain at least one archetype with at least one client")]
    EmptyFleetSpec,
    #[error("fleet spec has negative {0}")]
    NegativeFleetField(&'static str),
    #[error("synthetic series length must be at least 1 hour")]
    ZeroLength,
    #[error("aggregate needs at least one series")]
    EmptyFleet,
    #[error("series `{0}` is misaligned with the first series (start or length differs)")]
    Misaligned(String),
}

/// One client's hourly energy consumption in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSeries {
    pub client_id: String,
    /// Timestamp of the first value; subsequent values follow hourly.
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
}

impl LoadSeries {
    pub fn new(
        client_id: impl Into<String>,
        start: DateTime<Utc>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        let client_id = client_id.into();
        if let Some(idx) = values.iter().position(|v| *v < 0.0) {
            return Err(DataError::NegativeValue { row: idx, client: client_id, value: values[idx] });
        }
        if values.is_empty() {
            return Err(DataError::TooShort { min: 1, actual: 0 });
        }
        Ok(Self { client_id, start, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::hours(index as i64)
    }
}

/// Min-max scaler. `apply` maps the fitted range onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    /// Fits on the given values. A constant input would make the range
    /// degenerate, so the max is widened by 1.0 in that case; constants then
    /// scale to 0 and invert back to the constant.
    pub fn fit(values: &[f64]) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::EmptyScalerFit);
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            max = min + 1.0;
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    #[inline]
    pub fn invert(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }
}

/// One training example: a scaled input window, its scaled target, and the
/// raw kWh target (kept so kWh metrics need no lossy inversion).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Vec<f64>,
    pub target: f64,
    pub target_raw: f64,
}

/// Sliding windows over one scaled series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    windows: Vec<Window>,
    lookback: usize,
    scaler: Scaler,
}

impl WindowedDataset {
    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn targets_raw(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.target_raw).collect()
    }

    /// Builds a dataset directly from windows (tests and pooling).
    pub fn from_windows(windows: Vec<Window>, lookback: usize, scaler: Scaler) -> Self {
        Self { windows, lookback, scaler }
    }
}

/// One synthetic household profile shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub base_load: f64,
    pub peak_amplitude: f64,
    /// Hour of day (0-23) the daily bump is centered on.
    pub peak_hour: f64,
    /// Multiplies the daily bump on weekend hours.
    pub weekend_factor: f64,
    pub noise_std: f64,
    pub clients: usize,
}

/// Synthetic stand-in for a metered fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub archetypes: Vec<ArchetypeSpec>,
    pub length_hours: usize,
    pub seed: u64,
}

/// Hours 120-167 of each 168-hour week are weekend; the synthetic epoch is a
/// Monday 00:00, so this is Saturday/Sunday.
const WEEKEND_START_HOUR: usize = 120;
const HOURS_PER_WEEK: usize = 168;

/// Fixed Monday-start epoch for synthetic fleets (2024-01-01 was a Monday).
pub fn synthetic_epoch() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
        .expect("valid epoch")
        .with_timezone(&Utc)
}

/// Generates a deterministic synthetic fleet. Each client's hour-`t` load is
/// `base + amplitude * bump(t) * weekend(t) + noise`, clamped at zero, where
/// `bump` is the positive part of a cosine centered on the archetype's peak
/// hour.
pub fn synthesize_fleet(spec: &FleetSpec) -> Result<Vec<LoadSeries>, DataError> {
    if spec.length_hours == 0 {
        return Err(DataError::ZeroLength);
    }
    if spec.archetypes.is_empty() || spec.archetypes.iter().all(|a| a.clients == 0) {
        return Err(DataError::EmptyFleetSpec);
    }
    for archetype in &spec.archetypes {
        if archetype.base_load < 0.0 {
            return Err(DataError::NegativeFleetField("base_load"));
        }
        if archetype.peak_amplitude < 0.0 {
            return Err(DataError::NegativeFleetField("peak_amplitude"));
        }
        if archetype.noise_std < 0.0 {
            return Err(DataError::NegativeFleetField("noise_std"));
        }
        if archetype.weekend_factor < 0.0 {
            return Err(DataError::NegativeFleetField("weekend_factor"));
        }
    }

    let start = synthetic_epoch();
    let mut fleet = Vec::new();
    for (arch_idx, archetype) in spec.archetypes.iter().enumerate() {
        for member in 0..archetype.clients {
            let client_id = format!("a{arch_idx:02}_c{member:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["fleet", &client_id]));
            let noise = if archetype.noise_std > 0.0 {
                Some(Normal::new(0.0, archetype.noise_std).expect("std checked non-negative"))
            } else {
                None
            };

            let mut values = Vec::with_capacity(spec.length_hours);
            for t in 0..spec.length_hours {
                let hour_of_day = (t % 24) as f64;
                let phase = (hour_of_day - archetype.peak_hour) * std::f64::consts::TAU / 24.0;
                let bump = phase.cos().max(0.0);
                let weekend = t % HOURS_PER_WEEK >= WEEKEND_START_HOUR;
                let factor = if weekend { archetype.weekend_factor } else { 1.0 };
                let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                let value = archetype.base_load + archetype.peak_amplitude * bump * factor + eps;
                values.push(value.max(0.0));
            }
            fleet.push(LoadSeries { client_id, start, values });
        }
    }
    Ok(fleet)
}

/// Builds the sliding-window dataset for one series: window `i` holds the
/// scaled values `[i, i + lookback)` and targets scaled `values[i + lookback]`.
pub fn make_windows(
    series: &LoadSeries,
    lookback: usize,
    scaler: &Scaler,
) -> Result<WindowedDataset, DataError> {
    if lookback == 0 || series.len() <= lookback {
        return Err(DataError::LookbackTooLong { len: series.len(), lookback });
    }
    let scaled: Vec<f64> = series.values.iter().map(|&v| scaler.apply(v)).collect();
    let windows = (0..series.len() - lookback)
        .map(|i| Window {
            input: scaled[i..i + lookback].to_vec(),
            target: scaled[i + lookback],
            target_raw: series.values[i + lookback],
        })
        .collect();
    Ok(WindowedDataset { windows, lookback, scaler: *scaler })
}

/// Chronological split: the first `floor(fraction * count)` windows train,
/// the rest test. No shuffling.
pub fn split(
    dataset: WindowedDataset,
    train_fraction: f64,
) -> Result<(WindowedDataset, WindowedDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let count = dataset.len();
    let train_count = (train_fraction * count as f64).floor() as usize;
    let WindowedDataset { mut windows, lookback, scaler } = dataset;
    let test_windows = windows.split_off(train_count);
    Ok((
        WindowedDataset { windows, lookback, scaler },
        WindowedDataset { windows: test_windows, lookback, scaler },
    ))
}

/// Number of training windows `split` keeps for a series of this length.
pub fn train_window_count(series_len: usize, lookback: usize, train_fraction: f64) -> usize {
    let count = series_len.saturating_sub(lookback);
    (train_fraction * count as f64).floor() as usize
}

/// A client's train/test windows plus the scaler they were built with.
#[derive(Debug, Clone)]
pub struct PreparedClient {
    pub client_id: String,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
}

/// Canonical per-client preparation: fit a min-max scaler on the values the
/// training windows can see (the first `train_count + lookback` hours), then
/// window and split chronologically.
pub fn prepare_client(
    series: &LoadSeries,
    lookback: usize,
    train_fraction: f64,
) -> Result<PreparedClient, DataError> {
    if series.len() < lookback + 2 {
        return Err(DataError::TooShort { min: lookback + 2, actual: series.len() });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let train_count = train_window_count(series.len(), lookback, train_fraction);
    let visible = train_count + lookback;
    let scaler = Scaler::fit(&series.values[..visible])?;
    let dataset = make_windows(series, lookback, &scaler)?;
    let (train, test) = split(dataset, train_fraction)?;
    Ok(PreparedClient { client_id: series.client_id.clone(), train, test, scaler })
}

/// Elementwise sum of aligned series; the result carries client id
/// `aggregate`.
pub fn aggregate(fleet: &[LoadSeries]) -> Result<LoadSeries, DataError> {
    let first = fleet.first().ok_or(DataError::EmptyFleet)?;
    let mut values = first.values.clone();
    for series in &fleet[1..] {
        if series.start != first.start || series.len() != first.len() {
            return Err(DataError::Misaligned(series.client_id.clone()));
        }
        for (acc, v) in values.iter_mut().zip(&series.values) {
            *acc += v;
        }
    }
    Ok(LoadSeries { client_id: "aggregate".to_string(), start: first.start, values })
}

/// Reads a fleet CSV. Each client column becomes one `LoadSeries`; rows must
/// advance by exactly one hour.
pub fn ingest_csv(path: &Path) -> Result<Vec<LoadSeries>, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_csv(std::io::BufReader::new(file))
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<LoadSeries>, DataError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);

    let headers = csv_reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("timestamp") || headers.len() < 2 {
        return Err(DataError::BadHeader);
    }
    let clients: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    for (idx, id) in clients.iter().enumerate() {
        if id.is_empty() {
            return Err(DataError::BadHeader);
        }
        if clients[..idx].contains(id) {
            return Err(DataError::DuplicateClient(id.clone()));
        }
    }

    let mut start: Option<DateTime<Utc>> = None;
    let mut prev: Option<DateTime<Utc>> = None;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); clients.len()];

    for (offset, record) in csv_reader.records().enumerate() {
        let row = offset + 2; // 1-based, counting the header line
        let record = record.map_err(|e| DataError::Csv(format!("row {row}: {e}")))?;
        if record.len() != clients.len() + 1 {
            return Err(DataError::Csv(format!(
                "row {row}: expected {} fields, got {}",
                clients.len() + 1,
                record.len()
            )));
        }

        let raw_ts = record.get(0).unwrap_or_default();
        let ts = DateTime::parse_from_rfc3339(raw_ts)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|_| DataError::BadTimestamp { row, value: raw_ts.to_string() })?;
        if let Some(prev_ts) = prev {
            if ts <= prev_ts {
                return Err(DataError::NonMonotoneTimestamp { row, value: raw_ts.to_string() });
            }
            if ts - prev_ts != Duration::hours(1) {
                return Err(DataError::TimestampGap { row, value: raw_ts.to_string() });
            }
        } else {
            start = Some(ts);
        }
        prev = Some(ts);

        for (col, client) in clients.iter().enumerate() {
            let raw = record.get(col + 1).unwrap_or_default();
            let value: f64 = raw.trim().parse().map_err(|_| DataError::BadValue {
                row,
                client: client.clone(),
                value: raw.to_string(),
            })?;
            if value < 0.0 {
                return Err(DataError::NegativeValue { row, client: client.clone(), value });
            }
            columns[col].push(value);
        }
    }

    let start = start.ok_or(DataError::Empty)?;
    Ok(clients
        .into_iter()
        .zip(columns)
        .map(|(client_id, values)| LoadSeries { client_id, start, values })
        .collect())
}

/// Writes a fleet in the ingestible CSV format. `comment`, when given, is
/// emitted as a leading `#` line (used for the config hash).
pub fn write_csv(path: &Path, fleet: &[LoadSeries], comment: Option<&str>) -> Result<(), DataError> {
    let first = fleet.first().ok_or(DataError::EmptyFleet)?;
    for series in fleet {
        if series.start != first.start || series.len() != first.len() {
            return Err(DataError::Misaligned(series.client_id.clone()));
        }
    }

    let file = std::fs::File::create(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut out = std::io::BufWriter::new(file);
    use std::io::Write;
    if let Some(comment) = comment {
        writeln!(out, "# {comment}")
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    }
    let mut writer = csv::Writer::from_writer(out);

    let mut header = vec!["timestamp".to_string()];
    header.extend(fleet.iter().map(|s| s.client_id.clone()));
    writer.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;

    for idx in 0..first.len() {
        let mut record = vec![first
            .timestamp(idx)
            .to_rfc3339_opts(SecondsFormat::Secs, true)];
        for series in fleet {
            record.push(format!("{:.6}", series.values[idx]));
        }
        writer.write_record(&record).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    writer.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f64>) -> LoadSeries {
        LoadSeries::new("c1", synthetic_epoch(), values).unwrap()
    }

    #[test]
    fn scaler_round_trip_within_tolerance() {
        let values = [0.2, 5.0, 3.7, 1.1];
        let scaler = Scaler::fit(&values).unwrap();
        for &x in &values {
            assert!((scaler.invert(scaler.apply(x)) - x).abs() < 1e-12);
        }
        assert_eq!(scaler.apply(0.2), 0.0);
        assert_eq!(scaler.apply(5.0), 1.0);
    }

    #[test]
    fn degenerate_scaler_widens_range() {
        let scaler = Scaler::fit(&[2.5, 2.5, 2.5]).unwrap();
        assert!(scaler.max > scaler.min);
        assert_eq!(scaler.apply(2.5), 0.0);
        assert_eq!(scaler.invert(0.0), 2.5);
    }

    #[test]
    fn window_counts_and_alignment() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = series(values.clone());
        let scaler = Scaler::fit(&values).unwrap();
        let ds = make_windows(&s, 24, &scaler).unwrap();
        assert_eq!(ds.len(), 76);
        for (i, w) in ds.windows().iter().enumerate() {
            assert_eq!(w.input.len(), 24);
            assert_eq!(w.input[0], scaler.apply(values[i]));
            assert_eq!(w.target, scaler.apply(values[i + 24]));
            // Raw target is exact, not a lossy inversion.
            assert_eq!(w.target_raw, values[i + 24]);
        }
    }

    #[test]
    fn lookback_must_leave_room() {
        let s = series(vec![1.0; 10]);
        let scaler = Scaler::fit(&s.values).unwrap();
        assert!(make_windows(&s, 10, &scaler).is_err());
        assert!(make_windows(&s, 11, &scaler).is_err());
        assert!(make_windows(&s, 9, &scaler).is_ok());
    }

    #[test]
    fn split_is_chronological_floor() {
        let values: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let s = series(values);
        let scaler = Scaler::fit(&s.values).unwrap();
        let ds = make_windows(&s, 24, &scaler).unwrap();
        let all = ds.windows().to_vec();
        let (train, test) = split(ds, 0.75).unwrap();
        assert_eq!(train.len(), 57);
        assert_eq!(test.len(), 19);
        // Concatenation reproduces the original order: disjoint and complete.
        let rejoined: Vec<_> = train.windows().iter().chain(test.windows()).cloned().collect();
        assert_eq!(rejoined, all);
    }

    #[test]
    fn split_of_four_windows() {
        let s = series((0..28).map(|i| i as f64).collect());
        let scaler = Scaler::fit(&s.values).unwrap();
        let ds = make_windows(&s, 24, &scaler).unwrap();
        assert_eq!(ds.len(), 4);
        let (train, test) = split(ds, 0.75).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let s = series((0..30).map(|i| i as f64).collect());
        let scaler = Scaler::fit(&s.values).unwrap();
        let ds = make_windows(&s, 24, &scaler).unwrap();
        assert!(split(ds.clone(), 1.0).is_err());
        assert!(split(ds.clone(), 0.0).is_err());
        assert!(split(ds, -0.5).is_err());
    }

    #[test]
    fn aggregate_sums_aligned_series() {
        let a = series(vec![1.0; 30]);
        let mut b = series(vec![2.0; 30]);
        b.client_id = "c2".to_string();
        let sum = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(sum.client_id, "aggregate");
        assert!(sum.values.iter().all(|&v| v == 3.0));

        let single = aggregate(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.values, a.values);
    }

    #[test]
    fn aggregate_rejects_misalignment() {
        let a = series(vec![1.0; 30]);
        let mut b = series(vec![2.0; 30]);
        b.client_id = "c2".to_string();
        b.start += Duration::hours(1);
        assert!(matches!(aggregate(&[a, b]), Err(DataError::Misaligned(_))));
    }

    #[test]
    fn aggregate_is_linear_on_exact_values() {
        // Values chosen exactly representable so sums associate exactly.
        let mk = |id: &str, v: f64| {
            let mut s = series(vec![v; 20]);
            s.client_id = id.to_string();
            s
        };
        let fleet = vec![mk("a", 0.25), mk("b", 1.5), mk("c", 2.75), mk("d", 4.0)];
        let whole = aggregate(&fleet).unwrap();
        let left = aggregate(&fleet[..2]).unwrap();
        let right = aggregate(&fleet[2..]).unwrap();
        for i in 0..whole.len() {
            assert_eq!(whole.values[i], left.values[i] + right.values[i]);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_encodes_archetype() {
        let spec = FleetSpec {
            archetypes: vec![
                ArchetypeSpec {
                    base_load: 0.5,
                    peak_amplitude: 1.0,
                    peak_hour: 8.0,
                    weekend_factor: 1.2,
                    noise_std: 0.1,
                    clients: 2,
                },
                ArchetypeSpec {
                    base_load: 1.0,
                    peak_amplitude: 0.5,
                    peak_hour: 20.0,
                    weekend_factor: 1.0,
                    noise_std: 0.05,
                    clients: 1,
                },
            ],
            length_hours: 200,
            seed: 9,
        };
        let fleet_a = synthesize_fleet(&spec).unwrap();
        let fleet_b = synthesize_fleet(&spec).unwrap();
        assert_eq!(fleet_a, fleet_b);
        let ids: Vec<_> = fleet_a.iter().map(|s| s.client_id.as_str()).collect();
        assert_eq!(ids, ["a00_c000", "a00_c001", "a01_c000"]);
        assert!(fleet_a.iter().all(|s| s.len() == 200));
        assert!(fleet_a.iter().all(|s| s.values.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn noiseless_flat_archetype_is_constant_base_load() {
        let spec = FleetSpec {
            archetypes: vec![ArchetypeSpec {
                base_load: 0.75,
                peak_amplitude: 0.0,
                peak_hour: 12.0,
                weekend_factor: 1.5,
                noise_std: 0.0,
                clients: 1,
            }],
            length_hours: 250,
            seed: 3,
        };
        let fleet = synthesize_fleet(&spec).unwrap();
        assert!(fleet[0].values.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn opposed_peaks_correlate_best_at_half_day_shift() {
        let mk = |peak: f64| ArchetypeSpec {
            base_load: 0.2,
            peak_amplitude: 1.0,
            peak_hour: peak,
            weekend_factor: 1.0,
            noise_std: 0.0,
            clients: 1,
        };
        let spec = FleetSpec { archetypes: vec![mk(8.0), mk(20.0)], length_hours: 24 * 14, seed: 1 };
        let fleet = synthesize_fleet(&spec).unwrap();

        // Mean daily profile per archetype.
        let profile = |s: &LoadSeries| -> Vec<f64> {
            let mut sums = [0.0; 24];
            let mut counts = [0usize; 24];
            for (t, &v) in s.values.iter().enumerate() {
                sums[t % 24] += v;
                counts[t % 24] += 1;
            }
            sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
        };
        let p0 = profile(&fleet[0]);
        let p1 = profile(&fleet[1]);

        // Circular cross-correlation; the best shift must be 12 hours.
        let correlation = |shift: usize| -> f64 {
            (0..24).map(|h| p0[h] * p1[(h + shift) % 24]).sum()
        };
        let best = (0..24).max_by(|&a, &b| correlation(a).total_cmp(&correlation(b))).unwrap();
        assert_eq!(best, 12);
    }

    #[test]
    fn csv_round_trip() {
        let spec = FleetSpec {
            archetypes: vec![ArchetypeSpec {
                base_load: 0.5,
                peak_amplitude: 1.5,
                peak_hour: 18.0,
                weekend_factor: 1.3,
                noise_std: 0.2,
                clients: 3,
            }],
            length_hours: 100,
            seed: 11,
        };
        let fleet = synthesize_fleet(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fleet.csv");
        write_csv(&path, &fleet, Some("config_hash=deadbeef")).unwrap();
        let back = ingest_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].client_id, "a00_c000");
        assert_eq!(back[0].start, fleet[0].start);
        assert_eq!(back[0].len(), 100);
        for (orig, round) in fleet[0].values.iter().zip(&back[0].values) {
            assert!((orig - round).abs() < 5e-7); // written with 6 decimals
        }
    }

    #[test]
    fn csv_rejects_negative_value_naming_row_and_client() {
        let text = "timestamp,h1,h2\n\
                    2024-01-01T00:00:00Z,1.0,2.0\n\
                    2024-01-01T01:00:00Z,1.0,-0.5\n";
        let err = read_csv(text.as_bytes()).unwrap_err();
        match err {
            DataError::NegativeValue { row, client, .. } => {
                assert_eq!(row, 3);
                assert_eq!(client, "h2");
            }
            other => panic!("expected NegativeValue, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_duplicate_and_gapped_timestamps() {
        let dup = "timestamp,h1\n\
                   2024-01-01T00:00:00Z,1.0\n\
                   2024-01-01T00:00:00Z,1.0\n";
        assert!(matches!(
            read_csv(dup.as_bytes()),
            Err(DataError::NonMonotoneTimestamp { row: 3, .. })
        ));

        let gap = "timestamp,h1\n\
                   2024-01-01T00:00:00Z,1.0\n\
                   2024-01-01T02:00:00Z,1.0\n";
        assert!(matches!(read_csv(gap.as_bytes()), Err(DataError::TimestampGap { row: 3, .. })));
    }

    #[test]
    fn csv_rejects_ragged_rows_and_missing_file() {
        let ragged = "timestamp,h1,h2\n\
                      2024-01-01T00:00:00Z,1.0,2.0\n\
                      2024-01-01T01:00:00Z,1.0\n";
        assert!(matches!(read_csv(ragged.as_bytes()), Err(DataError::Csv(_))));

        assert!(matches!(
            ingest_csv(Path::new("/nonexistent/fleet.csv")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn csv_three_clients_hundred_rows() {
        let mut text = String::from("timestamp,h1,h2,h3\n");
        let start = synthetic_epoch();
        for i in 0..100 {
            let ts = (start + Duration::hours(i)).to_rfc3339_opts(SecondsFormat::Secs, true);
            text.push_str(&format!("{ts},{},{},{}\n", i, i * 2, i * 3));
        }
        let fleet = read_csv(text.as_bytes()).unwrap();
        assert_eq!(fleet.len(), 3);
        assert!(fleet.iter().all(|s| s.len() == 100));
    }

    #[test]
    fn prepare_client_fits_scaler_on_training_prefix_only() {
        // Training prefix is flat 1.0; a late spike of 9.0 must not leak in.
        let mut values = vec![1.0; 80];
        for v in values.iter_mut().skip(70) {
            *v = 9.0;
        }
        let s = series(values);
        let prepared = prepare_client(&s, 24, 0.75).unwrap();
        // 56 windows total, 42 train; visible prefix = 42 + 24 = 66 hours, all 1.0.
        assert_eq!(prepared.train.len(), 42);
        assert_eq!(prepared.test.len(), 14);
        assert_eq!(prepared.scaler.min, 1.0);
        assert_eq!(prepared.scaler.max, 2.0); // degenerate range widened
    }
}
