//! In-process federation simulator with timing and energy accounting.
//!
//! Metric definitions, applied to monotonic wall-time spans measured
//! around each client's single-threaded fit:
//! - training time: the slowest client plus the coordinator, the wall
//!   time of a real deployment where clients run in parallel;
//! - sum of CPU time: every client plus the coordinator, the total
//!   compute the federation burned;
//! - watt-hours: device watts times the sum of CPU seconds over 3600,
//!   assuming every client runs on the same device class.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::activation::ActivationSpec;
use crate::data::{partition, split_train_test, Dataset, PartitionMode, PartitionPlan};
use crate::error::{Error, Result};
use crate::model::{accuracy, fit_client, solve_weights, AggregateState, DataBatch, ModelWeights};

/// Parameters of a simulated federated round.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationConfig {
    pub num_clients: usize,
    pub partition_mode: PartitionMode,
    pub lambda: f64,
    pub seed: u64,
    pub repeats: usize,
    /// Power draw of one client device, in watts.
    pub device_watts: f64,
    pub train_fraction: f64,
    /// Fit clients concurrently. Spans are still measured per task, so
    /// the CPU-time sum keeps its meaning.
    pub parallel_clients: bool,
    /// Worker cap for parallel fits; `None` uses the rayon default.
    pub workers: Option<usize>,
    pub activation: ActivationSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_clients: 1,
            partition_mode: PartitionMode::IidShuffle,
            lambda: 1e-3,
            seed: 0,
            repeats: 3,
            device_watts: 65.0,
            train_fraction: 0.70,
            parallel_clients: false,
            workers: None,
            activation: ActivationSpec::logistic(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Argument("need at least one client".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Argument("need at least one repeat".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Argument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.device_watts > 0.0) {
            return Err(Error::Argument(format!(
                "device watts must be positive, got {}",
                self.device_watts
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Raw wall-time spans of one round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundTiming {
    pub per_client_seconds: Vec<f64>,
    pub coordinator_seconds: f64,
}

/// One repeat's timings, derived metrics, and accuracies. The derived
/// fields are computed from the spans at construction, so the metric
/// identities hold exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RepeatRecord {
    pub partition_seed: u64,
    pub per_client_seconds: Vec<f64>,
    pub coordinator_seconds: f64,
    pub training_time_seconds: f64,
    pub sum_cpu_seconds: f64,
    pub watt_hours: f64,
    pub accuracy_train: f64,
    pub accuracy_test: f64,
}

impl RepeatRecord {
    pub fn new(
        partition_seed: u64,
        timing: RoundTiming,
        device_watts: f64,
        accuracy_train: f64,
        accuracy_test: f64,
    ) -> Self {
        let (training_time, sum_cpu, watt_hours) =
            derive_metrics(&timing.per_client_seconds, timing.coordinator_seconds, device_watts);
        Self {
            partition_seed,
            per_client_seconds: timing.per_client_seconds,
            coordinator_seconds: timing.coordinator_seconds,
            training_time_seconds: training_time,
            sum_cpu_seconds: sum_cpu,
            watt_hours,
            accuracy_train,
            accuracy_test,
        }
    }
}

/// Aggregated report over all repeats: client and coordinator spans are
/// averaged per position, then the three derived metrics are recomputed
/// from those means so the identities stay exact on the report itself.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub num_clients: usize,
    pub per_client_seconds: Vec<f64>,
    pub coordinator_seconds: f64,
    pub training_time_seconds: f64,
    pub sum_cpu_seconds: f64,
    pub watt_hours: f64,
    pub accuracy_train: f64,
    pub accuracy_test: f64,
    pub repeats_aggregated: usize,
    pub repeats: Vec<RepeatRecord>,
}

impl MetricsReport {
    pub fn from_repeats(repeats: Vec<RepeatRecord>, device_watts: f64) -> Result<Self> {
        let first = repeats
            .first()
            .ok_or_else(|| Error::Argument("report needs at least one repeat".into()))?;
        let num_clients = first.per_client_seconds.len();
        if repeats
            .iter()
            .any(|r| r.per_client_seconds.len() != num_clients)
        {
            return Err(Error::Shape(
                "repeats disagree on the number of clients".into(),
            ));
        }
        let k = repeats.len() as f64;
        let mut per_client = vec![0.0; num_clients];
        let mut coordinator = 0.0;
        let mut acc_train = 0.0;
        let mut acc_test = 0.0;
        for rec in &repeats {
            for (acc, &v) in per_client.iter_mut().zip(&rec.per_client_seconds) {
                *acc += v / k;
            }
            coordinator += rec.coordinator_seconds / k;
            acc_train += rec.accuracy_train / k;
            acc_test += rec.accuracy_test / k;
        }
        let (training_time, sum_cpu, watt_hours) =
            derive_metrics(&per_client, coordinator, device_watts);
        Ok(Self {
            num_clients,
            per_client_seconds: per_client,
            coordinator_seconds: coordinator,
            training_time_seconds: training_time,
            sum_cpu_seconds: sum_cpu,
            watt_hours,
            accuracy_train: acc_train,
            accuracy_test: acc_test,
            repeats_aggregated: repeats.len(),
            repeats,
        })
    }
}

fn derive_metrics(per_client: &[f64], coordinator: f64, device_watts: f64) -> (f64, f64, f64) {
    let slowest = per_client.iter().copied().fold(0.0f64, f64::max);
    let training_time = slowest + coordinator;
    let sum_cpu = per_client.iter().sum::<f64>() + coordinator;
    let watt_hours = device_watts * sum_cpu / 3600.0;
    (training_time, sum_cpu, watt_hours)
}

fn fit_shard(shard: &Dataset, cfg: &SimulationConfig) -> Result<(crate::model::ClientUpdate, f64)> {
    let started = Instant::now();
    let (low, high) = cfg.activation.encoding_bounds();
    let targets = crate::data::encode_targets(shard.labels(), shard.num_classes(), low, high)?;
    let batch = DataBatch::new(shard.features().view(), targets)?;
    let update = fit_client(&batch, &cfg.activation)?;
    Ok((update, started.elapsed().as_secs_f64()))
}

/// Runs one federated round: partition, fit every client, fold the
/// updates at the coordinator, solve. Returns the global weights and the
/// raw spans, one per client.
pub fn run_round(
    train: &Dataset,
    plan: &PartitionPlan,
    cfg: &SimulationConfig,
) -> Result<(ModelWeights, RoundTiming)> {
    let shards = partition(train, plan)?;

    let fits: Vec<Result<(crate::model::ClientUpdate, f64)>> = if cfg.parallel_clients {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Argument(format!("cannot build worker pool: {e}")))?;
        pool.install(|| shards.par_iter().map(|s| fit_shard(s, cfg)).collect())
    } else {
        shards.iter().map(|s| fit_shard(s, cfg)).collect()
    };

    let mut updates = Vec::with_capacity(fits.len());
    let mut per_client_seconds = Vec::with_capacity(fits.len());
    for fit in fits {
        let (update, seconds) = fit?;
        updates.push(update);
        per_client_seconds.push(seconds);
    }

    let started = Instant::now();
    let mut state = AggregateState::empty();
    for update in &updates {
        state.incorporate(update)?;
    }
    let weights = solve_weights(&state, cfg.lambda, &cfg.activation)?;
    let coordinator_seconds = started.elapsed().as_secs_f64();

    Ok((
        weights,
        RoundTiming {
            per_client_seconds,
            coordinator_seconds,
        },
    ))
}

/// Full experiment: split, run `repeats` rounds with derived partition
/// seeds, score train and test accuracy, aggregate the report.
pub fn run_experiment(ds: &Dataset, cfg: &SimulationConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (train, test) = split_train_test(ds, cfg.train_fraction, cfg.seed)?;
    let mut records = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let partition_seed = cfg.seed.wrapping_add(repeat as u64);
        let plan = PartitionPlan {
            mode: cfg.partition_mode,
            num_clients: cfg.num_clients,
            seed: partition_seed,
        };
        let (weights, timing) = run_round(&train, &plan, cfg)?;
        let acc_train = accuracy(train.features().view(), train.labels(), &weights)?;
        let acc_test = accuracy(test.features().view(), test.labels(), &weights)?;
        records.push(RepeatRecord::new(
            partition_seed,
            timing,
            cfg.device_watts,
            acc_train,
            acc_test,
        ));
    }
    MetricsReport::from_repeats(records, cfg.device_watts)
}

/// Runs one experiment per client count, same seed family throughout.
pub fn sweep_clients(
    ds: &Dataset,
    cfg: &SimulationConfig,
    client_counts: &[usize],
) -> Result<Vec<MetricsReport>> {
    if client_counts.is_empty() {
        return Err(Error::Argument("sweep needs at least one client count".into()));
    }
    client_counts
        .iter()
        .map(|&count| {
            let mut run_cfg = cfg.clone();
            run_cfg.num_clients = count;
            run_experiment(ds, &run_cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn tiny_dataset(n: usize) -> Dataset {
        // two linearly separable stripes on one feature
        let features = Array2::from_shape_fn((2, n), |(i, j)| {
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            sign * (1.0 + (i + j) as f64 * 0.01)
        });
        let labels: Vec<u32> = (0..n).map(|j| (j % 2) as u32).collect();
        Dataset::from_parts(features, labels, vec!["neg".into(), "pos".into()]).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimulationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.num_clients = 0;
        assert!(cfg.validate().is_err());
        cfg = SimulationConfig {
            lambda: -0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = SimulationConfig {
            device_watts: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = SimulationConfig {
            repeats: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metric_identities_on_synthetic_spans() {
        let timing = RoundTiming {
            per_client_seconds: vec![1.0, 4.0, 2.5],
            coordinator_seconds: 0.5,
        };
        let rec = RepeatRecord::new(0, timing, 65.0, 1.0, 1.0);
        assert_eq!(rec.training_time_seconds, 4.5);
        assert_eq!(rec.sum_cpu_seconds, 8.0);
        assert_eq!(rec.watt_hours, 65.0 * 8.0 / 3600.0);
    }

    #[test]
    fn watt_hours_unit_definition() {
        // 65 W for 3600 s of summed CPU is exactly 65 Wh
        let timing = RoundTiming {
            per_client_seconds: vec![3000.0],
            coordinator_seconds: 600.0,
        };
        let rec = RepeatRecord::new(0, timing, 65.0, 1.0, 1.0);
        assert_eq!(rec.sum_cpu_seconds, 3600.0);
        assert_eq!(rec.watt_hours, 65.0);
    }

    #[test]
    fn report_aggregates_all_repeats() {
        let recs: Vec<RepeatRecord> = (0..3)
            .map(|i| {
                RepeatRecord::new(
                    i,
                    RoundTiming {
                        per_client_seconds: vec![1.0 + i as f64, 2.0],
                        coordinator_seconds: 1.0,
                    },
                    65.0,
                    0.9,
                    0.8,
                )
            })
            .collect();
        let report = MetricsReport::from_repeats(recs, 65.0).unwrap();
        assert_eq!(report.repeats_aggregated, 3);
        assert_eq!(report.repeats.len(), 3);
        assert_abs_diff_eq!(report.per_client_seconds[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(report.accuracy_train, 0.9, epsilon = 1e-15);
        // identities hold exactly on the aggregate
        assert_eq!(
            report.training_time_seconds,
            report.per_client_seconds.iter().copied().fold(0.0, f64::max)
                + report.coordinator_seconds
        );
        assert_eq!(
            report.sum_cpu_seconds,
            report.per_client_seconds.iter().sum::<f64>() + report.coordinator_seconds
        );
        assert_eq!(
            report.watt_hours,
            65.0 * report.sum_cpu_seconds / 3600.0
        );
    }

    #[test]
    fn single_client_round_runs_centralized_pipeline() {
        let ds = tiny_dataset(40);
        let cfg = SimulationConfig {
            num_clients: 1,
            repeats: 1,
            ..Default::default()
        };
        let plan = PartitionPlan {
            mode: PartitionMode::IidShuffle,
            num_clients: 1,
            seed: 0,
        };
        let (_, timing) = run_round(&ds, &plan, &cfg).unwrap();
        assert_eq!(timing.per_client_seconds.len(), 1);
    }

    #[test]
    fn experiment_reports_every_repeat() {
        let ds = tiny_dataset(60);
        let cfg = SimulationConfig {
            num_clients: 3,
            repeats: 3,
            ..Default::default()
        };
        let report = run_experiment(&ds, &cfg).unwrap();
        assert_eq!(report.repeats_aggregated, 3);
        assert_eq!(report.per_client_seconds.len(), 3);
        assert!(report.accuracy_test > 0.9, "separable stripes should score high");
    }

    #[test]
    fn parallel_and_serial_agree_on_weights() {
        let ds = tiny_dataset(80);
        let serial = SimulationConfig {
            num_clients: 4,
            repeats: 1,
            ..Default::default()
        };
        let parallel = SimulationConfig {
            parallel_clients: true,
            workers: Some(2),
            ..serial.clone()
        };
        let plan = PartitionPlan {
            mode: PartitionMode::IidShuffle,
            num_clients: 4,
            seed: 7,
        };
        let (w_serial, _) = run_round(&ds, &plan, &serial).unwrap();
        let (w_parallel, _) = run_round(&ds, &plan, &parallel).unwrap();
        assert_eq!(w_serial.weights(), w_parallel.weights());
    }

    #[test]
    fn sweep_emits_reports_in_input_order() {
        let ds = tiny_dataset(60);
        let cfg = SimulationConfig {
            repeats: 1,
            ..Default::default()
        };
        let reports = sweep_clients(&ds, &cfg, &[1, 3, 7]).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[0].num_clients, 1);
        assert_eq!(reports[1].num_clients, 3);
        assert_eq!(reports[2].num_clients, 7);
        assert!(sweep_clients(&ds, &cfg, &[]).is_err());
    }
}
