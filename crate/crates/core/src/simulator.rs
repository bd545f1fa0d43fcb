//! The synchronous federated training loop and its per-round metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationInput, AggregationOutput, RuleName};
use crate::dataset::{self, AttackStrategy, BiasSpec, EvalSet, LabeledDataset, PartitionPlan, PartitionSpec};
use crate::error::{Error, Result};
use crate::hscs::{self, SelectionBoard};
use crate::model::{self, GradientVector, ModelState, TrainConfig};
use crate::rng::{stream_seed, Stream};

/// IDX files of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DatasetPaths {
    /// Standard IDX file names inside `dir`.
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        DatasetPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<Datasets> {
        let train = dataset::load_idx(&self.train_images, &self.train_labels)?;
        let test = dataset::load_idx(&self.test_images, &self.test_labels)?;
        Datasets::new(train, test)
    }
}

/// Training and test data sharing one class count.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Datasets {
    pub fn new(train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(Error::invalid(format!(
                "train images have {} features, test images {}",
                train.dim(),
                test.dim()
            )));
        }
        let classes = train.num_classes().max(test.num_classes());
        Ok(Datasets {
            train: train.with_num_classes(classes)?,
            test: test.with_num_classes(classes)?,
        })
    }
}

/// Label flipping applied by every adversary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub source_classes: Vec<usize>,
    pub target_class: usize,
}

fn default_clients() -> usize {
    20
}
fn default_rounds() -> usize {
    100
}
fn default_eval_fraction() -> f64 {
    0.05
}
fn default_eta() -> f64 {
    1.0
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetPaths,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    pub noniid_degree: f64,
    /// Bias label set of each client cluster.
    pub bias_clusters: Vec<Vec<usize>>,
    /// Samples per client; `None` derives it from the data.
    #[serde(default)]
    pub per_client_volume: Option<usize>,
    /// Share of clients controlled by the adversary; they are the lowest ids.
    pub adversary_fraction: f64,
    pub attack: AttackConfig,
    pub rule: RuleName,
    /// Trimmed-mean level; defaults to the adversary fraction.
    #[serde(default)]
    pub trim_fraction: Option<f64>,
    /// Local SGD settings. The seed field is ignored; every client and round
    /// gets its own seed derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub polluted_classes: Vec<usize>,
    /// Server step size applied to the aggregate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep a model copy every this many rounds (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Rounds (1-based) whose client gradients are kept for later analysis.
    #[serde(default)]
    pub snapshot_rounds: Vec<usize>,
}

impl ExperimentConfig {
    pub fn adversary_count(&self) -> usize {
        (self.adversary_fraction * self.clients as f64).round() as usize
    }

    pub fn adversaries(&self) -> BTreeSet<usize> {
        (0..self.adversary_count()).collect()
    }

    pub fn bias_spec(&self) -> BiasSpec {
        BiasSpec {
            clusters: self.bias_clusters.clone(),
        }
    }

    pub fn attack_strategy(&self) -> AttackStrategy {
        AttackStrategy {
            source_classes: self.attack.source_classes.iter().copied().collect(),
            target_class: self.attack.target_class,
            adversary_clients: self.adversaries(),
        }
    }

    pub fn trim(&self) -> f64 {
        self.trim_fraction.unwrap_or(self.adversary_fraction)
    }

    /// Checks everything that can be checked without the data.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.clients == 0 {
            return Err(Error::invalid("clients must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.adversary_fraction) {
            return Err(Error::invalid(format!(
                "adversary fraction {} outside [0, 0.5)",
                self.adversary_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.noniid_degree) {
            return Err(Error::invalid(format!(
                "non-IID degree {} outside [0, 1]",
                self.noniid_degree
            )));
        }
        if !self.eta.is_finite() {
            return Err(Error::invalid("eta must be finite"));
        }
        if !(self.train.learning_rate > 0.0) || !self.train.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let n = self.clients;
        let f = self.adversary_count();
        if 2 * f >= n && f > 0 {
            return Err(Error::invalid(format!("{f} adversaries among {n} clients is not a minority")));
        }
        match self.rule {
            RuleName::Krum if n < f + 3 => {
                return Err(Error::invalid(format!(
                    "Krum requires n >= f + 3, got n = {n}, f = {f}"
                )))
            }
            RuleName::TrimmedMean => {
                let k = (self.trim() * n as f64 + 1e-9).floor() as usize;
                if 2 * k >= n {
                    return Err(Error::invalid(format!(
                        "trim fraction {} removes every client",
                        self.trim()
                    )));
                }
            }
            _ => {}
        }
        if let Some(&r) = self.snapshot_rounds.iter().find(|&&r| r == 0 || r > self.rounds) {
            return Err(Error::invalid(format!("snapshot round {r} outside 1..={}", self.rounds)));
        }
        Ok(())
    }
}

/// Metrics of one round, taken after the global update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub global_accuracy: f64,
    pub class_accuracy: Vec<f64>,
    /// Aggregation weight of each client, indexed by client id.
    pub weights: Vec<f64>,
    pub weights_informational: bool,
    pub fallback_to_server: bool,
    pub selected: BTreeSet<usize>,
    /// Selection details when honest scoring ran this round.
    pub board: Option<SelectionBoard>,
    pub hs_gap: Option<f64>,
    pub cluster_weights: Vec<f64>,
}

impl RoundRecord {
    pub fn honest_scores(&self) -> Option<&[f64]> {
        self.board.as_ref().map(|b| b.scores.scores.as_slice())
    }
}

/// Client gradients of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    pub round: usize,
    pub gradients: Vec<GradientVector>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub final_model: ModelState,
    pub partition: PartitionPlan,
    /// `counts[client][class]` of each shard before poisoning.
    pub partition_counts: Vec<Vec<usize>>,
    pub adversaries: BTreeSet<usize>,
    pub checkpoints: Vec<ModelState>,
    pub snapshots: Vec<GradientSnapshot>,
    pub duration: Duration,
}

impl RunResult {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("a run has at least one round")
    }

    pub fn attack_summary(&self) -> AttackSummary {
        let sources: BTreeSet<usize> = self.config.attack.source_classes.iter().copied().collect();
        attack_success_monitor(&self.records, &sources, &self.adversaries)
    }
}

/// Mean honest score of benign clients minus that of adversaries. `None`
/// when there are no scores or one of the groups is empty.
pub fn hs_gap(record: &RoundRecord, adversaries: &BTreeSet<usize>) -> Option<f64> {
    let board = record.board.as_ref()?;
    gap_of(&board.scores.client_ids, &board.scores.scores, adversaries)
}

fn gap_of(ids: &[usize], scores: &[f64], adversaries: &BTreeSet<usize>) -> Option<f64> {
    let (mut benign, mut bad) = ((0.0, 0usize), (0.0, 0usize));
    for (id, s) in ids.iter().zip(scores) {
        let slot = if adversaries.contains(id) { &mut bad } else { &mut benign };
        slot.0 += s;
        slot.1 += 1;
    }
    if benign.1 == 0 || bad.1 == 0 {
        return None;
    }
    Some(benign.0 / benign.1 as f64 - bad.0 / bad.1 as f64)
}

/// Mean aggregation weight of the clients in each cluster.
pub fn cluster_weights(weights: &[f64], cluster_of: &[usize]) -> Vec<f64> {
    let clusters = cluster_of.iter().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; clusters];
    let mut count = vec![0usize; clusters];
    for (w, &c) in weights.iter().zip(cluster_of) {
        sum[c] += w;
        count[c] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect()
}

/// How the attacked classes fared over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    /// Lowest test accuracy among the attacked classes, per round.
    pub attacked_series: Vec<f64>,
    pub final_attacked: f64,
    /// Final test accuracy of each attacked class.
    pub final_by_class: BTreeMap<usize, f64>,
    /// Rounds in which at least one adversary received positive weight.
    pub adversary_rounds: usize,
}

pub fn attack_success_monitor(
    records: &[RoundRecord],
    source_classes: &BTreeSet<usize>,
    adversaries: &BTreeSet<usize>,
) -> AttackSummary {
    let attacked_series: Vec<f64> = records
        .iter()
        .map(|r| {
            source_classes
                .iter()
                .map(|&c| r.class_accuracy[c])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let final_by_class = records
        .last()
        .map(|r| source_classes.iter().map(|&c| (c, r.class_accuracy[c])).collect())
        .unwrap_or_default();
    let adversary_rounds = records
        .iter()
        .filter(|r| adversaries.iter().any(|&a| r.weights.get(a).is_some_and(|&w| w > 0.0)))
        .count();
    AttackSummary {
        final_attacked: attacked_series.last().copied().unwrap_or(f64::NAN),
        attacked_series,
        final_by_class,
        adversary_rounds,
    }
}

/// Loads the configured data and runs the experiment.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let data = config.dataset.load()?;
    run_with_data(config, &data)
}

/// Data layout of a run before any training: the server's evaluation set,
/// the client pool, its partition and the per-client shards (poisoned for
/// adversaries).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub eval: EvalSet,
    pub pool: LabeledDataset,
    pub plan: PartitionPlan,
    pub shards: Vec<LabeledDataset>,
}

impl Prepared {
    /// `counts[client][class]` of each shard before poisoning.
    pub fn partition_counts(&self) -> Vec<Vec<usize>> {
        self.plan.class_counts(&self.pool)
    }
}

/// Holds out the evaluation set, partitions the rest and applies the attack.
pub fn prepare(config: &ExperimentConfig, data: &Datasets) -> Result<Prepared> {
    config.validate()?;
    let seed = config.seed;
    let polluted: BTreeSet<usize> = config.polluted_classes.iter().copied().collect();
    let split = dataset::build_eval_set(
        &data.train,
        config.eval_fraction,
        &polluted,
        stream_seed(seed, Stream::EvalSet, 0, 0),
    )?;
    let pool = data.train.subset(&split.remaining);
    let spec = PartitionSpec {
        clients: config.clients,
        degree: config.noniid_degree,
        bias: config.bias_spec(),
        volume: config.per_client_volume,
    };
    let plan = dataset::partition(&pool, &spec, stream_seed(seed, Stream::Partition, 0, 0))?;
    let strategy = config.attack_strategy();
    strategy.validate(config.clients, data.train.num_classes())?;
    let poisoned = dataset::poison(&pool, &plan, &strategy)?;
    let shards = plan.assignments.iter().map(|a| poisoned.subset(a)).collect();
    Ok(Prepared {
        eval: split.eval,
        pool,
        plan,
        shards,
    })
}

/// Runs the experiment on already loaded data; `config.dataset` is ignored.
pub fn run_with_data(config: &ExperimentConfig, data: &Datasets) -> Result<RunResult> {
    let started = Instant::now();
    let seed = config.seed;
    let classes = data.train.num_classes();
    let Prepared {
        eval,
        pool,
        plan,
        shards,
    } = prepare(config, data)?;

    let adversaries = config.adversaries();
    let f = adversaries.len();
    let mut global = ModelState::zeros(data.train.dim(), classes);
    let mut records = Vec::with_capacity(config.rounds);
    let mut checkpoints = Vec::new();
    let mut snapshots = Vec::new();

    for round in 1..=config.rounds {
        let step = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let gradients = shards
            .par_iter()
            .enumerate()
            .map(|(client, shard)| {
                let cfg = TrainConfig {
                    seed: stream_seed(seed, Stream::ClientTraining, client as u64, round as u64),
                    ..config.train.clone()
                };
                model::local_train(&global, shard, &cfg, client)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(step)?;

        let (output, board) = aggregate(config, &gradients, &global, &eval, f, round).map_err(step)?;
        global = model::apply_update(&global, &output.aggregate, config.eta).map_err(step)?;

        let per_class = model::evaluate_per_class(&global, &data.test).map_err(step)?;
        let global_accuracy = model::global_accuracy(&global, &data.test).map_err(step)?;
        let mut record = RoundRecord {
            round,
            global_accuracy,
            class_accuracy: per_class.accuracy,
            cluster_weights: cluster_weights(&output.weights, &plan.cluster_of),
            weights: output.weights,
            weights_informational: output.weights_informational,
            fallback_to_server: output.fallback_to_server,
            selected: output.selected,
            board,
            hs_gap: None,
        };
        record.hs_gap = hs_gap(&record, &adversaries);
        records.push(record);

        if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
            checkpoints.push(global.clone());
        }
        if config.snapshot_rounds.contains(&round) {
            snapshots.push(GradientSnapshot { round, gradients });
        }
    }

    Ok(RunResult {
        config: config.clone(),
        records,
        final_model: global,
        partition_counts: plan.class_counts(&pool),
        partition: plan,
        adversaries,
        checkpoints,
        snapshots,
        duration: started.elapsed(),
    })
}

fn aggregate(
    config: &ExperimentConfig,
    gradients: &[GradientVector],
    global: &ModelState,
    eval: &EvalSet,
    byzantine_count: usize,
    round: usize,
) -> Result<(AggregationOutput, Option<SelectionBoard>)> {
    let input = AggregationInput::new(gradients, byzantine_count);
    let plain = |out: Result<AggregationOutput>| out.map(|o| (o, None));
    match config.rule {
        RuleName::FedAvg => plain(aggregation::fed_avg(&input)),
        RuleName::Krum => plain(aggregation::krum(&input)),
        RuleName::Median => plain(aggregation::coordinate_median(&input)),
        RuleName::TrimmedMean => plain(aggregation::trimmed_mean(&input, config.trim())),
        RuleName::FlTrust => {
            // the server trains on its own clean evaluation set
            let cfg = TrainConfig {
                seed: stream_seed(config.seed, Stream::ServerTraining, 0, round as u64),
                ..config.train.clone()
            };
            let server = model::local_train(global, &eval.data, &cfg, aggregation::AGGREGATE_ID)?;
            plain(aggregation::fl_trust(&input.with_server_gradient(&server)))
        }
        RuleName::Hscsfl => {
            let select = gradients.len() - byzantine_count;
            let (out, board) = hscs::hscs_aggregate(&input, global, eval, select)?;
            Ok((out, Some(board)))
        }
    }
}
