//! On-disk formats of run outputs. Every text file starts with a
//! `# hscsfl-<kind> v1` line.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hscsfl_core::model::GradientVector;
use hscsfl_core::numerics::PcaProjection;
use hscsfl_core::simulator::{ExperimentConfig, GradientSnapshot, RunResult};
use serde::{Deserialize, Serialize};

pub const ROUNDS_SCHEMA: &str = "# hscsfl-rounds v1";
pub const SCORES_SCHEMA: &str = "# hscsfl-scores v1";
pub const RISK_SCHEMA: &str = "# hscsfl-risk v1";
pub const GRADIENTS_SCHEMA: &str = "# hscsfl-gradients v1";
pub const PCA_SCHEMA: &str = "# hscsfl-pca v1";
pub const REPORT_SCHEMA: &str = "# hscsfl-report v1";
pub const CONFIG_SCHEMA: &str = "# hscsfl-config v1";
pub const SUMMARY_SCHEMA: &str = "hscsfl-summary v1";

/// Machine-readable digest of one run. Contains no timing so identical runs
/// produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub name: String,
    pub dataset: String,
    pub rule: String,
    pub noniid_degree: f64,
    pub adversary_fraction: f64,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub per_client_volume: usize,
    pub adversaries: Vec<usize>,
    pub attacked_classes: Vec<usize>,
    pub polluted_classes: Vec<usize>,
    pub final_global_accuracy: f64,
    pub final_class_accuracy: Vec<f64>,
    pub final_attacked_accuracy: f64,
    pub global_accuracy_series: Vec<f64>,
    pub attacked_series: Vec<f64>,
    /// Benign minus adversary mean honest score per round, when scored.
    pub hs_gap_series: Vec<Option<f64>>,
    /// Rounds in which at least one adversary received positive weight.
    pub adversary_rounds: usize,
    /// Rounds in which each client received positive weight.
    pub participation_counts: Vec<usize>,
}

impl RunSummary {
    pub fn from_result(result: &RunResult) -> Self {
        let cfg = &result.config;
        let attack = result.attack_summary();
        let last = result.final_record();
        let mut participation = vec![0; cfg.clients];
        for r in &result.records {
            for (slot, &w) in participation.iter_mut().zip(&r.weights) {
                if w > 0.0 {
                    *slot += 1;
                }
            }
        }
        RunSummary {
            schema: SUMMARY_SCHEMA.to_string(),
            name: cfg.name.clone(),
            dataset: dataset_label(cfg),
            rule: cfg.rule.to_string(),
            noniid_degree: cfg.noniid_degree,
            adversary_fraction: cfg.adversary_fraction,
            seed: cfg.seed,
            rounds: cfg.rounds,
            clients: cfg.clients,
            per_client_volume: result.partition.per_client_volume,
            adversaries: result.adversaries.iter().copied().collect(),
            attacked_classes: cfg.attack.source_classes.clone(),
            polluted_classes: cfg.polluted_classes.clone(),
            final_global_accuracy: last.global_accuracy,
            final_class_accuracy: last.class_accuracy.clone(),
            final_attacked_accuracy: attack.final_attacked,
            global_accuracy_series: result.records.iter().map(|r| r.global_accuracy).collect(),
            attacked_series: attack.attacked_series,
            hs_gap_series: result.records.iter().map(|r| r.hs_gap).collect(),
            adversary_rounds: attack.adversary_rounds,
            participation_counts: participation,
        }
    }
}

/// Name of the directory holding the training images.
pub fn dataset_label(cfg: &ExperimentConfig) -> String {
    cfg.dataset
        .train_images
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn joined<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    let body = toml::to_string(cfg).context("cannot serialise configuration")?;
    Ok(format!("{CONFIG_SCHEMA}\n{body}"))
}

pub fn config_from_toml(text: &str) -> Result<ExperimentConfig> {
    Ok(toml::from_str(text)?)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    config_from_toml(&text).with_context(|| format!("invalid configuration in {}", path.display()))
}

/// Writes every artifact of a run into `dir` (created if needed) and returns
/// the paths written.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();

    let path = dir.join("config.toml");
    fs::write(&path, config_to_toml(&result.config)?).with_context(|| format!("cannot write {}", path.display()))?;
    written.push(path);

    let path = dir.join("rounds.csv");
    write_rounds(&mut create(&path)?, result)?;
    written.push(path);

    if result.records.iter().any(|r| r.board.is_some()) {
        let path = dir.join("scores.csv");
        write_scores(&mut create(&path)?, result)?;
        written.push(path);
        let path = dir.join("risk.csv");
        write_risk(&mut create(&path)?, result)?;
        written.push(path);
    }

    let path = dir.join("partition.csv");
    let mut out = create(&path)?;
    hscsfl_core::dataset::write_counts_report(&result.partition_counts, &mut out)?;
    out.flush()?;
    written.push(path);

    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&RunSummary::from_result(result))?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    written.push(path);

    if !result.checkpoints.is_empty() {
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        for model in &result.checkpoints {
            let path = ckpt_dir.join(format!("model_round_{:04}.txt", model.version));
            let mut out = create(&path)?;
            model.write_checkpoint(&mut out)?;
            out.flush()?;
            written.push(path);
        }
    }
    for snap in &result.snapshots {
        let path = dir.join(format!("gradients_round_{:04}.csv", snap.round));
        write_gradients(&mut create(&path)?, snap)?;
        written.push(path);
    }
    Ok(written)
}

/// One line per round:
/// `round,global_accuracy,class_0..class_{C-1},hs_gap,selected,weights,cluster_weights,weights_informational,fallback_to_server`.
/// List-valued columns are `;`-separated; `hs_gap` is empty when not scored.
pub fn write_rounds<W: Write>(out: &mut W, result: &RunResult) -> Result<()> {
    let classes = result.final_record().class_accuracy.len();
    writeln!(out, "{ROUNDS_SCHEMA}")?;
    let mut header = String::from("round,global_accuracy");
    for c in 0..classes {
        write!(header, ",class_{c}")?;
    }
    header.push_str(",hs_gap,selected,weights,cluster_weights,weights_informational,fallback_to_server");
    writeln!(out, "{header}")?;
    for r in &result.records {
        let mut line = format!("{},{}", r.round, r.global_accuracy);
        for a in &r.class_accuracy {
            write!(line, ",{a}")?;
        }
        let gap = r.hs_gap.map(|g| g.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{line},{gap},{},{},{},{},{}",
            joined(&r.selected),
            joined(&r.weights),
            joined(&r.cluster_weights),
            r.weights_informational,
            r.fallback_to_server
        )?;
    }
    out.flush()?;
    Ok(())
}

/// `round,client_id,hs,selected,accv_0..accv_{C-1}`.
pub fn write_scores<W: Write>(out: &mut W, result: &RunResult) -> Result<()> {
    writeln!(out, "{SCORES_SCHEMA}")?;
    let classes = result.final_record().class_accuracy.len();
    let mut header = String::from("round,client_id,hs,selected");
    for c in 0..classes {
        write!(header, ",accv_{c}")?;
    }
    writeln!(out, "{header}")?;
    for r in &result.records {
        let Some(board) = &r.board else { continue };
        for (k, (&id, &hs)) in board.scores.client_ids.iter().zip(&board.scores.scores).enumerate() {
            let mut line = format!("{},{id},{hs},{}", r.round, u8::from(board.scores.selected.contains(&id)));
            for a in &board.accuracy[k].values {
                write!(line, ",{a}")?;
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `round,perv_0..perv_{C-1},risv_0..risv_{C-1}`.
pub fn write_risk<W: Write>(out: &mut W, result: &RunResult) -> Result<()> {
    writeln!(out, "{RISK_SCHEMA}")?;
    let classes = result.final_record().class_accuracy.len();
    let mut header = String::from("round");
    for c in 0..classes {
        write!(header, ",perv_{c}")?;
    }
    for c in 0..classes {
        write!(header, ",risv_{c}")?;
    }
    writeln!(out, "{header}")?;
    for r in &result.records {
        let Some(board) = &r.board else { continue };
        let mut line = r.round.to_string();
        for v in board.performance.values.iter().chain(&board.risk.values) {
            write!(line, ",{v}")?;
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// `# hscsfl-gradients v1 round=<r>` then one `client_id,v0,v1,...` line per
/// client.
pub fn write_gradients<W: Write>(out: &mut W, snap: &GradientSnapshot) -> Result<()> {
    writeln!(out, "{GRADIENTS_SCHEMA} round={}", snap.round)?;
    for g in &snap.gradients {
        let mut line = g.client_id.to_string();
        for v in &g.values {
            write!(line, ",{v}")?;
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_gradients(path: &Path) -> Result<Vec<GradientVector>> {
    let file = File::open(path).with_context(|| format!("cannot open gradient snapshot {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    ensure!(
        header.starts_with(GRADIENTS_SCHEMA),
        "{} is not a gradient snapshot (header {header:?})",
        path.display()
    );
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields
            .next()
            .unwrap_or_default()
            .parse::<usize>()
            .with_context(|| format!("{} line {}: bad client id", path.display(), n + 2))?;
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}: bad value", path.display(), n + 2))?;
        out.push(GradientVector::new(id, values));
    }
    if out.is_empty() {
        bail!("{} holds no gradients", path.display());
    }
    Ok(out)
}

/// `client_id,pc1,..` with the degenerate flag in the header line.
pub fn write_pca<W: Write>(out: &mut W, client_ids: &[usize], projection: &PcaProjection) -> Result<()> {
    let k = projection.coordinates.cols();
    writeln!(out, "{PCA_SCHEMA} degenerate={}", projection.degenerate)?;
    let mut header = String::from("client_id");
    for c in 1..=k {
        write!(header, ",pc{c}")?;
    }
    writeln!(out, "{header}")?;
    for (i, id) in client_ids.iter().enumerate() {
        let mut line = id.to_string();
        for v in projection.coordinates.row(i) {
            write!(line, ",{v}")?;
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let summary: RunSummary =
        serde_json::from_str(&text).with_context(|| format!("{} is not a run summary", path.display()))?;
    ensure!(
        summary.schema == SUMMARY_SCHEMA,
        "{} has schema {:?}, expected {SUMMARY_SCHEMA:?}",
        path.display(),
        summary.schema
    );
    Ok(summary)
}

/// One row per run: `name,dataset,noniid_degree,rule,adversary_fraction,seed,global_accuracy,class_0..`.
/// Rows are sorted by dataset, degree, rule, adversary share and seed.
pub fn write_report<W: Write>(out: &mut W, summaries: &[RunSummary]) -> Result<()> {
    let classes = summaries.first().map_or(0, |s| s.final_class_accuracy.len());
    if let Some(s) = summaries.iter().find(|s| s.final_class_accuracy.len() != classes) {
        bail!("run {} has {} classes, expected {classes}", s.name, s.final_class_accuracy.len());
    }
    let mut rows: Vec<&RunSummary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        (&a.dataset, a.noniid_degree, &a.rule, a.adversary_fraction, a.seed, &a.name)
            .partial_cmp(&(&b.dataset, b.noniid_degree, &b.rule, b.adversary_fraction, b.seed, &b.name))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    writeln!(out, "{REPORT_SCHEMA}")?;
    let mut header = String::from("name,dataset,noniid_degree,rule,adversary_fraction,seed,global_accuracy");
    for c in 0..classes {
        write!(header, ",class_{c}")?;
    }
    writeln!(out, "{header}")?;
    for s in rows {
        let mut line = format!(
            "{},{},{},{},{},{},{:.4}",
            s.name, s.dataset, s.noniid_degree, s.rule, s.adversary_fraction, s.seed, s.final_global_accuracy
        );
        for a in &s.final_class_accuracy {
            write!(line, ",{a:.4}")?;
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
