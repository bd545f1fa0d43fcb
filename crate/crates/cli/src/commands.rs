//! Subcommand implementations, callable without going through argument
//! parsing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hscsfl_core::dataset::write_counts_report;
use hscsfl_core::numerics::{pca_project, Matrix};
use hscsfl_core::simulator::{self, Datasets, ExperimentConfig, RunResult};
use rayon::prelude::*;

use crate::artifacts::{self, RunSummary};
use crate::presets::Preset;

/// Where an experiment configuration comes from, plus command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(_), Some(_)) => bail!("give either --preset or --config, not both"),
            (Some(name), None) => name.parse::<Preset>()?.config(&self.data_dir),
            (None, Some(path)) => artifacts::read_config(path)?,
            (None, None) => bail!("one of --preset or --config is required"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Writes the `client_id,class,count` table of the configured partition.
pub fn partition(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = cfg.dataset.load()?;
    partition_with_data(cfg, &data, out)
}

pub fn partition_with_data(cfg: &ExperimentConfig, data: &Datasets, out: &Path) -> Result<()> {
    let prepared = simulator::prepare(cfg, data)?;
    let mut file = create(out)?;
    write_counts_report(&prepared.partition_counts(), &mut file)?;
    file.flush()?;
    Ok(())
}

/// Runs an experiment and writes its artifacts into `out`. Nothing is
/// written if the configuration or data are invalid.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    run_with_data(cfg, &data, out)
}

pub fn run_with_data(cfg: &ExperimentConfig, data: &Datasets, out: &Path) -> Result<RunResult> {
    let result = simulator::run_with_data(cfg, data).with_context(|| format!("run {} failed", cfg.name))?;
    artifacts::write_run(out, &result)?;
    Ok(result)
}

/// Projects a stored gradient snapshot onto its top principal components and
/// writes `client_id,pc1,..`.
pub fn analyze_pca(gradients: &Path, components: usize, out: &Path) -> Result<()> {
    let grads = artifacts::read_gradients(gradients)?;
    let rows: Vec<&[f64]> = grads.iter().map(|g| g.values.as_slice()).collect();
    let matrix = Matrix::from_rows(&rows)?;
    let projection = pca_project(&matrix, components)?;
    let ids: Vec<usize> = grads.iter().map(|g| g.client_id).collect();
    let mut file = create(out)?;
    artifacts::write_pca(&mut file, &ids, &projection)
}

/// Accepts run directories or summary files.
fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("summary.json")
    } else {
        p.to_path_buf()
    }
}

/// Builds the comparison table from one or more finished runs.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    ensure!(!runs.is_empty(), "report needs at least one run");
    let summaries = runs
        .iter()
        .map(|p| artifacts::read_summary(&summary_path(p)))
        .collect::<Result<Vec<RunSummary>>>()?;
    let mut file = create(out)?;
    artifacts::write_report(&mut file, &summaries)
}

/// Runs every (preset, seed) pair into `out/<preset>/seed-<seed>` and writes
/// `out/report.csv`. Up to `jobs` runs execute at once.
pub fn sweep(presets: &[String], seeds: &[u64], data_dir: &Path, out: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    ensure!(!presets.is_empty(), "sweep needs at least one preset");
    ensure!(!seeds.is_empty(), "sweep needs at least one seed");
    let mut plans = Vec::new();
    for name in presets {
        let preset: Preset = name.parse()?;
        for &seed in seeds {
            let mut cfg = preset.config(data_dir);
            cfg.seed = seed;
            plans.push((out.join(preset.to_string()).join(format!("seed-{seed}")), cfg));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("cannot start worker pool")?;
    let dirs = pool.install(|| {
        plans
            .par_iter()
            .map(|(dir, cfg)| run(cfg, dir).map(|_| dir.clone()))
            .collect::<Result<Vec<_>>>()
    })?;
    report(&dirs, &out.join("report.csv"))?;
    Ok(dirs)
}
