//! IDX loading, client partitioning, label flipping and the server's
//! evaluation set.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Schema tag written as the first line of partition reports.
pub const PARTITION_REPORT_SCHEMA: &str = "# hscsfl-partition v1";

/// Images and labels. Feature rows live in shared storage, so subsets and
/// relabelled copies only duplicate row indices and labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Arc<[f64]>,
    dim: usize,
    rows: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset from row-major features (`labels.len() × dim`).
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not match {} labels of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        Ok(LabeledDataset {
            features: features.into(),
            dim,
            rows: (0..labels.len()).collect(),
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let r = self.rows[i];
        &self.features[r * self.dim..(r + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Widens the class universe (e.g. to match a test split).
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: Arc::clone(&self.features),
            dim: self.dim,
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same images, replaced labels.
    pub fn relabelled(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        if labels.len() != self.len() {
            return Err(Error::invalid("relabelling must keep the sample count"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        Ok(LabeledDataset {
            labels,
            ..self.clone()
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_error(path, "truncated header"))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` by `/255`;
/// the class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let images = read_file(images_path)?;
    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&images, 4, images_path)? as usize;
    let height = be_u32(&images, 8, images_path)? as usize;
    let width = be_u32(&images, 12, images_path)? as usize;
    let dim = height * width;
    if dim == 0 {
        return Err(format_error(images_path, "zero-sized images"));
    }
    let pixels = &images[16..];
    if pixels.len() != count * dim {
        return Err(format_error(
            images_path,
            format!(
                "expected {} pixel bytes for {count} images of {height}x{width}, found {}",
                count * dim,
                pixels.len()
            ),
        ));
    }

    let labels = read_file(labels_path)?;
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(format_error(
            labels_path,
            format!(
                "header announces {label_count} labels, found {}",
                label_bytes.len()
            ),
        ));
    }
    if label_count != count {
        return Err(format_error(
            labels_path,
            format!(
                "{label_count} labels but {count} images in {}",
                images_path.display()
            ),
        ));
    }

    let features: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, dim, labels, num_classes)
}

/// Label sets that each client cluster is biased towards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub clusters: Vec<Vec<usize>>,
}

impl BiasSpec {
    /// Four clusters biased on {0,1,5}, {2,6}, {3,4,7}, {8,9}.
    pub fn default_four_clusters() -> Self {
        BiasSpec {
            clusters: vec![vec![0, 1, 5], vec![2, 6], vec![3, 4, 7], vec![8, 9]],
        }
    }

    /// A single cluster covering every class: all clients draw evenly from
    /// every class.
    pub fn iid(num_classes: usize) -> Self {
        BiasSpec {
            clusters: vec![(0..num_classes).collect()],
        }
    }

    /// Cluster index of each of `clients` clients; clusters take contiguous
    /// blocks of client ids, earlier clusters absorbing any remainder.
    pub fn cluster_of_clients(&self, clients: usize) -> Vec<usize> {
        let k = self.clusters.len().max(1);
        let base = clients / k;
        let extra = clients % k;
        let mut out = Vec::with_capacity(clients);
        for cluster in 0..k {
            let size = base + usize::from(cluster < extra);
            out.extend(std::iter::repeat(cluster).take(size));
        }
        out
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("bias spec has no clusters"));
        }
        for (i, set) in self.clusters.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!("cluster {i} has an empty label set")));
            }
            if let Some(bad) = set.iter().find(|&&c| c >= num_classes) {
                return Err(Error::invalid(format!(
                    "cluster {i} references class {bad} outside 0..{num_classes}"
                )));
            }
            let unique: BTreeSet<_> = set.iter().collect();
            if unique.len() != set.len() {
                return Err(Error::invalid(format!("cluster {i} repeats a class")));
            }
        }
        Ok(())
    }
}

/// Parameters of a client partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Fraction of each client's volume drawn from its cluster's label set.
    pub degree: f64,
    pub bias: BiasSpec,
    /// Samples per client. `None` uses `floor(|data| / clients)`, lowered to
    /// the largest volume the per-class supply can satisfy.
    pub volume: Option<usize>,
}

/// Per-client sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub client_count: usize,
    pub per_client_volume: usize,
    pub noniid_degree: f64,
    pub bias_spec: BiasSpec,
    pub cluster_of: Vec<usize>,
}

/// Splits `total` over `classes` as evenly as possible; the remainder goes one
/// each to the lowest class indices.
fn spread(total: usize, classes: &[usize], counts: &mut [usize]) {
    if classes.is_empty() {
        return;
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let base = total / sorted.len();
    let extra = total % sorted.len();
    for (rank, &c) in sorted.iter().enumerate() {
        counts[c] += base + usize::from(rank < extra);
    }
}

/// Per-class sample counts for one client of a cluster biased on `bias_set`.
pub fn client_quota(num_classes: usize, bias_set: &[usize], degree: f64, volume: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    let others: Vec<usize> = (0..num_classes).filter(|c| !bias_set.contains(c)).collect();
    if others.is_empty() {
        spread(volume, bias_set, &mut counts);
        return counts;
    }
    let biased = ((degree * volume as f64) + 1e-9).floor() as usize;
    let biased = biased.min(volume);
    spread(biased, bias_set, &mut counts);
    spread(volume - biased, &others, &mut counts);
    counts
}

fn total_demand(spec: &PartitionSpec, num_classes: usize, cluster_of: &[usize], volume: usize) -> Vec<usize> {
    let quotas: Vec<Vec<usize>> = spec
        .bias
        .clusters
        .iter()
        .map(|set| client_quota(num_classes, set, spec.degree, volume))
        .collect();
    let mut demand = vec![0; num_classes];
    for &cluster in cluster_of {
        for (d, q) in demand.iter_mut().zip(&quotas[cluster]) {
            *d += q;
        }
    }
    demand
}

fn shortfalls(demand: &[usize], supply: &[usize]) -> Vec<(usize, usize, usize)> {
    demand
        .iter()
        .zip(supply)
        .enumerate()
        .filter(|(_, (d, s))| d > s)
        .map(|(c, (&d, &s))| (c, d, s))
        .collect()
}

/// Assigns each client `volume` samples: `floor(degree × volume)` from its
/// cluster's label set and the rest spread over the remaining classes.
/// Sampling is without replacement and deterministic in `seed`.
pub fn partition(data: &LabeledDataset, spec: &PartitionSpec, seed: u64) -> Result<PartitionPlan> {
    let num_classes = data.num_classes();
    if spec.clients == 0 {
        return Err(Error::invalid("partition needs at least one client"));
    }
    if !(0.0..=1.0).contains(&spec.degree) {
        return Err(Error::invalid(format!(
            "non-IID degree {} outside [0, 1]",
            spec.degree
        )));
    }
    spec.bias.validate(num_classes)?;

    let cluster_of = spec.bias.cluster_of_clients(spec.clients);
    let supply = data.class_counts();

    let volume = match spec.volume {
        Some(v) => {
            let short = shortfalls(&total_demand(spec, num_classes, &cluster_of, v), &supply);
            if !short.is_empty() {
                return Err(capacity_error(&short));
            }
            v
        }
        None => {
            let start = data.len() / spec.clients;
            (0..=start)
                .rev()
                .find(|&v| shortfalls(&total_demand(spec, num_classes, &cluster_of, v), &supply).is_empty())
                .unwrap_or(0)
        }
    };

    let mut rng = rng::rng_from_seed(seed);
    let mut pools = data.indices_by_class();
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; num_classes];

    let quotas: Vec<Vec<usize>> = spec
        .bias
        .clusters
        .iter()
        .map(|set| client_quota(num_classes, set, spec.degree, volume))
        .collect();
    let mut assignments = Vec::with_capacity(spec.clients);
    for &cluster in &cluster_of {
        let mut mine = Vec::with_capacity(volume);
        for (class, &want) in quotas[cluster].iter().enumerate() {
            let start = cursor[class];
            mine.extend_from_slice(&pools[class][start..start + want]);
            cursor[class] += want;
        }
        mine.sort_unstable();
        assignments.push(mine);
    }

    Ok(PartitionPlan {
        assignments,
        client_count: spec.clients,
        per_client_volume: volume,
        noniid_degree: spec.degree,
        bias_spec: spec.bias.clone(),
        cluster_of,
    })
}

fn capacity_error(short: &[(usize, usize, usize)]) -> Error {
    let detail: Vec<String> = short
        .iter()
        .map(|(c, d, s)| format!("class {c} needs {d}, has {s}"))
        .collect();
    Error::Capacity(detail.join("; "))
}

impl PartitionPlan {
    /// `counts[client][class]` under the labels of `data`.
    pub fn class_counts(&self, data: &LabeledDataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut counts = vec![0; data.num_classes()];
                for &i in idx {
                    counts[data.label(i)] += 1;
                }
                counts
            })
            .collect()
    }

    /// Writes `client_id,class,count` records preceded by the schema line.
    pub fn write_report<W: Write>(&self, data: &LabeledDataset, out: W) -> std::io::Result<()> {
        write_counts_report(&self.class_counts(data), out)
    }
}

/// Writes `counts[client][class]` as `client_id,class,count` records preceded
/// by the schema line.
pub fn write_counts_report<W: Write>(counts: &[Vec<usize>], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{PARTITION_REPORT_SCHEMA}")?;
    writeln!(out, "client_id,class,count")?;
    for (client, counts) in counts.iter().enumerate() {
        for (class, count) in counts.iter().enumerate() {
            writeln!(out, "{client},{class},{count}")?;
        }
    }
    Ok(())
}

/// A label-flipping attack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackStrategy {
    pub source_classes: BTreeSet<usize>,
    pub target_class: usize,
    pub adversary_clients: BTreeSet<usize>,
}

impl AttackStrategy {
    pub fn validate(&self, clients: usize, num_classes: usize) -> Result<()> {
        if self.source_classes.contains(&self.target_class) {
            return Err(Error::invalid(format!(
                "target class {} is also a source class",
                self.target_class
            )));
        }
        if let Some(c) = self
            .source_classes
            .iter()
            .chain(std::iter::once(&self.target_class))
            .find(|&&c| c >= num_classes)
        {
            return Err(Error::invalid(format!("attack class {c} outside 0..{num_classes}")));
        }
        if let Some(a) = self.adversary_clients.iter().find(|&&a| a >= clients) {
            return Err(Error::invalid(format!("adversary client {a} outside 0..{clients}")));
        }
        Ok(())
    }
}

/// Copy of `data` where samples held by adversary clients have their source
/// labels replaced by the target class. Images are untouched.
pub fn poison(data: &LabeledDataset, plan: &PartitionPlan, strategy: &AttackStrategy) -> Result<LabeledDataset> {
    strategy.validate(plan.client_count, data.num_classes())?;
    let mut labels = data.labels().to_vec();
    for &client in &strategy.adversary_clients {
        for &i in &plan.assignments[client] {
            if strategy.source_classes.contains(&labels[i]) {
                labels[i] = strategy.target_class;
            }
        }
    }
    data.relabelled(labels)
}

/// The server's class-balanced evaluation set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub data: LabeledDataset,
    pub polluted_classes: BTreeSet<usize>,
    /// Human-readable description of how polluted labels were rewritten.
    pub pollution_rule: String,
}

/// An evaluation set plus the training indices left for the clients.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub eval: EvalSet,
    /// Indices into the source data that were not taken, ascending.
    pub remaining: Vec<usize>,
}

/// Holds out `floor(fraction × |data|)` samples split evenly over classes.
/// Labels of samples in `polluted_classes` are rewritten to a uniformly random
/// different class.
pub fn build_eval_set(
    data: &LabeledDataset,
    fraction: f64,
    polluted_classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<EvalSplit> {
    let num_classes = data.num_classes();
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("eval fraction {fraction} outside [0, 1]")));
    }
    if let Some(bad) = polluted_classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("polluted class {bad} outside 0..{num_classes}")));
    }
    if num_classes < 2 && !polluted_classes.is_empty() {
        return Err(Error::invalid("pollution needs at least two classes"));
    }
    let total = ((fraction * data.len() as f64) + 1e-9).floor() as usize;
    if total < num_classes {
        return Err(Error::Capacity(format!(
            "evaluation set of {total} samples cannot cover {num_classes} classes"
        )));
    }
    let all: Vec<usize> = (0..num_classes).collect();
    let mut per_class = vec![0; num_classes];
    spread(total, &all, &mut per_class);
    let short = shortfalls(&per_class, &data.class_counts());
    if !short.is_empty() {
        return Err(capacity_error(&short));
    }

    let mut rng = rng::rng_from_seed(seed);
    let mut taken = vec![false; data.len()];
    let mut chosen = Vec::with_capacity(total);
    for (class, mut pool) in data.indices_by_class().into_iter().enumerate() {
        pool.shuffle(&mut rng);
        for &i in &pool[..per_class[class]] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    let remaining: Vec<usize> = (0..data.len()).filter(|&i| !taken[i]).collect();

    let mut eval_data = data.subset(&chosen);
    if !polluted_classes.is_empty() {
        let mut labels = eval_data.labels().to_vec();
        for l in labels.iter_mut() {
            if polluted_classes.contains(l) {
                // uniform over the other num_classes - 1 labels
                let r = rng.gen_range(0..num_classes - 1);
                *l = if r >= *l { r + 1 } else { r };
            }
        }
        eval_data = eval_data.relabelled(labels)?;
    }

    let pollution_rule = if polluted_classes.is_empty() {
        "none".to_string()
    } else {
        "labels of polluted classes replaced by a uniformly random other class".to_string()
    };
    Ok(EvalSplit {
        eval: EvalSet {
            data: eval_data,
            polluted_classes: polluted_classes.clone(),
            pollution_rule,
        },
        remaining,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `per_class` samples of each class, 2-d features encoding the index.
    fn synthetic(per_class: &[usize]) -> LabeledDataset {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                feats.push(c as f64 / 10.0);
                feats.push(k as f64 / 1e5);
                labels.push(c);
            }
        }
        LabeledDataset::new(feats, 2, labels, per_class.len()).unwrap()
    }

    fn write_idx(dir: &Path, images: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        let mut ib = Vec::new();
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ib.extend_from_slice(&(images.len() as u32).to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            ib.extend_from_slice(im);
        }
        std::fs::write(&ip, ib).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        std::fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn load_idx_reads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0, 255, 17, 128], [1, 2, 3, 4]], &[3, 1]);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.labels(), &[3, 1]);
        assert_eq!(d.image(0), &[0.0, 1.0, 17.0 / 255.0, 128.0 / 255.0]);
        assert_eq!(d.image(1), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
    }

    #[test]
    fn load_idx_reports_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0, 0, 0, 0]], &[0]);
        // swapped paths: bad magic on the "images" file
        match load_idx(&lp, &ip) {
            Err(Error::Format { path, reason }) => {
                assert_eq!(path, lp);
                assert!(reason.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
        // truncated image payload
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { path, .. }) if path == ip));
        // count mismatch
        let (ip, lp) = write_idx(dir.path(), &[[0, 0, 0, 0], [1, 1, 1, 1]], &[0]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { path, .. }) if path == lp));
        // missing file
        assert!(matches!(
            load_idx(dir.path().join("nope"), &lp),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn quota_follows_round_robin_rule() {
        let q = client_quota(10, &[5], 0.9, 3000);
        assert_eq!(q[5], 2700);
        let others: Vec<usize> = (0..10).filter(|&c| c != 5).map(|c| q[c]).collect();
        assert_eq!(others, vec![34, 34, 34, 33, 33, 33, 33, 33, 33]);
        assert_eq!(q.iter().sum::<usize>(), 3000);
    }

    #[test]
    fn full_degree_holds_only_bias_classes() {
        let d = synthetic(&[400; 10]);
        let spec = PartitionSpec {
            clients: 2,
            degree: 1.0,
            bias: BiasSpec { clusters: vec![vec![5], vec![2, 3]] },
            volume: Some(300),
        };
        let plan = partition(&d, &spec, 1).unwrap();
        let counts = plan.class_counts(&d);
        assert_eq!(counts[0][5], 300);
        assert_eq!(counts[0].iter().sum::<usize>(), 300);
        assert_eq!((counts[1][2], counts[1][3]), (150, 150));
        assert_eq!(counts[1].iter().sum::<usize>(), 300);
    }

    #[test]
    fn iid_partition_is_even_per_client() {
        let d = synthetic(&[100, 103, 98, 100, 101, 100, 99, 100, 100, 100]);
        let spec = PartitionSpec {
            clients: 20,
            degree: 0.5,
            bias: BiasSpec::iid(10),
            volume: None,
        };
        let plan = partition(&d, &spec, 3).unwrap();
        // Remainders go to the lowest classes first, so class 2 (98 samples)
        // may receive the fifth sample only while s % 10 <= 2: s = 42.
        assert_eq!(plan.per_client_volume, 42);
        for counts in plan.class_counts(&d) {
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1);
            assert_eq!(counts.iter().sum::<usize>(), 42);
        }
    }

    #[test]
    fn tenth_degree_with_singleton_clusters_is_iid() {
        let d = synthetic(&[200; 10]);
        let spec = PartitionSpec {
            clients: 10,
            degree: 0.1,
            bias: BiasSpec { clusters: (0..10).map(|c| vec![c]).collect() },
            volume: Some(100),
        };
        let plan = partition(&d, &spec, 0).unwrap();
        for counts in plan.class_counts(&d) {
            assert!(counts.iter().all(|&c| c == 10));
        }
    }

    #[test]
    fn explicit_volume_over_capacity_names_class() {
        let d = synthetic(&[50, 500, 500]);
        let spec = PartitionSpec {
            clients: 2,
            degree: 0.9,
            bias: BiasSpec { clusters: vec![vec![0], vec![1]] },
            volume: Some(100),
        };
        match partition(&d, &spec, 0) {
            Err(Error::Capacity(msg)) => assert!(msg.contains("class 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_rejects_bad_spec() {
        let d = synthetic(&[10, 10]);
        let mut spec = PartitionSpec {
            clients: 2,
            degree: 1.5,
            bias: BiasSpec::iid(2),
            volume: None,
        };
        assert!(partition(&d, &spec, 0).is_err());
        spec.degree = 0.5;
        spec.bias = BiasSpec { clusters: vec![vec![2]] };
        assert!(partition(&d, &spec, 0).is_err());
        spec.bias = BiasSpec { clusters: vec![] };
        assert!(partition(&d, &spec, 0).is_err());
    }

    #[test]
    fn poison_flips_only_adversary_samples() {
        let d = LabeledDataset::new(vec![0.0; 6], 1, vec![5, 3, 5, 5, 0, 1], 10).unwrap();
        let plan = PartitionPlan {
            assignments: vec![vec![0, 1, 2], vec![3, 4, 5]],
            client_count: 2,
            per_client_volume: 3,
            noniid_degree: 0.0,
            bias_spec: BiasSpec::iid(10),
            cluster_of: vec![0, 0],
        };
        let strategy = AttackStrategy {
            source_classes: [5].into(),
            target_class: 8,
            adversary_clients: [0].into(),
        };
        let p = poison(&d, &plan, &strategy).unwrap();
        assert_eq!(p.labels(), &[8, 3, 8, 5, 0, 1]);
        assert_eq!(p.image(0), d.image(0));

        let strategy = AttackStrategy {
            source_classes: [0, 1].into(),
            target_class: 8,
            adversary_clients: [1].into(),
        };
        let p = poison(&d, &plan, &strategy).unwrap();
        assert_eq!(p.labels(), &[5, 3, 5, 5, 8, 8]);

        let none = AttackStrategy {
            source_classes: [5].into(),
            target_class: 8,
            adversary_clients: BTreeSet::new(),
        };
        assert_eq!(poison(&d, &plan, &none).unwrap().labels(), d.labels());

        let bad = AttackStrategy {
            source_classes: [8].into(),
            target_class: 8,
            adversary_clients: [0].into(),
        };
        assert!(poison(&d, &plan, &bad).is_err());
    }

    #[test]
    fn eval_set_is_balanced_and_held_out() {
        let d = synthetic(&[6000; 10]);
        let split = build_eval_set(&d, 0.05, &BTreeSet::new(), 4).unwrap();
        assert_eq!(split.eval.data.len(), 3000);
        assert!(split.eval.data.class_counts().iter().all(|&c| c == 300));
        assert_eq!(split.remaining.len(), 57_000);
        // labels untouched without pollution
        for i in 0..split.eval.data.len() {
            let feature_class = (split.eval.data.image(i)[0] * 10.0).round() as usize;
            assert_eq!(split.eval.data.label(i), feature_class);
        }
        let remaining: BTreeSet<_> = split.remaining.iter().collect();
        assert_eq!(remaining.len(), split.remaining.len());
    }

    #[test]
    fn eval_set_pollution_rewrites_only_polluted_class() {
        let d = synthetic(&[200; 10]);
        let split = build_eval_set(&d, 0.5, &[5].into(), 9).unwrap();
        let e = &split.eval.data;
        for i in 0..e.len() {
            let truth = (e.image(i)[0] * 10.0).round() as usize;
            if truth == 5 {
                assert_ne!(e.label(i), 5);
            } else {
                assert_eq!(e.label(i), truth);
            }
        }
    }

    #[test]
    fn eval_set_too_small_is_capacity_error() {
        let d = synthetic(&[10; 10]);
        assert!(matches!(
            build_eval_set(&d, 0.05, &BTreeSet::new(), 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn report_lists_every_client_class_pair() {
        let d = synthetic(&[40; 3]);
        let spec = PartitionSpec {
            clients: 2,
            degree: 0.5,
            bias: BiasSpec { clusters: vec![vec![0], vec![1]] },
            volume: Some(20),
        };
        let plan = partition(&d, &spec, 0).unwrap();
        let mut buf = Vec::new();
        plan.write_report(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PARTITION_REPORT_SCHEMA);
        assert_eq!(lines[1], "client_id,class,count");
        assert_eq!(lines.len(), 2 + 2 * 3);
        assert_eq!(lines[2], "0,0,10");
        assert_eq!(lines[3], "0,1,5");
        assert_eq!(lines[4], "0,2,5");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partitions_are_disjoint_deterministic_and_bounded(
            per_class in prop::collection::vec(20usize..80, 3..6),
            clients in 1usize..8,
            degree in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let d = synthetic(&per_class);
            let c = per_class.len();
            let spec = PartitionSpec {
                clients,
                degree,
                bias: BiasSpec { clusters: vec![vec![0], vec![1, c - 1]] },
                volume: None,
            };
            let plan = partition(&d, &spec, seed).unwrap();
            prop_assert_eq!(&plan, &partition(&d, &spec, seed).unwrap());
            let mut seen = BTreeSet::new();
            for a in &plan.assignments {
                prop_assert_eq!(a.len(), plan.per_client_volume);
                for &i in a {
                    prop_assert!(i < d.len());
                    prop_assert!(seen.insert(i));
                }
            }
            prop_assert!(seen.len() <= d.len());
        }

        #[test]
        fn poisoning_keeps_cardinality_and_images(
            labels in prop::collection::vec(0usize..4, 1..40),
            adversary in any::<bool>(),
        ) {
            let n = labels.len();
            let feats: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let d = LabeledDataset::new(feats, 1, labels, 4).unwrap();
            let plan = PartitionPlan {
                assignments: vec![(0..n).collect()],
                client_count: 1,
                per_client_volume: n,
                noniid_degree: 0.0,
                bias_spec: BiasSpec::iid(4),
                cluster_of: vec![0],
            };
            let strategy = AttackStrategy {
                source_classes: [1].into(),
                target_class: 3,
                adversary_clients: if adversary { [0].into() } else { BTreeSet::new() },
            };
            let p = poison(&d, &plan, &strategy).unwrap();
            prop_assert_eq!(p.len(), n);
            for i in 0..n {
                prop_assert_eq!(p.image(i), d.image(i));
            }
        }
    }
}
