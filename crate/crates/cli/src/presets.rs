//! Named experiment presets.
//!
//! A preset name has the form `strategy<S>-<dataset><split>-<rule>[-adv<P>]`:
//!
//! * `S` is 1 (MNIST-style 5→8), 2 (5→8) or 3 ({0,1}→8); the strategy only
//!   fixes the flipped classes, the dataset is named separately.
//! * `dataset` is `mnist` or `fmnist`, `split` is `iid`, `08` or `09`.
//! * `rule` is any aggregation rule name.
//! * `P` is the adversary share in percent (15, 25 or 35; default 25).
//!
//! For example `strategy2-fmnist08-krum-adv35`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use hscsfl_core::aggregation::RuleName;
use hscsfl_core::dataset::BiasSpec;
use hscsfl_core::model::TrainConfig;
use hscsfl_core::simulator::{AttackConfig, DatasetPaths, ExperimentConfig};

/// Environment variable holding the dataset root directory.
pub const DATA_DIR_ENV: &str = "HSCSFL_DATA_DIR";

pub const LEARNING_RATE: f64 = 0.001;
pub const BATCH_SIZE: usize = 128;
pub const LOCAL_EPOCHS: usize = 1;
/// Server step size for presets. With plain averaging at 1.0, 100 rounds of
/// one local epoch leave the IID baseline several points short of converged.
pub const SERVER_ETA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
}

impl DatasetKind {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fmnist",
        }
    }

    /// Sub-directory of the data root holding the IDX files.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Iid,
    /// Non-IID degree in tenths.
    Biased(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Preset {
    pub strategy: u8,
    pub dataset: DatasetKind,
    pub split: Split,
    pub rule: RuleName,
    pub adversary_percent: u8,
}

impl Preset {
    pub const STRATEGIES: [u8; 3] = [1, 2, 3];
    pub const ADVERSARY_PERCENTS: [u8; 3] = [15, 25, 35];

    /// Every preset the catalogue documents.
    pub fn catalog() -> Vec<Preset> {
        let mut out = Vec::new();
        for strategy in Self::STRATEGIES {
            for dataset in [DatasetKind::Mnist, DatasetKind::FashionMnist] {
                for split in [Split::Iid, Split::Biased(8), Split::Biased(9)] {
                    for rule in RuleName::ALL {
                        for adversary_percent in Self::ADVERSARY_PERCENTS {
                            out.push(Preset {
                                strategy,
                                dataset,
                                split,
                                rule,
                                adversary_percent,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn attack(&self) -> AttackConfig {
        let source_classes = match self.strategy {
            3 => vec![0, 1],
            _ => vec![5],
        };
        AttackConfig {
            source_classes,
            target_class: 8,
        }
    }

    /// Expands the preset into a full configuration reading data from
    /// `data_root/<dataset dir>`.
    pub fn config(&self, data_root: &Path) -> ExperimentConfig {
        let (degree, clusters) = match self.split {
            Split::Iid => (0.1, BiasSpec::iid(10).clusters),
            Split::Biased(tenths) => (f64::from(tenths) / 10.0, BiasSpec::default_four_clusters().clusters),
        };
        ExperimentConfig {
            name: self.to_string(),
            dataset: DatasetPaths::in_dir(data_root.join(self.dataset.dir_name())),
            clients: 20,
            rounds: 100,
            noniid_degree: degree,
            bias_clusters: clusters,
            per_client_volume: None,
            adversary_fraction: f64::from(self.adversary_percent) / 100.0,
            attack: self.attack(),
            rule: self.rule,
            trim_fraction: None,
            train: TrainConfig {
                learning_rate: LEARNING_RATE,
                batch_size: BATCH_SIZE,
                local_epochs: LOCAL_EPOCHS,
                seed: 0,
            },
            eval_fraction: 0.05,
            polluted_classes: vec![],
            eta: SERVER_ETA,
            seed: 0,
            checkpoint_every: 0,
            snapshot_rounds: vec![],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Iid => "iid".to_string(),
            Split::Biased(t) => format!("0{t}"),
        };
        write!(f, "strategy{}-{}{}-{}", self.strategy, self.dataset.tag(), split, self.rule)?;
        if self.adversary_percent != 25 {
            write!(f, "-adv{}", self.adversary_percent)?;
        }
        Ok(())
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(name: &str) -> Result<Self> {
        let parse = || -> Result<Preset> {
            let mut parts = name.splitn(3, '-');
            let strategy = parts
                .next()
                .and_then(|s| s.strip_prefix("strategy"))
                .context("missing strategy<N> prefix")?;
            let strategy: u8 = strategy.parse().context("bad strategy number")?;
            if !Self::STRATEGIES.contains(&strategy) {
                bail!("strategy must be 1, 2 or 3");
            }
            let data = parts.next().context("missing dataset part")?;
            let (dataset, split) = if let Some(rest) = data.strip_prefix("fmnist") {
                (DatasetKind::FashionMnist, rest)
            } else if let Some(rest) = data.strip_prefix("mnist") {
                (DatasetKind::Mnist, rest)
            } else {
                bail!("dataset must start with mnist or fmnist");
            };
            let split = match split {
                "iid" => Split::Iid,
                "08" => Split::Biased(8),
                "09" => Split::Biased(9),
                other => bail!("unknown split {other:?} (expected iid, 08 or 09)"),
            };
            let tail = parts.next().context("missing rule part")?;
            let (rule, adv) = match tail.rsplit_once("-adv") {
                Some((rule, pct)) => (rule, pct.parse::<u8>().context("bad adversary percent")?),
                None => (tail, 25),
            };
            if !Self::ADVERSARY_PERCENTS.contains(&adv) {
                bail!("adversary percent must be 15, 25 or 35");
            }
            Ok(Preset {
                strategy,
                dataset,
                split,
                rule: rule.parse()?,
                adversary_percent: adv,
            })
        };
        parse().with_context(|| format!("invalid preset name {name:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_over_the_catalog() {
        let catalog = Preset::catalog();
        assert_eq!(catalog.len(), 3 * 2 * 3 * 6 * 3);
        for p in catalog {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn parses_documented_names() {
        let p: Preset = "strategy1-mnist09-hscsfl".parse().unwrap();
        assert_eq!(p.dataset, DatasetKind::Mnist);
        assert_eq!(p.split, Split::Biased(9));
        assert_eq!(p.rule, RuleName::Hscsfl);
        assert_eq!(p.adversary_percent, 25);
        let p: Preset = "strategy3-fmnist08-trimmed_mean-adv35".parse().unwrap();
        assert_eq!(p.attack().source_classes, vec![0, 1]);
        assert_eq!(p.adversary_percent, 35);
        for bad in ["strategy4-mnist09-krum", "strategy1-cifar09-krum", "strategy1-mnist07-krum", "strategy1-mnist09-bulyan", "strategy1-mnist09-krum-adv20"] {
            assert!(bad.parse::<Preset>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_points_into_the_data_root() {
        let p: Preset = "strategy2-fmnist08-fltrust".parse().unwrap();
        let c = p.config(Path::new("/d"));
        assert_eq!(c.dataset.train_images, Path::new("/d/fashion-mnist/train-images-idx3-ubyte"));
        assert_eq!(c.noniid_degree, 0.8);
        assert_eq!(c.adversary_count(), 5);
        assert!(c.validate().is_ok());
    }
}
