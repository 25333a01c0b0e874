//! Pipeline configuration: built-in defaults, overlaid by an optional TOML
//! file, overlaid by `--set key=value` flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use staircase::data::SyntheticConfig;
use staircase::distill::DistillConfig;
use staircase::nn::TrainConfig;
use staircase::profiler::HarnessConfig;
use staircase::saliency::PruneConfig;
use staircase::NetworkSpec;
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    /// CIFAR-10 binary batches under `path`.
    Cifar10,
    /// `train.bin` / `test.bin` labeled-tensor files under `path`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// WideResNet depth, `6n + 4`.
    pub depth: usize,
    pub widen: usize,
    pub classes: usize,
    /// Replaces the prunable widths of the generated teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Source of every component seed.
    pub seed: u64,
    pub out: PathBuf,
    /// Pruning-curve points kept for discovery and reporting.
    pub samples: usize,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub harness: HarnessConfig,
    pub distill: DistillConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            samples: 10,
            data: DataConfig {
                kind: DataKind::Synthetic,
                path: None,
                train_limit: None,
                test_limit: None,
                synthetic: SyntheticConfig {
                    shape: [3, 32, 32],
                    train: 5000,
                    ..SyntheticConfig::default()
                },
            },
            network: NetworkConfig {
                depth: 10,
                widen: 1,
                classes: 10,
                widths: None,
            },
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            harness: HarnessConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults, then `file`, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = Table::try_from(Self::default()).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut user = Table::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let t: Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut user, t);
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
            set_dotted(&mut user, key.trim(), parse_value(raw.trim()))?;
        }
        merge(&mut table, user.clone());
        let mut cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.propagate();
        let resolved = Table::try_from(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(key) = unknown_key(&user, &resolved, "") {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the global seed (and class count) into every component.
    fn propagate(&mut self) {
        self.data.synthetic.seed = self.seed;
        self.data.synthetic.classes = self.network.classes;
        self.train.seed = self.seed;
        self.prune.seed = self.seed;
        self.harness.seed = self.seed;
        self.distill.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: staircase::Error| CliError::Usage(e.to_string());
        self.train.validate().map_err(usage)?;
        self.prune.validate().map_err(usage)?;
        self.harness.validate().map_err(usage)?;
        self.distill.validate().map_err(usage)?;
        if self.samples == 0 {
            return Err(CliError::Usage("samples must be positive".into()));
        }
        if self.data.kind != DataKind::Synthetic && self.data.path.is_none() {
            return Err(CliError::Usage(format!("data.kind = {:?} needs data.path", self.data.kind)));
        }
        self.teacher_spec(self.data.synthetic.shape).map_err(usage)?;
        Ok(())
    }

    /// Teacher architecture for inputs of shape `input`.
    pub fn teacher_spec(&self, input: [usize; 3]) -> staircase::Result<NetworkSpec> {
        let n = &self.network;
        let spec = NetworkSpec::wide_resnet(n.depth, n.widen, input, n.classes)?;
        match &n.widths {
            Some(w) => spec.with_widths(w),
            None => Ok(spec),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad config key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{key:?}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// First key present in `user` but absent from the resolved config.
fn unknown_key(user: &Table, resolved: &Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => return Some(path),
            (Value::Table(u), Some(Value::Table(r))) => {
                if let Some(bad) = unknown_key(u, r, &path) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, {
            let mut d = PipelineConfig::default();
            d.propagate();
            d
        });
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = [
            "train.epochs=3",
            "seed=7",
            "data.kind=cifar10",
            "data.path=/tmp",
            "train.lr_milestones=[1, 2]",
            "train.epochs=4",
        ]
        .map(String::from);
        let cfg = PipelineConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.lr_milestones, vec![1, 2]);
        assert_eq!(cfg.data.kind, DataKind::Cifar10);
        assert_eq!(cfg.data.path.as_deref(), Some(Path::new("/tmp")));
        assert_eq!((cfg.train.seed, cfg.prune.seed, cfg.harness.seed, cfg.distill.train.seed), (7, 7, 7, 7));
        assert_eq!(cfg.data.synthetic.seed, 7);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "samples = 3\n[prune]\nsteps_per_prune = 5\n").unwrap();
        let cfg = PipelineConfig::load(Some(&path), &["samples=4".into()]).unwrap();
        assert_eq!((cfg.samples, cfg.prune.steps_per_prune), (4, 5));
    }

    #[test]
    fn bad_input_is_usage() {
        for sets in [vec!["train.bogus=1"], vec!["nokey"], vec!["train.lr=-1"], vec!["samples=0"], vec!["data.kind=raw"]] {
            let sets: Vec<String> = sets.into_iter().map(String::from).collect();
            let e = PipelineConfig::load(None, &sets).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{sets:?}: {e}");
        }
        let e = PipelineConfig::load(Some(Path::new("/nonexistent/c.toml")), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn custom_widths() {
        let cfg = PipelineConfig::load(None, &["network.widths=[1, 8, 8]".into()]).unwrap();
        assert_eq!(cfg.teacher_spec([3, 8, 8]).unwrap().widths(), vec![1, 8, 8]);
        assert!(PipelineConfig::load(None, &["network.widths=[1, 8]".into()]).is_err());
    }
}
