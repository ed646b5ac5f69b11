//! Experiment configuration file (a single JSON document; unknown keys are rejected).

use std::path::{Path, PathBuf};

use advdpnp_core::attacks::{Attack, AttackConfig};
use advdpnp_core::data::{gen_blobs, load_idx, BlobSpec, Dataset, Split};
use advdpnp_core::model::ArchitectureConfig;
use advdpnp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs(BlobSpec),
    Idx(IdxPaths),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: Attack,
}

fn geometry_default() -> AttackConfig {
    AttackConfig::linf(8.0 / 255.0, 1.0 / 255.0, 20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub attacks: Vec<NamedAttack>,
    /// Attack whose outputs feed the adversarial geometry metrics.
    #[serde(default = "geometry_default")]
    pub geometry_attack: AttackConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { attacks: Vec::new(), geometry_attack: geometry_default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Reference PGD attack; each sweep varies one of its fields.
    pub base: AttackConfig,
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    #[serde(default)]
    pub iteration_grid: Vec<usize>,
    #[serde(default)]
    pub restart_grid: Vec<usize>,
    /// Compare cross-entropy and composite objectives at the base budget.
    #[serde(default)]
    pub adaptive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Run seed for training and every attack; replaces `train.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Also write `checkpoint_epoch<N>.advp` every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Reads a config file; relative IDX paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetConfig::Idx(p) = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for f in [&mut p.train_images, &mut p.train_labels, &mut p.test_images, &mut p.test_labels] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (set output_dir or --out-dir)".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.architecture.validate()?;
        self.train.validate()?;
        for a in &self.eval.attacks {
            a.attack.validate()?;
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CliError::Config(format!("attack name `{}` must be non-empty [A-Za-z0-9_-]", a.name)));
            }
        }
        self.eval.geometry_attack.validate()?;
        if let Some(s) = &self.sweep {
            s.base.validate()?;
            if s.epsilon_grid.is_empty() && s.iteration_grid.is_empty() && s.restart_grid.is_empty() && !s.adaptive {
                return Err(CliError::Config("sweep section has no grid".into()));
            }
            if s.epsilon_grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) || s.restart_grid.contains(&0) {
                return Err(CliError::Config("sweep grids need epsilons >= 0 and restarts >= 1".into()));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        let (d, m) = match &self.dataset {
            DatasetConfig::Blobs(spec) => {
                spec.validate()?;
                (spec.dimension(), spec.centers.len())
            }
            DatasetConfig::Idx(p) => {
                for f in [&p.train_images, &p.train_labels, &p.test_images, &p.test_labels] {
                    if !f.is_file() {
                        return Err(CliError::Config(format!("dataset file {} does not exist", f.display())));
                    }
                }
                (self.architecture.input_len(), p.num_classes.unwrap_or(2))
            }
        };
        if d != self.architecture.input_len() {
            return Err(CliError::Config(format!(
                "dataset dimension {d} does not match architecture input {}",
                self.architecture.input_len()
            )));
        }
        if m < 2 {
            return Err(CliError::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset, CliError> {
        let ds = match &self.dataset {
            DatasetConfig::Blobs(spec) => gen_blobs(spec, split)?,
            DatasetConfig::Idx(p) => {
                let (i, l, limit) = match split {
                    Split::Train => (&p.train_images, &p.train_labels, p.train_limit),
                    Split::Test => (&p.test_images, &p.test_labels, p.test_limit),
                };
                let ds = load_idx(i, l, split, p.num_classes)?;
                match limit {
                    Some(n) => ds.take(n),
                    None => ds,
                }
            }
        };
        if ds.inputs().row_len() != self.architecture.input_len() {
            return Err(CliError::Config(format!(
                "samples have {} values, architecture expects {}",
                ds.inputs().row_len(),
                self.architecture.input_len()
            )));
        }
        Ok(ds)
    }
}
