use std::path::{Path, PathBuf};

use posbias_core::adapter::AdapterSpec;
use posbias_core::model::ModelConfig;
use posbias_core::prompt::Strategy;
use posbias_core::task::{PermutationScheme, TaskConfig};
use posbias_core::train::TrainConfig;
use posbias_probe::{EndpointConfig, LabelPattern};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Master seed for data generation and probing.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    pub adapter: Option<AdapterSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    pub probe: Option<ProbeConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Relative paths resolve against the config file's directory.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pretrain_n: usize,
    /// Probability of truth slot 1 in pretraining data.
    pub head: f64,
    /// Mix candidate counts `k_min..=K` in pretraining; `None` keeps K fixed.
    pub k_min: Option<usize>,
    /// Source instances for finetuning, before augmentation.
    pub finetune_n: usize,
    /// Copies per source; `None` means K.
    pub augment_m: Option<usize>,
    pub scheme: PermutationScheme,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { pretrain_n: 100_000, head: 0.5, k_min: None, finetune_n: 500, augment_m: None, scheme: PermutationScheme::Cyclic }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_per_slot: usize,
    pub slots: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_slot: 200, slots: None }
    }
}

fn default_strategy() -> Strategy {
    Strategy::ZeroShot
}
fn default_noun() -> String {
    "Product".into()
}
fn default_probe_n() -> usize {
    20
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub endpoint: EndpointConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_probe_n")]
    pub n_per_slot: usize,
    #[serde(default = "default_noun")]
    pub noun: String,
    #[serde(default)]
    pub strict: bool,
    pub label_pattern: Option<String>,
}

impl ProbeConfig {
    pub fn pattern(&self) -> Result<LabelPattern, String> {
        match &self.label_pattern {
            Some(p) => LabelPattern::new(p).map_err(|e| e.to_string()),
            None => Ok(LabelPattern::default()),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if cfg.paths.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(format!("run_id {:?} must be non-empty and use [A-Za-z0-9._-]", self.run_id));
        }
        self.task.validate().map_err(|e| format!("task: {e}"))?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        if self.task.vocab != self.model.vocab {
            return Err("task.vocab and model.vocab differ".into());
        }
        // text plus a K-token soft prefix must fit
        let need = self.task.encoded_len() + self.task.k;
        if need > self.model.max_seq_len {
            return Err(format!("model.max_seq_len {} < {need} needed for K = {}", self.model.max_seq_len, self.task.k));
        }
        self.pretrain.validate().map_err(|e| format!("pretrain: {e}"))?;
        self.finetune.validate().map_err(|e| format!("finetune: {e}"))?;
        if let Some(spec) = &self.adapter {
            spec.validate(&self.model).map_err(|e| format!("adapter: {e}"))?;
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.head) {
            return Err(format!("data.head {} outside [0, 1]", d.head));
        }
        if d.pretrain_n == 0 || d.finetune_n == 0 {
            return Err("data.pretrain_n and data.finetune_n must be >= 1".into());
        }
        if let Some(k_min) = d.k_min {
            if k_min == 0 || k_min > self.task.k {
                return Err(format!("data.k_min {k_min} outside 1..={}", self.task.k));
            }
        }
        let m = self.augment_m();
        if m == 0 || (d.scheme == PermutationScheme::Cyclic && m > self.task.k) {
            return Err(format!("data.augment_m {m} invalid for cyclic K = {}", self.task.k));
        }
        if self.eval.n_per_slot == 0 {
            return Err("eval.n_per_slot must be >= 1".into());
        }
        if let Some(slots) = &self.eval.slots {
            if slots.is_empty() || slots.iter().any(|s| *s == 0 || *s > self.task.k) {
                return Err(format!("eval.slots must be non-empty and within 1..={}", self.task.k));
            }
        }
        if let Some(p) = &self.probe {
            p.endpoint.validate().map_err(|e| format!("probe: {e}"))?;
            p.pattern().map_err(|e| format!("probe: {e}"))?;
            if p.n_per_slot == 0 {
                return Err("probe.n_per_slot must be >= 1".into());
            }
            match p.strategy {
                Strategy::FewShot(0) => return Err("probe: few-shot needs n >= 1".into()),
                Strategy::Hierarchical(g) if g == 0 || g > self.task.k => {
                    return Err(format!("probe: hierarchical G = {g} outside 1..={}", self.task.k))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn augment_m(&self) -> usize {
        self.data.augment_m.unwrap_or(self.task.k)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.out_dir.join(&self.run_id)
    }
}
