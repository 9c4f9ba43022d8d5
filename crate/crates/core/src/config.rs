//! Run configuration: one TOML document with a fixed schema, unknown keys
//! rejected, and `key.path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::BprConfig;
use crate::labeling::LabelConfig;
use crate::library::LibraryConfig;
use crate::retrieval::{AlphaMode, FinetuneConfig, FusionConfig};
use crate::synth::SyntheticSpec;
use crate::tam::{TamConfig, TamTrainConfig};
use crate::tensor::OptimizerKind;

pub const OUT_DIR_ENV: &str = "DGREC_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` must look like key.path=value")]
    Override(String),
    #[error("`{key}` out of range: {message}")]
    Range { key: &'static str, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub interactions: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            interactions: PathBuf::from("interactions.csv"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seconds per snapshot.
    pub granularity: i64,
    /// Number of leading snapshots used for pretraining.
    pub split: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            granularity: 86_400,
            split: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Graph convolution layers.
    pub layers: usize,
    pub heads: usize,
    pub tam_layers: usize,
    pub d_hid: usize,
    pub ffn: usize,
    pub score_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 3,
            heads: 4,
            tam_layers: 2,
            d_hid: 32,
            ffn: 64,
            score_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub hop: usize,
    pub top_k: usize,
    pub top_m: usize,
    pub cap: usize,
    pub max_entries: usize,
    pub alpha: AlphaMode,
    pub temperature: f64,
    pub beta_init: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            hop: 2,
            top_k: f.top_k,
            top_m: f.top_m,
            cap: 256,
            max_entries: 0,
            alpha: f.alpha,
            temperature: f.temperature,
            beta_init: f.beta_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub rho: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub drop_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho: 0.6,
            tau: 1.0,
            lambda: 0.1,
            mu: 1e-4,
            gamma: 1.0,
            drop_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub bpr_lr: f64,
    pub bpr_epochs: usize,
    pub bpr_batch: usize,
    pub tam_lr: f64,
    pub tam_epochs: usize,
    pub tam_batch: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            bpr_lr: 1e-3,
            bpr_epochs: 50,
            bpr_batch: 256,
            tam_lr: 1e-3,
            tam_epochs: 200,
            tam_batch: 32,
            finetune_lr: 1e-3,
            finetune_epochs: 20,
            finetune_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub disable_semantic: bool,
    pub disable_structure: bool,
    pub disable_retrieval: bool,
    pub unfreeze_tam: bool,
}

impl AblationConfig {
    /// Report label for this variant.
    pub fn label(&self) -> &'static str {
        match (self.disable_retrieval, self.disable_semantic, self.disable_structure) {
            (true, _, _) => "vanilla",
            (false, true, true) => "w/o all",
            (false, true, false) => "w/o SEM",
            (false, false, true) => "w/o STR",
            (false, false, false) => "full",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub labeling: LabelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(key.to_string()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text` and applies `overrides` of the form `section.key=value`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Replaces the output directory with `$DGREC_OUT_DIR` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            self.paths.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, key: &'static str, message: impl Into<String>) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Range {
                    key,
                    message: message.into(),
                })
            }
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(self.data.granularity > 0, "data.granularity", "must be positive")?;
        check(self.data.split >= 1, "data.split", "must be at least 1")?;
        let m = &self.model;
        check(m.dim > 0 && m.heads > 0 && m.d_hid > 0, "model", "widths and heads must be positive")?;
        check(m.dim % m.heads == 0 && m.d_hid % m.heads == 0, "model.heads", "must divide dim and d_hid")?;
        let r = &self.retrieval;
        check(r.hop >= 1, "retrieval.hop", "must be at least 1")?;
        check(r.top_k >= 1, "retrieval.top_k", "must be at least 1")?;
        check(r.top_m <= r.top_k, "retrieval.top_m", format!("{} exceeds top_k {}", r.top_m, r.top_k))?;
        check(r.cap >= 1, "retrieval.cap", "must be at least 1")?;
        check(r.temperature > 0.0, "retrieval.temperature", "must be positive")?;
        let l = &self.loss;
        check(unit(l.rho), "loss.rho", "must lie in [0, 1]")?;
        check(l.tau > 0.0, "loss.tau", "must be positive")?;
        check(l.lambda >= 0.0 && l.mu >= 0.0, "loss", "lambda and mu must be non-negative")?;
        check(l.gamma.is_finite(), "loss.gamma", "must be finite")?;
        check(unit(l.drop_rate), "loss.drop_rate", "must lie in [0, 1]")?;
        let t = &self.train;
        for lr in [t.bpr_lr, t.tam_lr, t.finetune_lr] {
            check(lr > 0.0 && lr.is_finite(), "train", "learning rates must be positive")?;
        }
        check(
            t.bpr_batch > 0 && t.tam_batch > 0 && t.finetune_batch > 0,
            "train",
            "batch sizes must be positive",
        )?;
        check(self.eval.k >= 1, "eval.k", "must be at least 1")?;
        check(self.labeling.epsilon >= 0.0, "labeling.epsilon", "must be non-negative")?;
        self.synth.validate().map_err(|e| ConfigError::Range {
            key: "synth",
            message: e.to_string(),
        })
    }

    pub fn bpr(&self) -> BprConfig {
        BprConfig {
            dim: self.model.dim,
            layers: self.model.layers,
            epochs: self.train.bpr_epochs,
            batch_size: self.train.bpr_batch,
            lr: self.train.bpr_lr,
            mu: self.loss.mu,
            optimizer: self.train.optimizer,
        }
    }

    pub fn library(&self) -> LibraryConfig {
        LibraryConfig {
            hop: self.retrieval.hop,
            cap: self.retrieval.cap,
            max_entries: self.retrieval.max_entries,
        }
    }

    pub fn tam(&self) -> TamConfig {
        TamConfig {
            dim: self.model.dim,
            heads: self.model.heads,
            layers: self.model.tam_layers,
            d_hid: self.model.d_hid,
            ffn: self.model.ffn,
            score_hidden: self.model.score_hidden,
            disable_semantic: self.ablation.disable_semantic,
            disable_structure: self.ablation.disable_structure,
        }
    }

    pub fn tam_train(&self) -> TamTrainConfig {
        TamTrainConfig {
            epochs: self.train.tam_epochs,
            batch_size: self.train.tam_batch,
            lr: self.train.tam_lr,
            rho: self.loss.rho,
            tau: self.loss.tau,
            optimizer: self.train.optimizer,
        }
    }

    /// Disabling retrieval forces `M = 0`.
    pub fn fusion(&self) -> FusionConfig {
        let r = &self.retrieval;
        FusionConfig {
            top_k: r.top_k,
            top_m: if self.ablation.disable_retrieval { 0 } else { r.top_m },
            alpha: r.alpha,
            temperature: r.temperature,
            beta_init: r.beta_init,
            gamma: self.loss.gamma,
            lambda: self.loss.lambda,
            mu: self.loss.mu,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.train.finetune_epochs,
            batch_size: self.train.finetune_batch,
            lr: self.train.finetune_lr,
            optimizer: self.train.optimizer,
            drop_rate: self.loss.drop_rate,
            hop: self.retrieval.hop,
            cap: self.retrieval.cap,
            unfreeze_tam: self.ablation.unfreeze_tam,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.k, 20);
        assert_eq!(cfg.loss.drop_rate, 0.5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nwidth = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("colour = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let o = vec![
            "retrieval.top_m=2".to_string(),
            "ablation.disable_retrieval=true".to_string(),
            "retrieval.alpha=uniform".to_string(),
            "seed=9".to_string(),
        ];
        let cfg = RunConfig::from_toml_str("", &o).unwrap();
        assert_eq!(cfg.retrieval.top_m, 2);
        assert_eq!(cfg.retrieval.alpha, AlphaMode::Uniform);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.fusion().top_m, 0);
        assert_eq!(cfg.ablation.label(), "vanilla");
    }

    #[test]
    fn out_of_range_rejected() {
        let err = RunConfig::from_toml_str("", &["loss.rho=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("loss.rho"));
        assert!(RunConfig::from_toml_str("", &["retrieval.top_m=9".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = RunConfig::from_toml_str("", &["train.bpr_lr=0.01".into()]).unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
