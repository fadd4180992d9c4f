//! TOML experiment config with one section per module.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsae_core::data::ForestSpec;
use hsae_core::training::{PerturbationSemantics, Topology};
use hsae_core::{SimilarityMethod, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Output directory of `gen`, relative to the config file.
    pub dir: PathBuf,
    pub train_rows: usize,
    pub eval_rows: usize,
    pub rows_per_shard: usize,
    pub seed: u64,
    pub forest: ForestSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data"),
            train_rows: 100_000,
            eval_rows: 10_000,
            rows_per_shard: 65_536,
            seed: 0,
            forest: ForestSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dict_sizes: Vec<usize>,
    pub theta_init: f32,
    pub lambda_init: f32,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub target_l0: f64,
    pub constraint_weight: f64,
    pub perturbation_rate: f64,
    pub perturbation_semantics: PerturbationSemantics,
    pub controller_decay: f64,
    pub l0_ema_momentum: f64,
    pub controller_gain: f64,
    pub lambda_max: f64,
    pub lr_base: f64,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub dead_threshold: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Run directory, relative to the config file.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySection {
    pub update_interval: u64,
    pub exclusion_quantile: f64,
    pub similarity: SimilarityMethod,
    pub topology: Topology,
    pub freeze_after: Option<u64>,
    pub coactivation_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub hierarchy: HierarchySection,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection {
            dict_sizes: t.dict_sizes,
            theta_init: t.theta_init,
            lambda_init: t.lambda_init,
            bandwidth: t.bandwidth,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            target_l0: t.target_l0,
            constraint_weight: t.constraint_weight,
            perturbation_rate: t.perturbation_rate,
            perturbation_semantics: t.perturbation_semantics,
            controller_decay: t.controller_decay,
            l0_ema_momentum: t.l0_ema_momentum,
            controller_gain: t.controller_gain,
            lambda_max: t.lambda_max,
            lr_base: t.lr_base,
            warmup_fraction: t.warmup_fraction,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            seed: t.seed,
            dead_threshold: t.dead_threshold,
            checkpoint_interval: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl Default for HierarchySection {
    fn default() -> Self {
        let t = TrainConfig::default();
        HierarchySection {
            update_interval: t.hierarchy_update_interval,
            exclusion_quantile: t.exclusion_quantile,
            similarity: t.similarity,
            topology: t.topology,
            freeze_after: t.freeze_hierarchy_after,
            coactivation_momentum: t.coactivation_momentum,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!(one_line_toml_error(text, &e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.data.dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.training.out_dir)
    }

    /// The effective training config, all defaults filled.
    pub fn train_config(&self, deterministic: bool) -> Result<TrainConfig> {
        let (m, t, h) = (&self.model, &self.training, &self.hierarchy);
        let cfg = TrainConfig {
            dict_sizes: m.dict_sizes.clone(),
            target_l0: t.target_l0,
            constraint_weight: t.constraint_weight,
            perturbation_rate: t.perturbation_rate,
            perturbation_semantics: t.perturbation_semantics,
            hierarchy_update_interval: h.update_interval,
            exclusion_quantile: h.exclusion_quantile,
            similarity: h.similarity,
            topology: h.topology,
            freeze_hierarchy_after: h.freeze_after,
            controller_decay: t.controller_decay,
            l0_ema_momentum: t.l0_ema_momentum,
            controller_gain: t.controller_gain,
            lambda_max: t.lambda_max,
            coactivation_momentum: h.coactivation_momentum,
            bandwidth: m.bandwidth,
            lr_base: t.lr_base,
            warmup_fraction: t.warmup_fraction,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            seed: t.seed,
            theta_init: m.theta_init,
            lambda_init: m.lambda_init,
            dead_threshold: t.dead_threshold,
            deterministic,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn one_line_toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().replace('\n', " ");
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {msg}")
        }
        None => msg,
    }
}

/// Keys whose values differ between two configs, as `key: old -> new`.
pub fn config_diff(old: &TrainConfig, new: &TrainConfig) -> Result<Vec<String>> {
    let (a, b) = (serde_json::to_value(old)?, serde_json::to_value(new)?);
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        bail!("train config is not a JSON object");
    };
    Ok(a.iter()
        .filter(|(k, _)| k.as_str() != "deterministic")
        .filter_map(|(k, va)| {
            let vb = b.get(k).unwrap_or(&serde_json::Value::Null);
            (va != vb).then(|| format!("{k}: {va} -> {vb}"))
        })
        .collect())
}
