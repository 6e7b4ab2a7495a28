//! Run configuration: a TOML file with one table per module, merged with
//! `section.key=value` overrides from the command line.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use asap::data::AugmentConfig;
use asap::loss::LossWeights;
use asap::network::{BackboneConfig, NetConfig, Variant};
use asap::train::TrainConfig;

/// Raised for malformed configuration or arguments; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub fpn_width: usize,
    pub n_classes: usize,
    pub variant: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let net = NetConfig::default();
        ModelSection {
            stage_channels: net.backbone.stage_channels,
            blocks_per_stage: net.backbone.blocks_per_stage,
            fpn_width: net.fpn_width,
            n_classes: net.n_classes,
            variant: Variant::Full.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub power: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            base_lr: t.base_lr,
            power: t.power,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub ohem_threshold: f64,
    /// Omitted means pixels / 16.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ohem_min_kept: Option<usize>,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossWeights::default();
        LossSection {
            alpha: l.alpha,
            beta: l.beta,
            ohem_threshold: l.ohem_threshold,
            ohem_min_kept: l.ohem_min_kept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub hflip_prob: f64,
    pub scales: Vec<f64>,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        AugmentSection {
            hflip_prob: a.hflip_prob,
            scales: a.scales,
            brightness: a.brightness,
            contrast: a.contrast,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub augment: AugmentSection,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (if any), applies `section.key=value` overrides in
    /// order and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| usage(format!("override `{ov}` is not section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| usage(format!("override key `{key}` lacks a section")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(usage(format!("`{section}` is not a section")));
            };
            t.insert(field.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        cfg.net()?;
        cfg.train_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        self.model.variant.parse().map_err(usage)
    }

    /// Network for the configured variant.
    pub fn net(&self) -> anyhow::Result<NetConfig> {
        let m = &self.model;
        let base = NetConfig {
            backbone: BackboneConfig {
                stage_channels: m.stage_channels,
                blocks_per_stage: m.blocks_per_stage,
            },
            fpn_width: m.fpn_width,
            n_classes: m.n_classes,
            ..NetConfig::default()
        };
        base.backbone.validate().map_err(|e| usage(e.to_string()))?;
        if m.fpn_width == 0 || m.n_classes == 0 || m.n_classes > 255 {
            return Err(usage(format!("invalid model section {m:?}")));
        }
        Ok(self.variant()?.apply(&base))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            base_lr: t.base_lr,
            power: t.power,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            seed: t.seed,
            loss: LossWeights {
                alpha: self.loss.alpha,
                beta: self.loss.beta,
                ohem_threshold: self.loss.ohem_threshold,
                ohem_min_kept: self.loss.ohem_min_kept,
                ..LossWeights::default()
            },
            augment: AugmentConfig {
                hflip_prob: self.augment.hflip_prob,
                scales: self.augment.scales.clone(),
                brightness: self.augment.brightness,
                contrast: self.augment.contrast,
                ..AugmentConfig::default()
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
