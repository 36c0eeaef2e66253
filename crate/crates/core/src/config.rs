//! Run configuration: one JSON document with sections
//! `data`, `mae`, `backbone`, `heads`, `tta` and `eval`.
//!
//! Every field is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::grid::{SplitMode, SyntheticParams};
use crate::heads::HeadsConfig;
use crate::mae::MaeConfig;
use crate::masking::MaskStrategy;
use crate::nn::Activation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Stacked dataset directory; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub city: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub side: usize,
    pub stride: usize,
    pub days: usize,
    pub slots: usize,
    pub channels: usize,
    /// Name of the predicted channel.
    pub target: String,
    pub mode: SplitMode,
    pub test_fraction: f64,
    pub seed: u64,
    pub synthetic: SyntheticParams,
    /// Generator parameters for test regions, to build a distribution shift.
    pub test_synthetic: Option<SyntheticParams>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            city: "synthetic".into(),
            grid_height: 20,
            grid_width: 20,
            side: 10,
            stride: 10,
            days: 30,
            slots: 12,
            channels: 3,
            target: "speed".into(),
            mode: SplitMode::ZeroShot,
            test_fraction: 0.25,
            seed: 0,
            synthetic: SyntheticParams::default(),
            test_synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeSection {
    pub d_v: usize,
    pub d_k: usize,
    pub conv_widths: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub p_s: f64,
    pub p_t: f64,
    pub strategy_schedule: Vec<MaskStrategy>,
    pub seed: u64,
}

impl Default for MaeSection {
    fn default() -> Self {
        let m = MaeConfig::default();
        MaeSection {
            d_v: 64,
            d_k: 32,
            conv_widths: m.conv_widths,
            activation: m.activation,
            lr: m.lr,
            epochs: m.epochs,
            batch_size: m.batch_size,
            p_s: m.p_s,
            p_t: m.p_t,
            strategy_schedule: m.strategy_schedule,
            seed: 0,
        }
    }
}

impl MaeSection {
    /// Config of the multifaceted (`target == false`) or target autoencoder.
    pub fn model_config(&self, target: bool, channels: usize, side: usize) -> MaeConfig {
        MaeConfig {
            channels_in: if target { 1 } else { channels },
            side,
            embed_dim: if target { self.d_k } else { self.d_v },
            conv_widths: self.conv_widths.clone(),
            activation: self.activation,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            p_s: self.p_s,
            p_t: self.p_t,
            strategy_schedule: self.strategy_schedule.clone(),
            seed: self.seed.wrapping_mul(2).wrapping_add(target as u64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationScope {
    /// All test windows of one region form one adaptation unit.
    #[default]
    PerRegion,
    /// Every evaluation batch is its own unit.
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationPolicy {
    pub epochs: usize,
    pub lr: f64,
    /// Embedding mask ratio.
    pub p: f64,
    pub scope: AdaptationScope,
    /// Restore the Stage-2 trunk before every unit.
    pub reset: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        AdaptationPolicy {
            epochs: 5,
            lr: 5e-4,
            p: 0.25,
            scope: AdaptationScope::PerRegion,
            reset: true,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AdaptationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("tta.epochs must be at least 1".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("tta.p = {} outside (0, 1)", self.p)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("tta.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Component switches from the ablation study; all off is the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub no_muffin_mae: bool,
    pub no_temporal_mask: bool,
    pub no_spatial_mask: bool,
    pub no_global_mask: bool,
    pub no_target_embedding: bool,
    pub no_multifaceted_embedding: bool,
    pub no_finetuning: bool,
    pub no_adaptation: bool,
}

pub const ABLATION_SWITCHES: [&str; 8] = [
    "no_muffin_mae",
    "no_temporal_mask",
    "no_spatial_mask",
    "no_global_mask",
    "no_target_embedding",
    "no_multifaceted_embedding",
    "no_finetuning",
    "no_adaptation",
];

impl AblationSpec {
    pub fn set(&mut self, switch: &str) -> Result<()> {
        let flag = match switch {
            "no_muffin_mae" => &mut self.no_muffin_mae,
            "no_temporal_mask" => &mut self.no_temporal_mask,
            "no_spatial_mask" => &mut self.no_spatial_mask,
            "no_global_mask" => &mut self.no_global_mask,
            "no_target_embedding" => &mut self.no_target_embedding,
            "no_multifaceted_embedding" => &mut self.no_multifaceted_embedding,
            "no_finetuning" => &mut self.no_finetuning,
            "no_adaptation" => &mut self.no_adaptation,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation switch `{other}`; expected one of {}",
                    ABLATION_SWITCHES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [
            self.no_muffin_mae,
            self.no_temporal_mask,
            self.no_spatial_mask,
            self.no_global_mask,
            self.no_target_embedding,
            self.no_multifaceted_embedding,
            self.no_finetuning,
            self.no_adaptation,
        ];
        ABLATION_SWITCHES.iter().zip(flags).filter(|(_, f)| *f).map(|(n, _)| *n).collect()
    }

    /// Masking strategies left after removing the disabled ones.
    pub fn schedule(&self, base: &[MaskStrategy]) -> Vec<MaskStrategy> {
        base.iter()
            .copied()
            .filter(|s| match s {
                MaskStrategy::Spatial => !self.no_spatial_mask,
                MaskStrategy::Temporal => !self.no_temporal_mask,
                MaskStrategy::Global => !self.no_global_mask,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ablation: AblationSpec,
    /// Weight of the auxiliary reconstruction loss while training Stage 2;
    /// `None` means `1 / hidden_dim`.
    pub aux_recon_weight: Option<f64>,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ablation: AblationSpec::default(),
            aux_recon_weight: None,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub mae: MaeSection,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub tta: AdaptationPolicy,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.slots < self.heads.h + self.heads.m {
            return Err(Error::Config(format!(
                "{} slots cannot hold h = {} prior and m = {} target slots",
                d.slots, self.heads.h, self.heads.m
            )));
        }
        if d.channels == 0 || d.days == 0 || d.side == 0 || d.stride == 0 {
            return Err(Error::Config("data.channels, days, side and stride must be at least 1".into()));
        }
        self.mae.model_config(false, d.channels, d.side).validate()?;
        self.backbone.validate()?;
        self.tta.validate()?;
        if self.heads.n_heads == 0 || !self.backbone.hidden_dim.is_multiple_of(self.heads.n_heads) {
            return Err(Error::Config("backbone.hidden_dim must divide by heads.n_heads".into()));
        }
        if self.eval.ablation.schedule(&self.mae.strategy_schedule).is_empty() && !self.eval.ablation.no_muffin_mae {
            return Err(Error::Config("ablation removes every masking strategy".into()));
        }
        if self.eval.ablation.no_target_embedding && self.eval.ablation.no_multifaceted_embedding {
            return Err(Error::Config("cannot drop both embedding families".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Small settings that finish in seconds; used by examples and tests.
    pub fn desk_small() -> Self {
        let mut c = Config::default();
        c.data.days = 8;
        c.mae.d_v = 16;
        c.mae.d_k = 8;
        c.mae.conv_widths = vec![8, 16];
        c.mae.epochs = 20;
        c.mae.lr = 3e-3;
        c.mae.batch_size = 8;
        c.backbone.layers = 2;
        c.backbone.l_frozen = 1;
        c.backbone.hidden_dim = 32;
        c.backbone.ffn_dim = 64;
        c.backbone.epochs = 20;
        c.backbone.lr = 1e-3;
        c.heads.fc_dim = 64;
        c
    }

    /// `desk_small` over twice the days and overlapping regions (stride 5,
    /// nine windows on the 20x20 grid). Used for the trend comparisons.
    pub fn benchmark() -> Self {
        let mut c = Config::desk_small();
        c.data.days = 16;
        c.data.stride = 5;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
        let c = Config::from_json(r#"{"tta": {"epochs": 3}, "data": {"mode": "standard"}}"#).unwrap();
        assert_eq!(c.tta.epochs, 3);
        assert_eq!(c.tta.lr, 5e-4);
        assert_eq!(c.data.mode, SplitMode::Standard);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(Config::from_json(r#"{"tta": {"epochz": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(Config::from_json(r#"{"tta": {"p": 1.5}}"#).is_err());
        assert!(Config::from_json(r#"{"backbone": {"l_frozen": 9}}"#).is_err());
        assert!(Config::from_json(r#"{"data": {"slots": 10}}"#).is_err());
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let c = Config::desk_small();
        let back = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        let mut d = c.clone();
        d.eval.ablation.set("no_adaptation").unwrap();
        assert_ne!(d.fingerprint(), c.fingerprint());
        assert!(d.eval.ablation.set("no_such_switch").is_err());
        assert_eq!(d.eval.ablation.active(), vec!["no_adaptation"]);
    }

    #[test]
    fn ablation_filters_schedule() {
        let mut a = AblationSpec::default();
        a.set("no_temporal_mask").unwrap();
        let s = a.schedule(&MaeSection::default().strategy_schedule);
        assert_eq!(s, vec![MaskStrategy::Spatial, MaskStrategy::Global]);
    }
}
