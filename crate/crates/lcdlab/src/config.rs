//! File-facing configuration schema.
//!
//! JSON sections mirror the subsystems; unknown keys are rejected. Flag
//! overrides use dotted kebab-case paths (`--lcd.omega-fix 4.5`) that map
//! onto section fields. The full effective config is echoed into every run
//! directory as `effective-config.json`.

use serde::{Deserialize, Serialize};

use crate::control::ControlVariant;
use crate::data::EncoderKind;
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainKind {
    Teacher,
    Lcd,
    Controlnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    PseudoHuber,
    L2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            t: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub kind: TrainKind,
    pub lr: f32,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub sample_every: u64,
    pub checkpoint_every: u64,
    pub grad_accum: usize,
    pub p_drop: f32,
    pub weight_decay: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            kind: TrainKind::Teacher,
            lr: 2e-5,
            batch: 24,
            steps: 5000,
            seed: 0,
            sample_every: 1000,
            checkpoint_every: 1000,
            grad_accum: 1,
            p_drop: 0.1,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcdSection {
    pub omega_fix: f32,
    pub k: usize,
    pub mu: f32,
    pub distance: DistanceKind,
    pub huber_delta: f32,
}

impl Default for LcdSection {
    fn default() -> Self {
        LcdSection {
            omega_fix: 4.5,
            k: 20,
            mu: 0.95,
            distance: DistanceKind::PseudoHuber,
            huber_delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub variant: ControlVariant,
    /// 0 selects the paper-ratio default for the model depth.
    pub n_copy: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            variant: ControlVariant::Transformer,
            n_copy: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_samples: 4096,
            image_size: 16,
            num_classes: 3,
            seed: 1,
            encoder: EncoderKind::Identity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Output directory; falls back to `LCDLAB_OUT`, then `./runs`.
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: DenoiserConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub lcd: LcdSection,
    pub control: ControlSection,
    pub data: DataSection,
    pub io: IoSection,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sched = crate::schedule::NoiseSchedule::build(
            self.schedule.kind,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.t,
        )?;
        drop(sched);
        if self.lcd.k == 0 || self.lcd.k >= self.schedule.t {
            return Err(Error::Config(format!(
                "lcd.k = {} must satisfy 1 <= k < schedule.t = {}",
                self.lcd.k, self.schedule.t
            )));
        }
        if !(0.0..1.0).contains(&self.lcd.mu) {
            return Err(Error::Config(format!("lcd.mu = {} outside [0, 1)", self.lcd.mu)));
        }
        if self.lcd.omega_fix < 0.0 {
            return Err(Error::Config("lcd.omega_fix must be >= 0".into()));
        }
        if self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if self.train.batch == 0 || self.train.steps == 0 {
            return Err(Error::Config("train.batch and train.steps must be positive".into()));
        }
        if self.train.grad_accum == 0 {
            return Err(Error::Config("train.grad_accum must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.p_drop) {
            return Err(Error::Config("train.p_drop must lie in [0, 1]".into()));
        }
        let ds = crate::data::ToyDatasetSpec {
            n_samples: self.data.n_samples,
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            seed: self.data.seed,
        };
        ds.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes = {} must equal model.num_classes = {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        let enc = crate::data::Encoder::new(self.data.encoder);
        if enc.latent_size(self.data.image_size) != self.model.image_size {
            return Err(Error::Config(format!(
                "model.image_size = {} must equal encoder latent size {}",
                self.model.image_size,
                enc.latent_size(self.data.image_size)
            )));
        }
        if self.control.n_copy > self.model.depth {
            return Err(Error::Config(format!(
                "control.n_copy = {} exceeds model depth {}",
                self.control.n_copy, self.model.depth
            )));
        }
        Ok(())
    }

    pub fn effective_n_copy(&self) -> usize {
        if self.control.n_copy == 0 {
            crate::control::default_n_copy(self.model.depth)
        } else {
            self.control.n_copy
        }
    }

    pub fn dataset_spec(&self) -> crate::data::ToyDatasetSpec {
        crate::data::ToyDatasetSpec {
            n_samples: self.data.n_samples,
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            seed: self.data.seed,
        }
    }

    pub fn build_schedule(&self) -> Result<crate::schedule::NoiseSchedule> {
        crate::schedule::NoiseSchedule::build(
            self.schedule.kind,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.t,
        )
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn from_json(json: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Resolve the output directory: config, then `LCDLAB_OUT`, then `./runs`.
    pub fn out_dir(&self) -> std::path::PathBuf {
        if let Some(d) = &self.io.out_dir {
            return d.into();
        }
        if let Ok(d) = std::env::var("LCDLAB_OUT") {
            if !d.is_empty() {
                return d.into();
            }
        }
        "runs".into()
    }
}

/// Apply one dotted kebab-case override (`lcd.omega-fix`, `4.5`) onto the
/// JSON form of a config. Fails if the path does not name a known field.
pub fn apply_override(cfg: &Config, key: &str, value: &str) -> Result<Config> {
    let (section, field) = key.split_once('.').ok_or_else(|| Error::Config(format!(
        "override `{key}` must be section.field"
    )))?;
    let field_snake = field.replace('-', "_");
    let mut tree: serde_json::Value = serde_json::to_value(cfg)?;
    let obj = tree
        .get_mut(section)
        .and_then(|s| s.as_object_mut())
        .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
    if !obj.contains_key(&field_snake) {
        return Err(Error::Config(format!(
            "unknown config field `{section}.{field_snake}`"
        )));
    }
    // parse as JSON scalar when possible, else treat as a string
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    obj.insert(field_snake, parsed);
    let updated: Config =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"train": {"kind": "teacher", "bogus": 1}}"#;
        assert!(Config::from_json(json).is_err());
        let json = r#"{"nonsense": {}}"#;
        assert!(Config::from_json(json).is_err());
    }

    #[test]
    fn overrides_win_and_unknown_fields_fail() {
        let cfg = Config::default();
        let cfg = apply_override(&cfg, "lcd.omega-fix", "3.5").unwrap();
        assert_eq!(cfg.lcd.omega_fix, 3.5);
        let cfg = apply_override(&cfg, "schedule.kind", "\"scaled_linear\"").unwrap();
        assert_eq!(cfg.schedule.kind, ScheduleKind::ScaledLinear);
        // bare strings work without JSON quoting
        let cfg = apply_override(&cfg, "schedule.kind", "linear").unwrap();
        assert_eq!(cfg.schedule.kind, ScheduleKind::Linear);
        assert!(apply_override(&cfg, "lcd.bogus", "1").is_err());
        assert!(apply_override(&cfg, "nope.x", "1").is_err());
        assert!(apply_override(&cfg, "flat", "1").is_err());
    }

    #[test]
    fn validation_catches_cross_section_mismatches() {
        let mut cfg = Config::default();
        cfg.data.num_classes = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.data.encoder = EncoderKind::AvgPool2;
        assert!(cfg.validate().is_err()); // latent 8 vs model 16
        cfg.model.image_size = 8;
        cfg.validate().unwrap();
        let mut cfg = Config::default();
        cfg.lcd.k = 1000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roundtrip_json() {
        let cfg = Config::default();
        let json = cfg.to_json_pretty();
        let back = Config::from_json(&json).unwrap();
        assert_eq!(json, back.to_json_pretty());
    }
}
