use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::ProfileSettings;
use crate::drs::Aggregation;
use crate::error::{Error, Result};
use crate::fastcar::{CalibrationSettings, ReplayPolicy, ThresholdMode};
use crate::model::{FrameLayout, ModelConfig};
use crate::sparse_attn::AttentionMask;
use crate::theory::VerifySettings;

/// How replay is configured: a fixed threshold, per-layer thresholds, a target
/// ratio to calibrate for, or nothing (dense decoding).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: ThresholdMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taus: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Consistent,
            tau: None,
            taus: None,
            target_ratio: None,
        }
    }
}

impl PolicySpec {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let set = [
            self.tau.is_some(),
            self.taus.is_some(),
            self.target_ratio.is_some(),
        ];
        if set.iter().filter(|s| **s).count() > 1 {
            return Err(Error::Config(
                "set at most one of policy.tau, policy.taus and policy.target_ratio".into(),
            ));
        }
        if self.tau.is_some() && self.mode != ThresholdMode::Consistent {
            return Err(Error::Config(
                "policy.tau needs mode = \"consistent\"".into(),
            ));
        }
        if self.taus.is_some() && self.mode != ThresholdMode::Inconsistent {
            return Err(Error::Config(
                "policy.taus needs mode = \"inconsistent\"".into(),
            ));
        }
        if let Some(r) = self.target_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "policy.target_ratio {r} outside [0, 1)"
                )));
            }
        }
        if let Some(p) = self.fixed() {
            p.validate(layers)?;
        }
        Ok(())
    }

    /// The policy when it needs no calibration; `None` for dense or target-ratio specs.
    pub fn fixed(&self) -> Option<ReplayPolicy> {
        match (self.tau, &self.taus) {
            (Some(tau), _) => Some(ReplayPolicy::consistent(tau)),
            (_, Some(taus)) => Some(ReplayPolicy::Inconsistent { taus: taus.clone() }),
            _ => None,
        }
    }

    pub fn is_dense(&self) -> bool {
        self.tau.is_none() && self.taus.is_none() && self.target_ratio.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub sink: usize,
    pub local: usize,
}

impl MaskSpec {
    pub fn mask(&self) -> Result<AttentionMask> {
        AttentionMask::new(self.sink, self.local)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrsOptions {
    /// Scenario file; when absent the registers come from seeded decode runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<PathBuf>,
    /// Decode runs, one per batch.
    pub batches: usize,
    pub num_cores: usize,
    pub exec_cycles: u64,
    pub dispatch_cycles: u64,
    pub instrs_per_batch: usize,
    pub aggregation: Aggregation,
}

impl Default for DrsOptions {
    fn default() -> Self {
        Self {
            scenario: None,
            batches: 8,
            num_cores: 4,
            exec_cycles: 1000,
            dispatch_cycles: 1,
            instrs_per_batch: 4,
            aggregation: Aggregation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOptions {
    pub target_ratio: f64,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self { target_ratio: 0.5 }
    }
}

/// Everything one invocation needs. `seed` drives the weights, prompts and fixtures
/// through named streams; it replaces `model.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Optional weight file to load instead of seeded initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub model: ModelConfig,
    pub layout: FrameLayout,
    pub policy: PolicySpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSpec>,
    pub calibration: CalibrationSettings,
    pub profile: ProfileSettings,
    pub verify: VerifySettings,
    pub drs: DrsOptions,
    pub ablate: AblateOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: ModelConfig::default().seed,
            out_dir: PathBuf::from("fastcar-out"),
            weights: None,
            model: ModelConfig::default(),
            layout: FrameLayout::default(),
            policy: PolicySpec::default(),
            mask: None,
            calibration: CalibrationSettings::default(),
            profile: ProfileSettings::default(),
            verify: VerifySettings::default(),
            drs: DrsOptions::default(),
            ablate: AblateOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.layout.validate()?;
        self.policy.validate(self.model.layers)?;
        if let Some(m) = &self.mask {
            m.mask()?;
        }
        Ok(())
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn attention_mask(&self) -> Result<Option<AttentionMask>> {
        self.mask.as_ref().map(MaskSpec::mask).transpose()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses `text` after applying `key.path=value` overrides (values are TOML
    /// literals; anything that does not parse as one is taken as a string).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
