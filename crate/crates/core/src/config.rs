//! The single configuration file: one section per subsystem, every field
//! defaulted, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::additive::AdditiveAttackConfig;
use crate::adversary::{SignalAttackParams, TdDetectionConfig};
use crate::asi::AsiTrainConfig;
use crate::audio::MfccConfig;
use crate::conv_deid::DeidConfig;
use crate::corpus::SynthConfig;
use crate::cvae::CvaeConfig;
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::transcribe::TranscriberConfig;

/// Prefix of environment overrides: `DEID__DEID__CONV__ALPHA=4000`.
pub const ENV_PREFIX: &str = "DEID__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub audio: AudioSection,
    pub asi: AsiTrainConfig,
    pub cvae: CvaeConfig,
    pub deid: DeidSection,
    pub attacks: AttackSection,
    pub harness: ExperimentConfig,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AudioSection {
    /// `<root>/<speaker>/*.wav`; the synthetic desk corpus is used when unset.
    pub corpus_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Front end of the MCD metric.
    pub mcd: MfccConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DeidSection {
    pub conv: DeidConfig,
    pub additive: AdditiveAttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub signal: SignalAttackParams,
    pub td: TdDetectionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub run_dir: Option<PathBuf>,
    /// Speaker-model checkpoints `<id>.ckpt` and CVAEs `<id>.cvae`.
    pub models_dir: PathBuf,
    pub transcriber: TranscriberConfig,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            run_dir: None,
            models_dir: PathBuf::from("models"),
            transcriber: TranscriberConfig::None,
        }
    }
}

impl GlobalConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GlobalConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, std::env::vars())?;
        Self::from_table(value)
    }

    /// Defaults with environment overrides.
    pub fn from_env() -> Result<Self> {
        let mut value = toml::Table::new();
        apply_overrides(&mut value, std::env::vars())?;
        Self::from_table(value)
    }

    pub fn from_table(t: toml::Table) -> Result<Self> {
        let cfg: GlobalConfig = toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key (`deid.conv.alpha`) to a TOML value.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        let mut t = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        set_path(&mut t, key, value)?;
        Self::from_table(t)
    }

    /// Canonical TOML: every field, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.deid.conv.validate()?;
        self.deid.additive.validate()?;
        self.cvae.validate()?;
        self.attacks.td.validate()?;
        self.harness.validate()?;
        if self.audio.synth.speakers < 2 || self.audio.synth.utterances_per_speaker == 0 {
            return Err(Error::Config("the synthetic corpus needs ≥ 2 speakers and ≥ 1 utterance each".into()));
        }
        if !(self.audio.synth.seconds > 0.0) {
            return Err(Error::Config("synthetic utterance length must be > 0".into()));
        }
        crate::audio::FeaturePipeline::new(&self.audio.mcd)?;
        Ok(())
    }
}

/// Parses a scalar override: TOML literal when it parses, bare string
/// otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(t: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Applies `DEID__SECTION__KEY=value` pairs; `__` separates levels.
pub fn apply_overrides(t: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut pairs: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v)))
        .collect();
    pairs.sort();
    for (k, v) in pairs {
        set_path(t, &k, &v)?;
    }
    Ok(())
}
