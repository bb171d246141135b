use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::StageTimes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The untouched probe.
    Original,
    /// The de-identified probe.
    Deidentified,
}

/// Scores of one probe against the enrolled identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrialScores {
    /// Against the source speaker's profile (the genuine trial).
    pub genuine: f64,
    /// Against every other enrolled profile, in label order.
    pub imposter: Vec<f64>,
    /// Against the target speaker's profile, when the target is enrolled.
    pub target: Option<f64>,
    /// Temporal-dependency detection score per swept split ratio.
    pub td: Vec<TdScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdScore {
    pub ratio: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Work unit the record was produced by.
    pub unit: String,
    pub utterance_id: String,
    /// Crafting models joined by `+`.
    pub substitutes: String,
    /// Model the probe was identified with.
    pub model: String,
    pub method: String,
    pub condition: Condition,
    /// Signal or informed attack applied before identification.
    pub attack_kind: Option<String>,
    pub source_label: usize,
    pub predicted_label: usize,
    pub target_label: Option<usize>,
    pub success: bool,
    pub mcd_db: Option<f64>,
    /// Clipped word accuracy; null without a transcriber.
    pub wa_percent: Option<f64>,
    pub wa_raw: Option<f64>,
    pub rtr: Option<f64>,
    pub iterations: Option<usize>,
    pub final_loss: Option<f64>,
    pub stage_times: Option<StageTimes>,
    pub scores: TrialScores,
}

impl TrialRecord {
    /// Fills `success` from the labels.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        unit: &str,
        utterance_id: &str,
        substitutes: &str,
        model: &str,
        method: &str,
        condition: Condition,
        attack_kind: Option<&str>,
        source_label: usize,
        predicted_label: usize,
    ) -> Self {
        Self {
            unit: unit.into(),
            utterance_id: utterance_id.into(),
            substitutes: substitutes.into(),
            model: model.into(),
            method: method.into(),
            condition,
            attack_kind: attack_kind.map(Into::into),
            source_label,
            predicted_label,
            target_label: None,
            success: predicted_label != source_label,
            mcd_db: None,
            wa_percent: None,
            wa_raw: None,
            rtr: None,
            iterations: None,
            final_loss: None,
            stage_times: None,
            scores: TrialScores::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.success != (self.predicted_label != self.source_label) {
            return Err(Error::Data(format!(
                "record for {} has success={} but predicted {} vs source {}",
                self.utterance_id, self.success, self.predicted_label, self.source_label
            )));
        }
        Ok(())
    }
}

/// A unit of work that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub unit: String,
    pub stage: String,
    pub error_kind: String,
    pub message: String,
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    out: BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(f), path })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let line = serde_json::to_string(item).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MosAspect {
    Voiceprint,
    Text,
    Quality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistinguishReason {
    UnnaturalVoiceprint,
    IllegibleText,
    DistortedQuality,
    ObviousReverb,
    OtherReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "trial", rename_all = "snake_case")]
pub enum MosTrial {
    /// 5-level similarity rating of one aspect.
    Comparing { aspect: MosAspect, rating: u8 },
    /// Whether the listener judged the voice original; a reason is given
    /// only for "not original".
    Distinguishing {
        original: bool,
        reason: Option<DistinguishReason>,
        note: Option<String>,
    },
}

/// A human listening-test answer, imported from CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosRecord {
    pub voice_id: String,
    pub listener: String,
    #[serde(flatten)]
    pub trial: MosTrial,
}

#[derive(Debug, Deserialize)]
struct MosRow {
    voice_id: String,
    #[serde(default)]
    listener: String,
    trial: String,
    #[serde(default)]
    aspect: String,
    #[serde(default)]
    rating: String,
    #[serde(default)]
    option: String,
    #[serde(default)]
    reason: String,
    #[serde(default)]
    note: String,
}

fn parse_enum<T: serde::de::DeserializeOwned>(field: &str, value: &str, line: usize) -> Result<T> {
    let key = value.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    serde_json::from_value(serde_json::Value::String(key))
        .map_err(|_| Error::Data(format!("row {line}: invalid {field} `{value}`")))
}

/// Reads listening-test answers. Columns: `voice_id, listener, trial`
/// (`comparing` | `distinguishing`), then `aspect, rating` or
/// `option` (`yes` | `no`), `reason`, `note`.
pub fn read_mos_csv(path: impl AsRef<Path>) -> Result<Vec<MosRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<MosRow>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let trial = match r.trial.to_ascii_lowercase().as_str() {
            "comparing" => {
                let rating: u8 = r
                    .rating
                    .parse()
                    .map_err(|_| Error::Data(format!("row {line}: rating `{}` is not an integer", r.rating)))?;
                if !(1..=5).contains(&rating) {
                    return Err(Error::Data(format!("row {line}: rating {rating} outside 1..=5")));
                }
                MosTrial::Comparing {
                    aspect: parse_enum("aspect", &r.aspect, line)?,
                    rating,
                }
            }
            "distinguishing" => {
                let original = match r.option.to_ascii_lowercase().as_str() {
                    "yes" => true,
                    "no" => false,
                    o => return Err(Error::Data(format!("row {line}: option `{o}` is neither yes nor no"))),
                };
                let reason = if r.reason.is_empty() {
                    None
                } else {
                    Some(parse_enum::<DistinguishReason>("reason", &r.reason, line)?)
                };
                if original && reason.is_some() {
                    return Err(Error::Data(format!("row {line}: a reason is only given for `no`")));
                }
                MosTrial::Distinguishing {
                    original,
                    reason,
                    note: (!r.note.is_empty()).then_some(r.note),
                }
            }
            t => return Err(Error::Data(format!("row {line}: unknown trial `{t}`"))),
        };
        out.push(MosRecord {
            voice_id: r.voice_id,
            listener: r.listener,
            trial,
        });
    }
    Ok(out)
}
