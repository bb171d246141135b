//! Adversaries who know the de-identification pipeline: re-identification
//! against de-identified enrollment, and temporal-dependency detection.

use serde::{Deserialize, Serialize};

use crate::asi::{score, EnrollmentProfile, SpeakerModel};
use crate::audio::Waveform;
use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{auc, word_accuracy};
use crate::transcribe::Transcriber;

/// The system's own de-identification, as available to the adversary.
pub type DeidFn<'a> = dyn Fn(&Utterance) -> Result<Waveform> + Sync + 'a;

/// Profiles built from de-identified enrollment speech.
#[derive(Debug, Clone)]
pub struct ReidentificationAdversary {
    profiles: Vec<EnrollmentProfile>,
}

impl ReidentificationAdversary {
    /// De-identifies every enrollment utterance with `deid` and enrolls one
    /// profile per label present.
    pub fn build(model: &dyn SpeakerModel, deid: &DeidFn, enrollment: &Corpus) -> Result<Self> {
        let mut profiles = Vec::new();
        for label in 0..enrollment.num_speakers() {
            let waves = enrollment.of_label(label).map(deid).collect::<Result<Vec<_>>>()?;
            if !waves.is_empty() {
                profiles.push(model.enroll(label, &waves.iter().collect::<Vec<_>>())?);
            }
        }
        if profiles.is_empty() {
            return Err(Error::Data("re-identification needs a non-empty enrollment corpus".into()));
        }
        Ok(Self { profiles })
    }

    pub fn profiles(&self) -> &[EnrollmentProfile] {
        &self.profiles
    }

    pub fn identify(&self, model: &dyn SpeakerModel, probe: &Waveform) -> Result<(usize, f64)> {
        model.identify(&self.profiles, probe)
    }
}

/// One-shot form of [`ReidentificationAdversary`].
pub fn reidentification_attack(
    model: &dyn SpeakerModel,
    deid: &DeidFn,
    enrollment: &Corpus,
    probe: &Waveform,
) -> Result<(usize, f64)> {
    ReidentificationAdversary::build(model, deid, enrollment)?.identify(model, probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdMode {
    /// Embedding consistency between prefix and whole; offline.
    #[default]
    Speaker,
    /// Transcript consistency; needs a transcriber.
    Speech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdDetectionConfig {
    pub split_ratio: f64,
    pub mode: TdMode,
    /// Scores at or above this flag an input as adversarial.
    pub threshold: f64,
    /// Ratios swept when selecting the best split.
    pub sweep: Vec<f64>,
}

impl Default for TdDetectionConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.5,
            mode: TdMode::Speaker,
            threshold: 0.5,
            sweep: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        }
    }
}

impl TdDetectionConfig {
    pub fn validate(&self) -> Result<()> {
        for r in std::iter::once(&self.split_ratio).chain(&self.sweep) {
            if !(*r > 0.0 && *r < 1.0) {
                return Err(Error::Config(format!("split ratio {r} outside (0, 1)")));
            }
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("TD threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn with_ratio(&self, r: f64) -> Self {
        Self {
            split_ratio: r,
            ..self.clone()
        }
    }
}

/// What the detector compares prefix and whole with.
#[derive(Clone, Copy)]
pub struct TdBackend<'a> {
    pub model: &'a dyn SpeakerModel,
    pub transcriber: Option<&'a dyn Transcriber>,
}

/// Inconsistency between the first `ratio·N` samples and the whole input:
/// `1 − score(f(prefix), f(w))` in speaker mode; in speech mode the
/// clipped word error of the prefix transcript against the matching
/// leading share of the full transcript.
pub fn td_detection(backend: TdBackend, w: &Waveform, cfg: &TdDetectionConfig) -> Result<f64> {
    cfg.validate()?;
    let k = (cfg.split_ratio * w.len() as f64).round() as usize;
    if k < backend.model.min_len() {
        return Err(Error::Argument(format!(
            "prefix of {k} samples is shorter than the {}-sample minimum",
            backend.model.min_len()
        )));
    }
    let prefix = w.prefix(k);
    match cfg.mode {
        TdMode::Speaker => {
            let a = backend.model.extract_embedding(&prefix)?;
            let b = backend.model.extract_embedding(w)?;
            Ok(1.0 - score(&a, &b)?)
        }
        TdMode::Speech => {
            let t = backend
                .transcriber
                .ok_or_else(|| Error::Config("speech-mode TD detection needs a transcriber".into()))?;
            let full = t.transcribe(w)?;
            let part = t.transcribe(&prefix)?;
            let words: Vec<&str> = full.split_whitespace().collect();
            let keep = ((cfg.split_ratio * words.len() as f64).round() as usize).min(words.len());
            if keep == 0 {
                return Ok(if part.split_whitespace().next().is_some() { 1.0 } else { 0.0 });
            }
            Ok(1.0 - word_accuracy(&words[..keep].join(" "), &part)?.clipped / 100.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdSweep {
    /// `(ratio, AUC)` for every swept ratio, in sweep order.
    pub points: Vec<(f64, f64)>,
    pub best_ratio: f64,
    pub best_auc: f64,
    /// Detection scores at the best ratio.
    pub best_positive: Vec<f64>,
    pub best_negative: Vec<f64>,
}

/// Scores de-identified (`positives`) and original (`negatives`) inputs
/// at every ratio of `cfg.sweep` and selects the ratio of largest AUC
/// (earliest on ties).
pub fn td_sweep(backend: TdBackend, positives: &[Waveform], negatives: &[Waveform], cfg: &TdDetectionConfig) -> Result<TdSweep> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(Error::Config("TD sweep has no ratios".into()));
    }
    let mut out: Option<TdSweep> = None;
    let mut points = Vec::new();
    for &r in &cfg.sweep {
        let c = cfg.with_ratio(r);
        let pos = positives.iter().map(|w| td_detection(backend, w, &c)).collect::<Result<Vec<_>>>()?;
        let neg = negatives.iter().map(|w| td_detection(backend, w, &c)).collect::<Result<Vec<_>>>()?;
        let a = auc(&pos, &neg)?;
        points.push((r, a));
        if out.as_ref().is_none_or(|o| a > o.best_auc) {
            out = Some(TdSweep {
                points: vec![],
                best_ratio: r,
                best_auc: a,
                best_positive: pos,
                best_negative: neg,
            });
        }
    }
    let mut out = out.expect("non-empty sweep");
    out.points = points;
    Ok(out)
}
