//! Evaluation metrics: cepstral distortion, success rate, word accuracy,
//! real-time ratio and trial-score statistics (ROC, AUC, EER).

use serde::{Deserialize, Serialize};

use crate::audio::{FeaturePipeline, MfccConfig, Waveform};
use crate::error::{Error, Result};

/// Multiplier in front of the root-sum-square cepstral difference.
pub const MCD_CONSTANT: f64 = 10.0 / std::f64::consts::LN_10;

/// Frame-averaged MCD between two cepstral matrices (same shape).
pub fn mcd_frames(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!("cepstra differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyFeature("no frames".into()));
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(r, t)| MCD_CONSTANT * (2.0 * r.iter().zip(t.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt())
        .sum();
    Ok(total / a.nrows() as f64)
}

/// Index-aligned MCD over coefficients 1..=24 (default feature config).
pub fn mcd(reference: &Waveform, test: &Waveform) -> Result<f64> {
    mcd_with(reference, test, &MfccConfig::default())
}

pub fn mcd_with(reference: &Waveform, test: &Waveform, cfg: &MfccConfig) -> Result<f64> {
    let (a, b) = (reference.len().max(1) as f64, test.len().max(1) as f64);
    if (a - b).abs() / a.max(b) > 0.1 {
        return Err(Error::Argument(format!("durations differ by more than 10% ({} vs {} samples)", a, b)));
    }
    let n = reference.len().min(test.len());
    let ra = mel_cepstrum(&reference.prefix(n), cfg)?;
    let tb = mel_cepstrum(&test.prefix(n), cfg)?;
    mcd_frames(&ra, &tb)
}

/// Mel-cepstrum on the usual cepstral scale: coefficient `d` is
/// `(1/M) Σ_m ln|X_m| cos(π d (m + ½) / M)` over the `M` mel bands, i.e.
/// the real cepstrum of the log-amplitude mel spectrum.
///
/// The speaker-model features are an orthonormal DCT of log power, which is
/// the same quantity times `2·sqrt(2M)`.
pub fn mel_cepstrum(w: &Waveform, cfg: &MfccConfig) -> Result<ndarray::Array2<f64>> {
    let feats = FeaturePipeline::new(cfg)?.compute(w)?.frames;
    Ok(feats / (2.0 * (2.0 * cfg.num_mels as f64).sqrt()))
}

/// Percentage of successful trials.
pub fn dsr(successes: impl IntoIterator<Item = bool>) -> Result<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for s in successes {
        ok += s as usize;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Data("success rate of an empty set".into()));
    }
    Ok(100.0 * ok as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordAccuracy {
    pub correct: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
    /// `100·(C − I)/N`; may be negative.
    pub raw: f64,
    /// `raw` clipped at zero.
    pub clipped: f64,
}

/// Word accuracy from a minimum-edit-distance alignment. Among alignments
/// of equal cost the one with the most correct words is used.
pub fn word_accuracy(reference: &str, hypothesis: &str) -> Result<WordAccuracy> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Data("empty reference transcript".into()));
    }
    // (cost, -correct, subs, dels, ins)
    type Cell = (usize, isize, usize, usize, usize);
    let mut d: Vec<Vec<Cell>> = vec![vec![(0, 0, 0, 0, 0); h.len() + 1]; r.len() + 1];
    for i in 1..=r.len() {
        d[i][0] = (i, 0, 0, i, 0);
    }
    for j in 1..=h.len() {
        d[0][j] = (j, 0, 0, 0, j);
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let m = d[i - 1][j - 1];
            let diag = if r[i - 1] == h[j - 1] {
                (m.0, m.1 - 1, m.2, m.3, m.4)
            } else {
                (m.0 + 1, m.1, m.2 + 1, m.3, m.4)
            };
            let u = d[i - 1][j];
            let del = (u.0 + 1, u.1, u.2, u.3 + 1, u.4);
            let l = d[i][j - 1];
            let ins = (l.0 + 1, l.1, l.2, l.3, l.4 + 1);
            d[i][j] = *[diag, del, ins].iter().min_by_key(|c| (c.0, c.1)).unwrap();
        }
    }
    let c = d[r.len()][h.len()];
    let correct = (-c.1) as usize;
    let raw = 100.0 * (correct as f64 - c.4 as f64) / r.len() as f64;
    Ok(WordAccuracy {
        correct,
        substitutions: c.2,
        deletions: c.3,
        insertions: c.4,
        reference_len: r.len(),
        raw,
        clipped: raw.max(0.0),
    })
}

/// Processing time over audio duration.
pub fn rtr(processing_seconds: f64, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::Argument(format!("audio duration {audio_seconds} must be positive")));
    }
    Ok(processing_seconds / audio_seconds)
}

/// Per-stage timing of one de-identification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub target_seconds: f64,
    pub optimization_seconds: f64,
    pub rendering_seconds: f64,
    pub total_seconds: f64,
}

impl StageTimes {
    pub fn stage_sum(&self) -> f64 {
        self.target_seconds + self.optimization_seconds + self.rendering_seconds
    }
}

/// Probability that a random positive outscores a random negative (ties
/// count half), computed from sorted ranks.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC with a point per distinct score (predict positive when `score ≥ t`),
/// plus the all-negative end point.
pub fn roc(positives: &[f64], negatives: &[f64]) -> Result<Vec<RocPoint>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("ROC needs both classes".into()));
    }
    let mut th: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let rate = |s: &[f64], t: f64| s.iter().filter(|v| **v >= t).count() as f64 / s.len() as f64;
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    out.extend(th.into_iter().map(|t| RocPoint {
        threshold: t,
        tpr: rate(positives, t),
        fpr: rate(negatives, t),
    }));
    Ok(out)
}

/// Equal error rate, in [0, 1], for genuine (higher is better) and imposter
/// scores: the threshold sweep point minimising |FAR − FRR|, reported as
/// their mean (the smaller mean when several points tie).
pub fn eer(genuine: &[f64], imposter: &[f64]) -> Result<f64> {
    let pts = roc(genuine, imposter)?;
    let mut best = (f64::INFINITY, 0.5);
    for p in &pts {
        let far = p.fpr;
        let frr = 1.0 - p.tpr;
        let gap = (far - frr).abs();
        let mean = (far + frr) / 2.0;
        if gap < best.0 || (gap == best.0 && mean < best.1) {
            best = (gap, mean);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd { mean, std: var.sqrt(), count: n }
}
