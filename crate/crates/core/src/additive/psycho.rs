//! Simplified psychoacoustic masking model over non-overlapping
//! rectangular blocks: absolute threshold in quiet, tonal maskers at
//! spectral peaks and a triangular spreading function on the Bark scale.
//! Levels are in dB with a full-scale bin-centred sinusoid at 96 dB.

use ndarray::Array2;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const FULL_SCALE_DB: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsychoConfig {
    /// Block (and FFT) length in samples.
    pub block: usize,
}

impl Default for PsychoConfig {
    fn default() -> Self {
        Self { block: 512 }
    }
}

/// Per-block, per-bin masking threshold in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingThreshold {
    pub db: Array2<f64>,
    pub block: usize,
}

impl MaskingThreshold {
    pub fn num_blocks(&self) -> usize {
        self.db.nrows()
    }

    /// Largest admissible bin magnitude at `Φ` dB above the threshold.
    pub fn magnitude_bound(&self, phi_db: f64) -> Array2<f64> {
        let half = self.block as f64 / 2.0;
        self.db.mapv(|t| half * 10f64.powf((t + phi_db - FULL_SCALE_DB) / 20.0))
    }
}

pub fn bin_hz(k: usize, block: usize) -> f64 {
    k as f64 * SAMPLE_RATE as f64 / block as f64
}

/// Absolute threshold of hearing in dB SPL (frequencies below 20 Hz are
/// evaluated at 20 Hz).
pub fn quiet_threshold(hz: f64) -> f64 {
    let f = hz.max(20.0) / 1000.0;
    3.64 * f.powf(-0.8) - 6.5 * (-0.6 * (f - 3.3).powi(2)).exp() + 1e-3 * f.powi(4)
}

pub fn bark(hz: f64) -> f64 {
    13.0 * (0.00076 * hz).atan() + 3.5 * (hz / 7500.0).powi(2).atan()
}

/// Complex spectra of consecutive `block`-sample rectangular blocks; the
/// last block is zero padded.
pub fn block_spectra(x: &[f64], block: usize) -> Array2<Complex64> {
    let blocks = x.len().div_ceil(block).max(1);
    let bins = block / 2 + 1;
    let mut out = Array2::from_elem((blocks, bins), Complex64::new(0.0, 0.0));
    for b in 0..blocks {
        let lo = b * block;
        let hi = (lo + block).min(x.len());
        let spec = crate::audio::rfft_block(&x[lo.min(x.len())..hi], block);
        for (k, v) in spec.into_iter().enumerate() {
            out[[b, k]] = v;
        }
    }
    out
}

/// Inverse of [`block_spectra`], trimmed to `len`.
pub fn block_inverse(spec: &Array2<Complex64>, block: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.nrows() * block);
    for row in spec.rows() {
        out.extend(crate::audio::irfft_block(&row.to_vec(), block));
    }
    out.truncate(len);
    out
}

fn level_db(c: Complex64, block: usize) -> f64 {
    let m = c.norm();
    if m == 0.0 {
        f64::NEG_INFINITY
    } else {
        FULL_SCALE_DB + 20.0 * (m / (block as f64 / 2.0)).log10()
    }
}

/// Masking threshold of `w`, one row per block.
pub fn hearing_threshold(w: &Waveform, cfg: &PsychoConfig) -> Result<MaskingThreshold> {
    if w.is_empty() {
        return Err(Error::Argument("hearing threshold of an empty waveform".into()));
    }
    if cfg.block < 8 || cfg.block % 2 != 0 {
        return Err(Error::Config(format!("psychoacoustic block {} must be even and ≥ 8", cfg.block)));
    }
    let block = cfg.block;
    let spec = block_spectra(w.samples(), block);
    let bins = block / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| bin_hz(k, block)).collect();
    let ath: Vec<f64> = freqs.iter().map(|&f| quiet_threshold(f)).collect();
    let z: Vec<f64> = freqs.iter().map(|&f| bark(f)).collect();
    let mut db = Array2::zeros((spec.nrows(), bins));
    for b in 0..spec.nrows() {
        let p: Vec<f64> = (0..bins).map(|k| level_db(spec[[b, k]], block)).collect();
        // Masker power relative to the quiet threshold, summed per maskee.
        let mut excess = vec![0.0; bins];
        for k in 1..bins - 1 {
            if !(p[k] > p[k - 1] && p[k] >= p[k + 1] && p[k] > ath[k]) {
                continue;
            }
            let level = 10.0 * (10f64.powf(p[k - 1] / 10.0) + 10f64.powf(p[k] / 10.0) + 10f64.powf(p[k + 1] / 10.0)).log10();
            let upper_slope = (24.0 + 0.23 / (freqs[k] / 1000.0) - 0.2 * level).max(5.0);
            let offset = -6.025 - 0.275 * z[k];
            for j in 0..bins {
                let dz = z[j] - z[k];
                let spread = if dz < 0.0 { 27.0 * dz } else { -upper_slope * dz };
                let t = level + spread + offset;
                excess[j] += 10f64.powf((t - ath[j]) / 10.0);
            }
        }
        for j in 0..bins {
            db[[b, j]] = ath[j] + 10.0 * (1.0 + excess[j]).log10();
        }
    }
    Ok(MaskingThreshold { db, block })
}

/// Scales every bin of `delta`'s block spectrum down to `bound` (computed
/// with `Φ`), returning the projected signal. A partial final block loses
/// its padded tail on the way back, so it is rescaled as a whole until it
/// satisfies the bound again.
pub fn project_below(delta: &[f64], bound: &Array2<f64>, block: usize) -> Vec<f64> {
    let mut spec = block_spectra(delta, block);
    for (c, &m) in spec.iter_mut().zip(bound.iter()) {
        let n = c.norm();
        if n > m {
            *c *= m / n;
        }
    }
    let mut out = block_inverse(&spec, block, delta.len());
    let last = (spec.nrows() - 1) * block;
    if last < out.len() && out.len() - last < block {
        let tail = &mut out[last..];
        let s = crate::audio::rfft_block(tail, block);
        let ratio = s
            .iter()
            .zip(bound.row(spec.nrows() - 1))
            .map(|(c, &m)| c.norm() / m)
            .fold(0.0, f64::max);
        if ratio > 1.0 {
            tail.iter_mut().for_each(|v| *v /= ratio);
        }
    }
    out
}

/// Largest ratio `|D(b, k)| / bound(b, k)` over every block and bin.
pub fn worst_bound_ratio(delta: &[f64], bound: &Array2<f64>, block: usize) -> f64 {
    let spec = block_spectra(delta, block);
    spec.iter()
        .zip(bound.iter())
        .map(|(c, &m)| c.norm() / m)
        .fold(0.0, f64::max)
}
