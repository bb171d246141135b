//! Mel-frequency cepstral coefficients, in a form that can sit inside the
//! differentiable path of a speaker model.

use std::sync::Arc;

use deid_autograd::{CustomOp, Graph, Tensor, Var};
use ndarray::Array2;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::conv::{forward_plan, inverse_plan};
use super::waveform::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub num_mels: usize,
    /// Number of cepstral coefficients kept.
    pub num_coeffs: usize,
    /// Keep c0 (frame log-energy). When false the kept coefficients are
    /// c1..=num_coeffs.
    pub include_c0: bool,
    pub log_floor: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            num_mels: 40,
            num_coeffs: 24,
            include_c0: false,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        let fl = self.frame_len();
        if num_samples < fl {
            0
        } else {
            (num_samples - fl) / self.hop_len() + 1
        }
    }

    fn first_coeff(&self) -> usize {
        usize::from(!self.include_c0)
    }

    pub fn validate(&self) -> Result<()> {
        let fl = self.frame_len();
        if fl == 0 || self.hop_len() == 0 {
            return Err(Error::Config("frame and hop must be at least one sample".into()));
        }
        if self.n_fft < fl {
            return Err(Error::Config(format!("n_fft {} shorter than frame {fl}", self.n_fft)));
        }
        if self.num_coeffs == 0 || self.first_coeff() + self.num_coeffs > self.num_mels {
            return Err(Error::Config(format!(
                "{} coefficients (c0 included: {}) do not fit {} mel bands",
                self.num_coeffs, self.include_c0, self.num_mels
            )));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config("mel band edges out of range".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Cepstral frames of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrames {
    pub frames: Array2<f64>,
    pub config: MfccConfig,
}

impl MfccFrames {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.frames.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `(n_fft/2 + 1) × num_mels`.
pub fn mel_filterbank(n_fft: usize, num_mels: usize, f_min: f64, f_max: f64) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((bins, num_mels));
    for k in 0..bins {
        let f = k as f64 * SAMPLE_RATE as f64 / n_fft as f64;
        for m in 0..num_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[k, m]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II rows `first..first+count`, laid out `num_mels × count`
/// so that `log_mel · dct` yields cepstra.
pub fn dct_matrix(num_mels: usize, first: usize, count: usize) -> Array2<f64> {
    let m = num_mels as f64;
    Array2::from_shape_fn((num_mels, count), |(i, j)| {
        let q = (first + j) as f64;
        let scale = if first + j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        scale * (std::f64::consts::PI * q * (i as f64 + 0.5) / m).cos()
    })
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// `|rfft(frame, n_fft)|^2` row by row.
pub struct PowerSpectrum {
    pub n_fft: usize,
}

impl PowerSpectrum {
    fn spectra(&self, frames: &Tensor) -> Vec<Vec<Complex64>> {
        let plan = forward_plan(self.n_fft);
        let mut buf = vec![0.0; self.n_fft];
        frames
            .rows()
            .into_iter()
            .map(|r| {
                buf.iter_mut().for_each(|v| *v = 0.0);
                for (b, x) in buf.iter_mut().zip(r.iter()) {
                    *b = *x;
                }
                let mut out = plan.make_output_vec();
                plan.process(&mut buf, &mut out).expect("rfft");
                out
            })
            .collect()
    }
}

impl CustomOp for PowerSpectrum {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let frames = inputs[0];
        let bins = self.n_fft / 2 + 1;
        let spectra = self.spectra(frames);
        let mut out = Array2::zeros((frames.nrows(), bins));
        for (f, s) in spectra.iter().enumerate() {
            for k in 0..bins {
                out[[f, k]] = s[k].norm_sqr();
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let frames = inputs[0];
        let len = frames.ncols();
        let bins = self.n_fft / 2 + 1;
        let spectra = self.spectra(frames);
        let plan = inverse_plan(self.n_fft);
        let mut d = Array2::zeros(frames.dim());
        let mut z = vec![Complex64::new(0.0, 0.0); bins];
        let mut out = plan.make_output_vec();
        for (f, s) in spectra.iter().enumerate() {
            // d|X_k|^2/dx_n summed against G_k is 2 Re(sum_k G_k X_k e^{+i 2pi k n / M});
            // the Hermitian inverse doubles interior bins, hence the halving.
            for k in 0..bins {
                let y = s[k] * grad[[f, k]];
                z[k] = if k == 0 || (self.n_fft % 2 == 0 && k == bins - 1) {
                    Complex64::new(y.re, 0.0)
                } else {
                    y * 0.5
                };
            }
            plan.process(&mut z, &mut out).expect("irfft");
            for n in 0..len {
                d[[f, n]] = 2.0 * out[n];
            }
        }
        vec![Some(d)]
    }
}

/// Precomputed MFCC front end.
#[derive(Clone)]
pub struct FeaturePipeline {
    config: MfccConfig,
    window: Arc<Vec<f64>>,
    mel: Tensor,
    dct: Tensor,
    power: Arc<PowerSpectrum>,
}

impl std::fmt::Debug for FeaturePipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeaturePipeline").field("config", &self.config).finish()
    }
}

impl FeaturePipeline {
    pub fn new(config: &MfccConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            window: Arc::new(hamming(config.frame_len())),
            mel: mel_filterbank(config.n_fft, config.num_mels, config.f_min, config.f_max),
            dct: dct_matrix(config.num_mels, config.first_coeff(), config.num_coeffs),
            power: Arc::new(PowerSpectrum { n_fft: config.n_fft }),
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    /// Log mel energies, `F × num_mels`, recorded on `g`. `wave` is `1 × N`.
    pub fn log_mel(&self, g: &mut Graph, wave: Var) -> Var {
        let frames = g.frame(wave, self.config.frame_len(), self.config.hop_len(), self.window.clone());
        let pow = g.custom(self.power.clone(), &[frames]);
        let mel = g.constant(self.mel.clone());
        let m = g.matmul(pow, mel);
        g.ln(m, self.config.log_floor)
    }

    /// Cepstral frames, `F × num_coeffs`, recorded on `g`.
    pub fn cepstra(&self, g: &mut Graph, wave: Var) -> Var {
        let lm = self.log_mel(g, wave);
        let dct = g.constant(self.dct.clone());
        g.matmul(lm, dct)
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n < self.config.frame_len() {
            return Err(Error::EmptyFeature(format!(
                "{n} samples is shorter than one {}-sample frame",
                self.config.frame_len()
            )));
        }
        Ok(())
    }

    pub fn compute(&self, w: &Waveform) -> Result<MfccFrames> {
        self.check_len(w.len())?;
        let mut g = Graph::new();
        let x = g.row(w.samples(), false);
        let c = self.cepstra(&mut g, x);
        Ok(MfccFrames {
            frames: g.value(c).clone(),
            config: self.config.clone(),
        })
    }
}

/// MFCC of a waveform.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<MfccFrames> {
    if w.is_empty() {
        return Err(Error::EmptyFeature("empty waveform".into()));
    }
    FeaturePipeline::new(cfg)?.compute(w)
}
