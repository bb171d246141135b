//! Short-time Fourier transform, weighted overlap-add inverse and
//! Griffin-Lim phase reconstruction.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex64;

use super::conv::{irfft, rfft};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 512, hop: 128 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames needed to cover `n` samples. Frames are centred: frame `t`
    /// spans `t·hop − n_fft/2 .. t·hop + n_fft/2`, zero outside the signal.
    pub fn num_frames(&self, n: usize) -> usize {
        n.div_ceil(self.hop) + 1
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, frames × bins.
pub fn stft(x: &[f64], cfg: StftConfig) -> Array2<Complex64> {
    let win = hann(cfg.n_fft);
    let frames = cfg.num_frames(x.len());
    let mut out = Array2::from_elem((frames, cfg.bins()), Complex64::new(0.0, 0.0));
    let mut buf = vec![0.0; cfg.n_fft];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - (cfg.n_fft / 2) as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let j = start + i as isize;
            *b = if j >= 0 { x.get(j as usize).copied().unwrap_or(0.0) * win[i] } else { 0.0 };
        }
        for (k, v) in rfft(&buf, cfg.n_fft).into_iter().enumerate() {
            out[[t, k]] = v;
        }
    }
    out
}

/// Weighted overlap-add inverse, trimmed to `len` samples.
pub fn istft(spec: &Array2<Complex64>, cfg: StftConfig, len: usize) -> Vec<f64> {
    let win = hann(cfg.n_fft);
    let frames = spec.nrows();
    let half = cfg.n_fft / 2;
    let total = (frames - 1) * cfg.hop + cfg.n_fft;
    let mut y = vec![0.0; total.max(len + half)];
    let mut norm = vec![0.0; y.len()];
    for t in 0..frames {
        let row: Vec<Complex64> = spec.row(t).to_vec();
        let frame = irfft(&row, cfg.n_fft);
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            y[start + i] += frame[i] * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    for (v, n) in y.iter_mut().zip(&norm) {
        if *n > 1e-8 {
            *v /= n;
        }
    }
    y.drain(..half);
    y.truncate(len);
    y
}

pub fn magnitude(spec: &Array2<Complex64>) -> Array2<f64> {
    spec.mapv(|c| c.norm())
}

/// Reconstruct a signal of `len` samples whose STFT magnitude approximates
/// `mag`, starting from seeded random phase.
pub fn griffin_lim(mag: &Array2<f64>, cfg: StftConfig, len: usize, iters: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = mag.mapv(|m| {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(m, phi)
    });
    let mut y = istft(&spec, cfg, len);
    for _ in 0..iters {
        let est = stft(&y, cfg);
        for ((s, e), m) in spec.iter_mut().zip(est.iter()).zip(mag.iter()) {
            let n = e.norm();
            *s = if n > 1e-12 { e * (m / n) } else { Complex64::new(*m, 0.0) };
        }
        y = istft(&spec, cfg, len);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_reconstructs_signal() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = istft(&stft(&x, cfg), cfg, x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn griffin_lim_reduces_spectral_inconsistency() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..4000)
            .map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).sin())
            .collect();
        let mag = magnitude(&stft(&x, cfg));
        let dist = |y: &[f64]| -> f64 {
            let m = magnitude(&stft(y, cfg));
            (&m - &mag).mapv(|v| v * v).sum().sqrt() / mag.mapv(|v| v * v).sum().sqrt()
        };
        let y0 = griffin_lim(&mag, cfg, x.len(), 0, 1);
        let y32 = griffin_lim(&mag, cfg, x.len(), 32, 1);
        assert!(dist(&y32) < 0.5 * dist(&y0), "{} vs {}", dist(&y32), dist(&y0));
    }
}
