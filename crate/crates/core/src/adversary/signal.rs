//! Signal-processing transforms an adversary without model knowledge can
//! apply to strip a perturbation.

use std::sync::Arc;

use ndarray::Array2;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::additive::{hearing_threshold, project_below, PsychoConfig};
use crate::audio::stft::{griffin_lim, stft, StftConfig};
use crate::audio::{dct_matrix, irfft_block, mel_filterbank, next_fast_len, rfft_block, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::registry::Registry;

/// Bandpass FIR order.
pub const BANDPASS_ORDER: usize = 512;
/// Stopband attenuation the Kaiser window is designed for.
const BANDPASS_ATTENUATION_DB: f64 = 60.0;
/// Analysis frame for the mel re-transform.
pub const MEL_STFT: StftConfig = StftConfig { n_fft: 1024, hop: 256 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalAttackKind {
    Bandpass,
    Requantize,
    MelRetransform,
    PsychoacousticFilter,
}

impl SignalAttackKind {
    pub const ALL: [SignalAttackKind; 4] = [
        SignalAttackKind::Bandpass,
        SignalAttackKind::Requantize,
        SignalAttackKind::MelRetransform,
        SignalAttackKind::PsychoacousticFilter,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            SignalAttackKind::Bandpass => "bandpass",
            SignalAttackKind::Requantize => "requantize",
            SignalAttackKind::MelRetransform => "mel_retransform",
            SignalAttackKind::PsychoacousticFilter => "psychoacoustic_filter",
        }
    }
}

/// Parameters of every signal attack; each kind reads its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalAttackParams {
    pub low_hz: f64,
    pub high_hz: f64,
    pub bits: u32,
    pub mel_bins: usize,
    /// Phase-reconstruction iterations of the mel re-transform.
    pub griffin_lim_iters: usize,
    pub phi_db: f64,
    pub seed: u64,
}

impl Default for SignalAttackParams {
    fn default() -> Self {
        Self {
            low_hz: 200.0,
            high_hz: 7000.0,
            bits: 8,
            mel_bins: 80,
            griffin_lim_iters: 32,
            phi_db: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAttackConfig {
    pub kind: SignalAttackKind,
    #[serde(default)]
    pub params: SignalAttackParams,
}

impl SignalAttackConfig {
    pub fn new(kind: SignalAttackKind) -> Self {
        Self {
            kind,
            params: SignalAttackParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            SignalAttackKind::Bandpass => {
                if !(p.low_hz > 0.0 && p.low_hz < p.high_hz && p.high_hz < nyquist) {
                    return bad(format!("bandpass needs 0 < low_hz < high_hz < {nyquist} (got {} – {})", p.low_hz, p.high_hz));
                }
            }
            SignalAttackKind::Requantize => {
                if !(1..=16).contains(&p.bits) {
                    return bad(format!("requantize bits {} outside 1..=16", p.bits));
                }
            }
            SignalAttackKind::MelRetransform => {
                if p.mel_bins < 2 || p.mel_bins > MEL_STFT.bins() {
                    return bad(format!("mel_bins {} outside 2..={}", p.mel_bins, MEL_STFT.bins()));
                }
            }
            SignalAttackKind::PsychoacousticFilter => {
                if !p.phi_db.is_finite() {
                    return bad("phi_db must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn SignalAttack>> {
        self.validate()?;
        let p = &self.params;
        Ok(match self.kind {
            SignalAttackKind::Bandpass => Arc::new(Bandpass::new(p.low_hz, p.high_hz)),
            SignalAttackKind::Requantize => Arc::new(Requantize { bits: p.bits }),
            SignalAttackKind::MelRetransform => Arc::new(MelRetransform::new(p.mel_bins, p.griffin_lim_iters, p.seed)),
            SignalAttackKind::PsychoacousticFilter => Arc::new(PsychoacousticFilter {
                phi_db: p.phi_db,
                psycho: PsychoConfig::default(),
            }),
        })
    }
}

pub trait SignalAttack: Send + Sync {
    fn kind(&self) -> SignalAttackKind;
    /// Same-length transform of `w`.
    fn apply(&self, w: &Waveform) -> Result<Waveform>;
}

/// All four attacks built from `params`.
pub fn signal_attacks(params: &SignalAttackParams) -> Result<Registry<dyn SignalAttack>> {
    let mut r: Registry<dyn SignalAttack> = Registry::new("signal attack");
    for kind in SignalAttackKind::ALL {
        let cfg = SignalAttackConfig { kind, params: params.clone() };
        r.register(kind.id(), cfg.build()?);
    }
    Ok(r)
}

pub fn apply_signal_attack(w: &Waveform, cfg: &SignalAttackConfig) -> Result<Waveform> {
    cfg.build()?.apply(w)
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta)
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Linear-phase Kaiser-windowed-sinc bandpass, applied with its group
/// delay removed.
#[derive(Debug, Clone)]
pub struct Bandpass {
    taps: Vec<f64>,
}

impl Bandpass {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let beta = 0.1102 * (BANDPASS_ATTENUATION_DB - 8.7);
        let win = kaiser(BANDPASS_ORDER + 1, beta);
        let mid = BANDPASS_ORDER as f64 / 2.0;
        let (fl, fh) = (low_hz / fs, high_hz / fs);
        let taps = win
            .iter()
            .enumerate()
            .map(|(n, w)| {
                let t = n as f64 - mid;
                w * (2.0 * fh * sinc(2.0 * fh * t) - 2.0 * fl * sinc(2.0 * fl * t))
            })
            .collect();
        Self { taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

impl SignalAttack for Bandpass {
    fn kind(&self) -> SignalAttackKind {
        SignalAttackKind::Bandpass
    }

    fn apply(&self, w: &Waveform) -> Result<Waveform> {
        let x = w.samples();
        let n = x.len();
        let m = next_fast_len(n + self.taps.len() - 1);
        let xs = rfft_block(x, m);
        let hs = rfft_block(&self.taps, m);
        let prod: Vec<Complex64> = xs.iter().zip(&hs).map(|(a, b)| a * b).collect();
        let full = irfft_block(&prod, m);
        let delay = BANDPASS_ORDER / 2;
        Waveform::new(full[delay..delay + n].to_vec())
    }
}

/// Rounds onto the `2^bits` levels of a signed `bits`-bit PCM grid.
#[derive(Debug, Clone, Copy)]
pub struct Requantize {
    pub bits: u32,
}

impl SignalAttack for Requantize {
    fn kind(&self) -> SignalAttackKind {
        SignalAttackKind::Requantize
    }

    fn apply(&self, w: &Waveform) -> Result<Waveform> {
        let l = (1u64 << (self.bits - 1)) as f64;
        // `+ 0.0` folds negative zero onto zero.
        Waveform::new(w.samples().iter().map(|v| (v * l).round().clamp(-l, l - 1.0) / l + 0.0).collect())
    }
}

/// Waveform → full-length MFCC → waveform: inverse DCT, exponent, a
/// ridge-regularised pseudo-inverse of the mel filterbank and Griffin-Lim.
#[derive(Debug, Clone)]
pub struct MelRetransform {
    mel_bins: usize,
    iters: usize,
    seed: u64,
    /// `bins × mel`.
    filterbank: Array2<f64>,
    /// `mel × bins`, maps mel power back to linear power.
    pseudo_inverse: Array2<f64>,
    dct: Array2<f64>,
}

impl MelRetransform {
    pub fn new(mel_bins: usize, iters: usize, seed: u64) -> Self {
        let filterbank = mel_filterbank(MEL_STFT.n_fft, mel_bins, 0.0, SAMPLE_RATE as f64 / 2.0);
        Self {
            pseudo_inverse: pseudo_inverse(&filterbank),
            dct: dct_matrix(mel_bins, 0, mel_bins),
            filterbank,
            mel_bins,
            iters,
            seed,
        }
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    /// Full set of cepstra (`frames × mel_bins`) of `x`.
    pub fn cepstra(&self, x: &[f64]) -> Array2<f64> {
        let power = stft(x, MEL_STFT).mapv(|c| c.norm_sqr());
        power.dot(&self.filterbank).mapv(|v| v.max(1e-10).ln()).dot(&self.dct)
    }
}

/// `(FᵀF + λI)⁻¹ Fᵀ` for `F` of shape `bins × mel`, returned as `mel × bins`
/// laid out so that `mel_power · result` is the linear power estimate.
pub(crate) fn pseudo_inverse(f: &Array2<f64>) -> Array2<f64> {
    let mut gram = f.t().dot(f);
    let lambda = 1e-8 * gram.diag().iter().cloned().fold(0.0, f64::max);
    gram.diag_mut().iter_mut().for_each(|v| *v += lambda);
    spd_inverse(&gram).dot(&f.t())
}

/// Inverse of a symmetric positive-definite matrix by Cholesky.
pub(crate) fn spd_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                l[[i, i]] = (a[[i, i]] - s).max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut inv = Array2::<f64>::zeros((n, n));
    for c in 0..n {
        // L y = e_c, then Lᵀ x = y.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
            y[i] = ((i == c) as u8 as f64 - s) / l[[i, i]];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[[k, i]] * inv[[k, c]]).sum();
            inv[[i, c]] = (y[i] - s) / l[[i, i]];
        }
    }
    inv
}

impl SignalAttack for MelRetransform {
    fn kind(&self) -> SignalAttackKind {
        SignalAttackKind::MelRetransform
    }

    fn apply(&self, w: &Waveform) -> Result<Waveform> {
        let c = self.cepstra(w.samples());
        let mel = c.dot(&self.dct.t()).mapv(f64::exp);
        let magnitude = mel.dot(&self.pseudo_inverse).mapv(|p| p.max(0.0).sqrt());
        Waveform::new(griffin_lim(&magnitude, MEL_STFT, w.len(), self.iters, self.seed))
    }
}

/// Scales every block-spectrum bin above the signal's own masking
/// threshold plus `Φ` down to that bound.
#[derive(Debug, Clone, Copy)]
pub struct PsychoacousticFilter {
    pub phi_db: f64,
    pub psycho: PsychoConfig,
}

impl SignalAttack for PsychoacousticFilter {
    fn kind(&self) -> SignalAttackKind {
        SignalAttackKind::PsychoacousticFilter
    }

    fn apply(&self, w: &Waveform) -> Result<Waveform> {
        let bound = hearing_threshold(w, &self.psycho)?.magnitude_bound(self.phi_db);
        Waveform::new(project_below(w.samples(), &bound, self.psycho.block))
    }
}
