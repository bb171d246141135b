use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate of every signal after ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

/// Longest impulse response accepted (one second at 16 kHz).
pub const MAX_IR_TAPS: usize = 16_000;

/// Mono signal at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            samples: vec![0.0; n],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn prefix(&self, n: usize) -> Waveform {
        Waveform {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
        }
    }

    pub fn clipped(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        }
    }
}

/// Where an impulse response came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrOrigin {
    Measured,
    Synthetic,
    Adversarial,
}

/// Finite impulse response (room response or adversarial filter).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    taps: Vec<f64>,
    origin: IrOrigin,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, origin: IrOrigin) -> Result<Self> {
        if taps.is_empty() || taps.len() > MAX_IR_TAPS {
            return Err(Error::Argument(format!(
                "impulse response length {} outside 1..={MAX_IR_TAPS}",
                taps.len()
            )));
        }
        if taps.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite impulse response tap".into()));
        }
        let ir = Self { taps, origin };
        if ir.energy() <= 0.0 {
            return Err(Error::Degenerate("impulse response has zero energy".into()));
        }
        Ok(ir)
    }

    pub fn unit_impulse() -> Self {
        Self {
            taps: vec![1.0],
            origin: IrOrigin::Synthetic,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn origin(&self) -> IrOrigin {
        self.origin
    }

    pub fn with_origin(mut self, origin: IrOrigin) -> Self {
        self.origin = origin;
        self
    }

    /// Sum of squared taps.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|x| x * x).sum()
    }

    pub fn l2_distance(&self, other: &ImpulseResponse) -> f64 {
        assert_eq!(self.len(), other.len());
        self.taps
            .iter()
            .zip(&other.taps)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Zero-padded or truncated to `len` taps.
    pub fn resized(&self, len: usize) -> Result<Self> {
        let mut taps = self.taps.clone();
        taps.resize(len, 0.0);
        Self::new(taps, self.origin)
    }

    /// Scale so that the sum of squares equals `reference`'s.
    pub fn normalize_power(&self, reference: &ImpulseResponse) -> Result<ImpulseResponse> {
        let e = self.energy();
        let r = reference.energy();
        if e <= 0.0 || r <= 0.0 {
            return Err(Error::Degenerate("zero-energy impulse response".into()));
        }
        let g = (r / e).sqrt();
        Ok(Self {
            taps: self.taps.iter().map(|x| x * g).collect(),
            origin: self.origin,
        })
    }

    /// Scale to a given L2 norm.
    pub fn with_norm(&self, norm: f64) -> Result<ImpulseResponse> {
        if !(norm > 0.0) {
            return Err(Error::Argument(format!("target norm {norm} must be positive")));
        }
        let g = norm / self.energy().sqrt();
        Ok(Self {
            taps: self.taps.iter().map(|x| x * g).collect(),
            origin: self.origin,
        })
    }
}
