//! Shoebox room impulse responses by the image-source method.

use serde::{Deserialize, Serialize};

use super::waveform::{ImpulseResponse, IrOrigin, MAX_IR_TAPS, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomConfig {
    /// Room size in metres (x, y, z).
    pub dimensions: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    /// Energy absorption per wall: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub absorption: [f64; 6],
    pub max_order: u32,
    /// Impulse response length in samples.
    pub length: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            dimensions: [5.0, 4.0, 3.0],
            source: [1.5, 2.0, 1.5],
            mic: [3.2, 2.1, 1.4],
            absorption: [0.5; 6],
            max_order: 12,
            length: 3200,
        }
    }
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &d) in self.dimensions.iter().enumerate() {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("room dimension {i} must be positive")));
            }
            for (name, p) in [("source", self.source), ("mic", self.mic)] {
                if !(p[i] > 0.0 && p[i] < d) {
                    return Err(Error::Config(format!("{name} coordinate {i} = {} not strictly inside the room", p[i])));
                }
            }
        }
        if let Some(a) = self.absorption.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("absorption {a} outside (0, 1]")));
        }
        if self.length == 0 || self.length > MAX_IR_TAPS {
            return Err(Error::Config(format!("impulse response length {} outside 1..={MAX_IR_TAPS}", self.length)));
        }
        Ok(())
    }

    pub fn direct_distance(&self) -> f64 {
        (0..3).map(|i| (self.source[i] - self.mic[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Image-source impulse response, with nearest-sample arrival times and
/// spherical spreading `1 / (4π r)`. Distances closer than one sample of
/// travel are clamped to it.
pub fn synth_rir(room: &RoomConfig) -> Result<ImpulseResponse> {
    room.validate()?;
    let fs = SAMPLE_RATE as f64;
    let r_min = SPEED_OF_SOUND / fs;
    let beta: Vec<f64> = room.absorption.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
    let n = room.max_order as i64;
    let mut taps = vec![0.0; room.length];
    // Max distance that still lands inside the response.
    let max_dist = room.length as f64 * SPEED_OF_SOUND / fs;
    for nx in -n..=n {
        for ny in -n..=n {
            for nz in -n..=n {
                for q in 0..8u32 {
                    let qs = [(q & 1) as i64, ((q >> 1) & 1) as i64, ((q >> 2) & 1) as i64];
                    let ns = [nx, ny, nz];
                    let mut order = 0;
                    let mut amp = 1.0;
                    let mut dist2 = 0.0;
                    for axis in 0..3 {
                        let lo_hits = (ns[axis] - qs[axis]).unsigned_abs() as i32;
                        let hi_hits = ns[axis].unsigned_abs() as i32;
                        order += lo_hits + hi_hits;
                        amp *= beta[2 * axis].powi(lo_hits) * beta[2 * axis + 1].powi(hi_hits);
                        let img = (1 - 2 * qs[axis]) as f64 * room.source[axis] + 2.0 * ns[axis] as f64 * room.dimensions[axis];
                        dist2 += (img - room.mic[axis]).powi(2);
                    }
                    if order as u32 > room.max_order || amp == 0.0 {
                        continue;
                    }
                    let dist = dist2.sqrt();
                    if dist >= max_dist {
                        continue;
                    }
                    let idx = (fs * dist / SPEED_OF_SOUND).round() as usize;
                    if idx < taps.len() {
                        taps[idx] += amp / (4.0 * std::f64::consts::PI * dist.max(r_min));
                    }
                }
            }
        }
    }
    ImpulseResponse::new(taps, IrOrigin::Synthetic)
}

/// Default reference response: 0.2 s shoebox response scaled to `norm`
/// and zero-padded to `len` taps.
pub fn default_reference(len: usize, norm: f64) -> Result<ImpulseResponse> {
    synth_rir(&RoomConfig::default())?.resized(len)?.with_norm(norm)
}
