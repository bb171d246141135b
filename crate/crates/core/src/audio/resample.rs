//! Band-limited sample-rate conversion (windowed sinc).

const ZERO_CROSSINGS: f64 = 24.0;

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample `x` from `from_hz` to `to_hz`. Output length is
/// `round(len * to / from)`.
pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let cutoff = ratio.min(1.0) * 0.97;
    let half = ZERO_CROSSINGS / cutoff;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(x.len() - 1);
            (lo..=hi)
                .map(|k| {
                    let d = t - k as f64;
                    x[k] * cutoff * sinc(cutoff * d) * blackman(d / half)
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frequency from linearly interpolated upward zero crossings.
    fn zero_crossing_hz(x: &[f64], fs: f64) -> f64 {
        let ups: Vec<f64> = x
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
            .map(|(i, w)| i as f64 + w[0] / (w[0] - w[1]))
            .collect();
        let periods = (ups.len() - 1) as f64;
        periods * fs / (ups[ups.len() - 1] - ups[0])
    }

    #[test]
    fn halves_length_and_keeps_frequency() {
        let n = 8000;
        let x: Vec<f64> = (0..2 * n)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 32000.0).sin())
            .collect();
        let y = resample(&x, 32000, 16000);
        assert_eq!(y.len(), n);
        let f = zero_crossing_hz(&y[200..n - 200], 16000.0);
        assert!((f - 440.0).abs() < 1.0, "{f}");
    }

    #[test]
    fn upsampling_keeps_frequency() {
        let x: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 8000.0).sin())
            .collect();
        let y = resample(&x, 8000, 16000);
        assert_eq!(y.len(), 16000);
        let f = zero_crossing_hz(&y[400..15600], 16000.0);
        assert!((f - 1000.0).abs() < 1.0, "{f}");
    }
}
