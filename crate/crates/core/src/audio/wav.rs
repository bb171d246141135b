//! WAV ingestion and output.

use std::path::Path;

use super::resample::resample;
use super::waveform::{ImpulseResponse, IrOrigin, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM (or float) WAV file, downmixes to mono by channel mean and
/// resamples to 16 kHz. Integer samples are scaled to [-1, 1].
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let (samples, rate) = read_mono(path)?;
    Waveform::new(resample(&samples, rate, SAMPLE_RATE))
}

fn read_mono(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::Format(format!("{} bits per sample", spec.bits_per_sample)));
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

const PCM16: hound::WavSpec = hound::WavSpec {
    channels: 1,
    sample_rate: SAMPLE_RATE,
    bits_per_sample: 16,
    sample_format: hound::SampleFormat::Int,
};

fn write_pcm16<W: std::io::Write + std::io::Seek>(writer: &mut hound::WavWriter<W>, w: &Waveform) -> hound::Result<()> {
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    Ok(())
}

/// Writes 16-bit PCM mono at 16 kHz; samples are clipped to [-1, 1].
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, PCM16).map_err(|e| map_hound(path, e))?;
    write_pcm16(&mut writer, w).map_err(|e| map_hound(path, e))?;
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// The bytes [`save_wav`] would write.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut buf, PCM16).expect("in-memory WAV header");
    write_pcm16(&mut writer, w).expect("in-memory WAV write");
    writer.finalize().expect("in-memory WAV finalize");
    buf.into_inner()
}

/// Writes an impulse response as 32-bit float WAV (no clipping or
/// quantisation of small taps).
pub fn save_ir(path: impl AsRef<Path>, ir: &ImpulseResponse) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in ir.taps() {
        writer.write_sample(s as f32).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Loads a measured impulse response from WAV.
pub fn load_ir(path: impl AsRef<Path>) -> Result<ImpulseResponse> {
    let path = path.as_ref();
    let (taps, rate) = read_mono(path)?;
    ImpulseResponse::new(resample(&taps, rate, SAMPLE_RATE), IrOrigin::Measured)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_int(path: &Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for f in frames {
            for s in f {
                w.write_sample(*s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn native_rate_mono_is_identity_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let frames: Vec<Vec<i16>> = (0..500).map(|i| vec![(i * 37 % 2000) as i16 - 1000]).collect();
        write_int(&p, 16000, 1, &frames);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 500);
        assert_eq!(w.samples()[1], (37 - 1000) as f64 / 32768.0);
    }

    #[test]
    fn identical_stereo_channels_downmix_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let frames: Vec<Vec<i16>> = (0..300).map(|i| vec![i as i16 * 10, i as i16 * 10]).collect();
        write_int(&p, 16000, 2, &frames);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 300);
        assert_eq!(w.samples()[7], 70.0 / 32768.0);
    }

    #[test]
    fn double_rate_input_is_halved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let frames: Vec<Vec<i16>> = (0..3200)
            .map(|i| vec![(10000.0 * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 32000.0).sin()) as i16])
            .collect();
        write_int(&p, 32000, 1, &frames);
        assert_eq!(load_wav(&p).unwrap().len(), 1600);
    }

    #[test]
    fn missing_and_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_wav(dir.path().join("nope.wav")), Err(Error::Io { .. })));
        let g = dir.path().join("g.wav");
        std::fs::write(&g, b"definitely not a riff file").unwrap();
        assert!(matches!(load_wav(&g), Err(Error::Format(_))));
    }

    #[test]
    fn save_then_load_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.wav");
        let w = Waveform::new((0..100).map(|i| (i as f64 / 50.0) - 1.0).collect()).unwrap();
        save_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
        let ir = ImpulseResponse::new(vec![1e-4, -3e-5, 2e-6], IrOrigin::Adversarial).unwrap();
        let q = dir.path().join("ir.wav");
        save_ir(&q, &ir).unwrap();
        let back = load_ir(&q).unwrap();
        assert!((back.taps()[1] - ir.taps()[1]).abs() < 1e-10);
    }
}
