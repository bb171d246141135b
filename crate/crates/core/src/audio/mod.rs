//! Audio substrate: waveforms, WAV I/O, MFCC, FFT convolution, room
//! responses and short-time spectra.

mod conv;
mod mfcc;
mod resample;
mod rir;
pub mod stft;
mod waveform;
mod wav;

pub use conv::{irfft_block, rfft_block, convolve_same, convolve_same_vjp, fft_convolve, next_fast_len, SignalConvolver};
pub use mfcc::{dct_matrix, hamming, mel_filterbank, mfcc, FeaturePipeline, MfccConfig, MfccFrames, PowerSpectrum};
pub use resample::resample;
pub use rir::{default_reference, synth_rir, RoomConfig, SPEED_OF_SOUND};
pub use waveform::{ImpulseResponse, IrOrigin, Waveform, MAX_IR_TAPS, SAMPLE_RATE};
pub use wav::{encode_wav, load_ir, load_wav, save_ir, save_wav};


