//! Simulated adversaries at increasing knowledge: signal transforms that
//! try to wash out a perturbation, re-identification with the system's
//! own pipeline, and temporal-dependency detection.

mod informed;
mod signal;

pub use informed::{
    reidentification_attack, td_detection, td_sweep, DeidFn, ReidentificationAdversary, TdBackend, TdDetectionConfig,
    TdMode, TdSweep,
};
pub use signal::{
    apply_signal_attack, signal_attacks, Bandpass, MelRetransform, PsychoacousticFilter, Requantize, SignalAttack,
    SignalAttackConfig, SignalAttackKind, SignalAttackParams, BANDPASS_ORDER, MEL_STFT,
};
