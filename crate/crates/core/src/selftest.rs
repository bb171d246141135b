//! Fast invariant checks against brute-force references, runnable from
//! the command line on any installation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{convolve_same, Waveform};
use crate::config::GlobalConfig;
use crate::error::{Error, Result};
use crate::harness::{Condition, TrialRecord};
use crate::metrics::{auc, dsr, eer, mcd, mcd_frames, word_accuracy};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<String>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::State(msg()))
    }
}

/// Direct time-domain convolution truncated to `x.len()`.
pub fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| (0..h.len().min(n + 1)).map(|k| h[k] * x[n - k]).sum())
        .collect()
}

fn convolution() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..2048);
        let l = rng.random_range(1..256);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = convolve_same(&x, &h);
        let b = direct_convolve(&x, &h);
        worst = a.iter().zip(&b).fold(worst, |m, (p, q)| m.max((p - q).abs()));
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.2e}"))
}

fn metrics() -> Result<String> {
    let wa = word_accuracy("a b c d", "a b x c d")?;
    ensure(wa.raw == 75.0 && wa.correct == 4 && wa.insertions == 1, || format!("{wa:?}"))?;
    ensure(word_accuracy("a b c", "a b c")?.raw == 100.0, || "identical texts".into())?;
    let one = ndarray::Array2::from_shape_fn((1, 24), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
    let zero = ndarray::Array2::zeros((1, 24));
    let single = mcd_frames(&one, &zero)?;
    ensure((single - 6.141_851).abs() < 1e-5, || format!("single-coefficient MCD {single}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Waveform::new((0..8000).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    ensure(mcd(&w, &w)? == 0.0, || "mcd(x, x) ≠ 0".into())?;
    ensure(dsr([true, false, false, true])? == 50.0, || "dsr".into())?;
    Ok("WA, MCD and DSR examples".into())
}

fn ranking() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // Coarse grid so ties occur.
        let p: Vec<f64> = (0..rng.random_range(1..60)).map(|_| (rng.random_range(0..20) as f64) / 10.0).collect();
        let n: Vec<f64> = (0..rng.random_range(1..60)).map(|_| (rng.random_range(0..16) as f64) / 10.0).collect();
        let mut s = 0.0;
        for a in &p {
            for b in &n {
                s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        worst = worst.max((auc(&p, &n)? - s / (p.len() * n.len()) as f64).abs());
    }
    ensure(worst < 1e-9, || format!("AUC deviation {worst:e}"))?;
    ensure(eer(&[0.9, 0.8], &[0.1, 0.2])? == 0.0, || "separated EER".into())?;
    ensure((eer(&[0.5; 10], &[0.5; 10])? - 0.5).abs() < 1e-12, || "chance EER".into())?;
    Ok(format!("AUC deviation {worst:.1e}"))
}

fn records() -> Result<String> {
    for (s, p) in [(0, 0), (0, 3), (2, 1)] {
        let r = TrialRecord::new("u", "u", "m", "m", "conv", Condition::Deidentified, None, s, p);
        ensure(r.success == (s != p), || "success flag".into())?;
        r.check()?;
    }
    Ok("success flag invariant".into())
}

fn config() -> Result<String> {
    let c = GlobalConfig::from_toml_str("")?;
    let again = GlobalConfig::from_toml_str(&c.canonical())?;
    ensure(again == c, || "canonical form does not round-trip".into())?;
    ensure(GlobalConfig::from_toml_str("[asi]\nepochz = 3\n").is_err(), || "unknown key accepted".into())?;
    Ok("round trip and unknown-key rejection".into())
}

pub fn run() -> Vec<Check> {
    vec![
        Check { name: "fft_convolution", outcome: convolution() },
        Check { name: "metric_examples", outcome: metrics() },
        Check { name: "ranking_oracles", outcome: ranking() },
        Check { name: "trial_records", outcome: records() },
        Check { name: "config", outcome: config() },
    ]
}
