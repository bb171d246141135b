//! Non-targeted additive perturbation baselines: FGSM, PGD, CW-l2 and a
//! psychoacoustically masked variant.

mod psycho;

use std::sync::Arc;

use deid_autograd::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use psycho::{
    bark, bin_hz, block_inverse, block_spectra, hearing_threshold, project_below, quiet_threshold, worst_bound_ratio,
    MaskingThreshold, PsychoConfig, FULL_SCALE_DB,
};

use crate::asi::{score, EnrollmentProfile, SpeakerEmbedding, SpeakerModel};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdditiveAttackConfig {
    /// `fgsm`, `pgd`, `cw_l2` or `pm`.
    pub method: String,
    /// L∞ budget (FGSM, PGD).
    pub epsilon: f64,
    /// Iterations (PGD, CW-l2, PM).
    pub steps: usize,
    /// PGD step; `None` means `epsilon / 10`.
    pub step_size: Option<f64>,
    /// Weight of `‖δ‖²` in the CW-l2 objective.
    pub penalty: f64,
    /// Confidence margin of the CW-l2 and PM hinge.
    pub kappa: f64,
    /// Adam step for CW-l2 and PM.
    pub learning_rate: f64,
    /// Allowed excess over the masking threshold, dB (PM).
    pub phi_db: f64,
    pub psycho: PsychoConfig,
    pub seed: u64,
}

impl Default for AdditiveAttackConfig {
    fn default() -> Self {
        Self {
            method: "pgd".into(),
            epsilon: 0.002,
            steps: 40,
            step_size: None,
            penalty: 1.0,
            kappa: 0.05,
            learning_rate: 1e-3,
            phi_db: 0.0,
            psycho: PsychoConfig::default(),
            seed: 0,
        }
    }
}

impl AdditiveAttackConfig {
    pub fn validate(&self) -> Result<()> {
        let needs_eps = matches!(self.method.as_str(), "fgsm" | "pgd");
        if needs_eps && !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be a non-negative number", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.penalty >= 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config("penalty must be ≥ 0 and learning rate > 0".into()));
        }
        Ok(())
    }
}

/// The substitute model and the enrolled identities an attack is run against.
pub struct AttackTarget<'a> {
    pub model: &'a dyn SpeakerModel,
    pub profiles: &'a [EnrollmentProfile],
    pub source_label: usize,
}

impl AttackTarget<'_> {
    fn source(&self) -> Result<&EnrollmentProfile> {
        self.profiles
            .iter()
            .find(|p| p.label == self.source_label)
            .ok_or_else(|| Error::Argument(format!("source label {} is not enrolled", self.source_label)))
    }

    pub fn is_success(&self, w: &Waveform) -> Result<bool> {
        Ok(self.model.identify(self.profiles, w)?.0 != self.source_label)
    }

    /// Margin `score(source) − max other score` and its input gradient.
    /// Negative means the probe is no longer identified as the source.
    pub fn margin_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let src = self.source()?.centroid.clone();
        let emb = self.model.extract_embedding(&Waveform::new(x.to_vec())?)?;
        let rival = self.best_rival(&emb)?;
        let (s, r) = (src.values().to_vec(), rival.values().to_vec());
        self.model.input_gradient(x, &move |g: &mut Graph, e: Var| {
            let sv = g.row(&s, false);
            let rv = g.row(&r, false);
            let a = g.cosine(e, sv, 1e-12);
            let b = g.cosine(e, rv, 1e-12);
            g.sub(a, b)
        })
    }

    fn best_rival(&self, emb: &SpeakerEmbedding) -> Result<SpeakerEmbedding> {
        let mut best: Option<(&EnrollmentProfile, f64)> = None;
        for p in self.profiles.iter().filter(|p| p.label != self.source_label) {
            let s = score(&p.centroid, emb)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        best.map(|(p, _)| p.centroid.clone())
            .ok_or_else(|| Error::Config("non-targeted attack needs at least two enrolled identities".into()))
    }
}

#[derive(Debug, Clone)]
pub struct AdditiveOutcome {
    pub adversarial: Waveform,
    pub success: bool,
    pub iterations: usize,
}

pub trait AdditiveMethod: Send + Sync {
    fn id(&self) -> &'static str;
    fn generate(&self, target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome>;
}

pub fn methods() -> Registry<dyn AdditiveMethod> {
    let mut r: Registry<dyn AdditiveMethod> = Registry::new("additive method");
    for m in [
        Arc::new(Fgsm) as Arc<dyn AdditiveMethod>,
        Arc::new(Pgd),
        Arc::new(CwL2),
        Arc::new(Pm),
    ] {
        r.register(m.id(), m);
    }
    r
}

pub fn generate_additive(target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome> {
    cfg.validate()?;
    target.source()?;
    methods().get(&cfg.method)?.generate(target, w, cfg)
}

fn finish(target: &AttackTarget, x: Vec<f64>, iterations: usize) -> Result<AdditiveOutcome> {
    let adversarial = Waveform::new(x.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
    Ok(AdditiveOutcome {
        success: target.is_success(&adversarial)?,
        adversarial,
        iterations,
    })
}

/// One signed gradient step of size ε.
pub struct Fgsm;

impl AdditiveMethod for Fgsm {
    fn id(&self) -> &'static str {
        "fgsm"
    }

    fn generate(&self, target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome> {
        let x = w.samples();
        let (_, g) = target.margin_gradient(x)?;
        let adv = x.iter().zip(&g).map(|(v, d)| v - cfg.epsilon * sign(*d)).collect();
        finish(target, adv, 1)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected signed-gradient descent inside the ε-ball from a random start.
pub struct Pgd;

impl AdditiveMethod for Pgd {
    fn id(&self) -> &'static str {
        "pgd"
    }

    fn generate(&self, target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome> {
        let x = w.samples();
        let eps = cfg.epsilon;
        if eps == 0.0 {
            return finish(target, x.to_vec(), 0);
        }
        let step = cfg.step_size.unwrap_or(eps / 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut delta: Vec<f64> = x.iter().map(|_| rng.random_range(-eps..=eps)).collect();
        for _ in 0..cfg.steps {
            let probe: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| (a + d).clamp(-1.0, 1.0)).collect();
            let (_, g) = target.margin_gradient(&probe)?;
            for ((d, gi), xi) in delta.iter_mut().zip(&g).zip(x) {
                *d = (*d - step * sign(*gi)).clamp(-eps, eps);
                *d = (xi + *d).clamp(-1.0, 1.0) - xi;
            }
        }
        finish(target, x.iter().zip(&delta).map(|(a, d)| a + d).collect(), cfg.steps)
    }
}

/// Largest `c ∈ [0,1]` keeping `x + c·δ` inside [-1, 1].
fn fit_scale(x: &[f64], delta: &[f64]) -> f64 {
    let mut c: f64 = 1.0;
    for (a, d) in x.iter().zip(delta) {
        let y = a + d;
        if y > 1.0 {
            c = c.min((1.0 - a) / d);
        } else if y < -1.0 {
            c = c.min((-1.0 - a) / d);
        }
    }
    c.max(0.0)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-12);
        }
    }
}

/// Penalised objective `max(margin + κ, 0) + λ‖δ‖²` minimised with Adam;
/// returns the lowest-objective successful iterate, or the lowest-objective
/// iterate overall when none succeeded.
pub struct CwL2;

impl AdditiveMethod for CwL2 {
    fn id(&self) -> &'static str {
        "cw_l2"
    }

    fn generate(&self, target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome> {
        let x = w.samples();
        let n = x.len();
        let mut delta = vec![0.0; n];
        let mut adam = AdamState::new(n);
        let mut best_ok: Option<(f64, Vec<f64>)> = None;
        let mut best_any: Option<(f64, Vec<f64>)> = None;
        for _ in 0..cfg.steps {
            let probe: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let (margin, g) = target.margin_gradient(&probe)?;
            let l2: f64 = delta.iter().map(|d| d * d).sum();
            let hinge = (margin + cfg.kappa).max(0.0);
            let obj = hinge + cfg.penalty * l2;
            if margin < 0.0 && best_ok.as_ref().is_none_or(|(b, _)| obj < *b) {
                best_ok = Some((obj, delta.clone()));
            }
            if best_any.as_ref().is_none_or(|(b, _)| obj < *b) {
                best_any = Some((obj, delta.clone()));
            }
            let active = if hinge > 0.0 { 1.0 } else { 0.0 };
            let grad: Vec<f64> = g.iter().zip(&delta).map(|(gi, d)| active * gi + 2.0 * cfg.penalty * d).collect();
            adam.step(&mut delta, &grad, cfg.learning_rate);
        }
        let delta = best_ok.or(best_any).map(|b| b.1).unwrap_or(delta);
        let c = fit_scale(x, &delta);
        finish(target, x.iter().zip(&delta).map(|(a, d)| a + c * d).collect(), cfg.steps)
    }
}

/// Adam on the hinge margin with the perturbation's block spectrum
/// projected under the masking threshold of the clean input plus `Φ` after
/// every step. The final perturbation is scaled, never clipped, to stay in
/// range so the spectral bound survives.
pub struct Pm;

impl AdditiveMethod for Pm {
    fn id(&self) -> &'static str {
        "pm"
    }

    fn generate(&self, target: &AttackTarget, w: &Waveform, cfg: &AdditiveAttackConfig) -> Result<AdditiveOutcome> {
        let x = w.samples();
        let block = cfg.psycho.block;
        let thr = hearing_threshold(w, &cfg.psycho)?;
        // A hair inside the bound so that rounding in x + δ − x cannot
        // push a bin over it.
        let bound = thr.magnitude_bound(cfg.phi_db).mapv(|b| b * (1.0 - 1e-7));
        let mut delta = vec![0.0; x.len()];
        let mut adam = AdamState::new(x.len());
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..cfg.steps {
            let probe: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let (margin, g) = target.margin_gradient(&probe)?;
            if best.as_ref().is_none_or(|(b, _)| margin < *b) {
                best = Some((margin, delta.clone()));
            }
            if margin + cfg.kappa < 0.0 {
                break;
            }
            adam.step(&mut delta, &g, cfg.learning_rate);
            delta = project_below(&delta, &bound, block);
        }
        let delta = best.map(|b| b.1).unwrap_or(delta);
        let c = fit_scale(x, &delta);
        finish(target, x.iter().zip(&delta).map(|(a, d)| a + c * d).collect(), cfg.steps)
    }
}
