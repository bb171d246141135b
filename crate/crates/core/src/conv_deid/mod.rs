//! Convolutional de-identification: optimise a filter anchored at a
//! reference room response so that the filtered voice moves towards a
//! target embedding and away from its own.

use std::time::Instant;

use deid_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::asi::{Ensemble, SpeakerEmbedding, SpeakerModel};
use crate::audio::{load_ir, ImpulseResponse, IrOrigin, RoomConfig, SignalConvolver, Waveform};
use crate::error::{Error, Result};

/// Inputs quieter than this RMS are refused.
pub const SILENCE_RMS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeidConfig {
    /// Weight of `‖δ' − δ‖₂`.
    pub alpha: f64,
    /// Gradient-descent step.
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub patience: usize,
    /// Adversarial filter length in taps.
    pub perturbation_len: usize,
    /// L2 norm the reference response is scaled to.
    pub reference_norm: f64,
    /// Measured reference response (WAV); the synthetic room is used when
    /// absent.
    pub reference_path: Option<std::path::PathBuf>,
    pub room: RoomConfig,
    pub seed: u64,
}

impl Default for DeidConfig {
    fn default() -> Self {
        Self {
            alpha: 5000.0,
            learning_rate: 3e-10,
            max_iterations: 200,
            patience: 10,
            perturbation_len: 4096,
            reference_norm: 2.5e-4,
            reference_path: None,
            room: RoomConfig::default(),
            seed: 0,
        }
    }
}

impl DeidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.max_iterations == 0 || self.patience == 0 {
            return Err(Error::Config("max_iterations and patience must be ≥ 1".into()));
        }
        if self.perturbation_len == 0 || self.perturbation_len > crate::audio::MAX_IR_TAPS {
            return Err(Error::Config(format!("perturbation length {} out of range", self.perturbation_len)));
        }
        if !(self.reference_norm > 0.0) {
            return Err(Error::Config("reference_norm must be > 0".into()));
        }
        Ok(())
    }

    /// Reference response δ at `perturbation_len` taps and `reference_norm`.
    pub fn reference(&self) -> Result<ImpulseResponse> {
        match &self.reference_path {
            Some(p) => load_ir(p)?.resized(self.perturbation_len)?.with_norm(self.reference_norm),
            None => {
                let room = RoomConfig {
                    length: self.room.length.min(self.perturbation_len),
                    ..self.room.clone()
                };
                crate::audio::synth_rir(&room)?.resized(self.perturbation_len)?.with_norm(self.reference_norm)
            }
        }
    }
}

/// Anchor, positive and negative embeddings of the triplet term.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: SpeakerEmbedding,
    pub positive: SpeakerEmbedding,
    pub negative: SpeakerEmbedding,
}

impl Triplet {
    pub fn new(anchor: SpeakerEmbedding, positive: SpeakerEmbedding, negative: SpeakerEmbedding) -> Result<Self> {
        if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
            return Err(Error::Argument("triplet embeddings differ in dimension".into()));
        }
        Ok(Self { anchor, positive, negative })
    }

    /// `D(a, p) − D(a, n)` with cosine distance.
    pub fn loss(&self) -> Result<f64> {
        let d = crate::asi::ScoreMetric::CosineSimilarity;
        Ok(d.distance(&self.anchor, &self.positive)? - d.distance(&self.anchor, &self.negative)?)
    }
}

fn penalty(delta_prime: &[f64], reference: &[f64]) -> f64 {
    delta_prime.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn triplet_graph(g: &mut Graph, a: Var, p: &[f64], n: &[f64]) -> Var {
    let pv = g.row(p, false);
    let nv = g.row(n, false);
    // (1 − cos(a, p)) − (1 − cos(a, n))
    let cp = g.cosine(a, pv, 1e-12);
    let cn = g.cosine(a, nv, 1e-12);
    g.sub(cn, cp)
}

/// `D(f(x∗δ'), p) − D(f(x∗δ'), n) + α‖δ' − δ‖₂`, with `x∗δ'` presented to
/// the model at the level of the natural rendition.
pub fn triplet_rir_objective(
    model: &dyn SpeakerModel,
    x: &Waveform,
    delta_prime: &ImpulseResponse,
    p: &SpeakerEmbedding,
    n: &SpeakerEmbedding,
    reference: &ImpulseResponse,
    alpha: f64,
) -> Result<f64> {
    if delta_prime.len() != reference.len() {
        return Err(Error::Argument("δ' and δ differ in length".into()));
    }
    if p.dim() != model.embedding_dim() || n.dim() != model.embedding_dim() {
        return Err(Error::Argument("target dimension does not match the model".into()));
    }
    let gain = render_gain(x, reference)?;
    let y = Waveform::new(
        crate::audio::convolve_same(x.samples(), delta_prime.taps())
            .into_iter()
            .map(|v| v * gain)
            .collect(),
    )?;
    let a = model.extract_embedding(&y)?;
    let loss = Triplet::new(a, p.clone(), n.clone())?.loss()? + alpha * penalty(delta_prime.taps(), reference.taps());
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("objective is {loss}")));
    }
    Ok(loss)
}

/// Per-member target and source embedding.
#[derive(Debug, Clone)]
pub struct MemberGoal {
    pub target: SpeakerEmbedding,
    pub source: SpeakerEmbedding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Perturbation {
    /// Best iterate rescaled to the reference energy.
    #[serde(skip)]
    pub delta: Option<ImpulseResponse>,
    /// Loss at every iteration (before the update of that iteration).
    pub trace: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    pub optimization_seconds: f64,
}

impl Perturbation {
    pub fn filter(&self) -> &ImpulseResponse {
        self.delta.as_ref().expect("perturbation carries its filter")
    }
}

/// Source embeddings `n_i = f_i(x)` for every member.
pub fn source_embeddings(models: &Ensemble, x: &Waveform) -> Result<Vec<SpeakerEmbedding>> {
    models.members().iter().map(|m| m.extract_embedding(x)).collect()
}

/// Gradient descent on the filter from `δ' = δ`, keeping the best iterate
/// and stopping after `patience` iterations without a new best. The
/// returned filter is rescaled to the reference energy.
pub fn construct_perturbation(
    models: &Ensemble,
    x: &Waveform,
    goals: &[MemberGoal],
    reference: &ImpulseResponse,
    cfg: &DeidConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    let start = Instant::now();
    let objective = FilterObjective::new(models, x, goals, reference, cfg.alpha)?;
    let mut dp = reference.taps().to_vec();
    let mut best = (f64::INFINITY, dp.clone(), 0usize);
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut since_best = 0;
    for it in 0..cfg.max_iterations {
        let (loss, grad) = objective.loss_and_gradient(&dp)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss} at iteration {it}")));
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, dp.clone(), it);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
        if let Some(k) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite filter gradient at tap {k}, iteration {it}")));
        }
        for (d, gk) in dp.iter_mut().zip(&grad) {
            *d -= cfg.learning_rate * gk;
        }
    }
    let raw = ImpulseResponse::new(best.1, IrOrigin::Adversarial)?;
    let delta = raw.normalize_power(reference)?;
    Ok(Perturbation {
        delta: Some(delta),
        iterations: trace.len(),
        trace,
        best_loss: best.0,
        best_iteration: best.2,
        optimization_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Ensemble-mean triplet loss plus `α‖δ' − δ‖₂` as a function of the
/// filter taps, for one fixed input.
pub(crate) struct FilterObjective<'a> {
    models: &'a Ensemble,
    conv: SignalConvolver,
    gain: f64,
    targets: Vec<(Vec<f64>, Vec<f64>)>,
    reference: &'a [f64],
    alpha: f64,
}

impl<'a> FilterObjective<'a> {
    pub(crate) fn new(
        models: &'a Ensemble,
        x: &Waveform,
        goals: &[MemberGoal],
        reference: &'a ImpulseResponse,
        alpha: f64,
    ) -> Result<Self> {
        if goals.len() != models.len() {
            return Err(Error::Argument("one goal per ensemble member".into()));
        }
        for (m, g) in models.members().iter().zip(goals) {
            if g.target.dim() != m.embedding_dim() || g.source.dim() != m.embedding_dim() {
                return Err(Error::Argument(format!("goal dimension does not match member `{}`", m.name())));
            }
        }
        if x.rms() < SILENCE_RMS {
            return Err(Error::Degenerate(format!("input RMS {:.2e} is below the silence guard", x.rms())));
        }
        Ok(Self {
            models,
            conv: SignalConvolver::new(x.samples(), reference.len()),
            // The model sees the filtered voice at the level it will be rendered at.
            gain: render_gain(x, reference)?,
            targets: goals
                .iter()
                .map(|g| (g.target.values().to_vec(), g.source.values().to_vec()))
                .collect(),
            reference: reference.taps(),
            alpha,
        })
    }

    /// Loss at `dp` and a (sub)gradient with respect to the taps. At
    /// `dp = δ` the penalty contributes nothing.
    pub(crate) fn loss_and_gradient(&self, dp: &[f64]) -> Result<(f64, Vec<f64>)> {
        let y: Vec<f64> = self.conv.convolve(dp).into_iter().map(|v| v * self.gain).collect();
        let (dist, mut gy) = self.models.loss_and_gradient(&y, &|i: usize, g: &mut Graph, a: Var| {
            triplet_graph(g, a, &self.targets[i].0, &self.targets[i].1)
        })?;
        gy.iter_mut().for_each(|v| *v *= self.gain);
        let pen = penalty(dp, self.reference);
        let mut grad = self.conv.filter_gradient(&gy);
        if pen > 0.0 {
            for ((gk, d), r) in grad.iter_mut().zip(dp).zip(self.reference) {
                *gk += self.alpha * (d - r) / pen;
            }
        }
        Ok((dist + self.alpha * pen, grad))
    }
}

/// Gain bringing `x ∗ δ` to the peak level of `x`.
fn render_gain(x: &Waveform, reference: &ImpulseResponse) -> Result<f64> {
    let wet = crate::audio::fft_convolve(x, reference).peak();
    if wet == 0.0 {
        return Err(Error::Degenerate("reverberant rendition is silent".into()));
    }
    Ok(x.peak() / wet)
}

/// Natural-reverb rendition `x ∗ δ`, scaled to the peak level of `x`.
pub fn reverberate(x: &Waveform, reference: &ImpulseResponse) -> Waveform {
    let y = crate::audio::fft_convolve(x, reference);
    let p = y.peak();
    if p == 0.0 {
        y
    } else {
        y.scaled(x.peak() / p)
    }
}

/// `x ∗ δ'`, same length, scaled so its peak equals that of the
/// natural rendition [`reverberate`]`(x, δ)`.
pub fn deidentify(x: &Waveform, delta_prime: &ImpulseResponse, reference: &ImpulseResponse) -> Result<Waveform> {
    let y = crate::audio::fft_convolve(x, delta_prime);
    let (py, pn) = (y.peak(), reverberate(x, reference).peak());
    if py == 0.0 {
        return Ok(y);
    }
    Ok(y.scaled(pn / py))
}
