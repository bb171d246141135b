use std::path::Path;
use std::sync::Arc;

use deid_autograd::{Graph, ParamStore, Tensor, Var};
use serde_json::json;

use super::arch::{architectures, ArchDims, Architecture};
use super::embedding::{identify_embedding, EnrollmentProfile, SpeakerEmbedding};
use crate::audio::{FeaturePipeline, MfccConfig, Waveform};
use crate::checkpoint;
use crate::error::{Error, Result};

/// Scalar objective built on top of an embedding (`1 × D` → `1 × 1`).
pub type Objective<'a> = dyn Fn(&mut Graph, Var) -> Var + 'a;

/// Differentiable waveform → embedding map.
pub trait SpeakerModel: Send + Sync {
    fn name(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    /// Shortest accepted input, in samples.
    fn min_len(&self) -> usize;
    /// Records the embedding (`1 × D`) of `wave` (`1 × N`) on `g`.
    fn embed_graph(&self, g: &mut Graph, wave: Var) -> Var;

    fn check_len(&self, n: usize) -> Result<()> {
        if n < self.min_len() {
            return Err(Error::EmptyFeature(format!(
                "{n} samples is shorter than the {}-sample minimum",
                self.min_len()
            )));
        }
        Ok(())
    }

    fn extract_embedding(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        self.check_len(w.len())?;
        let mut g = Graph::new();
        let x = g.row(w.samples(), false);
        let e = self.embed_graph(&mut g, x);
        SpeakerEmbedding::new(g.value(e).row(0).to_vec())
    }

    /// Value of `objective(embedding(w))` and its exact gradient with
    /// respect to every input sample.
    fn input_gradient(&self, w: &[f64], objective: &Objective) -> Result<(f64, Vec<f64>)> {
        self.check_len(w.len())?;
        let mut g = Graph::new();
        let x = g.row(w, true);
        let e = self.embed_graph(&mut g, x);
        let loss = objective(&mut g, e);
        let value = g.scalar(loss);
        let grads = g.backward(loss);
        let grad = match grads.get(x) {
            Some(t) => t.row(0).to_vec(),
            None => vec![0.0; w.len()],
        };
        if !value.is_finite() {
            return Err(Error::Numerical(format!("objective is {value}")));
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite input gradient at sample {i} of {} (objective {value})",
                w.len()
            )));
        }
        Ok((value, grad))
    }

    fn enroll(&self, label: usize, utterances: &[&Waveform]) -> Result<EnrollmentProfile> {
        let embs = utterances
            .iter()
            .map(|w| self.extract_embedding(w))
            .collect::<Result<Vec<_>>>()?;
        EnrollmentProfile::from_embeddings(label, &embs)
    }

    fn identify(&self, profiles: &[EnrollmentProfile], w: &Waveform) -> Result<(usize, f64)> {
        if profiles.is_empty() {
            return Err(Error::Config("no enrollment profiles".into()));
        }
        identify_embedding(profiles, &self.extract_embedding(w)?)
    }
}

impl SpeakerModel for AsiModel {
    fn name(&self) -> &str {
        self.arch.id()
    }

    fn embedding_dim(&self) -> usize {
        self.dims.embedding_dim
    }

    fn min_len(&self) -> usize {
        self.features.config().frame_len()
    }

    fn embed_graph(&self, g: &mut Graph, wave: Var) -> Var {
        let params = self.params.bind(g, false);
        let c = self.features.cepstra(g, wave);
        self.embed_features(g, &params, c)
    }
}

/// Waveform → embedding extractor with its feature front end.
#[derive(Clone)]
pub struct AsiModel {
    arch: Arc<dyn Architecture>,
    dims: ArchDims,
    params: ParamStore,
    features: FeaturePipeline,
    /// Per-coefficient feature standardisation learnt from training data.
    feat_shift: Tensor,
    feat_scale: Tensor,
    seed: u64,
}

impl std::fmt::Debug for AsiModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AsiModel")
            .field("architecture", &self.arch.id())
            .field("dims", &self.dims)
            .field("seed", &self.seed)
            .finish()
    }
}

impl AsiModel {
    pub(crate) fn from_parts(
        arch: Arc<dyn Architecture>,
        dims: ArchDims,
        params: ParamStore,
        features: FeaturePipeline,
        feat_shift: Tensor,
        feat_scale: Tensor,
        seed: u64,
    ) -> Self {
        Self {
            arch,
            dims,
            params,
            features,
            feat_shift,
            feat_scale,
            seed,
        }
    }

    pub fn architecture(&self) -> &str {
        self.arch.id()
    }

    pub fn dims(&self) -> ArchDims {
        self.dims
    }

    pub fn feature_config(&self) -> &MfccConfig {
        self.features.config()
    }

    pub fn features(&self) -> &FeaturePipeline {
        &self.features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Embedding of a precomputed cepstral matrix.
    pub fn embed_frames(&self, frames: &Tensor) -> Result<SpeakerEmbedding> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(frames.clone());
        let e = self.embed_features(&mut g, &p, x);
        SpeakerEmbedding::new(g.value(e).row(0).to_vec())
    }

    /// Network on standardised features already recorded on `g`.
    pub(crate) fn embed_features(&self, g: &mut Graph, params: &[Var], feats: Var) -> Var {
        let shift = g.constant(self.feat_shift.clone());
        let scale = g.constant(self.feat_scale.clone());
        let centred = g.add_row(feats, shift);
        let x = g.mul_row(centred, scale);
        self.arch.forward(g, params, x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = json!({
            "kind": "asi",
            "architecture": self.arch.id(),
            "dims": self.dims,
            "features": self.features.config(),
            "seed": self.seed,
            "params": self.params.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        });
        let mut tensors: Vec<(&str, &Tensor)> = vec![("feat_shift", &self.feat_shift), ("feat_scale", &self.feat_scale)];
        tensors.extend(self.params.iter());
        checkpoint::write(path, header, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AsiModel> {
        let l = checkpoint::read(path)?;
        if l.field::<String>("kind")? != "asi" {
            return Err(Error::Format("not an ASI checkpoint".into()));
        }
        let arch = architectures().get(&l.field::<String>("architecture")?)?;
        let dims: ArchDims = l.field("dims")?;
        let features = FeaturePipeline::new(&l.field::<MfccConfig>("features")?)?;
        let names: Vec<String> = l.field("params")?;
        let mut params = ParamStore::new();
        for n in &names {
            params.add(n.clone(), l.tensor(n)?.clone());
        }
        Ok(AsiModel {
            arch,
            dims,
            params,
            features,
            feat_shift: l.tensor("feat_shift")?.clone(),
            feat_scale: l.tensor("feat_scale")?.clone(),
            seed: l.field("seed")?,
        })
    }
}
