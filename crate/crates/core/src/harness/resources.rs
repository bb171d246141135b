use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::asi::{AsiModel, SpeakerEmbedding, SpeakerModel};
use crate::config::GlobalConfig;
use crate::corpus::{synth_utterance, Corpus, SynthConfig, Utterance};
use crate::cvae::{train_cvae, CvaeModel};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::transcribe::Transcriber;

use super::ExperimentConfig;

/// Where utterances come from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    /// Generated on demand; utterance `i` of every speaker exists for any `i`.
    Synth(SynthConfig),
    Loaded(Arc<Corpus>),
}

impl CorpusSource {
    pub fn from_config(cfg: &GlobalConfig) -> Result<Self> {
        Ok(match &cfg.audio.corpus_dir {
            Some(d) => CorpusSource::Loaded(Arc::new(Corpus::load_dir(d)?)),
            None => CorpusSource::Synth(cfg.audio.synth.clone()),
        })
    }

    pub fn num_speakers(&self) -> usize {
        match self {
            CorpusSource::Synth(c) => c.speakers,
            CorpusSource::Loaded(c) => c.num_speakers(),
        }
    }

    pub fn speaker_names(&self) -> Vec<String> {
        match self {
            CorpusSource::Synth(c) => (0..c.speakers).map(|s| format!("spk{s:03}")).collect(),
            CorpusSource::Loaded(c) => c.speakers.clone(),
        }
    }

    /// Utterances `range` of each of `labels`, grouped by label. A loaded
    /// corpus contributes what it has in the range; a label with nothing in
    /// range is a data error.
    pub fn select(&self, labels: &[usize], range: [usize; 2]) -> Result<Corpus> {
        let mut out = Corpus {
            utterances: vec![],
            speakers: self.speaker_names(),
        };
        for &l in labels {
            if l >= self.num_speakers() {
                return Err(Error::Data(format!("speaker {l} does not exist ({} speakers)", self.num_speakers())));
            }
            let before = out.utterances.len();
            match self {
                CorpusSource::Synth(c) => out.utterances.extend((range[0]..range[1]).map(|i| synth_utterance(c, l, i))),
                CorpusSource::Loaded(c) => out
                    .utterances
                    .extend(c.of_label(l).skip(range[0]).take(range[1] - range[0]).cloned()),
            }
            if out.utterances.len() == before {
                return Err(Error::Data(format!(
                    "speaker {} has no utterances in range {range:?}",
                    out.speakers[l]
                )));
            }
        }
        Ok(out)
    }
}

/// Everything a run uses: the corpus, named models, per-model CVAEs for
/// target generation, and the optional transcriber.
#[derive(Clone)]
pub struct Resources {
    pub corpus: CorpusSource,
    models: Registry<dyn SpeakerModel>,
    cvaes: BTreeMap<String, Arc<CvaeModel>>,
    pub transcriber: Option<Arc<dyn Transcriber>>,
}

impl Resources {
    pub fn new(corpus: CorpusSource) -> Self {
        Self {
            corpus,
            models: Registry::new("speaker model"),
            cvaes: BTreeMap::new(),
            transcriber: None,
        }
    }

    pub fn add_model(&mut self, id: &str, model: Arc<dyn SpeakerModel>) {
        self.models.register(id, model);
    }

    pub fn add_cvae(&mut self, id: &str, cvae: Arc<CvaeModel>) {
        self.cvaes.insert(id.to_string(), cvae);
    }

    pub fn model(&self, id: &str) -> Result<Arc<dyn SpeakerModel>> {
        self.models.get(id)
    }

    pub fn cvae(&self, id: &str) -> Result<Arc<CvaeModel>> {
        self.cvaes
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no CVAE for model `{id}`")))
    }

    /// Loads `<dir>/<id>.ckpt` for every id not yet present.
    pub fn load_models(&mut self, dir: &Path, ids: &[String]) -> Result<()> {
        for id in ids {
            if self.models.get(id).is_ok() {
                continue;
            }
            let p = dir.join(format!("{id}.ckpt"));
            if !p.exists() {
                return Err(Error::Config(format!("model `{id}`: checkpoint {} does not exist", p.display())));
            }
            self.add_model(id, Arc::new(AsiModel::load(&p)?));
        }
        Ok(())
    }

    /// Provides a CVAE for every crafting model: loaded from
    /// `<dir>/<id>.cvae` when present, else trained and, with a `dir`,
    /// saved there.
    pub fn prepare_cvaes(&mut self, cfg: &GlobalConfig, dir: Option<&Path>) -> Result<()> {
        let exp = &cfg.harness;
        let ids: Vec<String> = {
            let mut v: Vec<String> = exp.crafting_sets().into_iter().flatten().collect();
            v.sort();
            v.dedup();
            v
        };
        for id in ids {
            if self.cvaes.contains_key(&id) {
                continue;
            }
            let path = dir.map(|d| d.join(format!("{id}.cvae")));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                self.add_cvae(&id, Arc::new(CvaeModel::load(p)?));
                continue;
            }
            let model = self.model(&id)?;
            let data = cvae_training_set(model.as_ref(), &self.corpus, exp)?;
            let (cvae, _) = train_cvae(&data, &cfg.cvae)?;
            if let Some(p) = &path {
                cvae.save(p)?;
            }
            self.add_cvae(&id, Arc::new(cvae));
        }
        Ok(())
    }
}

/// Target-speaker labels: every speaker that is not a user.
pub fn target_labels(corpus: &CorpusSource, exp: &ExperimentConfig) -> Vec<usize> {
    (0..corpus.num_speakers()).filter(|l| !exp.is_user(*l)).collect()
}

/// Target-speaker utterances of the CVAE range.
pub fn cvae_corpus(corpus: &CorpusSource, exp: &ExperimentConfig) -> Result<Vec<Utterance>> {
    let labels = target_labels(corpus, exp);
    if labels.len() < 2 {
        return Err(Error::Config(format!(
            "{} speakers leave {} target identities; at least 2 are needed",
            corpus.num_speakers(),
            labels.len()
        )));
    }
    Ok(corpus.select(&labels, exp.cvae)?.utterances)
}

/// Labelled embeddings of the CVAE range under `model`.
pub fn cvae_training_set(model: &dyn SpeakerModel, corpus: &CorpusSource, exp: &ExperimentConfig) -> Result<Vec<SpeakerEmbedding>> {
    cvae_corpus(corpus, exp)?
        .iter()
        .map(|u| Ok(model.extract_embedding(&u.wave)?.with_label(u.label)))
        .collect()
}
