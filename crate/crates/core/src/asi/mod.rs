//! Speaker identification models: embedding extraction, cosine scoring,
//! enrollment, closed-set identification, input gradients and ensembles.

mod arch;
mod embedding;
mod ensemble;
pub mod export;
mod model;
mod train;

pub use arch::{architectures, ArchDims, Architecture, DVector, DeepSpeaker, Ecapa, XVector};
pub use embedding::{identify_embedding, score, EnrollmentProfile, ScoreMetric, SpeakerEmbedding};
pub use ensemble::{Ensemble, MemberObjective};
pub use model::{AsiModel, Objective, SpeakerModel};
pub use train::{random_room, train_asi, AsiTrainConfig, TrainReport};

use crate::corpus::Corpus;
use crate::error::Result;

/// One profile per label present in `corpus`, in label order.
pub fn enroll_corpus(model: &dyn SpeakerModel, corpus: &Corpus) -> Result<Vec<EnrollmentProfile>> {
    let mut out = Vec::new();
    for label in 0..corpus.num_speakers() {
        let utts: Vec<_> = corpus.of_label(label).map(|u| &u.wave).collect();
        if !utts.is_empty() {
            out.push(model.enroll(label, &utts)?);
        }
    }
    Ok(out)
}
