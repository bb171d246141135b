use std::sync::Arc;

use deid_autograd::{Graph, Var};

use super::embedding::{score, EnrollmentProfile};
use super::model::SpeakerModel;
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Per-member objective: `(member index, graph, embedding) -> scalar`.
pub type MemberObjective<'a> = dyn Fn(usize, &mut Graph, Var) -> Var + 'a;

/// Several substitute models used together. Losses and gradients are the
/// member means; identification is a majority vote, ties going to the
/// label with the larger summed score, then to the lower label.
#[derive(Clone)]
pub struct Ensemble {
    members: Vec<Arc<dyn SpeakerModel>>,
}

impl Ensemble {
    pub fn new(members: Vec<Arc<dyn SpeakerModel>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one model".into()));
        }
        Ok(Self { members })
    }

    pub fn single(model: Arc<dyn SpeakerModel>) -> Self {
        Self { members: vec![model] }
    }

    pub fn members(&self) -> &[Arc<dyn SpeakerModel>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn loss_and_gradient(&self, w: &[f64], objective: &MemberObjective) -> Result<(f64, Vec<f64>)> {
        let m = self.members.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        for (i, model) in self.members.iter().enumerate() {
            let (l, gr) = model.input_gradient(w, &|g: &mut Graph, e: Var| objective(i, g, e))?;
            loss += l / m;
            for (a, b) in grad.iter_mut().zip(gr) {
                *a += b / m;
            }
        }
        Ok((loss, grad))
    }

    /// `profiles[i]` are member `i`'s enrollment profiles; every member must
    /// cover the same labels.
    pub fn identify(&self, profiles: &[Vec<EnrollmentProfile>], w: &Waveform) -> Result<(usize, f64)> {
        if profiles.len() != self.members.len() {
            return Err(Error::Argument("one profile set per ensemble member".into()));
        }
        let labels: Vec<usize> = profiles[0].iter().map(|p| p.label).collect();
        if labels.is_empty() {
            return Err(Error::Config("no enrollment profiles".into()));
        }
        let mut votes = vec![0usize; labels.len()];
        let mut sums = vec![0.0; labels.len()];
        for (model, set) in self.members.iter().zip(profiles) {
            let e = model.extract_embedding(w)?;
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, &label) in labels.iter().enumerate() {
                let p = set
                    .iter()
                    .find(|p| p.label == label)
                    .ok_or_else(|| Error::Argument(format!("member lacks a profile for label {label}")))?;
                let s = score(&p.centroid, &e)?;
                sums[j] += s;
                if s > best.1 || (s == best.1 && label < labels[best.0]) {
                    best = (j, s);
                }
            }
            votes[best.0] += 1;
        }
        let mut win = 0;
        for j in 1..labels.len() {
            let better = votes[j] > votes[win]
                || (votes[j] == votes[win]
                    && (sums[j] > sums[win] || (sums[j] == sums[win] && labels[j] < labels[win])));
            if better {
                win = j;
            }
        }
        Ok((labels[win], sums[win] / self.members.len() as f64))
    }
}
