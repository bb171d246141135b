use serde::{Deserialize, Serialize};

use crate::adversary::SignalAttackKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// CVAE reconstruction of a real utterance of the chosen target.
    Reconstruction,
    /// Prior sample conditioned on the chosen target.
    #[default]
    Sampling,
    /// Latent interpolation between two target identities.
    Interpolation,
}

/// What to de-identify, with which models, and which adversaries to run.
///
/// Speakers `0..users` are the protected users; every other speaker is a
/// target identity. Utterance ranges index each speaker's utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub users: usize,
    pub enroll: [usize; 2],
    /// Target-speaker utterances the CVAEs are trained on.
    pub cvae: [usize; 2],
    pub probes: [usize; 2],
    /// Restrict probes to these users; all users when empty.
    pub probe_labels: Vec<usize>,
    /// Identification models; each is evaluated on every crafted output.
    pub models: Vec<String>,
    /// Crafting sets. Empty: one white-box set per entry of `models`.
    pub substitutes: Vec<Vec<String>>,
    /// `conv` or an additive method id.
    pub method: String,
    pub target_mode: TargetMode,
    pub interpolation_t: f64,
    pub signal_attacks: Vec<SignalAttackKind>,
    pub reidentification: bool,
    /// De-identified enrollment utterances per user for re-identification.
    pub reid_enroll_per_user: usize,
    pub td: bool,
    /// Record scores against every enrolled profile.
    pub score_distribution: bool,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            users: 10,
            enroll: [0, 10],
            cvae: [10, 30],
            probes: [30, 40],
            probe_labels: vec![],
            models: vec!["xvector".into()],
            substitutes: vec![],
            method: "conv".into(),
            target_mode: TargetMode::Sampling,
            interpolation_t: 0.5,
            signal_attacks: vec![],
            reidentification: false,
            reid_enroll_per_user: 5,
            td: false,
            score_distribution: true,
            seed: 0,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("enroll", self.enroll), ("cvae", self.cvae), ("probes", self.probes)] {
            if r[0] >= r[1] {
                return Err(Error::Config(format!("utterance range {name} = {r:?} is empty")));
            }
        }
        if self.users == 0 {
            return Err(Error::Config("at least one user is required".into()));
        }
        if let Some(l) = self.probe_labels.iter().find(|l| **l >= self.users) {
            return Err(Error::Config(format!("probe label {l} is not a user (users are 0..{})", self.users)));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no identification models".into()));
        }
        if self.substitutes.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("empty substitute set".into()));
        }
        if self.method != "conv" {
            crate::additive::methods().get(&self.method)?;
            if self.crafting_sets().iter().any(|s| s.len() != 1) {
                return Err(Error::Config(format!("additive method `{}` crafts against one model", self.method)));
            }
        }
        if !(0.0..=1.0).contains(&self.interpolation_t) {
            return Err(Error::Config(format!("interpolation_t {} outside [0, 1]", self.interpolation_t)));
        }
        if self.reidentification && self.reid_enroll_per_user == 0 {
            return Err(Error::Config("reid_enroll_per_user must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn crafting_sets(&self) -> Vec<Vec<String>> {
        if self.substitutes.is_empty() {
            self.models.iter().map(|m| vec![m.clone()]).collect()
        } else {
            self.substitutes.clone()
        }
    }

    /// Every model id the run needs, sorted and deduplicated.
    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.models.iter().chain(self.crafting_sets().iter().flatten()).cloned().collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn is_user(&self, label: usize) -> bool {
        label < self.users
    }

    pub fn probe_users(&self) -> Vec<usize> {
        if self.probe_labels.is_empty() {
            (0..self.users).collect()
        } else {
            self.probe_labels.clone()
        }
    }
}
