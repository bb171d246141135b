use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity vector produced by a speaker model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
    pub label: Option<usize>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding component".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate("zero embedding".into()));
        }
        Ok(Self { values, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> SpeakerEmbedding {
        let n = self.norm();
        Self {
            values: self.values.iter().map(|v| v / n).collect(),
            label: self.label,
        }
    }

    pub fn scaled(&self, c: f64) -> Result<SpeakerEmbedding> {
        Ok(Self::new(self.values.iter().map(|v| v * c).collect())?.with_label_opt(self.label))
    }

    fn with_label_opt(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }
}

/// Similarity used to compare embeddings. Distance is `1 − score`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    #[default]
    CosineSimilarity,
}

impl ScoreMetric {
    pub fn score(&self, a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
        match self {
            ScoreMetric::CosineSimilarity => cosine(a.values(), b.values()),
        }
    }

    pub fn distance(&self, a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
        Ok(1.0 - self.score(a, b)?)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity.
pub fn score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    ScoreMetric::CosineSimilarity.score(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentProfile {
    pub label: usize,
    /// Unit-norm mean of the unit-normalised enrollment embeddings.
    pub centroid: SpeakerEmbedding,
    pub utterance_count: usize,
}

impl EnrollmentProfile {
    pub fn from_embeddings(label: usize, embeddings: &[SpeakerEmbedding]) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::Argument("enrollment needs at least one utterance".into()))?;
        let mut sum = vec![0.0; first.dim()];
        for e in embeddings {
            if e.dim() != sum.len() {
                return Err(Error::Argument("enrollment embeddings differ in dimension".into()));
            }
            let n = e.norm();
            for (s, v) in sum.iter_mut().zip(e.values()) {
                *s += v / n;
            }
        }
        let centroid = SpeakerEmbedding::new(sum)?.normalized().with_label(label);
        Ok(Self {
            label,
            centroid,
            utterance_count: embeddings.len(),
        })
    }
}

/// Best-scoring profile; equal scores resolve to the lowest label.
pub fn identify_embedding(profiles: &[EnrollmentProfile], probe: &SpeakerEmbedding) -> Result<(usize, f64)> {
    if profiles.is_empty() {
        return Err(Error::Config("no enrollment profiles".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for p in profiles {
        let s = score(&p.centroid, probe)?;
        best = match best {
            Some((l, b)) if b > s || (b == s && l < p.label) => Some((l, b)),
            _ => Some((p.label, s)),
        };
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        let x = emb(&[1.0, 0.0]);
        assert_eq!(score(&x, &x).unwrap(), 1.0);
        assert_eq!(score(&x, &emb(&[-1.0, 0.0])).unwrap(), -1.0);
        let y = emb(&[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        assert!((score(&x, &y).unwrap() - 0.70710678).abs() < 1e-7);
        assert!(SpeakerEmbedding::new(vec![0.0, 0.0]).is_err());
        assert!(score(&x, &emb(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn identify_rules() {
        let p = |l, v: &[f64]| EnrollmentProfile::from_embeddings(l, &[emb(v)]).unwrap();
        let profiles = vec![p(1, &[1.0, 0.0]), p(2, &[0.0, 1.0])];
        let (l, s) = identify_embedding(&profiles, &emb(&[0.0, 3.0])).unwrap();
        assert_eq!((l, s), (2, 1.0));
        // Equidistant probe resolves to the lower label regardless of order.
        let mut rev = profiles.clone();
        rev.reverse();
        assert_eq!(identify_embedding(&rev, &emb(&[1.0, 1.0])).unwrap().0, 1);
        assert!(matches!(identify_embedding(&[], &emb(&[1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn centroid_is_unit_mean_of_normalised() {
        let p = EnrollmentProfile::from_embeddings(0, &[emb(&[2.0, 0.0]), emb(&[0.0, 5.0])]).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((p.centroid.values()[0] - h).abs() < 1e-12 && (p.centroid.values()[1] - h).abs() < 1e-12);
        assert_eq!(p.utterance_count, 2);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, 6).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn score_symmetric_bounded_and_self_max(a in vec_strategy(), b in vec_strategy()) {
            let (a, b) = (emb(&a), emb(&b));
            let s = score(&a, &b).unwrap();
            prop_assert_eq!(s, score(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn identify_invariant_to_positive_scaling(
            cents in prop::collection::vec(vec_strategy(), 2..6),
            probe in vec_strategy(),
            c in 0.01..100.0f64,
        ) {
            let profiles: Vec<_> = cents.iter().enumerate()
                .map(|(i, v)| EnrollmentProfile::from_embeddings(i, &[emb(v)]).unwrap())
                .collect();
            let p = emb(&probe);
            let a = identify_embedding(&profiles, &p).unwrap();
            let b = identify_embedding(&profiles, &p.scaled(c).unwrap()).unwrap();
            prop_assert_eq!(a.0, b.0);
        }
    }
}
