use deid_autograd::{xavier_uniform, Adam, Graph, ParamStore, Tensor};
use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{architectures, ArchDims};
use super::embedding::identify_embedding;
use super::model::{AsiModel, SpeakerModel};
use crate::audio::{fft_convolve, synth_rir, FeaturePipeline, ImpulseResponse, MfccConfig, RoomConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Speaker classification training with a cosine additive-margin head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsiTrainConfig {
    pub architecture: String,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam step; decays linearly to a tenth over training.
    pub learning_rate: f64,
    pub margin: f64,
    pub scale: f64,
    /// Random training crop length in frames.
    pub crop_frames: usize,
    /// Reverberant copies per utterance, each through a random room.
    pub reverb_copies: usize,
    /// Utterances per speaker kept out of training for the accuracy report.
    pub holdout_per_speaker: usize,
    pub seed: u64,
    pub features: MfccConfig,
}

impl Default for AsiTrainConfig {
    fn default() -> Self {
        Self {
            architecture: "xvector".into(),
            embedding_dim: 128,
            hidden: 64,
            epochs: 16,
            batch_size: 32,
            learning_rate: 3e-3,
            margin: 0.2,
            scale: 30.0,
            crop_frames: 60,
            reverb_copies: 1,
            holdout_per_speaker: 5,
            seed: 1,
            features: MfccConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Closed-set accuracy over all training speakers on held-out
    /// utterances, enrolled from each speaker's training utterances.
    pub heldout_accuracy: f64,
    pub heldout_count: usize,
}

/// Random shoebox room used for reverberation augmentation.
pub fn random_room(rng: &mut impl Rng) -> RoomConfig {
    let dims = [rng.random_range(3.0..8.0), rng.random_range(3.0..7.0), rng.random_range(2.4..3.6)];
    let mut pos = || -> [f64; 3] { std::array::from_fn(|i| rng.random_range(0.4..dims[i] - 0.4)) };
    let source = pos();
    let mic = pos();
    RoomConfig {
        dimensions: dims,
        source,
        mic,
        absorption: [rng.random_range(0.25..0.85); 6],
        max_order: 8,
        length: 3200,
    }
}

pub fn train_asi(corpus: &Corpus, cfg: &AsiTrainConfig) -> Result<(AsiModel, TrainReport)> {
    let counts = corpus.counts();
    let active = counts.iter().filter(|c| **c > 0).count();
    if active < 2 || counts.iter().any(|c| *c > 0 && *c < 10) {
        return Err(Error::Data(format!(
            "training needs at least 2 speakers with 10 or more utterances each (got counts {counts:?})"
        )));
    }
    if cfg.holdout_per_speaker >= 10 || cfg.batch_size == 0 || cfg.epochs == 0 || cfg.crop_frames == 0 {
        return Err(Error::Config("invalid ASI training configuration".into()));
    }
    let arch = architectures().get(&cfg.architecture)?;
    let features = FeaturePipeline::new(&cfg.features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rooms: Vec<ImpulseResponse> = (0..24)
        .map(|_| synth_rir(&random_room(&mut rng)).map(|r| r.with_norm(1.0).expect("positive energy")))
        .collect::<Result<_>>()?;

    // Per-speaker split: the last utterances are held out.
    let mut seen = vec![0usize; counts.len()];
    let mut train_items: Vec<(usize, Tensor)> = Vec::new();
    let mut heldout = Vec::new();
    let mut enroll_feats: Vec<Vec<Tensor>> = vec![Vec::new(); counts.len()];
    for u in &corpus.utterances {
        seen[u.label] += 1;
        if seen[u.label] > counts[u.label] - cfg.holdout_per_speaker {
            heldout.push(u);
            continue;
        }
        let clean = features.compute(&u.wave)?.frames;
        enroll_feats[u.label].push(clean.clone());
        train_items.push((u.label, clean));
        for _ in 0..cfg.reverb_copies {
            let room = &rooms[rng.random_range(0..rooms.len())];
            train_items.push((u.label, features.compute(&fft_convolve(&u.wave, room))?.frames));
        }
    }

    let all = ndarray::concatenate(Axis(0), &train_items.iter().map(|(_, f)| f.view()).collect::<Vec<_>>())
        .expect("feature widths agree");
    let mean = all.mean_axis(Axis(0)).unwrap();
    let std = all.std_axis(Axis(0), 0.0).mapv(|s| 1.0 / s.max(1e-6));
    let shift = (-&mean).insert_axis(Axis(0));
    let scale = std.insert_axis(Axis(0));

    let dims = ArchDims {
        input_dim: cfg.features.num_coeffs,
        hidden: cfg.hidden,
        embedding_dim: cfg.embedding_dim,
    };
    let params = arch.init(&dims, &mut rng);
    let mut model = AsiModel::from_parts(arch, dims, params, features, shift, scale, cfg.seed);
    let k = counts.len();
    let mut head = ParamStore::new();
    head.add("head", xavier_uniform(&mut rng, k, cfg.embedding_dim, cfg.embedding_dim, k));
    let mut opt = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut head_opt = Adam::new(cfg.learning_rate, 0.9, 0.999);

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batches_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.learning_rate * (1.0 - 0.9 * step as f64 / total_steps);
            opt.lr = lr;
            head_opt.lr = lr;
            step += 1;
            let mut g = Graph::new();
            let pv = model.params().bind(&mut g, true);
            let hv = head.bind(&mut g, true)[0];
            let mut embs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (label, f) = &train_items[i];
                let t = f.nrows();
                let crop = if t > cfg.crop_frames {
                    let start = rng.random_range(0..=t - cfg.crop_frames);
                    f.slice(s![start..start + cfg.crop_frames, ..]).to_owned()
                } else {
                    f.clone()
                };
                let x = g.constant(crop);
                embs.push(model.embed_features(&mut g, &pv, x));
                labels.push(*label);
            }
            let e = g.concat_rows(&embs);
            let en = g.row_normalize(e, 1e-12);
            let hn = g.row_normalize(hv, 1e-12);
            let ht = g.transpose(hn);
            let logits = g.matmul(en, ht);
            let loss = g.am_softmax_ce(logits, &labels, cfg.scale, cfg.margin);
            sum += g.scalar(loss) * batch.len() as f64;
            let mut grads = g.backward(loss);
            let pg: Vec<Option<Tensor>> = pv.iter().map(|v| grads.take(*v)).collect();
            let hg = vec![grads.take(hv)];
            opt.step(model.params_mut().tensors_mut(), &pg);
            head_opt.step(head.tensors_mut(), &hg);
        }
        let mean_loss = sum / order.len() as f64;
        tracing::debug!(arch = model.architecture(), loss = mean_loss, "epoch");
        epoch_losses.push(mean_loss);
    }

    let mut profiles = Vec::new();
    for (label, feats) in enroll_feats.iter().enumerate() {
        if feats.is_empty() {
            continue;
        }
        let embs = feats
            .iter()
            .take(10)
            .map(|f| model.embed_frames(f))
            .collect::<Result<Vec<_>>>()?;
        profiles.push(super::EnrollmentProfile::from_embeddings(label, &embs)?);
    }
    let mut correct = 0;
    for u in &heldout {
        let (l, _) = identify_embedding(&profiles, &model.extract_embedding(&u.wave)?)?;
        correct += (l == u.label) as usize;
    }
    let heldout_accuracy = if heldout.is_empty() { f64::NAN } else { correct as f64 / heldout.len() as f64 };
    Ok((
        model,
        TrainReport {
            epoch_losses,
            heldout_accuracy,
            heldout_count: heldout.len(),
        },
    ))
}
