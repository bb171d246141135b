use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::asi::score;

/// `labels` well-separated clusters in `dim` dimensions.
fn clusters(labels: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Vec<SpeakerEmbedding>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..labels)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut out = Vec::new();
    for _ in 0..per {
        for (l, c) in centres.iter().enumerate() {
            let v: Vec<f64> = c.iter().map(|x| x + spread * rng.sample::<f64, _>(StandardNormal)).collect();
            out.push(SpeakerEmbedding::new(v).unwrap().with_label(100 + l));
        }
    }
    (out, centres)
}

fn nearest(centres: &[Vec<f64>], e: &SpeakerEmbedding) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, c) in centres.iter().enumerate() {
        let s = score(e, &SpeakerEmbedding::new(c.clone()).unwrap()).unwrap();
        if s > best.0 {
            best = (s, i);
        }
    }
    best.1
}

fn small_cfg() -> CvaeConfig {
    CvaeConfig {
        latent_dim: 8,
        base_channels: 4,
        epochs: 2,
        ..Default::default()
    }
}

fn untrained() -> CvaeModel {
    CvaeModel::new(32, vec![3, 5, 9], &small_cfg()).unwrap()
}

#[test]
fn reparameterization_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let lg = LatentGaussian::new(mu.clone(), sigma.clone()).unwrap();
        let z = lg.reparameterize(&eps).unwrap();
        for i in 0..n {
            assert_eq!(z[i], mu[i] + sigma[i] * eps[i]);
        }
        assert_eq!(lg.reparameterize(&vec![0.0; n]).unwrap(), mu);
    }
    assert!(LatentGaussian::new(vec![0.0], vec![0.0]).is_err());
    assert!(LatentGaussian::new(vec![0.0], vec![1.0]).unwrap().reparameterize(&[1.0, 2.0]).is_err());
}

#[test]
fn loss_examples() {
    let x = vec![0.3, -1.0, 2.0];
    let std = LatentGaussian::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
    assert_eq!(cvae_loss(&x, &x, &std, 2.0).unwrap(), 0.0);
    let shifted = LatentGaussian::new(vec![1.0, 0.0, 0.0, 0.0], vec![1.0; 4]).unwrap();
    assert!((cvae_loss(&x, &x, &shifted, 2.0).unwrap() - 1.0).abs() < 1e-15);
    assert!(cvae_loss(&x, &x[..2], &std, 2.0).is_err());
}

proptest! {
    #[test]
    fn kl_matches_closed_form_and_is_nonnegative(
        mu in proptest::collection::vec(-5.0f64..5.0, 1..16),
        log_sigma in proptest::collection::vec(-4.0f64..2.0, 16),
    ) {
        let sigma: Vec<f64> = log_sigma[..mu.len()].iter().map(|v| v.exp()).collect();
        let lg = LatentGaussian::new(mu.clone(), sigma.clone()).unwrap();
        let closed: f64 = mu.iter().zip(&sigma).map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln())).sum();
        prop_assert!((lg.kl() - closed).abs() < 1e-6);
        prop_assert!(lg.kl() >= 0.0);
    }
}

#[test]
fn kl_nonnegative_on_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let mu = vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let sigma = vec![rng.random_range(1e-3..5.0), rng.random_range(1e-3..5.0)];
        assert!(LatentGaussian::new(mu, sigma).unwrap().kl() >= 0.0);
    }
}

#[test]
fn labels_and_shapes() {
    assert!(IdentityLabel::new(3, 3).is_err());
    assert_eq!(IdentityLabel::new(1, 3).unwrap().one_hot(), vec![0.0, 1.0, 0.0]);
    assert!(matches!(CvaeModel::new(30, vec![0, 1], &small_cfg()), Err(Error::Config(_))));
    assert!(CvaeModel::new(32, vec![0], &small_cfg()).is_err());
    let m = untrained();
    assert_eq!(m.identity(5).unwrap().index(), 1);
    assert!(m.identity(4).is_err());
    for l in [3, 5, 9] {
        let y = m.identity(l).unwrap();
        let out = m.decoder().decode(&m.decoder().latent(7), &y.one_hot()).unwrap();
        assert_eq!(out.dim(), 32);
    }
    assert!(m.ensure_disjoint(&[0, 1, 2]).is_ok());
    assert!(matches!(m.ensure_disjoint(&[9]), Err(Error::Data(_))));
}

#[test]
fn forward_is_deterministic_and_zero_noise_uses_the_mean() {
    let m = untrained();
    let x = SpeakerEmbedding::new((0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let y = m.identity(3).unwrap();
    let eps: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let a = m.forward(&x, &y, &eps).unwrap();
    let b = m.forward(&x, &y, &eps).unwrap();
    assert_eq!(a, b);
    let zero = m.forward(&x, &y, &[0.0; 8]).unwrap();
    let via_mean = m.decoder().decode(&zero.latent.mu, &y.one_hot()).unwrap();
    assert_eq!(zero.reconstruction, via_mean);
    assert_eq!(m.reconstruct(&x, &y).unwrap(), via_mean);
    assert!(a.latent.sigma.iter().all(|s| *s > 0.0));
}

#[test]
fn untrained_model_cannot_generate() {
    let m = untrained();
    let y = m.identity(3).unwrap();
    assert!(matches!(m.sample_target(&y, 1), Err(Error::State(_))));
    assert!(matches!(m.interpolate_targets(&y, &y, 0.5, 1), Err(Error::State(_))));
}

#[test]
fn training_input_errors() {
    let cfg = small_cfg();
    assert!(matches!(train_cvae(&[], &cfg), Err(Error::Data(_))));
    let a = SpeakerEmbedding::new(vec![1.0; 32]).unwrap().with_label(0);
    let b = SpeakerEmbedding::new(vec![1.0; 16]).unwrap().with_label(1);
    assert!(matches!(train_cvae(&[a.clone(), b], &cfg), Err(Error::Data(_))));
    let unlabeled = SpeakerEmbedding::new(vec![1.0; 32]).unwrap();
    assert!(matches!(train_cvae(&[a.clone(), unlabeled], &cfg), Err(Error::Data(_))));
    assert!(matches!(train_cvae(&[a.clone(), a], &cfg), Err(Error::Data(_))));
}

#[test]
fn generation_modes_on_clustered_embeddings() {
    let (data, centres) = clusters(6, 100, 64, 0.3, 3);
    let (held, _) = {
        // Fresh draws around the same centres.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<SpeakerEmbedding> = (0..60)
            .map(|i| {
                let l = i % 6;
                let x: Vec<f64> = centres[l].iter().map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                SpeakerEmbedding::new(x).unwrap().with_label(100 + l)
            })
            .collect();
        (v, ())
    };
    let cfg = CvaeConfig { latent_dim: 16, epochs: 30, ..Default::default() };
    let (m, hist) = train_cvae(&data, &cfg).unwrap();
    assert_eq!(hist.len(), 30);
    assert!(hist[29].loss < hist[0].loss, "{hist:?}");

    let cos: f64 = held
        .iter()
        .map(|e| score(e, &m.reconstruct(e, &m.identity(e.label.unwrap()).unwrap()).unwrap()).unwrap())
        .sum::<f64>()
        / held.len() as f64;
    assert!(cos >= 0.9, "mean reconstruction cosine {cos}");

    let y = m.identity(102).unwrap();
    let s1 = m.sample_target(&y, 11).unwrap();
    assert_eq!(s1, m.sample_target(&y, 11).unwrap());
    assert!(s1.values().iter().zip(m.sample_target(&y, 12).unwrap().values()).any(|(a, b)| a != b));
    let hits = (0..100).filter(|s| nearest(&centres, &m.sample_target(&y, *s).unwrap()) == 2).count();
    assert!(hits >= 80, "{hits}/100 samples near their label");

    let y2 = m.identity(104).unwrap();
    assert_eq!(m.interpolate_targets(&y, &y2, 0.0, 5).unwrap(), m.sample_target(&y, 5).unwrap());
    assert_eq!(m.interpolate_targets(&y, &y2, 1.0, 5).unwrap(), m.sample_target(&y2, 6).unwrap());
    assert!(matches!(m.interpolate_targets(&y, &y2, 1.5, 5), Err(Error::Argument(_))));
    let near = |t: f64| {
        (0..50)
            .filter(|s| {
                let n = nearest(&centres, &m.interpolate_targets(&y, &y2, t, *s).unwrap());
                n == 2 || n == 4
            })
            .count()
    };
    let (mid, ends) = (near(0.5), (near(0.0) + near(1.0)) / 2);
    // Midpoints may still fall near an endpoint, but not more often than the
    // endpoints themselves.
    assert!(mid <= ends, "midpoint {mid} vs endpoints {ends}");
}

#[test]
fn beta_trades_reconstruction_for_kl() {
    let (data, _) = clusters(4, 30, 32, 0.4, 5);
    let run = |beta: f64| {
        let cfg = CvaeConfig { latent_dim: 8, base_channels: 4, epochs: 15, beta, ..Default::default() };
        *train_cvae(&data, &cfg).unwrap().1.last().unwrap()
    };
    let (free, tied) = (run(0.0), run(2.0));
    assert!(free.reconstruction < tied.reconstruction, "{free:?} vs {tied:?}");
    assert!(free.kl > tied.kl, "{free:?} vs {tied:?}");
}

#[test]
fn decoder_checkpoint_reproduces_samples() {
    let (data, _) = clusters(3, 10, 32, 0.3, 6);
    let (m, _) = train_cvae(&data, &small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dec_path = dir.path().join("decoder.ckpt");
    let full_path = dir.path().join("cvae.ckpt");
    m.decoder().save(&dec_path).unwrap();
    m.save(&full_path).unwrap();
    let dec = CvaeDecoder::load(&dec_path).unwrap();
    let y = m.identity(101).unwrap();
    for s in 0..5 {
        assert_eq!(dec.sample_target(&y, s).unwrap(), m.sample_target(&y, s).unwrap());
    }
    assert_eq!(dec.labels(), m.decoder().labels());
    let full = CvaeModel::load(&full_path).unwrap();
    let x = &data[0];
    assert_eq!(full.reconstruct(x, &y).unwrap(), m.reconstruct(x, &y).unwrap());
    assert_eq!(CvaeDecoder::load(&full_path).unwrap().sample_target(&y, 3).unwrap(), m.sample_target(&y, 3).unwrap());
    assert!(matches!(CvaeModel::load(&dec_path), Err(Error::Format(_))));
}

#[test]
fn reconstruction_term_forms_both_train() {
    let (data, _) = clusters(4, 60, 32, 0.3, 7);
    let mut out = Vec::new();
    for form in [Reconstruction::Squared, Reconstruction::Norm] {
        let cfg = CvaeConfig { latent_dim: 8, base_channels: 4, reconstruction: form, ..Default::default() };
        let (m, hist) = train_cvae(&data, &cfg).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
        let cos: f64 = data
            .iter()
            .take(40)
            .map(|e| score(e, &m.reconstruct(e, &m.identity(e.label.unwrap()).unwrap()).unwrap()).unwrap())
            .sum::<f64>()
            / 40.0;
        out.push(cos);
    }
    assert!(out.iter().all(|c| *c > 0.8), "{out:?}");
}
