//! Conditional β-VAE over speaker embeddings. It generates target
//! embeddings by reconstruction, by sampling the prior under a label, and by
//! walking between two labelled latents.
//!
//! Embeddings are rescaled to norm `sqrt(D)` before encoding (so components
//! are of unit size) and treated as a one-channel signal of length `D` by
//! the convolutional blocks. Rows are channel-major: `row[c * len + t]`.

use std::path::Path;

use deid_autograd::{he_uniform, xavier_uniform, Adam, ConvGeom, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::asi::SpeakerEmbedding;
use crate::checkpoint;
use crate::error::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    /// Channels of the first down-sample block; each further block doubles.
    pub base_channels: usize,
    pub blocks: usize,
    pub beta: f64,
    pub reconstruction: Reconstruction,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the current batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            base_channels: 8,
            blocks: 3,
            beta: 2.0,
            reconstruction: Reconstruction::Squared,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 2,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 || self.blocks == 0 {
            return Err(Error::Config("latent_dim, base_channels and blocks must be ≥ 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("beta must be ≥ 0 and learning_rate > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-example reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// `‖x − x'‖²`
    Squared,
    /// `‖x − x'‖`
    Norm,
}

/// Fixed sizes of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeDims {
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub num_labels: usize,
    pub base_channels: usize,
    pub blocks: usize,
}

impl CvaeDims {
    fn check(&self) -> Result<()> {
        let f = 1usize << self.blocks;
        if self.embedding_dim < f || self.embedding_dim % f != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} must be a positive multiple of 2^blocks = {f}",
                self.embedding_dim
            )));
        }
        if self.num_labels < 2 || self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("a CVAE needs ≥ 2 labels and non-empty layers".into()));
        }
        Ok(())
    }

    /// Channels after encoder block `i`.
    fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    fn bottleneck(&self) -> (usize, usize) {
        (self.channels(self.blocks - 1), self.embedding_dim >> self.blocks)
    }
}

/// One-hot identity condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityLabel {
    index: usize,
    num_labels: usize,
}

impl IdentityLabel {
    pub fn new(index: usize, num_labels: usize) -> Result<Self> {
        if index >= num_labels {
            return Err(Error::Argument(format!("label index {index} outside 0..{num_labels}")));
        }
        Ok(Self { index, num_labels })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_labels];
        v[self.index] = 1.0;
        v
    }
}

/// Diagonal Gaussian `N(μ, σ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Argument("μ and σ differ in length".into()));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Numerical("latent parameters must be finite with σ > 0".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.mu.len() {
            return Err(Error::Argument(format!("noise has {} components, latent has {}", eps.len(), self.mu.len())));
        }
        Ok(self.mu.iter().zip(&self.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }

    /// `KL(N(μ, σ²I) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
    pub fn kl(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
            .sum::<f64>()
    }
}

/// Squared reconstruction error plus `β · KL`.
pub fn cvae_loss(x: &[f64], recon: &[f64], latent: &LatentGaussian, beta: f64) -> Result<f64> {
    if x.len() != recon.len() {
        return Err(Error::Argument("input and reconstruction differ in length".into()));
    }
    let rec: f64 = x.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(rec + beta * latent.kl())
}

/// `√D · e / ‖e‖`, the scale the network works in.
fn network_scale(e: &SpeakerEmbedding) -> Vec<f64> {
    let s = (e.dim() as f64).sqrt() / e.norm();
    e.values().iter().map(|v| v * s).collect()
}

enum BnMode<'a> {
    Train(&'a mut Vec<Var>),
    Eval(&'a [Tensor]),
}

struct Cursor<'a> {
    params: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.params[self.at];
        self.at += 1;
        v
    }

    fn dense(&mut self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (self.next(), self.next());
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Batch norm (batch statistics or running ones) and LeakyReLU.
    fn norm_act(&mut self, g: &mut Graph, x: Var, channels: usize, len: usize, mode: &mut BnMode, layer: usize) -> Var {
        let (gamma, beta) = (self.next(), self.next());
        let h = match mode {
            BnMode::Train(nodes) => {
                let h = g.batch_norm(x, gamma, beta, channels, len, BN_EPS);
                nodes.push(h);
                h
            }
            BnMode::Eval(running) => {
                let stats = &running[layer];
                let (gv, bv) = (g.value(gamma).clone(), g.value(beta).clone());
                let scale = Tensor::from_shape_fn((1, channels), |(_, c)| gv[[0, c]] / (stats[[1, c]] + BN_EPS).sqrt());
                let shift = Tensor::from_shape_fn((1, channels), |(_, c)| bv[[0, c]] - stats[[0, c]] * scale[[0, c]]);
                let (sc, sh) = (g.constant(scale), g.constant(shift));
                g.channel_affine(x, sc, sh, channels, len)
            }
        };
        g.leaky_relu(h, LEAKY_SLOPE)
    }
}

fn conv_geom(cin: usize, cout: usize, len: usize) -> ConvGeom {
    ConvGeom {
        in_channels: cin,
        out_channels: cout,
        in_len: len,
        kernel: KERNEL,
        stride: 2,
        pad: 1,
    }
}

fn init_encoder(d: &CvaeDims, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for i in 0..d.blocks {
        let cin = if i == 0 { 1 } else { d.channels(i - 1) };
        let cout = d.channels(i);
        s.add(format!("enc{i}.w"), he_uniform(rng, cout, cin * KERNEL, cin * KERNEL));
        s.add(format!("enc{i}.b"), Tensor::zeros((1, cout)));
        s.add(format!("enc{i}.gamma"), Tensor::ones((1, cout)));
        s.add(format!("enc{i}.beta"), Tensor::zeros((1, cout)));
    }
    let (c, l) = d.bottleneck();
    let fan = c * l + d.num_labels;
    s.add("mu.w", xavier_uniform(rng, fan, d.latent_dim, fan, d.latent_dim));
    s.add("mu.b", Tensor::zeros((1, d.latent_dim)));
    s.add("logvar.w", xavier_uniform(rng, fan, d.latent_dim, fan, d.latent_dim) * 0.1);
    s.add("logvar.b", Tensor::zeros((1, d.latent_dim)));
    s
}

fn init_decoder(d: &CvaeDims, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let (c, l) = d.bottleneck();
    let fan = d.latent_dim + d.num_labels;
    s.add("reform.w", he_uniform(rng, fan, c * l, fan));
    s.add("reform.b", Tensor::zeros((1, c * l)));
    for i in 0..d.blocks {
        let (cin, cout) = decoder_channels(d, i);
        s.add(format!("dec{i}.w"), he_uniform(rng, cin, cout * KERNEL, cin * KERNEL / 2));
        s.add(format!("dec{i}.b"), Tensor::zeros((1, cout)));
        s.add(format!("dec{i}.gamma"), Tensor::ones((1, cout)));
        s.add(format!("dec{i}.beta"), Tensor::zeros((1, cout)));
    }
    let b = d.base_channels;
    s.add("out.w", xavier_uniform(rng, 1, b, b, 1));
    s.add("out.b", Tensor::zeros((1, 1)));
    s
}

/// Input and output channels of decoder block `i` (mirrors the encoder,
/// ending at the base width).
fn decoder_channels(d: &CvaeDims, i: usize) -> (usize, usize) {
    let cin = d.channels(d.blocks - 1 - i);
    let cout = if i + 1 == d.blocks { d.base_channels } else { d.channels(d.blocks - 2 - i) };
    (cin, cout)
}

fn initial_running(d: &CvaeDims, decoder: bool) -> Vec<Tensor> {
    (0..d.blocks)
        .map(|i| {
            let c = if decoder { decoder_channels(d, i).1 } else { d.channels(i) };
            let mut t = Tensor::zeros((2, c));
            t.row_mut(1).fill(1.0);
            t
        })
        .collect()
}

fn encoder_forward(g: &mut Graph, p: &[Var], d: &CvaeDims, x: Var, y: Var, mut mode: BnMode) -> (Var, Var) {
    let mut c = Cursor { params: p, at: 0 };
    let mut h = x;
    let mut len = d.embedding_dim;
    for i in 0..d.blocks {
        let cin = if i == 0 { 1 } else { d.channels(i - 1) };
        let geom = conv_geom(cin, d.channels(i), len);
        let (w, b) = (c.next(), c.next());
        h = g.conv1d(h, w, b, geom);
        len = geom.conv_out_len();
        h = c.norm_act(g, h, d.channels(i), len, &mut mode, i);
    }
    let hy = g.concat_cols(&[h, y]);
    let mu = c.dense(g, hy);
    let lv = c.dense(g, hy);
    (mu, lv)
}

fn decoder_forward(g: &mut Graph, p: &[Var], d: &CvaeDims, z: Var, y: Var, mut mode: BnMode) -> Var {
    let mut c = Cursor { params: p, at: 0 };
    let zy = g.concat_cols(&[z, y]);
    let h = c.dense(g, zy);
    let mut h = g.leaky_relu(h, LEAKY_SLOPE);
    let (_, mut len) = d.bottleneck();
    for i in 0..d.blocks {
        let (cin, cout) = decoder_channels(d, i);
        let geom = conv_geom(cin, cout, len);
        let (w, b) = (c.next(), c.next());
        h = g.conv_transpose1d(h, w, b, geom);
        len = geom.deconv_out_len();
        h = c.norm_act(g, h, cout, len, &mut mode, i);
    }
    let geom = ConvGeom {
        in_channels: d.base_channels,
        out_channels: 1,
        in_len: len,
        kernel: 1,
        stride: 1,
        pad: 0,
    };
    let (w, b) = (c.next(), c.next());
    g.conv1d(h, w, b, geom)
}

/// The generative half; all that is needed to produce targets.
#[derive(Debug, Clone)]
pub struct CvaeDecoder {
    dims: CvaeDims,
    labels: Vec<usize>,
    params: ParamStore,
    running: Vec<Tensor>,
    trained: bool,
}

impl CvaeDecoder {
    pub fn dims(&self) -> &CvaeDims {
        &self.dims
    }

    /// Speaker label of each condition index.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn identity(&self, label: usize) -> Result<IdentityLabel> {
        let i = self
            .labels
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| Error::Argument(format!("label {label} is not a CVAE condition")))?;
        IdentityLabel::new(i, self.labels.len())
    }

    fn check_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State("the CVAE has not been trained".into()));
        }
        Ok(())
    }

    /// Decoder output for latent `z` and a (possibly mixed) condition vector.
    pub fn decode(&self, z: &[f64], condition: &[f64]) -> Result<SpeakerEmbedding> {
        if z.len() != self.dims.latent_dim || condition.len() != self.dims.num_labels {
            return Err(Error::Argument("latent or condition width does not match the decoder".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.row(z, false);
        let yv = g.row(condition, false);
        let out = decoder_forward(&mut g, &p, &self.dims, zv, yv, BnMode::Eval(&self.running));
        SpeakerEmbedding::new(g.value(out).row(0).to_vec())
    }

    /// Standard-normal latent drawn from `seed`.
    pub fn latent(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dims.latent_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// `decoder(z, y)` with `z ~ N(0, I)` drawn from `seed`.
    pub fn sample_target(&self, y: &IdentityLabel, seed: u64) -> Result<SpeakerEmbedding> {
        self.check_trained()?;
        self.check_label(y)?;
        self.decode(&self.latent(seed), &y.one_hot())
    }

    /// `decoder((1−t) z₁ + t z₂, (1−t) y₁ + t y₂)`, where `z₁` is drawn from
    /// `seed` and `z₂` from `seed + 1`, so the endpoints coincide with
    /// [`sample_target`](Self::sample_target) at those seeds.
    pub fn interpolate_targets(&self, y1: &IdentityLabel, y2: &IdentityLabel, t: f64, seed: u64) -> Result<SpeakerEmbedding> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("interpolation weight {t} outside [0, 1]")));
        }
        self.check_trained()?;
        self.check_label(y1)?;
        self.check_label(y2)?;
        let (z1, z2) = (self.latent(seed), self.latent(seed.wrapping_add(1)));
        let z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let y: Vec<f64> = y1.one_hot().iter().zip(y2.one_hot()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        self.decode(&z, &y)
    }

    fn check_label(&self, y: &IdentityLabel) -> Result<()> {
        if y.num_labels != self.dims.num_labels {
            return Err(Error::Argument("label width does not match the decoder".into()));
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut t: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (format!("dec/{n}"), t)).collect();
        t.extend(self.running.iter().enumerate().map(|(i, r)| (format!("dec/running{i}"), r)));
        t
    }

    fn header(&self, kind: &str) -> serde_json::Value {
        json!({
            "kind": kind,
            "dims": self.dims,
            "num_labels": self.dims.num_labels,
            "latent_dim": self.dims.latent_dim,
            "embedding_dim": self.dims.embedding_dim,
            "labels": self.labels,
            "trained": self.trained,
            "layout": "one channel of length embedding_dim, channel-major rows; inputs rescaled to norm sqrt(embedding_dim)",
            "decoder_params": self.params.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.tensors();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::write(path, self.header("cvae_decoder"), &refs)
    }

    /// Reads a decoder-only checkpoint or the decoder of a full one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let l = checkpoint::read(path)?;
        let kind: String = l.field("kind")?;
        if kind != "cvae_decoder" && kind != "cvae" {
            return Err(Error::Format(format!("`{kind}` is not a CVAE checkpoint")));
        }
        Self::from_loaded(&l)
    }

    fn from_loaded(l: &checkpoint::Loaded) -> Result<Self> {
        let dims: CvaeDims = l.field("dims")?;
        dims.check()?;
        let names: Vec<String> = l.field("decoder_params")?;
        let mut params = ParamStore::new();
        for n in &names {
            params.add(n.clone(), l.tensor(&format!("dec/{n}"))?.clone());
        }
        let running = (0..dims.blocks)
            .map(|i| l.tensor(&format!("dec/running{i}")).cloned())
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            labels: l.field("labels")?,
            params,
            running,
            trained: l.field("trained")?,
        })
    }
}

/// Reconstruction and posterior of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeOutput {
    pub reconstruction: SpeakerEmbedding,
    pub latent: LatentGaussian,
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    encoder: ParamStore,
    enc_running: Vec<Tensor>,
    decoder: CvaeDecoder,
    beta: f64,
}

impl CvaeModel {
    /// Freshly initialised (untrained) network.
    pub fn new(embedding_dim: usize, labels: Vec<usize>, cfg: &CvaeConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = CvaeDims {
            embedding_dim,
            latent_dim: cfg.latent_dim,
            num_labels: labels.len(),
            base_channels: cfg.base_channels,
            blocks: cfg.blocks,
        };
        dims.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            encoder: init_encoder(&dims, &mut rng),
            enc_running: initial_running(&dims, false),
            decoder: CvaeDecoder {
                dims,
                labels,
                params: init_decoder(&dims, &mut rng),
                running: initial_running(&dims, true),
                trained: false,
            },
            beta: cfg.beta,
        })
    }

    pub fn dims(&self) -> &CvaeDims {
        &self.decoder.dims
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_trained(&self) -> bool {
        self.decoder.trained
    }

    pub fn decoder(&self) -> &CvaeDecoder {
        &self.decoder
    }

    pub fn identity(&self, label: usize) -> Result<IdentityLabel> {
        self.decoder.identity(label)
    }

    /// Fails if any conditioning label is also one of `users`.
    pub fn ensure_disjoint(&self, users: &[usize]) -> Result<()> {
        if let Some(l) = self.decoder.labels.iter().find(|l| users.contains(l)) {
            return Err(Error::Data(format!("target label {l} is also a de-identification user")));
        }
        Ok(())
    }

    /// Posterior `q(z | x, y)` with running batch statistics.
    pub fn encode(&self, x: &SpeakerEmbedding, y: &IdentityLabel) -> Result<LatentGaussian> {
        let d = *self.dims();
        if x.dim() != d.embedding_dim {
            return Err(Error::Argument(format!("embedding has {} dims, CVAE expects {}", x.dim(), d.embedding_dim)));
        }
        self.decoder.check_label(y)?;
        let mut g = Graph::new();
        let p = self.encoder.bind(&mut g, false);
        let xv = g.row(&network_scale(x), false);
        let yv = g.row(&y.one_hot(), false);
        let (mu, lv) = encoder_forward(&mut g, &p, &d, xv, yv, BnMode::Eval(&self.enc_running));
        let mu = g.value(mu).row(0).to_vec();
        let sigma = g.value(lv).row(0).iter().map(|v| (0.5 * v).exp()).collect();
        LatentGaussian::new(mu, sigma)
    }

    /// Encode, reparameterize with `eps`, decode under the same label.
    pub fn forward(&self, x: &SpeakerEmbedding, y: &IdentityLabel, eps: &[f64]) -> Result<CvaeOutput> {
        let latent = self.encode(x, y)?;
        let z = latent.reparameterize(eps)?;
        let reconstruction = self.decoder.decode(&z, &y.one_hot())?;
        Ok(CvaeOutput { reconstruction, latent })
    }

    /// Reconstruction from the posterior mean.
    pub fn reconstruct(&self, x: &SpeakerEmbedding, y: &IdentityLabel) -> Result<SpeakerEmbedding> {
        Ok(self.forward(x, y, &vec![0.0; self.dims().latent_dim])?.reconstruction)
    }

    pub fn sample_target(&self, y: &IdentityLabel, seed: u64) -> Result<SpeakerEmbedding> {
        self.decoder.sample_target(y, seed)
    }

    pub fn interpolate_targets(&self, y1: &IdentityLabel, y2: &IdentityLabel, t: f64, seed: u64) -> Result<SpeakerEmbedding> {
        self.decoder.interpolate_targets(y1, y2, t, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = self.decoder.header("cvae");
        header["beta"] = json!(self.beta);
        header["encoder_params"] = json!(self.encoder.iter().map(|(n, _)| n).collect::<Vec<_>>());
        let mut named = self.decoder.tensors();
        named.extend(self.encoder.iter().map(|(n, t)| (format!("enc/{n}"), t)));
        named.extend(self.enc_running.iter().enumerate().map(|(i, r)| (format!("enc/running{i}"), r)));
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::write(path, header, &refs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let l = checkpoint::read(path)?;
        if l.field::<String>("kind")? != "cvae" {
            return Err(Error::Format("not a full CVAE checkpoint".into()));
        }
        let decoder = CvaeDecoder::from_loaded(&l)?;
        let names: Vec<String> = l.field("encoder_params")?;
        let mut encoder = ParamStore::new();
        for n in &names {
            encoder.add(n.clone(), l.tensor(&format!("enc/{n}"))?.clone());
        }
        let enc_running = (0..decoder.dims.blocks)
            .map(|i| l.tensor(&format!("enc/running{i}")).cloned())
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            enc_running,
            decoder,
            beta: l.field("beta")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-example loss, reconstruction and KL over the epoch.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Trains on labelled embeddings. Condition indices follow the sorted
/// distinct labels.
pub fn train_cvae(data: &[SpeakerEmbedding], cfg: &CvaeConfig) -> Result<(CvaeModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::Data("no embeddings to train on".into()))?;
    let dim = first.dim();
    let mut labels = Vec::with_capacity(data.len());
    for (i, e) in data.iter().enumerate() {
        if e.dim() != dim {
            return Err(Error::Data(format!("embedding {i} has {} dims, expected {dim}", e.dim())));
        }
        labels.push(e.label.ok_or_else(|| Error::Data(format!("embedding {i} has no label")))?);
    }
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data("CVAE training needs at least two labels".into()));
    }
    let mut model = CvaeModel::new(dim, distinct.clone(), cfg)?;
    let d = *model.dims();
    let xs: Vec<Vec<f64>> = data.iter().map(network_scale).collect();
    let ys: Vec<usize> = labels.iter().map(|l| distinct.binary_search(l).expect("label listed")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
    let mut opt_enc = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut opt_dec = Adam::new(cfg.learning_rate, 0.9, 0.999);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut rec_tot, mut kl_tot, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // A batch of one has no usable batch statistics.
            if batch.len() < 2 {
                continue;
            }
            let b = batch.len();
            let x = Tensor::from_shape_fn((b, dim), |(r, c)| xs[batch[r]][c]);
            let y = Tensor::from_shape_fn((b, d.num_labels), |(r, c)| (ys[batch[r]] == c) as u8 as f64);
            let eps = Tensor::from_shape_fn((b, d.latent_dim), |_| rng.sample(StandardNormal));

            let mut g = Graph::new();
            let pe = model.encoder.bind(&mut g, true);
            let pd = model.decoder.params.bind(&mut g, true);
            let (xv, yv, ev) = (g.constant(x.clone()), g.constant(y), g.constant(eps));
            let mut enc_bn = Vec::new();
            let (mu, lv) = encoder_forward(&mut g, &pe, &d, xv, yv, BnMode::Train(&mut enc_bn));
            let half = g.scale(lv, 0.5);
            let sigma = g.exp(half);
            let noise = g.mul(sigma, ev);
            let z = g.add(mu, noise);
            let mut dec_bn = Vec::new();
            let xr = decoder_forward(&mut g, &pd, &d, z, yv, BnMode::Train(&mut dec_bn));
            let diff = g.sub(xr, xv);
            let sq = g.square(diff);
            let rec = match cfg.reconstruction {
                Reconstruction::Squared => g.sum(sq),
                Reconstruction::Norm => {
                    let per = g.sum_cols(sq);
                    let per = g.sqrt(per, 1e-12);
                    g.sum(per)
                }
            };
            let rec = g.scale(rec, 1.0 / b as f64);
            let mu2 = g.square(mu);
            let var = g.exp(lv);
            let k = g.add(mu2, var);
            let k = g.sub(k, lv);
            let k = g.add_scalar(k, -1.0);
            let kl = g.sum(k);
            let kl = g.scale(kl, 0.5 / b as f64);
            let bkl = g.scale(kl, cfg.beta);
            let loss = g.add(rec, bkl);
            let (lval, rval, kval) = (g.scalar(loss), g.scalar(rec), g.scalar(kl));
            if !lval.is_finite() {
                return Err(Error::Numerical(format!("CVAE loss became {lval} in epoch {}", epoch + 1)));
            }
            tot += lval * b as f64;
            rec_tot += rval * b as f64;
            kl_tot += kval * b as f64;

            let grads = g.backward(loss);
            let ge: Vec<Option<Tensor>> = pe.iter().map(|v| grads.get(*v).cloned()).collect();
            let gd: Vec<Option<Tensor>> = pd.iter().map(|v| grads.get(*v).cloned()).collect();
            opt_enc.step(model.encoder.tensors_mut(), &ge);
            opt_dec.step(model.decoder.params.tensors_mut(), &gd);
            seen += b;
            let m = cfg.bn_momentum;
            for (run, node) in model.enc_running.iter_mut().zip(&enc_bn).chain(model.decoder.running.iter_mut().zip(&dec_bn)) {
                let stats = g.batch_stats(*node).expect("batch-norm node");
                run.zip_mut_with(stats, |r, s| *r = (1.0 - m) * *r + m * s);
            }
        }
        let n = seen.max(1) as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: tot / n,
            reconstruction: rec_tot / n,
            kl: kl_tot / n,
        });
    }
    model.decoder.trained = true;
    Ok((model, history))
}

#[cfg(test)]
mod tests;
