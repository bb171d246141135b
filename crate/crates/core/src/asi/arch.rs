//! Embedding network architectures. Every network maps a `T × C` feature
//! matrix to a `1 × D` embedding and must accept any `T ≥ 1`.

use std::sync::Arc;

use deid_autograd::{he_uniform, xavier_uniform, Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

pub trait Architecture: Send + Sync {
    fn id(&self) -> &'static str;
    fn init(&self, dims: &ArchDims, rng: &mut ChaCha8Rng) -> ParamStore;
    /// `params` are the store's tensors bound on `g`, in store order.
    fn forward(&self, g: &mut Graph, params: &[Var], feats: Var) -> Var;
}

/// Registry preloaded with the four built-in architectures.
pub fn architectures() -> Registry<dyn Architecture> {
    let mut r: Registry<dyn Architecture> = Registry::new("architecture");
    for a in [
        Arc::new(XVector) as Arc<dyn Architecture>,
        Arc::new(Ecapa),
        Arc::new(DVector),
        Arc::new(DeepSpeaker),
    ] {
        r.register(a.id(), a);
    }
    r
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, relu_like: bool) {
        let w = if relu_like {
            he_uniform(self.rng, fan_in, fan_out, fan_in)
        } else {
            xavier_uniform(self.rng, fan_in, fan_out, fan_in, fan_out)
        };
        self.store.add(format!("{name}.w"), w);
        self.store.add(format!("{name}.b"), Tensor::zeros((1, fan_out)));
    }
}

fn build(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut Builder)) -> ParamStore {
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    f(&mut b);
    b.store
}

/// Consumes parameters in the order they were created.
struct Cursor<'a> {
    params: &'a [Var],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(params: &'a [Var]) -> Self {
        Self { params, at: 0 }
    }

    fn dense(&mut self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (self.params[self.at], self.params[self.at + 1]);
        self.at += 2;
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn dense_elu(&mut self, g: &mut Graph, x: Var) -> Var {
        let y = self.dense(g, x);
        g.elu(y)
    }

    fn tdnn(&mut self, g: &mut Graph, x: Var, offsets: &[isize]) -> Var {
        let u = g.unfold(x, offsets);
        self.dense_elu(g, u)
    }

    fn done(&self) {
        debug_assert_eq!(self.at, self.params.len(), "parameter count mismatch");
    }
}

fn ctx(k: isize, dilation: isize) -> Vec<isize> {
    (-k..=k).map(|i| i * dilation).collect()
}

/// Time-delay layers with statistics pooling.
pub struct XVector;

impl Architecture for XVector {
    fn id(&self) -> &'static str {
        "xvector"
    }

    fn init(&self, d: &ArchDims, rng: &mut ChaCha8Rng) -> ParamStore {
        let h = d.hidden;
        build(rng, |b| {
            b.dense("tdnn1", 5 * d.input_dim, h, true);
            b.dense("tdnn2", 3 * h, h, true);
            b.dense("tdnn3", 3 * h, h, true);
            b.dense("frame4", h, 2 * h, true);
            b.dense("segment", 4 * h, d.embedding_dim, false);
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut c = Cursor::new(p);
        let h = c.tdnn(g, x, &ctx(2, 1));
        let h = c.tdnn(g, h, &ctx(1, 2));
        let h = c.tdnn(g, h, &ctx(1, 3));
        let h = c.dense_elu(g, h);
        let s = g.stats_pool(h, 1e-5);
        let e = c.dense(g, s);
        c.done();
        e
    }
}

/// Residual dilated TDNN with multi-layer aggregation and statistics pooling.
pub struct Ecapa;

impl Architecture for Ecapa {
    fn id(&self) -> &'static str {
        "ecapa"
    }

    fn init(&self, d: &ArchDims, rng: &mut ChaCha8Rng) -> ParamStore {
        let h = d.hidden;
        build(rng, |b| {
            b.dense("stem", 5 * d.input_dim, h, true);
            for i in 0..3 {
                b.dense(&format!("res{i}"), 3 * h, h, true);
            }
            b.dense("aggregate", 3 * h, 2 * h, true);
            b.dense("segment", 4 * h, d.embedding_dim, false);
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut c = Cursor::new(p);
        let mut h = c.tdnn(g, x, &ctx(2, 1));
        let mut outs = Vec::new();
        for dil in [2, 3, 4] {
            let r = c.tdnn(g, h, &ctx(1, dil));
            h = g.add(h, r);
            outs.push(h);
        }
        let cat = g.concat_cols(&outs);
        let a = c.dense_elu(g, cat);
        let s = g.stats_pool(a, 1e-5);
        let e = c.dense(g, s);
        c.done();
        e
    }
}

/// Frame-level MLP over stacked context, averaged over time.
pub struct DVector;

impl Architecture for DVector {
    fn id(&self) -> &'static str {
        "dvector"
    }

    fn init(&self, d: &ArchDims, rng: &mut ChaCha8Rng) -> ParamStore {
        let h = 2 * d.hidden;
        build(rng, |b| {
            b.dense("fc1", 7 * d.input_dim, h, true);
            b.dense("fc2", h, h, true);
            b.dense("fc3", h, h, true);
            b.dense("proj", h, d.embedding_dim, false);
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut c = Cursor::new(p);
        let u = g.unfold(x, &ctx(3, 1));
        let h = c.dense_elu(g, u);
        let h = c.dense_elu(g, h);
        let h = c.dense_elu(g, h);
        let f = c.dense(g, h);
        c.done();
        g.mean_rows(f)
    }
}

/// Residual temporal convolution blocks, mean pooling.
pub struct DeepSpeaker;

impl Architecture for DeepSpeaker {
    fn id(&self) -> &'static str {
        "deepspeaker"
    }

    fn init(&self, d: &ArchDims, rng: &mut ChaCha8Rng) -> ParamStore {
        let h = d.hidden;
        build(rng, |b| {
            b.dense("conv0", 3 * d.input_dim, h, true);
            for i in 0..2 {
                b.dense(&format!("block{i}.a"), 3 * h, h, true);
                b.dense(&format!("block{i}.b"), 3 * h, h, true);
            }
            b.dense("expand", h, 2 * h, true);
            b.dense("proj", 2 * h, d.embedding_dim, false);
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut c = Cursor::new(p);
        let mut h = c.tdnn(g, x, &ctx(1, 1));
        for dil in [1, 2] {
            let a = c.tdnn(g, h, &ctx(1, dil));
            let u = g.unfold(a, &ctx(1, dil));
            let b = c.dense(g, u);
            let r = g.add(h, b);
            h = g.elu(r);
        }
        let e = c.dense_elu(g, h);
        let m = g.mean_rows(e);
        let out = c.dense(g, m);
        c.done();
        out
    }
}
