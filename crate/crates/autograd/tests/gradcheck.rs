//! Central finite-difference checks for every differentiable op.

use std::sync::Arc;

use deid_autograd::{ConvGeom, CustomOp, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Compares the tape gradient of `f` w.r.t. every input against central
/// differences. `f` must end in a scalar.
fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let o = f(&mut g, &vars);
        g.scalar(o)
    };
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.dim()));
        for idx in 0..t.len() {
            let (r, c) = (idx / t.ncols(), idx % t.ncols());
            let mut plus = inputs.clone();
            plus[k][[r, c]] += h;
            let mut minus = inputs.clone();
            minus[k][[r, c]] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[[r, c]];
            let bound = tol * a.abs().max(fd.abs()) + 1e-8;
            assert!(
                (a - fd).abs() <= bound,
                "input {k} [{r},{c}]: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// Contracts an arbitrary node to a scalar with fixed random weights so the
/// upstream gradient is not uniform.
fn contract(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.value(v).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, r, c));
    let p = g.mul(v, w);
    g.sum(p)
}

#[test]
fn dense_and_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let row = random(&mut rng, 1, 2);
    check(
        vec![a, b, row],
        |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let e = g.elu(m);
            let l = g.leaky_relu(e, 0.2);
            let s = g.square(l);
            let q = g.sqrt(s, 0.5);
            let ex = g.exp(q);
            let ln = g.ln(ex, 1e-3);
            let mr = g.mul_row(ln, v[2]);
            let sc = g.scale(mr, 0.7);
            let sh = g.add_scalar(sc, 0.1);
            contract(g, sh, 7)
        },
        1e-6,
    );
}

#[test]
fn pooling_and_normalisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 6, 3);
    check(
        vec![x.clone()],
        |g, v| {
            let sp = g.stats_pool(v[0], 1e-6);
            contract(g, sp, 3)
        },
        1e-6,
    );
    check(
        vec![x.clone()],
        |g, v| {
            let c = g.sub_row_mean(v[0]);
            let mr = g.mean_rows(c);
            let n = g.row_normalize(v[0], 1e-9);
            let sc = g.sum_cols(n);
            let a = contract(g, mr, 4);
            let b = contract(g, sc, 5);
            g.add(a, b)
        },
        1e-6,
    );
    let y = random(&mut rng, 1, 3);
    let z = random(&mut rng, 1, 3);
    check(vec![y, z], |g, v| g.cosine(v[0], v[1], 1e-12), 1e-6);
}

#[test]
fn unfold_concat_slice_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 5, 2);
    check(
        vec![x.clone()],
        |g, v| {
            let u = g.unfold(v[0], &[-2, 0, 3]);
            let s = g.slice_cols(u, 1, 3);
            let c = g.concat_cols(&[s, v[0]]);
            let r = g.concat_rows(&[c, c]);
            let t = g.transpose(r);
            contract(g, t, 9)
        },
        1e-6,
    );
    let sig = random(&mut rng, 1, 20);
    let win = Arc::new((0..6).map(|i| 0.5 + i as f64 * 0.1).collect::<Vec<_>>());
    check(
        vec![sig],
        move |g, v| {
            let f = g.frame(v[0], 6, 4, win.clone());
            contract(g, f, 11)
        },
        1e-6,
    );
}

#[test]
fn margin_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, 4, 5);
    check(
        vec![logits],
        |g, v| g.am_softmax_ce(v[0], &[0, 3, 2, 4], 10.0, 0.2),
        1e-6,
    );
}

#[test]
fn strided_convolutions_and_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = ConvGeom {
        in_channels: 2,
        out_channels: 3,
        in_len: 9,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let x = random(&mut rng, 2, 18);
    let w = random(&mut rng, 3, 8);
    let b = random(&mut rng, 1, 3);
    check(
        vec![x, w, b],
        move |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], geom);
            contract(g, y, 12)
        },
        1e-6,
    );
    let dgeom = ConvGeom {
        in_channels: 3,
        out_channels: 2,
        in_len: 5,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let x = random(&mut rng, 2, 15);
    let w = random(&mut rng, 3, 8);
    let b = random(&mut rng, 1, 2);
    check(
        vec![x, w, b],
        move |g, v| {
            let y = g.conv_transpose1d(v[0], v[1], v[2], dgeom);
            assert_eq!(g.value(y).ncols(), 2 * dgeom.deconv_out_len());
            contract(g, y, 13)
        },
        1e-6,
    );
    let x = random(&mut rng, 4, 6);
    let gamma = random(&mut rng, 1, 2);
    let beta = random(&mut rng, 1, 2);
    check(
        vec![x, gamma, beta],
        |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], 2, 3, 1e-5);
            contract(g, y, 14)
        },
        1e-5,
    );
    let x = random(&mut rng, 3, 6);
    let sc = random(&mut rng, 1, 2);
    let sh = random(&mut rng, 1, 2);
    check(
        vec![x, sc, sh],
        |g, v| {
            let y = g.channel_affine(v[0], v[1], v[2], 2, 3);
            contract(g, y, 15)
        },
        1e-6,
    );
}

struct Cube;

impl CustomOp for Cube {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].mapv(|x| x * x * x)
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad * &inputs[0].mapv(|x| 3.0 * x * x))]
    }
}

#[test]
fn custom_op_round_trips_through_the_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, 2, 3);
    let op: Arc<dyn CustomOp> = Arc::new(Cube);
    check(
        vec![x],
        move |g, v| {
            let y = g.custom(op.clone(), &[v[0]]);
            contract(g, y, 16)
        },
        1e-6,
    );
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones((1, 3)));
    let p = g.param(Tensor::ones((1, 3)));
    let m = g.mul(c, p);
    let s = g.sum(m);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &Tensor::ones((1, 3)));
}

#[test]
fn batch_stats_are_recorded() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_shape_vec((2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let gm = g.constant(Tensor::ones((1, 1)));
    let bt = g.constant(Tensor::zeros((1, 1)));
    let y = g.batch_norm(x, gm, bt, 1, 2, 0.0);
    let st = g.batch_stats(y).unwrap();
    assert_eq!(st[[0, 0]], 4.0);
    assert_eq!(st[[1, 0]], 5.0);
}
