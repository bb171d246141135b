use ndarray::{s, Array2, Axis};

use crate::graph::{ConvGeom, Graph, Op, Var};
use crate::Tensor;

fn acc(grads: &mut [Option<Tensor>], g: &Graph, v: Var, t: Tensor) {
    if !g.nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => *existing += &t,
        slot @ None => *slot = Some(t),
    }
}

fn wants(g: &Graph, v: Var) -> bool {
    g.nodes[v.0].needs_grad
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeom) -> Tensor {
    let ConvGeom {
        in_channels: cin,
        out_channels: cout,
        in_len: lin,
        kernel: k,
        stride,
        pad,
    } = *geom;
    let lout = geom.conv_out_len();
    let batch = x.nrows();
    assert_eq!(x.ncols(), cin * lin, "conv1d input width");
    assert_eq!(w.dim(), (cout, cin * k), "conv1d weight shape");
    let mut out = Array2::zeros((batch, cout * lout));
    for bi in 0..batch {
        let xr = x.row(bi);
        let mut orow = out.row_mut(bi);
        for co in 0..cout {
            for t in 0..lout {
                let mut acc = b[[0, co]];
                for ci in 0..cin {
                    for kk in 0..k {
                        let p = (t * stride + kk) as isize - pad as isize;
                        if p >= 0 && (p as usize) < lin {
                            acc += w[[co, ci * k + kk]] * xr[ci * lin + p as usize];
                        }
                    }
                }
                orow[co * lout + t] = acc;
            }
        }
    }
    out
}

pub(crate) fn deconv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeom) -> Tensor {
    let ConvGeom {
        in_channels: cin,
        out_channels: cout,
        in_len: lin,
        kernel: k,
        stride,
        pad,
    } = *geom;
    let lout = geom.deconv_out_len();
    let batch = x.nrows();
    assert_eq!(x.ncols(), cin * lin, "deconv input width");
    assert_eq!(w.dim(), (cin, cout * k), "deconv weight shape");
    let mut out = Array2::zeros((batch, cout * lout));
    for bi in 0..batch {
        let xr = x.row(bi);
        let mut orow = out.row_mut(bi);
        for co in 0..cout {
            for t in 0..lout {
                orow[co * lout + t] = b[[0, co]];
            }
        }
        for ci in 0..cin {
            for t in 0..lin {
                let xv = xr[ci * lin + t];
                for co in 0..cout {
                    for kk in 0..k {
                        let o = (t * stride + kk) as isize - pad as isize;
                        if o >= 0 && (o as usize) < lout {
                            orow[co * lout + o as usize] += xv * w[[ci, co * k + kk]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (output, normalised activations, stats[mean; var]).
pub(crate) fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    channels: usize,
    len: usize,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let batch = x.nrows();
    let n = (batch * len) as f64;
    let mut stats = Array2::zeros((2, channels));
    for c in 0..channels {
        let cols = x.slice(s![.., c * len..(c + 1) * len]);
        let mean = cols.sum() / n;
        let var = cols.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats[[0, c]] = mean;
        stats[[1, c]] = var;
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    for bi in 0..batch {
        for c in 0..channels {
            let inv = 1.0 / (stats[[1, c]] + eps).sqrt();
            for t in 0..len {
                let idx = c * len + t;
                let h = (x[[bi, idx]] - stats[[0, c]]) * inv;
                xhat[[bi, idx]] = h;
                out[[bi, idx]] = gamma[[0, c]] * h + beta[[0, c]];
            }
        }
    }
    (out, xhat, stats)
}

pub(crate) fn backward_node(g: &Graph, i: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &g.nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(g, *a) {
                acc(grads, g, *a, grad.dot(&g.value(*b).t()));
            }
            if wants(g, *b) {
                acc(grads, g, *b, g.value(*a).t().dot(grad));
            }
        }
        Op::Add(a, b) => {
            acc(grads, g, *a, grad.clone());
            acc(grads, g, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            acc(grads, g, *a, grad.clone());
            acc(grads, g, *b, -grad);
        }
        Op::Mul(a, b) => {
            if wants(g, *a) {
                acc(grads, g, *a, grad * g.value(*b));
            }
            if wants(g, *b) {
                acc(grads, g, *b, grad * g.value(*a));
            }
        }
        Op::AddRow(a, r) => {
            acc(grads, g, *a, grad.clone());
            if wants(g, *r) {
                acc(grads, g, *r, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::MulRow(a, r) => {
            if wants(g, *a) {
                acc(grads, g, *a, grad * g.value(*r));
            }
            if wants(g, *r) {
                let p = grad * g.value(*a);
                acc(grads, g, *r, p.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::Scale(a, c) => acc(grads, g, *a, grad * *c),
        Op::AddScalar(a) => acc(grads, g, *a, grad.clone()),
        Op::LeakyRelu(a, slope) => {
            let mut d = grad.clone();
            ndarray::Zip::from(&mut d)
                .and(g.value(*a))
                .for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= *slope
                    }
                });
            acc(grads, g, *a, d);
        }
        Op::Elu(a) => {
            let mut d = grad.clone();
            ndarray::Zip::from(&mut d)
                .and(g.value(*a))
                .for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= x.exp()
                    }
                });
            acc(grads, g, *a, d);
        }
        Op::Exp(a) => acc(grads, g, *a, grad * &node.value),
        Op::Ln(a, floor) => {
            let d = ndarray::Zip::from(grad)
                .and(g.value(*a))
                .map_collect(|&d, &x| d / (x + floor));
            acc(grads, g, *a, d);
        }
        Op::Square(a) => acc(grads, g, *a, grad * g.value(*a) * 2.0),
        Op::Sqrt(a) => {
            let d = ndarray::Zip::from(grad)
                .and(&node.value)
                .map_collect(|&d, &y| 0.5 * d / y);
            acc(grads, g, *a, d);
        }
        Op::Sum(a) => {
            let s = grad[[0, 0]];
            acc(grads, g, *a, Array2::from_elem(g.value(*a).dim(), s));
        }
        Op::MeanRows(a) => {
            let (t, c) = g.value(*a).dim();
            let row = grad / t as f64;
            let d = row.broadcast((t, c)).expect("mean_rows broadcast").to_owned();
            acc(grads, g, *a, d);
        }
        Op::SumCols(a) => {
            let (t, c) = g.value(*a).dim();
            let d = grad.broadcast((t, c)).expect("sum_cols broadcast").to_owned();
            acc(grads, g, *a, d);
        }
        Op::SubRowMean(a) => {
            let m = grad.mean_axis(Axis(0)).expect("non-empty");
            acc(grads, g, *a, grad - &m);
        }
        Op::StatsPool(a) => {
            let x = g.value(*a);
            let (t, c) = x.dim();
            let out = &node.value;
            let mut d = Array2::zeros((t, c));
            for j in 0..c {
                let m = out[[0, j]];
                let sd = out[[0, c + j]];
                let gm = grad[[0, j]] / t as f64;
                let gs = grad[[0, c + j]] / (t as f64 * sd);
                for ti in 0..t {
                    d[[ti, j]] = gm + gs * (x[[ti, j]] - m);
                }
            }
            acc(grads, g, *a, d);
        }
        Op::Unfold(a, offsets) => {
            let (t, c) = g.value(*a).dim();
            let mut d = Array2::<f64>::zeros((t, c));
            for ti in 0..t {
                for (ki, off) in offsets.iter().enumerate() {
                    let src = (ti as isize + off).clamp(0, t as isize - 1) as usize;
                    let gs = grad.slice(s![ti, ki * c..(ki + 1) * c]);
                    let mut dr = d.row_mut(src);
                    dr += &gs;
                }
            }
            acc(grads, g, *a, d);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let w = g.value(*p).ncols();
                if wants(g, *p) {
                    acc(grads, g, *p, grad.slice(s![.., off..off + w]).to_owned());
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let h = g.value(*p).nrows();
                if wants(g, *p) {
                    acc(grads, g, *p, grad.slice(s![off..off + h, ..]).to_owned());
                }
                off += h;
            }
        }
        Op::Transpose(a) => acc(grads, g, *a, grad.t().to_owned()),
        Op::SliceCols(a, start, len) => {
            let mut d = Array2::zeros(g.value(*a).dim());
            d.slice_mut(s![.., *start..*start + *len]).assign(grad);
            acc(grads, g, *a, d);
        }
        Op::RowNormalize(a, eps) => {
            let x = g.value(*a);
            let y = &node.value;
            let mut d = Array2::zeros(x.dim());
            for r in 0..x.nrows() {
                let xr = x.row(r);
                let n = (xr.dot(&xr) + eps).sqrt();
                let yr = y.row(r);
                let gr = grad.row(r);
                let proj = yr.dot(&gr);
                let mut dr = d.row_mut(r);
                for j in 0..xr.len() {
                    dr[j] = (gr[j] - yr[j] * proj) / n;
                }
            }
            acc(grads, g, *a, d);
        }
        Op::Frame {
            input,
            len,
            hop,
            window,
        } => {
            let n = g.value(*input).ncols();
            let mut d = Array2::zeros((1, n));
            for f in 0..grad.nrows() {
                for k in 0..*len {
                    d[[0, f * hop + k]] += grad[[f, k]] * window[k];
                }
            }
            acc(grads, g, *input, d);
        }
        Op::AmSoftmaxCe {
            logits,
            labels,
            scale,
            ..
        } => {
            let probs = node.aux.as_ref().expect("softmax cache");
            let b = probs.nrows() as f64;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d[[r, l]] -= 1.0;
            }
            d *= grad[[0, 0]] * scale / b;
            acc(grads, g, *logits, d);
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            geom,
        } => {
            let ConvGeom {
                in_channels: cin,
                out_channels: cout,
                in_len: lin,
                kernel: k,
                stride,
                pad,
            } = *geom;
            let lout = geom.conv_out_len();
            let x = g.value(*input);
            let w = g.value(*weight);
            let batch = x.nrows();
            let mut dx = Array2::zeros(x.dim());
            let mut dw = Array2::zeros(w.dim());
            let mut db = Array2::zeros((1, cout));
            for bi in 0..batch {
                for co in 0..cout {
                    for t in 0..lout {
                        let go = grad[[bi, co * lout + t]];
                        if go == 0.0 {
                            continue;
                        }
                        db[[0, co]] += go;
                        for ci in 0..cin {
                            for kk in 0..k {
                                let p = (t * stride + kk) as isize - pad as isize;
                                if p >= 0 && (p as usize) < lin {
                                    let xi = ci * lin + p as usize;
                                    dx[[bi, xi]] += go * w[[co, ci * k + kk]];
                                    dw[[co, ci * k + kk]] += go * x[[bi, xi]];
                                }
                            }
                        }
                    }
                }
            }
            acc(grads, g, *input, dx);
            acc(grads, g, *weight, dw);
            acc(grads, g, *bias, db);
        }
        Op::ConvTranspose1d {
            input,
            weight,
            bias,
            geom,
        } => {
            let ConvGeom {
                in_channels: cin,
                out_channels: cout,
                in_len: lin,
                kernel: k,
                stride,
                pad,
            } = *geom;
            let lout = geom.deconv_out_len();
            let x = g.value(*input);
            let w = g.value(*weight);
            let batch = x.nrows();
            let mut dx = Array2::zeros(x.dim());
            let mut dw = Array2::zeros(w.dim());
            let mut db = Array2::zeros((1, cout));
            for bi in 0..batch {
                for co in 0..cout {
                    for o in 0..lout {
                        db[[0, co]] += grad[[bi, co * lout + o]];
                    }
                }
                for ci in 0..cin {
                    for t in 0..lin {
                        let xi = ci * lin + t;
                        let xv = x[[bi, xi]];
                        let mut sx = 0.0;
                        for co in 0..cout {
                            for kk in 0..k {
                                let o = (t * stride + kk) as isize - pad as isize;
                                if o >= 0 && (o as usize) < lout {
                                    let go = grad[[bi, co * lout + o as usize]];
                                    sx += go * w[[ci, co * k + kk]];
                                    dw[[ci, co * k + kk]] += go * xv;
                                }
                            }
                        }
                        dx[[bi, xi]] += sx;
                    }
                }
            }
            acc(grads, g, *input, dx);
            acc(grads, g, *weight, dw);
            acc(grads, g, *bias, db);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            channels,
            len,
            eps,
        } => {
            let xhat = node.aux.as_ref().expect("bn cache");
            let stats = node.aux2.as_ref().expect("bn stats");
            let gm = g.value(*gamma);
            let batch = xhat.nrows();
            let n = (batch * len) as f64;
            let mut dx = Array2::zeros(xhat.dim());
            let mut dgamma = Array2::zeros((1, *channels));
            let mut dbeta = Array2::zeros((1, *channels));
            for c in 0..*channels {
                let inv = 1.0 / (stats[[1, c]] + eps).sqrt();
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for bi in 0..batch {
                    for t in 0..*len {
                        let idx = c * len + t;
                        let go = grad[[bi, idx]];
                        dgamma[[0, c]] += go * xhat[[bi, idx]];
                        dbeta[[0, c]] += go;
                        let dh = go * gm[[0, c]];
                        sum_d += dh;
                        sum_dx += dh * xhat[[bi, idx]];
                    }
                }
                for bi in 0..batch {
                    for t in 0..*len {
                        let idx = c * len + t;
                        let dh = grad[[bi, idx]] * gm[[0, c]];
                        dx[[bi, idx]] = inv / n * (n * dh - sum_d - xhat[[bi, idx]] * sum_dx);
                    }
                }
            }
            acc(grads, g, *input, dx);
            acc(grads, g, *gamma, dgamma);
            acc(grads, g, *beta, dbeta);
        }
        Op::ChannelAffine {
            input,
            scale,
            shift,
            channels,
            len,
        } => {
            let x = g.value(*input);
            let sc = g.value(*scale);
            let mut dx = grad.clone();
            let mut dsc = Array2::zeros((1, *channels));
            let mut dsh = Array2::zeros((1, *channels));
            for bi in 0..x.nrows() {
                for c in 0..*channels {
                    for t in 0..*len {
                        let idx = c * len + t;
                        dx[[bi, idx]] *= sc[[0, c]];
                        dsc[[0, c]] += grad[[bi, idx]] * x[[bi, idx]];
                        dsh[[0, c]] += grad[[bi, idx]];
                    }
                }
            }
            acc(grads, g, *input, dx);
            acc(grads, g, *scale, dsc);
            acc(grads, g, *shift, dsh);
        }
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| g.value(*v)).collect();
            let needs: Vec<bool> = inputs.iter().map(|v| wants(g, *v)).collect();
            let gs = op.backward(&vals, &node.value, grad, &needs);
            for (v, d) in inputs.iter().zip(gs) {
                if let Some(d) = d {
                    acc(grads, g, *v, d);
                }
            }
        }
    }
}
