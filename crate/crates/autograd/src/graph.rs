use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable operation.
pub trait CustomOp: Send + Sync {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;

    /// Vector-Jacobian product. `needs[i]` tells whether input `i` wants a
    /// gradient; entries for inputs that do not may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

/// Geometry of a strided 1-D convolution over rows laid out channel-major
/// (`row[c * len + t]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out_len(&self) -> usize {
        (self.in_len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn deconv_out_len(&self) -> usize {
        (self.in_len - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Ln(Var, f64),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    MeanRows(Var),
    SumCols(Var),
    SubRowMean(Var),
    StatsPool(Var),
    Unfold(Var, Vec<isize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    RowNormalize(Var, f64),
    Frame {
        input: Var,
        len: usize,
        hop: usize,
        window: Arc<Vec<f64>>,
    },
    AmSoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        scale: f64,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        len: usize,
        eps: f64,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
        channels: usize,
        len: usize,
    },
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
    /// Per-op cache (softmax probabilities, normalised activations, ...).
    pub aux: Option<Tensor>,
    pub aux2: Option<Tensor>,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Batch statistics recorded by a [`Graph::batch_norm`] node: row 0 is
    /// the per-channel mean, row 1 the per-channel biased variance.
    pub fn batch_stats(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { .. } => self.nodes[v.0].aux2.as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, op, needs_grad, None)
    }

    fn push_aux(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Option<Tensor>) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
            aux2: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input or parameter. `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// `1 × n` row from a slice.
    pub fn row(&mut self, values: &[f64], requires_grad: bool) -> Var {
        let t = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.leaf(t, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` (`1 × C`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    /// Exponential linear unit with unit scale (continuously differentiable).
    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        let ng = self.ng(a);
        self.push(v, Op::Elu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `ln(a + floor)`.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| (x + floor).ln());
        let ng = self.ng(a);
        self.push(v, Op::Ln(a, floor), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// `sqrt(a + eps)`.
    pub fn sqrt(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).mapv(|x| (x + eps).sqrt());
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `T × C -> 1 × C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty rows")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Row sums, `T × C -> T × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Subtract the column means from every row.
    pub fn sub_row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.mean_axis(Axis(0)).expect("mean over empty rows");
        let v = x - &m;
        let ng = self.ng(a);
        self.push(v, Op::SubRowMean(a), ng)
    }

    /// Mean and standard deviation over rows, `T × C -> 1 × 2C`.
    pub fn stats_pool(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (t, c) = x.dim();
        let mean = x.mean_axis(Axis(0)).expect("stats over empty rows");
        let mut out = Array2::zeros((1, 2 * c));
        for j in 0..c {
            let m = mean[j];
            let var = x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
            out[[0, j]] = m;
            out[[0, c + j]] = (var + eps).sqrt();
        }
        let ng = self.ng(a);
        self.push(out, Op::StatsPool(a), ng)
    }

    /// Context unfolding for time-delay layers with edge replication:
    /// `out[t, k*C + c] = x[clamp(t + offsets[k]), c]`.
    pub fn unfold(&mut self, a: Var, offsets: &[isize]) -> Var {
        let x = self.value(a);
        let (t, c) = x.dim();
        let k = offsets.len();
        let mut out = Array2::zeros((t, k * c));
        for ti in 0..t {
            for (ki, off) in offsets.iter().enumerate() {
                let src = (ti as isize + off).clamp(0, t as isize - 1) as usize;
                out.slice_mut(s![ti, ki * c..(ki + 1) * c]).assign(&x.row(src));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Unfold(a, offsets.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start, len), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Scale every row to unit L2 norm (`x / sqrt(|x|^2 + eps)`).
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut r in v.rows_mut() {
            let n = (r.dot(&r) + eps).sqrt();
            r /= n;
        }
        let ng = self.ng(a);
        self.push(v, Op::RowNormalize(a, eps), ng)
    }

    /// Cosine similarity of two `1 × d` rows, returned as `1 × 1`.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let na = self.row_normalize(a, eps);
        let nb = self.row_normalize(b, eps);
        let p = self.mul(na, nb);
        self.sum(p)
    }

    /// Overlapping windowed frames of a `1 × N` signal, `F × len`.
    pub fn frame(&mut self, a: Var, len: usize, hop: usize, window: Arc<Vec<f64>>) -> Var {
        let x = self.value(a);
        let n = x.ncols();
        assert!(n >= len, "signal shorter than one frame");
        assert_eq!(window.len(), len);
        let frames = (n - len) / hop + 1;
        let mut out = Array2::zeros((frames, len));
        for f in 0..frames {
            for i in 0..len {
                out[[f, i]] = x[[0, f * hop + i]] * window[i];
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::Frame {
                input: a,
                len,
                hop,
                window,
            },
            ng,
        )
    }

    /// Mean additive-margin softmax cross entropy over cosine logits
    /// (`B × K`), one label per row.
    pub fn am_softmax_ce(&mut self, logits: Var, labels: &[usize], scale: f64, margin: f64) -> Var {
        let l = self.value(logits);
        let (b, k) = l.dim();
        assert_eq!(labels.len(), b);
        let mut probs = Array2::zeros((b, k));
        let mut loss = 0.0;
        for i in 0..b {
            let z: Vec<f64> = (0..k)
                .map(|j| scale * (l[[i, j]] - if j == labels[i] { margin } else { 0.0 }))
                .collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[[i, j]] = (z[j] - mx).exp() / se;
            }
            loss += -(z[labels[i]] - mx - se.ln());
        }
        let v = Array2::from_elem((1, 1), loss / b as f64);
        let ng = self.ng(logits);
        self.push_aux(
            v,
            Op::AmSoftmaxCe {
                logits,
                labels: labels.to_vec(),
                scale,
            },
            ng,
            Some(probs),
        )
    }

    /// Strided 1-D convolution. `weight` is `Cout × (Cin*K)` (index
    /// `ci*K + k`), `bias` is `1 × Cout`. Rows of `input` are
    /// `Cin*Lin` channel-major; output rows are `Cout*Lout`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let out = crate::ops::conv1d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    /// Strided 1-D transposed convolution. `weight` is `Cin × (Cout*K)`.
    pub fn conv_transpose1d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let out = crate::ops::deconv1d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    /// Training-mode batch normalisation over the batch and time positions
    /// of channel-major rows. Batch statistics are retrievable through
    /// [`Graph::batch_stats`].
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, channels: usize, len: usize, eps: f64) -> Var {
        let (out, xhat, stats) = crate::ops::batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            channels,
            len,
            eps,
        );
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let v = self.push_aux(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                channels,
                len,
                eps,
            },
            ng,
            Some(xhat),
        );
        self.nodes[v.0].aux2 = Some(stats);
        v
    }

    /// Per-channel `x * scale + shift` on channel-major rows (inference-mode
    /// batch normalisation).
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var, channels: usize, len: usize) -> Var {
        let x = self.value(input);
        let sc = self.value(scale);
        let sh = self.value(shift);
        let mut out = x.clone();
        for mut r in out.rows_mut() {
            for c in 0..channels {
                for t in 0..len {
                    let idx = c * len + t;
                    r[idx] = r[idx] * sc[[0, c]] + sh[[0, c]];
                }
            }
        }
        let ng = self.ng(input) || self.ng(scale) || self.ng(shift);
        self.push(
            out,
            Op::ChannelAffine {
                input,
                scale,
                shift,
                channels,
                len,
            },
            ng,
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals);
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(out, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            crate::ops::backward_node(self, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}
