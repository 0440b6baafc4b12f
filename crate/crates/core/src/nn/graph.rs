//! Reverse-mode automatic differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse once and keeps the gradient of every leaf. Sequences are rows,
//! features are columns; every tensor in the model fits that shape, so there
//! is no general n-d machinery here.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask, `true` where attention is allowed.
pub type Mask = Array2<bool>;

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Mat,
        targets: Vec<Option<usize>>,
        count: usize,
        smoothing: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grads: Vec<Option<Mat>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with an optional mask. Masked entries are exactly zero;
/// a fully masked row yields all zeros.
pub fn masked_softmax(x: ArrayView2<f64>, mask: Option<&Mask>) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let allowed = |c: usize| mask.map_or(true, |m| m[[r, c]]);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|e| e / total);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant or differentiable input; its gradient is available after
    /// [`Graph::backward`] through [`Graph::grad`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a parameter. Repeated calls for the same parameter return
    /// the same node so that gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expected a single row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expected a single row");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Row-wise layer normalization with learned `1×d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax; masked entries get exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        if let Some(m) = mask {
            assert_eq!(m.dim(), self.shape(a), "softmax: mask shape mismatch");
        }
        let value = masked_softmax(self.value(a).view(), mask);
        self.push(value, Op::Softmax(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end))
    }

    /// Rows of `a` at `indices`, in order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut value = Mat::zeros((indices.len(), av.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&av.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise mean, `n×d → 1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    /// Sum of all entries, `→ 1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        self.cross_entropy_smoothed(logits, targets, 0.0)
    }

    /// Cross-entropy against the target distribution
    /// `(1 - smoothing)·onehot + smoothing/V`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: row mismatch");
        let logp = log_softmax_rows(lv.view());
        let mut total = 0.0;
        let mut count = 0;
        let vocab = lv.ncols() as f64;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= (1.0 - smoothing) * logp[[r, t]];
                if smoothing != 0.0 {
                    total -= smoothing * logp.row(r).sum() / vocab;
                }
                count += 1;
            }
        }
        assert!(count > 0, "cross_entropy: no counted positions");
        let probs = logp.mapv(f64::exp);
        let value = Mat::from_elem((1, 1), total / count as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
                smoothing,
            },
        )
    }

    /// Back-propagates from a scalar (`1×1`) node.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(&mut grads, *a, gy.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&gy));
                }
                Op::MatMulT(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(&mut grads, *a, gy.dot(bv));
                    acc(&mut grads, *b, gy.t().dot(av));
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(&mut grads, *a, &gy * bv);
                    acc(&mut grads, *b, &gy * av);
                }
                Op::MulRow(a, row) => {
                    let av = &self.nodes[a.0].value;
                    let rv = &self.nodes[row.0].value;
                    let grow = (&gy * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &gy * rv);
                    acc(&mut grads, *row, grow);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy * *c),
                Op::Tanh(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[gamma.0].value;
                    let d = xhat.ncols() as f64;
                    acc(
                        &mut grads,
                        *gamma,
                        (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    acc(&mut grads, *beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &gy * gv;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut g = gy;
                    for (mut grow, prow) in g.rows_mut().into_iter().zip(p.rows()) {
                        let dot = grow.dot(&prow);
                        Zip::from(&mut grow)
                            .and(&prow)
                            .for_each(|g, &p| *g = p * (*g - dot));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SliceRows(a, start, end) => {
                    let mut g = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    g.slice_mut(s![*start..*end, ..]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(a, indices) => {
                    let mut g = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = g.row_mut(i);
                        row += &gy.row(r);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start, end) => {
                    let mut g = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    g.slice_mut(s![.., *start..*end]).assign(&gy);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        acc(
                            &mut grads,
                            *p,
                            gy.slice(s![offset..offset + rows, ..]).to_owned(),
                        );
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        acc(
                            &mut grads,
                            *p,
                            gy.slice(s![.., offset..offset + cols]).to_owned(),
                        );
                        offset += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let n = av.nrows() as f64;
                    let g = Mat::from_shape_fn(av.raw_dim(), |(_, c)| gy[[0, c]] / n);
                    acc(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Mat::from_elem(self.nodes[a.0].value.raw_dim(), gy[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    count,
                    smoothing,
                } => {
                    let scale = gy[[0, 0]] / *count as f64;
                    let uniform = smoothing / probs.ncols() as f64;
                    let mut g = Mat::zeros(probs.raw_dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = g.row_mut(r);
                            row.assign(&probs.row(r));
                            if *smoothing != 0.0 {
                                row.mapv_inplace(|p| p - uniform);
                            }
                            row[t] -= 1.0 - smoothing;
                            row *= scale;
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
            }
        }
        self.grads = grads;
    }

    /// Gradient of the last `backward` root with respect to the leaf `v`
    /// (an input or parameter); zeros when `v` did not influence the root.
    /// Interior gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Mat {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Mat::zeros(self.nodes[v.0].value.raw_dim()))
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<_> = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, self.grad(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
