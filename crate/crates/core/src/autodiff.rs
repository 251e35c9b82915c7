//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass appends nodes to a [`Tape`]; `backward` walks the tape in
//! reverse and accumulates gradients of a scalar root with respect to every
//! differentiable leaf. The two non-differentiable nodes (the uniform
//! quantizer and the hard binarizer) carry declared straight-through
//! surrogates: clipped identity, passing gradient only where the
//! pre-discretization input lies in `[-1, 1]`.

use crate::quantizer;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `y = x W^T + b` with `W` stored `[out, in]`, broadcast over rows.
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Softplus { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Mean { x: Var },
    ConcatCols { xs: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    /// Each row of `x` scaled by the matching element of `s`.
    RowScale { x: Var, s: Var },
    /// Same data, new shape.
    Reshape { x: Var },
    /// Per-row `logsumexp(logits) - logits[label]`, in nats.
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    /// Per-row divergence of `N(mu, diag sigma^2)` from the standard normal.
    KlStdNormal { mu: Var, sigma: Var },
    QuantizeSte { x: Var },
    BinarizeSte { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

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

/// Stable `ln(sum(exp(row)))`.
fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of a logit row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input (data, sampled noise, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf; gradients are collected for it on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let wshape = wv.shape();
        assert_eq!(wshape.len(), 2, "weight must be a matrix, got {:?}", wshape);
        let (out_dim, in_dim) = (wshape[0], wshape[1]);
        assert_eq!(bv.shape(), [out_dim], "bias shape {:?} != [{}]", bv.shape(), out_dim);
        assert_eq!(
            xv.cols(),
            in_dim,
            "input width {} != weight in-dim {}",
            xv.cols(),
            in_dim
        );
        let rows = xv.rows();
        let mut out = vec![0.0; rows * out_dim];
        let xd = xv.data();
        let wd = wv.data();
        let bd = bv.data();
        for m in 0..rows {
            let xrow = &xd[m * in_dim..(m + 1) * in_dim];
            let orow = &mut out[m * out_dim..(m + 1) * out_dim];
            for o in 0..out_dim {
                let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                let mut acc = 0.0;
                for i in 0..in_dim {
                    acc += xrow[i] * wrow[i];
                }
                orow[o] = acc + bd[o];
            }
        }
        let value = if xv.shape().len() == 2 {
            Tensor::matrix(rows, out_dim, out).unwrap()
        } else {
            Tensor::from_vec(out)
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Relu { x }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| softplus(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Softplus { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.tanh()).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Tanh { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, c }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of empty tensor");
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let rows = self.value(xs[0]).rows();
        let rank2 = self.value(xs[0]).shape().len() == 2;
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!(t.rows(), rows, "concat row mismatch");
            let c = t.cols();
            for m in 0..rows {
                out[m * total + off..m * total + off + c].copy_from_slice(t.row(m));
            }
            off += c;
        }
        let value = if rank2 {
            Tensor::matrix(rows, total, out).unwrap()
        } else {
            Tensor::from_vec(out)
        };
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatCols { xs: xs.to_vec() }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let cols = v.cols();
        assert!(start + len <= cols, "slice {}..{} out of {} columns", start, start + len, cols);
        let rows = v.rows();
        let mut out = vec![0.0; rows * len];
        for m in 0..rows {
            out[m * len..(m + 1) * len].copy_from_slice(&v.row(m)[start..start + len]);
        }
        let value = if v.shape().len() == 2 {
            Tensor::matrix(rows, len, out).unwrap()
        } else {
            Tensor::from_vec(out)
        };
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start, len }, ng)
    }

    /// Reinterpret the value under a new shape of the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x);
        let value = Tensor::new(shape, v.data().to_vec()).expect("reshape element count");
        let ng = self.needs(x);
        self.push(value, Op::Reshape { x }, ng)
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let rows = xv.rows();
        assert_eq!(sv.len(), rows, "row_scale needs one scale per row");
        let cols = xv.cols();
        let mut out = vec![0.0; rows * cols];
        for m in 0..rows {
            let f = sv.data()[m];
            for (o, &v) in out[m * cols..(m + 1) * cols].iter_mut().zip(xv.row(m)) {
                *o = v * f;
            }
        }
        let value = if xv.shape().len() == 2 {
            Tensor::matrix(rows, cols, out).unwrap()
        } else {
            Tensor::from_vec(out)
        };
        let ng = self.needs(x) || self.needs(s);
        self.push(value, Op::RowScale { x, s }, ng)
    }

    /// Cross-entropy of each row's softmax against its integer label, in
    /// nats, computed via log-sum-exp. Rank-1 logits produce a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let rows = v.rows();
        let classes = v.cols();
        assert_eq!(labels.len(), rows, "one label per row");
        for &l in labels {
            assert!(l < classes, "label {} out of range for {} classes", l, classes);
        }
        let mut out = Vec::with_capacity(rows);
        for (m, &label) in labels.iter().enumerate() {
            let row = v.row(m);
            out.push(logsumexp(row) - row[label]);
        }
        let value = if v.shape().len() == 2 {
            Tensor::from_vec(out)
        } else {
            Tensor::scalar(out[0])
        };
        let ng = self.needs(logits);
        self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            ng,
        )
    }

    /// Row-wise `sum_i ((mu_i^2 + sigma_i^2 - 1)/2 - ln sigma_i)`, in nats.
    /// Panics on non-positive sigma.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Var {
        let (mv, sv) = (self.value(mu), self.value(sigma));
        assert_eq!(mv.shape(), sv.shape(), "kl shape mismatch");
        let rows = mv.rows();
        let mut out = Vec::with_capacity(rows);
        for m in 0..rows {
            let mut acc = 0.0;
            for (&u, &s) in mv.row(m).iter().zip(sv.row(m)) {
                assert!(s > 0.0, "kl_std_normal needs sigma > 0, got {}", s);
                acc += (u * u + s * s - 1.0) / 2.0 - s.ln();
            }
            out.push(acc);
        }
        let value = if mv.shape().len() == 2 {
            Tensor::from_vec(out)
        } else {
            Tensor::scalar(out[0])
        };
        let ng = self.needs(mu) || self.needs(sigma);
        self.push(value, Op::KlStdNormal { mu, sigma }, ng)
    }

    /// Uniform quantization to the `bits`-per-dimension grid; forward value
    /// is the dequantized level, backward is the clipped-identity surrogate.
    pub fn quantize_ste(&mut self, x: Var, bits: u32) -> Var {
        let v = self.value(x);
        let data = quantizer::dequantize_values(v.data(), bits);
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::QuantizeSte { x }, ng)
    }

    /// Hard threshold at zero (inclusive) to `{0, 1}`; backward is the
    /// clipped-identity surrogate on the pre-activation.
    pub fn binarize_ste(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a >= 0.0 { 1.0 } else { 0.0 }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::BinarizeSte { x }, ng)
    }

    /// Reverse pass from a scalar root. Panics if the root is not scalar.
    pub fn backward(&self, root: Var) -> Gradients {
        let rv = &self.nodes[root.0].value;
        assert!(rv.is_scalar(), "backward root must be scalar, got {:?}", rv.shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros(rv.shape().to_vec());
        seed.data_mut()[0] = 1.0;
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().unwrap();
            self.backprop_node(id, g, before);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if self.needs(*x) {
                    let dst = slot(grads, *x, xv.shape());
                    for m in 0..rows {
                        let grow = &gd[m * out_dim..(m + 1) * out_dim];
                        let drow = &mut dst[m * in_dim..(m + 1) * in_dim];
                        for o in 0..out_dim {
                            let go = grow[o];
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &wv.data()[o * in_dim..(o + 1) * in_dim];
                            for i in 0..in_dim {
                                drow[i] += go * wrow[i];
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let dst = slot(grads, *w, wv.shape());
                    for m in 0..rows {
                        let grow = &gd[m * out_dim..(m + 1) * out_dim];
                        let xrow = xv.row(m);
                        for o in 0..out_dim {
                            let go = grow[o];
                            if go == 0.0 {
                                continue;
                            }
                            let drow = &mut dst[o * in_dim..(o + 1) * in_dim];
                            for i in 0..in_dim {
                                drow[i] += go * xrow[i];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let dst = slot(grads, *b, &[out_dim]);
                    for m in 0..rows {
                        for o in 0..out_dim {
                            dst[o] += gd[m * out_dim + o];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dst = slot(grads, *x, xv.shape());
                    // subgradient at exactly 0 is 0
                    for ((d, &gu), &xi) in dst.iter_mut().zip(gd).zip(xv.data()) {
                        if xi > 0.0 {
                            *d += gu;
                        }
                    }
                }
            }
            Op::Softplus { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dst = slot(grads, *x, xv.shape());
                    for ((d, &gu), &xi) in dst.iter_mut().zip(gd).zip(xv.data()) {
                        *d += gu * sigmoid(xi);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let yv = &node.value;
                    let dst = slot(grads, *x, yv.shape());
                    for ((d, &gu), &yi) in dst.iter_mut().zip(gd).zip(yv.data()) {
                        *d += gu * (1.0 - yi * yi);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let shape = self.value(*v).shape().to_vec();
                        let dst = slot(grads, *v, &shape);
                        for (d, &gu) in dst.iter_mut().zip(gd) {
                            *d += gu;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let dst = slot(grads, *a, bv.shape());
                    for ((d, &gu), &bi) in dst.iter_mut().zip(gd).zip(bv.data()) {
                        *d += gu * bi;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let dst = slot(grads, *b, av.shape());
                    for ((d, &gu), &ai) in dst.iter_mut().zip(gd).zip(av.data()) {
                        *d += gu * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let dst = slot(grads, *x, &shape);
                    for (d, &gu) in dst.iter_mut().zip(gd) {
                        *d += gu * c;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let dst = slot(grads, *x, &shape);
                    let gu = gd[0];
                    for d in dst.iter_mut() {
                        *d += gu;
                    }
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    let shape = xv.shape().to_vec();
                    let dst = slot(grads, *x, &shape);
                    let gu = gd[0] / n;
                    for d in dst.iter_mut() {
                        *d += gu;
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    if self.needs(v) {
                        let shape = self.value(v).shape().to_vec();
                        let dst = slot(grads, v, &shape);
                        for m in 0..rows {
                            for j in 0..c {
                                dst[m * c + j] += gd[m * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let rows = xv.rows();
                    let shape = xv.shape().to_vec();
                    let dst = slot(grads, *x, &shape);
                    for m in 0..rows {
                        for j in 0..*len {
                            dst[m * cols + start + j] += gd[m * len + j];
                        }
                    }
                }
            }
            Op::RowScale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let rows = xv.rows();
                let cols = xv.cols();
                if self.needs(*x) {
                    let dst = slot(grads, *x, xv.shape());
                    for m in 0..rows {
                        let f = sv.data()[m];
                        for j in 0..cols {
                            dst[m * cols + j] += gd[m * cols + j] * f;
                        }
                    }
                }
                if self.needs(*s) {
                    let dst = slot(grads, *s, sv.shape());
                    for m in 0..rows {
                        let mut acc = 0.0;
                        for (gu, xi) in gd[m * cols..(m + 1) * cols].iter().zip(xv.row(m)) {
                            acc += gu * xi;
                        }
                        dst[m] += acc;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let dst = slot(grads, *x, &shape);
                    for (d, &gu) in dst.iter_mut().zip(gd) {
                        *d += gu;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let rows = lv.rows();
                    let classes = lv.cols();
                    let shape = lv.shape().to_vec();
                    let dst = slot(grads, *logits, &shape);
                    let mut probs = vec![0.0; classes];
                    for m in 0..rows {
                        let gu = gd[m];
                        softmax_row(lv.row(m), &mut probs);
                        for c in 0..classes {
                            let indicator = if c == labels[m] { 1.0 } else { 0.0 };
                            dst[m * classes + c] += gu * (probs[c] - indicator);
                        }
                    }
                }
            }
            Op::KlStdNormal { mu, sigma } => {
                let mv = self.value(*mu);
                let sv = self.value(*sigma);
                let rows = mv.rows();
                let cols = mv.cols();
                if self.needs(*mu) {
                    let dst = slot(grads, *mu, mv.shape());
                    for m in 0..rows {
                        let gu = gd[m];
                        for (d, &u) in dst[m * cols..(m + 1) * cols].iter_mut().zip(mv.row(m)) {
                            *d += gu * u;
                        }
                    }
                }
                if self.needs(*sigma) {
                    let dst = slot(grads, *sigma, sv.shape());
                    for m in 0..rows {
                        let gu = gd[m];
                        for (d, &s) in dst[m * cols..(m + 1) * cols].iter_mut().zip(sv.row(m)) {
                            *d += gu * (s - 1.0 / s);
                        }
                    }
                }
            }
            Op::QuantizeSte { x } | Op::BinarizeSte { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dst = slot(grads, *x, xv.shape());
                    for ((d, &gu), &xi) in dst.iter_mut().zip(gd).zip(xv.data()) {
                        if xi.abs() <= 1.0 {
                            *d += gu;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient accumulator for `v`, allocated on first touch.
fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_map() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::from_vec(vec![3.0, -1.0]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_zero_weights_gives_bias() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![5.0, 5.0]));
        let x = tape.constant(Tensor::from_vec(vec![7.0, -2.0, 0.5]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_hand_product() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        // gradient at exactly 0 is fixed at 0
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-3.0, -0.5]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![0.0; 10]));
        let loss = tape.softmax_cross_entropy(logits, &[3]);
        assert!((tape.value(loss).item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![30.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]);
        assert!(tape.value(loss).item() <= 1e-12);
    }

    #[test]
    fn cross_entropy_two_class() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = tape.softmax_cross_entropy(logits, &[1]);
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let row = vec![0.3, -1.2, 2.5, 0.0];
        for c in [-100.0, -1.0, 0.5, 1e4] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_vec(row.clone()));
            let la = tape.softmax_cross_entropy(a, &[2]);
            let shifted: Vec<f64> = row.iter().map(|&v| v + c).collect();
            let b = tape.constant(Tensor::from_vec(shifted));
            let lb = tape.softmax_cross_entropy(b, &[2]);
            let (va, vb) = (tape.value(la).item(), tape.value(lb).item());
            assert!((va - vb).abs() < 1e-10, "shift {} broke invariance: {} vs {}", c, va, vb);
        }
    }

    #[test]
    #[should_panic(expected = "label")]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        tape.softmax_cross_entropy(logits, &[2]);
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let kl = tape.kl_std_normal(mu, sigma);
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![1.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![1.0]));
        let kl = tape.kl_std_normal(mu, sigma);
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);

        let mu = tape.constant(Tensor::from_vec(vec![0.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![2.0]));
        let kl = tape.kl_std_normal(mu, sigma);
        let expect = (0.0 + 4.0 - 1.0) / 2.0 - 2.0f64.ln();
        assert!((tape.value(kl).item() - expect).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "sigma > 0")]
    fn kl_rejects_nonpositive_sigma() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_vec(vec![0.0]));
        let sigma = tape.constant(Tensor::from_vec(vec![0.0]));
        tape.kl_std_normal(mu, sigma);
    }

    #[test]
    fn grad_of_unused_param_is_absent() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_vec(vec![1.0]));
        let x = tape.param(Tensor::from_vec(vec![2.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s);
        assert!(grads.wrt(p).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn grad_linear_in_weight() {
        // loss = w * x with x = 3 -> d loss / d w = 3
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![0.5]));
        let x = tape.constant(Tensor::from_vec(vec![3.0]));
        let y = tape.mul(w, x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(w).unwrap().data(), &[3.0]);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        tape.backward(x);
    }

    #[test]
    fn binarize_threshold_inclusive() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(vec![-0.3, 0.0]));
        let a = tape.binarize_ste(s);
        assert_eq!(tape.value(a).data(), &[0.0, 1.0]);
    }

    #[test]
    fn quantize_ste_surrogate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.3, 1.7]));
        let q = tape.quantize_ste(x, 1);
        assert_eq!(tape.value(q).data(), &[1.0, 1.0]);
        let s = tape.sum(q);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice_cols(c, 2, 1);
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
    }
}
