use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to the reference distribution inside
/// [`Graph::kl_divergence`] before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded operation, for graph inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    AddBias,
    Relu,
    MaxPool2,
    Reshape,
    Concat,
    Softmax,
    GatherRows,
    CrossEntropy,
    KlDivergence,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        // unfolded input, shared by convolutions over the same input
        cols: Arc<Vec<f64>>,
    },
    AddBias(Var, Var),
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        p: Var,
        q: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Exp(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax(_) => OpKind::Softmax,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDivergence { .. } => OpKind::KlDivergence,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Exp(_) => OpKind::Exp,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::KlDivergence { p: a, q: b } => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Relu(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Exp(a)
            | Op::MaxPool2 { input: a, .. }
            | Op::GatherRows { input: a, .. }
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    tensor: Tensor,
}

/// An append-only tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    unfolded: HashMap<(usize, usize, usize, usize), Arc<Vec<f64>>>,
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

    /// Records a leaf. Its `requires_grad` flag decides whether gradients
    /// are accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            tensor,
        });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a leaf that does not require a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Shorthand for a leaf that requires a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.grad()
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].tensor.item()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Kind of every recorded node, in tape order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Var {
        let rg = op.inputs().iter().any(|&i| self.needs(i));
        let tensor = Tensor::from_parts(shape, values).with_grad(rg);
        self.nodes.push(Node { op, tensor });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn rows_cols(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected a 2-d tensor, got shape {:?}", self.shape(v)),
            )),
        }
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols("matmul", a)?;
        let (k2, n) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out))
    }

    /// Stride-1 2-d convolution of `(N, C, H, W)` input with `(O, C, KH, KW)`
    /// weights and symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let (&[batch, in_ch, h, w], &[out_ch, wc, kh, kw]) = (xs, ws) else {
            return Err(self.shape_err("conv2d", input, weight));
        };
        if wc != in_ch || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(self.shape_err("conv2d", input, weight));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        let key = (input.0, kh, kw, pad);
        let cols = match self.unfolded.get(&key) {
            Some(c) => Arc::clone(c),
            None => {
                let c = Arc::new(im2col(self.value(input), &geom));
                self.unfolded.insert(key, Arc::clone(&c));
                c
            }
        };
        let (rows, pix) = (geom.rows(), geom.oh * geom.ow);
        let mut planes = vec![0.0; out_ch * rows];
        gemm(
            out_ch,
            geom.patch(),
            rows,
            self.value(weight),
            false,
            &cols,
            false,
            &mut planes,
            false,
        );
        let mut out = vec![0.0; rows * out_ch];
        for o in 0..out_ch {
            for n in 0..batch {
                out[(n * out_ch + o) * pix..][..pix]
                    .copy_from_slice(&planes[o * rows + n * pix..][..pix]);
            }
        }
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            vec![batch, out_ch, geom.oh, geom.ow],
            out,
        ))
    }

    /// Adds a per-channel bias; channels are axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(bias) != [xs[1]] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let ch = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b[i % ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let shape = xs.to_vec();
        Ok(self.push(Op::AddBias(x, bias), shape, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Relu(x), shape, out))
    }

    /// 2x2 max pooling with stride 2 over `(N, C, H, W)`; H and W must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::invalid(
                "max_pool2",
                format!("expected (N, C, H, W), got {:?}", self.shape(x)),
            ));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "max_pool2",
                format!("spatial extent {h}x{w} is not even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Op::MaxPool2 { input: x, argmax }, vec![n, c, oh, ow], out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.tensor(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape, out))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::invalid("flatten", "cannot flatten a scalar"));
        }
        let rest = s[1..].iter().product();
        let shape = vec![s[0], rest];
        self.reshape(x, shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(self.shape_err("concat", first, v));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
        ))
    }

    /// Row-wise softmax of a `(batch, classes)` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols("softmax", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Softmax(x), shape, out))
    }

    /// Selects rows of a 2-d tensor (with repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            vec![rows.len(), c],
            out,
        ))
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.rows_cols("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {l} at row {i} outside [0, {c})"),
            ));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &label) in lv.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / n as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![],
            vec![loss],
        ))
    }

    /// Mean over rows of `sum_c p_c ln(p_c / max(q_c, KL_FLOOR))`. Both
    /// arguments are `(batch, classes)` probability tensors.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let (n, c) = self.rows_cols("kl_divergence", p)?;
        for (name, v) in [("p", p), ("q", q)] {
            let vals = self.value(v);
            if let Some(bad) = vals.iter().find(|&&x| x.is_nan() || x < 0.0) {
                return Err(Error::invalid(
                    "kl_divergence",
                    format!("{name} has a negative or NaN entry {bad}"),
                ));
            }
            for (i, row) in vals.chunks(c).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(
                        "kl_divergence",
                        format!("row {i} of {name} sums to {s}, not 1"),
                    ));
                }
            }
        }
        let (pv, qv) = (self.value(p), self.value(q));
        let total: f64 = pv
            .iter()
            .zip(qv)
            .map(|(&a, &b)| {
                if a > 0.0 {
                    a * (a / b.max(KL_FLOOR)).ln()
                } else {
                    0.0
                }
            })
            .sum();
        Ok(self.push(Op::KlDivergence { p, q }, vec![], vec![total / n as f64]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Scale(x, factor), shape, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        Ok(self.push(Op::Sum(x), vec![], vec![s]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.tensor(x).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Exp(x), shape, out))
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Back-propagates from a scalar `loss`, adding `d loss / d node` into
    /// the gradient buffer of every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensor(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.needs(loss) {
            return Ok(());
        }
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = pending[i].take() else {
                continue;
            };
            self.backprop_node(i, &dout, &mut pending);
            pending[i] = Some(dout);
        }
        for (node, g) in self.nodes.iter_mut().zip(pending) {
            if let Some(g) = g {
                if node.tensor.requires_grad() {
                    for (acc, v) in node.tensor.grad_mut().iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, dout: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.needs(v) {
                let n = self.tensor(v).len();
                let buf = pending[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| gemm(m, n, k, dout, false, bv, true, g, true));
                acc(*b, &mut |g| gemm(k, m, n, av, true, dout, false, g, true));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let (rows, pix, oc) = (geom.rows(), geom.oh * geom.ow, geom.out_ch);
                let mut dplanes = vec![0.0; oc * rows];
                for o in 0..oc {
                    for n in 0..geom.batch {
                        dplanes[o * rows + n * pix..][..pix]
                            .copy_from_slice(&dout[(n * oc + o) * pix..][..pix]);
                    }
                }
                acc(*weight, &mut |g| {
                    gemm(oc, rows, geom.patch(), &dplanes, false, cols, true, g, true)
                });
                let wv = self.value(*weight);
                acc(*input, &mut |g| {
                    let mut dcols = vec![0.0; geom.patch() * rows];
                    gemm(
                        geom.patch(),
                        oc,
                        rows,
                        wv,
                        true,
                        &dplanes,
                        false,
                        &mut dcols,
                        false,
                    );
                    col2im(&dcols, geom, g);
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, dout));
                let ch = self.shape(*b)[0];
                let inner: usize = self.shape(*x)[2..].iter().product();
                acc(*b, &mut |g| {
                    for (j, chunk) in dout.chunks(inner).enumerate() {
                        g[j % ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let out = node.tensor.values();
                acc(*x, &mut |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dout).zip(out) {
                        if o > 0.0 {
                            *gi += d;
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &mut |g| {
                for (&src, &d) in argmax.iter().zip(dout) {
                    g[src] += d;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, dout)),
            Op::Concat { inputs, axis } => {
                let shape = node.tensor.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    acc(v, &mut |g| {
                        for o in 0..outer {
                            add_into(
                                &mut g[o * chunk..(o + 1) * chunk],
                                &dout[o * total + offset..][..chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Softmax(x) => {
                let c = node.tensor.shape()[1];
                let s = node.tensor.values();
                acc(*x, &mut |g| {
                    for ((gr, dr), sr) in g.chunks_mut(c).zip(dout.chunks(c)).zip(s.chunks(c)) {
                        let dot: f64 = dr.iter().zip(sr).map(|(a, b)| a * b).sum();
                        for ((gi, &d), &si) in gr.iter_mut().zip(dr).zip(sr) {
                            *gi += si * (d - dot);
                        }
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let c = node.tensor.shape()[1];
                acc(*input, &mut |g| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut g[src * c..(src + 1) * c], &dout[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n.max(1);
                let scale = dout[0] / n as f64;
                acc(*logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            g[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::KlDivergence { p, q } => {
                let n = self.shape(*p)[0];
                let scale = dout[0] / n as f64;
                let (pv, qv) = (self.value(*p), self.value(*q));
                acc(*p, &mut |g| {
                    for ((gi, &a), &b) in g.iter_mut().zip(pv).zip(qv) {
                        if a > 0.0 {
                            *gi += scale * ((a / b.max(KL_FLOOR)).ln() + 1.0);
                        }
                    }
                });
                acc(*q, &mut |g| {
                    for ((gi, &a), &b) in g.iter_mut().zip(pv).zip(qv) {
                        if b > KL_FLOOR {
                            *gi -= scale * a / b;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dout));
                acc(*b, &mut |g| add_into(g, dout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dout));
                acc(*b, &mut |g| {
                    g.iter_mut().zip(dout).for_each(|(x, d)| *x -= d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dout).zip(bv) {
                        *gi += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dout).zip(av) {
                        *gi += d * x;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |g| {
                g.iter_mut().zip(dout).for_each(|(gi, d)| *gi += f * d)
            }),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += dout[0])),
            Op::Exp(x) => {
                let out = node.tensor.values();
                acc(*x, &mut |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dout).zip(out) {
                        *gi += d * o;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_channel_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 8, 3, 4]));
        let b = g.constant(Tensor::zeros(vec![1, 8, 3, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 16, 3, 4]);
    }

    #[test]
    fn concat_interleaves_per_outer_index() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let vals = [0.3, -1.2, 4.0, 2.5, 0.0, -0.7, 1.1, 9.0, -3.3];
        let a = g.constant(t(&[3, 3], &vals));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), &vals);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 5]));
        let l = g.cross_entropy(x, &[0, 2, 4]).unwrap();
        assert!((g.scalar(l).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_vanishes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5], &[20.0, 0.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.scalar(l).unwrap() < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 5]));
        assert!(g.cross_entropy(x, &[5]).is_err());
    }

    #[test]
    fn kl_identity_and_ln2() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let q = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let kl = g.kl_divergence(p, q).unwrap();
        assert!((g.scalar(kl).unwrap() - 2f64.ln()).abs() < 1e-15);
        let r = g.constant(t(&[2, 3], &[0.2, 0.3, 0.5, 0.1, 0.1, 0.8]));
        let kl = g.kl_divergence(r, r).unwrap();
        assert_eq!(g.scalar(kl).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_negative_entries() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[1.5, -0.5]));
        let q = g.constant(t(&[1, 2], &[0.5, 0.5]));
        assert!(g.kl_divergence(p, q).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 300.0, 299.0, -10.0]));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 3, 4]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::new();
        let w = g.param(t(&[2, 2], &[0.3, -0.2, 0.9, 0.4]));
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
        let h = g.matmul(x, w).unwrap();
        let l = g.cross_entropy(h, &[0, 1, 1]).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(w).to_vec();
        g.backward(l).unwrap();
        for (a, b) in g.grad(w).iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
        g.zero_grad();
        assert!(g.grad(w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), &[0.0, 0.0]);
        assert_eq!(g.grad(b), &[1.0, 2.0]);
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.relu(a).unwrap();
        let c = g.softmax(b).unwrap();
        let d = g.concat(&[b, c], 1).unwrap();
        let e = g.sum(d).unwrap();
        for v in [b, c, d, e] {
            assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
        }
        assert_eq!(g.kind(d), OpKind::Concat);
    }

    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, _, kh, kw] = ws;
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        s += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for pad in [0, 1, 2] {
            let xs = [2, 3, 6, 5];
            let ws = [4, 3, 3, 2];
            let x: Vec<f64> = (0..xs.iter().product())
                .map(|i| (i as f64 * 0.37).sin())
                .collect();
            let w: Vec<f64> = (0..ws.iter().product())
                .map(|i| (i as f64 * 0.91).cos())
                .collect();
            let mut g = Graph::new();
            let xv = g.constant(t(&xs, &x));
            let wv = g.constant(t(&ws, &w));
            let y = g.conv2d(xv, wv, pad).unwrap();
            let want = naive_conv(&x, xs, &w, ws, pad);
            assert_eq!(g.shape(y), &[2, 4, 6 + 2 * pad - 2, 5 + 2 * pad - 1]);
            for (a, b) in g.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convolutions_share_unfolded_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec((0..16).map(f64::from).collect()));
        let x = g.reshape(x, vec![1, 1, 4, 4]).unwrap();
        let w1 = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let w2 = g.constant(t(&[1, 1, 2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let a = g.conv2d(x, w1, 0).unwrap();
        let b = g.conv2d(x, w2, 0).unwrap();
        assert_eq!(g.unfolded.len(), 1);
        assert_eq!(g.value(a), &[0., 1., 2., 4., 5., 6., 8., 9., 10.]);
        assert_eq!(g.value(b), &[5., 6., 7., 9., 10., 11., 13., 14., 15.]);
    }
}
