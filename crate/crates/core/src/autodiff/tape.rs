//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in execution order, so node ids are already a
//! topological order; `backward` walks them in reverse. Every op checks its
//! output for NaN/Inf and fails with [`Error::NonFinite`] naming the op.

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Negate,
    Scale(f64),
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Prelu { x: Var, alpha: Var },
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, R),
    Softplus(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<R>,
        floored: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<R> {
    name: &'static str,
    value: Tensor<R>,
    requires_grad: bool,
    op: Op<R>,
}

/// Recorded computation. Single-threaded; build one tape per unit of work.
#[derive(Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    fault: Option<&'static str>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it (constant, detached, or not on the loss path).
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materialises zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<R> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![R::zero(); len])
    }
}

fn dims2<R: Real>(op: &'static str, t: &Tensor<R>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, len: usize, f: impl FnOnce(&mut [R])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![R::zero(); len]);
    f(slot);
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Deliberately breaks the backward rule of every `op` node (its incoming
    /// gradient is doubled). Only useful for showing that gradient checks
    /// catch a wrong rule.
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, inputs: &[Var], op: Op<R>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing upstream needs a gradient: drop the saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            name,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            name: "leaf",
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            name: "detach",
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == R::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, &[a, b], Op::Matmul(a, b))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul_nt", value, &[a, b], Op::MatmulNt(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, &[a, b], op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= R::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        self.unary("negate", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = R::from_f64(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Dispatch over the pointwise kinds. `b` is required for binary kinds.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| b.ok_or_else(|| Error::Usage(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Negate => self.negate(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    /// Adds the vector `bias` (length = trailing dim of `a`) to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} against rows of width {c}", self.shape(bias)),
            ));
        }
        let bd = self.value(bias).data().to_vec();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bd).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add_row", value, &[a, bias], Op::AddRow(a, bias))
    }

    /// PReLU with one learnable slope per feature column.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(alpha).len() != c {
            return Err(Error::dim(
                "prelu",
                format!("slopes {:?} against width {c}", self.shape(alpha)),
            ));
        }
        let al = self.value(alpha).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&al).map(|(&v, &s)| if v > R::zero() { v } else { s * v }))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("prelu", value, &[x, alpha], Op::Prelu { x, alpha })
    }

    /// Feature-axis concatenation of matrices sharing their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let (rows, _) = dims2("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat", self.value(p))?;
            if r != rows {
                return Err(Error::dim("concat", format!("leading dims {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push("concat", value, parts, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2("slice_cols", self.value(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of width {cols}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        self.push("slice_cols", value, &[x], Op::SliceCols { x, start })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = dims2("softmax_rows", self.value(a))?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(c) {
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let start = data.len();
            let mut z = R::zero();
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / z;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax_rows", value, &[a], Op::SoftmaxRows(a))
    }

    /// Per-row normalisation over the feature axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, d) = dims2("layer_norm", self.value(x))?;
        if d < 2 {
            return Err(Error::dim("layer_norm", "feature dimension must be at least 2"));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("affine params {:?}/{:?} for width {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = R::from_f64(eps);
        let dn = R::from_f64(d as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var> {
        let (_, d) = dims2("normalize_rows", self.value(x))?;
        let floor = R::from_f64(floor);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::new();
        let mut floored = Vec::new();
        for row in xv.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            let (n, f) = if n > floor { (n, false) } else { (floor, true) };
            norms.push(n);
            floored.push(f);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("normalize_rows", value, &[x], Op::NormalizeRows { x, norms, floored })
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a, 1e-8)?;
        let bn = self.normalize_rows(b, 1e-8)?;
        self.matmul_nt(an, bn)
    }

    /// Mean over rows of `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (t, c) = dims2("cross_entropy", self.value(logits))?;
        if labels.len() != t {
            return Err(Error::dim("cross_entropy", format!("{t} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} outside [0, {c})")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = R::zero();
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z: R = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&x| (x - mx).exp() / z));
        }
        let value = Tensor::scalar(total / R::from_f64(t as f64));
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<R>() / R::from_f64(av.len() as f64);
        self.push("mean", Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault == Some(node.name) {
                let two = R::one() + R::one();
                g.iter_mut().for_each(|x| *x = *x * two);
                self.backprop_node(node, &g, &mut grads);
                g.iter_mut().for_each(|x| *x = *x / two);
            } else {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, m * k, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, k * n, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, m * k, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for (o, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                    *o += gij * bv;
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, n * k, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for (o, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                    *o += gij * av;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |gv| {
                        for ((o, &x), &y) in gv.iter_mut().zip(g).zip(bd) {
                            *o += x * y;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |gv| {
                        for ((o, &x), &y) in gv.iter_mut().zip(g).zip(ad) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    accumulate(grads, *bias, c, |gb| {
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.len(), |gv| {
                    for ((o, &x), &y) in gv.iter_mut().zip(g).zip(out) {
                        *o += x * y * (R::one() - y);
                    }
                });
            }
            Op::Prelu { x, alpha } => {
                let xd = self.value(*x).data();
                let al = self.value(*alpha).data();
                let c = al.len();
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |gx| {
                        for (idx, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
                            *o += if xd[idx] > R::zero() { gv } else { al[idx % c] * gv };
                        }
                    });
                }
                if self.wants(*alpha) {
                    accumulate(grads, *alpha, c, |ga| {
                        for (idx, &gv) in g.iter().enumerate() {
                            if xd[idx] <= R::zero() {
                                ga[idx % c] += gv * xd[idx];
                            }
                        }
                    });
                }
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.len(), |gv| {
                    for ((o, &x), &y) in gv.iter_mut().zip(g).zip(out) {
                        *o += x * y;
                    }
                });
            }
            Op::Log(a) => {
                let ad = self.value(*a).data();
                accumulate(grads, *a, g.len(), |gv| {
                    for ((o, &x), &v) in gv.iter_mut().zip(g).zip(ad) {
                        *o += x / v;
                    }
                });
            }
            Op::Neg(a) => {
                accumulate(grads, *a, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.len(), |gv| gv.iter_mut().zip(g).for_each(|(o, &x)| *o += c * x));
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                accumulate(grads, *a, g.len(), |gv| {
                    for ((o, &x), &v) in gv.iter_mut().zip(g).zip(ad) {
                        *o += x * sigmoid(v);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.wants(p) {
                        accumulate(grads, p, pv.len(), |gp| {
                            for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                dst.iter_mut()
                                    .zip(&src[offset..offset + w])
                                    .for_each(|(o, &x)| *o += x);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (w, len) = (xv.cols(), node.value.cols());
                accumulate(grads, *x, xv.len(), |gx| {
                    for (dst, src) in gx.chunks_mut(w).zip(g.chunks(len)) {
                        dst[*start..*start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, &v)| *o += v);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                accumulate(grads, *a, g.len(), |ga| {
                    for ((dst, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: R = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                        for ((o, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let dn = R::from_f64(d as f64);
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, d, |gg| {
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, &gv), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                                *o += gv * h;
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, d, |gb| {
                        for grow in g.chunks(d) {
                            gb.iter_mut().zip(grow).for_each(|(o, &gv)| *o += gv);
                        }
                    });
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |gx| {
                        for (r, ((dst, grow), hrow)) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            let mut sum_gg = R::zero();
                            let mut sum_ggh = R::zero();
                            for j in 0..d {
                                let gg = grow[j] * gam[j];
                                sum_gg += gg;
                                sum_ggh += gg * hrow[j];
                            }
                            let scale = rstd[r] / dn;
                            for j in 0..d {
                                let gg = grow[j] * gam[j];
                                dst[j] += scale * (dn * gg - sum_gg - hrow[j] * sum_ggh);
                            }
                        }
                    });
                }
            }
            Op::NormalizeRows { x, norms, floored } => {
                let d = node.value.cols();
                accumulate(grads, *x, g.len(), |gx| {
                    for (r, ((dst, grow), yrow)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)).enumerate() {
                        let n = norms[r];
                        if floored[r] {
                            dst.iter_mut().zip(grow).for_each(|(o, &gv)| *o += gv / n);
                        } else {
                            let dot: R = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for ((o, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                                *o += (gv - y * dot) / n;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / R::from_f64(labels.len() as f64);
                accumulate(grads, *logits, probs.len(), |gl| {
                    for (r, (dst, prow)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (o, &p)) in dst.iter_mut().zip(prow).enumerate() {
                            let t = if j == labels[r] { R::one() } else { R::zero() };
                            *o += scale * (p - t);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, n, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = g[0] / R::from_f64(n as f64);
                accumulate(grads, *a, n, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
        }
    }
}
