//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run the backward pass. Parameters live outside the tape in a
//! [`ParamStore`]; the tape only borrows them, so a forward pass never copies
//! weights. [`Tape::backward`] consumes the tape and yields [`Gradients`],
//! which can then be folded into the store.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Epsilon inside the RMSNorm square root.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

/// Owns every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Array::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for &(pid, node) in &grads.param_nodes {
            if let Some(g) = &grads.nodes[node] {
                self.params[pid.0].grad.add_assign(g);
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Im2Col {
        x: Var,
        kernel: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    L1 {
        a: Var,
        b: Var,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Array>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// A tape in training mode; dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let vb = self.value(bias);
        if vb.len() != n {
            return Err(Error::shape(format!(
                "bias {:?} does not match width of {:?}",
                vb.shape(),
                [m, n]
            )));
        }
        let mut out = self.value(x).clone();
        let b = vb.data().to_vec();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Unfolds a `T×C` sequence into `T×(kernel·C)` zero-padded windows so that a
    /// same-padded 1-D convolution becomes one matrix product.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "conv kernel size must be odd, got {kernel}"
            )));
        }
        let (t, c) = self.dims2(x, "im2col")?;
        let out = im2col_forward(self.value(x).data(), t, c, kernel);
        Ok(self.push(
            Array::from_parts(vec![t, kernel * c], out),
            Op::Im2Col { x, kernel },
            &[x],
        ))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "rmsnorm")?;
        let g = self.value(gain);
        if g.len() != d {
            return Err(Error::shape(format!(
                "rmsnorm gain {:?} for width {d}",
                g.shape()
            )));
        }
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(t);
        for r in 0..t {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = xi * inv * gi;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Scaled dot-product attention over `heads` column groups of already
    /// projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.dims2(q, "attention query")?;
        let (tk, dk) = self.dims2(k, "attention key")?;
        let (tv, dv) = self.dims2(v, "attention value")?;
        if dk != d || dv != d || tv != tk {
            return Err(Error::shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                [tq, d],
                [tk, dk],
                [tv, dv]
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if causal && tq != tk {
            return Err(Error::Contract(format!(
                "causal attention needs equal query/key lengths, got {tq} and {tk}"
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            tq,
            tk,
            d,
            heads,
            causal,
        );
        Ok(self.push(
            Array::from_parts(vec![tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of an empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary(format!(
                    "id {id} outside table of {vocab} entries"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Array::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks matrices of equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero parts"))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape(format!("concat_rows width {c} against {d}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Array::from_parts(vec![rows, d], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins two matrices with equal row counts along the channel axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_cols")?;
        let (rb, cb) = self.dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape(format!(
                "concat_cols of {:?} and {:?}",
                [ra, ca],
                [rb, cb]
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Array::from_parts(vec![ra, ca + cb], data);
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Array::from_parts(vec![len, c], data);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Inverted dropout; identity on an evaluation tape or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return x;
        }
        let n = self.value(x).len();
        let keep = 1.0 - rate;
        let rng = self.dropout_rng.as_mut().expect("training tape");
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Array::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || weights.len() != t {
            return Err(Error::shape(format!(
                "cross_entropy over {t} rows with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index(format!("target id {bad} outside {v} classes")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(t * v);
        let mut total = 0.0;
        for r in 0..t {
            let row = lv.row(r);
            let p = softmax(row);
            let lse = log_sum_exp(row);
            total += weights[r] * (lse - row[targets[r]]);
            probs.extend(p);
        }
        Ok(self.push(
            Array::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over positions of the token cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = vec![1.0; targets.len()];
        let s = self.cross_entropy_sum(logits, targets, &w)?;
        Ok(self.scale(s, 1.0 / targets.len().max(1) as f64))
    }

    /// Sum of absolute elementwise differences.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "l1 of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Array::scalar(s), Op::L1 { a, b }, &[a, b]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::SumAll(x), &[x])
    }

    /// Runs the backward pass from a single-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param(_) | Op::Input) {
                grads[i] = Some(g);
            }
        }

        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            param_nodes,
        })
    }

    fn backward_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(a) {
                    let ga = slot(grads, *a, va.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        ga.data_mut(),
                        1.0,
                    );
                }
                if wants(b) {
                    let gb = slot(grads, *b, vb.shape());
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if wants(b) {
                    let shape = self.value(*b).shape().to_vec();
                    let gb = slot(grads, *b, &shape);
                    for r in 0..g.rows() {
                        for (o, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let ga = slot(grads, *a, va.shape());
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                }
                if wants(b) {
                    let gb = slot(grads, *b, vb.shape());
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    let gx = slot(grads, *x, g.shape());
                    for (o, gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv.shape());
                for ((o, gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += gv * gelu_grad(xi);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv.shape());
                for ((o, gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if xi > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Im2Col { x, kernel } => {
                let xv = self.value(*x);
                let (t, c) = (xv.shape()[0], xv.shape()[1]);
                let gx = slot(grads, *x, xv.shape());
                im2col_backward(g.data(), gx.data_mut(), t, c, *kernel);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (t, d) = (xv.shape()[0], xv.shape()[1]);
                if wants(x) {
                    let gx = slot(grads, *x, xv.shape());
                    for r in 0..t {
                        let inv = inv_rms[r];
                        let row = xv.row(r);
                        let gr = g.row(r);
                        let dot: f64 = (0..d).map(|j| gr[j] * gv.data()[j] * row[j]).sum();
                        let coef = inv * inv * inv * dot / d as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += inv * gr[j] * gv.data()[j] - coef * row[j];
                        }
                    }
                }
                if wants(gain) {
                    let shape = gv.shape().to_vec();
                    let gg = slot(grads, *gain, &shape);
                    for r in 0..t {
                        let inv = inv_rms[r];
                        for ((o, gr), xr) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gr * xr * inv;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = (qv.shape()[0], qv.shape()[1]);
                let tk = kv.shape()[0];
                let (gq, gk, gv) = attention_backward(
                    g.data(),
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    tq,
                    tk,
                    d,
                    *heads,
                    *causal,
                );
                for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(var) {
                        let s = slot(grads, *var, &[grad.len() / d, d]);
                        for (o, x) in s.data_mut().iter_mut().zip(&grad) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let gt = slot(grads, *table, &shape);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, gv) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = shape[0] * shape[1];
                    if wants(p) {
                        let gp = slot(grads, *p, &shape);
                        for (o, gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).shape()[1];
                for (var, range) in [(a, 0..ca), (b, ca..g.cols())] {
                    if wants(var) {
                        let shape = self.value(*var).shape().to_vec();
                        let gp = slot(grads, *var, &shape);
                        for r in 0..g.rows() {
                            for (o, gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[range.clone()]) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let gx = slot(grads, *x, &shape);
                let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                for (o, gv) in dst.iter_mut().zip(g.data()) {
                    *o += gv;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.shape());
                for ((o, gv), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let v = shape[1];
                let scale = g.item();
                let gl = slot(grads, *logits, &shape);
                for (r, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = gl.row_mut(r);
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += scale * w * probs[r * v + j];
                    }
                    row[tgt] -= scale * w;
                }
            }
            Op::L1 { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = g.item();
                let signs: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| s * sign(x - y))
                    .collect();
                if wants(a) {
                    let ga = slot(grads, *a, va.shape());
                    for (o, d) in ga.data_mut().iter_mut().zip(&signs) {
                        *o += d;
                    }
                }
                if wants(b) {
                    let gb = slot(grads, *b, vb.shape());
                    for (o, d) in gb.data_mut().iter_mut().zip(&signs) {
                        *o -= d;
                    }
                }
            }
            Op::SumAll(x) => {
                let s = g.item();
                let shape = self.value(*x).shape().to_vec();
                let gx = slot(grads, *x, &shape);
                for o in gx.data_mut() {
                    *o += s;
                }
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to an [`Tape::input`] or parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.param_nodes
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.nodes[n].as_ref())
    }
}

fn slot<'a>(grads: &'a mut [Option<Array>], v: Var, shape: &[usize]) -> &'a mut Array {
    grads[v.0].get_or_insert_with(|| Array::zeros(shape))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        out.extend(softmax(x.row(r)));
    }
    Array::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn im2col_forward(x: &[f64], t: usize, c: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let width = kernel * c;
    let mut out = vec![0.0; t * width];
    for pos in 0..t {
        for j in 0..kernel {
            let src = pos as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            out[pos * width + j * c..pos * width + (j + 1) * c]
                .copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    out
}

fn im2col_backward(g: &[f64], gx: &mut [f64], t: usize, c: usize, kernel: usize) {
    let pad = kernel / 2;
    let width = kernel * c;
    for pos in 0..t {
        for j in 0..kernel {
            let src = pos as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let gs = &g[pos * width + j * c..pos * width + (j + 1) * c];
            for (o, gv) in gx[src * c..(src + 1) * c].iter_mut().zip(gs) {
                *o += gv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = vec![0.0; heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let limit = if causal { i + 1 } else { tk };
            let qi = &q[i * d + off..i * d + off + dh];
            let mut m = f64::NEG_INFINITY;
            for j in 0..limit {
                let kj = &k[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[j] = s;
                m = m.max(s);
            }
            let mut z = 0.0;
            for s in &mut scores[..limit] {
                *s = (*s - m).exp();
                z += *s;
            }
            let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..limit {
                let w = scores[j] / z;
                p[j] = w;
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; tq * d];
    let mut gk = vec![0.0; tk * d];
    let mut gv = vec![0.0; tk * d];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let limit = if causal { i + 1 } else { tk };
            let p = &probs[(h * tq + i) * tk..(h * tq + i) * tk + limit];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut rowdot = 0.0;
            for j in 0..limit {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                rowdot += p[j] * dp[j];
                for (o, x) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                    *o += p[j] * x;
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..limit {
                let ds = p[j] * (dp[j] - rowdot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                for (o, x) in gq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                    *o += ds * x;
                }
                for (o, x) in gk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: &[&[f64]]) -> Array {
        Array::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn l1_hand_sum() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(arr(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(arr(&[&[0.0, 2.0], &[5.0, 4.0]]));
        let l = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        let same = tape.l1(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn saturated_cross_entropy_is_tiny() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mut logits = Array::zeros(&[3, 5]);
        for (r, t) in [1usize, 4, 0].iter().enumerate() {
            logits.row_mut(r)[*t] = 20.0 + 5.0;
        }
        let l = tape.constant(logits);
        let ce = tape.cross_entropy(l, &[1, 4, 0]).unwrap();
        assert!(tape.value(ce).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let l = tape.constant(Array::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rand::rng();
        let x = Array::randn(&[6, 11], 8.0, &mut rng);
        let p = softmax_rows(&x);
        for r in 0..6 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rmsnorm_constant_and_zero_rows() {
        let mut store = ParamStore::new();
        let gain = store.add("g", Array::full(&[4], 1.0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(arr(&[&[3.0, 3.0, 3.0, 3.0], &[0.0, 0.0, 0.0, 0.0]]));
        let g = tape.param(gain);
        let y = tape.rmsnorm(x, g).unwrap();
        let out = tape.value(y);
        for &v in out.row(0) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!(out.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_unit_gain_gives_unit_rms() {
        let mut rng = rand::rng();
        let mut store = ParamStore::new();
        let gain = store.add("g", Array::full(&[7], 1.0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array::randn(&[3, 7], 2.0, &mut rng));
        let g = tape.param(gain);
        let y = tape.rmsnorm(x, g).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
            assert!((rms - 1.0).abs() <= 1e-6, "{rms}");
        }
    }

    #[test]
    fn even_kernel_is_config_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array::zeros(&[4, 2]));
        assert!(matches!(tape.im2col(x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn attention_contract_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Array::zeros(&[3, 6]));
        let k = tape.constant(Array::zeros(&[4, 6]));
        assert!(matches!(
            tape.attention(q, k, k, 4, false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            tape.attention(q, k, k, 2, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eval_tape_dropout_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array::full(&[2, 2], 1.0));
        assert_eq!(tape.dropout(x, 0.5), x);
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Array::zeros(&[1])).unwrap();
        assert!(store.add("w", Array::zeros(&[1])).is_err());
    }
}
