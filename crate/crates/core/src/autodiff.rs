//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive op in execution order together with the
//! values its backward rule needs. [`Tape::backward`] walks the record once in
//! reverse. Nodes that depend only on constants never receive a gradient, so
//! frozen weights cost a forward product and nothing else.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_dims, moments, softmax_in_place, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key/value range visible to one attention query row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpan {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ` with `w` stored as `[out × in]`.
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Vec<KeySpan>,
        probs: Vec<f64>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    SqNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `var`; zero when `var` did not
    /// contribute.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ` where `w` is laid out `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xv.shape_vec(),
                rhs: wv.shape_vec(),
            });
        }
        let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let wt = transpose_raw(wv.data(), o, i);
        let mut out = vec![0.0; n * o];
        matmul_acc(xv.data(), &wt, &mut out, n, i, o);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` bias to every row of an `[n × d]` input.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.cols();
        if bv.len() != d {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape_vec(),
                rhs: bv.shape_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape_vec(), out);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape_vec(),
                rhs: gv.shape_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xs = &xv.data()[r * d..(r + 1) * d];
            let (mean, rs) = moments(xs, eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (xs[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax();
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row lookup, used for embeddings and for picking output positions.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_parts(vec![index.len(), d], out);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. Query row `i` attends to key
    /// rows `spans[i].start .. spans[i].start + spans[i].len`; causal masking
    /// and batching are both expressed through the spans.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Vec<KeySpan>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.shape() != kv.shape() {
            return Err(Error::Dimension {
                op: "attention",
                lhs: qv.shape_vec(),
                rhs: kv.shape_vec(),
            });
        }
        if spans.len() != qv.rows() {
            return Err(Error::Input(format!(
                "attention got {} spans for {} query rows",
                spans.len(),
                qv.rows()
            )));
        }
        let n_keys = kv.rows();
        if let Some(s) = spans.iter().find(|s| s.len == 0 || s.start + s.len > n_keys) {
            return Err(Error::Input(format!(
                "key span {s:?} invalid for {n_keys} keys"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = spans.iter().map(|s| s.len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; qv.len()];
        let mut scores = Vec::new();
        for (i, span) in spans.iter().enumerate() {
            for h in 0..heads {
                let off = h * dh;
                let qrow = &qv.data()[i * d + off..i * d + off + dh];
                scores.clear();
                for j in span.start..span.start + span.len {
                    let krow = &kv.data()[j * d + off..j * d + off + dh];
                    scores.push(dot(qrow, krow) * scale);
                }
                softmax_in_place(&mut scores);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (jj, &p) in scores.iter().enumerate() {
                    let j = span.start + jj;
                    let vrow = &vv.data()[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        let out = Tensor::from_parts(qv.shape_vec(), out);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            },
            rg,
        ))
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions with
    /// `mask[t]` set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Input(format!(
                "{rows} logit rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = Vec::with_capacity(count * classes);
        let mut loss = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= classes {
                return Err(Error::Input(format!(
                    "target {} out of range for {classes} classes",
                    targets[r]
                )));
            }
            let row = lv.row(r);
            loss -= crate::tensor::log_softmax_at(row, targets[r]);
            let start = probs.len();
            probs.extend_from_slice(row);
            softmax_in_place(&mut probs[start..]);
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sq_norm());
        let rg = self.rg(&[x]);
        self.push(out, Op::SqNorm(x), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(Error::NonScalarSeed(seed.shape_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(seed.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[var.0].value.shape_vec(), delta));
            }
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(av, bv)?;
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_acc(gd, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_acc(&at, gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * i];
                    matmul_acc(gd, wv.data(), &mut dx, n, o, i);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let gt = transpose_raw(gd, n, o);
                    let mut dw = vec![0.0; o * i];
                    matmul_acc(&gt, xv.data(), &mut dw, o, n, i);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.requires_grad(*bias) {
                    let d = g.cols();
                    let mut db = vec![0.0; d];
                    for row in gd.chunks_exact(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * s).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; d];
                    for grow in gd.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in
                        gd.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * gv.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let c = s.cols();
                let mut dx = vec![0.0; gd.len()];
                for ((srow, grow), drow) in s
                    .data()
                    .chunks_exact(c)
                    .zip(gd.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let inner: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = srow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, index } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, spans, probs, gd, grads),
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; lv.len()];
                let mut p = probs.chunks_exact(c);
                for r in 0..lv.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let prow = p.next().expect("saved probabilities");
                    let drow = &mut dl[r * c..(r + 1) * c];
                    for j in 0..c {
                        drow[j] = prow[j] * scale;
                    }
                    drow[targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SqNorm(x) => {
                let dx = self.value(*x).data().iter().map(|v| 2.0 * v * gd[0]).collect();
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[KeySpan],
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (need_q, need_k, need_v) = (
            self.requires_grad(q),
            self.requires_grad(k),
            self.requires_grad(v),
        );
        let mut dq = if need_q { vec![0.0; qv.len()] } else { Vec::new() };
        let mut dk = if need_k { vec![0.0; kv.len()] } else { Vec::new() };
        let mut dv = if need_v { vec![0.0; vv.len()] } else { Vec::new() };
        let mut ds = Vec::new();
        let mut cursor = 0;
        for (i, span) in spans.iter().enumerate() {
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[cursor..cursor + span.len];
                cursor += span.len;
                let go = &gd[i * d + off..i * d + off + dh];
                ds.clear();
                for (jj, &pj) in p.iter().enumerate() {
                    let j = span.start + jj;
                    let vrow = &vv.data()[j * d + off..j * d + off + dh];
                    ds.push(dot(go, vrow));
                    if need_v {
                        for (acc, &x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *acc += pj * x;
                        }
                    }
                }
                let inner: f64 = p.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for (dsj, &pj) in ds.iter_mut().zip(p) {
                    *dsj = pj * (*dsj - inner) * scale;
                }
                if need_q {
                    let dqrow = &mut dq[i * d + off..i * d + off + dh];
                    for (jj, &s) in ds.iter().enumerate() {
                        let j = span.start + jj;
                        let krow = &kv.data()[j * d + off..j * d + off + dh];
                        for (acc, &x) in dqrow.iter_mut().zip(krow) {
                            *acc += s * x;
                        }
                    }
                }
                if need_k {
                    let qrow = &qv.data()[i * d + off..i * d + off + dh];
                    for (jj, &s) in ds.iter().enumerate() {
                        let j = span.start + jj;
                        for (acc, &x) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qrow) {
                            *acc += s * x;
                        }
                    }
                }
            }
        }
        if need_q {
            self.accumulate(grads, q, dq);
        }
        if need_k {
            self.accumulate(grads, k, dk);
        }
        if need_v {
            self.accumulate(grads, v, dv);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` rebuilds the scalar objective on a fresh tape from the given parameter
/// handles. Returns the largest `|numeric - analytic| / (|analytic| + 1e-8)`
/// over every element of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..work[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let g = analytic.data()[e];
            worst = worst.max((numeric - g).abs() / (g.abs() + 1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn half_sq_norm_gradient_is_identity_map() {
        let mut tape = Tape::new();
        let value = Tensor::from_rows(&[vec![0.5, -2.0], vec![3.0, 0.25]]).unwrap();
        let w = tape.param(value.clone());
        let n = tape.sq_norm(w);
        let half = tape.scale(n, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w), value);
    }

    #[test]
    fn unused_leaf_gets_zero_and_constants_are_skipped() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[3]));
        let c = tape.constant(Tensor::ones(&[2]));
        let s = tape.add(used, c).unwrap();
        let s = tape.sum(s);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[3]));
        assert_eq!(g.get(c), Tensor::zeros(&[2]));
        assert_eq!(g.get(used), Tensor::ones(&[2]));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarSeed(_))));
    }

    #[test]
    fn masked_cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(&[1, 2]));
        let ce = tape.masked_cross_entropy(l, &[0], &[true]).unwrap();
        assert!((tape.value(ce).item() - 2f64.ln()).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for peak in [1.0, 10.0, 100.0] {
            let mut tape = Tape::new();
            let l = tape.param(Tensor::new(vec![1, 3], vec![peak, 0.0, 0.0]).unwrap());
            let ce = tape.masked_cross_entropy(l, &[0], &[true]).unwrap();
            let v = tape.value(ce).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-40);

        // The masked row contributes neither loss nor gradient.
        let mut tape = Tape::new();
        let two = tape.param(Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.3, 0.9]).unwrap());
        let ce2 = tape.masked_cross_entropy(two, &[0, 1], &[false, true]).unwrap();
        let g = tape.backward(ce2).unwrap().get(two);
        let one = tape.param(Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap());
        let ce1 = tape.masked_cross_entropy(one, &[1], &[true]).unwrap();
        assert_eq!(tape.value(ce2).item(), tape.value(ce1).item());
        assert_eq!(&g.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.masked_cross_entropy(l, &[0, 1], &[false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, &[3, 3]);
        let err = finite_diff_check(
            |t, v| {
                let n = t.sq_norm(v[0]);
                Ok(t.scale(n, 0.5))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random(&mut rng, &[4, 6]).scale(3.0);
        let err = finite_diff_check(
            |t, v| t.masked_cross_entropy(v[0], &[1, 0, 5, 2], &[true, false, true, true]),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn composite_graph_gradient_check_over_seeds() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = vec![
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[4]),
                random(&mut rng, &[4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[4, 4]),
                random(&mut rng, &[3, 4]),
            ];
            let spans = vec![
                KeySpan { start: 0, len: 1 },
                KeySpan { start: 0, len: 2 },
                KeySpan { start: 0, len: 3 },
                KeySpan { start: 3, len: 1 },
                KeySpan { start: 3, len: 2 },
            ];
            let err = finite_diff_check(
                |t, v| {
                    let x = t.layer_norm(v[0], v[2], v[3], 1e-5)?;
                    let q = t.linear(x, v[1])?;
                    let k = t.matmul(x, v[4])?;
                    let val = t.linear(x, v[5])?;
                    let a = t.attention(q, k, val, 2, spans.clone())?;
                    let a = t.gelu(a);
                    let a = t.add_row(a, v[2])?;
                    let sel = t.gather_rows(a, &[1, 4, 2])?;
                    let logits = t.linear(sel, v[6])?;
                    let sm = t.softmax(logits);
                    let s = t.sq_norm(sm);
                    let ce = t.masked_cross_entropy(logits, &[0, 2, 1], &[true, true, false])?;
                    t.add(ce, s)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[6, 4]);
        let w = random(&mut rng, &[4, 4]);
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.linear(xv, wv).unwrap();
            let spans = (0..6).map(|i| KeySpan { start: 0, len: i + 1 }).collect();
            let a = t.attention(y, y, y, 2, spans).unwrap();
            t.value(a).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 1..40), cols in 1usize..8) {
            let rows = values.len() / cols;
            proptest::prop_assume!(rows > 0);
            let t = Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
            let s = t.softmax();
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12);
                proptest::prop_assert!(s.row(r).iter().all(|v| v.is_finite()));
            }
        }
    }
}
