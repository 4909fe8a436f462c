//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients; parameter gradients
//! are then read back with [`Graph::param_grads`].

use std::collections::HashMap;

use super::functional::{log_sum_exp, scaled_dot_attention, AttentionShape};
use super::{NnError, ParamId, ParamStore, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Add(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Embedding { table: Var, ids: Vec<usize> },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, key_valid: Vec<bool>, shape: AttentionShape, weights: Vec<f64> },
    ConcatSeq { a: Var, b: Var, batch: usize, a_len: usize, b_len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    SelectRows { a: Var, b: Var, take_a: Vec<bool> },
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    degenerate_attention_rows: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grads: None, degenerate_attention_rows: 0 }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Query rows seen so far whose attention keys were all masked.
    pub fn degenerate_attention_rows(&self) -> usize {
        self.degenerate_attention_rows
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf holding a copy of a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(NnError::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x · w + b` with `x: n×k`, `w: k×m`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, k) = (vx.rows(), vx.cols());
        if vw.shape().len() != 2 || vw.shape()[0] != k {
            return Err(NnError::Shape(format!("linear {:?} · {:?}", vx.shape(), vw.shape())));
        }
        let m = vw.shape()[1];
        let bias = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.len() != m {
                    return Err(NnError::Shape(format!("bias {:?} for width {m}", vb.shape())));
                }
                vb.data().iter().map(|v| v.as_f64()).collect()
            }
            None => vec![0.0; m],
        };
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![T::zero(); n * m];
        let mut acc = vec![0.0f64; m];
        for i in 0..n {
            acc.copy_from_slice(&bias);
            for (kk, xv) in xd[i * k..(i + 1) * k].iter().enumerate() {
                let a = xv.as_f64();
                if a == 0.0 {
                    continue;
                }
                for (s, wv) in acc.iter_mut().zip(&wd[kk * m..(kk + 1) * m]) {
                    *s += a * wv.as_f64();
                }
            }
            for (o, s) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = T::from_f64(*s);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Linear { x, w, b }, ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let vt = self.value(table);
        let (rows, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NnError::Shape(format!("embedding id {id} out of range {rows}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor::from_vec(&[ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| T::from_f64(gelu(v.as_f64()).0)).collect();
        let out = Tensor::from_vec(vx.shape(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = (vx.rows(), vx.cols());
        if vg.len() != d || vb.len() != d {
            return Err(NnError::Shape(format!("layer norm width {d} vs gain {:?}", vg.shape())));
        }
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c].as_f64() - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = T::from_f64(h * vg.data()[c].as_f64() + vb.data()[c].as_f64());
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Elementwise multiply by a precomputed keep mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NnError> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(NnError::Shape("dropout mask size".into()));
        }
        let data = vx.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Multi-head scaled dot-product attention over projected `q`, `k`, `v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_valid: &[bool],
        shape: AttentionShape,
    ) -> Result<Var, NnError> {
        let out = scaled_dot_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            key_valid,
            shape,
        )?;
        if out.degenerate_rows > 0 {
            tracing::warn!(rows = out.degenerate_rows, "attention query rows with no valid key");
            self.degenerate_attention_rows += out.degenerate_rows;
        }
        let value = Tensor::from_vec(&[shape.batch * shape.q_len, shape.width], out.values)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention { q, k, v, key_valid: key_valid.to_vec(), shape, weights: out.weights };
        Ok(self.push(value, op, ng))
    }

    /// Per batch element, the `a_len` rows of `a` followed by the `b_len` rows of `b`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize, a_len: usize, b_len: usize) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.cols();
        if vb.cols() != d || va.rows() != batch * a_len || vb.rows() != batch * b_len {
            return Err(NnError::Shape(format!("concat {:?} with {:?}", va.shape(), vb.shape())));
        }
        let mut out = Vec::with_capacity((va.len() + vb.len()) * d);
        for i in 0..batch {
            out.extend_from_slice(&va.data()[i * a_len * d..(i + 1) * a_len * d]);
            out.extend_from_slice(&vb.data()[i * b_len * d..(i + 1) * b_len * d]);
        }
        let ng = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(&[batch * (a_len + b_len), d], out)?;
        Ok(self.push(value, Op::ConcatSeq { a, b, batch, a_len, b_len }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vx.rows() {
                return Err(NnError::Shape(format!("row {r} out of range {}", vx.rows())));
            }
            out.extend_from_slice(vx.row(r));
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[rows.len(), d], out)?, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Row `r` of the output is row `r` of `a` where `take_a[r]`, else of `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rows() != take_a.len() {
            return Err(NnError::Shape("select_rows operands".into()));
        }
        let mut out = vb.clone();
        for (r, _) in take_a.iter().enumerate().filter(|(_, t)| **t) {
            out.row_mut(r).copy_from_slice(va.row(r));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::SelectRows { a, b, take_a: take_a.to_vec() }, ng))
    }

    /// Mean negative log-likelihood over rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var, NnError> {
        let vl = self.value(logits);
        let (n, v) = (vl.rows(), vl.cols());
        if labels.len() != n {
            return Err(NnError::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(NnError::NoTargets);
        }
        let mut probs = Vec::with_capacity(count * v);
        let mut total = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            if label >= v {
                return Err(NnError::Shape(format!("label {label} out of range {v}")));
            }
            let row: Vec<f64> = vl.row(r).iter().map(|x| x.as_f64()).collect();
            let lse = log_sum_exp(&row);
            total += lse - row[label];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let loss = Tensor::scalar(T::from_f64(total / count as f64));
        let ng = self.needs(logits);
        Ok(self.push(loss, Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_f64(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<f64>) {
        let shape = self.value(v).shape().to_vec();
        let t = Tensor::from_vec(&shape, g.into_iter().map(T::from_f64).collect()).expect("grad shape");
        self.accumulate(grads, v, t);
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k, m) = (vx.rows(), vx.cols(), vw.shape()[1]);
                let (xd, wd) = (vx.data(), vw.data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &gd[r * m..(r + 1) * m];
                        for kk in 0..k {
                            dx[r * k + kk] = grow
                                .iter()
                                .zip(&wd[kk * m..(kk + 1) * m])
                                .map(|(a, c)| a.as_f64() * c.as_f64())
                                .sum();
                        }
                    }
                    self.accumulate_f64(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &gd[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let a = xd[r * k + kk].as_f64();
                            if a == 0.0 {
                                continue;
                            }
                            for (s, gv) in dw[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                *s += a * gv.as_f64();
                            }
                        }
                    }
                    self.accumulate_f64(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for r in 0..n {
                        for (s, gv) in db.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                            *s += gv.as_f64();
                        }
                    }
                    self.accumulate_f64(grads, *b, db);
                }
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = vec![0.0; vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (s, gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *s += gv.as_f64();
                    }
                }
                self.accumulate_f64(grads, *table, dt);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let dx = vx.data().iter().zip(gd).map(|(a, gv)| gelu(a.as_f64()).1 * gv.as_f64()).collect();
                self.accumulate_f64(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = self.value(*gain);
                let d = vg.len();
                let n = rstd.len();
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let (mut mean_dh, mut mean_dh_h) = (0.0, 0.0);
                    for c in 0..d {
                        let gv = gd[r * d + c].as_f64();
                        let h = xhat[r * d + c];
                        dgain[c] += gv * h;
                        dbias[c] += gv;
                        dxhat[c] = gv * vg.data()[c].as_f64();
                        mean_dh += dxhat[c];
                        mean_dh_h += dxhat[c] * h;
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dh - xhat[r * d + c] * mean_dh_h);
                    }
                }
                self.accumulate_f64(grads, *x, dx);
                self.accumulate_f64(grads, *gain, dgain);
                self.accumulate_f64(grads, *bias, dbias);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(a, m)| a.as_f64() * m.as_f64()).collect();
                self.accumulate_f64(grads, *x, dx);
            }
            Op::Attention { q, k, v, key_valid, shape, weights } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    key_valid,
                    *shape,
                    weights,
                    gd,
                );
                self.accumulate_f64(grads, *q, dq);
                self.accumulate_f64(grads, *k, dk);
                self.accumulate_f64(grads, *v, dv);
            }
            Op::ConcatSeq { a, b, batch, a_len, b_len } => {
                let d = g.cols();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for i in 0..*batch {
                    let base = i * (a_len + b_len) * d;
                    da.extend_from_slice(&gd[base..base + a_len * d]);
                    db.extend_from_slice(&gd[base + a_len * d..base + (a_len + b_len) * d]);
                }
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_vec(&sa, da).expect("shape"));
                self.accumulate(grads, *b, Tensor::from_vec(&sb, db).expect("shape"));
            }
            Op::GatherRows { x, rows } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for (s, gv) in dx[src * d..(src + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *s += gv.as_f64();
                    }
                }
                self.accumulate_f64(grads, *x, dx);
            }
            Op::SelectRows { a, b, take_a } => {
                let d = g.cols();
                let mut ga = Tensor::zeros(g.shape());
                let mut gb = Tensor::zeros(g.shape());
                for (r, &t) in take_a.iter().enumerate() {
                    let dst = if t { &mut ga } else { &mut gb };
                    dst.row_mut(r).copy_from_slice(&gd[r * d..(r + 1) * d]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                let vl = self.value(*logits);
                let v = vl.cols();
                let scale = gd[0].as_f64() / *count as f64;
                let mut dl = vec![0.0; vl.len()];
                let mut p = 0;
                for (r, label) in labels.iter().enumerate() {
                    let Some(label) = *label else { continue };
                    let row = &mut dl[r * v..(r + 1) * v];
                    for (s, pr) in row.iter_mut().zip(&probs[p * v..(p + 1) * v]) {
                        *s = pr * scale;
                    }
                    row[label] -= scale;
                    p += 1;
                }
                self.accumulate_f64(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                let dx = Tensor::full(vx.shape(), gd[0]);
                self.accumulate(grads, *x, dx);
            }
        }
    }

    /// Gradient of any node after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor<T>>, NnError> {
        let grads = self.grads.as_ref().ok_or(NnError::NoBackward)?;
        Ok(grads[v.0].as_ref())
    }

    /// Gradients indexed by parameter, `None` for parameters that did not
    /// take part in the forward pass.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Result<Vec<Option<Tensor<T>>>, NnError> {
        let grads = self.grads.as_ref().ok_or(NnError::NoBackward)?;
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for (id, var) in &self.params {
            out[id.index()] = grads[var.0].clone();
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    key_valid: &[bool],
    shape: AttentionShape,
    weights: &[f64],
    dout: &[T],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionShape { batch, q_len, kv_len, heads, width } = shape;
    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; kv_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..q_len {
                let qi = (b * q_len + i) * width + off;
                let w = &weights[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                let go = &dout[qi..qi + hd];
                let mut dot = 0.0;
                for j in 0..kv_len {
                    if !key_valid[b * kv_len + j] || w[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let kj = (b * kv_len + j) * width + off;
                    let mut s = 0.0;
                    for t in 0..hd {
                        let g = go[t].as_f64();
                        dv[kj + t] += w[j] * g;
                        s += g * v[kj + t].as_f64();
                    }
                    dp[j] = s;
                    dot += w[j] * s;
                }
                for j in 0..kv_len {
                    if dp[j] == 0.0 && w[j] == 0.0 {
                        continue;
                    }
                    let ds = w[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * kv_len + j) * width + off;
                    for t in 0..hd {
                        dq[qi + t] += ds * k[kj + t].as_f64();
                        dk[kj + t] += ds * q[qi + t].as_f64();
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let s = g.sum(x);
        g.backward(s).unwrap();
        let grads = g.param_grads(&store).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grads_before_backward_fail() {
        let store = ParamStore::<f64>::new();
        let g = Graph::<f64>::new();
        assert!(matches!(g.param_grads(&store), Err(NnError::NoBackward)));
    }

    #[test]
    fn cross_entropy_hand_example() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = g.cross_entropy(logits, &[Some(2)]).unwrap();
        // ln(e^1 + e^2 + e^3) - 3
        assert!((g.value(loss).data()[0] - 0.407_605_964_444_380_1).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(&[3, 4099]));
        let loss = g.cross_entropy(logits, &[Some(5), None, Some(4098)]).unwrap();
        assert!((g.value(loss).data()[0] - 4099f64.ln()).abs() < 1e-9);

        let mut row = vec![0.0; 10];
        row[3] = 1e4;
        let logits = g.input(Tensor::from_vec(&[1, 10], row).unwrap());
        let loss = g.cross_entropy(logits, &[Some(3)]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(logits, &[None, None]), Err(NnError::NoTargets)));
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 4], 7.5));
        let gain = g.input(Tensor::from_vec(&[4], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
        let bias = g.input(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 2]));
        assert!(g.linear(x, w, None).is_err());
        let y = g.input(Tensor::zeros(&[3, 3]));
        assert!(g.add(x, y).is_err());
        assert!(g.backward(x).is_err());
    }
}
