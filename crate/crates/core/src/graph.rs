//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation applied to parameter leaves and
//! constants. [`Graph::backward`] walks the tape in reverse and returns one
//! gradient matrix per parameter of the bound [`ParamSet`]. Parameters that
//! are not marked trainable enter the tape as constants, so their gradient is
//! exactly zero.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, axpy, dot, Real};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// Named parameter tensors with a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    values: Vec<Matrix<S>>,
    index: BTreeMap<String, usize>,
}

impl<S> Default for ParamSet<S> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor; returns its id.
    pub fn insert(&mut self, name: &str, value: Matrix<S>) -> usize {
        if let Some(&id) = self.index.get(name) {
            self.values[id] = value;
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<S>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Matrix<S>> {
        self.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<S>> {
        let id = self.id(name)?;
        Some(&mut self.values[id])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Matrix<S> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix<S> {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Gradients aligned with the ids of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub values: Vec<Matrix<S>>,
}

impl<S: Real> Grads<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        Self { values: params.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, S),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Attention { qkv: Var, seq_len: usize, heads: usize, key_valid: Vec<bool>, probs: Vec<S> },
    Gather { table: Var, index: Vec<Option<usize>> },
    Place { src: Var, rows: Vec<usize> },
    Pool { x: Var, groups: Vec<Vec<usize>> },
    Concat(Var, Var),
    Dropout { x: Var, mask: Vec<S> },
    /// Stores d(loss)/d(logits) for a unit upstream gradient.
    LossFromLogits { logits: Var, dlogits: Vec<S> },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy)]
pub enum Tracking<'a> {
    /// Inference only; `backward` is unavailable.
    None,
    All,
    Only(&'a [bool]),
}

pub struct Graph<'p, S: Real> {
    params: &'p ParamSet<S>,
    tracking: Tracking<'p>,
    nodes: Vec<Node<S>>,
    param_nodes: BTreeMap<usize, Var>,
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new(params: &'p ParamSet<S>, tracking: Tracking<'p>) -> Self {
        Self { params, tracking, nodes: Vec::new(), param_nodes: BTreeMap::new() }
    }

    pub fn inference(params: &'p ParamSet<S>) -> Self {
        Self::new(params, Tracking::None)
    }

    pub fn params(&self) -> &'p ParamSet<S> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a named parameter (one node per parameter per graph).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let trainable = match self.tracking {
            Tracking::None => false,
            Tracking::All => true,
            Tracking::Only(mask) => mask.get(id).copied().unwrap_or(false),
        };
        let v = self.push(self.params.value(id).clone(), Op::Param(id), trainable);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    /// `x W^T + b` with `W` stored as `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.cols, wm.cols, "linear: input width");
        let (n, out) = (xm.rows, wm.rows);
        let mut y = Matrix::zeros(n, out);
        let bias = b.map(|b| self.value(b).data.as_slice());
        for i in 0..n {
            let xi = xm.row(i);
            let yi = y.row_mut(i);
            for j in 0..out {
                yi[j] = dot(xi, wm.row(j));
            }
            if let Some(bias) = bias {
                for j in 0..out {
                    yi[j] += bias[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(y, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "add: shapes");
        let mut y = am.clone();
        y.add_assign(bm);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            *v *= c;
        }
        let ng = self.ng(x);
        self.push(y, Op::Scale(x, c), ng)
    }

    /// Row-wise layer normalization; `gamma`, `beta` are `1 x d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let eps = S::from_f64(LN_EPS);
        let inv_d = S::ONE / S::from_usize(d);
        let mut y = Matrix::zeros(n, d);
        let mut xhat = vec![S::ZERO; n * d];
        let mut rstd = vec![S::ZERO; n];
        for i in 0..n {
            let row = xm.row(i);
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let r = S::ONE / (var + eps).sqrt();
            rstd[i] = r;
            let yi = y.row_mut(i);
            for k in 0..d {
                let h = (row[k] - mean) * r;
                xhat[i * d + k] = h;
                yi[k] = h * g[k] + bt[k];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            *v = math::gelu(*v);
        }
        let ng = self.ng(x);
        self.push(y, Op::Gelu(x), ng)
    }

    /// Multi-head self-attention over `n_seq` sequences of `seq_len` rows
    /// each. `qkv` holds `[Q | K | V]` column blocks. Keys with
    /// `key_valid == false` are excluded from every softmax.
    pub fn attention(&mut self, qkv: Var, seq_len: usize, heads: usize, key_valid: Vec<bool>) -> Var {
        let m = self.value(qkv);
        let n = m.rows;
        assert_eq!(m.cols % 3, 0, "attention: qkv width");
        assert_eq!(n % seq_len, 0, "attention: rows");
        assert_eq!(key_valid.len(), n, "attention: mask length");
        let d = m.cols / 3;
        assert_eq!(d % heads, 0, "attention: heads");
        let dh = d / heads;
        let scale = S::ONE / S::from_usize(dh).sqrt();
        let n_seq = n / seq_len;
        let mut out = Matrix::zeros(n, d);
        let mut probs = vec![S::ZERO; n_seq * heads * seq_len * seq_len];
        let mut scores = vec![S::ZERO; seq_len];
        for b in 0..n_seq {
            let base = b * seq_len;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for t in 0..seq_len {
                    let q = &m.row(base + t)[qo..qo + dh];
                    let mut mx: Option<S> = None;
                    for u in 0..seq_len {
                        if !key_valid[base + u] {
                            continue;
                        }
                        let s = dot(q, &m.row(base + u)[ko..ko + dh]) * scale;
                        scores[u] = s;
                        mx = Some(match mx {
                            Some(c) => c.max(s),
                            None => s,
                        });
                    }
                    let Some(mx) = mx else { continue };
                    let p = &mut probs[((b * heads + h) * seq_len + t) * seq_len..][..seq_len];
                    let mut sum = S::ZERO;
                    for u in 0..seq_len {
                        if key_valid[base + u] {
                            let e = (scores[u] - mx).exp();
                            p[u] = e;
                            sum += e;
                        }
                    }
                    let o = &mut out.row_mut(base + t)[qo..qo + dh];
                    for u in 0..seq_len {
                        if key_valid[base + u] {
                            p[u] = p[u] / sum;
                            axpy(o, p[u], &m.row(base + u)[vo..vo + dh]);
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        self.push(out, Op::Attention { qkv, seq_len, heads, key_valid, probs }, ng)
    }

    /// Row lookup; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, index: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut y = Matrix::zeros(index.len(), t.cols);
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                y.row_mut(i).copy_from_slice(t.row(r));
            }
        }
        let ng = self.ng(table);
        self.push(y, Op::Gather { table, index }, ng)
    }

    /// Scatters the rows of `src` to `rows` of a `total x cols` zero matrix.
    pub fn place(&mut self, src: Var, rows: Vec<usize>, total: usize) -> Var {
        let s = self.value(src);
        assert_eq!(s.rows, rows.len(), "place: row count");
        let mut y = Matrix::zeros(total, s.cols);
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(r).copy_from_slice(s.row(i));
        }
        let ng = self.ng(src);
        self.push(y, Op::Place { src, rows }, ng)
    }

    /// Mean of each group of rows. Groups must be non-empty.
    pub fn pool(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xm = self.value(x);
        let mut y = Matrix::zeros(groups.len(), xm.cols);
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "pool: empty group");
            let yi = y.row_mut(g);
            if rows.len() == 1 {
                yi.copy_from_slice(xm.row(rows[0]));
                continue;
            }
            for &r in rows {
                axpy(yi, S::ONE, xm.row(r));
            }
            let inv = S::ONE / S::from_usize(rows.len());
            for v in yi.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(y, Op::Pool { x, groups }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.pool(x, rows.iter().map(|&r| vec![r]).collect())
    }

    /// Column concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows, bm.rows, "concat: rows");
        let mut y = Matrix::zeros(am.rows, am.cols + bm.cols);
        for i in 0..am.rows {
            let yi = y.row_mut(i);
            yi[..am.cols].copy_from_slice(am.row(i));
            yi[am.cols..].copy_from_slice(bm.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Concat(a, b), ng)
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<S>) -> Var {
        let mut y = self.value(x).clone();
        assert_eq!(y.len(), mask.len(), "dropout: mask length");
        for (v, &m) in y.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(x);
        self.push(y, Op::Dropout { x, mask }, ng)
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored. With no targets at all the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "cross_entropy: targets");
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut dlogits = vec![S::ZERO; lm.len()];
        let mut loss = S::ZERO;
        let mut p = Vec::new();
        if count > 0 {
            let inv = S::ONE / S::from_usize(count);
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = lm.row(i);
                math::softmax_into(row, &mut p);
                let mx = row.iter().copied().fold(row[0], S::max);
                let mut z = S::ZERO;
                for &l in row {
                    z += (l - mx).exp();
                }
                loss += -(row[t] - mx - z.ln());
                let d = &mut dlogits[i * lm.cols..(i + 1) * lm.cols];
                for k in 0..lm.cols {
                    d[k] = p[k] * inv;
                }
                d[t] -= inv;
            }
            loss = loss * inv;
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::LossFromLogits { logits, dlogits }, ng)
    }

    /// Mean binary cross-entropy on `n x 1` logits against targets in
    /// `[0, 1]`. Probabilities are clamped to `[clamp, 1 - clamp]`; clamped
    /// terms contribute no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S], clamp: f64) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.cols, 1, "bce: logits must be a column");
        assert_eq!(lm.rows, targets.len(), "bce: targets");
        let n = lm.rows;
        let mut dlogits = vec![S::ZERO; n];
        let mut loss = S::ZERO;
        if n > 0 {
            let floor = S::from_f64(clamp.ln());
            let inv = S::ONE / S::from_usize(n);
            for i in 0..n {
                let s = lm.data[i];
                let y = targets[i];
                // log p = -softplus(-s), log(1-p) = -softplus(s)
                let log_p = -math::softplus(-s);
                let log_q = -math::softplus(s);
                let p = math::sigmoid(s);
                let (lp, gp) = if log_p < floor { (floor, S::ZERO) } else { (log_p, S::ONE - p) };
                let (lq, gq) = if log_q < floor { (floor, S::ZERO) } else { (log_q, -p) };
                loss += -(y * lp + (S::ONE - y) * lq);
                // d/ds[-y log p] = -y (1-p); d/ds[-(1-y) log(1-p)] = (1-y) p
                dlogits[i] = (-(y * gp) - (S::ONE - y) * gq) * inv;
            }
            loss = loss * inv;
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::LossFromLogits { logits, dlogits }, ng)
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if matches!(self.tracking, Tracking::None) {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::NonFinite { layer: usize::MAX });
        }
        let mut out = Grads::zeros_like(self.params);
        let mut grads: Vec<Option<Matrix<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(S::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.values[*id].add_assign(&g),
                Op::Linear { x, w, b } => {
                    let (xm, wm) = (self.value(*x), self.value(*w));
                    let (n, outd) = (g.rows, g.cols);
                    if self.ng(*x) {
                        let dx = self.slot(&mut grads, *x);
                        for r in 0..n {
                            let gr = g.row(r);
                            let dxr = dx.row_mut(r);
                            for j in 0..outd {
                                if gr[j] != S::ZERO {
                                    axpy(dxr, gr[j], wm.row(j));
                                }
                            }
                        }
                    }
                    if self.ng(*w) {
                        let dw = self.slot(&mut grads, *w);
                        for j in 0..outd {
                            let dwj = dw.row_mut(j);
                            for r in 0..n {
                                let gv = g.data[r * outd + j];
                                if gv != S::ZERO {
                                    axpy(dwj, gv, xm.row(r));
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let db = self.slot(&mut grads, *b);
                            for r in 0..n {
                                axpy(&mut db.data, S::ONE, g.row(r));
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            self.slot(&mut grads, v).add_assign(&g);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    let dx = self.slot(&mut grads, *x);
                    for (d, &gv) in dx.data.iter_mut().zip(&g.data) {
                        *d += c * gv;
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = g.cols;
                    let gm = &self.value(*gamma).data;
                    if self.ng(*gamma) {
                        let dg = self.slot(&mut grads, *gamma);
                        for r in 0..g.rows {
                            for k in 0..d {
                                dg.data[k] += g.data[r * d + k] * xhat[r * d + k];
                            }
                        }
                    }
                    if self.ng(*beta) {
                        let db = self.slot(&mut grads, *beta);
                        for r in 0..g.rows {
                            axpy(&mut db.data, S::ONE, g.row(r));
                        }
                    }
                    if self.ng(*x) {
                        let inv_d = S::ONE / S::from_usize(d);
                        let dx = self.slot(&mut grads, *x);
                        let mut dxh = vec![S::ZERO; d];
                        for r in 0..g.rows {
                            let gr = g.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut m1 = S::ZERO;
                            let mut m2 = S::ZERO;
                            for k in 0..d {
                                dxh[k] = gr[k] * gm[k];
                                m1 += dxh[k];
                                m2 += dxh[k] * xh[k];
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            let dxr = dx.row_mut(r);
                            for k in 0..d {
                                dxr[k] += rstd[r] * (dxh[k] - m1 - xh[k] * m2);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xm = self.value(*x);
                    let dx = self.slot(&mut grads, *x);
                    for k in 0..g.data.len() {
                        dx.data[k] += g.data[k] * math::gelu_grad(xm.data[k]);
                    }
                }
                Op::Attention { qkv, seq_len, heads, key_valid, probs } => {
                    self.attention_backward(&mut grads, &g, *qkv, *seq_len, *heads, key_valid, probs);
                }
                Op::Gather { table, index } => {
                    let dt = self.slot(&mut grads, *table);
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            axpy(dt.row_mut(r), S::ONE, g.row(i));
                        }
                    }
                }
                Op::Place { src, rows } => {
                    let ds = self.slot(&mut grads, *src);
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(ds.row_mut(i), S::ONE, g.row(r));
                    }
                }
                Op::Pool { x, groups } => {
                    let dx = self.slot(&mut grads, *x);
                    for (gi, rows) in groups.iter().enumerate() {
                        let w = S::ONE / S::from_usize(rows.len());
                        for &r in rows {
                            axpy(dx.row_mut(r), w, g.row(gi));
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols;
                    if self.ng(*a) {
                        let da = self.slot(&mut grads, *a);
                        for r in 0..g.rows {
                            axpy(da.row_mut(r), S::ONE, &g.row(r)[..ac]);
                        }
                    }
                    if self.ng(*b) {
                        let db = self.slot(&mut grads, *b);
                        for r in 0..g.rows {
                            axpy(db.row_mut(r), S::ONE, &g.row(r)[ac..]);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = self.slot(&mut grads, *x);
                    for k in 0..g.data.len() {
                        dx.data[k] += g.data[k] * mask[k];
                    }
                }
                Op::LossFromLogits { logits, dlogits } => {
                    let up = g.data[0];
                    let dl = self.slot(&mut grads, *logits);
                    axpy(&mut dl.data, up, dlogits);
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix<S>>], v: Var) -> &'g mut Matrix<S> {
        let m = &self.nodes[v.0].value;
        grads[v.0].get_or_insert_with(|| Matrix::zeros(m.rows, m.cols))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Matrix<S>>],
        g: &Matrix<S>,
        qkv: Var,
        seq_len: usize,
        heads: usize,
        key_valid: &[bool],
        probs: &[S],
    ) {
        let m = self.value(qkv);
        let d = m.cols / 3;
        let dh = d / heads;
        let scale = S::ONE / S::from_usize(dh).sqrt();
        let n_seq = m.rows / seq_len;
        let dm = self.slot(grads, qkv);
        let mut dp = vec![S::ZERO; seq_len];
        for b in 0..n_seq {
            let base = b * seq_len;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for t in 0..seq_len {
                    let p = &probs[((b * heads + h) * seq_len + t) * seq_len..][..seq_len];
                    let go = &g.row(base + t)[qo..qo + dh];
                    let mut inner = S::ZERO;
                    for u in 0..seq_len {
                        if !key_valid[base + u] {
                            continue;
                        }
                        dp[u] = dot(go, &m.row(base + u)[vo..vo + dh]);
                        inner += dp[u] * p[u];
                        // dV_u += p_tu * dO_t
                        axpy(&mut dm.row_mut(base + u)[vo..vo + dh], p[u], go);
                    }
                    for u in 0..seq_len {
                        if !key_valid[base + u] {
                            continue;
                        }
                        let ds = p[u] * (dp[u] - inner) * scale;
                        if ds == S::ZERO {
                            continue;
                        }
                        let (kr, qr) = (base + u, base + t);
                        // dQ_t += ds * K_u ; dK_u += ds * Q_t
                        axpy(&mut dm.row_mut(qr)[qo..qo + dh], ds, &m.row(kr)[ko..ko + dh]);
                        axpy(&mut dm.row_mut(kr)[ko..ko + dh], ds, &m.row(qr)[qo..qo + dh]);
                    }
                }
            }
        }
    }
}

/// Evaluates `loss` built by `f` and returns its value with exact gradients
/// for every parameter (zero for parameters not selected by `tracking`).
pub fn grad<S, F>(params: &ParamSet<S>, tracking: Tracking<'_>, f: F) -> Result<(S, Grads<S>)>
where
    S: Real,
    F: FnOnce(&mut Graph<'_, S>) -> Result<Var>,
{
    let tracking = match tracking {
        Tracking::None => Tracking::All,
        t => t,
    };
    let mut g = Graph::new(params, tracking);
    let loss = f(&mut g)?;
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { layer: usize::MAX });
    }
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Largest relative error between the analytic gradient of `f` and central
/// differences with step `eps`, over the given `(parameter id, flat index)`
/// coordinates. Magnitudes below `1e-6` count as `1e-6` in the denominator.
pub fn gradient_check<F>(params: &ParamSet<f64>, coords: &[(usize, usize)], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let (_, grads) = grad(params, Tracking::All, &f)?;
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for &(id, k) in coords {
        let x = p.value(id).data[k];
        p.value_mut(id).data[k] = x + eps;
        let (up, _) = grad(&p, Tracking::All, &f)?;
        p.value_mut(id).data[k] = x - eps;
        let (down, _) = grad(&p, Tracking::All, &f)?;
        p.value_mut(id).data[k] = x;
        let fd = (up - down) / (2.0 * eps);
        let an = grads.values[id].data[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Ok(worst)
}
