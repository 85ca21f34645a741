//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. Node indices are a topological order, so `backward`
//! walks them in reverse. Parameters are read from a borrowed [`ParamStore`];
//! gradients are returned as a [`Gradients`] value and applied with
//! [`ParamStore::accumulate`], which keeps accumulate-then-step semantics.

use std::collections::HashMap;

use super::real::{acc_nn, acc_nt, acc_tn, gemm, matmul_nn, matmul_nt, Layout};
use super::{Gradients, ParamId, ParamStore, Real};
use crate::ctc;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Masking options for [`Graph::attention`].
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    /// Query `i` may only see keys `j <= i + (Tk - Tq)`.
    pub causal: bool,
    /// `false` marks a padded key that no query may attend to.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn causal() -> Self {
        AttnMask {
            causal: true,
            key_valid: None,
        }
    }

    pub fn none() -> Self {
        AttnMask::default()
    }

    fn allowed(&self, i: usize, j: usize, tq: usize, tk: usize) -> bool {
        if self.causal && j + tq > i + tk {
            return false;
        }
        match &self.key_valid {
            Some(valid) => valid[j],
            None => true,
        }
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Ctc {
        log_probs: Var,
        dlp: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, shape, &[0, 0])),
    }
}

fn row_log_softmax<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn row_softmax<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a `rows × cols` buffer.
pub fn softmax_rows<F: Real>(x: &[F], cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        row_softmax(xr, or);
    }
    out
}

/// Row-wise log-softmax of a `rows × cols` buffer.
pub fn log_softmax_rows<F: Real>(x: &[F], cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        row_log_softmax(xr, or);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.store.get(id).data,
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    pub fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("input", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Input, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        let needs = t.requires_grad;
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Vec::new(),
            op: Op::Param(id),
            needs_grad: needs && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `a(m×k) · b(k×n)`, or `a · bᵀ` with `b(n×k)` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (br, bc) = dims2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let value = if trans_b {
            matmul_nt(self.value(a), self.value(b), m, k, n)
        } else {
            matmul_nn(self.value(a), self.value(b), m, k, n)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, s), needs)
    }

    /// `x(n×in) · w(out×in)ᵀ + b(out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2("affine", self.shape(x))?;
        let (dout, win) = dims2("affine", self.shape(w))?;
        if din != win {
            return Err(shape_err("affine", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("affine", self.shape(w), self.shape(b)));
            }
        }
        let mut value = matmul_nt(self.value(x), self.value(w), n, din, dout);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in value.chunks_mut(dout) {
                for (y, &bb) in row.iter_mut().zip(bias) {
                    *y += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(vec![n, dout], value, Op::Affine { x, w, b }, needs))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2("embedding", self.shape(table))?;
        let mut value = Vec::with_capacity(ids.len() * d);
        let t = self.value(table);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, size: vocab });
            }
            value.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let (n, d) = dims2("layer_norm", self.shape(x))?;
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(g)));
        }
        let eps = F::lit(eps);
        let df = F::from_usize(d).unwrap();
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut value = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                value[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        Ok(self.push(
            vec![n, d],
            value,
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (F::lit(GELU_C), F::lit(GELU_A));
        let half = F::lit(0.5);
        let value = self
            .value(x)
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Gelu(x), needs)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = self.cols(x);
        let value = softmax_rows(self.value(x), cols);
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Softmax(x), needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = self.cols(x);
        let value = log_softmax_rows(self.value(x), cols);
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::LogSoftmax(x), needs)
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq×d`, `k` and `v`
    /// are `Tk×d`; heads split `d` into contiguous column blocks. Rows whose
    /// keys are all masked produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let (tq, d) = dims2("attention", self.shape(q))?;
        let (tk, dk) = dims2("attention", self.shape(k))?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &[d], &[heads]));
        }
        if let Some(valid) = &mask.key_valid {
            if valid.len() != tk {
                return Err(shape_err("attention", &[tk], &[valid.len()]));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                tq,
                dh,
                tk,
                scale,
                qv,
                Layout::rows(d).at(h * dh),
                kv,
                Layout::trans(d).at(h * dh),
                F::zero(),
                p,
                Layout::rows(tk),
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let mut max = F::neg_infinity();
                for (j, s) in row.iter().enumerate() {
                    if mask.allowed(i, j, tq, tk) {
                        max = max.max(*s);
                    }
                }
                if max == F::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = F::zero());
                    continue;
                }
                let mut sum = F::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.allowed(i, j, tq, tk) {
                        *s = (*s - max).exp();
                        sum += *s;
                    } else {
                        *s = F::zero();
                    }
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            gemm(
                tq,
                tk,
                dh,
                F::one(),
                p,
                Layout::rows(tk),
                vv,
                Layout::rows(d).at(h * dh),
                F::zero(),
                &mut out,
                Layout::rows(d).at(h * dh),
            );
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![tq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Strided 1-D convolution over time. `x` is `T×Cin`, `w` is
    /// `Cout×(kernel·Cin)` with kernel taps major, `b` is `Cout`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (t, cin) = dims2("conv1d", self.shape(x))?;
        let (cout, wk) = dims2("conv1d", self.shape(w))?;
        if wk != kernel * cin || self.shape(b) != [cout] {
            return Err(shape_err("conv1d", self.shape(x), self.shape(w)));
        }
        if t + 2 * pad < kernel || stride == 0 {
            return Err(shape_err("conv1d", &[t], &[kernel, stride]));
        }
        let tout = (t + 2 * pad - kernel) / stride + 1;
        let xv = self.value(x);
        let mut cols = vec![F::zero(); tout * wk];
        for o in 0..tout {
            for kk in 0..kernel {
                let src = (o * stride + kk) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    cols[o * wk + kk * cin..o * wk + (kk + 1) * cin]
                        .copy_from_slice(&xv[s * cin..(s + 1) * cin]);
                }
            }
        }
        let mut value = matmul_nt(&cols, self.value(w), tout, wk, cout);
        let bias = self.value(b);
        for row in value.chunks_mut(cout) {
            for (y, &bb) in row.iter_mut().zip(bias) {
                *y += bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![tout, cout],
            value,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    /// Mean cross-entropy of `logits(n×V)` over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", &[n, v], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no target positions".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, size: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let pr = &mut probs[r * v..(r + 1) * v];
            row_log_softmax(row, pr);
            total -= pr[t];
            pr.iter_mut().for_each(|p| *p = p.exp());
        }
        let loss = total / F::from_usize(count).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows: no inputs".into()))?;
        let d = self.cols(first);
        let mut rows = 0;
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != d {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        Ok(self.push(vec![rows, d], value, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = dims2("slice_rows", self.shape(x))?;
        if start > end || end > n {
            return Err(shape_err("slice_rows", &[n, d], &[start, end]));
        }
        let value = self.value(x)[start * d..end * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            vec![end - start, d],
            value,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", self.shape(x))?;
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(shape_err("gather_rows", &[n, d], &[i]));
            }
            value.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![idx.len(), d],
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// CTC negative log-likelihood of `target` given per-frame log
    /// probabilities `log_probs(T×V)` with blank at column 0.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let (t, v) = dims2("ctc_loss", self.shape(log_probs))?;
        let (nll, dlp) = ctc::ctc_nll_and_grad(self.value(log_probs), t, v, target)?;
        let needs = self.needs(log_probs);
        Ok(self.push(vec![1], vec![nll], Op::Ctc { log_probs, dlp }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    /// Runs the backward pass from a scalar and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::new();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        out: &mut Gradients<F>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.entries.push((*id, g.to_vec())),
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = node.shape[1];
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_buf(grads, a) {
                    if trans_b {
                        acc_nn(ga, g, bv, m, n, k);
                    } else {
                        acc_nt(ga, g, bv, m, n, k);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    if trans_b {
                        acc_tn(gb, g, av, n, m, k);
                    } else {
                        acc_tn(gb, av, g, k, m, n);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * o;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * o;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s);
                }
            }
            &Op::Affine { x, w, b } => {
                let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = node.shape[1];
                let (xv, wv) = (self.value(x), self.value(w));
                if let Some(gx) = self.grad_buf(grads, x) {
                    acc_nn(gx, g, wv, n, dout, din);
                }
                if let Some(gw) = self.grad_buf(grads, w) {
                    acc_tn(gw, g, xv, dout, n, din);
                }
                if let Some(gb) = b.and_then(|b| self.grad_buf(grads, b)) {
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                g: gamma,
                b,
                xhat,
                rstd,
            } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let gv = self.value(*gamma);
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let df = F::from_usize(d).unwrap();
                    for r in 0..n {
                        let mut mean_dh = F::zero();
                        let mut mean_dhx = F::zero();
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            mean_dh += dh;
                            mean_dhx += dh * xhat[r * d + c];
                        }
                        mean_dh /= df;
                        mean_dhx /= df;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            gx[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dhx);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let (c, a) = (F::lit(GELU_C), F::lit(GELU_A));
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                let xv = self.value(x);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (F::one() + th)
                            + half * v * (F::one() - th * th) * c * (F::one() + three * a * v * v);
                        *dst += gy * d;
                    }
                }
            }
            &Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((yr, gr), dr) in
                        node.value.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let dot: F = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                        for ((o, &y), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *o += y * (gg - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((yr, gr), dr) in
                        node.value.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let gsum: F = gr.iter().copied().sum();
                        for ((o, &y), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *o += gg - y.exp() * gsum;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(node, g, grads, *q, *k, *v, *heads, probs);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (tout, cout) = (node.shape[0], node.shape[1]);
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wk = kernel * cin;
                if let Some(gw) = self.grad_buf(grads, *w) {
                    acc_tn(gw, g, cols, cout, tout, wk);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
                if self.needs(*x) {
                    let dcols = matmul_nn(g, self.value(*w), tout, cout, wk);
                    let gx = self.grad_buf(grads, *x).unwrap();
                    for o in 0..tout {
                        for kk in 0..*kernel {
                            let src = (o * stride + kk) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let dst = &mut gx[s * cin..(s + 1) * cin];
                                let from = &dcols[o * wk + kk * cin..o * wk + (kk + 1) * cin];
                                dst.iter_mut().zip(from).for_each(|(a, &b)| *a += b);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let s = g[0] / F::from_usize(*count).unwrap();
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (o, &p) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += s * p;
                        }
                        dst[t] -= s;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(x, &y)| *x += y);
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let d = node.shape[1];
                if let Some(gx) = self.grad_buf(grads, x) {
                    gx[start * d..start * d + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.shape[1];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Ctc { log_probs, dlp } => {
                if let Some(gl) = self.grad_buf(grads, *log_probs) {
                    gl.iter_mut().zip(dlp).for_each(|(a, &b)| *a += g[0] * b);
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[F],
    ) {
        let (tq, d) = (node.shape[0], node.shape[1]);
        let tk = self.shape(k)[0];
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut ds = vec![F::zero(); tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            if let Some(gv) = self.grad_buf(grads, v) {
                // dV_h += Pᵀ dO_h
                gemm(
                    tk,
                    tq,
                    dh,
                    F::one(),
                    p,
                    Layout::trans(tk),
                    g,
                    Layout::rows(d).at(h * dh),
                    F::one(),
                    gv,
                    Layout::rows(d).at(h * dh),
                );
            }
            if !(self.needs(q) || self.needs(k)) {
                continue;
            }
            // dP = dO_h V_hᵀ
            gemm(
                tq,
                dh,
                tk,
                F::one(),
                g,
                Layout::rows(d).at(h * dh),
                vv,
                Layout::trans(d).at(h * dh),
                F::zero(),
                &mut ds,
                Layout::rows(tk),
            );
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut ds[i * tk..(i + 1) * tk];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            if let Some(gq) = self.grad_buf(grads, q) {
                gemm(
                    tq,
                    tk,
                    dh,
                    F::one(),
                    &ds,
                    Layout::rows(tk),
                    kv,
                    Layout::rows(d).at(h * dh),
                    F::one(),
                    gq,
                    Layout::rows(d).at(h * dh),
                );
            }
            if let Some(gk) = self.grad_buf(grads, k) {
                gemm(
                    tk,
                    tq,
                    dh,
                    F::one(),
                    &ds,
                    Layout::trans(tk),
                    qv,
                    Layout::rows(d).at(h * dh),
                    F::one(),
                    gk,
                    Layout::rows(d).at(h * dh),
                );
            }
        }
    }
}
