//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted. `backward` walks it once in reverse. The tape
//! is rebuilt for every training step.

use std::sync::Arc;

use crate::error::{LrcError, Result};
use crate::tensor::{
    dot, log_sum_exp, matmul_nn, matmul_nt, matmul_tn, sigmoid, silu_scalar, softmax_in_place,
    Real, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of one grouped-query causal attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// `None` disables rotary embedding.
    pub rope_base: Option<f64>,
}

impl AttentionSpec {
    fn validate(&self) -> Result<()> {
        if self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(LrcError::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.rope_base.is_some() && self.head_dim % 2 != 0 {
            return Err(LrcError::Config(format!(
                "rotary embedding needs an even head_dim, got {}",
                self.head_dim
            )));
        }
        Ok(())
    }
}

struct AttnSaved<T> {
    q_rot: Vec<T>,
    k_rot: Vec<T>,
    probs: Vec<T>,
    cos: Vec<T>,
    sin: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Silu { x: Var },
    SwiGlu { up: Var, gate: Var },
    Softmax { x: Var },
    RmsNorm { x: Var, g: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, saved: Box<AttnSaved<T>> },
    Mse { a: Var, b: Var, scale: T },
    KlDiv { student: Var, teacher_probs: Vec<T>, student_probs: Vec<T>, coef: T },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf. Shares storage with the caller.
    pub fn constant(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_owned(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Frozen copy of a node: same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shared_value(&self, x: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[x.0].value)
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ`, the `x·Wᵀ` pattern of every linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulT { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(LrcError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_values(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    /// `up ⊙ silu(gate)`
    pub fn swiglu(&mut self, up: Var, gate: Var) -> Result<Var> {
        self.same_shape("swiglu", up, gate)?;
        let value = self.zip_values(up, gate, |u, g| u * silu_scalar(g));
        let rg = self.rg(&[up, gate]);
        Ok(self.push(value, Op::SwiGlu { up, gate }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// `x / sqrt(mean(x²) + ε) ⊙ g` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, g: Var, eps: T) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        let d = vx.cols();
        if vg.numel() != d {
            return Err(LrcError::shape(
                "rmsnorm",
                format!("input {:?} vs gain {:?}", vx.shape(), vg.shape()),
            ));
        }
        let mut out = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        let gd = vg.data();
        let inv_d = T::one() / T::lit(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            for (v, &gain) in row.iter_mut().zip(gd) {
                *v = *v * r * gain;
            }
            inv_rms.push(r);
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::RmsNorm { x, g, inv_rms }, rg))
    }

    /// Row gather from `table` (`[vocab, d]`); output shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(LrcError::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(LrcError::Input(format!("token id {bad} out of vocabulary {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal grouped-query attention with optional rotary embedding.
    ///
    /// `q` is `[batch·seq, n_q_heads·head_dim]`, `k`/`v` are
    /// `[batch·seq, n_kv_heads·head_dim]`. `positions` gives each row's rotary
    /// position. Heads are concatenated in the output; no output projection.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        positions: &[usize],
        spec: AttentionSpec,
    ) -> Result<Var> {
        spec.validate()?;
        let n = spec.batch * spec.seq;
        let hd = spec.head_dim;
        let (dq, dkv) = (spec.n_q_heads * hd, spec.n_kv_heads * hd);
        for (name, var, width) in [("q", q, dq), ("k", k, dkv), ("v", v, dkv)] {
            let s = self.value(var).shape();
            if self.value(var).rows() != n || self.value(var).cols() != width {
                return Err(LrcError::shape(
                    "attention",
                    format!("{name} has shape {s:?}, expected [{n}, {width}]"),
                ));
            }
        }
        if positions.len() != n {
            return Err(LrcError::shape(
                "attention",
                format!("{} positions for {n} rows", positions.len()),
            ));
        }

        let half = hd / 2;
        let (cos, sin) = match spec.rope_base {
            Some(base) => rope_tables(positions, half, base),
            None => (Vec::new(), Vec::new()),
        };
        let rotate = |src: &[T], heads: usize| -> Vec<T> {
            let mut out = src.to_vec();
            if spec.rope_base.is_some() {
                for (row, chunk) in out.chunks_mut(heads * hd).enumerate() {
                    let (c, s) = (&cos[row * half..(row + 1) * half], &sin[row * half..(row + 1) * half]);
                    for head in chunk.chunks_mut(hd) {
                        for j in 0..half {
                            let (x1, x2) = (head[j], head[j + half]);
                            head[j] = x1 * c[j] - x2 * s[j];
                            head[j + half] = x2 * c[j] + x1 * s[j];
                        }
                    }
                }
            }
            out
        };
        let q_rot = rotate(self.value(q).data(), spec.n_q_heads);
        let k_rot = rotate(self.value(k).data(), spec.n_kv_heads);
        let vd = self.value(v).data();

        let (s_len, group) = (spec.seq, spec.n_q_heads / spec.n_kv_heads);
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut probs = vec![T::zero(); spec.batch * spec.n_q_heads * s_len * s_len];
        let mut out = vec![T::zero(); n * dq];
        for b in 0..spec.batch {
            for h in 0..spec.n_q_heads {
                let g = h / group;
                for i in 0..s_len {
                    let row_i = b * s_len + i;
                    let qi = &q_rot[row_i * dq + h * hd..row_i * dq + (h + 1) * hd];
                    let p_off = ((b * spec.n_q_heads + h) * s_len + i) * s_len;
                    let prow = &mut probs[p_off..p_off + i + 1];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let row_j = b * s_len + j;
                        let kj = &k_rot[row_j * dkv + g * hd..row_j * dkv + (g + 1) * hd];
                        *p = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[row_i * dq + h * hd..row_i * dq + (h + 1) * hd];
                    for (j, &p) in prow.iter().enumerate() {
                        let row_j = b * s_len + j;
                        let vj = &vd[row_j * dkv + g * hd..row_j * dkv + (g + 1) * hd];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let mut shape = self.value(q).shape().to_vec();
        *shape.last_mut().unwrap() = dq;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[q, k, v]);
        let saved = Box::new(AttnSaved {
            q_rot,
            k_rot,
            probs,
            cos,
            sin,
        });
        Ok(self.push(value, Op::Attention { q, k, v, spec, saved }, rg))
    }

    /// Squared-error loss `scale · Σ (a − b)²`; `scale = 1/n` gives the mean.
    pub fn mse_scaled(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut acc = T::zero();
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            acc += d * d;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(acc * scale), Op::Mse { a, b, scale }, rg))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        self.mse_scaled(a, b, T::one() / T::lit(n as f64))
    }

    /// `coef · Σ_rows KL(p_teacher ‖ softmax(student/τ))` for fixed teacher
    /// log-probabilities. Identical distributions give exactly zero.
    pub fn kl_div(&mut self, student: Var, teacher_log_probs: &Tensor<T>, tau: T, coef: T) -> Result<Var> {
        let vs = self.value(student);
        if vs.shape() != teacher_log_probs.shape() {
            return Err(LrcError::shape(
                "kl_div",
                format!("student {:?} vs teacher {:?}", vs.shape(), teacher_log_probs.shape()),
            ));
        }
        let v = vs.cols();
        let mut student_probs: Vec<T> = vs.data().iter().map(|&x| x / tau).collect();
        let mut teacher_probs = Vec::with_capacity(student_probs.len());
        let mut total = T::zero();
        for (srow, lprow) in student_probs.chunks_mut(v).zip(teacher_log_probs.data().chunks(v)) {
            let lse = log_sum_exp(srow);
            let mut kl = T::zero();
            for (s, &lp) in srow.iter_mut().zip(lprow) {
                let log_q = *s - lse;
                let p = lp.exp();
                if p > T::zero() {
                    kl += p * (lp - log_q);
                }
                teacher_probs.push(p);
                *s = log_q.exp();
            }
            total += kl;
        }
        let rg = self.rg(&[student]);
        Ok(self.push(
            Tensor::scalar(total * coef),
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                coef: coef / tau,
            },
            rg,
        ))
    }

    /// Mean `−log softmax(logits)[target]` over rows whose target is present.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let v = vl.cols();
        if targets.len() != vl.rows() {
            return Err(LrcError::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), vl.rows()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(LrcError::Input(format!("target {bad} out of vocabulary {v}")));
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, t) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                total += lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let mean = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(x, w) in terms {
            let v = self.value(x);
            if v.numel() != 1 {
                return Err(LrcError::shape("weighted_sum", format!("term {:?} is not scalar", v.shape())));
            }
            total += w * v.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(LrcError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(grad);
                continue;
            }
            self.backprop_node(idx, &grad);
        }
        Ok(())
    }

    /// Gradient of the last backward sweep; `None` when the node received none.
    pub fn grad(&self, x: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(x.0)?.as_ref()?;
        Some(Tensor::new(self.value(x).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient or zeros for nodes untouched by the sweep.
    pub fn grad_or_zeros(&self, x: Var) -> Tensor<T> {
        self.grad(x).unwrap_or_else(|| Tensor::zeros(self.value(x).shape()))
    }

    fn accumulate(&mut self, x: Var, contribution: Vec<T>) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        match &mut self.grads[x.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, idx: usize, grad: &[T]) {
        let mut pending: Vec<(Var, Vec<T>)> = Vec::new();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(*a) {
                    pending.push((*a, matmul_nt(grad, vb.data(), m, n, k)));
                }
                if wants(*b) {
                    pending.push((*b, matmul_tn(va.data(), grad, k, m, n)));
                }
            }
            Op::MatMulT { a, b } => {
                // c = a·bᵀ with a [m×k], b [n×k]
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if wants(*a) {
                    pending.push((*a, matmul_nn(grad, vb.data(), m, n, k)));
                }
                if wants(*b) {
                    pending.push((*b, matmul_tn(grad, va.data(), n, m, k)));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    pending.push((*a, grad.to_vec()));
                }
                if wants(*b) {
                    pending.push((*b, grad.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    pending.push((*a, grad.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if wants(*b) {
                    pending.push((*b, grad.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale { x, c } => {
                pending.push((*x, grad.iter().map(|&g| g * *c).collect()));
            }
            Op::Silu { x } => {
                let vx = self.value(*x).data();
                pending.push((*x, grad.iter().zip(vx).map(|(&g, &x)| g * silu_grad(x)).collect()));
            }
            Op::SwiGlu { up, gate } => {
                let (vu, vg) = (self.value(*up).data(), self.value(*gate).data());
                if wants(*up) {
                    let d = grad.iter().zip(vg).map(|(&g, &x)| g * silu_scalar(x)).collect();
                    pending.push((*up, d));
                }
                if wants(*gate) {
                    let d = grad
                        .iter()
                        .zip(vu.iter().zip(vg))
                        .map(|(&g, (&u, &x))| g * u * silu_grad(x))
                        .collect();
                    pending.push((*gate, d));
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(grad.chunks(cols)) {
                    let s = dot(gr, yr);
                    for ((d, &yy), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (g - s);
                    }
                }
                pending.push((*x, dx));
            }
            Op::RmsNorm { x, g, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*g).data());
                let d = vx.cols();
                let inv_d = T::one() / T::lit(d as f64);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dg = vec![T::zero(); d];
                for (((xr, gr), dxr), &r) in vx
                    .data()
                    .chunks(d)
                    .zip(grad.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .zip(inv_rms)
                {
                    let mut s = T::zero();
                    for j in 0..d {
                        s += gr[j] * vg[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * r;
                    }
                    let c = r * r * r * s * inv_d;
                    for j in 0..d {
                        dxr[j] = r * gr[j] * vg[j] - xr[j] * c;
                    }
                }
                if wants(*x) {
                    pending.push((*x, dx));
                }
                if wants(*g) {
                    pending.push((*g, dg));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[row * d + j];
                    }
                }
                pending.push((*table, dt));
            }
            Op::Attention { q, k, v, spec, saved } => {
                let (dq, dk, dv) = attention_backward(spec, saved, self.value(*v).data(), grad);
                if wants(*q) {
                    pending.push((*q, dq));
                }
                if wants(*k) {
                    pending.push((*k, dk));
                }
                if wants(*v) {
                    pending.push((*v, dv));
                }
            }
            Op::Mse { a, b, scale } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = T::lit(2.0) * *scale * grad[0];
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| c * (x - y)).collect();
                if wants(*b) {
                    pending.push((*b, da.iter().map(|&x| -x).collect()));
                }
                if wants(*a) {
                    pending.push((*a, da));
                }
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                coef,
            } => {
                let c = *coef * grad[0];
                let d = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(&q, &p)| c * (q - p))
                    .collect();
                pending.push((*student, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let c = grad[0] / T::lit(*count as f64);
                    for ((drow, prow), t) in d.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        if let Some(t) = *t {
                            for (x, &p) in drow.iter_mut().zip(prow) {
                                *x = c * p;
                            }
                            drow[t] -= c;
                        }
                    }
                }
                pending.push((*logits, d));
            }
            Op::Sum { x } => {
                pending.push((*x, vec![grad[0]; self.value(*x).numel()]));
            }
            Op::WeightedSum { terms } => {
                for &(x, w) in terms {
                    if wants(x) {
                        pending.push((x, vec![w * grad[0]]));
                    }
                }
            }
        }
        for (var, contribution) in pending {
            self.accumulate(var, contribution);
        }
    }
}

#[inline]
fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn rope_tables<T: Real>(positions: &[usize], half: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for j in 0..half {
            let freq = base.powf(-(2.0 * j as f64) / (2.0 * half as f64));
            let angle = pos as f64 * freq;
            cos.push(T::lit(angle.cos()));
            sin.push(T::lit(angle.sin()));
        }
    }
    (cos, sin)
}

fn attention_backward<T: Real>(
    spec: &AttentionSpec,
    saved: &AttnSaved<T>,
    v: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = spec.head_dim;
    let (dq_w, dkv_w) = (spec.n_q_heads * hd, spec.n_kv_heads * hd);
    let n = spec.batch * spec.seq;
    let s_len = spec.seq;
    let group = spec.n_q_heads / spec.n_kv_heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();

    let mut dq = vec![T::zero(); n * dq_w];
    let mut dk = vec![T::zero(); n * dkv_w];
    let mut dv = vec![T::zero(); n * dkv_w];
    let mut dp = vec![T::zero(); s_len];
    for b in 0..spec.batch {
        for h in 0..spec.n_q_heads {
            let g = h / group;
            for i in 0..s_len {
                let row_i = b * s_len + i;
                let gi = &grad[row_i * dq_w + h * hd..row_i * dq_w + (h + 1) * hd];
                let p_off = ((b * spec.n_q_heads + h) * s_len + i) * s_len;
                let prow = &saved.probs[p_off..p_off + i + 1];
                let mut weighted = T::zero();
                for (j, &p) in prow.iter().enumerate() {
                    let row_j = b * s_len + j;
                    let kv = row_j * dkv_w + g * hd;
                    let dpj = dot(gi, &v[kv..kv + hd]);
                    dp[j] = dpj;
                    weighted += p * dpj;
                    for (d, &gg) in dv[kv..kv + hd].iter_mut().zip(gi) {
                        *d += p * gg;
                    }
                }
                let qi_off = row_i * dq_w + h * hd;
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kv = (b * s_len + j) * dkv_w + g * hd;
                    for c in 0..hd {
                        dq[qi_off + c] += ds * saved.k_rot[kv + c];
                        dk[kv + c] += ds * saved.q_rot[qi_off + c];
                    }
                }
            }
        }
    }
    if spec.rope_base.is_some() {
        let half = hd / 2;
        let unrotate = |buf: &mut [T], heads: usize| {
            for (row, chunk) in buf.chunks_mut(heads * hd).enumerate() {
                let c = &saved.cos[row * half..(row + 1) * half];
                let s = &saved.sin[row * half..(row + 1) * half];
                for head in chunk.chunks_mut(hd) {
                    for j in 0..half {
                        let (g1, g2) = (head[j], head[j + half]);
                        head[j] = g1 * c[j] + g2 * s[j];
                        head[j + half] = g2 * c[j] - g1 * s[j];
                    }
                }
            }
        };
        unrotate(&mut dq, spec.n_q_heads);
        unrotate(&mut dk, spec.n_kv_heads);
    }
    (dq, dk, dv)
}

/// Options for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per block; `None` probes every entry.
    pub samples_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_block: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockError {
    pub name: String,
    pub probed: usize,
    /// `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖)` over the probed entries;
    /// absolute difference when both gradients vanish.
    pub rel_error: f64,
    pub autodiff_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// Loss evaluation used by [`grad_check`]. Returns the loss and, when asked,
/// the autodiff gradient of every block.
pub type LossFn<'a> = dyn FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)> + 'a;

/// Compares autodiff gradients with central finite differences block by block.
pub fn grad_check(
    f: &mut LossFn<'_>,
    theta: &[Tensor<f64>],
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    use rand::seq::index::sample;
    use rand::SeedableRng;

    if theta.iter().any(|t| !t.is_finite()) {
        return Err(LrcError::NonFinite("grad_check parameters".into()));
    }
    let (l0, grads) = f(theta, true)?;
    let (l1, _) = f(theta, false)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(LrcError::Contract(format!(
            "loss is not deterministic: {l0:e} then {l1:e}"
        )));
    }
    let grads = grads.ok_or_else(|| LrcError::Contract("loss function returned no gradients".into()))?;
    if grads.len() != theta.len() {
        return Err(LrcError::Contract(format!(
            "{} gradient blocks for {} parameter blocks",
            grads.len(),
            theta.len()
        )));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = theta.to_vec();
    let mut blocks = Vec::with_capacity(theta.len());
    for (bi, grad) in grads.iter().enumerate() {
        let numel = params[bi].numel();
        let coords: Vec<usize> = match opts.samples_per_block {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let (mut diff2, mut auto2, mut fd2) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = params[bi].data()[c];
            params[bi].data_mut()[c] = orig + opts.step;
            let (plus, _) = f(&params, false)?;
            params[bi].data_mut()[c] = orig - opts.step;
            let (minus, _) = f(&params, false)?;
            params[bi].data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * opts.step);
            let ad = grad.data()[c];
            diff2 += (ad - fd).powi(2);
            auto2 += ad * ad;
            fd2 += fd * fd;
        }
        let denom = auto2.sqrt().max(fd2.sqrt());
        let rel_error = if denom < 1e-12 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        blocks.push(BlockError {
            name: names.get(bi).cloned().unwrap_or_else(|| format!("block{bi}")),
            probed: coords.len(),
            rel_error,
            autodiff_norm: grad.l2_norm(),
        });
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: opts.tolerance,
    })
}
