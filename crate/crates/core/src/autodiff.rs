//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly and appends a node; [`Tape::backward`]
//! walks the nodes in reverse and accumulates `∂loss/∂node` into a persistent
//! per-node buffer. Repeated `backward` calls add up until [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, gemm, log_softmax, normalize_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of one fused multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `true` where the key at `[b * seq_len + j]` is padding.
    pub key_pad: Vec<bool>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        !self.key_pad[b * self.seq_len + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Sum { a: Var },
    Dot { a: Var, b: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, probs: Vec<f64>, spec: AttentionSpec },
    Nll { logits: Var, targets: Vec<Option<usize>>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    (t.shape().len() == 2).then(|| (t.shape()[0], t.shape()[1]))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last `backward` calls, if `v` participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copies the accumulated gradient of `v` into `target`'s gradient buffer.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let ((m, k), (r, c)) = match (as_matrix(ta), as_matrix(tb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(mismatch(op, ta, tb)),
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(mismatch(op, ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Broadcasts a 1-D `bias` over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || ta.cols() != tb.numel() || ta.shape().is_empty() {
            return Err(mismatch("add_row", ta, tb));
        }
        let c = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(value, Op::Scale { a, s })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() {
            return Err(mismatch("softmax", ta, ta));
        }
        let mut data = ta.data().to_vec();
        let c = ta.cols();
        data.chunks_mut(c).for_each(softmax_in_place);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { a }))
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tx.shape().is_empty() || tg.shape() != [c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [c] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut normed = vec![0.0; tx.numel()];
        let mut rstd = Vec::with_capacity(tx.rows());
        for (xr, nr) in tx.data().chunks(c).zip(normed.chunks_mut(c)) {
            rstd.push(normalize_row(xr, nr));
        }
        let data = normed
            .iter()
            .enumerate()
            .map(|(i, n)| n * tg.data()[i % c] + tb.data()[i % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, normed, rstd }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())
            .expect("same shape");
        self.push(value, Op::Gelu { a })
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = as_matrix(tt).ok_or_else(|| mismatch("embedding", tt, tt))?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    left: tt.shape().to_vec(),
                    right: vec![id],
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// `out[p] = src[idx[p]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let ts = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ts.numel()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: ts.shape().to_vec(),
                right: vec![bad],
            });
        }
        let data = idx.iter().map(|&i| ts.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { src, idx }))
    }

    /// Inverted dropout with a precomputed keep mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { a, mask }))
    }

    /// Fused scaled dot-product attention over `[batch * seq_len, hidden]`
    /// projections split into `heads`. `bias`, when given, is `[heads, seq_len, seq_len]`
    /// and is added to the scores of every batch element.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let rows = spec.batch * spec.seq_len;
        let hidden = tq.cols();
        if as_matrix(tq) != Some((rows, hidden)) || hidden % spec.heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: tq.shape().to_vec(),
                right: vec![rows, hidden],
            });
        }
        if tk.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        if spec.key_pad.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![rows],
                right: vec![spec.key_pad.len()],
            });
        }
        let n = spec.seq_len;
        if let Some(bv) = bias {
            let tb = self.value(bv);
            if tb.shape() != [spec.heads, n, n] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    left: vec![spec.heads, n, n],
                    right: tb.shape().to_vec(),
                });
            }
        }
        let d = hidden / spec.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; spec.batch * spec.heads * n * n];
        let mut out = vec![0.0; rows * hidden];
        let mut qh = vec![0.0; n * d];
        let mut kh = vec![0.0; n * d];
        let mut vh = vec![0.0; n * d];
        let mut oh = vec![0.0; n * d];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                copy_head(tq.data(), b, h, n, d, hidden, &mut qh);
                copy_head(tk.data(), b, h, n, d, hidden, &mut kh);
                copy_head(tv.data(), b, h, n, d, hidden, &mut vh);
                let p = &mut probs[(b * spec.heads + h) * n * n..][..n * n];
                gemm(n, d, n, &qh, false, &kh, true, p, false);
                for i in 0..n {
                    for j in 0..n {
                        let s = &mut p[i * n + j];
                        if spec.allowed(b, i, j) {
                            *s *= scale;
                            if let Some(bv) = bias {
                                *s += self.nodes[bv.0].value.data()[(h * n + i) * n + j];
                            }
                        } else {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(&mut p[i * n..(i + 1) * n]);
                }
                gemm(n, n, d, p, false, &vh, false, &mut oh, false);
                scatter_head(&oh, b, h, n, d, hidden, &mut out);
            }
        }
        let value = Tensor::new(vec![rows, hidden], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, bias, probs, spec }))
    }

    /// `-Σ_i weights[i] · log softmax(logits[i])[targets[i]]`, skipping `None` targets.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = as_matrix(tl).ok_or_else(|| mismatch("nll", tl, tl))?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::ShapeMismatch {
                op: "nll",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::ShapeMismatch {
                    op: "nll",
                    left: vec![r, c],
                    right: vec![t],
                });
            }
            let lp = log_softmax(tl.row(i));
            total -= weights[i] * lp[t];
            for (p, l) in probs[i * c..(i + 1) * c].iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let op = Op::Nll {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Mean cross-entropy of `logits` rows against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let targets: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        let w = 1.0 / targets.len().max(1) as f64;
        self.nll(logits, &targets, &vec![w; targets.len()])
    }

    /// Accumulates `∂loss/∂v` for every node `v` recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.shape().iter().any(|&d| d != 1) {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            self.propagate(idx, &g, &mut local);
            match &mut self.grads[idx] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                // dA = G · op(B)ᵀ
                let ga = slot(local, *a, m * k);
                gemm(m, n, k, g, false, tb.data(), !trans_b, ga, true);
                let gb = slot(local, *b, k * n);
                if *trans_b {
                    // B is [n,k]: dB = Gᵀ · A
                    gemm(n, m, k, g, true, ta.data(), false, gb, true);
                } else {
                    gemm(k, m, n, ta.data(), true, g, false, gb, true);
                }
            }
            Op::Add { a, b } => {
                add_into(slot(local, *a, g.len()), g);
                add_into(slot(local, *b, g.len()), g);
            }
            Op::AddRow { a, bias } => {
                add_into(slot(local, *a, g.len()), g);
                let c = val(*bias).numel();
                let gb = slot(local, *bias, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = slot(local, *a, g.len());
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *o += gi * y;
                }
                let gb = slot(local, *b, g.len());
                for ((o, gi), x) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *o += gi * x;
                }
            }
            Op::Scale { a, s } => {
                let ga = slot(local, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::Sum { a } => {
                let n = val(*a).numel();
                slot(local, *a, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Dot { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.numel();
                for (o, y) in slot(local, *a, n).iter_mut().zip(tb.data()) {
                    *o += g[0] * y;
                }
                for (o, x) in slot(local, *b, n).iter_mut().zip(ta.data()) {
                    *o += g[0] * x;
                }
            }
            Op::Softmax { a } => {
                let c = node.value.cols();
                let ga = slot(local, *a, g.len());
                for ((yr, gr), or) in node.value.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                    for ((o, y), gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o += y * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let c = node.value.cols();
                let tg = val(*gamma);
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, nr)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                    let mut dn = vec![0.0; c];
                    for j in 0..c {
                        gg[j] += gr[j] * nr[j];
                        gbeta[j] += gr[j];
                        dn[j] = gr[j] * tg.data()[j];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / c as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                    }
                }
                add_into(slot(local, *x, g.len()), &gx);
                add_into(slot(local, *gamma, c), &gg);
                add_into(slot(local, *beta, c), &gbeta);
            }
            Op::Gelu { a } => {
                let ta = val(*a);
                let ga = slot(local, *a, g.len());
                for ((o, gi), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *o += gi * gelu_grad(*x);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                let gt = slot(local, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Gather { src, idx } => {
                let n = val(*src).numel();
                let gs = slot(local, *src, n);
                for (gi, &i) in g.iter().zip(idx) {
                    gs[i] += gi;
                }
            }
            Op::Dropout { a, mask } => {
                let ga = slot(local, *a, g.len());
                for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::Attention { q, k, v, bias, probs, spec } => {
                self.attention_backward(g, *q, *k, *v, *bias, probs, spec, local);
            }
            Op::Nll { logits, targets, weights, probs } => {
                let c = val(*logits).cols();
                let gl = slot(local, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let w = g[0] * weights[i];
                    let row = &mut gl[i * c..(i + 1) * c];
                    for (o, p) in row.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                        *o += w * p;
                    }
                    row[t] -= w;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: &[f64],
        spec: &AttentionSpec,
        local: &mut [Option<Vec<f64>>],
    ) {
        let val = |x: Var| &self.nodes[x.0].value;
        let (tq, tk, tv) = (val(q), val(k), val(v));
        let hidden = tq.cols();
        let n = spec.seq_len;
        let d = hidden / spec.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let total = tq.numel();
        let mut gq = vec![0.0; total];
        let mut gk = vec![0.0; total];
        let mut gv = vec![0.0; total];
        let mut gbias = bias.map(|_| vec![0.0; spec.heads * n * n]);
        let (mut qh, mut kh, mut vh, mut goh) =
            (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
        let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
        let mut dp = vec![0.0; n * n];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                copy_head(tq.data(), b, h, n, d, hidden, &mut qh);
                copy_head(tk.data(), b, h, n, d, hidden, &mut kh);
                copy_head(tv.data(), b, h, n, d, hidden, &mut vh);
                copy_head(g, b, h, n, d, hidden, &mut goh);
                let p = &probs[(b * spec.heads + h) * n * n..][..n * n];
                // dV = Pᵀ dO ; dP = dO Vᵀ
                gemm(n, n, d, p, true, &goh, false, &mut dv, false);
                gemm(n, d, n, &goh, false, &vh, true, &mut dp, false);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                if let Some(gb) = gbias.as_mut() {
                    add_into(&mut gb[h * n * n..(h + 1) * n * n], &dp);
                }
                dp.iter_mut().for_each(|x| *x *= scale);
                gemm(n, n, d, &dp, false, &kh, false, &mut dq, false);
                gemm(n, n, d, &dp, true, &qh, false, &mut dk, false);
                scatter_head_add(&dq, b, h, n, d, hidden, &mut gq);
                scatter_head_add(&dk, b, h, n, d, hidden, &mut gk);
                scatter_head_add(&dv, b, h, n, d, hidden, &mut gv);
            }
        }
        add_into(slot(local, q, total), &gq);
        add_into(slot(local, k, total), &gk);
        add_into(slot(local, v, total), &gv);
        if let (Some(bv), Some(gb)) = (bias, gbias) {
            add_into(slot(local, bv, gb.len()), &gb);
        }
    }
}

fn slot(local: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    local[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn copy_head(src: &[f64], b: usize, h: usize, n: usize, d: usize, hidden: usize, dst: &mut [f64]) {
    for i in 0..n {
        let start = (b * n + i) * hidden + h * d;
        dst[i * d..(i + 1) * d].copy_from_slice(&src[start..start + d]);
    }
}

fn scatter_head(src: &[f64], b: usize, h: usize, n: usize, d: usize, hidden: usize, dst: &mut [f64]) {
    for i in 0..n {
        let start = (b * n + i) * hidden + h * d;
        dst[start..start + d].copy_from_slice(&src[i * d..(i + 1) * d]);
    }
}

fn scatter_head_add(src: &[f64], b: usize, h: usize, n: usize, d: usize, hidden: usize, dst: &mut [f64]) {
    for i in 0..n {
        let start = (b * n + i) * hidden + h * d;
        add_into(&mut dst[start..start + d], &src[i * d..(i + 1) * d]);
    }
}
