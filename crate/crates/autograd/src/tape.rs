use rpe_core::Scalar;

use crate::tensor::{gemm_acc, transpose, Tensor};
use crate::AutogradError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, b: Var, n: usize },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    SoftmaxBias { scores: Var, bias: Option<Var>, heads: usize, row_len: usize, plane: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize, dh: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize, dh: usize },
    Sum { a: Var },
    Reshape { a: Var },
    OffsetBias { params: Var, n: usize, count: usize, derivs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; backward walks them in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient, or zeros when the loss does not depend on `v`.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, AutogradError> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node<T>, AutogradError> {
        self.nodes.get(v.0).ok_or(AutogradError::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, AutogradError> {
        self.push(value, Op::Leaf, true)
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, AutogradError> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.nodes[a.0].value.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for p in 0..batch {
            let ap = &ad[p * m * k..(p + 1) * m * k];
            let bp = &bd[p * k * n..(p + 1) * k * n];
            let cp = &mut out[p * m * n..(p + 1) * m * n];
            if trans_b {
                let bt = transpose(n, k, bp);
                gemm_acc(m, k, n, ap, &bt, cp);
            } else {
                gemm_acc(m, k, n, ap, bp, cp);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutogradError> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.same_shape("add", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add { a, b }, rg)
    }

    /// `a[..., n] + b[n]` broadcast over leading axes.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.node(a)?.value.shape().to_vec(), self.node(b)?.value.shape().to_vec());
        let n = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(mismatch("add_row", &sa, &sb));
        }
        let bias = self.nodes[b.0].value.data().to_vec();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&bias) {
                *x += *y;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&sa, data)?, Op::AddRow { a, b, n }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, AutogradError> {
        let x = &self.node(a)?.value;
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| *v * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutogradError> {
        let x = &self.node(a)?.value;
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| gelu_parts(*v).0).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu { a }, rg)
    }

    /// Normalizes the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutogradError> {
        let sx = self.node(x)?.value.shape().to_vec();
        let n = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            let sp = self.node(p)?.value.shape();
            if sp != [n] {
                return Err(mismatch("layer_norm", &sx, sp));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let xs = self.nodes[x.0].value.data();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let rows = xs.len() / n.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        let nn = T::of_u64(n as u64);
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Rows of `table[V, D]` at `ids`; output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutogradError> {
        let st = self.node(table)?.value.shape().to_vec();
        if st.len() != 2 {
            return Err(mismatch("embedding", &st, &[]));
        }
        let (v, dim) = (st[0], st[1]);
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= v {
                return Err(AutogradError::IndexOutOfRange { index: id, bound: v });
            }
            out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(&[ids.len(), dim], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        )
    }

    /// Softmax over the last axis of `scores[B·H, n, c] + bias[H, n, c]`;
    /// batch entry `p` uses bias plane `p mod H`. Bias entries may be `-inf`.
    pub fn softmax_with_bias(&mut self, scores: Var, bias: Option<Var>) -> Result<Var, AutogradError> {
        let ss = self.node(scores)?.value.shape().to_vec();
        if ss.len() < 2 {
            return Err(mismatch("softmax_with_bias", &ss, &[]));
        }
        let row_len = ss[ss.len() - 1];
        let plane = row_len * ss[ss.len() - 2];
        let (heads, bias_data) = match bias {
            Some(b) => {
                let sb = self.node(b)?.value.shape().to_vec();
                let total = self.nodes[scores.0].value.numel();
                if sb.len() != 3 || sb[1] * sb[2] != plane || sb[2] != row_len || !(total / plane).is_multiple_of(sb[0]) {
                    return Err(mismatch("softmax_with_bias", &ss, &sb));
                }
                (sb[0], Some(self.nodes[b.0].value.data()))
            }
            None => (1, None),
        };
        let sd = self.nodes[scores.0].value.data();
        let mut out = vec![T::zero(); sd.len()];
        for (r, (orow, srow)) in out.chunks_mut(row_len).zip(sd.chunks(row_len)).enumerate() {
            let p = r * row_len / plane;
            let within = (r * row_len) % plane;
            let brow = bias_data.map(|b| &b[(p % heads) * plane + within..(p % heads) * plane + within + row_len]);
            for (c, o) in orow.iter_mut().enumerate() {
                *o = srow[c] + brow.map_or(T::zero(), |b| b[c]);
            }
            let m = orow.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return Err(AutogradError::EmptyRow { row: r });
            }
            let mut z = T::zero();
            for o in orow.iter_mut() {
                *o = (*o - m).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(&[scores]) || bias.is_some_and(|b| self.nodes[b.0].requires_grad);
        self.push(
            Tensor::new(&ss, out)?,
            Op::SoftmaxBias {
                scores,
                bias,
                heads,
                row_len,
                plane,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits[N, V])`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutogradError> {
        let sl = self.node(logits)?.value.shape().to_vec();
        let v = *sl.last().unwrap_or(&0);
        let rows = self.nodes[logits.0].value.numel() / v.max(1);
        if rows != targets.len() {
            return Err(mismatch("cross_entropy", &sl, &[targets.len()]));
        }
        let (probs, nll) = softmax_nll(self.nodes[logits.0].value.data(), v, targets)?;
        let mean = nll.iter().copied().sum::<T>() / T::of_u64(rows as u64);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `[B·S, H·dh] → [B·H, S, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, AutogradError> {
        let sa = self.node(a)?.value.shape().to_vec();
        let total = self.nodes[a.0].value.numel();
        if heads == 0 || !total.is_multiple_of((batch * seq * heads).max(1)) || !(total / (batch * seq).max(1)).is_multiple_of(heads) {
            return Err(mismatch("split_heads", &sa, &[batch, seq, heads]));
        }
        let dh = total / (batch * seq * heads);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); total];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = ((b * seq + s) * heads + h) * dh;
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(&[batch * heads, seq, dh], out)?,
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
                dh,
            },
            rg,
        )
    }

    /// `[B·H, S, dh] → [B·S, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var, AutogradError> {
        let sa = self.node(a)?.value.shape().to_vec();
        if sa.len() != 3 || sa[0] != batch * heads {
            return Err(mismatch("merge_heads", &sa, &[batch, heads]));
        }
        let (seq, dh) = (sa[1], sa[2]);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let dst = ((b * seq + s) * heads + h) * dh;
                    let src = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(&[batch * seq, heads * dh], out)?,
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
                dh,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutogradError> {
        let s = self.node(a)?.value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let t = self.node(a)?.value.clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape { a }, rg)
    }

    /// Causal Toeplitz bias `[H, n, n]` from per-head parameters `params[H, P]`.
    /// `values[h·n + t]` is the bias at offset `t` and `derivs[(h·n + t)·P + p]`
    /// its derivative in parameter `p`; entries above the diagonal are `-inf`.
    pub fn offset_bias(&mut self, params: Var, n: usize, values: &[T], derivs: &[T]) -> Result<Var, AutogradError> {
        let sp = self.node(params)?.value.shape().to_vec();
        if sp.len() != 2 || values.len() != sp[0] * n || derivs.len() != values.len() * sp[1] {
            return Err(mismatch("offset_bias", &sp, &[values.len(), derivs.len()]));
        }
        let heads = sp[0];
        let mut out = vec![T::neg_infinity(); heads * n * n];
        for h in 0..heads {
            for i in 0..n {
                for s in 0..=i {
                    out[(h * n + i) * n + s] = values[h * n + i - s];
                }
            }
        }
        let rg = self.rg(&[params]);
        self.push(
            Tensor::new(&[heads, n, n], out)?,
            Op::OffsetBias {
                params,
                n,
                count: sp[1],
                derivs: derivs.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. The tape cannot be extended or
    /// differentiated again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutogradError::NonScalarLoss { shape });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backward_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let bt = transpose(*k, *n, bd);
                    acc(*a, &mut |s| gemm_acc(*m, *n, *k, g, &bt, s));
                }
                if wants(*b) {
                    let at = transpose(*m, *k, ad);
                    acc(*b, &mut |s| gemm_acc(*k, *m, *n, &at, g, s));
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (m, k, n) = (*m, *k, *n);
                for p in 0..*batch {
                    let ap = &ad[p * m * k..(p + 1) * m * k];
                    let bp = &bd[p * k * n..(p + 1) * k * n];
                    let gp = &g[p * m * n..(p + 1) * m * n];
                    if wants(*a) {
                        // dA = dC · Bᵀ, where B is the k×n right factor
                        let rhs = if *trans_b { bp.to_vec() } else { transpose(k, n, bp) };
                        acc(*a, &mut |s| gemm_acc(m, n, k, gp, &rhs, &mut s[p * m * k..(p + 1) * m * k]));
                    }
                    if wants(*b) {
                        if *trans_b {
                            // stored b is n×k: d(bᵀ) = Aᵀ dC, so db = dCᵀ A
                            let gt = transpose(m, n, gp);
                            acc(*b, &mut |s| gemm_acc(n, m, k, &gt, ap, &mut s[p * k * n..(p + 1) * k * n]));
                        } else {
                            let at = transpose(m, k, ap);
                            acc(*b, &mut |s| gemm_acc(k, m, n, &at, gp, &mut s[p * k * n..(p + 1) * k * n]));
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                }
            }
            Op::AddRow { a, b, n } => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc(*b, &mut |s| {
                    for row in g.chunks(*n) {
                        s.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *c)),
            Op::Gelu { a } => {
                let ad = nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_parts(ad[i]).1;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            } => {
                let n = *n;
                let gd = nodes[gamma.0].value.data();
                acc(*beta, &mut |s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                });
                acc(*gamma, &mut |s| {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += row[c] * hrow[c];
                        }
                    }
                });
                let nn = T::of_u64(n as u64);
                acc(*x, &mut |s| {
                    for (r, (row, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let gg: Vec<T> = (0..n).map(|c| row[c] * gd[c]).collect();
                        let sum_g = gg.iter().copied().sum::<T>();
                        let sum_gh = gg.iter().zip(hrow).map(|(a, b)| *a * *b).sum::<T>();
                        for c in 0..n {
                            s[r * n + c] += rstd[r] / nn * (nn * gg[c] - sum_g - hrow[c] * sum_gh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids, dim } => acc(*table, &mut |s| {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..*dim {
                        s[id * dim + c] += g[r * dim + c];
                    }
                }
            }),
            Op::SoftmaxBias {
                scores,
                bias,
                heads,
                row_len,
                plane,
            } => {
                let y = nodes[id].value.data();
                let mut dz = vec![T::zero(); y.len()];
                for ((dzr, yr), gr) in dz.chunks_mut(*row_len).zip(y.chunks(*row_len)).zip(g.chunks(*row_len)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for c in 0..*row_len {
                        dzr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*scores, &mut |s| s.iter_mut().zip(&dz).for_each(|(x, y)| *x += *y));
                if let Some(b) = bias {
                    acc(*b, &mut |s| {
                        for (p, chunk) in dz.chunks(*plane).enumerate() {
                            let h = p % heads;
                            s[h * plane..(h + 1) * plane]
                                .iter_mut()
                                .zip(chunk)
                                .for_each(|(x, y)| *x += *y);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = probs.len() / targets.len().max(1);
                let scale = g[0] / T::of_u64(targets.len() as u64);
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            s[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                });
            }
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
                dh,
            } => acc(*a, &mut |s| {
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src = ((b * seq + t) * heads + h) * dh;
                            let dst = ((b * heads + h) * seq + t) * dh;
                            for c in 0..*dh {
                                s[src + c] += g[dst + c];
                            }
                        }
                    }
                }
            }),
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
                dh,
            } => acc(*a, &mut |s| {
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let dst = ((b * seq + t) * heads + h) * dh;
                            let src = ((b * heads + h) * seq + t) * dh;
                            for c in 0..*dh {
                                s[src + c] += g[dst + c];
                            }
                        }
                    }
                }
            }),
            Op::Sum { a } => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Reshape { a } => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += *y)),
            Op::OffsetBias { params, n, count, derivs } => {
                let (n, count) = (*n, *count);
                let heads = nodes[params.0].value.shape()[0];
                acc(*params, &mut |s| {
                    for h in 0..heads {
                        for i in 0..n {
                            for j in 0..=i {
                                let gv = g[(h * n + i) * n + j];
                                let base = (h * n + i - j) * count;
                                for p in 0..count {
                                    s[h * count + p] += gv * derivs[base + p];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Row softmax of `logits[rows, v]` and the per-row negative log-likelihood of `targets`.
pub fn softmax_nll<T: Scalar>(logits: &[T], v: usize, targets: &[usize]) -> Result<(Vec<T>, Vec<T>), AutogradError> {
    let mut probs = vec![T::zero(); logits.len()];
    let mut nll = Vec::with_capacity(targets.len());
    for (r, (&t, row)) in targets.iter().zip(logits.chunks(v)).enumerate() {
        if t >= v {
            return Err(AutogradError::IndexOutOfRange { index: t, bound: v });
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|x| (*x - m).exp()).sum();
        let lse = m + z.ln();
        for c in 0..v {
            probs[r * v + c] = (row[c] - m).exp() / z;
        }
        nll.push(lse - row[t]);
    }
    Ok((probs, nll))
}
