//! Central finite-difference checks of the reverse sweep.

use rand::Rng;

use crate::{AutogradError, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, for entries near zero.
pub const ABS_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

/// Compares reverse-mode gradients of `f` at `inputs` with central differences.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, AutogradError> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for e in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[e];
            if !x0.is_finite() {
                continue;
            }
            probe[which].data_mut()[e] = x0 + STEP;
            let up = eval(&probe)?;
            probe[which].data_mut()[e] = x0 - STEP;
            let down = eval(&probe)?;
            probe[which].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        entries,
    })
}

/// Every differentiable operation of the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Bmm,
    BmmTransposed,
    Add,
    AddRow,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    Embedding,
    SoftmaxWithBias,
    CrossEntropy,
    SplitHeads,
    MergeHeads,
    Sum,
    Reshape,
    OffsetBias,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Bmm,
        OpKind::BmmTransposed,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::SoftmaxWithBias,
        OpKind::CrossEntropy,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::OffsetBias,
    ];
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var, AutogradError> {
    let w = tape.constant(w.clone().reshaped(tape.value(out).shape())?)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Kerple-style log bias `-e^a ln(1 + e^b t)` and its derivatives in `(a, b)`.
pub fn kerple_log_table(params: &[f64], heads: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::with_capacity(heads * n);
    let mut derivs = Vec::with_capacity(heads * n * 2);
    for h in 0..heads {
        let (r, k) = (params[2 * h].exp(), params[2 * h + 1].exp());
        for t in 0..n {
            let t = t as f64;
            let l = (k * t).ln_1p();
            values.push(-r * l);
            derivs.push(-r * l);
            derivs.push(-r * k * t / (1.0 + k * t));
        }
    }
    (values, derivs)
}

/// Finite-difference check of one operation on random shapes with sides up to 8.
pub fn check_op<R: Rng + ?Sized>(kind: OpKind, rng: &mut R) -> Result<GradCheckReport, AutogradError> {
    let mut dim = || rng.random_range(1..=8usize);
    let (a, b, c) = (dim(), dim(), dim());
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut *rng);
    match kind {
        OpKind::MatMul => {
            let (x, y, w) = (u(&[a, b]), u(&[b, c]), u(&[a, c]));
            check(&[x, y], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::Bmm | OpKind::BmmTransposed => {
            let batch = 1 + a % 3;
            let trans = kind == OpKind::BmmTransposed;
            let y = if trans { u(&[batch, c, b]) } else { u(&[batch, b, c]) };
            let (x, w) = (u(&[batch, a, b]), u(&[batch, a, c]));
            check(&[x, y], |t, v| {
                let o = t.bmm(v[0], v[1], trans)?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::Add | OpKind::Mul => {
            let (x, y, w) = (u(&[a, b]), u(&[a, b]), u(&[a, b]));
            check(&[x, y], |t, v| {
                let o = if kind == OpKind::Add { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                weighted_sum(t, o, &w)
            })
        }
        OpKind::AddRow => {
            let (x, y, w) = (u(&[a, b, c]), u(&[c]), u(&[a, b, c]));
            check(&[x, y], |t, v| {
                let o = t.add_row(v[0], v[1])?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::Scale | OpKind::Gelu => {
            let (x, w) = (u(&[a, b]).scaled(3.0), u(&[a, b]));
            check(&[x], |t, v| {
                let o = if kind == OpKind::Scale { t.scale(v[0], -1.7)? } else { t.gelu(v[0])? };
                weighted_sum(t, o, &w)
            })
        }
        OpKind::LayerNorm => {
            let n = b.max(2);
            let (x, g, be, w) = (u(&[a, n]).scaled(2.0), u(&[n]), u(&[n]), u(&[a, n]));
            check(&[x, g, be], |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::Embedding => {
            let ids: Vec<usize> = (0..c).map(|_| rng.random_range(0..a)).collect();
            let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut *rng);
            let (table, w) = (u(&[a, b]), u(&[c, b]));
            check(&[table], |t, v| {
                let o = t.embedding(v[0], &ids)?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::SoftmaxWithBias => {
            let heads = 1 + c % 2;
            let batch = heads * (1 + a % 2);
            let n = b;
            let mut bias = u(&[heads, n, n]);
            for h in 0..heads {
                for i in 0..n {
                    for s in i + 1..n {
                        bias.data_mut()[(h * n + i) * n + s] = f64::NEG_INFINITY;
                    }
                }
            }
            let (x, w) = (u(&[batch, n, n]).scaled(2.0), u(&[batch, n, n]));
            check(&[x, bias], |t, v| {
                let o = t.softmax_with_bias(v[0], Some(v[1]))?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::CrossEntropy => {
            let targets: Vec<usize> = (0..a).map(|_| rng.random_range(0..b)).collect();
            let x = Tensor::uniform(&[a, b], 3.0, &mut *rng);
            check(&[x], |t, v| t.cross_entropy(v[0], &targets))
        }
        OpKind::SplitHeads | OpKind::MergeHeads => {
            let (batch, seq, heads, dh) = (1 + a % 3, b, 1 + c % 3, 1 + a % 4);
            let split = kind == OpKind::SplitHeads;
            let x = if split { u(&[batch * seq, heads * dh]) } else { u(&[batch * heads, seq, dh]) };
            let w = u(&[batch * seq * heads * dh]);
            check(&[x], |t, v| {
                let o = if split {
                    t.split_heads(v[0], batch, seq, heads)?
                } else {
                    t.merge_heads(v[0], batch, heads)?
                };
                weighted_sum(t, o, &w)
            })
        }
        OpKind::Sum => {
            let x = u(&[a, b, c]);
            check(&[x], |t, v| t.sum(v[0]))
        }
        OpKind::Reshape => {
            let (x, w) = (u(&[a, b, c]), u(&[a * b * c]));
            check(&[x], |t, v| {
                let o = t.reshape(v[0], &[c, a * b])?;
                weighted_sum(t, o, &w)
            })
        }
        OpKind::OffsetBias => {
            let heads = 1 + c % 2;
            let n = b;
            let params = u(&[heads, 2]);
            let scores = u(&[heads, n, n]);
            let w = u(&[heads, n, n]);
            check(&[params, scores], |t, v| {
                let (values, derivs) = kerple_log_table(t.value(v[0]).data(), heads, n);
                let bias = t.offset_bias(v[0], n, &values, &derivs)?;
                let o = t.softmax_with_bias(v[1], Some(bias))?;
                weighted_sum(t, o, &w)
            })
        }
    }
}

trait Scaled {
    fn scaled(self, s: f64) -> Self;
}

impl Scaled for Tensor<f64> {
    fn scaled(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= s);
        self
    }
}
