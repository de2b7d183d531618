//! Single-head causal attention with an additive relative-position bias.
//!
//! Query `i` weights key `s <= i` by `c_is = exp(q_i·k_s/√d + ln b_{i-s})`.
//! The `j`-window output is `o_i^j = Σ_{i-j+1 <= s <= i} c_is v_s / C_ij`
//! with `C_ij = Σ_{i-j+1 <= s <= i} c_is`; `j = i + 1` is full attention.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::kernel::RpeKernel;
use crate::matrix::{distance, dot, norm, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("attention instance needs n >= 1 and d >= 1")]
    Empty,
    #[error("Q, K, V shapes disagree: {q:?}, {k:?}, {v:?}")]
    ShapeMismatch {
        q: (usize, usize),
        k: (usize, usize),
        v: (usize, usize),
    },
    #[error("norm bound l must be positive and finite")]
    NormBound,
    #[error("row {i} out of range for length {n}")]
    RowOutOfRange { i: usize, n: usize },
    #[error("window {j} invalid at row {i}; need 1 <= j <= i + 1")]
    WindowOutOfRange { i: usize, j: usize },
    #[error("row {i} has zero attention mass")]
    ZeroMass { i: usize },
    #[error("tiling window must be positive")]
    ZeroWindow,
}

/// Bounded `Q`, `K`, `V` with a bias kernel. Rows are projected onto the
/// ball of radius `l` at construction.
#[derive(Debug, Clone)]
pub struct AttentionInstance<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    kernel: RpeKernel<T>,
    l: T,
    scale: T,
}

/// `o_i^j` together with its normalizer `C_ij` (kept in log form).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedOutput<T> {
    pub i: usize,
    pub j: usize,
    pub o: Vec<T>,
    pub log_c: T,
}

impl<T: Scalar> WindowedOutput<T> {
    pub fn c(&self) -> T {
        self.log_c.exp()
    }
}

/// `δ(i, j)` and its bound `2(1 - C_ij/C_ii) l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaCell<T> {
    pub i: usize,
    pub j: usize,
    pub delta: T,
    pub bound: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TilingMode {
    Sliding,
    Nonoverlapping,
}

#[derive(Debug, Clone)]
pub struct TilingResult<T> {
    pub mode: TilingMode,
    pub window: usize,
    pub outputs: Matrix<T>,
    /// Median over the timed repetitions.
    pub elapsed: Duration,
}

fn project<T: Scalar>(m: &mut Matrix<T>, l: T) {
    for i in 0..m.rows() {
        let r = m.row_mut(i);
        let nr = norm(r);
        if nr > l {
            let s = l / nr;
            r.iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|x| (*x - m).exp()).sum::<T>().ln()
}

impl<T: Scalar> AttentionInstance<T> {
    pub fn new(
        mut q: Matrix<T>,
        mut k: Matrix<T>,
        mut v: Matrix<T>,
        kernel: RpeKernel<T>,
        l: T,
    ) -> Result<Self, AttentionError> {
        let shape = |m: &Matrix<T>| (m.rows(), m.cols());
        if shape(&q) != shape(&k) || shape(&q) != shape(&v) {
            return Err(AttentionError::ShapeMismatch {
                q: shape(&q),
                k: shape(&k),
                v: shape(&v),
            });
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(AttentionError::Empty);
        }
        if !(l > T::zero() && l.is_finite()) {
            return Err(AttentionError::NormBound);
        }
        for m in [&mut q, &mut k, &mut v] {
            project(m, l);
        }
        let scale = T::one() / T::of_u64(q.cols() as u64).sqrt();
        Ok(Self { q, k, v, kernel, l, scale })
    }

    /// Rows drawn uniformly from the ball of radius `l`.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        l: T,
        kernel: RpeKernel<T>,
        rng: &mut R,
    ) -> Result<Self, AttentionError> {
        if n == 0 || d == 0 {
            return Err(AttentionError::Empty);
        }
        let mut draw = || {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let radius = l.as_f64() * rng.random::<f64>().powf(1.0 / d as f64);
                data.extend(g.iter().map(|x| T::lit(x / gn * radius)));
            }
            Matrix::from_vec(n, d, data).expect("shape")
        };
        let (q, k, v) = (draw(), draw(), draw());
        Self::new(q, k, v, kernel, l)
    }

    /// `Q = K = 0`, so attention weights are the bias alone.
    pub fn bias_only(v: Matrix<T>, kernel: RpeKernel<T>, l: T) -> Result<Self, AttentionError> {
        let (n, d) = (v.rows(), v.cols());
        Self::new(Matrix::zeros(n, d), Matrix::zeros(n, d), v, kernel, l)
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn norm_bound(&self) -> T {
        self.l
    }

    pub fn kernel(&self) -> &RpeKernel<T> {
        &self.kernel
    }

    /// `(Q, K, V)` after projection.
    pub fn parts(&self) -> (&Matrix<T>, &Matrix<T>, &Matrix<T>) {
        (&self.q, &self.k, &self.v)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.v
    }

    /// Positions `start..end` as an instance of their own; offsets are unchanged.
    pub fn sub_instance(&self, start: usize, end: usize) -> Self {
        Self {
            q: self.q.slice_rows(start, end),
            k: self.k.slice_rows(start, end),
            v: self.v.slice_rows(start, end),
            kernel: self.kernel.clone(),
            l: self.l,
            scale: self.scale,
        }
    }

    fn check_row(&self, i: usize) -> Result<(), AttentionError> {
        if i >= self.len() {
            Err(AttentionError::RowOutOfRange { i, n: self.len() })
        } else {
            Ok(())
        }
    }

    /// `ln c_{i, i-t}` for offsets `t = 0..=i`.
    pub fn row_log_weights(&self, i: usize) -> Result<Vec<T>, AttentionError> {
        self.check_row(i)?;
        let qi = self.q.row(i);
        Ok((0..=i)
            .map(|t| dot(qi, self.k.row(i - t)) * self.scale + self.kernel.log_bias(t as u64))
            .collect())
    }

    pub fn windowed_output(&self, i: usize, j: usize) -> Result<WindowedOutput<T>, AttentionError> {
        self.check_row(i)?;
        if j == 0 || j > i + 1 {
            return Err(AttentionError::WindowOutOfRange { i, j });
        }
        let logs = &self.row_log_weights(i)?[..j];
        let log_c = log_sum_exp(logs);
        if log_c == T::neg_infinity() {
            return Err(AttentionError::ZeroMass { i });
        }
        let mut o = vec![T::zero(); self.dim()];
        for (t, lw) in logs.iter().enumerate() {
            let p = (*lw - log_c).exp();
            if p == T::zero() {
                continue;
            }
            for (acc, x) in o.iter_mut().zip(self.v.row(i - t)) {
                *acc += p * *x;
            }
        }
        Ok(WindowedOutput { i, j, o, log_c })
    }

    /// Softmax attention weights over `s = 0..=i` for window `j`, in position order.
    pub fn attention_row(&self, i: usize, j: usize) -> Result<Vec<T>, AttentionError> {
        let w = self.windowed_output(i, j)?;
        let logs = self.row_log_weights(i)?;
        Ok((0..=i)
            .map(|s| {
                let t = i - s;
                if t < j {
                    (logs[t] - w.log_c).exp()
                } else {
                    T::zero()
                }
            })
            .collect())
    }

    pub fn full_attention(&self) -> Result<Matrix<T>, AttentionError> {
        let mut out = Matrix::zeros(self.len(), self.dim());
        for i in 0..self.len() {
            let w = self.windowed_output(i, i + 1)?;
            out.row_mut(i).copy_from_slice(&w.o);
        }
        Ok(out)
    }

    pub fn delta(&self, i: usize, j: usize) -> Result<T, AttentionError> {
        let full = self.windowed_output(i, i + 1)?;
        let win = self.windowed_output(i, j)?;
        Ok(distance(&full.o, &win.o))
    }

    pub fn delta_bound(&self, i: usize, j: usize) -> Result<T, AttentionError> {
        let full = self.windowed_output(i, i + 1)?;
        let win = self.windowed_output(i, j)?;
        Ok(T::lit(2.0) * (-(win.log_c - full.log_c).exp_m1()) * self.l)
    }

    /// `δ(i, j)` and bound for every `j = 1..=i+1` in one pass over the row.
    pub fn delta_row(&self, i: usize) -> Result<Vec<DeltaCell<T>>, AttentionError> {
        let logs = self.row_log_weights(i)?;
        let m = logs.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            return Err(AttentionError::ZeroMass { i });
        }
        let d = self.dim();
        let w: Vec<T> = logs.iter().map(|x| (*x - m).exp()).collect();
        // suffix masses give 1 - C_ij/C_ii without cancellation
        let mut suffix = vec![T::zero(); i + 2];
        for t in (0..=i).rev() {
            suffix[t] = suffix[t + 1] + w[t];
        }
        let total = suffix[0];
        let mut full = vec![T::zero(); d];
        for (t, wt) in w.iter().enumerate() {
            for (acc, x) in full.iter_mut().zip(self.v.row(i - t)) {
                *acc += *wt * *x;
            }
        }
        full.iter_mut().for_each(|x| *x /= total);

        let two_l = T::lit(2.0) * self.l;
        let mut num = vec![T::zero(); d];
        let mut mass = T::zero();
        let mut cells = Vec::with_capacity(i + 1);
        for j in 1..=i + 1 {
            let t = j - 1;
            mass += w[t];
            for (acc, x) in num.iter_mut().zip(self.v.row(i - t)) {
                *acc += w[t] * *x;
            }
            let delta = if j == i + 1 {
                T::zero()
            } else {
                num.iter()
                    .zip(&full)
                    .map(|(a, f)| {
                        let e = *a / mass - *f;
                        e * e
                    })
                    .sum::<T>()
                    .sqrt()
            };
            cells.push(DeltaCell {
                i,
                j,
                delta,
                bound: two_l * suffix[j] / total,
            });
        }
        Ok(cells)
    }

    /// Every `(i, j)` with `1 <= j <= i + 1`.
    pub fn delta_grid(&self) -> Result<Vec<DeltaCell<T>>, AttentionError> {
        let mut out = Vec::with_capacity(self.len() * (self.len() + 1) / 2);
        for i in 0..self.len() {
            out.extend(self.delta_row(i)?);
        }
        Ok(out)
    }

    /// `max_{i in [j, n)} δ(i, j)`.
    pub fn max_delta_at(&self, j: usize) -> Result<T, AttentionError> {
        let mut best = T::zero();
        for i in j..self.len() {
            best = best.max(self.delta(i, j)?);
        }
        Ok(best)
    }

    fn tile_once(&self, mode: TilingMode, w: usize) -> Result<Matrix<T>, AttentionError> {
        let n = self.len();
        let mut out = Matrix::zeros(n, self.dim());
        match mode {
            TilingMode::Nonoverlapping => {
                for start in (0..n).step_by(w) {
                    let end = (start + w).min(n);
                    let block = self.sub_instance(start, end).full_attention()?;
                    for r in 0..end - start {
                        out.row_mut(start + r).copy_from_slice(block.row(r));
                    }
                }
            }
            TilingMode::Sliding => {
                for i in 0..n {
                    // the whole window is re-encoded for every position
                    let start = (i + 1).saturating_sub(w);
                    let window = self.sub_instance(start, i + 1).full_attention()?;
                    out.row_mut(i).copy_from_slice(window.row(i - start));
                }
            }
        }
        Ok(out)
    }

    /// Outputs under a tiling and the median wall-clock of `repeats` runs.
    pub fn evaluate_tiling(
        &self,
        mode: TilingMode,
        w: usize,
        repeats: usize,
    ) -> Result<TilingResult<T>, AttentionError> {
        if w == 0 {
            return Err(AttentionError::ZeroWindow);
        }
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut outputs = None;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let o = self.tile_once(mode, w)?;
            times.push(start.elapsed());
            outputs = Some(o);
        }
        times.sort();
        Ok(TilingResult {
            mode,
            window: w,
            outputs: outputs.expect("at least one run"),
            elapsed: times[times.len() / 2],
        })
    }
}
