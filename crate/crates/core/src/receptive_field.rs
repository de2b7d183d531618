//! Theoretical and empirical receptive fields.
//!
//! The theoretical field of a convergent series with limit `B` is the least
//! `j` with `Σ_{t<j} b_t > B(1-ε)`. The empirical field of attention row `i`
//! is the least `j` with `C_ij > C_ii(1-ε)`, windows growing back from the
//! diagonal.

use thiserror::Error;

use crate::attention::{AttentionError, AttentionInstance};
use crate::scalar::Scalar;
use crate::series::{classify, partial_sums, BiasSeries, LimitEstimate, LimitKind, NumericVerdict, PartialSumTable};

/// Partial sums kept for theoretical field queries.
pub const DEFAULT_TRF_HORIZON: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("series `{0}` is not numerically convergent")]
    Divergent(String),
    #[error("epsilon must lie in (0, 1), got {0}")]
    Epsilon(f64),
    #[error("horizon {horizon} too short: tail {tail:e} exceeds B·ε/10 = {allowed:e}")]
    InsufficientHorizon { horizon: usize, tail: f64, allowed: f64 },
    #[error("no window up to {horizon} reaches the requested mass")]
    NotReached { horizon: usize },
    #[error("mass array is empty")]
    EmptyMass,
    #[error("curve needs at least 2 grid points")]
    GridSize,
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Theoretical,
    Empirical,
}

/// `(ε, index)` pairs with `ε` descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFieldCurve<T> {
    pub kind: FieldKind,
    pub epsilons: Vec<T>,
    pub indices: Vec<usize>,
    pub source_length: usize,
}

impl<T: Scalar> ReceptiveFieldCurve<T> {
    /// Indices divided by the source length, as the drawing routine returns them.
    pub fn normalized(&self) -> Vec<T> {
        let m = T::of_u64(self.source_length as u64);
        self.indices.iter().map(|&j| T::of_u64(j as u64) / m).collect()
    }
}

/// Limit and partial sums of one convergent series.
#[derive(Debug, Clone)]
pub struct TheoreticalField<T> {
    label: String,
    limit: LimitEstimate<T>,
    sums: PartialSumTable<T>,
}

fn check_epsilon<T: Scalar>(eps: T) -> Result<(), FieldError> {
    if eps > T::zero() && eps < T::one() {
        Ok(())
    } else {
        Err(FieldError::Epsilon(eps.as_f64()))
    }
}

impl<T: Scalar> TheoreticalField<T> {
    pub fn new<S: BiasSeries<T> + ?Sized>(series: &S, horizon: usize) -> Result<Self, FieldError> {
        let verdict = classify(series);
        let limit = match (verdict.numeric, verdict.limit) {
            (NumericVerdict::Convergent, Some(l)) => l,
            _ => return Err(FieldError::Divergent(series.label())),
        };
        let sums = partial_sums(series, horizon.max(1)).expect("non-empty horizon");
        Ok(Self {
            label: series.label(),
            limit,
            sums,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn limit(&self) -> T {
        self.limit.value
    }

    /// True when `B` is only a lower bound for the limit.
    pub fn is_approximate(&self) -> bool {
        self.limit.kind == LimitKind::LowerBound
    }

    pub fn sums(&self) -> &PartialSumTable<T> {
        &self.sums
    }

    pub fn trf(&self, eps: T) -> Result<usize, FieldError> {
        check_epsilon(eps)?;
        let b = self.limit.value;
        let horizon = self.sums.horizon();
        let tail = b - self.sums.last();
        let allowed = b * eps / T::lit(10.0);
        if tail >= allowed {
            return Err(FieldError::InsufficientHorizon {
                horizon,
                tail: tail.as_f64(),
                allowed: allowed.as_f64(),
            });
        }
        let threshold = b * (T::one() - eps);
        let sums = self.sums.as_slice();
        // sums[j-1] holds the sum of the first j terms
        let pos = sums.partition_point(|s| *s <= threshold);
        if pos == sums.len() {
            return Err(FieldError::NotReached { horizon });
        }
        Ok(pos + 1)
    }

    pub fn curve(&self, epsilons: &[T]) -> Result<ReceptiveFieldCurve<T>, FieldError> {
        let indices = epsilons.iter().map(|e| self.trf(*e)).collect::<Result<_, _>>()?;
        Ok(ReceptiveFieldCurve {
            kind: FieldKind::Theoretical,
            epsilons: epsilons.to_vec(),
            indices,
            source_length: self.sums.horizon(),
        })
    }
}

/// Theoretical receptive field with partial sums up to `horizon`.
pub fn trf<T: Scalar, S: BiasSeries<T> + ?Sized>(series: &S, eps: T, horizon: usize) -> Result<usize, FieldError> {
    TheoreticalField::new(series, horizon)?.trf(eps)
}

/// Least `j` whose first `j` masses exceed `(1-ε)` of the total, strictly.
/// `masses[t]` is the weight at offset `t` from the diagonal.
pub fn erf_from_masses<T: Scalar>(masses: &[T], eps: T) -> Result<usize, FieldError> {
    check_epsilon(eps)?;
    if masses.is_empty() {
        return Err(FieldError::EmptyMass);
    }
    let mut acc = crate::series::CompensatedSum::new();
    let prefix: Vec<T> = masses
        .iter()
        .map(|m| {
            acc.add(*m);
            acc.value()
        })
        .collect();
    let threshold = acc.value() * (T::one() - eps);
    let pos = prefix.partition_point(|s| *s <= threshold);
    if pos == prefix.len() {
        return Err(FieldError::NotReached { horizon: masses.len() });
    }
    Ok(pos + 1)
}

fn row_masses<T: Scalar>(attn: &AttentionInstance<T>, i: usize) -> Result<Vec<T>, FieldError> {
    let logs = attn.row_log_weights(i)?;
    let m = logs.iter().copied().fold(T::neg_infinity(), T::max);
    Ok(logs.iter().map(|x| (*x - m).exp()).collect())
}

/// Empirical receptive field of row `i`.
pub fn erf<T: Scalar>(attn: &AttentionInstance<T>, i: usize, eps: T) -> Result<usize, FieldError> {
    erf_from_masses(&row_masses(attn, i)?, eps)
}

/// Mean empirical field over the late rows `i ∈ [n/2, n)`.
pub fn mean_erf<T: Scalar>(attn: &AttentionInstance<T>, eps: T) -> Result<f64, FieldError> {
    let n = attn.len();
    let rows: Vec<usize> = (n / 2..n).collect();
    let mut total = 0.0;
    for &i in &rows {
        total += erf(attn, i, eps)? as f64;
    }
    Ok(total / rows.len() as f64)
}

/// `torch.flip(torch.linspace(0, 1, n))`: torch fills the first half from the
/// start and the second half from the end.
pub fn flipped_linspace<T: Scalar>(n: usize) -> Vec<T> {
    let step = T::one() / T::of_u64(n as u64 - 1);
    let half = n / 2;
    let mut v: Vec<T> = (0..n)
        .map(|i| {
            if i < half {
                T::of_u64(i as u64) * step
            } else {
                T::one() - T::of_u64((n - 1 - i) as u64) * step
            }
        })
        .collect();
    v.reverse();
    v
}

/// Port of the receptive-field drawing routine: for each `ε` on the flipped
/// grid, the number of leading elements whose sum reaches `total·(1-ε)`.
pub fn draw_curve<T: Scalar>(array: &[T], n: usize) -> Result<ReceptiveFieldCurve<T>, FieldError> {
    if array.is_empty() {
        return Err(FieldError::EmptyMass);
    }
    if n < 2 {
        return Err(FieldError::GridSize);
    }
    let epsilon = flipped_linspace::<T>(n);
    let mut index = vec![0usize; n];
    let cusum: T = array.iter().copied().sum();
    let m = array.len();
    let mut s = T::zero();
    let mut i = 0;
    for (j, x) in array.iter().enumerate() {
        let mut eps = epsilon[i];
        while s >= cusum * (T::one() - eps) && i < n {
            index[i] = j;
            if i < n - 1 {
                i += 1;
            } else {
                break;
            }
            eps = epsilon[i];
        }
        s += *x;
    }
    while i < n {
        index[i] = m;
        i += 1;
    }
    Ok(ReceptiveFieldCurve {
        kind: FieldKind::Theoretical,
        epsilons: epsilon,
        indices: index,
        source_length: m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrfRow<T> {
    pub epsilon: T,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrfComparison<T> {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<TrfRow<T>>,
    /// `α_t/α <= β_t/β` on the sampled range.
    pub ratio_precondition: bool,
}

impl<T: Scalar> TrfComparison<T> {
    pub fn ordering_holds(&self) -> bool {
        self.rows.iter().all(|r| r.a <= r.b)
    }
}

/// Sampled offsets checked for the termwise-ratio precondition.
pub const PRECONDITION_RANGE: (u64, u64) = (1_000, 1_000_000);

/// Field sizes of two convergent series over a grid of `ε`, with a check of
/// `α_t/α <= β_t/β` over [`PRECONDITION_RANGE`].
pub fn compare_trf<T: Scalar, A: BiasSeries<T> + ?Sized, B: BiasSeries<T> + ?Sized>(
    a: &A,
    b: &B,
    epsilons: &[T],
    horizon: usize,
) -> Result<TrfComparison<T>, FieldError> {
    let fa = TheoreticalField::new(a, horizon)?;
    let fb = TheoreticalField::new(b, horizon)?;
    let rows = epsilons
        .iter()
        .map(|&e| {
            Ok(TrfRow {
                epsilon: e,
                a: fa.trf(e)?,
                b: fb.trf(e)?,
            })
        })
        .collect::<Result<_, FieldError>>()?;
    let (la, lb) = (fa.limit().ln(), fb.limit().ln());
    let (lo, hi) = PRECONDITION_RANGE;
    let steps = 400u32;
    let ratio_precondition = (0..=steps).all(|s| {
        let x = (lo as f64).ln() + ((hi as f64).ln() - (lo as f64).ln()) * s as f64 / steps as f64;
        let t = x.exp().round() as u64;
        a.log_bias(t) - la <= b.log_bias(t) - lb
    });
    Ok(TrfComparison {
        label_a: fa.label,
        label_b: fb.label,
        rows,
        ratio_precondition,
    })
}

/// `n` points log-spaced from `hi` down to `lo`.
pub fn log_epsilon_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (hi.ln() + (lo.ln() - hi.ln()) * f).exp()
        })
        .collect()
}
