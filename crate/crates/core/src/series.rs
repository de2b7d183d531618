//! Partial sums and convergence diagnostics for `Σ_t b_t`.
//!
//! [`classify`] pairs a catalog lookup of the known analytic result with a
//! numeric cascade that only looks at sampled values of `ln b_t`:
//!
//! 1. vanishing terms: `b_t == 0` beyond some offset;
//! 2. decade mass: `S(10J) - S(J)` not shrinking means `t b_t` does not decay;
//! 3. geometric ratio: `1 - b_{t+1}/b_t` bounded away from zero across decades;
//! 4. Raabe: `t (b_t/b_{t+1} - 1)` extrapolated in `1/ln t`;
//! 5. log-scale integral comparison for the Raabe boundary (`R → 1`), which
//!    integrates the continuous extension over `[e^u, e^{2u}]` up to `u ≈ 700`;
//! 6. plateau of partial sums at `J = 10^6`.
//!
//! Steps 3 and 4 require sampled monotone decay; oscillating series fall
//! through to the plateau test. All diagnostics run in `f64`.

use std::fmt;

use thiserror::Error;

use crate::kernel::{KernelName, RpeKernel};
use crate::scalar::Scalar;

/// Horizon of the partial sum used for limit estimates.
pub const LIMIT_HORIZON: u64 = 10_000_000;
/// `J` of the plateau test.
pub const PLATEAU_HORIZON: u64 = 1_000_000;

const RATIO_GAP_MIN: f64 = 1e-6;
const RAABE_MARGIN: f64 = 1e-3;
const DECADE_FLAT: f64 = 0.99;
const PLATEAU_CONVERGENT: f64 = 1e-9;
const PLATEAU_DIVERGENT: f64 = 1e-3;
const LOG_INTEGRAL_DIVERGENT: f64 = 0.95;
const LOG_INTEGRAL_CONVERGENT: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeriesError {
    #[error("partial sum horizon must be at least 1")]
    EmptyHorizon,
    #[error("term b_{t} is zero; ratio statistics are undefined")]
    ZeroTerm { t: u64 },
}

/// A bias series that can be summed and diagnosed.
pub trait BiasSeries<T: Scalar>: Sync {
    fn label(&self) -> String;

    /// `ln b_t`, `-inf` for zero terms.
    fn log_bias(&self, t: u64) -> T;

    /// `ln b` at a real offset, when a smooth extension exists.
    fn log_bias_continuous(&self, _x: T) -> Option<T> {
        None
    }

    /// Known analytic convergence result.
    fn analytic(&self) -> AnalyticVerdict {
        AnalyticVerdict::Unknown
    }

    /// Double precision view used by the diagnostics.
    fn widen(&self) -> Box<dyn BiasSeries<f64> + '_>;
}

impl<T: Scalar> BiasSeries<T> for RpeKernel<T> {
    fn label(&self) -> String {
        self.to_string()
    }

    fn log_bias(&self, t: u64) -> T {
        RpeKernel::log_bias(self, t)
    }

    fn log_bias_continuous(&self, x: T) -> Option<T> {
        Some(self.log_bias_at(x))
    }

    fn analytic(&self) -> AnalyticVerdict {
        analytic_verdict(self)
    }

    fn widen(&self) -> Box<dyn BiasSeries<f64> + '_> {
        Box::new(self.cast::<f64>())
    }
}

type LogFn<T> = Box<dyn Fn(u64) -> T + Send + Sync>;
type ContFn<T> = Box<dyn Fn(T) -> T + Send + Sync>;

/// User-defined series given by a `ln b_t` callback.
pub struct CustomSeries<T> {
    label: String,
    log_bias: LogFn<T>,
    continuous: Option<ContFn<T>>,
}

impl<T: Scalar> CustomSeries<T> {
    pub fn new(label: impl Into<String>, log_bias: impl Fn(u64) -> T + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            log_bias: Box::new(log_bias),
            continuous: None,
        }
    }

    /// Attaches a smooth extension to real offsets.
    pub fn with_continuous(mut self, f: impl Fn(T) -> T + Send + Sync + 'static) -> Self {
        self.continuous = Some(Box::new(f));
        self
    }
}

impl<T: Scalar> BiasSeries<T> for CustomSeries<T> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn log_bias(&self, t: u64) -> T {
        (self.log_bias)(t)
    }

    fn log_bias_continuous(&self, x: T) -> Option<T> {
        self.continuous.as_ref().map(|f| f(x))
    }

    fn widen(&self) -> Box<dyn BiasSeries<f64> + '_> {
        Box::new(Widened { inner: self })
    }
}

struct Widened<'a, T: Scalar> {
    inner: &'a CustomSeries<T>,
}

impl<T: Scalar> BiasSeries<f64> for Widened<'_, T> {
    fn label(&self) -> String {
        self.inner.label()
    }

    fn log_bias(&self, t: u64) -> f64 {
        self.inner.log_bias(t).as_f64()
    }

    fn log_bias_continuous(&self, x: f64) -> Option<f64> {
        self.inner.log_bias_continuous(T::lit(x)).map(Scalar::as_f64)
    }

    fn widen(&self) -> Box<dyn BiasSeries<f64> + '_> {
        Box::new(Widened { inner: self.inner })
    }
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    comp: T,
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            comp: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

/// `sums[j-1] = Σ_{t=0}^{j-1} b_t` for `j = 1..=J`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSumTable<T> {
    label: String,
    sums: Vec<T>,
}

impl<T: Scalar> PartialSumTable<T> {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn horizon(&self) -> usize {
        self.sums.len()
    }

    /// `B_j = Σ_{t<j} b_t` for `1 <= j <= J`; `B_0 = 0`.
    pub fn sum_through(&self, j: usize) -> T {
        if j == 0 {
            T::zero()
        } else {
            self.sums[j - 1]
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.sums
    }

    pub fn last(&self) -> T {
        *self.sums.last().expect("non-empty table")
    }
}

/// Compensated ascending-order partial sums up to `horizon`.
pub fn partial_sums<T: Scalar, S: BiasSeries<T> + ?Sized>(
    series: &S,
    horizon: usize,
) -> Result<PartialSumTable<T>, SeriesError> {
    if horizon == 0 {
        return Err(SeriesError::EmptyHorizon);
    }
    let mut acc = CompensatedSum::new();
    let sums = (0..horizon as u64)
        .map(|t| {
            acc.add(series.log_bias(t).exp());
            acc.value()
        })
        .collect();
    Ok(PartialSumTable {
        label: series.label(),
        sums,
    })
}

/// Raabe statistic `t (b_t / b_{t+1} - 1)`.
pub fn raabe_statistic<T: Scalar, S: BiasSeries<T> + ?Sized>(series: &S, t: u64) -> Result<T, SeriesError> {
    let next = series.log_bias(t + 1);
    if next == T::neg_infinity() {
        return Err(SeriesError::ZeroTerm { t: t + 1 });
    }
    Ok(T::of_u64(t) * (series.log_bias(t) - next).exp_m1())
}

/// Raabe statistic of the Sandwich power-law majorant
/// `g(t) = e^k (2t/π)^(-kd/(2 ln r))`; tends to `kd/(2 ln r)`.
pub fn majorant_raabe_statistic<T: Scalar>(kernel: &RpeKernel<T>, t: T) -> Option<T> {
    let g0 = kernel.sandwich_majorant_log(t)?;
    let g1 = kernel.sandwich_majorant_log(t + T::one())?;
    Some(t * (g0 - g1).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnalyticVerdict {
    Convergent,
    Divergent,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumericVerdict {
    Convergent,
    Divergent,
    Inconclusive,
}

impl fmt::Display for AnalyticVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalyticVerdict::Convergent => "convergent",
            AnalyticVerdict::Divergent => "divergent",
            AnalyticVerdict::Unknown => "unknown",
        })
    }
}

impl fmt::Display for NumericVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NumericVerdict::Convergent => "convergent",
            NumericVerdict::Divergent => "divergent",
            NumericVerdict::Inconclusive => "inconclusive",
        })
    }
}

impl AnalyticVerdict {
    pub fn agrees_with(self, numeric: NumericVerdict) -> bool {
        matches!(
            (self, numeric),
            (AnalyticVerdict::Convergent, NumericVerdict::Convergent)
                | (AnalyticVerdict::Divergent, NumericVerdict::Divergent)
        )
    }
}

/// Known convergence of the catalog series.
///
/// Sandwich is listed as convergent under `d < 2 ln r / k`, the published
/// sufficient condition; the numeric cascade checks it independently.
pub fn analytic_verdict<T: Scalar>(kernel: &RpeKernel<T>) -> AnalyticVerdict {
    use AnalyticVerdict::*;
    match kernel.name() {
        KernelName::Alibi | KernelName::KerplePower | KernelName::Type1 | KernelName::Type2 => Convergent,
        KernelName::WindowMask => Convergent,
        KernelName::KerpleLog => {
            if kernel.param("r").unwrap() > T::one() {
                Convergent
            } else {
                Divergent
            }
        }
        KernelName::Sandwich => {
            let (k, r, d) = (
                kernel.param("k").unwrap(),
                kernel.param("r").unwrap(),
                kernel.param("d").unwrap(),
            );
            if r > T::one() && d < T::lit(2.0) * r.ln() / k {
                Convergent
            } else {
                Unknown
            }
        }
        KernelName::InverseN | KernelName::InverseNLogN => Divergent,
    }
}

/// One step of the numeric cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub test: &'static str,
    pub statistic: f64,
    pub outcome: &'static str,
}

impl fmt::Display for Evidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={:.6e}:{}", self.test, self.statistic, self.outcome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    /// Terms vanish beyond the horizon.
    Exact,
    /// Partial sum plus the integral of the log-convex tail.
    TailCorrected,
    /// Plain partial sum; the true limit is larger.
    LowerBound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitEstimate<T> {
    pub value: T,
    pub partial_sum: T,
    pub tail: T,
    pub horizon: u64,
    pub kind: LimitKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceVerdict<T> {
    pub label: String,
    pub analytic: AnalyticVerdict,
    pub numeric: NumericVerdict,
    pub limit: Option<LimitEstimate<T>>,
    pub evidence: Vec<Evidence>,
}

impl<T: Scalar> ConvergenceVerdict<T> {
    pub fn limit_estimate(&self) -> Option<T> {
        self.limit.map(|l| l.value)
    }

    /// Verdicts agree, or one side is undecided.
    pub fn is_consistent(&self) -> bool {
        self.analytic == AnalyticVerdict::Unknown
            || self.numeric == NumericVerdict::Inconclusive
            || self.analytic.agrees_with(self.numeric)
    }

    pub fn evidence_summary(&self) -> String {
        self.evidence.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    }
}

struct SumProbe {
    decades: [f64; 5],
    plateau_j: f64,
    plateau_2j: f64,
    at_limit: f64,
}

fn probe_sums(series: &dyn BiasSeries<f64>) -> SumProbe {
    let mut acc = CompensatedSum::new();
    let mut decades = [0.0; 5];
    let (mut plateau_j, mut plateau_2j) = (0.0, 0.0);
    let mut next_decade = 1_000u64;
    let mut idx = 0;
    for t in 0..LIMIT_HORIZON {
        acc.add(series.log_bias(t).exp());
        let j = t + 1;
        if j == next_decade {
            decades[idx] = acc.value();
            idx += 1;
            next_decade *= 10;
        }
        if j == PLATEAU_HORIZON {
            plateau_j = acc.value();
        }
        if j == 2 * PLATEAU_HORIZON {
            plateau_2j = acc.value();
        }
    }
    SumProbe {
        decades,
        plateau_j,
        plateau_2j,
        at_limit: acc.value(),
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<u64> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut v: Vec<u64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp().round() as u64)
        .collect();
    v.dedup();
    v
}

fn sampled_monotone(series: &dyn BiasSeries<f64>) -> bool {
    let grid = log_grid(1e3, 1e6, 200);
    let mut prev = f64::INFINITY;
    for &t in &grid {
        let (a, b) = (series.log_bias(t), series.log_bias(t + 1));
        if b > a || a > prev {
            return false;
        }
        prev = b;
    }
    true
}

/// `ln ∫_{e^lo}^{e^hi} b(x) dx` by Simpson's rule in `u = ln x`.
fn log_segment_integral(f: &dyn Fn(f64) -> Option<f64>, lo: f64, hi: f64, panels: usize) -> Option<f64> {
    let h = (hi - lo) / panels as f64;
    let mut terms = Vec::with_capacity(panels + 1);
    for i in 0..=panels {
        let u = lo + h * i as f64;
        let w: f64 = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        terms.push(u + f(u.exp())? + (w * h / 3.0).ln());
    }
    Some(log_sum_exp(&terms))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Ratio of the last two masses over `[e^u, e^{2u}]`, doubling `u` from `ln 10`.
fn log_scale_integral_ratio(series: &dyn BiasSeries<f64>) -> Option<(f64, Vec<f64>)> {
    let f = |x: f64| series.log_bias_continuous(x);
    f(10.0)?;
    let u_max = 0.98 * f64::MAX.ln();
    let mut logs = Vec::new();
    let mut u = 10f64.ln();
    while 2.0 * u <= u_max {
        logs.push(log_segment_integral(&f, u, 2.0 * u, 4096)?);
        u *= 2.0;
    }
    let n = logs.len();
    if n < 2 {
        return None;
    }
    let ratio = if logs[n - 2] == f64::NEG_INFINITY {
        0.0
    } else {
        (logs[n - 1] - logs[n - 2]).exp()
    };
    Some((ratio, logs))
}

fn convex_tail(series: &dyn BiasSeries<f64>, from: f64) -> bool {
    let mut x = from;
    for _ in 0..12 {
        let h = x / 8.0;
        let (Some(a), Some(b), Some(c)) = (
            series.log_bias_continuous(x - h),
            series.log_bias_continuous(x),
            series.log_bias_continuous(x + h),
        ) else {
            return false;
        };
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            // exp(-inf) tails are handled by the integral itself
            return b == f64::NEG_INFINITY;
        }
        if a + c - 2.0 * b < -1e-12 * (1.0 + b.abs()) {
            return false;
        }
        x *= 2.0;
    }
    true
}

/// `∫_a^∞ b(x) dx` by Simpson's rule in `u = ln(x/a)`; `None` if the integrand
/// has not become negligible before `x` overflows.
fn tail_integral(series: &dyn BiasSeries<f64>, a: f64) -> Option<f64> {
    let h = 1.0 / 64.0;
    let u_max = 0.98 * f64::MAX.ln() - a.ln();
    let g = |u: f64| -> Option<f64> {
        let x = a * u.exp();
        Some((x * series.log_bias_continuous(x)?.exp()).max(0.0))
    };
    let mut total = 0.0;
    let mut u = 0.0;
    let mut left = g(0.0)?;
    while u + 2.0 * h <= u_max {
        let mid = g(u + h)?;
        let right = g(u + 2.0 * h)?;
        let piece = h / 3.0 * (left + 4.0 * mid + right);
        total += piece;
        u += 2.0 * h;
        left = right;
        if right <= 1e-22 * total.max(f64::MIN_POSITIVE) && right <= mid {
            return Some(total);
        }
        if total == 0.0 && right == 0.0 {
            return Some(0.0);
        }
    }
    None
}

fn estimate_limit(series: &dyn BiasSeries<f64>, partial: f64, vanishing: bool) -> LimitEstimate<f64> {
    let horizon = LIMIT_HORIZON;
    if vanishing {
        return LimitEstimate {
            value: partial,
            partial_sum: partial,
            tail: 0.0,
            horizon,
            kind: LimitKind::Exact,
        };
    }
    let start = horizon as f64 - 0.5;
    if convex_tail(series, horizon as f64) {
        if let Some(tail) = tail_integral(series, start) {
            return LimitEstimate {
                value: partial + tail,
                partial_sum: partial,
                tail,
                horizon,
                kind: LimitKind::TailCorrected,
            };
        }
    }
    LimitEstimate {
        value: partial,
        partial_sum: partial,
        tail: 0.0,
        horizon,
        kind: LimitKind::LowerBound,
    }
}

/// Analytic lookup plus numeric diagnostic cascade.
pub fn classify<T: Scalar, S: BiasSeries<T> + ?Sized>(series: &S) -> ConvergenceVerdict<T> {
    let analytic = series.analytic();
    let wide = series.widen();
    let s: &dyn BiasSeries<f64> = wide.as_ref();
    let mut evidence = Vec::new();

    let numeric_and_vanishing = numeric_cascade(s, &mut evidence);
    let (numeric, vanishing, probe) = numeric_and_vanishing;
    let limit = (numeric == NumericVerdict::Convergent).then(|| {
        let est = estimate_limit(s, probe.at_limit, vanishing);
        evidence.push(Evidence {
            test: match est.kind {
                LimitKind::Exact => "limit_exact",
                LimitKind::TailCorrected => "limit_tail_integral",
                LimitKind::LowerBound => "limit_lower_bound",
            },
            statistic: est.value,
            outcome: "estimate",
        });
        LimitEstimate {
            value: T::lit(est.value),
            partial_sum: T::lit(est.partial_sum),
            tail: T::lit(est.tail),
            horizon: est.horizon,
            kind: est.kind,
        }
    });
    ConvergenceVerdict {
        label: series.label(),
        analytic,
        numeric,
        limit,
        evidence,
    }
}

fn numeric_cascade(s: &dyn BiasSeries<f64>, ev: &mut Vec<Evidence>) -> (NumericVerdict, bool, SumProbe) {
    use NumericVerdict::*;
    let probe = probe_sums(s);
    let mut push = |test, statistic, outcome| ev.push(Evidence { test, statistic, outcome });

    // 1. vanishing terms
    let tail_probe = log_grid(1e6, LIMIT_HORIZON as f64, 16);
    if tail_probe.iter().all(|&t| s.log_bias(t) == f64::NEG_INFINITY) {
        let first_zero = (0..PLATEAU_HORIZON).find(|&t| s.log_bias(t) == f64::NEG_INFINITY);
        push("zero_terms", first_zero.unwrap_or(PLATEAU_HORIZON) as f64, "convergent");
        return (Convergent, true, probe);
    }

    // 2. decade mass S(10^7) - S(10^6) against S(10^6) - S(10^5)
    let d = probe.decades;
    let (g_prev, g_last) = (d[3] - d[2], d[4] - d[3]);
    let decade_ratio = if g_prev > 0.0 { g_last / g_prev } else { 0.0 };
    if decade_ratio >= DECADE_FLAT {
        push("decade_mass_ratio", decade_ratio, "divergent");
        return (Divergent, false, probe);
    }
    push("decade_mass_ratio", decade_ratio, "pass");

    if sampled_monotone(s) {
        // 3. geometric ratio
        let gap = |t: u64| -(s.log_bias(t + 1) - s.log_bias(t)).exp_m1();
        let (g4, g6) = (gap(10_000), gap(1_000_000));
        if g6 > RATIO_GAP_MIN && g6 >= 0.5 * g4 {
            push("ratio_gap", g6, "convergent");
            return (Convergent, false, probe);
        }
        push("ratio_gap", g6, "pass");

        // 4. Raabe, extrapolated assuming R(t) = R∞ + c / ln t
        let r = |t: u64| (t as f64) * (s.log_bias(t) - s.log_bias(t + 1)).exp_m1();
        let (t5, t6) = (100_000u64, 1_000_000u64);
        let (l5, l6) = ((t5 as f64).ln(), (t6 as f64).ln());
        let r_inf = (r(t6) * l6 - r(t5) * l5) / (l6 - l5);
        if r_inf > 1.0 + RAABE_MARGIN {
            push("raabe_limit", r_inf, "convergent");
            return (Convergent, false, probe);
        }
        if r_inf < 1.0 - RAABE_MARGIN {
            push("raabe_limit", r_inf, "divergent");
            return (Divergent, false, probe);
        }
        push("raabe_limit", r_inf, "boundary");

        // 5. log-scale integral comparison
        if let Some((ratio, _)) = log_scale_integral_ratio(s) {
            if ratio >= LOG_INTEGRAL_DIVERGENT {
                push("log_integral_ratio", ratio, "divergent");
                return (Divergent, false, probe);
            }
            if ratio <= LOG_INTEGRAL_CONVERGENT {
                push("log_integral_ratio", ratio, "convergent");
                return (Convergent, false, probe);
            }
            push("log_integral_ratio", ratio, "pass");
        }
    } else {
        push("sampled_monotone", 0.0, "skip_ratio_tests");
    }

    // 6. plateau of partial sums
    let growth = (probe.plateau_2j - probe.plateau_j) / probe.plateau_2j;
    if growth < PLATEAU_CONVERGENT {
        push("plateau_growth", growth, "convergent");
        (Convergent, false, probe)
    } else if growth > PLATEAU_DIVERGENT {
        push("plateau_growth", growth, "divergent");
        (Divergent, false, probe)
    } else {
        push("plateau_growth", growth, "inconclusive");
        (Inconclusive, false, probe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type K = RpeKernel<f64>;

    #[test]
    fn alibi_partial_sums() {
        let t = partial_sums(&K::alibi(1.0).unwrap(), 3).unwrap();
        let e = (-1.0f64).exp();
        let expected = [1.0, 1.0 + e, 1.0 + e + e * e];
        for (a, b) in t.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // closed form (1 - e^{-j}) / (1 - e^{-1})
        for j in 1..=3 {
            let closed = (1.0 - (-(j as f64)).exp()) / (1.0 - e);
            assert!((t.sum_through(j) - closed).abs() < 1e-14);
        }
        assert!((t.last() - 1.503_215).abs() < 1e-6);
    }

    #[test]
    fn type1_single_term_and_horizon_error() {
        assert_eq!(partial_sums(&K::type1(), 1).unwrap().as_slice(), &[1.0]);
        assert_eq!(partial_sums(&K::type1(), 0), Err(SeriesError::EmptyHorizon));
    }

    #[test]
    fn harmonic_lower_bound() {
        let t = partial_sums(&K::inverse_n(), 10_000).unwrap();
        assert!(t.sum_through(10) >= 11f64.ln());
        for j in 1..=t.horizon() {
            assert!(t.sum_through(j) >= (j as f64 + 1.0).ln());
        }
    }

    #[test]
    fn n_log_n_lower_bound() {
        // sums over n in [3, k] correspond to offsets 0..k-3
        let t = partial_sums(&K::inverse_n_log_n(), 100_000).unwrap();
        for j in 1..=t.horizon() {
            let k = (j + 2) as f64;
            assert!(t.sum_through(j) >= (k + 1.0).ln().ln() - 3f64.ln().ln());
        }
    }

    #[test]
    fn table_increments_equal_terms() {
        for k in crate::kernel::catalog::<f64>() {
            let t = partial_sums(&k, 5000).unwrap();
            for j in 1..t.horizon() {
                let inc = t.sum_through(j + 1) - t.sum_through(j);
                let b = k.bias(j as u64);
                assert!((inc - b).abs() <= 1e-12 * t.sum_through(j + 1), "{k} {j}");
                if b > f64::EPSILON * t.sum_through(j) {
                    assert!(t.sum_through(j + 1) > t.sum_through(j));
                }
            }
        }
    }

    #[test]
    fn raabe_values() {
        let inv = K::inverse_n();
        for t in [1u64, 10, 1000, 100_000] {
            let expected = t as f64 / (t as f64 + 1.0);
            assert!((raabe_statistic(&inv, t).unwrap() - expected).abs() < 1e-9);
        }
        let alibi = K::alibi(1.0).unwrap();
        let r = raabe_statistic(&alibi, 10).unwrap();
        assert!((r - 10.0 * (std::f64::consts::E - 1.0)).abs() < 1e-10);
        assert!((r - 17.1828).abs() < 1e-4);
        let w = K::window_mask(4).unwrap();
        assert_eq!(raabe_statistic(&w, 3), Err(SeriesError::ZeroTerm { t: 4 }));
    }

    #[test]
    fn sandwich_majorant_raabe_limit() {
        let s = K::sandwich(0.5, 512.0, 8).unwrap();
        let limit = 0.5 * 8.0 / (2.0 * 512f64.ln());
        assert!((limit - 0.320_599).abs() < 1e-6);
        assert!((limit - 0.3207).abs() < 5e-4);
        let r = majorant_raabe_statistic(&s, 1e6).unwrap();
        assert!((r - limit).abs() < 0.05 * limit);
        assert!(majorant_raabe_statistic(&K::type1(), 10.0).is_none());
    }

    #[test]
    fn analytic_table() {
        use AnalyticVerdict::*;
        assert_eq!(analytic_verdict(&K::kerple_log(1.0, 1.0).unwrap()), Divergent);
        assert_eq!(analytic_verdict(&K::kerple_log(1.5, 1.0).unwrap()), Convergent);
        assert_eq!(analytic_verdict(&K::sandwich(2.0, 512.0, 8).unwrap()), Unknown);
        assert_eq!(analytic_verdict(&K::inverse_n_log_n()), Divergent);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::<f64>::new();
        let mut naive = 0.0f64;
        acc.add(1.0);
        naive += 1.0;
        for _ in 0..1_000_000 {
            acc.add(1e-16);
            naive += 1e-16;
        }
        assert_eq!(naive, 1.0);
        assert!((acc.value() - (1.0 + 1e-10)).abs() < 1e-20);
    }

    #[test]
    fn custom_series_with_and_without_extension() {
        let p = CustomSeries::new("n^-1.5", |t: u64| -1.5 * ((t + 1) as f64).ln());
        let v = classify(&p);
        assert_eq!(v.analytic, AnalyticVerdict::Unknown);
        assert_eq!(v.numeric, NumericVerdict::Convergent);
        // zeta(1.5) = 2.6123753...; without a continuous extension the sum is a lower bound
        let l = v.limit.unwrap();
        assert_eq!(l.kind, LimitKind::LowerBound);
        assert!(l.value < 2.612_375_348_685_5);

        let q = CustomSeries::new("n^-1.5", |t: u64| -1.5 * ((t + 1) as f64).ln())
            .with_continuous(|x: f64| -1.5 * (x + 1.0).ln());
        let l = classify(&q).limit.unwrap();
        assert_eq!(l.kind, LimitKind::TailCorrected);
        assert!((l.value - 2.612_375_348_685_5).abs() < 1e-8);

        let d = CustomSeries::new("n^-0.9", |t: u64| -0.9 * ((t + 1) as f64).ln());
        assert_eq!(classify(&d).numeric, NumericVerdict::Divergent);

        let nl2 = CustomSeries::new("1/(n ln^2 n)", |t: u64| {
            let n = (t + 3) as f64;
            -(n.ln() + 2.0 * n.ln().ln())
        })
        .with_continuous(|x: f64| {
            let n = x + 3.0;
            -(n.ln() + 2.0 * n.ln().ln())
        });
        assert_eq!(classify(&nl2).numeric, NumericVerdict::Convergent);
    }
}
