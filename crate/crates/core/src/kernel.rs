//! Catalog of relative positional encoding bias series.
//!
//! Every kernel maps a non-negative offset `t = i - j` to a weight
//! `b_t = exp(r_t) > 0` multiplying the attention score of key `j` for
//! query `i`. Offsets are 0-based. Kernels that are written as a function
//! of `n` in the literature are evaluated at `n = t + 1` (`Type1`, `Type2`,
//! `InverseN`) or `n = t + 3` (`InverseNLogN`, so that `ln n > 1`), which
//! keeps `b_0` finite.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;

pub const DEFAULT_ALIBI_K: f64 = 0.5;
pub const DEFAULT_KERPLE_LOG_R: f64 = 2.0;
pub const DEFAULT_KERPLE_LOG_K: f64 = 1.0;
pub const DEFAULT_KERPLE_POWER_K: f64 = 0.1;
pub const DEFAULT_KERPLE_POWER_R: f64 = 1.0;
pub const DEFAULT_SANDWICH_K: f64 = 0.5;
pub const DEFAULT_SANDWICH_R: f64 = 512.0;
pub const DEFAULT_SANDWICH_D: u32 = 8;
pub const DEFAULT_WINDOW_W: u64 = 16;

/// Offset added to `t` before evaluating `1/(n ln n)`.
pub const INVERSE_N_LOG_N_SHIFT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("kernel `{kernel}` has no parameter `{key}`")]
    UnknownParameter { kernel: &'static str, key: String },
    #[error("parameter `{key}` given twice")]
    DuplicateParameter { key: String },
    #[error("parameter `{key}` of `{kernel}` must be positive, got {value}")]
    NonPositive {
        kernel: &'static str,
        key: &'static str,
        value: f64,
    },
    #[error("kerple_power exponent r must lie in (0, 2], got {0}")]
    PowerExponent(f64),
    #[error("sandwich dimension d must be a positive even integer, got {0}")]
    SandwichDimension(f64),
    #[error("window_mask width w must be a positive integer, got {0}")]
    WindowWidth(f64),
    #[error("invalid value `{value}` for parameter `{key}`")]
    BadNumber { key: String, value: String },
    #[error("malformed kernel spec `{spec}`: {reason}")]
    Syntax { spec: String, reason: &'static str },
}

/// Tag of a catalog kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelName {
    Alibi,
    KerpleLog,
    KerplePower,
    Sandwich,
    Type1,
    Type2,
    InverseN,
    InverseNLogN,
    WindowMask,
}

impl KernelName {
    pub const ALL: [KernelName; 9] = [
        KernelName::Alibi,
        KernelName::KerpleLog,
        KernelName::KerplePower,
        KernelName::Sandwich,
        KernelName::Type1,
        KernelName::Type2,
        KernelName::InverseN,
        KernelName::InverseNLogN,
        KernelName::WindowMask,
    ];

    /// Canonical spec-string name.
    pub fn as_str(self) -> &'static str {
        match self {
            KernelName::Alibi => "alibi",
            KernelName::KerpleLog => "kerple_log",
            KernelName::KerplePower => "kerple_power",
            KernelName::Sandwich => "sandwich",
            KernelName::Type1 => "type1",
            KernelName::Type2 => "type2",
            KernelName::InverseN => "inverse_n",
            KernelName::InverseNLogN => "inverse_n_log_n",
            KernelName::WindowMask => "window_mask",
        }
    }

    /// Human readable closed form of `b_t`.
    pub fn formula(self) -> &'static str {
        match self {
            KernelName::Alibi => "exp(-k t)",
            KernelName::KerpleLog => "exp(-r log(1+k t)) = (1+k t)^(-r)",
            KernelName::KerplePower => "exp(-k t^r), 0<r<=2",
            KernelName::Sandwich => "exp(k(sum_{j=1}^{d/2} cos(t/r^(2j/d)) - d/2))",
            KernelName::Type1 => "1/n^2 = exp(-2 ln n), n=t+1",
            KernelName::Type2 => "exp(-ln²n), n=t+1",
            KernelName::InverseN => "1/n, n=t+1",
            KernelName::InverseNLogN => "1/(n ln n), n=t+3",
            KernelName::WindowMask => "1 if t<=w-1 else 0",
        }
    }

    /// Parameter keys accepted by the spec-string parser.
    pub fn param_keys(self) -> &'static [&'static str] {
        match self {
            KernelName::Alibi => &["k"],
            KernelName::KerpleLog => &["r", "k"],
            KernelName::KerplePower => &["k", "r"],
            KernelName::Sandwich => &["k", "r", "d"],
            KernelName::WindowMask => &["w"],
            KernelName::Type1 | KernelName::Type2 | KernelName::InverseN | KernelName::InverseNLogN => &[],
        }
    }

    fn parse_name(s: &str) -> Option<KernelName> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        Some(match norm.as_str() {
            "alibi" => KernelName::Alibi,
            "kerplelog" => KernelName::KerpleLog,
            "kerplepower" | "kerplepoly" => KernelName::KerplePower,
            "sandwich" => KernelName::Sandwich,
            "type1" => KernelName::Type1,
            "type2" => KernelName::Type2,
            "inversen" => KernelName::InverseN,
            "inversenlogn" => KernelName::InverseNLogN,
            "windowmask" | "window" => KernelName::WindowMask,
            _ => return None,
        })
    }
}

impl fmt::Display for KernelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelName {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelName::parse_name(s.trim()).ok_or_else(|| KernelError::UnknownKernel(s.trim().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Form<T> {
    Alibi { k: T },
    KerpleLog { r: T, k: T },
    KerplePower { k: T, r: T },
    Sandwich { k: T, r: T, d: u32, freqs: Vec<T> },
    Type1,
    Type2,
    InverseN,
    InverseNLogN,
    WindowMask { w: u64 },
}

/// A validated bias series `b_t`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RpeKernel<T> {
    form: Form<T>,
}

fn positive<T: Scalar>(kernel: KernelName, key: &'static str, value: T) -> Result<T, KernelError> {
    if value > T::zero() && value.is_finite() {
        Ok(value)
    } else {
        Err(KernelError::NonPositive {
            kernel: kernel.as_str(),
            key,
            value: value.as_f64(),
        })
    }
}

impl<T: Scalar> RpeKernel<T> {
    pub fn alibi(k: T) -> Result<Self, KernelError> {
        let k = positive(KernelName::Alibi, "k", k)?;
        Ok(Self { form: Form::Alibi { k } })
    }

    pub fn kerple_log(r: T, k: T) -> Result<Self, KernelError> {
        let r = positive(KernelName::KerpleLog, "r", r)?;
        let k = positive(KernelName::KerpleLog, "k", k)?;
        Ok(Self { form: Form::KerpleLog { r, k } })
    }

    pub fn kerple_power(k: T, r: T) -> Result<Self, KernelError> {
        let k = positive(KernelName::KerplePower, "k", k)?;
        let r = positive(KernelName::KerplePower, "r", r)?;
        if r > T::lit(2.0) {
            return Err(KernelError::PowerExponent(r.as_f64()));
        }
        Ok(Self { form: Form::KerplePower { k, r } })
    }

    pub fn sandwich(k: T, r: T, d: u32) -> Result<Self, KernelError> {
        let k = positive(KernelName::Sandwich, "k", k)?;
        let r = positive(KernelName::Sandwich, "r", r)?;
        if d == 0 || d % 2 == 1 {
            return Err(KernelError::SandwichDimension(d as f64));
        }
        let dd = T::from_u32(d).unwrap();
        let freqs = (1..=d / 2)
            .map(|j| r.powf(-T::lit(2.0) * T::from_u32(j).unwrap() / dd))
            .collect();
        Ok(Self {
            form: Form::Sandwich { k, r, d, freqs },
        })
    }

    pub fn type1() -> Self {
        Self { form: Form::Type1 }
    }

    pub fn type2() -> Self {
        Self { form: Form::Type2 }
    }

    pub fn inverse_n() -> Self {
        Self { form: Form::InverseN }
    }

    pub fn inverse_n_log_n() -> Self {
        Self {
            form: Form::InverseNLogN,
        }
    }

    pub fn window_mask(w: u64) -> Result<Self, KernelError> {
        if w == 0 {
            return Err(KernelError::WindowWidth(0.0));
        }
        Ok(Self {
            form: Form::WindowMask { w },
        })
    }

    /// Kernel with its documented default parameters.
    pub fn with_defaults(name: KernelName) -> Self {
        Self::from_params(name, &[]).expect("defaults are valid")
    }

    /// Builds a kernel from named parameters; missing keys take defaults.
    pub fn from_params(name: KernelName, params: &[(&str, T)]) -> Result<Self, KernelError> {
        let mut seen: Vec<&str> = Vec::new();
        for (key, _) in params {
            if !name.param_keys().contains(key) {
                return Err(KernelError::UnknownParameter {
                    kernel: name.as_str(),
                    key: key.to_string(),
                });
            }
            if seen.contains(key) {
                return Err(KernelError::DuplicateParameter { key: key.to_string() });
            }
            seen.push(key);
        }
        let get = |key: &str, default: f64| -> T {
            params
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| T::lit(default))
        };
        match name {
            KernelName::Alibi => Self::alibi(get("k", DEFAULT_ALIBI_K)),
            KernelName::KerpleLog => Self::kerple_log(
                get("r", DEFAULT_KERPLE_LOG_R),
                get("k", DEFAULT_KERPLE_LOG_K),
            ),
            KernelName::KerplePower => Self::kerple_power(
                get("k", DEFAULT_KERPLE_POWER_K),
                get("r", DEFAULT_KERPLE_POWER_R),
            ),
            KernelName::Sandwich => {
                let d = get("d", DEFAULT_SANDWICH_D as f64);
                let di = d.to_u32().filter(|v| T::from_u32(*v).unwrap() == d);
                match di {
                    Some(d) => Self::sandwich(get("k", DEFAULT_SANDWICH_K), get("r", DEFAULT_SANDWICH_R), d),
                    None => Err(KernelError::SandwichDimension(d.as_f64())),
                }
            }
            KernelName::Type1 => Ok(Self::type1()),
            KernelName::Type2 => Ok(Self::type2()),
            KernelName::InverseN => Ok(Self::inverse_n()),
            KernelName::InverseNLogN => Ok(Self::inverse_n_log_n()),
            KernelName::WindowMask => {
                let w = get("w", DEFAULT_WINDOW_W as f64);
                match w.to_u64().filter(|v| T::of_u64(*v) == w && *v > 0) {
                    Some(w) => Self::window_mask(w),
                    None => Err(KernelError::WindowWidth(w.as_f64())),
                }
            }
        }
    }

    pub fn name(&self) -> KernelName {
        match self.form {
            Form::Alibi { .. } => KernelName::Alibi,
            Form::KerpleLog { .. } => KernelName::KerpleLog,
            Form::KerplePower { .. } => KernelName::KerplePower,
            Form::Sandwich { .. } => KernelName::Sandwich,
            Form::Type1 => KernelName::Type1,
            Form::Type2 => KernelName::Type2,
            Form::InverseN => KernelName::InverseN,
            Form::InverseNLogN => KernelName::InverseNLogN,
            Form::WindowMask { .. } => KernelName::WindowMask,
        }
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(&'static str, T)> {
        match &self.form {
            Form::Alibi { k } => vec![("k", *k)],
            Form::KerpleLog { r, k } => vec![("r", *r), ("k", *k)],
            Form::KerplePower { k, r } => vec![("k", *k), ("r", *r)],
            Form::Sandwich { k, r, d, .. } => vec![("k", *k), ("r", *r), ("d", T::from_u32(*d).unwrap())],
            Form::WindowMask { w } => vec![("w", T::of_u64(*w))],
            Form::Type1 | Form::Type2 | Form::InverseN | Form::InverseNLogN => Vec::new(),
        }
    }

    pub fn param(&self, key: &str) -> Option<T> {
        self.params().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Window width for `WindowMask`, `None` otherwise.
    pub fn window(&self) -> Option<u64> {
        match self.form {
            Form::WindowMask { w } => Some(w),
            _ => None,
        }
    }

    /// `ln b_t`; `-inf` outside a window mask.
    pub fn log_bias(&self, t: u64) -> T {
        match &self.form {
            Form::WindowMask { w } => {
                if t < *w {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            }
            _ => self.log_bias_at(T::of_u64(t)),
        }
    }

    /// `b_t`.
    pub fn bias(&self, t: u64) -> T {
        match &self.form {
            Form::Type1 => {
                let n = T::of_u64(t) + T::one();
                T::one() / (n * n)
            }
            Form::InverseN => T::one() / (T::of_u64(t) + T::one()),
            Form::WindowMask { w } => {
                if t < *w {
                    T::one()
                } else {
                    T::zero()
                }
            }
            _ => self.log_bias(t).exp(),
        }
    }

    /// `ln b` extended to real offsets `x >= 0` by the same closed form.
    ///
    /// For `WindowMask` the extension is the indicator of `x < w`.
    pub fn log_bias_at(&self, x: T) -> T {
        let one = T::one();
        match &self.form {
            Form::Alibi { k } => -*k * x,
            Form::KerpleLog { r, k } => -*r * (*k * x).ln_1p(),
            Form::KerplePower { k, r } => -*k * x.powf(*r),
            Form::Sandwich { k, freqs, .. } => {
                // cos(a) - 1 = -2 sin²(a/2), exact at a = 0
                let two = T::lit(2.0);
                let s: T = freqs
                    .iter()
                    .map(|f| {
                        let h = (x * *f / two).sin();
                        -two * h * h
                    })
                    .sum();
                *k * s
            }
            Form::Type1 => -T::lit(2.0) * (x + one).ln(),
            Form::Type2 => {
                let l = (x + one).ln();
                -l * l
            }
            Form::InverseN => -(x + one).ln(),
            Form::InverseNLogN => {
                let n = x + T::of_u64(INVERSE_N_LOG_N_SHIFT);
                -(n.ln() + n.ln().ln())
            }
            Form::WindowMask { w } => {
                if x < T::of_u64(*w) {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            }
        }
    }

    /// Log of the power-law majorant `g(t) = e^k (2t/π)^(-kd/(2 ln r))` used to
    /// bound Sandwich terms; `None` for other kernels or `t <= 0`.
    pub fn sandwich_majorant_log(&self, t: T) -> Option<T> {
        match &self.form {
            Form::Sandwich { k, .. } if t > T::zero() => {
                let p = self.sandwich_exponent()?;
                Some(*k - p * (T::lit(2.0) * t / T::PI()).ln())
            }
            _ => None,
        }
    }

    /// `kd / (2 ln r)` for Sandwich kernels.
    pub fn sandwich_exponent(&self) -> Option<T> {
        match &self.form {
            Form::Sandwich { k, r, d, .. } => {
                Some(*k * T::from_u32(*d).unwrap() / (T::lit(2.0) * r.ln()))
            }
            _ => None,
        }
    }

    /// Canonical spec string, e.g. `kerple_log(r=2,k=1)`.
    pub fn spec_string(&self) -> String {
        self.to_string()
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> RpeKernel<U> {
        let params: Vec<(&str, U)> = self
            .params()
            .into_iter()
            .map(|(k, v)| (k, U::lit(v.as_f64())))
            .collect();
        RpeKernel::from_params(self.name(), &params).expect("cast of a valid kernel")
    }
}

impl<T: Scalar> fmt::Display for RpeKernel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())?;
        let params = self.params();
        if !params.is_empty() {
            f.write_str("(")?;
            for (i, (k, v)) in params.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{k}={v}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl<T: Scalar> FromStr for RpeKernel<T> {
    type Err = KernelError;

    /// Parses `name(key=value,...)`; names and keys are case-insensitive and
    /// the parenthesised list may be omitted.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let syntax = |reason| KernelError::Syntax {
            spec: spec.to_string(),
            reason,
        };
        let s = spec.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let rest = s[open + 1..].trim_end();
                let inner = rest.strip_suffix(')').ok_or_else(|| syntax("missing closing parenthesis"))?;
                (&s[..open], Some(inner))
            }
            None => (s, None),
        };
        if name.trim().is_empty() {
            return Err(syntax("empty kernel name"));
        }
        let name: KernelName = name.parse()?;
        let mut keys: Vec<String> = Vec::new();
        let mut values: Vec<T> = Vec::new();
        if let Some(args) = args {
            for item in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
                let (k, v) = item.split_once('=').ok_or_else(|| syntax("expected key=value"))?;
                let key = k.trim().to_lowercase();
                let value: f64 = v.trim().parse().map_err(|_| KernelError::BadNumber {
                    key: key.clone(),
                    value: v.trim().to_string(),
                })?;
                keys.push(key);
                values.push(T::lit(value));
            }
        }
        let params: Vec<(&str, T)> = keys.iter().map(String::as_str).zip(values).collect();
        RpeKernel::from_params(name, &params)
    }
}

/// Every catalog kernel with default parameters, in catalog order.
pub fn catalog<T: Scalar>() -> Vec<RpeKernel<T>> {
    KernelName::ALL.iter().map(|n| RpeKernel::with_defaults(*n)).collect()
}

/// The catalog plus the non-convergent member of the kerple_log family
/// (`r = 1`), in catalog order.
pub fn classification_configurations<T: Scalar>() -> Vec<RpeKernel<T>> {
    let mut out = Vec::with_capacity(KernelName::ALL.len() + 1);
    for name in KernelName::ALL {
        out.push(RpeKernel::with_defaults(name));
        if name == KernelName::KerpleLog {
            out.push(RpeKernel::kerple_log(T::one(), T::one()).expect("valid parameters"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type K = RpeKernel<f64>;

    fn all_kernels() -> Vec<K> {
        let mut ks = catalog::<f64>();
        ks.push(K::kerple_log(1.0, 1.0).unwrap());
        ks.push(K::kerple_power(0.5, 2.0).unwrap());
        ks.push(K::kerple_power(1.0, 0.5).unwrap());
        ks
    }

    #[test]
    fn documented_values() {
        assert_eq!(K::alibi(1.0).unwrap().bias(0), 1.0);
        assert!((K::alibi(1.0).unwrap().bias(1) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(K::type1().bias(1), 0.25);
        assert_eq!(K::window_mask(4).unwrap().bias(5), 0.0);
        assert_eq!(K::sandwich(0.1, 512.0, 8).unwrap().bias(0), 1.0);
        assert_eq!(K::type2().log_bias(0), 0.0);
        assert_eq!(K::alibi(2.0).unwrap().log_bias(3), -6.0);
        assert_eq!(K::window_mask(4).unwrap().log_bias(4), f64::NEG_INFINITY);
    }

    #[test]
    fn inverse_n_log_n_at_zero() {
        // -ln(3 ln 3) = -1.1926601162848087 (50-digit reference)
        let expected: f64 = -1.192_660_116_284_808_7;
        assert!((expected - (-1.192_71)).abs() < 1e-4);
        let got = K::inverse_n_log_n().log_bias(0);
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn bias_positive_and_first_term_is_one() {
        for k in all_kernels() {
            for t in [0u64, 1, 2, 10, 1000, 1_000_000] {
                let b = k.bias(t);
                if k.name() == KernelName::WindowMask {
                    assert!(b == 0.0 || b == 1.0);
                } else {
                    // positive in exact arithmetic; the log domain never underflows
                    assert!(k.log_bias(t).is_finite(), "{k} at {t}");
                    assert!(b > 0.0 || k.log_bias(t) < f64::MIN_POSITIVE.ln(), "{k} at {t}: {b}");
                }
            }
            if k.name() != KernelName::InverseNLogN {
                assert_eq!(k.bias(0), 1.0, "{k}");
            }
        }
    }

    #[test]
    fn exp_log_bias_matches_bias() {
        for k in all_kernels() {
            for t in (0..2000u64).chain([10_000, 123_456, 999_999]) {
                let b = k.bias(t);
                let lb = k.log_bias(t).exp();
                if b > 0.0 && b.is_finite() {
                    assert!(((lb - b) / b).abs() < 1e-12, "{k} t={t} {lb} vs {b}");
                } else {
                    assert_eq!(lb, b);
                }
            }
        }
    }

    #[test]
    fn monotone_decay_except_sandwich() {
        // Sandwich is a product of periodic factors and oscillates.
        for k in all_kernels().into_iter().filter(|k| k.name() != KernelName::Sandwich) {
            let mut prev = k.log_bias(0);
            for t in 1..100_000u64 {
                let cur = k.log_bias(t);
                assert!(cur <= prev, "{k} increases at {t}");
                prev = cur;
            }
        }
        let s = K::with_defaults(KernelName::Sandwich);
        assert!((1..200).any(|t| s.bias(t + 1) > s.bias(t)));
    }

    #[test]
    fn type2_dominated_by_type1() {
        let (a, b) = (K::type2(), K::type1());
        let mut prev = f64::INFINITY;
        for t in (100..1_000_000u64).step_by(997) {
            let diff = a.log_bias(t) - b.log_bias(t);
            let n = (t + 1) as f64;
            assert!((diff - (-n.ln().powi(2) + 2.0 * n.ln())).abs() < 1e-9);
            assert!(diff <= prev);
            prev = diff;
        }
        assert!(prev < -100.0);
    }

    #[test]
    fn window_mask_is_band() {
        let k = K::window_mask(5).unwrap();
        for t in 0..20 {
            assert_eq!(k.bias(t) == 1.0, t <= 4);
        }
    }

    #[test]
    fn parse_and_display() {
        let k: K = "alibi(k=0.5)".parse().unwrap();
        assert_eq!(k, K::alibi(0.5).unwrap());
        let k: K = " Kerple_Log ( R = 2 , K=1 ) ".parse().unwrap();
        assert_eq!(k.to_string(), "kerple_log(r=2,k=1)");
        assert_eq!(k.to_string().parse::<K>().unwrap(), k);
        assert_eq!("TYPE2".parse::<K>().unwrap(), K::type2());
        assert_eq!("type1()".parse::<K>().unwrap(), K::type1());
        assert_eq!("sandwich".parse::<K>().unwrap().param("d"), Some(8.0));
        for k in all_kernels() {
            assert_eq!(k.to_string().parse::<K>().unwrap(), k);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!("alibi(q=1)".parse::<K>(), Err(KernelError::UnknownParameter { .. })));
        assert!(matches!("nope".parse::<K>(), Err(KernelError::UnknownKernel(_))));
        assert!(matches!("alibi(k=-1)".parse::<K>(), Err(KernelError::NonPositive { .. })));
        assert!(matches!("alibi(k=0)".parse::<K>(), Err(KernelError::NonPositive { .. })));
        assert!(matches!("kerple_power(r=2.5)".parse::<K>(), Err(KernelError::PowerExponent(_))));
        assert!(matches!("sandwich(d=7)".parse::<K>(), Err(KernelError::SandwichDimension(_))));
        assert!(matches!("sandwich(d=6.5)".parse::<K>(), Err(KernelError::SandwichDimension(_))));
        assert!(matches!("window_mask(w=0)".parse::<K>(), Err(KernelError::WindowWidth(_))));
        assert!(matches!("alibi(k=1".parse::<K>(), Err(KernelError::Syntax { .. })));
        assert!(matches!("alibi(k)".parse::<K>(), Err(KernelError::Syntax { .. })));
        assert!(matches!("alibi(k=x)".parse::<K>(), Err(KernelError::BadNumber { .. })));
        assert!(matches!("alibi(k=1,k=2)".parse::<K>(), Err(KernelError::DuplicateParameter { .. })));
        assert!(matches!("type1(k=1)".parse::<K>(), Err(KernelError::UnknownParameter { .. })));
    }

    #[test]
    fn defaults_satisfy_documented_conditions() {
        let s = K::with_defaults(KernelName::Sandwich);
        let (k, r, d) = (s.param("k").unwrap(), s.param("r").unwrap(), s.param("d").unwrap());
        assert!(d < 2.0 * r.ln() / k);
        assert!(K::with_defaults(KernelName::KerpleLog).param("r").unwrap() > 1.0);
        assert_eq!(catalog::<f64>().len(), 9);
    }

    #[test]
    fn single_precision_agrees() {
        for k in all_kernels() {
            let k32: RpeKernel<f32> = k.cast();
            for t in [0u64, 1, 7, 100, 5000] {
                let (a, b) = (k.bias(t), k32.bias(t) as f64);
                // phase error of single precision grows with the offset
                let rel = 1e-5 + 1e-6 * t as f64;
                assert!((a - b).abs() <= rel * a.max(1e-30) + 1e-30, "{k} {t}");
            }
        }
    }
}
