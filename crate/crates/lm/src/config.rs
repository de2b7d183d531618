//! Flat `key=value` model and optimizer configuration.

use std::fmt;
use std::str::FromStr;

use rpe_core::Kernel;

use crate::corpus::CorpusSpec;
use crate::LmError;

/// How position enters the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    /// Additive attention bias `ln b_{i-j}` from a kernel.
    RpeBias(Kernel),
    /// Sinusoidal absolute encoding added to the embeddings, causal mask only.
    SinusoidalApe,
}

pub const SINUSOIDAL_NAME: &str = "sinusoidal_ape";

impl Encoding {
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            Encoding::RpeBias(k) => Some(k),
            Encoding::SinusoidalApe => None,
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Encoding::RpeBias(k) => write!(f, "{k}"),
            Encoding::SinusoidalApe => f.write_str(SINUSOIDAL_NAME),
        }
    }
}

impl FromStr for Encoding {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if t == SINUSOIDAL_NAME || t == "sinusoidal" || t == "ape" {
            Ok(Encoding::SinusoidalApe)
        } else {
            Ok(Encoding::RpeBias(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub decoder_layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Training length `m`.
    pub seq_len: usize,
    pub encoding: Encoding,
    /// Train per-head kerple parameters instead of keeping the kernel fixed.
    pub learn_kernel: bool,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; zero disables clipping.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub corpus: Option<CorpusSpec>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 2,
            heads: 2,
            hidden_dim: 64,
            ffn_dim: 256,
            vocab_size: 16,
            seq_len: 64,
            encoding: Encoding::RpeBias(Kernel::type1()),
            learn_kernel: false,
            peak_lr: 2e-3,
            warmup_steps: 100,
            betas: (0.9, 0.98),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            corpus: None,
        }
    }
}

const KEYS: &[&str] = &[
    "decoder_layers",
    "hidden_dim",
    "heads",
    "ffn_dim",
    "vocab_size",
    "seq_len",
    "kernel",
    "learn_kernel",
    "optimizer",
    "peak_lr",
    "warmup_steps",
    "betas",
    "adam_eps",
    "weight_decay",
    "clip_norm",
    "steps",
    "batch_size",
    "seed",
    "corpus",
];

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Invalid(m));
        if self.heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} must be a positive multiple of heads {}", self.hidden_dim, self.heads));
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.encoding == Encoding::SinusoidalApe && !self.hidden_dim.is_multiple_of(2) {
            return bad("sinusoidal encoding needs an even hidden_dim".into());
        }
        if self.decoder_layers == 0 || self.ffn_dim == 0 || self.vocab_size < 2 || self.batch_size == 0 {
            return bad("layers, ffn_dim, batch_size must be positive and vocab_size at least 2".into());
        }
        if !(self.peak_lr > 0.0) || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("peak_lr must be positive and betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("adam_eps must be positive, weight_decay and clip_norm non-negative".into());
        }
        if self.learn_kernel {
            let ok = matches!(
                self.encoding.kernel().map(|k| k.name()),
                Some(rpe_core::KernelName::KerpleLog | rpe_core::KernelName::KerplePower)
            );
            if !ok {
                return bad("learn_kernel applies to kerple_log and kerple_power only".into());
            }
        }
        Ok(())
    }

    /// Parses the flat text form; unknown keys are errors, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self, LmError> {
        let mut cfg = LmConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |reason: String| LmError::Config { line, reason };
            let (key, value) = body.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64, LmError> {
                v.parse::<f64>().map_err(|_| err(format!("`{v}` is not a number")))
            };
            let int = |v: &str| -> Result<usize, LmError> {
                v.parse::<usize>().map_err(|_| err(format!("`{v}` is not a non-negative integer")))
            };
            match key {
                "decoder_layers" => cfg.decoder_layers = int(value)?,
                "hidden_dim" => cfg.hidden_dim = int(value)?,
                "heads" => cfg.heads = int(value)?,
                "ffn_dim" => cfg.ffn_dim = int(value)?,
                "vocab_size" => cfg.vocab_size = int(value)?,
                "seq_len" => cfg.seq_len = int(value)?,
                "kernel" => cfg.encoding = value.parse().map_err(|e: LmError| err(e.to_string()))?,
                "learn_kernel" => {
                    cfg.learn_kernel = value.parse().map_err(|_| err(format!("`{value}` is not true/false")))?
                }
                "optimizer" => {
                    if !value.eq_ignore_ascii_case("adam") && !value.eq_ignore_ascii_case("adamw") {
                        return Err(err(format!("unsupported optimizer `{value}`")));
                    }
                }
                "peak_lr" => cfg.peak_lr = num(value)?,
                "warmup_steps" => cfg.warmup_steps = int(value)?,
                "betas" => {
                    let inner = value.trim_start_matches('(').trim_end_matches(')');
                    let (a, b) = inner.split_once(',').ok_or_else(|| err("betas needs two values".into()))?;
                    cfg.betas = (num(a.trim())?, num(b.trim())?);
                }
                "adam_eps" => cfg.adam_eps = num(value)?,
                "weight_decay" => cfg.weight_decay = num(value)?,
                "clip_norm" => cfg.clip_norm = num(value)?,
                "steps" => cfg.steps = int(value)?,
                "batch_size" => cfg.batch_size = int(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| err(format!("`{value}` is not a seed")))?,
                "corpus" => cfg.corpus = Some(value.parse().map_err(|e: LmError| err(e.to_string()))?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "decoder_layers" => self.decoder_layers.to_string(),
                "hidden_dim" => self.hidden_dim.to_string(),
                "heads" => self.heads.to_string(),
                "ffn_dim" => self.ffn_dim.to_string(),
                "vocab_size" => self.vocab_size.to_string(),
                "seq_len" => self.seq_len.to_string(),
                "kernel" => self.encoding.to_string(),
                "learn_kernel" => self.learn_kernel.to_string(),
                "optimizer" => "adam".to_string(),
                "peak_lr" => format!("{:e}", self.peak_lr),
                "warmup_steps" => self.warmup_steps.to_string(),
                "betas" => format!("{},{}", self.betas.0, self.betas.1),
                "adam_eps" => format!("{:e}", self.adam_eps),
                "weight_decay" => self.weight_decay.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "steps" => self.steps.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "corpus" => match &self.corpus {
                    Some(c) => c.to_string(),
                    None => continue,
                },
                _ => unreachable!(),
            };
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_names_parse() {
        let text = "\
# toy run
decoder_layers=3
hidden_dim=48
heads=4
ffn_dim=96
seq_len=32
peak_lr=5e-4
warmup_steps=40
optimizer=adam
betas=(0.9, 0.98)
weight_decay=0.01
steps=300
kernel=alibi(k=1)
";
        let cfg = LmConfig::parse(text).unwrap();
        assert_eq!(cfg.decoder_layers, 3);
        assert_eq!(cfg.head_dim(), 12);
        assert_eq!(cfg.peak_lr, 5e-4);
        assert_eq!(cfg.betas, (0.9, 0.98));
        assert_eq!(cfg.encoding, Encoding::RpeBias(Kernel::alibi(1.0).unwrap()));
        assert_eq!(LmConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(LmConfig::parse("colour=blue"), Err(LmError::Config { line: 1, .. })));
        assert!(matches!(LmConfig::parse("\n\nsteps"), Err(LmError::Config { line: 3, .. })));
        assert!(matches!(LmConfig::parse("hidden_dim=63"), Err(LmError::Invalid(_))));
        assert!(matches!(LmConfig::parse("seq_len=1"), Err(LmError::Invalid(_))));
        assert!(LmConfig::parse("optimizer=sgd").is_err());
        assert!(LmConfig::parse("kernel=type1\nlearn_kernel=true").is_err());
    }

    #[test]
    fn sinusoidal_spelling() {
        let cfg = LmConfig::parse("kernel=sinusoidal_ape").unwrap();
        assert_eq!(cfg.encoding, Encoding::SinusoidalApe);
        assert_eq!(cfg.encoding.to_string(), SINUSOIDAL_NAME);
    }
}
