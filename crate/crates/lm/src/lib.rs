//! A small causal transformer language model whose attention carries a
//! relative positional bias (or a sinusoidal absolute encoding), trained on
//! synthetic Markov streams or character text and evaluated for length
//! extrapolation under nonoverlapping and sliding inference.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

use rpe_autograd::AutogradError;
use rpe_core::KernelError;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{Encoding, LmConfig};
pub use corpus::{CharVocab, Corpus, CorpusSpec, Provenance};
pub use eval::{eval_ppl, extrapolation_verdict, EvalMode, PplReport, PplRow, DEFAULT_DELTA};
pub use model::LmModel;
pub use optim::AdamW;
pub use train::{train, TrainLog};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("text has {distinct} distinct bytes, vocabulary holds {max} including <unk>")]
    VocabOverflow { distinct: usize, max: usize },
    #[error("corpus of {have} tokens is shorter than the {need} required")]
    CorpusTooShort { need: usize, have: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("report has no baseline row at the training length {0}")]
    MissingBaseline(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl LmError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
