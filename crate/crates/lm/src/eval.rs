//! Held-out perplexity at several inference lengths and the extrapolation verdict.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::model::LmModel;
use crate::LmError;

pub const DEFAULT_DELTA: f64 = 0.2;
/// Upper bound on rows per forward pass.
const ROWS_PER_PASS: usize = 2048;

/// How a length-`n` sequence is split into attention contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Every token attends to the whole prefix of its length-`n` block.
    Nonoverlapping,
    /// Every token is scored from a freshly encoded window of at most `w`
    /// tokens ending at it, inside its length-`n` block.
    Sliding(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Nonoverlapping => f.write_str("nonoverlapping"),
            EvalMode::Sliding(w) => write!(f, "sliding:{w}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "nonoverlapping" {
            return Ok(EvalMode::Nonoverlapping);
        }
        match s.strip_prefix("sliding:").map(str::parse::<usize>) {
            Some(Ok(w)) if w > 0 => Ok(EvalMode::Sliding(w)),
            _ => Err(LmError::Invalid(format!("mode `{s}`: expected nonoverlapping or sliding:<w>"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplRow {
    pub length: usize,
    pub mode: EvalMode,
    pub ppl: f64,
    pub mean_nll: f64,
    /// `|ppl_n - ppl_m| / ppl_m`.
    pub deviation: f64,
    pub targets: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplReport {
    pub label: String,
    pub train_len: usize,
    pub delta: f64,
    pub rows: Vec<PplRow>,
}

impl PplReport {
    pub fn baseline(&self) -> Option<&PplRow> {
        self.rows.iter().find(|r| r.length == self.train_len)
    }

    pub fn verdict(&self) -> Result<bool, LmError> {
        extrapolation_verdict(self, self.delta)
    }

    /// Largest deviation over rows with `lo <= length <= hi`.
    pub fn max_deviation(&self, lo: usize, hi: usize) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| (lo..=hi).contains(&r.length))
            .map(|r| r.deviation)
            .reduce(f64::max)
    }

    pub fn row(&self, length: usize) -> Option<&PplRow> {
        self.rows.iter().find(|r| r.length == length)
    }

    pub fn tested_range(&self) -> (usize, usize) {
        let lo = self.rows.iter().map(|r| r.length).min().unwrap_or(0);
        let hi = self.rows.iter().map(|r| r.length).max().unwrap_or(0);
        (lo, hi)
    }
}

/// True iff every row deviates from the training-length baseline by less than `delta`.
pub fn extrapolation_verdict(report: &PplReport, delta: f64) -> Result<bool, LmError> {
    let base = report.baseline().ok_or(LmError::MissingBaseline(report.train_len))?.ppl;
    Ok(report.rows.iter().all(|r| (r.ppl - base).abs() / base < delta))
}

/// Token NLLs of consecutive length-`n` blocks, with each block's inputs
/// `stream[s..s+n]` and targets `stream[s+1..s+n+1]`.
pub fn block_nll(model: &LmModel, stream: &[usize], n: usize, targets: usize) -> Result<Vec<f64>, LmError> {
    let starts: Vec<usize> = (0..targets / n).map(|b| b * n).collect();
    let per_pass = (ROWS_PER_PASS / n).max(1);
    let mut out = Vec::with_capacity(targets);
    for chunk in starts.chunks(per_pass) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|&s| &stream[s..s + n]).collect();
        let outputs: Vec<&[usize]> = chunk.iter().map(|&s| &stream[s + 1..s + n + 1]).collect();
        out.extend(model.token_nll(&inputs, &outputs)?);
    }
    Ok(out)
}

/// Token NLLs where position `p` of each length-`n` block is scored from the
/// window of at most `w` tokens of that block ending at `p`.
pub fn sliding_nll(model: &LmModel, stream: &[usize], n: usize, w: usize, targets: usize) -> Result<Vec<f64>, LmError> {
    let w = w.min(n);
    let mut out = Vec::with_capacity(targets);
    let per_pass = (ROWS_PER_PASS / w).max(1);
    let vocab = model.config().vocab_size;
    for b in 0..targets / n {
        let s = b * n;
        // the first window covers positions whose whole prefix fits in it
        let head = model.token_nll(&[&stream[s..s + w]], &[&stream[s + 1..s + w + 1]])?;
        out.extend(head);
        let ends: Vec<usize> = (w..n).collect();
        for chunk in ends.chunks(per_pass) {
            let inputs: Vec<&[usize]> = chunk.iter().map(|&p| &stream[s + p + 1 - w..s + p + 1]).collect();
            let mut tape = rpe_autograd::Tape::new();
            let fwd = model.forward(&mut tape, &inputs, false)?;
            let logits = tape.value(fwd.logits).data();
            for (r, &p) in chunk.iter().enumerate() {
                let row = (r * w + w - 1) * vocab;
                let (_, nll) = rpe_autograd::softmax_nll(&logits[row..row + vocab], vocab, &[stream[s + p + 1]])?;
                out.push(nll[0]);
            }
        }
    }
    Ok(out)
}

/// Perplexity on the held-out `stream` at each length. All lengths score
/// the same targets, the first `T` tokens after the stream's head where
/// `T` is the largest multiple of the longest length that fits. The
/// training-length row is always included and serves as the baseline.
pub fn eval_ppl(
    model: &LmModel,
    stream: &[usize],
    lengths: &[usize],
    mode: EvalMode,
    delta: f64,
) -> Result<PplReport, LmError> {
    let m = model.config().seq_len;
    let mut all: Vec<usize> = lengths.to_vec();
    if !all.contains(&m) {
        all.push(m);
    }
    all.sort_unstable();
    all.dedup();
    if all[0] == 0 {
        return Err(LmError::Invalid("lengths must be at least 1".into()));
    }
    let longest = *all.last().expect("non-empty");
    let targets = stream.len().saturating_sub(1) / longest * longest;
    if targets == 0 {
        return Err(LmError::CorpusTooShort {
            need: longest + 1,
            have: stream.len(),
        });
    }
    let mut rows = Vec::with_capacity(all.len());
    for &n in &all {
        let t0 = Instant::now();
        let nll = match mode {
            EvalMode::Nonoverlapping => block_nll(model, stream, n, targets)?,
            EvalMode::Sliding(w) => sliding_nll(model, stream, n, w, targets)?,
        };
        let elapsed = t0.elapsed();
        let mean_nll = nll.iter().sum::<f64>() / nll.len() as f64;
        rows.push(PplRow {
            length: n,
            mode,
            ppl: mean_nll.exp(),
            mean_nll,
            deviation: 0.0,
            targets: nll.len(),
            elapsed,
        });
    }
    let base = rows.iter().find(|r| r.length == m).expect("baseline row").ppl;
    for r in &mut rows {
        r.deviation = (r.ppl - base).abs() / base;
    }
    Ok(PplReport {
        label: model.config().encoding.label(),
        train_len: m,
        delta,
        rows,
    })
}
