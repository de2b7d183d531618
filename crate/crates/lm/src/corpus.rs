//! Token streams: seeded synthetic Markov chains and byte-level text.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::LmError;

pub const DEFAULT_MAX_VOCAB: usize = 256;
pub const UNK: &str = "<unk>";

/// What to build a corpus from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSpec {
    Markov {
        order: usize,
        vocab: usize,
        length: usize,
        seed: u64,
    },
    Text {
        path: PathBuf,
        max_vocab: usize,
    },
}

impl fmt::Display for CorpusSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusSpec::Markov {
                order,
                vocab,
                length,
                seed,
            } => write!(f, "markov(order={order},vocab={vocab},length={length},seed={seed})"),
            CorpusSpec::Text { path, max_vocab } => {
                if *max_vocab == DEFAULT_MAX_VOCAB {
                    write!(f, "text:{}", path.display())
                } else {
                    write!(f, "text[{max_vocab}]:{}", path.display())
                }
            }
        }
    }
}

impl FromStr for CorpusSpec {
    type Err = LmError;

    /// `markov(order=2,vocab=16,length=50000,seed=1)`, `text:<path>` or `text[<max_vocab>]:<path>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = |r: &str| LmError::Invalid(format!("corpus `{s}`: {r}"));
        if let Some(rest) = s.strip_prefix("text") {
            let (max_vocab, path) = if let Some(p) = rest.strip_prefix(':') {
                (DEFAULT_MAX_VOCAB, p)
            } else {
                let inner = rest.strip_prefix('[').ok_or_else(|| bad("expected text:<path>"))?;
                let (n, p) = inner.split_once("]:").ok_or_else(|| bad("expected text[<n>]:<path>"))?;
                (n.trim().parse().map_err(|_| bad("bad vocabulary size"))?, p)
            };
            if path.is_empty() {
                return Err(bad("empty path"));
            }
            return Ok(CorpusSpec::Text {
                path: PathBuf::from(path),
                max_vocab,
            });
        }
        let inner = s
            .strip_prefix("markov(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| bad("expected markov(...) or text:<path>"))?;
        let (mut order, mut vocab, mut length, mut seed) = (2, 16, 50_000, 0u64);
        for item in inner.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v = v.trim();
            let n: u64 = v.parse().map_err(|_| bad("values must be integers"))?;
            match k.trim() {
                "order" => order = n as usize,
                "vocab" => vocab = n as usize,
                "length" => length = n as usize,
                "seed" => seed = n,
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        Ok(CorpusSpec::Markov {
            order,
            vocab,
            length,
            seed,
        })
    }
}

/// Order-`k` transition table; row `c` is the next-token law after context `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTable {
    order: usize,
    vocab: usize,
    probs: Vec<f64>,
}

impl MarkovTable {
    /// Each row drawn from a symmetric Dirichlet(1).
    pub fn random<R: Rng + ?Sized>(order: usize, vocab: usize, rng: &mut R) -> Self {
        let contexts = vocab.pow(order as u32);
        let mut probs = Vec::with_capacity(contexts * vocab);
        for _ in 0..contexts {
            let row: Vec<f64> = (0..vocab).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.iter().map(|x| x / z));
        }
        Self { order, vocab, probs }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn contexts(&self) -> usize {
        self.probs.len() / self.vocab
    }

    /// Context index of the last `order` tokens, oldest most significant.
    pub fn context_of(&self, history: &[usize]) -> usize {
        history[history.len() - self.order..].iter().fold(0, |c, &t| c * self.vocab + t)
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.probs[context * self.vocab..(context + 1) * self.vocab]
    }

    /// Entropy rate in nats under the stationary context law, by power iteration.
    pub fn entropy_rate(&self) -> f64 {
        let n = self.contexts();
        let v = self.vocab;
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (c, &p) in pi.iter().enumerate() {
                for (t, &q) in self.row(c).iter().enumerate() {
                    next[(c * v + t) % n] += p * q;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi.iter()
            .enumerate()
            .map(|(c, &p)| p * self.row(c).iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>())
            .sum()
    }
}

/// Byte alphabet; id 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<u8>,
}

impl CharVocab {
    pub fn from_bytes(bytes: &[u8], max_vocab: usize) -> Result<Self, LmError> {
        let symbols: Vec<u8> = bytes.iter().copied().collect::<BTreeSet<u8>>().into_iter().collect();
        if symbols.len() + 1 > max_vocab {
            return Err(LmError::VocabOverflow {
                distinct: symbols.len(),
                max: max_vocab,
            });
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes
            .iter()
            .map(|b| self.symbols.binary_search(b).map_or(0, |i| i + 1))
            .collect()
    }

    pub fn decode(&self, id: usize) -> String {
        match id {
            0 => UNK.to_string(),
            i => (self.symbols[i - 1] as char).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    SyntheticMarkov { seed: u64, table: MarkovTable },
    TextFile { path: PathBuf, vocab: CharVocab },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tokens: Vec<usize>,
    vocab_size: usize,
    provenance: Provenance,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self, LmError> {
        match spec {
            CorpusSpec::Markov {
                order,
                vocab,
                length,
                seed,
            } => Self::markov(*order, *vocab, *length, *seed),
            CorpusSpec::Text { path, max_vocab } => Self::text_file(path, *max_vocab),
        }
    }

    pub fn markov(order: usize, vocab: usize, length: usize, seed: u64) -> Result<Self, LmError> {
        if vocab < 2 || vocab.checked_pow(order as u32).is_none_or(|c| c > 1 << 20) {
            return Err(LmError::Invalid(format!("markov table with vocab {vocab} and order {order}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = MarkovTable::random(order, vocab, &mut rng);
        let mut tokens: Vec<usize> = (0..order.min(length)).map(|_| rng.random_range(0..vocab)).collect();
        while tokens.len() < length {
            let row = table.row(table.context_of(&tokens));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = vocab - 1;
            for (t, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = t;
                    break;
                }
            }
            tokens.push(next);
        }
        Ok(Self {
            tokens,
            vocab_size: vocab,
            provenance: Provenance::SyntheticMarkov { seed, table },
        })
    }

    pub fn text_file(path: &Path, max_vocab: usize) -> Result<Self, LmError> {
        let bytes = std::fs::read(path).map_err(|e| LmError::io(path, e))?;
        let vocab = CharVocab::from_bytes(&bytes, max_vocab)?;
        Ok(Self {
            tokens: vocab.encode(&bytes),
            vocab_size: vocab.len(),
            provenance: Provenance::TextFile {
                path: path.to_path_buf(),
                vocab,
            },
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn markov_table(&self) -> Option<&MarkovTable> {
        match &self.provenance {
            Provenance::SyntheticMarkov { table, .. } => Some(table),
            Provenance::TextFile { .. } => None,
        }
    }

    fn split_point(&self) -> usize {
        self.tokens.len() - self.tokens.len() / 10
    }

    /// Leading 90% of the stream.
    pub fn train_split(&self) -> &[usize] {
        &self.tokens[..self.split_point()]
    }

    /// Trailing 10% of the stream.
    pub fn held_out(&self) -> &[usize] {
        &self.tokens[self.split_point()..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_streams_repeat() {
        let a = Corpus::markov(2, 8, 5000, 9).unwrap();
        let b = Corpus::markov(2, 8, 5000, 9).unwrap();
        let c = Corpus::markov(2, 8, 5000, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tokens(), c.tokens());
        assert!(a.tokens().iter().all(|&t| t < 8));
    }

    #[test]
    fn split_is_disjoint_tail() {
        let a = Corpus::markov(1, 4, 1000, 1).unwrap();
        assert_eq!(a.train_split().len(), 900);
        assert_eq!(a.held_out().len(), 100);
        assert_eq!([a.train_split(), a.held_out()].concat(), a.tokens());
    }

    #[test]
    fn rows_are_distributions() {
        let a = Corpus::markov(2, 5, 10, 3).unwrap();
        let t = a.markov_table().unwrap();
        assert_eq!(t.contexts(), 25);
        for c in 0..25 {
            assert!((t.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_characters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        let c = Corpus::text_file(&p, DEFAULT_MAX_VOCAB).unwrap();
        assert_eq!(c.tokens(), &[1, 2, 3]);
        assert_eq!(c.vocab_size(), 4);
        let Provenance::TextFile { vocab, .. } = c.provenance() else { panic!() };
        assert_eq!(vocab.encode(b"az"), vec![1, 0]);
        assert_eq!(vocab.decode(0), UNK);
    }

    #[test]
    fn text_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, "abcdef").unwrap();
        assert!(matches!(Corpus::text_file(&p, 4), Err(LmError::VocabOverflow { distinct: 6, max: 4 })));
        assert!(matches!(Corpus::text_file(&dir.path().join("missing"), 256), Err(LmError::Io { .. })));
    }

    #[test]
    fn spec_strings() {
        for s in ["markov(order=2,vocab=16,length=1000,seed=4)", "text:/tmp/x.txt", "text[32]:data/a b.txt"] {
            let spec: CorpusSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("markov(colour=1)".parse::<CorpusSpec>().is_err());
        assert!("zipf".parse::<CorpusSpec>().is_err());
    }
}
