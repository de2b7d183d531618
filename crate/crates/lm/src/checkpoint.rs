//! Checkpoint file: a text header followed by little-endian f64 buffers.
//!
//! ```text
//! rpe-lm-checkpoint
//! version=1
//! step=<n>
//! rng_seed=<64 hex digits>
//! rng_word_pos=<u128>
//! [config]
//! <key=value lines>
//! [tensors]
//! <name> shape=<d0>x<d1> offset=<byte offset> len=<entries>
//! [data]
//! <raw bytes>
//! ```

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rpe_autograd::Tensor;

use crate::config::LmConfig;
use crate::model::{LmModel, Param};
use crate::LmError;

pub const MAGIC: &str = "rpe-lm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LmModel,
    pub step: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn bad(msg: impl Into<String>) -> LmError {
    LmError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: LmModel, step: usize, rng: &ChaCha8Rng) -> Self {
        Self {
            model,
            step,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    /// Generator positioned where training stopped.
    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.rng_seed);
        r.set_word_pos(self.rng_word_pos);
        r
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("version={VERSION}\nstep={}\n", self.step));
        let hex: String = self.rng_seed.iter().map(|b| format!("{b:02x}")).collect();
        head.push_str(&format!("rng_seed={hex}\nrng_word_pos={}\n", self.rng_word_pos));
        head.push_str("[config]\n");
        head.push_str(&self.model.config().to_text());
        head.push_str("[tensors]\n");
        let mut offset = 0usize;
        for p in self.model.params() {
            let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!(
                "{} shape={} offset={} len={}\n",
                p.name,
                shape.join("x"),
                offset,
                p.value.numel()
            ));
            offset += p.value.numel() * 8;
        }
        head.push_str("[data]\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for p in self.model.params() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        const DATA: &[u8] = b"[data]\n";
        let split = bytes
            .windows(DATA.len())
            .position(|w| w == DATA)
            .ok_or_else(|| bad("missing [data] marker"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let data = &bytes[split + DATA.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("wrong magic string"));
        }
        let mut field = |key: &str| -> Result<String, LmError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {key}=, found `{line}`")))
        };
        let version: u32 = field("version")?.parse().map_err(|_| bad("bad version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step: usize = field("step")?.parse().map_err(|_| bad("bad step"))?;
        let hex = field("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("rng_seed must be 64 hex digits"));
        }
        let mut rng_seed = [0u8; 32];
        for (i, b) in rng_seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("bad rng_seed"))?;
        }
        let rng_word_pos: u128 = field("rng_word_pos")?.parse().map_err(|_| bad("bad rng_word_pos"))?;
        if lines.next() != Some("[config]") {
            return Err(bad("missing [config] section"));
        }
        let mut config_text = String::new();
        let mut saw_tensors = false;
        for line in lines.by_ref() {
            if line == "[tensors]" {
                saw_tensors = true;
                break;
            }
            config_text.push_str(line);
            config_text.push('\n');
        }
        if !saw_tensors {
            return Err(bad("missing [tensors] section"));
        }
        let config = LmConfig::parse(&config_text)?;
        let mut params = Vec::new();
        for line in lines {
            let mut parts = line.split(' ');
            let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("empty tensor line"))?;
            let mut shape = None;
            let mut offset = None;
            let mut len = None;
            for kv in parts {
                match kv.split_once('=') {
                    Some(("shape", v)) => {
                        shape = Some(
                            v.split('x')
                                .map(|d| d.parse::<usize>())
                                .collect::<Result<Vec<_>, _>>()
                                .map_err(|_| bad(format!("bad shape `{v}`")))?,
                        )
                    }
                    Some(("offset", v)) => offset = Some(v.parse::<usize>().map_err(|_| bad("bad offset"))?),
                    Some(("len", v)) => len = Some(v.parse::<usize>().map_err(|_| bad("bad len"))?),
                    _ => return Err(bad(format!("unexpected field `{kv}`"))),
                }
            }
            let (shape, offset, len) = match (shape, offset, len) {
                (Some(s), Some(o), Some(l)) => (s, o, l),
                _ => return Err(bad(format!("incomplete tensor line `{line}`"))),
            };
            let end = offset
                .checked_add(len * 8)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| bad(format!("tensor {name} runs past the data section")))?;
            let values = data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(Param {
                name: name.to_string(),
                value: Tensor::new(&shape, values)?,
            });
        }
        Ok(Self {
            model: LmModel::from_params(config, params)?,
            step,
            rng_seed,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut f = std::fs::File::create(path).map_err(|e| LmError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| LmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let bytes = std::fs::read(path).map_err(|e| LmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
