//! Pre-norm causal transformer with a positional attention bias.

use rand::Rng;
use rpe_autograd::{softmax_nll, Tape, Tensor, Var};
use rpe_core::{Kernel, KernelName};

use crate::config::{Encoding, LmConfig};
use crate::LmError;

const HEAD_INIT: f64 = 1e-3;
const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Fill(f64),
    KernelParams,
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f64>,
}

impl Param {
    /// Matrices receive weight decay; gains, biases and kernel parameters do not.
    pub fn decays(&self) -> bool {
        self.value.shape().len() == 2 && !self.name.starts_with("kernel")
    }
}

/// Output of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// One entry per parameter, in [`LmModel::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    config: LmConfig,
    params: Vec<Param>,
}

fn layout(cfg: &LmConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
    let lin = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    let mut out = vec![("embed".to_string(), vec![v, d], Init::Uniform(1.0))];
    for l in 0..cfg.decoder_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("ln1.gain"), vec![d], Init::Fill(1.0)));
        out.push((p("ln1.shift"), vec![d], Init::Fill(0.0)));
        for w in ["attn.query", "attn.key", "attn.value", "attn.out"] {
            out.push((p(w), vec![d, d], lin(d)));
        }
        out.push((p("ln2.gain"), vec![d], Init::Fill(1.0)));
        out.push((p("ln2.shift"), vec![d], Init::Fill(0.0)));
        out.push((p("ffn.up"), vec![d, f], lin(d)));
        out.push((p("ffn.up_bias"), vec![f], Init::Fill(0.0)));
        out.push((p("ffn.down"), vec![f, d], lin(f)));
        out.push((p("ffn.down_bias"), vec![d], Init::Fill(0.0)));
    }
    out.push(("final_ln.gain".into(), vec![d], Init::Fill(1.0)));
    out.push(("final_ln.shift".into(), vec![d], Init::Fill(0.0)));
    out.push(("head".into(), vec![d, v], Init::Uniform(HEAD_INIT)));
    out.push(("head_bias".into(), vec![v], Init::Fill(0.0)));
    if cfg.learn_kernel {
        out.push(("kernel.params".into(), vec![cfg.heads, 2], Init::KernelParams));
    }
    out
}

/// Kernel used by head `h`: Alibi slopes shrink geometrically across heads,
/// every other kernel is shared.
pub fn head_kernel(kernel: &Kernel, h: usize, heads: usize) -> Kernel {
    match kernel.name() {
        KernelName::Alibi => {
            let k = kernel.param("k").expect("alibi slope");
            Kernel::alibi(k * (-8.0 * h as f64 / heads as f64).exp2()).expect("positive slope")
        }
        _ => kernel.clone(),
    }
}

/// Log-parameters `(ln a, ln b)` of a learnable kerple kernel, where the bias
/// is `-a ln(1 + b t)` for kerple_log and `-a t^b` for kerple_power.
fn kerple_log_params(kernel: &Kernel) -> [f64; 2] {
    match kernel.name() {
        KernelName::KerpleLog => [kernel.param("r").unwrap().ln(), kernel.param("k").unwrap().ln()],
        KernelName::KerplePower => [kernel.param("k").unwrap().ln(), kernel.param("r").unwrap().ln()],
        _ => unreachable!("validated by LmConfig"),
    }
}

/// Sinusoidal encoding of absolute position `pos`, defined for any position.
pub fn sinusoid(pos: usize, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = SINUSOID_BASE.powf(-((2 * i) as f64) / dim as f64);
        let a = pos as f64 * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
}

impl LmModel {
    pub fn init<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self, LmError> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Uniform(s) => Tensor::uniform(&shape, s, rng),
                    Init::Fill(x) => Tensor::full(&shape, x),
                    Init::KernelParams => {
                        let kernel = config.encoding.kernel().expect("validated");
                        let p = kerple_log_params(kernel);
                        let data = (0..config.heads).flat_map(|_| p).collect();
                        Tensor::new(&shape, data).expect("layout shape")
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: LmConfig, params: Vec<Param>) -> Result<Self, LmError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(LmError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(LmError::Checkpoint(format!(
                    "tensor {} {:?} does not match layout {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-head log biases by offset `values[h·n + t]` and their derivatives in
    /// the kernel parameters.
    fn bias_table(&self, n: usize) -> (Vec<f64>, Vec<f64>, usize) {
        let heads = self.config.heads;
        match &self.config.encoding {
            Encoding::SinusoidalApe => (vec![0.0; heads * n], Vec::new(), 0),
            Encoding::RpeBias(kernel) if self.config.learn_kernel => {
                let p = self.params.last().expect("kernel params").value.data();
                let mut values = Vec::with_capacity(heads * n);
                let mut derivs = Vec::with_capacity(heads * n * 2);
                for h in 0..heads {
                    let (a, b) = (p[2 * h].exp(), p[2 * h + 1].exp());
                    for t in 0..n {
                        let t = t as f64;
                        if kernel.name() == KernelName::KerpleLog {
                            let l = (b * t).ln_1p();
                            values.push(-a * l);
                            derivs.extend([-a * l, -a * b * t / (1.0 + b * t)]);
                        } else {
                            let tb = if t == 0.0 { 0.0 } else { t.powf(b) };
                            let lt = if t == 0.0 { 0.0 } else { t.ln() };
                            values.push(-a * tb);
                            derivs.extend([-a * tb, -a * tb * lt * b]);
                        }
                    }
                }
                (values, derivs, 2)
            }
            Encoding::RpeBias(kernel) => {
                let mut values = Vec::with_capacity(heads * n);
                for h in 0..heads {
                    let k = head_kernel(kernel, h, heads);
                    values.extend((0..n as u64).map(|t| k.log_bias(t)));
                }
                (values, Vec::new(), 0)
            }
        }
    }

    /// Logits `[B·n, V]` for `B` equal-length input rows.
    pub fn forward(&self, tape: &mut Tape<f64>, inputs: &[&[usize]], trainable: bool) -> Result<Forward, LmError> {
        let cfg = &self.config;
        let batch = inputs.len();
        let n = inputs.first().map_or(0, |r| r.len());
        if batch == 0 || n == 0 || inputs.iter().any(|r| r.len() != n) {
            return Err(LmError::Invalid("forward needs non-empty rows of equal length".into()));
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let v = if trainable {
                tape.leaf(p.value.clone())?
            } else {
                tape.constant(p.value.clone())?
            };
            vars.push(v);
        }
        let (d, heads) = (cfg.hidden_dim, cfg.heads);
        let ids: Vec<usize> = inputs.iter().flat_map(|r| r.iter().copied()).collect();
        let mut x = tape.embedding(vars[0], &ids)?;
        if cfg.encoding == Encoding::SinusoidalApe {
            let mut pe = vec![0.0; batch * n * d];
            for b in 0..batch {
                for pos in 0..n {
                    let row = (b * n + pos) * d;
                    sinusoid(pos, d, &mut pe[row..row + d]);
                }
            }
            let pe = tape.constant(Tensor::new(&[batch * n, d], pe)?)?;
            x = tape.add(x, pe)?;
        }

        let (values, derivs, count) = self.bias_table(n);
        let kernel_params = if cfg.learn_kernel {
            *vars.last().expect("kernel params")
        } else {
            tape.constant(Tensor::new(&[heads, count], Vec::new())?)?
        };
        let bias = tape.offset_bias(kernel_params, n, &values, &derivs)?;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        let mut at = 1;
        for _ in 0..cfg.decoder_layers {
            let w = &vars[at..at + 12];
            at += 12;
            let h = tape.layer_norm(x, w[0], w[1])?;
            let q = tape.matmul(h, w[2])?;
            let k = tape.matmul(h, w[3])?;
            let v = tape.matmul(h, w[4])?;
            let q = tape.split_heads(q, batch, n, heads)?;
            let k = tape.split_heads(k, batch, n, heads)?;
            let v = tape.split_heads(v, batch, n, heads)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_with_bias(scores, Some(bias))?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, batch, heads)?;
            let o = tape.matmul(ctx, w[5])?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, w[6], w[7])?;
            let u = tape.matmul(h, w[8])?;
            let u = tape.add_row(u, w[9])?;
            let u = tape.gelu(u)?;
            let u = tape.matmul(u, w[10])?;
            let u = tape.add_row(u, w[11])?;
            x = tape.add(x, u)?;
        }
        let h = tape.layer_norm(x, vars[at], vars[at + 1])?;
        let logits = tape.matmul(h, vars[at + 2])?;
        let logits = tape.add_row(logits, vars[at + 3])?;
        Ok(Forward { logits, params: vars })
    }

    /// Per-token negative log-likelihood of `targets` given `inputs`, row-major.
    pub fn token_nll(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<Vec<f64>, LmError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs, false)?;
        let flat: Vec<usize> = targets.iter().flat_map(|r| r.iter().copied()).collect();
        let (_, nll) = softmax_nll(tape.value(fwd.logits).data(), self.config.vocab_size, &flat)?;
        Ok(nll)
    }

    /// Mean next-token cross-entropy through the differentiable path.
    pub fn loss(&self, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<f64, LmError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs, false)?;
        let flat: Vec<usize> = targets.iter().flat_map(|r| r.iter().copied()).collect();
        let l = tape.cross_entropy(fwd.logits, &flat)?;
        Ok(tape.value(l).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(encoding: Encoding) -> LmConfig {
        LmConfig {
            decoder_layers: 1,
            heads: 2,
            hidden_dim: 8,
            ffn_dim: 12,
            vocab_size: 5,
            seq_len: 6,
            encoding,
            ..LmConfig::default()
        }
    }

    #[test]
    fn alibi_head_slopes() {
        let k = Kernel::alibi(0.5).unwrap();
        assert_eq!(head_kernel(&k, 0, 8).param("k"), Some(0.5));
        assert_eq!(head_kernel(&k, 1, 8).param("k"), Some(0.25));
        assert_eq!(head_kernel(&k, 7, 8).param("k"), Some(0.5 / 128.0));
        assert_eq!(head_kernel(&Kernel::type1(), 1, 8), Kernel::type1());
    }

    #[test]
    fn untrained_predictions_near_uniform() {
        let m = LmModel::init(tiny(Encoding::RpeBias(Kernel::type2())), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = [0usize, 1, 2, 3, 4, 0];
        let y = [1usize, 2, 3, 4, 0, 1];
        let l = m.loss(&[&x], &[&y]).unwrap();
        assert!((l - 5f64.ln()).abs() < 0.05, "{l}");
    }

    #[test]
    fn loss_is_mean_of_token_nll() {
        let m = LmModel::init(tiny(Encoding::SinusoidalApe), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (x, y) = ([3usize, 1, 4, 1], [1usize, 4, 1, 0]);
        let nll = m.token_nll(&[&x, &y], &[&y, &x]).unwrap();
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        assert!((m.loss(&[&x, &y], &[&y, &x]).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn sinusoid_extends_past_training_length() {
        let mut a = vec![0.0; 8];
        sinusoid(5000, 8, &mut a);
        assert!((a[0] - 5000f64.sin()).abs() < 1e-15);
        assert!((a[1] - 5000f64.cos()).abs() < 1e-15);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shape_checks_on_restore() {
        let cfg = tiny(Encoding::RpeBias(Kernel::type1()));
        let m = LmModel::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut params = m.params().to_vec();
        assert!(LmModel::from_params(cfg.clone(), params.clone()).is_ok());
        params[0].value = Tensor::zeros(&[2, 2]);
        assert!(LmModel::from_params(cfg, params).is_err());
    }
}
