use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpe_autograd::{AutogradError, Tape};

use crate::checkpoint::Checkpoint;
use crate::config::LmConfig;
use crate::corpus::Corpus;
use crate::model::LmModel;
use crate::optim::{clip_global_norm, AdamW};
use crate::LmError;

/// Per-step training losses in nats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    fn window(&self, from_end: bool) -> f64 {
        let k = self.losses.len().min(10);
        if k == 0 {
            return f64::NAN;
        }
        let s = if from_end {
            &self.losses[self.losses.len() - k..]
        } else {
            &self.losses[..k]
        };
        s.iter().sum::<f64>() / k as f64
    }

    /// Mean over the first ten steps.
    pub fn initial_loss(&self) -> f64 {
        self.window(false)
    }

    /// Mean over the last ten steps.
    pub fn final_loss(&self) -> f64 {
        self.window(true)
    }

    pub fn improved(&self) -> bool {
        self.final_loss() < self.initial_loss()
    }
}

/// Trains on random length-`m` chunks of the corpus training split.
pub fn train(config: &LmConfig, corpus: &Corpus) -> Result<(Checkpoint, TrainLog), LmError> {
    train_with_progress(config, corpus, |_, _| {})
}

pub fn train_with_progress<F>(config: &LmConfig, corpus: &Corpus, mut progress: F) -> Result<(Checkpoint, TrainLog), LmError>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    if corpus.vocab_size() > config.vocab_size {
        return Err(LmError::Invalid(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            config.vocab_size
        )));
    }
    let stream = corpus.train_split();
    let m = config.seq_len;
    let need = config.batch_size * m + 1;
    if stream.len() < need {
        return Err(LmError::CorpusTooShort {
            need,
            have: stream.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LmModel::init(config.clone(), &mut rng)?;
    let mut opt = AdamW::new(config, model.params());
    let mut log = TrainLog::default();
    for step in 1..=config.steps {
        let starts: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..stream.len() - m)).collect();
        let inputs: Vec<&[usize]> = starts.iter().map(|&s| &stream[s..s + m]).collect();
        let targets: Vec<usize> = starts.iter().flat_map(|&s| stream[s + 1..s + m + 1].iter().copied()).collect();

        let mut tape = Tape::new();
        // non-finite weights leave softmax rows with no finite entry
        let diverged = |e: AutogradError| match e {
            AutogradError::EmptyRow { .. } => LmError::Diverged { step, loss: f64::NAN },
            other => other.into(),
        };
        let fwd = model.forward(&mut tape, &inputs, true).map_err(|e| match e {
            LmError::Autograd(a) => diverged(a),
            other => other,
        })?;
        let loss = tape.cross_entropy(fwd.logits, &targets).map_err(diverged)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(LmError::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f64>> = fwd.params.iter().map(|v| grads.get_or_zeros(*v).into_data()).collect();
        let norm = clip_global_norm(&mut g, config.clip_norm);
        if !norm.is_finite() {
            return Err(LmError::Diverged { step, loss: norm });
        }
        opt.step(model.params_mut(), &g);
        log.losses.push(value);
        progress(step, value);
    }
    Ok((Checkpoint::new(model, config.steps, &rng), log))
}
