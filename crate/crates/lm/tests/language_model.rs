use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpe_core::Kernel;
use rpe_lm::eval::{block_nll, sliding_nll};
use rpe_lm::{eval_ppl, train, Checkpoint, Corpus, Encoding, EvalMode, LmConfig, LmModel};

fn small(encoding: Encoding, steps: usize) -> LmConfig {
    LmConfig {
        decoder_layers: 2,
        heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 8,
        seq_len: 16,
        encoding,
        steps,
        batch_size: 4,
        warmup_steps: 10,
        peak_lr: 5e-3,
        seed: 5,
        ..LmConfig::default()
    }
}

/// Entropy of an order-0 table straight from its single row.
fn unigram_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Stationary context law by solving `pi P = pi` with Gaussian elimination.
fn stationary_entropy(corpus: &Corpus) -> f64 {
    let t = corpus.markov_table().unwrap();
    let (n, v) = (t.contexts(), t.vocab());
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    let mut a = vec![vec![0.0f64; n + 1]; n];
    for c in 0..n {
        for (tok, p) in t.row(c).iter().enumerate() {
            let next = (c * v + tok) % n;
            a[next][c] += p;
        }
        a[c][c] -= 1.0;
    }
    for c in 0..n {
        a[n - 1][c] = 1.0;
    }
    a[n - 1][n] = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=n {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|c| a[c][n] / a[c][c] * unigram_entropy(t.row(c))).sum()
}

#[test]
fn order_zero_entropy_matches_table() {
    let c = Corpus::markov(0, 16, 200_000, 3).unwrap();
    let row = c.markov_table().unwrap().row(0).to_vec();
    let h = unigram_entropy(&row);
    assert!((c.markov_table().unwrap().entropy_rate() - h).abs() < 1e-12);
    // the stream's empirical log loss under the true law approaches it
    let emp = c.tokens().iter().map(|&t| -row[t].ln()).sum::<f64>() / c.len() as f64;
    assert!((emp - h).abs() < 0.01, "{emp} vs {h}");
}

#[test]
fn order_two_entropy_rate() {
    let c = Corpus::markov(2, 6, 10, 8).unwrap();
    let oracle = stationary_entropy(&c);
    assert!((c.markov_table().unwrap().entropy_rate() - oracle).abs() < 1e-10);
}

#[test]
fn untrained_model_is_near_uniform() {
    let corpus = Corpus::markov(2, 8, 20_000, 1).unwrap();
    let (ck, log) = train(&small(Encoding::RpeBias(Kernel::type1()), 0), &corpus).unwrap();
    assert!(log.losses.is_empty());
    let r = eval_ppl(&ck.model, corpus.held_out(), &[16], EvalMode::Nonoverlapping, 0.2).unwrap();
    assert!((r.rows[0].ppl / 8.0 - 1.0).abs() < 0.1, "{}", r.rows[0].ppl);
}

#[test]
fn training_is_deterministic_and_learns() {
    let corpus = Corpus::markov(2, 8, 20_000, 1).unwrap();
    let cfg = small(Encoding::RpeBias(Kernel::alibi(0.5).unwrap()), 60);
    let (a, la) = train(&cfg, &corpus).unwrap();
    let (b, lb) = train(&cfg, &corpus).unwrap();
    assert_eq!(la.losses, lb.losses);
    assert_eq!(a, b);
    assert!(la.improved());
    assert_eq!(a.step, 60);
}

#[test]
fn short_corpus_is_rejected() {
    let corpus = Corpus::markov(1, 8, 40, 1).unwrap();
    assert!(matches!(
        train(&small(Encoding::RpeBias(Kernel::type1()), 1), &corpus),
        Err(rpe_lm::LmError::CorpusTooShort { .. })
    ));
}

#[test]
fn divergent_learning_rate_aborts() {
    let corpus = Corpus::markov(2, 8, 20_000, 1).unwrap();
    let cfg = LmConfig {
        peak_lr: 1e300,
        clip_norm: 0.0,
        warmup_steps: 0,
        ..small(Encoding::RpeBias(Kernel::type1()), 50)
    };
    let r = train(&cfg, &corpus).map(|(_, l)| l.losses);
    assert!(matches!(r, Err(rpe_lm::LmError::Diverged { .. })), "{r:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let corpus = Corpus::markov(2, 8, 20_000, 2).unwrap();
    for enc in [Encoding::RpeBias(Kernel::kerple_log(2.0, 1.0).unwrap()), Encoding::SinusoidalApe] {
        let (ck, _) = train(&small(enc, 20), &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let before = block_nll(&ck.model, corpus.held_out(), 16, 256).unwrap();
        let after = block_nll(&back.model, corpus.held_out(), 16, 256).unwrap();
        assert_eq!(
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ck.to_bytes(), back.to_bytes());
    }
}

#[test]
fn learned_kernel_parameters_move() {
    let corpus = Corpus::markov(2, 8, 20_000, 2).unwrap();
    let cfg = LmConfig {
        learn_kernel: true,
        ..small(Encoding::RpeBias(Kernel::kerple_log(2.0, 1.0).unwrap()), 30)
    };
    let (ck, log) = train(&cfg, &corpus).unwrap();
    let p = ck.model.params().last().unwrap();
    assert_eq!(p.name, "kernel.params");
    assert!(p.value.data().iter().any(|&x| (x - 2f64.ln()).abs() > 1e-6 && x.is_finite()));
    assert!(log.improved());
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.model, ck.model);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let corpus = Corpus::markov(2, 8, 20_000, 2).unwrap();
    let (ck, _) = train(&small(Encoding::RpeBias(Kernel::type2()), 0), &corpus).unwrap();
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint\n[data]\n").is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'x';
    assert!(Checkpoint::from_bytes(&wrong).is_err());
}

#[test]
fn baseline_equals_training_style_loss() {
    let corpus = Corpus::markov(2, 8, 20_000, 4).unwrap();
    let (ck, _) = train(&small(Encoding::RpeBias(Kernel::type1()), 30), &corpus).unwrap();
    let stream = corpus.held_out();
    let r = eval_ppl(&ck.model, stream, &[16, 32, 64], EvalMode::Nonoverlapping, 0.2).unwrap();
    let base = r.baseline().unwrap();
    assert_eq!(base.deviation, 0.0);
    // every block in one batch through cross-entropy
    let targets = base.targets;
    let inputs: Vec<&[usize]> = (0..targets / 16).map(|b| &stream[b * 16..b * 16 + 16]).collect();
    let outputs: Vec<&[usize]> = (0..targets / 16).map(|b| &stream[b * 16 + 1..b * 16 + 17]).collect();
    let loss = ck.model.loss(&inputs, &outputs).unwrap();
    assert_eq!(loss, base.mean_nll);
    assert_eq!(r.rows.len(), 3);
    assert!(r.rows.iter().all(|row| row.targets == targets && row.deviation >= 0.0 && row.ppl > 1.0));
}

#[test]
fn baseline_row_is_added() {
    let corpus = Corpus::markov(2, 8, 20_000, 4).unwrap();
    let (ck, _) = train(&small(Encoding::SinusoidalApe, 0), &corpus).unwrap();
    let r = eval_ppl(&ck.model, corpus.held_out(), &[48], EvalMode::Nonoverlapping, 0.2).unwrap();
    assert_eq!(r.rows.iter().map(|x| x.length).collect::<Vec<_>>(), vec![16, 48]);
    assert!(r.verdict().is_ok());
}

#[test]
fn sliding_window_covering_block_is_nonoverlapping() {
    let corpus = Corpus::markov(2, 8, 20_000, 4).unwrap();
    let (ck, _) = train(&small(Encoding::RpeBias(Kernel::type2()), 20), &corpus).unwrap();
    let s = corpus.held_out();
    let a = block_nll(&ck.model, s, 32, 256).unwrap();
    let b = sliding_nll(&ck.model, s, 32, 32, 256).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn sliding_matches_brute_force_windows() {
    let corpus = Corpus::markov(2, 8, 20_000, 4).unwrap();
    let (ck, _) = train(&small(Encoding::RpeBias(Kernel::alibi(0.5).unwrap()), 20), &corpus).unwrap();
    let s = corpus.held_out();
    let (n, w) = (24, 5);
    let got = sliding_nll(&ck.model, s, n, w, 48).unwrap();
    for (idx, g) in got.iter().enumerate() {
        let (block, p) = (idx / n, idx % n);
        let lo = block * n + p.saturating_sub(w - 1);
        let hi = block * n + p + 1;
        let nll = ck.model.token_nll(&[&s[lo..hi]], &[&s[lo + 1..hi + 1]]).unwrap();
        assert!((nll.last().unwrap() - g).abs() < 1e-12, "position {idx}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn appending_tokens_keeps_prefix_nll(seed in 0u64..500, n in 2usize..20, extra in 1usize..12, ape in any::<bool>()) {
        let enc = if ape { Encoding::SinusoidalApe } else { Encoding::RpeBias(Kernel::kerple_power(0.1, 1.0).unwrap()) };
        let model = LmModel::init(small(enc, 0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let corpus = Corpus::markov(1, 8, 64, seed).unwrap();
        let t = corpus.tokens();
        let short = model.token_nll(&[&t[..n]], &[&t[1..n + 1]]).unwrap();
        let long = model.token_nll(&[&t[..n + extra]], &[&t[1..n + extra + 1]]).unwrap();
        prop_assert_eq!(&short[..], &long[..n]);
    }

    #[test]
    fn config_text_round_trips(layers in 1usize..4, heads in 1usize..4, per_head in 1usize..8, steps in 0usize..5000, lr in 1e-5f64..1e-1, seed in any::<u64>()) {
        let cfg = LmConfig {
            decoder_layers: layers,
            heads,
            hidden_dim: heads * per_head * 2,
            steps,
            peak_lr: lr,
            seed,
            corpus: Some("markov(order=2,vocab=8,length=1000,seed=3)".parse().unwrap()),
            ..LmConfig::default()
        };
        prop_assert_eq!(LmConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
