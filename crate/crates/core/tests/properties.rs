use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpe_core::receptive_field::{draw_curve, erf_from_masses, flipped_linspace, TheoreticalField};
use rpe_core::series::partial_sums;
use rpe_core::{catalog, erf, Attention, Kernel, Matrix};

fn kernel_strategy() -> impl Strategy<Value = Kernel> {
    prop_oneof![
        (0.01f64..3.0).prop_map(|k| Kernel::alibi(k).unwrap()),
        (1.0f64..4.0, 0.1f64..3.0).prop_map(|(r, k)| Kernel::kerple_log(r, k).unwrap()),
        (0.01f64..2.0, 0.1f64..2.0).prop_map(|(k, r)| Kernel::kerple_power(k, r).unwrap()),
        (0.05f64..2.0, 2.0f64..2000.0, 1u32..8).prop_map(|(k, r, h)| Kernel::sandwich(k, r, 2 * h).unwrap()),
        Just(Kernel::type1()),
        Just(Kernel::type2()),
        Just(Kernel::inverse_n()),
        Just(Kernel::inverse_n_log_n()),
        (1u64..64).prop_map(|w| Kernel::window_mask(w).unwrap()),
    ]
}

/// Independent reading of the drawing routine: `ε_i` takes the smallest
/// `j < m` whose leading sum reaches the threshold, the last grid point is `m`.
fn draw_oracle(array: &[f64], n: usize) -> Vec<usize> {
    let eps = flipped_linspace::<f64>(n);
    let total: f64 = array.iter().sum();
    let prefix: Vec<f64> = std::iter::once(0.0)
        .chain(array.iter().scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        }))
        .collect();
    (0..n)
        .map(|i| {
            if i == n - 1 {
                return array.len();
            }
            (0..array.len())
                .find(|&j| prefix[j] >= total * (1.0 - eps[i]))
                .unwrap_or(array.len())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_and_linear_agree(k in kernel_strategy(), t in 0u64..1_000_000) {
        let b = k.bias(t);
        let e = k.log_bias(t).exp();
        if b > 0.0 {
            prop_assert!(((e - b) / b).abs() < 1e-12);
        } else {
            prop_assert_eq!(e, 0.0);
        }
    }

    #[test]
    fn spec_strings_round_trip(k in kernel_strategy()) {
        let back: Kernel = k.to_string().parse().unwrap();
        prop_assert_eq!(back, k);
    }

    #[test]
    fn partial_sum_increments(k in kernel_strategy(), j in 1usize..3000) {
        let table = partial_sums(&k, j + 1).unwrap();
        let inc = table.sum_through(j + 1) - table.sum_through(j);
        prop_assert!((inc - k.bias(j as u64)).abs() <= 1e-12 * table.sum_through(j + 1));
        prop_assert!(table.sum_through(j + 1) >= table.sum_through(j));
    }

    #[test]
    fn draw_matches_oracle(array in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..10.0], 1..200), n in 2usize..80) {
        let c = draw_curve(&array, n).unwrap();
        prop_assert_eq!(c.indices, draw_oracle(&array, n));
    }

    #[test]
    fn draw_indices_monotone(array in prop::collection::vec(0.0f64..1.0, 1..300), n in 2usize..60) {
        let c = draw_curve(&array, n).unwrap();
        prop_assert!(c.indices.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.normalized().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn erf_brute_force(masses in prop::collection::vec(0.0f64..5.0, 1..300), eps in 0.001f64..0.999) {
        prop_assume!(masses.iter().sum::<f64>() > 0.0);
        let got = erf_from_masses(&masses, eps).unwrap();
        let total: f64 = masses.iter().sum();
        let brute = (1..=masses.len())
            .find(|&j| masses[..j].iter().sum::<f64>() > total * (1.0 - eps))
            .unwrap();
        prop_assert!((got as i64 - brute as i64).abs() <= 1);
    }

    #[test]
    fn causality(seed in 0u64..1000, n in 2usize..40, cut in 0usize..39) {
        let cut = cut % (n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Attention::random(n, 4, 1.0, Kernel::type1(), &mut rng).unwrap();
        let b = Attention::random(n, 4, 1.0, Kernel::type1(), &mut rng).unwrap();
        // rows past `cut` come from a different instance
        let splice = |x: &Matrix<f64>, y: &Matrix<f64>| {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| if i <= cut { x.row(i).to_vec() } else { y.row(i).to_vec() }).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let (qa, ka, va) = a.parts();
        let (qb, kb, vb) = b.parts();
        let c = Attention::new(splice(qa, qb), splice(ka, kb), splice(va, vb), Kernel::type1(), 1.0).unwrap();
        let (oa, oc) = (a.full_attention().unwrap(), c.full_attention().unwrap());
        for i in 0..=cut {
            prop_assert_eq!(oa.row(i), oc.row(i));
        }
    }

    #[test]
    fn window_mask_permutation_invariance(seed in 0u64..1000, w in 2u64..12) {
        let n = 16;
        let k = Kernel::window_mask(w).unwrap();
        let a = Attention::random(n, 3, 1.0, k.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let i = n - 1;
        let j = w as usize;
        let (q, kk, v) = a.parts();
        // reverse the (k, v) pairs inside the window
        let mut krows: Vec<Vec<f64>> = (0..n).map(|r| kk.row(r).to_vec()).collect();
        let mut vrows: Vec<Vec<f64>> = (0..n).map(|r| v.row(r).to_vec()).collect();
        krows[i + 1 - j..=i].reverse();
        vrows[i + 1 - j..=i].reverse();
        let b = Attention::new(q.clone(), Matrix::from_rows(&krows).unwrap(), Matrix::from_rows(&vrows).unwrap(), k, 1.0).unwrap();
        let (oa, ob) = (a.windowed_output(i, j).unwrap(), b.windowed_output(i, j).unwrap());
        for (x, y) in oa.o.iter().zip(&ob.o) {
            prop_assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rows_normalized(seed in 0u64..1000, d in 1usize..9) {
        for k in catalog::<f64>() {
            let a = Attention::random(24, d, 1.5, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for i in [0usize, 7, 23] {
                for j in [1, i / 2 + 1, i + 1] {
                    let s: f64 = a.attention_row(i, j).unwrap().iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_bounded(seed in 0u64..10_000, d in prop::sample::select(vec![4usize, 16, 64]), l in 0.1f64..3.0) {
        for k in catalog::<f64>() {
            let a = Attention::random(64, d, l, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for c in a.delta_grid().unwrap() {
                prop_assert!(c.delta <= c.bound + 1e-9);
            }
        }
    }
}

#[test]
fn trf_monotone_in_epsilon() {
    for k in catalog::<f64>() {
        let Ok(f) = TheoreticalField::new(&k, 1 << 18) else { continue };
        let mut prev = 0;
        for e in rpe_core::receptive_field::log_epsilon_grid(1e-4, 0.9, 30).iter() {
            let Ok(j) = f.trf(*e) else { continue };
            assert!(j >= prev, "{k}");
            prev = j;
        }
    }
}

#[test]
fn erf_equals_trf_for_bias_only_attention() {
    // with Q = K = 0 the row masses are the bias terms; a long row makes C_ii = B
    let n = 2048;
    for k in [Kernel::alibi(1.0).unwrap(), Kernel::alibi(0.5).unwrap(), Kernel::type2(), Kernel::window_mask(16).unwrap()] {
        let f = TheoreticalField::new(&k, 1 << 16).unwrap();
        let a = Attention::bias_only(Matrix::zeros(n, 2), k.clone(), 1.0).unwrap();
        for e in rpe_core::receptive_field::log_epsilon_grid(1e-4, 0.5, 25) {
            assert_eq!(erf(&a, n - 1, e).unwrap(), f.trf(e).unwrap(), "{k} ε={e}");
        }
    }
}

#[test]
fn erf_window_mask_rows() {
    let a = Attention::random(64, 8, 1.0, Kernel::window_mask(7).unwrap(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for i in 7..64 {
        assert_eq!(erf(&a, i, 1e-6).unwrap(), 7);
    }
    for j in 7..=30 {
        assert!(a.delta(40, j).unwrap() < 1e-15);
    }
}

#[test]
fn erf_brute_force_alibi_row() {
    let a = Attention::random(300, 16, 1.0, Kernel::alibi(0.5).unwrap(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let i = 256;
    // recompute every window normalizer from scratch
    let c_full = a.windowed_output(i, i + 1).unwrap().c();
    let brute = (1..=i + 1).find(|&j| a.windowed_output(i, j).unwrap().c() > c_full * (1.0 - 0.01)).unwrap();
    let got = erf(&a, i, 0.01).unwrap();
    assert_eq!(got, brute);
}

#[test]
fn max_delta_non_increasing_for_convergent() {
    for k in [Kernel::alibi(0.5).unwrap(), Kernel::type1(), Kernel::type2(), Kernel::kerple_log(2.0, 1.0).unwrap()] {
        for seed in 0..4 {
            let a = Attention::random(256, 16, 1.0, k.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut best = vec![0.0f64; 258];
            for c in a.delta_grid().unwrap() {
                if c.i >= c.j {
                    best[c.j] = best[c.j].max(c.delta);
                }
            }
            for j in 1..256 {
                assert!(best[j + 1] <= best[j] + 1e-9, "{k} seed {seed} j {j}");
            }
        }
    }
}
