use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::policy::ChunkSampler;
use softflow::selector::{select_chunks, SelectionConfig, N_FINE_TUNING, N_POST_IL, N_SIMULATION};
use softflow::{verify, Tensor};

/// `n` stacked copies of `x`: candidate `k` for row `i` sits at row `k * B + i`.
fn stack(x: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..n).flat_map(|_| x.data().iter().copied()).collect();
    Tensor::from_vec(x.rows() * n, x.cols(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chosen_score_is_the_candidate_maximum(n in 1usize..40, rows in 1usize..6, seed in 0u64..1000, critic in any::<bool>()) {
        let flow = verify::tiny_flow(seed % 7).unwrap();
        let ens = verify::tiny_critic(seed % 5).unwrap();
        let b = verify::tiny_batch(rows, seed).unwrap();
        let cfg = SelectionConfig { n_samples: n, sample_std: 0.7, use_critic: critic };
        let sel = select_chunks(&b.obs, &b.prefix, &flow, Some(&ens), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();

        let (obs, pre) = (stack(&b.obs, n), stack(&b.prefix, n));
        let (cands, logp) = flow.sample_chunks(&obs, &pre, 0.7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let scores = if critic { ens.min_q(&obs, &pre, &cands).unwrap() } else { logp.unwrap() };
        for i in 0..rows {
            let best = (0..n).map(|k| scores[k * rows + i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(sel.scores[i], best);
            prop_assert_eq!(scores[sel.indices[i] * rows + i], best);
            prop_assert_eq!(sel.chunks.row(i), cands.row(sel.indices[i] * rows + i));
        }

        let again = select_chunks(&b.obs, &b.prefix, &flow, Some(&ens), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again.chunks, sel.chunks);
    }
}

#[test]
fn candidate_counts_follow_the_reference_settings() {
    assert_eq!((N_SIMULATION, N_POST_IL, N_FINE_TUNING), (128, 64, 24));
    assert_eq!(SelectionConfig::default().n_samples, 24);
    assert_eq!(SelectionConfig::default().sample_std, 0.7);
}

#[test]
fn invalid_settings_are_rejected() {
    let flow = verify::tiny_flow(0).unwrap();
    let b = verify::tiny_batch(2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [
        SelectionConfig {
            n_samples: 0,
            sample_std: 0.7,
            use_critic: false,
        },
        SelectionConfig {
            n_samples: 4,
            sample_std: 0.0,
            use_critic: false,
        },
        SelectionConfig {
            n_samples: 4,
            sample_std: 0.7,
            use_critic: true,
        },
    ] {
        assert!(select_chunks(&b.obs, &b.prefix, &flow, None, &cfg, &mut rng).is_err());
    }
}
