use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::flow::FlowPolicy;
use softflow::verify;
use softflow::Tensor;

fn config(h: usize, a: usize, p: usize, depth: usize) -> softflow::flow::FlowConfig {
    let mut c = verify::probe_flow_config(h, a, depth, 8);
    c.prefix_len = p.min(h);
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inverse_undoes_forward(h in 1usize..5, a in 1usize..4, p in 0usize..3, depth in 1usize..5, seed in 0u64..1000) {
        let flow = verify::randomized_flow::<f64>(config(h, a, p, depth), 0.3, seed).unwrap();
        let (err, ld) = verify::round_trip_error(&flow, 16, seed).unwrap();
        prop_assert!(err < 1e-9, "action error {err}");
        prop_assert!(ld < 1e-9, "log-det sum {ld}");
    }

    #[test]
    fn both_directions_agree_on_likelihood(h in 1usize..4, a in 1usize..3, seed in 0u64..1000) {
        let flow = verify::randomized_flow::<f64>(config(h, a, 1, 3), 0.3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (obs, pre) = verify::random_context::<f64>(flow.config(), 8, &mut rng);
        let (chunks, lp_sample) = flow.sample(&obs, &pre, 1.0, &mut rng).unwrap();
        let lp_eval = flow.log_prob(&obs, &pre, &chunks).unwrap();
        for (x, y) in lp_sample.iter().zip(&lp_eval) {
            prop_assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn samples_are_bounded_and_seeded(seed in 0u64..1000, std in 0.05f64..1.0) {
        let flow = verify::randomized_flow::<f64>(config(3, 2, 1, 2), 0.3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (obs, pre) = verify::random_context::<f64>(flow.config(), 8, &mut rng);
        let draw = |s: u64| flow.sample(&obs, &pre, std, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let (a1, l1) = draw(seed);
        let (a2, l2) = draw(seed);
        prop_assert!(a1.data().iter().all(|x| x.abs() < 1.0));
        prop_assert_eq!(a1.data(), a2.data());
        prop_assert_eq!(l1, l2);
    }
}

#[test]
fn construction_is_seed_deterministic() {
    let c = config(3, 2, 1, 4);
    let a = FlowPolicy::<f32>::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = FlowPolicy::<f32>::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let d = FlowPolicy::<f32>::new(c, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.partition_masks(), b.partition_masks());
    assert_ne!(a.params(), d.params());
}

#[test]
fn il_loss_is_deterministic_given_noise_seed() {
    let flow = verify::tiny_flow(4).unwrap();
    let batch = verify::tiny_batch(8, 5).unwrap();
    let il = softflow::flow::IlBatch {
        obs: batch.obs.clone(),
        prefix: batch.prefix.clone(),
        targets: batch.chunks.clone(),
    };
    let run = || {
        flow.il_loss_and_grad(
            &il,
            0.05,
            &mut ChaCha8Rng::seed_from_u64(1),
            softflow::nn::Mode::Eval,
        )
        .unwrap()
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn boundary_actions_are_rejected() {
    let flow = verify::tiny_flow(0).unwrap();
    let c = flow.config();
    let obs = Tensor::<f64>::zeros(1, c.obs_dim);
    let pre = Tensor::<f64>::zeros(1, c.prefix_len * c.action_dim);
    let mut chunk = Tensor::<f64>::zeros(1, c.chunk_size());
    chunk.data_mut()[0] = 1.0;
    assert!(matches!(
        flow.log_prob(&obs, &pre, &chunk),
        Err(softflow::Error::Domain(_))
    ));
}
