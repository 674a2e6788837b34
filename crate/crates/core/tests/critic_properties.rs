use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::critic::{hl_gauss_project, scalar_q, ValueSupport};
use softflow::optim::AdamW;
use softflow::pipeline::TrainConfig;
use softflow::verify;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_a_distribution(lo in -50.0f64..0.0, width in 0.5f64..100.0, bins in 2usize..160, y in -200.0f64..200.0) {
        let s = ValueSupport::new(lo, lo + width, bins).unwrap();
        let d = hl_gauss_project::<f64>(y, &s);
        prop_assert_eq!(d.probs.len(), bins);
        prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let q = scalar_q(&d, &s);
        prop_assert!(q >= s.v_min - 1e-9 && q <= s.v_max + 1e-9);
    }

    #[test]
    fn far_targets_sit_in_the_edge_bins(lo in -10.0f64..10.0, width in 1.0f64..20.0, gap in 5.0f64..100.0) {
        let s = ValueSupport::new(lo, lo + width, 101).unwrap();
        let below = hl_gauss_project::<f64>(lo - gap * width, &s);
        let above = hl_gauss_project::<f64>(lo + width + gap * width, &s);
        prop_assert!(below.probs[0] > 0.99);
        prop_assert!(above.probs[100] > 0.99);
    }
}

#[test]
fn values_and_targets_respect_the_support() {
    let critic = verify::tiny_critic(3).unwrap();
    let flow = verify::tiny_flow(4).unwrap();
    let batch = verify::tiny_batch(64, 5).unwrap();
    let s = critic.support().clone();
    for q in critic
        .min_q(&batch.obs, &batch.prefix, &batch.chunks)
        .unwrap()
    {
        assert!(q >= s.v_min && q <= s.v_max);
    }
    let gamma = 0.9;
    let y = critic
        .td_targets(&batch, &flow, gamma, 0.7, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let h = batch.rewards.cols();
    for (i, &t) in y.iter().enumerate() {
        let r: f64 = batch
            .rewards
            .row(i)
            .iter()
            .enumerate()
            .map(|(k, &x)| gamma.powi(k as i32) * x)
            .sum();
        let cont = if batch.done[i] {
            0.0
        } else {
            gamma.powi(h as i32)
        };
        assert!(t >= r + cont * s.v_min - 1e-9 && t <= r + cont * s.v_max + 1e-9);
    }
}

#[test]
fn targets_move_only_through_polyak_updates() {
    let mut critic = verify::tiny_critic(3).unwrap();
    let flow = verify::tiny_flow(4).unwrap();
    let batch = verify::tiny_batch(16, 5).unwrap();
    let before = critic.target_params().clone();
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(cfg.optimizer(1e-2), critic.params());
    for seed in 0..3 {
        let y = critic
            .td_targets(
                &batch,
                &flow,
                0.9,
                0.7,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
        let (_, grads) = critic
            .loss_and_grad(&batch, &y, softflow::nn::Mode::Eval)
            .unwrap();
        opt.step(critic.params_mut(), grads);
    }
    assert_eq!(critic.target_params(), &before);
    assert_ne!(critic.params(), &before);

    let online = critic.params().clone();
    critic.polyak_update(0.05).unwrap();
    for ((_, t), ((_, o), (_, b))) in critic
        .target_params()
        .iter()
        .zip(online.iter().zip(before.iter()))
    {
        for ((&t, &o), &b) in t.data().iter().zip(o.data()).zip(b.data()) {
            assert!((t - (0.05 * o + 0.95 * b)).abs() < 1e-15);
        }
    }
}

#[test]
fn members_are_initialized_independently() {
    let critic = verify::tiny_critic(3).unwrap();
    let batch = verify::tiny_batch(8, 5).unwrap();
    let q = critic
        .q_values(&batch.obs, &batch.prefix, &batch.chunks, false)
        .unwrap();
    assert_eq!(q.len(), 2);
    assert_ne!(q[0], q[1]);
    let min = critic
        .min_q(&batch.obs, &batch.prefix, &batch.chunks)
        .unwrap();
    for i in 0..8 {
        assert_eq!(min[i], q[0][i].min(q[1][i]));
    }
}
