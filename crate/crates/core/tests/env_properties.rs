use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softflow::envs::{
    bellman_residual, dp_chunk_q, make_env, num_chunks, DpMethod, TabularChunkMDP, ENV_NAMES,
};

/// Observations and rewards from `steps` uniform actions drawn from `action_seed`.
fn trajectory(name: &str, seed: u64, action_seed: u64, steps: usize) -> Vec<(Vec<f64>, f64, bool)> {
    let mut env = make_env(name).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut out = vec![(env.reset(seed), 0.0, false)];
    for _ in 0..steps {
        let a: Vec<f64> = (0..env.action_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let s = env.step(&a);
        let done = s.done;
        out.push((s.obs, s.reward, done));
        if done {
            break;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn environments_replay_exactly(seed in 0u64..10_000, action_seed in 0u64..10_000) {
        for name in ENV_NAMES {
            prop_assert_eq!(trajectory(name, seed, action_seed, 80), trajectory(name, seed, action_seed, 80));
        }
    }

    #[test]
    fn dp_solution_is_a_fixed_point(n in 2usize..7, h in 1usize..4, seed in 0u64..1000, gamma in 0.5f64..0.97) {
        let mdp = TabularChunkMDP::random(n, seed);
        let nc = num_chunks(h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let pi: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..nc).map(|_| rng.gen_range(0.0..1.0)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let q = dp_chunk_q(&mdp, &pi, gamma, h, DpMethod::LinearSolve).unwrap();
        prop_assert!(bellman_residual(&mdp, &pi, gamma, h, &q) < 1e-9);
    }
}

#[test]
fn point_mass_start_depends_on_the_seed() {
    let mut env = make_env("pointmass").unwrap();
    assert_ne!(env.reset(1), env.reset(2));
}
