use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::critic::CriticConfig;
use softflow::data::{extract_chunks, read_corpus, write_corpus, Episode, NormStats};
use softflow::envs::{
    gen_demos, make_demonstrator, make_env, BanditDemo, MultimodalBandit, PointMassTeacher,
};
use softflow::flow::IlBatch;
use softflow::nn::Mode;
use softflow::pipeline::{
    read_checkpoint, Inputs, RunDir, Runner, Stage, StagePlan, TrainConfig, TrainState,
};
use softflow::{Error, Tensor};

fn tiny() -> TrainConfig {
    let mut c = TrainConfig {
        seed: 11,
        chunk_len: 5,
        prefix_len: 1,
        flow_depth: 2,
        hidden: 8,
        heads: 2,
        ffn_mult: 1,
        n_pi: 4,
        eval_episodes: 0,
        critic: CriticConfig {
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 8,
            num_bins: 11,
            ensemble_size: 2,
            dropout: 0.0,
        },
        ..TrainConfig::default()
    };
    for p in [&mut c.il, &mut c.warmup, &mut c.offline] {
        p.steps = 10;
        p.batch_size = 16;
    }
    c.online.iterations = 1;
    c.online.episodes_per_iteration = 2;
    c.online.steps_per_iteration = 5;
    c.online.batch_size = 16;
    c.distill.iterations = 2;
    c.distill.episodes_per_iteration = 2;
    c.distill.steps_per_iteration = 5;
    c.distill.batch_size = 16;
    c
}

fn demos() -> Vec<Episode> {
    let env = make_env("pointmass").unwrap();
    let mut teacher = PointMassTeacher::new(5, 1, 0.6, 3);
    gen_demos(env.as_ref(), &mut teacher, 10, 0.3, 4).unwrap()
}

#[test]
fn warmup_leaves_the_policy_and_corpus_untouched() {
    let root = tempfile::tempdir().unwrap();
    let eps = demos();
    let corpus = root.path().join("corpus");
    write_corpus(&corpus, "pointmass", 4, &eps, false).unwrap();
    let snapshot: Vec<(String, Vec<u8>)> = fs::read_dir(&corpus)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), fs::read(&p).unwrap())
        })
        .collect();
    let (_, loaded) = read_corpus(&corpus).unwrap();
    let env = make_env("pointmass").unwrap();
    let mut runner =
        Runner::<f64>::new(tiny(), Some(RunDir::new(root.path().join("run")))).unwrap();
    let mut inputs = Inputs {
        demos: Some(&loaded),
        env: Some(env.as_ref()),
        teacher: None,
    };
    runner.run_stage(Stage::Il, &mut inputs).unwrap();
    let policy = runner.state().unwrap().policy.params().clone();
    runner.run_stage(Stage::Warmup, &mut inputs).unwrap();
    assert_eq!(runner.state().unwrap().policy.params(), &policy);
    runner.run_stage(Stage::Offline, &mut inputs).unwrap();
    assert_ne!(runner.state().unwrap().policy.params(), &policy);
    runner.run_stage(Stage::Online, &mut inputs).unwrap();
    for (path, bytes) in snapshot {
        assert_eq!(fs::read(&path).unwrap(), bytes, "{path} changed");
    }
}

#[test]
fn missing_prerequisites_are_resume_errors() {
    let root = tempfile::tempdir().unwrap();
    let mut inputs = Inputs::default();
    for stage in [Stage::Warmup, Stage::Offline, Stage::Online] {
        let mut r = Runner::<f32>::new(tiny(), Some(RunDir::new(root.path()))).unwrap();
        let e = r.run_stage(stage, &mut inputs).unwrap_err();
        assert!(matches!(e, Error::Resume(_)), "{stage:?}: {e}");
        assert_eq!(e.exit_code(), 3);
    }
    let mut r = Runner::<f32>::new(tiny(), None).unwrap();
    assert!(matches!(
        r.run_stage(Stage::Warmup, &mut inputs),
        Err(Error::Resume(_))
    ));
    let e = read_checkpoint::<f32>(&root.path().join("nope.ckpt")).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn checkpoints_are_sealed_and_tied_to_the_config() {
    let root = tempfile::tempdir().unwrap();
    let dir = RunDir::new(root.path());
    let eps = demos();
    let mut inputs = Inputs {
        demos: Some(&eps),
        ..Inputs::default()
    };
    let mut r = Runner::<f32>::new(tiny(), Some(dir.clone())).unwrap();
    r.run_stage(Stage::Il, &mut inputs).unwrap();
    r.run_stage(Stage::Warmup, &mut inputs).unwrap();
    let path = dir.checkpoint(Stage::Warmup);
    let bytes = fs::read(&path).unwrap();

    let st = TrainState::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(&st, r.state().unwrap());
    assert_eq!(st.to_bytes().unwrap(), bytes);

    for i in [0, 9, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 1;
        let e = TrainState::<f32>::from_bytes(&bad).unwrap_err();
        assert!(matches!(e, Error::Format(_)), "byte {i}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
    assert!(matches!(
        TrainState::<f32>::from_bytes(&bytes[..bytes.len() - 5]),
        Err(Error::Format(_))
    ));

    let other = TrainConfig {
        lambda_bc: 0.5,
        ..tiny()
    };
    let mut r2 = Runner::<f32>::new(other, Some(dir.clone())).unwrap();
    assert!(matches!(
        r2.run_stage(Stage::Offline, &mut inputs),
        Err(Error::Resume(_))
    ));

    // f64 runs read checkpoints written by f32 runs.
    let wide = read_checkpoint::<f64>(&path).unwrap();
    assert_eq!(wide.stage, Stage::Warmup);
}

#[test]
fn f32_runs_are_bitwise_reproducible() {
    let eps = demos();
    let env = make_env("pointmass").unwrap();
    let run = || {
        let mut r = Runner::<f32>::new(tiny(), None).unwrap();
        let mut inputs = Inputs {
            demos: Some(&eps),
            env: Some(env.as_ref()),
            teacher: None,
        };
        r.run_all(&mut inputs, false).unwrap();
        let curves: Vec<_> = r.reports().iter().map(|x| x.curves.clone()).collect();
        (r.into_state().unwrap().to_bytes().unwrap(), curves)
    };
    assert_eq!(run(), run());
}

#[test]
fn distillation_plan_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let dir = RunDir::new(root.path());
    let cfg = TrainConfig {
        plan: StagePlan::Distill,
        ..tiny()
    };
    let env = make_env("pointmass").unwrap();
    let mut teacher = make_demonstrator(env.as_ref(), "pointmass", 5, 1, 2).unwrap();
    let mut inputs = Inputs {
        demos: None,
        env: Some(env.as_ref()),
        teacher: Some(teacher.as_mut()),
    };
    let mut r = Runner::<f32>::new(cfg, Some(dir.clone())).unwrap();
    r.run_all(&mut inputs, false).unwrap();
    let stages: Vec<Stage> = r.reports().iter().map(|x| x.stage).collect();
    assert_eq!(stages, [Stage::Distill, Stage::Warmup, Stage::Online]);
    for s in stages {
        assert!(dir.checkpoint(s).exists());
    }
    assert!(dir.online_buffer().exists());
    assert!(matches!(
        r.run_stage(Stage::Il, &mut Inputs::default()),
        Err(Error::Config(_) | Error::Argument(_))
    ));
}

/// Mean imitation loss of `state`'s policy on the successful demonstrations.
fn demo_il_loss(cfg: &TrainConfig, st: &TrainState<f64>, eps: &[Episode], norm: &NormStats) -> f64 {
    let rows: Vec<_> = eps
        .iter()
        .filter(|e| e.success)
        .flat_map(|e| {
            extract_chunks(e, cfg.chunk_len, cfg.prefix_len, cfg.il_stride, norm).unwrap()
        })
        .collect();
    let stack = |f: &dyn Fn(&softflow::data::TransitionChunk) -> &Vec<f64>| {
        let w = f(&rows[0]).len();
        Tensor::from_vec(
            rows.len(),
            w,
            rows.iter().flat_map(|r| f(r).clone()).collect(),
        )
        .unwrap()
    };
    let batch = IlBatch {
        obs: stack(&|r| &r.obs),
        prefix: stack(&|r| &r.prefix),
        targets: stack(&|r| &r.chunk),
    };
    let (loss, _) = st
        .policy
        .il_loss_and_grad(
            &batch,
            cfg.sigma_noise,
            &mut ChaCha8Rng::seed_from_u64(0),
            Mode::Eval,
        )
        .unwrap();
    loss
}

#[test]
fn larger_lambda_keeps_the_policy_closer_to_the_demos() {
    let env = MultimodalBandit::new();
    let mut demo = BanditDemo {
        fail_prob: 0.3,
        ..BanditDemo::new(1)
    };
    let eps = gen_demos(&env, &mut demo, 120, 0.3, 2).unwrap();
    let mut base = TrainConfig {
        seed: 3,
        chunk_len: 1,
        prefix_len: 0,
        flow_depth: 4,
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        gamma: 0.9,
        eval_episodes: 0,
        critic: CriticConfig {
            hidden: 16,
            heads: 2,
            layers: 1,
            ffn_hidden: 16,
            num_bins: 21,
            ensemble_size: 2,
            dropout: 0.0,
        },
        ..TrainConfig::default()
    };
    base.il.steps = 300;
    base.il.batch_size = 64;
    base.il.lr = 1e-3;
    base.warmup.steps = 200;
    base.warmup.batch_size = 64;
    base.warmup.lr = 1e-3;
    base.offline.steps = 200;
    base.offline.batch_size = 64;
    base.offline.lr = 1e-3;
    let mut losses = Vec::new();
    for lambda in [0.01, 0.1, 1.0] {
        let cfg = TrainConfig {
            lambda_bc: lambda,
            ..base.clone()
        };
        let mut r = Runner::<f64>::new(cfg.clone(), None).unwrap();
        let mut inputs = Inputs {
            demos: Some(&eps),
            ..Inputs::default()
        };
        for s in [Stage::Il, Stage::Warmup, Stage::Offline] {
            r.run_stage(s, &mut inputs).unwrap();
        }
        let st = r.state().unwrap();
        losses.push(demo_il_loss(&cfg, st, &eps, &st.norm));
    }
    assert!(
        losses.windows(2).all(|w| w[1] <= w[0]),
        "il losses by lambda: {losses:?}"
    );
}
