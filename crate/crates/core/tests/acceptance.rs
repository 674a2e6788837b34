//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `ACCEPTANCE_ONLY=5,7` restricts the run to the listed criteria.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::critic::CriticConfig;
use softflow::data::NormStats;
use softflow::envs::{
    aggregate, bandit, gen_demos, make_env, BanditDemo, MultimodalBandit, PointMassTeacher,
};
use softflow::flow::{FlowPolicy, GaussianPolicy};
use softflow::pipeline::{stage_il, Inputs, RunDir, Runner, Stage, StagePlan, TrainConfig};
use softflow::policy::ChunkSampler;
use softflow::selector::{select_chunks, SelectionConfig};
use softflow::verify::{self, TabularWarmup};
use softflow::{Result, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

/// Round trip at H=10, A=4, depth 16 with reference-width conditioners.
fn c1_round_trip() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = TrainConfig {
        chunk_len: 10,
        prefix_len: 3,
        flow_depth: 16,
        ..TrainConfig::default()
    };
    // U(-0.1, 0.1) on every weight is comparable to the init scale at width
    // 256; much larger perturbations saturate every coupling scale and the
    // 16-block composition loses precision through conditioning alone.
    let flow = verify::randomized_flow::<f64>(cfg.flow_config(8, 4), 0.1, 1)?;
    // 1000 chunks in batches of 100 keeps the activation footprint small.
    let (mut err, mut ld) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let (e, l) = verify::round_trip_error(&flow, 100, seed)?;
        err = err.max(e);
        ld = ld.max(l);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        err < 1e-4 && secs < 60.0,
        format!("max |a - a'| = {err:.2e} (< 1e-4), log-det sum {ld:.1e}, {secs:.1} s (< 60 s)"),
    )
}

fn c2_exact_likelihood() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (h, a) in [(1, 1), (1, 2), (2, 2), (2, 3), (3, 2), (6, 1)] {
        let flow = verify::randomized_flow::<f64>(
            verify::probe_flow_config(h, a, 6, 16),
            0.3,
            (h * 7 + a) as u64,
        )?;
        worst = worst.max(verify::log_det_error(&flow, 16, 3)?);
    }
    let mut gap: f64 = 0.0;
    for a in [1, 2] {
        for seed in 0..2 {
            let flow = verify::randomized_flow::<f64>(
                verify::probe_flow_config(1, a, 6, 16),
                0.3,
                20 + seed,
            )?;
            let points = if a == 1 { 4001 } else { 401 };
            gap = gap.max((verify::density_integral(&flow, points, 9.0, seed)? - 1.0).abs());
        }
    }
    outcome(
        worst < 1e-3 && gap <= 0.02,
        format!(
            "log-det relative error {worst:.1e} (< 1e-3), |integral - 1| = {gap:.1e} (<= 0.02)"
        ),
    )
}

fn c3_gradients() -> Result<Outcome> {
    let flow_params = verify::tiny_flow(0)?.params().num_scalars();
    let critic_params = verify::tiny_critic(0)?.params().num_scalars();
    let mut worst = [0.0f64; 3];
    for seed in 0..3 {
        worst[0] = worst[0].max(verify::il_gradient_error(seed)?);
        worst[1] = worst[1].max(verify::critic_gradient_error(seed)?);
        worst[2] = worst[2].max(verify::actor_gradient_error(seed)?);
    }
    let small = flow_params <= 500 && critic_params <= 500;
    outcome(
        small && worst.iter().all(|&w| w < 1e-3),
        format!(
            "relative errors il {:.1e}, critic {:.1e}, actor {:.1e} (< 1e-3); flow {flow_params} and critic {critic_params} parameters (<= 500)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c4_hl_gauss() -> Result<Outcome> {
    let mut bin: f64 = 0.0;
    let mut mean: f64 = 0.0;
    for (lo, hi) in [(-10.0, 10.0), (0.0, 1.0), (-3.0, 250.0)] {
        let s = softflow::critic::ValueSupport::new(lo, hi, 101)?;
        let ratio = s.hl_sigma / s.bin_width();
        assert!((ratio - 0.75).abs() < 1e-12);
        let targets = verify::interior_targets(&s, 500, 4);
        let mut all = targets.clone();
        all.extend([lo, hi, lo - 1.0, hi + 1.0]);
        bin = bin.max(verify::hl_gauss_quadrature_error(&s, &all));
        mean = mean.max(verify::hl_gauss_mean_error(&s, &targets) / s.bin_width());
    }
    outcome(
        bin < 1e-6 && mean < 1e-3,
        format!("per-bin gap {bin:.1e} (< 1e-6), mean gap {mean:.1e} bin widths (< 1e-3)"),
    )
}

fn c5_bellman_oracle() -> Result<Outcome> {
    let mut errs = Vec::new();
    for h in 1..=3 {
        errs.push(verify::tabular_warmup_error(&TabularWarmup {
            chunk_len: h,
            gamma: 0.9,
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            seed: h as u64,
        })?);
    }
    outcome(
        errs.iter().all(|&e| e < 1e-2),
        format!(
            "sup |Q - Q_dp| for H=1,2,3: {:.1e}, {:.1e}, {:.1e} (< 1e-2) after 20000 steps",
            errs[0], errs[1], errs[2]
        ),
    )
}

/// Fractions of 1000 samples at mode 0, at mode 1, strictly between the
/// modes (`|x| < 0.6` outside both discs) and elsewhere.
fn mode_fractions(p: &dyn ChunkSampler<f64>, norm: &NormStats, seed: u64) -> Result<[f64; 4]> {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, _) = p.sample_chunks(&Tensor::zeros(n, 1), &Tensor::zeros(n, 0), 0.7, &mut rng)?;
    let mut c = [0.0; 4];
    for i in 0..n {
        let raw = norm.unnormalize_action(a.row(i));
        let k = match bandit::mode_of(&raw) {
            Some(k) => k,
            None if raw[0].abs() < bandit::MODES[0][0] => 2,
            None => 3,
        };
        c[k] += 1.0 / n as f64;
    }
    Ok(c)
}

fn c6_multimodality() -> Result<Outcome> {
    let mut flow_min: f64 = 1.0;
    let mut gauss_cover: f64 = 1.0;
    let mut gauss_both: f64 = 0.0;
    for seed in 0..4u64 {
        let mut demo = BanditDemo::new(seed);
        let eps = gen_demos(&MultimodalBandit::new(), &mut demo, 200, 0.0, seed)?;
        let norm = NormStats::fit(&eps)?;
        let mut cfg = TrainConfig {
            seed,
            chunk_len: 1,
            prefix_len: 0,
            flow_depth: 4,
            hidden: 32,
            heads: 2,
            ffn_mult: 2,
            ..TrainConfig::default()
        };
        cfg.il.steps = 2000;
        cfg.il.batch_size = 64;
        cfg.il.lr = 1e-3;
        let fc = cfg.flow_config(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = FlowPolicy::<f64>::new(fc.clone(), &mut rng)?;
        let mut gauss = GaussianPolicy::<f64>::new(fc, &mut rng)?;
        stage_il(&cfg, &mut flow, &eps, &norm, &mut rng)?;
        stage_il(&cfg, &mut gauss, &eps, &norm, &mut rng)?;
        let f = mode_fractions(&flow, &norm, 100 + seed)?;
        let g = mode_fractions(&gauss, &norm, 100 + seed)?;
        flow_min = flow_min.min(f[0].min(f[1]));
        gauss_cover = gauss_cover.min(g[0] + g[1] + g[2]);
        gauss_both = gauss_both.max(g[0].min(g[1]));
        println!(
            "    seed {seed}: flow modes {:.2}/{:.2}; gaussian modes {:.2}/{:.2}, between {:.2}",
            f[0], f[1], g[0], g[1], g[2]
        );
    }
    outcome(
        flow_min >= 0.3 && gauss_cover >= 0.9 && gauss_both < 0.3,
        format!(
            "flow min mode mass {flow_min:.2} (>= 0.30); gaussian mass at a mode or between {gauss_cover:.2} (>= 0.90), \
             never >= 0.30 at both modes (max {gauss_both:.2})"
        ),
    )
}

/// Desk-scale point-mass configuration.
fn pointmass_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        chunk_len: 5,
        prefix_len: 1,
        rl_stride: Some(1),
        flow_depth: 4,
        hidden: 32,
        heads: 2,
        ffn_mult: 2,
        critic: CriticConfig {
            hidden: 32,
            heads: 2,
            layers: 1,
            ffn_hidden: 32,
            num_bins: 51,
            ensemble_size: 2,
            dropout: 0.1,
        },
        gamma: 0.99,
        lambda_bc: 0.03,
        log_every: 100,
        eval_episodes: 200,
        ..TrainConfig::default()
    };
    cfg.il.steps = 1500;
    cfg.il.batch_size = 64;
    cfg.il.lr = 1e-3;
    cfg.warmup.steps = 2000;
    cfg.warmup.batch_size = 64;
    cfg.warmup.lr = 1e-3;
    cfg.offline.steps = 300;
    cfg.offline.batch_size = 64;
    cfg.offline.lr = 1e-4;
    cfg.online.iterations = 3;
    cfg.online.episodes_per_iteration = 20;
    cfg.online.steps_per_iteration = 200;
    cfg.online.batch_size = 64;
    cfg.online.lr = 3e-4;
    cfg
}

fn success(report: &softflow::pipeline::StageReport, critic: bool) -> f64 {
    report
        .eval
        .iter()
        .find(|e| e.use_critic == critic)
        .map_or(f64::NAN, |e| e.metrics.success_rate)
}

fn c7_stage_ordering() -> Result<Outcome> {
    let t = Instant::now();
    let env = make_env("pointmass")?;
    let mut per_stage = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..4u64 {
        let cfg = pointmass_config(seed);
        let mut teacher = PointMassTeacher::new(cfg.chunk_len, cfg.prefix_len, 0.6, 7 + seed);
        let demos = gen_demos(env.as_ref(), &mut teacher, 121, 0.41, 1 + seed)?;
        let failures = demos.iter().filter(|e| !e.success).count();
        assert_eq!((demos.len(), failures), (121, 50));
        let mut runner = Runner::<f32>::new(cfg, None)?;
        let mut inputs = Inputs {
            demos: Some(&demos),
            env: Some(env.as_ref()),
            teacher: None,
        };
        runner.run_all(&mut inputs, false)?;
        let r = runner.reports();
        // IL is deployed with plain sampling; later stages with best-of-N.
        per_stage[0].push(success(&r[0], false));
        for (i, rep) in r.iter().enumerate().skip(1) {
            per_stage[i].push(success(rep, true));
        }
        println!(
            "    seed {seed}: il {:.3}, warm-up {:.3}, offline {:.3}, online {:.3}",
            per_stage[0][seed as usize],
            per_stage[1][seed as usize],
            per_stage[2][seed as usize],
            per_stage[3][seed as usize]
        );
    }
    let s: Vec<_> = per_stage.iter().map(|v| aggregate(v)).collect();
    let ordered = s.windows(2).all(|w| w[0].mean <= w[1].mean);
    let gain = s[3].mean - s[0].mean;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        ordered && gain >= 0.10 && secs < 1800.0,
        format!(
            "success il {} <= warm-up {} <= offline {} <= online {}; gain {gain:.2} (>= 0.10); {secs:.0} s (< 1800 s)",
            s[0], s[1], s[2], s[3]
        ),
    )
}

fn c8_best_of_n() -> Result<Outcome> {
    let flow = verify::tiny_flow(5)?;
    let critic = verify::tiny_critic(6)?;
    let batch = verify::tiny_batch(32, 7)?;
    let mut monotone = true;
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut prev: Option<Vec<f64>> = None;
        for n in [1, 2, 3, 4, 8, 16, 24, 64, 128] {
            let cfg = SelectionConfig {
                n_samples: n,
                sample_std: 0.7,
                use_critic: true,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = select_chunks(
                &batch.obs,
                &batch.prefix,
                &flow,
                Some(&critic),
                &cfg,
                &mut rng,
            )?;
            if let Some(p) = &prev {
                monotone &= sel.scores.iter().zip(p).all(|(s, q)| s >= q);
                checked += 1;
            }
            prev = Some(sel.scores);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let one = select_chunks(
        &batch.obs,
        &batch.prefix,
        &flow,
        Some(&critic),
        &SelectionConfig {
            n_samples: 1,
            sample_std: 0.7,
            use_critic: true,
        },
        &mut rng,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (plain, _) = flow.sample_chunks(&batch.obs, &batch.prefix, 0.7, &mut rng)?;
    let identical = one.chunks == plain;
    outcome(
        monotone && identical,
        format!("scores non-decreasing over {checked} nested steps: {monotone}; N=1 identical to plain sampling: {identical}"),
    )
}

fn c9_mixing() -> Result<Outcome> {
    let (frac, sd) = verify::mixing_fraction(0.5, 100_000, 2024)?;
    let z = (frac - 0.5).abs() / sd;
    outcome(
        z <= 3.0,
        format!("offline fraction {frac:.4} over 1e5 rows, {z:.2} sigma (<= 3)"),
    )
}

fn tiny_run_config() -> TrainConfig {
    let mut cfg = pointmass_config(3);
    cfg.hidden = 16;
    cfg.flow_depth = 2;
    cfg.critic.hidden = 16;
    cfg.critic.ffn_hidden = 16;
    cfg.rl_stride = None;
    cfg.eval_episodes = 10;
    cfg.il.steps = 60;
    cfg.warmup.steps = 40;
    cfg.offline.steps = 30;
    cfg.online.iterations = 2;
    cfg.online.episodes_per_iteration = 4;
    cfg.online.steps_per_iteration = 20;
    cfg
}

fn c10_determinism() -> Result<Outcome> {
    let env = make_env("pointmass")?;
    let cfg = tiny_run_config();
    let mut teacher = PointMassTeacher::new(cfg.chunk_len, cfg.prefix_len, 0.6, 1);
    let demos = gen_demos(env.as_ref(), &mut teacher, 30, 0.4, 2)?;
    let root = tempfile::tempdir()?;
    let run = |name: &str, split: bool| -> Result<RunDir> {
        let dir = RunDir::new(root.path().join(name));
        let mut inputs = Inputs {
            demos: Some(&demos),
            env: Some(env.as_ref()),
            teacher: None,
        };
        if split {
            // A fresh runner per stage: every stage reloads its prerequisite.
            for stage in Stage::sequence(StagePlan::Standard) {
                Runner::<f64>::new(cfg.clone(), Some(dir.clone()))?
                    .run_stage(*stage, &mut inputs)?;
            }
        } else {
            Runner::<f64>::new(cfg.clone(), Some(dir.clone()))?.run_all(&mut inputs, false)?;
        }
        Ok(dir)
    };
    let a = run("a", false)?;
    let b = run("b", false)?;
    let c = run("c", true)?;
    let mut same_rerun = true;
    let mut same_resume = true;
    for stage in Stage::sequence(StagePlan::Standard) {
        let x = std::fs::read(a.checkpoint(*stage))?;
        same_rerun &= x == std::fs::read(b.checkpoint(*stage))?;
        same_resume &= x == std::fs::read(c.checkpoint(*stage))?;
    }
    same_rerun &= std::fs::read(a.online_buffer())? == std::fs::read(b.online_buffer())?;
    same_resume &= std::fs::read(a.online_buffer())? == std::fs::read(c.online_buffer())?;
    outcome(
        same_rerun && same_resume,
        format!("rerun bitwise identical: {same_rerun}; staged resume identical to uninterrupted run: {same_resume}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    (1, "flow round trip", c1_round_trip),
    (2, "exact likelihood", c2_exact_likelihood),
    (3, "loss gradients", c3_gradients),
    (4, "HL-Gauss projection", c4_hl_gauss),
    (5, "chunked Bellman oracle", c5_bellman_oracle),
    (6, "multimodality", c6_multimodality),
    (7, "stage ordering", c7_stage_ordering),
    (8, "best-of-N", c8_best_of_n),
    (9, "mixing ratio", c9_mixing),
    (10, "determinism and resume", c10_determinism),
];

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest flags such as --nocapture are accepted and ignored.
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {id:>2} {name:<24} {} [{:.1} s] {detail}",
            if passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
