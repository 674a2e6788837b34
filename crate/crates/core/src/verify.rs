//! Invariant suites run by the `check` command, plus the numerical oracles
//! they are built from. Every oracle here is independent of the code path it
//! checks: dense finite-difference Jacobians and gradients, quadrature of the
//! Gaussian kernel, a dual-method dynamic-programming solve and binomial
//! statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::critic::{hl_gauss_project, scalar_q, CriticConfig, CriticEnsemble, ValueSupport};
use crate::data::{
    ChunkDims, MixedSampler, ReplayBuffer, Source, TransitionBatch, TransitionChunk,
};
use crate::envs::{
    bellman_residual, chunk_vector, dp_chunk_q, num_chunks, DpMethod, TabularChunkMDP,
    TabularPolicy,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowPolicy, IlBatch};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::pipeline::{actor_objective_and_grad, build_critic, stage_warmup, TrainConfig};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

/// Names accepted by [`run_suite`], in execution order.
pub const SUITES: [&str; 7] = [
    "roundtrip",
    "jacobian",
    "normalization",
    "gradient",
    "hlgauss",
    "bellman",
    "mixing",
];

/// Outcome of one measured check: passes when `value <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn below(
        suite: &'static str,
        check: impl Into<String>,
        value: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            suite,
            check: check.into(),
            value,
            tolerance,
            // NaN fails.
            passed: value <= tolerance,
        }
    }
}

/// Runs the named suite.
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    match name {
        "roundtrip" => roundtrip_suite(),
        "jacobian" => jacobian_suite(),
        "normalization" => normalization_suite(),
        "gradient" => gradient_suite(),
        "hlgauss" => hlgauss_suite(),
        "bellman" => bellman_suite(),
        "mixing" => mixing_suite(),
        _ => Err(Error::Config(format!(
            "unknown check suite '{name}' (known: {})",
            SUITES.join(", ")
        ))),
    }
}

/// Runs every suite whose name contains `filter` (all when `None`).
pub fn run_checks(filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let names: Vec<&str> = SUITES
        .iter()
        .copied()
        .filter(|s| filter.is_none_or(|f| s.contains(f)))
        .collect();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no check suite matches '{}'",
            filter.unwrap_or_default()
        )));
    }
    let mut out = Vec::new();
    for n in names {
        out.extend(run_suite(n)?);
    }
    Ok(out)
}

/// Small flow configuration used by the oracle checks.
pub fn probe_flow_config(
    chunk_len: usize,
    action_dim: usize,
    depth: usize,
    hidden: usize,
) -> FlowConfig {
    FlowConfig {
        obs_dim: 3,
        action_dim,
        chunk_len,
        prefix_len: 1.min(chunk_len),
        depth,
        hidden,
        heads: if hidden % 2 == 0 { 2 } else { 1 },
        ffn_mult: 2,
        noise_std: 0.05,
        sample_std: 0.7,
    }
}

/// A flow whose parameters are all perturbed by `U(-scale, scale)`, so the
/// coupling blocks are far from the identity they start at.
pub fn randomized_flow<T: Scalar>(cfg: FlowConfig, scale: f64, seed: u64) -> Result<FlowPolicy<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FlowPolicy::new(cfg, &mut rng)?;
    perturb(f.params_mut(), scale, &mut rng);
    Ok(f)
}

fn perturb<T: Scalar>(store: &mut ParamStore<T>, scale: f64, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += lit(rng.gen_range(-scale..scale));
        }
    }
}

/// Random conditioning rows: observations in `[-1, 1]`, prefixes inside the box.
pub fn random_context<T: Scalar>(
    cfg: &FlowConfig,
    rows: usize,
    rng: &mut impl Rng,
) -> (Tensor<T>, Tensor<T>) {
    let obs = Tensor::from_fn(rows, cfg.obs_dim, |_, _| lit(rng.gen_range(-1.0..1.0)));
    let pre = Tensor::from_fn(rows, cfg.prefix_len * cfg.action_dim, |_, _| {
        lit(rng.gen_range(-0.9..0.9))
    });
    (obs, pre)
}

/// Max-abs errors of `a -> z -> a` and of `log_det_fwd + log_det_inv` over
/// `rows` random chunks drawn uniformly from `(-0.99, 0.99)^{H x A}`.
pub fn round_trip_error<T: Scalar>(
    flow: &FlowPolicy<T>,
    rows: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = flow.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs, pre) = random_context::<T>(&cfg, rows, &mut rng);
    let a = Tensor::from_fn(rows, cfg.chunk_size(), |_, _| {
        lit(rng.gen_range(-0.99..0.99))
    });
    let (z, ld_f) = flow.flow_forward(&obs, &pre, &a)?;
    let (back, ld_i) = flow.flow_inverse(&obs, &pre, &z)?;
    let act = a
        .data()
        .iter()
        .zip(back.data())
        .map(|(&x, &y)| to_f64(x - y).abs())
        .fold(0.0, f64::max);
    let ld = ld_f
        .iter()
        .zip(&ld_i)
        .map(|(&x, &y)| to_f64(x + y).abs())
        .fold(0.0, f64::max);
    Ok((act, ld))
}

/// `log |det m|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap_or(c);
        if m[p][c] == 0.0 {
            return f64::NEG_INFINITY;
        }
        m.swap(c, p);
        acc += m[c][c].abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    acc
}

/// Largest relative error `|ld - ld_fd| / max(|ld|, 1)` between the analytic
/// log-determinant and `log |det J|` of a central-difference Jacobian of the
/// likelihood map, over `rows` random chunks.
pub fn log_det_error(flow: &FlowPolicy<f64>, rows: usize, seed: u64) -> Result<f64> {
    let cfg = flow.config().clone();
    let n = cfg.chunk_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs, pre) = random_context::<f64>(&cfg, rows, &mut rng);
    let a = Tensor::from_fn(rows, n, |_, _| rng.gen_range(-0.9..0.9));
    let (_, ld) = flow.flow_forward(&obs, &pre, &a)?;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        // Row-batched probes: 2n perturbed copies of chunk r.
        let o = Tensor::from_fn(2 * n, cfg.obs_dim, |_, j| obs.get(r, j));
        let p = Tensor::from_fn(2 * n, pre.cols(), |_, j| pre.get(r, j));
        let probe = Tensor::from_fn(2 * n, n, |i, j| {
            let d = if i / 2 == j { eps } else { 0.0 };
            a.get(r, j) + if i % 2 == 0 { d } else { -d }
        });
        let (z, _) = flow.flow_forward(&o, &p, &probe)?;
        // jac[k][j] = dz_k / da_j
        let jac: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                (0..n)
                    .map(|j| (z.get(2 * j, k) - z.get(2 * j + 1, k)) / (2.0 * eps))
                    .collect()
            })
            .collect();
        let num = log_abs_det(jac);
        worst = worst.max((num - ld[r]).abs() / ld[r].abs().max(1.0));
    }
    Ok(worst)
}

/// `integral of exp(log_prob)` over `(-1, 1)^A` for a single-step flow
/// (`H = 1`, `A <= 2`) and one random context.
///
/// The quadrature substitutes `a = tanh(u)` so the integrable edge behaviour
/// is resolved: `integral p(tanh u) prod(1 - tanh^2 u) du` by the trapezoid
/// rule on `[-u_max, u_max]^A` with `points` nodes per axis.
pub fn density_integral(
    flow: &FlowPolicy<f64>,
    points: usize,
    u_max: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = flow.config().clone();
    if cfg.chunk_len != 1 || !(1..=2).contains(&cfg.action_dim) || points < 2 {
        return Err(Error::Argument(
            "density integration needs H = 1, A <= 2 and at least 2 nodes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs1, pre1) = random_context::<f64>(&cfg, 1, &mut rng);
    let h = 2.0 * u_max / (points - 1) as f64;
    let nodes: Vec<f64> = (0..points).map(|i| -u_max + i as f64 * h).collect();
    let w = |i: usize| if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
    let dims = cfg.action_dim;
    let total_rows = points.pow(dims as u32);
    let mut total = 0.0;
    let block = 4096;
    let mut start = 0;
    while start < total_rows {
        let end = (start + block).min(total_rows);
        let m = end - start;
        let idx = |row: usize, d: usize| (row / points.pow(d as u32)) % points;
        let a = Tensor::from_fn(m, dims, |i, d| nodes[idx(start + i, d)].tanh());
        let obs = Tensor::from_fn(m, cfg.obs_dim, |_, j| obs1.get(0, j));
        let pre = Tensor::from_fn(m, pre1.cols(), |_, j| pre1.get(0, j));
        let lp = flow.log_prob(&obs, &pre, &a)?;
        for (i, l) in lp.into_iter().enumerate() {
            let mut weight = 1.0;
            for d in 0..dims {
                let u = nodes[idx(start + i, d)];
                weight *= w(idx(start + i, d)) * h * (1.0 - u.tanh().powi(2));
            }
            total += l.exp() * weight;
        }
        start = end;
    }
    Ok(total)
}

/// Max relative error between `analytic` and a central-difference gradient of
/// `f` at `theta`; components use `|g - g_fd| / max(|g|, |g_fd|, floor)`.
pub fn gradient_error(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
) -> Result<f64> {
    if theta.len() != analytic.len() {
        return Err(Error::Shape("gradient and parameter lengths differ".into()));
    }
    let mut x = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        let num = (up - down) / (2.0 * eps);
        let g = analytic[i];
        worst = worst.max((g - num).abs() / g.abs().max(num.abs()).max(floor));
    }
    Ok(worst)
}

const FD_EPS: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-4;

fn flat_grads(g: &[Tensor<f64>]) -> Vec<f64> {
    g.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// A tiny flow (under 500 parameters) with `H = 2`, `A = 2`, `P = 1`.
pub fn tiny_flow(seed: u64) -> Result<FlowPolicy<f64>> {
    let cfg = FlowConfig {
        obs_dim: 2,
        action_dim: 2,
        chunk_len: 2,
        prefix_len: 1,
        depth: 2,
        hidden: 2,
        heads: 1,
        ffn_mult: 1,
        noise_std: 0.05,
        sample_std: 0.7,
    };
    randomized_flow(cfg, 0.3, seed)
}

/// A tiny ensemble (under 500 parameters) matching [`tiny_flow`]'s shapes.
pub fn tiny_critic(seed: u64) -> Result<CriticEnsemble<f64>> {
    let cfg = CriticConfig {
        hidden: 4,
        heads: 1,
        layers: 1,
        ffn_hidden: 4,
        num_bins: 11,
        ensemble_size: 2,
        dropout: 0.0,
    };
    let dims = ChunkDims {
        obs_dim: 2,
        action_dim: 2,
        chunk_len: 2,
        prefix_len: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = CriticEnsemble::new(cfg, dims, ValueSupport::new(-1.0, 2.0, 11)?, &mut rng)?;
    perturb(c.params_mut(), 0.3, &mut rng);
    Ok(c)
}

/// Random transitions with the shapes of [`tiny_flow`]; half are online rows.
pub fn tiny_batch(rows: usize, seed: u64) -> Result<TransitionBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ChunkDims {
        obs_dim: 2,
        action_dim: 2,
        chunk_len: 2,
        prefix_len: 1,
    };
    let mut u = |n: usize, r: f64| (0..n).map(|_| rng.gen_range(-r..r)).collect::<Vec<f64>>();
    let data: Vec<TransitionChunk> = (0..rows)
        .map(|i| TransitionChunk {
            obs: u(2, 1.0),
            prefix: u(2, 0.9),
            chunk: u(4, 0.9),
            rewards: u(2, 1.0),
            next_obs: u(2, 1.0),
            next_prefix: u(2, 0.9),
            done: i % 3 == 0,
            source: if i % 2 == 0 {
                Source::Demo
            } else {
                Source::Online
            },
        })
        .collect();
    let refs: Vec<&TransitionChunk> = data.iter().collect();
    TransitionBatch::from_rows(&refs, dims)
}

/// Finite-difference check of the imitation loss gradient.
pub fn il_gradient_error(seed: u64) -> Result<f64> {
    let mut flow = tiny_flow(seed)?;
    let b = tiny_batch(6, seed + 1)?;
    let batch = IlBatch {
        obs: b.obs,
        prefix: b.prefix,
        targets: b.chunks,
    };
    let noise_seed = seed + 2;
    let (_, g) = flow.il_loss_and_grad(
        &batch,
        0.05,
        &mut ChaCha8Rng::seed_from_u64(noise_seed),
        Mode::Eval,
    )?;
    let theta = flow.params().flatten();
    gradient_error(
        |x| {
            flow.params_mut().set_flat(x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            Ok(flow.il_loss_and_grad(&batch, 0.05, &mut rng, Mode::Eval)?.0)
        },
        &theta,
        &flat_grads(&g),
        FD_EPS,
        FD_FLOOR,
    )
}

/// Finite-difference check of the critic cross-entropy gradient at fixed targets.
pub fn critic_gradient_error(seed: u64) -> Result<f64> {
    let mut critic = tiny_critic(seed)?;
    let batch = tiny_batch(6, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let targets: Vec<f64> = (0..batch.len()).map(|_| rng.gen_range(-0.5..1.5)).collect();
    let (_, g) = critic.loss_and_grad(&batch, &targets, Mode::Eval)?;
    let theta = critic.params().flatten();
    gradient_error(
        |x| {
            critic.params_mut().set_flat(x)?;
            Ok(critic.loss_and_grad(&batch, &targets, Mode::Eval)?.0)
        },
        &theta,
        &flat_grads(&g),
        FD_EPS,
        FD_FLOOR,
    )
}

/// Finite-difference check of the actor objective (pathwise critic term plus
/// the imitation term on offline rows) with respect to the flow parameters.
pub fn actor_gradient_error(seed: u64) -> Result<f64> {
    let mut flow = tiny_flow(seed)?;
    let critic = tiny_critic(seed + 3)?;
    let batch = tiny_batch(6, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let z = flow.draw_latents(batch.len(), 0.7, &mut rng);
    let noise_seed = seed + 4;
    let eval = |f: &FlowPolicy<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        let (q, il, g) =
            actor_objective_and_grad(f, &critic, &batch, &z, 0.1, 0.05, &mut r, Mode::Eval)?;
        Ok((-q + 0.1 * il, g))
    };
    let (_, g) = eval(&flow)?;
    let theta = flow.params().flatten();
    gradient_error(
        |x| {
            flow.params_mut().set_flat(x)?;
            Ok(eval(&flow)?.0)
        },
        &theta,
        &flat_grads(&g),
        FD_EPS,
        FD_FLOOR,
    )
}

/// Composite Simpson quadrature of the Gaussian density on `[a, b]`.
fn gaussian_mass_quadrature(mu: f64, sigma: f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let pdf = |x: f64| {
        let t = (x - mu) / sigma;
        (-0.5 * t * t).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Max per-bin gap between the HL-Gauss projection and Simpson quadrature of
/// the kernel over each bin (renormalized over the support), for `targets`.
pub fn hl_gauss_quadrature_error(support: &ValueSupport, targets: &[f64]) -> f64 {
    let edges = support.edges();
    let mut worst: f64 = 0.0;
    for &y in targets {
        let p = hl_gauss_project::<f64>(y, support).probs;
        let mass: Vec<f64> = edges
            .windows(2)
            .map(|e| gaussian_mass_quadrature(y, support.hl_sigma, e[0], e[1], 64))
            .collect();
        let total: f64 = mass.iter().sum();
        for (a, m) in p.iter().zip(&mass) {
            worst = worst.max((a - m / total).abs());
        }
    }
    worst
}

/// Max gap between a target and the mean of its projection.
pub fn hl_gauss_mean_error(support: &ValueSupport, targets: &[f64]) -> f64 {
    targets
        .iter()
        .map(|&y| (scalar_q(&hl_gauss_project::<f64>(y, support), support) - y).abs())
        .fold(0.0, f64::max)
}

/// Interior targets at least four kernel widths from either edge.
pub fn interior_targets(support: &ValueSupport, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = 4.0 * support.hl_sigma;
    (0..n)
        .map(|_| rng.gen_range(support.v_min + pad..support.v_max - pad))
        .collect()
}

/// Offline fraction and its binomial standard deviation over `rows` draws.
pub fn mixing_fraction(rho: f64, rows: usize, seed: u64) -> Result<(f64, f64)> {
    let dims = ChunkDims {
        obs_dim: 1,
        action_dim: 1,
        chunk_len: 1,
        prefix_len: 0,
    };
    let row = |s: Source| TransitionChunk {
        obs: vec![0.0],
        prefix: vec![],
        chunk: vec![0.0],
        rewards: vec![0.0],
        next_obs: vec![0.0],
        next_prefix: vec![],
        done: false,
        source: s,
    };
    let off = ReplayBuffer::from_rows(dims, (0..7).map(|_| row(Source::Demo)).collect())?;
    let on = ReplayBuffer::from_rows(dims, (0..3).map(|_| row(Source::Online)).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = MixedSampler::new(rho)?.sample::<f64>(&off, &on, rows, &mut rng)?;
    let frac = b.offline.iter().filter(|&&x| x).count() as f64 / rows as f64;
    Ok((frac, (rho * (1.0 - rho) / rows as f64).sqrt()))
}

/// Deterministic policy used by the tabular checks: state `s` picks chunk
/// `(5 s + 1) mod |C|`.
pub fn tabular_policy(mdp: &TabularChunkMDP, chunk_len: usize) -> (Vec<usize>, TabularPolicy) {
    let nc = num_chunks(chunk_len);
    let choice: Vec<usize> = (0..mdp.num_states()).map(|s| (s * 5 + 1) % nc).collect();
    let pol = TabularPolicy::deterministic(&choice, chunk_len);
    (choice, pol)
}

/// Settings of the tabular critic warm-up.
#[derive(Clone, Debug)]
pub struct TabularWarmup {
    pub chunk_len: usize,
    pub gamma: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Sup-norm gap between the warmed-up ensemble's `min_q` and the exact
/// chunked Q table of [`tabular_policy`] on the example MDP, over every
/// (state, chunk) pair.
pub fn tabular_warmup_error(w: &TabularWarmup) -> Result<f64> {
    let h = w.chunk_len;
    let mdp = TabularChunkMDP::example(12);
    let n = mdp.num_states();
    let nc = num_chunks(h);
    let (_, pol) = tabular_policy(&mdp, h);
    let q = dp_chunk_q(&mdp, &pol.table, w.gamma, h, DpMethod::LinearSolve)?;
    let (lo, hi) = q
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let cfg = TrainConfig {
        seed: w.seed,
        chunk_len: h,
        prefix_len: 0,
        gamma: w.gamma,
        critic: CriticConfig {
            hidden: 32,
            heads: 2,
            layers: 1,
            ffn_hidden: 32,
            num_bins: 101,
            ensemble_size: 2,
            dropout: 0.0,
        },
        value_range: Some([lo - 0.5, hi + 0.5]),
        log_every: 1000,
        warmup: crate::pipeline::PhaseConfig {
            steps: w.steps,
            batch_size: w.batch_size,
            lr: w.lr,
            dropout: 0.0,
        },
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let dims = cfg.dims(n, 2);
    let data = ReplayBuffer::from_rows(dims, mdp.chunk_dataset(h, 1, &mut rng))?;
    let support = ValueSupport::new(lo - 0.5, hi + 0.5, 101)?;
    let mut critic = build_critic::<f64>(&cfg, dims, &support)?;
    stage_warmup(&cfg, &pol, &mut critic, &data, &mut rng)?;
    let mut obs = Vec::with_capacity(n * nc * n);
    let mut chunks = Vec::with_capacity(n * nc * 2 * h);
    for s in 0..n {
        for c in 0..nc {
            obs.extend(mdp.one_hot(s));
            chunks.extend(chunk_vector(c, h));
        }
    }
    let est = critic.min_q(
        &Tensor::from_vec(n * nc, n, obs)?,
        &Tensor::zeros(n * nc, 0),
        &Tensor::from_vec(n * nc, 2 * h, chunks)?,
    )?;
    Ok((0..n * nc)
        .map(|i| (est[i] - q[i / nc][i % nc]).abs())
        .fold(0.0, f64::max))
}

fn roundtrip_suite() -> Result<Vec<CheckResult>> {
    let cfg = probe_flow_config(10, 4, 16, 32);
    let f64_flow = randomized_flow::<f64>(cfg.clone(), 0.3, 11)?;
    let (a, ld) = round_trip_error(&f64_flow, 1000, 12)?;
    // Random weights at scale 0.3 amplify rounding by up to e per block;
    // single precision is checked at a scale typical of trained weights.
    let f32_flow = randomized_flow::<f32>(cfg, 0.1, 11)?;
    let (a32, _) = round_trip_error(&f32_flow, 1000, 12)?;
    Ok(vec![
        CheckResult::below(
            "roundtrip",
            "action error f64 (H=10, A=4, depth 16)",
            a,
            1e-4,
        ),
        CheckResult::below("roundtrip", "log-det sum f64", ld, 1e-6),
        CheckResult::below("roundtrip", "action error f32, weight scale 0.1", a32, 1e-4),
    ])
}

fn jacobian_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (h, a) in [(1, 1), (1, 2), (2, 2), (3, 2), (2, 3), (6, 1)] {
        let flow = randomized_flow::<f64>(probe_flow_config(h, a, 4, 8), 0.3, (10 * h + a) as u64)?;
        let e = log_det_error(&flow, 8, 5)?;
        out.push(CheckResult::below(
            "jacobian",
            format!("log-det vs dense Jacobian H={h} A={a}"),
            e,
            1e-3,
        ));
    }
    for a in [1, 2] {
        let flow = randomized_flow::<f64>(probe_flow_config(1, a, 4, 8), 0.3, 40 + a as u64)?;
        let points = if a == 1 { 4001 } else { 401 };
        let total = density_integral(&flow, points, 9.0, 6)?;
        out.push(CheckResult::below(
            "jacobian",
            format!("density integral H=1 A={a} (|I - 1|)"),
            (total - 1.0).abs(),
            0.02,
        ));
    }
    Ok(out)
}

fn normalization_suite() -> Result<Vec<CheckResult>> {
    use crate::data::{NormStats, ACTION_MARGIN};
    use crate::envs::{gen_demos, ChunkedPointMass, PointMassTeacher};
    let env = ChunkedPointMass::new();
    let mut teacher = PointMassTeacher::new(5, 1, 0.3, 3);
    let eps = gen_demos(&env, &mut teacher, 20, 0.25, 4)?;
    let norm = NormStats::fit(&eps)?;
    let mut round: f64 = 0.0;
    let mut overflow: f64 = 0.0;
    let mut extreme: f64 = 0.0;
    for e in &eps {
        for t in 0..e.len() {
            let raw = e.actions.row(t);
            let a = norm.normalize_action(raw);
            overflow = overflow.max(
                a.iter()
                    .map(|x| (x.abs() - ACTION_MARGIN).max(0.0))
                    .fold(0.0, f64::max),
            );
            extreme = extreme.max(a.iter().map(|x| x.abs()).fold(0.0, f64::max));
            let back = norm.unnormalize_action(&a);
            round = round.max(
                raw.iter()
                    .zip(&back)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
            );
        }
    }
    let (mut s, mut sq, mut n) = (vec![0.0; 4], vec![0.0; 4], 0.0);
    for e in &eps {
        for t in 0..e.len() {
            for (j, x) in norm
                .normalize_obs(e.observations.row(t))
                .into_iter()
                .enumerate()
            {
                s[j] += x;
                sq[j] += x * x;
            }
            n += 1.0;
        }
    }
    let moment = (0..4)
        .map(|j| {
            (s[j] / n)
                .abs()
                .max((sq[j] / n - (s[j] / n).powi(2) - 1.0).abs())
        })
        .fold(0.0, f64::max);
    Ok(vec![
        CheckResult::below("normalization", "action round trip", round, 1e-9),
        CheckResult::below("normalization", "actions exceed the margin", overflow, 0.0),
        CheckResult::below(
            "normalization",
            "dataset extremes reach the margin",
            (extreme - ACTION_MARGIN).abs(),
            1e-9,
        ),
        CheckResult::below(
            "normalization",
            "normalized observation moments",
            moment,
            1e-9,
        ),
    ])
}

fn gradient_suite() -> Result<Vec<CheckResult>> {
    Ok(vec![
        CheckResult::below("gradient", "il_loss", il_gradient_error(1)?, 1e-3),
        CheckResult::below("gradient", "critic_loss", critic_gradient_error(2)?, 1e-3),
        CheckResult::below(
            "gradient",
            "actor objective",
            actor_gradient_error(3)?,
            1e-3,
        ),
    ])
}

fn hlgauss_suite() -> Result<Vec<CheckResult>> {
    let support = ValueSupport::new(-10.0, 10.0, 101)?;
    let targets = interior_targets(&support, 200, 7);
    let mut edge_targets = targets.clone();
    edge_targets.extend([-10.0, -9.95, 9.9, 10.0, 12.0]);
    Ok(vec![
        CheckResult::below(
            "hlgauss",
            "per-bin mass vs quadrature",
            hl_gauss_quadrature_error(&support, &edge_targets),
            1e-6,
        ),
        CheckResult::below(
            "hlgauss",
            "projected mean of interior targets",
            hl_gauss_mean_error(&support, &targets),
            1e-3,
        ),
    ])
}

fn bellman_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for h in 1..=3 {
        let mdp = TabularChunkMDP::random(6, 100 + h as u64);
        let nc = num_chunks(h);
        let mut rng = ChaCha8Rng::seed_from_u64(h as u64);
        let pi: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let w: Vec<f64> = (0..nc).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let a = dp_chunk_q(&mdp, &pi, 0.9, h, DpMethod::LinearSolve)?;
        let b = dp_chunk_q(&mdp, &pi, 0.9, h, DpMethod::ValueIteration)?;
        let gap = a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        out.push(CheckResult::below(
            "bellman",
            format!("linear solve vs value iteration H={h}"),
            gap,
            1e-8,
        ));
        out.push(CheckResult::below(
            "bellman",
            format!("Bellman residual H={h}"),
            bellman_residual(&mdp, &pi, 0.9, h, &a),
            1e-9,
        ));
    }
    out.push(CheckResult::below(
        "bellman",
        "warm-up critic vs exact Q (H=1, short run)",
        tabular_warmup_error(&TabularWarmup {
            chunk_len: 1,
            gamma: 0.9,
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        })?,
        5e-2,
    ));
    Ok(out)
}

fn mixing_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (rho, seed) in [(0.5, 1), (0.25, 2)] {
        let (frac, sd) = mixing_fraction(rho, 100_000, seed)?;
        out.push(CheckResult::below(
            "mixing",
            format!("offline fraction at rho={rho} (in sigmas)"),
            (frac - rho).abs() / sd,
            3.0,
        ));
    }
    let (all, _) = mixing_fraction(1.0, 1000, 3)?;
    out.push(CheckResult::below(
        "mixing",
        "rho=1 draws only offline rows",
        1.0 - all,
        0.0,
    ));
    Ok(out)
}
