use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChunkEnv, Step};
use crate::data::{RewardRule, Source, TransitionChunk};
use crate::error::{Error, Result};
use crate::policy::ChunkSampler;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

/// Atomic actions as points in `[-1, 1]^2`.
pub const ACTION_POINTS: [[f64; 2]; 3] = [[-0.6, -0.6], [0.6, -0.6], [0.0, 0.6]];
pub const MAX_CHUNK_LEN: usize = 3;

/// Nearest atomic action to a continuous command.
pub fn atomic_action(a: &[f64]) -> usize {
    let d = |p: &[f64; 2]| (a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2);
    (0..ACTION_POINTS.len())
        .min_by(|&i, &j| d(&ACTION_POINTS[i]).total_cmp(&d(&ACTION_POINTS[j])))
        .unwrap_or(0)
}

/// Atomic action sequence of chunk index `c` (base-3 digits, first step most significant).
pub fn chunk_actions(c: usize, h: usize) -> Vec<usize> {
    let n = ACTION_POINTS.len();
    let mut v = vec![0; h];
    let mut x = c;
    for slot in v.iter_mut().rev() {
        *slot = x % n;
        x /= n;
    }
    v
}

/// Flattened `H x 2` action points of chunk `c`.
pub fn chunk_vector(c: usize, h: usize) -> Vec<f64> {
    chunk_actions(c, h)
        .into_iter()
        .flat_map(|k| ACTION_POINTS[k])
        .collect()
}

pub fn num_chunks(h: usize) -> usize {
    ACTION_POINTS.len().pow(h as u32)
}

/// Finite MDP whose actions are snapped to three fixed points.
#[derive(Clone, Debug)]
pub struct TabularChunkMDP {
    /// `[s][k][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `[s][k]`.
    pub rewards: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
    pub start: usize,
    horizon: usize,
    state: usize,
    t: usize,
    total: f64,
    rng: ChaCha8Rng,
}

impl TabularChunkMDP {
    pub fn new(
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        terminal: Vec<bool>,
        start: usize,
        horizon: usize,
    ) -> Result<Self> {
        let n = transitions.len();
        let k = ACTION_POINTS.len();
        let shape_ok = n > 0
            && rewards.len() == n
            && terminal.len() == n
            && start < n
            && transitions
                .iter()
                .all(|r| r.len() == k && r.iter().all(|p| p.len() == n))
            && rewards.iter().all(|r| r.len() == k);
        if !shape_ok {
            return Err(Error::Shape("inconsistent tabular MDP tables".into()));
        }
        for row in transitions.iter().flatten() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(
                    "transition rows must be distributions".into(),
                ));
            }
        }
        Ok(Self {
            transitions,
            rewards,
            terminal,
            start,
            horizon,
            state: start,
            t: 0,
            total: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Six-state deterministic ring with action-dependent moves and rewards.
    pub fn example(horizon: usize) -> Self {
        let n = 6;
        let moves = [1usize, n - 1, 2];
        let transitions = (0..n)
            .map(|s| {
                moves
                    .iter()
                    .map(|&m| {
                        let mut row = vec![0.0; n];
                        row[(s + m) % n] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n)
            .map(|s| {
                (0..3)
                    .map(|k| (((s * 3 + k) * 7) % 11) as f64 / 10.0)
                    .collect()
            })
            .collect();
        Self::new(transitions, rewards, vec![false; n], 0, horizon).expect("valid example MDP")
    }

    /// Random stochastic MDP with `n` states and no terminals.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..n)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                        let s: f64 = w.iter().sum();
                        w.iter().map(|x| x / s).collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n)
            .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Self::new(transitions, rewards, vec![false; n], 0, 20).expect("valid random MDP")
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states()];
        v[s] = 1.0;
        v
    }

    /// Expected discounted reward over the chunk and the end-state
    /// distribution restricted to non-terminal states.
    pub fn chunk_model(&self, s: usize, c: usize, h: usize, gamma: f64) -> (f64, Vec<f64>) {
        let n = self.num_states();
        let mut d = vec![0.0; n];
        if self.terminal[s] {
            return (0.0, d);
        }
        d[s] = 1.0;
        let mut r = 0.0;
        for (j, k) in chunk_actions(c, h).into_iter().enumerate() {
            let mut next = vec![0.0; n];
            for (i, &p) in d.iter().enumerate() {
                if p == 0.0 || self.terminal[i] {
                    continue;
                }
                r += gamma.powi(j as i32) * p * self.rewards[i][k];
                for (nx, &q) in next.iter_mut().zip(&self.transitions[i][k]) {
                    *nx += p * q;
                }
            }
            d = next;
        }
        for (i, x) in d.iter_mut().enumerate() {
            if self.terminal[i] {
                *x = 0.0;
            }
        }
        (r, d)
    }

    /// Samples one chunk transition from state `s`.
    pub fn sample_chunk(
        &self,
        s: usize,
        c: usize,
        h: usize,
        rng: &mut impl Rng,
    ) -> (Vec<f64>, usize, bool) {
        let mut state = s;
        let mut rewards = vec![0.0; h];
        let mut done = self.terminal[s];
        for (j, k) in chunk_actions(c, h).into_iter().enumerate() {
            if done {
                break;
            }
            rewards[j] = self.rewards[state][k];
            state = sample_index(&self.transitions[state][k], rng);
            done = self.terminal[state];
        }
        (rewards, state, done)
    }

    /// One transition per (non-terminal state, chunk) pair, repeated `reps` times.
    pub fn chunk_dataset(&self, h: usize, reps: usize, rng: &mut impl Rng) -> Vec<TransitionChunk> {
        let mut out = Vec::new();
        for _ in 0..reps {
            for s in (0..self.num_states()).filter(|&s| !self.terminal[s]) {
                for c in 0..num_chunks(h) {
                    let (rewards, next, done) = self.sample_chunk(s, c, h, rng);
                    out.push(TransitionChunk {
                        obs: self.one_hot(s),
                        prefix: Vec::new(),
                        chunk: chunk_vector(c, h),
                        rewards,
                        next_obs: self.one_hot(next),
                        next_prefix: Vec::new(),
                        done,
                        source: Source::Demo,
                    });
                }
            }
        }
        out
    }
}

fn sample_index(p: &[f64], rng: &mut (impl Rng + ?Sized)) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// How [`dp_chunk_q`] reaches the fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpMethod {
    LinearSolve,
    ValueIteration,
}

/// Exact `Q[s][c]` of the chunk policy `pi[s][c]` under the `H`-step operator
/// `Q(s, c) = R(s, c) + gamma^H E[V(s')]`, `V(s) = sum_c pi(c | s) Q(s, c)`.
pub fn dp_chunk_q(
    mdp: &TabularChunkMDP,
    pi: &[Vec<f64>],
    gamma: f64,
    h: usize,
    method: DpMethod,
) -> Result<Vec<Vec<f64>>> {
    let n = mdp.num_states();
    let nc = num_chunks(h);
    if h == 0 || h > MAX_CHUNK_LEN {
        return Err(Error::Argument(format!(
            "chunk length must be in 1..={MAX_CHUNK_LEN}"
        )));
    }
    if pi.len() != n || pi.iter().any(|r| r.len() != nc) {
        return Err(Error::Shape(format!("policy table must be {n}x{nc}")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Argument("gamma must lie in [0, 1)".into()));
    }
    let models: Vec<Vec<(f64, Vec<f64>)>> = (0..n)
        .map(|s| (0..nc).map(|c| mdp.chunk_model(s, c, h, gamma)).collect())
        .collect();
    let gh = gamma.powi(h as i32);
    let q_from_v = |v: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|s| {
                (0..nc)
                    .map(|c| {
                        let (r, d) = &models[s][c];
                        r + gh * d.iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let v = match method {
        DpMethod::LinearSolve => {
            let mut a = vec![vec![0.0; n]; n];
            let mut b = vec![0.0; n];
            for s in 0..n {
                a[s][s] = 1.0;
                for c in 0..nc {
                    let (r, d) = &models[s][c];
                    b[s] += pi[s][c] * r;
                    for (j, p) in d.iter().enumerate() {
                        a[s][j] -= gh * pi[s][c] * p;
                    }
                }
            }
            solve(a, b)?
        }
        DpMethod::ValueIteration => {
            let mut v = vec![0.0; n];
            for _ in 0..1_000_000 {
                let q = q_from_v(&v);
                let nv: Vec<f64> = (0..n)
                    .map(|s| (0..nc).map(|c| pi[s][c] * q[s][c]).sum())
                    .collect();
                let diff = nv
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                v = nv;
                if diff < 1e-13 {
                    break;
                }
            }
            v
        }
    };
    Ok(q_from_v(&v))
}

/// Sup-norm of `T^pi Q - Q`.
pub fn bellman_residual(
    mdp: &TabularChunkMDP,
    pi: &[Vec<f64>],
    gamma: f64,
    h: usize,
    q: &[Vec<f64>],
) -> f64 {
    let n = mdp.num_states();
    let nc = num_chunks(h);
    let v: Vec<f64> = (0..n)
        .map(|s| (0..nc).map(|c| pi[s][c] * q[s][c]).sum())
        .collect();
    let gh = gamma.powi(h as i32);
    let mut worst: f64 = 0.0;
    for s in 0..n {
        for c in 0..nc {
            let (r, d) = mdp.chunk_model(s, c, h, gamma);
            let t = r + gh * d.iter().zip(&v).map(|(p, x)| p * x).sum::<f64>();
            worst = worst.max((t - q[s][c]).abs());
        }
    }
    worst
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[piv][col].abs() < 1e-14 {
            return Err(Error::Domain("singular policy-evaluation system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

impl ChunkEnv for TabularChunkMDP {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn obs_dim(&self) -> usize {
        self.num_states()
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_rule(&self) -> Option<RewardRule> {
        None
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.start;
        self.t = 0;
        self.total = 0.0;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let k = atomic_action(action);
        let reward = self.rewards[self.state][k];
        self.total += reward;
        self.state = sample_index(&self.transitions[self.state][k], &mut self.rng);
        self.t += 1;
        Step {
            reward,
            obs: self.one_hot(self.state),
            done: self.terminal[self.state] || self.t >= self.horizon,
        }
    }

    fn success(&self) -> bool {
        self.total > 0.0
    }

    fn boxed_clone(&self) -> Box<dyn ChunkEnv> {
        Box::new(self.clone())
    }
}

/// Chunk policy given as a table `pi[s][c]` over enumerated chunks.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    pub table: Vec<Vec<f64>>,
    pub chunk_len: usize,
}

impl TabularPolicy {
    /// Deterministic policy choosing chunk `choice[s]` in state `s`.
    pub fn deterministic(choice: &[usize], chunk_len: usize) -> Self {
        let nc = num_chunks(chunk_len);
        let table = choice
            .iter()
            .map(|&c| {
                let mut r = vec![0.0; nc];
                r[c] = 1.0;
                r
            })
            .collect();
        Self { table, chunk_len }
    }
}

impl<T: Scalar> ChunkSampler<T> for TabularPolicy {
    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn action_dim(&self) -> usize {
        2
    }

    /// Reads the state from the argmax of the one-hot observation; `std` is ignored.
    fn sample_chunks(
        &self,
        obs: &Tensor<T>,
        _prefix: &Tensor<T>,
        _std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let h = self.chunk_len;
        let mut out = Vec::with_capacity(obs.rows() * h * 2);
        let mut lp = Vec::with_capacity(obs.rows());
        for i in 0..obs.rows() {
            let row = obs.row(i);
            let s = (0..row.len())
                .max_by(|&a, &b| to_f64(row[a]).total_cmp(&to_f64(row[b])))
                .ok_or_else(|| Error::Shape("empty observation".into()))?;
            let probs = self
                .table
                .get(s)
                .ok_or_else(|| Error::Shape(format!("state {s} outside the policy table")))?;
            let c = sample_index(probs, rng);
            out.extend(chunk_vector(c, h).into_iter().map(lit::<T>));
            lp.push(lit(probs[c].ln()));
        }
        Ok((Tensor::from_vec(obs.rows(), h * 2, out)?, Some(lp)))
    }
}
