//! Small neural-network building blocks on top of [`Graph`].

use rand::{Rng, RngCore};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-6;

/// Training/evaluation switch threaded through every forward pass.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut dyn RngCore,
    },
}

impl<'r> Mode<'r> {
    pub fn train(dropout: f64, rng: &'r mut dyn RngCore) -> Self {
        Mode::Train { dropout, rng }
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let p = *dropout;
                let keep: T = lit(1.0 / (1.0 - p));
                let (r, c) = g.shape(x);
                let mask = Tensor::from_fn(r, c, |_, _| {
                    if rng.gen::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }
}

/// Binds parameters of one store into a graph, either trainable or frozen.
#[derive(Clone, Copy)]
pub struct Bind<'s, T> {
    pub store: &'s ParamStore<T>,
    pub trainable: bool,
}

impl<'s, T: Scalar> Bind<'s, T> {
    pub fn trainable(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    #[inline]
    pub fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self { w, b }
    }

    /// Zero-initialised layer: its output is identically zero until trained.
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add_zeros(format!("{name}.weight"), fan_in, fan_out);
        let b = Some(store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Var {
        let w = p.p(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = p.p(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

/// RMS normalisation with a learned per-feature gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    gain: ParamId,
}

impl RmsNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), 1, width),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Var {
        let n = g.rms_norm(x, lit(NORM_EPS));
        let gain = p.p(g, self.gain);
        g.mul_row(n, gain)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, false, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, false, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, false, rng),
            heads,
        }
    }

    /// `queries` is `[groups * lq, d]`, `memory` is `[groups * lk, d]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        queries: Var,
        memory: Var,
        groups: usize,
    ) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, memory);
        let v = self.v.forward(g, p, memory);
        let a = g.attention(q, k, v, groups, self.heads);
        self.o.forward(g, p, a)
    }
}

/// Gated feed-forward block `W2 (silu(W1 x) * W3 x)`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl SwiGlu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            gate: Linear::new(store, &format!("{name}.gate"), width, hidden, false, rng),
            up: Linear::new(store, &format!("{name}.up"), width, hidden, false, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, false, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Var {
        let a = self.gate.forward(g, p, x);
        let a = g.silu(a);
        let b = self.up.forward(g, p, x);
        let h = g.mul(a, b);
        let h = mode.dropout(g, h);
        self.down.forward(g, p, h)
    }
}

/// GELU feed-forward block `W2 gelu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct GeluMlp {
    fc1: Linear,
    fc2: Linear,
}

impl GeluMlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Bind<'_, T>,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        let h = mode.dropout(g, h);
        self.fc2.forward(g, p, h)
    }
}

/// Row indices of `positions` inside each of `batch` stacked sequences of length `len`.
pub fn batch_rows(batch: usize, len: usize, positions: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * positions.len());
    for b in 0..batch {
        idx.extend(positions.iter().map(|&p| b * len + p));
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_is_identity_in_eval_and_rescales_in_train() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(200, 50, 1.0));
        let mut eval = Mode::Eval;
        assert_eq!(eval.dropout(&mut g, x), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tr = Mode::train(0.5, &mut rng);
        let y = tr.dropout(&mut g, x);
        let v = g.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
        let mean = v.sum() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn batch_rows_layout() {
        assert_eq!(batch_rows(2, 4, &[1, 3]), vec![1, 3, 5, 7]);
    }
}
