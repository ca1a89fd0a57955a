//! Layers shared by the encoder and the fusion modules.

use crate::autograd::{Graph, Mode, Var};
use crate::error::{DemoError, Result};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::{Axis, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine map `x W + b` with `W` stored as `[1, in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization for weight and bias.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: Group,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform([1, in_dim, out_dim], bound),
            group,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init.uniform([1, 1, out_dim], bound),
                group,
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn with_std(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        group: Group,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.normal([1, in_dim, out_dim], std),
            group,
        );
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let bv = g.param(b);
                g.add(y, bv)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([1, 1, dim], 1.0), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([1, 1, dim]), group),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.row_normalize(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain);
        g.add(y, bias)
    }
}

/// Batch norm over the rows of a `[1, B, C]` feature matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        BatchNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([1, 1, dim], 1.0), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([1, 1, dim]), group),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros([1, 1, dim]),
                group,
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full([1, 1, dim], 1.0),
                group,
            ),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let normalized = match g.mode() {
            Mode::Train => {
                let n = g.value(x).batch() * g.value(x).rows();
                if n < 2 {
                    return Err(DemoError::Input(
                        "training-mode batch norm needs at least two rows".into(),
                    ));
                }
                let (out, mean, var) = g.col_normalize(x, BN_EPS);
                let store = g.store();
                let rm = store.value(self.running_mean);
                let rv = store.value(self.running_var);
                let unbias = n as f64 / (n as f64 - 1.0);
                let new_mean: Vec<f64> = rm
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                    .collect();
                let new_var: Vec<f64> = rv
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                    .collect();
                g.record_buffer_update(self.running_mean, Tensor::row_vector(new_mean));
                g.record_buffer_update(self.running_var, Tensor::row_vector(new_var));
                out
            }
            Mode::Eval => {
                let store = g.store();
                let neg_mean = store.value(self.running_mean).map(|m| -m);
                let inv_std = store
                    .value(self.running_var)
                    .map(|v| 1.0 / (v + BN_EPS).sqrt());
                let shift = g.constant(neg_mean);
                let scale = g.constant(inv_std);
                let centered = g.add(x, shift);
                g.mul(centered, scale)
            }
        };
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(normalized, gain);
        Ok(g.add(y, bias))
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head probability tensors `[b, rq, rk]`.
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        group: Group,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DemoError::Config(format!(
                "{name}: embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true, group),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true, group),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true, group),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true, group),
            heads,
            dim,
        })
    }

    /// `query: [b, rq, C]`, `keys: [b, rk, C]` (keys double as values).
    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var) -> AttentionOutput {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, Axis::Col, h * hd, hd);
            let kh = g.slice(k, Axis::Col, h * hd, hd);
            let vh = g.slice(v, Axis::Col, h * hd, hd);
            let scores = g.bmm(qh, kh, true);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores);
            head_outputs.push(g.bmm(p, vh, false));
            probs.push(p);
        }
        let merged = if self.heads == 1 {
            head_outputs[0]
        } else {
            g.concat(&head_outputs, Axis::Col)
        };
        AttentionOutput {
            output: self.out.forward(g, merged),
            probs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_eval_with_default_stats_is_near_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, Group::Module);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let y = bn.forward(&mut g, x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        assert!(g.take_buffer_updates().is_empty());
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, Group::Module);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]));
        let y = bn.forward(&mut g, x).unwrap();
        let out = g.value(y).data().to_vec();
        assert!((out[0] + out[1]).abs() < 1e-12);
        let updates = g.take_buffer_updates();
        // mean 2 -> 0.9*0 + 0.1*2; unbiased var 2 -> 0.9*1 + 0.1*2
        assert!((updates[0].1.data()[0] - 0.2).abs() < 1e-12);
        assert!((updates[1].1.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, Group::Module);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(matches!(bn.forward(&mut g, x), Err(DemoError::Input(_))));
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2, Group::Module).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let q = g.constant(init.normal([3, 2, 8], 1.0));
        let k = g.constant(init.normal([3, 5, 8], 1.0));
        let out = mha.forward(&mut g, q, k);
        assert_eq!(g.shape(out.output), [3, 2, 8]);
        for p in out.probs {
            for row in g.value(p).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let r = MultiHeadAttention::new(&mut store, &mut init, "a", 6, 4, Group::Module);
        assert!(matches!(r, Err(DemoError::Config(_))));
    }
}
