//! Label-smoothed cross-entropy plus batch-hard triplet, applied to the
//! three modality streams and the final feature.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var, DIST_FLOOR};
use crate::error::{DemoError, Result};
use crate::nn::Linear;
use crate::params::{Group, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub smoothing: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 0.1,
            margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(DemoError::Config(format!("smoothing must lie in [0, 1), got {}", self.smoothing)));
        }
        if !(self.margin >= 0.0) {
            return Err(DemoError::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

fn smoothed_targets(b: usize, k: usize, labels: &[usize], eps: f64) -> Result<Tensor> {
    if labels.len() != b {
        return Err(DemoError::Input(format!("{} labels for {b} rows", labels.len())));
    }
    let mut t = Tensor::full([1, b, k], eps / k as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(DemoError::Input(format!("label {y} out of range for {k} classes")));
        }
        t.set(0, i, y, 1.0 - eps + eps / k as f64);
    }
    Ok(t)
}

/// Mean smoothed cross-entropy of `logits: [1, B, K]`.
pub fn ce_var(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let [_, b, k] = g.shape(logits);
    let targets = smoothed_targets(b, k, labels, eps)?;
    let t = g.constant(targets);
    let lp = g.log_softmax(logits);
    let prod = g.mul(lp, t);
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0 / b as f64))
}

pub fn ce_label_smooth(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let l = g.constant(logits.clone());
    let out = ce_var(&mut g, l, labels, eps)?;
    Ok(g.value(out).data()[0])
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2.max(DIST_FLOOR).sqrt()
}

/// Hardest positive / negative per anchor of rows of a `[1, B, D]` matrix.
pub fn mine_batch_hard(emb: &Tensor, labels: &[usize]) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let b = emb.rows();
    if labels.len() != b {
        return Err(DemoError::Input(format!("{} labels for {b} embeddings", labels.len())));
    }
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for i in 0..b {
        let mut hp: Option<(usize, f64)> = None;
        let mut hn: Option<(usize, f64)> = None;
        for j in 0..b {
            if i == j {
                continue;
            }
            let d = dist(emb.row(0, i), emb.row(0, j));
            if labels[i] == labels[j] {
                if hp.is_none_or(|(_, best)| d > best) {
                    hp = Some((j, d));
                }
            } else if hn.is_none_or(|(_, best)| d < best) {
                hn = Some((j, d));
            }
        }
        match (hp, hn) {
            (Some((p, _)), Some((n, _))) => {
                pos.push((i, p));
                neg.push((i, n));
            }
            (None, _) => {
                return Err(DemoError::Sampling(format!(
                    "identity {} has a single instance in the batch",
                    labels[i]
                )))
            }
            (_, None) => return Err(DemoError::Sampling("batch holds a single identity".into())),
        }
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss on `emb: [1, B, D]`.
pub fn triplet_var(g: &mut Graph, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (pos, neg) = mine_batch_hard(g.value(emb), labels)?;
    let dp = g.pair_dist(emb, pos);
    let dn = g.pair_dist(emb, neg);
    let diff = g.sub(dp, dn);
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    Ok(g.mean_all(hinge))
}

pub fn triplet_batch_hard(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<f64> {
    let d = emb.first().map_or(0, |e| e.len());
    if emb.iter().any(|e| e.len() != d) {
        return Err(DemoError::Input("embeddings differ in width".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let e = g.constant(Tensor::from_vec([1, emb.len(), d], emb.concat()));
    let out = triplet_var(&mut g, e, labels, margin)?;
    Ok(g.value(out).data()[0])
}

/// Stream names in breakdown order.
pub const STREAMS: [&str; 4] = ["R", "N", "T", "final"];

/// One classifier per supervised stream.
#[derive(Debug, Clone)]
pub struct ClassifierHeads {
    pub heads: Vec<Linear>,
    pub num_classes: usize,
}

impl ClassifierHeads {
    /// `dims`: feature width of the R, N, T and final streams.
    pub fn new(store: &mut ParamStore, init: &mut Init, dims: [usize; 4], num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(DemoError::Config("num_classes must be positive".into()));
        }
        let heads = dims
            .iter()
            .zip(STREAMS)
            .map(|(&d, s)| Linear::with_std(store, init, &format!("head.{s}"), d, num_classes, 0.001, Group::Module))
            .collect();
        Ok(ClassifierHeads { heads, num_classes })
    }
}

/// Scalar loss terms of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: [f64; 4],
    pub triplet: [f64; 4],
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms_sum(&self) -> f64 {
        self.ce.iter().chain(&self.triplet).sum()
    }
}

/// Loss graph plus its per-term vars.
pub struct CompositeLoss {
    pub total: Var,
    pub ce: [Var; 4],
    pub triplet: [Var; 4],
}

impl CompositeLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            ce: self.ce.map(v),
            triplet: self.triplet.map(v),
            total: v(self.total),
        }
    }
}

/// `streams`: `[1, B, d]` vars for f_R, f_N, f_T and the final feature.
pub fn composite_var(
    g: &mut Graph,
    streams: [Var; 4],
    labels: &[usize],
    heads: &ClassifierHeads,
    cfg: &LossConfig,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    let mut ce = Vec::with_capacity(4);
    let mut tri = Vec::with_capacity(4);
    for (s, head) in streams.iter().zip(&heads.heads) {
        let logits = head.forward(g, *s);
        ce.push(ce_var(g, logits, labels, cfg.smoothing)?);
        tri.push(triplet_var(g, *s, labels, cfg.margin)?);
    }
    let mut total = ce[0];
    for &t in ce[1..].iter().chain(&tri) {
        total = g.add(total, t);
    }
    Ok(CompositeLoss {
        total,
        ce: [ce[0], ce[1], ce[2], ce[3]],
        triplet: [tri[0], tri[1], tri[2], tri[3]],
    })
}

/// Value-level composite loss of precomputed streams (`[1, B, d]` each).
pub fn composite_loss(
    store: &ParamStore,
    streams: [&Tensor; 4],
    labels: &[usize],
    heads: &ClassifierHeads,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(store, Mode::Eval);
    let vars = streams.map(|t| g.constant(t.clone()));
    let loss = composite_var(&mut g, vars, labels, heads, cfg)?;
    Ok(loss.breakdown(&g))
}
