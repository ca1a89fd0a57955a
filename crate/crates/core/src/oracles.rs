//! Brute-force reference implementations used to check the fast paths.
//!
//! Nothing here calls into the graph code it checks: weights are copied
//! out into plain nested vectors and every formula is re-evaluated with
//! scalar loops.

use std::fmt::Write as _;

use crate::atmoe::Atmoe;
use crate::autograd::{Graph, Mode};
use crate::data::ModalBatch;
use crate::error::Result;
use crate::model::Model;
use crate::nn::{BatchNorm, Linear, MultiHeadAttention};
use crate::parallel;
use crate::params::ParamStore;

/// Denominator floor for relative errors of near-zero quantities.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Dense layer copied out of the store: `w[i][o]`, optional bias.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Vec<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

impl Dense {
    pub fn from_store(store: &ParamStore, l: &Linear) -> Self {
        let t = store.value(l.weight);
        Dense {
            w: (0..t.rows()).map(|r| t.row(0, r).to_vec()).collect(),
            b: l.bias.map(|b| store.value(b).data().to_vec()),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let out = self.w[0].len();
        let mut y = vec![0.0; out];
        for o in 0..out {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * self.w[i][o];
            }
            y[o] = acc + self.b.as_ref().map_or(0.0, |b| b[o]);
        }
        y
    }
}

/// Eval-mode batch norm parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Norm {
    pub fn from_store(store: &ParamStore, bn: &BatchNorm) -> Self {
        let v = |id| store.value(id).data().to_vec();
        Norm {
            gain: v(bn.gain),
            bias: v(bn.bias),
            mean: v(bn.running_mean),
            var: v(bn.running_var),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| (x[i] - self.mean[i]) / (self.var[i] + 1e-5).sqrt() * self.gain[i] + self.bias[i])
            .collect()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn from_store(store: &ParamStore, a: &MultiHeadAttention) -> Self {
        AttentionWeights {
            q: Dense::from_store(store, &a.q),
            k: Dense::from_store(store, &a.k),
            v: Dense::from_store(store, &a.v),
            o: Dense::from_store(store, &a.out),
            heads: a.heads,
        }
    }
}

/// Multi-head attention of a single query over `keys` (keys double as
/// values).
pub fn oracle_attention(query: &[f64], keys: &[Vec<f64>], w: &AttentionWeights) -> Vec<f64> {
    let c = query.len();
    let hd = c / w.heads;
    let q = w.q.apply(query);
    let k: Vec<Vec<f64>> = keys.iter().map(|x| w.k.apply(x)).collect();
    let v: Vec<Vec<f64>> = keys.iter().map(|x| w.v.apply(x)).collect();
    let mut merged = vec![0.0; c];
    for h in 0..w.heads {
        let r = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| dot(&q[r.clone()], &kj[r.clone()]) / (hd as f64).sqrt())
            .collect();
        let p = softmax(&scores);
        for (j, vj) in v.iter().enumerate() {
            for i in r.clone() {
                merged[i] += p[j] * vj[i];
            }
        }
    }
    w.o.apply(&merged)
}

#[derive(Debug, Clone)]
pub struct ExpertWeights {
    pub layers: Vec<Dense>,
    pub bn: Norm,
}

#[derive(Debug, Clone)]
pub struct AtmoeWeights {
    pub reduce: Dense,
    pub reduce_bn: Norm,
    pub w_q: Dense,
    pub w_k: Dense,
    pub experts: Vec<ExpertWeights>,
    pub heads: usize,
}

impl AtmoeWeights {
    /// Copy the weights of an attention-gated mixture.
    pub fn from_store(store: &ParamStore, a: &Atmoe) -> Option<Self> {
        let (red, bn) = a.reduce.as_ref()?;
        Some(AtmoeWeights {
            reduce: Dense::from_store(store, red),
            reduce_bn: Norm::from_store(store, bn),
            w_q: Dense::from_store(store, a.w_q.as_ref()?),
            w_k: Dense::from_store(store, a.w_k.as_ref()?),
            experts: a
                .experts
                .iter()
                .map(|e| ExpertWeights {
                    layers: e.layers.iter().map(|l| Dense::from_store(store, l)).collect(),
                    bn: Norm::from_store(store, &e.bn),
                })
                .collect(),
            heads: a.heads,
        })
    }
}

/// Final feature and per-head gate rows of one instance.
pub fn oracle_atmoe(decoupled: &[Vec<f64>], w: &AtmoeWeights) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = decoupled[0].len();
    let n = decoupled.len();
    let joint: Vec<f64> = decoupled.iter().flatten().copied().collect();
    let red: Vec<f64> = w.reduce.apply(&joint).into_iter().map(gelu).collect();
    let dq = w.reduce_bn.apply(&red);
    let q = w.w_q.apply(&dq);
    let k: Vec<Vec<f64>> = decoupled.iter().map(|d| w.w_k.apply(d)).collect();
    let hd = c / w.heads;
    let gate: Vec<Vec<f64>> = (0..w.heads)
        .map(|h| {
            let r = h * hd..(h + 1) * hd;
            let logits: Vec<f64> = k
                .iter()
                .map(|ke| dot(&q[r.clone()], &ke[r.clone()]) / (hd as f64).sqrt())
                .collect();
            softmax(&logits)
        })
        .collect();
    let mut f = Vec::with_capacity(n * c);
    for (e, d) in decoupled.iter().enumerate() {
        let ew = &w.experts[e];
        let mut x: Vec<f64> = ew.layers[0].apply(d).into_iter().map(gelu).collect();
        for l in &ew.layers[1..] {
            x = l.apply(&x);
        }
        let y = ew.bn.apply(&x);
        for (i, v) in y.iter().enumerate() {
            f.push(v * gate[i / hd][e]);
        }
    }
    (f, gate)
}

/// mAP and full CMC by explicit sorting; `None` when no query has a valid
/// positive. Ties are broken by gallery index.
pub fn oracle_map_cmc(
    dist: &[Vec<f64>],
    q_ids: &[usize],
    q_cams: &[usize],
    g_ids: &[usize],
    g_cams: &[usize],
) -> Option<(f64, Vec<f64>)> {
    let ng = g_ids.len();
    let mut aps = Vec::new();
    let mut hits_at = vec![0usize; ng];
    for q in 0..dist.len() {
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for j in 0..ng {
            if g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q] {
                continue;
            }
            cand.push((dist[q][j], j));
        }
        // insertion sort on (distance, index)
        for i in 1..cand.len() {
            let mut p = i;
            while p > 0 && (cand[p - 1].0 > cand[p].0 || (cand[p - 1].0 == cand[p].0 && cand[p - 1].1 > cand[p].1)) {
                cand.swap(p - 1, p);
                p -= 1;
            }
        }
        let rel: Vec<bool> = cand.iter().map(|&(_, j)| g_ids[j] == q_ids[q]).collect();
        let npos = rel.iter().filter(|&&r| r).count();
        if npos == 0 {
            continue;
        }
        let mut sum = 0.0;
        for (r, &is_pos) in rel.iter().enumerate() {
            if is_pos {
                let hits_so_far = rel[..=r].iter().filter(|&&x| x).count();
                sum += hits_so_far as f64 / (r + 1) as f64;
            }
        }
        aps.push(sum / npos as f64);
        for (k, slot) in hits_at.iter_mut().enumerate() {
            if rel.iter().take(k + 1).any(|&x| x) {
                *slot += 1;
            }
        }
    }
    if aps.is_empty() {
        return None;
    }
    let nq = aps.len() as f64;
    let map = aps.iter().sum::<f64>() / nq;
    Some((map, hits_at.iter().map(|&h| h as f64 / nq).collect()))
}

/// Batch-hard triplet loss from the full pairwise distance matrix; `None`
/// when some anchor lacks a positive or a negative.
pub fn oracle_triplet(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> Option<f64> {
    let b = emb.len();
    let mut d = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0;
            for k in 0..emb[i].len() {
                s += (emb[i][k] - emb[j][k]) * (emb[i][k] - emb[j][k]);
            }
            d[i][j] = s.sqrt();
        }
    }
    let mut total = 0.0;
    for i in 0..b {
        let pos = (0..b).filter(|&j| j != i && labels[j] == labels[i]).map(|j| d[i][j]).reduce(f64::max)?;
        let neg = (0..b).filter(|&j| labels[j] != labels[i]).map(|j| d[i][j]).reduce(f64::min)?;
        total += (pos - neg + margin).max(0.0);
    }
    Some(total / b as f64)
}

/// Label-smoothed cross-entropy from its closed form
/// `-(1-eps) l_y - eps/K sum_i l_i`, `l = log softmax`.
pub fn oracle_smoothed_ce(logits: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let k = row.len() as f64;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let mean_lp = row.iter().map(|x| x - lse).sum::<f64>() / k;
        total += -(1.0 - eps) * (row[y] - lse) - eps * mean_lp;
    }
    total / logits.len() as f64
}

/// Central differences of `f` at `x`; entries where either side is
/// non-finite are `None`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step: f64) -> Vec<Option<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    parallel::map_range(x.len(), |i| {
        let mut xp = x.to_vec();
        xp[i] += step;
        let up = f(&xp);
        xp[i] = x[i] - step;
        let down = f(&xp);
        (up.is_finite() && down.is_finite()).then(|| (up - down) / (2.0 * step))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: Option<f64>,
}

impl GradEntry {
    pub fn rel_err(&self) -> f64 {
        self.numeric.map_or(f64::INFINITY, |n| rel_err(self.analytic, n))
    }
}

/// Analytic vs central-difference gradients of the eval-mode composite loss
/// for every trainable scalar of `model`.
pub fn model_gradient_check(model: &Model, batch: &ModalBatch, labels: &[usize], step: f64) -> Result<Vec<GradEntry>> {
    let loss_of = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Eval);
        let out = model.net.forward(&mut g, batch, false)?;
        let l = model.net.loss(&mut g, &out, labels, &model.config.loss)?;
        Ok(g.value(l.total).data()[0])
    };
    let grads = {
        let mut g = Graph::new(&model.store, Mode::Eval);
        let out = model.net.forward(&mut g, batch, false)?;
        let l = model.net.loss(&mut g, &out, labels, &model.config.loss)?;
        g.backward(l.total)
    };
    let params: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let per_param: Vec<Result<Vec<GradEntry>>> = parallel::map_slice(&params, |&id| {
        let mut store = model.store.clone();
        let name = store.get(id).name.clone();
        let n = store.value(id).len();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let up = loss_of(&store)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let down = loss_of(&store)?;
            store.value_mut(id).data_mut()[i] = orig;
            out.push(GradEntry {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric: (up.is_finite() && down.is_finite()).then(|| (up - down) / (2.0 * step)),
            });
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for p in per_param {
        all.extend(p?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub family: String,
    pub case: usize,
    pub reference: f64,
    pub implementation: f64,
    pub tolerance: f64,
}

impl OracleRow {
    pub fn abs_err(&self) -> f64 {
        (self.reference - self.implementation).abs()
    }

    pub fn rel_err(&self) -> f64 {
        rel_err(self.reference, self.implementation)
    }

    pub fn pass(&self) -> bool {
        self.abs_err() <= self.tolerance
    }
}

/// Comparison log of one or more oracle families.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn record(&mut self, family: &str, case: usize, reference: f64, implementation: f64, tolerance: f64) {
        self.rows.push(OracleRow {
            family: family.to_string(),
            case,
            reference,
            implementation,
            tolerance,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(OracleRow::pass)
    }

    pub fn failures(&self) -> Vec<&OracleRow> {
        self.rows.iter().filter(|r| !r.pass()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("family\tcase\treference\timplementation\tabs_err\trel_err\ttolerance\tpass\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.17e}\t{:.17e}\t{:.3e}\t{:.3e}\t{:.1e}\t{}",
                r.family,
                r.case,
                r.reference,
                r.implementation,
                r.abs_err(),
                r.rel_err(),
                r.tolerance,
                r.pass()
            );
        }
        s
    }
}
