//! Attention-triggered mixture of experts.
//!
//! A reduced joint query attends (per head) over the seven decoupled
//! features; the resulting `H x 7` gate scales head-sized chunks of each
//! expert's output before everything is concatenated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{DemoError, Result};
use crate::hdm::{DecoupledSet, Slot, N_DECOUPLED};
use crate::nn::{BatchNorm, Linear};
use crate::params::{Group, Init, ParamStore};
use crate::tensor::{Axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertStructure {
    /// Linear, GELU, batch norm.
    Simple,
    /// `C -> C/4 -> C` with GELU between and batch norm after.
    Bottleneck,
    /// `C -> 4C -> C` with GELU between and batch norm after.
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    /// Multi-head attention gate.
    Attention,
    /// Linear + softmax scalar weights, weighted experts summed.
    SimpleAdd,
    /// Linear + softmax scalar weights, weighted experts concatenated.
    SimpleConcat,
}

/// Row-stochastic `heads x n_d` gate of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor {
    pub heads: usize,
    pub n_d: usize,
    /// Row-major weights.
    pub weights: Vec<f64>,
}

impl GateTensor {
    pub fn row(&self, h: usize) -> &[f64] {
        &self.weights[h * self.n_d..(h + 1) * self.n_d]
    }

    /// Per-expert weights averaged over heads.
    pub fn head_average(&self) -> Vec<f64> {
        (0..self.n_d)
            .map(|e| (0..self.heads).map(|h| self.row(h)[e]).sum::<f64>() / self.heads as f64)
            .collect()
    }
}

/// Softmax of each row of a `heads x n_d` logit matrix.
pub fn gate_from_logits(heads: usize, n_d: usize, logits: &[f64]) -> Result<GateTensor> {
    if logits.len() != heads * n_d || n_d == 0 {
        return Err(DemoError::Input(format!(
            "{} logits do not form a {heads}x{n_d} gate",
            logits.len()
        )));
    }
    let mut weights = logits.to_vec();
    for row in weights.chunks_mut(n_d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(GateTensor { heads, n_d, weights })
}

/// Scale head-sized chunks of each expert output by its gate weight and
/// concatenate everything in slot order.
pub fn weighted_mix(experts: &[Vec<f64>], gate: &GateTensor) -> Result<Vec<f64>> {
    if experts.len() != gate.n_d || gate.weights.len() != gate.heads * gate.n_d {
        return Err(DemoError::Input(format!(
            "{} experts against a {}x{} gate",
            experts.len(),
            gate.heads,
            gate.n_d
        )));
    }
    let c = experts.first().map_or(0, |e| e.len());
    if gate.heads == 0 || c % gate.heads != 0 || experts.iter().any(|e| e.len() != c) {
        return Err(DemoError::Input(format!(
            "expert width {c} cannot be split into {} chunks",
            gate.heads
        )));
    }
    let w = c / gate.heads;
    let mut f = Vec::with_capacity(c * experts.len());
    for (e, x) in experts.iter().enumerate() {
        for (i, v) in x.iter().enumerate() {
            f.push(v * gate.row(i / w)[e]);
        }
    }
    Ok(f)
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub layers: Vec<Linear>,
    pub bn: BatchNorm,
}

impl Expert {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, structure: ExpertStructure) -> Self {
        let g = Group::Module;
        let hidden = match structure {
            ExpertStructure::Simple => None,
            ExpertStructure::Bottleneck => Some((dim / 4).max(1)),
            ExpertStructure::Ffn => Some(4 * dim),
        };
        let layers = match hidden {
            None => vec![Linear::new(store, init, &format!("{name}.fc0"), dim, dim, true, g)],
            Some(h) => vec![
                Linear::new(store, init, &format!("{name}.fc0"), dim, h, true, g),
                Linear::new(store, init, &format!("{name}.fc1"), h, dim, true, g),
            ],
        };
        Expert {
            layers,
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim, g),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.layers[0].forward(g, x);
        h = g.gelu(h);
        if let Some(l) = self.layers.get(1) {
            h = l.forward(g, h);
        }
        self.bn.forward(g, h)
    }
}

/// Graph outputs of [`Atmoe::forward`].
#[derive(Debug, Clone)]
pub struct AtmoeOutput {
    /// `[1, B, out_dim]`.
    pub f: Var,
    /// Attention gating: per head `[B, 1, n_d]`.
    pub gate: Option<Vec<Var>>,
    /// Simple gating: `[1, B, n_d]`.
    pub simple_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Atmoe {
    pub gating: GatingMode,
    pub structure: ExpertStructure,
    pub heads: usize,
    pub dim: usize,
    pub reduce: Option<(Linear, BatchNorm)>,
    pub w_q: Option<Linear>,
    pub w_k: Option<Linear>,
    pub simple: Option<Linear>,
    pub experts: Vec<Expert>,
}

impl Atmoe {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        dim: usize,
        heads: usize,
        gating: GatingMode,
        structure: ExpertStructure,
    ) -> Result<Self> {
        let g = Group::Module;
        let (mut reduce, mut w_q, mut w_k, mut simple) = (None, None, None, None);
        match gating {
            GatingMode::Attention => {
                if heads == 0 || dim % heads != 0 {
                    return Err(DemoError::Config(format!(
                        "gate: feature dim {dim} not divisible by {heads} heads"
                    )));
                }
                reduce = Some((
                    Linear::new(store, init, "atmoe.reduce", N_DECOUPLED * dim, dim, true, g),
                    BatchNorm::new(store, "atmoe.reduce_bn", dim, g),
                ));
                w_q = Some(Linear::new(store, init, "atmoe.w_q", dim, dim, false, g));
                w_k = Some(Linear::new(store, init, "atmoe.w_k", dim, dim, false, g));
            }
            GatingMode::SimpleAdd | GatingMode::SimpleConcat => {
                simple = Some(Linear::new(store, init, "atmoe.simple_gate", N_DECOUPLED * dim, N_DECOUPLED, true, g));
            }
        }
        let experts = Slot::ALL
            .iter()
            .map(|s| Expert::new(store, init, &format!("atmoe.expert.{}", s.name()), dim, structure))
            .collect();
        Ok(Atmoe {
            gating,
            structure,
            heads: if gating == GatingMode::Attention { heads } else { 1 },
            dim,
            reduce,
            w_q,
            w_k,
            simple,
            experts,
        })
    }

    pub fn out_dim(&self) -> usize {
        match self.gating {
            GatingMode::SimpleAdd => self.dim,
            _ => N_DECOUPLED * self.dim,
        }
    }

    /// `D_q = BN(GELU(W_red [D_R, ..., D_RNT]))`, `[1, B, C]`.
    pub fn reduce_var(&self, g: &mut Graph, decoupled: &[Var]) -> Result<Var> {
        let (lin, bn) = self
            .reduce
            .as_ref()
            .ok_or_else(|| DemoError::State("simple gating has no reduction layer".into()))?;
        let cat = g.concat(decoupled, Axis::Col);
        let h = lin.forward(g, cat);
        let h = g.gelu(h);
        bn.forward(g, h)
    }

    /// Per-head gates `[B, 1, n_d]` from `D_q: [1, B, C]`.
    pub fn gate_var(&self, g: &mut Graph, dq: Var, decoupled: &[Var]) -> Vec<Var> {
        let (w_q, w_k) = (self.w_q.as_ref().expect("attention gate"), self.w_k.as_ref().expect("attention gate"));
        let [_, b, c] = g.shape(dq);
        let q = w_q.forward(g, dq);
        let q = g.reshape(q, [b, 1, c]);
        let rows: Vec<Var> = decoupled.iter().map(|&d| g.reshape(d, [b, 1, c])).collect();
        let dk = g.concat(&rows, Axis::Row);
        let k = w_k.forward(g, dk);
        let hd = c / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = g.slice(q, Axis::Col, h * hd, hd);
                let kh = g.slice(k, Axis::Col, h * hd, hd);
                let s = g.bmm(qh, kh, true);
                let s = g.scale(s, scale);
                g.softmax(s)
            })
            .collect()
    }

    /// `decoupled`: seven `[1, B, C]` vars in slot order.
    pub fn forward(&self, g: &mut Graph, decoupled: &[Var]) -> Result<AtmoeOutput> {
        if decoupled.len() != N_DECOUPLED {
            return Err(DemoError::Input(format!(
                "expert mixture needs {N_DECOUPLED} decoupled features, got {}",
                decoupled.len()
            )));
        }
        let experts: Vec<Var> = self
            .experts
            .iter()
            .zip(decoupled)
            .map(|(e, &d)| e.forward(g, d))
            .collect::<Result<_>>()?;
        let [_, b, c] = g.shape(decoupled[0]);
        match self.gating {
            GatingMode::Attention => {
                let dq = self.reduce_var(g, decoupled)?;
                let gate = self.gate_var(g, dq, decoupled);
                let hd = c / self.heads;
                let mut parts = Vec::with_capacity(N_DECOUPLED * self.heads);
                for (e, &x) in experts.iter().enumerate() {
                    for (h, &alpha) in gate.iter().enumerate() {
                        let w = g.slice(alpha, Axis::Col, e, 1);
                        let w = g.reshape(w, [1, b, 1]);
                        let chunk = g.slice(x, Axis::Col, h * hd, hd);
                        parts.push(g.mul(chunk, w));
                    }
                }
                Ok(AtmoeOutput {
                    f: g.concat(&parts, Axis::Col),
                    gate: Some(gate),
                    simple_weights: None,
                })
            }
            GatingMode::SimpleAdd | GatingMode::SimpleConcat => {
                let cat = g.concat(decoupled, Axis::Col);
                let logits = self.simple.as_ref().expect("simple gate").forward(g, cat);
                let w = g.softmax(logits);
                let weighted: Vec<Var> = experts
                    .iter()
                    .enumerate()
                    .map(|(e, &x)| {
                        let we = g.slice(w, Axis::Col, e, 1);
                        g.mul(x, we)
                    })
                    .collect();
                let f = if self.gating == GatingMode::SimpleAdd {
                    weighted[1..].iter().fold(weighted[0], |acc, &x| g.add(acc, x))
                } else {
                    g.concat(&weighted, Axis::Col)
                };
                Ok(AtmoeOutput {
                    f,
                    gate: None,
                    simple_weights: Some(w),
                })
            }
        }
    }

    /// Per-instance gates from a forward pass (attention gating only).
    pub fn read_gates(&self, g: &Graph, out: &AtmoeOutput) -> Option<Vec<GateTensor>> {
        let gate = out.gate.as_ref()?;
        let b = g.shape(gate[0])[0];
        Some(
            (0..b)
                .map(|i| GateTensor {
                    heads: gate.len(),
                    n_d: N_DECOUPLED,
                    weights: gate.iter().flat_map(|&h| g.value(h).row(i, 0).to_vec()).collect(),
                })
                .collect(),
        )
    }

    fn decoupled_consts(&self, g: &mut Graph, d: &DecoupledSet) -> Result<Vec<Var>> {
        if d.features.len() != N_DECOUPLED {
            return Err(DemoError::Input(format!(
                "expected {N_DECOUPLED} decoupled features, got {}",
                d.features.len()
            )));
        }
        if d.features.iter().any(|f| f.len() != self.dim) {
            return Err(DemoError::Input(format!("decoupled features must have width {}", self.dim)));
        }
        Ok(d.features.iter().map(|f| g.constant(Tensor::row_vector(f.clone()))).collect())
    }

    /// Eval-mode reduced query of one instance.
    pub fn reduce_query(&self, store: &ParamStore, d: &DecoupledSet) -> Result<Vec<f64>> {
        let mut g = Graph::new(store, Mode::Eval);
        let vars = self.decoupled_consts(&mut g, d)?;
        let dq = self.reduce_var(&mut g, &vars)?;
        Ok(g.value(dq).data().to_vec())
    }

    /// Gate of one instance from a given reduced query.
    pub fn gate(&self, store: &ParamStore, dq: &[f64], d: &DecoupledSet) -> Result<GateTensor> {
        if self.gating != GatingMode::Attention {
            return Err(DemoError::State("attention gate requested on simple gating".into()));
        }
        if dq.len() != self.dim {
            return Err(DemoError::Input(format!("query must have width {}", self.dim)));
        }
        let mut g = Graph::new(store, Mode::Eval);
        let vars = self.decoupled_consts(&mut g, d)?;
        let q = g.constant(Tensor::row_vector(dq.to_vec()));
        let gate = self.gate_var(&mut g, q, &vars);
        Ok(GateTensor {
            heads: self.heads,
            n_d: N_DECOUPLED,
            weights: gate.iter().flat_map(|&h| g.value(h).data().to_vec()).collect(),
        })
    }

    /// Eval-mode output of expert `slot` on one vector.
    pub fn expert_forward(&self, store: &ParamStore, x: &[f64], slot: usize) -> Result<Vec<f64>> {
        let expert = self
            .experts
            .get(slot)
            .ok_or_else(|| DemoError::Input(format!("expert slot {slot} out of range")))?;
        if x.len() != self.dim {
            return Err(DemoError::Input(format!("expert input must have width {}", self.dim)));
        }
        let mut g = Graph::new(store, Mode::Eval);
        let v = g.constant(Tensor::row_vector(x.to_vec()));
        let out = expert.forward(&mut g, v)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Eval-mode final feature of one instance, plus its gate.
    pub fn forward_single(&self, store: &ParamStore, d: &DecoupledSet) -> Result<(Vec<f64>, Option<GateTensor>)> {
        let mut g = Graph::new(store, Mode::Eval);
        let vars = self.decoupled_consts(&mut g, d)?;
        let out = self.forward(&mut g, &vars)?;
        let gate = self.read_gates(&g, &out).map(|mut v| v.remove(0));
        Ok((g.value(out.f).data().to_vec(), gate))
    }

    /// Simple-gating output of one instance.
    pub fn simple_gate(&self, store: &ParamStore, d: &DecoupledSet) -> Result<Vec<f64>> {
        if self.gating == GatingMode::Attention {
            return Err(DemoError::State("simple gate requested on attention gating".into()));
        }
        Ok(self.forward_single(store, d)?.0)
    }
}

pub const GATE_TABLE_HEADER: &str = "instance\tidentity\thead\tR\tN\tT\tRN\tNT\tTR\tRNT";

/// One instance's gate for export.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub instance: usize,
    pub identity: usize,
    pub gate: GateTensor,
}

/// Tab-separated gate table: per instance one `mean` row, then one row per
/// head.
pub fn write_gate_table(records: &[GateRecord]) -> String {
    let mut s = String::from(GATE_TABLE_HEADER);
    s.push('\n');
    let fmt_row = |s: &mut String, r: &GateRecord, head: &str, vals: &[f64]| {
        let _ = write!(s, "{}\t{}\t{head}", r.instance, r.identity);
        for v in vals {
            let _ = write!(s, "\t{v:.9}");
        }
        s.push('\n');
    };
    for r in records {
        fmt_row(&mut s, r, "mean", &r.gate.head_average());
        for h in 0..r.gate.heads {
            fmt_row(&mut s, r, &h.to_string(), r.gate.row(h));
        }
    }
    s
}

/// Parse a gate table back; only per-head rows are used to rebuild gates.
pub fn read_gate_table(text: &str) -> Result<Vec<GateRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == GATE_TABLE_HEADER => {}
        _ => {
            return Err(DemoError::Parse {
                line: 1,
                message: "missing gate table header".into(),
            })
        }
    }
    let mut records: Vec<GateRecord> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |m: &str| DemoError::Parse {
            line: line_no,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 + N_DECOUPLED {
            return Err(perr(&format!("expected {} columns, got {}", 3 + N_DECOUPLED, cols.len())));
        }
        let instance: usize = cols[0].parse().map_err(|_| perr("bad instance"))?;
        let identity: usize = cols[1].parse().map_err(|_| perr("bad identity"))?;
        let vals: Vec<f64> = cols[3..]
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| perr("bad weight"))?;
        if cols[2] == "mean" {
            records.push(GateRecord {
                instance,
                identity,
                gate: GateTensor {
                    heads: 0,
                    n_d: N_DECOUPLED,
                    weights: Vec::new(),
                },
            });
            continue;
        }
        let head: usize = cols[2].parse().map_err(|_| perr("bad head"))?;
        let rec = records
            .last_mut()
            .filter(|r| r.instance == instance)
            .ok_or_else(|| perr("head row without a preceding mean row"))?;
        if head != rec.gate.heads {
            return Err(perr("head rows out of order"));
        }
        rec.gate.heads += 1;
        rec.gate.weights.extend(vals);
    }
    if let Some(r) = records.iter().find(|r| r.gate.heads == 0) {
        return Err(DemoError::Parse {
            line: 0,
            message: format!("instance {} has no head rows", r.instance),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const C: usize = 8;

    fn build(gating: GatingMode, structure: ExpertStructure, heads: usize) -> (ParamStore, Atmoe) {
        let mut store = ParamStore::new();
        let a = Atmoe::new(&mut store, &mut Init::new(1), C, heads, gating, structure).unwrap();
        (store, a)
    }

    fn random_set(seed: u64) -> DecoupledSet {
        let mut init = Init::new(seed);
        DecoupledSet::new((0..7).map(|_| init.normal([1, 1, C], 1.0).into_vec()).collect()).unwrap()
    }

    fn zero_biases(store: &mut ParamStore) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".bias"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let s = store.value(id).shape();
            *store.value_mut(id) = Tensor::zeros(s);
        }
    }

    #[test]
    fn zero_input_reduces_to_zero() {
        let (mut store, a) = build(GatingMode::Attention, ExpertStructure::Simple, 2);
        zero_biases(&mut store);
        let zeros = DecoupledSet::new(vec![vec![0.0; C]; 7]).unwrap();
        assert_eq!(a.reduce_query(&store, &zeros).unwrap(), vec![0.0; C]);
        assert_eq!(a.expert_forward(&store, &[0.0; C], 3).unwrap(), vec![0.0; C]);
    }

    #[test]
    fn wrong_arity_and_slot_rejected() {
        let (store, a) = build(GatingMode::Attention, ExpertStructure::Simple, 2);
        let six = DecoupledSet {
            features: vec![vec![0.0; C]; 6],
        };
        assert!(matches!(a.reduce_query(&store, &six), Err(DemoError::Input(_))));
        assert!(matches!(a.expert_forward(&store, &[0.0; C], 7), Err(DemoError::Input(_))));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let r = Atmoe::new(&mut store, &mut Init::new(0), 6, 4, GatingMode::Attention, ExpertStructure::Simple);
        assert!(matches!(r, Err(DemoError::Config(_))));
    }

    #[test]
    fn equal_logits_give_uniform_gate() {
        let (mut store, a) = build(GatingMode::Attention, ExpertStructure::Simple, 2);
        *store.value_mut(a.w_k.as_ref().unwrap().weight) = Tensor::zeros([1, C, C]);
        let d = random_set(4);
        let dq = a.reduce_query(&store, &d).unwrap();
        let gate = a.gate(&store, &dq, &d).unwrap();
        assert_eq!((gate.heads, gate.n_d), (2, 7));
        for w in &gate.weights {
            assert!((w - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_uses_full_dot_product() {
        let (store, a) = build(GatingMode::Attention, ExpertStructure::Simple, 1);
        let d = random_set(5);
        let dq = a.reduce_query(&store, &d).unwrap();
        let gate = a.gate(&store, &dq, &d).unwrap();
        assert_eq!(gate.weights.len(), 7);
        let q = Tensor::row_vector(dq).matmul_shared(store.value(a.w_q.as_ref().unwrap().weight));
        let logits: Vec<f64> = d
            .features
            .iter()
            .map(|f| {
                let k = Tensor::row_vector(f.clone()).matmul_shared(store.value(a.w_k.as_ref().unwrap().weight));
                q.data().iter().zip(k.data()).map(|(x, y)| x * y).sum::<f64>() / (C as f64).sqrt()
            })
            .collect();
        let expect = gate_from_logits(1, 7, &logits).unwrap();
        for (x, y) in gate.weights.iter().zip(&expect.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn experts_have_isolated_parameters() {
        let (mut store, a) = build(GatingMode::Attention, ExpertStructure::Simple, 2);
        let x = random_set(6).features[0].clone();
        let before = a.expert_forward(&store, &x, 1).unwrap();
        let w0 = a.experts[0].layers[0].weight;
        *store.value_mut(w0) = store.value(w0).map(|v| v + 0.5);
        assert_eq!(a.expert_forward(&store, &x, 1).unwrap(), before);
        assert_ne!(a.expert_forward(&store, &x, 0).unwrap(), a.expert_forward(&store, &x, 1).unwrap());
    }

    #[test]
    fn identity_weighting_is_plain_concat() {
        let experts: Vec<Vec<f64>> = random_set(7).features;
        let ones = GateTensor {
            heads: 4,
            n_d: 7,
            weights: vec![1.0; 28],
        };
        let f = weighted_mix(&experts, &ones).unwrap();
        assert_eq!(f, experts.concat());
    }

    #[test]
    fn single_chunk_scales_whole_expert() {
        let experts = random_set(8).features;
        let w: Vec<f64> = (0..7).map(|e| 0.1 * (e + 1) as f64).collect();
        let gate = GateTensor {
            heads: 1,
            n_d: 7,
            weights: w.clone(),
        };
        let f = weighted_mix(&experts, &gate).unwrap();
        for e in 0..7 {
            for i in 0..C {
                assert_eq!(f[e * C + i], experts[e][i] * w[e]);
            }
        }
    }

    #[test]
    fn final_dim_for_paper_width() {
        let experts = vec![vec![0.5; 512]; 7];
        let gate = gate_from_logits(4, 7, &[0.0; 28]).unwrap();
        assert_eq!(weighted_mix(&experts, &gate).unwrap().len(), 3584);
        assert!(weighted_mix(&experts[..6], &gate).is_err());
    }

    #[test]
    fn simple_gating_variants() {
        let (mut store, a) = build(GatingMode::SimpleAdd, ExpertStructure::Simple, 4);
        let d = random_set(9);
        assert_eq!(a.simple_gate(&store, &d).unwrap().len(), C);
        // one-hot weights via a huge bias on slot 2
        let gl = a.simple.as_ref().unwrap();
        *store.value_mut(gl.weight) = Tensor::zeros([1, 7 * C, 7]);
        let mut bias = vec![0.0; 7];
        bias[2] = 1e4;
        *store.value_mut(gl.bias.unwrap()) = Tensor::row_vector(bias);
        let out = a.simple_gate(&store, &d).unwrap();
        let e2 = a.expert_forward(&store, &d.features[2], 2).unwrap();
        for (x, y) in out.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-12);
        }
        let (store, a) = build(GatingMode::SimpleConcat, ExpertStructure::Simple, 4);
        assert_eq!(a.simple_gate(&store, &d).unwrap().len(), 7 * C);
    }

    #[test]
    fn simple_equal_logits_are_uniform() {
        let (mut store, a) = build(GatingMode::SimpleConcat, ExpertStructure::Simple, 1);
        let gl = a.simple.as_ref().unwrap();
        *store.value_mut(gl.weight) = Tensor::zeros([1, 7 * C, 7]);
        *store.value_mut(gl.bias.unwrap()) = Tensor::zeros([1, 1, 7]);
        let d = random_set(10);
        let out = a.simple_gate(&store, &d).unwrap();
        for e in 0..7 {
            let ex = a.expert_forward(&store, &d.features[e], e).unwrap();
            for i in 0..C {
                assert!((out[e * C + i] - ex[i] / 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expert_structures_keep_width() {
        for s in [ExpertStructure::Simple, ExpertStructure::Bottleneck, ExpertStructure::Ffn] {
            let (store, a) = build(GatingMode::Attention, s, 2);
            let (f, gate) = a.forward_single(&store, &random_set(11)).unwrap();
            assert_eq!(f.len(), 7 * C);
            assert_eq!(gate.unwrap().heads, 2);
        }
    }

    #[test]
    fn gate_table_round_trip_and_errors() {
        let recs: Vec<GateRecord> = (0..3)
            .map(|i| GateRecord {
                instance: i,
                identity: 10 + i,
                gate: gate_from_logits(2, 7, &(0..14).map(|v| (v * (i + 1)) as f64 * 0.1).collect::<Vec<_>>()).unwrap(),
            })
            .collect();
        let text = write_gate_table(&recs);
        let back = read_gate_table(&text).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.identity, b.identity);
            for (x, y) in a.gate.weights.iter().zip(&b.gate.weights) {
                assert!((x - y).abs() < 1e-8);
            }
        }
        let broken = text.replacen("\t0\t", "\tzz\t", 1);
        let err = read_gate_table(&broken).unwrap_err();
        assert!(matches!(err, DemoError::Parse { line: 3, .. }), "{err}");
    }

    proptest! {
        #[test]
        // logit gaps beyond ~36 round the top weight to exactly 1.0 in f64
        fn gate_rows_are_stochastic(logits in proptest::collection::vec(-15.0f64..15.0, 28)) {
            let g = gate_from_logits(4, 7, &logits).unwrap();
            for h in 0..4 {
                let s: f64 = g.row(h).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(g.row(h).iter().all(|&w| w > 0.0 && w < 1.0));
            }
        }

        #[test]
        fn raising_a_logit_raises_its_weight(
            logits in proptest::collection::vec(-5.0f64..5.0, 7),
            e in 0usize..7,
            bump in 0.01f64..3.0,
        ) {
            let before = gate_from_logits(1, 7, &logits).unwrap();
            let mut l2 = logits.clone();
            l2[e] += bump;
            let after = gate_from_logits(1, 7, &l2).unwrap();
            prop_assert!(after.weights[e] > before.weights[e]);
        }
    }
}
