//! Hierarchical decoupling: seven learnable queries attend to unimodal,
//! bimodal and trimodal token pools, giving modality-specific and
//! modality-shared features.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::backbone::TokenSet;
use crate::error::{DemoError, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::pife::FusedFeature;
use crate::tensor::{Axis, Tensor};

pub const N_DECOUPLED: usize = 7;

/// Decoupled feature slot, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    R,
    N,
    T,
    RN,
    NT,
    TR,
    RNT,
}

impl Slot {
    pub const ALL: [Slot; N_DECOUPLED] = [Slot::R, Slot::N, Slot::T, Slot::RN, Slot::NT, Slot::TR, Slot::RNT];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("slot listed")
    }

    /// Constituent modalities in key-concatenation order.
    pub fn modalities(self) -> &'static [Modality] {
        use Modality::*;
        match self {
            Slot::R => &[Rgb],
            Slot::N => &[Nir],
            Slot::T => &[Tir],
            Slot::RN => &[Rgb, Nir],
            Slot::NT => &[Nir, Tir],
            Slot::TR => &[Tir, Rgb],
            Slot::RNT => &[Rgb, Nir, Tir],
        }
    }

    /// 0 for unimodal, 1 for bimodal, 2 for trimodal.
    pub fn level(self) -> usize {
        self.modalities().len() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::R => "R",
            Slot::N => "N",
            Slot::T => "T",
            Slot::RN => "RN",
            Slot::NT => "NT",
            Slot::TR => "TR",
            Slot::RNT => "RNT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HdmVariant {
    /// Cross-attention over fused feature plus patch tokens.
    CrossAttention,
    /// Cross-attention over patch tokens only.
    CrossAttentionNoFused,
    /// Linear reduction of the constituents' fused features.
    NoInteraction,
    /// Pre-norm transformer block (cross-attention + MLP, both residual).
    TransformerBlock,
}

/// The seven decoupled vectors of one instance, canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledSet {
    pub features: Vec<Vec<f64>>,
}

impl DecoupledSet {
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != N_DECOUPLED {
            return Err(DemoError::Input(format!(
                "decoupled set needs {N_DECOUPLED} features, got {}",
                features.len()
            )));
        }
        let c = features[0].len();
        if features.iter().any(|f| f.len() != c) {
            return Err(DemoError::Input("decoupled features differ in length".into()));
        }
        Ok(DecoupledSet { features })
    }

    pub fn get(&self, s: Slot) -> &[f64] {
        &self.features[s.index()]
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }
}

fn check_tags(f: &FusedFeature, t: &TokenSet) -> Result<()> {
    if f.modality != t.modality {
        return Err(DemoError::Input(format!(
            "fused feature is {} but tokens are {}",
            f.modality, t.modality
        )));
    }
    if f.f.len() != t.patch_tokens.cols() {
        return Err(DemoError::Input("fused feature and tokens differ in width".into()));
    }
    Ok(())
}

fn keys_from(parts: &[(&FusedFeature, &TokenSet)]) -> Result<Tensor> {
    let mut rows: Vec<Tensor> = Vec::with_capacity(2 * parts.len());
    for (f, t) in parts {
        check_tags(f, t)?;
        rows.push(Tensor::row_vector(f.f.clone()));
        rows.push(t.patch_tokens.clone());
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(Tensor::concat(&refs, Axis::Row))
}

/// `[f_m, F_m]`: `(N_p + 1) x C`, fused feature first.
pub fn build_keys_unimodal(f: &FusedFeature, tokens: &TokenSet) -> Result<Tensor> {
    keys_from(&[(f, tokens)])
}

/// `[f_a, F_a, f_b, F_b]` for a bimodal slot, in the slot's modality order.
pub fn build_keys_bimodal(
    pair: Slot,
    first: (&FusedFeature, &TokenSet),
    second: (&FusedFeature, &TokenSet),
) -> Result<Tensor> {
    let mods = pair.modalities();
    if mods.len() != 2 {
        return Err(DemoError::Input(format!("{} is not a bimodal slot", pair.name())));
    }
    if first.0.modality != mods[0] || second.0.modality != mods[1] {
        return Err(DemoError::Input(format!(
            "slot {} expects {} then {}",
            pair.name(),
            mods[0],
            mods[1]
        )));
    }
    keys_from(&[first, second])
}

/// `[f_R, F_R, f_N, F_N, f_T, F_T]`.
pub fn build_keys_trimodal(parts: [(&FusedFeature, &TokenSet); 3]) -> Result<Tensor> {
    for (m, (f, _)) in Modality::ALL.iter().zip(&parts) {
        if f.modality != *m {
            return Err(DemoError::Input("trimodal keys need R, N, T order".into()));
        }
    }
    keys_from(&parts)
}

#[derive(Debug, Clone)]
struct BlockExtras {
    norm_q: LayerNorm,
    norm_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Level {
    attn: MultiHeadAttention,
    block: Option<BlockExtras>,
}

/// Graph outputs of [`Hdm::forward`].
#[derive(Debug, Clone)]
pub struct HdmOutput {
    /// Seven `[1, B, C]` vars in canonical order.
    pub decoupled: Vec<Var>,
    /// Per slot, per head `[B, 1, K]` attention probabilities.
    pub attention: Option<Vec<Vec<Var>>>,
    /// Whether key sets start each modality segment with the fused feature.
    pub keys_include_fused: bool,
}

#[derive(Debug, Clone)]
pub struct Hdm {
    pub variant: HdmVariant,
    pub queries: Vec<ParamId>,
    levels: Vec<Level>,
    reducers: Vec<Linear>,
    pub dim: usize,
    pub heads: usize,
}

impl Hdm {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, heads: usize, variant: HdmVariant) -> Result<Self> {
        let g = Group::Module;
        let mut queries = Vec::new();
        let mut levels = Vec::new();
        let mut reducers = Vec::new();
        if variant == HdmVariant::NoInteraction {
            for s in Slot::ALL {
                let n = s.modalities().len();
                reducers.push(Linear::new(store, init, &format!("hdm.reduce.{}", s.name()), n * dim, dim, true, g));
            }
        } else {
            for s in Slot::ALL {
                queries.push(store.add(format!("hdm.query.{}", s.name()), init.normal([1, 1, dim], 0.02), g));
            }
            for (i, name) in ["uni", "bi", "tri"].iter().enumerate() {
                let p = format!("hdm.{name}");
                let attn = MultiHeadAttention::new(store, init, &format!("{p}.attn"), dim, heads, g)?;
                let block = (variant == HdmVariant::TransformerBlock).then(|| BlockExtras {
                    norm_q: LayerNorm::new(store, &format!("{p}.norm_q"), dim, g),
                    norm_mlp: LayerNorm::new(store, &format!("{p}.norm_mlp"), dim, g),
                    fc1: Linear::new(store, init, &format!("{p}.mlp.fc1"), dim, 4 * dim, true, g),
                    fc2: Linear::new(store, init, &format!("{p}.mlp.fc2"), 4 * dim, dim, true, g),
                });
                debug_assert_eq!(levels.len(), i);
                levels.push(Level { attn, block });
            }
        }
        Ok(Hdm {
            variant,
            queries,
            levels,
            reducers,
            dim,
            heads,
        })
    }

    fn keys_var(&self, g: &mut Graph, slot: Slot, fused: &[Var], patches: &[Var]) -> Var {
        let include_fused = self.variant != HdmVariant::CrossAttentionNoFused;
        let mut parts = Vec::new();
        for m in slot.modalities() {
            let i = m.index();
            if include_fused {
                let [_, b, c] = g.shape(fused[i]);
                parts.push(g.reshape(fused[i], [b, 1, c]));
            }
            parts.push(patches[i]);
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, Axis::Row)
        }
    }

    /// Single-query attention of `query: [1,1,C]` over `keys: [B,K,C]`
    /// using the given level. Returns `[1, B, C]` plus per-head probs.
    fn attend(&self, g: &mut Graph, level: usize, query: Var, keys: Var) -> (Var, Vec<Var>) {
        let [b, _, c] = g.shape(keys);
        let lv = &self.levels[level];
        let q = g.broadcast_batch(query, b);
        match &lv.block {
            None => {
                let out = lv.attn.forward(g, q, keys);
                (g.reshape(out.output, [1, b, c]), out.probs)
            }
            Some(bx) => {
                let qn = bx.norm_q.forward(g, q);
                let out = lv.attn.forward(g, qn, keys);
                let x = g.add(q, out.output);
                let h = bx.norm_mlp.forward(g, x);
                let h = bx.fc1.forward(g, h);
                let h = g.gelu(h);
                let h = bx.fc2.forward(g, h);
                let x = g.add(x, h);
                (g.reshape(x, [1, b, c]), out.probs)
            }
        }
    }

    /// `fused`: three `[1,B,C]` vars; `patches`: three `[B,N_p,C]` vars, both
    /// in R, N, T order. `present` holds one presence triple per instance.
    pub fn forward(
        &self,
        g: &mut Graph,
        fused: &[Var],
        patches: &[Var],
        present: &[[bool; 3]],
        retain_attention: bool,
    ) -> Result<HdmOutput> {
        if let Some(i) = present.iter().position(|p| !p.iter().any(|&x| x)) {
            return Err(DemoError::Input(format!("instance {i} has no modality present")));
        }
        if fused.len() != 3 || patches.len() != 3 {
            return Err(DemoError::Input("decoupling needs all three modality streams".into()));
        }
        let mut decoupled = Vec::with_capacity(N_DECOUPLED);
        let mut attention = Vec::with_capacity(N_DECOUPLED);
        for slot in Slot::ALL {
            if self.variant == HdmVariant::NoInteraction {
                let parts: Vec<Var> = slot.modalities().iter().map(|m| fused[m.index()]).collect();
                let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, Axis::Col) };
                decoupled.push(self.reducers[slot.index()].forward(g, cat));
                continue;
            }
            let keys = self.keys_var(g, slot, fused, patches);
            let q = g.param(self.queries[slot.index()]);
            let (out, probs) = self.attend(g, slot.level(), q, keys);
            decoupled.push(out);
            attention.push(probs);
        }
        Ok(HdmOutput {
            decoupled,
            attention: (retain_attention && self.variant != HdmVariant::NoInteraction).then_some(attention),
            keys_include_fused: self.variant != HdmVariant::CrossAttentionNoFused,
        })
    }

    /// Attention block of `level` (0 uni, 1 bi, 2 tri), if this variant has one.
    pub fn level_attention(&self, level: usize) -> Option<&MultiHeadAttention> {
        self.levels.get(level).map(|l| &l.attn)
    }

    /// Cross-attention of one query vector over a `K x C` key matrix with the
    /// parameters of `level` (0 uni, 1 bi, 2 tri).
    pub fn cross_attend(&self, store: &ParamStore, level: usize, query: &[f64], keys: &Tensor) -> Result<Vec<f64>> {
        if self.levels.is_empty() {
            return Err(DemoError::State("this variant has no attention".into()));
        }
        if level >= self.levels.len() {
            return Err(DemoError::Input(format!("no attention level {level}")));
        }
        if keys.rows() == 0 {
            return Err(DemoError::Input("cross-attention needs at least one key".into()));
        }
        if query.len() != self.dim || keys.cols() != self.dim || keys.batch() != 1 {
            return Err(DemoError::Input("query/key width mismatch".into()));
        }
        let mut g = Graph::new(store, Mode::Eval);
        let q = g.constant(Tensor::row_vector(query.to_vec()));
        let k = g.constant(keys.clone());
        let (out, _) = self.attend(&mut g, level, q, k);
        Ok(g.value(out).data().to_vec())
    }

    /// Eval-mode decoupling for a batch given per-instance tokens and fused
    /// features (`tokens[i][m]`, `fused[i][m]`, R/N/T order).
    pub fn decouple(
        &self,
        store: &ParamStore,
        tokens: &[[TokenSet; 3]],
        fused: &[[FusedFeature; 3]],
        present: &[[bool; 3]],
    ) -> Result<Vec<DecoupledSet>> {
        if tokens.len() != fused.len() || tokens.len() != present.len() {
            return Err(DemoError::Input("batch lengths differ".into()));
        }
        let b = tokens.len();
        let mut g = Graph::new(store, Mode::Eval);
        let mut fv = Vec::new();
        let mut pv = Vec::new();
        for m in Modality::ALL {
            let i = m.index();
            let mut frows = Vec::with_capacity(b * self.dim);
            let mut patches = Vec::new();
            for (t, f) in tokens.iter().zip(fused) {
                check_tags(&f[i], &t[i])?;
                if t[i].modality != m {
                    return Err(DemoError::Input(format!("slot {m} holds {} tokens", t[i].modality)));
                }
                frows.extend_from_slice(&f[i].f);
                patches.push(&t[i].patch_tokens);
            }
            fv.push(g.constant(Tensor::from_vec([1, b, self.dim], frows)));
            pv.push(g.constant(Tensor::concat(&patches, Axis::Batch)));
        }
        let out = self.forward(&mut g, &fv, &pv, present, false)?;
        (0..b)
            .map(|i| {
                DecoupledSet::new(out.decoupled.iter().map(|&v| g.value(v).row(0, i).to_vec()).collect())
            })
            .collect()
    }
}

/// Head-averaged attention a query places on one modality's patch tokens,
/// laid out on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub instance: usize,
    pub slot: Slot,
    pub modality: Modality,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major grid values; their sum is the query's total mass on this
    /// modality's patches.
    pub values: Vec<f64>,
}

/// Heatmaps for every instance, slot and constituent modality.
pub fn dump_decoupling_attention(
    g: &Graph,
    out: &HdmOutput,
    grid: (usize, usize),
) -> Result<Vec<Heatmap>> {
    let attention = out
        .attention
        .as_ref()
        .ok_or_else(|| DemoError::State("attention retention was not enabled".into()))?;
    let np = grid.0 * grid.1;
    let seg = np + usize::from(out.keys_include_fused);
    let mut maps = Vec::new();
    let b = g.shape(attention[0][0])[0];
    for inst in 0..b {
        for slot in Slot::ALL {
            let heads = &attention[slot.index()];
            let k = g.shape(heads[0])[2];
            let mut avg = vec![0.0; k];
            for &h in heads {
                for (a, p) in avg.iter_mut().zip(g.value(h).row(inst, 0)) {
                    *a += p / heads.len() as f64;
                }
            }
            for (j, &m) in slot.modalities().iter().enumerate() {
                let start = j * seg + usize::from(out.keys_include_fused);
                maps.push(Heatmap {
                    instance: inst,
                    slot,
                    modality: m,
                    grid_rows: grid.0,
                    grid_cols: grid.1,
                    values: avg[start..start + np].to_vec(),
                });
            }
        }
    }
    Ok(maps)
}
