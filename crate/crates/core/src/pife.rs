//! Patch-integrated feature extraction: pooled patch tokens are joined with
//! the class token, layer-normalized, projected back to `C` and passed
//! through GELU.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{DemoError, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::{Axis, Tensor};

/// Inputs below this are clamped before GeM exponentiation.
pub const GEM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    Average,
    Max,
    Gem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub f: Vec<f64>,
    pub modality: Modality,
}

/// Pool `[B, N_p, C]` patch tokens to `[1, B, C]`.
pub fn pool_var(g: &mut Graph, patches: Var, mode: PoolingMode, gem_p: Option<Var>) -> Var {
    let [b, _, c] = g.shape(patches);
    let pooled = match mode {
        PoolingMode::Average => g.mean_rows(patches),
        PoolingMode::Max => g.max_rows(patches),
        PoolingMode::Gem => {
            let p = gem_p.expect("gem pooling needs an exponent");
            g.gem_rows(patches, p, GEM_EPS)
        }
    };
    g.reshape(pooled, [1, b, c])
}

/// Pool an `N_p x C` token matrix (`[1, N_p, C]`) into a `C`-vector.
pub fn pool_patches(patch_tokens: &Tensor, mode: PoolingMode, gem_p: f64) -> Result<Vec<f64>> {
    if patch_tokens.rows() == 0 || patch_tokens.batch() != 1 {
        return Err(DemoError::Input("pooling needs a non-empty token matrix".into()));
    }
    if mode == PoolingMode::Gem && !(gem_p > 0.0) {
        return Err(DemoError::Config(format!("GeM exponent must be positive, got {gem_p}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(patch_tokens.clone());
    let p = g.constant(Tensor::scalar(gem_p));
    let out = pool_var(&mut g, x, mode, Some(p));
    Ok(g.value(out).data().to_vec())
}

#[derive(Debug, Clone)]
pub struct Pife {
    pub norm: LayerNorm,
    /// `W_pro`, stored `[1, 2C, C]`, no bias.
    pub proj: Linear,
    pub pooling: PoolingMode,
    pub gem_p: Option<ParamId>,
    pub dim: usize,
}

impl Pife {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        pooling: PoolingMode,
        gem_p: f64,
    ) -> Result<Self> {
        if pooling == PoolingMode::Gem && !(gem_p > 0.0) {
            return Err(DemoError::Config(format!("gem_p must be positive, got {gem_p}")));
        }
        let g = Group::Module;
        Ok(Pife {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), 2 * dim, g),
            proj: Linear::new(store, init, &format!("{prefix}.proj"), 2 * dim, dim, false, g),
            pooling,
            gem_p: (pooling == PoolingMode::Gem)
                .then(|| store.add(format!("{prefix}.gem_p"), Tensor::scalar(gem_p), g)),
            dim,
        })
    }

    pub fn pool(&self, g: &mut Graph, patches: Var) -> Var {
        let p = self.gem_p.map(|id| g.param(id));
        pool_var(g, patches, self.pooling, p)
    }

    /// `class, pooled: [1, B, C]` to `f_m: [1, B, C]`.
    pub fn fuse_var(&self, g: &mut Graph, class: Var, pooled: Var) -> Var {
        let cat = g.concat(&[class, pooled], Axis::Col);
        let n = self.norm.forward(g, cat);
        let y = self.proj.forward(g, n);
        g.gelu(y)
    }

    pub fn forward(&self, g: &mut Graph, class: Var, patches: Var) -> Var {
        let pooled = self.pool(g, patches);
        self.fuse_var(g, class, pooled)
    }

    pub fn fuse(
        &self,
        store: &ParamStore,
        class_token: &[f64],
        pooled: &[f64],
        modality: Modality,
    ) -> Result<FusedFeature> {
        if class_token.len() != self.dim || pooled.len() != self.dim {
            return Err(DemoError::Config(format!(
                "fuse expects two {}-vectors, got {} and {}",
                self.dim,
                class_token.len(),
                pooled.len()
            )));
        }
        let mut g = Graph::new(store, Mode::Eval);
        let c = g.constant(Tensor::row_vector(class_token.to_vec()));
        let p = g.constant(Tensor::row_vector(pooled.to_vec()));
        let out = self.fuse_var(&mut g, c, p);
        Ok(FusedFeature {
            f: g.value(out).data().to_vec(),
            modality,
        })
    }
}
