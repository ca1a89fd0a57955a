//! Small vision-transformer encoder producing patch tokens and a class token
//! per modality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Graph, Mode, Var};
use crate::data::ImageStack;
use crate::error::{DemoError, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::{Axis, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub share_across_modalities: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_height: 256,
            image_width: 128,
            patch_size: 16,
            channels: 3,
            embed_dim: 512,
            depth: 4,
            num_heads: 8,
            mlp_ratio: 4,
            share_across_modalities: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(DemoError::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return Err(DemoError::Config("image dims must be positive".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(DemoError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(DemoError::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// One image's encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `[1, N_p, C]`.
    pub patch_tokens: Tensor,
    pub class_token: Vec<f64>,
    pub modality: Modality,
}

/// Encoder output for a whole batch inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct TokenVars {
    /// `[1, B, C]`.
    pub class: Var,
    /// `[B, N_p, C]`.
    pub patches: Var,
}

/// Split images into flattened patches: `[B, N_p, P*P*channels]`, patches in
/// row-major grid order, each patch flattened channel-major.
pub fn patchify(images: &ImageStack, patch: usize) -> Tensor {
    let (h, w, ch) = (images.height, images.width, images.channels);
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * ch;
    let mut data = Vec::with_capacity(images.count * gr * gc * pd);
    for i in 0..images.count {
        let img = images.image(i);
        for py in 0..gr {
            for px in 0..gc {
                for c in 0..ch {
                    for y in 0..patch {
                        let row = (c * h + py * patch + y) * w + px * patch;
                        data.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::from_vec([images.count, gr * gc, pd], data)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h).output;
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// Pre-norm ViT encoder for one modality stream.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    patch_embed: Linear,
    class_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let g = Group::Encoder;
        let patch_embed = Linear::new(store, init, &format!("{prefix}.patch_embed"), config.patch_dim(), c, true, g);
        let class_token = store.add(format!("{prefix}.class_token"), init.normal([1, 1, c], 0.02), g);
        let pos_embed = store.add(
            format!("{prefix}.pos_embed"),
            init.normal([1, config.num_patches() + 1, c], 0.02),
            g,
        );
        let hidden = c * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{prefix}.blocks.{i}");
                Ok(Block {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), c, g),
                    attn: MultiHeadAttention::new(store, init, &format!("{p}.attn"), c, config.num_heads, g)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), c, g),
                    fc1: Linear::new(store, init, &format!("{p}.mlp.fc1"), c, hidden, true, g),
                    fc2: Linear::new(store, init, &format!("{p}.mlp.fc2"), hidden, c, true, g),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), c, g);
        Ok(Encoder {
            config: config.clone(),
            prefix: prefix.to_string(),
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn check_input(&self, images: &ImageStack) -> Result<()> {
        let c = &self.config;
        if (images.height, images.width, images.channels) != (c.image_height, c.image_width, c.channels) {
            return Err(DemoError::Config(format!(
                "images are {}x{}x{}, encoder expects {}x{}x{}",
                images.channels, images.height, images.width, c.channels, c.image_height, c.image_width
            )));
        }
        if images.data.iter().any(|x| !x.is_finite()) {
            return Err(DemoError::Input("non-finite pixel value".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, images: &ImageStack) -> Result<TokenVars> {
        self.check_input(images)?;
        let b = images.count;
        let np = self.config.num_patches();
        let c = self.config.embed_dim;
        let patches = g.constant(patchify(images, self.config.patch_size));
        let x = self.patch_embed.forward(g, patches);
        let cls = g.param(self.class_token);
        let cls = g.broadcast_batch(cls, b);
        let x = g.concat(&[cls, x], Axis::Row);
        let pos = g.param(self.pos_embed);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x);
        }
        let x = self.norm.forward(g, x);
        let class = g.slice(x, Axis::Row, 0, 1);
        let class = g.reshape(class, [1, b, c]);
        let patches = g.slice(x, Axis::Row, 1, np);
        Ok(TokenVars { class, patches })
    }

    /// Deterministic eval-mode encoding of an image batch.
    pub fn encode(&self, store: &ParamStore, images: &ImageStack, modality: Modality) -> Result<Vec<TokenSet>> {
        let mut g = Graph::new(store, Mode::Eval);
        let tv = self.forward(&mut g, images)?;
        let class = g.value(tv.class);
        let patches = g.value(tv.patches);
        Ok((0..images.count)
            .map(|i| TokenSet {
                patch_tokens: patches.slice(Axis::Batch, i, 1),
                class_token: class.row(0, i).to_vec(),
                modality,
            })
            .collect())
    }
}

/// The three modality streams, optionally sharing one set of weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    encoders: Vec<Encoder>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: &EncoderConfig) -> Result<Self> {
        let encoders = if config.share_across_modalities {
            vec![Encoder::new(store, init, "encoder.shared", config)?]
        } else {
            Modality::ALL
                .iter()
                .map(|m| Encoder::new(store, init, &format!("encoder.{}", m.short()), config))
                .collect::<Result<_>>()?
        };
        Ok(Backbone { encoders })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        if self.encoders.len() == 1 {
            &self.encoders[0]
        } else {
            &self.encoders[m.index()]
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoders[0].config
    }

    /// Write every encoder parameter into an archive.
    pub fn save_weights(store: &ParamStore) -> Archive {
        let mut a = Archive::new();
        for (_, p) in store.iter().filter(|(_, p)| p.group == Group::Encoder) {
            a.insert_tensor(p.name.clone(), &p.value);
        }
        a
    }

    /// Overwrite the encoder parameters from an archive holding exactly the
    /// encoder's parameter names with matching shapes.
    pub fn load_weights(store: &mut ParamStore, archive: &Archive) -> Result<()> {
        let entries = archive.tensors_with_prefix("")?;
        let mut expected = BTreeMap::new();
        for (_, p) in store.iter().filter(|(_, p)| p.group == Group::Encoder) {
            expected.insert(p.name.clone(), p.value.shape());
        }
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, shape) in &expected {
            match entries.get(name) {
                None => missing.push(name.clone()),
                Some(t) if t.shape() != *shape => {
                    mismatched.push(format!("{name} (expected {shape:?}, found {:?})", t.shape()))
                }
                _ => {}
            }
        }
        let extra: Vec<_> = entries.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        if !(missing.is_empty() && mismatched.is_empty() && extra.is_empty()) {
            let mut parts = Vec::new();
            if !missing.is_empty() {
                parts.push(format!("missing: {}", missing.join(", ")));
            }
            if !extra.is_empty() {
                parts.push(format!("unexpected: {}", extra.join(", ")));
            }
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatch: {}", mismatched.join(", ")));
            }
            return Err(DemoError::Checkpoint(parts.join("; ")));
        }
        for (name, t) in entries {
            let id = store.id(&name).expect("validated above");
            *store.value_mut(id) = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            image_height: 32,
            image_width: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            ..EncoderConfig::default()
        }
    }

    fn images(cfg: &EncoderConfig, n: usize, seed: u64) -> ImageStack {
        let mut init = Init::new(seed);
        let t = init.normal([n, cfg.channels, cfg.image_height * cfg.image_width], 1.0);
        ImageStack {
            count: n,
            channels: cfg.channels,
            height: cfg.image_height,
            width: cfg.image_width,
            data: t.into_vec(),
        }
    }

    #[test]
    fn patch_counts_follow_image_arithmetic() {
        let a = EncoderConfig::default();
        assert_eq!(a.num_patches(), 128);
        let b = EncoderConfig {
            image_height: 128,
            image_width: 256,
            ..EncoderConfig::default()
        };
        assert_eq!(b.num_patches(), 128);
        assert_eq!(toy().num_patches(), 8);
    }

    #[test]
    fn toy_encode_yields_eight_patch_tokens_of_length_eight() {
        let cfg = toy();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(0), "e", &cfg).unwrap();
        let out = enc.encode(&store, &images(&cfg, 2, 1), Modality::Rgb).unwrap();
        assert_eq!(out.len(), 2);
        for ts in &out {
            assert_eq!(ts.patch_tokens.shape(), [1, 8, 8]);
            assert_eq!(ts.class_token.len(), 8);
            assert!(ts.patch_tokens.is_finite());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = toy();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(0), "e", &cfg).unwrap();
        let imgs = images(&cfg, 3, 2);
        let a = enc.encode(&store, &imgs, Modality::Nir).unwrap();
        let b = enc.encode(&store, &imgs, Modality::Nir).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let cfg = toy();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(0), "e", &cfg).unwrap();
        let mut imgs = images(&cfg, 1, 2);
        imgs.height = 24;
        assert!(matches!(enc.encode(&store, &imgs, Modality::Rgb), Err(DemoError::Config(_))));
        let mut imgs = images(&cfg, 1, 2);
        imgs.data[3] = f64::NAN;
        assert!(matches!(enc.encode(&store, &imgs, Modality::Rgb), Err(DemoError::Input(_))));
        let bad = EncoderConfig { patch_size: 5, ..toy() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { num_heads: 3, ..toy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        // 1 channel 2x4 image, patch 2 -> two patches
        let imgs = ImageStack {
            count: 1,
            channels: 1,
            height: 2,
            width: 4,
            data: (0..8).map(|x| x as f64).collect(),
        };
        let p = patchify(&imgs, 2);
        assert_eq!(p.shape(), [1, 2, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn weights_roundtrip_and_errors() {
        let cfg = toy();
        let mut store = ParamStore::new();
        Backbone::new(&mut store, &mut Init::new(0), &cfg).unwrap();
        let saved = Backbone::save_weights(&store);
        let bytes = saved.to_bytes();

        let mut other = ParamStore::new();
        Backbone::new(&mut other, &mut Init::new(99), &cfg).unwrap();
        Backbone::load_weights(&mut other, &Archive::from_bytes(&bytes).unwrap()).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }

        let mut missing = saved.clone();
        missing.arrays.remove("encoder.R.pos_embed");
        let err = Backbone::load_weights(&mut other, &missing).unwrap_err().to_string();
        assert!(err.contains("encoder.R.pos_embed"), "{err}");

        let mut transposed = saved.clone();
        let w = saved.tensor("encoder.N.patch_embed.weight").unwrap();
        let [_, r, c] = w.shape();
        transposed.insert_tensor("encoder.N.patch_embed.weight", &Tensor::zeros([1, c, r]));
        let err = Backbone::load_weights(&mut other, &transposed).unwrap_err().to_string();
        assert!(err.contains("encoder.N.patch_embed.weight"), "{err}");
        assert!(err.contains(&format!("{:?}", [1, r, c])) && err.contains(&format!("{:?}", [1, c, r])), "{err}");
    }

    #[test]
    fn shared_backbone_has_one_stream() {
        let cfg = EncoderConfig { share_across_modalities: true, ..toy() };
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut Init::new(0), &cfg).unwrap();
        assert_eq!(bb.encoder(Modality::Rgb).prefix, bb.encoder(Modality::Tir).prefix);
        let mut sep = ParamStore::new();
        Backbone::new(&mut sep, &mut Init::new(0), &toy()).unwrap();
        assert_eq!(sep.num_trainable(), 3 * store.num_trainable());
    }
}
