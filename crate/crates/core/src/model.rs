//! Model assembly: encoder streams, optional PIFE / HDM / ATMoE stages,
//! classifier heads and the retrieval descriptor.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::atmoe::{Atmoe, AtmoeOutput, ExpertStructure, GateTensor, GatingMode};
use crate::autograd::{Graph, Mode, Var};
use crate::backbone::{Backbone, EncoderConfig};
use crate::data::ModalBatch;
use crate::error::{DemoError, Result};
use crate::hdm::{dump_decoupling_attention, Hdm, HdmOutput, HdmVariant, Heatmap, N_DECOUPLED};
use crate::losses::{composite_var, ClassifierHeads, CompositeLoss, LossConfig};
use crate::modality::Modality;
use crate::params::{Init, ParamStore};
use crate::pife::{Pife, PoolingMode};
use crate::tensor::{Axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceStreams {
    /// Final feature only.
    Final,
    /// `[final, f_R, f_N, f_T]`.
    FinalPlusModal,
}

/// Named module-ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
            Preset::E => "E",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DemoError::Config(format!("unknown model preset {s:?} (expected A-E)")))
    }

    /// Apply this preset's flags to `cfg`.
    pub fn apply(self, cfg: &mut ModelConfig) {
        let (pife, hdm, atmoe) = match self {
            Preset::A => (false, false, false),
            Preset::B => (true, false, false),
            Preset::C => (true, true, false),
            Preset::D | Preset::E => (true, true, true),
        };
        cfg.use_pife = pife;
        cfg.use_hdm = hdm;
        cfg.use_atmoe = atmoe;
        cfg.inference_streams = if self == Preset::E {
            InferenceStreams::FinalPlusModal
        } else {
            InferenceStreams::Final
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub use_pife: bool,
    pub use_hdm: bool,
    pub use_atmoe: bool,
    pub inference_streams: InferenceStreams,
    pub pooling: PoolingMode,
    pub gem_p: f64,
    pub hdm_variant: HdmVariant,
    pub gating: GatingMode,
    /// Gate head count `H`.
    pub moe_heads: usize,
    pub experts: ExpertStructure,
    pub loss: LossConfig,
    /// Classifier width; 0 means "number of training identities".
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            use_pife: true,
            use_hdm: true,
            use_atmoe: true,
            inference_streams: InferenceStreams::FinalPlusModal,
            pooling: PoolingMode::Average,
            gem_p: 3.0,
            hdm_variant: HdmVariant::CrossAttention,
            gating: GatingMode::Attention,
            moe_heads: 4,
            experts: ExpertStructure::Simple,
            loss: LossConfig::default(),
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    /// Small model for tests and desk-scale runs.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 16,
                image_width: 8,
                patch_size: 4,
                channels: 3,
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                mlp_ratio: 2,
                share_across_modalities: false,
                seed: 0,
            },
            moe_heads: 2,
            ..ModelConfig::default()
        }
    }

    pub fn preset(mut self, p: Preset) -> Self {
        p.apply(&mut self);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.use_atmoe && !self.use_hdm {
            return Err(DemoError::Config(
                "use_atmoe requires use_hdm: the expert mixture consumes the decoupled features".into(),
            ));
        }
        if self.inference_streams == InferenceStreams::FinalPlusModal && !self.use_atmoe {
            return Err(DemoError::Config(
                "inference_streams = final-plus-modal requires use_atmoe".into(),
            ));
        }
        if self.pooling == PoolingMode::Gem && !(self.gem_p > 0.0) {
            return Err(DemoError::Config(format!("gem_p must be positive, got {}", self.gem_p)));
        }
        let c = self.encoder.embed_dim;
        if self.use_atmoe && self.gating == GatingMode::Attention && (self.moe_heads == 0 || c % self.moe_heads != 0) {
            return Err(DemoError::Config(format!(
                "embed_dim {c} not divisible by moe_heads {}",
                self.moe_heads
            )));
        }
        Ok(())
    }

    pub fn final_dim(&self) -> usize {
        let c = self.encoder.embed_dim;
        match (self.use_hdm, self.use_atmoe) {
            (false, _) => 3 * c,
            (true, false) => N_DECOUPLED * c,
            (true, true) if self.gating == GatingMode::SimpleAdd => c,
            (true, true) => N_DECOUPLED * c,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.inference_streams {
            InferenceStreams::Final => self.final_dim(),
            InferenceStreams::FinalPlusModal => self.final_dim() + 3 * self.encoder.embed_dim,
        }
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }
}

/// Graph outputs of one forward pass.
pub struct ForwardOutput {
    /// `f_R, f_N, f_T` (class tokens when PIFE is off), `[1, B, C]` each.
    pub modal: [Var; 3],
    /// `[1, B, final_dim]`.
    pub final_feature: Var,
    pub hdm: Option<HdmOutput>,
    pub atmoe: Option<AtmoeOutput>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub pife: Option<Vec<Pife>>,
    pub hdm: Option<Hdm>,
    pub atmoe: Option<Atmoe>,
    pub heads: ClassifierHeads,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

pub fn build_model(config: &ModelConfig, num_classes: usize) -> Result<Model> {
    config.validate()?;
    let mut config = config.clone();
    if config.num_classes == 0 {
        config.num_classes = num_classes;
    }
    if config.num_classes == 0 {
        return Err(DemoError::Config("num_classes must be positive".into()));
    }
    let mut store = ParamStore::new();
    let mut init = Init::new(config.encoder.seed);
    let backbone = Backbone::new(&mut store, &mut init, &config.encoder)?;
    let c = config.encoder.embed_dim;
    let pife = if config.use_pife {
        Some(
            Modality::ALL
                .iter()
                .map(|m| Pife::new(&mut store, &mut init, &format!("pife.{}", m.short()), c, config.pooling, config.gem_p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let hdm = if config.use_hdm {
        Some(Hdm::new(&mut store, &mut init, c, config.encoder.num_heads, config.hdm_variant)?)
    } else {
        None
    };
    let atmoe = if config.use_atmoe {
        Some(Atmoe::new(&mut store, &mut init, c, config.moe_heads, config.gating, config.experts)?)
    } else {
        None
    };
    let heads = ClassifierHeads::new(&mut store, &mut init, [c, c, c, config.final_dim()], config.num_classes)?;
    Ok(Model {
        config,
        store,
        net: Network {
            backbone,
            pife,
            hdm,
            atmoe,
            heads,
        },
    })
}

impl Network {
    pub fn forward(&self, g: &mut Graph, batch: &ModalBatch, retain_attention: bool) -> Result<ForwardOutput> {
        let mut modal = Vec::with_capacity(3);
        let mut patches = Vec::with_capacity(3);
        for m in Modality::ALL {
            let tv = self.backbone.encoder(m).forward(g, batch.stack(m))?;
            let f = match &self.pife {
                Some(p) => p[m.index()].forward(g, tv.class, tv.patches),
                None => tv.class,
            };
            modal.push(f);
            patches.push(tv.patches);
        }
        let (final_feature, hdm, atmoe) = match &self.hdm {
            None => (g.concat(&modal, Axis::Col), None, None),
            Some(h) => {
                let out = h.forward(g, &modal, &patches, &batch.present, retain_attention)?;
                match &self.atmoe {
                    Some(a) => {
                        let ao = a.forward(g, &out.decoupled)?;
                        (ao.f, Some(out), Some(ao))
                    }
                    None => (g.concat(&out.decoupled, Axis::Col), Some(out), None),
                }
            }
        };
        Ok(ForwardOutput {
            modal: [modal[0], modal[1], modal[2]],
            final_feature,
            hdm,
            atmoe,
        })
    }

    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, labels: &[usize], cfg: &LossConfig) -> Result<CompositeLoss> {
        let [r, n, t] = out.modal;
        composite_var(g, [r, n, t, out.final_feature], labels, &self.heads, cfg)
    }

    pub fn descriptor(&self, g: &mut Graph, out: &ForwardOutput, streams: InferenceStreams) -> Var {
        match streams {
            InferenceStreams::Final => out.final_feature,
            InferenceStreams::FinalPlusModal => {
                let [r, n, t] = out.modal;
                g.concat(&[out.final_feature, r, n, t], Axis::Col)
            }
        }
    }
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.store.num_trainable()
    }

    /// Eval-mode descriptors, `[1, B, descriptor_dim]`.
    pub fn descriptors(&self, batch: &ModalBatch) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.net.forward(&mut g, batch, false)?;
        let d = self.net.descriptor(&mut g, &out, self.config.inference_streams);
        Ok(g.value(d).clone())
    }

    /// Eval-mode per-instance gates (attention gating only).
    pub fn gates(&self, batch: &ModalBatch) -> Result<Vec<GateTensor>> {
        let atmoe = self
            .net
            .atmoe
            .as_ref()
            .filter(|a| a.gating == GatingMode::Attention)
            .ok_or_else(|| DemoError::State("model has no attention gate".into()))?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.net.forward(&mut g, batch, false)?;
        let ao = out.atmoe.as_ref().expect("attention gating produces a gate");
        Ok(atmoe.read_gates(&g, ao).expect("attention gating produces a gate"))
    }

    /// Eval-mode decoupling-attention heatmaps.
    pub fn attention_maps(&self, batch: &ModalBatch) -> Result<Vec<Heatmap>> {
        if self.net.hdm.is_none() {
            return Err(DemoError::State("model has no decoupling module".into()));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.net.forward(&mut g, batch, true)?;
        dump_decoupling_attention(&g, out.hdm.as_ref().expect("hdm enabled"), self.config.encoder.grid())
    }

    /// Parameters (and buffers) plus the configuration.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.meta.insert("model_config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        for (_, p) in self.store.iter() {
            a.insert_tensor(format!("param/{}", p.name), &p.value);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Model> {
        let json = a
            .meta
            .get("model_config")
            .ok_or_else(|| DemoError::Checkpoint("archive has no model_config".into()))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| DemoError::Checkpoint(format!("bad model_config: {e}")))?;
        let mut model = build_model(&config, config.num_classes)?;
        model.store.load_named(&a.tensors_with_prefix("param/")?)?;
        Ok(model)
    }
}
