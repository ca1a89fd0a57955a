//! Multi-modal data: synthetic generation, on-disk ingestion, identity
//! balanced sampling, augmentation and missing-modality masking.

pub mod augment;
pub mod batch;
pub mod dataset;
pub mod sampler;
pub mod synth;

pub use augment::{augment_batch, AugmentConfig};
pub use batch::{mask_modalities, ImageStack, ModalBatch};
pub use dataset::{load_dataset, parse_filename, DatasetIndex, IndexEntry, LoadedDataset};
pub use sampler::pk_sample;
pub use synth::{generate_synthetic, SynthSpec};
