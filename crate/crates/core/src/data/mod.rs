//! Domain types and data providers.

pub mod annotations;
pub mod embeddings;
pub mod features;
pub mod masks;
pub mod synthetic;
pub mod types;

pub use annotations::{load_annotations, load_vocabulary, save_dataset};
pub use embeddings::{EmbeddingSource, EmbeddingTable};
pub use features::{FeatureBundle, FeatureDims, FeatureProvider, SyntheticFeatures};
pub use masks::{rasterize_masks, MaskPair};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use types::{BoundingBox, DatasetBundle, ImageGroup, ObjectInstance, PairExample};
