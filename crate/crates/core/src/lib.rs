//! Predicate classification for visual relationships.
//!
//! Given a subject and an object (class and box), the model scores every
//! predicate with two branches: one attends over the feature map of the
//! pair's union box, the other classifies the difference between object and
//! subject encodings. A spatio-linguistic attention vector, computed from
//! binary box masks and class word embeddings, conditions the pooling and
//! both classifiers. With deep supervision each branch is trained on its
//! own loss as well as through the fused scores, which pulls the two score
//! vectors together.

pub mod branch_os;
pub mod branch_p;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod sla;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{BranchMode, Model, ModelDims, PreparedDataset};
pub use sla::{AttentionMode, SlaVector};
pub use train::{train, TrainConfig};
