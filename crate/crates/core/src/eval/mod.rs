//! Recall, branch alignment and projection export.

pub mod alignment;
pub mod discrimination;
pub mod projection;
pub mod recall;

pub use alignment::{alignment_norm, model_alignment};
pub use discrimination::{configuration_groups, group_distances, GroupDistances};
pub use projection::{export_projection, ClusterSummary, ProjectionConfig, ProjectionMap};
pub use recall::{recall_k_at_x, records_from_confidences, Aggregation, PredictionRecord, RecallConfig};
