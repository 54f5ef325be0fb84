//! Evaluation measures for object discovery, localization and semantic
//! segmentation.

pub mod ari;
pub mod cluster;
pub mod overlap;
pub mod report;
pub mod semantic;

pub use ari::{adjusted_rand_index, ContingencyTable};
pub use cluster::{hungarian_match, kmeans, pool_slot_features, Assignment, KMeansResult};
pub use overlap::{
    box_iou, corloc_and_detection_rate, mask_iou, masks_per_label, mean_best_overlap,
    LocalizationScores, LOCALIZATION_THRESHOLD,
};
pub use report::{mean_defined, MetricsReport};
pub use semantic::{
    cluster_and_score, semantic_segmentation_eval, SegmentationScores, SemanticEvaluation,
    SlotPrediction,
};
