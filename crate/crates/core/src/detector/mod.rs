//! Anchor-free detector: strided backbone, per-level attention, centralized feature pyramid
//! neck, decoupled heads at strides 8/16/32, with task-aligned assignment and the
//! classification / box / distribution loss stack.

mod assign;
mod backbone;
mod decode;
mod head;
mod loss;
mod model;

pub use assign::{assign_points, task_aligned_assign, AssignConfig, AssignmentResult};
pub use backbone::{Backbone, Sppf};
pub use decode::{
    anchor_points, box_from_distances, decode_image, decode_predictions, expected_distance, nms,
    DecodeConfig, DecodedImage,
};
pub use head::{DecoupledHead, HeadOutput};
pub use loss::{
    assign_batch, bce_loss, ciou_loss, ciou_loss_rows, detection_loss, dfl_loss, dfl_loss_rows,
    loss_with_assignments, LossBreakdown, LossConfig,
};
pub use model::{Ablation, Detector, DetectorConfig, Neck};

pub use crate::boxes::{DetectionBox, GroundTruthBox, Rect};
pub use crate::pyramid::FeaturePyramid;
