//! The detector: configuration, graph, decoding and checkpoints.

mod anchors;
mod checkpoint;
mod config;
mod decode;
mod detection;
mod detector;

pub use self::anchors::kmeans_anchors;
pub use self::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use self::config::{default_anchors, Anchor, DetectorConfig};
pub use self::decode::{candidates, decode_and_nms, decode_cell, nms, Candidate, MAX_DETECTIONS};
pub(crate) use self::decode::sigmoid;
pub use self::detection::Detection;
pub use self::detector::{
    build_model, DetectionOutput, Detector, Node, NodeKind, ScaleGrid, BACKBONE_GROUPS,
};
