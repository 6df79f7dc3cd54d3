//! YOLOv8-style anchor-free detector with optional Global Context blocks in
//! the neck, plus the data, training and evaluation pipeline around it.
//!
//! Everything runs on the CPU with hand-written forward and backward passes.
//! Layers are generic over [`Scalar`] so gradient checks can run in `f64`
//! while training and inference use `f32`.

pub mod assign;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gcblock;
pub mod nn;
pub mod tensor;
pub mod train;

pub use assign::{
    assign_targets, ciou, ciou_with_grad, compute_loss, detection_loss, detection_loss_with_grad, AssignConfig,
    Assignment, LossBreakdown, LossConfig,
};
pub use data::{
    augment_blend, build_augmented_trainset, letterbox, load_dataset, save_dataset, split_dataset, split_ids,
    synth_generate, to_batch, AugmentConfig, BoxLabel, Image, ImageSample, SplitManifest, SynthConfig,
};
pub use detector::{
    build_detector, decode_boxes, Checkpoint, Detector, DetectorConfig, ModelSize, ModelStats, RawPredictions,
    ScaleOutput,
};
pub use error::{Error, Result};
pub use eval::{
    benchmark_inference, evaluate_detections, iou, nms, Detection, EvalReport, GroundTruth, GtBox, TimingStats,
};
pub use gcblock::{gc_attention, gc_forward, gc_param_count, GcBlock, GcConfig, GcWeights};
pub use nn::Mode;
pub use tensor::{FeatureMap, Scalar, Tensor};
pub use train::{lr_schedule, run_training, run_training_on, TrainConfig, TrainHistory};
