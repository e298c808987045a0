//! Slot-guided source-free adaptation for a compact set-prediction detector.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod cgsc;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod hsa;
pub mod hungarian;
pub mod image;
pub mod math;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod slots;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use adaptation::{
    adapt, adapt_step, filter_pseudo_labels, pretrain, pretrain_step, teacher_ema_update, threshold_at, AdaptConfig, AdaptState,
    AdaptTrace, PretrainConfig, ScheduleKind, ThresholdSchedule,
};
pub use cgsc::{
    assign_slot_labels, slot_class_prototypes, slot_contrast_loss, update_prototype_memory, weighted_slots, ContrastMode, PrototypeMemory,
    WeightedSlotSet,
};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::RunConfig;
pub use detector::{detect, detection_loss, encode_image, Detection, Detector, DetectorConfig, LossConfig, LossReport, QuerySet, Target};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use hsa::{fuse_slot_queries, hsa_decompose, hsa_rec_loss, Hsa, HsaConfig, HsaOutput, SlotMapper};
pub use hungarian::{hungarian_assign, Assignment, Sense};
pub use image::{BBox, Image};
pub use model::{Model, ModelConfig};
pub use nn::{sgd_update, GruCell, Linear, ParamSet};
pub use par::ExecMode;
pub use rng::Rng;
pub use slots::{
    decode_slots, init_slots, position_ramps, run_slot_attention, slot_attention_step, AttentionAxis, BroadcastDecoder, FeatureMap,
    MaskStack, SlotAttention, SlotSet,
};
pub use synth::{evaluate, generate_dataset, generate_scene, Domain, EvalResult, Scene, SynthConfig};
pub use tensor::Tensor;
