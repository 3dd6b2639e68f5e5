//! Candidate backbones: specs, models with taps, pretraining and persistence.

mod model;
mod persist;
mod spec;
mod train;

pub use model::{
    argmax, BatchStats, BnTap, Forward, Mode, Model, RunningStats, TapShape, BN_EPS, BN_MOMENTUM,
};
pub use persist::{load_model, save_model, MODEL_MANIFEST};
pub use spec::{count_convs, BackboneSpec, Layer, PRESETS};
pub use train::{pretrain, pretrain_pool, PretrainConfig, PretrainReport};

