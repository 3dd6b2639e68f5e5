//! Recover phase: learnable distilled images optimized by statistic matching
//! against a pool of pretrained backbones, with spectral densification.

mod losses;
mod plan;
mod run;
mod store;

pub use losses::{
    bn_loss, conv_loss, dd_loss, drop_mask, plain_term, sds_bn_loss, sds_conv_loss, sds_term, ConvMatch, EmaStat,
    EmaTotals, CONV_FAMILIES, DD_MAX_SIDE,
};
pub use plan::{BatchPlan, PlanMode, MAX_PER_CLASS};
pub use run::{
    clamp_to_bounds, draw_backbone, init_synthetic, run_synthesis, synth_step, BatchState, InitMode, Member,
    StepLosses, SynthesisConfig, SynthesisOutcome, SyntheticDataset,
};
pub use store::{distilled_hash, load_synthetic, save_synthetic, DISTILLED_MANIFEST};
