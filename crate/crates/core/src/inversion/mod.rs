//! Textual inversion φ and its text-only Stage-1 pretraining.

mod net;
mod stage1;

pub use net::{InversionNet, InversionShape, InversionVars, INVERSION_KIND};
pub use stage1::{
    pretrain, stage1_step, stage1_step_captions, template_sequence, Stage1Config, Stage1Outcome,
    Stage1Step, DEFAULT_TEMPLATE,
};
