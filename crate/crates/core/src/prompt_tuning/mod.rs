//! Stage 2: context prompts, the coupling function, the CMPM objective
//! and the fine-tuning loop that trains only those.

mod audit;
mod loss;
mod stage2;
mod state;

pub use audit::{audit_encoder_config, grad_audit, GradAuditConfig, GradAuditReport, ModeAudit};
pub use loss::{
    cmpm_graph, cmpm_loss, match_labels, matching_probabilities, true_matching, CmpmValue, CmpmVars,
    MatchBatch, CMPM_EPS,
};
pub use stage2::{
    composed_forward, composed_sequence, encode_composed, encode_composed_batch, finetune, motadual_loss,
    motadual_step, Frozen, FrozenVars, Stage2Batch, Stage2Config, Stage2Outcome, Stage2Step, TrainTriplet,
    COMPOSED_PREFIX,
};
pub use state::{
    couple, PromptMode, PromptState, PromptVars, COUPLING_BIAS, COUPLING_WEIGHT, CTX_PROMPTS, INIT_TAU,
    LOG_INV_TEMP, PROMPT_KIND,
};
