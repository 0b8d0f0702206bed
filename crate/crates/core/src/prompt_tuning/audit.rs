//! Double-precision finite-difference audit of the Stage-2 gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::match_labels;
use super::stage2::{composed_sequence, motadual_loss, Frozen, Stage2Batch};
use super::state::{PromptMode, PromptState, PromptVars};
use crate::encoder::{tokenize, DualEncoder, DualEncoderConfig, ImageTensor, Vocabulary};
use crate::error::{Error, Result};
use crate::inversion::InversionNet;
use crate::numerics::{grad_check, GradCheckReport, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradAuditConfig {
    pub d: usize,
    pub batch: usize,
    pub n_ctx: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub modes: Vec<PromptMode>,
}

impl Default for GradAuditConfig {
    fn default() -> Self {
        Self {
            d: 8,
            batch: 3,
            n_ctx: 2,
            epsilon: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            modes: PromptMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAudit {
    pub mode: PromptMode,
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// Largest gradient magnitude reaching a frozen parameter.
    pub frozen_grad_max: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradAuditReport {
    pub config: GradAuditConfig,
    pub modes: Vec<ModeAudit>,
    pub passed: bool,
}

/// Encoder dimensions used by the audit.
pub fn audit_encoder_config(d: usize) -> DualEncoderConfig {
    DualEncoderConfig {
        d,
        d_out: d,
        heads: 2,
        text_layers: 1,
        vision_layers: 1,
        max_len: 16,
        image_size: 16,
        patch_size: 8,
        mlp_ratio: 2,
        max_prompts: 8,
        ..Default::default()
    }
}

const MODIFICATIONS: [&str; 4] = [
    "turn the circle blue",
    "add a red square",
    "remove the triangle",
    "make the background black",
];
const TARGETS: [&str; 4] = [
    "a blue circle on a white background",
    "a red square on a gray background",
    "a green circle on a pink background",
    "a yellow triangle on a black background",
];

/// Checks `∂L/∂{P, W, b, s}` through both encoders and φ against central
/// differences, for each requested prompt mode.
pub fn grad_audit(config: &GradAuditConfig) -> Result<GradAuditReport> {
    if config.batch < 2 || config.batch > MODIFICATIONS.len() {
        return Err(Error::Config(format!("audit batch must be 2..={}", MODIFICATIONS.len())));
    }
    let vocab = Vocabulary::synthetic();
    let enc_cfg = audit_encoder_config(config.d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoder = DualEncoder::<f64>::init(enc_cfg.clone(), &mut rng)?;
    let net = InversionNet::<f64>::init(enc_cfg.d_out, enc_cfg.d, &mut rng)?;
    let size = enc_cfg.image_size;
    let images: Vec<ImageTensor> = (0..config.batch)
        .map(|_| ImageTensor::new(size, size, (0..3 * size * size).map(|_| rng.gen()).collect()))
        .collect::<Result<_>>()?;
    let image_refs: Vec<&ImageTensor> = images.iter().collect();
    let seqs = MODIFICATIONS[..config.batch]
        .iter()
        .map(|m| composed_sequence(&vocab, m, enc_cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let seq_refs: Vec<_> = seqs.iter().collect();
    let target_seqs = TARGETS[..config.batch]
        .iter()
        .map(|t| tokenize(t, &vocab, enc_cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let targets = encoder.encode_texts(&target_seqs)?;
    let labels: Tensor<f64> = match_labels(&TARGETS[..config.batch])?;
    let frozen = Frozen {
        encoder: &encoder,
        net: &net,
    };

    let mut modes = Vec::new();
    for &mode in &config.modes {
        let mut state = PromptState::<f64>::init(config.n_ctx, enc_cfg.d, mode, &mut rng)?;
        // move the coupling away from its identity / zero start
        for i in 1..3 {
            for v in state.params.get_mut(i).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let batch = Stage2Batch {
            images: &image_refs,
            seqs: &seq_refs,
            targets: &targets,
            labels: &labels,
            cached_pseudo: None,
        };
        let report: GradCheckReport = grad_check(
            |g, v| {
                let vars = frozen.bind(g);
                let pv = PromptVars {
                    ctx: v[0],
                    weight: v[1],
                    bias: v[2],
                    log_inv_temp: v[3],
                };
                Ok(motadual_loss(g, frozen, &vars, &pv, mode, &batch)
                    .map_err(|e| crate::numerics::NumericsError::Contract(e.to_string()))?)
            },
            state.params.tensors(),
            config.epsilon,
        )?;
        let step = super::stage2::motadual_step(frozen, &state, &batch)?;
        let frozen_grad_max = step
            .frozen_grads
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        modes.push(ModeAudit {
            mode,
            max_relative_error: report.max_relative_error,
            entries_checked: report.entries_checked,
            frozen_grad_max,
            passed: report.max_relative_error < config.tolerance && frozen_grad_max == 0.0,
        });
    }
    let passed = modes.iter().all(|m| m.passed);
    Ok(GradAuditReport {
        config: config.clone(),
        modes,
        passed,
    })
}
