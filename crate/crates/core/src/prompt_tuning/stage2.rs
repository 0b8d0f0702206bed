//! MoTaDual Stage 2: composed forward pass and prompt fine-tuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cmpm_graph, match_labels, CMPM_EPS};
use super::state::{couple, PromptMode, PromptState, PromptVars};
use crate::encoder::{tokenize, DualEncoder, EncoderVars, ImageTensor, TextInput, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::inversion::{InversionNet, InversionVars};
use crate::numerics::{adamw_step, lr_at, AdamWConfig, Graph, OptimizerState, Real, ScheduleSpec, Tensor, Var};
use crate::training::{EpochSampler, LossCurve};

/// Text placed before the modification in a composed query.
pub const COMPOSED_PREFIX: &str = "a photo of <S*> that";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub n_ctx: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: PromptMode,
    pub log_every: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            n_ctx: 8,
            batch_size: 32,
            total_steps: 500,
            warmup_steps: 100,
            base_lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            mode: PromptMode::Dual,
            log_every: 10,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_ctx == 0 {
            return Err(Error::Config("stage2 n_ctx must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("stage2 batch_size {} < 2", self.batch_size)));
        }
        self.schedule().validate().map_err(|e| Error::Config(format!("stage2 schedule: {e}")))
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec::warmup_cosine(self.base_lr, self.warmup_steps, self.total_steps)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Tokenizes `"a photo of <S*> that " + modification`, trimmed.
/// Overlong modifications are truncated with a warning.
pub fn composed_sequence(vocab: &Vocabulary, modification: &str, max_len: usize) -> Result<TokenSequence> {
    let seq = tokenize(&format!("{COMPOSED_PREFIX} {modification}"), vocab, max_len)?;
    if seq.truncated {
        log::warn!("composed query truncated to {max_len} tokens: {modification:?}");
    }
    if seq.pseudo_slot.is_none() {
        return Err(Error::Contract("composed query lost its <S*> slot".into()));
    }
    Ok(seq.trimmed())
}

/// The frozen encoder and inversion network.
#[derive(Debug, Clone, Copy)]
pub struct Frozen<'a, T: Real> {
    pub encoder: &'a DualEncoder<T>,
    pub net: &'a InversionNet<T>,
}

/// Frozen components bound into one graph.
pub struct FrozenVars {
    pub encoder: EncoderVars,
    pub net: InversionVars,
}

impl<T: Real> Frozen<'_, T> {
    pub fn bind(&self, g: &mut Graph<T>) -> FrozenVars {
        FrozenVars {
            encoder: self.encoder.bind(g, false),
            net: self.net.bind(g, false),
        }
    }
}

/// Composed features `f_c` for a batch of (reference image, query sequence).
///
/// `prompts` is `None` for the unprompted Stage-1 baseline. When the
/// vision branch is unprompted, `cached_pseudo` may carry precomputed
/// `φ(f_v)` rows (`B × d`) so the image tower is skipped.
pub fn composed_forward<T: Real>(
    g: &mut Graph<T>,
    frozen: Frozen<'_, T>,
    vars: &FrozenVars,
    prompts: Option<(&PromptVars, PromptMode)>,
    images: &[&ImageTensor],
    seqs: &[&TokenSequence],
    cached_pseudo: Option<&Tensor<T>>,
) -> Result<Var> {
    let b = seqs.len();
    let visual = prompts.filter(|(_, m)| m.uses_vision());
    let pseudo = match (visual, cached_pseudo) {
        (Some((pv, _)), _) => {
            if images.len() != b {
                return Err(Error::Contract(format!("{} images for {b} queries", images.len())));
            }
            let p_tilde = couple(g, pv)?;
            let fv = frozen.encoder.image_forward(g, &vars.encoder, images, Some(p_tilde))?;
            frozen.net.forward(g, &vars.net, fv)?
        }
        (None, Some(cache)) => {
            if cache.dims2().0 != b {
                return Err(Error::Contract(format!("{} cached pseudo rows for {b} queries", cache.dims2().0)));
            }
            g.constant(cache.clone())
        }
        (None, None) => {
            if images.len() != b {
                return Err(Error::Contract(format!("{} images for {b} queries", images.len())));
            }
            let fv = frozen.encoder.image_forward(g, &vars.encoder, images, None)?;
            frozen.net.forward(g, &vars.net, fv)?
        }
    };
    let mut inputs = Vec::with_capacity(b);
    for (i, seq) in seqs.iter().enumerate() {
        let row = g.slice(pseudo, 0, i, 1)?;
        inputs.push(TextInput {
            seq,
            pseudo: Some(row),
        });
    }
    let text_prompts = prompts.filter(|(_, m)| m.uses_text()).map(|(pv, _)| pv.ctx);
    frozen.encoder.text_forward(g, &vars.encoder, &inputs, text_prompts)
}

/// One Stage-2 training batch.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Batch<'a, T> {
    pub images: &'a [&'a ImageTensor],
    pub seqs: &'a [&'a TokenSequence],
    /// Unprompted target-text features, `B × d_out`.
    pub targets: &'a Tensor<T>,
    pub labels: &'a Tensor<T>,
    pub cached_pseudo: Option<&'a Tensor<T>>,
}

/// Builds `L_mtda` for the batch on `g` with `pv` as the prompt leaves.
pub fn motadual_loss<T: Real>(
    g: &mut Graph<T>,
    frozen: Frozen<'_, T>,
    vars: &FrozenVars,
    pv: &PromptVars,
    mode: PromptMode,
    batch: &Stage2Batch<'_, T>,
) -> Result<Var> {
    if batch.seqs.len() < 2 {
        return Err(Error::Contract(format!("stage2 batch of {} < 2", batch.seqs.len())));
    }
    let fc = composed_forward(g, frozen, vars, Some((pv, mode)), batch.images, batch.seqs, batch.cached_pseudo)?;
    let ft = g.constant(batch.targets.clone());
    Ok(cmpm_graph(g, fc, ft, pv.log_inv_temp, batch.labels, CMPM_EPS)?.total)
}

#[derive(Debug, Clone)]
pub struct Stage2Step<T> {
    pub loss: f64,
    /// Aligned with the entries of the prompt state.
    pub grads: Vec<Tensor<T>>,
    /// Encoder then φ gradients; zero by construction.
    pub frozen_grads: Vec<Tensor<T>>,
}

pub fn motadual_step<T: Real>(
    frozen: Frozen<'_, T>,
    state: &PromptState<T>,
    batch: &Stage2Batch<'_, T>,
) -> Result<Stage2Step<T>> {
    let mut g = Graph::new();
    let vars = frozen.bind(&mut g);
    let pv = state.bind(&mut g, true);
    let loss = motadual_loss(&mut g, frozen, &vars, &pv, state.mode, batch)?;
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let frozen_vars = vars.encoder.all().iter().chain(vars.net.all());
    Ok(Stage2Step {
        loss: value,
        grads: [pv.ctx, pv.weight, pv.bias, pv.log_inv_temp]
            .iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect(),
        frozen_grads: frozen_vars.map(|&v| grads.get_or_zeros(v)).collect(),
    })
}

/// A training triplet with its reference image loaded.
#[derive(Debug, Clone)]
pub struct TrainTriplet {
    pub image: ImageTensor,
    pub modification: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub state: PromptState<f32>,
    pub curve: LossCurve,
}

/// Fine-tunes prompts, coupling and temperature with everything else frozen.
pub fn finetune(
    frozen: Frozen<'_, f32>,
    vocab: &Vocabulary,
    triplets: &[TrainTriplet],
    config: &Stage2Config,
) -> Result<Stage2Outcome> {
    config.validate()?;
    let enc_cfg = frozen.encoder.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = PromptState::<f32>::init(config.n_ctx, enc_cfg.d, config.mode, &mut rng)?;
    let mut curve = LossCurve::default();
    if config.total_steps == 0 {
        return Ok(Stage2Outcome { state, curve });
    }
    if triplets.len() < 2 {
        return Err(Error::EmptyInput("stage2 needs at least two triplets".into()));
    }
    let max_len = enc_cfg.max_len;
    let seqs = triplets
        .iter()
        .map(|t| composed_sequence(vocab, &t.modification, max_len))
        .collect::<Result<Vec<_>>>()?;
    let target_seqs = triplets
        .iter()
        .map(|t| tokenize(&t.target, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let targets = frozen.encoder.encode_texts(&target_seqs)?;
    let d_out = enc_cfg.d_out;
    let pseudo_cache = if config.mode.uses_vision() {
        None
    } else {
        let images: Vec<&ImageTensor> = triplets.iter().map(|t| &t.image).collect();
        let fv = frozen.encoder.encode_images(&images, None)?;
        Some(frozen.net.invert_batch(&fv)?)
    };

    let mut opt = OptimizerState::new(&state.params, config.optimizer());
    let schedule = config.schedule();
    let mut sampler = EpochSampler::new(triplets.len());
    let batch_size = config.batch_size.min(triplets.len());
    for step in 0..config.total_steps {
        let idx = sampler.next_batch(&mut rng, batch_size);
        let images: Vec<&ImageTensor> = idx.iter().map(|&i| &triplets[i].image).collect();
        let batch_seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let mut t = Vec::with_capacity(idx.len() * d_out);
        for &i in &idx {
            t.extend_from_slice(targets.row(i));
        }
        let batch_targets = Tensor::new(&[idx.len(), d_out], t)?;
        let names: Vec<&str> = idx.iter().map(|&i| triplets[i].target.as_str()).collect();
        let labels = match_labels(&names)?;
        let cached = match &pseudo_cache {
            Some(cache) => {
                let d = cache.dims2().1;
                let mut rows = Vec::with_capacity(idx.len() * d);
                for &i in &idx {
                    rows.extend_from_slice(cache.row(i));
                }
                Some(Tensor::new(&[idx.len(), d], rows)?)
            }
            None => None,
        };
        let batch = Stage2Batch {
            images: &images,
            seqs: &batch_seqs,
            targets: &batch_targets,
            labels: &labels,
            cached_pseudo: cached.as_ref(),
        };
        let out = motadual_step(frozen, &state, &batch)?;
        let lr = lr_at(&schedule, step + 1)?;
        if step % config.log_every.max(1) == 0 || step + 1 == config.total_steps {
            curve.push(step, out.loss, lr);
        }
        adamw_step(&mut state.params, &out.grads, &mut opt, lr, None)?;
    }
    Ok(Stage2Outcome { state, curve })
}

/// Composed features for many queries, with `state = None` giving the
/// unprompted Stage-1 baseline.
pub fn encode_composed_batch<T: Real>(
    frozen: Frozen<'_, T>,
    state: Option<&PromptState<T>>,
    images: &[&ImageTensor],
    seqs: &[TokenSequence],
) -> Result<Tensor<T>> {
    if seqs.is_empty() || images.len() != seqs.len() {
        return Err(Error::Contract(format!("{} images for {} queries", images.len(), seqs.len())));
    }
    const CHUNK: usize = 64;
    let d_out = frozen.encoder.config().d_out;
    let mut out = Vec::with_capacity(seqs.len() * d_out);
    for (imgs, chunk) in images.chunks(CHUNK).zip(seqs.chunks(CHUNK)) {
        let mut g = Graph::new();
        let vars = frozen.bind(&mut g);
        let pv = state.map(|s| (s.bind(&mut g, false), s.mode));
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let fc = composed_forward(&mut g, frozen, &vars, pv.as_ref().map(|(v, m)| (v, *m)), imgs, &refs, None)?;
        out.extend_from_slice(g.value(fc).data());
    }
    Ok(Tensor::new(&[seqs.len(), d_out], out)?)
}

/// `f_c` for one reference image and modification text.
pub fn encode_composed<T: Real>(
    frozen: Frozen<'_, T>,
    vocab: &Vocabulary,
    state: Option<&PromptState<T>>,
    image: &ImageTensor,
    modification: &str,
) -> Result<Vec<T>> {
    let seq = composed_sequence(vocab, modification, frozen.encoder.config().max_len)?;
    Ok(encode_composed_batch(frozen, state, &[image], &[seq])?.into_vec())
}
