//! Text-only pretraining of φ: a noisy caption feature is inverted into
//! `<S*>`, re-encoded through the template and matched back to the caption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::net::InversionNet;
use crate::encoder::{tokenize, DualEncoder, TextInput, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, lr_at, AdamWConfig, Graph, OptimizerState, ParamSet, Real, ScheduleSpec, Tensor};
use crate::prompt_tuning::{cmpm_graph, match_labels, CMPM_EPS, INIT_TAU};
use crate::training::{EpochSampler, LossCurve};

pub const DEFAULT_TEMPLATE: &str = "a photo of <S*>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub noise_std: f64,
    pub template: String,
    pub seed: u64,
    pub log_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 2000,
            base_lr: 1e-4,
            noise_std: 0.1,
            template: DEFAULT_TEMPLATE.into(),
            seed: 0,
            log_every: 10,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "stage1 batch_size {} < 2: the contrastive loss needs negatives",
                self.batch_size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("stage1 noise_std {} < 0", self.noise_std)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::Config(format!("stage1 base_lr {} < 0", self.base_lr)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec::constant(self.base_lr, self.total_steps)
    }
}

/// Tokenized template; it must hold exactly one `<S*>`.
pub fn template_sequence(template: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let seq = tokenize(template, vocab, max_len)?;
    if seq.pseudo_slot.is_none() {
        return Err(Error::Config(format!("template {template:?} has no <S*> slot")));
    }
    Ok(seq.trimmed())
}

/// Result of one Stage-1 forward/backward pass.
#[derive(Debug, Clone)]
pub struct Stage1Step<T> {
    pub loss: f64,
    pub net_grads: Vec<Tensor<T>>,
    pub temp_grad: Tensor<T>,
    /// Always zero: the encoder enters the graph as constants.
    pub encoder_grads: Vec<Tensor<T>>,
}

/// Loss and gradients for precomputed caption features `features`
/// (`B × d_out`) perturbed by `noise`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<T: Real>(
    encoder: &DualEncoder<T>,
    net: &InversionNet<T>,
    log_inv_temp: &Tensor<T>,
    template: &TokenSequence,
    features: &Tensor<T>,
    noise: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<Stage1Step<T>> {
    let (b, _) = features.dims2();
    if b < 2 {
        return Err(Error::Contract(format!("stage1 batch of {b} < 2")));
    }
    let mut g = Graph::new();
    let enc_vars = encoder.bind(&mut g, false);
    let net_vars = net.bind(&mut g, true);
    let temp = g.param(log_inv_temp.clone());
    let target = g.constant(features.clone());
    let noisy = g.add_const(target, noise)?;
    let pseudo = net.forward(&mut g, &net_vars, noisy)?;
    let mut inputs = Vec::with_capacity(b);
    for i in 0..b {
        let row = g.slice(pseudo, 0, i, 1)?;
        inputs.push(TextInput {
            seq: template,
            pseudo: Some(row),
        });
    }
    let reencoded = encoder.text_forward(&mut g, &enc_vars, &inputs, None)?;
    let loss = cmpm_graph(&mut g, reencoded, target, temp, labels, CMPM_EPS)?;
    let value = g.value(loss.total).item().as_f64();
    let grads = g.backward(loss.total)?;
    Ok(Stage1Step {
        loss: value,
        net_grads: net_vars.all().iter().map(|&v| grads.get_or_zeros(v)).collect(),
        temp_grad: grads.get_or_zeros(temp),
        encoder_grads: enc_vars.all().iter().map(|&v| grads.get_or_zeros(v)).collect(),
    })
}

/// Stage-1 step from raw captions: encodes them, draws the feature noise
/// from `rng`, and evaluates [`stage1_step`].
pub fn stage1_step_captions<T: Real, R: rand::Rng + ?Sized>(
    encoder: &DualEncoder<T>,
    vocab: &Vocabulary,
    net: &InversionNet<T>,
    log_inv_temp: &Tensor<T>,
    captions: &[&str],
    config: &Stage1Config,
    rng: &mut R,
) -> Result<Stage1Step<T>> {
    if captions.len() < 2 {
        return Err(Error::Contract(format!("stage1 batch of {} < 2", captions.len())));
    }
    let max_len = encoder.config().max_len;
    let template = template_sequence(&config.template, vocab, max_len)?;
    let seqs = captions
        .iter()
        .map(|c| tokenize(c, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let features = encoder.encode_texts(&seqs)?;
    let noise = gaussian(features.shape(), config.noise_std, rng)?;
    let labels = match_labels(captions)?;
    stage1_step(encoder, net, log_inv_temp, &template, &features, &noise, &labels)
}

fn gaussian<T: Real, R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    Ok(Tensor::new(shape, (0..n).map(|_| T::from_f64(normal.sample(rng))).collect())?)
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub net: InversionNet<f32>,
    pub log_inv_temp: f32,
    pub curve: LossCurve,
}

/// Trains φ on caption text only; the encoder stays frozen.
pub fn pretrain(
    encoder: &DualEncoder<f32>,
    vocab: &Vocabulary,
    captions: &[String],
    config: &Stage1Config,
) -> Result<Stage1Outcome> {
    config.validate()?;
    if captions.is_empty() {
        return Err(Error::EmptyInput("caption corpus".into()));
    }
    let enc_cfg = encoder.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = InversionNet::<f32>::init(enc_cfg.d_out, enc_cfg.d, &mut rng)?;
    let mut temp = Tensor::scalar(-(INIT_TAU.ln()) as f32);
    let mut curve = LossCurve::default();
    if config.total_steps == 0 {
        return Ok(Stage1Outcome {
            net,
            log_inv_temp: temp.item(),
            curve,
        });
    }
    let template = template_sequence(&config.template, vocab, enc_cfg.max_len)?;
    let seqs = captions
        .iter()
        .map(|c| tokenize(c, vocab, enc_cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let features = encoder.encode_texts(&seqs)?;
    let d_out = enc_cfg.d_out;

    let mut trainable = net.params().clone();
    trainable.push("log_inv_temp", temp.clone());
    let mut opt = OptimizerState::new(&trainable, config.optimizer);
    let schedule = config.schedule();
    let mut sampler = EpochSampler::new(captions.len());
    let batch = config.batch_size.min(captions.len());
    for step in 0..config.total_steps {
        let idx = sampler.next_batch(&mut rng, batch);
        let mut feats = Vec::with_capacity(idx.len() * d_out);
        for &i in &idx {
            feats.extend_from_slice(features.row(i));
        }
        let feats = Tensor::new(&[idx.len(), d_out], feats)?;
        let noise = gaussian(feats.shape(), config.noise_std, &mut rng)?;
        let texts: Vec<&str> = idx.iter().map(|&i| captions[i].as_str()).collect();
        let labels = match_labels(&texts)?;
        let out = stage1_step(encoder, &net, &temp, &template, &feats, &noise, &labels)?;
        let lr = lr_at(&schedule, step)?;
        if step % config.log_every.max(1) == 0 || step + 1 == config.total_steps {
            curve.push(step, out.loss, lr);
        }
        let mut grads = out.net_grads;
        grads.push(out.temp_grad);
        adamw_step(&mut trainable, &grads, &mut opt, lr, None)?;
        split_into(&trainable, net.params_mut(), &mut temp);
    }
    Ok(Stage1Outcome {
        net,
        log_inv_temp: temp.item(),
        curve,
    })
}

fn split_into(all: &ParamSet<f32>, net: &mut ParamSet<f32>, temp: &mut Tensor<f32>) {
    for i in 0..net.len() {
        *net.get_mut(i) = all.get(i).clone();
    }
    *temp = all.get(net.len()).clone();
}
