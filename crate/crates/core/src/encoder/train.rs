//! Contrastive image–caption pretraining of the dual encoder (stage 0).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, DualEncoder, DualEncoderConfig, ImageTensor, TextInput, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, lr_at, AdamWConfig, Graph, OptimizerState, ScheduleSpec, Tensor};
use crate::prompt_tuning::{cmpm_graph, match_labels, CMPM_EPS, INIT_TAU};
use crate::training::{EpochSampler, LossCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 3000,
            warmup_steps: 100,
            base_lr: 5e-4,
            weight_decay: 0.01,
            seed: 0,
            log_every: 10,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("stage0 batch_size {} < 2", self.batch_size)));
        }
        self.schedule().validate().map_err(|e| Error::Config(format!("stage0 schedule: {e}")))
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec::warmup_cosine(self.base_lr, self.warmup_steps, self.total_steps)
    }
}

/// A rendered image and its caption.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub image: ImageTensor,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct EncoderTrainOutcome {
    pub encoder: DualEncoder<f32>,
    pub log_inv_temp: f32,
    pub curve: LossCurve,
}

/// Symmetric image↔caption matching loss and gradients for one batch;
/// gradients follow the encoder parameter order, then the temperature.
pub fn encoder_step(
    encoder: &DualEncoder<f32>,
    log_inv_temp: &Tensor<f32>,
    images: &[&ImageTensor],
    seqs: &[&TokenSequence],
    labels: &Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let vars = encoder.bind(&mut g, true);
    let temp = g.param(log_inv_temp.clone());
    let fv = encoder.image_forward(&mut g, &vars, images, None)?;
    let inputs: Vec<TextInput> = seqs.iter().map(|seq| TextInput { seq, pseudo: None }).collect();
    let ft = encoder.text_forward(&mut g, &vars, &inputs, None)?;
    let loss = cmpm_graph(&mut g, fv, ft, temp, labels, CMPM_EPS)?;
    let value = g.value(loss.total).item() as f64;
    let grads = g.backward(loss.total)?;
    let mut out: Vec<Tensor<f32>> = vars.all().iter().map(|&v| grads.get_or_zeros(v)).collect();
    out.push(grads.get_or_zeros(temp));
    Ok((value, out))
}

/// Trains a freshly initialized encoder on (image, caption) pairs.
pub fn train_encoder(
    config: DualEncoderConfig,
    vocab: &Vocabulary,
    data: &[CaptionedImage],
    train: &EncoderTrainConfig,
) -> Result<EncoderTrainOutcome> {
    train.validate()?;
    config.validate()?;
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} but vocabulary holds {} tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut encoder = DualEncoder::<f32>::init(config, &mut rng)?;
    let mut curve = LossCurve::default();
    let init_temp = -(INIT_TAU.ln()) as f32;
    if train.total_steps == 0 {
        return Ok(EncoderTrainOutcome {
            encoder,
            log_inv_temp: init_temp,
            curve,
        });
    }
    if data.len() < 2 {
        return Err(Error::EmptyInput("stage0 needs at least two captioned images".into()));
    }
    let max_len = encoder.config().max_len;
    let seqs = data
        .iter()
        .map(|d| tokenize(&d.caption, vocab, max_len).map(|s| s.trimmed()))
        .collect::<Result<Vec<_>>>()?;
    let mut params = encoder.params().clone();
    let n_enc = params.len();
    params.push("log_inv_temp", Tensor::scalar(init_temp));
    let mut opt = OptimizerState::new(
        &params,
        AdamWConfig {
            weight_decay: train.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let schedule = train.schedule();
    let mut sampler = EpochSampler::new(data.len());
    let batch = train.batch_size.min(data.len());
    for step in 0..train.total_steps {
        let idx = sampler.next_batch(&mut rng, batch);
        let images: Vec<&ImageTensor> = idx.iter().map(|&i| &data[i].image).collect();
        let batch_seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let names: Vec<&str> = idx.iter().map(|&i| data[i].caption.as_str()).collect();
        let labels = match_labels(&names)?;
        let temp = params.get(n_enc).clone();
        let (loss, grads) = encoder_step(&encoder, &temp, &images, &batch_seqs, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite {
                name: format!("stage0 loss at step {step}"),
            }));
        }
        let lr = lr_at(&schedule, step + 1)?;
        if step % train.log_every.max(1) == 0 || step + 1 == train.total_steps {
            curve.push(step, loss, lr);
        }
        adamw_step(&mut params, &grads, &mut opt, lr, None)?;
        for i in 0..n_enc {
            *encoder.params_mut().get_mut(i) = params.get(i).clone();
        }
    }
    Ok(EncoderTrainOutcome {
        log_inv_temp: params.get(n_enc).item(),
        encoder,
        curve,
    })
}

/// Fraction of captions whose own image is among the `k` most similar
/// images of the set (ties by index).
pub fn caption_image_recall(
    encoder: &DualEncoder<f32>,
    vocab: &Vocabulary,
    data: &[CaptionedImage],
    k: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("recall set".into()));
    }
    let max_len = encoder.config().max_len;
    let seqs = data
        .iter()
        .map(|d| tokenize(&d.caption, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let ft = encoder.encode_texts(&seqs)?;
    let images: Vec<&ImageTensor> = data.iter().map(|d| &d.image).collect();
    let fv = encoder.encode_images(&images, None)?;
    let mut hits = 0;
    for i in 0..data.len() {
        let sims: Vec<f64> = (0..data.len())
            .map(|j| ft.row(i).iter().zip(fv.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect();
        let own = sims[i];
        let rank = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
