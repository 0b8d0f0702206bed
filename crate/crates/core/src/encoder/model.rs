//! Text and vision transformers built on the autodiff graph.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::config::DualEncoderConfig;
use super::image::ImageTensor;
use super::vocab::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Real, Segment, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Samples `N(0, std²)` truncated to two standard deviations.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Parameter indices of one pre-norm transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub qkv_weight: usize,
    pub qkv_bias: usize,
    pub out_weight: usize,
    pub out_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc1_weight: usize,
    pub fc1_bias: usize,
    pub fc2_weight: usize,
    pub fc2_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLayout {
    pub token_embedding: usize,
    pub positional_embedding: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_ln_gain: usize,
    pub final_ln_bias: usize,
    pub projection: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionLayout {
    pub patch_weight: usize,
    pub patch_bias: usize,
    pub class_embedding: usize,
    pub positional_embedding: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_ln_gain: usize,
    pub final_ln_bias: usize,
    pub projection: usize,
}

/// Both encoders' weights in one named parameter set.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Real> {
    config: DualEncoderConfig,
    params: ParamSet<T>,
    text: TextLayout,
    vision: VisionLayout,
}

struct Builder<'a, T: Real, R: Rng + ?Sized> {
    params: ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let t = truncated_normal(self.rng, shape, INIT_STD);
        self.params.push(name, t)
    }

    /// Weight matrix with `std = 1/sqrt(fan_in)`.
    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let t = truncated_normal(self.rng, shape, 1.0 / (shape[0] as f64).sqrt());
        self.params.push(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.params.push(name, Tensor::full(shape, T::from_f64(value)))
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) -> BlockLayout {
        BlockLayout {
            ln1_gain: self.fill(format!("{prefix}.ln1_gain"), &[d], 1.0),
            ln1_bias: self.fill(format!("{prefix}.ln1_bias"), &[d], 0.0),
            qkv_weight: self.weight(format!("{prefix}.qkv_weight"), &[d, 3 * d]),
            qkv_bias: self.fill(format!("{prefix}.qkv_bias"), &[3 * d], 0.0),
            out_weight: self.weight(format!("{prefix}.out_weight"), &[d, d]),
            out_bias: self.fill(format!("{prefix}.out_bias"), &[d], 0.0),
            ln2_gain: self.fill(format!("{prefix}.ln2_gain"), &[d], 1.0),
            ln2_bias: self.fill(format!("{prefix}.ln2_bias"), &[d], 0.0),
            fc1_weight: self.weight(format!("{prefix}.fc1_weight"), &[d, hidden]),
            fc1_bias: self.fill(format!("{prefix}.fc1_bias"), &[hidden], 0.0),
            fc2_weight: self.weight(format!("{prefix}.fc2_weight"), &[hidden, d]),
            fc2_bias: self.fill(format!("{prefix}.fc2_bias"), &[d], 0.0),
        }
    }
}

/// One text in a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TextInput<'a> {
    pub seq: &'a TokenSequence,
    /// `1 × d` embedding for the `<S*>` slot.
    pub pseudo: Option<Var>,
}

/// Graph handles of every encoder parameter, in parameter-set order.
#[derive(Debug, Clone)]
pub struct EncoderVars(Vec<Var>);

impl EncoderVars {
    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn all(&self) -> &[Var] {
        &self.0
    }
}

const INFER_CHUNK: usize = 64;

impl<T: Real> DualEncoder<T> {
    /// Fresh weights: truncated normal for embeddings and projections,
    /// unit layer-norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: DualEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let hidden = config.hidden();
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let token_embedding = b.normal("text.token_embedding".into(), &[config.vocab_size, d]);
        let positional_embedding = b.normal("text.positional_embedding".into(), &[config.max_len, d]);
        let blocks = (0..config.text_layers)
            .map(|i| b.block(&format!("text.block{i}"), d, hidden))
            .collect();
        let text = TextLayout {
            token_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: b.fill("text.final_ln_gain".into(), &[d], 1.0),
            final_ln_bias: b.fill("text.final_ln_bias".into(), &[d], 0.0),
            projection: b.weight("text.projection".into(), &[d, config.d_out]),
        };
        let patch_weight = b.weight("vision.patch_weight".into(), &[config.patch_dim(), d]);
        let patch_bias = b.fill("vision.patch_bias".into(), &[d], 0.0);
        let class_embedding = b.normal("vision.class_embedding".into(), &[1, d]);
        let positional_embedding =
            b.normal("vision.positional_embedding".into(), &[config.num_patches() + 1, d]);
        let blocks = (0..config.vision_layers)
            .map(|i| b.block(&format!("vision.block{i}"), d, hidden))
            .collect();
        let vision = VisionLayout {
            patch_weight,
            patch_bias,
            class_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: b.fill("vision.final_ln_gain".into(), &[d], 1.0),
            final_ln_bias: b.fill("vision.final_ln_bias".into(), &[d], 0.0),
            projection: b.weight("vision.projection".into(), &[d, config.d_out]),
        };
        Ok(Self {
            config,
            params: b.params,
            text,
            vision,
        })
    }

    /// Rebuilds an encoder around loaded parameters, checking that names
    /// and shapes match the layout implied by `config`.
    pub fn from_params(config: DualEncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::init(config, &mut rng)?;
        if template.params.names() != params.names() {
            let unknown = params
                .names()
                .iter()
                .find(|n| template.params.index_of(n).is_none());
            return Err(Error::Checkpoint(match unknown {
                Some(n) => format!("unknown encoder entry {n:?}"),
                None => "encoder entries are missing or out of order".into(),
            }));
        }
        for (i, t) in params.tensors().iter().enumerate() {
            if t.shape() != template.params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {} has shape {:?}, config implies {:?}",
                    params.name(i),
                    t.shape(),
                    template.params.get(i).shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &DualEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn text_layout(&self) -> &TextLayout {
        &self.text
    }

    pub fn vision_layout(&self) -> &VisionLayout {
        &self.vision
    }

    pub fn cast<U: Real>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            params: self.params.cast(),
            text: self.text.clone(),
            vision: self.vision.clone(),
        }
    }

    /// Adds every parameter to `g`; frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderVars {
        EncoderVars(
            self.params
                .tensors()
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        vars: &EncoderVars,
        b: &BlockLayout,
        x: Var,
        segments: &[Segment],
    ) -> Result<Var> {
        let v = |i: usize| vars.var(i);
        let h = g.layer_norm(x, v(b.ln1_gain), v(b.ln1_bias))?;
        let qkv = g.matmul(h, v(b.qkv_weight))?;
        let qkv = g.add_row(qkv, v(b.qkv_bias))?;
        let a = g.attention(qkv, segments, self.config.heads)?;
        let o = g.matmul(a, v(b.out_weight))?;
        let o = g.add_row(o, v(b.out_bias))?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, v(b.ln2_gain), v(b.ln2_bias))?;
        let f = g.matmul(h, v(b.fc1_weight))?;
        let f = g.add_row(f, v(b.fc1_bias))?;
        let f = g.gelu(f);
        let f = g.matmul(f, v(b.fc2_weight))?;
        let f = g.add_row(f, v(b.fc2_bias))?;
        Ok(g.add(x, f)?)
    }

    fn check_prompts(&self, g: &Graph<T>, prompts: Option<Var>) -> Result<usize> {
        let Some(p) = prompts else { return Ok(0) };
        match g.shape(p) {
            [n, w] if *w == self.config.d => {
                if *n > self.config.max_prompts {
                    return Err(Error::Contract(format!(
                        "{n} prompts exceed capacity {}",
                        self.config.max_prompts
                    )));
                }
                Ok(*n)
            }
            s => Err(Error::Contract(format!(
                "prompts of shape {s:?}, expected n × {}",
                self.config.d
            ))),
        }
    }

    /// Interleaves shared prompt rows with per-item row blocks:
    /// `before` puts the prompts first, otherwise last.
    fn with_prompts(
        g: &mut Graph<T>,
        x: Var,
        lens: &[usize],
        prompts: Var,
        before: bool,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(2 * lens.len());
        let mut start = 0;
        for &len in lens {
            let item = g.slice(x, 0, start, len)?;
            start += len;
            if before {
                parts.extend([prompts, item]);
            } else {
                parts.extend([item, prompts]);
            }
        }
        Ok(g.concat(&parts, 0)?)
    }

    fn pool(
        &self,
        g: &mut Graph<T>,
        vars: &EncoderVars,
        x: Var,
        rows: &[usize],
        ln: (usize, usize),
        projection: usize,
    ) -> Result<Var> {
        let pooled = g.gather_rows(x, rows)?;
        let pooled = g.layer_norm(pooled, vars.var(ln.0), vars.var(ln.1))?;
        let f = g.matmul(pooled, vars.var(projection))?;
        Ok(g.l2_normalize(f, 1)?)
    }

    /// Encodes a batch of texts into `B × d_out` normalized features.
    ///
    /// Every row of each sequence is processed (pass trimmed sequences to
    /// skip padding); keys past `[EOS]` are masked. `prompts` (`n × d`)
    /// are concatenated before each sequence without positional embedding,
    /// and the feature is read at the shifted `[EOS]` row.
    pub fn text_forward(
        &self,
        g: &mut Graph<T>,
        vars: &EncoderVars,
        inputs: &[TextInput<'_>],
        prompts: Option<Var>,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("text batch".into()));
        }
        let n = self.check_prompts(g, prompts)?;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut slots = Vec::new();
        let mut pseudo_rows = Vec::new();
        let mut lens = Vec::with_capacity(inputs.len());
        for input in inputs {
            let seq = input.seq;
            let len = seq.ids.len();
            if len > self.config.max_len || seq.eos_position >= len {
                return Err(Error::Contract(format!(
                    "sequence of {len} rows (eos at {}) exceeds positional capacity {}",
                    seq.eos_position, self.config.max_len
                )));
            }
            match (seq.pseudo_slot, input.pseudo) {
                (Some(slot), Some(p)) => {
                    if g.shape(p) != [1, self.config.d] {
                        return Err(Error::Contract(format!(
                            "pseudo embedding of shape {:?}, expected [1, {}]",
                            g.shape(p),
                            self.config.d
                        )));
                    }
                    slots.push(ids.len() + slot);
                    pseudo_rows.push(p);
                }
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::Contract("pseudo slot present but no embedding given".into()))
                }
                (None, Some(_)) => {
                    return Err(Error::Contract("pseudo embedding given for a text without <s*>".into()))
                }
            }
            ids.extend_from_slice(&seq.ids);
            positions.extend(0..len);
            lens.push(len);
        }
        let t = &self.text;
        let mut x = g.embedding(vars.var(t.token_embedding), &ids)?;
        if !pseudo_rows.is_empty() {
            let src = if pseudo_rows.len() == 1 {
                pseudo_rows[0]
            } else {
                g.concat(&pseudo_rows, 0)?
            };
            x = g.replace_rows(x, &slots, src)?;
        }
        let pos = g.gather_rows(vars.var(t.positional_embedding), &positions)?;
        x = g.add(x, pos)?;
        if let Some(p) = prompts {
            x = Self::with_prompts(g, x, &lens, p, true)?;
        }
        let mut segments = Vec::with_capacity(inputs.len());
        let mut pooled = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (input, &len) in inputs.iter().zip(&lens) {
            segments.push(Segment {
                start,
                len: n + len,
                valid: n + input.seq.content_length,
            });
            pooled.push(start + n + input.seq.eos_position);
            start += n + len;
        }
        for b in &t.blocks {
            x = self.block_forward(g, vars, b, x, &segments)?;
        }
        self.pool(g, vars, x, &pooled, (t.final_ln_gain, t.final_ln_bias), t.projection)
    }

    fn patch_matrix(&self, images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let size = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * self.config.num_patches() * self.config.patch_dim());
        for img in images {
            if img.height() != size || img.width() != size {
                return Err(Error::Contract(format!(
                    "image is {}×{}, encoder expects {size}×{size}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(img.patches(self.config.patch_size)?.into_iter().map(|v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new(
            &[images.len() * self.config.num_patches(), self.config.patch_dim()],
            data,
        )?)
    }

    /// Embedded `[CLS]`-plus-patch rows (with positions) for each image,
    /// stacked to `B·(M+1) × d`.
    pub fn patchify_forward(&self, g: &mut Graph<T>, vars: &EncoderVars, images: &[&ImageTensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::EmptyInput("image batch".into()));
        }
        let v = &self.vision;
        let m = self.config.num_patches();
        let patches = g.constant(self.patch_matrix(images)?);
        let e = g.matmul(patches, vars.var(v.patch_weight))?;
        let e = g.add_row(e, vars.var(v.patch_bias))?;
        let cls = vars.var(v.class_embedding);
        let mut parts = Vec::with_capacity(2 * images.len());
        for i in 0..images.len() {
            parts.push(cls);
            parts.push(g.slice(e, 0, i * m, m)?);
        }
        let x = g.concat(&parts, 0)?;
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| 0..=m).collect();
        let pos = g.gather_rows(vars.var(v.positional_embedding), &positions)?;
        Ok(g.add(x, pos)?)
    }

    /// Encodes a batch of images into `B × d_out` normalized features.
    /// `prompts` (`n × d`) are appended after the patch rows of every image.
    pub fn image_forward(
        &self,
        g: &mut Graph<T>,
        vars: &EncoderVars,
        images: &[&ImageTensor],
        prompts: Option<Var>,
    ) -> Result<Var> {
        let n = self.check_prompts(g, prompts)?;
        let v = &self.vision;
        let len = self.config.num_patches() + 1;
        let mut x = self.patchify_forward(g, vars, images)?;
        if let Some(p) = prompts {
            x = Self::with_prompts(g, x, &vec![len; images.len()], p, false)?;
        }
        let segments: Vec<Segment> = (0..images.len())
            .map(|i| Segment {
                start: i * (len + n),
                len: len + n,
                valid: len + n,
            })
            .collect();
        for b in &v.blocks {
            x = self.block_forward(g, vars, b, x, &segments)?;
        }
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.start).collect();
        self.pool(g, vars, x, &cls_rows, (v.final_ln_gain, v.final_ln_bias), v.projection)
    }

    /// Patch embedding sequence (`(M+1) × d`) of one image.
    pub fn patchify(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = self.patchify_forward(&mut g, &vars, &[image])?;
        Ok(g.value(x).clone())
    }

    /// Normalized text feature; `pseudo` fills the `<s*>` slot.
    pub fn encode_text(&self, seq: &TokenSequence, pseudo: Option<&[T]>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let pseudo = match pseudo {
            Some(p) => Some(g.constant(Tensor::new(&[1, p.len()], p.to_vec())?)),
            None => None,
        };
        let f = self.text_forward(&mut g, &vars, &[TextInput { seq, pseudo }], None)?;
        Ok(g.value(f).data().to_vec())
    }

    /// Features of many texts without pseudo-tokens, padding trimmed.
    pub fn encode_texts(&self, seqs: &[TokenSequence]) -> Result<Tensor<T>> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("text batch".into()));
        }
        let mut out = Vec::with_capacity(seqs.len() * self.config.d_out);
        for chunk in seqs.chunks(INFER_CHUNK) {
            let trimmed: Vec<TokenSequence> = chunk.iter().map(TokenSequence::trimmed).collect();
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let inputs: Vec<TextInput> = trimmed
                .iter()
                .map(|seq| TextInput { seq, pseudo: None })
                .collect();
            let f = self.text_forward(&mut g, &vars, &inputs, None)?;
            out.extend_from_slice(g.value(f).data());
        }
        Ok(Tensor::new(&[seqs.len(), self.config.d_out], out)?)
    }

    /// Normalized image feature, optionally with appended visual prompts.
    pub fn encode_image(&self, image: &ImageTensor, prompts: Option<&Tensor<T>>) -> Result<Vec<T>> {
        Ok(self.encode_images(&[image], prompts)?.into_vec())
    }

    pub fn encode_images(&self, images: &[&ImageTensor], prompts: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(Error::EmptyInput("image batch".into()));
        }
        let mut out = Vec::with_capacity(images.len() * self.config.d_out);
        for chunk in images.chunks(INFER_CHUNK) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let p = prompts.map(|p| g.constant(p.clone()));
            let f = self.image_forward(&mut g, &vars, chunk, p)?;
            out.extend_from_slice(g.value(f).data());
        }
        Ok(Tensor::new(&[images.len(), self.config.d_out], out)?)
    }
}
