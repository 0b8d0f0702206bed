use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{expect_entries, load_checkpoint, save_checkpoint, truncated_normal, CheckpointManifest};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Real, Tensor, Var};

pub const PROMPT_KIND: &str = "prompt_state";
pub const CTX_PROMPTS: &str = "ctx_prompts";
pub const COUPLING_WEIGHT: &str = "coupling_weight";
pub const COUPLING_BIAS: &str = "coupling_bias";
pub const LOG_INV_TEMP: &str = "log_inv_temp";

/// Which branches receive context prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    TextualOnly,
    VisualOnly,
    Dual,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::TextualOnly, PromptMode::VisualOnly, PromptMode::Dual];

    pub fn uses_text(self) -> bool {
        matches!(self, PromptMode::TextualOnly | PromptMode::Dual)
    }

    pub fn uses_vision(self) -> bool {
        matches!(self, PromptMode::VisualOnly | PromptMode::Dual)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::TextualOnly => "textual-only",
            PromptMode::VisualOnly => "visual-only",
            PromptMode::Dual => "dual",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode {s:?}")))
    }
}

/// Context prompts `P`, coupling `F(x) = xW + b` and the log inverse
/// temperature `s` (`τ = exp(-s)`).
#[derive(Debug, Clone)]
pub struct PromptState<T: Real> {
    pub mode: PromptMode,
    pub params: ParamSet<T>,
}

/// Default temperature at initialization.
pub const INIT_TAU: f64 = 0.07;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptSnapshot {
    mode: PromptMode,
    n_ctx: usize,
    d: usize,
}

/// Graph handles of a bound prompt state.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub ctx: Var,
    pub weight: Var,
    pub bias: Var,
    pub log_inv_temp: Var,
}

impl<T: Real> PromptState<T> {
    /// Truncated-normal prompts, identity coupling with zero bias, `τ = 0.07`.
    pub fn init<R: Rng + ?Sized>(n_ctx: usize, d: usize, mode: PromptMode, rng: &mut R) -> Result<Self> {
        if n_ctx == 0 || d == 0 {
            return Err(Error::Contract(format!("prompt state needs n ≥ 1 and d ≥ 1, got {n_ctx}, {d}")));
        }
        let mut identity = vec![T::zero(); d * d];
        for i in 0..d {
            identity[i * d + i] = T::one();
        }
        let mut params = ParamSet::new();
        params.push(CTX_PROMPTS, truncated_normal(rng, &[n_ctx, d], 0.02));
        params.push(COUPLING_WEIGHT, Tensor::new(&[d, d], identity)?);
        params.push(COUPLING_BIAS, Tensor::zeros(&[d]));
        params.push(LOG_INV_TEMP, Tensor::scalar(T::from_f64(-INIT_TAU.ln())));
        Ok(Self { mode, params })
    }

    pub fn n_ctx(&self) -> usize {
        self.params.get(0).shape()[0]
    }

    pub fn d(&self) -> usize {
        self.params.get(0).shape()[1]
    }

    pub fn ctx_prompts(&self) -> &Tensor<T> {
        self.params.get(0)
    }

    pub fn tau(&self) -> f64 {
        (-self.params.get(3).item().as_f64()).exp()
    }

    pub fn cast<U: Real>(&self) -> PromptState<U> {
        PromptState {
            mode: self.mode,
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> PromptVars {
        let mut leaf = |i: usize| g.leaf(self.params.get(i).clone(), trainable);
        PromptVars {
            ctx: leaf(0),
            weight: leaf(1),
            bias: leaf(2),
            log_inv_temp: leaf(3),
        }
    }

    /// Visual prompts `P̃ = F(P)` as a plain tensor.
    pub fn visual_prompts(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let out = couple(&mut g, &v)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, stem: &Path, seed: Option<u64>) -> Result<CheckpointManifest> {
        let snapshot = PromptSnapshot {
            mode: self.mode,
            n_ctx: self.n_ctx(),
            d: self.d(),
        };
        save_checkpoint(stem, PROMPT_KIND, &self.params, serde_json::to_value(snapshot)?, seed)
    }
}

impl PromptState<f32> {
    pub fn load(stem: &Path) -> Result<Self> {
        let loaded = load_checkpoint(stem, PROMPT_KIND)?;
        expect_entries(&loaded.params, &[CTX_PROMPTS, COUPLING_WEIGHT, COUPLING_BIAS, LOG_INV_TEMP])?;
        let snap: PromptSnapshot = serde_json::from_value(loaded.manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("prompt config snapshot: {e}")))?;
        let names = [CTX_PROMPTS, COUPLING_WEIGHT, COUPLING_BIAS, LOG_INV_TEMP];
        let shapes = [vec![snap.n_ctx, snap.d], vec![snap.d, snap.d], vec![snap.d], vec![1]];
        let mut params = ParamSet::new();
        for (name, shape) in names.iter().zip(&shapes) {
            let t = loaded.params.by_name(name).expect("checked above");
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("entry {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            params.push(*name, t.clone());
        }
        Ok(Self { mode: snap.mode, params })
    }
}

/// `P̃[i] = F(P[i])`, row-wise.
pub fn couple<T: Real>(g: &mut Graph<T>, v: &PromptVars) -> Result<Var> {
    let x = g.matmul(v.ctx, v.weight)?;
    Ok(g.add_row(x, v.bias)?)
}
