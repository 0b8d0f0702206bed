//! Experiment configuration: paper profiles, JSON overlays and fingerprints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::{BenchmarkConfig, HttpBackendConfig, CORPUS_FILE};
use crate::encoder::{DualEncoderConfig, EncoderTrainConfig};
use crate::error::{io_err, Error, Result};
use crate::inversion::Stage1Config;
use crate::prompt_tuning::{GradAuditConfig, PromptMode, Stage2Config};
use crate::retrieval_eval::EvalKs;

/// Stage-2 batch size of the paper's per-dataset rows.
pub const PAPER_STAGE2_BATCH: usize = 128;
/// Stage-2 batch size used at desk scale.
pub const DESK_STAGE2_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    FashioniqLike,
    CirrLike,
    CircoLike,
    GenecisLike,
    #[default]
    DeskDefault,
}

/// Stage-2 hyperparameters of one profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub n_ctx: usize,
    /// Batch size the row was specified with.
    pub reference_batch: usize,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::FashioniqLike,
        Profile::CirrLike,
        Profile::CircoLike,
        Profile::GenecisLike,
        Profile::DeskDefault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::FashioniqLike => "fashioniq-like",
            Profile::CirrLike => "cirr-like",
            Profile::CircoLike => "circo-like",
            Profile::GenecisLike => "genecis-like",
            Profile::DeskDefault => "desk-default",
        }
    }

    /// The Stage-2 row; the four dataset profiles copy the paper's
    /// hyperparameter table.
    pub fn row(self) -> ProfileRow {
        let paper = |base_lr, warmup_steps, total_steps, n_ctx| ProfileRow {
            base_lr,
            warmup_steps,
            total_steps,
            n_ctx,
            reference_batch: PAPER_STAGE2_BATCH,
        };
        match self {
            Profile::FashioniqLike => paper(1e-4, 100, 500, 4),
            Profile::CirrLike => paper(1e-3, 100, 500, 8),
            Profile::CircoLike | Profile::GenecisLike => paper(1e-3, 300, 2000, 20),
            Profile::DeskDefault => ProfileRow {
                base_lr: 1e-3,
                warmup_steps: 100,
                total_steps: 1000,
                n_ctx: 8,
                reference_batch: DESK_STAGE2_BATCH,
            },
        }
    }

    /// One line describing how the batch size was scaled.
    pub fn batch_scaling(self) -> String {
        let row = self.row();
        if row.reference_batch == DESK_STAGE2_BATCH {
            format!("profile {}: stage2 batch {DESK_STAGE2_BATCH} (unscaled)", self.as_str())
        } else {
            format!(
                "profile {}: stage2 batch scaled {} -> {DESK_STAGE2_BATCH} (x{}); lr, warmup, steps and n_ctx unchanged",
                self.as_str(),
                row.reference_batch,
                DESK_STAGE2_BATCH as f64 / row.reference_batch as f64
            )
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile {s:?}")))
    }
}

/// A retrieval system that `eval` can report on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Stage1Baseline,
    TextualOnly,
    VisualOnly,
    Dual,
}

impl System {
    pub const ALL: [System; 4] = [System::Stage1Baseline, System::TextualOnly, System::VisualOnly, System::Dual];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Stage1Baseline => "stage1-baseline",
            System::TextualOnly => "textual-only",
            System::VisualOnly => "visual-only",
            System::Dual => "dual",
        }
    }

    /// The prompt mode a tuned system uses; `None` for the baseline.
    pub fn mode(self) -> Option<PromptMode> {
        match self {
            System::Stage1Baseline => None,
            System::TextualOnly => Some(PromptMode::TextualOnly),
            System::VisualOnly => Some(PromptMode::VisualOnly),
            System::Dual => Some(PromptMode::Dual),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system {s:?}")))
    }
}

/// Artifact locations. Unset entries derive from `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub benchmark: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("work"),
            benchmark: None,
            corpus: None,
            triplets: None,
            checkpoints: None,
            reports: None,
        }
    }
}

impl Paths {
    pub fn benchmark(&self) -> PathBuf {
        self.benchmark.clone().unwrap_or_else(|| self.root.join("benchmark"))
    }

    /// Caption JSONL; image paths inside it are relative to its directory.
    pub fn corpus(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.benchmark().join(CORPUS_FILE))
    }

    /// Triplet JSONL; image paths inside it are relative to the corpus directory.
    pub fn triplets(&self) -> PathBuf {
        self.triplets.clone().unwrap_or_else(|| self.root.join("triplets.jsonl"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.root.join("checkpoints"))
    }

    pub fn reports(&self) -> PathBuf {
        self.reports.clone().unwrap_or_else(|| self.root.join("reports"))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus()
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn encoder_stem(&self) -> PathBuf {
        self.checkpoints().join("encoder")
    }

    pub fn inversion_stem(&self) -> PathBuf {
        self.checkpoints().join("inversion")
    }

    pub fn prompt_stem(&self, mode: PromptMode) -> PathBuf {
        self.checkpoints().join(format!("prompts_{}", mode.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: EvalKs,
    pub systems: Vec<System>,
    /// Index the gallery with each system's visual prompts instead of the
    /// frozen image encoder.
    pub gallery_prompts: bool,
    /// Targets with most queries used for the Calinski–Harabasz index.
    pub cluster_targets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: EvalKs::default(),
            systems: System::ALL.to_vec(),
            gallery_prompts: false,
            cluster_targets: 12,
        }
    }
}

impl EvalConfig {
    /// Prompt modes of the tuned systems, in request order.
    pub fn modes(&self) -> Vec<PromptMode> {
        let mut out = Vec::new();
        for m in self.systems.iter().filter_map(|s| s.mode()) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: Paths,
    pub benchmark: BenchmarkConfig,
    pub encoder: DualEncoderConfig,
    pub stage0: EncoderTrainConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub grad_check: GradAuditConfig,
    pub llm: HttpBackendConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::DeskDefault, 0)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub root: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Profile defaults with `seed` copied into every sub-seed.
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        let row = profile.row();
        let stage2 = Stage2Config {
            n_ctx: row.n_ctx,
            batch_size: DESK_STAGE2_BATCH,
            total_steps: row.total_steps,
            warmup_steps: row.warmup_steps,
            base_lr: row.base_lr,
            seed,
            ..Stage2Config::default()
        };
        Self {
            profile,
            seed,
            paths: Paths::default(),
            benchmark: BenchmarkConfig {
                seed,
                ..BenchmarkConfig::default()
            },
            encoder: DualEncoderConfig::default(),
            stage0: EncoderTrainConfig {
                seed,
                ..EncoderTrainConfig::default()
            },
            stage1: Stage1Config {
                seed,
                ..Stage1Config::default()
            },
            stage2,
            eval: EvalConfig::default(),
            grad_check: GradAuditConfig::default(),
            llm: HttpBackendConfig::default(),
        }
    }

    /// Parses `text` as an overlay on the profile defaults. The profile
    /// comes from `overrides`, else the document, else `desk-default`;
    /// the top-level seed reaches every sub-seed the document leaves unset.
    pub fn from_json(text: &str, overrides: &Overrides) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let user: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Config(format!(
                "line {} column {}: key `{}`: {inner}",
                inner.line(),
                inner.column(),
                e.path()
            ))
        })?;
        let mut overlay: Value = serde_json::from_str(text)?;
        let obj = overlay
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let profile = overrides.profile.unwrap_or(if obj.contains_key("profile") {
            user.profile
        } else {
            Profile::DeskDefault
        });
        let seed = overrides.seed.unwrap_or(if obj.contains_key("seed") { user.seed } else { 0 });
        obj.insert("profile".into(), serde_json::to_value(profile)?);
        obj.insert("seed".into(), Value::from(seed));
        if let Some(root) = &overrides.root {
            let paths = obj.entry("paths").or_insert_with(|| Value::Object(Default::default()));
            if let Some(p) = paths.as_object_mut() {
                p.insert("root".into(), serde_json::to_value(root)?);
            }
        }
        let mut merged = serde_json::to_value(Self::for_profile(profile, seed))?;
        merge(&mut merged, overlay);
        let config: ExperimentConfig = serde_json::from_value(merged)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, or uses the profile defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                Self::from_json(&text, overrides).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
            None => Self::from_json("{}", overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.encoder.validate()?;
        self.stage0.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage2.n_ctx > self.encoder.max_prompts {
            return Err(Error::Config(format!(
                "stage2 n_ctx {} exceeds encoder max_prompts {}",
                self.stage2.n_ctx, self.encoder.max_prompts
            )));
        }
        if self.eval.systems.is_empty() {
            return Err(Error::Config("eval.systems is empty".into()));
        }
        if self.eval.cluster_targets < 2 {
            return Err(Error::Config("eval.cluster_targets must be at least 2".into()));
        }
        Ok(())
    }

    /// Stage-2 settings for one prompt mode.
    pub fn stage2_for(&self, mode: PromptMode) -> Stage2Config {
        Stage2Config {
            mode,
            ..self.stage2.clone()
        }
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let text = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
