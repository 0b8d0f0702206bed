//! One function per subcommand. Each writes its artifacts plus a
//! [`RunRecord`] and returns what it produced.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, System};
use super::record::{RunRecord, RunTimer};
use crate::datagen::{
    make_benchmark, read_jsonl, read_triplets, write_jsonl, BenchmarkSummary, CaptionRecord, GalleryRecord,
    GenerateOptions, GenerationStats, HttpBackend, LlmBackend, MockBackend, QueryRecord, GALLERY_FILE, QUERY_FILE,
};
use crate::encoder::{
    caption_image_recall, checkpoint_exists, checkpoint_paths, train_encoder, CaptionedImage, DualEncoder,
    ImageTensor, Vocabulary,
};
use crate::error::{io_err, Error, Result};
use crate::inversion::{pretrain, InversionNet};
use crate::prompt_tuning::{
    encode_composed, finetune, grad_audit, Frozen, GradAuditReport, PromptMode, PromptState, TrainTriplet,
};
use crate::retrieval_eval::{
    build_index, compose_queries, evaluate, export_features, retrieve, target_cluster_score, write_reports,
    FeatureRow, GalleryIndex, MetricsReport, QuerySpec, RankedList,
};
use crate::training::LossCurve;

/// Which LLM backend `gen-triplets` talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(Error::Config(format!("unknown backend {other:?} (mock|http)"))),
        }
    }
}

/// Held-out pairs used to compare trained and untrained encoders.
pub const HELD_OUT_PAIRS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage0Report {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub recall_at_5_untrained: f64,
    pub recall_at_5_trained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveOutcome {
    pub system: System,
    pub requested_k: usize,
    pub k: usize,
    pub results: RankedList,
}

fn vocab_for(config: &ExperimentConfig) -> Result<Vocabulary> {
    let vocab = Vocabulary::synthetic();
    if vocab.len() != config.encoder.vocab_size {
        return Err(Error::Config(format!(
            "encoder.vocab_size {} but the synthetic vocabulary holds {} tokens",
            config.encoder.vocab_size,
            vocab.len()
        )));
    }
    Ok(vocab)
}

fn require_file(path: &Path, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )))
    }
}

fn require_checkpoint(stem: &Path, stage: &str) -> Result<()> {
    if checkpoint_exists(stem) {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "checkpoint {} not found; run `{stage}` first",
            checkpoint_paths(stem).0.display()
        )))
    }
}

fn load_encoder(config: &ExperimentConfig) -> Result<DualEncoder<f32>> {
    let stem = config.paths.encoder_stem();
    require_checkpoint(&stem, "train-encoders")?;
    Ok(DualEncoder::load(&stem, Some(&config.encoder))?.0)
}

fn load_inversion(config: &ExperimentConfig) -> Result<InversionNet<f32>> {
    let stem = config.paths.inversion_stem();
    require_checkpoint(&stem, "pretrain-inversion")?;
    InversionNet::load(&stem)
}

fn load_prompts(config: &ExperimentConfig, mode: PromptMode) -> Result<PromptState<f32>> {
    let stem = config.paths.prompt_stem(mode);
    require_checkpoint(&stem, &format!("finetune ({})", mode.as_str()))?;
    let state = PromptState::load(&stem)?;
    if state.mode != mode {
        return Err(Error::Checkpoint(format!(
            "{} holds {} prompts",
            stem.display(),
            state.mode.as_str()
        )));
    }
    Ok(state)
}

fn load_corpus(config: &ExperimentConfig) -> Result<Vec<CaptionRecord>> {
    let path = config.paths.corpus();
    require_file(&path, "gen-data")?;
    let corpus: Vec<CaptionRecord> = read_jsonl(&path)?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no captions", path.display())));
    }
    Ok(corpus)
}

fn read_image(path: &Path) -> Result<ImageTensor> {
    ImageTensor::read_ppm(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        line: 0,
        message: format!("unreadable image: {e}"),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn write_curve(config: &ExperimentConfig, name: &str, curve: &LossCurve) -> Result<PathBuf> {
    let dir = config.paths.reports();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(format!("{name}_curve.csv"));
    curve.write_csv(&path)?;
    Ok(path)
}

fn close(timer: RunTimer, config: &ExperimentConfig, artifacts: Vec<PathBuf>) -> Result<RunRecord> {
    let record = timer.finish(artifacts);
    record.write(&config.paths.reports())?;
    Ok(record)
}

/// Renders the synthetic benchmark.
pub fn run_gen_data(config: &ExperimentConfig) -> Result<(BenchmarkSummary, RunRecord)> {
    let timer = RunTimer::start("gen-data", config);
    let dir = config.paths.benchmark();
    let summary = make_benchmark(&config.benchmark, &dir)?;
    let record = close(timer, config, vec![dir])?;
    Ok((summary, record))
}

/// Asks the chosen backend for one edit per corpus caption.
pub fn run_gen_triplets(config: &ExperimentConfig, backend: BackendKind) -> Result<(GenerationStats, RunRecord)> {
    let timer = RunTimer::start("gen-triplets", config);
    let backend: Box<dyn LlmBackend> = match backend {
        BackendKind::Mock => Box::new(MockBackend::new(config.seed)),
        BackendKind::Http => Box::new(HttpBackend::new(config.llm.clone())?),
    };
    let corpus = load_corpus(config)?;
    let options = GenerateOptions {
        max_retries: config.llm.max_retries,
        max_concurrent: config.llm.max_concurrent,
    };
    let (records, stats) = crate::datagen::generate_triplets(&corpus, backend.as_ref(), options);
    let out = config.paths.triplets();
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_jsonl(&out, &records)?;
    let stats_path = config.paths.reports().join("triplet_stats.json");
    write_json(&stats_path, &stats)?;
    let record = close(timer, config, vec![out, stats_path])?;
    Ok((stats, record))
}

/// Stage 0: contrastive training of the toy dual encoder on the corpus.
pub fn run_train_encoders(config: &ExperimentConfig) -> Result<(Stage0Report, RunRecord)> {
    let timer = RunTimer::start("train-encoders", config);
    let vocab = vocab_for(config)?;
    let corpus = load_corpus(config)?;
    let base = config.paths.corpus_dir();
    let data = corpus
        .iter()
        .map(|c| {
            Ok(CaptionedImage {
                image: read_image(&base.join(&c.image))?,
                caption: c.preferred_caption().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if data.len() < 4 {
        return Err(Error::EmptyInput(format!("{} captions are too few to train on", data.len())));
    }
    let held = HELD_OUT_PAIRS.min(data.len() / 2);
    let (train, held_out) = data.split_at(data.len() - held);
    let outcome = train_encoder(config.encoder.clone(), &vocab, train, &config.stage0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage0.seed);
    let untrained = DualEncoder::<f32>::init(config.encoder.clone(), &mut rng)?;
    let report = Stage0Report {
        train_pairs: train.len(),
        held_out_pairs: held_out.len(),
        first_loss: outcome.curve.first().map(|p| p.loss),
        last_loss: outcome.curve.last().map(|p| p.loss),
        recall_at_5_untrained: caption_image_recall(&untrained, &vocab, held_out, 5)?,
        recall_at_5_trained: caption_image_recall(&outcome.encoder, &vocab, held_out, 5)?,
    };
    let ckpt_dir = config.paths.checkpoints();
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let stem = config.paths.encoder_stem();
    outcome.encoder.save(&stem, Some(config.stage0.seed))?;
    let curve = write_curve(config, "stage0", &outcome.curve)?;
    let report_path = config.paths.reports().join("stage0.json");
    write_json(&report_path, &report)?;
    let (m, b) = checkpoint_paths(&stem);
    let record = close(timer, config, vec![m, b, curve, report_path])?;
    Ok((report, record))
}

/// Stage 1: text-only pretraining of the inversion network.
pub fn run_pretrain_inversion(config: &ExperimentConfig) -> Result<(StageReport, RunRecord)> {
    let timer = RunTimer::start("pretrain-inversion", config);
    let vocab = vocab_for(config)?;
    let encoder = load_encoder(config)?;
    let captions: Vec<String> = load_corpus(config)?
        .iter()
        .map(|c| c.preferred_caption().to_string())
        .collect();
    let outcome = pretrain(&encoder, &vocab, &captions, &config.stage1)?;
    let stem = config.paths.inversion_stem();
    outcome.net.save(&stem, Some(config.stage1.seed))?;
    let curve = write_curve(config, "stage1", &outcome.curve)?;
    let report = StageReport {
        stage: "stage1".into(),
        steps: config.stage1.total_steps,
        first_loss: outcome.curve.first().map(|p| p.loss),
        last_loss: outcome.curve.last().map(|p| p.loss),
        checkpoint: stem.clone(),
    };
    let (m, b) = checkpoint_paths(&stem);
    let record = close(timer, config, vec![m, b, curve])?;
    Ok((report, record))
}

fn load_train_triplets(config: &ExperimentConfig) -> Result<Vec<TrainTriplet>> {
    let path = config.paths.triplets();
    require_file(&path, "gen-triplets")?;
    let base = config.paths.corpus_dir();
    read_triplets(&path)?
        .into_iter()
        .map(|r| {
            Ok(TrainTriplet {
                image: read_image(&base.join(&r.image))?,
                modification: r.textual_modification,
                target: r.target_text,
            })
        })
        .collect()
}

/// Stage 2: one prompt state per requested mode, everything else frozen.
pub fn run_finetune(config: &ExperimentConfig, modes: &[PromptMode]) -> Result<(Vec<StageReport>, RunRecord)> {
    let timer = RunTimer::start("finetune", config);
    if modes.is_empty() {
        return Err(Error::Config("no prompt mode requested".into()));
    }
    let vocab = vocab_for(config)?;
    let encoder = load_encoder(config)?;
    let net = load_inversion(config)?;
    let triplets = load_train_triplets(config)?;
    let frozen = Frozen {
        encoder: &encoder,
        net: &net,
    };
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for &mode in modes {
        let stage2 = config.stage2_for(mode);
        let outcome = finetune(frozen, &vocab, &triplets, &stage2)?;
        let stem = config.paths.prompt_stem(mode);
        outcome.state.save(&stem, Some(stage2.seed))?;
        let (m, b) = checkpoint_paths(&stem);
        artifacts.extend([m, b]);
        artifacts.push(write_curve(config, &format!("stage2_{}", mode.as_str()), &outcome.curve)?);
        reports.push(StageReport {
            stage: format!("stage2 {}", mode.as_str()),
            steps: stage2.total_steps,
            first_loss: outcome.curve.first().map(|p| p.loss),
            last_loss: outcome.curve.last().map(|p| p.loss),
            checkpoint: stem,
        });
    }
    let record = close(timer, config, artifacts)?;
    Ok((reports, record))
}

fn load_benchmark(config: &ExperimentConfig) -> Result<(Vec<GalleryRecord>, Vec<QuerySpec>)> {
    let dir = config.paths.benchmark();
    let gallery_path = dir.join(GALLERY_FILE);
    let query_path = dir.join(QUERY_FILE);
    require_file(&gallery_path, "gen-data")?;
    require_file(&query_path, "gen-data")?;
    let gallery: Vec<GalleryRecord> = read_jsonl(&gallery_path)?;
    let records: Vec<QueryRecord> = read_jsonl(&query_path)?;
    Ok((gallery, records.iter().map(QuerySpec::from).collect()))
}

/// Checkpoints a system needs, loaded up front so missing stages fail early.
fn load_states(config: &ExperimentConfig, systems: &[System]) -> Result<Vec<Option<PromptState<f32>>>> {
    systems
        .iter()
        .map(|s| s.mode().map(|m| load_prompts(config, m)).transpose())
        .collect()
}

fn system_index(
    config: &ExperimentConfig,
    gallery: &[GalleryRecord],
    encoder: &DualEncoder<f32>,
    base: &GalleryIndex,
    state: Option<&PromptState<f32>>,
) -> Result<GalleryIndex> {
    match state {
        Some(s) if config.eval.gallery_prompts && s.mode.uses_vision() => {
            build_index(gallery, &config.paths.benchmark(), encoder, Some(s))
        }
        _ => Ok(base.clone()),
    }
}

/// Evaluates every system in `eval.systems` on the shared benchmark.
pub fn run_eval(config: &ExperimentConfig) -> Result<(Vec<MetricsReport>, RunRecord)> {
    let timer = RunTimer::start("eval", config);
    let vocab = vocab_for(config)?;
    let (gallery, queries) = load_benchmark(config)?;
    let encoder = load_encoder(config)?;
    let net = load_inversion(config)?;
    let states = load_states(config, &config.eval.systems)?;
    let frozen = Frozen {
        encoder: &encoder,
        net: &net,
    };
    let bench = config.paths.benchmark();
    let base = build_index(&gallery, &bench, &encoder, None)?;
    let fingerprint = config.fingerprint();
    let mut reports = Vec::new();
    for (system, state) in config.eval.systems.iter().zip(&states) {
        let index = system_index(config, &gallery, &encoder, &base, state.as_ref())?;
        let feats = compose_queries(frozen, &vocab, state.as_ref(), &queries, &bench)?;
        let mut report = evaluate(system.as_str(), &queries, &feats, &index, &config.eval.ks, &fingerprint)?;
        report.calinski_harabasz = Some(target_cluster_score(&queries, &feats, config.eval.cluster_targets)?);
        reports.push(report);
    }
    let stem = config.paths.reports().join("eval");
    std::fs::create_dir_all(config.paths.reports()).map_err(io_err(config.paths.reports()))?;
    write_reports(&reports, &stem)?;
    let record = close(
        timer,
        config,
        vec![stem.with_extension("json"), stem.with_extension("txt")],
    )?;
    Ok((reports, record))
}

/// Top-`k` gallery ids for one reference image and modification; `k` is
/// clamped to the gallery size with a warning.
pub fn run_retrieve(
    config: &ExperimentConfig,
    system: System,
    image: &Path,
    modification: &str,
    k: usize,
) -> Result<(RetrieveOutcome, RunRecord)> {
    let timer = RunTimer::start("retrieve", config);
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let vocab = vocab_for(config)?;
    let (gallery, _) = load_benchmark(config)?;
    let encoder = load_encoder(config)?;
    let net = load_inversion(config)?;
    let state = load_states(config, &[system])?.pop().flatten();
    let base = build_index(&gallery, &config.paths.benchmark(), &encoder, None)?;
    let index = system_index(config, &gallery, &encoder, &base, state.as_ref())?;
    let used = k.min(index.len());
    if used < k {
        log::warn!("k {k} exceeds the gallery size {}; clamped to {used}", index.len());
    }
    let reference = read_image(image)?;
    let frozen = Frozen {
        encoder: &encoder,
        net: &net,
    };
    let query = encode_composed(frozen, &vocab, state.as_ref(), &reference, modification)?;
    let results = retrieve(&query, &index, used, None)?;
    let outcome = RetrieveOutcome {
        system,
        requested_k: k,
        k: used,
        results,
    };
    let path = config.paths.reports().join("retrieve.json");
    write_json(&path, &outcome)?;
    let record = close(timer, config, vec![path])?;
    Ok((outcome, record))
}

/// Double-precision end-to-end gradient audit of the Stage-2 loss.
pub fn run_grad_check(config: &ExperimentConfig) -> Result<(GradAuditReport, RunRecord)> {
    let timer = RunTimer::start("grad-check", config);
    let report = grad_audit(&config.grad_check)?;
    let path = config.paths.reports().join("grad_check.json");
    write_json(&path, &report)?;
    let record = close(timer, config, vec![path])?;
    Ok((report, record))
}

/// Composed query features per system (labelled by target text) and the
/// frozen gallery features (labelled by caption), as CSV.
pub fn run_export_features(config: &ExperimentConfig) -> Result<(Vec<PathBuf>, RunRecord)> {
    let timer = RunTimer::start("export-features", config);
    let vocab = vocab_for(config)?;
    let (gallery, queries) = load_benchmark(config)?;
    let encoder = load_encoder(config)?;
    let net = load_inversion(config)?;
    let states = load_states(config, &config.eval.systems)?;
    let frozen = Frozen {
        encoder: &encoder,
        net: &net,
    };
    let bench = config.paths.benchmark();
    let dir = config.paths.reports();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut paths = Vec::new();
    for (system, state) in config.eval.systems.iter().zip(&states) {
        let feats = compose_queries(frozen, &vocab, state.as_ref(), &queries, &bench)?;
        let rows: Vec<FeatureRow> = queries
            .iter()
            .zip(feats)
            .map(|(q, f)| FeatureRow {
                id: q.id.clone(),
                label: Some(q.target.clone()),
                features: f,
            })
            .collect();
        let path = dir.join(format!("features_{}.csv", system.as_str()));
        export_features(&rows, &path)?;
        paths.push(path);
    }
    let index = build_index(&gallery, &bench, &encoder, None)?;
    let rows: Vec<FeatureRow> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| FeatureRow {
            id: g.id.clone(),
            label: Some(g.caption.clone()),
            features: index.features().row(i).to_vec(),
        })
        .collect();
    let path = dir.join("features_gallery.csv");
    export_features(&rows, &path)?;
    paths.push(path);
    let record = close(timer, config, paths.clone())?;
    Ok((paths, record))
}
