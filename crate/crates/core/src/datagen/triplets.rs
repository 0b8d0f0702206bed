//! Caption corpora, triplet records and the generation pipeline.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::llm::{build_llm_prompt, parse_llm_reply, LlmBackend, LlmReply};
use super::scene::SceneSpec;
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Mock,
    #[default]
    Llm,
}

/// One line of a caption corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blip_caption: Option<String>,
}

impl CaptionRecord {
    /// The BLIP caption when present, else the web caption.
    pub fn preferred_caption(&self) -> &str {
        self.blip_caption
            .as_deref()
            .filter(|c| !c.trim().is_empty())
            .unwrap_or(&self.caption)
    }
}

/// A (reference image, modification, target text) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    #[serde(alias = "textual modification")]
    pub textual_modification: String,
    #[serde(alias = "target text")]
    pub target_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_scene: Option<SceneSpec>,
    #[serde(default)]
    pub source: Source,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("caption", &self.caption),
            ("textual_modification", &self.textual_modification),
            ("target_text", &self.target_text),
        ] {
            if v.trim().is_empty() {
                return Err(Error::Contract(format!("triplet {} has an empty {name}", self.id)));
            }
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line, reporting the failing line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Triplets with unique ids and non-empty texts.
pub fn read_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let records: Vec<TripletRecord> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let fail = |message: String| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        r.validate().map_err(|e| fail(e.to_string()))?;
        if !seen.insert(r.id.as_str()) {
            return Err(fail(format!("duplicate triplet id {:?}", r.id)));
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempted: usize,
    pub succeeded: usize,
    pub skipped: usize,
    /// Extra backend calls spent on retries.
    pub retries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub max_retries: u32,
    pub max_concurrent: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_retries: 2,
            max_concurrent: 1,
        }
    }
}

fn ask(backend: &dyn LlmBackend, caption: &str, max_retries: u32) -> (Option<LlmReply>, usize) {
    let prompt = match build_llm_prompt(caption) {
        Ok(p) => p,
        Err(_) => return (None, 0),
    };
    for attempt in 0..=max_retries as usize {
        match backend.generate(&prompt).and_then(|text| parse_llm_reply(&text)) {
            Ok(reply) => return (Some(reply), attempt),
            Err(e) => log::debug!("attempt {} for {caption:?} failed: {e}", attempt + 1),
        }
    }
    (None, max_retries as usize)
}

/// Asks the backend for one edit per caption. Failed records are skipped
/// and counted; output order follows the corpus.
pub fn generate_triplets(
    corpus: &[CaptionRecord],
    backend: &dyn LlmBackend,
    options: GenerateOptions,
) -> (Vec<TripletRecord>, GenerationStats) {
    let window = options.max_concurrent.max(1);
    let mut replies: Vec<(Option<LlmReply>, usize)> = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(window) {
        if window == 1 {
            replies.push(ask(backend, chunk[0].preferred_caption(), options.max_retries));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|r| s.spawn(move || ask(backend, r.preferred_caption(), options.max_retries)))
                .collect();
            for h in handles {
                replies.push(h.join().unwrap_or((None, 0)));
            }
        });
    }
    let mut stats = GenerationStats {
        attempted: corpus.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (rec, (reply, retries)) in corpus.iter().zip(replies) {
        stats.retries += retries;
        match reply {
            Some(r) => {
                stats.succeeded += 1;
                out.push(TripletRecord {
                    id: rec.id.clone(),
                    image: rec.image.clone(),
                    caption: rec.preferred_caption().to_string(),
                    textual_modification: r.instruction,
                    target_text: r.edited_description,
                    target_image: None,
                    target_scene: None,
                    source: backend.source(),
                });
            }
            None => {
                log::warn!("skipping {}: no usable reply", rec.id);
                stats.skipped += 1;
            }
        }
    }
    (out, stats)
}

/// File-level wrapper: reads a caption corpus and writes triplet JSONL.
pub fn generate_triplets_file(
    corpus_path: &Path,
    backend: &dyn LlmBackend,
    options: GenerateOptions,
    out_path: &Path,
) -> Result<GenerationStats> {
    let corpus: Vec<CaptionRecord> = read_jsonl(corpus_path)?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no captions", corpus_path.display())));
    }
    let (records, stats) = generate_triplets(&corpus, backend, options);
    write_jsonl(out_path, &records)?;
    Ok(stats)
}
