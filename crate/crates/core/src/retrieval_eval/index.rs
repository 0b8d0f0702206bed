use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{GalleryRecord, QueryRecord};
use crate::encoder::{DualEncoder, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompt_tuning::PromptState;

const NORM_TOL: f64 = 1e-6;

/// Normalized gallery features with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    features: Tensor<f32>,
    positions: HashMap<String, usize>,
}

fn normalized(row: &[f32]) -> Result<Vec<f32>> {
    let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Contract(format!("feature row has norm {norm}")));
    }
    Ok(row.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

impl GalleryIndex {
    /// Rows are l2-normalized on construction.
    pub fn new(ids: Vec<String>, features: &Tensor<f32>) -> Result<Self> {
        let (rows, cols) = features.dims2();
        if ids.is_empty() {
            return Err(Error::EmptyInput("gallery index".into()));
        }
        if rows != ids.len() {
            return Err(Error::Contract(format!("{} ids for {rows} feature rows", ids.len())));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate gallery id {id}")));
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(normalized(features.row(r))?);
        }
        let features = Tensor::new(&[rows, cols], data)?;
        for r in 0..rows {
            let n: f64 = features.row(r).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            debug_assert!((n - 1.0).abs() < NORM_TOL);
        }
        Ok(Self {
            ids,
            features,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dims2().1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }
}

/// Encodes every gallery image in manifest order. Visual prompts are
/// appended when the prompt state's mode uses the vision branch.
pub fn build_index(
    gallery: &[GalleryRecord],
    base_dir: &Path,
    encoder: &DualEncoder<f32>,
    prompts: Option<&PromptState<f32>>,
) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery manifest".into()));
    }
    let images = load_images(gallery.iter().map(|g| g.image.as_str()), base_dir)?;
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let visual = match prompts {
        Some(p) if p.mode.uses_vision() => Some(p.visual_prompts()?),
        _ => None,
    };
    let features = encoder.encode_images(&refs, visual.as_ref())?;
    GalleryIndex::new(gallery.iter().map(|g| g.id.clone()).collect(), &features)
}

pub(crate) fn load_images<'a>(paths: impl Iterator<Item = &'a str>, base_dir: &Path) -> Result<Vec<ImageTensor>> {
    paths
        .map(|p| {
            let full = base_dir.join(p);
            ImageTensor::read_ppm(&full).map_err(|e| Error::Ingestion {
                path: full.clone(),
                line: 0,
                message: format!("unreadable image: {e}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub score: f64,
}

/// Candidates by descending cosine similarity, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Top-`k` gallery items for a query feature, optionally restricted to a
/// subset of ids. `k` larger than the candidate set returns every candidate.
pub fn retrieve(query: &[f32], index: &GalleryIndex, k: usize, restrict: Option<&[String]>) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    if query.len() != index.dim() {
        return Err(Error::Contract(format!(
            "query has {} dims, index {}",
            query.len(),
            index.dim()
        )));
    }
    let q = normalized(query)?;
    let candidates: Vec<usize> = match restrict {
        None => (0..index.len()).collect(),
        Some([]) => return Err(Error::Contract("empty restriction set".into())),
        Some(ids) => {
            let mut seen = HashSet::new();
            let mut pos = Vec::with_capacity(ids.len());
            for id in ids {
                let p = index
                    .position(id)
                    .ok_or_else(|| Error::Contract(format!("restriction id {id} is not in the gallery")))?;
                if seen.insert(p) {
                    pos.push(p);
                }
            }
            pos
        }
    };
    let mut scored: Vec<(f64, usize)> = candidates
        .into_iter()
        .map(|i| {
            let s: f64 = index
                .features
                .row(i)
                .iter()
                .zip(&q)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| index.ids[a.1].cmp(&index.ids[b.1]))
    });
    scored.truncate(k);
    Ok(RankedList {
        entries: scored
            .into_iter()
            .map(|(score, i)| RankedEntry {
                id: index.ids[i].clone(),
                score,
            })
            .collect(),
    })
}

/// An evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub image: String,
    pub modification: String,
    pub ground_truth_ids: Vec<String>,
    pub subset_ids: Option<Vec<String>>,
    pub per_query_gallery_ids: Option<Vec<String>>,
    /// Grouping label (the target caption) for cluster diagnostics.
    pub target: String,
}

impl From<&QueryRecord> for QuerySpec {
    fn from(q: &QueryRecord) -> Self {
        Self {
            id: q.id.clone(),
            image: q.image.clone(),
            modification: q.textual_modification.clone(),
            ground_truth_ids: q.ground_truth_ids.clone(),
            subset_ids: Some(q.subset_ids.clone()),
            per_query_gallery_ids: Some(q.per_query_gallery_ids.clone()),
            target: q.target_text.clone(),
        }
    }
}

impl QuerySpec {
    /// Ground truths must be in the gallery and in every candidate list.
    pub fn validate(&self, index: &GalleryIndex) -> Result<()> {
        if self.ground_truth_ids.is_empty() {
            return Err(Error::Contract(format!("query {} has no ground truth", self.id)));
        }
        for gt in &self.ground_truth_ids {
            if !index.contains(gt) {
                return Err(Error::Contract(format!("query {}: ground truth {gt} not in gallery", self.id)));
            }
            for (name, list) in [("subset", &self.subset_ids), ("per-query gallery", &self.per_query_gallery_ids)] {
                if let Some(list) = list {
                    if !list.contains(gt) {
                        return Err(Error::Contract(format!(
                            "query {}: ground truth {gt} missing from its {name}",
                            self.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
