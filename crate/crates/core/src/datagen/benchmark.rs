//! Seeded synthetic benchmark: caption corpus, training triplets, queries
//! with ground-truth targets, and a shared gallery.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::edit::{apply_edit, apply_edits, composite_instruction, sample_edits, EditOp};
use super::scene::{caption, render, sample_scene, Color, SceneObject, SceneSpec, Shape, MAX_OBJECTS};
use super::triplets::{write_jsonl, CaptionRecord, Source, TripletRecord};
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    /// Captioned images for encoder and Stage-1 pretraining.
    pub n_corpus: usize,
    pub n_train: usize,
    pub n_query: usize,
    pub n_gallery: usize,
    /// Distinct target scenes the queries are spread over.
    pub n_target_groups: usize,
    /// Same-caption, different-layout copies of each target in the gallery.
    pub layout_variants: usize,
    pub subset_size: usize,
    pub per_query_gallery_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_corpus: 2000,
            n_train: 2000,
            n_query: 100,
            n_gallery: 500,
            n_target_groups: 25,
            layout_variants: 1,
            subset_size: 6,
            per_query_gallery_size: 15,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_query == 0 || self.n_target_groups == 0 {
            return fail("benchmark needs at least one query and target group".into());
        }
        if self.n_gallery < self.n_query {
            return fail(format!("n_gallery {} < n_query {}", self.n_gallery, self.n_query));
        }
        let targets = self.n_target_groups.min(self.n_query) * (1 + self.layout_variants);
        if self.n_gallery < targets {
            return fail(format!("n_gallery {} cannot hold {targets} target images", self.n_gallery));
        }
        if self.subset_size < 2 || self.per_query_gallery_size < 2 {
            return fail("subset and per-query gallery sizes must be at least 2".into());
        }
        if self.per_query_gallery_size > self.n_gallery || self.subset_size > self.n_gallery {
            return fail("subset / per-query gallery larger than the gallery".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    /// Reference image, relative to the benchmark directory.
    pub image: String,
    pub caption: String,
    pub reference_scene: SceneSpec,
    pub textual_modification: String,
    pub target_text: String,
    pub target_scene: SceneSpec,
    /// Gallery id of the rendered target scene itself.
    pub target_id: String,
    pub ground_truth_ids: Vec<String>,
    pub subset_ids: Vec<String>,
    pub per_query_gallery_ids: Vec<String>,
    pub edits: Vec<EditOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: BenchmarkConfig,
    pub corpus: usize,
    pub train: usize,
    pub queries: usize,
    pub gallery: usize,
    pub target_groups: usize,
    pub max_ground_truths: usize,
}

pub const CORPUS_FILE: &str = "captions.jsonl";
pub const TRAIN_FILE: &str = "train_triplets.jsonl";
pub const QUERY_FILE: &str = "queries.jsonl";
pub const GALLERY_FILE: &str = "gallery.jsonl";
pub const SUMMARY_FILE: &str = "benchmark.json";

const README: &str = "# Synthetic composed-retrieval benchmark

Files (all paths are relative to this directory):

- `captions.jsonl`: caption corpus, `{\"id\", \"image\", \"caption\"}` per line; images in `corpus/`.
- `train_triplets.jsonl`: training triplets, `{\"id\", \"image\", \"caption\", \"textual_modification\", \"target_text\", \"target_scene\", \"source\"}`; reference images in `train/`.
- `queries.jsonl`: evaluation queries with `image` (reference, in `queries/`), `reference_scene`, `textual_modification`, `target_text`, `target_scene`, `target_id`, `ground_truth_ids` (every gallery item whose caption equals the target text), `subset_ids` (a small set of similar candidates holding all ground truths) and `per_query_gallery_ids` (a fixed-size candidate list holding all ground truths).
- `gallery.jsonl`: `{\"id\", \"image\", \"caption\", \"scene\"}` per gallery item; images in `gallery/`.
- `benchmark.json`: generation settings and counts.

Images are binary PPM (`P6`, 8-bit RGB, 32x32). A pixel value `v` maps to `v / 255` per channel.
Rendering a stored scene reproduces its image bit-exactly.
";

fn write_image(dir: &Path, rel: &str, scene: &SceneSpec) -> Result<()> {
    render(scene)?.write_ppm(&dir.join(rel))
}

/// Random single edit that turns some reference scene into `target`.
fn inverse_edit<R: Rng + ?Sized>(target: &SceneSpec, rng: &mut R) -> Option<(SceneSpec, EditOp)> {
    let kind = rng.gen_range(0..6);
    let mut r = target.clone();
    let o = *target.objects.choose(rng)?;
    let idx = target.objects.iter().position(|x| *x == o)?;
    let edit = match kind {
        0 => {
            let c = *Color::ALL.choose(rng)?;
            r.objects[idx].color = c;
            EditOp::Recolor { cell: o.cell, to: o.color }
        }
        1 => {
            let s = *Shape::ALL.choose(rng)?;
            r.objects[idx].shape = s;
            EditOp::ChangeShape { cell: o.cell, to: o.shape }
        }
        2 => {
            if target.objects.len() < 2 {
                return None;
            }
            r.objects.remove(idx);
            EditOp::Add {
                shape: o.shape,
                color: o.color,
                cell: o.cell,
            }
        }
        3 => {
            if target.objects.len() >= MAX_OBJECTS {
                return None;
            }
            let cell = *target.free_cells().choose(rng)?;
            let extra = SceneObject {
                shape: *Shape::ALL.choose(rng)?,
                color: *Color::ALL.choose(rng)?,
                cell,
            };
            r.objects.push(extra);
            EditOp::Remove { cell }
        }
        4 => {
            let to = *target.free_cells().choose(rng)?;
            r.objects[idx].cell = to;
            EditOp::Move { from: to, to: o.cell }
        }
        _ => {
            r.background = *super::scene::Background::ALL.choose(rng)?;
            EditOp::ChangeBackground { to: target.background }
        }
    };
    r.normalize();
    if r.validate().is_err() || r.same_content(target) {
        return None;
    }
    let check = apply_edit(&r, &edit).ok()?;
    check.same_content(target).then_some((r, edit))
}

/// Reference scene and one or two edits leading exactly to `target`.
fn query_for<R: Rng + ?Sized>(target: &SceneSpec, two: bool, rng: &mut R) -> (SceneSpec, Vec<EditOp>) {
    loop {
        let Some((mid, last)) = inverse_edit(target, rng) else { continue };
        if !two {
            return (mid, vec![last]);
        }
        let Some((start, first)) = inverse_edit(&mid, rng) else { continue };
        let edits = vec![first, last];
        if let Ok(end) = apply_edits(&start, &edits) {
            if end.same_content(target) {
                return (start, edits);
            }
        }
    }
}

fn similarity(a: &SceneSpec, b: &SceneSpec) -> usize {
    let shared = a
        .objects
        .iter()
        .filter(|o| b.has_kind(o.shape, o.color))
        .count();
    2 * shared + usize::from(a.background == b.background)
}

/// Writes the full benchmark directory. Identical configs produce
/// byte-identical directories.
pub fn make_benchmark(config: &BenchmarkConfig, dir: &Path) -> Result<BenchmarkSummary> {
    config.validate()?;
    for sub in ["corpus", "train", "queries", "gallery"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // caption corpus
    let mut corpus = Vec::with_capacity(config.n_corpus);
    for i in 0..config.n_corpus {
        let scene = sample_scene(&mut rng, config.seed);
        let image = format!("corpus/{i:05}.ppm");
        write_image(dir, &image, &scene)?;
        corpus.push(CaptionRecord {
            id: format!("corpus_{i:05}"),
            image,
            caption: caption(&scene)?,
            blip_caption: None,
        });
    }
    write_jsonl(&dir.join(CORPUS_FILE), &corpus)?;

    // training triplets
    let mut train = Vec::with_capacity(config.n_train);
    for i in 0..config.n_train {
        let scene = sample_scene(&mut rng, config.seed);
        let count = if rng.gen_bool(0.5) { 1 } else { 2 };
        let edits = sample_edits(&scene, count, &mut rng);
        let target = apply_edits(&scene, &edits)?;
        let image = format!("train/{i:05}.ppm");
        write_image(dir, &image, &scene)?;
        train.push(TripletRecord {
            id: format!("train_{i:05}"),
            image,
            caption: caption(&scene)?,
            textual_modification: composite_instruction(&scene, &edits, rng.gen())?,
            target_text: caption(&target)?,
            target_image: None,
            target_scene: Some(target),
            source: Source::Mock,
        });
    }
    write_jsonl(&dir.join(TRAIN_FILE), &train)?;

    // target groups with distinct captions
    let groups = config.n_target_groups.min(config.n_query);
    let mut targets: Vec<SceneSpec> = Vec::with_capacity(groups);
    let mut target_captions = HashSet::new();
    while targets.len() < groups {
        let s = sample_scene(&mut rng, config.seed);
        if target_captions.insert(caption(&s)?) {
            targets.push(s);
        }
    }

    // gallery: targets, same-caption layout variants, then distractors
    let mut gallery_scenes: Vec<SceneSpec> = Vec::with_capacity(config.n_gallery);
    let mut target_index = Vec::with_capacity(groups);
    let mut seen: HashSet<(Vec<SceneObject>, super::scene::Background)> = HashSet::new();
    let mut add = |s: &SceneSpec, scenes: &mut Vec<SceneSpec>| -> bool {
        seen.insert((s.objects.clone(), s.background)) && {
            scenes.push(s.clone());
            true
        }
    };
    for t in &targets {
        target_index.push(gallery_scenes.len());
        add(t, &mut gallery_scenes);
    }
    for t in &targets {
        let mut made = 0;
        let mut tries = 0;
        while made < config.layout_variants && tries < 50 {
            tries += 1;
            let mut v = t.clone();
            let i = rng.gen_range(0..v.objects.len());
            let Some(&cell) = v.free_cells().choose(&mut rng) else { break };
            v.objects[i].cell = cell;
            v.normalize();
            if add(&v, &mut gallery_scenes) {
                made += 1;
            }
        }
    }
    while gallery_scenes.len() < config.n_gallery {
        let s = sample_scene(&mut rng, config.seed);
        add(&s, &mut gallery_scenes);
    }
    // shuffle so targets are not clustered at the start of the id range
    let mut order: Vec<usize> = (0..gallery_scenes.len()).collect();
    order.shuffle(&mut rng);
    let mut position = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let mut gallery = Vec::with_capacity(gallery_scenes.len());
    for (new, &old) in order.iter().enumerate() {
        let scene = &gallery_scenes[old];
        let image = format!("gallery/{new:05}.ppm");
        write_image(dir, &image, scene)?;
        gallery.push(GalleryRecord {
            id: format!("g{new:05}"),
            image,
            caption: caption(scene)?,
            scene: scene.clone(),
        });
    }
    write_jsonl(&dir.join(GALLERY_FILE), &gallery)?;
    let mut by_caption: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gallery.iter().enumerate() {
        by_caption.entry(g.caption.as_str()).or_default().push(i);
    }

    // queries
    let mut queries = Vec::with_capacity(config.n_query);
    let mut max_gt = 0;
    for q in 0..config.n_query {
        let group = q % groups;
        let target = &targets[group];
        let two = rng.gen_bool(0.3);
        let (reference, edits) = query_for(target, two, &mut rng);
        let target_text = caption(target)?;
        let gt: Vec<usize> = by_caption[target_text.as_str()].clone();
        max_gt = max_gt.max(gt.len());
        let gt_set: HashSet<usize> = gt.iter().copied().collect();

        let mut ranked: Vec<usize> = (0..gallery.len()).filter(|i| !gt_set.contains(i)).collect();
        ranked.sort_by_key(|&i| (std::cmp::Reverse(similarity(&gallery[i].scene, target)), i));
        let subset_len = config.subset_size.max(gt.len() + 1);
        let mut subset: Vec<usize> = gt.clone();
        subset.extend(ranked.iter().take(subset_len - gt.len()));
        subset.sort_unstable();

        let mut pool: Vec<usize> = (0..gallery.len()).filter(|i| !gt_set.contains(i)).collect();
        pool.shuffle(&mut rng);
        let per_query_len = config.per_query_gallery_size.max(gt.len() + 1);
        let mut per_query: Vec<usize> = gt.clone();
        per_query.extend(pool.iter().take(per_query_len - gt.len()));
        per_query.sort_unstable();

        let image = format!("queries/{q:05}.ppm");
        write_image(dir, &image, &reference)?;
        let ids = |v: &[usize]| v.iter().map(|&i| gallery[i].id.clone()).collect::<Vec<_>>();
        queries.push(QueryRecord {
            id: format!("q{q:05}"),
            image,
            caption: caption(&reference)?,
            textual_modification: composite_instruction(&reference, &edits, rng.gen())?,
            reference_scene: reference,
            target_text,
            target_scene: target.clone(),
            target_id: gallery[position[target_index[group]]].id.clone(),
            ground_truth_ids: ids(&gt),
            subset_ids: ids(&subset),
            per_query_gallery_ids: ids(&per_query),
            edits,
        });
    }
    write_jsonl(&dir.join(QUERY_FILE), &queries)?;

    let summary = BenchmarkSummary {
        config: config.clone(),
        corpus: corpus.len(),
        train: train.len(),
        queries: queries.len(),
        gallery: gallery.len(),
        target_groups: groups,
        max_ground_truths: max_gt,
    };
    let p = dir.join(SUMMARY_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(io_err(&p))?;
    let p = dir.join("README.md");
    std::fs::write(&p, README).map_err(io_err(&p))?;
    Ok(summary)
}
