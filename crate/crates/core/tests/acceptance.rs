//! One pass/fail line per acceptance criterion. Lines are written straight
//! to stdout so they show up without `--nocapture`.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use motadual::datagen::*;
use motadual::encoder::{checkpoint_paths, DualEncoder};
use motadual::experiment::*;
use motadual::inversion::InversionNet;
use motadual::numerics::Tensor;
use motadual::prompt_tuning::*;
use motadual::retrieval_eval::*;
use motadual::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CMPM_TOL: f64 = 1e-6;
const METRIC_INSTANCES: usize = 200;
const METRIC_BUDGET: Duration = Duration::from_secs(60);
const DIRECTION_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: [u64; 3] = [0, 1, 2];

struct Check {
    passed: bool,
    detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn emit(n: usize, name: &str, outcome: Result<Check>) -> bool {
    let check = outcome.unwrap_or_else(|e| Check::new(false, format!("error: {e}")));
    let line = format!(
        "[{}] criterion {n} {name}: {}\n",
        if check.passed { "PASS" } else { "FAIL" },
        check.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    check.passed
}

fn grad_audit_check() -> Result<Check> {
    let cfg = GradAuditConfig::default();
    let start = Instant::now();
    let report = grad_audit(&cfg)?;
    let elapsed = start.elapsed();
    let worst = report.modes.iter().map(|m| m.max_relative_error).fold(0.0, f64::max);
    let frozen = report.modes.iter().map(|m| m.frozen_grad_max).fold(0.0, f64::max);
    let passed = report.passed
        && cfg.d == 8
        && cfg.batch == 3
        && report.modes.len() == 3
        && worst < GRAD_TOL
        && frozen == 0.0
        && elapsed < GRAD_BUDGET;
    Ok(Check::new(
        passed,
        format!(
            "max rel err {worst:.2e} (< {GRAD_TOL:e}) over {} modes, frozen grads {frozen:e}, {:.1}s",
            report.modes.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn cmpm_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tau = INIT_TAU;
    let batch = |c: Tensor<f64>, t: Tensor<f64>, names: &[&str]| -> Result<MatchBatch> {
        Ok(MatchBatch {
            composed: c,
            targets: t,
            labels: match_labels(names)?,
            eps: CMPM_EPS,
        })
    };

    let single = cmpm_loss(&batch(random_rows(&mut rng, 1, 6), random_rows(&mut rng, 1, 6), &["x"])?, tau)?;
    let n1 = single.loss.abs();

    let names = ["a", "b", "c", "d", "e", "f"];
    let c = random_rows(&mut rng, 6, 6);
    let t = random_rows(&mut rng, 6, 6);
    let value = cmpm_loss(&batch(c.clone(), t.clone(), &names)?, tau)?;
    let row_err = (0..6)
        .map(|i| (value.p.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let take = |x: &Tensor<f64>| {
        Tensor::new(&[6, 6], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap()
    };
    let pnames: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
    let permuted = cmpm_loss(&batch(take(&c), take(&t), &pnames)?, tau)?;
    let perm_err = (permuted.loss - value.loss).abs();

    let dup = cmpm_loss(&batch(random_rows(&mut rng, 2, 6), random_rows(&mut rng, 2, 6), &["same", "same"])?, tau)?;
    let q_err = dup.q.data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);

    let passed = n1 < CMPM_TOL && row_err < CMPM_TOL && perm_err < CMPM_TOL && q_err < CMPM_TOL;
    Ok(Check::new(
        passed,
        format!("|L(N=1)| {n1:.1e}, row-sum err {row_err:.1e}, permutation delta {perm_err:.1e}, duplicate q err {q_err:.1e}"),
    ))
}

fn file_bytes(stem: &Path) -> Result<Vec<u8>> {
    let (m, b) = checkpoint_paths(stem);
    let mut out = std::fs::read(&m).map_err(|e| Error::Contract(format!("{}: {e}", m.display())))?;
    out.extend(std::fs::read(&b).map_err(|e| Error::Contract(format!("{}: {e}", b.display())))?);
    Ok(out)
}

fn small_config(root: &Path, seed: u64) -> Result<ExperimentConfig> {
    let text = format!(
        r#"{{
  "seed": {seed},
  "paths": {{"root": {root:?}}},
  "benchmark": {{"n_corpus": 200, "n_train": 80, "n_query": 24, "n_gallery": 80, "n_target_groups": 8}},
  "stage0": {{"total_steps": 30, "warmup_steps": 5, "base_lr": 0.001}},
  "stage1": {{"total_steps": 20}},
  "stage2": {{"total_steps": 12, "warmup_steps": 3}}
}}"#
    );
    ExperimentConfig::from_json(&text, &Overrides::default())
}

fn frozen_check() -> Result<Check> {
    let dir = tempfile::tempdir().map_err(|e| Error::Contract(e.to_string()))?;
    let cfg = small_config(dir.path(), 5)?;
    run_gen_data(&cfg)?;
    run_gen_triplets(&cfg, BackendKind::Mock)?;
    run_train_encoders(&cfg)?;
    let enc_stem = cfg.paths.encoder_stem();
    let inv_stem = cfg.paths.inversion_stem();
    let enc0 = file_bytes(&enc_stem)?;
    run_pretrain_inversion(&cfg)?;
    let enc1 = file_bytes(&enc_stem)?;
    let inv1 = file_bytes(&inv_stem)?;
    run_finetune(&cfg, &PromptMode::ALL)?;
    let enc2 = file_bytes(&enc_stem)?;
    let inv2 = file_bytes(&inv_stem)?;
    let stage1_ok = enc0 == enc1;
    let stage2_ok = enc1 == enc2 && inv1 == inv2;
    Ok(Check::new(
        stage1_ok && stage2_ok,
        format!("encoder unchanged by stage 1: {stage1_ok}; encoder and inversion unchanged by stage 2 (3 modes): {stage2_ok}"),
    ))
}

fn oracle_recall(ranked: &[String], gts: &HashSet<String>, k: usize) -> bool {
    ranked.iter().take(k).filter(|id| gts.contains(*id)).count() > 0
}

fn oracle_ap(ranked: &[String], gts: &HashSet<String>, k: usize) -> f64 {
    let ranks: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, id)| gts.contains(*id))
        .map(|(r, _)| r)
        .collect();
    let mut total = 0.0;
    for (j, &r) in ranks.iter().enumerate() {
        if r < k {
            total += (j + 1) as f64 / (r + 1) as f64;
        }
    }
    total / gts.len().min(k) as f64
}

/// Brute-force cosine ranking with ties by ascending id.
fn oracle_rank(query: &[f32], ids: &[String], rows: &[Vec<f32>], candidates: &[String]) -> Vec<String> {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(f64, String)> = Vec::new();
    for (id, row) in ids.iter().zip(rows) {
        if !candidates.contains(id) {
            continue;
        }
        let dot: f64 = row.iter().zip(query).map(|(a, b)| *a as f64 * *b as f64).sum();
        scored.push((dot / (qn * norm(row)), id.clone()));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

fn metric_check() -> Result<Check> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = [0usize; 3];
    for _ in 0..METRIC_INSTANCES {
        let n = rng.gen_range(6..40);
        let d = rng.gen_range(2..9);
        let ids: Vec<String> = (0..n).map(|i| format!("g{i:03}")).collect();
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let index = GalleryIndex::new(ids.clone(), &Tensor::new(&[n, d], rows.concat())?)?;
        let query: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n_gt = rng.gen_range(1..5.min(n));
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let gts: Vec<String> = shuffled[..n_gt].to_vec();
        let gt_set: HashSet<String> = gts.iter().cloned().collect();
        let k = rng.gen_range(1..=n);

        let ranked = retrieve(&query, &index, n, None)?;
        let ranked_ids: Vec<&str> = ranked.ids();
        let full = oracle_rank(&query, &ids, &rows, &ids);
        if recall_at_k(&ranked_ids, &gts, k) != oracle_recall(&full, &gt_set, k) {
            mismatches[0] += 1;
        }
        if average_precision_at_k(&ranked_ids, &gts, k) != oracle_ap(&full, &gt_set, k) {
            mismatches[2] += 1;
        }

        let extra = rng.gen_range(1..=(n - n_gt).min(6));
        let mut subset: Vec<String> = gts.clone();
        subset.extend(shuffled[n_gt..n_gt + extra].iter().cloned());
        subset.shuffle(&mut rng);
        let ks = rng.gen_range(1..=subset.len());
        let spec = QuerySpec {
            id: "q".into(),
            image: String::new(),
            modification: String::new(),
            ground_truth_ids: gts.clone(),
            subset_ids: Some(subset.clone()),
            per_query_gallery_ids: None,
            target: String::new(),
        };
        let sub = oracle_rank(&query, &ids, &rows, &subset);
        if subset_recall_at_k(&query, &index, &spec, ks)? != oracle_recall(&sub, &gt_set, ks) {
            mismatches[1] += 1;
        }
    }
    let ranked: Vec<&str> = vec!["t1", "x", "t2", "t3", "y"];
    let hand = average_precision_at_k(&ranked, &["t1".into(), "t2".into(), "t3".into()], 5);
    let hand_ok = (hand - (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0).abs() < 1e-12 && (hand - 0.805_555).abs() < 1e-6;
    let elapsed = start.elapsed();
    Ok(Check::new(
        mismatches == [0, 0, 0] && hand_ok && elapsed < METRIC_BUDGET,
        format!(
            "{METRIC_INSTANCES} instances each, mismatches recall/subset/mAP {mismatches:?}, hand AP@5 {hand:.5}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

struct SeedRun {
    seed: u64,
    map5: [f64; 4],
    ch: [f64; 4],
}

fn direction_config(root: &Path, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::for_profile(Profile::DeskDefault, seed);
    cfg.paths.root = root.to_path_buf();
    cfg.paths.triplets = Some(cfg.paths.benchmark().join(TRAIN_FILE));
    cfg.stage0.total_steps = 600;
    cfg.stage0.base_lr = 1e-3;
    cfg.stage1.total_steps = 500;
    cfg.validate()?;
    Ok(cfg)
}

fn direction_runs(root: &Path) -> Result<(Vec<SeedRun>, Duration)> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let cfg = direction_config(&root.join(format!("seed{seed}")), seed)?;
        let (summary, _) = run_gen_data(&cfg)?;
        if (summary.train, summary.queries, summary.gallery) != (2000, 100, 500) {
            return Err(Error::Contract(format!("unexpected benchmark sizes {summary:?}")));
        }
        run_train_encoders(&cfg)?;
        run_pretrain_inversion(&cfg)?;
        run_finetune(&cfg, &PromptMode::ALL)?;
        let (reports, _) = run_eval(&cfg)?;
        let mut map5 = [0.0; 4];
        let mut ch = [0.0; 4];
        for (i, system) in System::ALL.iter().enumerate() {
            let r = reports
                .iter()
                .find(|r| r.system == system.as_str())
                .ok_or_else(|| Error::Contract(format!("no report for {system}")))?;
            map5[i] = r.get("map@5").unwrap_or(f64::NAN);
            ch[i] = r.calinski_harabasz.unwrap_or(f64::NAN);
        }
        runs.push(SeedRun { seed, map5, ch });
    }
    Ok((runs, start.elapsed()))
}

fn direction_check(runs: &[SeedRun], elapsed: Duration) -> Check {
    let mut passed = elapsed < DIRECTION_BUDGET && runs.len() == SEEDS.len();
    let mut parts = Vec::new();
    for r in runs {
        let wins = (1..4).filter(|&i| r.map5[i] > r.map5[0]).count();
        passed &= wins == 3;
        parts.push(format!(
            "seed {}: baseline {:.4} textual {:.4} visual {:.4} dual {:.4}",
            r.seed, r.map5[0], r.map5[1], r.map5[2], r.map5[3]
        ));
    }
    Check::new(
        passed,
        format!("mAP@5 {}; {:.0}s for 3 seeds", parts.join("; "), elapsed.as_secs_f64()),
    )
}

fn cluster_check(runs: &[SeedRun]) -> Check {
    let mut passed = runs.len() == SEEDS.len();
    let mut parts = Vec::new();
    for r in runs {
        passed &= r.ch[3] > r.ch[0];
        parts.push(format!("seed {}: {:.3} -> {:.3}", r.seed, r.ch[0], r.ch[3]));
    }
    Check::new(passed, format!("CH on 12 targets, baseline -> dual: {}", parts.join("; ")))
}

fn synthetic_corpus(n: usize, seed: u64) -> Result<Vec<CaptionRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = sample_scene(&mut rng, seed);
            Ok(CaptionRecord {
                id: format!("c{i:04}"),
                image: format!("corpus/{i:04}.ppm"),
                caption: caption(&scene)?,
                blip_caption: None,
            })
        })
        .collect()
}

struct Faulty {
    inner: MockBackend,
    bad: HashSet<String>,
    calls: AtomicUsize,
}

impl LlmBackend for Faulty {
    fn generate(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.bad.contains(caption_from_prompt(prompt).unwrap_or("")) {
            return Err(Error::Backend("injected fault".into()));
        }
        self.inner.generate(prompt)
    }

    fn source(&self) -> Source {
        Source::Llm
    }
}

fn pipeline_check() -> Result<Check> {
    let corpus = synthetic_corpus(100, 77)?;
    let mock = MockBackend::new(3);
    let (records, stats) = generate_triplets(&corpus, &mock, GenerateOptions::default());
    let mut closed = 0;
    for (rec, c) in records.iter().zip(&corpus) {
        rec.validate()?;
        let plan = mock.plan(&build_llm_prompt(&c.caption)?)?;
        if caption(&apply_edits(&plan.scene, &plan.edits)?)? == rec.target_text {
            closed += 1;
        }
    }
    let mock_ok = records.len() == 100 && closed == 100 && stats.succeeded == 100;

    let bad: HashSet<String> = corpus.iter().step_by(4).map(|c| c.caption.clone()).collect();
    let faulty = Faulty {
        inner: MockBackend::new(3),
        bad,
        calls: AtomicUsize::new(0),
    };
    let (kept, fstats) = generate_triplets(
        &corpus,
        &faulty,
        GenerateOptions {
            max_retries: 1,
            max_concurrent: 2,
        },
    );
    let fault_ok = fstats.attempted == fstats.succeeded + fstats.skipped
        && fstats.skipped > 0
        && kept.len() == fstats.succeeded
        && faulty.calls.load(Ordering::SeqCst) == fstats.succeeded + 2 * fstats.skipped;

    let dir = tempfile::tempdir().map_err(|e| Error::Contract(e.to_string()))?;
    let path = dir.path().join("appendix.jsonl");
    let line = r#"{"id": "GCC_train_000261659", "image": "train/GCC_train_000261659.jpg", "caption": "a red circle on a white background", "textual modification": "make the circle blue", "target text": "a blue circle on a white background"}"#;
    std::fs::write(&path, format!("{line}\n")).map_err(|e| Error::Contract(e.to_string()))?;
    let parsed = read_triplets(&path)?;
    let keys_ok = parsed.len() == 1
        && parsed[0].id == "GCC_train_000261659"
        && parsed[0].textual_modification == "make the circle blue"
        && parsed[0].target_text == "a blue circle on a white background";

    Ok(Check::new(
        mock_ok && fault_ok && keys_ok,
        format!(
            "mock {} records, {closed}/100 closed; faulty attempted {} = succeeded {} + skipped {}; spaced keys ingest: {keys_ok}",
            records.len(),
            fstats.attempted,
            fstats.succeeded,
            fstats.skipped
        ),
    ))
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility_check() -> Result<Check> {
    let tmp = tempfile::tempdir().map_err(|e| Error::Contract(e.to_string()))?;
    let mut evals = Vec::new();
    let mut audits = Vec::new();
    let mut retrieved = Vec::new();
    for run in ["a", "b"] {
        let cfg = small_config(&tmp.path().join(run), 9)?;
        run_gen_data(&cfg)?;
        run_gen_triplets(&cfg, BackendKind::Mock)?;
        run_train_encoders(&cfg)?;
        run_pretrain_inversion(&cfg)?;
        run_finetune(&cfg, &PromptMode::ALL)?;
        let mut reports = run_eval(&cfg)?.0;
        for r in &mut reports {
            r.config_fingerprint.clear();
        }
        evals.push(reports);
        run_export_features(&cfg)?;
        let image = cfg.paths.benchmark().join("queries/00000.ppm");
        retrieved.push(run_retrieve(&cfg, System::Dual, &image, "make the circle red", 10)?.0);
        audits.push(run_grad_check(&cfg)?.0);
    }
    let artifacts = |run: &str| -> Vec<(PathBuf, Vec<u8>)> {
        tree(&tmp.path().join(run))
            .into_iter()
            .filter(|(p, _)| {
                let name = p.file_name().unwrap().to_string_lossy();
                !name.starts_with("run_") && name != "eval.json"
            })
            .collect()
    };
    let (ta, tb) = (artifacts("a"), artifacts("b"));
    let same_files = ta == tb;
    let same_reports = evals[0] == evals[1] && audits[0] == audits[1] && retrieved[0] == retrieved[1];

    let cfg = small_config(&tmp.path().join("a"), 9)?;
    let ck = tmp.path().join("roundtrip");
    std::fs::create_dir_all(&ck).map_err(|e| Error::Contract(e.to_string()))?;
    let (enc, _) = DualEncoder::load(&cfg.paths.encoder_stem(), Some(&cfg.encoder))?;
    enc.save(&ck.join("encoder"), Some(9))?;
    InversionNet::load(&cfg.paths.inversion_stem())?.save(&ck.join("inversion"), Some(9))?;
    PromptState::load(&cfg.paths.prompt_stem(PromptMode::Dual))?.save(&ck.join("prompts"), Some(9))?;
    let round_trip = file_bytes(&cfg.paths.encoder_stem())? == file_bytes(&ck.join("encoder"))?
        && file_bytes(&cfg.paths.inversion_stem())? == file_bytes(&ck.join("inversion"))?
        && file_bytes(&cfg.paths.prompt_stem(PromptMode::Dual))? == file_bytes(&ck.join("prompts"))?;

    Ok(Check::new(
        same_files && same_reports && round_trip,
        format!(
            "{} artifacts byte-identical across two runs: {same_files}; eval/retrieve/grad-check reports equal: {same_reports}; checkpoint load/save bit-exact: {round_trip}",
            ta.len()
        ),
    ))
}

fn profile_check() -> Result<Check> {
    let expected = [
        (Profile::FashioniqLike, 1e-4, 100, 500, 4),
        (Profile::CirrLike, 1e-3, 100, 500, 8),
        (Profile::CircoLike, 1e-3, 300, 2000, 20),
        (Profile::GenecisLike, 1e-3, 300, 2000, 20),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (profile, lr, warmup, total, n_ctx) in expected {
        let over = Overrides {
            profile: Some(profile),
            ..Overrides::default()
        };
        let s2 = ExperimentConfig::from_json("{}", &over)?.stage2;
        let snapshot = serde_json::json!({
            "base_lr": s2.base_lr, "warmup_steps": s2.warmup_steps, "total_steps": s2.total_steps, "n_ctx": s2.n_ctx,
        });
        let want = serde_json::json!({
            "base_lr": lr, "warmup_steps": warmup, "total_steps": total, "n_ctx": n_ctx,
        });
        passed &= snapshot == want && s2.batch_size == DESK_STAGE2_BATCH;
        parts.push(format!("{profile} ({lr:e}, {warmup}, {total}, {n_ctx})"));
    }
    Ok(Check::new(
        passed,
        format!("{}; batch {PAPER_STAGE2_BATCH} -> {DESK_STAGE2_BATCH}", parts.join(", ")),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    results.push(emit(1, "gradient audit", grad_audit_check()));
    results.push(emit(2, "CMPM unit truths", cmpm_check()));
    results.push(emit(3, "frozen backbone", frozen_check()));
    results.push(emit(4, "metric oracles", metric_check()));

    let tmp = tempfile::tempdir().unwrap();
    match direction_runs(tmp.path()) {
        Ok((runs, elapsed)) => {
            results.push(emit(5, "direction of effect", Ok(direction_check(&runs, elapsed))));
            results.push(emit(6, "cluster quality", Ok(cluster_check(&runs))));
        }
        Err(e) => {
            let msg = e.to_string();
            results.push(emit(5, "direction of effect", Err(Error::Contract(msg.clone()))));
            results.push(emit(6, "cluster quality", Err(Error::Contract(msg))));
        }
    }

    results.push(emit(7, "pipeline integrity", pipeline_check()));
    results.push(emit(8, "reproducibility", reproducibility_check()));
    results.push(emit(9, "profile fidelity", profile_check()));

    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
