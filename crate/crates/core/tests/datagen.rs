use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use motadual::datagen::*;
use motadual::encoder::ImageTensor;
use motadual::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic_corpus(n: usize, seed: u64) -> Vec<CaptionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = sample_scene(&mut rng, seed);
            CaptionRecord {
                id: format!("c{i:04}"),
                image: format!("corpus/{i:04}.ppm"),
                caption: caption(&s).unwrap(),
                blip_caption: None,
            }
        })
        .collect()
}

#[test]
fn caption_grammar_example() {
    let s = SceneSpec::new(
        vec![SceneObject {
            shape: Shape::Circle,
            color: Color::Red,
            cell: 4,
        }],
        Background::White,
        0,
    )
    .unwrap();
    assert_eq!(caption(&s).unwrap(), "a red circle on a white background");
    assert_eq!(render(&s).unwrap(), render(&s).unwrap());
}

#[test]
fn distinct_scenes_render_distinct_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scenes: Vec<SceneSpec> = Vec::new();
    while scenes.len() < 500 {
        let s = sample_scene(&mut rng, 11);
        if !scenes.iter().any(|t| t.same_content(&s)) {
            scenes.push(s);
        }
    }
    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let bytes = render(s).unwrap().to_rgb8();
        if let Some(j) = seen.insert(bytes, i) {
            panic!("scenes {j} and {i} render identically: {:?} / {:?}", scenes[j], s);
        }
    }
}

/// Independent re-implementation of each edit on the field level.
fn expected_after(scene: &SceneSpec, edit: &EditOp) -> (Vec<(Shape, Color, usize)>, Background) {
    let mut objs: Vec<(Shape, Color, usize)> =
        scene.objects.iter().map(|o| (o.shape, o.color, o.cell)).collect();
    let mut bg = scene.background;
    match *edit {
        EditOp::Recolor { cell, to } => objs.iter_mut().filter(|o| o.2 == cell).for_each(|o| o.1 = to),
        EditOp::ChangeShape { cell, to } => objs.iter_mut().filter(|o| o.2 == cell).for_each(|o| o.0 = to),
        EditOp::Add { shape, color, cell } => objs.push((shape, color, cell)),
        EditOp::Remove { cell } => objs.retain(|o| o.2 != cell),
        EditOp::Move { from, to } => objs.iter_mut().filter(|o| o.2 == from).for_each(|o| o.2 = to),
        EditOp::ChangeBackground { to } => bg = to,
    }
    objs.sort_by_key(|o| o.2);
    (objs, bg)
}

#[test]
fn edits_change_exactly_the_edited_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kinds = HashSet::new();
    for _ in 0..1000 {
        let s = sample_scene(&mut rng, 5);
        let e = sample_edit(&s, &mut rng);
        kinds.insert(e.kind());
        let out = apply_edit(&s, &e).unwrap();
        let got: Vec<(Shape, Color, usize)> = out.objects.iter().map(|o| (o.shape, o.color, o.cell)).collect();
        let (want, bg) = expected_after(&s, &e);
        assert_eq!(got, want, "{e:?} on {s:?}");
        assert_eq!(out.background, bg);
        assert!(!out.same_content(&s), "edit {e:?} left the scene unchanged");
        let text = edit_to_instruction(&e, &s, 3).unwrap();
        assert!(!text.trim().is_empty());
    }
    assert_eq!(kinds.len(), 6);
}

#[test]
fn inapplicable_edit_is_contract_error() {
    let s = SceneSpec::new(
        vec![SceneObject {
            shape: Shape::Square,
            color: Color::Blue,
            cell: 0,
        }],
        Background::Gray,
        0,
    )
    .unwrap();
    assert!(matches!(apply_edit(&s, &EditOp::Remove { cell: 5 }), Err(Error::Contract(_))));
    let add = EditOp::Add {
        shape: Shape::Circle,
        color: Color::Red,
        cell: 0,
    };
    assert!(matches!(apply_edit(&s, &add), Err(Error::Contract(_))));
}

#[test]
fn prompt_carries_appendix_text() {
    let p = build_llm_prompt("a group of puppies playing in the grass").unwrap();
    assert!(p.contains("make them sit on the wooden floor"));
    assert!(p.contains("instruction:"));
    assert!(p.contains("edited_description:"));
    let q = build_llm_prompt("a red circle on a white background").unwrap();
    let strip = |s: &str, c: &str| s.strip_suffix(c).unwrap().to_string();
    assert_eq!(
        strip(&p, "a group of puppies playing in the grass"),
        strip(&q, "a red circle on a white background")
    );
    assert!(build_llm_prompt("  ").is_err());
}

#[test]
fn parses_appendix_example_reply() {
    let reply = r#"{"instruction": "make them sit on the wooden floor", "edited_description": "some puppies is sitting on the wooden floor"}"#;
    let r = parse_llm_reply(reply).unwrap();
    assert_eq!(r.instruction, "make them sit on the wooden floor");
    assert_eq!(r.edited_description, "some puppies is sitting on the wooden floor");
    let wrapped = format!("Sure! Here it is:\n{reply}\nHope that helps {{:)}}");
    assert_eq!(parse_llm_reply(&wrapped).unwrap(), r);
    assert!(matches!(parse_llm_reply("sorry, I cannot"), Err(Error::Parse(_))));
    assert!(parse_llm_reply(r#"{"instruction": "x"}"#).is_err());
    assert!(parse_llm_reply(r#"{"instruction": " ", "edited_description": "y"}"#).is_err());
}

#[test]
fn mock_backend_closure_on_100_captions() {
    let corpus = synthetic_corpus(100, 3);
    let mock = MockBackend::new(9);
    let (records, stats) = generate_triplets(&corpus, &mock, GenerateOptions::default());
    assert_eq!(records.len(), 100);
    assert_eq!((stats.attempted, stats.succeeded, stats.skipped), (100, 100, 0));
    let mut counts = [0usize; 3];
    for (rec, c) in records.iter().zip(&corpus) {
        rec.validate().unwrap();
        assert_eq!(rec.source, Source::Mock);
        let plan = mock.plan(&build_llm_prompt(&c.caption).unwrap()).unwrap();
        counts[plan.edits.len()] += 1;
        let edited = apply_edits(&plan.scene, &plan.edits).unwrap();
        assert_eq!(caption(&edited).unwrap(), rec.target_text);
        assert_eq!(caption(&plan.scene).unwrap(), c.caption);
        assert_eq!(plan.instruction, rec.textual_modification);
    }
    assert!(counts[1] > 25 && counts[2] > 25, "{counts:?}");
    let again = generate_triplets(&corpus, &mock, GenerateOptions { max_retries: 0, max_concurrent: 4 }).0;
    assert_eq!(again, records);
}

/// Fails permanently for every third caption of the corpus.
struct Faulty<'a> {
    inner: MockBackend,
    bad: HashSet<&'a str>,
    calls: AtomicUsize,
}

impl LlmBackend for Faulty<'_> {
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

#[test]
fn fault_injection_accounting() {
    let corpus = synthetic_corpus(100, 4);
    let unique: HashSet<&str> = corpus.iter().map(|c| c.caption.as_str()).collect();
    let bad: HashSet<&str> = corpus.iter().step_by(3).map(|c| c.caption.as_str()).collect();
    let expected_skips = corpus.iter().filter(|c| bad.contains(c.caption.as_str())).count();
    let backend = Faulty {
        inner: MockBackend::new(1),
        bad,
        calls: AtomicUsize::new(0),
    };
    let opts = GenerateOptions {
        max_retries: 2,
        max_concurrent: 3,
    };
    let (records, stats) = generate_triplets(&corpus, &backend, opts);
    assert_eq!(stats.attempted, 100);
    assert_eq!(stats.succeeded + stats.skipped, stats.attempted);
    assert_eq!(stats.skipped, expected_skips);
    if unique.len() == corpus.len() {
        assert_eq!(stats.skipped, 100usize.div_ceil(3));
    }
    assert_eq!(records.len(), stats.succeeded);
    assert_eq!(stats.retries, 2 * stats.skipped);
    assert_eq!(backend.calls.load(Ordering::SeqCst), stats.succeeded + 3 * stats.skipped);
    let kept: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let want: Vec<&str> = corpus
        .iter()
        .filter(|c| !backend.bad.contains(c.caption.as_str()))
        .map(|c| c.id.as_str())
        .collect();
    assert_eq!(kept, want);
}

#[test]
fn triplet_file_round_trip_and_aliases() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("captions.jsonl");
    let mut corpus = synthetic_corpus(20, 8);
    corpus[0].blip_caption = Some(corpus[1].caption.clone());
    write_jsonl(&corpus_path, &corpus).unwrap();
    let out = dir.path().join("triplets.jsonl");
    let stats = generate_triplets_file(&corpus_path, &MockBackend::new(2), GenerateOptions::default(), &out).unwrap();
    assert_eq!(stats.succeeded, 20);
    let text = std::fs::read_to_string(&out).unwrap();
    let records = read_triplets(&out).unwrap();
    assert_eq!(records[0].caption, corpus[1].caption);
    for (line, rec) in text.lines().zip(&records) {
        let again: TripletRecord = serde_json::from_str(line).unwrap();
        assert_eq!(&again, rec);
        assert!(line.contains("\"textual_modification\""));
    }

    let spaced = dir.path().join("spaced.jsonl");
    std::fs::write(
        &spaced,
        concat!(
            r#"{"id": "GCC_train_000261659", "image": "a.jpg", "caption": "a group of puppies", "textual modification": "make them sit on the wooden floor", "target text": "some puppies is sitting on the wooden floor", "source": "llm"}"#,
            "\n"
        ),
    )
    .unwrap();
    let recs = read_triplets(&spaced).unwrap();
    assert_eq!(recs[0].textual_modification, "make them sit on the wooden floor");
    assert_eq!(recs[0].target_text, "some puppies is sitting on the wooden floor");
}

#[test]
fn ingestion_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let good = r#"{"id": "a", "image": "a.ppm", "caption": "x", "textual_modification": "y", "target_text": "z"}"#;
    std::fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
    match read_triplets(&p) {
        Err(Error::Ingestion { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    std::fs::write(&p, format!("{good}\n{good}\n")).unwrap();
    assert!(read_triplets(&p).is_err(), "duplicate ids accepted");
    let empty = r#"{"id": "b", "image": "a.ppm", "caption": "x", "textual_modification": " ", "target_text": "z"}"#;
    std::fs::write(&p, format!("{empty}\n")).unwrap();
    assert!(read_triplets(&p).is_err());
}

fn serve_once(reply_body: String) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply_body.len(),
            reply_body
        )
        .unwrap();
        head + &String::from_utf8(body).unwrap()
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

#[test]
fn http_backend_talks_chat_completions() {
    let content = r#"{"instruction": "make the circle blue", "edited_description": "a blue circle on a white background"}"#;
    let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
    let (endpoint, server) = serve_once(reply);
    std::env::set_var("MOTADUAL_TEST_TOKEN_OK", "secret-123");
    let backend = HttpBackend::new(HttpBackendConfig {
        endpoint,
        model: "toy".into(),
        auth_token_env: "MOTADUAL_TEST_TOKEN_OK".into(),
        timeout_secs: 10,
        max_retries: 0,
        max_concurrent: 1,
    })
    .unwrap();
    let corpus = vec![CaptionRecord {
        id: "x".into(),
        image: "x.ppm".into(),
        caption: "a red circle on a white background".into(),
        blip_caption: None,
    }];
    let (records, stats) = generate_triplets(&corpus, &backend, GenerateOptions { max_retries: 0, max_concurrent: 1 });
    assert_eq!(stats.succeeded, 1);
    assert_eq!(records[0].textual_modification, "make the circle blue");
    assert_eq!(records[0].source, Source::Llm);
    let request = server.join().unwrap();
    assert!(request.to_ascii_lowercase().contains("authorization: bearer secret-123"));
    assert!(request.contains("\"model\":\"toy\""));
    assert!(request.contains("image_content: a red circle on a white background"));
}

#[test]
fn http_backend_requires_token() {
    let cfg = HttpBackendConfig {
        auth_token_env: "MOTADUAL_TEST_TOKEN_UNSET".into(),
        ..Default::default()
    };
    std::env::remove_var("MOTADUAL_TEST_TOKEN_UNSET");
    assert!(matches!(HttpBackend::new(cfg), Err(Error::Config(_))));
}

fn dir_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(seed: u64) -> BenchmarkConfig {
    BenchmarkConfig {
        seed,
        n_corpus: 30,
        n_train: 40,
        n_query: 50,
        n_gallery: 200,
        n_target_groups: 12,
        ..Default::default()
    }
}

#[test]
fn benchmark_construction_guarantees() {
    let dir = tempfile::tempdir().unwrap();
    let summary = make_benchmark(&small_config(21), dir.path()).unwrap();
    assert_eq!((summary.queries, summary.gallery, summary.train), (50, 200, 40));
    let gallery: Vec<GalleryRecord> = read_jsonl(&dir.path().join(GALLERY_FILE)).unwrap();
    let queries: Vec<QueryRecord> = read_jsonl(&dir.path().join(QUERY_FILE)).unwrap();
    let train = read_triplets(&dir.path().join(TRAIN_FILE)).unwrap();
    assert_eq!(train.len(), 40);
    for t in &train {
        let target = t.target_scene.as_ref().unwrap();
        assert_eq!(caption(target).unwrap(), t.target_text);
    }
    let by_id: HashMap<&str, &GalleryRecord> = gallery.iter().map(|g| (g.id.as_str(), g)).collect();
    assert_eq!(by_id.len(), gallery.len());
    let mut multi = 0;
    for q in &queries {
        assert!(!q.ground_truth_ids.is_empty());
        multi += usize::from(q.ground_truth_ids.len() > 1);
        let gts: HashSet<&str> = q.ground_truth_ids.iter().map(String::as_str).collect();
        for id in &gts {
            assert_eq!(by_id[id].caption, q.target_text);
        }
        let expected: HashSet<&str> = gallery
            .iter()
            .filter(|g| g.caption == q.target_text)
            .map(|g| g.id.as_str())
            .collect();
        assert_eq!(gts, expected);
        assert!(gts.contains(q.target_id.as_str()));
        assert_eq!(q.per_query_gallery_ids.len(), 15);
        assert!(q.subset_ids.len() >= 6);
        for set in [&q.subset_ids, &q.per_query_gallery_ids] {
            let s: HashSet<&str> = set.iter().map(String::as_str).collect();
            assert_eq!(s.len(), set.len());
            assert!(gts.is_subset(&s));
            assert!(s.iter().all(|id| by_id.contains_key(id)));
        }
        let reached = apply_edits(&q.reference_scene, &q.edits).unwrap();
        assert!(reached.same_content(&q.target_scene));
        assert_eq!(caption(&q.reference_scene).unwrap(), q.caption);

        let target = &by_id[q.target_id.as_str()];
        let stored = ImageTensor::read_ppm(&dir.path().join(&target.image)).unwrap();
        assert_eq!(stored, render(&q.target_scene).unwrap());
        let reference = ImageTensor::read_ppm(&dir.path().join(&q.image)).unwrap();
        assert_eq!(reference, render(&q.reference_scene).unwrap());
    }
    assert!(multi > 0, "no query has several ground truths");
}

#[test]
fn benchmark_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_benchmark(&small_config(4), a.path()).unwrap();
    make_benchmark(&small_config(4), b.path()).unwrap();
    assert!(dir_digest(a.path()) == dir_digest(b.path()));
    let c = tempfile::tempdir().unwrap();
    make_benchmark(&small_config(5), c.path()).unwrap();
    assert!(dir_digest(a.path()) != dir_digest(c.path()));
}

#[test]
fn benchmark_size_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchmarkConfig {
        n_query: 50,
        n_gallery: 20,
        ..small_config(0)
    };
    assert!(matches!(make_benchmark(&cfg, dir.path()), Err(Error::Config(_))));
}
