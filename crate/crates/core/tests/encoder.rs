use motadual::encoder::{
    checkpoint_paths, tokenize, DualEncoder, DualEncoderConfig, ImageTensor, TextInput, Vocabulary,
};
use motadual::numerics::{Graph, Tensor};
use motadual::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> DualEncoderConfig {
    DualEncoderConfig {
        d: 16,
        d_out: 12,
        heads: 2,
        text_layers: 2,
        vision_layers: 2,
        max_len: 16,
        image_size: 16,
        patch_size: 4,
        mlp_ratio: 2,
        max_prompts: 8,
        ..Default::default()
    }
}

fn encoder(seed: u64) -> DualEncoder<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DualEncoder::init(toy_config(), &mut rng).unwrap()
}

fn random_image(rng: &mut impl Rng, size: usize) -> ImageTensor {
    ImageTensor::new(size, size, (0..3 * size * size).map(|_| rng.gen()).collect()).unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn text_features_are_unit_norm_and_pad_invariant() {
    let enc = encoder(1);
    let vocab = Vocabulary::synthetic();
    for text in ["a red circle", "turn the square blue and move it to the left", "a photo"] {
        let seq = tokenize(text, &vocab, 16).unwrap();
        let padded = enc.encode_text(&seq, None).unwrap();
        let trimmed = enc.encode_text(&seq.trimmed(), None).unwrap();
        assert_eq!(padded.len(), 12);
        assert!((norm(&padded) - 1.0).abs() < 1e-6);
        let diff = padded.iter().zip(&trimmed).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "pad invariance violated by {diff}");
    }
}

#[test]
fn encoding_is_deterministic_given_seed() {
    let vocab = Vocabulary::synthetic();
    let seq = tokenize("a green triangle on a black background", &vocab, 16).unwrap();
    let a = encoder(7).encode_text(&seq, None).unwrap();
    let b = encoder(7).encode_text(&seq, None).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = encoder(8).encode_text(&seq, None).unwrap();
    assert_ne!(a, c);
}

#[test]
fn pseudo_slot_substitution() {
    let enc = encoder(2);
    let vocab = Vocabulary::synthetic();
    let seq = tokenize("a photo of <S*> that", &vocab, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e1: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e2: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f1 = enc.encode_text(&seq, Some(&e1)).unwrap();
    let f1b = enc.encode_text(&seq, Some(&e1)).unwrap();
    let f2 = enc.encode_text(&seq, Some(&e2)).unwrap();
    assert_eq!(f1, f1b);
    assert_ne!(f1, f2);
    assert!(matches!(enc.encode_text(&seq, None), Err(Error::Contract(_))));
    let plain = tokenize("a photo", &vocab, 16).unwrap();
    assert!(matches!(enc.encode_text(&plain, Some(&e1)), Err(Error::Contract(_))));
}

#[test]
fn patchify_shapes_bias_and_locality() {
    let mut cfg = DualEncoderConfig::default();
    cfg.d = 16;
    cfg.heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut enc = DualEncoder::<f64>::init(cfg, &mut rng).unwrap();
    let seq = enc.patchify(&ImageTensor::zeros(32, 32)).unwrap();
    assert_eq!(seq.shape(), &[17, 16]);

    // zero image: patch rows minus positions equal the projection bias
    let bias_idx = enc.vision_layout().patch_bias;
    let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
    *enc.params_mut().get_mut(bias_idx) = Tensor::vector(bias.clone());
    let seq = enc.patchify(&ImageTensor::zeros(32, 32)).unwrap();
    let pos = enc.params().get(enc.vision_layout().positional_embedding).clone();
    for r in 1..17 {
        for c in 0..16 {
            let v = seq.row(r)[c] - pos.row(r)[c];
            assert!((v - bias[c]).abs() < 1e-12);
        }
    }

    // one patch changed -> only that row changes
    let a = random_image(&mut rng, 32);
    let mut b = a.clone();
    for y in 8..16 {
        for x in 16..24 {
            b.set(1, y, x, 1.0 - a.get(1, y, x));
        }
    }
    let sa = enc.patchify(&a).unwrap();
    let sb = enc.patchify(&b).unwrap();
    // tile (row 1, col 2) of a 4×4 grid is patch 6, sequence row 7
    for r in 0..17 {
        let same = sa.row(r) == sb.row(r);
        assert_eq!(same, r != 7, "row {r}");
    }
    assert!(enc.patchify(&ImageTensor::zeros(16, 16)).is_err());
}

#[test]
fn image_features_with_and_without_prompts() {
    let enc = encoder(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 16);
    let plain = enc.encode_image(&img, None).unwrap();
    assert_eq!(plain.len(), 12);
    assert!((norm(&plain) - 1.0).abs() < 1e-6);

    let zeros = Tensor::zeros(&[4, 16]);
    let prompted = enc.encode_image(&img, Some(&zeros)).unwrap();
    assert_eq!(prompted.len(), 12);
    assert!((norm(&prompted) - 1.0).abs() < 1e-6);
    assert_ne!(plain, prompted, "zero prompts still change attention normalization");

    let wrong = Tensor::zeros(&[4, 15]);
    assert!(matches!(enc.encode_image(&img, Some(&wrong)), Err(Error::Contract(_))));
    let too_many = Tensor::zeros(&[9, 16]);
    assert!(enc.encode_image(&img, Some(&too_many)).is_err());
}

#[test]
fn batched_and_single_encodings_agree() {
    let enc = encoder(9);
    let vocab = Vocabulary::synthetic();
    let texts = ["a red circle", "a blue square and a pink triangle on a gray background"];
    let seqs: Vec<_> = texts.iter().map(|t| tokenize(t, &vocab, 16).unwrap()).collect();
    let batch = enc.encode_texts(&seqs).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let single = enc.encode_text(s, None).unwrap();
        let diff = batch.row(i).iter().zip(&single).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let imgs: Vec<_> = (0..3).map(|_| random_image(&mut rng, 16)).collect();
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let batch = enc.encode_images(&refs, None).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let single = enc.encode_image(img, None).unwrap();
        let diff = batch.row(i).iter().zip(&single).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }
}

#[test]
fn text_prompts_shift_the_pooled_row() {
    let enc = encoder(11).cast::<f64>();
    let vocab = Vocabulary::synthetic();
    let seq = tokenize("a red circle", &vocab, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let run = |prompts: Option<Tensor<f64>>| {
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, false);
        let p = prompts.map(|p| g.constant(p));
        let f = enc.text_forward(&mut g, &vars, &[TextInput { seq: &seq, pseudo: None }], p).unwrap();
        g.value(f).data().to_vec()
    };
    let base = enc.encode_text(&seq, None).unwrap();
    let p1: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut p2 = p1.clone();
    p2[5] += 0.5;
    let a = run(Some(Tensor::new(&[4, 16], p1).unwrap()));
    let b = run(Some(Tensor::new(&[4, 16], p2).unwrap()));
    assert_ne!(a, b);
    assert_ne!(a, base);
    assert_eq!(run(None), base);
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let enc = encoder(13);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ckpt/encoder");
    let manifest = enc.save(&stem, Some(13)).unwrap();
    assert_eq!(manifest.entries.len(), enc.params().len());
    let (loaded, info) = DualEncoder::load(&stem, Some(&toy_config())).unwrap();
    assert!(info.digest_ok);
    assert!(loaded.params().bit_identical(enc.params()));

    // config mismatch
    let other = DualEncoderConfig { d_out: 8, ..toy_config() };
    assert!(matches!(DualEncoder::load(&stem, Some(&other)), Err(Error::Checkpoint(_))));

    // flipped byte: still loads, digest mismatch reported
    let (manifest_path, blob_path) = checkpoint_paths(&stem);
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[100] ^= 0x01;
    std::fs::write(&blob_path, &blob).unwrap();
    let (_, info) = DualEncoder::load(&stem, None).unwrap();
    assert!(!info.digest_ok);

    // truncated blob
    std::fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(DualEncoder::load(&stem, None), Err(Error::Checkpoint(_))));
    std::fs::write(&blob_path, &blob).unwrap();

    // version mismatch and unknown entries
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["format_version"] = 99.into();
    std::fs::write(&manifest_path, json.to_string()).unwrap();
    assert!(matches!(DualEncoder::load(&stem, None), Err(Error::Checkpoint(_))));
    json["format_version"] = 1.into();
    json["entries"][0]["name"] = "text.mystery".into();
    std::fs::write(&manifest_path, json.to_string()).unwrap();
    let err = DualEncoder::load(&stem, None).unwrap_err();
    assert!(err.to_string().contains("mystery"), "{err}");
}
