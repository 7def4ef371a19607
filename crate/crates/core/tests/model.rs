use mscl_autodiff::{Tape, Tensor};
use mscl_core::checkpoint::{load_model, model_bytes, save_model};
use mscl_core::data::{BOS, EOS};
use mscl_core::infer::{Decoding, Generator};
use mscl_core::model::{
    classify_states, fuse, patchify, topic_attention, weighted_word_embedding, word_distribution, StudyInput,
};
use mscl_core::{CoreError, Model, ModelConfig, RunConfig, Vocabulary};
use mscl_segment::GrayImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        topics: 3,
        states: 4,
        d_model: 8,
        visual_dim: 8,
        vocab_size: 11,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        ffn_dim: 12,
        max_len: 10,
        patch_size: 4,
        image_size: 8,
        proj_dim: 5,
        positional_encoding: true,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> GrayImage {
    GrayImage::new(size, size, (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn set(model: &mut Model, name: &str, value: Tensor) {
    let i = model.param_index(name).unwrap();
    assert_eq!(model.params()[i].value.shape(), value.shape(), "{name}");
    model.params_mut()[i].value = value;
}

fn input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, views: usize) -> StudyInput {
    StudyInput {
        views: (0..views)
            .map(|_| patchify(&random_image(rng, cfg.image_size), cfg.patch_size).unwrap())
            .collect(),
        indication: (0..4).map(|_| rng.random_range(4..cfg.vocab_size)).collect(),
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn extract_view_contracts() {
    let cfg = tiny();
    let q = cfg.patch_channels();
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 8);
    let patches = patchify(&img, 4).unwrap();
    let tape = Tape::new();
    let b = model.bind(&tape);
    let f = b.extract_view(&patches).unwrap();
    assert_eq!(f.shape(), vec![cfg.visual_dim]);

    // Loop oracle: feature p*q + j is patch p projected onto column j.
    let w = model.param("visual.patch_w");
    let bias = model.param("visual.patch_b");
    for p in 0..cfg.patches() {
        for j in 0..q {
            let want: f64 = (0..16).map(|i| patches.at(p, i) * w.at(i, j)).sum::<f64>() + bias.data()[j];
            assert!((f.value().data()[p * q + j] - want).abs() < 1e-12);
        }
    }

    // Brightening one tile moves only that tile's features.
    let mut px = img.pixels().to_vec();
    for y in 4..8 {
        for x in 0..4 {
            px[y * 8 + x] = 1.0;
        }
    }
    let lit = GrayImage::new(8, 8, px).unwrap();
    let g = b.extract_view(&patchify(&lit, 4).unwrap()).unwrap();
    for (i, (a, c)) in f.value().data().iter().zip(g.value().data()).enumerate() {
        assert_eq!(i / q == 2, a != c, "feature {i}");
    }

    let wrong = Tensor::zeros(&[3, 16]);
    assert!(matches!(b.extract_view(&wrong), Err(CoreError::Input(_))));
    assert!(patchify(&GrayImage::filled(6, 6, 0.0).unwrap(), 4).is_err());
}

#[test]
fn project_diseases_examples() {
    let mut cfg = tiny();
    cfg.visual_dim = cfg.d_model;
    let (n, d, c) = (cfg.topics, cfg.d_model, cfg.visual_dim);
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[c]);

    let b_rows = random(&mut rng, &[n, d]);
    set(&mut model, "disease.a", Tensor::zeros(&[c, n * d]));
    set(&mut model, "disease.b", b_rows.clone());
    {
        let tape = Tape::new();
        let out = model.bind(&tape).project_diseases(tape.constant(x.clone())).unwrap();
        assert_eq!(out.value(), b_rows);
    }

    let mut eye = vec![0.0; c * n * d];
    for j in 0..n {
        for i in 0..c {
            eye[i * n * d + j * d + i] = 1.0;
        }
    }
    set(&mut model, "disease.a", Tensor::new(vec![c, n * d], eye).unwrap());
    set(&mut model, "disease.b", Tensor::zeros(&[n, d]));
    {
        let tape = Tape::new();
        let out = model.bind(&tape).project_diseases(tape.constant(x.clone())).unwrap().value();
        for j in 0..n {
            assert_eq!(out.row(j), x.data());
        }
    }

    let a = random(&mut rng, &[c, n * d]);
    set(&mut model, "disease.a", a.clone());
    set(&mut model, "disease.b", b_rows.clone());
    let tape = Tape::new();
    let out = model.bind(&tape).project_diseases(tape.constant(x.clone())).unwrap().value();
    for j in 0..n {
        for col in 0..d {
            let mut v = b_rows.at(j, col);
            for i in 0..c {
                v += a.at(i, j * d + col) * x.data()[i];
            }
            assert!((out.at(j, col) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_text_contracts() {
    let mut cfg = tiny();
    cfg.positional_encoding = false;
    let model = Model::new(cfg.clone(), 5).unwrap();
    let tape = Tape::new();
    let b = model.bind(&tape);
    let ids = [4, 7, 9, 5];
    let perm = [2, 0, 3, 1];
    let permuted: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
    let h = b.encode_text(&ids).unwrap().value();
    let hp = b.encode_text(&permuted).unwrap().value();
    assert_eq!(h.shape(), &[4, cfg.d_model]);
    for (r, &src) in perm.iter().enumerate() {
        close(hp.row(r), h.row(src), 1e-12);
    }
    assert_eq!(b.encode_text(&ids).unwrap().value(), h);
    assert_eq!(b.encode_text(&[]).unwrap().value(), b.encode_text(&[0]).unwrap().value());
    assert!(b.encode_text(&[4; 11]).is_err());
    assert!(b.encode_text(&[11]).is_err());
}

#[test]
fn topic_attention_examples() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]).unwrap());
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]]).unwrap());
    let out = topic_attention(q, h).unwrap().value();
    for r in 0..2 {
        close(out.row(r), &[0.3, -1.0, 2.0], 1e-12);
    }

    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let h = tape.constant(Tensor::eye(2));
    let e = std::f64::consts::E;
    let out = topic_attention(q, h).unwrap().value();
    close(out.data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12);
    close(out.data(), &[0.731059, 0.268941], 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&mut rng, &[3, 4]);
    let h = random(&mut rng, &[5, 4]);
    let hp = Tensor::from_rows(&[3, 0, 4, 1, 2].map(|i| h.row(i).to_vec())).unwrap();
    let a = topic_attention(tape.constant(q.clone()), tape.constant(h)).unwrap().value();
    let b = topic_attention(tape.constant(q), tape.constant(hp)).unwrap().value();
    close(a.data(), b.data(), 1e-12);
    assert!(topic_attention(tape.constant(Tensor::zeros(&[1, 2])), tape.constant(Tensor::zeros(&[0, 2]))).is_err());
}

#[test]
fn fuse_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 6]);
    let neg = Tensor::new(vec![3, 6], a.data().iter().map(|v| -v).collect()).unwrap();
    let g = tape.constant(Tensor::filled(&[6], 1.0));
    let z = tape.constant(Tensor::zeros(&[6]));
    let out = fuse(tape.constant(a.clone()), tape.constant(neg), g, z).unwrap().value();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let b = random(&mut rng, &[3, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    let (gv, bv) = (tape.constant(gain.clone()), tape.constant(bias.clone()));
    let ab = fuse(tape.constant(a.clone()), tape.constant(b.clone()), gv, bv).unwrap().value();
    let ba = fuse(tape.constant(b.clone()), tape.constant(a.clone()), gv, bv).unwrap().value();
    assert_eq!(ab, ba);
    for r in 0..3 {
        let s: Vec<f64> = a.row(r).iter().zip(b.row(r)).map(|(x, y)| x + y).collect();
        let mean = s.iter().sum::<f64>() / 6.0;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for c in 0..6 {
            let want = (s[c] - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((ab.at(r, c) - want).abs() < 1e-12);
        }
    }
    assert!(fuse(tape.constant(a), tape.constant(Tensor::zeros(&[2, 6])), gv, bv).is_err());
}

#[test]
fn classify_states_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d_it = tape.constant(random(&mut rng, &[3, 5]));
    let p = classify_states(d_it, tape.constant(Tensor::zeros(&[4, 5]))).unwrap().value();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let one = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let p = classify_states(one, tape.constant(Tensor::eye(2))).unwrap().value();
    close(p.data(), &[0.731059, 0.268941], 1e-6);

    let p = classify_states(d_it, tape.constant(random(&mut rng, &[4, 5]) )).unwrap().value();
    for r in 0..3 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn word_distribution_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&mut rng, &[7, 4]);
    let wv = tape.constant(w.clone());
    let p = word_distribution(tape.constant(Tensor::zeros(&[3, 4])), wv).unwrap().value();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));

    let h = random(&mut rng, &[5, 4]);
    let p = word_distribution(tape.constant(h.clone()), wv).unwrap().value();
    let logits = tape.constant(h).matmul_nt(&wv).unwrap().value();
    for r in 0..5 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            mscl_autodiff::kernels::argmax(p.row(r)),
            mscl_autodiff::kernels::argmax(logits.row(r))
        );
    }
}

#[test]
fn weighted_word_embedding_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = random(&mut rng, &[5, 3]);
    let wv = tape.constant(w.clone());
    let mut onehot = vec![0.0; 5];
    onehot[2] = 1.0;
    let out = weighted_word_embedding(tape.constant(Tensor::from_rows(&[onehot]).unwrap()), wv).unwrap().value();
    assert_eq!(out.row(0), w.row(2));

    let out = weighted_word_embedding(tape.constant(Tensor::filled(&[1, 5], 0.2)), wv).unwrap().value();
    for c in 0..3 {
        let mean = (0..5).map(|r| w.at(r, c)).sum::<f64>() / 5.0;
        assert!((out.at(0, c) - mean).abs() < 1e-12);
    }

    let p = random(&mut rng, &[4, 5]);
    let out = weighted_word_embedding(tape.constant(p.clone()), wv).unwrap().value();
    for r in 0..4 {
        for c in 0..3 {
            let v: f64 = (0..5).map(|k| p.at(r, k) * w.at(k, c)).sum();
            assert!((out.at(r, c) - v).abs() < 1e-12);
        }
    }

    let model = Model::new(tiny(), 1).unwrap();
    let b = model.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fwd = b.forward(&input(&mut rng, &tiny(), 1), &[BOS, 5, 6]).unwrap();
    assert_eq!(b.weighted_word_embedding(fwd.p_word).unwrap().shape(), vec![3, 8]);
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tape = Tape::new();
    let b = model.bind(&tape);
    let d_it = tape.constant(random(&mut rng, &[cfg.topics, cfg.d_model]));
    let prefix = [BOS, 4, 5, 6, 7, 8];
    let base = b.decode_hidden(&prefix, d_it).unwrap().value();
    assert_eq!(base.shape(), &[6, cfg.d_model]);
    for j in 1..prefix.len() {
        let mut changed = prefix;
        changed[j] = 9;
        let out = b.decode_hidden(&changed, d_it).unwrap().value();
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "row {i} changed when token {j} did");
        }
        assert_ne!(out.row(j), base.row(j));
    }
    let other = tape.constant(random(&mut rng, &[cfg.topics, cfg.d_model]));
    let out = b.decode_hidden(&prefix, other).unwrap().value();
    for i in 0..prefix.len() {
        assert_ne!(out.row(i), base.row(i));
    }
    assert!(b.decode_hidden(&[BOS; 11], d_it).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tape = Tape::new();
    let b = model.bind(&tape);
    let fwd = b.forward(&input(&mut rng, &cfg, 2), &[BOS, 4, 5, 6]).unwrap();
    for p in [fwd.p_state.value(), fwd.p_word.value()] {
        for r in 0..p.shape()[0] {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let attn = b.var("topic.q").matmul_nt(&fwd.h_txt).unwrap().softmax_rows().unwrap().value();
    for r in 0..cfg.topics {
        assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn view_order_does_not_matter() {
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inp = input(&mut rng, &cfg, 3);
    let mut rev = inp.clone();
    rev.views.reverse();
    let tape = Tape::new();
    let b = model.bind(&tape);
    let a = b.encode_study(&inp).unwrap();
    let r = b.encode_study(&rev).unwrap();
    assert_eq!(a.pooled.value(), r.pooled.value());
    assert_eq!(a.p_state.value(), r.p_state.value());
    assert!(b.encode_study(&StudyInput { views: vec![], indication: vec![4] }).is_err());
}

/// Parameter count written out independently of the model's layout table.
fn expected_parameters(c: &ModelConfig) -> usize {
    let (d, f) = (c.d_model, c.ffn_dim);
    let ln = 2 * d;
    let attn = 4 * d * d;
    let ffn = d * f + f + f * d + d;
    let per_patch = c.visual_dim / c.patches();
    let visual = c.patch_size * c.patch_size * per_patch + per_patch;
    let disease = c.visual_dim * c.topics * d + c.topics * d;
    let encoder = c.encoder_layers * (2 * ln + attn + ffn) + ln;
    let decoder = c.decoder_layers * (3 * ln + 2 * attn + ffn) + ln;
    let heads = 2 * (d * d + d + d * c.proj_dim + c.proj_dim);
    visual + disease + c.vocab_size * d + encoder + c.topics * d + ln + c.states * d + decoder + heads
}

#[test]
fn parameter_count_is_a_function_of_config() {
    assert_eq!(Model::new(tiny(), 0).unwrap().num_parameters(), 2_720);
    assert_eq!(Model::new(tiny(), 0).unwrap().num_parameters(), expected_parameters(&tiny()));
    let mut full = ModelConfig::default();
    full.vocab_size = 60;
    assert_eq!(Model::new(full.clone(), 9).unwrap().num_parameters(), expected_parameters(&full));
    let mut other = tiny();
    other.decoder_layers = 3;
    other.heads = 4;
    assert_eq!(Model::new(other.clone(), 1).unwrap().num_parameters(), expected_parameters(&other));
}

#[test]
fn cached_inference_matches_tape_forward() {
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let inp = input(&mut rng, &cfg, 2);
    let prefix = [BOS, 4, 9, 5, 7, 6];
    let tape = Tape::new();
    let b = model.bind(&tape);
    let fwd = b.forward(&inp, &prefix).unwrap();
    let logits = fwd.h_dec.matmul_nt(&b.var("embed.w")).unwrap().value();

    let g = Generator::new(&model);
    let ctx = g.context(&inp).unwrap();
    close(&ctx.d_it, fwd.d_it.value().data(), 1e-9);
    close(&ctx.p_state, fwd.p_state.value().data(), 1e-9);
    let cached = g.prefix_logits(&ctx, &prefix).unwrap();
    for (r, row) in cached.iter().enumerate() {
        close(row, logits.row(r), 1e-9);
    }
}

#[test]
fn decoding_contracts() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for seed in 0..6 {
        let model = Model::new(cfg.clone(), seed).unwrap();
        let g = Generator::new(&model);
        let inp = input(&mut rng, &cfg, 1 + seed as usize % 2);
        let greedy = g.generate(&inp, Decoding::Greedy).unwrap();
        assert_eq!(g.generate(&inp, Decoding::Greedy).unwrap(), greedy);
        assert_eq!(g.generate(&inp, Decoding::Beam(1)).unwrap(), greedy);
        for out in [greedy, g.generate(&inp, Decoding::Beam(3)).unwrap()] {
            assert!(out.last() == Some(&EOS) || out.len() == cfg.max_len, "{out:?}");
            assert!(out.len() <= cfg.max_len);
            assert!(out.iter().rev().skip(1).all(|&t| t != EOS));
        }
    }
    let model = Model::new(cfg.clone(), 0).unwrap();
    let inp = input(&mut rng, &cfg, 1);
    assert!(Generator::new(&model).generate(&inp, Decoding::Beam(9)).is_err());
    assert!(Generator::new(&model).generate(&inp, Decoding::Beam(0)).is_err());
}

#[test]
fn beam_never_scores_below_greedy() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5 {
        let model = Model::new(cfg.clone(), 100 + seed).unwrap();
        let g = Generator::new(&model);
        let inp = input(&mut rng, &cfg, 1);
        let ctx = g.context(&inp).unwrap();
        let score = |out: &[usize]| {
            let prefix: Vec<usize> = std::iter::once(BOS).chain(out[..out.len() - 1].iter().copied()).collect();
            g.prefix_logits(&ctx, &prefix)
                .unwrap()
                .iter()
                .zip(out)
                .map(|(l, &t)| {
                    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    l[t] - m - l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .sum::<f64>()
        };
        let greedy = g.generate_from(&ctx, Decoding::Greedy).unwrap();
        let beam = g.generate_from(&ctx, Decoding::Beam(4)).unwrap();
        if greedy.last() == Some(&EOS) && beam.last() == Some(&EOS) {
            assert!(score(&beam) >= score(&greedy) - 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_compat() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build(&["a b c d e f g"], 1).unwrap();
    let mut config = RunConfig::default();
    config.model = tiny();
    let model = Model::new(config.model.clone(), 22).unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &config, &vocab, &model).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MSCL");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes, model_bytes(&config, &vocab, &model));
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.vocab, vocab);
    assert_eq!(loaded.config, config);
    for (a, b) in loaded.model.params().iter().zip(model.params()) {
        assert_eq!(a.name, b.name);
        let rounded: Vec<f64> = b.value.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.value.data(), &rounded[..]);
    }

    let mut bad_vocab = config.clone();
    bad_vocab.model.vocab_size = 12;
    let other = Model::new(bad_vocab.model.clone(), 0).unwrap();
    save_model(&path, &bad_vocab, &vocab, &other).unwrap();
    assert!(matches!(load_model(&path), Err(CoreError::Compat(_))));

    std::fs::write(&path, b"NOPE").unwrap();
    let err = load_model(&path).unwrap_err();
    assert!(matches!(err, CoreError::Checkpoint { .. }));
    assert_eq!(err.class(), "checkpoint");
}

#[test]
fn from_tensors_rejects_shape_mismatch() {
    let model = Model::new(tiny(), 0).unwrap();
    let mut tensors: Vec<(String, Tensor)> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    tensors[0].1 = Tensor::zeros(&[1, 1]);
    assert!(matches!(Model::from_tensors(tiny(), tensors), Err(CoreError::Compat(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooling_is_permutation_invariant(seed in 0u64..1000, views in 1usize..4) {
        let cfg = tiny();
        let model = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = input(&mut rng, &cfg, views);
        let mut shuffled = inp.clone();
        shuffled.views.rotate_left(1);
        let tape = Tape::new();
        let b = model.bind(&tape);
        prop_assert_eq!(b.encode_study(&inp).unwrap().pooled.value(), b.encode_study(&shuffled).unwrap().pooled.value());
    }
}
