use std::collections::HashSet;
use std::fs;

use mscl_core::data::{detokenize, tokenize, write_manifest, UNK};
use mscl_core::synth::{synth_corpus, write_corpus, SynthSpec};
use mscl_core::{load_dataset, split_dataset, CoreError, Study, TopicState, Vocabulary};
use mscl_segment::GrayImage;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        studies: 40,
        seed,
        ..Default::default()
    }
}

#[test]
fn synthetic_reports_follow_states() {
    let spec = SynthSpec::default();
    let corpus = synth_corpus(&spec).unwrap();
    assert_eq!(corpus.len(), 200);
    for s in &corpus {
        assert_eq!(s.study.topic_states.len(), spec.topics.len());
        assert_eq!(s.images.len(), s.study.images.len());
        assert!((1..=2).contains(&s.images.len()));
        for (t, topic) in spec.topics.iter().enumerate() {
            let abnormal = topic.abnormal.iter().any(|a| s.study.report.contains(a.as_str()));
            let normal = topic.normal.iter().any(|a| s.study.report.contains(a.as_str()));
            let positive = s.study.topic_states[t] == TopicState::Positive;
            assert_eq!(abnormal, positive, "{} topic {}", s.study.id, topic.name);
            assert_eq!(normal, !positive, "{} topic {}", s.study.id, topic.name);
        }
        assert!(s.study.indication.starts_with("evaluate for "));
    }
}

#[test]
fn rate_zero_reports_are_all_normal() {
    let spec = SynthSpec {
        abnormal_rate: 0.0,
        ..small_spec(3)
    };
    let normal: String = spec.topics.iter().map(|t| t.normal[0].clone()).collect::<Vec<_>>().join(" ");
    for s in synth_corpus(&spec).unwrap() {
        assert_eq!(s.study.report, normal);
        assert_eq!(s.study.abnormal_set(), 0);
    }
}

#[test]
fn lesions_are_bright_only_when_abnormal() {
    let spec = SynthSpec {
        noise_std: 0.0,
        max_distractors: 0,
        ..small_spec(4)
    };
    for s in synth_corpus(&spec).unwrap() {
        for (v, img) in s.images.iter().enumerate() {
            for (t, state) in s.study.topic_states.iter().enumerate() {
                let (x, y) = spec.lesion_site(t, v);
                let bright = (-2..=2).any(|dy: i64| {
                    (-2..=2).any(|dx: i64| {
                        img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) > 0.9
                    })
                });
                assert_eq!(bright, state.is_abnormal(), "{} view {v} topic {t}", s.study.id);
            }
        }
    }
}

#[test]
fn corpus_is_seed_deterministic() {
    let a = synth_corpus(&small_spec(9)).unwrap();
    let b = synth_corpus(&small_spec(9)).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.images.iter().zip(&y.images) {
            assert_eq!(p.to_bytes(), q.to_bytes());
        }
    }
    assert_ne!(a, synth_corpus(&small_spec(10)).unwrap());
}

#[test]
fn invalid_spec_rejected() {
    let mut spec = small_spec(0);
    spec.abnormal_rate = 1.5;
    assert!(matches!(synth_corpus(&spec), Err(CoreError::Config(_))));
    let mut spec = small_spec(0);
    spec.topics[2].abnormal.clear();
    assert!(synth_corpus(&spec).is_err());
}

#[test]
fn written_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&small_spec(5)).unwrap();
    let manifest = write_corpus(dir.path(), &corpus).unwrap();
    let studies = load_dataset(&manifest, 6, 4).unwrap();
    assert_eq!(studies.len(), corpus.len());
    for (s, c) in studies.iter().zip(&corpus) {
        assert_eq!(s, &c.study);
        for (p, img) in s.images.iter().zip(&c.images) {
            assert_eq!(&GrayImage::read_png(&dir.path().join(p)).unwrap(), img);
        }
    }
}

fn study(id: &str, image: &str, states: Vec<TopicState>) -> Study {
    Study {
        id: id.into(),
        images: vec![image.into()],
        indication: "evaluate for edema .".into(),
        report: "no pulmonary edema .".into(),
        topic_states: states,
    }
}

#[test]
fn load_dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    GrayImage::filled(8, 8, 0.5).unwrap().write_png(&dir.path().join("a.png")).unwrap();
    let states = vec![TopicState::Negative, TopicState::Uncertain];
    let manifest = dir.path().join("m.jsonl");
    let good: Vec<Study> = ["x", "y", "z"].iter().map(|id| study(id, "a.png", states.clone())).collect();
    write_manifest(&manifest, &good).unwrap();
    assert_eq!(load_dataset(&manifest, 2, 4).unwrap(), good);

    let err = load_dataset(&manifest, 2, 2).unwrap_err();
    assert!(matches!(err, CoreError::Schema { line: 1, .. }), "{err}");

    write_manifest(&manifest, &[good[0].clone(), study("w", "missing.png", states.clone())]).unwrap();
    let err = load_dataset(&manifest, 2, 4).unwrap_err();
    assert_eq!(err.class(), "io");
    assert!(err.to_string().contains(&dir.path().join("missing.png").display().to_string()), "{err}");

    let line = r#"{"id":"q","images":["a.png"],"indication":"","report":"","topic_states":["negative","maybe"]}"#;
    fs::write(&manifest, format!("{}\n{line}\n", serde_json::to_string(&good[0]).unwrap())).unwrap();
    let err = load_dataset(&manifest, 2, 4).unwrap_err();
    match &err {
        CoreError::Schema { line, message, .. } => {
            assert_eq!(*line, 2);
            assert!(message.contains("maybe"));
        }
        other => panic!("expected schema error, got {other}"),
    }
    assert!(err.to_string().contains("m.jsonl:2:"));

    fs::write(&manifest, r#"{"id":"q","images":[],"indication":"","report":"","topic_states":["negative","negative"]}"#).unwrap();
    assert!(matches!(load_dataset(&manifest, 2, 4), Err(CoreError::Schema { line: 1, .. })));
    fs::write(&manifest, r#"{"id":"q","images":["a.png"],"indication":"","report":"","topic_states":["negative"]}"#).unwrap();
    assert!(matches!(load_dataset(&manifest, 2, 4), Err(CoreError::Schema { .. })));
    assert_eq!(load_dataset(&dir.path().join("nope.jsonl"), 2, 4).unwrap_err().class(), "io");
}

#[test]
fn template_vocabulary_never_needs_unk() {
    let corpus = synth_corpus(&small_spec(6)).unwrap();
    let texts: Vec<&str> = corpus.iter().map(|s| s.study.report.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 1).unwrap();
    for s in &corpus {
        let ids = vocab.encode(&s.study.report);
        assert!(!ids.contains(&UNK));
        assert_eq!(detokenize(&vocab.decode(&ids)), detokenize(&tokenize(&s.study.report)));
    }
}

#[test]
fn split_of_ten_is_seven_one_two() {
    let items: Vec<u32> = (0..10).collect();
    let (a, b, c) = split_dataset(&items, 0).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
}

proptest! {
    #[test]
    fn split_partitions_input(n in 10usize..300, seed: u64) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b, c) = split_dataset(&items, seed).unwrap();
        prop_assert_eq!(a.len(), n * 7 / 10);
        prop_assert_eq!(b.len(), n / 10);
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let all: HashSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split_dataset(&items, seed).unwrap(), (a, b, c));
    }

    #[test]
    fn normalized_tokens_round_trip(words in prop::collection::vec("[a-z]{1,6}|[.,;:]", 0..20)) {
        prop_assert_eq!(tokenize(&detokenize(&words)), words);
    }

    #[test]
    fn vocab_order_ignores_corpus_order(mut lines in prop::collection::vec("[a-c ]{0,12}", 1..8), rot in 0usize..8) {
        let a = Vocabulary::build(&lines, 1).unwrap();
        let k = rot % lines.len();
        lines.rotate_left(k);
        prop_assert_eq!(Vocabulary::build(&lines, 1).unwrap(), a);
    }
}
