use std::collections::HashSet;

use super::*;
use crate::model::{is_special, EOS};

fn spec(name: &str) -> TaskSpec {
    TaskSpec::builtin(name, 32, 4, 8).unwrap()
}

fn sizes() -> Sizes {
    Sizes { train: 200, unlabeled: 100, test: 100 }
}

#[test]
fn majority_marker_definition() {
    let a = MARKERS[0];
    let b = MARKERS[1];
    let mut seq = vec![a; 10];
    seq.extend([b, b, 20, 21]);
    assert_eq!(majority_marker(&seq, &[a, b]), Some(0));
    assert_eq!(majority_marker(&[a, b, 20], &[a, b]), None);
}

#[test]
fn overlap_of_identical_pair_is_one() {
    assert_eq!(jaccard(&[4, 5, 6], &[6, 5, 4, 4]), 1.0);
    assert_eq!(jaccard(&[4, 5], &[6, 7]), 0.0);
    assert_eq!(shared_fraction(&[4, 5, 6], &[6, 5, 4, 4]), 1.0);
    assert_eq!(shared_fraction(&[4, 5], &[5, 7, 8, 4]), 0.5);
}

#[test]
fn generators_respect_their_labels() {
    for g in Generator::ALL {
        let s = spec(g.name());
        let set = generate_task(&s, sizes(), 3).unwrap();
        for ex in set.train.iter().chain(&set.test) {
            let tokens = ex.tokens();
            assert!(tokens.len() <= s.max_input_len());
            assert!(tokens.iter().all(|&t| t < s.vocab_size));
            assert_eq!(ex.tokens_b.is_some(), matches!(g, Generator::PairOverlap | Generator::OverlapScore));
            let target = ex.target.unwrap();
            match g {
                Generator::TokenMajority => {
                    assert_eq!(majority_marker(&tokens, &MARKERS[..2]), target.class())
                }
                Generator::ThreeWayCount => assert_eq!(majority_marker(&tokens, &MARKERS), target.class()),
                Generator::PatternContainment => {
                    assert_eq!(contains_pattern(&tokens) as usize, target.class().unwrap())
                }
                Generator::PairOverlap => {
                    let j = jaccard(&ex.tokens_a, ex.tokens_b.as_ref().unwrap());
                    assert_eq!((j > 0.5) as usize, target.class().unwrap())
                }
                Generator::OverlapScore => {
                    let j = shared_fraction(&ex.tokens_a, ex.tokens_b.as_ref().unwrap());
                    assert_eq!(j, target.value())
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_disjoint() {
    for g in Generator::ALL {
        let s = spec(g.name());
        let a = generate_task(&s, sizes(), 11).unwrap();
        assert_eq!(a, generate_task(&s, sizes(), 11).unwrap());
        assert_ne!(a.train, generate_task(&s, sizes(), 12).unwrap().train);
        assert_eq!((a.train.len(), a.unlabeled.len(), a.test.len()), (200, 100, 100));
        assert!(a.unlabeled.iter().all(|e| e.target.is_none()));
        let key = |e: &Example| (e.tokens_a.clone(), e.tokens_b.clone());
        let train: HashSet<_> = a.train.iter().map(key).collect();
        let unl: HashSet<_> = a.unlabeled.iter().map(key).collect();
        assert!(a.test.iter().all(|e| !train.contains(&key(e)) && !unl.contains(&key(e))));
        assert!(a.unlabeled.iter().all(|e| !train.contains(&key(e))));
    }
}

#[test]
fn token_majority_is_balanced() {
    let s = spec("token-majority");
    let set = generate_task(&s, Sizes { train: 10_000, unlabeled: 0, test: 1 }, 5).unwrap();
    let pos = set.train.iter().filter(|e| e.target == Some(Target::Class(1))).count();
    let frac = pos as f64 / 10_000.0;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

#[test]
fn registry_errors() {
    assert!(matches!(TaskSpec::builtin("nope", 32, 4, 8), Err(Error::Data(_))));
    let mut s = spec("overlap-score");
    s.metric = Metric::Accuracy;
    assert!(s.validate().is_err());
    assert!(generate_task(&spec("token-majority"), Sizes { train: 0, unlabeled: 0, test: 1 }, 0).is_err());
}

#[test]
fn tsv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.tsv");
    std::fs::write(&path, "text_a\ttarget\nthe cat sat\t1\na dog\t0\nthe end\t1\n").unwrap();
    let schema = TsvSchema { pair: false, target: TargetType::Class };
    let a = load_tsv(&path, schema, 50).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a[0].tokens_a.len(), 3);
    assert_eq!(a[0].tokens_a[0], a[2].tokens_a[0], "same word, same id");
    assert!(a.iter().flat_map(|e| &e.tokens_a).all(|&t| !is_special(t) && t < 50));
    assert_eq!(a, load_tsv(&path, schema, 50).unwrap());

    let pair = TsvSchema { pair: true, target: TargetType::Score };
    std::fs::write(&path, "text_a\ttext_b\ttarget\nx y\ty z\t0.5\n").unwrap();
    let p = load_tsv(&path, pair, 50).unwrap();
    assert_eq!(p[0].tokens(), [p[0].tokens_a.clone(), vec![EOS], p[0].tokens_b.clone().unwrap()].concat());

    std::fs::write(&path, "text_a\n only text\n").unwrap();
    let err = load_tsv(&path, schema, 50).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    std::fs::write(&path, "text_a\ttarget\nok\t1\nbroken row\n").unwrap();
    assert!(matches!(load_tsv(&path, schema, 50), Err(Error::Parse { line: 3, .. })));
    std::fs::write(&path, "text_a\ttarget\nok\tx\n").unwrap();
    assert!(matches!(load_tsv(&path, schema, 50), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn split_examples_partitions() {
    let ex: Vec<Example> = (0..20)
        .map(|i| Example { tokens_a: vec![2 + i], tokens_b: None, target: Some(Target::Class(i % 2)) })
        .collect();
    let s = split_examples(ex.clone(), 0.5, 0.25, 1).unwrap();
    assert_eq!((s.train.len(), s.unlabeled.len(), s.test.len()), (10, 5, 5));
    assert_eq!(s, split_examples(ex, 0.5, 0.25, 1).unwrap());
}

#[test]
fn strip_labels_properties() {
    assert!(strip_labels(&[]).is_empty());
    let ex = vec![Example { tokens_a: vec![3, 4], tokens_b: Some(vec![5]), target: Some(Target::Score(0.3)) }];
    let once = strip_labels(&ex);
    assert_eq!(once[0].tokens_a, ex[0].tokens_a);
    assert_eq!(once[0].tokens_b, ex[0].tokens_b);
    assert!(once[0].target.is_none());
    assert_eq!(strip_labels(&once), once);
}
