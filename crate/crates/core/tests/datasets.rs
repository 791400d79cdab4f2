mod common;

use std::fs;

use common::rng;
use flexkd::data::{
    load_csv, write_csv, CsvSchema, Inputs, PlantedRelevanceSpec, SeqRule, SeqTaskSpec, Split,
    Targets,
};
use rand::seq::SliceRandom;
use rand::Rng;

fn schema() -> CsvSchema {
    CsvSchema {
        features: vec!["a".into(), "b".into()],
        num_classes: 3,
    }
}

#[test]
fn csv_reads_rows_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "a,b,label\n1.5,2,0\n-3,4e-1,2\n0,0,2\n").unwrap();
    let ds = load_csv(&path, &schema(), Split::Train).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.label_histogram(), vec![1, 0, 2]);
    assert!(ds.provenance.contains("rows=3"));
}

#[test]
fn csv_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "a,b,label\n1,2,0\n1,x,1\n").unwrap();
    let err = load_csv(&path, &schema(), Split::Train).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("line 3"), "{err}");

    fs::write(&path, "a,b,label\n1,2,7\n").unwrap();
    let err = load_csv(&path, &schema(), Split::Train).unwrap_err();
    assert!(err.to_string().contains("unknown label"), "{err}");

    fs::write(&path, "b,a,label\n1,2,0\n").unwrap();
    assert_eq!(load_csv(&path, &schema(), Split::Train).unwrap_err().exit_code(), 3);

    fs::write(&path, "a,b,label\n1,2\n").unwrap();
    assert_eq!(load_csv(&path, &schema(), Split::Train).unwrap_err().exit_code(), 3);
}

#[test]
fn csv_round_trip_is_exact() {
    let task = PlantedRelevanceSpec {
        d_input: 2,
        num_relevant: 1,
        noise_scale: 0.3,
        num_classes: 3,
        seed: 5,
    }
    .generate(50, 0, 5)
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    write_csv(&task.splits.train, &schema(), &path).unwrap();
    let back = load_csv(&path, &schema(), Split::Train).unwrap();
    assert_eq!(back.inputs, task.splits.train.inputs);
    assert_eq!(back.targets, task.splits.train.targets);
}

fn features(ds: &flexkd::data::LabeledDataset) -> &flexkd::Tensor {
    match &ds.inputs {
        Inputs::Features(x) => x,
        Inputs::Tokens(_) => unreachable!(),
    }
}

#[test]
fn planted_labels_ignore_irrelevant_coordinates() {
    let spec = PlantedRelevanceSpec {
        d_input: 10,
        num_relevant: 3,
        noise_scale: 2.0,
        num_classes: 3,
        seed: 8,
    };
    let task = spec.generate(300, 0, 10).unwrap();
    let x = features(&task.splits.train);
    let irrelevant: Vec<usize> = (0..10).filter(|i| !task.relevant.contains(i)).collect();
    let mut r = rng(2);
    for row in 0..x.rows() {
        let label = task.splits.train.sample_label(row);
        assert_eq!(task.rule.label(x.row(row)), label);
        let mut moved = x.row(row).to_vec();
        let mut perm = irrelevant.clone();
        perm.shuffle(&mut r);
        for (&from, &to) in irrelevant.iter().zip(&perm) {
            moved[to] = x.row(row)[from];
        }
        assert_eq!(task.rule.label(&moved), label);
        for &i in &irrelevant {
            moved[i] = r.gen_range(-50.0..50.0);
        }
        assert_eq!(task.rule.label(&moved), label);
    }
    let hist = task.splits.train.label_histogram();
    assert!(hist.iter().all(|&h| h > 60), "{hist:?}");
}

#[test]
fn planted_spec_checks_and_determinism() {
    let spec = PlantedRelevanceSpec {
        d_input: 4,
        num_relevant: 4,
        noise_scale: 0.0,
        num_classes: 2,
        seed: 1,
    };
    let a = spec.generate(30, 5, 10).unwrap();
    assert_eq!(a.relevant, vec![0, 1, 2, 3]);
    let b = spec.generate(30, 5, 10).unwrap();
    assert_eq!(a.splits.manifest(), b.splits.manifest());
    assert_eq!(a.splits.manifest().splits.len(), 3);
    let too_many = PlantedRelevanceSpec {
        num_relevant: 5,
        ..spec
    };
    assert_eq!(too_many.generate(10, 0, 5).unwrap_err().exit_code(), 2);
    // zero noise zeroes every irrelevant coordinate
    let sparse = PlantedRelevanceSpec {
        num_relevant: 2,
        ..spec
    }
    .generate(20, 0, 5)
    .unwrap();
    let x = features(&sparse.splits.train);
    for i in (0..4).filter(|i| !sparse.relevant.contains(i)) {
        assert!(x.column(i).iter().all(|&v| v == 0.0));
    }
}

/// Labels recomputed from the tokens with a direct count.
fn recount(rule: SeqRule, tokens: &[usize], vocab: usize) -> Vec<usize> {
    (1..=tokens.len())
        .map(|len| {
            let prefix = &tokens[..len];
            match rule {
                SeqRule::MajorityToken => (0..vocab)
                    .max_by_key(|&t| (prefix.iter().filter(|&&x| x == t).count(), std::cmp::Reverse(t)))
                    .unwrap(),
                SeqRule::ParityOfMarker => prefix.iter().filter(|&&x| x == 0).count() % 2,
            }
        })
        .collect()
}

#[test]
fn sequence_labels_match_recount_and_balance() {
    for rule in [SeqRule::MajorityToken, SeqRule::ParityOfMarker] {
        let spec = SeqTaskSpec {
            vocab_size: 4,
            context_len: 9,
            rule,
            seed: 13,
        };
        let splits = spec.generate(100, 0, 40).unwrap();
        let (Inputs::Tokens(seqs), Targets::Sequences(ys)) =
            (&splits.train.inputs, &splits.train.targets)
        else {
            unreachable!()
        };
        for (s, y) in seqs.iter().zip(ys) {
            assert_eq!(&recount(rule, s, 4), y);
        }
        let classes = rule.num_classes(4);
        let mut counts = vec![0usize; classes];
        for y in ys {
            counts[*y.last().unwrap()] += 1;
        }
        let uniform = 100.0 / classes as f64;
        for c in counts {
            assert!((c as f64 - uniform).abs() <= 0.05 * 100.0, "{rule:?}");
        }
        assert_eq!(splits.train, spec.generate(100, 0, 40).unwrap().train);
    }
}

#[test]
fn sequence_rule_hand_cases() {
    assert_eq!(SeqRule::MajorityToken.label_prefixes(&[2, 2, 2], 3), vec![2, 2, 2]);
    assert_eq!(SeqRule::ParityOfMarker.label_prefixes(&[1, 2, 3], 4), vec![0, 0, 0]);
    assert_eq!(SeqRule::ParityOfMarker.label_prefixes(&[0, 1, 0], 4), vec![1, 1, 0]);
    let bad = SeqTaskSpec {
        vocab_size: 1,
        context_len: 4,
        rule: SeqRule::ParityOfMarker,
        seed: 0,
    };
    assert_eq!(bad.generate(4, 0, 4).unwrap_err().exit_code(), 2);
    let short = SeqTaskSpec {
        vocab_size: 3,
        context_len: 1,
        ..bad
    };
    assert_eq!(short.generate(4, 0, 4).unwrap_err().exit_code(), 2);
}
