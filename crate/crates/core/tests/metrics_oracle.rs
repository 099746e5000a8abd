mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use vskip_core::metrics::{act_ratio, anls, anls_pair, canonicalize, levenshtein, pope_stats, top1_accuracy, varr, YesNo};
use vskip_core::Mask;

const ALPHABET: [char; 3] = ['a', 'b', 'c'];
const TAU: f64 = 0.5;

#[test]
fn levenshtein_matches_bfs_for_short_strings() {
    let universe = common::all_strings(&ALPHABET, 6);
    for (n, a) in universe.iter().enumerate() {
        // All sources of length <= 3 against every target, longer sources sampled.
        if a.len() > 3 && n % 37 != 0 {
            continue;
        }
        let dist = common::bfs_edit_distances(a, &ALPHABET, 6);
        for b in &universe {
            let d = dist[b];
            assert_eq!(levenshtein(a, b), d, "{a:?} -> {b:?}");
            assert_eq!(anls_pair(a, b, TAU), common::anls_from_distance(a, b, d, TAU), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn anls_examples() {
    assert!((anls_pair("abcdex", "abcdef", TAU) - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(anls_pair("xyz", "abc", TAU), 0.0);
    assert_eq!(anls_pair("", "", TAU), 1.0);
    assert_eq!(canonicalize("  A b "), "a b");
}

#[test]
fn corpus_metrics_examples() {
    let preds = vec!["red".to_string(), "blue".into()];
    let golds = vec!["red".to_string(), "green".into()];
    assert_eq!(top1_accuracy(&preds, &golds).unwrap(), 0.5);
    assert!(anls(&preds, &golds, TAU).unwrap() > 0.5);
    assert!(top1_accuracy(&preds, &golds[..1]).is_err());
    assert_eq!(act_ratio(&[2, 3], &[4, 6]).unwrap(), 0.5);
    assert!(act_ratio(&[1], &[0]).is_err());
}

#[test]
fn varr_counts_retained_anchor_positions() {
    let masks = vec![Mask::new(vec![true, false, true]), Mask::new(vec![false, true, true])];
    let attrs: Vec<BTreeMap<String, Vec<usize>>> = vec![
        BTreeMap::from([("color".into(), vec![0, 1])]),
        BTreeMap::from([("color".into(), vec![1]), ("shape".into(), vec![0])]),
    ];
    let v = varr(&masks, &attrs).unwrap();
    assert!((v["color"] - 200.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["shape"], 0.0);
}

#[test]
fn pope_example() {
    use YesNo::*;
    let s = pope_stats(&[Yes, Yes, No, No], &[Yes, No, No, Yes]).unwrap();
    assert_eq!(s.yes_ratio, 0.5);
    assert_eq!(s.precision, 0.5);
    assert_eq!(s.recall, 0.5);
    assert_eq!(s.f1, 0.5);
}

proptest! {
    #[test]
    fn anls_is_bounded_and_symmetric(p in "[abc ]{0,8}", g in "[abc ]{0,8}") {
        let s = anls_pair(&p, &g, TAU);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(levenshtein(&p, &g), levenshtein(&g, &p));
        prop_assert_eq!(anls_pair(&g, &g, TAU), 1.0);
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[ab]{0,6}", b in "[ab]{0,6}", c in "[ab]{0,6}") {
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
    }
}
