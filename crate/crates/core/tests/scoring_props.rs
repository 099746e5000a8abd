mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vskip_core::scoring::{score_trace, select_focus_layers, visual_anchor_score, ScoringConfig};
use vskip_core::trace::{validate_trace, AttentionLayout, AttentionTensor};

#[test]
fn layout_equivalence_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let full = common::random_full_trace(&mut rng, 4, 2, 6);
    let mass = common::with_mass_layout(&full);
    let cfg = ScoringConfig::default();
    let a = score_trace(&full, &cfg).unwrap();
    let b = score_trace(&mass, &cfg).unwrap();
    for (x, y) in a.s_vis.iter().zip(&b.s_vis) {
        assert!((x - y).abs() <= 1e-9);
    }
    assert_eq!(a.s_text, b.s_text);
}

#[test]
fn focus_layer_examples() {
    assert_eq!(select_focus_layers(32, 0.25, 0.75), (8..24).collect::<Vec<_>>());
    assert_eq!(select_focus_layers(4, 0.25, 0.75), vec![1, 2]);
    assert_eq!(select_focus_layers(1, 0.25, 0.75), vec![0]);
    assert_eq!(select_focus_layers(1, 0.9, 1.0), vec![0]);
}

#[test]
fn anchor_score_example() {
    let mass = vec![vec![0.2, 0.6], vec![0.5, 0.3]];
    assert!((visual_anchor_score(&mass, &[0, 1]).unwrap() - 0.55).abs() < 1e-15);
}

/// Moves `delta` of weight from the non-image keys of one row onto an image key.
fn boost_image_key(att: &mut AttentionTensor, l: usize, h: usize, t: usize, image: &[usize], key: usize, delta: f64) {
    let row = att.row_mut(l, h, t);
    let visible: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0 || image.contains(&k)).collect();
    let others: f64 = visible.iter().filter(|k| !image.contains(k)).map(|&k| row[k]).sum();
    if others <= 0.0 {
        return;
    }
    let take = delta.min(others);
    for &k in &visible {
        if !image.contains(&k) {
            row[k] *= 1.0 - take / others;
        }
    }
    row[key] += take;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tensor_and_mass_layouts_agree(seed in any::<u64>(), layers in 1usize..=4, heads in 1usize..=4, t in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = common::random_full_trace(&mut rng, layers, heads, t);
        let mass = common::with_mass_layout(&full);
        let cfg = ScoringConfig::default();
        let a = score_trace(&full, &cfg).unwrap();
        let b = score_trace(&mass, &cfg).unwrap();
        for (x, y) in a.s_vis.iter().zip(&b.s_vis) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn vis_score_matches_triple_loop(seed in any::<u64>(), layers in 1usize..=4, heads in 1usize..=4, t in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = common::random_full_trace(&mut rng, layers, heads, t);
        let mass = common::mass_by_loops(&trace);
        let cfg = ScoringConfig::default();
        let focus = select_focus_layers(layers, cfg.focus_lo, cfg.focus_hi);
        let layout = common::with_mass_layout(&trace);
        let scored = score_trace(&layout, &cfg).unwrap();
        for p in 0..t {
            prop_assert_eq!(scored.s_vis[p], common::anchor_score_by_loops(&mass, &focus, p));
        }
    }

    #[test]
    fn scores_are_bounded(seed in any::<u64>(), layers in 1usize..=4, heads in 1usize..=3, t in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = common::random_full_trace(&mut rng, layers, heads, t);
        let scored = score_trace(&trace, &ScoringConfig::default()).unwrap();
        for (i, tok) in trace.tokens.iter().enumerate() {
            prop_assert!(scored.s_text[i] >= 0.0);
            prop_assert_eq!(scored.s_text[i], -tok.logprob);
            prop_assert!((0.0..=1.0 + 1e-5).contains(&scored.s_vis[i]));
        }
    }

    #[test]
    fn more_image_attention_never_lowers_vis(seed in any::<u64>(), layers in 1usize..=4, heads in 1usize..=3, t in 1usize..=8, delta in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = common::random_full_trace(&mut rng, layers, heads, t);
        let cfg = ScoringConfig::default();
        let before = score_trace(&trace, &cfg).unwrap().s_vis;
        let (l, h, p) = (rng.gen_range(0..layers), rng.gen_range(0..heads), rng.gen_range(0..t));
        let key = trace.image_key_indices[rng.gen_range(0..trace.image_key_indices.len())];
        let mut boosted = trace.clone();
        if let AttentionLayout::Full(att) = &mut boosted.attention {
            boost_image_key(att, l, h, p, &trace.image_key_indices, key, delta);
        }
        prop_assert!(validate_trace(&boosted).is_empty());
        let after = score_trace(&boosted, &cfg).unwrap().s_vis;
        prop_assert!(after[p] >= before[p] - 1e-12);
    }
}
