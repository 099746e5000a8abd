mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vskip_core::toy::{merge_chain_symbols, mi_diagnostic, JointTable};

fn sizes() -> impl Strategy<Value = [usize; 4]> {
    (1usize..=4, 1usize..=3, 1usize..=3, 1usize..=3).prop_map(|(c, a, v, q)| [c, a, v, q])
}

#[test]
fn independent_chain_carries_no_information() {
    // C independent of everything: uniform product table.
    let sizes = [2, 2, 2, 2];
    let table = JointTable::new(sizes, vec![1.0 / 16.0; 16]).unwrap();
    let d = mi_diagnostic(&table, 1.0).unwrap();
    assert!(d.sufficiency.abs() < 1e-15 && d.anchoring.abs() < 1e-15);
}

#[test]
fn chain_copying_the_image_has_full_anchoring() {
    // C = V uniform over 2, A and Q constant: I(C;V|Q) = ln 2.
    let table = JointTable::new([2, 1, 2, 1], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    let d = mi_diagnostic(&table, 0.5).unwrap();
    assert!((d.anchoring - 2f64.ln()).abs() < 1e-15);
    assert!((d.objective - 0.5 * 2f64.ln()).abs() < 1e-15);
}

#[test]
fn invalid_tables_are_rejected() {
    assert!(JointTable::new([1, 1, 1, 2], vec![0.5, 0.6]).is_err());
    assert!(JointTable::new([1, 1, 1, 2], vec![1.5, -0.5]).is_err());
    assert!(JointTable::new([1, 1, 1, 2], vec![1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn diagnostic_matches_entropy_oracle(seed in any::<u64>(), sizes in sizes(), lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_table(&mut rng, sizes);
        let (suff, anch) = common::mi_oracle(&p, sizes);
        let d = mi_diagnostic(&JointTable::new(sizes, p).unwrap(), lambda).unwrap();
        prop_assert!((d.sufficiency - suff).abs() < 1e-10);
        prop_assert!((d.anchoring - anch).abs() < 1e-10);
        prop_assert!((d.objective - (suff + lambda * anch)).abs() < 1e-10);
        prop_assert!(d.anchoring >= -1e-12 && d.sufficiency >= -1e-12);
    }

    #[test]
    fn merging_chain_symbols_never_adds_anchoring(seed in any::<u64>(), sizes in sizes(), picks in proptest::collection::vec(any::<bool>(), 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = JointTable::new(sizes, common::random_table(&mut rng, sizes)).unwrap();
        let merged: Vec<usize> = (0..sizes[0]).filter(|&c| picks[c]).collect();
        let after = merge_chain_symbols(&table, &merged).unwrap();
        let before = mi_diagnostic(&table, 1.0).unwrap();
        let after = mi_diagnostic(&after, 1.0).unwrap();
        prop_assert!(after.anchoring <= before.anchoring + 1e-12);
        prop_assert!(after.sufficiency <= before.sufficiency + 1e-12);
    }
}
