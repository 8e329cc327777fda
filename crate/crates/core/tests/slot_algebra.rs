mod common;

use common::checks::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_join_roundtrip(n in 1usize..5, u in 1usize..6, p in 1usize..5, side in 1usize..5, b in 1usize..4, seed in any::<u64>()) {
        let c = algebra_case(n, u, p, side, b, seed);
        prop_assert_eq!(check_split_join(&c), Ok(()));
    }

    #[test]
    fn replace_with_self_is_identity(n in 1usize..5, u in 1usize..6, p in 1usize..5, side in 1usize..5, b in 1usize..4, seed in any::<u64>()) {
        let c = algebra_case(n, u, p, side, b, seed);
        prop_assert_eq!(check_replace_identity(&c), Ok(()));
    }

    #[test]
    fn last_write_wins(n in 1usize..5, u in 1usize..6, p in 1usize..5, side in 1usize..5, b in 1usize..4, seed in any::<u64>()) {
        let c = algebra_case(n, u, p, side, b, seed);
        prop_assert_eq!(check_last_write_wins(&c), Ok(()));
    }

    #[test]
    fn disjoint_edits_commute(n in 2usize..5, u in 1usize..6, p in 1usize..5, side in 1usize..5, b in 1usize..4, seed in any::<u64>()) {
        let c = algebra_case(n, u, p, side, b, seed);
        prop_assert_eq!(check_disjoint_commute(&c), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn multiplex_is_order_free(seed in 0u64..1000) {
        prop_assert_eq!(check_multiplex_order(seed), Ok(()));
    }
}
