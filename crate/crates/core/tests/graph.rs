mod common;

use std::collections::BTreeSet;

use common::criteria;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn expansion_and_candidates_match_brute_force() {
    let o = criteria::graph_oracles();
    assert!(o.ok, "{}", o.detail);
}

proptest! {
    #[test]
    fn pool_is_a_capped_subset_of_the_candidates(seed in 0u64..5000, hops in 1usize..4, cap in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 60);
        for anchor in g.mapped_items().collect::<Vec<_>>() {
            let all: BTreeSet<_> = g.candidate_set(anchor, hops).unwrap().into_iter().collect();
            match g.candidate_pool(anchor, hops, cap, &mut rng) {
                Ok(pool) => {
                    let distinct: BTreeSet<_> = pool.iter().copied().collect();
                    prop_assert_eq!(distinct.len(), pool.len());
                    prop_assert_eq!(pool.len(), all.len().min(cap));
                    prop_assert!(distinct.is_subset(&all));
                    prop_assert!(!distinct.contains(&anchor));
                }
                Err(_) => prop_assert!(all.is_empty()),
            }
        }
    }
}
