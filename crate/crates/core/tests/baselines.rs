use kgattack_core::{generate_baseline_profile, BaselineKind, EntityId, ItemId, KnowledgeGraph, Triple};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph(items: u32) -> KnowledgeGraph {
    let hub = items;
    let triples: Vec<Triple> = (0..items)
        .flat_map(|i| [Triple::new(i, 0, hub), Triple::new(hub, 1, i)])
        .collect();
    let map = (0..items).map(|i| Some(EntityId(i))).collect();
    KnowledgeGraph::from_triples(items as usize + 1, 2, triples, map).unwrap().0
}

#[test]
fn random_attack_is_uniform_over_items() {
    let g = graph(100);
    let draws = 10_000;
    let mean = draws as f64 / 100.0;
    let sd = (draws as f64 * 0.01 * 0.99).sqrt();
    let mut outside = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; 100];
        for _ in 0..draws {
            let p = generate_baseline_profile(BaselineKind::RandomAttack, ItemId(0), &g, 100, 1, 2, 50, &mut rng).unwrap();
            counts[p.items()[0].index()] += 1;
        }
        // Chi-square with 99 degrees of freedom; 148.2 is the 0.1% tail.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 148.2, "seed {seed}: chi2 {chi2:.1}");
        outside += counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd).count();
    }
    // 2000 item-frequency checks; 0.27% each lands outside 3 sigma by chance.
    assert!(outside <= 15, "{outside} of 2000 frequencies outside 3 sigma");
    println!("{outside} of 2000 item frequencies outside 3 sigma");
}

proptest! {
    #[test]
    fn profiles_have_exact_length_and_no_repeats(seed in 0u64..10_000, len in 1usize..12, target in 0u32..40, kind in 0usize..3) {
        let kind = [BaselineKind::RandomAttack, BaselineKind::TargetAttack, BaselineKind::TargetAttackKg][kind];
        let g = graph(40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = generate_baseline_profile(kind, ItemId(target), &g, 40, len, 2, 5, &mut rng).unwrap();
        prop_assert_eq!(p.len(), len);
        let mut items = p.items().to_vec();
        items.sort();
        items.dedup();
        prop_assert_eq!(items.len(), len);
        if kind != BaselineKind::RandomAttack {
            prop_assert_eq!(p.first(), ItemId(target));
        }
    }
}
