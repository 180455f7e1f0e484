#![allow(dead_code)]

use std::collections::BTreeSet;

use kgattack_core::{EntityId, ItemId, KnowledgeGraph, Triple};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 20 entities, 3 relations, 40 triples planted from a hidden translation model:
/// every tail is the entity nearest to `head + relation` among random unit vectors,
/// so a perfect TransE fit exists.
pub fn toy_kg(seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let unit = |rng: &mut ChaCha8Rng, scale: f64| {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| scale * x / n).collect::<Vec<f64>>()
    };
    let ents: Vec<Vec<f64>> = (0..20).map(|_| unit(&mut rng, 1.0)).collect();
    let rels: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 1.5)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..20).flat_map(|h| (0..3).map(move |r| (h, r))).collect();
    pairs.shuffle(&mut rng);
    let mut triples = Vec::new();
    for (h, r) in pairs {
        let target: Vec<f64> = ents[h].iter().zip(&rels[r]).map(|(a, b)| a + b).collect();
        let d = |e: usize| ents[e].iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let t = (0..20).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
        if t != h && triples.len() < 40 {
            triples.push(Triple::new(h as u32, r as u32, t as u32));
        }
    }
    assert_eq!(triples.len(), 40, "seed {seed} plants too few triples");
    KnowledgeGraph::from_triples(20, 3, triples, vec![]).unwrap().0
}

/// Random directed graph with the first `items` entities mapped to items.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> KnowledgeGraph {
    let n = rng.gen_range(2..=max_nodes);
    let edges = rng.gen_range(0..=3 * n);
    let triples: Vec<Triple> = (0..edges)
        .map(|_| {
            Triple::new(
                rng.gen_range(0..n as u32),
                rng.gen_range(0..3),
                rng.gen_range(0..n as u32),
            )
        })
        .collect();
    let items = rng.gen_range(1..=n);
    let map = (0..items).map(|i| Some(EntityId::from(i))).collect();
    KnowledgeGraph::from_triples(n, 3, triples, map).unwrap().0
}

/// Literal layered expansion straight from the triple list, no adjacency index.
pub fn oracle_layers(g: &KnowledgeGraph, seed: &BTreeSet<EntityId>, hops: usize) -> Vec<BTreeSet<EntityId>> {
    let mut layers = Vec::new();
    let mut prev = seed.clone();
    for _ in 0..hops {
        let mut next = BTreeSet::new();
        for t in g.triples() {
            if prev.contains(&t.head) {
                next.insert(t.tail);
            }
        }
        layers.push(next.clone());
        prev = next;
    }
    layers
}

pub fn oracle_candidates(g: &KnowledgeGraph, anchor: ItemId, hops: usize) -> BTreeSet<ItemId> {
    let entity = g.entity_of(anchor).unwrap();
    oracle_layers(g, &BTreeSet::from([entity]), hops)
        .into_iter()
        .flatten()
        .filter_map(|e| g.item_of(e))
        .filter(|&i| i != anchor)
        .collect()
}
pub mod criteria;
