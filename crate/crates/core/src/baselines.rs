//! Non-learning reference attackers.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{BlackBoxTarget, RewardRecord};
use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::kg::KnowledgeGraph;
use crate::policy::FakeProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomAttack,
    TargetAttack,
    TargetAttackKg,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomAttack => "RandomAttack",
            Self::TargetAttack => "TargetAttack",
            Self::TargetAttackKg => "TargetAttack-KG",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" | "randomattack" => Ok(Self::RandomAttack),
            "target" | "targetattack" => Ok(Self::TargetAttack),
            "targetkg" | "targetattackkg" => Ok(Self::TargetAttackKg),
            _ => Err(Error::Config(format!("unknown baseline `{s}`"))),
        }
    }
}

fn distinct_uniform<R: Rng + ?Sized>(space: &[ItemId], n: usize, rng: &mut R) -> Result<Vec<ItemId>> {
    if n > space.len() {
        return Err(Error::Validation(format!("cannot draw {n} distinct items from {}", space.len())));
    }
    Ok(index::sample(rng, space.len(), n).into_iter().map(|i| space[i]).collect())
}

/// One fake profile of exactly `len` distinct items.
///
/// `pool_size` caps the KG candidate pool of the target-neighbourhood variant.
#[allow(clippy::too_many_arguments)]
pub fn generate_baseline_profile<R: Rng + ?Sized>(
    kind: BaselineKind,
    target: ItemId,
    graph: &KnowledgeGraph,
    item_count: usize,
    len: usize,
    hops: usize,
    pool_size: usize,
    rng: &mut R,
) -> Result<FakeProfile> {
    if item_count == 0 || len == 0 {
        return Err(Error::Validation("baseline needs a non-empty item space and length".into()));
    }
    let everything: Vec<ItemId> = (0..item_count).map(ItemId::from).collect();
    let others: Vec<ItemId> = everything.iter().copied().filter(|&v| v != target).collect();
    let items = match kind {
        BaselineKind::RandomAttack => distinct_uniform(&everything, len, rng)?,
        BaselineKind::TargetAttack => {
            let mut items = vec![target];
            items.extend(distinct_uniform(&others, len - 1, rng)?);
            items
        }
        BaselineKind::TargetAttackKg => {
            let pool = match graph.candidate_pool(target, hops, pool_size, rng) {
                Ok(pool) => pool,
                Err(Error::NoCandidates { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            let mut items = vec![target];
            if pool.len() >= len - 1 {
                items.extend(distinct_uniform(&pool, len - 1, rng)?);
            } else {
                items.extend(&pool);
                let rest: Vec<ItemId> = others.iter().copied().filter(|v| !items.contains(v)).collect();
                items.extend(distinct_uniform(&rest, len - items.len(), rng)?);
            }
            items
        }
    };
    FakeProfile::from_items(items, len)
}

/// Injects `budget / batch` batches of baseline profiles, querying the spies after each.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline<E: BlackBoxTarget, R: Rng + ?Sized>(
    env: &mut E,
    kind: BaselineKind,
    target: ItemId,
    graph: &KnowledgeGraph,
    budget: usize,
    batch: usize,
    len: usize,
    hops: usize,
    pool_size: usize,
    rng: &mut R,
) -> Result<Vec<RewardRecord>> {
    if batch == 0 || !budget.is_multiple_of(batch) {
        return Err(Error::Config(format!("budget {budget} is not divisible by batch {batch}")));
    }
    let mut rewards = Vec::with_capacity(budget / batch);
    for _ in 0..budget / batch {
        let profiles = (0..batch)
            .map(|_| generate_baseline_profile(kind, target, graph, env.item_count(), len, hops, pool_size, rng))
            .collect::<Result<Vec<_>>>()?;
        env.inject(&profiles)?;
        rewards.push(env.query_reward()?);
    }
    Ok(rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::EntityId;
    use crate::kg::Triple;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Items 0..4 on entities 0..4; item 0 reaches items 1 and 2 through attribute 5.
    fn graph() -> KnowledgeGraph {
        let triples = [Triple::new(0, 0, 5), Triple::new(5, 1, 1), Triple::new(5, 1, 2)];
        let map = (0..4).map(|i| Some(EntityId(i))).collect();
        KnowledgeGraph::from_triples(6, 2, triples, map).unwrap().0
    }

    #[test]
    fn target_attack_of_length_one_is_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = generate_baseline_profile(BaselineKind::TargetAttack, ItemId(3), &graph(), 4, 1, 2, 50, &mut rng).unwrap();
        assert_eq!(p.items(), &[ItemId(3)]);
    }

    #[test]
    fn kg_variant_with_exact_pool_takes_it_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = generate_baseline_profile(BaselineKind::TargetAttackKg, ItemId(0), &graph(), 4, 3, 2, 50, &mut rng).unwrap();
            let mut items = p.items().to_vec();
            assert_eq!(items[0], ItemId(0));
            items.sort();
            assert_eq!(items, vec![ItemId(0), ItemId(1), ItemId(2)]);
        }
    }

    #[test]
    fn kg_variant_pads_a_small_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = generate_baseline_profile(BaselineKind::TargetAttackKg, ItemId(0), &graph(), 4, 4, 2, 50, &mut rng).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.contains(ItemId(3)));
    }

    #[test]
    fn names_round_trip() {
        for k in [BaselineKind::RandomAttack, BaselineKind::TargetAttack, BaselineKind::TargetAttackKg] {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
    }
}
