//! Hierarchical actor heads, the critic, and the anchor-ratio rule.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::numeric::{Bound, ParamId, ParameterSet, Tape, Tensor, Var};

/// Logit offset applied to anchor positions beyond the current profile.
pub const MASK_VALUE: f64 = -1e9;

/// Ordered fake-user profile; position 0 always holds the target item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeProfile {
    items: Vec<ItemId>,
    max_len: usize,
}

impl FakeProfile {
    pub fn new(target: ItemId, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("profile length must be positive".into()));
        }
        Ok(Self {
            items: vec![target],
            max_len,
        })
    }

    /// Profile from explicit items, used for baselines and loaded data.
    /// Unlike [`FakeProfile::new`], the first item need not be a target.
    pub fn from_items(items: Vec<ItemId>, max_len: usize) -> Result<Self> {
        if items.is_empty() || items.len() > max_len {
            return Err(Error::Validation(format!(
                "profile of {} items outside 1..={max_len}",
                items.len()
            )));
        }
        let mut seen = items.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != items.len() {
            return Err(Error::Validation("profile contains duplicate items".into()));
        }
        Ok(Self { items, max_len })
    }

    pub fn first(&self) -> ItemId {
        self.items[0]
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.max_len
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.contains(&item)
    }

    pub fn push(&mut self, item: ItemId) -> Result<()> {
        if self.is_full() {
            return Err(Error::Validation(format!("profile already holds {} items", self.max_len)));
        }
        if self.contains(item) {
            return Err(Error::Validation(format!("item {item} already in profile")));
        }
        self.items.push(item);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Policy,
    TargetForced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    Policy,
    /// Filtered pool was empty; picked uniformly among unseen items.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HierarchicalAction {
    pub anchor_index: usize,
    pub picked_item: ItemId,
    pub anchor_source: AnchorSource,
    pub item_source: ItemSource,
}

/// A sampled categorical decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
    pub index: usize,
    pub log_prob: f64,
}

impl Categorical {
    fn sample<R: Rng + ?Sized>(probs: Vec<f64>, log_probs: &[f64], rng: &mut R) -> Result<Self> {
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::NonFinite(format!("categorical weights: {e}")))?;
        let index = dist.sample(rng);
        Ok(Self {
            log_prob: log_probs[index],
            probs,
            index,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub anchor_hidden: usize,
    pub item_hidden: usize,
    pub critic_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            anchor_hidden: 32,
            item_hidden: 32,
            critic_hidden: 32,
        }
    }
}

/// `softmax(W_A2 · ReLU(W_A1 x) + m)` over a fixed number of profile positions.
#[derive(Clone, Debug)]
pub struct AnchorHead {
    pub set: ParameterSet,
    pub w1: ParamId,
    pub w2: ParamId,
    positions: usize,
}

impl AnchorHead {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, positions: usize, rng: &mut R) -> Result<Self> {
        let mut set = ParameterSet::new();
        let w1 = set.add("anchor.w1", Tensor::glorot(hidden, state_dim, rng))?;
        let w2 = set.add("anchor.w2", Tensor::glorot(positions, hidden, rng))?;
        Ok(Self { set, w1, w2, positions })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Mask for a profile of length `t`: zero on valid positions, [`MASK_VALUE`] elsewhere.
    pub fn mask(&self, t: usize) -> Result<Vec<f64>> {
        if t == 0 || t > self.positions {
            return Err(Error::Validation(format!(
                "profile length {t} outside 1..={}",
                self.positions
            )));
        }
        Ok((0..self.positions)
            .map(|i| if i < t { 0.0 } else { MASK_VALUE })
            .collect())
    }

    pub fn log_probs(&self, tape: &Tape, p: &Bound, x: Var, t: usize) -> Result<Var> {
        let mask = tape.constant(Tensor::vector(self.mask(t)?));
        let hidden = tape.matvec(p[self.w1], x)?;
        let hidden = tape.relu(hidden);
        let logits = tape.matvec(p[self.w2], hidden)?;
        let masked = tape.add(logits, mask)?;
        tape.log_softmax(masked)
    }
}

/// `score_j = W_I2 · [ReLU(W_I1 x) ; e_j]`, softmax over the pool.
#[derive(Clone, Debug)]
pub struct ItemHead {
    pub set: ParameterSet,
    pub w1: ParamId,
    pub w2: ParamId,
    hidden: usize,
    item_dim: usize,
}

impl ItemHead {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, item_dim: usize, rng: &mut R) -> Result<Self> {
        let mut set = ParameterSet::new();
        let w1 = set.add("item.w1", Tensor::glorot(hidden, state_dim, rng))?;
        let w2 = set.add("item.w2", Tensor::glorot(1, hidden + item_dim, rng))?;
        Ok(Self {
            set,
            w1,
            w2,
            hidden,
            item_dim,
        })
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    /// Log-probabilities over `pool`, whose entries are item vectors on the tape.
    pub fn log_probs(&self, tape: &Tape, p: &Bound, x: Var, pool: &[Var]) -> Result<Var> {
        if pool.is_empty() {
            return Err(Error::Validation("item policy called with an empty pool".into()));
        }
        let hidden = tape.matvec(p[self.w1], x)?;
        let hidden = tape.relu(hidden);
        let scores = pool
            .iter()
            .map(|&e| {
                let joined = tape.concat(&[hidden, e])?;
                tape.matvec(p[self.w2], joined)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.concat(&scores)?;
        debug_assert_eq!(tape.with_value(hidden, Tensor::len), self.hidden);
        tape.log_softmax(scores)
    }
}

/// Two-layer ReLU MLP from state to a scalar value.
#[derive(Clone, Debug)]
pub struct Critic {
    pub set: ParameterSet,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut set = ParameterSet::new();
        let w1 = set.add("critic.w1", Tensor::glorot(hidden, state_dim, rng))?;
        let b1 = set.add("critic.b1", Tensor::zeros(&[hidden]))?;
        let w2 = set.add("critic.w2", Tensor::glorot(1, hidden, rng))?;
        let b2 = set.add("critic.b2", Tensor::zeros(&[1]))?;
        Ok(Self { set, w1, b1, w2, b2 })
    }

    pub fn value(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let hidden = tape.affine(p[self.w1], x, p[self.b1])?;
        let hidden = tape.relu(hidden);
        tape.affine(p[self.w2], hidden, p[self.b2])
    }
}

/// Samples an anchor position for a profile of length `t`.
pub fn anchor_policy<R: Rng + ?Sized>(head: &AnchorHead, x: &[f64], t: usize, rng: &mut R) -> Result<Categorical> {
    let tape = Tape::new();
    let p = head.set.bind_frozen(&tape);
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    let lp = tape.value(head.log_probs(&tape, &p, xv, t)?).into_data();
    let probs = lp.iter().map(|v| v.exp()).collect();
    Categorical::sample(probs, &lp, rng)
}

/// Samples one pool entry given the pool's item vectors.
pub fn item_policy<R: Rng + ?Sized>(
    head: &ItemHead,
    x: &[f64],
    pool_vectors: &[&[f64]],
    rng: &mut R,
) -> Result<Categorical> {
    let tape = Tape::new();
    let p = head.set.bind_frozen(&tape);
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    let pool: Vec<Var> = pool_vectors
        .iter()
        .map(|v| tape.constant(Tensor::vector(v.to_vec())))
        .collect();
    let lp = tape.value(head.log_probs(&tape, &p, xv, &pool)?).into_data();
    let probs = lp.iter().map(|v| v.exp()).collect();
    Categorical::sample(probs, &lp, rng)
}

pub fn critic_value(critic: &Critic, x: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let p = critic.set.bind_frozen(&tape);
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    Ok(tape.scalar(critic.value(&tape, &p, xv)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorChoice {
    pub index: usize,
    pub item: ItemId,
    pub source: AnchorSource,
    pub log_prob: Option<f64>,
}

/// With probability `epsilon` the anchor comes from the policy, otherwise it is the target at position 0.
pub fn select_anchor<R: Rng + ?Sized>(
    profile: &FakeProfile,
    x: &[f64],
    epsilon: f64,
    rng: &mut R,
    head: &AnchorHead,
) -> Result<AnchorChoice> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("anchor ratio {epsilon} outside [0, 1]")));
    }
    if rng.gen_bool(epsilon) {
        let c = anchor_policy(head, x, profile.len(), rng)?;
        Ok(AnchorChoice {
            index: c.index,
            item: profile.items()[c.index],
            source: AnchorSource::Policy,
            log_prob: Some(c.log_prob),
        })
    } else {
        Ok(AnchorChoice {
            index: 0,
            item: profile.first(),
            source: AnchorSource::TargetForced,
            log_prob: None,
        })
    }
}

/// Removes items already in the profile, preserving pool order.
pub fn filter_pool(pool: &[ItemId], profile: &FakeProfile) -> Vec<ItemId> {
    pool.iter().copied().filter(|&v| !profile.contains(v)).collect()
}

/// Items outside the profile; the fallback draws uniformly from these.
pub fn fallback_pool(profile: &FakeProfile, item_count: usize) -> Vec<ItemId> {
    (0..item_count)
        .map(ItemId::from)
        .filter(|&v| !profile.contains(v))
        .collect()
}
