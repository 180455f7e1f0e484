//! Trajectory generation and PPO updates for the hierarchical attacker.
//!
//! Each episode builds `N` fake profiles in lock-step against a frozen policy,
//! injects them together, and shares the single spy reward across the `N`
//! terminal transitions. The critic is fitted to discounted returns, then the
//! anchor actor (with the GRU) and the item actor (with the GNN) each take
//! `ppo_epochs` clipped-surrogate ascent steps over the whole buffer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_state, EncoderConfig, GnnForward, StateEncoder};
use crate::env::{BlackBoxTarget, RecommenderEnv, RewardRecord};
use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::kg::KnowledgeGraph;
use crate::numeric::{AdamConfig, Bound, ParameterSet, Tape, Tensor, Var};
use crate::policy::{
    fallback_pool, filter_pool, item_policy, select_anchor, AnchorHead, AnchorSource, Critic, FakeProfile,
    ItemHead, ItemSource, PolicyConfig,
};
use crate::transe::KgEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total fake profiles Δ.
    pub budget: usize,
    /// Profiles generated and injected per episode, N.
    pub profiles_per_episode: usize,
    /// Decisions per profile, T. Profiles end with `T + 1` items including the target.
    pub profile_len: usize,
    pub gamma: f64,
    pub clip: f64,
    pub epsilon: f64,
    pub hops: usize,
    pub pool_size: usize,
    pub k: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub ppo_epochs: usize,
    pub standardize_advantages: bool,
    pub entropy_coef: f64,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 75,
            profiles_per_episode: 3,
            profile_len: 8,
            gamma: 0.99,
            clip: 0.2,
            epsilon: 0.5,
            hops: 2,
            pool_size: 50,
            k: 20,
            actor_lr: 0.01,
            critic_lr: 0.01,
            ppo_epochs: 4,
            standardize_advantages: true,
            entropy_coef: 0.0,
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.profiles_per_episode == 0 {
            return fail("profiles per episode must be positive".into());
        }
        if !self.budget.is_multiple_of(self.profiles_per_episode) {
            return fail(format!(
                "budget {} is not divisible by {} profiles per episode",
                self.budget, self.profiles_per_episode
            ));
        }
        if self.profile_len == 0 || self.hops == 0 || self.pool_size == 0 || self.k == 0 {
            return fail("profile length, hops, pool size and k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip {} must be positive", self.clip));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("anchor ratio {} outside [0, 1]", self.epsilon));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.budget / self.profiles_per_episode
    }

    /// Items in a finished profile.
    pub fn profile_items(&self) -> usize {
        self.profile_len + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Unique across episodes: `episode * N + j`.
    pub trajectory: usize,
    pub step: usize,
    /// Encoded state `x_t` at rollout parameters.
    pub state: Vec<f64>,
    /// Profile before this step's pick.
    pub profile: Vec<ItemId>,
    pub anchor_index: usize,
    pub anchor_source: AnchorSource,
    pub anchor_log_prob: Option<f64>,
    pub item: ItemId,
    pub item_source: ItemSource,
    pub item_log_prob: Option<f64>,
    /// Items the pick was drawn from.
    pub pool: Vec<ItemId>,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }
}

/// Public knowledge available to the attacker.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub graph: &'a KnowledgeGraph,
    pub embeddings: &'a KgEmbeddings,
    pub target: ItemId,
}

/// Encoder, both actor heads and the critic.
#[derive(Clone, Debug)]
pub struct Agent {
    pub encoder: StateEncoder,
    pub anchor: AnchorHead,
    pub item: ItemHead,
    pub critic: Critic,
}

impl Agent {
    pub fn new(embedding_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = rollout_rng(cfg.seed, 0);
        let mut enc_cfg = cfg.encoder.clone();
        enc_cfg.seed = cfg.seed;
        let encoder = StateEncoder::new(embedding_dim, enc_cfg, &mut rng)?;
        let h = encoder.hidden_dim();
        let anchor = AnchorHead::new(h, cfg.policy.anchor_hidden, cfg.profile_len, &mut rng)?;
        let item = ItemHead::new(h, cfg.policy.item_hidden, embedding_dim, &mut rng)?;
        let critic = Critic::new(h, cfg.policy.critic_hidden, &mut rng)?;
        Ok(Self {
            encoder,
            anchor,
            item,
            critic,
        })
    }

    pub fn parameter_sets(&self) -> [(&'static str, &ParameterSet); 5] {
        [
            ("gnn", &self.encoder.gnn.set),
            ("gru", &self.encoder.gru.set),
            ("anchor", &self.anchor.set),
            ("item", &self.item.set),
            ("critic", &self.critic.set),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.parameter_sets().iter().all(|(_, s)| s.all_finite())
    }

    /// One checkpoint file per parameter group.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, set) in self.parameter_sets() {
            set.save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        self.encoder.gnn.set.load_values(&dir.join("gnn.ckpt"))?;
        self.encoder.gru.set.load_values(&dir.join("gru.ckpt"))?;
        self.anchor.set.load_values(&dir.join("anchor.ckpt"))?;
        self.item.set.load_values(&dir.join("item.ckpt"))?;
        self.critic.set.load_values(&dir.join("critic.ckpt"))?;
        Ok(())
    }

    /// GNN vectors for every item; items without a KG entity get zeros.
    pub fn item_vectors(&self, ctx: &AttackContext, item_count: usize) -> Result<HashMap<ItemId, Vec<f64>>> {
        let mapped: Vec<ItemId> = ctx.graph.mapped_items().filter(|v| v.index() < item_count).collect();
        let mut vectors = self.encoder.item_vectors(ctx.graph, ctx.embeddings, &mapped)?;
        let dim = ctx.embeddings.dim();
        for v in (0..item_count).map(ItemId::from) {
            vectors.entry(v).or_insert_with(|| vec![0.0; dim]);
        }
        Ok(vectors)
    }
}

/// Independent stream per `(seed, stream)`; stream 0 initialises parameters.
pub fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub profiles: Vec<FakeProfile>,
    pub reward: RewardRecord,
    pub fallbacks: usize,
}

/// Builds `N` profiles, injects them, queries once and pushes `N·T` transitions.
pub fn generate_trajectories<E: BlackBoxTarget>(
    env: &mut E,
    ctx: &AttackContext,
    agent: &Agent,
    cfg: &TrainConfig,
    episode: usize,
    buffer: &mut ReplayBuffer,
) -> Result<Rollout> {
    let n = cfg.profiles_per_episode;
    if env.remaining_budget() < n {
        return Err(Error::Budget {
            requested: n,
            remaining: env.remaining_budget(),
        });
    }
    let item_count = env.item_count();
    let vectors = agent.item_vectors(ctx, item_count)?;
    let mut profiles = Vec::with_capacity(n);
    let mut fallbacks = 0;
    let first = buffer.len();
    for j in 0..n {
        let mut rng = rollout_rng(cfg.seed, 1 + (episode * n + j) as u64);
        let mut profile = FakeProfile::new(ctx.target, cfg.profile_items())?;
        for t in 0..cfg.profile_len {
            let state = encode_state(profile.items(), &vectors, &agent.encoder.gru)?.vector;
            let anchor = select_anchor(&profile, &state, cfg.epsilon, &mut rng, &agent.anchor)?;
            let pool = match ctx.graph.candidate_pool(anchor.item, cfg.hops, cfg.pool_size, &mut rng) {
                Ok(pool) => filter_pool(&pool, &profile),
                Err(Error::NoCandidates { .. } | Error::UnmappedItem(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            let (item, item_source, item_log_prob, pool) = if pool.is_empty() {
                fallbacks += 1;
                let pool = fallback_pool(&profile, item_count);
                if pool.is_empty() {
                    return Err(Error::Validation("no unseen items left for the profile".into()));
                }
                let item = pool[rng.gen_range(0..pool.len())];
                (item, ItemSource::Fallback, None, pool)
            } else {
                let pool_vectors: Vec<&[f64]> = pool.iter().map(|v| vectors[v].as_slice()).collect();
                let pick = item_policy(&agent.item, &state, &pool_vectors, &mut rng)?;
                (pool[pick.index], ItemSource::Policy, Some(pick.log_prob), pool)
            };
            buffer.push(Transition {
                trajectory: episode * n + j,
                step: t,
                state,
                profile: profile.items().to_vec(),
                anchor_index: anchor.index,
                anchor_source: anchor.source,
                anchor_log_prob: anchor.log_prob,
                item,
                item_source,
                item_log_prob,
                pool,
                reward: 0.0,
                terminal: t + 1 == cfg.profile_len,
            });
            profile.push(item)?;
        }
        profiles.push(profile);
    }
    env.inject(&profiles)?;
    let reward = env.query_reward()?;
    for t in &mut buffer.transitions[first..] {
        if t.terminal {
            t.reward = reward.reward;
        }
    }
    Ok(Rollout {
        profiles,
        reward,
        fallbacks,
    })
}

/// `G_t = Σ_j γ^j r_{t+j}`, accumulated backwards.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Returns for every transition, computed within each trajectory.
pub fn transition_returns(transitions: &[Transition], gamma: f64) -> Vec<f64> {
    let mut by_traj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in transitions.iter().enumerate() {
        by_traj.entry(t.trajectory).or_default().push(i);
    }
    let mut out = vec![0.0; transitions.len()];
    for idx in by_traj.values_mut() {
        idx.sort_by_key(|&i| transitions[i].step);
        let rewards: Vec<f64> = idx.iter().map(|&i| transitions[i].reward).collect();
        for (&i, g) in idx.iter().zip(discounted_returns(&rewards, gamma)) {
            out[i] = g;
        }
    }
    out
}

/// Zero mean, unit variance; a constant input is only centred.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std;
        }
    }
}

fn critic_values(critic: &Critic, transitions: &[Transition]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = critic.set.bind_frozen(&tape);
    transitions
        .iter()
        .map(|t| {
            let x = tape.constant(Tensor::vector(t.state.clone()));
            Ok(tape.scalar(critic.value(&tape, &p, x)?))
        })
        .collect()
}

/// `Â_t = G_t − V(x_t)`, optionally standardised over the batch.
pub fn advantages(transitions: &[Transition], critic: &Critic, gamma: f64, standardized: bool) -> Result<Vec<f64>> {
    let returns = transition_returns(transitions, gamma);
    let values = critic_values(critic, transitions)?;
    let mut adv: Vec<f64> = returns.iter().zip(&values).map(|(g, v)| g - v).collect();
    if standardized {
        standardize(&mut adv);
    }
    Ok(adv)
}

fn critic_loss_var(tape: &Tape, critic: &Critic, p: &Bound, transitions: &[Transition], returns: &[f64]) -> Result<Var> {
    let errs = transitions
        .iter()
        .zip(returns)
        .map(|(t, &g)| {
            let x = tape.constant(Tensor::vector(t.state.clone()));
            let v = critic.value(tape, p, x)?;
            Ok(tape.add_scalar(tape.scale(v, -1.0), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let errs = tape.concat(&errs)?;
    Ok(tape.sum(tape.square(errs)))
}

/// `Σ_t (G_t − V(x_t))²`.
pub fn critic_loss(transitions: &[Transition], critic: &Critic, gamma: f64) -> Result<f64> {
    if transitions.is_empty() {
        return Ok(0.0);
    }
    let returns = transition_returns(transitions, gamma);
    let tape = Tape::new();
    let p = critic.set.bind_frozen(&tape);
    Ok(tape.scalar(critic_loss_var(&tape, critic, &p, transitions, &returns)?))
}

/// Mean of `min(ρ Â, clip(ρ, 1−ψ, 1+ψ) Â)` with `ρ = exp(new − old)`.
pub fn ppo_objective(new_log_probs: &[f64], old_log_probs: &[f64], adv: &[f64], clip: f64) -> f64 {
    if new_log_probs.is_empty() {
        return 0.0;
    }
    let total: f64 = new_log_probs
        .iter()
        .zip(old_log_probs)
        .zip(adv)
        .map(|((n, o), a)| {
            let rho = (n - o).exp();
            (rho * a).min(rho.clamp(1.0 - clip, 1.0 + clip) * a)
        })
        .sum();
    total / new_log_probs.len() as f64
}

/// Tape form of [`ppo_objective`] over scalar log-probability nodes.
pub fn ppo_objective_var(tape: &Tape, new_log_probs: &[Var], old_log_probs: &[f64], adv: &[f64], clip: f64) -> Result<Var> {
    if new_log_probs.is_empty() {
        return Err(Error::Validation("PPO objective over zero steps".into()));
    }
    let new = tape.concat(new_log_probs)?;
    let old = tape.constant(Tensor::vector(old_log_probs.to_vec()));
    let a = tape.constant(Tensor::vector(adv.to_vec()));
    let ratio = tape.exp(tape.sub(new, old)?);
    let unclipped = tape.hadamard(ratio, a)?;
    let clipped = tape.hadamard(tape.clamp(ratio, 1.0 - clip, 1.0 + clip), a)?;
    Ok(tape.mean(tape.minimum(unclipped, clipped)?))
}

/// Which actor a PPO pass updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Actor {
    Anchor,
    Item,
}

impl Actor {
    pub fn included(self, t: &Transition) -> bool {
        match self {
            Actor::Anchor => t.anchor_source == AnchorSource::Policy,
            Actor::Item => t.item_source == ItemSource::Policy,
        }
    }

    fn old_log_prob(self, t: &Transition) -> Option<f64> {
        match self {
            Actor::Anchor => t.anchor_log_prob,
            Actor::Item => t.item_log_prob,
        }
    }
}

/// Log-probability nodes and entropy nodes for the included steps, in buffer order.
struct ActorPass {
    indices: Vec<usize>,
    log_probs: Vec<Var>,
    entropies: Vec<Var>,
}

fn entropy_of(tape: &Tape, lp: Var) -> Result<Var> {
    let p = tape.exp(lp);
    Ok(tape.scale(tape.dot(p, lp)?, -1.0))
}

fn anchor_pass(tape: &Tape, agent: &Agent, anchor: &Bound, gru: &Bound, vectors: &HashMap<ItemId, Vec<f64>>, transitions: &[Transition]) -> Result<ActorPass> {
    let mut pass = ActorPass {
        indices: Vec::new(),
        log_probs: Vec::new(),
        entropies: Vec::new(),
    };
    // States of one trajectory are prefixes of its longest recorded profile.
    let mut longest: BTreeMap<usize, &Transition> = BTreeMap::new();
    for t in transitions {
        let e = longest.entry(t.trajectory).or_insert(t);
        if t.profile.len() > e.profile.len() {
            *e = t;
        }
    }
    let mut states: HashMap<usize, Vec<Var>> = HashMap::new();
    for (&traj, t) in &longest {
        if !transitions.iter().any(|u| u.trajectory == traj && Actor::Anchor.included(u)) {
            continue;
        }
        let inputs = t
            .profile
            .iter()
            .map(|v| {
                vectors
                    .get(v)
                    .map(|x| tape.constant(Tensor::vector(x.clone())))
                    .ok_or(Error::UnmappedItem(v.0))
            })
            .collect::<Result<Vec<_>>>()?;
        states.insert(traj, agent.encoder.gru.run(tape, gru, &inputs)?);
    }
    for (i, t) in transitions.iter().enumerate() {
        if !Actor::Anchor.included(t) {
            continue;
        }
        let x = states[&t.trajectory][t.profile.len() - 1];
        let lp = agent.anchor.log_probs(tape, anchor, x, t.profile.len())?;
        pass.indices.push(i);
        pass.log_probs.push(tape.gather(lp, &[t.anchor_index])?);
        pass.entropies.push(entropy_of(tape, lp)?);
    }
    Ok(pass)
}

fn item_pass(tape: &Tape, agent: &Agent, ctx: &AttackContext, item: &Bound, gnn: &Bound, transitions: &[Transition]) -> Result<ActorPass> {
    let mut pass = ActorPass {
        indices: Vec::new(),
        log_probs: Vec::new(),
        entropies: Vec::new(),
    };
    let mut fwd = GnnForward::new(tape, ctx.graph, ctx.embeddings, &agent.encoder.gnn, gnn, &agent.encoder.cfg)?;
    let zeros = Tensor::zeros(&[ctx.embeddings.dim()]);
    let mut item_var = |v: ItemId| -> Result<Var> {
        if ctx.graph.entity_of(v).is_some() {
            fwd.item(v)
        } else {
            Ok(tape.constant(zeros.clone()))
        }
    };
    for (i, t) in transitions.iter().enumerate() {
        if !Actor::Item.included(t) {
            continue;
        }
        let pool = t.pool.iter().map(|&v| item_var(v)).collect::<Result<Vec<_>>>()?;
        let picked = t
            .pool
            .iter()
            .position(|&v| v == t.item)
            .ok_or_else(|| Error::Validation(format!("picked item {} missing from its pool", t.item)))?;
        let x = tape.constant(Tensor::vector(t.state.clone()));
        let lp = agent.item.log_probs(tape, item, x, &pool)?;
        pass.indices.push(i);
        pass.log_probs.push(tape.gather(lp, &[picked])?);
        pass.entropies.push(entropy_of(tape, lp)?);
    }
    Ok(pass)
}

/// Log-probabilities of the recorded actions under the agent's current parameters.
pub fn recompute_log_probs(agent: &Agent, ctx: &AttackContext, item_count: usize, actor: Actor, transitions: &[Transition]) -> Result<Vec<Option<f64>>> {
    let tape = Tape::new();
    let pass = match actor {
        Actor::Anchor => {
            let vectors = agent.item_vectors(ctx, item_count)?;
            let a = agent.anchor.set.bind_frozen(&tape);
            let g = agent.encoder.gru.set.bind_frozen(&tape);
            anchor_pass(&tape, agent, &a, &g, &vectors, transitions)?
        }
        Actor::Item => {
            let i = agent.item.set.bind_frozen(&tape);
            let g = agent.encoder.gnn.set.bind_frozen(&tape);
            item_pass(&tape, agent, ctx, &i, &g, transitions)?
        }
    };
    let mut out = vec![None; transitions.len()];
    for (&i, &lp) in pass.indices.iter().zip(&pass.log_probs) {
        out[i] = Some(tape.scalar(lp));
    }
    Ok(out)
}

/// Clipped surrogate objective of one actor as a differentiable node, plus the steps it covers.
///
/// `bind` decides whether the actor's parameters are trainable on `tape`.
fn actor_objective(
    tape: &Tape,
    agent: &Agent,
    ctx: &AttackContext,
    vectors: &HashMap<ItemId, Vec<f64>>,
    actor: Actor,
    transitions: &[Transition],
    adv: &[f64],
    cfg: &TrainConfig,
) -> Result<Option<(Var, [Bound; 2])>> {
    let (pass, bounds) = match actor {
        Actor::Anchor => {
            let a = agent.anchor.set.bind(tape);
            let g = agent.encoder.gru.set.bind(tape);
            (anchor_pass(tape, agent, &a, &g, vectors, transitions)?, [a, g])
        }
        Actor::Item => {
            let i = agent.item.set.bind(tape);
            let g = agent.encoder.gnn.set.bind(tape);
            (item_pass(tape, agent, ctx, &i, &g, transitions)?, [i, g])
        }
    };
    if pass.indices.is_empty() {
        return Ok(None);
    }
    let old: Vec<f64> = pass
        .indices
        .iter()
        .map(|&i| actor.old_log_prob(&transitions[i]).ok_or_else(|| Error::Validation("included step without a log-probability".into())))
        .collect::<Result<_>>()?;
    let a: Vec<f64> = pass.indices.iter().map(|&i| adv[i]).collect();
    let mut obj = ppo_objective_var(tape, &pass.log_probs, &old, &a, cfg.clip)?;
    if cfg.entropy_coef != 0.0 {
        let ent = tape.mean(tape.concat(&pass.entropies)?);
        obj = tape.add(obj, tape.scale(ent, cfg.entropy_coef))?;
    }
    Ok(Some((obj, bounds)))
}

/// Gradient of the clipped objective w.r.t. the actor head, for analysis and tests.
pub fn actor_objective_gradient(
    agent: &Agent,
    ctx: &AttackContext,
    item_count: usize,
    actor: Actor,
    transitions: &[Transition],
    adv: &[f64],
    cfg: &TrainConfig,
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let vectors = agent.item_vectors(ctx, item_count)?;
    let tape = Tape::new();
    let Some((obj, bounds)) = actor_objective(&tape, agent, ctx, &vectors, actor, transitions, adv, cfg)? else {
        return Ok(None);
    };
    let grads = tape.backward(obj)?;
    let head = match actor {
        Actor::Anchor => &agent.anchor.set,
        Actor::Item => &agent.item.set,
    };
    let g = head
        .ids()
        .map(|id| grads.get(bounds[0][id]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; head.get(id).len()]))
        .collect();
    Ok(Some((tape.scalar(obj), g)))
}

fn ensure_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// One ascent step on an actor; returns the objective before the step, if any step was included.
fn actor_step(
    agent: &mut Agent,
    ctx: &AttackContext,
    vectors: &HashMap<ItemId, Vec<f64>>,
    actor: Actor,
    transitions: &[Transition],
    adv: &[f64],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let tape = Tape::new();
    let Some((obj, bounds)) = actor_objective(&tape, agent, ctx, vectors, actor, transitions, adv, cfg)? else {
        return Ok(None);
    };
    let value = ensure_finite("actor objective", tape.scalar(obj))?;
    let loss = tape.scale(obj, -1.0);
    let grads = tape.backward(loss)?;
    let adam = AdamConfig::with_lr(cfg.actor_lr);
    let (head, encoder) = match actor {
        Actor::Anchor => (&mut agent.anchor.set, &mut agent.encoder.gru.set),
        Actor::Item => (&mut agent.item.set, &mut agent.encoder.gnn.set),
    };
    head.accumulate(&grads, &bounds[0]);
    encoder.accumulate(&grads, &bounds[1]);
    if !head.grads_finite() || !encoder.grads_finite() {
        return Err(Error::NonFinite("actor gradient".into()));
    }
    head.adam_step(&adam)?;
    encoder.adam_step(&adam)?;
    Ok(Some(value))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub anchor_obj: f64,
    pub item_obj: f64,
}

/// Critic fit, then anchor actor, then item actor; clears the buffer.
pub fn update(agent: &mut Agent, ctx: &AttackContext, item_count: usize, buffer: &mut ReplayBuffer, cfg: &TrainConfig) -> Result<UpdateStats> {
    let transitions = std::mem::take(&mut buffer.transitions);
    if transitions.is_empty() {
        return Ok(UpdateStats {
            critic_loss: 0.0,
            anchor_obj: 0.0,
            item_obj: 0.0,
        });
    }
    let returns = transition_returns(&transitions, cfg.gamma);
    let adv = advantages(&transitions, &agent.critic, cfg.gamma, cfg.standardize_advantages)?;

    let critic_adam = AdamConfig::with_lr(cfg.critic_lr);
    let mut critic_loss = None;
    for _ in 0..cfg.ppo_epochs {
        let tape = Tape::new();
        let p = agent.critic.set.bind(&tape);
        let loss = critic_loss_var(&tape, &agent.critic, &p, &transitions, &returns)?;
        let value = ensure_finite("critic loss", tape.scalar(loss))?;
        critic_loss.get_or_insert(value);
        agent.critic.set.accumulate(&tape.backward(loss)?, &p);
        agent.critic.set.adam_step(&critic_adam)?;
    }

    let vectors = agent.item_vectors(ctx, item_count)?;
    let mut anchor_obj = None;
    for _ in 0..cfg.ppo_epochs {
        match actor_step(agent, ctx, &vectors, Actor::Anchor, &transitions, &adv, cfg)? {
            Some(v) => {
                anchor_obj.get_or_insert(v);
            }
            None => break,
        }
    }
    let mut item_obj = None;
    for _ in 0..cfg.ppo_epochs {
        match actor_step(agent, ctx, &vectors, Actor::Item, &transitions, &adv, cfg)? {
            Some(v) => {
                item_obj.get_or_insert(v);
            }
            None => break,
        }
    }
    if !agent.all_finite() {
        return Err(Error::NonFinite("agent parameters".into()));
    }
    Ok(UpdateStats {
        critic_loss: critic_loss.unwrap_or(0.0),
        anchor_obj: anchor_obj.unwrap_or(0.0),
        item_obj: item_obj.unwrap_or(0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub reward: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub critic_loss: f64,
    pub anchor_obj: f64,
    pub item_obj: f64,
    pub fallback_count: usize,
}

pub const METRICS_HEADER: &str = "episode,reward,hr,ndcg,critic_loss,anchor_obj,item_obj,fallback_count";

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode, self.reward, self.hr, self.ndcg, self.critic_loss, self.anchor_obj, self.item_obj, self.fallback_count
        )
    }
}

pub fn write_metrics(path: &Path, trace: &[EpisodeMetrics], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# config {config_hash}")?;
    writeln!(out, "{METRICS_HEADER}")?;
    for m in trace {
        writeln!(out, "{}", m.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub trace: Vec<EpisodeMetrics>,
    pub agent: Agent,
}

/// Δ/N episodes of rollout, injection, reward query and update.
pub fn run_attack(env: &mut RecommenderEnv, ctx: &AttackContext, cfg: &TrainConfig) -> Result<AttackRun> {
    cfg.validate()?;
    if ctx.target != env.target() {
        return Err(Error::Config(format!("attack target {} differs from environment target {}", ctx.target, env.target())));
    }
    let mut agent = Agent::new(ctx.embeddings.dim(), cfg)?;
    let mut buffer = ReplayBuffer::new();
    let mut trace = Vec::with_capacity(cfg.episodes());
    let item_count = env.item_count();
    for episode in 0..cfg.episodes() {
        let rollout = generate_trajectories(env, ctx, &agent, cfg, episode, &mut buffer)?;
        let stats = update(&mut agent, ctx, item_count, &mut buffer, cfg)?;
        let eval = env.evaluate_normal(cfg.k)?;
        let m = EpisodeMetrics {
            episode,
            reward: rollout.reward.reward,
            hr: eval.hr,
            ndcg: eval.ndcg,
            critic_loss: stats.critic_loss,
            anchor_obj: stats.anchor_obj,
            item_obj: stats.item_obj,
            fallback_count: rollout.fallbacks,
        };
        log::info!(
            "episode {episode}: reward {:.3} hr@{} {:.3} fallbacks {}",
            m.reward,
            cfg.k,
            m.hr,
            m.fallback_count
        );
        trace.push(m);
    }
    Ok(AttackRun { trace, agent })
}
