//! Black-box target recommenders, fake-profile injection and spy-user rewards.
//!
//! Two stand-in targets share one interface:
//!
//! * **poison**: logistic matrix factorisation retrained from scratch on the
//!   polluted matrix before the next query after an injection;
//! * **evasion**: the clean factorisation is frozen, and injected profiles act
//!   only through an item co-occurrence blend
//!   `λ · Σ_{w ∈ I(u)} c(w, v) / √(pop(w) · pop(v))`, where `c` counts injected
//!   users holding both items and `pop` is the polluted popularity.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId, Vocab};
use crate::kg::read_rows;
use crate::numeric::{checkpoint, dot, sigmoid, Tensor};
use crate::policy::FakeProfile;

/// Implicit-feedback interactions; rows past `original_users` are injected.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    rows: Vec<Vec<ItemId>>,
    item_count: usize,
    original_users: usize,
}

impl InteractionMatrix {
    pub fn new(user_count: usize, item_count: usize, pairs: impl IntoIterator<Item = (UserId, ItemId)>) -> Result<Self> {
        let mut rows = vec![Vec::new(); user_count];
        for (u, v) in pairs {
            if u.index() >= user_count || v.index() >= item_count {
                return Err(Error::Validation(format!(
                    "interaction ({u}, {v}) outside {user_count} users x {item_count} items"
                )));
            }
            rows[u.index()].push(v);
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        Ok(Self {
            rows,
            item_count,
            original_users: user_count,
        })
    }

    pub fn user_count(&self) -> usize {
        self.rows.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn original_users(&self) -> usize {
        self.original_users
    }

    pub fn injected_users(&self) -> usize {
        self.rows.len() - self.original_users
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Sorted, distinct items of a user.
    pub fn items_of(&self, u: UserId) -> &[ItemId] {
        &self.rows[u.index()]
    }

    pub fn contains(&self, u: UserId, v: ItemId) -> bool {
        self.rows[u.index()].binary_search(&v).is_ok()
    }

    pub fn popularity(&self) -> Vec<u32> {
        let mut pop = vec![0u32; self.item_count];
        for r in &self.rows {
            for v in r {
                pop[v.index()] += 1;
            }
        }
        pop
    }

    pub fn pairs(&self) -> impl Iterator<Item = (UserId, ItemId)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, r)| r.iter().map(move |&v| (UserId::from(u), v)))
    }

    /// Appends a user row; earlier rows are never touched.
    pub fn append_user(&mut self, items: &[ItemId]) -> Result<UserId> {
        if let Some(v) = items.iter().find(|v| v.index() >= self.item_count) {
            return Err(Error::Validation(format!("item {v} outside {} items", self.item_count)));
        }
        let mut row = items.to_vec();
        row.sort_unstable();
        row.dedup();
        self.rows.push(row);
        Ok(UserId::from(self.rows.len() - 1))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for (u, v) in self.pairs() {
            writeln!(out, "{u}\t{v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads `user<TAB>item` rows, remapping raw ids through the vocabularies.
///
/// Items are interned into `items` so that ids agree with the KG item map.
pub fn load_interactions(path: &Path, users: &mut Vocab, items: &mut Vocab) -> Result<InteractionMatrix> {
    let rows = read_rows(path, 2)?;
    let pairs: Vec<(UserId, ItemId)> = rows
        .iter()
        .map(|(_, f)| (UserId(users.intern(&f[0])), ItemId(items.intern(&f[1]))))
        .collect();
    InteractionMatrix::new(users.len(), items.len(), pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub negatives_per_positive: usize,
    /// Half-width of the uniform factor initialisation; 0 gives all-zero factors.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 30,
            lr: 0.05,
            reg: 0.01,
            negatives_per_positive: 1,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfModel {
    users: Vec<f64>,
    items: Vec<f64>,
    dim: usize,
}

impl MfModel {
    pub fn from_factors(users: Vec<f64>, items: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !users.len().is_multiple_of(dim) || !items.len().is_multiple_of(dim) {
            return Err(Error::shape("mf", format!("factor lengths {} / {} for dim {dim}", users.len(), items.len())));
        }
        Ok(Self { users, items, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_count(&self) -> usize {
        self.users.len() / self.dim
    }

    pub fn item_count(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn user_factor(&self, u: UserId) -> &[f64] {
        &self.users[u.index() * self.dim..(u.index() + 1) * self.dim]
    }

    pub fn item_factor(&self, v: ItemId) -> &[f64] {
        &self.items[v.index() * self.dim..(v.index() + 1) * self.dim]
    }

    pub fn score(&self, u: UserId, v: ItemId) -> f64 {
        dot(self.user_factor(u), self.item_factor(v))
    }

    /// Inductive user vector: mean of the profile's item factors.
    pub fn fold_in(&self, profile: &[ItemId]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &v in profile {
            for (o, f) in out.iter_mut().zip(self.item_factor(v)) {
                *o += f;
            }
        }
        let n = profile.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let users = Tensor::matrix(self.user_count(), self.dim, self.users.clone())?;
        let items = Tensor::matrix(self.item_count(), self.dim, self.items.clone())?;
        checkpoint::save(path, &[("users", &users), ("items", &items)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut loaded = checkpoint::load(path)?;
        if loaded.len() != 2 || loaded[0].0 != "users" || loaded[1].0 != "items" {
            return Err(Error::Checkpoint("expected `users` and `items` tensors".into()));
        }
        let items = loaded.pop().expect("two tensors").1;
        let users = loaded.pop().expect("two tensors").1;
        let dim = items.cols();
        Self::from_factors(users.into_data(), items.into_data(), dim)
    }
}

/// Logistic MF on implicit feedback with uniform negatives, plain SGD.
pub fn train_mf(y: &InteractionMatrix, cfg: &MfConfig) -> Result<MfModel> {
    if y.nnz() == 0 {
        return Err(Error::Validation("cannot train on an empty interaction matrix".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("MF dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let mut init = |n: usize| -> Vec<f64> {
        (0..n * d)
            .map(|_| if cfg.init_scale > 0.0 { rng.gen_range(-cfg.init_scale..cfg.init_scale) } else { 0.0 })
            .collect()
    };
    let users = init(y.user_count());
    let items = init(y.item_count());
    let mut model = MfModel { users, items, dim: d };
    let mut positives: Vec<(UserId, ItemId)> = y.pairs().collect();
    let n_items = y.item_count();
    for _ in 0..cfg.epochs {
        positives.shuffle(&mut rng);
        for &(u, v) in &positives {
            sgd_update(&mut model, u, v, 1.0, cfg);
            for _ in 0..cfg.negatives_per_positive {
                let mut neg = ItemId::from(rng.gen_range(0..n_items));
                for _ in 0..100 {
                    if !y.contains(u, neg) {
                        break;
                    }
                    neg = ItemId::from(rng.gen_range(0..n_items));
                }
                if !y.contains(u, neg) {
                    sgd_update(&mut model, u, neg, 0.0, cfg);
                }
            }
        }
    }
    if !model.all_finite() {
        return Err(Error::NonFinite("MF factors diverged".into()));
    }
    Ok(model)
}

fn sgd_update(m: &mut MfModel, u: UserId, v: ItemId, label: f64, cfg: &MfConfig) {
    let d = m.dim;
    let (ui, vi) = (u.index() * d, v.index() * d);
    let g = sigmoid(dot(&m.users[ui..ui + d], &m.items[vi..vi + d])) - label;
    for k in 0..d {
        let pu = m.users[ui + k];
        let qv = m.items[vi + k];
        m.users[ui + k] -= cfg.lr * (g * qv + cfg.reg * pu);
        m.items[vi + k] -= cfg.lr * (g * pu + cfg.reg * qv);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    Evasion,
    #[default]
    Poison,
}

impl std::str::FromStr for EnvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evasion" => Ok(Self::Evasion),
            "poison" => Ok(Self::Poison),
            other => Err(Error::Config(format!("unknown target mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub mode: EnvMode,
    pub mf: MfConfig,
    /// Co-occurrence blend weight of the evasion target.
    pub lambda: f64,
    pub spy_users: usize,
    pub normal_users: usize,
    pub candidates: usize,
    pub k: usize,
    pub budget: usize,
    pub max_profile_len: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            mode: EnvMode::Poison,
            mf: MfConfig::default(),
            lambda: 0.1,
            spy_users: 50,
            normal_users: 500,
            candidates: 100,
            k: 20,
            budget: 75,
            max_profile_len: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub step: usize,
    pub reward: f64,
    pub hits: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub hr: f64,
    pub ndcg: f64,
}

/// HR@k and NDCG@k from 1-based target ranks.
pub fn rank_metrics(ranks: &[usize], k: usize) -> RankMetrics {
    if ranks.is_empty() {
        return RankMetrics { hr: 0.0, ndcg: 0.0 };
    }
    let mut hits = 0usize;
    let mut gain = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    RankMetrics {
        hr: hits as f64 / n,
        ndcg: gain / n,
    }
}

/// Items ordered by descending score, ties by ascending id.
pub fn rank_items(scored: &mut [(ItemId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// What an attacker may do: inject profiles and read the spy reward.
pub trait BlackBoxTarget {
    fn item_count(&self) -> usize;
    fn remaining_budget(&self) -> usize;
    fn inject(&mut self, profiles: &[FakeProfile]) -> Result<()>;
    fn query_reward(&mut self) -> Result<RewardRecord>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnvState {
    cfg: EnvConfig,
    target: ItemId,
    spies: Vec<UserId>,
    normal: Vec<UserId>,
    candidates: BTreeMap<UserId, Vec<ItemId>>,
    original_users: usize,
    queries: usize,
    dirty: bool,
}

#[derive(Clone, Debug)]
pub struct RecommenderEnv {
    cfg: EnvConfig,
    y: InteractionMatrix,
    model: MfModel,
    target: ItemId,
    spies: Vec<UserId>,
    normal: Vec<UserId>,
    candidates: BTreeMap<UserId, Vec<ItemId>>,
    popularity: Vec<u32>,
    fake_cooc: HashMap<(ItemId, ItemId), u32>,
    queries: usize,
    dirty: bool,
}

impl RecommenderEnv {
    /// Trains the target on clean data and draws spy users, normal users and their candidate lists.
    pub fn new(y: InteractionMatrix, target: ItemId, cfg: EnvConfig) -> Result<Self> {
        if target.index() >= y.item_count() {
            return Err(Error::Validation(format!("target item {target} outside {} items", y.item_count())));
        }
        if y.injected_users() != 0 {
            return Err(Error::Validation("environment must start from clean interactions".into()));
        }
        if cfg.candidates == 0 || cfg.k == 0 || cfg.spy_users == 0 {
            return Err(Error::Config("spy users, candidates and k must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let eligible: Vec<UserId> = (0..y.user_count())
            .map(UserId::from)
            .filter(|&u| !y.contains(u, target) && y.item_count() - y.items_of(u).len() > cfg.candidates)
            .collect();
        if eligible.len() < cfg.spy_users + 1 {
            return Err(Error::Validation(format!(
                "only {} users can serve as spies or normal users; need more than {}",
                eligible.len(),
                cfg.spy_users
            )));
        }
        let mut picked: Vec<UserId> = index::sample(&mut rng, eligible.len(), eligible.len())
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let rest = picked.split_off(cfg.spy_users);
        let mut spies = picked;
        spies.sort_unstable();
        let mut normal: Vec<UserId> = rest.into_iter().take(cfg.normal_users).collect();
        normal.sort_unstable();
        if normal.len() < cfg.normal_users {
            log::warn!(
                "only {} normal users available, {} requested",
                normal.len(),
                cfg.normal_users
            );
        }
        let mut candidates = BTreeMap::new();
        for &u in spies.iter().chain(&normal) {
            let pool: Vec<ItemId> = (0..y.item_count())
                .map(ItemId::from)
                .filter(|&v| v != target && !y.contains(u, v))
                .collect();
            let mut list: Vec<ItemId> = index::sample(&mut rng, pool.len(), cfg.candidates)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            list.push(target);
            list.sort_unstable();
            candidates.insert(u, list);
        }
        let model = train_mf(&y, &cfg.mf)?;
        let popularity = y.popularity();
        Ok(Self {
            cfg,
            y,
            model,
            target,
            spies,
            normal,
            candidates,
            popularity,
            fake_cooc: HashMap::new(),
            queries: 0,
            dirty: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EnvMode {
        self.cfg.mode
    }

    pub fn target(&self) -> ItemId {
        self.target
    }

    pub fn spies(&self) -> &[UserId] {
        &self.spies
    }

    pub fn normal_users(&self) -> &[UserId] {
        &self.normal
    }

    pub fn candidates(&self, u: UserId) -> Option<&[ItemId]> {
        self.candidates.get(&u).map(Vec::as_slice)
    }

    pub fn interactions(&self) -> &InteractionMatrix {
        &self.y
    }

    pub fn injected(&self) -> usize {
        self.y.injected_users()
    }

    /// Current target model, retraining first if poisoned data is pending.
    pub fn model(&mut self) -> Result<&MfModel> {
        self.refresh()?;
        Ok(&self.model)
    }

    /// Replaces the target model, for controlled experiments with known scores.
    pub fn set_model(&mut self, model: MfModel) -> Result<()> {
        if model.user_count() < self.y.original_users() || model.item_count() != self.y.item_count() {
            return Err(Error::shape("mf", "model does not cover the interaction matrix"));
        }
        self.model = model;
        self.dirty = false;
        Ok(())
    }

    fn refresh(&mut self) -> Result<()> {
        if self.dirty {
            log::debug!("retraining target on {} users", self.y.user_count());
            self.model = train_mf(&self.y, &self.cfg.mf)?;
            self.dirty = false;
        }
        Ok(())
    }

    fn cooc_term(&self, u: UserId, v: ItemId) -> f64 {
        if self.fake_cooc.is_empty() {
            return 0.0;
        }
        let pv = self.popularity[v.index()] as f64;
        let mut sum = 0.0;
        for &w in self.y.items_of(u) {
            if w == v {
                continue;
            }
            let key = if w < v { (w, v) } else { (v, w) };
            if let Some(&c) = self.fake_cooc.get(&key) {
                let pw = self.popularity[w.index()] as f64;
                sum += c as f64 / (pw * pv).sqrt();
            }
        }
        self.cfg.lambda * sum
    }

    /// Target-model score of an original user for an item.
    pub fn score(&mut self, u: UserId, v: ItemId) -> Result<f64> {
        self.refresh()?;
        Ok(self.score_fresh(u, v))
    }

    fn score_fresh(&self, u: UserId, v: ItemId) -> f64 {
        let base = self.model.score(u, v);
        match self.cfg.mode {
            EnvMode::Poison => base,
            EnvMode::Evasion => base + self.cooc_term(u, v),
        }
    }

    /// Candidate list of `u` ordered by the current target.
    pub fn ranked_candidates(&mut self, u: UserId) -> Result<Vec<ItemId>> {
        self.refresh()?;
        let list = self.candidate_list(u)?;
        let mut scored: Vec<(ItemId, f64)> = list.iter().map(|&v| (v, self.score_fresh(u, v))).collect();
        rank_items(&mut scored);
        Ok(scored.into_iter().map(|(v, _)| v).collect())
    }

    pub fn top_k(&mut self, u: UserId, k: usize) -> Result<Vec<ItemId>> {
        let mut ranked = self.ranked_candidates(u)?;
        ranked.truncate(k);
        Ok(ranked)
    }

    fn candidate_list(&self, u: UserId) -> Result<&[ItemId]> {
        let list = self
            .candidates
            .get(&u)
            .ok_or_else(|| Error::Config(format!("user {u} has no candidate list")))?;
        if list.binary_search(&self.target).is_err() {
            return Err(Error::Config(format!("target {} missing from candidates of user {u}", self.target)));
        }
        Ok(list)
    }

    /// 1-based rank of the target within `u`'s candidate list.
    pub fn target_rank(&mut self, u: UserId) -> Result<usize> {
        self.refresh()?;
        let list = self.candidate_list(u)?;
        let s = self.score_fresh(u, self.target);
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("target score for user {u}")));
        }
        let ahead = list
            .iter()
            .filter(|&&v| v != self.target)
            .filter(|&&v| {
                let sv = self.score_fresh(u, v);
                sv > s || (sv == s && v < self.target)
            })
            .count();
        Ok(ahead + 1)
    }

    pub fn evaluate(&mut self, users: &[UserId], k: usize) -> Result<RankMetrics> {
        let ranks = users
            .iter()
            .map(|&u| self.target_rank(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_metrics(&ranks, k))
    }

    /// HR@k and NDCG@k over the held-out normal users.
    pub fn evaluate_normal(&mut self, k: usize) -> Result<RankMetrics> {
        let users = self.normal.clone();
        self.evaluate(&users, k)
    }

    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.y.write_tsv(&dir.join("interactions.tsv"))?;
        self.model.save(&dir.join("model.ckpt"))?;
        let state = EnvState {
            cfg: self.cfg.clone(),
            target: self.target,
            spies: self.spies.clone(),
            normal: self.normal.clone(),
            candidates: self.candidates.clone(),
            original_users: self.y.original_users(),
            queries: self.queries,
            dirty: self.dirty,
        };
        fs::write(dir.join("env.json"), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let state: EnvState = serde_json::from_slice(&fs::read(dir.join("env.json"))?)?;
        let model = MfModel::load(&dir.join("model.ckpt"))?;
        let rows = read_rows(&dir.join("interactions.tsv"), 2)?;
        let parse = |line: usize, s: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Parse {
                path: dir.join("interactions.tsv"),
                line,
                message: format!("`{s}` is not a dense id"),
            })
        };
        let mut pairs = Vec::with_capacity(rows.len());
        let mut users = 0usize;
        for (line, f) in &rows {
            let (u, v) = (parse(*line, &f[0])?, parse(*line, &f[1])?);
            users = users.max(u as usize + 1);
            pairs.push((UserId(u), ItemId(v)));
        }
        let users = users.max(state.original_users);
        let mut all = InteractionMatrix::new(users, model.item_count(), pairs)?;
        all.original_users = state.original_users;
        let mut env = Self {
            popularity: vec![0; all.item_count()],
            y: InteractionMatrix {
                rows: all.rows[..state.original_users].to_vec(),
                item_count: all.item_count,
                original_users: state.original_users,
            },
            cfg: state.cfg,
            model,
            target: state.target,
            spies: state.spies,
            normal: state.normal,
            candidates: state.candidates,
            fake_cooc: HashMap::new(),
            queries: state.queries,
            dirty: state.dirty,
        };
        env.popularity = env.y.popularity();
        for row in &all.rows[state.original_users..] {
            env.record_injection(row)?;
        }
        Ok(env)
    }

    fn record_injection(&mut self, items: &[ItemId]) -> Result<()> {
        self.y.append_user(items)?;
        let row = self.y.items_of(UserId::from(self.y.user_count() - 1)).to_vec();
        for (i, &a) in row.iter().enumerate() {
            self.popularity[a.index()] += 1;
            for &b in &row[i + 1..] {
                *self.fake_cooc.entry((a, b)).or_insert(0) += 1;
            }
        }
        Ok(())
    }
}

impl BlackBoxTarget for RecommenderEnv {
    fn item_count(&self) -> usize {
        self.y.item_count()
    }

    fn remaining_budget(&self) -> usize {
        self.cfg.budget.saturating_sub(self.injected())
    }

    fn inject(&mut self, profiles: &[FakeProfile]) -> Result<()> {
        if profiles.len() > self.remaining_budget() {
            return Err(Error::Budget {
                requested: profiles.len(),
                remaining: self.remaining_budget(),
            });
        }
        if let Some(p) = profiles.iter().find(|p| p.len() > self.cfg.max_profile_len) {
            return Err(Error::Validation(format!(
                "profile of {} items exceeds the limit of {}",
                p.len(),
                self.cfg.max_profile_len
            )));
        }
        for p in profiles {
            self.record_injection(p.items())?;
        }
        if self.cfg.mode == EnvMode::Poison && !profiles.is_empty() {
            self.dirty = true;
        }
        Ok(())
    }

    fn query_reward(&mut self) -> Result<RewardRecord> {
        let k = self.cfg.k;
        let spies = self.spies.clone();
        let hits = spies
            .iter()
            .map(|&u| Ok(self.target_rank(u)? <= k))
            .collect::<Result<Vec<bool>>>()?;
        let reward = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
        self.queries += 1;
        Ok(RewardRecord {
            step: self.queries,
            reward,
            hits,
        })
    }
}

/// Picks a seeded random item with fewer than `max_popularity` interactions, or the least popular one.
pub fn pick_target<R: Rng + ?Sized>(y: &InteractionMatrix, max_popularity: u32, rng: &mut R) -> Result<ItemId> {
    if y.item_count() == 0 {
        return Err(Error::Validation("no items to target".into()));
    }
    let pop = y.popularity();
    let cold: Vec<ItemId> = (0..y.item_count())
        .map(ItemId::from)
        .filter(|v| pop[v.index()] < max_popularity)
        .collect();
    if let Some(&v) = cold.as_slice().choose(rng) {
        return Ok(v);
    }
    let v = (0..y.item_count()).min_by_key(|&i| (pop[i], i)).expect("non-empty");
    Ok(ItemId::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> InteractionMatrix {
        InteractionMatrix::new(2, 2, [(UserId(0), ItemId(0)), (UserId(1), ItemId(1))]).unwrap()
    }

    #[test]
    fn mf_separates_two_users() {
        for seed in 0..5 {
            let cfg = MfConfig {
                dim: 4,
                epochs: 200,
                seed,
                ..MfConfig::default()
            };
            let m = train_mf(&two_by_two(), &cfg).unwrap();
            assert!(m.score(UserId(0), ItemId(0)) > m.score(UserId(0), ItemId(1)), "seed {seed}");
            assert!(m.score(UserId(1), ItemId(1)) > m.score(UserId(1), ItemId(0)), "seed {seed}");
        }
    }

    #[test]
    fn mf_is_deterministic_and_zero_init_is_flat() {
        let y = two_by_two();
        let cfg = MfConfig::default();
        assert_eq!(train_mf(&y, &cfg).unwrap(), train_mf(&y, &cfg).unwrap());
        let flat = train_mf(
            &y,
            &MfConfig {
                epochs: 0,
                init_scale: 0.0,
                ..cfg
            },
        )
        .unwrap();
        let s = flat.score(UserId(0), ItemId(0));
        for u in 0..2 {
            for v in 0..2 {
                assert_eq!(flat.score(UserId(u), ItemId(v)), s);
            }
        }
    }

    #[test]
    fn empty_matrix_rejected() {
        let y = InteractionMatrix::new(2, 2, []).unwrap();
        assert!(train_mf(&y, &MfConfig::default()).is_err());
    }

    #[test]
    fn fold_in_of_singleton_is_the_item_factor() {
        let m = MfModel::from_factors(vec![0.0; 2], vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m.fold_in(&[ItemId(1)]), vec![3.0, 4.0]);
        assert_eq!(m.fold_in(&[ItemId(0), ItemId(1)]), vec![2.0, 3.0]);
    }

    #[test]
    fn ndcg_hand_example() {
        let ranks = [3, 3, 3, 3, 101, 101, 101, 101];
        let m = rank_metrics(&ranks, 20);
        assert_eq!(m.hr, 0.5);
        assert_eq!(m.ndcg, 0.25);
        assert_eq!(rank_metrics(&[1, 1, 1], 20), RankMetrics { hr: 1.0, ndcg: 1.0 });
        assert_eq!(rank_metrics(&[21, 21], 20), RankMetrics { hr: 0.0, ndcg: 0.0 });
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let mut s = vec![(ItemId(5), 1.0), (ItemId(2), 1.0), (ItemId(9), 2.0)];
        rank_items(&mut s);
        assert_eq!(s.iter().map(|p| p.0 .0).collect::<Vec<_>>(), vec![9, 2, 5]);
    }

    #[test]
    fn append_keeps_original_rows() {
        let mut y = two_by_two();
        let before = y.clone();
        y.append_user(&[ItemId(1), ItemId(0)]).unwrap();
        assert_eq!(y.user_count(), 3);
        assert_eq!(y.original_users(), 2);
        for u in 0..2 {
            assert_eq!(y.items_of(UserId(u)), before.items_of(UserId(u)));
        }
        assert!(y.append_user(&[ItemId(2)]).is_err());
    }
}
