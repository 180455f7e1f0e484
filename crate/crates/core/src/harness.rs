//! Experiment configuration, synthetic data, and the attack-vs-baseline runner.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{generate_baseline_profile, BaselineKind};
use crate::env::{pick_target, load_interactions, BlackBoxTarget, EnvConfig, EnvMode, InteractionMatrix, MfConfig, RankMetrics, RecommenderEnv};
use crate::error::{Error, Result};
use crate::ids::{EntityId, ItemId, UserId, Vocab};
use crate::kg::{load_kg, KnowledgeGraph, Triple};
use crate::trainer::{rollout_rng, run_attack, AttackContext, EpisodeMetrics, TrainConfig};
use crate::transe::{pretrain, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_count: usize,
    pub non_item_entity_count: usize,
    pub relation_count: usize,
    pub interactions_per_user: usize,
    pub kg_triples_per_item: usize,
    pub cluster_count: usize,
    /// Share of a user's interactions drawn from the preferred cluster.
    pub in_cluster_rate: f64,
    /// Chance that a non-hub attribute link leaves the item's cluster.
    pub cross_cluster_rate: f64,
    /// Zipf exponent of within-cluster item popularity.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            user_count: 500,
            item_count: 200,
            non_item_entity_count: 400,
            relation_count: 4,
            interactions_per_user: 10,
            kg_triples_per_item: 3,
            cluster_count: 5,
            in_cluster_rate: 0.8,
            cross_cluster_rate: 0.1,
            popularity_skew: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.user_count == 0
            || self.item_count == 0
            || self.non_item_entity_count == 0
            || self.relation_count == 0
            || self.interactions_per_user == 0
            || self.kg_triples_per_item == 0
            || self.cluster_count == 0
        {
            return fail("all counts must be positive");
        }
        if self.cluster_count > self.item_count {
            return fail("more clusters than items");
        }
        if self.cluster_count > self.non_item_entity_count {
            return fail("every cluster needs its own attribute entity");
        }
        if self.interactions_per_user >= self.item_count {
            return fail("users must leave some items uninteracted");
        }
        for (name, v) in [
            ("in_cluster_rate", self.in_cluster_rate),
            ("cross_cluster_rate", self.cross_cluster_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} outside [0, 1]"));
            }
        }
        if !(self.popularity_skew >= 0.0) {
            return fail("popularity_skew must be non-negative");
        }
        Ok(())
    }
}

/// Generated interactions and knowledge graph with dense ids.
///
/// Items `0..n` are entities `0..n`; entity `n + c` is the hub attribute of cluster `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub interactions: Vec<(UserId, ItemId)>,
    pub triples: Vec<Triple>,
    pub item_cluster: Vec<usize>,
    pub user_cluster: Vec<usize>,
    /// Whether each interaction came from the in-cluster component.
    pub in_cluster: Vec<bool>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, c) = (spec.item_count, spec.cluster_count);
    let item_cluster: Vec<usize> = (0..n).map(|i| i % c).collect();
    let members: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..n).filter(|&i| item_cluster[i] == k).collect())
        .collect();
    let weights: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let mut ranks: Vec<usize> = (0..m.len()).collect();
            ranks.shuffle(&mut rng);
            let w: Vec<f64> = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(spec.popularity_skew)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let r = spec.relation_count;
    let hub = |k: usize| (n + k) as u32;
    let extra: Vec<usize> = (c..spec.non_item_entity_count).collect();
    let mut triples = Vec::with_capacity(2 * n * spec.kg_triples_per_item);
    for i in 0..n {
        let k = item_cluster[i];
        let mut link = |rel: usize, attr: u32| {
            triples.push(Triple::new(i as u32, rel as u32, attr));
            triples.push(Triple::new(attr, (r + rel) as u32, i as u32));
        };
        link(0, hub(k));
        for _ in 1..spec.kg_triples_per_item {
            let own: Vec<usize> = extra.iter().copied().filter(|a| (a - c) % c == k).collect();
            let attr = if extra.is_empty() {
                hub(k)
            } else if own.is_empty() || rng.gen_bool(spec.cross_cluster_rate) {
                (n + extra[rng.gen_range(0..extra.len())]) as u32
            } else {
                (n + own[rng.gen_range(0..own.len())]) as u32
            };
            let rel = if r > 1 { rng.gen_range(1..r) } else { 0 };
            link(rel, attr);
        }
    }

    let mut interactions = Vec::with_capacity(spec.user_count * spec.interactions_per_user);
    let mut in_cluster = Vec::with_capacity(interactions.capacity());
    let mut user_cluster = Vec::with_capacity(spec.user_count);
    for u in 0..spec.user_count {
        let k = rng.gen_range(0..c);
        user_cluster.push(k);
        let outside: Vec<usize> = (0..n).filter(|&i| item_cluster[i] != k).collect();
        let mut chosen: Vec<usize> = Vec::with_capacity(spec.interactions_per_user);
        while chosen.len() < spec.interactions_per_user {
            let inside = outside.is_empty() || rng.gen_bool(spec.in_cluster_rate);
            let mut pick = None;
            for _ in 0..100 {
                let cand = if inside {
                    members[k][weights[k].sample(&mut rng)]
                } else {
                    outside[rng.gen_range(0..outside.len())]
                };
                if !chosen.contains(&cand) {
                    pick = Some(cand);
                    break;
                }
            }
            let item = match pick {
                Some(i) => i,
                None => {
                    let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                    rest[rng.gen_range(0..rest.len())]
                }
            };
            chosen.push(item);
            in_cluster.push(item_cluster[item] == k);
            interactions.push((UserId::from(u), ItemId::from(item)));
        }
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        interactions,
        triples,
        item_cluster,
        user_cluster,
        in_cluster,
    })
}

impl SyntheticData {
    pub fn entity_count(&self) -> usize {
        self.spec.item_count + self.spec.non_item_entity_count
    }

    pub fn relation_count(&self) -> usize {
        2 * self.spec.relation_count
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let map = (0..self.spec.item_count).map(|i| Some(EntityId::from(i))).collect();
        let (graph, _) = KnowledgeGraph::from_triples(self.entity_count(), self.relation_count(), self.triples.clone(), map)?;
        let interactions = InteractionMatrix::new(self.spec.user_count, self.spec.item_count, self.interactions.iter().copied())?;
        Ok(Dataset { graph, interactions })
    }

    /// Writes `interactions.tsv`, `triples.tsv` and `item_map.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DataFiles> {
        fs::create_dir_all(dir)?;
        let files = DataFiles {
            interactions: dir.join("interactions.tsv"),
            triples: dir.join("triples.tsv"),
            item_map: dir.join("item_map.tsv"),
        };
        let mut out = std::io::BufWriter::new(fs::File::create(&files.interactions)?);
        writeln!(out, "# user\titem")?;
        for (u, v) in &self.interactions {
            writeln!(out, "{u}\t{v}")?;
        }
        out.flush()?;
        let mut out = std::io::BufWriter::new(fs::File::create(&files.triples)?);
        writeln!(out, "# head\trelation\ttail")?;
        for t in &self.triples {
            writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        out.flush()?;
        let mut out = std::io::BufWriter::new(fs::File::create(&files.item_map)?);
        writeln!(out, "# item\tentity")?;
        for i in 0..self.spec.item_count {
            writeln!(out, "{i}\t{i}")?;
        }
        out.flush()?;
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub interactions: PathBuf,
    pub triples: PathBuf,
    pub item_map: PathBuf,
}

/// Where interactions and the KG come from: exactly one of the two.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub files: Option<DataFiles>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub interactions: InteractionMatrix,
}

impl Dataset {
    pub fn load(files: &DataFiles) -> Result<Self> {
        let mut items = Vocab::new();
        let mut users = Vocab::new();
        let (graph, _) = load_kg(&files.triples, &files.item_map, &mut items)?;
        let interactions = load_interactions(&files.interactions, &mut users, &mut items)?;
        Ok(Self { graph, interactions })
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.files) {
            (Some(s), None) => s.validate(),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Config("data needs exactly one of `synthetic` or `files`".into())),
        }
    }

    pub fn build(&self) -> Result<Dataset> {
        self.validate()?;
        match (&self.synthetic, &self.files) {
            (Some(spec), _) => generate_synthetic(spec)?.dataset(),
            (_, Some(files)) => Dataset::load(files),
            _ => unreachable!("validated"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub mode: EnvMode,
    pub mf: MfConfig,
    pub lambda: f64,
    /// Treat KG edges as undirected for hops and aggregation.
    pub undirected_kg: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            mode: env.mode,
            mf: env.mf,
            lambda: env.lambda,
            undirected_kg: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub spy_users: usize,
    pub normal_users: usize,
    pub candidates: usize,
    pub ks: Vec<usize>,
    /// Targets are drawn among items with fewer interactions than this.
    pub target_max_popularity: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            spy_users: env.spy_users,
            normal_users: env.normal_users,
            candidates: env.candidates,
            ks: vec![10, 20],
            target_max_popularity: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    #[default]
    Kgattack,
    RandomAttack,
    TargetAttack,
    TargetAttackKg,
}

impl AttackerKind {
    pub const ALL: [AttackerKind; 4] = [Self::Kgattack, Self::RandomAttack, Self::TargetAttack, Self::TargetAttackKg];

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Kgattack => None,
            Self::RandomAttack => Some(BaselineKind::RandomAttack),
            Self::TargetAttack => Some(BaselineKind::TargetAttack),
            Self::TargetAttackKg => Some(BaselineKind::TargetAttackKg),
        }
    }
}

impl fmt::Display for AttackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.baseline() {
            None => f.write_str("KGAttack"),
            Some(b) => b.fmt(f),
        }
    }
}

impl FromStr for AttackerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("kgattack") {
            return Ok(Self::Kgattack);
        }
        let b: BaselineKind = s.parse()?;
        Ok(match b {
            BaselineKind::RandomAttack => Self::RandomAttack,
            BaselineKind::TargetAttack => Self::TargetAttack,
            BaselineKind::TargetAttackKg => Self::TargetAttackKg,
        })
    }
}

pub const WITHOUT_ATTACK: &str = "WithoutAttack";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub attack: TrainConfig,
    #[serde(default)]
    pub attacker: AttackerKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Defaults everywhere, with the given data source.
    pub fn with_data(data: DataConfig) -> Self {
        Self {
            name: default_name(),
            data,
            target: TargetConfig::default(),
            protocol: ProtocolConfig::default(),
            pretrain: PretrainConfig::default(),
            attack: TrainConfig::default(),
            attacker: AttackerKind::default(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(files), Some(base)) = (cfg.data.files.as_mut(), path.parent()) {
            for p in [&mut files.interactions, &mut files.triples, &mut files.item_map] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.attack.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.protocol.ks.is_empty() || self.protocol.ks.iter().any(|&k| k == 0 || k > self.protocol.candidates + 1) {
            return Err(Error::Config(format!(
                "cutoffs {:?} must lie in 1..={}",
                self.protocol.ks,
                self.protocol.candidates + 1
            )));
        }
        if self.pretrain.margin < 0.0 || self.pretrain.dim == 0 {
            return Err(Error::Config("pretrain needs a positive dim and non-negative margin".into()));
        }
        Ok(())
    }

    /// Short content hash of the fully defaulted configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn env_config(&self, seed: u64) -> EnvConfig {
        EnvConfig {
            mode: self.target.mode,
            mf: MfConfig {
                seed,
                ..self.target.mf.clone()
            },
            lambda: self.target.lambda,
            spy_users: self.protocol.spy_users,
            normal_users: self.protocol.normal_users,
            candidates: self.protocol.candidates,
            k: self.attack.k,
            budget: self.attack.budget,
            max_profile_len: self.attack.profile_items(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub attacker: String,
    /// `None` marks the median aggregate over seeds.
    pub seed: Option<u64>,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub budget_used: usize,
    pub wallclock_seconds: f64,
}

pub const RESULT_HEADER: &str = "attacker,seed,k,HR,NDCG,budget_used,wallclock_seconds";

impl ResultRow {
    pub fn csv_row(&self) -> String {
        let seed = self.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.attacker, seed, self.k, self.hr, self.ndcg, self.budget_used, self.wallclock_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub seed: u64,
    pub attacker: AttackerKind,
    pub target: ItemId,
    pub without: Vec<(usize, RankMetrics)>,
    pub attacked: Vec<(usize, RankMetrics)>,
    pub budget_used: usize,
    pub wallclock_seconds: f64,
    pub trace: Vec<EpisodeMetrics>,
}

/// One (attacker, seed) run on an already built dataset.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, attacker: AttackerKind, seed: u64) -> Result<CellResult> {
    let start = Instant::now();
    let graph = data.graph.clone().with_undirected(cfg.target.undirected_kg);
    let target = pick_target(&data.interactions, cfg.protocol.target_max_popularity, &mut rollout_rng(seed, u64::MAX))
        .map_err(|e| e.in_stage("target selection"))?;
    if graph.entity_of(target).is_none() && attacker != AttackerKind::RandomAttack {
        return Err(Error::UnmappedItem(target.0).in_stage("target selection"));
    }
    let mut env = RecommenderEnv::new(data.interactions.clone(), target, cfg.env_config(seed))
        .map_err(|e| e.in_stage("environment"))?;
    let evaluate = |env: &mut RecommenderEnv| -> Result<Vec<(usize, RankMetrics)>> {
        cfg.protocol
            .ks
            .iter()
            .map(|&k| Ok((k, env.evaluate_normal(k)?)))
            .collect::<Result<_>>()
            .map_err(|e: Error| e.in_stage("evaluation"))
    };
    let without = evaluate(&mut env)?;
    let train = TrainConfig {
        seed,
        ..cfg.attack.clone()
    };
    let trace = match attacker.baseline() {
        None => {
            let pre = PretrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            let emb = pretrain(&graph, &pre).map_err(|e| e.in_stage("pretrain"))?.embeddings;
            let ctx = AttackContext {
                graph: &graph,
                embeddings: &emb,
                target,
            };
            run_attack(&mut env, &ctx, &train).map_err(|e| e.in_stage("attack"))?.trace
        }
        Some(kind) => run_baseline_trace(&mut env, kind, &graph, &train).map_err(|e| e.in_stage("attack"))?,
    };
    let attacked = evaluate(&mut env)?;
    Ok(CellResult {
        seed,
        attacker,
        target,
        without,
        attacked,
        budget_used: env.injected(),
        wallclock_seconds: start.elapsed().as_secs_f64(),
        trace,
    })
}

/// Baseline attack with the same batch cadence and per-batch metrics as the learned attacker.
fn run_baseline_trace(env: &mut RecommenderEnv, kind: BaselineKind, graph: &KnowledgeGraph, cfg: &TrainConfig) -> Result<Vec<EpisodeMetrics>> {
    cfg.validate()?;
    let mut rng = rollout_rng(cfg.seed, u64::MAX - 1);
    let target = env.target();
    let mut trace = Vec::with_capacity(cfg.episodes());
    for episode in 0..cfg.episodes() {
        let profiles = (0..cfg.profiles_per_episode)
            .map(|_| generate_baseline_profile(kind, target, graph, env.item_count(), cfg.profile_items(), cfg.hops, cfg.pool_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        env.inject(&profiles)?;
        let reward = env.query_reward()?;
        let eval = env.evaluate_normal(cfg.k)?;
        trace.push(EpisodeMetrics {
            episode,
            reward: reward.reward,
            hr: eval.hr,
            ndcg: eval.ndcg,
            critic_loss: 0.0,
            anchor_obj: 0.0,
            item_obj: 0.0,
            fallback_count: 0,
        });
    }
    Ok(trace)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn rows_for(&self, attacker: &str, k: usize) -> impl Iterator<Item = &ResultRow> {
        let attacker = attacker.to_string();
        self.rows.iter().filter(move |r| r.attacker == attacker && r.k == k)
    }

    pub fn aggregate(&self, attacker: &str, k: usize) -> Option<&ResultRow> {
        self.rows_for(attacker, k).find(|r| r.seed.is_none())
    }

    /// `results.csv` plus one per-episode metrics file per seed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join("results.csv"))?);
        writeln!(out, "# config {}", self.config_hash)?;
        writeln!(out, "{RESULT_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_row())?;
        }
        out.flush()?;
        for cell in &self.cells {
            let name = format!("metrics_{}_seed{}.csv", cell.attacker.to_string().to_lowercase(), cell.seed);
            crate::trainer::write_metrics(&dir.join(name), &cell.trace, &self.config_hash)?;
        }
        Ok(())
    }
}

fn summarise(cells: Vec<CellResult>, ks: &[usize], config_hash: String) -> ExperimentResult {
    let mut rows = Vec::new();
    for c in &cells {
        for &(k, m) in &c.without {
            rows.push(ResultRow {
                attacker: WITHOUT_ATTACK.into(),
                seed: Some(c.seed),
                k,
                hr: m.hr,
                ndcg: m.ndcg,
                budget_used: 0,
                wallclock_seconds: 0.0,
            });
        }
        for &(k, m) in &c.attacked {
            rows.push(ResultRow {
                attacker: c.attacker.to_string(),
                seed: Some(c.seed),
                k,
                hr: m.hr,
                ndcg: m.ndcg,
                budget_used: c.budget_used,
                wallclock_seconds: c.wallclock_seconds,
            });
        }
    }
    let mut names: Vec<String> = vec![WITHOUT_ATTACK.into()];
    for c in &cells {
        let n = c.attacker.to_string();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    let mut aggregates = Vec::new();
    for name in &names {
        for &k in ks {
            let per_seed: Vec<&ResultRow> = rows.iter().filter(|r| &r.attacker == name && r.k == k).collect();
            if per_seed.is_empty() {
                continue;
            }
            let col = |f: fn(&ResultRow) -> f64| median(&per_seed.iter().map(|r| f(r)).collect::<Vec<_>>());
            aggregates.push(ResultRow {
                attacker: name.clone(),
                seed: None,
                k,
                hr: col(|r| r.hr),
                ndcg: col(|r| r.ndcg),
                budget_used: per_seed.iter().map(|r| r.budget_used).max().unwrap_or(0),
                wallclock_seconds: col(|r| r.wallclock_seconds),
            });
        }
    }
    rows.extend(aggregates);
    ExperimentResult {
        config_hash,
        rows,
        cells,
    }
}

/// Runs the configured attacker over every seed; results are not written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let data = cfg.data.build().map_err(|e| e.in_stage("data"))?;
    run_experiment_on(cfg, &data, &[cfg.attacker])
}

/// Several attackers on one dataset, sharing seeds.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset, attackers: &[AttackerKind]) -> Result<ExperimentResult> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let mut cells = Vec::new();
    for &attacker in attackers {
        for &seed in &cfg.seeds {
            log::info!("{attacker} seed {seed}");
            cells.push(run_cell(cfg, data, attacker, seed)?);
        }
    }
    Ok(summarise(cells, &cfg.protocol.ks, cfg.hash()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    Hops,
    Budget,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            Self::Epsilon => "epsilon",
            Self::Hops => "H",
            Self::Budget => "budget",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Epsilon => vec![0.1, 0.3, 0.5, 0.7, 0.9],
            Self::Hops => vec![1.0, 2.0, 3.0, 4.0],
            Self::Budget => vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0],
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) -> Result<()> {
        let whole = || -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} value {v} must be a non-negative integer", self.label())))
            }
        };
        match self {
            Self::Epsilon => cfg.attack.epsilon = v,
            Self::Hops => cfg.attack.hops = whole()?,
            Self::Budget => cfg.attack.budget = whole()?,
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" | "anchor_ratio" => Ok(Self::Epsilon),
            "h" | "hops" => Ok(Self::Hops),
            "budget" | "delta" => Ok(Self::Budget),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// One aggregate value per swept setting, plus the matching no-attack baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub dataset: String,
    pub k: usize,
    pub values: Vec<f64>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub without_hr: Vec<f64>,
    pub without_ndcg: Vec<f64>,
}

impl SweepTable {
    /// Axis values across the header, one HR@k row for the dataset.
    pub fn render(&self) -> String {
        let mut s = self.axis.label().to_string();
        for v in &self.values {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
        s.push_str(&self.dataset);
        for v in &self.hr {
            s.push_str(&format!(",{v:.3}"));
        }
        s.push('\n');
        s
    }

    /// Long form: one line per setting with both metrics and the no-attack reference.
    pub fn render_long(&self) -> String {
        let mut s = format!("{},k,HR,NDCG,without_HR,without_NDCG\n", self.axis.label());
        for i in 0..self.values.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.values[i], self.k, self.hr[i], self.ndcg[i], self.without_hr[i], self.without_ndcg[i]
            ));
        }
        s
    }
}

pub fn ablation_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepTable> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let data = cfg.data.build().map_err(|e| e.in_stage("data"))?;
    let k = cfg.attack.k;
    let mut table = SweepTable {
        axis,
        dataset: cfg.name.clone(),
        k,
        values: values.to_vec(),
        hr: Vec::new(),
        ndcg: Vec::new(),
        without_hr: Vec::new(),
        without_ndcg: Vec::new(),
    };
    for &v in values {
        let mut c = cfg.clone();
        axis.apply(&mut c, v).map_err(|e| e.in_stage("sweep"))?;
        if !c.protocol.ks.contains(&k) {
            c.protocol.ks.push(k);
        }
        let result = run_experiment_on(&c, &data, &[c.attacker])?;
        let name = c.attacker.to_string();
        let agg = result.aggregate(&name, k).expect("aggregate row");
        let base = result.aggregate(WITHOUT_ATTACK, k).expect("aggregate row");
        table.hr.push(agg.hr);
        table.ndcg.push(agg.ndcg);
        table.without_hr.push(base.hr);
        table.without_ndcg.push(base.ndcg);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn attacker_names_parse() {
        for a in AttackerKind::ALL {
            assert_eq!(a.to_string().parse::<AttackerKind>().unwrap(), a);
        }
    }

    #[test]
    fn config_requires_a_data_source() {
        assert!(ExperimentConfig::from_toml("seeds = [1]").is_err());
        let cfg = ExperimentConfig::from_toml("[data.synthetic]\nuser_count = 300\n").unwrap();
        assert_eq!(cfg.data.synthetic.unwrap().user_count, 300);
        assert!(ExperimentConfig::from_toml("[data.synthetic]\nusers = 3\n").is_err());
    }

    #[test]
    fn single_cluster_is_two_hop_connected() {
        let spec = SyntheticSpec {
            cluster_count: 1,
            item_count: 30,
            non_item_entity_count: 10,
            user_count: 20,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap().dataset().unwrap();
        for i in 0..30u32 {
            assert_eq!(data.graph.candidate_set(ItemId(i), 2).unwrap().len(), 29);
        }
    }
}
