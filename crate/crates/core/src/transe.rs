//! TransE pretraining of entity and relation embeddings.
//!
//! A triple `(p, r, q)` is plausible when `p + r ≈ q`. Training minimises the
//! margin ranking loss `Σ [d(p + r, q) + margin − d(p' + r, q')]₊` over pairs of
//! observed and corrupted triples, with entity rows projected back onto the
//! unit sphere after every update.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{EntityId, RelationId};
use crate::kg::{KnowledgeGraph, Triple};
use crate::numeric::{checkpoint, AdamConfig, ParamId, ParameterSet, Tensor};

const MAX_CORRUPTION_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

/// Entity and relation embedding tables, one row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbeddings {
    entities: Tensor,
    relations: Tensor,
}

impl KgEmbeddings {
    pub fn new(entities: Tensor, relations: Tensor) -> Result<Self> {
        if !entities.is_matrix() || !relations.is_matrix() || entities.cols() != relations.cols() {
            return Err(Error::shape(
                "embeddings",
                format!("{:?} / {:?}", entities.shape(), relations.shape()),
            ));
        }
        Ok(Self {
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.rows()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.rows()
    }

    pub fn entity(&self, e: EntityId) -> &[f64] {
        self.entities.row(e.index())
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        self.relations.row(r.index())
    }

    pub fn entity_table(&self) -> &Tensor {
        &self.entities
    }

    pub fn relation_table(&self) -> &Tensor {
        &self.relations
    }

    pub fn all_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }

    fn check(&self, t: &Triple) -> Result<()> {
        if t.head.index() >= self.entity_count() {
            return Err(Error::UnknownEntity(t.head.0));
        }
        if t.tail.index() >= self.entity_count() {
            return Err(Error::UnknownEntity(t.tail.0));
        }
        if t.relation.index() >= self.relation_count() {
            return Err(Error::Validation(format!("unknown relation {}", t.relation)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &[("entities", &self.entities), ("relations", &self.relations)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tensors = checkpoint::load(path)?;
        let take = |tensors: &mut Vec<(String, Tensor)>, name: &str| {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            Ok::<_, Error>(tensors.remove(pos).1)
        };
        let entities = take(&mut tensors, "entities")?;
        let relations = take(&mut tensors, "relations")?;
        Self::new(entities, relations)
    }
}

/// `p + r − q`.
fn translation_residual(emb: &KgEmbeddings, t: &Triple) -> Vec<f64> {
    let (p, r, q) = (emb.entity(t.head), emb.relation(t.relation), emb.entity(t.tail));
    p.iter().zip(r).zip(q).map(|((a, b), c)| a + b - c).collect()
}

fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// `d(p + r, q)` under the chosen norm.
pub fn transe_score(emb: &KgEmbeddings, t: &Triple, norm: Norm) -> Result<f64> {
    emb.check(t)?;
    Ok(norm_of(&translation_residual(emb, t), norm))
}

/// Margin ranking loss summed over paired positive/negative triples.
pub fn transe_loss(
    emb: &KgEmbeddings,
    positives: &[Triple],
    negatives: &[Triple],
    margin: f64,
    norm: Norm,
) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    if positives.len() != negatives.len() {
        return Err(Error::Config(format!(
            "{} positives paired with {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let mut total = 0.0;
    for (pos, neg) in positives.iter().zip(negatives) {
        let d_pos = transe_score(emb, pos, norm)?;
        let d_neg = transe_score(emb, neg, norm)?;
        total += (d_pos + margin - d_neg).max(0.0);
    }
    Ok(total)
}

/// Corrupts head or tail of observed triples, avoiding triples present in the graph.
#[derive(Clone, Debug, Default)]
pub struct NegativeSampler {
    /// Times the retry budget ran out and a known-positive triple was returned.
    pub exhausted: usize,
    pub head_corruptions: usize,
    pub tail_corruptions: usize,
}

impl NegativeSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, g: &KnowledgeGraph, t: &Triple, rng: &mut R) -> Triple {
        let n = g.entity_count();
        let corrupt_head = rng.gen_bool(0.5);
        if corrupt_head {
            self.head_corruptions += 1;
        } else {
            self.tail_corruptions += 1;
        }
        let mut candidate = *t;
        for _ in 0..MAX_CORRUPTION_TRIES {
            let e = EntityId::from(rng.gen_range(0..n));
            candidate = if corrupt_head {
                Triple { head: e, ..*t }
            } else {
                Triple { tail: e, ..*t }
            };
            if !g.contains(&candidate) {
                return candidate;
            }
        }
        self.exhausted += 1;
        log::warn!("negative sampling exhausted retries for {t:?}");
        candidate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub norm: Norm,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 200,
            lr: 0.01,
            margin: 1.0,
            norm: Norm::L2,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub embeddings: KgEmbeddings,
    /// Summed training loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub sampler: NegativeSampler,
}

fn normalize_rows(t: &mut Tensor) {
    let cols = t.cols();
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Subgradient of `norm(v)` with respect to `v`.
fn norm_grad(v: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L1 => v.iter().map(|x| x.signum() * (*x != 0.0) as u8 as f64).collect(),
        Norm::L2 => {
            let n = norm_of(v, Norm::L2);
            if n < 1e-12 {
                vec![0.0; v.len()]
            } else {
                v.iter().map(|x| x / n).collect()
            }
        }
    }
}

/// Minibatch Adam on the margin loss, renormalising entity rows after each step.
pub fn pretrain(g: &KnowledgeGraph, cfg: &PretrainConfig) -> Result<Pretrained> {
    if g.triples().is_empty() {
        return Err(Error::Validation("cannot pretrain on an empty graph".into()));
    }
    if g.entity_count() < 2 {
        return Err(Error::Validation("negative sampling needs at least two entities".into()));
    }
    if cfg.dim == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("dim, batch and lr must be positive".into()));
    }
    if cfg.margin < 0.0 {
        return Err(Error::Config(format!("margin must be non-negative, got {}", cfg.margin)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut init = |rows: usize| {
        let data = (0..rows * cfg.dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        let mut t = Tensor::matrix(rows, cfg.dim, data).expect("consistent shape");
        normalize_rows(&mut t);
        t
    };
    let entities = init(g.entity_count());
    let relations = init(g.relation_count().max(1));

    let mut params = ParameterSet::new();
    let ent_id = params.add("entities", entities)?;
    let rel_id = params.add("relations", relations)?;
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut sampler = NegativeSampler::new();
    let mut order: Vec<usize> = (0..g.triples().len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let positives: Vec<Triple> = chunk.iter().map(|&i| g.triples()[i]).collect();
            let negatives: Vec<Triple> = positives
                .iter()
                .map(|t| sampler.sample(g, t, &mut rng))
                .collect();
            epoch_loss += accumulate_batch(&mut params, ent_id, rel_id, &positives, &negatives, cfg)?;
            params.adam_step(&adam)?;
            normalize_rows(params.get_mut(ent_id));
        }
        loss_trace.push(epoch_loss);
    }
    let embeddings = KgEmbeddings::new(params.get(ent_id).clone(), params.get(rel_id).clone())?;
    if !embeddings.all_finite() {
        return Err(Error::NonFinite("TransE embeddings".into()));
    }
    Ok(Pretrained {
        embeddings,
        loss_trace,
        sampler,
    })
}

/// Adds the batch loss gradient into `params` and returns the batch loss.
fn accumulate_batch(
    params: &mut ParameterSet,
    ent_id: ParamId,
    rel_id: ParamId,
    positives: &[Triple],
    negatives: &[Triple],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let emb = KgEmbeddings::new(params.get(ent_id).clone(), params.get(rel_id).clone())?;
    let dim = cfg.dim;
    let mut ent_grad = vec![0.0; emb.entity_count() * dim];
    let mut rel_grad = vec![0.0; emb.relation_count() * dim];
    let mut loss = 0.0;
    for (pos, neg) in positives.iter().zip(negatives) {
        let res_pos = translation_residual(&emb, pos);
        let res_neg = translation_residual(&emb, neg);
        let hinge = norm_of(&res_pos, cfg.norm) + cfg.margin - norm_of(&res_neg, cfg.norm);
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        for (t, res, sign) in [(pos, res_pos, 1.0), (neg, res_neg, -1.0)] {
            let gv = norm_grad(&res, cfg.norm);
            for k in 0..dim {
                let g = sign * gv[k];
                ent_grad[t.head.index() * dim + k] += g;
                rel_grad[t.relation.index() * dim + k] += g;
                ent_grad[t.tail.index() * dim + k] -= g;
            }
        }
    }
    for (dst, src) in params.grad_mut(ent_id).iter_mut().zip(&ent_grad) {
        *dst += src;
    }
    for (dst, src) in params.grad_mut(rel_id).iter_mut().zip(&rel_grad) {
        *dst += src;
    }
    Ok(loss)
}

/// Fraction of `triples` whose true tail is the nearest entity to `head + relation`.
pub fn hits_at_1(emb: &KgEmbeddings, triples: &[Triple], norm: Norm) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for t in triples {
        let d_true = transe_score(emb, t, norm)?;
        let beaten = (0..emb.entity_count())
            .map(EntityId::from)
            .filter(|&e| e != t.tail)
            .any(|e| {
                let alt = Triple { tail: e, ..*t };
                transe_score(emb, &alt, norm).map_or(true, |d| d <= d_true)
            });
        if !beaten {
            hits += 1;
        }
    }
    Ok(hits as f64 / triples.len() as f64)
}
