//! Knowledge-enhanced state representation.
//!
//! Item vectors come from `L` rounds of neighbour aggregation over the KG,
//! starting from the pretrained entity embeddings:
//!
//! ```text
//! eˡᵢ  = W₁ˡ eˡ⁻¹ᵢ + W₂ˡ Σⱼ αˡᵢⱼ eˡ⁻¹ⱼ
//! αˡᵢⱼ = softmaxⱼ((W_in eˡ⁻¹ᵢ)ᵀ (W_out eˡ⁻¹ⱼ) / √d)
//! ```
//!
//! and a GRU over the profile's item vectors yields the state vector.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{EntityId, ItemId};
use crate::kg::KnowledgeGraph;
use crate::numeric::{Bound, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::transe::KgEmbeddings;

/// Divisor inside the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√|N(i)|`, the neighbour count of the aggregating entity.
    #[default]
    NeighborCount,
    /// `√d_e`, scaled dot-product convention.
    EmbeddingDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub gnn_layers: usize,
    pub hidden_dim: usize,
    pub attention_scale: AttentionScale,
    pub max_neighbors: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            gnn_layers: 1,
            hidden_dim: 32,
            attention_scale: AttentionScale::NeighborCount,
            max_neighbors: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GnnParams {
    pub set: ParameterSet,
    pub self_weights: Vec<ParamId>,
    pub neighbor_weights: Vec<ParamId>,
    pub w_in: ParamId,
    pub w_out: ParamId,
    dim: usize,
}

impl GnnParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, layers: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 || dim == 0 {
            return Err(Error::Config("GNN needs at least one layer and a positive dim".into()));
        }
        let mut set = ParameterSet::new();
        let mut self_weights = Vec::with_capacity(layers);
        let mut neighbor_weights = Vec::with_capacity(layers);
        for l in 1..=layers {
            self_weights.push(set.add(format!("gnn.w1.{l}"), Tensor::glorot(dim, dim, rng))?);
            neighbor_weights.push(set.add(format!("gnn.w2.{l}"), Tensor::glorot(dim, dim, rng))?);
        }
        let w_in = set.add("gnn.w_in", Tensor::glorot(dim, dim, rng))?;
        let w_out = set.add("gnn.w_out", Tensor::glorot(dim, dim, rng))?;
        Ok(Self {
            set,
            self_weights,
            neighbor_weights,
            w_in,
            w_out,
            dim,
        })
    }

    pub fn layers(&self) -> usize {
        self.self_weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub set: ParameterSet,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_u: ParamId,
    pub u_u: ParamId,
    pub b_u: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    input_dim: usize,
    hidden_dim: usize,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        let mut set = ParameterSet::new();
        let mut gate = |set: &mut ParameterSet, name: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                set.add(format!("gru.w_{name}"), Tensor::glorot(hidden_dim, input_dim, rng))?,
                set.add(format!("gru.u_{name}"), Tensor::glorot(hidden_dim, hidden_dim, rng))?,
                set.add(format!("gru.b_{name}"), Tensor::zeros(&[hidden_dim]))?,
            ))
        };
        let (w_z, u_z, b_z) = gate(&mut set, "z")?;
        let (w_u, u_u, b_u) = gate(&mut set, "u")?;
        let (w_c, u_c, b_c) = gate(&mut set, "c")?;
        Ok(Self {
            set,
            w_z,
            u_z,
            b_z,
            w_u,
            u_u,
            b_u,
            w_c,
            u_c,
            b_c,
            input_dim,
            hidden_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Zero hidden state `h₋₁`.
    pub fn initial_state(&self, tape: &Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.hidden_dim]))
    }

    /// One recurrence step; returns the new hidden state.
    pub fn step(&self, tape: &Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        Ok(self.step_traced(tape, p, x, h)?.h)
    }

    /// One recurrence step with the intermediate gate activations exposed.
    pub fn step_traced(&self, tape: &Tape, p: &Bound, x: Var, h: Var) -> Result<GruStep> {
        let pre = |w: ParamId, u: ParamId, b: ParamId, hh: Var| -> Result<Var> {
            let wx = tape.matvec(p[w], x)?;
            let uh = tape.matvec(p[u], hh)?;
            let s = tape.add(wx, uh)?;
            tape.add(s, p[b])
        };
        let z = tape.sigmoid(pre(self.w_z, self.u_z, self.b_z, h)?);
        let u = tape.sigmoid(pre(self.w_u, self.u_u, self.b_u, h)?);
        let reset_h = tape.hadamard(z, h)?;
        let candidate = tape.tanh(pre(self.w_c, self.u_c, self.b_c, reset_h)?);
        let carry = tape.hadamard(u, h)?;
        let keep = tape.one_minus(u);
        let fresh = tape.hadamard(keep, candidate)?;
        let h_next = tape.add(carry, fresh)?;
        Ok(GruStep {
            reset: z,
            update: u,
            candidate,
            h: h_next,
        })
    }

    /// Runs the recurrence over `inputs` from the zero state; returns every hidden state.
    pub fn run(&self, tape: &Tape, p: &Bound, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut h = self.initial_state(tape);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            if tape.with_value(x, Tensor::len) != self.input_dim {
                return Err(Error::shape(
                    "gru",
                    format!(
                        "input of length {} for W with {} columns",
                        tape.with_value(x, Tensor::len),
                        self.input_dim
                    ),
                ));
            }
            h = self.step(tape, p, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub h: Var,
}

/// Encoded state `x_t` of a profile.
#[derive(Clone, Debug, PartialEq)]
pub struct StateRepr {
    pub vector: Vec<f64>,
    pub profile: Vec<ItemId>,
    pub step: usize,
}

/// Memoising GNN evaluation on one tape.
///
/// Every `(entity, layer)` representation is computed once per tape, so
/// embedding a batch of items shares work across overlapping neighbourhoods.
pub struct GnnForward<'a> {
    tape: &'a Tape,
    graph: &'a KnowledgeGraph,
    emb: &'a KgEmbeddings,
    params: &'a GnnParams,
    bound: &'a Bound,
    cfg: &'a EncoderConfig,
    cache: HashMap<(EntityId, usize), Var>,
    attention: HashMap<(EntityId, usize), Var>,
}

impl<'a> GnnForward<'a> {
    pub fn new(
        tape: &'a Tape,
        graph: &'a KnowledgeGraph,
        emb: &'a KgEmbeddings,
        params: &'a GnnParams,
        bound: &'a Bound,
        cfg: &'a EncoderConfig,
    ) -> Result<Self> {
        if emb.dim() != params.dim() {
            return Err(Error::shape(
                "gnn",
                format!("embedding dim {} vs GNN dim {}", emb.dim(), params.dim()),
            ));
        }
        Ok(Self {
            tape,
            graph,
            emb,
            params,
            bound,
            cfg,
            cache: HashMap::new(),
            attention: HashMap::new(),
        })
    }

    /// Final-layer representation of an item.
    pub fn item(&mut self, item: ItemId) -> Result<Var> {
        let e = self.graph.entity_of(item).ok_or(Error::UnmappedItem(item.0))?;
        self.entity(e, self.params.layers())
    }

    /// Attention weights used when `entity` aggregated at `layer` (1-based), if it had neighbours.
    pub fn attention(&self, entity: EntityId, layer: usize) -> Option<Var> {
        self.attention.get(&(entity, layer)).copied()
    }

    /// Neighbours used for aggregation: all of them, or a seeded uniform subsample.
    pub fn sampled_neighbors(&self, e: EntityId, layer: usize) -> Vec<EntityId> {
        let all = self.graph.neighbors(e);
        if all.len() <= self.cfg.max_neighbors {
            return all.to_vec();
        }
        let seed = self.cfg.seed
            ^ (e.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (layer as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), self.cfg.max_neighbors).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    }

    pub fn entity(&mut self, e: EntityId, layer: usize) -> Result<Var> {
        if e.index() >= self.graph.entity_count() {
            return Err(Error::UnknownEntity(e.0));
        }
        if let Some(&v) = self.cache.get(&(e, layer)) {
            return Ok(v);
        }
        let v = if layer == 0 {
            self.tape.constant(Tensor::vector(self.emb.entity(e).to_vec()))
        } else {
            let tape = self.tape;
            let p = self.bound;
            let w1 = p[self.params.self_weights[layer - 1]];
            let w2 = p[self.params.neighbor_weights[layer - 1]];
            let prev = self.entity(e, layer - 1)?;
            let self_term = tape.matvec(w1, prev)?;
            let neighbors = self.sampled_neighbors(e, layer);
            if neighbors.is_empty() {
                self_term
            } else {
                let rows = neighbors
                    .iter()
                    .map(|&j| self.entity(j, layer - 1))
                    .collect::<Result<Vec<_>>>()?;
                let keys = tape.stack(&rows)?;
                let query = tape.matvec(p[self.params.w_in], prev)?;
                // (W_in e_i)ᵀ (W_out e_j) = (W_outᵀ W_in e_i)ᵀ e_j
                let projected = tape.vecmat(query, p[self.params.w_out])?;
                let scores = tape.matvec(keys, projected)?;
                let divisor = match self.cfg.attention_scale {
                    AttentionScale::NeighborCount => neighbors.len() as f64,
                    AttentionScale::EmbeddingDim => self.params.dim() as f64,
                }
                .sqrt();
                let scaled = tape.scale(scores, 1.0 / divisor);
                let alpha = tape.softmax(scaled)?;
                self.attention.insert((e, layer), alpha);
                let pooled = tape.vecmat(alpha, keys)?;
                let neighbor_term = tape.matvec(w2, pooled)?;
                tape.add(self_term, neighbor_term)?
            }
        };
        self.cache.insert((e, layer), v);
        Ok(v)
    }
}

/// Encoder parameters and configuration.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    pub gnn: GnnParams,
    pub gru: GruParams,
    pub cfg: EncoderConfig,
}

impl StateEncoder {
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let gnn = GnnParams::new(embedding_dim, cfg.gnn_layers, rng)?;
        let gru = GruParams::new(embedding_dim, cfg.hidden_dim, rng)?;
        Ok(Self { gnn, gru, cfg })
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    /// Knowledge-enhanced vector of one item under the current parameters.
    pub fn item_vector(&self, g: &KnowledgeGraph, emb: &KgEmbeddings, item: ItemId) -> Result<Vec<f64>> {
        Ok(self.item_vectors(g, emb, &[item])?.remove(&item).expect("requested item"))
    }

    /// Vectors of several items, sharing neighbourhood work.
    pub fn item_vectors(
        &self,
        g: &KnowledgeGraph,
        emb: &KgEmbeddings,
        items: &[ItemId],
    ) -> Result<HashMap<ItemId, Vec<f64>>> {
        let tape = Tape::new();
        let bound = self.gnn.set.bind_frozen(&tape);
        let mut fwd = GnnForward::new(&tape, g, emb, &self.gnn, &bound, &self.cfg)?;
        let mut out = HashMap::with_capacity(items.len());
        for &item in items {
            let v = fwd.item(item)?;
            out.insert(item, tape.value(v).into_data());
        }
        Ok(out)
    }
}

/// Runs the GRU over a profile's item vectors from the zero state and returns the final hidden state.
pub fn encode_state(
    profile: &[ItemId],
    item_vectors: &HashMap<ItemId, Vec<f64>>,
    gru: &GruParams,
) -> Result<StateRepr> {
    if profile.is_empty() {
        return Err(Error::Validation("cannot encode an empty profile".into()));
    }
    let tape = Tape::new();
    let bound = gru.set.bind_frozen(&tape);
    let inputs = profile
        .iter()
        .map(|item| {
            item_vectors
                .get(item)
                .map(|v| tape.constant(Tensor::vector(v.clone())))
                .ok_or(Error::UnmappedItem(item.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let states = gru.run(&tape, &bound, &inputs)?;
    let last = *states.last().expect("non-empty profile");
    Ok(StateRepr {
        vector: tape.value(last).into_data(),
        profile: profile.to_vec(),
        step: profile.len() - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use crate::numeric::sigmoid;

    fn line_graph() -> (KnowledgeGraph, KgEmbeddings) {
        // item0 -> e2, item0 -> e3 ; item1 isolated
        let triples = [Triple::new(0, 0, 2), Triple::new(0, 1, 3)];
        let (g, _) =
            KnowledgeGraph::from_triples(4, 2, triples, vec![Some(EntityId(0)), Some(EntityId(1))])
                .unwrap();
        let ents = Tensor::matrix(4, 2, vec![1.0, 0.5, -0.3, 0.8, 0.4, 0.4, 0.4, 0.4]).unwrap();
        let rels = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        (g, KgEmbeddings::new(ents, rels).unwrap())
    }

    #[test]
    fn isolated_item_with_identity_self_weight_is_its_embedding() {
        let (g, emb) = line_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gnn = GnnParams::new(2, 1, &mut rng).unwrap();
        *gnn.set.get_mut(gnn.self_weights[0]) = Tensor::identity(2);
        let tape = Tape::new();
        let bound = gnn.set.bind(&tape);
        let cfg = EncoderConfig::default();
        let mut fwd = GnnForward::new(&tape, &g, &emb, &gnn, &bound, &cfg).unwrap();
        let v = fwd.item(ItemId(1)).unwrap();
        assert_eq!(tape.value(v).data(), emb.entity(EntityId(1)));
    }

    #[test]
    fn identical_neighbours_share_attention() {
        let (g, emb) = line_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gnn = GnnParams::new(2, 1, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = gnn.set.bind(&tape);
        let cfg = EncoderConfig::default();
        let mut fwd = GnnForward::new(&tape, &g, &emb, &gnn, &bound, &cfg).unwrap();
        fwd.item(ItemId(0)).unwrap();
        let alpha = fwd.attention(EntityId(0), 1).unwrap();
        let a = tape.value(alpha);
        assert!((a.data()[0] - 0.5).abs() < 1e-15);
        assert!((a.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unmapped_item_is_an_error() {
        let (g, emb) = line_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = StateEncoder::new(2, EncoderConfig::default(), &mut rng).unwrap();
        assert!(matches!(
            enc.item_vector(&g, &emb, ItemId(5)),
            Err(Error::UnmappedItem(5))
        ));
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gru = GruParams::new(3, 4, &mut rng).unwrap();
        for id in gru.set.ids().collect::<Vec<_>>() {
            gru.set.get_mut(id).data_mut().fill(0.0);
        }
        let vectors = HashMap::from([(ItemId(0), vec![1.0, -2.0, 3.0]), (ItemId(1), vec![0.5, 0.5, 0.5])]);
        let s = encode_state(&[ItemId(0), ItemId(1)], &vectors, &gru).unwrap();
        assert_eq!(s.vector, vec![0.0; 4]);
        assert_eq!(s.step, 1);

        // gates are exactly one half under zero weights
        let tape = Tape::new();
        let b = gru.set.bind_frozen(&tape);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let h = tape.constant(Tensor::vector(vec![0.2, -0.4, 0.6, 1.0]));
        let step = gru.step_traced(&tape, &b, x, h).unwrap();
        assert!(tape.value(step.update).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(step.reset).data().iter().all(|&v| v == 0.5));
        assert_eq!(tape.value(step.h).data(), &[0.1, -0.2, 0.3, 0.5]);
    }

    #[test]
    fn single_step_matches_hand_unrolled_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gru = GruParams::new(2, 2, &mut rng).unwrap();
        for id in gru.set.ids().collect::<Vec<_>>() {
            for v in gru.set.get_mut(id).data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let x = [0.7, -0.2];
        let vectors = HashMap::from([(ItemId(9), x.to_vec())]);
        let got = encode_state(&[ItemId(9)], &vectors, &gru).unwrap().vector;

        // h₋₁ = 0, so the U terms vanish: z·h = 0, h = (1-u)·tanh(W_c x + b_c).
        let row = |id: ParamId, r: usize| gru.set.get(id).row(r).to_vec();
        let bias = |id: ParamId, r: usize| gru.set.get(id).data()[r];
        for r in 0..2 {
            let wx = |id: ParamId| row(id, r)[0] * x[0] + row(id, r)[1] * x[1];
            let u = sigmoid(wx(gru.w_u) + bias(gru.b_u, r));
            let cand = (wx(gru.w_c) + bias(gru.b_c, r)).tanh();
            let want = (1.0 - u) * cand;
            assert!((got[r] - want).abs() < 1e-14, "{} vs {want}", got[r]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = GruParams::new(3, 2, &mut rng).unwrap();
        let vectors = HashMap::from([(ItemId(0), vec![1.0, 2.0])]);
        assert!(matches!(
            encode_state(&[ItemId(0)], &vectors, &gru),
            Err(Error::Shape { .. })
        ));
    }
}
