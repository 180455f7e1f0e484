//! Knowledge-graph storage, neighbourhood expansion and item-candidate pools.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ids::{EntityId, ItemId, RelationId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

/// Counts reported while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicates_dropped: usize,
    pub self_loops: usize,
}

/// Immutable triple store with head-indexed adjacency and the item ↔ entity table.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    out_adjacency: Vec<Vec<(RelationId, EntityId)>>,
    /// Distinct neighbour entities used for hop expansion and aggregation.
    neighbors: Vec<Vec<EntityId>>,
    relation_count: usize,
    item_to_entity: Vec<Option<EntityId>>,
    entity_to_item: Vec<Option<ItemId>>,
    undirected: bool,
    entity_vocab: Vocab,
    relation_vocab: Vocab,
}

impl KnowledgeGraph {
    /// Builds a graph from dense ids.
    ///
    /// `item_entities[i]` is the entity of item `i`, or `None` for items absent from the KG.
    pub fn from_triples(
        entity_count: usize,
        relation_count: usize,
        triples: impl IntoIterator<Item = Triple>,
        item_entities: Vec<Option<EntityId>>,
    ) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        let mut unique = BTreeSet::new();
        for t in triples {
            if t.head.index() >= entity_count || t.tail.index() >= entity_count {
                return Err(Error::Validation(format!(
                    "triple ({}, {}, {}) references an entity >= entity count {entity_count}",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation.index() >= relation_count {
                return Err(Error::Validation(format!(
                    "triple references relation {} >= relation count {relation_count}",
                    t.relation
                )));
            }
            if !unique.insert(t) {
                report.duplicates_dropped += 1;
            } else if t.head == t.tail {
                report.self_loops += 1;
            }
        }

        let mut entity_to_item = vec![None; entity_count];
        for (item, entity) in item_entities.iter().enumerate() {
            let Some(entity) = *entity else { continue };
            if entity.index() >= entity_count {
                return Err(Error::Validation(format!(
                    "item {item} maps to unknown entity {entity}"
                )));
            }
            if let Some(other) = entity_to_item[entity.index()] {
                return Err(Error::Validation(format!(
                    "entity {entity} is mapped by both item {other} and item {item}"
                )));
            }
            entity_to_item[entity.index()] = Some(ItemId::from(item));
        }

        let triples: Vec<Triple> = unique.into_iter().collect();
        let mut out_adjacency = vec![Vec::new(); entity_count];
        for t in &triples {
            out_adjacency[t.head.index()].push((t.relation, t.tail));
        }
        let mut g = Self {
            triple_set: triples.iter().copied().collect(),
            triples,
            out_adjacency,
            neighbors: Vec::new(),
            relation_count,
            item_to_entity: item_entities,
            entity_to_item,
            undirected: false,
            entity_vocab: Vocab::new(),
            relation_vocab: Vocab::new(),
        };
        g.rebuild_neighbors();
        Ok((g, report))
    }

    /// Treat every triple as an edge in both directions for expansion and aggregation.
    pub fn with_undirected(mut self, undirected: bool) -> Self {
        self.undirected = undirected;
        self.rebuild_neighbors();
        self
    }

    fn rebuild_neighbors(&mut self) {
        let n = self.entity_count();
        let mut sets: Vec<BTreeSet<EntityId>> = vec![BTreeSet::new(); n];
        for t in &self.triples {
            sets[t.head.index()].insert(t.tail);
            if self.undirected {
                sets[t.tail.index()].insert(t.head);
            }
        }
        self.neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn entity_count(&self) -> usize {
        self.out_adjacency.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    /// Size of the item-id space known to the graph (mapped or not).
    pub fn item_count(&self) -> usize {
        self.item_to_entity.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_adjacency[e.index()]
    }

    /// Distinct neighbour entities of `e` (out-neighbours, plus in-neighbours when undirected).
    pub fn neighbors(&self, e: EntityId) -> &[EntityId] {
        &self.neighbors[e.index()]
    }

    pub fn entity_of(&self, item: ItemId) -> Option<EntityId> {
        self.item_to_entity.get(item.index()).copied().flatten()
    }

    pub fn item_of(&self, entity: EntityId) -> Option<ItemId> {
        self.entity_to_item.get(entity.index()).copied().flatten()
    }

    /// Items that have a KG entity, ascending.
    pub fn mapped_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_to_entity
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_some())
            .map(|(i, _)| ItemId::from(i))
    }

    pub fn entity_vocab(&self) -> &Vocab {
        &self.entity_vocab
    }

    pub fn relation_vocab(&self) -> &Vocab {
        &self.relation_vocab
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entity_count() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.0))
        }
    }

    /// Layered expansion: layer `h` holds every tail of a triple whose head is in layer `h-1`,
    /// with layer 0 being `seed`. Returns layers `1..=hops`.
    pub fn hop_expand(&self, seed: &BTreeSet<EntityId>, hops: usize) -> Result<Vec<BTreeSet<EntityId>>> {
        if hops == 0 {
            return Err(Error::Config("hop count must be at least 1".into()));
        }
        for &e in seed {
            self.check_entity(e)?;
        }
        let mut layers = Vec::with_capacity(hops);
        let mut frontier = seed.clone();
        for _ in 0..hops {
            let next: BTreeSet<EntityId> = frontier
                .iter()
                .flat_map(|&p| self.neighbors(p).iter().copied())
                .collect();
            layers.push(next.clone());
            frontier = next;
        }
        Ok(layers)
    }

    /// All items within `hops` of `anchor`, excluding the anchor itself, ascending.
    pub fn candidate_set(&self, anchor: ItemId, hops: usize) -> Result<Vec<ItemId>> {
        let entity = self.entity_of(anchor).ok_or(Error::UnmappedItem(anchor.0))?;
        let layers = self.hop_expand(&BTreeSet::from([entity]), hops)?;
        let items: BTreeSet<ItemId> = layers
            .iter()
            .flatten()
            .filter_map(|&e| self.item_of(e))
            .filter(|&i| i != anchor)
            .collect();
        Ok(items.into_iter().collect())
    }

    /// Item-candidate pool for `anchor`: the candidate set, uniformly subsampled without
    /// replacement down to `pool_size` when larger. Sample order is preserved.
    pub fn candidate_pool<R: Rng + ?Sized>(
        &self,
        anchor: ItemId,
        hops: usize,
        pool_size: usize,
        rng: &mut R,
    ) -> Result<Vec<ItemId>> {
        if pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let all = self.candidate_set(anchor, hops)?;
        if all.is_empty() {
            return Err(Error::NoCandidates { anchor: anchor.0 });
        }
        if all.len() <= pool_size {
            return Ok(all);
        }
        Ok(index::sample(rng, all.len(), pool_size)
            .into_iter()
            .map(|i| all[i])
            .collect())
    }
}

/// Non-empty, non-comment lines of a tab-separated file, split into fields.
pub(crate) fn read_rows(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let parts: Vec<String> = trimmed.split('\t').map(|s| s.trim().to_string()).collect();
        if parts.len() != fields || parts.iter().any(String::is_empty) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected {fields} tab-separated fields, got `{trimmed}`"),
            });
        }
        rows.push((line_no, parts));
    }
    Ok(rows)
}

/// Loads `head<TAB>relation<TAB>tail` triples and an `item<TAB>entity` map.
///
/// Raw ids are remapped to contiguous ids. Items are numbered in item-map order;
/// `items` is extended in place so interaction files can share the numbering.
pub fn load_kg(
    triple_file: &Path,
    item_map_file: &Path,
    items: &mut Vocab,
) -> Result<(KnowledgeGraph, LoadReport)> {
    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    let mut triples = Vec::new();
    for (_, row) in read_rows(triple_file, 3)? {
        let h = entities.intern(&row[0]);
        let r = relations.intern(&row[1]);
        let t = entities.intern(&row[2]);
        triples.push(Triple::new(h, r, t));
    }

    let mut item_entities: Vec<Option<EntityId>> = vec![None; items.len()];
    for (line, row) in read_rows(item_map_file, 2)? {
        let entity = entities.get(&row[1]).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{line}: item `{}` maps to entity `{}` which appears in no triple",
                item_map_file.display(),
                row[0],
                row[1]
            ))
        })?;
        let item = items.intern(&row[0]) as usize;
        if item >= item_entities.len() {
            item_entities.resize(item + 1, None);
        }
        match item_entities[item] {
            Some(prev) if prev != EntityId(entity) => {
                return Err(Error::Validation(format!(
                    "{}:{line}: item `{}` mapped to two entities",
                    item_map_file.display(),
                    row[0]
                )))
            }
            _ => item_entities[item] = Some(EntityId(entity)),
        }
    }
    let (mut g, report) =
        KnowledgeGraph::from_triples(entities.len(), relations.len(), triples, item_entities)?;
    g.entity_vocab = entities;
    g.relation_vocab = relations;
    if report.duplicates_dropped > 0 {
        log::info!(
            "{}: dropped {} duplicate triples",
            triple_file.display(),
            report.duplicates_dropped
        );
    }
    Ok((g, report))
}
