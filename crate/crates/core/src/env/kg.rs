//! Knowledge graph built from `head<TAB>relation<TAB>tail` files, with a
//! mirrored inverse edge for every training triple.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Edge, EnvLayout, Environment, FeatureSlot, Features, NodeId, TableShape};
use crate::error::{Error, Result};
use crate::seed::{stream_rng, Stream};

pub const DEFAULT_INVERSE_MARKER: &str = "_inv";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    inverse: Vec<u32>,
    is_inverse: Vec<bool>,
    /// Per entity: `(relation, tail)` sorted and deduplicated.
    adjacency: Vec<Vec<(u32, u32)>>,
    marker: String,
}

impl KnowledgeGraph {
    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn inverse_of(&self, relation: u32) -> u32 {
        self.inverse[relation as usize]
    }

    pub fn is_inverse(&self, relation: u32) -> bool {
        self.is_inverse[relation as usize]
    }

    pub fn neighbors(&self, entity: u32) -> &[(u32, u32)] {
        &self.adjacency[entity as usize]
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn inverse_marker(&self) -> &str {
        &self.marker
    }

    pub fn entity(&self, name: &str) -> Result<u32> {
        self.entities.get(name).ok_or_else(|| Error::Vocabulary {
            kind: "entity",
            name: name.to_string(),
        })
    }

    pub fn relation(&self, name: &str) -> Result<u32> {
        self.relations.get(name).ok_or_else(|| Error::Vocabulary {
            kind: "relation",
            name: name.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KbQuery {
    pub source: u32,
    pub relation: u32,
    pub target: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct KbDataset {
    pub graph: Arc<KnowledgeGraph>,
    pub train: Vec<KbQuery>,
    pub valid: Vec<KbQuery>,
    pub test: Vec<KbQuery>,
    /// Every known tail of `(head, relation)` across all splits, for filtered
    /// ranking.
    pub known_tails: HashMap<(u32, u32), BTreeSet<u32>>,
}

impl KbDataset {
    pub fn is_known(&self, query: &KbQuery, node: u32) -> bool {
        self.known_tails
            .get(&(query.source, query.relation))
            .is_some_and(|t| t.contains(&node))
    }
}

pub type RawTriple = (String, String, String);

pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `head<TAB>relation<TAB>tail`, got `{line}`"),
            });
        }
        out.push((
            parts[0].trim().to_string(),
            parts[1].trim().to_string(),
            parts[2].trim().to_string(),
        ));
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no triples",
            path.display()
        )));
    }
    Ok(out)
}

fn read_triples(path: &Path) -> Result<Vec<RawTriple>> {
    let text = std::fs::read_to_string(path)?;
    parse_triples(&text, path)
}

pub fn load_triples(
    train: &Path,
    valid: Option<&Path>,
    test: Option<&Path>,
    marker: &str,
) -> Result<KbDataset> {
    let train = read_triples(train)?;
    let valid = valid.map(read_triples).transpose()?.unwrap_or_default();
    let test = test.map(read_triples).transpose()?.unwrap_or_default();
    build_dataset(&train, &valid, &test, marker)
}

/// Interns entities and relations in file order (train, valid, test); each
/// raw relation is immediately followed by its inverse.
pub fn build_dataset(
    train: &[RawTriple],
    valid: &[RawTriple],
    test: &[RawTriple],
    marker: &str,
) -> Result<KbDataset> {
    if marker.is_empty() {
        return Err(Error::Config(
            "inverse relation marker must not be empty".into(),
        ));
    }
    let raw_names: HashSet<&str> = train
        .iter()
        .chain(valid)
        .chain(test)
        .map(|t| t.1.as_str())
        .collect();
    for name in &raw_names {
        if raw_names.contains(format!("{name}{marker}").as_str()) {
            return Err(Error::Data(format!(
                "inverse marker `{marker}` collides: both `{name}` and `{name}{marker}` are raw relations"
            )));
        }
    }

    let mut entities = Vocab::default();
    let mut relations = Vocab::default();
    let mut inverse = Vec::new();
    let mut is_inverse = Vec::new();
    let mut intern_rel = |relations: &mut Vocab, name: &str| -> u32 {
        if let Some(id) = relations.get(name) {
            return id;
        }
        let id = relations.intern(name);
        let inv = relations.intern(&format!("{name}{marker}"));
        inverse.extend([inv, id]);
        is_inverse.extend([false, true]);
        id
    };
    let mut ids = |split: &[RawTriple], entities: &mut Vocab, relations: &mut Vocab| {
        split
            .iter()
            .map(|(h, r, t)| {
                let h = entities.intern(h);
                let r = intern_rel(relations, r);
                let t = entities.intern(t);
                (h, r, t)
            })
            .collect::<Vec<_>>()
    };
    let train_ids = ids(train, &mut entities, &mut relations);
    let valid_ids = ids(valid, &mut entities, &mut relations);
    let test_ids = ids(test, &mut entities, &mut relations);

    let mut adjacency = vec![Vec::new(); entities.len()];
    for &(h, r, t) in &train_ids {
        adjacency[h as usize].push((r, t));
        adjacency[t as usize].push((inverse[r as usize], h));
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    let mut known_tails: HashMap<(u32, u32), BTreeSet<u32>> = HashMap::new();
    for &(h, r, t) in train_ids.iter().chain(&valid_ids).chain(&test_ids) {
        known_tails.entry((h, r)).or_default().insert(t);
    }
    let to_queries = |v: &[(u32, u32, u32)]| {
        v.iter()
            .map(|&(source, relation, target)| KbQuery {
                source,
                relation,
                target: Some(target),
            })
            .collect::<Vec<_>>()
    };

    Ok(KbDataset {
        graph: Arc::new(KnowledgeGraph {
            entities,
            relations,
            inverse,
            is_inverse,
            adjacency,
            marker: marker.to_string(),
        }),
        train: to_queries(&train_ids),
        valid: to_queries(&valid_ids),
        test: to_queries(&test_ids),
        known_tails,
    })
}

/// Walk environment over a [`KnowledgeGraph`].
#[derive(Clone, Debug)]
pub struct KbcEnv {
    graph: Arc<KnowledgeGraph>,
    t_max: usize,
    entity_dim: usize,
    relation_dim: usize,
    mask_query_edge: bool,
}

impl KbcEnv {
    pub fn new(
        graph: Arc<KnowledgeGraph>,
        t_max: usize,
        entity_dim: usize,
        relation_dim: usize,
    ) -> Self {
        KbcEnv {
            graph,
            t_max,
            entity_dim,
            relation_dim,
            mask_query_edge: false,
        }
    }

    /// Hides the queried triple `(source, relation, target)` from the walker,
    /// so training queries drawn from the graph itself cannot be answered by
    /// the one edge that states them.
    pub fn with_query_edge_masked(mut self, mask: bool) -> Self {
        self.mask_query_edge = mask;
        self
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn query(&self, source: &str, relation: &str, target: Option<&str>) -> Result<KbQuery> {
        Ok(KbQuery {
            source: self.graph.entity(source)?,
            relation: self.graph.relation(relation)?,
            target: target.map(|t| self.graph.entity(t)).transpose()?,
        })
    }
}

impl Environment for KbcEnv {
    type Query = KbQuery;

    fn layout(&self) -> EnvLayout {
        EnvLayout {
            node: vec![FeatureSlot::Embed(0)],
            edge: vec![FeatureSlot::Embed(1)],
            query: vec![FeatureSlot::Embed(0), FeatureSlot::Embed(1)],
            tables: vec![
                TableShape {
                    name: "entity_embedding".into(),
                    rows: self.graph.entities.len(),
                    dim: self.entity_dim,
                },
                TableShape {
                    name: "relation_embedding".into(),
                    rows: self.graph.relations.len(),
                    dim: self.relation_dim,
                },
            ],
        }
    }

    fn t_max(&self) -> usize {
        self.t_max
    }

    fn source(&self, q: &KbQuery) -> NodeId {
        q.source
    }

    fn query_key(&self, q: &KbQuery) -> u32 {
        q.relation
    }

    fn query_features(&self, q: &KbQuery) -> Features {
        [q.source, q.relation].into_iter().collect()
    }

    fn node_features(&self, _q: &KbQuery, node: NodeId) -> Features {
        [node].into_iter().collect()
    }

    fn edges(&self, q: &KbQuery, node: NodeId, out: &mut Vec<Edge>) {
        out.clear();
        let hidden = match (self.mask_query_edge, q.target) {
            (true, Some(t)) if node == q.source => Some((q.relation, t)),
            _ => None,
        };
        let hidden_inv = match (self.mask_query_edge, q.target) {
            (true, Some(t)) if node == t => Some((self.graph.inverse_of(q.relation), q.source)),
            _ => None,
        };
        for &(r, t) in self.graph.neighbors(node) {
            if Some((r, t)) == hidden || Some((r, t)) == hidden_inv {
                continue;
            }
            out.push(Edge {
                features: [r].into_iter().collect(),
                next: t,
            });
        }
    }

    fn reward(&self, q: &KbQuery, node: NodeId) -> f32 {
        if q.target == Some(node) {
            1.0
        } else {
            0.0
        }
    }

    fn node_label(&self, _q: &KbQuery, node: NodeId) -> String {
        self.graph.entities.name(node).to_string()
    }

    fn edge_label(&self, _q: &KbQuery, edge: &Edge) -> String {
        self.graph.relations.name(edge.features[0]).to_string()
    }

    fn query_label(&self, q: &KbQuery) -> String {
        let target = q
            .target
            .map(|t| self.graph.entities.name(t).to_string())
            .unwrap_or_else(|| "?".into());
        format!(
            "{} {} {}",
            self.graph.entities.name(q.source),
            self.graph.relations.name(q.relation),
            target
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticKb {
    pub train: Vec<RawTriple>,
    pub valid: Vec<RawTriple>,
    pub test: Vec<RawTriple>,
}

/// Relation of the generated KB whose triples are split into train, valid
/// and test queries.
pub const SYNTHETIC_QUERY_RELATION: &str = "composed";

/// Random KB whose last relation is the composition of the first two:
/// `composed(x) = second(first(x))`. Two more relations add distractor
/// edges. Composed triples are split into train/valid/test queries.
pub fn synthetic_kb(seed: u64, num_entities: usize) -> SyntheticKb {
    let mut rng = stream_rng(seed, Stream::Data, 1);
    let ent = |i: usize| format!("e{i:03}");
    let first: Vec<usize> = (0..num_entities)
        .map(|_| rng.gen_range(0..num_entities))
        .collect();
    let second: Vec<usize> = (0..num_entities)
        .map(|_| rng.gen_range(0..num_entities))
        .collect();
    let mut train = Vec::new();
    for x in 0..num_entities {
        train.push((ent(x), "first".to_string(), ent(first[x])));
        train.push((ent(x), "second".to_string(), ent(second[x])));
    }
    for name in ["noise_a", "noise_b"] {
        for _ in 0..(num_entities * 3 / 4) {
            let h = rng.gen_range(0..num_entities);
            let t = rng.gen_range(0..num_entities);
            train.push((ent(h), name.to_string(), ent(t)));
        }
    }
    let mut composed: Vec<RawTriple> = (0..num_entities)
        .map(|x| {
            (
                ent(x),
                SYNTHETIC_QUERY_RELATION.to_string(),
                ent(second[first[x]]),
            )
        })
        .collect();
    composed.shuffle(&mut rng);
    let n_test = num_entities / 5;
    let n_valid = num_entities / 10;
    let test = composed.split_off(composed.len() - n_test);
    let valid = composed.split_off(composed.len() - n_valid);
    train.extend(composed);
    SyntheticKb { train, valid, test }
}

impl SyntheticKb {
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir)?;
        let mut paths = [
            dir.join("train.txt"),
            dir.join("valid.txt"),
            dir.join("test.txt"),
        ];
        for (split, path) in [&self.train, &self.valid, &self.test]
            .into_iter()
            .zip(&mut paths)
        {
            let text: String = split
                .iter()
                .map(|(h, r, t)| format!("{h}\t{r}\t{t}\n"))
                .collect();
            std::fs::write(&*path, text)?;
        }
        Ok(paths)
    }

    pub fn dataset(&self, marker: &str) -> Result<KbDataset> {
        build_dataset(&self.train, &self.valid, &self.test, marker)
    }
}
