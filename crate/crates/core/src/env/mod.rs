//! The deterministic walk environment: a query fixes a source node, each step
//! either follows an outgoing edge or stops, and the terminal node earns
//! reward 1 when it answers the query.

use std::fmt::Debug;

use arrayvec::ArrayVec;

use crate::error::{Error, Result};

pub mod kg;
pub mod puzzle;

pub use kg::{KbDataset, KbQuery, KbcEnv, KnowledgeGraph};
pub use puzzle::{Puzzle, PuzzleEnv, PuzzleStatus};

pub type NodeId = u32;

/// Index features of a node, edge or query, one index per [`FeatureSlot`].
pub type Features = ArrayVec<u32, 8>;

/// How one feature index is turned into a vector by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSlot {
    /// One-hot block of the given width.
    OneHot(usize),
    /// Row of the embedding table with this index in [`EnvLayout::tables`].
    Embed(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableShape {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
}

/// Feature wiring an environment exposes to the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvLayout {
    pub node: Vec<FeatureSlot>,
    pub edge: Vec<FeatureSlot>,
    pub query: Vec<FeatureSlot>,
    pub tables: Vec<TableShape>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub features: Features,
    pub next: NodeId,
}

pub trait Environment: Sync {
    type Query: Clone + Debug + Send + Sync;

    fn layout(&self) -> EnvLayout;

    /// Number of edge moves allowed; at step `t_max` only STOP is feasible.
    fn t_max(&self) -> usize;

    fn source(&self, query: &Self::Query) -> NodeId;

    /// Query component of tree path keys.
    fn query_key(&self, query: &Self::Query) -> u32;

    fn query_features(&self, query: &Self::Query) -> Features;

    fn node_features(&self, query: &Self::Query, node: NodeId) -> Features;

    /// Outgoing edges of `node` in a stable order.
    fn edges(&self, query: &Self::Query, node: NodeId, out: &mut Vec<Edge>);

    /// Terminal reward for stopping at `node`.
    fn reward(&self, query: &Self::Query, node: NodeId) -> f32;

    fn node_label(&self, query: &Self::Query, node: NodeId) -> String;

    fn edge_label(&self, query: &Self::Query, edge: &Edge) -> String;

    fn query_label(&self, query: &Self::Query) -> String {
        format!("{query:?}")
    }

    /// Features of the candidate reached through `edge`: node features of the
    /// tail followed by the edge's own features.
    fn candidate_features(&self, query: &Self::Query, edge: &Edge) -> Features {
        let mut f = self.node_features(query, edge.next);
        for &x in &edge.features {
            f.push(x);
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkState<Q> {
    pub query: Q,
    pub node: NodeId,
    pub t: usize,
    /// Chosen action indices so far (0 = STOP, j > 0 = j-th edge).
    pub actions: Vec<u32>,
    /// Visited nodes, starting with the source.
    pub nodes: Vec<NodeId>,
    pub terminal: bool,
}

impl<Q: Clone> WalkState<Q> {
    pub fn initial<E: Environment<Query = Q>>(env: &E, query: Q) -> Self {
        let node = env.source(&query);
        WalkState {
            query,
            node,
            t: 0,
            actions: Vec::new(),
            nodes: vec![node],
            terminal: false,
        }
    }

    /// Predicted node of a terminal state.
    pub fn prediction(&self) -> Option<NodeId> {
        self.terminal.then_some(self.node)
    }
}

/// Feasible actions at a state: index 0 is STOP, index `j` is `edges[j - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub edges: Vec<Edge>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn feasible_actions<E: Environment>(
    env: &E,
    state: &WalkState<E::Query>,
) -> Result<CandidateSet> {
    if state.terminal {
        return Err(Error::Contract(
            "feasible_actions on a terminal state".into(),
        ));
    }
    let mut edges = Vec::new();
    if state.t < env.t_max() {
        env.edges(&state.query, state.node, &mut edges);
    }
    Ok(CandidateSet { edges })
}

pub fn env_step<E: Environment>(
    env: &E,
    state: &WalkState<E::Query>,
    action: usize,
) -> Result<WalkState<E::Query>> {
    let cands = feasible_actions(env, state)?;
    if action >= cands.len() {
        return Err(Error::Contract(format!(
            "action {action} out of range for {} candidates",
            cands.len()
        )));
    }
    let mut next = state.clone();
    next.actions.push(action as u32);
    if action == 0 {
        next.terminal = true;
    } else {
        next.node = cands.edges[action - 1].next;
        next.nodes.push(next.node);
        next.t += 1;
    }
    Ok(next)
}

pub fn terminal_reward<E: Environment>(env: &E, state: &WalkState<E::Query>) -> Result<f32> {
    if !state.terminal {
        return Err(Error::Contract(
            "reward requested for a non-terminal state".into(),
        ));
    }
    Ok(env.reward(&state.query, state.node))
}

/// Replays an action history from the query's source.
pub fn replay<E: Environment>(
    env: &E,
    query: &E::Query,
    actions: &[u32],
) -> Result<WalkState<E::Query>> {
    let mut s = WalkState::initial(env, query.clone());
    for &a in actions {
        s = env_step(env, &s, a as usize)?;
    }
    Ok(s)
}
