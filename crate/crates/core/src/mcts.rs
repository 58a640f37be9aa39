//! PUCT tree search over walk states. Nodes are keyed by the full path that
//! reached them, so two different paths to the same graph node stay apart.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{env_step, feasible_actions, Environment, NodeId, WalkState};
use crate::error::{Error, Result};
use crate::model::{StateEncoding, WalkerModel};
use crate::nn::{ParamStore, Real};

/// How exact PUCT ties are resolved. At an unvisited node every score is
/// zero, so this decides the first move out of each new node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    /// Lowest action index (STOP first).
    #[default]
    Index,
    /// Highest prior, then lowest index.
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    /// Simulations per search.
    pub simulations: usize,
    pub c: f64,
    pub beta: f64,
    /// Backup discount.
    pub gamma: f64,
    pub tie_break: TieBreak,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            simulations: 32,
            c: 2.0,
            beta: 0.5,
            gamma: 0.99,
            tie_break: TieBreak::Index,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations == 0 {
            return Err(Error::Config("mcts.simulations must be at least 1".into()));
        }
        if !(self.c >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(
                "mcts.c and mcts.beta must be non-negative".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "mcts.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `(query key, n_0, a_0, n_1, a_1, ..., n_t)`.
pub type PathKey = Vec<u32>;

/// Index of the action maximising
/// `c · π(a)^β · sqrt(Σ N) / (1 + N(a)) + W(a) / N(a)`, with `W/N = 0` for
/// unvisited actions. Ties go to the lowest index.
pub fn puct_select(n: &[f64], w: &[f64], priors: &[f64], c: f64, beta: f64) -> usize {
    puct_select_with(n, w, priors, c, beta, TieBreak::Index)
}

/// [`puct_select`] with a choice of tie-breaking rule.
pub fn puct_select_with(
    n: &[f64],
    w: &[f64],
    priors: &[f64],
    c: f64,
    beta: f64,
    tie: TieBreak,
) -> usize {
    let total: f64 = n.iter().sum();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for a in 0..n.len() {
        let s = puct_score(n[a], w[a], priors[a], total, c, beta);
        let wins = s > best_score
            || (tie == TieBreak::Prior && s == best_score && priors[a] > priors[best]);
        if wins {
            best = a;
            best_score = s;
        }
    }
    best
}

/// PUCT value of one action given its own statistics and the parent's
/// total visit count.
#[inline]
pub fn puct_score(n: f64, w: f64, prior: f64, total: f64, c: f64, beta: f64) -> f64 {
    let explore = c * prior.powf(beta) * total.sqrt() / (1.0 + n);
    let exploit = if n > 0.0 { w / n } else { 0.0 };
    explore + exploit
}

#[derive(Clone, Debug)]
pub struct TreeNode<S> {
    pub key: PathKey,
    pub node: NodeId,
    pub t: usize,
    /// Tail node of each edge action (index `j - 1` for action `j`).
    pub next: Vec<NodeId>,
    pub prior: Vec<f64>,
    pub n: Vec<f64>,
    pub w: Vec<f64>,
    pub children: Vec<Option<u32>>,
    pub enc: StateEncoding<S>,
}

impl<S: Real> TreeNode<S> {
    pub fn value(&self) -> f64 {
        self.enc.terminal_value().as_f64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationRecord {
    /// `(tree node index, action, candidate count)` per step.
    pub steps: Vec<(u32, u32, u32)>,
    pub terminal: u32,
    /// `V(s_T) = Q(s_T, STOP)`.
    pub value: f64,
    pub final_node: NodeId,
}

impl SimulationRecord {
    /// Index `T` of the STOP step.
    pub fn length(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn actions(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.1).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SearchTree<S> {
    nodes: Vec<TreeNode<S>>,
    index: HashMap<PathKey, u32>,
    simulations: usize,
    /// Tree size when a node whose STOP would earn reward was first added.
    first_hit: Option<usize>,
}

impl<S: Real> Default for SearchTree<S> {
    fn default() -> Self {
        SearchTree {
            nodes: Vec::new(),
            index: HashMap::new(),
            simulations: 0,
            first_hit: None,
        }
    }
}

impl<S: Real> SearchTree<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: u32) -> &TreeNode<S> {
        &self.nodes[i as usize]
    }

    pub fn nodes(&self) -> &[TreeNode<S>] {
        &self.nodes
    }

    pub fn lookup(&self, key: &[u32]) -> Option<&TreeNode<S>> {
        self.index.get(key).map(|&i| &self.nodes[i as usize])
    }

    pub fn simulations(&self) -> usize {
        self.simulations
    }

    /// Number of tree nodes created up to and including the first one at
    /// which stopping is rewarded.
    pub fn first_hit(&self) -> Option<usize> {
        self.first_hit
    }

    fn insert<E: Environment>(
        &mut self,
        env: &E,
        state: &WalkState<E::Query>,
        key: PathKey,
        enc: StateEncoding<S>,
        tau: f64,
    ) -> Result<u32> {
        let cands = feasible_actions(env, state)?;
        let k = cands.len();
        let prior = enc.policy(tau).iter().map(|p| p.as_f64()).collect();
        let idx = self.nodes.len() as u32;
        self.index.insert(key.clone(), idx);
        self.nodes.push(TreeNode {
            key,
            node: state.node,
            t: state.t,
            next: cands.edges.iter().map(|e| e.next).collect(),
            prior,
            n: vec![0.0; k],
            w: vec![0.0; k],
            children: vec![None; k - 1],
            enc,
        });
        if self.first_hit.is_none() && env.reward(&state.query, state.node) > 0.0 {
            self.first_hit = Some(self.nodes.len());
        }
        Ok(idx)
    }

    /// Ensures the root for `query` exists.
    pub fn root<E: Environment>(
        &mut self,
        env: &E,
        model: &WalkerModel,
        ps: &ParamStore<S>,
        query: &E::Query,
    ) -> Result<u32> {
        if !self.nodes.is_empty() {
            return Ok(0);
        }
        let state = WalkState::initial(env, query.clone());
        let cands = feasible_actions(env, &state)?;
        let enc = model.root(ps, env, query, &cands)?;
        let key = vec![env.query_key(query), state.node];
        self.insert(env, &state, key, enc, model.tau())
    }

    /// One selection pass from the root to a STOP, creating at most one new
    /// node per edge taken, followed by the backup.
    pub fn simulate<E: Environment>(
        &mut self,
        env: &E,
        model: &WalkerModel,
        ps: &ParamStore<S>,
        query: &E::Query,
        cfg: &MctsConfig,
    ) -> Result<SimulationRecord> {
        let mut cur = self.root(env, model, ps, query)?;
        let mut state = WalkState::initial(env, query.clone());
        let mut steps = Vec::new();
        loop {
            let a = {
                let n = &self.nodes[cur as usize];
                puct_select_with(&n.n, &n.w, &n.prior, cfg.c, cfg.beta, cfg.tie_break)
            };
            let count = self.nodes[cur as usize].n.len() as u32;
            steps.push((cur, a as u32, count));
            if a == 0 {
                break;
            }
            state = env_step(env, &state, a)?;
            cur = match self.nodes[cur as usize].children[a - 1] {
                Some(c) => c,
                None => {
                    let mut key = self.nodes[cur as usize].key.clone();
                    key.push(a as u32);
                    key.push(state.node);
                    let cands = feasible_actions(env, &state)?;
                    let enc = model.child(
                        ps,
                        env,
                        query,
                        &self.nodes[cur as usize].enc,
                        a,
                        state.node,
                        &cands,
                    )?;
                    let c = self.insert(env, &state, key, enc, model.tau())?;
                    self.nodes[cur as usize].children[a - 1] = Some(c);
                    c
                }
            };
        }
        let terminal = steps.last().expect("at least one step").0;
        let record = SimulationRecord {
            steps,
            terminal,
            value: self.nodes[terminal as usize].value(),
            final_node: state.node,
        };
        self.backup(&record, cfg.gamma);
        Ok(record)
    }

    /// `N += γ^{T−t}`, `W += γ^{T−t} · V` along the recorded path.
    pub fn backup(&mut self, record: &SimulationRecord, gamma: f64) {
        let big_t = record.length();
        for (t, &(node, a, _)) in record.steps.iter().enumerate() {
            let g = gamma.powi((big_t - t) as i32);
            let n = &mut self.nodes[node as usize];
            n.n[a as usize] += g;
            n.w[a as usize] += g * record.value;
        }
        self.simulations += 1;
    }

    /// Root-to-leaf path following the most visited action at every node.
    pub fn best_path(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut cur = 0u32;
        loop {
            let n = &self.nodes[cur as usize];
            let mut best = 0;
            for a in 1..n.n.len() {
                if n.n[a] > n.n[best] {
                    best = a;
                }
            }
            out.push((cur, best as u32));
            if best == 0 {
                break;
            }
            match n.children[best - 1] {
                Some(c) => cur = c,
                None => break,
            }
        }
        out
    }
}

/// Runs `cfg.simulations` simulations on a fresh tree.
pub fn run_search<S: Real, E: Environment>(
    env: &E,
    model: &WalkerModel,
    ps: &ParamStore<S>,
    query: &E::Query,
    cfg: &MctsConfig,
) -> Result<(SearchTree<S>, Vec<SimulationRecord>)> {
    let mut tree = SearchTree::new();
    let mut records = Vec::with_capacity(cfg.simulations);
    for _ in 0..cfg.simulations {
        records.push(tree.simulate(env, model, ps, query, cfg)?);
    }
    Ok((tree, records))
}
