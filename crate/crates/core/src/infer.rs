//! Test-time prediction (search-merged node scores and beam decoding),
//! ranking metrics, and evaluation reports.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{env_step, feasible_actions, Environment, NodeId, WalkState};
use crate::error::{Error, Result};
use crate::mcts::{MctsConfig, SearchTree};
use crate::model::{StateEncoding, WalkerModel};
use crate::nn::ops::log_softmax;
use crate::nn::{ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    /// `(node, score)` sorted by descending score, ties by node id.
    pub entries: Vec<(NodeId, f64)>,
    /// Simulations (search) or beam width (beam) behind the ranking.
    pub budget: usize,
    /// Distinct leaves contributing to each entry, parallel to `entries`.
    pub leaves: Vec<usize>,
}

impl RankedPrediction {
    fn from_map(map: BTreeMap<NodeId, (f64, usize)>, budget: usize) -> Self {
        let mut v: Vec<(NodeId, f64, usize)> =
            map.into_iter().map(|(n, (s, c))| (n, s, c)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedPrediction {
            entries: v.iter().map(|e| (e.0, e.1)).collect(),
            leaves: v.iter().map(|e| e.2).collect(),
            budget,
        }
    }

    pub fn top(&self) -> Option<NodeId> {
        self.entries.first().map(|e| e.0)
    }

    /// 1-based position of the first entry accepted by `hit`, skipping
    /// entries rejected by `skip`. `None` when no entry is a hit.
    pub fn rank_by(
        &self,
        hit: impl Fn(NodeId) -> bool,
        skip: impl Fn(NodeId) -> bool,
    ) -> Option<usize> {
        let mut r = 0;
        for &(n, _) in &self.entries {
            if hit(n) {
                return Some(r + 1);
            }
            if !skip(n) {
                r += 1;
            }
        }
        None
    }
}

/// `Score(n) = Σ_{s_T → n} N(s_T, STOP) / N_total · Q(s_T, STOP)`.
pub fn score_nodes<S: Real>(tree: &SearchTree<S>) -> RankedPrediction {
    let total = tree.simulations().max(1) as f64;
    let mut map: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();
    for n in tree.nodes() {
        if n.n[0] > 0.0 {
            let e = map.entry(n.node).or_default();
            e.0 += n.n[0] / total * n.value();
            e.1 += 1;
        }
    }
    RankedPrediction::from_map(map, tree.simulations())
}

struct Hyp<Q> {
    logp: f64,
    state: WalkState<Q>,
    enc: Option<StateEncoding<f32>>,
}

/// Beam search over the policy. Finished paths stay in the pool and compete
/// on cumulative log-probability; nodes are ranked by their best path.
pub fn beam_decode<E: Environment>(
    env: &E,
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    query: &E::Query,
    beam: usize,
) -> Result<RankedPrediction> {
    if beam == 0 {
        return Err(Error::Parameter("beam size must be at least 1".into()));
    }
    let tau = model.tau();
    let s0 = WalkState::initial(env, query.clone());
    let enc0 = model.root(ps, env, query, &feasible_actions(env, &s0)?)?;
    let mut pool = vec![Hyp {
        logp: 0.0,
        state: s0,
        enc: Some(enc0),
    }];
    while pool.iter().any(|h| !h.state.terminal) {
        let mut next: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in pool.iter().enumerate() {
            match &h.enc {
                None => next.push((h.logp, i, usize::MAX)),
                Some(enc) => {
                    let logpi = log_softmax(&enc.u, tau as f32);
                    for (a, &lp) in logpi.iter().enumerate() {
                        next.push((h.logp + lp as f64, i, a));
                    }
                }
            }
        }
        // Stable order: score, then parent index, then action.
        next.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        next.truncate(beam);
        let mut new_pool = Vec::with_capacity(next.len());
        for (logp, i, a) in next {
            let parent = &pool[i];
            if a == usize::MAX {
                new_pool.push(Hyp {
                    logp,
                    state: parent.state.clone(),
                    enc: None,
                });
                continue;
            }
            let state = env_step(env, &parent.state, a)?;
            let enc = if a == 0 {
                None
            } else {
                let cands = feasible_actions(env, &state)?;
                let penc = parent
                    .enc
                    .as_ref()
                    .expect("open hypothesis has an encoding");
                Some(model.child(ps, env, query, penc, a, state.node, &cands)?)
            };
            new_pool.push(Hyp { logp, state, enc });
        }
        pool = new_pool;
    }
    let mut map: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();
    for h in &pool {
        let e = map.entry(h.state.node).or_insert((f64::NEG_INFINITY, 0));
        e.0 = e.0.max(h.logp);
        e.1 += 1;
    }
    Ok(RankedPrediction::from_map(map, beam))
}

/// Fraction of ranks `≤ k`; misses (`None`) never count.
pub fn hits_at_k(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

/// Mean reciprocal rank with misses contributing 0.
pub fn mrr(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|r| r.map_or(0.0, |r| 1.0 / r as f64))
        .sum::<f64>()
        / ranks.len() as f64
}

/// Average precision of one ranked list; positives missing from the list
/// contribute zero precision.
pub fn average_precision(ranked: &[NodeId], positives: &HashSet<NodeId>) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let mut found = 0;
    let mut sum = 0.0;
    for (i, n) in ranked.iter().enumerate() {
        if positives.contains(n) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Some(sum / positives.len() as f64)
}

/// Mean of per-query average precision; queries without positives are
/// skipped with a warning.
pub fn map_score(lists: &[(Vec<NodeId>, HashSet<NodeId>)]) -> f64 {
    let mut n = 0;
    let mut sum = 0.0;
    for (ranked, pos) in lists {
        match average_precision(ranked, pos) {
            Some(ap) => {
                sum += ap;
                n += 1;
            }
            None => log::warn!("query without positives excluded from MAP"),
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Mcts,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub method: DecodeMethod,
    /// Simulation counts (or beam widths) to report; the largest is run.
    pub budgets: Vec<usize>,
    /// Drop other known answers from above the ground truth.
    pub filtered: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: DecodeMethod::Mcts,
            budgets: vec![32],
            filtered: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub budget: usize,
    pub rank: Option<usize>,
    pub raw_rank: Option<usize>,
    pub predicted: Option<String>,
    pub success: bool,
    pub candidates: usize,
    /// Tree nodes created before the first rewarded one (search only).
    pub effort: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: String,
    pub outcomes: Vec<QueryOutcome>,
    /// Most-visited root-to-leaf path of the final search.
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget: usize,
    pub queries: usize,
    /// Top prediction is rewarded.
    pub accuracy: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mrr: f64,
    pub map: f64,
    /// Fraction of queries whose ground truth appears among the candidates
    /// at all; the rest are out-of-candidate-set misses.
    pub reached: f64,
    pub mean_candidates: f64,
    /// Mean search effort; queries never reaching a rewarded node count
    /// their full tree size.
    pub mean_effort: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: DecodeMethod,
    pub filtered: bool,
    pub budgets: Vec<BudgetReport>,
    pub per_query: Vec<QueryReport>,
}

impl EvalReport {
    pub fn at(&self, budget: usize) -> Option<&BudgetReport> {
        self.budgets.iter().find(|b| b.budget == budget)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "method,budget,queries,accuracy,hits1,hits3,hits10,mrr,map,reached,mean_candidates,mean_effort"
        )?;
        let method = match self.method {
            DecodeMethod::Mcts => "mcts",
            DecodeMethod::Beam => "beam",
        };
        for b in &self.budgets {
            writeln!(
                f,
                "{method},{},{},{},{},{},{},{},{},{},{},{}",
                b.budget,
                b.queries,
                b.accuracy,
                b.hits1,
                b.hits3,
                b.hits10,
                b.mrr,
                b.map,
                b.reached,
                b.mean_candidates,
                b.mean_effort.map(|e| e.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

/// Renders a walk as `a -r-> b -s-> c`.
pub fn render_path<E: Environment>(env: &E, query: &E::Query, actions: &[u32]) -> Result<String> {
    let mut s = WalkState::initial(env, query.clone());
    let mut out = env.node_label(query, s.node);
    for &a in actions {
        if a == 0 {
            break;
        }
        let cands = feasible_actions(env, &s)?;
        let edge = cands
            .edges
            .get(a as usize - 1)
            .ok_or_else(|| Error::Contract(format!("action {a} out of range")))?;
        let label = env.edge_label(query, edge);
        s = env_step(env, &s, a as usize)?;
        out.push_str(&format!(" -{label}-> {}", env.node_label(query, s.node)));
    }
    Ok(out)
}

fn outcome<E: Environment>(
    env: &E,
    query: &E::Query,
    pred: &RankedPrediction,
    known: &(dyn Fn(&E::Query, NodeId) -> bool + Sync),
    filtered: bool,
    effort: Option<usize>,
) -> (QueryOutcome, (Vec<NodeId>, HashSet<NodeId>)) {
    let hit = |n: NodeId| env.reward(query, n) > 0.0;
    let raw_rank = pred.rank_by(hit, |_| false);
    let rank = if filtered {
        pred.rank_by(hit, |n| known(query, n))
    } else {
        raw_rank
    };
    let ranked: Vec<NodeId> = pred.entries.iter().map(|e| e.0).collect();
    let positives: HashSet<NodeId> = ranked
        .iter()
        .copied()
        .filter(|&n| hit(n) || known(query, n))
        .collect();
    let positives = if positives.is_empty() {
        // Keep the query in MAP as a miss: one unseen positive.
        [NodeId::MAX].into_iter().collect()
    } else {
        positives
    };
    let top = pred.top();
    (
        QueryOutcome {
            budget: pred.budget,
            rank,
            raw_rank,
            predicted: top.map(|n| env.node_label(query, n)),
            success: top.is_some_and(hit),
            candidates: pred.entries.len(),
            effort,
        },
        (ranked, positives),
    )
}

/// Evaluates `queries` at every budget in `cfg.budgets`. Search budgets are
/// snapshots of one growing tree per query, which equals running each
/// budget separately because the search is deterministic.
pub fn evaluate<E: Environment>(
    env: &E,
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    queries: &[E::Query],
    mcts: &MctsConfig,
    cfg: &EvalConfig,
    known: &(dyn Fn(&E::Query, NodeId) -> bool + Sync),
) -> Result<EvalReport> {
    let mut budgets = cfg.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.is_empty() || budgets[0] == 0 {
        return Err(Error::Config(
            "eval.budgets must be non-empty and positive".into(),
        ));
    }
    type PerQuery = (QueryReport, Vec<(Vec<NodeId>, HashSet<NodeId>)>);
    let per: Vec<PerQuery> = queries
        .par_iter()
        .map(|q| -> Result<PerQuery> {
            let mut outcomes = Vec::new();
            let mut lists = Vec::new();
            let mut path = None;
            match cfg.method {
                DecodeMethod::Mcts => {
                    let mut tree: SearchTree<f32> = SearchTree::new();
                    for &b in &budgets {
                        while tree.simulations() < b {
                            tree.simulate(env, model, ps, q, mcts)?;
                        }
                        let pred = score_nodes(&tree);
                        let effort = Some(tree.first_hit().unwrap_or(tree.len()));
                        let (o, l) = outcome(env, q, &pred, known, cfg.filtered, effort);
                        outcomes.push(o);
                        lists.push(l);
                    }
                    let actions: Vec<u32> = tree.best_path().iter().map(|p| p.1).collect();
                    path = Some(render_path(env, q, &actions)?);
                }
                DecodeMethod::Beam => {
                    for &b in &budgets {
                        let pred = beam_decode(env, model, ps, q, b)?;
                        let (o, l) = outcome(env, q, &pred, known, cfg.filtered, None);
                        outcomes.push(o);
                        lists.push(l);
                    }
                }
            }
            Ok((
                QueryReport {
                    query: env.query_label(q),
                    outcomes,
                    path,
                },
                lists,
            ))
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (i, &b) in budgets.iter().enumerate() {
        let outs: Vec<&QueryOutcome> = per.iter().map(|p| &p.0.outcomes[i]).collect();
        let ranks: Vec<Option<usize>> = outs.iter().map(|o| o.rank).collect();
        let lists: Vec<(Vec<NodeId>, HashSet<NodeId>)> =
            per.iter().map(|p| p.1[i].clone()).collect();
        let n = outs.len().max(1) as f64;
        let efforts: Vec<usize> = outs.iter().filter_map(|o| o.effort).collect();
        reports.push(BudgetReport {
            budget: b,
            queries: outs.len(),
            accuracy: outs.iter().filter(|o| o.success).count() as f64 / n,
            hits1: hits_at_k(&ranks, 1),
            hits3: hits_at_k(&ranks, 3),
            hits10: hits_at_k(&ranks, 10),
            mrr: mrr(&ranks),
            map: map_score(&lists),
            reached: hits_at_k(&ranks, usize::MAX),
            mean_candidates: outs.iter().map(|o| o.candidates as f64).sum::<f64>() / n,
            mean_effort: (!efforts.is_empty())
                .then(|| efforts.iter().sum::<usize>() as f64 / efforts.len() as f64),
        });
    }
    Ok(EvalReport {
        method: cfg.method,
        filtered: cfg.filtered,
        budgets: reports,
        per_query: per.into_iter().map(|p| p.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::kg::build_dataset;
    use crate::env::{KbQuery, KbcEnv};
    use crate::mcts::SimulationRecord;
    use crate::model::ModelConfig;
    use crate::nn::Activation;
    use crate::seed::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn raw(v: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
        v.iter()
            .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
            .collect()
    }

    #[test]
    fn metric_hand_cases() {
        assert_eq!(hits_at_k(&[Some(1), Some(1)], 1), 1.0);
        assert_abs_diff_eq!(hits_at_k(&[Some(1), Some(3), None], 3), 2.0 / 3.0);
        assert_abs_diff_eq!(
            mrr(&[Some(1), Some(2), Some(4)]),
            0.583_333_333_333,
            epsilon = 1e-12
        );
        assert_eq!(mrr(&[None, None]), 0.0);
        let pos: HashSet<NodeId> = [7].into_iter().collect();
        assert_eq!(average_precision(&[7, 1, 2], &pos), Some(1.0));
        let pos: HashSet<NodeId> = [7, 9].into_iter().collect();
        assert_abs_diff_eq!(
            average_precision(&[7, 1, 9], &pos).unwrap(),
            0.833_333_333_333,
            epsilon = 1e-12
        );
        assert_eq!(average_precision(&[1], &HashSet::new()), None);
    }

    // Brute-force oracles written independently of the metric functions.
    fn oracle_hits(ranks: &[Option<usize>], k: usize) -> f64 {
        let mut c = 0.0;
        for r in ranks {
            if let Some(r) = r {
                if *r >= 1 && *r <= k {
                    c += 1.0;
                }
            }
        }
        c / ranks.len() as f64
    }

    fn oracle_ap(ranked: &[NodeId], pos: &HashSet<NodeId>) -> f64 {
        let mut total = 0.0;
        for p in pos {
            if let Some(idx) = ranked.iter().position(|n| n == p) {
                let above = ranked[..=idx].iter().filter(|n| pos.contains(n)).count();
                total += above as f64 / (idx + 1) as f64;
            }
        }
        total / pos.len() as f64
    }

    #[test]
    fn metrics_agree_with_brute_force() {
        let mut rng = stream_rng(3, Stream::Eval, 0);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let ranks: Vec<Option<usize>> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        None
                    } else {
                        Some(rng.gen_range(1..20))
                    }
                })
                .collect();
            for k in [1, 3, 10] {
                assert_eq!(hits_at_k(&ranks, k), oracle_hits(&ranks, k));
            }
            let mut rr = 0.0;
            for r in &ranks {
                rr += r.map(|r| 1.0 / r as f64).unwrap_or(0.0);
            }
            assert_eq!(mrr(&ranks), rr / n as f64);

            let lists: Vec<(Vec<NodeId>, HashSet<NodeId>)> = (0..rng.gen_range(1..6))
                .map(|_| {
                    let len = rng.gen_range(1..15);
                    let mut ranked: Vec<NodeId> = (0..40).collect();
                    for i in 0..len {
                        let j = rng.gen_range(i..40);
                        ranked.swap(i, j);
                    }
                    ranked.truncate(len);
                    let pos: HashSet<NodeId> = (0..rng.gen_range(1..5))
                        .map(|_| rng.gen_range(0..40))
                        .collect();
                    (ranked, pos)
                })
                .collect();
            let expect =
                lists.iter().map(|(r, p)| oracle_ap(r, p)).sum::<f64>() / lists.len() as f64;
            assert_abs_diff_eq!(map_score(&lists), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn hits_monotone_in_k() {
        let ranks = [Some(1), Some(5), None, Some(2), Some(12)];
        let mut prev = 0.0;
        for k in 1..20 {
            let h = hits_at_k(&ranks, k);
            assert!(h >= prev);
            prev = h;
        }
    }

    fn chain() -> (KbcEnv, KbQuery) {
        let ds = build_dataset(
            &raw(&[
                ("a", "r", "b"),
                ("a", "s", "c"),
                ("b", "r", "d"),
                ("c", "r", "d"),
            ]),
            &[],
            &raw(&[("a", "goal", "d")]),
            "_inv",
        )
        .unwrap();
        (KbcEnv::new(ds.graph.clone(), 2, 3, 3), ds.test[0])
    }

    fn model(env: &KbcEnv, seed: u64) -> (WalkerModel, ParamStore<f32>) {
        let cfg = ModelConfig {
            state_dim: 6,
            history_dim: 6,
            hidden: 6,
            stop_hidden: 4,
            stop_activation: Activation::Tanh,
            tau: 1.0,
        };
        let mut ps = ParamStore::new();
        let m = WalkerModel::new(
            &mut ps,
            &env.layout(),
            &cfg,
            &mut stream_rng(seed, Stream::Init, 0),
        )
        .unwrap();
        (m, ps)
    }

    #[test]
    fn score_formula_hand_cases() {
        let (env, q) = chain();
        let (m, ps) = model(&env, 1);
        let mut tree: SearchTree<f32> = SearchTree::new();
        let root = tree.root(&env, &m, &ps, &q).unwrap();
        let v = tree.node(root).value();
        let rec = SimulationRecord {
            steps: vec![(root, 0, 3)],
            terminal: root,
            value: v,
            final_node: q.source,
        };
        tree.backup(&rec, 1.0);
        let pred = score_nodes(&tree);
        assert_eq!(pred.entries.len(), 1);
        assert_abs_diff_eq!(pred.entries[0].1, v, epsilon = 1e-12);
        // Two more stops at the root: Score = 3/3 · V.
        tree.backup(&rec, 1.0);
        tree.backup(&rec, 1.0);
        assert_abs_diff_eq!(score_nodes(&tree).entries[0].1, v, epsilon = 1e-12);
    }

    #[test]
    fn score_two_leaves_same_node() {
        // Weighted mixture 2/3 · 0.8 + 1/3 · 0.5 = 0.7, computed with the
        // same arithmetic as the scorer.
        let total = 3.0;
        let s = 2.0 / total * 0.8 + 1.0 / total * 0.5;
        assert_abs_diff_eq!(s, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn search_scores_are_bounded_and_sorted() {
        let (env, q) = chain();
        let (m, ps) = model(&env, 2);
        let cfg = MctsConfig {
            simulations: 64,
            c: 1.0,
            beta: 0.5,
            gamma: 1.0,
            ..MctsConfig::default()
        };
        let (tree, _) = crate::mcts::run_search(&env, &m, &ps, &q, &cfg).unwrap();
        let pred = score_nodes(&tree);
        let total: f64 = pred.entries.iter().map(|e| e.1).sum();
        let vmax = tree.nodes().iter().map(|n| n.value()).fold(0.0, f64::max);
        assert!(total <= vmax + 1e-9);
        assert!(pred.entries.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(pred.entries.len() <= tree.simulations());
        let mut seen = HashSet::new();
        assert!(pred.entries.iter().all(|e| seen.insert(e.0)));
    }

    /// Every complete walk of the toy graph with its log-probability.
    fn enumerate(
        env: &KbcEnv,
        m: &WalkerModel,
        ps: &ParamStore<f32>,
        q: &KbQuery,
    ) -> Vec<(f64, NodeId)> {
        let mut out = Vec::new();
        let s0 = WalkState::initial(env, *q);
        let e0 = m
            .root(ps, env, q, &feasible_actions(env, &s0).unwrap())
            .unwrap();
        let mut stack = vec![(0.0, s0, e0)];
        while let Some((lp, s, enc)) = stack.pop() {
            let pi = enc.policy(1.0);
            for (a, &p) in pi.iter().enumerate() {
                let lp2 = lp + (p as f64).ln();
                let ns = env_step(env, &s, a).unwrap();
                if a == 0 {
                    out.push((lp2, ns.node));
                } else {
                    let c = feasible_actions(env, &ns).unwrap();
                    let ne = m.child(ps, env, q, &enc, a, ns.node, &c).unwrap();
                    stack.push((lp2, ns, ne));
                }
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        out
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        let (env, q) = chain();
        let (m, ps) = model(&env, 3);
        let all = enumerate(&env, &m, &ps, &q);
        let full = beam_decode(&env, &m, &ps, &q, all.len()).unwrap();
        let mut best: BTreeMap<NodeId, f64> = BTreeMap::new();
        for &(lp, n) in &all {
            let e = best.entry(n).or_insert(f64::NEG_INFINITY);
            *e = e.max(lp);
        }
        assert_eq!(full.entries.len(), best.len());
        for (n, s) in &full.entries {
            assert_abs_diff_eq!(*s, best[n], epsilon = 1e-5);
        }
        // Beam 1 is the greedy walk.
        let greedy = beam_decode(&env, &m, &ps, &q, 1).unwrap();
        let mut s = WalkState::initial(&env, q);
        let mut enc = m
            .root(&ps, &env, &q, &feasible_actions(&env, &s).unwrap())
            .unwrap();
        loop {
            let a = crate::nn::ops::argmax(&enc.u);
            s = env_step(&env, &s, a).unwrap();
            if a == 0 {
                break;
            }
            let c = feasible_actions(&env, &s).unwrap();
            enc = m.child(&ps, &env, &q, &enc, a, s.node, &c).unwrap();
        }
        assert_eq!(greedy.top(), Some(s.node));
    }

    #[test]
    fn filtered_rank_never_worse() {
        let pred = RankedPrediction {
            entries: vec![(5, 0.9), (6, 0.8), (7, 0.7), (8, 0.1)],
            budget: 4,
            leaves: vec![1; 4],
        };
        let raw = pred.rank_by(|n| n == 7, |_| false);
        let filt = pred.rank_by(|n| n == 7, |n| n == 5);
        assert_eq!(raw, Some(3));
        assert_eq!(filt, Some(2));
        assert_eq!(pred.rank_by(|n| n == 99, |_| false), None);
    }

    #[test]
    fn path_rendering() {
        let ds = build_dataset(
            &raw(&[
                ("Obama", "BornIn", "Hawaii"),
                ("Hawaii", "LocatedIn", "USA"),
            ]),
            &[],
            &raw(&[("Obama", "Citizenship", "USA")]),
            "_inv",
        )
        .unwrap();
        let env = KbcEnv::new(ds.graph.clone(), 3, 2, 2);
        let q = ds.test[0];
        let s = WalkState::initial(&env, q);
        let c = feasible_actions(&env, &s).unwrap();
        assert_eq!(c.edges.len(), 1);
        let s1 = env_step(&env, &s, 1).unwrap();
        let c1 = feasible_actions(&env, &s1).unwrap();
        let a = 1 + c1
            .edges
            .iter()
            .position(|e| env.edge_label(&q, e) == "LocatedIn")
            .unwrap();
        let text = render_path(&env, &q, &[1, a as u32, 0]).unwrap();
        assert_eq!(text, "Obama -BornIn-> Hawaii -LocatedIn-> USA");
    }

    #[test]
    fn empty_test_set_gives_empty_report() {
        let (env, _) = chain();
        let (m, ps) = model(&env, 4);
        let r = evaluate(
            &env,
            &m,
            &ps,
            &[],
            &MctsConfig::default(),
            &EvalConfig::default(),
            &|_, _| false,
        )
        .unwrap();
        assert!(r.per_query.is_empty());
        assert_eq!(r.budgets[0].queries, 0);
    }

    #[test]
    fn budget_snapshots_equal_fresh_searches() {
        let (env, q) = chain();
        let (m, ps) = model(&env, 5);
        let mcts = MctsConfig {
            simulations: 1,
            c: 1.0,
            beta: 0.5,
            gamma: 0.9,
            ..MctsConfig::default()
        };
        let cfg = EvalConfig {
            method: DecodeMethod::Mcts,
            budgets: vec![3, 10],
            filtered: false,
        };
        let r = evaluate(&env, &m, &ps, &[q], &mcts, &cfg, &|_, _| false).unwrap();
        for (i, b) in [3usize, 10].into_iter().enumerate() {
            let fresh = MctsConfig {
                simulations: b,
                ..mcts.clone()
            };
            let (tree, _) = crate::mcts::run_search(&env, &m, &ps, &q, &fresh).unwrap();
            let pred = score_nodes(&tree);
            assert_eq!(r.per_query[0].outcomes[i].candidates, pred.entries.len());
            assert_eq!(
                r.per_query[0].outcomes[i].predicted,
                pred.top().map(|n| env.node_label(&q, n))
            );
        }
    }
}
