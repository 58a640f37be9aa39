//! The walker network: candidate encoder with max-pooling, GRU history,
//! and one score vector shared by the Q head (sigmoid) and the policy head
//! (temperature softmax).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CandidateSet, EnvLayout, Environment, FeatureSlot, Features};
use crate::error::{Error, Result};
use crate::nn::layers::uniform_tensor;
use crate::nn::ops::{axpy, dot, softmax_unchecked};
use crate::nn::{
    sigmoid, Activation, Gradients, Gru, GruCache, Input, InputLayout, Linear, Mlp, MlpCache,
    ParamId, ParamStore, Real, Slot,
};

const EMBEDDING_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width `M` of candidate and state encodings.
    pub state_dim: usize,
    /// GRU hidden width.
    pub history_dim: usize,
    /// Hidden width of the candidate and state encoders.
    pub hidden: usize,
    /// Hidden width of the STOP score head.
    pub stop_hidden: usize,
    pub stop_activation: Activation,
    /// Softmax temperature of the policy head.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            state_dim: 64,
            history_dim: 64,
            hidden: 64,
            stop_hidden: 16,
            stop_activation: Activation::Tanh,
            tau: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("history_dim", self.history_dim),
            ("hidden", self.hidden),
            ("stop_hidden", self.stop_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "model.tau must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Scores of one candidate set: index 0 is STOP.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionScores<S> {
    pub u: Vec<S>,
    pub q: Vec<S>,
    pub pi: Vec<S>,
}

impl<S: Real> ActionScores<S> {
    pub fn from_scores(u: Vec<S>, tau: f64) -> Self {
        let q = u.iter().map(|&x| sigmoid(x)).collect();
        let pi = softmax_unchecked(&u, S::lit(tau));
        ActionScores { u, q, pi }
    }
}

/// Everything the search and decoders need about one encoded state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateEncoding<S> {
    /// History vector `q_t`.
    pub q: Vec<S>,
    pub h_s: Vec<S>,
    pub h_a: Vec<S>,
    /// Candidate encodings, `k × M` row-major.
    pub h_cand: Vec<S>,
    /// Scores for STOP followed by the `k` edges.
    pub u: Vec<S>,
}

impl<S: Real> StateEncoding<S> {
    pub fn num_actions(&self) -> usize {
        self.u.len()
    }

    pub fn candidate(&self, j: usize, m: usize) -> &[S] {
        &self.h_cand[j * m..(j + 1) * m]
    }

    /// `V(s) = Q(s, STOP)`.
    pub fn terminal_value(&self) -> S {
        sigmoid(self.u[0])
    }

    pub fn q_values(&self) -> Vec<S> {
        self.u.iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn policy(&self, tau: f64) -> Vec<S> {
        softmax_unchecked(&self.u, S::lit(tau))
    }

    pub fn scores(&self, tau: f64) -> ActionScores<S> {
        ActionScores::from_scores(self.u.clone(), tau)
    }
}

#[derive(Clone, Debug)]
pub struct WalkerModel {
    cfg: ModelConfig,
    tables: Vec<ParamId>,
    node_slots: Vec<Slot>,
    query_slots: Vec<Slot>,
    candidate_enc: Mlp,
    state_enc: Mlp,
    stop_head: Mlp,
    query_proj: Linear,
    gru: Gru,
}

/// Forward record of one state, kept for backpropagation.
#[derive(Clone, Debug)]
struct StepTape<S> {
    /// Dense GRU input `[h_A, h_chosen]` of the step that produced `q`
    /// (zeros for the initial step).
    gru_dense: Vec<S>,
    node_feats: Features,
    gru: GruCache<S>,
    cand_feats: Vec<Features>,
    cand: Vec<MlpCache<S>>,
    pool_src: Vec<u32>,
    state: MlpCache<S>,
    stop_in: Vec<S>,
    stop: MlpCache<S>,
    enc: StateEncoding<S>,
}

/// Recorded forward pass over one trajectory.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    query_feats: Features,
    steps: Vec<StepTape<S>>,
    actions: Vec<u32>,
}

impl<S: Real> Tape<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn encoding(&self, t: usize) -> &StateEncoding<S> {
        &self.steps[t].enc
    }

    pub fn actions(&self) -> &[u32] {
        &self.actions
    }
}

fn slots(layout: &[FeatureSlot], tables: &[ParamId], dims: &[usize]) -> Vec<Slot> {
    layout
        .iter()
        .map(|s| match *s {
            FeatureSlot::OneHot(w) => Slot::OneHot(w),
            FeatureSlot::Embed(i) => Slot::Embed {
                table: tables[i],
                dim: dims[i],
            },
        })
        .collect()
}

impl WalkerModel {
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        layout: &EnvLayout,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        for (part, s) in [
            ("node", &layout.node),
            ("edge", &layout.edge),
            ("query", &layout.query),
        ] {
            if s.is_empty() {
                return Err(Error::dim(format!("{part} features"), 1, 0));
            }
            for slot in s.iter() {
                if let FeatureSlot::Embed(i) = slot {
                    if *i >= layout.tables.len() {
                        return Err(Error::Config(format!(
                            "{part} feature uses missing table {i}"
                        )));
                    }
                }
            }
        }
        let mut tables = Vec::new();
        let mut dims = Vec::new();
        for t in &layout.tables {
            if t.rows == 0 || t.dim == 0 {
                return Err(Error::dim(t.name.clone(), 1, 0));
            }
            tables.push(store.add(
                &t.name,
                uniform_tensor(rng, &[t.rows, t.dim], EMBEDDING_INIT),
            )?);
            dims.push(t.dim);
        }
        let node_slots = slots(&layout.node, &tables, &dims);
        let edge_slots = slots(&layout.edge, &tables, &dims);
        let query_slots = slots(&layout.query, &tables, &dims);
        let m = cfg.state_dim;
        let cand_slots: Vec<Slot> = node_slots.iter().chain(&edge_slots).copied().collect();
        let candidate_enc = Mlp::new(
            store,
            "candidate",
            InputLayout::new(0, cand_slots),
            cfg.hidden,
            m,
            Activation::Relu,
            Activation::Linear,
            rng,
        )?;
        let state_enc = Mlp::new(
            store,
            "state",
            InputLayout::dense(cfg.history_dim),
            cfg.hidden,
            m,
            Activation::Relu,
            Activation::Linear,
            rng,
        )?;
        let stop_head = Mlp::new(
            store,
            "stop",
            InputLayout::dense(2 * m),
            cfg.stop_hidden,
            1,
            cfg.stop_activation,
            Activation::Linear,
            rng,
        )?;
        let query_proj = Linear::new(
            store,
            "query",
            InputLayout::new(0, query_slots.clone()),
            cfg.history_dim,
            rng,
        )?;
        let gru = Gru::new(
            store,
            "history",
            InputLayout::new(2 * m, node_slots.clone()),
            cfg.history_dim,
            rng,
        )?;
        Ok(WalkerModel {
            cfg: cfg.clone(),
            tables,
            node_slots,
            query_slots,
            candidate_enc,
            state_enc,
            stop_head,
            query_proj,
            gru,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    pub fn tau(&self) -> f64 {
        self.cfg.tau
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn num_node_slots(&self) -> usize {
        self.node_slots.len()
    }

    pub fn num_query_slots(&self) -> usize {
        self.query_slots.len()
    }

    /// `h_{n'} = f_A(candidate features)` for every edge candidate.
    pub fn encode_candidates<S: Real>(
        &self,
        ps: &ParamStore<S>,
        feats: &[Features],
    ) -> Result<Vec<S>> {
        let m = self.cfg.state_dim;
        let mut out = Vec::with_capacity(feats.len() * m);
        for f in feats {
            out.extend(self.candidate_enc.forward(ps, Input::new(&[], f))?.out);
        }
        Ok(out)
    }

    /// Coordinate-wise max over candidate rows; zero vector when there are
    /// none. Also returns, per coordinate, the row that supplied the max.
    pub fn pool_actions<S: Real>(h_cand: &[S], m: usize) -> (Vec<S>, Vec<u32>) {
        if h_cand.is_empty() {
            return (vec![S::zero(); m], vec![u32::MAX; m]);
        }
        let mut h = h_cand[..m].to_vec();
        let mut src = vec![0u32; m];
        for (j, row) in h_cand.chunks_exact(m).enumerate().skip(1) {
            for i in 0..m {
                if row[i] > h[i] {
                    h[i] = row[i];
                    src[i] = j as u32;
                }
            }
        }
        (h, src)
    }

    /// `q_0`: one GRU step from the projected query with input `[0, 0, n_S]`.
    pub fn init_history<S: Real>(
        &self,
        ps: &ParamStore<S>,
        query_feats: &[u32],
        source_feats: &[u32],
    ) -> Result<Vec<S>> {
        let h0 = self.query_proj.forward(ps, Input::new(&[], query_feats))?;
        let zeros = vec![S::zero(); 2 * self.cfg.state_dim];
        Ok(self.gru.step(ps, &h0, Input::new(&zeros, source_feats))?.h)
    }

    /// `q_{t+1} = GRU(q_t, [h_A, h_chosen, n_{t+1}])`.
    pub fn update_history<S: Real>(
        &self,
        ps: &ParamStore<S>,
        q: &[S],
        h_a: &[S],
        h_chosen: &[S],
        next_feats: &[u32],
    ) -> Result<Vec<S>> {
        let m = self.cfg.state_dim;
        if h_a.len() != m || h_chosen.len() != m {
            return Err(Error::dim(
                "history.input.weight",
                m,
                h_a.len().min(h_chosen.len()),
            ));
        }
        let x: Vec<S> = h_a.iter().chain(h_chosen).copied().collect();
        Ok(self.gru.step(ps, q, Input::new(&x, next_feats))?.h)
    }

    /// Scores from a history vector and candidate encodings.
    pub fn score_actions<S: Real>(
        &self,
        ps: &ParamStore<S>,
        q: &[S],
        h_a: &[S],
        h_cand: &[S],
    ) -> Result<(Vec<S>, Vec<S>)> {
        let h_s = self.state_enc.forward(ps, Input::dense(q))?.out;
        let stop_in: Vec<S> = h_s.iter().chain(h_a).copied().collect();
        let u0 = self.stop_head.forward(ps, Input::dense(&stop_in))?.out[0];
        let m = self.cfg.state_dim;
        let mut u = Vec::with_capacity(h_cand.len() / m + 1);
        u.push(u0);
        for row in h_cand.chunks_exact(m) {
            u.push(dot(&h_s, row));
        }
        Ok((h_s, u))
    }

    fn candidate_features<E: Environment>(
        env: &E,
        query: &E::Query,
        cands: &CandidateSet,
    ) -> Vec<Features> {
        cands
            .edges
            .iter()
            .map(|e| env.candidate_features(query, e))
            .collect()
    }

    /// Encodes a state given its history vector.
    pub fn evaluate<S: Real, E: Environment>(
        &self,
        ps: &ParamStore<S>,
        env: &E,
        query: &E::Query,
        q: Vec<S>,
        cands: &CandidateSet,
    ) -> Result<StateEncoding<S>> {
        let feats = Self::candidate_features(env, query, cands);
        let h_cand = self.encode_candidates(ps, &feats)?;
        let (h_a, _) = Self::pool_actions(&h_cand, self.cfg.state_dim);
        let (h_s, u) = self.score_actions(ps, &q, &h_a, &h_cand)?;
        Ok(StateEncoding {
            q,
            h_s,
            h_a,
            h_cand,
            u,
        })
    }

    /// Encoding of the query's initial state.
    pub fn root<S: Real, E: Environment>(
        &self,
        ps: &ParamStore<S>,
        env: &E,
        query: &E::Query,
        cands: &CandidateSet,
    ) -> Result<StateEncoding<S>> {
        let qf = env.query_features(query);
        let nf = env.node_features(query, env.source(query));
        let q = self.init_history(ps, &qf, &nf)?;
        self.evaluate(ps, env, query, q, cands)
    }

    /// Encoding of the state reached from `parent` by edge action `action`
    /// (1-based) landing on `next`.
    #[allow(clippy::too_many_arguments)]
    pub fn child<S: Real, E: Environment>(
        &self,
        ps: &ParamStore<S>,
        env: &E,
        query: &E::Query,
        parent: &StateEncoding<S>,
        action: usize,
        next: crate::env::NodeId,
        cands: &CandidateSet,
    ) -> Result<StateEncoding<S>> {
        if action == 0 || action >= parent.num_actions() {
            return Err(Error::Contract(format!(
                "child of action {action} is not an edge"
            )));
        }
        let m = self.cfg.state_dim;
        let nf = env.node_features(query, next);
        let q = self.update_history(
            ps,
            &parent.q,
            &parent.h_a,
            parent.candidate(action - 1, m),
            &nf,
        )?;
        self.evaluate(ps, env, query, q, cands)
    }

    fn tape_step<S: Real, E: Environment>(
        &self,
        ps: &ParamStore<S>,
        env: &E,
        query: &E::Query,
        h_prev: &[S],
        gru_dense: Vec<S>,
        node_feats: Features,
        cands: &CandidateSet,
    ) -> Result<StepTape<S>> {
        let m = self.cfg.state_dim;
        let gru = self
            .gru
            .step(ps, h_prev, Input::new(&gru_dense, &node_feats))?;
        let cand_feats = Self::candidate_features(env, query, cands);
        let mut cand = Vec::with_capacity(cand_feats.len());
        let mut h_cand = Vec::with_capacity(cand_feats.len() * m);
        for f in &cand_feats {
            let c = self.candidate_enc.forward(ps, Input::new(&[], f))?;
            h_cand.extend_from_slice(&c.out);
            cand.push(c);
        }
        let (h_a, pool_src) = Self::pool_actions(&h_cand, m);
        let state = self.state_enc.forward(ps, Input::dense(&gru.h))?;
        let stop_in: Vec<S> = state.out.iter().chain(&h_a).copied().collect();
        let stop = self.stop_head.forward(ps, Input::dense(&stop_in))?;
        let mut u = Vec::with_capacity(cand_feats.len() + 1);
        u.push(stop.out[0]);
        for row in h_cand.chunks_exact(m) {
            u.push(dot(&state.out, row));
        }
        let enc = StateEncoding {
            q: gru.h.clone(),
            h_s: state.out.clone(),
            h_a,
            h_cand,
            u,
        };
        Ok(StepTape {
            gru_dense,
            node_feats,
            gru,
            cand_feats,
            cand,
            pool_src,
            state,
            stop_in,
            stop,
            enc,
        })
    }

    /// Replays `actions` from the query's source, recording every state.
    /// The last action must be STOP.
    pub fn forward_trajectory<S: Real, E: Environment>(
        &self,
        ps: &ParamStore<S>,
        env: &E,
        query: &E::Query,
        actions: &[u32],
    ) -> Result<Tape<S>> {
        use crate::env::{env_step, feasible_actions, WalkState};
        if actions.last() != Some(&0) {
            return Err(Error::Contract("trajectory must end with STOP".into()));
        }
        let m = self.cfg.state_dim;
        let query_feats = env.query_features(query);
        let h0 = self.query_proj.forward(ps, Input::new(&[], &query_feats))?;
        let mut state = WalkState::initial(env, query.clone());
        let mut cands = feasible_actions(env, &state)?;
        let mut steps = Vec::with_capacity(actions.len());
        steps.push(self.tape_step(
            ps,
            env,
            query,
            &h0,
            vec![S::zero(); 2 * m],
            env.node_features(query, state.node),
            &cands,
        )?);
        for &a in &actions[..actions.len() - 1] {
            let a = a as usize;
            if a == 0 {
                return Err(Error::Contract(
                    "STOP before the end of a trajectory".into(),
                ));
            }
            state = env_step(env, &state, a)?;
            let prev = &steps.last().expect("non-empty").enc;
            if a >= prev.num_actions() {
                return Err(Error::Contract(format!("action {a} out of range")));
            }
            let gru_dense: Vec<S> = prev
                .h_a
                .iter()
                .chain(prev.candidate(a - 1, m))
                .copied()
                .collect();
            let h_prev = prev.q.clone();
            cands = feasible_actions(env, &state)?;
            let nf = env.node_features(query, state.node);
            steps.push(self.tape_step(ps, env, query, &h_prev, gru_dense, nf, &cands)?);
        }
        Ok(Tape {
            query_feats,
            steps,
            actions: actions.to_vec(),
        })
    }

    /// Backpropagates score gradients `du[t]` (one vector per recorded state,
    /// or empty for none) through the whole trajectory.
    pub fn backward_trajectory<S: Real>(
        &self,
        ps: &ParamStore<S>,
        tape: &Tape<S>,
        du: &[Vec<S>],
        grads: &mut Gradients<S>,
    ) {
        let m = self.cfg.state_dim;
        let hd = self.cfg.history_dim;
        let mut dq = vec![S::zero(); hd];
        // Gradient w.r.t. [h_A, h_chosen] of the current step, coming from
        // the GRU step that follows it.
        let mut pending: Option<Vec<S>> = None;
        for t in (0..tape.steps.len()).rev() {
            let st = &tape.steps[t];
            let enc = &st.enc;
            let k = enc.num_actions() - 1;
            let mut dh_s = vec![S::zero(); m];
            let mut dh_a = vec![S::zero(); m];
            let mut dh_cand = vec![S::zero(); k * m];
            let mut touched = vec![false; k];
            let du_t = du.get(t).map(Vec::as_slice).unwrap_or(&[]);
            let mut d_stop = S::zero();
            for (j, &d) in du_t.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                if j == 0 {
                    d_stop = d;
                } else {
                    axpy(d, enc.candidate(j - 1, m), &mut dh_s);
                    axpy(d, &enc.h_s, &mut dh_cand[(j - 1) * m..j * m]);
                    touched[j - 1] = true;
                }
            }
            if !d_stop.is_zero() {
                let mut d_in = vec![S::zero(); 2 * m];
                self.stop_head.backward(
                    ps,
                    Input::dense(&st.stop_in),
                    &st.stop,
                    &[d_stop],
                    grads,
                    Some(&mut d_in),
                );
                for i in 0..m {
                    dh_s[i] += d_in[i];
                    dh_a[i] += d_in[m + i];
                }
            }
            if let Some(p) = pending.take() {
                let a = tape.actions[t] as usize;
                for i in 0..m {
                    dh_a[i] += p[i];
                }
                if a > 0 {
                    axpy(S::one(), &p[m..2 * m], &mut dh_cand[(a - 1) * m..a * m]);
                    touched[a - 1] = true;
                }
            }
            for i in 0..m {
                let src = st.pool_src[i];
                if src != u32::MAX && !dh_a[i].is_zero() {
                    dh_cand[src as usize * m + i] += dh_a[i];
                    touched[src as usize] = true;
                }
            }
            for j in 0..k {
                if touched[j] {
                    self.candidate_enc.backward(
                        ps,
                        Input::new(&[], &st.cand_feats[j]),
                        &st.cand[j],
                        &dh_cand[j * m..(j + 1) * m],
                        grads,
                        None,
                    );
                }
            }
            if dh_s.iter().any(|d| !d.is_zero()) {
                self.state_enc.backward(
                    ps,
                    Input::dense(&st.gru.h),
                    &st.state,
                    &dh_s,
                    grads,
                    Some(&mut dq),
                );
            }
            let mut dh_prev = vec![S::zero(); hd];
            let mut dx = vec![S::zero(); 2 * m];
            self.gru.backward(
                ps,
                Input::new(&st.gru_dense, &st.node_feats),
                &st.gru,
                &dq,
                grads,
                &mut dh_prev,
                if t > 0 { Some(&mut dx) } else { None },
            );
            if t > 0 {
                pending = Some(dx);
            } else {
                self.query_proj.backward(
                    ps,
                    Input::new(&[], &tape.query_feats),
                    &dh_prev,
                    grads,
                    None,
                );
            }
            dq = dh_prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{feasible_actions, KbcEnv, Puzzle, PuzzleEnv, WalkState};
    use crate::nn::{grad_check, sigmoid_vec, softmax_tau};
    use crate::seed::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            state_dim: 6,
            history_dim: 5,
            hidden: 4,
            stop_hidden: 3,
            stop_activation: Activation::Tanh,
            tau: 1.0,
        }
    }

    fn toy_kb() -> crate::env::KbDataset {
        let raw = |v: &[(&str, &str, &str)]| {
            v.iter()
                .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
                .collect::<Vec<_>>()
        };
        crate::env::kg::build_dataset(
            &raw(&[
                ("Obama", "BornIn", "Hawaii"),
                ("Hawaii", "LocatedIn", "USA"),
                ("Obama", "Married", "Michelle"),
                ("Michelle", "BornIn", "Chicago"),
                ("Chicago", "LocatedIn", "USA"),
            ]),
            &[],
            &raw(&[("Obama", "Citizenship", "USA")]),
            "_inv",
        )
        .unwrap()
    }

    fn build<S: Real>(
        layout: &EnvLayout,
        cfg: &ModelConfig,
        seed: u64,
    ) -> (WalkerModel, ParamStore<S>) {
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let m = WalkerModel::new(&mut ps, layout, cfg, &mut rng).unwrap();
        (m, ps)
    }

    fn zero_all<S: Real>(ps: &mut ParamStore<S>) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            ps.data_mut(id).iter_mut().for_each(|x| *x = S::zero());
        }
    }

    #[test]
    fn zero_parameters_give_neutral_scores() {
        let ds = toy_kb();
        let env = KbcEnv::new(ds.graph.clone(), 3, 2, 3);
        let (model, mut ps) = build::<f64>(&env.layout(), &small_cfg(), 1);
        zero_all(&mut ps);
        let q = ds.test[0];
        let s = WalkState::initial(&env, q);
        let cands = feasible_actions(&env, &s).unwrap();
        let enc = model.root(&ps, &env, &q, &cands).unwrap();
        assert!(enc.h_cand.iter().all(|&x| x == 0.0));
        assert!(enc.u.iter().all(|&x| x == 0.0));
        assert_eq!(enc.terminal_value(), 0.5);
        let k = enc.num_actions() as f64;
        assert!(enc.policy(1.0).iter().all(|&p| (p - 1.0 / k).abs() < 1e-12));
        // q_0 = 0.5 * projected query, and the projection is zero here.
        assert!(enc.q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_gru_halves_projected_query() {
        let ds = toy_kb();
        let env = KbcEnv::new(ds.graph.clone(), 3, 2, 3);
        let (model, mut ps) = build::<f64>(&env.layout(), &small_cfg(), 2);
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.name(id).starts_with("history.") {
                ps.data_mut(id).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let q = ds.test[0];
        let qf = env.query_features(&q);
        let nf = env.node_features(&q, q.source);
        let h0 = model.query_proj.forward(&ps, Input::new(&[], &qf)).unwrap();
        let q0 = model.init_history(&ps, &qf, &nf).unwrap();
        for (a, b) in q0.iter().zip(&h0) {
            assert_abs_diff_eq!(*a, 0.5 * b, epsilon = 1e-15);
        }
    }

    #[test]
    fn pooling_cases() {
        let (h, _) = WalkerModel::pool_actions(&[1.0, -2.0, -1.0, 2.0], 2);
        assert_eq!(h, vec![1.0, 2.0]);
        let (h, _) = WalkerModel::pool_actions(&[0.3, -0.7], 2);
        assert_eq!(h, vec![0.3, -0.7]);
        let (h, src) = WalkerModel::pool_actions::<f32>(&[], 3);
        assert_eq!(h, vec![0.0; 3]);
        assert!(src.iter().all(|&s| s == u32::MAX));
    }

    #[test]
    fn candidate_encoding_matches_per_candidate_loop() {
        let env = PuzzleEnv::new(11, 8);
        let (model, ps) = build::<f64>(&env.layout(), &small_cfg(), 3);
        let puzzle = Puzzle::new(8, 5, 3, 4).unwrap();
        let s = WalkState::initial(&env, puzzle);
        let cands = feasible_actions(&env, &s).unwrap();
        let feats: Vec<Features> = cands
            .edges
            .iter()
            .map(|e| env.candidate_features(&puzzle, e))
            .collect();
        let all = model.encode_candidates(&ps, &feats).unwrap();
        // Oracle: expand each candidate to its dense one-hot vector and run
        // the two layers with plain loops.
        let w1 = ps.by_name("candidate.0.weight").unwrap();
        let b1 = ps.by_name("candidate.0.bias").unwrap().data();
        let w2 = ps.by_name("candidate.1.weight").unwrap();
        let b2 = ps.by_name("candidate.1.bias").unwrap().data();
        let (inw, hid) = (w1.shape()[0], w1.shape()[1]);
        for (j, f) in feats.iter().enumerate() {
            let mut x = vec![0.0; inw];
            let offsets = [0, 50, 100, 150, 200, 250, 300];
            for (slot, &idx) in f.iter().enumerate() {
                x[offsets[slot] + idx as usize] = 1.0;
            }
            let mut h = vec![0.0; hid];
            for o in 0..hid {
                let mut acc = b1[o];
                for i in 0..inw {
                    acc += x[i] * w1.data()[i * hid + o];
                }
                h[o] = f64::max(acc, 0.0);
            }
            for o in 0..6 {
                let mut acc = b2[o];
                for i in 0..hid {
                    acc += h[i] * w2.data()[i * 6 + o];
                }
                assert_abs_diff_eq!(all[j * 6 + o], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn permuting_candidates_permutes_scores() {
        let ds = toy_kb();
        let env = KbcEnv::new(ds.graph.clone(), 3, 2, 3);
        let (model, ps) = build::<f64>(&env.layout(), &small_cfg(), 4);
        let q = ds.test[0];
        let s = WalkState::initial(&env, q);
        let cands = feasible_actions(&env, &s).unwrap();
        assert!(cands.edges.len() >= 2);
        let a = model.root(&ps, &env, &q, &cands).unwrap();
        let mut rev = cands.clone();
        rev.edges.reverse();
        let b = model.root(&ps, &env, &q, &rev).unwrap();
        assert_abs_diff_eq!(a.u[0], b.u[0], epsilon = 1e-12);
        let k = cands.edges.len();
        for j in 0..k {
            assert_abs_diff_eq!(a.u[1 + j], b.u[k - j], epsilon = 1e-12);
        }
    }

    #[test]
    fn shared_scores_agree_on_argmax() {
        // 1000 random parameter draws of a small model on a puzzle state.
        let env = PuzzleEnv::new(11, 4);
        let puzzle = Puzzle::new(8, 5, 3, 4).unwrap();
        let s = WalkState::initial(&env, puzzle);
        let cands = feasible_actions(&env, &s).unwrap();
        let mut cfg = small_cfg();
        cfg.tau = 0.7;
        for seed in 0..1000 {
            let (model, ps) = build::<f32>(&env.layout(), &cfg, seed);
            let enc = model.root(&ps, &env, &puzzle, &cands).unwrap();
            let sc = enc.scores(cfg.tau);
            let am = |v: &[f32]| crate::nn::ops::argmax(v);
            assert_eq!(am(&sc.q), am(&sc.u), "seed {seed}");
            assert_eq!(am(&sc.pi), am(&sc.u), "seed {seed}");
            assert_eq!(sc.q, sigmoid_vec(&sc.u));
            let pi = softmax_tau(&sc.u, cfg.tau).unwrap();
            assert_eq!(sc.pi, pi);
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_finite(seed in 0u64..500, fill in -3.0f32..3.0) {
            let env = PuzzleEnv::new(11, 4);
            let puzzle = Puzzle::new(9, 7, 4, 6).unwrap();
            let s = WalkState::initial(&env, puzzle);
            let cands = feasible_actions(&env, &s).unwrap();
            let (model, mut ps) = build::<f32>(&env.layout(), &small_cfg(), seed);
            if seed % 2 == 0 {
                for id in ps.ids().collect::<Vec<_>>() {
                    ps.data_mut(id).iter_mut().for_each(|x| *x = fill);
                }
            }
            let enc = model.root(&ps, &env, &puzzle, &cands).unwrap();
            let sc = enc.scores(1.0);
            prop_assert!(sc.u.iter().chain(&sc.q).chain(&sc.pi).all(|x| x.is_finite()));
            prop_assert!(sc.q.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn tape_matches_incremental_encoding() {
        let env = PuzzleEnv::new(11, 4);
        let (model, ps) = build::<f64>(&env.layout(), &small_cfg(), 5);
        let puzzle = Puzzle::new(8, 5, 3, 4).unwrap();
        let actions = [6u32, 8, 9, 0];
        let tape = model
            .forward_trajectory(&ps, &env, &puzzle, &actions)
            .unwrap();
        let mut s = WalkState::initial(&env, puzzle);
        let mut enc = model
            .root(&ps, &env, &puzzle, &feasible_actions(&env, &s).unwrap())
            .unwrap();
        assert_eq!(&enc, tape.encoding(0));
        for (t, &a) in actions[..3].iter().enumerate() {
            let next = crate::env::env_step(&env, &s, a as usize).unwrap();
            let cands = feasible_actions(&env, &next).unwrap();
            enc = model
                .child(&ps, &env, &puzzle, &enc, a as usize, next.node, &cands)
                .unwrap();
            assert_eq!(&enc, tape.encoding(t + 1));
            s = next;
        }
    }

    fn trajectory_loss(
        model: &WalkerModel,
        env: &PuzzleEnv,
        puzzle: &Puzzle,
        actions: &[u32],
        ps: &ParamStore<f64>,
        grads: Option<&mut Gradients<f64>>,
    ) -> Result<f64> {
        let tape = model.forward_trajectory(ps, env, puzzle, actions)?;
        // Arbitrary smooth loss touching every score of every state:
        // sum_t sum_j w_tj * Q_tj + log pi_t(a_t).
        let mut loss = 0.0;
        let mut du = Vec::new();
        for t in 0..tape.len() {
            let enc = tape.encoding(t);
            let pi = enc.policy(1.0);
            let a = actions[t] as usize;
            let mut d = vec![0.0; enc.num_actions()];
            for j in 0..enc.num_actions() {
                let w = ((t * 7 + j * 3) % 5) as f64 * 0.3 - 0.6;
                let qv = sigmoid(enc.u[j]);
                loss += w * qv;
                d[j] += w * qv * (1.0 - qv);
                d[j] -= pi[j];
            }
            loss += pi[a].ln();
            d[a] += 1.0;
            du.push(d);
        }
        if let Some(g) = grads {
            model.backward_trajectory(ps, &tape, &du, g);
        }
        Ok(loss)
    }

    #[test]
    fn full_model_gradient_check_puzzle() {
        let env = PuzzleEnv::new(11, 4);
        let (model, mut ps) = build::<f64>(&env.layout(), &small_cfg(), 6);
        let puzzle = Puzzle::new(8, 5, 3, 4).unwrap();
        let actions = [6u32, 8, 9, 8, 0];
        let report = grad_check(
            &mut ps,
            |p, g| trajectory_loss(&model, &env, &puzzle, &actions, p, g),
            // Smaller steps drown the tiny GRU gate gradients in rounding noise.
            1e-4,
            Some(40),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 300);
    }

    #[test]
    fn full_model_gradient_check_kbc() {
        let ds = toy_kb();
        let env = KbcEnv::new(ds.graph.clone(), 4, 2, 3);
        let (model, mut ps) = build::<f64>(&env.layout(), &small_cfg(), 7);
        let q = ds.test[0];
        // Obama -BornIn-> Hawaii -LocatedIn-> USA, STOP
        let s0 = WalkState::initial(&env, q);
        let c0 = feasible_actions(&env, &s0).unwrap();
        let a0 = 1 + c0
            .edges
            .iter()
            .position(|e| env.edge_label(&q, e) == "BornIn")
            .unwrap();
        let s1 = crate::env::env_step(&env, &s0, a0).unwrap();
        let c1 = feasible_actions(&env, &s1).unwrap();
        let a1 = 1 + c1
            .edges
            .iter()
            .position(|e| env.edge_label(&q, e) == "LocatedIn")
            .unwrap();
        let actions = [a0 as u32, a1 as u32, 0];
        let f = |p: &ParamStore<f64>, g: Option<&mut Gradients<f64>>| -> Result<f64> {
            let tape = model.forward_trajectory(p, &env, &q, &actions)?;
            let mut loss = 0.0;
            let mut du = Vec::new();
            for t in 0..tape.len() {
                let enc = tape.encoding(t);
                let a = actions[t] as usize;
                let qv = sigmoid(enc.u[a]);
                let y = 0.9 - 0.2 * t as f64;
                loss += 0.5 * (y - qv) * (y - qv);
                let mut d = vec![0.0; enc.num_actions()];
                d[a] = -(y - qv) * qv * (1.0 - qv);
                du.push(d);
            }
            if let Some(g) = g {
                model.backward_trajectory(p, &tape, &du, g);
            }
            Ok(loss)
        };
        let report = grad_check(&mut ps, f, 1e-5, None).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn trajectory_contract_errors() {
        let env = PuzzleEnv::new(11, 4);
        let (model, ps) = build::<f64>(&env.layout(), &small_cfg(), 8);
        let puzzle = Puzzle::new(8, 5, 3, 4).unwrap();
        assert!(model.forward_trajectory(&ps, &env, &puzzle, &[6]).is_err());
        assert!(model
            .forward_trajectory(&ps, &env, &puzzle, &[0, 0])
            .is_err());
        assert!(model
            .forward_trajectory(&ps, &env, &puzzle, &[13, 0])
            .is_err());
    }
}
