//! Trainers: M-Walk (tree-search trajectories + Q-learning), PG-Walk
//! (REINFORCE) and Q-Walk (epsilon-greedy rollouts + Q-learning).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{env_step, feasible_actions, Environment, WalkState};
use crate::error::{Error, Result};
use crate::mcts::{run_search, MctsConfig};
use crate::model::{ModelConfig, StateEncoding, WalkerModel};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::ops::argmax;
use crate::nn::{sigmoid, AdamConfig, Gradients, ParamStore};
use crate::seed::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    MWalk,
    PgWalk,
    QWalk,
}

impl std::fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainerKind::MWalk => "m-walk",
            TrainerKind::PgWalk => "pg-walk",
            TrainerKind::QWalk => "q-walk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub epochs: u64,
    pub lr: f64,
    /// Trajectories per Q-learning update.
    pub batch_size: usize,
    /// Discount of the Q-learning target.
    pub gamma: f64,
    /// Queries searched under one parameter snapshot before updating.
    pub generation_queries: usize,
    /// Passes over each generation's trajectories.
    pub passes: usize,
    /// Sampled rollouts per query for PG-Walk and Q-Walk.
    pub rollouts: usize,
    /// Exploration rate of Q-Walk.
    pub epsilon: f64,
    /// Decay of PG-Walk's moving-average reward baseline.
    pub baseline_decay: f64,
    /// Evaluate every this many epochs (0 = never).
    pub eval_every: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trainer: TrainerKind::MWalk,
            epochs: 10,
            lr: 1e-4,
            batch_size: 8,
            gamma: 0.99,
            generation_queries: 8,
            passes: 1,
            rollouts: 32,
            epsilon: 0.1,
            baseline_decay: 0.99,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "train.lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0
            || self.generation_queries == 0
            || self.passes == 0
            || self.rollouts == 0
        {
            return Err(Error::Config(
                "train.batch_size, generation_queries, passes and rollouts must be at least 1"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(
                "train.gamma and train.epsilon must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(
                "train.baseline_decay must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A finished walk with its terminal reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<Q> {
    pub query: Q,
    /// Action indices, ending with STOP.
    pub actions: Vec<u32>,
    pub reward: f32,
}

pub fn positive_reward_rate<Q>(trajectories: &[Trajectory<Q>]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().filter(|t| t.reward > 0.0).count() as f64 / trajectories.len() as f64
}

/// Q-learning target for one step: the reward at STOP, otherwise the
/// discounted best next-state value. Treated as a constant.
pub fn td_target(stop: bool, reward: f64, next_q: &[f64], gamma: f64) -> f64 {
    if stop {
        reward
    } else {
        gamma * next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub trainer: TrainerKind,
    pub trajectories: usize,
    pub positive_reward_rate: f64,
    /// Mean absolute TD error over updated steps (Q-learning trainers).
    pub mean_td_error: Option<f64>,
    pub updates: u64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

impl EpochMetrics {
    /// Metrics with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        EpochMetrics {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Model, parameters and optimizer-side state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: WalkerModel,
    pub params: ParamStore<f32>,
    pub epoch: u64,
    pub baseline: f32,
}

impl TrainState {
    pub fn new<E: Environment>(env: &E, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let model = WalkerModel::new(&mut params, &env.layout(), cfg, &mut rng)?;
        Ok(TrainState {
            model,
            params,
            epoch: 0,
            baseline: 0.0,
        })
    }

    pub fn checkpoint(&self, config_hash: u64) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.params, config_hash, self.epoch);
        ck.set_extra("baseline", vec![self.baseline]);
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.apply_to(&mut self.params)?;
        self.epoch = ck.epoch;
        self.baseline = ck
            .extra("baseline")
            .and_then(|b| b.first().copied())
            .unwrap_or(0.0);
        Ok(())
    }
}

/// Gradient of the summed squared TD error of one trajectory.
pub fn q_learning_grads<E: Environment>(
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    env: &E,
    traj: &Trajectory<E::Query>,
    gamma: f64,
) -> Result<(Gradients<f32>, f64)> {
    let tape = model.forward_trajectory(ps, env, &traj.query, &traj.actions)?;
    let mut du = Vec::with_capacity(tape.len());
    let mut abs_td = 0.0;
    for t in 0..tape.len() {
        let enc = tape.encoding(t);
        let a = traj.actions[t] as usize;
        let q = sigmoid(enc.u[a] as f64);
        let y = if a == 0 {
            td_target(true, traj.reward as f64, &[], gamma)
        } else {
            let next: Vec<f64> = tape
                .encoding(t + 1)
                .q_values()
                .iter()
                .map(|&x| x as f64)
                .collect();
            td_target(false, 0.0, &next, gamma)
        };
        abs_td += (y - q).abs();
        let mut d = vec![0.0f32; enc.num_actions()];
        d[a] = (-(y - q) * q * (1.0 - q)) as f32;
        du.push(d);
    }
    let mut g = ps.zero_grads();
    model.backward_trajectory(ps, &tape, &du, &mut g);
    Ok((g, abs_td))
}

/// REINFORCE gradient (of the negated objective) for one rollout with
/// advantage `adv`.
pub fn policy_gradient_grads<E: Environment>(
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    env: &E,
    traj: &Trajectory<E::Query>,
    adv: f64,
) -> Result<Gradients<f32>> {
    let tape = model.forward_trajectory(ps, env, &traj.query, &traj.actions)?;
    let tau = model.tau();
    let mut du = Vec::with_capacity(tape.len());
    for t in 0..tape.len() {
        let pi = tape.encoding(t).policy(tau);
        let a = traj.actions[t] as usize;
        let d: Vec<f32> = pi
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                (-adv * (onehot - p as f64) / tau) as f32
            })
            .collect();
        du.push(d);
    }
    let mut g = ps.zero_grads();
    model.backward_trajectory(ps, &tape, &du, &mut g);
    Ok(g)
}

/// Averages per-trajectory gradients in order and takes one Adam step.
fn apply_update(ps: &mut ParamStore<f32>, grads: Vec<Gradients<f32>>, adam: &AdamConfig) {
    if grads.is_empty() {
        return;
    }
    let scale = 1.0 / grads.len() as f32;
    for g in &grads {
        ps.accumulate(g, scale);
    }
    ps.adam_step(adam);
}

/// One Q-learning pass: shuffled mini-batches of `batch_size` trajectories.
pub fn q_learning_update<E: Environment>(
    state: &mut TrainState,
    env: &E,
    trajectories: &[Trajectory<E::Query>],
    cfg: &TrainConfig,
) -> Result<(u64, f64, usize)> {
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut updates = 0;
    let mut td_sum = 0.0;
    let mut steps = 0;
    for batch in trajectories.chunks(cfg.batch_size) {
        let model = &state.model;
        let ps = &state.params;
        let out: Vec<(Gradients<f32>, f64)> = batch
            .par_iter()
            .map(|tr| q_learning_grads(model, ps, env, tr, cfg.gamma))
            .collect::<Result<_>>()?;
        let mut grads = Vec::with_capacity(out.len());
        for ((g, td), tr) in out.into_iter().zip(batch) {
            td_sum += td;
            steps += tr.actions.len();
            grads.push(g);
        }
        apply_update(&mut state.params, grads, &adam);
        updates += 1;
    }
    Ok((updates, td_sum, steps))
}

/// Samples one walk, choosing actions with `pick(encoding, rng)`.
pub fn rollout<E: Environment, R: Rng>(
    env: &E,
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    query: &E::Query,
    rng: &mut R,
    mut pick: impl FnMut(&StateEncoding<f32>, &mut R) -> usize,
) -> Result<Trajectory<E::Query>> {
    let mut state = WalkState::initial(env, query.clone());
    let mut cands = feasible_actions(env, &state)?;
    let mut enc = model.root(ps, env, query, &cands)?;
    loop {
        let a = pick(&enc, rng);
        let next = env_step(env, &state, a)?;
        if a == 0 {
            let reward = env.reward(query, next.node);
            return Ok(Trajectory {
                query: query.clone(),
                actions: next.actions,
                reward,
            });
        }
        cands = feasible_actions(env, &next)?;
        enc = model.child(ps, env, query, &enc, a, next.node, &cands)?;
        state = next;
    }
}

pub fn sample_index<R: Rng>(probs: &[f32], rng: &mut R) -> usize {
    let x: f32 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Uniform over actions with probability `epsilon`, else greedy on Q.
pub fn epsilon_greedy<R: Rng>(u: &[f32], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..u.len())
    } else {
        argmax(u)
    }
}

fn mcts_trajectories<E: Environment>(
    env: &E,
    model: &WalkerModel,
    ps: &ParamStore<f32>,
    queries: &[E::Query],
    mcts: &MctsConfig,
) -> Result<Vec<Trajectory<E::Query>>> {
    let per_query: Vec<Vec<Trajectory<E::Query>>> = queries
        .par_iter()
        .map(|q| {
            let (_, records) = run_search(env, model, ps, q, mcts)?;
            Ok(records
                .into_iter()
                .map(|r| Trajectory {
                    query: q.clone(),
                    actions: r.actions(),
                    reward: env.reward(q, r.final_node),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

fn sampled_trajectories<E: Environment>(
    env: &E,
    state: &TrainState,
    queries: &[(usize, E::Query)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Trajectory<E::Query>>> {
    let model = &state.model;
    let ps = &state.params;
    let epoch = state.epoch;
    let per_query: Vec<Vec<Trajectory<E::Query>>> = queries
        .par_iter()
        .map(|(pos, q)| {
            let mut rng = stream_rng(seed, Stream::Rollout, (epoch << 32) | *pos as u64);
            (0..cfg.rollouts)
                .map(|_| match cfg.trainer {
                    TrainerKind::QWalk => rollout(env, model, ps, q, &mut rng, |enc, rng| {
                        epsilon_greedy(&enc.u, cfg.epsilon, rng)
                    }),
                    _ => rollout(env, model, ps, q, &mut rng, |enc, rng| {
                        sample_index(&enc.policy(model.tau()), rng)
                    }),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

/// Runs one training epoch over `queries` and returns its metrics.
pub fn train_epoch<E: Environment>(
    env: &E,
    queries: &[E::Query],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mcts: &MctsConfig,
    seed: u64,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, state.epoch << 1));
    let mut total = 0usize;
    let mut positive = 0usize;
    let mut updates = 0u64;
    let mut td_sum = 0.0;
    let mut td_steps = 0usize;
    let adam = AdamConfig::with_lr(cfg.lr);

    match cfg.trainer {
        TrainerKind::MWalk | TrainerKind::QWalk => {
            for (g, chunk) in order.chunks(cfg.generation_queries).enumerate() {
                let mut trajs = if cfg.trainer == TrainerKind::MWalk {
                    let qs: Vec<E::Query> = chunk.iter().map(|&i| queries[i].clone()).collect();
                    mcts_trajectories(env, &state.model, &state.params, &qs, mcts)?
                } else {
                    let qs: Vec<(usize, E::Query)> =
                        chunk.iter().map(|&i| (i, queries[i].clone())).collect();
                    sampled_trajectories(env, state, &qs, cfg, seed)?
                };
                total += trajs.len();
                positive += trajs.iter().filter(|t| t.reward > 0.0).count();
                for pass in 0..cfg.passes {
                    let counter = (state.epoch << 32) | ((g as u64) << 8) | pass as u64;
                    trajs.shuffle(&mut stream_rng(seed, Stream::Shuffle, (counter << 1) | 1));
                    let (u, td, n) = q_learning_update(state, env, &trajs, cfg)?;
                    updates += u;
                    td_sum += td;
                    td_steps += n;
                }
            }
        }
        TrainerKind::PgWalk => {
            for &i in &order {
                let trajs =
                    sampled_trajectories(env, state, &[(i, queries[i].clone())], cfg, seed)?;
                total += trajs.len();
                positive += trajs.iter().filter(|t| t.reward > 0.0).count();
                let baseline = state.baseline as f64;
                let model = &state.model;
                let ps = &state.params;
                let grads: Vec<Gradients<f32>> = trajs
                    .par_iter()
                    .map(|tr| {
                        policy_gradient_grads(model, ps, env, tr, tr.reward as f64 - baseline)
                    })
                    .collect::<Result<_>>()?;
                if grads.iter().any(|g| !g.is_zero()) {
                    apply_update(&mut state.params, grads, &adam);
                    updates += 1;
                }
                let mean = trajs.iter().map(|t| t.reward as f64).sum::<f64>() / trajs.len() as f64;
                let d = cfg.baseline_decay;
                state.baseline = (d * baseline + (1.0 - d) * mean) as f32;
            }
        }
    }
    if !state.params.is_finite() {
        return Err(Error::Data(
            "parameters became non-finite during training".into(),
        ));
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        trainer: cfg.trainer,
        trajectories: total,
        positive_reward_rate: if total == 0 {
            0.0
        } else {
            positive as f64 / total as f64
        },
        mean_td_error: (td_steps > 0).then(|| td_sum / td_steps as f64),
        updates,
        seconds: start.elapsed().as_secs_f64(),
        eval: None,
    })
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after
/// each one (for evaluation, logging and checkpoints).
pub fn train<E: Environment>(
    env: &E,
    queries: &[E::Query],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mcts: &MctsConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&mut EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    mcts.validate()?;
    if queries.is_empty() {
        return Err(Error::Data("no training queries".into()));
    }
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let mut m = train_epoch(env, queries, state, cfg, mcts, seed)?;
        on_epoch(&mut m, state)?;
        log::info!(
            "epoch {} {}: positive rate {:.3}, {} updates, {:.1}s",
            m.epoch,
            m.trainer,
            m.positive_reward_rate,
            m.updates,
            m.seconds
        );
        log.push(m);
    }
    Ok(log)
}
