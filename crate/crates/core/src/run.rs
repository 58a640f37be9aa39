//! End-to-end runs driven by a [`RunConfig`]: dataset loading, training with
//! metrics and checkpoints on disk, evaluation and single-query prediction.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{EnvKind, RunConfig};
use crate::env::kg::{load_triples, synthetic_kb, SYNTHETIC_QUERY_RELATION};
use crate::env::puzzle::{generate_dataset, PuzzleDataset};
use crate::env::{Environment, KbDataset, KbQuery, KbcEnv, NodeId, Puzzle, PuzzleEnv};
use crate::error::{Error, Result};
use crate::infer::{
    beam_decode, evaluate, render_path, score_nodes, DecodeMethod, EvalReport, RankedPrediction,
};
use crate::mcts::run_search;
use crate::nn::checkpoint::Checkpoint;
use crate::train::{train, EpochMetrics, TrainState};

/// Entities in the generated KB when no dataset directory is configured.
pub const SYNTHETIC_ENTITIES: usize = 200;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (train, valid, test)"
            ))),
        }
    }
}

pub struct PuzzleTask {
    pub env: PuzzleEnv,
    pub data: PuzzleDataset,
}

pub struct KbcTask {
    /// Environment used while training (query edge masked if configured).
    pub train_env: KbcEnv,
    pub env: KbcEnv,
    pub data: KbDataset,
    pub train_queries: Vec<KbQuery>,
}

pub enum Task {
    Puzzle(PuzzleTask),
    Kbc(KbcTask),
}

impl Task {
    /// Reads the configured dataset, or generates one from the seed.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let e = &cfg.env;
        match e.kind {
            EnvKind::Puzzle => {
                let data = match &e.data {
                    Some(dir) => PuzzleDataset::read(dir)?,
                    None => generate_dataset(cfg.seed, Some(e.t_max)),
                };
                Ok(Task::Puzzle(PuzzleTask {
                    env: PuzzleEnv::new(e.t_max, e.query_dim),
                    data,
                }))
            }
            EnvKind::Kbc => {
                let data = match &e.data {
                    Some(dir) => {
                        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
                        let (valid, test) = (opt("valid.txt"), opt("test.txt"));
                        load_triples(
                            &dir.join("train.txt"),
                            valid.as_deref(),
                            test.as_deref(),
                            &e.inverse_marker,
                        )?
                    }
                    None => {
                        synthetic_kb(cfg.seed, SYNTHETIC_ENTITIES).dataset(&e.inverse_marker)?
                    }
                };
                let graph = data.graph.clone();
                let synthetic = [SYNTHETIC_QUERY_RELATION.to_string()];
                let names = match (&e.data, e.train_relations.is_empty()) {
                    (None, true) => &synthetic[..],
                    _ => &e.train_relations[..],
                };
                let wanted: Vec<u32> = names
                    .iter()
                    .map(|r| graph.relation(r))
                    .collect::<Result<_>>()?;
                let train_queries = data
                    .train
                    .iter()
                    .copied()
                    .filter(|q| wanted.is_empty() || wanted.contains(&q.relation))
                    .collect();
                let env = KbcEnv::new(graph, e.t_max, e.entity_dim, e.relation_dim);
                Ok(Task::Kbc(KbcTask {
                    train_env: env.clone().with_query_edge_masked(e.mask_query_edge),
                    env,
                    data,
                    train_queries,
                }))
            }
        }
    }

    pub fn new_state(&self, cfg: &RunConfig) -> Result<TrainState> {
        match self {
            Task::Puzzle(t) => TrainState::new(&t.env, &cfg.model, cfg.seed),
            Task::Kbc(t) => TrainState::new(&t.env, &cfg.model, cfg.seed),
        }
    }

    /// Number of queries in `split`.
    pub fn split_len(&self, split: Split) -> usize {
        match (self, split) {
            (Task::Puzzle(t), Split::Train) => t.data.train.len(),
            (Task::Puzzle(t), Split::Test) => t.data.test.len(),
            (Task::Puzzle(_), Split::Valid) => 0,
            (Task::Kbc(t), Split::Train) => t.train_queries.len(),
            (Task::Kbc(t), Split::Valid) => t.data.valid.len(),
            (Task::Kbc(t), Split::Test) => t.data.test.len(),
        }
    }

    /// Evaluates `state` on `split` with the `[eval]` and `[mcts]` settings.
    pub fn evaluate(
        &self,
        cfg: &RunConfig,
        state: &TrainState,
        split: Split,
    ) -> Result<EvalReport> {
        match self {
            Task::Puzzle(t) => {
                let qs: &[Puzzle] = match split {
                    Split::Train => &t.data.train,
                    Split::Test => &t.data.test,
                    Split::Valid => {
                        return Err(Error::Data(
                            "the puzzle dataset has no validation split".into(),
                        ))
                    }
                };
                evaluate(
                    &t.env,
                    &state.model,
                    &state.params,
                    qs,
                    &cfg.mcts,
                    &cfg.eval,
                    &|_, _| false,
                )
            }
            Task::Kbc(t) => {
                let qs: &[KbQuery] = match split {
                    Split::Train => &t.train_queries,
                    Split::Valid => &t.data.valid,
                    Split::Test => &t.data.test,
                };
                let known = |q: &KbQuery, n: NodeId| t.data.is_known(q, n);
                evaluate(
                    &t.env,
                    &state.model,
                    &state.params,
                    qs,
                    &cfg.mcts,
                    &cfg.eval,
                    &known,
                )
            }
        }
    }

    /// Ranks answers for one query written as `A B C q` (puzzle) or
    /// `source relation` (KBC).
    pub fn predict(
        &self,
        cfg: &RunConfig,
        state: &TrainState,
        query: &str,
        top: usize,
    ) -> Result<Prediction> {
        match self {
            Task::Puzzle(t) => {
                let q: Puzzle = query.parse()?;
                predict_with(&t.env, cfg, state, &q, top)
            }
            Task::Kbc(t) => {
                let parts: Vec<&str> = query.split_whitespace().collect();
                let [source, relation] = parts[..] else {
                    return Err(Error::Config(format!(
                        "KBC query `{query}` must be `source relation`"
                    )));
                };
                let q = t.env.query(source, relation, None)?;
                predict_with(&t.env, cfg, state, &q, top)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: String,
    /// `(node label, score)` best first.
    pub ranked: Vec<(String, f64)>,
    pub path: Option<String>,
}

fn predict_with<E: Environment>(
    env: &E,
    cfg: &RunConfig,
    state: &TrainState,
    query: &E::Query,
    top: usize,
) -> Result<Prediction> {
    let budget = cfg
        .eval
        .budgets
        .iter()
        .copied()
        .max()
        .unwrap_or(cfg.mcts.simulations);
    let (pred, path): (RankedPrediction, Option<String>) = match cfg.eval.method {
        DecodeMethod::Mcts => {
            let mcts = crate::mcts::MctsConfig {
                simulations: budget,
                ..cfg.mcts.clone()
            };
            let (tree, _) = run_search(env, &state.model, &state.params, query, &mcts)?;
            let actions: Vec<u32> = tree.best_path().iter().map(|p| p.1).collect();
            (score_nodes(&tree), Some(render_path(env, query, &actions)?))
        }
        DecodeMethod::Beam => (
            beam_decode(env, &state.model, &state.params, query, budget)?,
            None,
        ),
    };
    Ok(Prediction {
        query: env.query_label(query),
        ranked: pred
            .entries
            .iter()
            .take(top)
            .map(|&(n, s)| (env.node_label(query, n), s))
            .collect(),
        path,
    })
}

/// Loads a checkpoint written by [`train_run`], refusing one produced under
/// incompatible settings.
pub fn load_state(task: &Task, cfg: &RunConfig, path: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    let want = cfg.resume_hash()?;
    if ck.config_hash != want {
        return Err(Error::Config(format!(
            "checkpoint {} was written under different settings (hash {:016x}, config {:016x})",
            path.display(),
            ck.config_hash,
            want
        )));
    }
    let mut state = task.new_state(cfg)?;
    state.restore(&ck)?;
    Ok(state)
}

/// Config stored next to a checkpoint, used when none is given explicitly.
pub fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(CONFIG_FILE)
}

/// Trains per `cfg`, writing the effective config, one JSON line of metrics
/// per epoch and checkpoints into `out`. With `resume`, training continues
/// from that checkpoint and metrics are appended.
pub fn train_run(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let task = Task::load(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut state = match resume {
        Some(p) => load_state(&task, cfg, p)?,
        None => task.new_state(cfg)?,
    };
    let hash = cfg.resume_hash()?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let eval_split = if task.split_len(Split::Valid) > 0 {
        Split::Valid
    } else {
        Split::Test
    };

    let mut on_epoch = |m: &mut EpochMetrics, st: &TrainState| -> Result<()> {
        let ev = cfg.train.eval_every;
        if ev > 0 && m.epoch.is_multiple_of(ev) && task.split_len(eval_split) > 0 {
            let r = task.evaluate(cfg, st, eval_split)?;
            m.eval =
                Some(serde_json::to_value(&r.budgets).map_err(|e| Error::Data(e.to_string()))?);
        }
        let line = serde_json::to_string(m).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        let ce = cfg.train.checkpoint_every;
        if (ce > 0 && m.epoch.is_multiple_of(ce)) || m.epoch == cfg.train.epochs {
            st.checkpoint(hash).save(&ck_path)?;
        }
        Ok(())
    };
    let log = match &task {
        Task::Puzzle(t) => train(
            &t.env,
            &t.data.train,
            &mut state,
            &cfg.train,
            &cfg.mcts,
            cfg.seed,
            &mut on_epoch,
        )?,
        Task::Kbc(t) => train(
            &t.train_env,
            &t.train_queries,
            &mut state,
            &cfg.train,
            &cfg.mcts,
            cfg.seed,
            &mut on_epoch,
        )?,
    };
    if log.is_empty() {
        state.checkpoint(hash).save(&ck_path)?;
    }
    Ok((state, log))
}
