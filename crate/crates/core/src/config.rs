//! Run configuration: one TOML file with `[env]`, `[model]`, `[mcts]`,
//! `[train]` and `[eval]` tables. Missing keys take defaults that depend on
//! the environment kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{DecodeMethod, EvalConfig};
use crate::mcts::MctsConfig;
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Puzzle,
    Kbc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Dataset directory: `puzzles.txt` + `split.tsv` for the puzzle,
    /// `train.txt` (+ optional `valid.txt`, `test.txt`) for KBC.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Walk moves before STOP is forced.
    pub t_max: usize,
    /// Puzzle query embedding width.
    pub query_dim: usize,
    /// KBC entity embedding width.
    pub entity_dim: usize,
    /// KBC relation embedding width.
    pub relation_dim: usize,
    pub inverse_marker: String,
    /// Hide the query triple and its inverse while training on it.
    pub mask_query_edge: bool,
    /// Restrict training queries to these relations. Empty means all
    /// relations, except on the generated KB where it means its composed
    /// relation.
    pub train_relations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub mcts: MctsConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Complete defaults for `kind`.
    pub fn defaults(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Puzzle => RunConfig {
                seed: 0,
                env: EnvConfig {
                    kind,
                    data: None,
                    t_max: 11,
                    query_dim: 64,
                    entity_dim: 4,
                    relation_dim: 64,
                    inverse_marker: crate::env::kg::DEFAULT_INVERSE_MARKER.into(),
                    mask_query_edge: false,
                    train_relations: Vec::new(),
                },
                model: ModelConfig {
                    hidden: 32,
                    stop_activation: Activation::Relu,
                    ..ModelConfig::default()
                },
                mcts: MctsConfig {
                    simulations: 32,
                    c: 0.5,
                    beta: 0.2,
                    gamma: 0.99,
                    ..MctsConfig::default()
                },
                train: TrainConfig {
                    lr: 5e-4,
                    epochs: 40,
                    ..TrainConfig::default()
                },
                eval: EvalConfig {
                    method: DecodeMethod::Mcts,
                    budgets: vec![1, 10, 50, 100, 200, 400],
                    filtered: false,
                },
            },
            EnvKind::Kbc => RunConfig {
                seed: 0,
                env: EnvConfig {
                    kind,
                    data: None,
                    t_max: 3,
                    query_dim: 64,
                    entity_dim: 4,
                    relation_dim: 64,
                    inverse_marker: crate::env::kg::DEFAULT_INVERSE_MARKER.into(),
                    mask_query_edge: true,
                    train_relations: Vec::new(),
                },
                model: ModelConfig::default(),
                mcts: MctsConfig {
                    simulations: 128,
                    ..MctsConfig::default()
                },
                train: TrainConfig {
                    lr: 1e-4,
                    epochs: 30,
                    ..TrainConfig::default()
                },
                eval: EvalConfig {
                    method: DecodeMethod::Mcts,
                    budgets: vec![128],
                    filtered: true,
                },
            },
        }
    }

    /// Parses TOML, filling missing keys from the defaults of `env.kind`
    /// (puzzle when absent). Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let kind = match user.get("env").and_then(|e| e.get("kind")) {
            None => EnvKind::Puzzle,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("env.kind: {e}")))?,
        };
        let mut merged = to_table(&Self::defaults(kind))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a `section.key=value` override; the value is read as TOML and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut patch = value;
        for part in key.trim().split('.').rev() {
            if part.is_empty() {
                return Err(Error::Config(format!("bad override key `{key}`")));
            }
            let mut t = toml::Table::new();
            t.insert(part.to_string(), patch);
            patch = toml::Value::Table(t);
        }
        let toml::Value::Table(patch) = patch else {
            unreachable!()
        };
        let mut merged = to_table(self)?;
        merge(&mut merged, patch);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mcts.validate()?;
        self.train.validate()?;
        if self.env.t_max == 0 && self.env.kind == EnvKind::Puzzle {
            return Err(Error::Config(
                "env.t_max must be positive for the puzzle".into(),
            ));
        }
        for (name, v) in [
            ("query_dim", self.env.query_dim),
            ("entity_dim", self.env.entity_dim),
            ("relation_dim", self.env.relation_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("env.{name} must be positive")));
            }
        }
        if self.eval.budgets.is_empty() || self.eval.budgets.contains(&0) {
            return Err(Error::Config(
                "eval.budgets must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Digest of everything a resumed run must share with the original:
    /// all settings except the epoch count, schedules and evaluation.
    pub fn resume_hash(&self) -> Result<u64> {
        let mut c = self.clone();
        c.train.epochs = 0;
        c.train.eval_every = 0;
        c.train.checkpoint_every = 0;
        c.eval = EvalConfig::default();
        c.hash()
    }

    /// Stable 64-bit digest of the canonical TOML form.
    pub fn hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(u64::from_le_bytes(
            digest[..8].try_into().expect("digest is 32 bytes"),
        ))
    }
}

fn to_table(cfg: &RunConfig) -> Result<toml::Table> {
    match toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))? {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("config serializes to a table"),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
