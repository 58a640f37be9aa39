//! Three Glass Puzzle as an implicit graph: nodes are container contents,
//! edges are the twelve empty/fill/pour actions, and the query is the volume
//! one container must hold when the walker stops.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Edge, EnvLayout, Environment, FeatureSlot, Features, NodeId, TableShape};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::{stream_rng, Stream};

/// Values are drawn from `[1, VALUE_LIMIT)`; one-hot blocks are this wide.
pub const VALUE_LIMIT: u32 = 50;
pub const NUM_ACTIONS: usize = 13;
pub const DATASET_SIZE: usize = 600;
pub const TRAIN_SIZE: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Puzzle {
    pub capacity: [u32; 3],
    pub target: u32,
}

impl Puzzle {
    pub fn new(a: u32, b: u32, c: u32, q: u32) -> Result<Self> {
        let s = Puzzle {
            capacity: [a, b, c],
            target: q,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.capacity;
        let q = self.target;
        if [a, b, c, q].iter().any(|&v| v == 0 || v >= VALUE_LIMIT) {
            return Err(Error::Data(format!(
                "puzzle values must lie in [1, {VALUE_LIMIT}): {self}"
            )));
        }
        if !(a >= b && b >= c && q < a) {
            return Err(Error::Data(format!(
                "puzzle must satisfy A >= B >= C and q < A: {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Puzzle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.capacity;
        write!(f, "{a} {b} {c} {}", self.target)
    }
}

impl std::str::FromStr for Puzzle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<u32> = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("bad puzzle `{s}`: {e}")))?;
        if v.len() != 4 {
            return Err(Error::Data(format!("puzzle needs `A B C q`, got `{s}`")));
        }
        Puzzle::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PuzzleStatus(pub [u32; 3]);

impl PuzzleStatus {
    pub fn id(self) -> NodeId {
        let [a, b, c] = self.0;
        (a * VALUE_LIMIT + b) * VALUE_LIMIT + c
    }

    pub fn from_id(id: NodeId) -> Self {
        let c = id % VALUE_LIMIT;
        let b = (id / VALUE_LIMIT) % VALUE_LIMIT;
        let a = id / (VALUE_LIMIT * VALUE_LIMIT);
        PuzzleStatus([a, b, c])
    }

    pub fn is_success(self, puzzle: &Puzzle) -> bool {
        self.0.contains(&puzzle.target)
    }

    pub fn total(self) -> u32 {
        self.0.iter().sum()
    }
}

impl fmt::Display for PuzzleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "({a},{b},{c})")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PuzzleAction {
    Stop,
    Empty(usize),
    Fill(usize),
    Pour(usize, usize),
}

const NAMES: [&str; 3] = ["A", "B", "C"];

impl PuzzleAction {
    /// Action for candidate index `0..13`: STOP, then per container
    /// Empty, Fill and the two pours in container order.
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(PuzzleAction::Stop),
            1..=12 => {
                let x = (i - 1) / 4;
                let others: Vec<usize> = (0..3).filter(|&y| y != x).collect();
                Some(match (i - 1) % 4 {
                    0 => PuzzleAction::Empty(x),
                    1 => PuzzleAction::Fill(x),
                    2 => PuzzleAction::Pour(x, others[0]),
                    _ => PuzzleAction::Pour(x, others[1]),
                })
            }
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PuzzleAction::Stop => 0,
            PuzzleAction::Empty(x) => 1 + 4 * x,
            PuzzleAction::Fill(x) => 2 + 4 * x,
            PuzzleAction::Pour(x, y) => {
                let first_other = if x == 0 { 1 } else { 0 };
                if y == first_other {
                    3 + 4 * x
                } else {
                    4 + 4 * x
                }
            }
        }
    }
}

impl fmt::Display for PuzzleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PuzzleAction::Stop => write!(f, "STOP"),
            PuzzleAction::Empty(x) => write!(f, "Empty {}", NAMES[x]),
            PuzzleAction::Fill(x) => write!(f, "Fill {}", NAMES[x]),
            PuzzleAction::Pour(x, y) => write!(f, "Pour {}->{}", NAMES[x], NAMES[y]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue(PuzzleStatus),
    Stopped { success: bool },
}

/// Applies a container action. Every action is legal; some are no-ops.
pub fn puzzle_step(puzzle: &Puzzle, status: PuzzleStatus, action: PuzzleAction) -> StepOutcome {
    let cap = puzzle.capacity;
    let mut s = status.0;
    match action {
        PuzzleAction::Stop => {
            return StepOutcome::Stopped {
                success: status.is_success(puzzle),
            }
        }
        PuzzleAction::Empty(x) => s[x] = 0,
        PuzzleAction::Fill(x) => s[x] = cap[x],
        PuzzleAction::Pour(x, y) => {
            let moved = s[x].min(cap[y] - s[y]);
            s[x] -= moved;
            s[y] += moved;
        }
    }
    StepOutcome::Continue(PuzzleStatus(s))
}

fn successors(puzzle: &Puzzle, status: PuzzleStatus) -> [PuzzleStatus; 12] {
    let mut out = [status; 12];
    for (i, slot) in out.iter_mut().enumerate() {
        let a = PuzzleAction::from_index(i + 1).expect("index in range");
        if let StepOutcome::Continue(s) = puzzle_step(puzzle, status, a) {
            *slot = s;
        }
    }
    out
}

/// One-hot indices `[A, B, C, a, b, c]`.
fn status_indices(puzzle: &Puzzle, status: PuzzleStatus) -> Result<[u32; 6]> {
    let [ca, cb, cc] = puzzle.capacity;
    let [a, b, c] = status.0;
    let v = [ca, cb, cc, a, b, c];
    if let Some(&bad) = v.iter().find(|&&x| x >= VALUE_LIMIT) {
        return Err(Error::Range {
            value: bad as usize,
            limit: VALUE_LIMIT as usize,
        });
    }
    Ok(v)
}

/// Concatenation of six 50-way one-hot vectors `[A; B; C; a; b; c]`.
pub fn encode_status(puzzle: &Puzzle, status: PuzzleStatus) -> Result<Tensor<f32>> {
    let idx = status_indices(puzzle, status)?;
    let mut data = vec![0.0f32; 6 * VALUE_LIMIT as usize];
    for (block, &v) in idx.iter().enumerate() {
        data[block * VALUE_LIMIT as usize + v as usize] = 1.0;
    }
    Tensor::new(vec![data.len()], data)
}

/// Breadth-first search from empty containers; `max_depth` bounds the number
/// of moves (`None` explores the whole status graph).
pub fn solvable(puzzle: &Puzzle, max_depth: Option<usize>) -> bool {
    shortest_solution(puzzle).is_some_and(|d| max_depth.is_none_or(|m| d <= m))
}

/// Fewest moves from `(0,0,0)` to a status holding the target.
pub fn shortest_solution(puzzle: &Puzzle) -> Option<usize> {
    let start = PuzzleStatus::default();
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((s, d)) = queue.pop_front() {
        if s.is_success(puzzle) {
            return Some(d);
        }
        for n in successors(puzzle, s) {
            if seen.insert(n) {
                queue.push_back((n, d + 1));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleDataset {
    pub train: Vec<Puzzle>,
    pub test: Vec<Puzzle>,
}

/// Rejection-samples 600 distinct puzzles solvable within `max_depth` moves;
/// the first 500 form the training split.
pub fn generate_dataset(seed: u64, max_depth: Option<usize>) -> PuzzleDataset {
    let mut rng: ChaCha8Rng = stream_rng(seed, Stream::Data, 0);
    let mut seen = HashSet::new();
    let mut puzzles = Vec::with_capacity(DATASET_SIZE);
    while puzzles.len() < DATASET_SIZE {
        let v: [u32; 4] = std::array::from_fn(|_| rng.gen_range(1..VALUE_LIMIT));
        let Ok(puzzle) = Puzzle::new(v[0], v[1], v[2], v[3]) else {
            continue;
        };
        if !seen.insert(puzzle) || !solvable(&puzzle, max_depth) {
            continue;
        }
        puzzles.push(puzzle);
    }
    let test = puzzles.split_off(TRAIN_SIZE);
    PuzzleDataset {
        train: puzzles,
        test,
    }
}

impl PuzzleDataset {
    /// Writes `puzzles.txt` (one `A B C q` per line) and `split.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut p = std::io::BufWriter::new(std::fs::File::create(dir.join("puzzles.txt"))?);
        let mut s = std::io::BufWriter::new(std::fs::File::create(dir.join("split.tsv"))?);
        for (i, puzzle) in self.train.iter().chain(&self.test).enumerate() {
            writeln!(p, "{puzzle}")?;
            let split = if i < self.train.len() {
                "train"
            } else {
                "test"
            };
            writeln!(s, "{i}\t{split}")?;
        }
        p.flush()?;
        s.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let ppath = dir.join("puzzles.txt");
        let puzzles = read_lines(&ppath)?
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.parse::<Puzzle>().map_err(|e| Error::Parse {
                    path: ppath.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spath = dir.join("split.tsv");
        let mut out = PuzzleDataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, line) in read_lines(&spath)?.into_iter().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: spath.clone(),
                line: i + 1,
                msg,
            };
            let (idx, split) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `index<TAB>split`".into()))?;
            let idx: usize = idx.parse().map_err(|e| parse_err(format!("{e}")))?;
            let puzzle = *puzzles
                .get(idx)
                .ok_or_else(|| parse_err(format!("index {idx} beyond puzzle list")))?;
            match split {
                "train" => out.train.push(puzzle),
                "test" => out.test.push(puzzle),
                other => return Err(parse_err(format!("unknown split `{other}`"))),
            }
        }
        Ok(out)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    let lines: Vec<String> = std::io::BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(lines)
}

/// Effort of target-disclosed graph search on one puzzle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEffort {
    /// Statuses expanded by breadth-first search, success status included.
    pub bfs_expansions: usize,
    /// Statuses expanded by depth-first search (action-order children).
    pub dfs_expansions: usize,
    pub bfs_solution_len: usize,
    pub dfs_solution_len: usize,
}

pub fn bfs_dfs_steps(puzzle: &Puzzle) -> Result<SearchEffort> {
    let unsolvable = || Error::Data(format!("puzzle {puzzle} has no solution"));
    let start = PuzzleStatus::default();

    let (bfs_expansions, bfs_solution_len) = {
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([(start, 0usize)]);
        let mut expanded = 0;
        let mut found = None;
        while let Some((s, d)) = queue.pop_front() {
            expanded += 1;
            if s.is_success(puzzle) {
                found = Some(d);
                break;
            }
            for n in successors(puzzle, s) {
                if seen.insert(n) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        (expanded, found.ok_or_else(unsolvable)?)
    };

    let (dfs_expansions, dfs_solution_len) = {
        let mut seen = HashSet::new();
        let mut stack = vec![(start, 0usize)];
        let mut expanded = 0;
        let mut found = None;
        while let Some((s, d)) = stack.pop() {
            if !seen.insert(s) {
                continue;
            }
            expanded += 1;
            if s.is_success(puzzle) {
                found = Some(d);
                break;
            }
            for n in successors(puzzle, s).into_iter().rev() {
                if !seen.contains(&n) {
                    stack.push((n, d + 1));
                }
            }
        }
        (expanded, found.ok_or_else(unsolvable)?)
    };

    Ok(SearchEffort {
        bfs_expansions,
        dfs_expansions,
        bfs_solution_len,
        dfs_solution_len,
    })
}

/// Puzzle environment: node ids pack the contents, edge features are the
/// action one-hot and the query is an embedding of the target volume.
#[derive(Clone, Debug)]
pub struct PuzzleEnv {
    t_max: usize,
    query_dim: usize,
}

impl PuzzleEnv {
    pub fn new(t_max: usize, query_dim: usize) -> Self {
        PuzzleEnv { t_max, query_dim }
    }
}

impl Environment for PuzzleEnv {
    type Query = Puzzle;

    fn layout(&self) -> EnvLayout {
        let v = VALUE_LIMIT as usize;
        EnvLayout {
            node: vec![FeatureSlot::OneHot(v); 6],
            edge: vec![FeatureSlot::OneHot(NUM_ACTIONS)],
            query: vec![FeatureSlot::Embed(0)],
            tables: vec![TableShape {
                name: "query_embedding".into(),
                rows: v,
                dim: self.query_dim,
            }],
        }
    }

    fn t_max(&self) -> usize {
        self.t_max
    }

    fn source(&self, _query: &Puzzle) -> NodeId {
        PuzzleStatus::default().id()
    }

    fn query_key(&self, q: &Puzzle) -> u32 {
        let [a, b, c] = q.capacity;
        ((a * VALUE_LIMIT + b) * VALUE_LIMIT + c) * VALUE_LIMIT + q.target
    }

    fn query_features(&self, q: &Puzzle) -> Features {
        let mut f = Features::new();
        f.push(q.target);
        f
    }

    fn node_features(&self, q: &Puzzle, node: NodeId) -> Features {
        let idx = status_indices(q, PuzzleStatus::from_id(node)).expect("contents within capacity");
        idx.into_iter().collect()
    }

    fn edges(&self, q: &Puzzle, node: NodeId, out: &mut Vec<Edge>) {
        out.clear();
        for (i, next) in successors(q, PuzzleStatus::from_id(node))
            .into_iter()
            .enumerate()
        {
            let mut features = Features::new();
            features.push(i as u32 + 1);
            out.push(Edge {
                features,
                next: next.id(),
            });
        }
    }

    fn reward(&self, q: &Puzzle, node: NodeId) -> f32 {
        if PuzzleStatus::from_id(node).is_success(q) {
            1.0
        } else {
            0.0
        }
    }

    fn node_label(&self, _q: &Puzzle, node: NodeId) -> String {
        PuzzleStatus::from_id(node).to_string()
    }

    fn edge_label(&self, _q: &Puzzle, edge: &Edge) -> String {
        PuzzleAction::from_index(edge.features[0] as usize)
            .map(|a| a.to_string())
            .unwrap_or_default()
    }

    fn query_label(&self, q: &Puzzle) -> String {
        q.to_string()
    }
}
