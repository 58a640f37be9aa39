//! Small wasm-bindgen surface over the core crate for the static demo page.

use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsValue;

use mwalk::env::puzzle::{bfs_dfs_steps, shortest_solution};
use mwalk::env::Puzzle;
use mwalk::infer::{hits_at_k, mrr};
use mwalk::mcts::{puct_score, puct_select};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from(e.to_string())
}

/// Shortest solution length and BFS/DFS expansions for one puzzle, as a
/// one-line summary.
#[wasm_bindgen]
pub fn puzzle_effort(a: u32, b: u32, c: u32, q: u32) -> Result<String, JsValue> {
    let puzzle = Puzzle::new(a, b, c, q).map_err(js_err)?;
    let shortest = shortest_solution(&puzzle).ok_or_else(|| js_err("no solution"))?;
    let e = bfs_dfs_steps(&puzzle).map_err(js_err)?;
    Ok(format!(
        "shortest {shortest} moves; BFS expands {} statuses, DFS expands {}",
        e.bfs_expansions, e.dfs_expansions
    ))
}

/// PUCT score of every action followed by the selected index.
#[wasm_bindgen]
pub fn puct_scores(
    n: &[f64],
    w: &[f64],
    prior: &[f64],
    c: f64,
    beta: f64,
) -> Result<Vec<f64>, JsValue> {
    if n.len() != w.len() || n.len() != prior.len() || n.is_empty() {
        return Err(js_err("n, w and prior must be non-empty and equally long"));
    }
    let total: f64 = n.iter().sum();
    let mut out: Vec<f64> = (0..n.len())
        .map(|a| puct_score(n[a], w[a], prior[a], total, c, beta))
        .collect();
    out.push(puct_select(n, w, prior, c, beta) as f64);
    Ok(out)
}

/// `[HITS@1, HITS@3, HITS@10, MRR]` of 1-based ranks; 0 marks a miss.
#[wasm_bindgen]
pub fn rank_metrics(ranks: &[u32]) -> Vec<f64> {
    let ranks: Vec<Option<usize>> = ranks
        .iter()
        .map(|&r| (r > 0).then_some(r as usize))
        .collect();
    vec![
        hits_at_k(&ranks, 1),
        hits_at_k(&ranks, 3),
        hits_at_k(&ranks, 10),
        mrr(&ranks),
    ]
}
