use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{one_step_map, Candidate, ModelConfig, ModelParams};
use crate::numerics::l2_distance;

/// Smallest distance between one-step states of two different tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub prefix: Vec<usize>,
    /// Zero-based position of the candidate token.
    pub position: usize,
    pub layer: usize,
    pub delta: f64,
    pub pair: (usize, usize),
}

/// `F(v; prefix)` for every token `v`, in id order.
pub fn one_step_states(
    prefix: &[usize],
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    (0..cfg.vocab_size)
        .into_par_iter()
        .map(|v| one_step_map(Candidate::Token(v), prefix, layer, params, cfg))
        .collect()
}

/// Exhaustive margin over all `C(|V|, 2)` token pairs.
pub fn margin(
    prefix: &[usize],
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<MarginReport> {
    if cfg.vocab_size < 2 {
        return Err(Error::Config("margin needs at least two tokens".into()));
    }
    let states = one_step_states(prefix, layer, params, cfg)?;
    let (delta, pair) = min_pair(&states);
    Ok(MarginReport {
        prefix: prefix.to_vec(),
        position: prefix.len(),
        layer,
        delta,
        pair,
    })
}

/// Smallest pairwise distance and its lowest `(i, j)` pair.
pub(crate) fn min_pair(states: &[Vec<f64>]) -> (f64, (usize, usize)) {
    let mut best = (f64::INFINITY, (0, 0));
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let d = l2_distance(&states[i], &states[j]);
            if d < best.0 {
                best = (d, (i, j));
            }
        }
    }
    best
}

/// Margins at every position of `ids`, each with the true prefix.
pub fn prompt_margins(
    ids: &[usize],
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<MarginReport>> {
    (0..ids.len())
        .map(|t| margin(&ids[..t], layer, params, cfg))
        .collect()
}
