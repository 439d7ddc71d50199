use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{last_token_repr_at, ModelConfig, ModelParams, TokenSeq};
use crate::numerics::{l2_distance, Rng};

/// Distance at or below which two last-token states count as colliding.
pub const COLLISION_THRESHOLD: f64 = 1e-6;

/// All-pairs statistics of last-token states at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub layer: usize,
    pub prompts: usize,
    pub pairs: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Indices of the closest pair, lowest `(i, j)` on ties.
    pub argmin: (usize, usize),
    pub threshold: f64,
    /// Number of pairs at or below `threshold`.
    pub collisions: usize,
    /// `min > threshold`.
    pub pass: bool,
}

/// Exact all-pairs scan of last-token states at `layer`.
///
/// Rows of the distance triangle are processed in parallel and merged in
/// index order, so the report does not depend on the thread count.
pub fn collision_scan(
    prompts: &[TokenSeq],
    layer: usize,
    threshold: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ScanReport> {
    if prompts.len() < 2 {
        return Err(Error::Input("collision scan needs at least two prompts".into()));
    }
    let mut seen = HashSet::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        if !seen.insert(p.ids()) {
            return Err(Error::Input(format!("prompt {i} is a duplicate: {:?}", p.ids())));
        }
    }
    let reps = prompts
        .par_iter()
        .map(|s| last_token_repr_at(s, layer, params, cfg))
        .collect::<Result<Vec<_>>>()?;
    scan_states(&reps, layer, threshold)
}

/// All-pairs scan over precomputed states.
pub fn scan_states(reps: &[Vec<f64>], layer: usize, threshold: f64) -> Result<ScanReport> {
    let n = reps.len();
    if n < 2 {
        return Err(Error::Input("collision scan needs at least two states".into()));
    }
    let rows: Vec<RowStats> = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let mut st = RowStats::new(i);
            for j in i + 1..n {
                let dist = l2_distance(&reps[i], &reps[j]);
                st.push(j, dist, threshold);
            }
            st
        })
        .collect();
    let mut total = RowStats::new(0);
    for r in &rows {
        total.merge(r);
    }
    let pairs = n * (n - 1) / 2;
    Ok(ScanReport {
        layer,
        prompts: n,
        pairs,
        min: total.min,
        mean: total.sum / pairs as f64,
        max: total.max,
        argmin: total.argmin,
        threshold,
        collisions: total.collisions,
        pass: total.min > threshold,
    })
}

struct RowStats {
    min: f64,
    max: f64,
    sum: f64,
    argmin: (usize, usize),
    collisions: usize,
    row: usize,
}

impl RowStats {
    fn new(row: usize) -> Self {
        RowStats {
            min: f64::INFINITY,
            max: 0.0,
            sum: 0.0,
            argmin: (0, 0),
            collisions: 0,
            row,
        }
    }

    fn push(&mut self, j: usize, dist: f64, threshold: f64) {
        if dist < self.min {
            self.min = dist;
            self.argmin = (self.row, j);
        }
        self.max = self.max.max(dist);
        self.sum += dist;
        if dist <= threshold {
            self.collisions += 1;
        }
    }

    fn merge(&mut self, other: &RowStats) {
        if other.min < self.min {
            self.min = other.min;
            self.argmin = other.argmin;
        }
        self.max = self.max.max(other.max);
        self.sum += other.sum;
        self.collisions += other.collisions;
    }
}

/// `n` pairwise-distinct random prompts with lengths in `min_len..=max_len`.
pub fn random_prompts(
    n: usize,
    min_len: usize,
    max_len: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Vec<TokenSeq>> {
    if min_len == 0 || min_len > max_len || max_len > cfg.context {
        return Err(Error::Config(format!(
            "prompt lengths {min_len}..={max_len} invalid for context {}",
            cfg.context
        )));
    }
    let capacity: f64 = (min_len..=max_len)
        .map(|l| (cfg.vocab_size as f64).powi(l as i32))
        .sum();
    if (n as f64) > capacity {
        return Err(Error::Config(format!(
            "only {capacity} distinct prompts exist with lengths {min_len}..={max_len}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = min_len + rng.below(max_len - min_len + 1);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
        if seen.insert(ids.clone()) {
            out.push(TokenSeq::new(ids)?);
        }
    }
    Ok(out)
}

/// Per-length distance statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub length: usize,
    pub prompts: usize,
    /// `None` when fewer than two distinct prompts of this length exist or
    /// were requested.
    pub stats: Option<ScanReport>,
    pub skipped: bool,
}

/// Samples `per_length` distinct prompts of each length and scans them at
/// `layer`.
pub fn length_vs_distance(
    lengths: &[usize],
    per_length: usize,
    layer: usize,
    seed: u64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<LengthBucket>> {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| {
            let available = (cfg.vocab_size as f64).powi(len as i32);
            let n = per_length.min(available.min(usize::MAX as f64) as usize);
            if n < 2 {
                return Ok(LengthBucket {
                    length: len,
                    prompts: n,
                    stats: None,
                    skipped: true,
                });
            }
            let prompts = random_prompts(n, len, len, cfg, seed.wrapping_add(k as u64))?;
            let stats = collision_scan(&prompts, layer, COLLISION_THRESHOLD, params, cfg)?;
            Ok(LengthBucket {
                length: len,
                prompts: n,
                stats: Some(stats),
                skipped: false,
            })
        })
        .collect()
}
