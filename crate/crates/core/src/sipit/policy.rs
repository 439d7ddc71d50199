use serde::{Deserialize, Serialize};

use crate::autograd::grad_distance_embedding;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{l2_distance, Rng};

/// Knobs of the gradient-guided policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSettings {
    /// Plain gradient-descent step size.
    pub gamma: f64,
    /// Snap the proxy to the nearest unvisited embedding every this many
    /// proposals; 0 disables snapping.
    pub k_proj: usize,
    /// Gradient steps taken before each proposal.
    pub steps_per_proposal: usize,
}

impl Default for GradientSettings {
    fn default() -> Self {
        GradientSettings {
            gamma: 0.1,
            k_proj: 50,
            steps_per_proposal: 1,
        }
    }
}

impl GradientSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Everything the gradient policy needs to take a step at one position.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub prefix: &'a [usize],
    pub layer: usize,
    pub target: &'a [f64],
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
}

#[derive(Clone, Debug)]
enum Strategy {
    Random {
        order: Vec<usize>,
        cursor: usize,
    },
    Gradient {
        proxy: Vec<f64>,
        settings: GradientSettings,
    },
}

/// Per-position proposal state: visited set, proposal counter and, for the
/// gradient policy, the continuous proxy.
#[derive(Clone, Debug)]
pub struct PolicyState {
    position: usize,
    visited: Vec<bool>,
    proposals: usize,
    strategy: Strategy,
}

impl PolicyState {
    /// Random policy: the whole per-position permutation is drawn up front.
    pub fn random(vocab_size: usize, position: usize, rng: &mut Rng) -> Self {
        PolicyState {
            position,
            visited: vec![false; vocab_size],
            proposals: 0,
            strategy: Strategy::Random {
                order: rng.permutation(vocab_size),
                cursor: 0,
            },
        }
    }

    /// Gradient policy starting from `proxy`, a layer-0 row (token plus
    /// position embedding).
    pub fn gradient(vocab_size: usize, position: usize, proxy: Vec<f64>, settings: GradientSettings) -> Self {
        PolicyState {
            position,
            visited: vec![false; vocab_size],
            proposals: 0,
            strategy: Strategy::Gradient { proxy, settings },
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn proposals(&self) -> usize {
        self.proposals
    }

    pub fn is_visited(&self, v: usize) -> bool {
        self.visited[v]
    }

    pub fn exhausted(&self) -> bool {
        self.proposals == self.visited.len()
    }

    /// Current proxy, if this is a gradient policy.
    pub fn proxy(&self) -> Option<&[f64]> {
        match &self.strategy {
            Strategy::Gradient { proxy, .. } => Some(proxy),
            Strategy::Random { .. } => None,
        }
    }

    fn mark(&mut self, v: usize) {
        debug_assert!(!self.visited[v]);
        self.visited[v] = true;
        self.proposals += 1;
    }
}

/// Default proxy start: mean token embedding plus `P[t]`.
pub fn mean_embedding_start(position: usize, params: &ModelParams) -> Vec<f64> {
    let e = &params.token_embedding;
    let n = e.rows() as f64;
    let mut out = params.position_embedding.row(position).to_vec();
    for r in 0..e.rows() {
        for (o, x) in out.iter_mut().zip(e.row(r)) {
            *o += x / n;
        }
    }
    out
}

/// Next token of the per-position permutation.
pub fn policy_random(state: &mut PolicyState) -> Result<usize> {
    if state.exhausted() {
        return Err(Error::Exhausted {
            position: state.position,
        });
    }
    let Strategy::Random { order, cursor } = &mut state.strategy else {
        return Err(Error::Config("policy_random called on a gradient state".into()));
    };
    let v = order[*cursor];
    *cursor += 1;
    state.mark(v);
    Ok(v)
}

/// Unvisited token whose layer-0 row `E[v] + P[t]` is nearest to `point`,
/// lowest id on ties.
fn nearest_unvisited(
    point: &[f64],
    visited: &[bool],
    position: usize,
    params: &ModelParams,
) -> Option<usize> {
    let pos = params.position_embedding.row(position);
    let mut best: Option<(f64, usize)> = None;
    let mut row = vec![0.0; point.len()];
    for (v, _) in visited.iter().enumerate().filter(|(_, seen)| !**seen) {
        for ((r, e), p) in row.iter_mut().zip(params.token_embedding.row(v)).zip(pos) {
            *r = e + p;
        }
        let d = l2_distance(&row, point);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, v));
        }
    }
    best.map(|(_, v)| v)
}

/// One gradient step (or `steps_per_proposal` of them) on the proxy, then the
/// nearest unvisited token. Every `k_proj` proposals the proxy is replaced by
/// the nearest still-unvisited embedding.
pub fn policy_gradient(state: &mut PolicyState, ctx: &StepContext<'_>) -> Result<usize> {
    let position = state.position;
    if state.exhausted() {
        return Err(Error::Exhausted { position });
    }
    if ctx.prefix.len() != position {
        return Err(Error::Input(format!(
            "prefix of length {} for a policy at position {position}",
            ctx.prefix.len()
        )));
    }
    let Strategy::Gradient { proxy, settings } = &mut state.strategy else {
        return Err(Error::Config("policy_gradient called on a random state".into()));
    };
    let settings = *settings;
    if settings.gamma > 0.0 {
        for _ in 0..settings.steps_per_proposal {
            let (_, g) =
                grad_distance_embedding(proxy, ctx.prefix, ctx.layer, ctx.target, ctx.params, ctx.cfg)?;
            for (x, gi) in proxy.iter_mut().zip(&g) {
                *x -= settings.gamma * gi;
            }
        }
    }
    let v = nearest_unvisited(proxy, &state.visited, position, ctx.params)
        .expect("unvisited token exists when not exhausted");
    state.visited[v] = true;
    state.proposals += 1;

    if settings.k_proj > 0 && state.proposals.is_multiple_of(settings.k_proj) {
        if let Some(snap) = nearest_unvisited(proxy, &state.visited, position, ctx.params) {
            let pos = ctx.params.position_embedding.row(position);
            for ((x, e), p) in proxy
                .iter_mut()
                .zip(ctx.params.token_embedding.row(snap))
                .zip(pos)
            {
                *x = e + p;
            }
        }
    }
    Ok(v)
}

/// Dispatches to the policy the state was built for.
pub fn propose(state: &mut PolicyState, ctx: &StepContext<'_>) -> Result<usize> {
    match state.strategy {
        Strategy::Random { .. } => policy_random(state),
        Strategy::Gradient { .. } => policy_gradient(state, ctx),
    }
}
