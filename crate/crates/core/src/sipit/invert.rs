use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{mean_embedding_start, propose, GradientSettings, PolicyState, StepContext};
use super::result::{PolicyKind, RecoveryResult};
use super::verifier::{candidate_distance, VerifierConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Matrix, Rng};

/// Where the gradient policy's proxy starts at each position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyStart {
    /// Mean token embedding plus the position embedding.
    MeanEmbedding,
    /// One layer-0 row per position.
    Explicit(Vec<Vec<f64>>),
}

/// Candidate policy for an inversion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Random {
        seed: u64,
    },
    Gradient {
        settings: GradientSettings,
        start: ProxyStart,
    },
}

impl Policy {
    pub fn gradient() -> Self {
        Policy::Gradient {
            settings: GradientSettings::default(),
            start: ProxyStart::MeanEmbedding,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Random { .. } => PolicyKind::Random,
            Policy::Gradient { .. } => PolicyKind::Gradient,
        }
    }

    /// Same policy for the `index`-th prompt of a batch: random seeds are
    /// offset by the index.
    pub fn for_prompt(&self, index: usize) -> Result<Policy> {
        match self {
            Policy::Random { seed } => Ok(Policy::Random {
                seed: seed.wrapping_add(index as u64),
            }),
            Policy::Gradient {
                start: ProxyStart::Explicit(_),
                ..
            } => Err(Error::Config(
                "explicit proxy starts apply to a single prompt only".into(),
            )),
            other => Ok(other.clone()),
        }
    }
}

/// Recovers a prompt from its layer-`vcfg.layer` hidden states, one row per
/// position, testing at most `|V|` candidates per position.
///
/// A position whose candidates all miss the `epsilon` ball is retried at
/// each backoff tolerance against the distances already measured; more
/// than one token inside a widened ball is reported as ambiguous.
pub fn invert(
    states: &Matrix,
    vcfg: &VerifierConfig,
    policy: &Policy,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<RecoveryResult> {
    vcfg.validate()?;
    cfg.validate()?;
    params.check_shapes(cfg)?;
    if vcfg.layer > cfg.blocks {
        return Err(Error::Layer {
            layer: vcfg.layer,
            blocks: cfg.blocks,
        });
    }
    if states.cols() != cfg.width {
        return Err(Error::shape(
            "invert",
            format!("states of width {} for model width {}", states.cols(), cfg.width),
        ));
    }
    let len = states.rows();
    if len > cfg.context {
        return Err(Error::Context {
            len,
            context: cfg.context,
        });
    }
    let mut rng = match policy {
        Policy::Random { seed } => Some(Rng::new(*seed)),
        Policy::Gradient { settings, start } => {
            settings.validate()?;
            if let ProxyStart::Explicit(rows) = start {
                if rows.len() != len || rows.iter().any(|r| r.len() != cfg.width) {
                    return Err(Error::shape(
                        "invert",
                        format!("explicit proxy starts must be {len} rows of width {}", cfg.width),
                    ));
                }
            }
            None
        }
    };

    let mut result = RecoveryResult::new(policy.kind(), vcfg.layer, len * cfg.vocab_size);
    let backoff = vcfg.backoff_levels();
    for t in 0..len {
        let target = states.row(t);
        let prefix = result.recovered.clone();
        let mut state = match (policy, rng.as_mut()) {
            (Policy::Random { .. }, Some(rng)) => PolicyState::random(cfg.vocab_size, t, rng),
            (Policy::Gradient { settings, start }, _) => {
                let proxy = match start {
                    ProxyStart::MeanEmbedding => mean_embedding_start(t, params),
                    ProxyStart::Explicit(rows) => rows[t].clone(),
                };
                PolicyState::gradient(cfg.vocab_size, t, proxy, *settings)
            }
            (Policy::Random { .. }, None) => unreachable!(),
        };
        let ctx = StepContext {
            prefix: &prefix,
            layer: vcfg.layer,
            target,
            params,
            cfg,
        };

        // (token, distance) in proposal order.
        let mut tested: Vec<(usize, f64)> = Vec::with_capacity(cfg.vocab_size);
        let mut accepted = None;
        while !state.exhausted() {
            let v = propose(&mut state, &ctx)?;
            let d = candidate_distance(v, target, &prefix, vcfg.layer, params, cfg)?;
            result.total_tests += 1;
            tested.push((v, d));
            if d <= vcfg.epsilon {
                accepted = Some((v, d, vcfg.epsilon));
                break;
            }
        }
        if accepted.is_none() {
            for &eps in &backoff {
                let hits: Vec<(usize, f64)> = tested.iter().copied().filter(|(_, d)| *d <= eps).collect();
                match hits.as_slice() {
                    [] => continue,
                    [(v, d)] => {
                        accepted = Some((*v, *d, eps));
                        break;
                    }
                    _ => {
                        let mut tokens: Vec<usize> = hits.iter().map(|(v, _)| *v).collect();
                        tokens.sort_unstable();
                        return Err(Error::Ambiguous {
                            position: t,
                            tokens,
                            epsilon: eps,
                            partial: Box::new(result),
                        });
                    }
                }
            }
        }
        let Some((v, d, eps)) = accepted else {
            let (best_token, best_distance) =
                tested
                    .iter()
                    .copied()
                    .fold((usize::MAX, f64::INFINITY), |best, cur| {
                        if cur.1 < best.1 {
                            cur
                        } else {
                            best
                        }
                    });
            return Err(Error::NoVerifiedToken {
                position: t,
                best_token,
                best_distance,
                partial: Box::new(result),
            });
        };
        result.recovered.push(v);
        result.proposals.push(state.proposals());
        result.accepted_epsilon.push(eps);
        result.accepted_distance.push(d);
    }
    assert!(
        result.total_tests <= result.test_bound,
        "{} verifier tests exceed the bound {}",
        result.total_tests,
        result.test_bound
    );
    Ok(result)
}

/// Random-permutation policy with `epsilon = 0` and no backoff.
pub fn brute_force_invert(
    states: &Matrix,
    layer: usize,
    seed: u64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<RecoveryResult> {
    invert(
        states,
        &VerifierConfig::exact(layer),
        &Policy::Random { seed },
        params,
        cfg,
    )
}

/// Independent inversions in parallel, results in input order. Prompt `i`
/// of a random-policy batch uses seed `seed + i`.
pub fn invert_many(
    states: &[Matrix],
    vcfg: &VerifierConfig,
    policy: &Policy,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Vec<Result<RecoveryResult>> {
    states
        .par_iter()
        .enumerate()
        .map(|(i, h)| invert(h, vcfg, &policy.for_prompt(i)?, params, cfg))
        .collect()
}
