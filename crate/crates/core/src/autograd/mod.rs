//! Reverse-mode differentiation of the model: parameter gradients of the
//! cross-entropy loss and input gradients of the one-step distance
//! objective, plus a central-difference oracle for checking both.

mod fd;
mod graph;
mod tape;

pub use fd::{finite_diff_oracle, max_relative_error, relative_error};
pub use tape::{GradTape, Gradients, Var};

use crate::error::{Error, Result};
use crate::model::{one_step_map, unembed_logits, Candidate, ModelConfig, ModelParams, TokenSeq};
use crate::numerics::Matrix;
use graph::ParamVars;

/// One gradient tensor per parameter tensor, same shapes and order.
pub type ParamGrads = ModelParams;

/// Rejects anything that is not a probability vector over the vocabulary.
pub fn check_distribution(p: &[f64], vocab_size: usize) -> Result<()> {
    if p.len() != vocab_size {
        return Err(Error::Domain(format!(
            "target has {} entries for a vocabulary of {vocab_size}",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("target entries must be finite and >= 0".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("target sums to {sum}, not 1")));
    }
    Ok(())
}

/// `-sum_i p_i log f(s)_i`, evaluated without a tape.
pub fn cross_entropy_loss(s: &TokenSeq, p: &[f64], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    check_distribution(p, cfg.vocab_size)?;
    let r = crate::model::last_token_repr(s, params, cfg)?;
    let z = unembed_logits(&r, &params.unembedding, &params.ln_final, cfg.ln_epsilon)?;
    let lse = tape::log_sum_exp(z.data());
    Ok(-z
        .data()
        .iter()
        .zip(p)
        .map(|(zi, pi)| pi * (zi - lse))
        .sum::<f64>())
}

/// Loss and exact parameter gradient of the cross-entropy between the
/// next-token distribution of `s` and the target `p`.
pub fn grad_loss_params(
    s: &TokenSeq,
    p: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, ParamGrads)> {
    check_distribution(p, cfg.vocab_size)?;
    s.check(cfg)?;
    params.check_shapes(cfg)?;
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, true);
    let x0 = graph::embed(&mut tape, &pv, s.ids())?;
    let states = graph::forward(&mut tape, &pv, x0, params.blocks.len(), cfg)?;
    let r = graph::last_row(&mut tape, *states.last().unwrap())?;
    let z = graph::logits(&mut tape, &pv, r, cfg)?;
    let loss = tape.cross_entropy(z, p.to_vec())?;
    let mut grads = tape.backward(loss)?;
    let mut out = ModelParams::zeros(cfg);
    for (slot, &v) in out.tensors_mut().into_iter().zip(&pv.all) {
        *slot = grads.take_or_zeros(v, slot.shape());
    }
    Ok((tape.value(loss).get(0, 0), out))
}

/// `0.5 ||F(e; prefix) - target||^2` at `layer`, evaluated without a tape.
pub fn distance_objective(
    e: &[f64],
    prefix: &[usize],
    layer: usize,
    target: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let h = one_step_map(Candidate::Embedding(e), prefix, layer, params, cfg)?;
    if target.len() != h.len() {
        return Err(Error::shape("distance_objective", "target width"));
    }
    Ok(0.5 * h.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Value and gradient of `0.5 ||F(e; prefix) - target||^2` with respect to
/// the injected layer-0 row `e` at position `prefix.len()`.
pub fn grad_distance_embedding(
    e: &[f64],
    prefix: &[usize],
    layer: usize,
    target: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<f64>)> {
    if prefix.len() >= cfg.context {
        return Err(Error::Context {
            len: prefix.len() + 1,
            context: cfg.context,
        });
    }
    if layer > params.blocks.len() {
        return Err(Error::Layer {
            layer,
            blocks: params.blocks.len(),
        });
    }
    if e.len() != cfg.width || target.len() != cfg.width {
        return Err(Error::shape(
            "grad_distance_embedding",
            format!(
                "e {} and target {} for width {}",
                e.len(),
                target.len(),
                cfg.width
            ),
        ));
    }
    crate::model::check_ids(prefix, cfg)?;
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let head = graph::embed(&mut tape, &pv, prefix)?;
    let ev = tape.leaf(Matrix::row_vector(e.to_vec())?, true);
    let x0 = tape.concat_rows(vec![head, ev])?;
    let states = graph::forward(&mut tape, &pv, x0, layer, cfg)?;
    let h = graph::last_row(&mut tape, *states.last().unwrap())?;
    let obj = tape.half_squared_distance(h, target.to_vec())?;
    let mut grads = tape.backward(obj)?;
    let g = grads.take_or_zeros(ev, (1, cfg.width)).into_data();
    Ok((tape.value(obj).get(0, 0), g))
}

#[cfg(test)]
mod tests;
