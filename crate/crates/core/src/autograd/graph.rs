//! Records the model's forward pass on a tape, op for op in the same order
//! as `model::forward`, so values agree bit-exactly.

use super::tape::{GradTape, Var};
use crate::error::Result;
use crate::model::{causal_mask, ModelConfig, ModelParams};
use crate::numerics::Matrix;

pub(crate) struct LnVars {
    pub gamma: Var,
    pub beta: Var,
}

pub(crate) struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

pub(crate) struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub w_out: Var,
    pub ln1: LnVars,
    pub ln2: LnVars,
    pub mlp: Vec<(Var, Var)>,
}

/// Tape leaves for every tensor, pushed in canonical order.
pub(crate) struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub unembedding: Var,
    pub ln_final: LnVars,
    pub all: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut GradTape, params: &ModelParams, requires_grad: bool) -> Self {
        let mut all = Vec::new();
        let mut leaf = |tape: &mut GradTape, m: &Matrix| {
            let v = tape.leaf(m.clone(), requires_grad);
            all.push(v);
            v
        };
        let token_embedding = leaf(tape, &params.token_embedding);
        let position_embedding = leaf(tape, &params.position_embedding);
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            let heads = b
                .heads
                .iter()
                .map(|h| HeadVars {
                    query: leaf(tape, &h.query),
                    key: leaf(tape, &h.key),
                    value: leaf(tape, &h.value),
                })
                .collect();
            let w_out = leaf(tape, &b.w_out);
            let ln1 = LnVars {
                gamma: leaf(tape, &b.ln1.gamma),
                beta: leaf(tape, &b.ln1.beta),
            };
            let ln2 = LnVars {
                gamma: leaf(tape, &b.ln2.gamma),
                beta: leaf(tape, &b.ln2.beta),
            };
            let mlp = b
                .mlp
                .iter()
                .map(|m| (leaf(tape, &m.weight), leaf(tape, &m.bias)))
                .collect();
            blocks.push(BlockVars {
                heads,
                w_out,
                ln1,
                ln2,
                mlp,
            });
        }
        let unembedding = leaf(tape, &params.unembedding);
        let ln_final = LnVars {
            gamma: leaf(tape, &params.ln_final.gamma),
            beta: leaf(tape, &params.ln_final.beta),
        };
        ParamVars {
            token_embedding,
            position_embedding,
            blocks,
            unembedding,
            ln_final,
            all,
        }
    }
}

/// `E[ids] + P[0..len]`.
pub(crate) fn embed(tape: &mut GradTape, pv: &ParamVars, ids: &[usize]) -> Result<Var> {
    let e = tape.select_rows(pv.token_embedding, ids.to_vec())?;
    let p = tape.select_rows(pv.position_embedding, (0..ids.len()).collect())?;
    tape.add(e, p)
}

fn layer_norm(tape: &mut GradTape, x: Var, ln: &LnVars, eps: f64) -> Result<Var> {
    tape.layer_norm_rows(x, ln.gamma, ln.beta, eps)
}

fn attention(tape: &mut GradTape, x: Var, h: &HeadVars, mask: Var, head_dim: usize) -> Result<Var> {
    let xq = tape.mat_mul(x, h.query)?;
    let xk = tape.mat_mul(x, h.key)?;
    let xk_t = tape.transpose(xk)?;
    let z = tape.mat_mul(xq, xk_t)?;
    let z = tape.scale(z, 1.0 / (head_dim as f64).sqrt())?;
    let z = tape.add(z, mask)?;
    let a = tape.softmax_rows(z)?;
    let xv = tape.mat_mul(x, h.value)?;
    tape.mat_mul(a, xv)
}

fn block(tape: &mut GradTape, x: Var, b: &BlockVars, cfg: &ModelConfig) -> Result<Var> {
    let t = tape.value(x).rows();
    let mask = tape.leaf(causal_mask(t), false);
    let xn = layer_norm(tape, x, &b.ln1, cfg.ln_epsilon)?;
    let heads = b
        .heads
        .iter()
        .map(|h| attention(tape, xn, h, mask, cfg.head_dim))
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(heads)?;
    let attn = tape.mat_mul(cat, b.w_out)?;
    let h = tape.add(x, attn)?;
    let hn = layer_norm(tape, h, &b.ln2, cfg.ln_epsilon)?;
    let mut y = affine(tape, hn, b.mlp[0])?;
    for &layer in &b.mlp[1..] {
        let act = tape.activation(y, cfg.activation)?;
        y = affine(tape, act, layer)?;
    }
    tape.add(h, y)
}

fn affine(tape: &mut GradTape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.mat_mul(x, wt)?;
    tape.add_row(y, b)
}

/// Runs blocks `1..=layers` and returns the per-layer outputs, starting with
/// `x0`.
pub(crate) fn forward(
    tape: &mut GradTape,
    pv: &ParamVars,
    x0: Var,
    layers: usize,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let mut out = vec![x0];
    for b in &pv.blocks[..layers] {
        let next = block(tape, *out.last().unwrap(), b, cfg)?;
        out.push(next);
    }
    Ok(out)
}

/// `1 x |V|` logits `LN_f(h) U^T` for a `1 x d` state.
pub(crate) fn logits(tape: &mut GradTape, pv: &ParamVars, h: Var, cfg: &ModelConfig) -> Result<Var> {
    let normed = layer_norm(tape, h, &pv.ln_final, cfg.ln_epsilon)?;
    let ut = tape.transpose(pv.unembedding)?;
    tape.mat_mul(normed, ut)
}

pub(crate) fn last_row(tape: &mut GradTape, x: Var) -> Result<Var> {
    let t = tape.value(x).rows();
    tape.select_rows(x, vec![t - 1])
}
