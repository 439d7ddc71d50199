//! Explicit parameter settings that separate a chosen pair of prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerNormParams, ModelConfig, ModelParams, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseAVariant {
    /// Different last tokens: plant `e_1`, `e_2` in two rows of `E`.
    Token,
    /// Different lengths: plant `e_1`, `e_2` in two rows of `P`.
    Length,
}

/// Identity network with one pair of unit rows planted.
#[derive(Clone, Debug)]
pub struct CaseAWitness {
    pub params: ModelParams,
    pub s: TokenSeq,
    pub t: TokenSeq,
}

fn unit(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v
}

/// All blocks zero (so every block is the identity), `P = 0` and
/// `E[0] = e_1`, `E[1] = e_2` for the token variant; `E = 0`,
/// `P[0] = e_1`, `P[1] = e_2` for the length variant. The planted pair is
/// `<0>` vs `<1>` or `<0>` vs `<0, 0>`.
pub fn build_witness_case_a(which: CaseAVariant, cfg: &ModelConfig) -> Result<CaseAWitness> {
    if cfg.width < 2 {
        return Err(Error::Config("case A witness needs width >= 2".into()));
    }
    let mut params = ModelParams::zeros(cfg);
    let (s, t) = match which {
        CaseAVariant::Token => {
            if cfg.vocab_size < 2 {
                return Err(Error::Config("token witness needs two tokens".into()));
            }
            params
                .token_embedding
                .row_mut(0)
                .copy_from_slice(&unit(cfg.width, 0));
            params
                .token_embedding
                .row_mut(1)
                .copy_from_slice(&unit(cfg.width, 1));
            (vec![0], vec![1])
        }
        CaseAVariant::Length => {
            if cfg.context < 2 {
                return Err(Error::Config("length witness needs context >= 2".into()));
            }
            params
                .position_embedding
                .row_mut(0)
                .copy_from_slice(&unit(cfg.width, 0));
            params
                .position_embedding
                .row_mut(1)
                .copy_from_slice(&unit(cfg.width, 1));
            (vec![0], vec![0, 0])
        }
    };
    Ok(CaseAWitness {
        params,
        s: TokenSeq::new(s)?,
        t: TokenSeq::new(t)?,
    })
}

/// Attention-based witness for two equal-length prompts with the same last
/// token that first differ at `i_star`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseBWitness {
    pub params: ModelParams,
    /// The prompt whose `i_star` token carries the planted embedding.
    pub s: TokenSeq,
    pub t: TokenSeq,
    pub i_star: usize,
    /// True when the roles of the input prompts were exchanged because the
    /// second prompt's `i_star` token equals the shared last token.
    pub swapped: bool,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub c_ep: f64,
    pub c_e: f64,
    /// `(1 - delta) c_ep - 2 delta c_e`.
    pub gap_bound: f64,
    /// Closed-form first-coordinate gap `r(s)_1 - r(t)_1` for this pair.
    pub predicted_gap: f64,
}

/// `(2/d + eps)^{-1/2}` and `(1/d + eps)^{-1/2}`.
pub fn case_b_constants(width: usize, eps: f64) -> (f64, f64) {
    let d = width as f64;
    ((2.0 / d + eps).powf(-0.5), (1.0 / d + eps).powf(-0.5))
}

/// Orthonormal, zero-mean `e`, `p`, `q`: sign patterns on the first four
/// coordinates, zero elsewhere.
fn basis(d: usize) -> [Vec<f64>; 3] {
    let pad = |v: [f64; 4]| {
        let mut out = vec![0.0; d];
        for (o, x) in out.iter_mut().zip(v) {
            *o = 0.5 * x;
        }
        out
    };
    [
        pad([1.0, 1.0, -1.0, -1.0]),
        pad([1.0, -1.0, 1.0, -1.0]),
        pad([1.0, -1.0, -1.0, 1.0]),
    ]
}

/// Case B witness for the default pair of length `i_star + 2`:
/// `s` has token 0 at `i_star`, `t` has token 1, both end in token 2 and
/// carry token 2 everywhere else too, so the attention tail is nonzero.
/// `delta` is half its admissible bound.
pub fn build_witness_case_b(i_star: usize, cfg: &ModelConfig) -> Result<CaseBWitness> {
    if cfg.vocab_size < 3 {
        return Err(Error::Config("case B default pair needs three tokens".into()));
    }
    let len = i_star + 2;
    let mut s = vec![2; len];
    let mut t = vec![2; len];
    s[i_star] = 0;
    t[i_star] = 1;
    case_b_for_pair(&TokenSeq::new(s)?, &TokenSeq::new(t)?, None, cfg)
}

/// Case B witness for an arbitrary pair: equal lengths `T >= 2`, equal last
/// token, first difference at some `i_star < T - 1`. `delta` defaults to
/// half of `c_ep / (c_ep + 2 c_e)`.
pub fn case_b_for_pair(
    s: &TokenSeq,
    t: &TokenSeq,
    delta: Option<f64>,
    cfg: &ModelConfig,
) -> Result<CaseBWitness> {
    cfg.validate()?;
    if cfg.blocks == 0 {
        return Err(Error::Config("case B witness needs at least one block".into()));
    }
    s.check(cfg)?;
    t.check(cfg)?;
    let len = s.len();
    if t.len() != len || len < 2 {
        return Err(Error::Input(
            "case B needs two prompts of equal length >= 2".into(),
        ));
    }
    if s.last() != t.last() {
        return Err(Error::Input("case B needs a shared last token".into()));
    }
    let i_star = s
        .ids()
        .iter()
        .zip(t.ids())
        .position(|(a, b)| a != b)
        .ok_or_else(|| Error::Input("case B needs distinct prompts".into()))?;

    // If t's token at i_star is the shared last token it would also receive
    // the planted embedding and the rows at i_star would coincide; planting
    // on t instead avoids that, since s[i_star] != t[i_star] = t_T.
    let swapped = t.ids()[i_star] == t.last();
    let (s, t) = if swapped { (t, s) } else { (s, t) };

    let d = cfg.width;
    let eps = cfg.ln_epsilon;
    let (c_ep, c_e) = case_b_constants(d, eps);
    let bound = c_ep / (c_ep + 2.0 * c_e);
    let delta = delta.unwrap_or(0.5 * bound);
    if !(delta > 0.0 && delta < bound.min(0.5)) {
        return Err(Error::Config(format!(
            "delta {delta} must lie in (0, {})",
            bound.min(0.5)
        )));
    }
    let big_l = ((1.0 - delta) / delta * (len as f64 - 1.0)).ln();
    let ab = (cfg.head_dim as f64).sqrt() * big_l / (c_ep * c_ep);
    let (alpha, beta) = (ab.sqrt(), ab.sqrt());

    let [e, p, q] = basis(d);
    let mut params = ModelParams::zeros(cfg);
    for v in [s.ids()[i_star], s.last()] {
        params.token_embedding.row_mut(v).copy_from_slice(&e);
    }
    params.position_embedding.row_mut(i_star).copy_from_slice(&p);
    params.position_embedding.row_mut(len - 1).copy_from_slice(&q);

    let block = &mut params.blocks[0];
    block.ln1 = LayerNormParams::identity(d);
    let head = &mut block.heads[0];
    for k in 0..d {
        head.query.set(k, 0, alpha * e[k]);
        head.key.set(k, 0, beta * p[k]);
        head.value.set(k, 0, e[k]);
    }
    block.w_out.set(0, 0, 1.0);

    let predicted_gap = predicted_value(s, i_star, true, big_l, c_ep, c_e, &params)
        - predicted_value(t, i_star, false, big_l, c_ep, c_e, &params);
    Ok(CaseBWitness {
        params,
        s: s.clone(),
        t: t.clone(),
        i_star,
        swapped,
        alpha,
        beta,
        delta,
        c_ep,
        c_e,
        gap_bound: (1.0 - delta) * c_ep - 2.0 * delta * c_e,
        predicted_gap,
    })
}

/// Closed-form head output `<y_T, e_1>` at the last row.
fn predicted_value(
    seq: &TokenSeq,
    i_star: usize,
    planted: bool,
    big_l: f64,
    c_ep: f64,
    c_e: f64,
    params: &ModelParams,
) -> f64 {
    let len = seq.len();
    let others = (len - 1) as f64;
    // Score at i_star: L for the planted prompt, L c_e / c_ep otherwise.
    let score = if planted { big_l } else { big_l * c_e / c_ep };
    let a_star = score.exp() / (score.exp() + others);
    let a_tail = (1.0 - a_star) / others;
    let v_star = if planted { c_ep } else { 0.0 };
    let tail: f64 = (0..len)
        .filter(|&j| j != i_star)
        .map(|j| {
            let has_e = params.token_embedding.row(seq.ids()[j]).iter().any(|v| *v != 0.0);
            match (j == len - 1, has_e) {
                (true, _) => c_ep,
                (false, true) => c_e,
                (false, false) => 0.0,
            }
        })
        .sum();
    a_star * v_star + a_tail * tail
}
