use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{transformer_block, unembed};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A prompt: a nonempty sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("token sequence must be nonempty".into()));
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("nonempty")
    }

    /// Checks ids against the vocabulary and length against the context.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        check_ids(&self.0, cfg)
    }
}

impl TryFrom<Vec<usize>> for TokenSeq {
    type Error = Error;

    fn try_from(ids: Vec<usize>) -> Result<Self> {
        TokenSeq::new(ids)
    }
}

impl From<TokenSeq> for Vec<usize> {
    fn from(s: TokenSeq) -> Self {
        s.0
    }
}

pub(crate) fn check_ids(ids: &[usize], cfg: &ModelConfig) -> Result<()> {
    if ids.len() > cfg.context {
        return Err(Error::Context {
            len: ids.len(),
            context: cfg.context,
        });
    }
    if let Some(&token) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            token,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Hidden states of every layer; `layers[0]` is the embedding output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn layer(&self, l: usize) -> Result<&Matrix> {
        self.layers.get(l).ok_or(Error::Layer {
            layer: l,
            blocks: self.layers.len().saturating_sub(1),
        })
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("at least the embedding layer")
    }
}

/// Token-id or continuous candidate for the one-step map.
#[derive(Clone, Copy, Debug)]
pub enum Candidate<'a> {
    Token(usize),
    /// Used verbatim as the layer-0 row at the candidate position.
    Embedding(&'a [f64]),
}

/// Layer-0 rows `E[s_i] + P[i]`.
pub fn embed(s: &TokenSeq, params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix> {
    embed_ids(s.ids(), params, cfg)
}

/// [`embed`] for a raw id slice, which may be empty.
pub fn embed_ids(ids: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix> {
    check_ids(ids, cfg)?;
    let mut out = Matrix::zeros(ids.len(), cfg.width);
    for (i, &tok) in ids.iter().enumerate() {
        let e = params.token_embedding.row(tok);
        let p = params.position_embedding.row(i);
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }
    Ok(out)
}

/// Runs blocks `1..=layers` on a layer-0 matrix and returns every
/// intermediate, starting with `x0` itself.
pub fn forward_embedded(
    x0: Matrix,
    layers: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Matrix>> {
    if layers > params.blocks.len() {
        return Err(Error::Layer {
            layer: layers,
            blocks: params.blocks.len(),
        });
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(x0);
    for block in &params.blocks[..layers] {
        let next = transformer_block(out.last().unwrap(), block, cfg)?;
        out.push(next);
    }
    Ok(out)
}

pub fn forward(s: &TokenSeq, params: &ModelParams, cfg: &ModelConfig) -> Result<HiddenStates> {
    let x0 = embed(s, params, cfg)?;
    Ok(HiddenStates {
        layers: forward_embedded(x0, params.blocks.len(), params, cfg)?,
    })
}

/// Last row of the final layer.
pub fn last_token_repr(s: &TokenSeq, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    last_token_repr_at(s, params.blocks.len(), params, cfg)
}

/// Last row of layer `layer`.
pub fn last_token_repr_at(
    s: &TokenSeq,
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let x0 = embed(s, params, cfg)?;
    let states = forward_embedded(x0, layer, params, cfg)?;
    let h = states.last().unwrap();
    Ok(h.row(h.rows() - 1).to_vec())
}

/// Layer-0 input for the one-step map: `Emb(prefix)` with the candidate row
/// appended at position `prefix.len()`.
pub fn one_step_input(
    v: Candidate<'_>,
    prefix: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Matrix> {
    let t = prefix.len();
    if t >= cfg.context {
        return Err(Error::Context {
            len: t + 1,
            context: cfg.context,
        });
    }
    let head = embed_ids(prefix, params, cfg)?;
    let row = match v {
        Candidate::Token(tok) => {
            if tok >= cfg.vocab_size {
                return Err(Error::Vocabulary {
                    token: tok,
                    vocab_size: cfg.vocab_size,
                });
            }
            params
                .token_embedding
                .row(tok)
                .iter()
                .zip(params.position_embedding.row(t))
                .map(|(a, b)| a + b)
                .collect()
        }
        Candidate::Embedding(e) => {
            if e.len() != cfg.width {
                return Err(Error::shape(
                    "one_step_map",
                    format!(
                        "injected vector of width {} for model width {}",
                        e.len(),
                        cfg.width
                    ),
                ));
            }
            e.to_vec()
        }
    };
    Matrix::concat_rows(&[&head, &Matrix::row_vector(row)?])
}

/// `F(v; prefix, t)`: row `t = prefix.len()` (zero-based) of layer `layer`
/// when `v` is placed after `prefix`.
pub fn one_step_map(
    v: Candidate<'_>,
    prefix: &[usize],
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let x0 = one_step_input(v, prefix, params, cfg)?;
    let states = forward_embedded(x0, layer, params, cfg)?;
    let h = states.last().unwrap();
    Ok(h.row(h.rows() - 1).to_vec())
}

/// Next-token distribution `f(s) = softmax(U LN_f(r(s)))`.
pub fn next_token_distribution(s: &TokenSeq, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let r = last_token_repr(s, params, cfg)?;
    unembed(&r, &params.unembedding, &params.ln_final, cfg.ln_epsilon)
}
