//! The individual modules of the architecture. Every function here is a
//! composition of the primitives in `numerics`, in a fixed order; the
//! autograd tape replays the same compositions.

use super::config::{Activation, ModelConfig};
use super::params::{BlockParams, LayerNormParams, MlpLayer};
use crate::error::{Error, Result};
use crate::numerics::{checked, exp, mat_mul, row_normalize, softmax_rows, Matrix};

/// Additive stand-in for `-inf` above the diagonal of the causal mask.
pub const MASK_VALUE: f64 = -1e9;

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (mu, inv) = layer_norm_stats(x, eps);
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&xi, (&g, &b))| g * ((xi - mu) * inv) + b)
        .collect()
}

/// `(mean, 1 / sqrt(var + eps))` of one row.
pub(crate) fn layer_norm_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let mu = mean(x);
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
    (mu, 1.0 / (var + eps).sqrt())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// LayerNorm applied to each row.
pub fn layer_norm_rows(x: &Matrix, ln: &LayerNormParams, eps: f64) -> Result<Matrix> {
    if ln.gamma.shape() != (1, x.cols()) || ln.beta.shape() != (1, x.cols()) {
        return Err(Error::shape(
            "layer_norm_rows",
            format!("gain/shift {:?} for rows of width {}", ln.gamma.shape(), x.cols()),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let y = layer_norm(x.row(r), ln.gamma.data(), ln.beta.data(), eps);
        out.row_mut(r).copy_from_slice(&y);
    }
    checked("layer_norm_rows", out)
}

/// `M_ij = 0` for `j <= i`, [`MASK_VALUE`] otherwise.
pub fn causal_mask(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, MASK_VALUE);
        }
    }
    m
}

/// Unit lower-triangular ones.
pub fn lower_triangular_ones(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in 0..=i {
            m.set(i, j, 1.0);
        }
    }
    m
}

fn check_attention_shapes(x: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    let d = x.cols();
    if q.rows() != d || k.rows() != d || v.rows() != d || q.cols() != k.cols() {
        return Err(Error::shape(
            "causal_attention",
            format!(
                "X {:?}, Q {:?}, K {:?}, V {:?}",
                x.shape(),
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::shape("causal_attention", "empty sequence"));
    }
    Ok(())
}

/// Scaled scores `(XQ)(XK)^T / sqrt(d_head)`.
pub fn attention_scores(x: &Matrix, q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let xq = mat_mul(x, q)?;
    let xk = mat_mul(x, k)?;
    mat_mul(&xq, &xk.transpose())?.scale(1.0 / (q.cols() as f64).sqrt())
}

/// Attention weights `softmax(Z + M)`; row `t` is zero beyond column `t`.
pub fn causal_attention_weights(x: &Matrix, q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let z = attention_scores(x, q, k)?;
    softmax_rows(&z.add(&causal_mask(x.rows()))?)
}

/// Causal self-attention with an additive mask and stable softmax.
pub fn causal_attention_masked(x: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_shapes(x, q, k, v)?;
    let a = causal_attention_weights(x, q, k)?;
    mat_mul(&a, &mat_mul(x, v)?)
}

/// Causal self-attention as `RN(L * exp Z) XV`. Uses a plain exponential, so
/// scores must stay well inside the `f64` range.
pub fn causal_attention_projection(x: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_shapes(x, q, k, v)?;
    let z = attention_scores(x, q, k)?;
    let gated = lower_triangular_ones(x.rows()).hadamard(&exp(&z)?)?;
    mat_mul(&row_normalize(&gated)?, &mat_mul(x, v)?)
}

/// `[head_1 .. head_H] W_O`.
pub fn multi_head_attention(x: &Matrix, block: &BlockParams) -> Result<Matrix> {
    let heads = block
        .heads
        .iter()
        .map(|h| causal_attention_masked(x, &h.query, &h.key, &h.value))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = heads.iter().collect();
    mat_mul(&Matrix::concat_cols(&refs)?, &block.w_out)
}

/// `X W^T + b` applied to each row.
pub fn affine_rows(x: &Matrix, layer: &MlpLayer) -> Result<Matrix> {
    mat_mul(x, &layer.weight.transpose())?.add_row(&layer.bias)
}

/// Row-wise MLP: affine, then `activation` followed by affine for every
/// further layer. No activation after the last layer.
pub fn mlp(x: &Matrix, layers: &[MlpLayer], activation: Activation) -> Result<Matrix> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::shape("mlp", "no layers"))?;
    let mut h = affine_rows(x, first)?;
    for layer in rest {
        h = affine_rows(&checked("activation", h.map(|v| activation.apply(v)))?, layer)?;
    }
    Ok(h)
}

/// Pre-LN residual block: `H = X + attn(LN1 X)`, `TB(X) = H + mlp(LN2 H)`.
pub fn transformer_block(x: &Matrix, block: &BlockParams, cfg: &ModelConfig) -> Result<Matrix> {
    if x.cols() != cfg.width {
        return Err(Error::shape(
            "transformer_block",
            format!("input width {} for model width {}", x.cols(), cfg.width),
        ));
    }
    let attn = multi_head_attention(&layer_norm_rows(x, &block.ln1, cfg.ln_epsilon)?, block)?;
    let h = x.add(&attn)?;
    let m = mlp(
        &layer_norm_rows(&h, &block.ln2, cfg.ln_epsilon)?,
        &block.mlp,
        cfg.activation,
    )?;
    h.add(&m)
}

/// Next-token distribution `softmax(U LN_f(h))`.
pub fn unembed(h: &[f64], unembedding: &Matrix, ln_final: &LayerNormParams, eps: f64) -> Result<Vec<f64>> {
    let logits = unembed_logits(h, unembedding, ln_final, eps)?;
    Ok(softmax_rows(&logits)?.into_data())
}

/// `1 x |V|` logits `(U LN_f(h))^T`.
pub fn unembed_logits(
    h: &[f64],
    unembedding: &Matrix,
    ln_final: &LayerNormParams,
    eps: f64,
) -> Result<Matrix> {
    if h.len() != unembedding.cols() {
        return Err(Error::shape(
            "unembed",
            format!("state of width {} for U {:?}", h.len(), unembedding.shape()),
        ));
    }
    let normed = layer_norm_rows(&Matrix::row_vector(h.to_vec())?, ln_final, eps)?;
    mat_mul(&normed, &unembedding.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, Rng};

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], 1e-5);
        assert!(y.iter().all(|v| *v == 0.0));

        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-5);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expected).abs() < 1e-15 && (y[1] + expected).abs() < 1e-15);
        assert!((y[0] - 0.9999950).abs() < 1e-7);

        let y = layer_norm(&[5.0, -2.0, 7.0], &[0.0; 3], &[0.3, 0.1, -0.4], 1e-5);
        assert_eq!(y, vec![0.3, 0.1, -0.4]);
    }

    fn rows(values: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&values.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_scores_average_the_prefix() {
        let x = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero = Matrix::zeros(2, 2);
        let v = Matrix::identity(2);
        for out in [
            causal_attention_masked(&x, &zero, &zero, &v).unwrap(),
            causal_attention_projection(&x, &zero, &zero, &v).unwrap(),
        ] {
            assert_eq!(out.row(0), &[1.0, 0.0]);
            assert_eq!(out.row(1), &[0.5, 0.5]);
        }
    }

    #[test]
    fn single_position_passes_values_through() {
        let mut rng = Rng::new(2);
        let x = gaussian_matrix(&mut rng, 1, 4, 1.0).unwrap();
        let q = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let k = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let v = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let xv = mat_mul(&x, &v).unwrap();
        assert_eq!(causal_attention_masked(&x, &q, &k, &v).unwrap(), xv);
        assert_eq!(causal_attention_projection(&x, &q, &k, &v).unwrap(), xv);
    }

    #[test]
    fn seed_7_forms_agree() {
        let mut rng = Rng::new(7);
        let x = gaussian_matrix(&mut rng, 3, 4, 1.0).unwrap();
        let q = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let k = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let v = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let a = causal_attention_masked(&x, &q, &k, &v).unwrap();
        let b = causal_attention_projection(&x, &q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let x = Matrix::zeros(2, 4);
        let q = Matrix::zeros(3, 2);
        let k = Matrix::zeros(4, 2);
        assert!(causal_attention_masked(&x, &q, &k, &k).is_err());
        assert!(causal_attention_projection(&x, &q, &k, &k).is_err());
    }

    #[test]
    fn unembed_uniform_when_u_is_zero() {
        let u = Matrix::zeros(5, 4);
        let ln = LayerNormParams::identity(4);
        let p = unembed(&[0.3, -1.0, 2.0, 0.1], &u, &ln, 1e-5).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }
}
