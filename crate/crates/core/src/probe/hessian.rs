use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{check_distribution, grad_loss_params};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TokenSeq};

/// Step used for central differences of reverse-mode gradients.
pub const HESSIAN_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCheck {
    pub eta: f64,
    /// `det(I - eta H)` from the numerical Hessian.
    pub measured: f64,
    /// `(1 - eta^2 ||w||^2)^d`.
    pub expected: f64,
    pub relative_error: f64,
}

/// Numerical Hessian of the cross-entropy loss at `theta = 0` against its
/// closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub params: usize,
    /// `||w||` with `w = (1/|V|) 1 - p`.
    pub w_norm: f64,
    /// Eigenvalues of the symmetrized Hessian, ascending.
    pub eigenvalues: Vec<f64>,
    /// `-||w||` and `+||w||` with multiplicity `d` each, zero elsewhere,
    /// ascending.
    pub expected_eigenvalues: Vec<f64>,
    pub max_eigenvalue_error: f64,
    /// Largest `|H_ij - H_ji|` before symmetrization.
    pub asymmetry: f64,
    /// Largest `|H_ij|` with `i` or `j` outside the `U` and `LN_f` shift
    /// tensors.
    pub psi_block_max: f64,
    pub determinants: Vec<DetCheck>,
}

/// Central-difference Hessian of the loss at `params`, one column per
/// parameter from two reverse-mode gradients. Returned unsymmetrized.
pub fn numerical_hessian(
    s: &TokenSeq,
    p: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    h: f64,
) -> Result<DMatrix<f64>> {
    let theta = params.to_flat();
    let n = theta.len();
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut probe = theta.clone();
            probe[j] = theta[j] + h;
            let up = grad_loss_params(s, p, &ModelParams::from_flat(cfg, &probe)?, cfg)?
                .1
                .to_flat();
            probe[j] = theta[j] - h;
            let down = grad_loss_params(s, p, &ModelParams::from_flat(cfg, &probe)?, cfg)?
                .1
                .to_flat();
            Ok(up
                .iter()
                .zip(&down)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| columns[j][i]))
}

/// Checks the Hessian spectrum, its vanishing blocks and `det(I - eta H)`
/// at the all-zero parameter point for each step size in `etas`.
pub fn hessian_witness_check(
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    p: &[f64],
    etas: &[f64],
) -> Result<HessianReport> {
    cfg.validate()?;
    check_distribution(p, cfg.vocab_size)?;
    if let Some(eta) = etas.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::Config(format!("step size {eta} is outside (0, 1)")));
    }
    let params = ModelParams::zeros(cfg);
    let raw = numerical_hessian(prompt, p, &params, cfg, HESSIAN_STEP)?;
    let n = raw.nrows();
    let asymmetry = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (raw[(i, j)] - raw[(j, i)]).abs())
        .fold(0.0, f64::max);
    let hess = (&raw + raw.transpose()) * 0.5;

    let layout = ModelParams::layout(cfg);
    let in_phi: Vec<bool> = {
        let mut mask = vec![false; n];
        for slot in layout.iter().filter(|s| s.name == "U" || s.name == "ln_f.beta") {
            mask[slot.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    };
    let mut psi_block_max: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !(in_phi[i] && in_phi[j]) {
                psi_block_max = psi_block_max.max(hess[(i, j)].abs());
            }
        }
    }

    let uniform = 1.0 / cfg.vocab_size as f64;
    let w_norm = p.iter().map(|pi| (uniform - pi).powi(2)).sum::<f64>().sqrt();
    let d = cfg.width;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(hess.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigenvalues.sort_by(f64::total_cmp);
    let mut expected_eigenvalues = vec![0.0; n];
    for k in 0..d {
        expected_eigenvalues[k] = -w_norm;
        expected_eigenvalues[n - 1 - k] = w_norm;
    }
    let max_eigenvalue_error = eigenvalues
        .iter()
        .zip(&expected_eigenvalues)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let determinants = etas
        .iter()
        .map(|&eta| {
            let jac = DMatrix::<f64>::identity(n, n) - &hess * eta;
            let measured = jac.determinant();
            let expected = (1.0 - eta * eta * w_norm * w_norm).powi(d as i32);
            DetCheck {
                eta,
                measured,
                expected,
                relative_error: (measured - expected).abs() / expected.abs(),
            }
        })
        .collect();

    Ok(HessianReport {
        params: n,
        w_norm,
        eigenvalues,
        expected_eigenvalues,
        max_eigenvalue_error,
        asymmetry,
        psi_block_max,
        determinants,
    })
}
