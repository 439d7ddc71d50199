use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{one_step_map, Candidate, ModelConfig, ModelParams};
use crate::numerics::l2_distance;

/// First tolerance tried by backoff when the configured one is zero.
pub const BACKOFF_START: f64 = 1e-9;

/// What to do when no token verifies at a position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "cap")]
pub enum Backoff {
    Off,
    /// Multiply the tolerance by 10 while it stays at or below the cap.
    Tenfold(f64),
}

/// Acceptance ball radius, backoff policy and the layer states come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub epsilon: f64,
    pub backoff: Backoff,
    pub layer: usize,
}

impl VerifierConfig {
    /// `epsilon = 0`, no backoff: only an exact reproduction verifies.
    pub fn exact(layer: usize) -> Self {
        VerifierConfig {
            epsilon: 0.0,
            backoff: Backoff::Off,
            layer,
        }
    }

    /// `epsilon = 1e-9`, tenfold backoff up to `1e-3`.
    pub fn with_backoff(layer: usize) -> Self {
        VerifierConfig {
            epsilon: BACKOFF_START,
            backoff: Backoff::Tenfold(1e-3),
            layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if let Backoff::Tenfold(cap) = self.backoff {
            if !(cap >= self.epsilon) || !cap.is_finite() {
                return Err(Error::Config(format!(
                    "backoff cap {cap} must be >= epsilon {}",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }

    /// Tolerances tried after the first pass, in order.
    pub fn backoff_levels(&self) -> Vec<f64> {
        let Backoff::Tenfold(cap) = self.backoff else {
            return Vec::new();
        };
        let mut eps = if self.epsilon > 0.0 {
            self.epsilon * 10.0
        } else {
            BACKOFF_START
        };
        let mut out = Vec::new();
        while eps <= cap * (1.0 + 1e-12) {
            out.push(eps);
            eps *= 10.0;
        }
        out
    }
}

/// `||F(v; prefix) - target||`.
pub fn candidate_distance(
    v: usize,
    target: &[f64],
    prefix: &[usize],
    layer: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let h = one_step_map(Candidate::Token(v), prefix, layer, params, cfg)?;
    if h.len() != target.len() {
        return Err(Error::shape(
            "verify",
            format!(
                "observed row of width {} for model width {}",
                target.len(),
                h.len()
            ),
        ));
    }
    Ok(l2_distance(&h, target))
}

/// True iff `||F(v; prefix) - target|| <= epsilon` at the configured layer.
pub fn verify(
    v: usize,
    target: &[f64],
    prefix: &[usize],
    vcfg: &VerifierConfig,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<bool> {
    vcfg.validate()?;
    Ok(candidate_distance(v, target, prefix, vcfg.layer, params, cfg)? <= vcfg.epsilon)
}
