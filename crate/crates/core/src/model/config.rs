use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MLP nonlinearity. Both choices are real-analytic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    GeluTanh,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::GeluTanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::GeluTanh),
            other => Err(Error::Config(format!("unknown activation code {other}"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::GeluTanh => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::GeluTanh => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Architecture shape. Missing fields deserialize to the toy defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Context bound `K`.
    pub context: usize,
    /// Residual width `d`.
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of transformer blocks `L`.
    pub blocks: usize,
    /// `d_0 .. d_M`; the first and last entries must equal `width`.
    pub mlp_dims: Vec<usize>,
    pub activation: Activation,
    pub ln_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// `|V|=64, K=32, d=16, H=2, d_head=8, L=2`, MLP `16 -> 32 -> 16`.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 64,
            context: 32,
            width: 16,
            heads: 2,
            head_dim: 8,
            blocks: 2,
            mlp_dims: vec![16, 32, 16],
            activation: Activation::GeluTanh,
            ln_epsilon: 1e-5,
        }
    }

    /// The smallest configuration used for the Hessian-at-zero check:
    /// `|V|=3, d=4, L=1, H=1, d_head=1`, MLP `4 -> 4`.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 3,
            context: 2,
            width: 4,
            heads: 1,
            head_dim: 1,
            blocks: 1,
            mlp_dims: vec![4, 4],
            activation: Activation::Tanh,
            ln_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width < 4 {
            return fail(format!("width d must be >= 4, got {}", self.width));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.context == 0 {
            return fail("context must be >= 1".into());
        }
        if self.heads == 0 || self.head_dim == 0 {
            return fail(format!(
                "heads and head_dim must be >= 1, got {} and {}",
                self.heads, self.head_dim
            ));
        }
        if self.mlp_dims.len() < 2 {
            return fail("mlp_dims needs at least an input and an output width".into());
        }
        if self.mlp_dims[0] != self.width || *self.mlp_dims.last().unwrap() != self.width {
            return fail(format!(
                "mlp_dims must start and end with width {}, got {:?}",
                self.width, self.mlp_dims
            ));
        }
        if self.mlp_dims.contains(&0) {
            return fail("mlp_dims entries must be >= 1".into());
        }
        if !(self.ln_epsilon > 0.0) || !self.ln_epsilon.is_finite() {
            return fail(format!("ln_epsilon must be > 0, got {}", self.ln_epsilon));
        }
        Ok(())
    }

    /// Total number of trainable scalars `p`.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let ln = 2 * d;
        let mlp: usize = self.mlp_dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        let block = self.heads * 3 * d * self.head_dim + self.heads * self.head_dim * d + 2 * ln + mlp;
        self.vocab_size * d + self.context * d + self.blocks * block + self.vocab_size * d + ln
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_narrow_width() {
        let cfg = ModelConfig {
            width: 3,
            mlp_dims: vec![3, 3],
            ..ModelConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_mlp_and_epsilon() {
        let cfg = ModelConfig {
            mlp_dims: vec![16, 32, 8],
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            ln_epsilon: 0.0,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_param_count() {
        // E 12, P 8, QKV 12, W_O 4, LN 16, MLP 20, U 12, LN_f 8
        assert_eq!(ModelConfig::tiny().param_count(), 92);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        for act in [Activation::Tanh, Activation::GeluTanh] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }
}
