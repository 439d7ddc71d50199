use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, Matrix, Rng};

/// Gain and shift of one LayerNorm, each stored as a `1 x d` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNormParams {
            gamma: Matrix::zeros(1, d),
            beta: Matrix::zeros(1, d),
        }
    }
}

/// Query, key and value projections of one head, each `d x d_head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Affine MLP layer `h -> W h + b` with `W` stored `d_out x d_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    /// `(H d_head) x d` output projection.
    pub w_out: Matrix,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub mlp: Vec<MlpLayer>,
}

/// Every trainable tensor of the model.
///
/// [`ModelParams::tensors`] defines the canonical order used for flat
/// vectors, initialization draws and the weight file: `E`, `P`, then per
/// block the per-head `Q, K, V`, `W_O`, `LN1 gamma/beta`, `LN2 gamma/beta`
/// and the MLP `W/b` pairs, then `U` and `LN_f gamma/beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<BlockParams>,
    pub unembedding: Matrix,
    pub ln_final: LayerNormParams,
}

/// Position of one tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ModelParams {
    /// All tensors zero, LayerNorm gains included.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |r, c, _| Ok(Matrix::zeros(r, c))).expect("zeros cannot fail")
    }

    /// Gaussian initialization: every weight, bias and LayerNorm shift is
    /// drawn i.i.d. `N(0, std^2)`; LayerNorm gains are `1 + N(0, std^2)`.
    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        Self::build(cfg, &mut |r, c, kind| {
            let m = gaussian_matrix(&mut rng, r, c, std)?;
            Ok(match kind {
                Kind::Gain => m.map(|v| 1.0 + v),
                Kind::Plain => m,
            })
        })
    }

    fn build(cfg: &ModelConfig, make: &mut dyn FnMut(usize, usize, Kind) -> Result<Matrix>) -> Result<Self> {
        let d = cfg.width;
        let ln = |make: &mut dyn FnMut(usize, usize, Kind) -> Result<Matrix>| {
            Ok::<_, Error>(LayerNormParams {
                gamma: make(1, d, Kind::Gain)?,
                beta: make(1, d, Kind::Plain)?,
            })
        };
        let token_embedding = make(cfg.vocab_size, d, Kind::Plain)?;
        let position_embedding = make(cfg.context, d, Kind::Plain)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut heads = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                heads.push(HeadParams {
                    query: make(d, cfg.head_dim, Kind::Plain)?,
                    key: make(d, cfg.head_dim, Kind::Plain)?,
                    value: make(d, cfg.head_dim, Kind::Plain)?,
                });
            }
            let w_out = make(cfg.heads * cfg.head_dim, d, Kind::Plain)?;
            let ln1 = ln(make)?;
            let ln2 = ln(make)?;
            let mut mlp = Vec::with_capacity(cfg.mlp_dims.len() - 1);
            for w in cfg.mlp_dims.windows(2) {
                mlp.push(MlpLayer {
                    weight: make(w[1], w[0], Kind::Plain)?,
                    bias: make(1, w[1], Kind::Plain)?,
                });
            }
            blocks.push(BlockParams {
                heads,
                w_out,
                ln1,
                ln2,
                mlp,
            });
        }
        let unembedding = make(cfg.vocab_size, d, Kind::Plain)?;
        let ln_final = ln(make)?;
        Ok(ModelParams {
            token_embedding,
            position_embedding,
            blocks,
            unembedding,
            ln_final,
        })
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            for h in &b.heads {
                out.extend([&h.query, &h.key, &h.value]);
            }
            out.extend([&b.w_out, &b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta]);
            for m in &b.mlp {
                out.extend([&m.weight, &m.bias]);
            }
        }
        out.extend([&self.unembedding, &self.ln_final.gamma, &self.ln_final.beta]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.extend([&mut h.query, &mut h.key, &mut h.value]);
            }
            out.extend([
                &mut b.w_out,
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
            ]);
            for m in &mut b.mlp {
                out.extend([&mut m.weight, &mut m.bias]);
            }
        }
        out.extend([
            &mut self.unembedding,
            &mut self.ln_final.gamma,
            &mut self.ln_final.beta,
        ]);
        out
    }

    /// Names, offsets and shapes of the tensors in canonical order.
    pub fn layout(cfg: &ModelConfig) -> Vec<TensorSlot> {
        let mut names = vec!["E".to_string(), "P".to_string()];
        for l in 0..cfg.blocks {
            for h in 0..cfg.heads {
                for m in ["Q", "K", "V"] {
                    names.push(format!("block{l}.head{h}.{m}"));
                }
            }
            for m in ["W_O", "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"] {
                names.push(format!("block{l}.{m}"));
            }
            for m in 0..cfg.mlp_dims.len() - 1 {
                names.push(format!("block{l}.mlp{m}.W"));
                names.push(format!("block{l}.mlp{m}.b"));
            }
        }
        names.extend(["U".into(), "ln_f.gamma".into(), "ln_f.beta".into()]);
        let shapes = ModelParams::zeros(cfg)
            .tensors()
            .iter()
            .map(|m| m.shape())
            .collect::<Vec<_>>();
        let mut offset = 0;
        names
            .into_iter()
            .zip(shapes)
            .map(|(name, (rows, cols))| {
                let slot = TensorSlot {
                    name,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn from_flat(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut params = ModelParams::zeros(cfg);
        if flat.len() != params.param_count() {
            return Err(Error::shape(
                "ModelParams::from_flat",
                format!("{} values for {} parameters", flat.len(), params.param_count()),
            ));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "ModelParams::from_flat",
            });
        }
        let mut offset = 0;
        for m in params.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg);
        let (mine, theirs) = (self.tensors(), expected.tensors());
        if mine.len() != theirs.len() {
            return Err(Error::shape(
                "ModelParams",
                format!("{} tensors, config implies {}", mine.len(), theirs.len()),
            ));
        }
        for (slot, (a, b)) in ModelParams::layout(cfg).iter().zip(mine.iter().zip(&theirs)) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{} is {:?}, expected {:?}", slot.name, a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self + alpha * other`, tensor by tensor.
    pub fn add_scaled(&self, other: &ModelParams, alpha: f64) -> Result<ModelParams> {
        let mut out = self.clone();
        let theirs = other.tensors();
        let mine = out.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("add_scaled", "tensor counts differ"));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "add_scaled",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        if out
            .tensors()
            .iter()
            .any(|m| m.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { op: "add_scaled" });
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Gain,
    Plain,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_config() {
        for cfg in [ModelConfig::toy(), ModelConfig::tiny()] {
            let params = ModelParams::zeros(&cfg);
            assert_eq!(params.param_count(), cfg.param_count());
            let layout = ModelParams::layout(&cfg);
            let last = layout.last().unwrap();
            assert_eq!(last.offset + last.len(), cfg.param_count());
        }
    }

    #[test]
    fn flat_round_trip() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 4, 0.02).unwrap();
        let back = ModelParams::from_flat(&cfg, &params.to_flat()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::init(&cfg, 17, 0.02).unwrap().to_flat();
        let b = ModelParams::init(&cfg, 17, 0.02).unwrap().to_flat();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gains_center_on_one() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, 1, 0.02).unwrap();
        let g = p.ln_final.gamma.data();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 0.2));
    }

    #[test]
    fn layout_names_follow_canonical_order() {
        let layout = ModelParams::layout(&ModelConfig::tiny());
        let names: Vec<_> = layout.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "E",
                "P",
                "block0.head0.Q",
                "block0.head0.K",
                "block0.head0.V",
                "block0.W_O",
                "block0.ln1.gamma",
                "block0.ln1.beta",
                "block0.ln2.gamma",
                "block0.ln2.beta",
                "block0.mlp0.W",
                "block0.mlp0.b",
                "U",
                "ln_f.gamma",
                "ln_f.beta"
            ]
        );
    }

    #[test]
    fn from_flat_rejects_wrong_length() {
        assert!(ModelParams::from_flat(&ModelConfig::tiny(), &[0.0; 3]).is_err());
    }
}
