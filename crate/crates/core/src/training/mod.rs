//! Plain gradient descent on the cross-entropy loss, full-batch or
//! mini-batch, with explicit per-step step sizes and batch schedules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_loss_params, ParamGrads};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TokenSeq};
use crate::numerics::Rng;

/// One training pair: a prompt and a target next-token distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: TokenSeq,
    pub target: Vec<f64>,
}

/// Step sizes and batch membership for every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_sizes: Vec<f64>,
    /// Sample indices used at each step.
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
}

impl TrainConfig {
    /// Constant step size `eta` over the given schedule.
    pub fn constant(eta: f64, batches: Vec<Vec<usize>>, seed: u64) -> Self {
        TrainConfig {
            step_sizes: vec![eta; batches.len()],
            batches,
            seed,
        }
    }

    pub fn steps(&self) -> usize {
        self.batches.len()
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.step_sizes.len() != self.batches.len() {
            return Err(Error::Config(format!(
                "{} step sizes for {} batches",
                self.step_sizes.len(),
                self.batches.len()
            )));
        }
        for (t, &eta) in self.step_sizes.iter().enumerate() {
            check_step_size(eta)
                .map_err(|_| Error::Config(format!("step size {eta} at step {t} is outside (0, 1)")))?;
        }
        for (t, b) in self.batches.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::Config(format!("empty batch at step {t}")));
            }
            if let Some(i) = b.iter().find(|&&i| i >= n_samples) {
                return Err(Error::Config(format!(
                    "batch {t} references sample {i} of {n_samples}"
                )));
            }
        }
        Ok(())
    }
}

fn check_step_size(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("step size {eta} is outside (0, 1)")))
    }
}

/// Mean loss and mean gradient over `batch`. Per-sample gradients may be
/// computed concurrently; the reduction runs in batch order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&Sample],
    cfg: &ModelConfig,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .map(|s| grad_loss_params(&s.prompt, &s.target, params, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut flat = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (acc, v) in flat.iter_mut().zip(g.to_flat()) {
            *acc += v;
        }
    }
    let n = batch.len() as f64;
    for v in &mut flat {
        *v /= n;
    }
    Ok((loss / n, ModelParams::from_flat(cfg, &flat)?))
}

/// `theta - eta * mean_i grad L_i(theta)`; also returns the batch loss at
/// `theta`.
pub fn gd_step(
    params: &ModelParams,
    batch: &[&Sample],
    eta: f64,
    cfg: &ModelConfig,
) -> Result<(ModelParams, f64)> {
    check_step_size(eta)?;
    let (loss, grad) = batch_gradient(params, batch, cfg)?;
    Ok((params.add_scaled(&grad, -eta)?, loss))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Batch loss before each step.
    pub losses: Vec<f64>,
}

/// Runs the schedule. `on_checkpoint(t, theta_t)` sees the parameters after
/// `t` steps for every `t` in `0..=T`.
pub fn train<F>(
    params0: &ModelParams,
    data: &[Sample],
    tcfg: &TrainConfig,
    cfg: &ModelConfig,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    tcfg.validate(data.len())?;
    params0.check_shapes(cfg)?;
    let mut params = params0.clone();
    let mut losses = Vec::with_capacity(tcfg.steps());
    on_checkpoint(0, &params)?;
    for (t, (batch, &eta)) in tcfg.batches.iter().zip(&tcfg.step_sizes).enumerate() {
        let samples: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
        let (next, loss) = gd_step(&params, &samples, eta, cfg)?;
        params = next;
        losses.push(loss);
        on_checkpoint(t + 1, &params)?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Synthetic corpus of `n` prompts with lengths in `min_len..=max_len`.
/// Even-indexed samples get one-hot targets, odd-indexed samples get soft
/// targets (a normalized vector of exponentials of Gaussians).
pub fn synthetic_corpus(
    cfg: &ModelConfig,
    n: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if min_len == 0 || min_len > max_len || max_len > cfg.context {
        return Err(Error::Config(format!(
            "prompt lengths {min_len}..={max_len} invalid for context {}",
            cfg.context
        )));
    }
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let len = min_len + rng.below(max_len - min_len + 1);
            let ids = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
            let target = if i % 2 == 0 {
                let mut t = vec![0.0; cfg.vocab_size];
                t[rng.below(cfg.vocab_size)] = 1.0;
                t
            } else {
                let raw: Vec<f64> = (0..cfg.vocab_size).map(|_| rng.gaussian().exp()).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            };
            Ok(Sample {
                prompt: TokenSeq::new(ids)?,
                target,
            })
        })
        .collect()
}

/// `steps` batches over `n` samples; step `t` draws `sizes[t % sizes.len()]`
/// distinct indices (capped at `n`). A size of `n` is a full-batch step.
pub fn batch_schedule(n: usize, steps: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config(
            "batch schedule needs samples and nonzero sizes".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    Ok((0..steps)
        .map(|t| {
            let k = sizes[t % sizes.len()].min(n);
            let mut idx = rng.permutation(n);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ModelConfig, ModelParams, Vec<Sample>) {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 1, 0.1).unwrap();
        let data = synthetic_corpus(&cfg, 8, 2, 6, 1).unwrap();
        (cfg, params, data)
    }

    #[test]
    fn rejects_step_size_outside_unit_interval() {
        let (cfg, params, data) = setup();
        for eta in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(
                gd_step(&params, &[&data[0]], eta, &cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        // At theta = 0 every first-order gradient vanishes.
        let cfg = ModelConfig::toy();
        let params = ModelParams::zeros(&cfg);
        let data = synthetic_corpus(&cfg, 2, 1, 3, 0).unwrap();
        let (next, _) = gd_step(&params, &[&data[0], &data[1]], 0.5, &cfg).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn two_sample_step_is_mean_of_single_steps() {
        let (cfg, params, data) = setup();
        let eta = 0.3;
        let (a, _) = gd_step(&params, &[&data[0]], eta, &cfg).unwrap();
        let (b, _) = gd_step(&params, &[&data[1]], eta, &cfg).unwrap();
        let (ab, _) = gd_step(&params, &[&data[0], &data[1]], eta, &cfg).unwrap();
        let mean: Vec<f64> = a
            .to_flat()
            .iter()
            .zip(b.to_flat())
            .map(|(x, y)| 0.5 * (x + y))
            .collect();
        let diff = ab
            .to_flat()
            .iter()
            .zip(&mean)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15, "{diff:e}");
    }

    #[test]
    fn zero_steps_is_identity() {
        let (cfg, params, data) = setup();
        let out = train(
            &params,
            &data,
            &TrainConfig::constant(0.1, vec![], 0),
            &cfg,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.params, params);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_shape_preserving() {
        let (cfg, params, data) = setup();
        let batches = batch_schedule(data.len(), 5, &[1, 3, 8], 2).unwrap();
        let tcfg = TrainConfig::constant(0.1, batches, 2);
        let mut seen = vec![];
        let a = train(&params, &data, &tcfg, &cfg, |t, _| {
            seen.push(t);
            Ok(())
        })
        .unwrap();
        let b = train(&params, &data, &tcfg, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.params), bits(&b.params));
        a.params.check_shapes(&cfg).unwrap();
        assert_eq!(a.losses.len(), 5);
    }

    #[test]
    fn schedule_validation() {
        let tcfg = TrainConfig::constant(0.1, vec![vec![0], vec![]], 0);
        assert!(tcfg.validate(4).is_err());
        let tcfg = TrainConfig::constant(0.1, vec![vec![7]], 0);
        assert!(tcfg.validate(4).is_err());
        let tcfg = TrainConfig::constant(1.0, vec![vec![0]], 0);
        assert!(tcfg.validate(4).is_err());
    }

    #[test]
    fn corpus_targets_are_distributions() {
        let cfg = ModelConfig::toy();
        for s in synthetic_corpus(&cfg, 10, 1, 8, 3).unwrap() {
            assert!((s.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((1..=8).contains(&s.prompt.len()));
        }
    }
}
