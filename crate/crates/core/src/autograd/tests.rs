use super::*;
use crate::model::{forward, HiddenStates};
use crate::numerics::Rng;

fn random_prompt(rng: &mut Rng, len: usize, vocab: usize) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.below(vocab)).collect()).unwrap()
}

fn soft_target(rng: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn tape_forward_matches_model_bit_exactly() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 3, 0.3).unwrap();
    let s = random_prompt(&mut Rng::new(1), 7, cfg.vocab_size);
    let HiddenStates { layers } = forward(&s, &params, &cfg).unwrap();

    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, &params, true);
    let x0 = graph::embed(&mut tape, &pv, s.ids()).unwrap();
    let vars = graph::forward(&mut tape, &pv, x0, cfg.blocks, &cfg).unwrap();
    for (v, m) in vars.iter().zip(&layers) {
        assert_eq!(bits(tape.value(*v)), bits(m));
    }

    let replayed = tape.replay().unwrap();
    for (i, m) in replayed.iter().enumerate() {
        assert_eq!(bits(m), bits(tape.value(Var(i))));
    }
}

#[test]
fn tape_loss_matches_plain_loss() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 8, 0.3).unwrap();
    let mut rng = Rng::new(8);
    let s = random_prompt(&mut rng, 5, cfg.vocab_size);
    let p = soft_target(&mut rng, cfg.vocab_size);
    let (loss, _) = grad_loss_params(&s, &p, &params, &cfg).unwrap();
    assert_eq!(
        loss.to_bits(),
        cross_entropy_loss(&s, &p, &params, &cfg).unwrap().to_bits()
    );
}

#[test]
fn zero_params_give_log_vocab_and_w() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::zeros(&cfg);
    let s = TokenSeq::new(vec![0, 2]).unwrap();
    let p = vec![0.0, 1.0, 0.0];
    let (loss, grads) = grad_loss_params(&s, &p, &params, &cfg).unwrap();
    assert_eq!(loss, 3f64.ln());
    // U and every other tensor sees a zero LayerNorm output, so all
    // first-order gradients vanish at the origin.
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn logit_gradient_at_zero_is_w() {
    let mut tape = GradTape::new();
    let z = tape.leaf(Matrix::zeros(1, 4), true);
    let p = vec![0.1, 0.2, 0.3, 0.4];
    let loss = tape.cross_entropy(z, p.clone()).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let w = g.take_or_zeros(z, (1, 4));
    for (wi, pi) in w.data().iter().zip(&p) {
        assert!((wi - (0.25 - pi)).abs() < 1e-15);
    }
}

#[test]
fn invalid_target_rejected() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::zeros(&cfg);
    let s = TokenSeq::new(vec![0]).unwrap();
    for p in [vec![0.5, 0.5, 0.5], vec![1.5, -0.5, 0.0], vec![1.0, 0.0]] {
        assert!(matches!(
            grad_loss_params(&s, &p, &params, &cfg),
            Err(Error::Domain(_))
        ));
    }
}

#[test]
fn distance_gradient_vanishes_at_exact_target() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 21, 0.3).unwrap();
    let prefix = [4, 9, 1];
    let e: Vec<f64> = (0..cfg.width).map(|i| 0.1 * i as f64 - 0.5).collect();
    let target = one_step_map(Candidate::Embedding(&e), &prefix, 2, &params, &cfg).unwrap();
    let (v, g) = grad_distance_embedding(&e, &prefix, 2, &target, &params, &cfg).unwrap();
    assert_eq!(v, 0.0);
    assert!(crate::numerics::l2_norm(&g) <= 1e-12);
}

#[test]
fn identity_network_gradient_is_residual() {
    let cfg = ModelConfig {
        blocks: 0,
        ..ModelConfig::toy()
    };
    let params = ModelParams::init(&cfg, 2, 0.3).unwrap();
    let e: Vec<f64> = (0..cfg.width).map(|i| i as f64).collect();
    let target = vec![1.0; cfg.width];
    let (v, g) = grad_distance_embedding(&e, &[3], 0, &target, &params, &cfg).unwrap();
    let expected: Vec<f64> = e.iter().map(|x| x - 1.0).collect();
    assert_eq!(g, expected);
    assert_eq!(v, 0.5 * expected.iter().map(|x| x * x).sum::<f64>());
}

#[test]
fn loss_gradient_matches_finite_differences_tiny() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 9, 0.5).unwrap();
    let s = TokenSeq::new(vec![1, 2]).unwrap();
    let p = vec![0.2, 0.5, 0.3];
    let (_, grads) = grad_loss_params(&s, &p, &params, &cfg).unwrap();
    let fd = finite_diff_oracle(
        |x| cross_entropy_loss(&s, &p, &ModelParams::from_flat(&cfg, x)?, &cfg),
        &params.to_flat(),
        1e-5,
    )
    .unwrap();
    let err = max_relative_error(&grads.to_flat(), &fd, 1e-3);
    assert!(err <= 1e-6, "max relative error {err:e}");
}

#[test]
fn distance_gradient_matches_finite_differences() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 21, 0.3).unwrap();
    let mut rng = Rng::new(21);
    let prefix: Vec<usize> = (0..4).map(|_| rng.below(cfg.vocab_size)).collect();
    let e: Vec<f64> = (0..cfg.width).map(|_| rng.gaussian()).collect();
    let target: Vec<f64> = (0..cfg.width).map(|_| rng.gaussian()).collect();
    for layer in 0..=cfg.blocks {
        let (_, g) = grad_distance_embedding(&e, &prefix, layer, &target, &params, &cfg).unwrap();
        let fd = finite_diff_oracle(
            |x| distance_objective(x, &prefix, layer, &target, &params, &cfg),
            &e,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&g, &fd, 1e-3);
        assert!(err <= 1e-6, "layer {layer}: {err:e}");
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 5, 0.3).unwrap();
    let mut rng = Rng::new(5);
    let a = random_prompt(&mut rng, 4, cfg.vocab_size);
    let b = random_prompt(&mut rng, 6, cfg.vocab_size);
    let p = soft_target(&mut rng, cfg.vocab_size);
    let (_, ga) = grad_loss_params(&a, &p, &params, &cfg).unwrap();
    let (_, gb) = grad_loss_params(&b, &p, &params, &cfg).unwrap();
    let sum = ga.add_scaled(&gb, 1.0).unwrap().to_flat();
    let fd = finite_diff_oracle(
        |x| {
            let m = ModelParams::from_flat(&cfg, x)?;
            Ok(cross_entropy_loss(&a, &p, &m, &cfg)? + cross_entropy_loss(&b, &p, &m, &cfg)?)
        },
        &params.to_flat(),
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&sum, &fd, 1e-3) <= 1e-6);
}
