// The reference forward pass is written with explicit indices on purpose.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use sipit_core::model::*;
use sipit_core::numerics::{gaussian_matrix, l2_distance, Matrix, Rng};
use sipit_core::Error;

fn seq(ids: &[usize]) -> TokenSeq {
    TokenSeq::new(ids.to_vec()).unwrap()
}

fn small(blocks: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        blocks,
        ..ModelConfig::toy()
    }
}

#[test]
fn embed_examples() {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::zeros(&cfg);
    assert_eq!(embed(&seq(&[1, 2]), &params, &cfg).unwrap().frobenius_norm(), 0.0);
    params.token_embedding.set(5, 0, 1.0);
    let x = embed(&seq(&[5, 5]), &params, &cfg).unwrap();
    assert_eq!(x.row(0), x.row(1));
    assert_eq!(x.get(0, 0), 1.0);
    params.position_embedding.set(0, 1, 1.0);
    let x = embed(&seq(&[5]), &params, &cfg).unwrap();
    assert_eq!(&x.row(0)[..3], &[1.0, 1.0, 0.0]);
}

#[test]
fn embed_errors() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::zeros(&cfg);
    assert!(matches!(
        embed(&seq(&[64]), &params, &cfg),
        Err(Error::Vocabulary { token: 64, .. })
    ));
    assert!(matches!(
        embed(&seq(&[0; 33]), &params, &cfg),
        Err(Error::Context { len: 33, context: 32 })
    ));
    assert!(TokenSeq::new(vec![]).is_err());
}

#[test]
fn layer_norm_closed_forms() {
    let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-5);
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] - expect).abs() < 1e-15 && (y[1] + expect).abs() < 1e-15);
    assert!((y[0] - 0.9999950).abs() < 1e-7);
    let gated = layer_norm(&[3.0, -8.0, 1.0, 2.0], &[0.0; 4], &[0.5, 1.5, -2.0, 0.0], 1e-5);
    assert_eq!(gated, vec![0.5, 1.5, -2.0, 0.0]);
}

#[test]
fn zero_params_every_layer_is_embedding() {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::zeros(&cfg);
    let h = forward(&seq(&[1, 2, 3]), &params, &cfg).unwrap();
    assert_eq!(h.layers.len(), cfg.blocks + 1);
    assert!(h.layers.iter().all(|l| l.frobenius_norm() == 0.0));

    params.token_embedding = gaussian_matrix(&mut Rng::new(1), cfg.vocab_size, cfg.width, 1.0).unwrap();
    let h = forward(&seq(&[1, 2, 3]), &params, &cfg).unwrap();
    assert!(h.layers.iter().all(|l| l == &h.layers[0]));
}

#[test]
fn no_blocks_only_embedding() {
    let cfg = small(0, 64);
    let params = ModelParams::init(&cfg, 3, 0.02).unwrap();
    let h = forward(&seq(&[4, 2]), &params, &cfg).unwrap();
    assert_eq!(h.layers.len(), 1);
    assert_eq!(h.layers[0], embed(&seq(&[4, 2]), &params, &cfg).unwrap());
}

#[test]
fn zero_mlp_adds_only_attention() {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::init(&cfg, 4, 0.3).unwrap();
    let block = &mut params.blocks[0];
    for layer in block.mlp.iter_mut() {
        layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        layer.bias = Matrix::zeros(1, layer.bias.cols());
    }
    let x = embed(&seq(&[7, 8, 9]), &params, &cfg).unwrap();
    let out = transformer_block(&x, &params.blocks[0], &cfg).unwrap();
    let attn = multi_head_attention(
        &layer_norm_rows(&x, &params.blocks[0].ln1, cfg.ln_epsilon).unwrap(),
        &params.blocks[0],
    )
    .unwrap();
    assert_eq!(out, x.add(&attn).unwrap());
}

fn ln_ref(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mu = 0.0;
    for v in x {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mu) * (v - mu);
    }
    var /= n;
    (0..x.len())
        .map(|i| g[i] * (x[i] - mu) / (var + eps).sqrt() + b[i])
        .collect()
}

/// Scalar-loop transformer block written independently of the library.
fn block_ref(x: &[Vec<f64>], b: &BlockParams, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let t_len = x.len();
    let d = cfg.width;
    let xn: Vec<Vec<f64>> = x
        .iter()
        .map(|r| ln_ref(r, b.ln1.gamma.data(), b.ln1.beta.data(), cfg.ln_epsilon))
        .collect();
    let proj = |rows: &[Vec<f64>], w: &Matrix| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|c| (0..w.rows()).map(|k| r[k] * w.get(k, c)).sum())
                    .collect()
            })
            .collect()
    };
    let mut concat = vec![Vec::new(); t_len];
    for head in &b.heads {
        let (q, k, v) = (
            proj(&xn, &head.query),
            proj(&xn, &head.key),
            proj(&xn, &head.value),
        );
        for i in 0..t_len {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..cfg.head_dim).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (cfg.head_dim as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..cfg.head_dim {
                concat[i].push((0..=i).map(|j| w[j] / z * v[j][c]).sum());
            }
        }
    }
    let attn = proj(&concat, &b.w_out);
    let h: Vec<Vec<f64>> = (0..t_len)
        .map(|i| (0..d).map(|c| x[i][c] + attn[i][c]).collect())
        .collect();
    let mut out = Vec::new();
    for row in &h {
        let mut a = ln_ref(row, b.ln2.gamma.data(), b.ln2.beta.data(), cfg.ln_epsilon);
        for (m, layer) in b.mlp.iter().enumerate() {
            if m > 0 {
                a = a.iter().map(|v| cfg.activation.apply(*v)).collect();
            }
            a = (0..layer.weight.rows())
                .map(|o| {
                    layer.bias.get(0, o)
                        + (0..layer.weight.cols())
                            .map(|k| layer.weight.get(o, k) * a[k])
                            .sum::<f64>()
                })
                .collect();
        }
        out.push(row.iter().zip(&a).map(|(x, y)| x + y).collect());
    }
    out
}

#[test]
fn seed_11_block_matches_straight_line_oracle() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 11, 0.5).unwrap();
    let x = embed(&seq(&[17, 40]), &params, &cfg).unwrap();
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    for block in &params.blocks {
        let expect = block_ref(&rows, block, &cfg);
        let got = transformer_block(&x, block, &cfg).unwrap();
        for (r, e) in expect.iter().enumerate() {
            for (a, b) in got.row(r).iter().zip(e) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn prefix_causality_is_bit_exact() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 5, 0.1).unwrap();
    let a = forward(&seq(&[3, 9, 1, 4]), &params, &cfg).unwrap();
    let b = forward(&seq(&[3, 9, 2]), &params, &cfg).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert_eq!(la.row(0), lb.row(0));
        assert_eq!(la.row(1), lb.row(1));
    }
}

#[test]
fn last_token_repr_is_final_row() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 42, 0.02).unwrap();
    let s = seq(&[10, 20, 30]);
    let h = forward(&s, &params, &cfg).unwrap();
    assert_eq!(last_token_repr(&s, &params, &cfg).unwrap(), h.last().row(2));
    let other = last_token_repr(&seq(&[10, 20, 31]), &params, &cfg).unwrap();
    assert!(l2_distance(&other, h.last().row(2)) > 1e-6);
}

#[test]
fn one_step_map_consistency() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 8, 0.05).unwrap();
    let prefix = [6, 1, 12];
    for layer in 0..=cfg.blocks {
        let tok = one_step_map(Candidate::Token(33), &prefix, layer, &params, &cfg).unwrap();
        let full = last_token_repr_at(&seq(&[6, 1, 12, 33]), layer, &params, &cfg).unwrap();
        assert_eq!(tok, full);
        let e: Vec<f64> = params
            .token_embedding
            .row(33)
            .iter()
            .zip(params.position_embedding.row(3))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(
            one_step_map(Candidate::Embedding(&e), &prefix, layer, &params, &cfg).unwrap(),
            tok
        );
    }
    assert!(matches!(
        one_step_map(Candidate::Token(64), &prefix, 1, &params, &cfg),
        Err(Error::Vocabulary { .. })
    ));
    assert!(matches!(
        one_step_map(Candidate::Token(0), &[0; 32], 1, &params, &cfg),
        Err(Error::Context { .. })
    ));
}

#[test]
fn seed_13_one_step_states_distinct() {
    let cfg = small(1, 3);
    let params = ModelParams::init(&cfg, 13, 0.02).unwrap();
    let states: Vec<Vec<f64>> = (0..3)
        .map(|v| one_step_map(Candidate::Token(v), &[2, 0], 1, &params, &cfg).unwrap())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(l2_distance(&states[i], &states[j]) > 1e-6);
        }
    }
}

#[test]
fn unembed_examples() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 5, 0.02).unwrap();
    let h: Vec<f64> = (0..cfg.width).map(|i| i as f64 * 0.3 - 1.0).collect();
    let p = unembed(&h, &params.unembedding, &params.ln_final, cfg.ln_epsilon).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(p.iter().all(|v| *v > 0.0));
    let zero_u = Matrix::zeros(cfg.vocab_size, cfg.width);
    let p = unembed(&h, &zero_u, &params.ln_final, cfg.ln_epsilon).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 64.0).abs() < 1e-15));
    let gated = LayerNormParams::zeros(cfg.width);
    let p = unembed(&h, &params.unembedding, &gated, cfg.ln_epsilon).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 64.0).abs() < 1e-15));
    let dist = next_token_distribution(&seq(&[1]), &params, &cfg).unwrap();
    assert_eq!(dist.len(), cfg.vocab_size);
}

fn attention_inputs() -> impl Strategy<Value = (Matrix, Matrix, Matrix, Matrix)> {
    (1usize..=8, any::<u64>()).prop_map(|(t, seed)| {
        let mut rng = Rng::new(seed);
        (
            gaussian_matrix(&mut rng, t, 4, 1.0).unwrap(),
            gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap(),
            gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap(),
            gaussian_matrix(&mut rng, 4, 3, 1.0).unwrap(),
        )
    })
}

proptest! {
    #[test]
    fn attention_forms_agree((x, q, k, v) in attention_inputs()) {
        let a = causal_attention_masked(&x, &q, &k, &v).unwrap();
        let b = causal_attention_projection(&x, &q, &k, &v).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn attention_rows_are_causal_convex_weights((x, q, k, _v) in attention_inputs()) {
        let w = causal_attention_weights(&x, &q, &k).unwrap();
        for i in 0..w.rows() {
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..w.cols() {
                prop_assert!(w.get(i, j) >= 0.0);
                if j > i {
                    prop_assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn shared_prefix_rows_agree(seed in 0u64..200, common in 1usize..6, tail_a in 0usize..64, tail_b in 0usize..64) {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, seed, 0.05).unwrap();
        let mut rng = Rng::new(seed);
        let base: Vec<usize> = (0..common).map(|_| rng.below(64)).collect();
        let a = forward(&seq(&[base.clone(), vec![tail_a]].concat()), &params, &cfg).unwrap();
        let b = forward(&seq(&[base, vec![tail_b, 1]].concat()), &params, &cfg).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for r in 0..common {
                prop_assert_eq!(la.row(r), lb.row(r));
            }
        }
    }

    #[test]
    fn zero_blocks_are_identity(seed in 0u64..100, t in 1usize..10) {
        let cfg = ModelConfig::toy();
        let x = gaussian_matrix(&mut Rng::new(seed), t, cfg.width, 1.0).unwrap();
        let params = ModelParams::zeros(&cfg);
        prop_assert_eq!(transformer_block(&x, &params.blocks[0], &cfg).unwrap(), x);
    }
}
