use sipit_core::model::{
    forward, last_token_repr, one_step_map, Candidate, ModelConfig, ModelParams, TokenSeq,
};
use sipit_core::numerics::l2_distance;
use sipit_core::probe::*;
use sipit_core::Error;

fn seq(ids: &[usize]) -> TokenSeq {
    TokenSeq::new(ids.to_vec()).unwrap()
}

#[test]
fn duplicate_prompts_rejected() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 1, 0.02).unwrap();
    let prompts = vec![seq(&[1, 2]), seq(&[3]), seq(&[1, 2])];
    assert!(matches!(
        collision_scan(&prompts, 2, COLLISION_THRESHOLD, &params, &cfg),
        Err(Error::Input(_))
    ));
}

#[test]
fn case_a_token_scan_is_sqrt_two() {
    let cfg = ModelConfig::toy();
    let w = build_witness_case_a(CaseAVariant::Token, &cfg).unwrap();
    let report = collision_scan(
        &[w.s.clone(), w.t.clone()],
        cfg.blocks,
        COLLISION_THRESHOLD,
        &w.params,
        &cfg,
    )
    .unwrap();
    assert!((report.min - 2f64.sqrt()).abs() <= 1e-12);
    assert_eq!(report.pairs, 1);
    assert!(report.pass);

    let mut e1 = vec![0.0; cfg.width];
    e1[0] = 1.0;
    assert_eq!(last_token_repr(&w.s, &w.params, &cfg).unwrap(), e1);
}

#[test]
fn case_a_length_variant() {
    let cfg = ModelConfig::toy();
    let w = build_witness_case_a(CaseAVariant::Length, &cfg).unwrap();
    let a = last_token_repr(&w.s, &w.params, &cfg).unwrap();
    let b = last_token_repr(&w.t, &w.params, &cfg).unwrap();
    assert!((l2_distance(&a, &b) - 2f64.sqrt()).abs() <= 1e-12);
}

#[test]
fn case_a_separates_only_the_planted_pair() {
    let cfg = ModelConfig::toy();
    let w = build_witness_case_a(CaseAVariant::Token, &cfg).unwrap();
    let a = last_token_repr(&seq(&[5, 7, 0]), &w.params, &cfg).unwrap();
    let b = last_token_repr(&seq(&[9, 0]), &w.params, &cfg).unwrap();
    assert_eq!(l2_distance(&a, &b), 0.0);
}

#[test]
fn case_a_margin_with_two_tokens() {
    let cfg = ModelConfig {
        vocab_size: 2,
        ..ModelConfig::toy()
    };
    let w = build_witness_case_a(CaseAVariant::Token, &cfg).unwrap();
    let m = margin(&[], cfg.blocks, &w.params, &cfg).unwrap();
    assert!((m.delta - 2f64.sqrt()).abs() <= 1e-12);
    assert_eq!(m.pair, (0, 1));
}

#[test]
#[allow(clippy::approx_constant)] // 1.41420 is the quoted value, not sqrt 2
fn case_b_constants_for_width_four() {
    let (c_ep, c_e) = case_b_constants(4, 1e-5);
    assert!((c_ep - 1.41420).abs() < 1e-5, "{c_ep}");
    // (1/4 + 1e-5)^(-1/2) = 1.999960...
    assert!((c_e - 1.999960).abs() < 1e-6, "{c_e}");
    assert_eq!(c_ep, (0.5f64 + 1e-5).powf(-0.5));
}

#[test]
fn case_b_gap_matches_closed_form() {
    let cfg = ModelConfig::toy();
    for i_star in [0, 1, 5, 20] {
        let w = build_witness_case_b(i_star, &cfg).unwrap();
        let rs = last_token_repr(&w.s, &w.params, &cfg).unwrap();
        let rt = last_token_repr(&w.t, &w.params, &cfg).unwrap();
        let gap = rs[0] - rt[0];
        assert!(w.gap_bound > 0.0);
        assert!(gap >= w.gap_bound, "i* {i_star}: {gap} < {}", w.gap_bound);
        assert!(
            (gap - w.predicted_gap).abs() <= 1e-9,
            "{gap} vs {}",
            w.predicted_gap
        );
        assert!(rs[1..].iter().zip(&rt[1..]).all(|(a, b)| a == b));
        // Identical inputs give identical states.
        let again = last_token_repr(&w.s, &w.params, &cfg).unwrap();
        assert_eq!(l2_distance(&rs, &again), 0.0);
    }
}

#[test]
fn case_b_swaps_roles_when_needed() {
    let cfg = ModelConfig::toy();
    // t[i*] equals the shared last token.
    let s = seq(&[3, 4, 7]);
    let t = seq(&[7, 4, 7]);
    let w = case_b_for_pair(&s, &t, None, &cfg).unwrap();
    assert!(w.swapped);
    assert_eq!(w.s, t);
    let rs = last_token_repr(&w.s, &w.params, &cfg).unwrap();
    let rt = last_token_repr(&w.t, &w.params, &cfg).unwrap();
    assert!(rs[0] - rt[0] >= w.gap_bound);
    assert!((rs[0] - rt[0] - w.predicted_gap).abs() <= 1e-9);
}

#[test]
fn case_b_rejects_bad_pairs() {
    let cfg = ModelConfig::toy();
    assert!(case_b_for_pair(&seq(&[1, 2]), &seq(&[1, 3]), None, &cfg).is_err());
    assert!(case_b_for_pair(&seq(&[1, 2]), &seq(&[1, 2]), None, &cfg).is_err());
    assert!(case_b_for_pair(&seq(&[1, 2]), &seq(&[1, 2, 2]), None, &cfg).is_err());
    assert!(case_b_for_pair(&seq(&[1, 2]), &seq(&[3, 2]), Some(0.49), &cfg).is_err());
}

#[test]
fn attention_head_weight_on_i_star() {
    use sipit_core::model::{causal_attention_weights, layer_norm_rows};
    let cfg = ModelConfig::toy();
    let w = build_witness_case_b(3, &cfg).unwrap();
    let x0 = forward(&w.s, &w.params, &cfg).unwrap().layers[0].clone();
    let b = &w.params.blocks[0];
    let xn = layer_norm_rows(&x0, &b.ln1, cfg.ln_epsilon).unwrap();
    let a = causal_attention_weights(&xn, &b.heads[0].query, &b.heads[0].key).unwrap();
    let last = a.rows() - 1;
    assert!((a.get(last, 3) - (1.0 - w.delta)).abs() < 1e-12);
}

#[test]
fn hessian_one_hot_tiny() {
    let cfg = ModelConfig::tiny();
    let r = hessian_witness_check(&cfg, &seq(&[0, 1]), &[0.0, 1.0, 0.0], &[0.1, 0.5, 0.9]).unwrap();
    assert_eq!(r.params, 92);
    assert!((r.w_norm - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!(r.max_eigenvalue_error <= 1e-3, "{}", r.max_eigenvalue_error);
    assert!(r.psi_block_max <= 1e-6, "{}", r.psi_block_max);
    assert!(r.asymmetry <= 1e-4);
    for det in &r.determinants {
        assert!(det.relative_error <= 1e-6, "{det:?}");
    }
    let half = r.determinants.iter().find(|d| d.eta == 0.5).unwrap();
    assert!((half.expected - 0.48225).abs() < 1e-5);
}

#[test]
fn hessian_uniform_target_is_flat() {
    let cfg = ModelConfig::tiny();
    let u = 1.0 / 3.0;
    let r = hessian_witness_check(&cfg, &seq(&[2]), &[u, u, u], &[0.5]).unwrap();
    assert!(r.w_norm < 1e-15);
    assert!(r.eigenvalues.iter().all(|e| e.abs() < 1e-6));
    assert!((r.determinants[0].measured - 1.0).abs() < 1e-6);
}

#[test]
fn hessian_rejects_bad_step() {
    let cfg = ModelConfig::tiny();
    assert!(hessian_witness_check(&cfg, &seq(&[0]), &[1.0, 0.0, 0.0], &[1.0]).is_err());
}

#[test]
fn seed_42_scan_all_layers() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 42, 0.02).unwrap();
    let prompts = random_prompts(200, 1, 12, &cfg, 42).unwrap();
    for layer in 0..=cfg.blocks {
        let r = collision_scan(&prompts, layer, COLLISION_THRESHOLD, &params, &cfg).unwrap();
        assert_eq!(r.pairs, 200 * 199 / 2);
        assert!(r.min <= r.mean && r.mean <= r.max);
        if layer > 0 {
            assert!(r.pass, "layer {layer} min {}", r.min);
        }
    }
}

#[test]
fn margin_matches_exhaustive_states() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 13, 0.02).unwrap();
    let prefix = [3, 14, 15];
    let m = margin(&prefix, 2, &params, &cfg).unwrap();
    assert!(m.delta > 0.0);
    let states: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|v| one_step_map(Candidate::Token(v), &prefix, 2, &params, &cfg).unwrap())
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            best = best.min(l2_distance(&states[i], &states[j]));
        }
    }
    assert_eq!(m.delta, best);
}

#[test]
fn length_buckets() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 42, 0.02).unwrap();
    let buckets = length_vs_distance(&[2, 4, 8, 16], 30, cfg.blocks, 42, &params, &cfg).unwrap();
    for b in &buckets {
        assert!(b.stats.as_ref().unwrap().min > COLLISION_THRESHOLD);
    }
    let single = length_vs_distance(&[3], 1, cfg.blocks, 0, &params, &cfg).unwrap();
    assert!(single[0].skipped && single[0].stats.is_none());
}
