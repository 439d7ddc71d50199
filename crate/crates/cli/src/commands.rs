use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sipit_core::autograd::{
    cross_entropy_loss, distance_objective, finite_diff_oracle, grad_distance_embedding, grad_loss_params,
    max_relative_error,
};
use sipit_core::model::{forward, last_token_repr, ModelParams, TokenSeq};
use sipit_core::numerics::{l2_distance, Rng};
use sipit_core::probe::{
    build_witness_case_a, build_witness_case_b, collision_scan, hessian_witness_check, length_vs_distance,
    prompt_margins, random_prompts, CaseAVariant, DetCheck, LengthBucket, ScanReport,
};
use sipit_core::sipit::{
    invert, Backoff, GradientSettings, Policy, PolicyKind, ProxyStart, RecoveryResult, VerifierConfig,
};
use sipit_core::training::{batch_schedule, synthetic_corpus, train, TrainConfig};
use sipit_core::Error;

use crate::config::{ExperimentConfig, PolicyChoice};
use crate::error::CliError;
use crate::formats::{
    decode_states, decode_weights, encode_states, encode_weights, parse_prompts, StateRecord,
};
use crate::report::{cells, digest, Reporter, Timing};

type Result<T> = std::result::Result<T, CliError>;

/// Resolved configuration, output location and loaded inputs for one run.
pub struct Run {
    pub cfg: ExperimentConfig,
    /// Whether `cfg` came from a file (as opposed to defaults).
    pub explicit_config: bool,
    pub reporter: Reporter,
    pub params: Option<ModelParams>,
}

impl Run {
    /// Loads a weights file; its model config must agree with an explicit
    /// experiment config and replaces the default one otherwise.
    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let bytes = self.reporter.read_input("weights", path)?;
        let (model, params) = decode_weights(&bytes)?;
        if self.explicit_config && model != self.cfg.model {
            return Err(CliError::Input(
                "weights were written for a different model config than --config describes".into(),
            ));
        }
        self.cfg.model = model;
        self.params = Some(params);
        Ok(())
    }

    fn params(&self) -> Result<&ModelParams> {
        self.params
            .as_ref()
            .ok_or_else(|| CliError::Input("this command needs --weights".into()))
    }

    fn layer(&self) -> usize {
        self.cfg.layer.unwrap_or(self.cfg.model.blocks)
    }

    fn scan_layers(&self) -> Vec<usize> {
        if let Some(l) = self.cfg.layer {
            vec![l]
        } else if !self.cfg.scan.layers.is_empty() {
            self.cfg.scan.layers.clone()
        } else {
            (1..=self.cfg.model.blocks).collect()
        }
    }

    fn prompts(&mut self, role: &str, path: &std::path::Path) -> Result<Vec<(usize, Vec<usize>)>> {
        let bytes = self.reporter.read_input(role, path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| CliError::Input(format!("{}: not UTF-8 text", path.display())))?;
        parse_prompts(&text, &self.cfg.model)
    }

    fn report<T: Serialize>(&self, command: &str, result: &T, timing: &Timing) -> Result<()> {
        self.reporter.write_json(command, &self.cfg, result, timing)?;
        Ok(())
    }
}

fn to_seqs(prompts: &[(usize, Vec<usize>)]) -> Result<Vec<TokenSeq>> {
    prompts
        .iter()
        .map(|(line, ids)| {
            TokenSeq::new(ids.clone()).map_err(|e| CliError::Input(format!("line {line}: {e}")))
        })
        .collect()
}

fn scan_rows(reports: &[ScanReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            cells(&[
                &r.layer,
                &r.prompts,
                &r.pairs,
                &r.min,
                &r.mean,
                &r.max,
                &r.collisions,
                &r.pass,
            ])
        })
        .collect()
}

const SCAN_HEADER: &[&str] = &[
    "layer",
    "prompts",
    "pairs",
    "min",
    "mean",
    "max",
    "collisions",
    "pass",
];

pub fn init(run: &Run) -> Result<()> {
    let start = Instant::now();
    let cfg = &run.cfg;
    let params = ModelParams::init(&cfg.model, cfg.seed, cfg.init_std)?;
    let bytes = encode_weights(&params, &cfg.model)?;
    run.reporter.write_bytes("weights.sipw", &bytes)?;

    #[derive(Serialize)]
    struct InitResult {
        params: usize,
        bytes: usize,
        weights_sha256: String,
    }
    let mut timing = Timing::default();
    timing.record("init", start);
    run.report(
        "init",
        &InitResult {
            params: params.param_count(),
            bytes: bytes.len(),
            weights_sha256: digest(&bytes),
        },
        &timing,
    )
}

#[derive(Serialize)]
struct CheckpointScan {
    step: usize,
    report: ScanReport,
}

pub fn train_cmd(run: &Run) -> Result<()> {
    let start = Instant::now();
    let cfg = &run.cfg;
    let t = &cfg.train;
    let model = &cfg.model;
    let params = run.params()?;
    // Checkpoints past the end are dropped; the final step is always scanned.
    let mut checkpoints: Vec<usize> = t.checkpoints.iter().copied().filter(|&c| c <= t.steps).collect();
    checkpoints.push(t.steps);
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let data = synthetic_corpus(model, t.corpus_size, t.min_len, t.max_len, cfg.seed)?;
    let batches = batch_schedule(t.corpus_size, t.steps, &t.batch_sizes, cfg.seed)?;
    let tcfg = TrainConfig::constant(t.eta, batches, cfg.seed);
    tcfg.validate(data.len())?;
    let prompts = random_prompts(
        t.scan_prompts,
        cfg.scan.min_len,
        cfg.scan.max_len,
        model,
        cfg.seed,
    )?;
    let layers = run.scan_layers();

    let mut scans = Vec::new();
    let outcome = train(params, &data, &tcfg, model, |step, p| {
        if checkpoints.contains(&step) {
            for &layer in &layers {
                let report = collision_scan(&prompts, layer, cfg.scan.threshold, p, model)?;
                scans.push(CheckpointScan { step, report });
            }
        }
        Ok(())
    })?;
    run.reporter
        .write_bytes("trained.sipw", &encode_weights(&outcome.params, model)?)?;
    let loss_rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| cells(&[&i, l]))
        .collect();
    run.reporter
        .write_csv("train_loss.csv", &["step", "loss"], &loss_rows)?;
    let scan_rows: Vec<Vec<String>> = scans
        .iter()
        .map(|s| {
            let mut row = vec![s.step.to_string()];
            row.extend(scan_rows(std::slice::from_ref(&s.report)).remove(0));
            row
        })
        .collect();
    let mut header = vec!["step"];
    header.extend_from_slice(SCAN_HEADER);
    run.reporter.write_csv("train_scans.csv", &header, &scan_rows)?;

    let collisions: usize = scans.iter().map(|s| s.report.collisions).sum();
    #[derive(Serialize)]
    struct TrainResult<'a> {
        steps: usize,
        losses: &'a [f64],
        scans: &'a [CheckpointScan],
        collisions: usize,
        pass: bool,
    }
    let mut timing = Timing::default();
    timing.record("train", start);
    run.report(
        "train",
        &TrainResult {
            steps: t.steps,
            losses: &outcome.losses,
            scans: &scans,
            collisions,
            pass: collisions == 0,
        },
        &timing,
    )?;
    if collisions > 0 {
        return Err(CliError::Invariant(format!(
            "{collisions} collisions during training"
        )));
    }
    Ok(())
}

pub fn scan(run: &mut Run, prompts_path: Option<&std::path::Path>) -> Result<()> {
    let start = Instant::now();
    let prompts = match prompts_path {
        Some(path) => to_seqs(&run.prompts("prompts", path)?)?,
        None => {
            let s = &run.cfg.scan;
            random_prompts(s.prompts, s.min_len, s.max_len, &run.cfg.model, run.cfg.seed)?
        }
    };
    let cfg = &run.cfg;
    let params = run.params()?;
    let reports = run
        .scan_layers()
        .into_iter()
        .map(|layer| collision_scan(&prompts, layer, cfg.scan.threshold, params, &cfg.model))
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    let buckets: Vec<LengthBucket> = if cfg.scan.lengths.is_empty() {
        Vec::new()
    } else {
        length_vs_distance(
            &cfg.scan.lengths,
            cfg.scan.per_length,
            run.layer(),
            cfg.seed,
            params,
            &cfg.model,
        )?
    };
    run.reporter
        .write_csv("scan.csv", SCAN_HEADER, &scan_rows(&reports))?;
    if !buckets.is_empty() {
        let rows: Vec<Vec<String>> = buckets
            .iter()
            .map(|b| match &b.stats {
                Some(r) => cells(&[&b.length, &b.prompts, &r.min, &r.mean, &r.max, &r.collisions]),
                None => cells(&[&b.length, &b.prompts, &"", &"", &"", &""]),
            })
            .collect();
        run.reporter.write_csv(
            "scan_lengths.csv",
            &["length", "prompts", "min", "mean", "max", "collisions"],
            &rows,
        )?;
    }

    let failed: Vec<&ScanReport> = reports.iter().filter(|r| !r.pass).collect();
    #[derive(Serialize)]
    struct ScanResult<'a> {
        layers: &'a [ScanReport],
        lengths: &'a [LengthBucket],
        pass: bool,
    }
    let mut timing = Timing::default();
    timing.record("scan", start);
    run.report(
        "scan",
        &ScanResult {
            layers: &reports,
            lengths: &buckets,
            pass: failed.is_empty(),
        },
        &timing,
    )?;
    if let Some(r) = failed.first() {
        return Err(CliError::Invariant(format!(
            "collision at layer {}: pair {:?} at distance {:e}",
            r.layer, r.argmin, r.min
        )));
    }
    Ok(())
}

pub fn margin(run: &mut Run, prompts_path: &std::path::Path) -> Result<()> {
    let start = Instant::now();
    let prompts = run.prompts("prompts", prompts_path)?;
    let layer = run.layer();
    let params = run.params()?;

    #[derive(Serialize)]
    struct Row {
        prompt: usize,
        line: usize,
        position: usize,
        delta: f64,
        pair: (usize, usize),
    }
    let mut rows = Vec::new();
    for (idx, (line, ids)) in prompts.iter().enumerate() {
        for m in prompt_margins(ids, layer, params, &run.cfg.model)? {
            rows.push(Row {
                prompt: idx,
                line: *line,
                position: m.position,
                delta: m.delta,
                pair: m.pair,
            });
        }
    }
    let min_delta = rows.iter().map(|r| r.delta).fold(f64::INFINITY, f64::min);
    let threshold = run.cfg.scan.threshold;
    let pass = rows.iter().all(|r| r.delta > threshold);
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cells(&[&r.prompt, &r.line, &r.position, &r.delta, &r.pair.0, &r.pair.1]))
        .collect();
    run.reporter.write_csv(
        "margin.csv",
        &["prompt", "line", "position", "delta", "token_a", "token_b"],
        &csv,
    )?;

    #[derive(Serialize)]
    struct MarginResult<'a> {
        layer: usize,
        positions: &'a [Row],
        min_delta: Option<f64>,
        pass: bool,
    }
    let mut timing = Timing::default();
    timing.record("margin", start);
    run.report(
        "margin",
        &MarginResult {
            layer,
            positions: &rows,
            min_delta: (!rows.is_empty()).then_some(min_delta),
            pass,
        },
        &timing,
    )?;
    if !pass {
        return Err(CliError::Invariant(format!(
            "margin {min_delta:e} at or below {threshold:e}"
        )));
    }
    Ok(())
}

pub fn witness(run: &Run) -> Result<()> {
    let start = Instant::now();
    let model = &run.cfg.model;

    #[derive(Serialize)]
    struct Check {
        case: &'static str,
        measured: f64,
        /// Target value (case A) or lower bound (case B).
        reference: f64,
        pass: bool,
    }
    let mut checks = Vec::new();
    for (name, which) in [
        ("a_token", CaseAVariant::Token),
        ("a_length", CaseAVariant::Length),
    ] {
        let w = build_witness_case_a(which, model)?;
        let d = l2_distance(
            &last_token_repr(&w.s, &w.params, model)?,
            &last_token_repr(&w.t, &w.params, model)?,
        );
        checks.push(Check {
            case: name,
            measured: d,
            reference: 2f64.sqrt(),
            pass: (d - 2f64.sqrt()).abs() <= 1e-12,
        });
    }
    let b = build_witness_case_b(run.cfg.witness.i_star, model)?;
    let gap = last_token_repr(&b.s, &b.params, model)?[0] - last_token_repr(&b.t, &b.params, model)?[0];
    checks.push(Check {
        case: "b",
        measured: gap,
        reference: b.gap_bound,
        pass: b.gap_bound > 0.0 && gap >= b.gap_bound,
    });
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| cells(&[&c.case, &c.measured, &c.reference, &c.pass]))
        .collect();
    run.reporter
        .write_csv("witness.csv", &["case", "measured", "reference", "pass"], &rows)?;

    #[derive(Serialize)]
    struct CaseB {
        i_star: usize,
        alpha: f64,
        beta: f64,
        delta: f64,
        c_ep: f64,
        c_e: f64,
        gap_bound: f64,
        predicted_gap: f64,
        measured_gap: f64,
    }
    #[derive(Serialize)]
    struct WitnessResult<'a> {
        checks: &'a [Check],
        case_b: CaseB,
        pass: bool,
    }
    let pass = checks.iter().all(|c| c.pass);
    let mut timing = Timing::default();
    timing.record("witness", start);
    run.report(
        "witness",
        &WitnessResult {
            checks: &checks,
            case_b: CaseB {
                i_star: b.i_star,
                alpha: b.alpha,
                beta: b.beta,
                delta: b.delta,
                c_ep: b.c_ep,
                c_e: b.c_e,
                gap_bound: b.gap_bound,
                predicted_gap: b.predicted_gap,
                measured_gap: gap,
            },
            pass,
        },
        &timing,
    )?;
    if !pass {
        return Err(CliError::Invariant(
            "a witness failed to separate its pair".into(),
        ));
    }
    Ok(())
}

pub fn hessian(run: &Run) -> Result<()> {
    let start = Instant::now();
    let h = &run.cfg.hessian;
    let prompt = TokenSeq::new(h.prompt.clone())?;
    let r = hessian_witness_check(&h.model, &prompt, &h.target, &h.etas)?;
    let det_worst = r
        .determinants
        .iter()
        .map(|d| d.relative_error)
        .fold(0.0, f64::max);
    let pass = r.max_eigenvalue_error <= 1e-3 && r.psi_block_max <= 1e-6 && det_worst <= 1e-6;

    let rows: Vec<Vec<String>> = r
        .eigenvalues
        .iter()
        .zip(&r.expected_eigenvalues)
        .enumerate()
        .map(|(i, (a, b))| cells(&[&i, a, b]))
        .collect();
    run.reporter.write_csv(
        "hessian_eigenvalues.csv",
        &["index", "measured", "expected"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = r
        .determinants
        .iter()
        .map(|d: &DetCheck| cells(&[&d.eta, &d.measured, &d.expected, &d.relative_error]))
        .collect();
    run.reporter.write_csv(
        "hessian_det.csv",
        &["eta", "measured", "expected", "relative_error"],
        &rows,
    )?;

    #[derive(Serialize)]
    struct HessianResult<'a> {
        report: &'a sipit_core::probe::HessianReport,
        pass: bool,
    }
    let mut timing = Timing::default();
    timing.record("hessian", start);
    run.report("hessian", &HessianResult { report: &r, pass }, &timing)?;
    if !pass {
        return Err(CliError::Invariant(format!(
            "Hessian check failed: eigen {:e}, psi {:e}, det {:e}",
            r.max_eigenvalue_error, r.psi_block_max, det_worst
        )));
    }
    Ok(())
}

pub fn dump_states(run: &mut Run, prompts_path: &std::path::Path) -> Result<()> {
    let start = Instant::now();
    let prompts = run.prompts("prompts", prompts_path)?;
    let layer = run.layer();
    let params = run.params()?;
    let model = &run.cfg.model;
    let records = prompts
        .iter()
        .map(|(line, ids)| {
            let s = TokenSeq::new(ids.clone()).map_err(|e| CliError::Input(format!("line {line}: {e}")))?;
            let h = forward(&s, params, model)?;
            Ok(StateRecord {
                layer,
                ids: ids.clone(),
                states: h.layers[layer].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = encode_states(&records)?;
    run.reporter.write_bytes("states.siph", &bytes)?;

    #[derive(Serialize)]
    struct DumpResult {
        layer: usize,
        prompts: usize,
        rows: usize,
        states_sha256: String,
    }
    let mut timing = Timing::default();
    timing.record("dump", start);
    run.report(
        "dump-states",
        &DumpResult {
            layer,
            prompts: records.len(),
            rows: records.iter().map(|r| r.ids.len()).sum(),
            states_sha256: digest(&bytes),
        },
        &timing,
    )
}

#[derive(Serialize)]
struct PromptOutcome {
    prompt: usize,
    recovered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    result: RecoveryResult,
}

#[derive(Serialize)]
struct PolicyRun {
    policy: PolicyKind,
    prompts: usize,
    failures: usize,
    /// Mean over prompts; present when ground truth was given.
    token_accuracy: Option<f64>,
    exact_matches: Option<usize>,
    /// Mean verifier tests per recovered position.
    mean_proposals: f64,
    total_tests: usize,
    test_bound: usize,
    outcomes: Vec<PromptOutcome>,
}

pub fn invert_cmd(
    run: &mut Run,
    states_path: &std::path::Path,
    truth_path: Option<&std::path::Path>,
) -> Result<()> {
    let bytes = run.reporter.read_input("states", states_path)?;
    let records = decode_states(&bytes)?;
    let truth = match truth_path {
        Some(p) => {
            let t: Vec<Vec<usize>> = run.prompts("truth", p)?.into_iter().map(|(_, ids)| ids).collect();
            if t.len() != records.len() {
                return Err(CliError::Input(format!(
                    "{} ground-truth prompts for {} state records",
                    t.len(),
                    records.len()
                )));
            }
            Some(t)
        }
        None => None,
    };
    let layer = match records.first() {
        Some(first) => first.layer,
        None => run.layer(),
    };
    if records.iter().any(|r| r.layer != layer) {
        return Err(CliError::Input("state records mix layers".into()));
    }
    if let Some(l) = run.cfg.layer {
        if l != layer {
            return Err(CliError::Input(format!(
                "--layer {l} but the states were captured at layer {layer}"
            )));
        }
    }
    let inv = &run.cfg.invert;
    let vcfg = VerifierConfig {
        epsilon: inv.epsilon,
        backoff: inv.backoff_cap.map_or(Backoff::Off, Backoff::Tenfold),
        layer,
    };
    vcfg.validate()?;
    let gradient = Policy::Gradient {
        settings: GradientSettings {
            gamma: inv.gamma,
            k_proj: inv.k_proj,
            steps_per_proposal: inv.steps_per_proposal,
        },
        start: ProxyStart::MeanEmbedding,
    };
    let random = Policy::Random { seed: run.cfg.seed };
    let policies = match inv.policy {
        PolicyChoice::Random => vec![random],
        PolicyChoice::Gradient => vec![gradient],
        PolicyChoice::Both => vec![random, gradient],
    };

    let params = run.params()?;
    let model = &run.cfg.model;
    let states: Vec<_> = records.iter().map(|r| r.states.clone()).collect();
    let mut timing = Timing::default();
    let mut runs = Vec::new();
    for policy in &policies {
        let name = format!("{:?}", policy.kind()).to_lowercase();
        let start = Instant::now();
        let timed: Vec<(std::result::Result<RecoveryResult, Error>, f64)> = states
            .par_iter()
            .enumerate()
            .map(|(i, h)| {
                let t0 = Instant::now();
                let r = policy
                    .for_prompt(i)
                    .and_then(|p| invert(h, &vcfg, &p, params, model));
                (r, t0.elapsed().as_secs_f64())
            })
            .collect();
        timing.record(&name, start);
        let mut results = Vec::with_capacity(timed.len());
        for (i, (r, secs)) in timed.into_iter().enumerate() {
            timing.seconds.insert(format!("{name}.prompt{i}"), secs);
            results.push(r);
        }
        let mut outcomes = Vec::new();
        for (i, (r, rec)) in results.into_iter().zip(&records).enumerate() {
            let bound = rec.ids.len() * model.vocab_size;
            let (mut result, error) = match r {
                Ok(r) => (r, None),
                Err(e) => {
                    let msg = e.to_string();
                    match e {
                        Error::NoVerifiedToken { partial, .. } | Error::Ambiguous { partial, .. } => {
                            (*partial, Some(msg))
                        }
                        Error::Exhausted { .. } => {
                            (RecoveryResult::new(policy.kind(), layer, bound), Some(msg))
                        }
                        other => return Err(other.into()),
                    }
                }
            };
            if let Some(t) = &truth {
                result.score(&t[i]);
            }
            outcomes.push(PromptOutcome {
                prompt: i,
                recovered: error.is_none(),
                error,
                result,
            });
        }
        let positions: usize = outcomes.iter().map(|o| o.result.proposals.len()).sum();
        let proposals: usize = outcomes.iter().flat_map(|o| &o.result.proposals).sum();
        let n = outcomes.len();
        runs.push(PolicyRun {
            policy: policy.kind(),
            prompts: n,
            failures: outcomes.iter().filter(|o| !o.recovered).count(),
            token_accuracy: truth.as_ref().map(|t| {
                if n == 0 {
                    1.0
                } else {
                    outcomes
                        .iter()
                        .zip(t)
                        .map(|(o, t)| o.result.token_accuracy(t))
                        .sum::<f64>()
                        / n as f64
                }
            }),
            exact_matches: truth.as_ref().map(|_| {
                outcomes
                    .iter()
                    .filter(|o| o.result.exact_match == Some(true))
                    .count()
            }),
            mean_proposals: if positions == 0 {
                0.0
            } else {
                proposals as f64 / positions as f64
            },
            total_tests: outcomes.iter().map(|o| o.result.total_tests).sum(),
            test_bound: outcomes.iter().map(|o| o.result.test_bound).sum(),
            outcomes,
        });
    }

    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut rows = Vec::new();
    for r in &runs {
        for o in &r.outcomes {
            rows.push(cells(&[
                &format!("{:?}", r.policy).to_lowercase(),
                &o.prompt,
                &o.result.recovered.len(),
                &o.result.total_tests,
                &o.result.test_bound,
                &o.result.mean_proposals(),
                &opt(o.result.exact_match.map(|b| b.to_string())),
                &if o.recovered { "recovered" } else { "failed" },
            ]));
        }
    }
    run.reporter.write_csv(
        "invert.csv",
        &[
            "policy",
            "prompt",
            "recovered_len",
            "total_tests",
            "test_bound",
            "mean_proposals",
            "exact_match",
            "status",
        ],
        &rows,
    )?;
    let summary: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            cells(&[
                &format!("{:?}", r.policy).to_lowercase(),
                &r.prompts,
                &r.failures,
                &r.mean_proposals,
                &r.total_tests,
                &r.test_bound,
                &opt(r.token_accuracy.map(|a| a.to_string())),
            ])
        })
        .collect();
    run.reporter.write_csv(
        "invert_summary.csv",
        &[
            "policy",
            "prompts",
            "failures",
            "mean_proposals",
            "total_tests",
            "test_bound",
            "token_accuracy",
        ],
        &summary,
    )?;

    #[derive(Serialize)]
    struct InvertResult<'a> {
        verifier: VerifierConfig,
        runs: &'a [PolicyRun],
    }
    run.report(
        "invert",
        &InvertResult {
            verifier: vcfg,
            runs: &runs,
        },
        &timing,
    )?;
    let failures: usize = runs.iter().map(|r| r.failures).sum();
    if failures > 0 {
        return Err(CliError::Recovery(format!(
            "{failures} inversions failed; partial results written"
        )));
    }
    Ok(())
}

pub fn gradcheck(run: &Run) -> Result<()> {
    let start = Instant::now();
    let cfg = &run.cfg;
    let g = &cfg.gradcheck;
    let model = &cfg.model;

    #[derive(Serialize)]
    struct Row {
        seed: u64,
        loss_error: f64,
        distance_error: f64,
    }
    let mut rows = Vec::new();
    for i in 0..g.models as u64 {
        let seed = cfg.seed.wrapping_add(i);
        let params = ModelParams::init(model, seed, cfg.init_std)?;
        let mut rng = Rng::new(seed);
        let len = 1 + rng.below(8.min(model.context));
        let ids: Vec<usize> = (0..len).map(|_| rng.below(model.vocab_size)).collect();
        let s = TokenSeq::new(ids)?;
        let raw: Vec<f64> = (0..model.vocab_size).map(|_| rng.gaussian().exp()).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let (_, grads) = grad_loss_params(&s, &p, &params, model)?;
        let fd = finite_diff_oracle(
            |x| cross_entropy_loss(&s, &p, &ModelParams::from_flat(model, x)?, model),
            &params.to_flat(),
            g.step,
        )?;
        let loss_error = max_relative_error(&grads.to_flat(), &fd, g.floor);

        let prefix_len = rng.below(model.context.min(6));
        let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.below(model.vocab_size)).collect();
        let e: Vec<f64> = (0..model.width).map(|_| rng.gaussian()).collect();
        let target: Vec<f64> = (0..model.width).map(|_| rng.gaussian()).collect();
        let layer = run.layer();
        let (_, grad) = grad_distance_embedding(&e, &prefix, layer, &target, &params, model)?;
        let fd = finite_diff_oracle(
            |x| distance_objective(x, &prefix, layer, &target, &params, model),
            &e,
            g.step,
        )?;
        rows.push(Row {
            seed,
            loss_error,
            distance_error: max_relative_error(&grad, &fd, g.floor),
        });
    }
    let worst = rows
        .iter()
        .map(|r| r.loss_error.max(r.distance_error))
        .fold(0.0, f64::max);
    let pass = worst <= g.tolerance;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cells(&[&r.seed, &r.loss_error, &r.distance_error]))
        .collect();
    run.reporter
        .write_csv("gradcheck.csv", &["seed", "loss_error", "distance_error"], &csv)?;

    #[derive(Serialize)]
    struct GradResult<'a> {
        models: &'a [Row],
        max_relative_error: f64,
        pass: bool,
    }
    let mut timing = Timing::default();
    timing.record("gradcheck", start);
    run.report(
        "gradcheck",
        &GradResult {
            models: &rows,
            max_relative_error: worst,
            pass,
        },
        &timing,
    )?;
    if !pass {
        return Err(CliError::Invariant(format!(
            "gradient check error {worst:e} above {:e}",
            g.tolerance
        )));
    }
    Ok(())
}
