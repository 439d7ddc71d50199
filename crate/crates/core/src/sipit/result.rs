use serde::{Deserialize, Serialize};

/// Candidate-ordering strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Gradient,
}

/// Outcome of one inversion, complete or partial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub policy: PolicyKind,
    pub layer: usize,
    /// Token ids accepted so far, one per recovered position.
    pub recovered: Vec<usize>,
    /// Verifier tests spent at each position.
    pub proposals: Vec<usize>,
    /// Tolerance in force when each position was accepted.
    pub accepted_epsilon: Vec<f64>,
    /// Distance of the accepted token's state to the observed row.
    pub accepted_distance: Vec<f64>,
    pub total_tests: usize,
    /// `T |V|`, the most tests an inversion can spend.
    pub test_bound: usize,
    /// Set when ground truth was supplied.
    pub exact_match: Option<bool>,
}

impl RecoveryResult {
    pub fn new(policy: PolicyKind, layer: usize, test_bound: usize) -> Self {
        RecoveryResult {
            policy,
            layer,
            recovered: Vec::new(),
            proposals: Vec::new(),
            accepted_epsilon: Vec::new(),
            accepted_distance: Vec::new(),
            total_tests: 0,
            test_bound,
            exact_match: None,
        }
    }

    /// Fraction of positions of `truth` recovered correctly; missing
    /// positions count as wrong.
    pub fn token_accuracy(&self, truth: &[usize]) -> f64 {
        if truth.is_empty() {
            return 1.0;
        }
        let hits = truth.iter().zip(&self.recovered).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len() as f64
    }

    /// Records whether the recovery equals `truth`.
    pub fn score(&mut self, truth: &[usize]) {
        self.exact_match = Some(self.recovered == truth);
    }

    pub fn mean_proposals(&self) -> f64 {
        if self.proposals.is_empty() {
            return 0.0;
        }
        self.proposals.iter().sum::<usize>() as f64 / self.proposals.len() as f64
    }
}
