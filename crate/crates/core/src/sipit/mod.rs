//! Sequential inverse prompting: recover a prompt position by position from
//! its hidden states, testing candidate tokens against an acceptance ball.

mod invert;
mod policy;
mod result;
mod verifier;

pub use invert::{brute_force_invert, invert, invert_many, Policy, ProxyStart};
pub use policy::{
    mean_embedding_start, policy_gradient, policy_random, propose, GradientSettings, PolicyState, StepContext,
};
pub use result::{PolicyKind, RecoveryResult};
pub use verifier::{candidate_distance, verify, Backoff, VerifierConfig, BACKOFF_START};
