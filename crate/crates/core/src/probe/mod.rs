//! Empirical checks of injectivity: all-pairs collision scans, one-step
//! margins, explicit separating witnesses and the Hessian at the origin.

mod hessian;
mod margin;
mod scan;
mod witness;

pub use hessian::{hessian_witness_check, numerical_hessian, DetCheck, HessianReport, HESSIAN_STEP};
pub use margin::{margin, one_step_states, prompt_margins, MarginReport};
pub use scan::{
    collision_scan, length_vs_distance, random_prompts, scan_states, LengthBucket, ScanReport,
    COLLISION_THRESHOLD,
};
pub use witness::{
    build_witness_case_a, build_witness_case_b, case_b_constants, case_b_for_pair, CaseAVariant,
    CaseAWitness, CaseBWitness,
};
