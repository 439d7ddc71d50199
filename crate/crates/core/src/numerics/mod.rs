//! Dense linear algebra, seeded random streams and the numerically careful
//! primitives (softmax, row normalization) the model is built from.

mod matrix;
mod rng;

pub(crate) use matrix::{checked, softmax_in_place};
pub use matrix::{
    checked_mode, dot, exp, l2_distance, l2_norm, mat_mul, row_normalize, set_checked_mode, softmax_rows,
    Matrix,
};
pub use rng::{gaussian_matrix, Rng};
