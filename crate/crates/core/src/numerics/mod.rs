//! Dense kernels, parameters and reverse-mode gradients.

mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use matrix::{
    dot, frobenius_norm, layer_norm, sigmoid, sigmoid_scalar, softmax_rows, Matrix, Real,
    LAYER_NORM_EPS,
};
pub use param::{Grads, Param, ParamId, ParamStore};
pub use tape::{ortho_value, pair_probability, OrthoMode, Tape, Var, PROB_CLAMP};
