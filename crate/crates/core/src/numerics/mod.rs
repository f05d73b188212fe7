//! Dense kernels, seeded randomness, reverse-mode differentiation and the
//! finite-difference gradient checker everything else is tested against.

pub mod activation;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod tape;

pub use activation::{gelu, gelu_grad, gelu_second};
pub use gradcheck::{finite_diff_check, relative_error, DifferentiableParam, GradCheckReport};
pub use matrix::{cholesky, cholesky_solve, dot, matmul, softmax, softmax_masked, Matrix};
pub use optim::{cosine_lr, Adam};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
