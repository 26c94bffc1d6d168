//! Dense row-major matrices and a matrix-level reverse-mode tape.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{central_difference, Gradients, NodeId, Tape};
