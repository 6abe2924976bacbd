//! Reverse-mode autodiff: the tape, its operations and a finite-difference checker.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
