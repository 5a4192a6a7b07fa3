//! Deep hedging of a locally-capped, globally-floored cliquet under Heston
//! dynamics, trained either with Adam or with a Kronecker-factored
//! generalized Gauss-Newton preconditioner (DH-KFAC).

pub mod contracts;
pub mod diffcore;
pub mod harness;
pub mod market;
pub mod matrix;
pub mod optim;
pub mod policy;

pub use diffcore::{DiffError, Gradients, HookChannel, Tape, Var};
pub use matrix::Matrix64;
