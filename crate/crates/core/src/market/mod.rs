//! Heston market: path simulation, semi-analytic vanilla pricing and a
//! conditional Monte-Carlo pricing oracle.

mod heston;
mod io;
pub mod mc_oracle;
mod pricing;
mod table;

pub use heston::{simulate, simulate_range, HestonParams, PathSet};
pub use pricing::{HestonPricer, OptionKind, PRICE_TOLERANCE};
pub use table::{StripPricer, TabulatedPricer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid Heston parameters: {0}")]
    InvalidParams(String),
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
    #[error("non-finite state on path {path} at substep {substep}")]
    NonFinite { path: usize, substep: usize },
    #[error("invalid pricing input: {0}")]
    InvalidPricingInput(String),
    #[error(
        "pricing quadrature did not converge (tau={tau_steps} steps, v={variance}): \
         estimated error {estimate:e} above {tolerance:e}"
    )]
    Quadrature {
        tau_steps: usize,
        variance: f64,
        estimate: f64,
        tolerance: f64,
    },
    #[error("path file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type MarketResult<T> = Result<T, MarketError>;
