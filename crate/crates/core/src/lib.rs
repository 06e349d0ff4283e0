//! Deep variational inference symbolic regression.
//!
//! An autoregressive GRU policy samples preorder expression trees and the
//! values of their constants. It is trained with REINFORCE on the ELBO
//! integrand so that its distribution approaches the Bayesian posterior over
//! expressions. The [`oracle`] module computes that posterior exactly on
//! enumerable expression spaces for verification.

pub mod bayes;
pub mod error;
pub mod expr;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod quadrature;
pub mod trainer;

pub use error::{Error, Result};

/// `ln(sum(exp(xs)))`, stable for large magnitudes. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of `N(x; mean, sd^2)`.
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}
