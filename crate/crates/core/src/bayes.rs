//! Gaussian likelihood, priors over trees and constants, and the ELBO reward
//! `log L + log p - log q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{count_trees, Dataset, Expression, TokenLibrary};
use crate::{normal_log_pdf, LN_2PI};

/// Reward assigned to expressions that fail to evaluate.
pub const REWARD_FLOOR: f64 = -1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodModel {
    pub sigma: f64,
}

impl LikelihoodModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(LikelihoodModel { sigma })
        } else {
            Err(Error::Config(format!("likelihood sigma must be positive, got {sigma}")))
        }
    }

    /// `sum_i log N(y_i; f_i, sigma^2)` for predictions `f`.
    pub fn log_likelihood_of(&self, prediction: &[f64], y: &[f64]) -> f64 {
        let m = y.len() as f64;
        let sq: f64 = prediction.iter().zip(y).map(|(f, y)| (y - f) * (y - f)).sum();
        -0.5 * m * LN_2PI - m * self.sigma.ln() - 0.5 * sq / (self.sigma * self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PriorMode {
    UniformOverTrees,
    UniformTreesWithNormalConstants { mu: f64, sigma: f64 },
}

/// Uniform prior over the `n_expr` size-bounded trees, optionally times an
/// independent normal density for each constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub mode: PriorMode,
    pub n_expr: f64,
}

impl PriorModel {
    /// `n_expr` counts every tree of at most `max_tokens` tokens ignoring the
    /// structural constraints.
    pub fn for_library(lib: &TokenLibrary, max_tokens: usize, mode: PriorMode) -> Result<Self> {
        if let PriorMode::UniformTreesWithNormalConstants { sigma, .. } = mode {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("constant prior sigma must be positive, got {sigma}")));
            }
        }
        let n = count_trees(lib, max_tokens);
        if n == 0 {
            return Err(Error::EmptyTreeSet);
        }
        Ok(PriorModel { mode, n_expr: n as f64 })
    }

    pub fn log_tree_prior(&self) -> f64 {
        -self.n_expr.ln()
    }

    pub fn log_constants_prior(&self, constants: &[f64]) -> f64 {
        match self.mode {
            PriorMode::UniformOverTrees => 0.0,
            PriorMode::UniformTreesWithNormalConstants { mu, sigma } => {
                constants.iter().map(|&c| normal_log_pdf(c, mu, sigma)).sum()
            }
        }
    }
}

pub fn log_likelihood(lib: &TokenLibrary, expr: &Expression, data: &Dataset, lm: &LikelihoodModel) -> Result<f64> {
    let prediction = expr.evaluate(lib, &data.x)?;
    Ok(lm.log_likelihood_of(&prediction, &data.y))
}

pub fn log_prior(expr: &Expression, pm: &PriorModel) -> f64 {
    pm.log_tree_prior() + pm.log_constants_prior(&expr.constants)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_q: f64,
    pub reward: f64,
    pub failed: bool,
}

impl RewardBreakdown {
    pub fn from_parts(log_likelihood: f64, log_prior: f64, log_q: f64) -> Self {
        RewardBreakdown { log_likelihood, log_prior, log_q, reward: log_likelihood + log_prior - log_q, failed: false }
    }
}

/// ELBO integrand for one expression. Evaluation failures get
/// [`REWARD_FLOOR`] and the `failed` flag.
pub fn reward(
    lib: &TokenLibrary,
    expr: &Expression,
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
    log_q: f64,
) -> RewardBreakdown {
    let lp = log_prior(expr, pm);
    match log_likelihood(lib, expr, data, lm) {
        Ok(ll) if ll.is_finite() => RewardBreakdown::from_parts(ll, lp, log_q),
        _ => RewardBreakdown {
            log_likelihood: f64::NEG_INFINITY,
            log_prior: lp,
            log_q,
            reward: REWARD_FLOOR,
            failed: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    }

    fn no_const_lib() -> TokenLibrary {
        TokenLibrary::from_symbols(&["+", "*", "sin", "x_0"]).unwrap()
    }

    #[test]
    fn perfect_fit_likelihood() {
        let lib = no_const_lib();
        let data = Dataset::univariate(&grid(), |x| x * x);
        let e = Expression::from_symbols(&lib, &["*", "x_0", "x_0"], vec![]).unwrap();
        let ll = log_likelihood(&lib, &e, &data, &LikelihoodModel::new(1.0).unwrap()).unwrap();
        assert_eq!(ll, -5.5 * (2.0 * std::f64::consts::PI).ln());
    }

    #[test]
    fn residual_likelihood_on_grid() {
        let lib = no_const_lib();
        let data = Dataset::univariate(&grid(), |x| x * x);
        let e = Expression::from_symbols(&lib, &["x_0"], vec![]).unwrap();
        let ll = log_likelihood(&lib, &e, &data, &LikelihoodModel::new(1.0).unwrap()).unwrap();
        // sum (x - x^2)^2 over the grid = 0.3333 (direct arithmetic)
        let sq: f64 = grid().iter().map(|x| (x - x * x).powi(2)).sum();
        assert!((sq - 0.3333).abs() < 1e-12);
        let expected = -5.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 0.3333;
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn sine_on_constant_data_golden() {
        let lib = no_const_lib();
        let data = Dataset::univariate(&grid(), |_| 0.5);
        let e = Expression::from_symbols(&lib, &["sin", "x_0"], vec![]).unwrap();
        let ll = log_likelihood(&lib, &e, &data, &LikelihoodModel::new(1.0).unwrap()).unwrap();
        // computed independently with numpy
        assert!((ll - -10.520_571_213_308_417).abs() < 1e-11, "{ll}");
    }

    #[test]
    fn priors() {
        let lib = no_const_lib();
        let pm = PriorModel::for_library(&lib, 3, PriorMode::UniformOverTrees).unwrap();
        let e = Expression::from_symbols(&lib, &["x_0"], vec![]).unwrap();
        assert_eq!(log_prior(&e, &pm), (0.2f64).ln());

        let lib = TokenLibrary::from_symbols(&["+", "*", "cos", "c", "x_0"]).unwrap();
        let mode = PriorMode::UniformTreesWithNormalConstants { mu: 0.0, sigma: 10.0 };
        let pm = PriorModel::for_library(&lib, 3, mode).unwrap();
        assert_eq!(pm.n_expr, 14.0);
        let e = Expression::from_symbols(&lib, &["x_0"], vec![]).unwrap();
        assert_eq!(log_prior(&e, &pm), -(14f64.ln()));
        let e = Expression::from_symbols(&lib, &["c"], vec![0.0]).unwrap();
        let expected = -(14f64.ln()) - 0.5 * (2.0 * std::f64::consts::PI * 100.0).ln();
        assert!((log_prior(&e, &pm) - expected).abs() < 1e-14);
    }

    #[test]
    fn reward_recomposes() {
        let lib = no_const_lib();
        let data = Dataset::univariate(&grid(), |x| x * x);
        let lm = LikelihoodModel::new(1.0).unwrap();
        let pm = PriorModel::for_library(&lib, 3, PriorMode::UniformOverTrees).unwrap();
        let e = Expression::from_symbols(&lib, &["*", "x_0", "x_0"], vec![]).unwrap();
        let r = reward(&lib, &e, &data, &lm, &pm, 0.25f64.ln());
        let expected = -5.5 * (2.0 * std::f64::consts::PI).ln() + 0.2f64.ln() - 0.25f64.ln();
        assert!((r.reward - expected).abs() < 1e-12);
        assert_eq!(r.reward, r.log_likelihood + r.log_prior - r.log_q);
        assert!(!r.failed);
    }

    #[test]
    fn failed_evaluation_gets_floor() {
        let lib = TokenLibrary::from_symbols(&["log", "x_0"]).unwrap();
        let data = Dataset::univariate(&[0.0, 1.0], |x| x);
        let lm = LikelihoodModel::new(1.0).unwrap();
        let pm = PriorModel::for_library(&lib, 2, PriorMode::UniformOverTrees).unwrap();
        let e = Expression::from_symbols(&lib, &["log", "x_0"], vec![]).unwrap();
        let r = reward(&lib, &e, &data, &lm, &pm, 0.0);
        assert!(r.failed);
        assert_eq!(r.reward, REWARD_FLOOR);
    }

    #[test]
    fn square_is_the_best_fit_for_quadratic_data() {
        let lib = no_const_lib();
        let data = Dataset::univariate(&grid(), |x| x * x);
        let lm = LikelihoodModel::new(1.0).unwrap();
        let best = [vec!["x_0"], vec!["+", "x_0", "x_0"], vec!["sin", "x_0"]]
            .iter()
            .map(|s| log_likelihood(&lib, &Expression::from_symbols(&lib, s, vec![]).unwrap(), &data, &lm).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let sq = Expression::from_symbols(&lib, &["*", "x_0", "x_0"], vec![]).unwrap();
        assert!(log_likelihood(&lib, &sq, &data, &lm).unwrap() > best);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(LikelihoodModel::new(0.0).is_err());
        assert!(LikelihoodModel::new(-1.0).is_err());
    }
}
