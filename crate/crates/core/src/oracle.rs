//! Exact Bayesian quantities on enumerable expression spaces.
//!
//! Trees without constants contribute `log L + log p` directly. Trees with
//! constants integrate `L · p` over their own constants only; a constant
//! that a tree does not use contributes no integral.

use serde::{Deserialize, Serialize};

use crate::bayes::{log_likelihood, LikelihoodModel, PriorMode, PriorModel};
use crate::error::{Error, Result};
use crate::expr::{canonical_display, ConstraintSet, Dataset, Skeleton, TokenLibrary};
use crate::nn::NetworkParams;
use crate::policy::{rollout_log_prob, tree_marginal_q};
use crate::quadrature::{log_integrate, QuadratureScheme};
use crate::{log_sum_exp, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableSource {
    Exact,
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub tokens: Vec<String>,
    pub display: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub rows: Vec<PosteriorRow>,
    pub log_evidence: Option<f64>,
    pub source: TableSource,
}

impl PosteriorTable {
    fn build(lib: &TokenLibrary, trees: &[Skeleton], probs: &[f64], log_evidence: Option<f64>, source: TableSource) -> Self {
        let mut rows: Vec<PosteriorRow> = trees
            .iter()
            .zip(probs)
            .map(|(t, &p)| PosteriorRow {
                tokens: t.symbols(lib),
                display: canonical_display(lib, t.tokens()),
                probability: p,
            })
            .collect();
        rows.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.display.cmp(&b.display)));
        PosteriorTable { rows, log_evidence, source }
    }

    pub fn probability(&self, display: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.display == display).map(|r| r.probability)
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.probability).sum()
    }
}

/// `log L + log p` of a tree, or `-inf` when it cannot be evaluated on the data.
fn log_joint_at(lib: &TokenLibrary, tree: &Skeleton, constants: Vec<f64>, data: &Dataset, lm: &LikelihoodModel, pm: &PriorModel) -> f64 {
    let expr = tree.with_constants(constants);
    match log_likelihood(lib, &expr, data, lm) {
        Ok(ll) if ll.is_finite() => ll + pm.log_tree_prior() + pm.log_constants_prior(&expr.constants),
        _ => f64::NEG_INFINITY,
    }
}

fn constant_prior(pm: &PriorModel) -> Result<(f64, f64)> {
    match pm.mode {
        PriorMode::UniformTreesWithNormalConstants { mu, sigma } => Ok((mu, sigma)),
        PriorMode::UniformOverTrees => {
            Err(Error::Config("trees with constants need a normal prior over constant values".into()))
        }
    }
}

/// Log of the joint `p(y, z | X)` with the tree's constants integrated out.
pub fn tree_log_marginal_joint(
    lib: &TokenLibrary,
    tree: &Skeleton,
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
    scheme: &QuadratureScheme,
) -> Result<f64> {
    let k = tree.n_constants(lib);
    if k == 0 {
        return Ok(log_joint_at(lib, tree, vec![], data, lm, pm));
    }
    if k > scheme.max_constants {
        return Err(Error::TooManyConstants { got: k, max: scheme.max_constants });
    }
    let (mu, sigma) = constant_prior(pm)?;
    let half = scheme.window_sds * sigma;
    let mut converged = true;
    let value = nested_log_integral(&mut |cs| log_joint_at(lib, tree, cs.to_vec(), data, lm, pm), &mut Vec::new(), k, mu, half, scheme, &mut converged);
    if !converged || value.is_nan() {
        return Err(Error::Quadrature { display: canonical_display(lib, tree.tokens()) });
    }
    Ok(value)
}

fn nested_log_integral(
    log_f: &mut dyn FnMut(&[f64]) -> f64,
    prefix: &mut Vec<f64>,
    remaining: usize,
    center: f64,
    half: f64,
    scheme: &QuadratureScheme,
    converged: &mut bool,
) -> f64 {
    if remaining == 0 {
        return log_f(prefix);
    }
    let mut inner_ok = true;
    let res = log_integrate(
        |c| {
            prefix.push(c);
            let v = nested_log_integral(log_f, prefix, remaining - 1, center, half, scheme, &mut inner_ok);
            prefix.pop();
            v
        },
        center,
        half,
        scheme,
    );
    *converged &= res.converged && inner_ok;
    res.log_value
}

/// Log evidence of a space of constant-free trees.
pub fn evidence_no_constants(
    lib: &TokenLibrary,
    trees: &[Skeleton],
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
) -> Result<f64> {
    if trees.is_empty() {
        return Err(Error::EmptyTreeSet);
    }
    let mut joints = Vec::with_capacity(trees.len());
    for t in trees {
        if t.n_constants(lib) > 0 {
            return Err(Error::Config(format!("tree {} has constants", canonical_display(lib, t.tokens()))));
        }
        joints.push(log_joint_at(lib, t, vec![], data, lm, pm));
    }
    Ok(log_sum_exp(&joints))
}

/// Per-tree log marginal joints, in the order of `trees`.
pub fn log_marginal_joints(
    lib: &TokenLibrary,
    trees: &[Skeleton],
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
    scheme: &QuadratureScheme,
) -> Result<Vec<f64>> {
    trees.iter().map(|t| tree_log_marginal_joint(lib, t, data, lm, pm, scheme)).collect()
}

pub fn evidence_with_constants(
    lib: &TokenLibrary,
    trees: &[Skeleton],
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
    scheme: &QuadratureScheme,
) -> Result<f64> {
    if trees.is_empty() {
        return Err(Error::EmptyTreeSet);
    }
    Ok(log_sum_exp(&log_marginal_joints(lib, trees, data, lm, pm, scheme)?))
}

/// Exact posterior over `trees`. Without a scheme every tree must be
/// constant-free.
pub fn exact_posterior(
    lib: &TokenLibrary,
    trees: &[Skeleton],
    data: &Dataset,
    lm: &LikelihoodModel,
    pm: &PriorModel,
    scheme: Option<&QuadratureScheme>,
) -> Result<PosteriorTable> {
    if trees.is_empty() {
        return Err(Error::EmptyTreeSet);
    }
    let joints = match scheme {
        Some(s) => log_marginal_joints(lib, trees, data, lm, pm, s)?,
        None => {
            evidence_no_constants(lib, trees, data, lm, pm)?;
            trees.iter().map(|t| log_joint_at(lib, t, vec![], data, lm, pm)).collect()
        }
    };
    let log_ev = log_sum_exp(&joints);
    let probs: Vec<f64> = joints.iter().map(|j| (j - log_ev).exp()).collect();
    Ok(PosteriorTable::build(lib, trees, &probs, Some(log_ev), TableSource::Exact))
}

/// `KL(q || p) = log evidence - ELBO`.
pub fn kl_divergence(log_evidence: f64, elbo: f64) -> f64 {
    log_evidence - elbo
}

/// `Σ q log(q / p)` from log posterior probabilities; zero-mass entries of
/// `q` contribute nothing.
pub fn kl_from_definition(q: &[f64], log_posterior: &[f64]) -> f64 {
    q.iter().zip(log_posterior).filter(|(&q, _)| q > 0.0).map(|(&q, &lp)| q * (q.ln() - lp)).sum()
}

/// `Σ q (log joint - log q)` over an enumerable space.
pub fn exact_elbo(q: &[f64], log_joints: &[f64]) -> f64 {
    q.iter().zip(log_joints).filter(|(&q, _)| q > 0.0).map(|(&q, &lj)| q * (lj - q.ln())).sum()
}

/// A fully enumerated space of constant-free trees with its exact posterior
/// ingredients.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    pub trees: Vec<Skeleton>,
    pub log_joints: Vec<f64>,
    pub log_evidence: f64,
}

impl DiscreteSpace {
    pub fn new(lib: &TokenLibrary, trees: Vec<Skeleton>, data: &Dataset, lm: &LikelihoodModel, pm: &PriorModel) -> Result<Self> {
        let log_evidence = evidence_no_constants(lib, &trees, data, lm, pm)?;
        let log_joints = trees.iter().map(|t| log_joint_at(lib, t, vec![], data, lm, pm)).collect();
        Ok(DiscreteSpace { trees, log_joints, log_evidence })
    }

    pub fn posterior(&self) -> Vec<f64> {
        self.log_joints.iter().map(|j| (j - self.log_evidence).exp()).collect()
    }

    /// Policy probability of every tree.
    pub fn policy_probs(&self, params: &NetworkParams, lib: &TokenLibrary, cs: &ConstraintSet) -> Result<Vec<f64>> {
        self.trees.iter().map(|t| Ok(rollout_log_prob(params, lib, cs, &t.with_constants(vec![]))?.exp())).collect()
    }

    pub fn elbo(&self, q: &[f64]) -> f64 {
        exact_elbo(q, &self.log_joints)
    }

    pub fn kl(&self, q: &[f64]) -> f64 {
        kl_divergence(self.log_evidence, self.elbo(q))
    }
}

/// Variational `q(z)` over `trees`, constants integrated out.
pub fn variational_table(
    params: &NetworkParams,
    lib: &TokenLibrary,
    cs: &ConstraintSet,
    trees: &[Skeleton],
    scheme: &QuadratureScheme,
) -> Result<PosteriorTable> {
    let mut probs = Vec::with_capacity(trees.len());
    for t in trees {
        let m = tree_marginal_q(params, lib, cs, t, scheme)?;
        if !m.converged {
            return Err(Error::Quadrature { display: canonical_display(lib, t.tokens()) });
        }
        probs.push(m.q);
    }
    Ok(PosteriorTable::build(lib, trees, &probs, None, TableSource::Variational))
}

/// Predictions of a one-constant tree written as `a + b c`, when the tree is
/// affine in its constant on this data.
pub fn affine_in_constant(lib: &TokenLibrary, tree: &Skeleton, data: &Dataset) -> Option<(Vec<f64>, Vec<f64>)> {
    if tree.n_constants(lib) != 1 {
        return None;
    }
    let at = |c: f64| tree.with_constants(vec![c]).evaluate(lib, &data.x).ok();
    let (f0, f1, f2, f5) = (at(0.0)?, at(1.0)?, at(2.0)?, at(-5.0)?);
    let b: Vec<f64> = f0.iter().zip(&f1).map(|(a, c)| c - a).collect();
    let affine = f0.iter().zip(&b).zip(f2.iter().zip(&f5)).all(|((&a, &b), (&y2, &y5))| {
        let scale = 1.0 + a.abs() + b.abs();
        (a + 2.0 * b - y2).abs() <= 1e-12 * scale && (a - 5.0 * b - y5).abs() <= 1e-12 * scale
    });
    affine.then_some((f0, b))
}

/// Closed-form `log p(y, z | X)` for a tree affine in its single constant:
/// `y ~ N(a + b μ, σ_L² I + σ_c² b bᵀ)`.
pub fn closed_form_log_joint(lib: &TokenLibrary, tree: &Skeleton, data: &Dataset, lm: &LikelihoodModel, pm: &PriorModel) -> Option<f64> {
    let (mu, sc) = constant_prior(pm).ok()?;
    let (a, b) = affine_in_constant(lib, tree, data)?;
    let s2 = lm.sigma * lm.sigma;
    let c2 = sc * sc;
    let m = data.y.len() as f64;
    let r: Vec<f64> = data.y.iter().zip(a.iter().zip(&b)).map(|(y, (a, b))| y - a - b * mu).collect();
    let bb: f64 = b.iter().map(|v| v * v).sum();
    let br: f64 = b.iter().zip(&r).map(|(b, r)| b * r).sum();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let denom = s2 + c2 * bb;
    let log_det = m * s2.ln() + (denom / s2).ln();
    let quad = (rr - c2 * br * br / denom) / s2;
    Some(-0.5 * m * LN_2PI - 0.5 * log_det - 0.5 * quad + pm.log_tree_prior())
}
