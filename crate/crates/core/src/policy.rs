//! Autoregressive expression sampler and its likelihood `q(f)`.
//!
//! Each step feeds the network one-hot encodings of the previous token, the
//! parent and the sibling of the pending slot (each with an extra "empty"
//! category) followed by the three matching constant values. The network
//! emits token logits, masked by the constraint set, and the parameters of a
//! normal distribution used whenever the constant token is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{ConstraintSet, Expression, ExpressionRecord, PrefixState, Skeleton, SlotContext, TokenLibrary};
use crate::nn::{log_prob_and_tape, masked_log_softmax, NetShape, NetworkParams, StepRecord};
use crate::normal_log_pdf;
use crate::quadrature::{integrate, QuadratureScheme};

/// Width of the network input for `lib`.
pub fn input_width(lib: &TokenLibrary) -> usize {
    3 * (lib.len() + 1) + 3
}

pub fn net_shape(lib: &TokenLibrary, hidden: usize) -> NetShape {
    NetShape { input: input_width(lib), hidden, vocab: lib.len() }
}

/// Encodes a slot context as the network input vector.
pub fn encode_context(lib: &TokenLibrary, ctx: &SlotContext) -> Vec<f64> {
    let block = lib.len() + 1;
    let mut x = vec![0.0; input_width(lib)];
    let empty = lib.len();
    let previous = ctx.previous.map(|(t, _)| t).unwrap_or(empty);
    let parent = ctx.parent.unwrap_or(empty);
    let sibling = ctx.sibling.map(|(t, _)| t).unwrap_or(empty);
    x[previous] = 1.0;
    x[block + parent] = 1.0;
    x[2 * block + sibling] = 1.0;
    x[3 * block] = ctx.previous.map_or(0.0, |(_, c)| c);
    // Parents are operators, so their constant slot is always empty.
    x[3 * block + 1] = 0.0;
    x[3 * block + 2] = ctx.sibling.map_or(0.0, |(_, c)| c);
    x
}

/// One sampled expression with everything needed to replay its likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub expression: Expression,
    pub steps: Vec<StepRecord>,
    pub log_q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub expression: ExpressionRecord,
    pub steps: Vec<StepRecord>,
    pub log_q: f64,
}

impl Rollout {
    pub fn to_record(&self, lib: &TokenLibrary) -> RolloutRecord {
        RolloutRecord { expression: self.expression.to_record(lib), steps: self.steps.clone(), log_q: self.log_q }
    }
}

/// Deterministic per-stream generator: distinct `(seed, a, b)` triples give
/// independent streams.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&a.to_le_bytes());
    bytes[16..24].copy_from_slice(&b.to_le_bytes());
    bytes[24..].copy_from_slice(b"dvisr-rs");
    ChaCha8Rng::from_seed(bytes)
}

/// Draws one complete expression from the policy.
pub fn sample_expression<R: Rng + ?Sized>(
    params: &NetworkParams,
    lib: &TokenLibrary,
    cs: &ConstraintSet,
    rng: &mut R,
) -> Result<Rollout> {
    let mut state = PrefixState::new();
    let mut h = vec![0.0; params.shape().hidden];
    let mut steps = Vec::new();
    let mut constants = Vec::new();
    let mut log_q = 0.0;
    while !state.is_complete() {
        let input = encode_context(lib, &state.context());
        let mask = state.allowed_tokens(lib, cs)?;
        let gru = params.gru_step(&input, &h);
        let logp = masked_log_softmax(&params.token_logits(&gru.h), &mask);
        let choice = draw_categorical(&logp, rng);
        log_q += logp[choice];
        let constant = if lib.token(choice).is_constant() {
            let head = params.const_head(&gru.h);
            let z: f64 = rng.sample(StandardNormal);
            let c = head.mean + head.sd * z;
            log_q += normal_log_pdf(c, head.mean, head.sd);
            constants.push(c);
            Some(c)
        } else {
            None
        };
        state.push(lib, choice, constant.unwrap_or(0.0));
        steps.push(StepRecord { input, mask, choice, constant });
        h = gru.h;
    }
    let expression = Expression { tokens: state.tokens().to_vec(), constants };
    Ok(Rollout { expression, steps, log_q })
}

fn draw_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Rebuilds the inputs and masks the sampler would have seen for `expr`.
pub fn teacher_forced_steps(lib: &TokenLibrary, cs: &ConstraintSet, expr: &Expression) -> Result<Vec<StepRecord>> {
    let mut state = PrefixState::new();
    let mut steps = Vec::with_capacity(expr.tokens.len());
    let mut consts = expr.constants.iter();
    for (i, &t) in expr.tokens.iter().enumerate() {
        if state.is_complete() {
            return Err(Error::IncompleteExpression);
        }
        let input = encode_context(lib, &state.context());
        let mask = state.allowed_tokens(lib, cs)?;
        if !mask[t] {
            return Err(Error::Unreachable { step: i });
        }
        let constant = if lib.token(t).is_constant() {
            Some(*consts.next().ok_or(Error::ConstantCount { expected: i + 1, got: expr.constants.len() })?)
        } else {
            None
        };
        state.push(lib, t, constant.unwrap_or(0.0));
        steps.push(StepRecord { input, mask, choice: t, constant });
    }
    if !state.is_complete() {
        return Err(Error::IncompleteExpression);
    }
    Ok(steps)
}

/// Teacher-forced `log q(f)` of an externally supplied expression.
pub fn rollout_log_prob(params: &NetworkParams, lib: &TokenLibrary, cs: &ConstraintSet, expr: &Expression) -> Result<f64> {
    let steps = teacher_forced_steps(lib, cs, expr)?;
    Ok(log_prob_and_tape(params, &steps)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalQ {
    pub q: f64,
    pub converged: bool,
}

/// `q(z)`: the policy probability of a tree skeleton with its constants
/// integrated out.
///
/// Token probabilities after a constant are re-evaluated at every quadrature
/// node because the constant's value feeds back into later inputs. Each
/// constant is integrated over `mean ± window_sds * sd` of the normal the
/// network emits at that step.
pub fn tree_marginal_q(
    params: &NetworkParams,
    lib: &TokenLibrary,
    cs: &ConstraintSet,
    tree: &Skeleton,
    scheme: &QuadratureScheme,
) -> Result<MarginalQ> {
    let k = tree.n_constants(lib);
    if k > scheme.max_constants {
        return Err(Error::TooManyConstants { got: k, max: scheme.max_constants });
    }
    // Masks do not depend on constant values, so reachability is checked once.
    teacher_forced_steps(lib, cs, &tree.with_constants(vec![0.0; k]))?;
    let h = vec![0.0; params.shape().hidden];
    let mut converged = true;
    let q = marginal_rec(params, lib, cs, tree.tokens(), PrefixState::new(), h, scheme, &mut converged);
    Ok(MarginalQ { q, converged })
}

#[allow(clippy::too_many_arguments)]
fn marginal_rec(
    params: &NetworkParams,
    lib: &TokenLibrary,
    cs: &ConstraintSet,
    tokens: &[usize],
    state: PrefixState,
    h: Vec<f64>,
    scheme: &QuadratureScheme,
    converged: &mut bool,
) -> f64 {
    let pos = state.len();
    if pos == tokens.len() {
        return 1.0;
    }
    let t = tokens[pos];
    let input = encode_context(lib, &state.context());
    let mask = state.allowed_tokens(lib, cs).expect("reachability checked");
    let gru = params.gru_step(&input, &h);
    let p = masked_log_softmax(&params.token_logits(&gru.h), &mask)[t].exp();
    if !lib.token(t).is_constant() {
        let mut next = state;
        next.push(lib, t, 0.0);
        return p * marginal_rec(params, lib, cs, tokens, next, gru.h, scheme, converged);
    }
    let head = params.const_head(&gru.h);
    let half = scheme.window_sds * head.sd;
    let mut inner_ok = true;
    let res = integrate(
        |c| {
            let mut next = state.clone();
            next.push(lib, t, c);
            let rest = marginal_rec(params, lib, cs, tokens, next, gru.h.clone(), scheme, &mut inner_ok);
            normal_log_pdf(c, head.mean, head.sd).exp() * rest
        },
        head.mean - half,
        head.mean + half,
        scheme,
    );
    *converged &= res.converged && inner_ok;
    p * res.value
}
