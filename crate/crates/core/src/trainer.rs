//! REINFORCE training of the policy on the ELBO integrand.
//!
//! The reward is held constant with respect to the parameters; the
//! advantage `R(f) - baseline` weights the score `∇ log q(f)`. Batches are
//! reduced in sample order, so a run is bit-for-bit reproducible from its
//! seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{reward, LikelihoodModel, PriorModel, RewardBreakdown};
use crate::error::{Error, Result};
use crate::expr::{ConstraintSet, Dataset, TokenLibrary};
use crate::nn::{clip_grad_norm, log_prob_and_tape, Checkpoint, NetworkParams, PlateauConfig, ReduceOnPlateau, RmsProp, RmsPropConfig};
use crate::policy::{net_shape, sample_expression, stream_rng, Rollout};

/// Everything that defines the inference problem, independent of how the
/// policy is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub lib: TokenLibrary,
    pub cs: ConstraintSet,
    pub data: Dataset,
    pub lm: LikelihoodModel,
    pub pm: PriorModel,
}

impl Problem {
    pub fn reward(&self, rollout: &Rollout) -> RewardBreakdown {
        reward(&self.lib, &rollout.expression, &self.data, &self.lm, &self.pm, rollout.log_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineKind {
    Ewma { alpha: f64 },
    BatchMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineState {
    pub kind: BaselineKind,
    pub value: Option<f64>,
}

impl BaselineState {
    pub fn new(kind: BaselineKind) -> Self {
        BaselineState { kind, value: None }
    }

    /// Folds in one batch of rewards and returns the value to subtract from
    /// this batch. The moving average starts at the first batch mean.
    pub fn update(&mut self, rewards: &[f64]) -> f64 {
        assert!(!rewards.is_empty(), "baseline needs a non-empty batch");
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = match self.kind {
            BaselineKind::BatchMean => mean,
            BaselineKind::None => 0.0,
            BaselineKind::Ewma { alpha } => match self.value {
                None => mean,
                Some(prev) => alpha * mean + (1.0 - alpha) * prev,
            },
        };
        self.value = Some(b);
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub baseline: BaselineKind,
    pub seed: u64,
    pub hidden: usize,
    pub init_scale: f64,
    pub optimizer: RmsPropConfig,
    pub scheduler: PlateauConfig,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 100,
            baseline: BaselineKind::Ewma { alpha: 0.25 },
            seed: 0,
            hidden: 32,
            init_scale: 0.08,
            optimizer: RmsPropConfig::default(),
            scheduler: PlateauConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch size and hidden size must be positive".into()));
        }
        if self.baseline == BaselineKind::BatchMean && self.batch_size < 2 {
            return Err(Error::Config("a batch-mean baseline needs at least two samples per batch".into()));
        }
        if let BaselineKind::Ewma { alpha } = self.baseline {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("EWMA alpha must be in [0, 1], got {alpha}")));
            }
        }
        if !(self.optimizer.lr > 0.0) || !(self.scheduler.min_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Batch mean of the rewards.
    pub elbo: f64,
    pub baseline: f64,
    /// Learning rate used for this epoch's step.
    pub lr: f64,
    /// `log evidence - elbo`, when the evidence is known.
    pub kl: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub traces: Vec<EpochTrace>,
    pub skipped_steps: usize,
}

/// State captured when a run produces non-finite parameters.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub epoch: usize,
    pub traces: Vec<EpochTrace>,
    pub last_finite: Checkpoint,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("training diverged at epoch {}", .0.epoch)]
    Diverged(Box<Divergence>),
}

/// Ascent direction `(1/N) Σ (R_i - b) ∇ log q(f_i)` for a batch.
pub fn reinforce_gradient(params: &NetworkParams, rollouts: &[Rollout], rewards: &[f64], baseline: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    let n = rollouts.len() as f64;
    for (r, &rew) in rollouts.iter().zip(rewards) {
        let (_, tape) = log_prob_and_tape(params, &r.steps)?;
        tape.accumulate(params, (rew - baseline) / n, &mut grad);
    }
    Ok(grad)
}

/// Samples `n` rollouts for one epoch, each from its own stream.
pub fn sample_batch(params: &NetworkParams, problem: &Problem, seed: u64, epoch: u64, n: usize) -> Result<Vec<Rollout>> {
    (0..n)
        .map(|i| sample_expression(params, &problem.lib, &problem.cs, &mut stream_rng(seed, epoch, i as u64)))
        .collect()
}

pub fn initial_params(problem: &Problem, cfg: &TrainConfig) -> NetworkParams {
    let mut rng = stream_rng(cfg.seed, u64::MAX, 0);
    NetworkParams::init_uniform(net_shape(&problem.lib, cfg.hidden), cfg.init_scale, &mut rng)
}

pub fn train(cfg: &TrainConfig, problem: &Problem, log_evidence: Option<f64>) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, problem, log_evidence, initial_params(problem, cfg), |_, _| {})
}

/// Training loop starting from `params`; `observe` sees every epoch's trace
/// and the parameters after its step.
pub fn train_with<F>(
    cfg: &TrainConfig,
    problem: &Problem,
    log_evidence: Option<f64>,
    mut params: NetworkParams,
    mut observe: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochTrace, &NetworkParams),
{
    cfg.validate()?;
    let mut opt = RmsProp::new(cfg.optimizer, params.len());
    let mut sched = ReduceOnPlateau::new(cfg.scheduler);
    let mut baseline = BaselineState::new(cfg.baseline);
    let mut traces = Vec::with_capacity(cfg.epochs);
    let n = cfg.batch_size as f64;
    let mut grad = vec![0.0; params.len()];

    for epoch in 0..cfg.epochs {
        let rollouts = sample_batch(&params, problem, cfg.seed, epoch as u64, cfg.batch_size)?;
        let breakdowns: Vec<RewardBreakdown> = rollouts.iter().map(|r| problem.reward(r)).collect();
        let rewards: Vec<f64> = breakdowns.iter().map(|b| b.reward).collect();
        let b = baseline.update(&rewards);

        grad.iter_mut().for_each(|g| *g = 0.0);
        for (r, &rew) in rollouts.iter().zip(&rewards) {
            let (_, tape) = log_prob_and_tape(&params, &r.steps)?;
            // Descent on -J.
            tape.accumulate(&params, -(rew - b) / n, &mut grad);
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grad, max);
        }
        let before = params.clone();
        opt.step(&mut params.data, &grad);
        let elbo = rewards.iter().sum::<f64>() / n;
        let trace = EpochTrace {
            epoch,
            elbo,
            baseline: b,
            lr: opt.lr,
            kl: log_evidence.map(|e| e - elbo),
            failures: breakdowns.iter().filter(|b| b.failed).count(),
        };
        traces.push(trace);
        if !params.all_finite() {
            return Err(TrainError::Diverged(Box::new(Divergence {
                epoch,
                traces,
                last_finite: before.to_checkpoint(),
            })));
        }
        opt.lr = sched.update(-elbo, opt.lr);
        observe(&trace, &params);
    }
    Ok(TrainOutcome { params, traces, skipped_steps: opt.skipped_steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    /// Standard error of the mean; `NaN` for a single sample.
    pub std_error: f64,
    pub n: usize,
}

/// Monte Carlo ELBO from `n` fresh rollouts.
pub fn estimate_elbo(params: &NetworkParams, problem: &Problem, n: usize, seed: u64) -> Result<ElboEstimate> {
    if n == 0 {
        return Err(Error::Config("ELBO estimate needs at least one sample".into()));
    }
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let r = sample_expression(params, &problem.lib, &problem.cs, &mut stream_rng(seed, u64::MAX - 1, i as u64))?;
        rewards.push(problem.reward(&r).reward);
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(ElboEstimate { mean, std_error, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::PriorMode;

    fn toy_problem() -> Problem {
        let lib = TokenLibrary::from_symbols(&["x_0"]).unwrap();
        let data = Dataset::univariate(&[0.0, 0.5, 1.0], |x| x);
        Problem {
            pm: PriorModel::for_library(&lib, 3, PriorMode::UniformOverTrees).unwrap(),
            lib,
            cs: ConstraintSet::size_only(3),
            data,
            lm: LikelihoodModel::new(1.0).unwrap(),
        }
    }

    #[test]
    fn constant_rewards_give_zero_advantage() {
        for kind in [BaselineKind::BatchMean, BaselineKind::Ewma { alpha: 0.25 }] {
            let mut s = BaselineState::new(kind);
            for _ in 0..5 {
                assert_eq!(s.update(&[3.5, 3.5, 3.5]), 3.5);
            }
        }
    }

    #[test]
    fn ewma_arithmetic() {
        let mut s = BaselineState { kind: BaselineKind::Ewma { alpha: 0.25 }, value: Some(0.0) };
        assert_eq!(s.update(&[4.0, 2.0, 6.0]), 1.0);
        let mut fresh = BaselineState::new(BaselineKind::Ewma { alpha: 0.25 });
        assert_eq!(fresh.update(&[4.0]), 4.0);
    }

    #[test]
    fn batch_mean_advantages_sum_to_zero() {
        let mut s = BaselineState::new(BaselineKind::BatchMean);
        let rewards = [1.0, 2.0, 4.0, 8.0];
        let b = s.update(&rewards);
        assert_eq!(rewards.iter().map(|r| r - b).sum::<f64>(), 0.0);
    }

    #[test]
    fn batch_mean_needs_two_samples() {
        let cfg = TrainConfig { batch_size: 1, baseline: BaselineKind::BatchMean, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_expression_library_never_moves() {
        let problem = toy_problem();
        let cfg = TrainConfig { epochs: 20, batch_size: 8, hidden: 4, ..Default::default() };
        let start = initial_params(&problem, &cfg);
        let out = train(&cfg, &problem, None).unwrap();
        assert_eq!(out.params, start);
        assert!(out.traces.iter().all(|t| t.kl.is_none()));
    }

    #[test]
    fn single_sample_estimate() {
        let problem = toy_problem();
        let cfg = TrainConfig { hidden: 4, ..Default::default() };
        let p = initial_params(&problem, &cfg);
        let e = estimate_elbo(&p, &problem, 1, 0).unwrap();
        let r = sample_expression(&p, &problem.lib, &problem.cs, &mut stream_rng(0, u64::MAX - 1, 0)).unwrap();
        assert_eq!(e.mean, problem.reward(&r).reward);
        assert!(e.std_error.is_nan());
    }

    #[test]
    fn traces_are_reproducible() {
        let lib = TokenLibrary::from_symbols(&["+", "*", "sin", "x_0"]).unwrap();
        let cs = ConstraintSet { forbid_nested_trig: true, ..ConstraintSet::size_only(3) };
        let problem = Problem {
            pm: PriorModel::for_library(&lib, 3, PriorMode::UniformOverTrees).unwrap(),
            data: Dataset::univariate(&[0.0, 0.5, 1.0], |x| x * x),
            lib,
            cs,
            lm: LikelihoodModel::new(1.0).unwrap(),
        };
        let cfg = TrainConfig { epochs: 10, batch_size: 16, hidden: 8, seed: 77, ..Default::default() };
        let a = train(&cfg, &problem, Some(-3.0)).unwrap();
        let b = train(&cfg, &problem, Some(-3.0)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.traces, b.traces);
        for t in &a.traces {
            assert_eq!(t.kl, Some(-3.0 - t.elbo));
        }
    }
}
