//! Running an experiment end to end: oracle, seeded training runs, reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use dvisr_core::expr::{enumerate_trees, Skeleton};
use dvisr_core::nn::NetworkParams;
use dvisr_core::oracle::{exact_elbo, exact_posterior, kl_divergence, log_marginal_joints, variational_table, PosteriorRow, PosteriorTable, TableSource};
use dvisr_core::trainer::{estimate_elbo, initial_params, train_with, EpochTrace, Problem, TrainError};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::stats::{iqr, median};
use crate::tables::{compare_tables, write_table, Comparison};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Core(#[from] dvisr_core::Error),
    #[error(transparent)]
    Table(#[from] crate::tables::TableError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("serializing {what}: {source}")]
    Json { what: String, source: serde_json::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| HarnessError::Json { what: path.display().to_string(), source })?;
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMethod {
    /// Exact enumeration of the variational distribution.
    Exact,
    /// Evidence minus a Monte Carlo ELBO.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub completed: bool,
    pub error: Option<String>,
    pub epochs_completed: usize,
    pub skipped_steps: usize,
    /// Variational probability per row of the exact table, in its order.
    pub q: Option<Vec<f64>>,
    pub final_kl: Option<f64>,
    pub kl_std_error: Option<f64>,
    pub kl_method: KlMethod,
    /// Estimated KL below zero by more than three standard errors.
    pub kl_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub display: String,
    pub p: f64,
    pub q_median: f64,
    pub q_q25: f64,
    pub q_q75: f64,
    /// Median over runs of `|q - p|`.
    pub median_abs_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub exact: PosteriorTable,
    /// Median variational probabilities across completed runs.
    pub variational: Option<PosteriorTable>,
    pub rows: Vec<RowSummary>,
    pub runs: Vec<RunSummary>,
    pub median_final_kl: Option<f64>,
    pub max_median_abs_delta: Option<f64>,
    pub comparison: Option<Comparison>,
    #[serde(skip)]
    pub traces: Vec<Vec<EpochTrace>>,
}

impl RunReport {
    pub fn completed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.completed).count()
    }
}

struct RunResult {
    summary: RunSummary,
    traces: Vec<EpochTrace>,
}

/// Exact posterior and the tree set it covers, in table order.
pub fn oracle(spec: &ExperimentSpec, problem: &Problem) -> Result<(PosteriorTable, Vec<Skeleton>), HarnessError> {
    let trees = enumerate_trees(&problem.lib, problem.cs.max_tokens, Some(&problem.cs));
    let scheme = problem.lib.has_constant().then_some(&spec.oracle.quadrature);
    let table = exact_posterior(&problem.lib, &trees, &problem.data, &problem.lm, &problem.pm, scheme)?;
    let ordered = table
        .rows
        .iter()
        .map(|r| {
            trees
                .iter()
                .find(|t| dvisr_core::expr::canonical_display(&problem.lib, t.tokens()) == r.display)
                .cloned()
                .expect("table rows come from these trees")
        })
        .collect();
    Ok((table, ordered))
}

fn run_dir(out: &Path, run: usize) -> std::path::PathBuf {
    out.join("runs").join(format!("run-{run:02}"))
}

#[allow(clippy::too_many_arguments)]
fn single_run(
    spec: &ExperimentSpec,
    problem: &Problem,
    exact: &PosteriorTable,
    trees: &[Skeleton],
    log_joints: &[f64],
    run: usize,
    out: Option<&Path>,
) -> Result<RunResult, HarnessError> {
    let seed = spec.run_seed(run);
    let cfg = spec.train_config(seed);
    let log_ev = exact.log_evidence.expect("exact tables carry evidence");
    let dir = out.map(|o| run_dir(o, run));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut ckpt_error = None;
    let observer = |t: &EpochTrace, p: &NetworkParams| {
        if let (Some(every), Some(d)) = (spec.checkpoint_every, &dir) {
            if every > 0 && (t.epoch + 1) % every == 0 && ckpt_error.is_none() {
                let path = d.join(format!("checkpoint-{:05}.json", t.epoch + 1));
                if let Err(e) = write_json(&p.to_checkpoint(), &path) {
                    ckpt_error = Some(e);
                }
            }
        }
    };
    let outcome = train_with(&cfg, problem, Some(log_ev), initial_params(problem, &cfg), observer);
    if let Some(e) = ckpt_error {
        return Err(e);
    }
    let mut summary = RunSummary {
        run,
        seed,
        completed: false,
        error: None,
        epochs_completed: 0,
        skipped_steps: 0,
        q: None,
        final_kl: None,
        kl_std_error: None,
        kl_method: if problem.lib.has_constant() { KlMethod::MonteCarlo } else { KlMethod::Exact },
        kl_flagged: false,
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged(d)) => {
            warn!("{} run {run} diverged at epoch {}", spec.name, d.epoch);
            if let Some(dir) = &dir {
                write_json(&d.last_finite, &dir.join("divergence-checkpoint.json"))?;
            }
            summary.error = Some(format!("diverged at epoch {}", d.epoch));
            summary.epochs_completed = d.epoch;
            return Ok(RunResult { summary, traces: d.traces });
        }
        Err(TrainError::Core(e)) => {
            summary.error = Some(e.to_string());
            return Ok(RunResult { summary, traces: Vec::new() });
        }
    };
    summary.epochs_completed = outcome.traces.len();
    summary.skipped_steps = outcome.skipped_steps;
    let table = match variational_table(&outcome.params, &problem.lib, &problem.cs, trees, &spec.oracle.quadrature) {
        Ok(t) => t,
        Err(e) => {
            summary.error = Some(e.to_string());
            return Ok(RunResult { summary, traces: outcome.traces });
        }
    };
    let q: Vec<f64> = exact.rows.iter().map(|r| table.probability(&r.display).expect("same tree set")).collect();
    match summary.kl_method {
        KlMethod::Exact => {
            summary.final_kl = Some(kl_divergence(log_ev, exact_elbo(&q, log_joints)));
        }
        KlMethod::MonteCarlo => {
            let est = estimate_elbo(&outcome.params, problem, spec.oracle.elbo_samples, seed)?;
            let kl = kl_divergence(log_ev, est.mean);
            summary.final_kl = Some(kl);
            summary.kl_std_error = Some(est.std_error);
            summary.kl_flagged = kl < -3.0 * est.std_error;
        }
    }
    if let Some(d) = &dir {
        write_table(&table, d, "posterior_variational")?;
        write_json(&outcome.params.to_checkpoint(), &d.join("final-checkpoint.json"))?;
    }
    summary.q = Some(q);
    summary.completed = true;
    Ok(RunResult { summary, traces: outcome.traces })
}

fn write_traces(out: &Path, traces: &[Vec<EpochTrace>]) -> Result<(), HarnessError> {
    let path = out.join("traces.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e.into() })?;
    let csv_err = |e: csv::Error| HarnessError::Io { path: path.display().to_string(), source: e.into() };
    w.write_record(["run", "epoch", "elbo", "kl", "lr", "baseline", "failures"]).map_err(csv_err)?;
    for (run, ts) in traces.iter().enumerate() {
        for t in ts {
            w.write_record([
                run.to_string(),
                t.epoch.to_string(),
                t.elbo.to_string(),
                t.kl.map(|k| k.to_string()).unwrap_or_default(),
                t.lr.to_string(),
                t.baseline.to_string(),
                t.failures.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(&path))
}

/// Oracle once, then `runs` seeded training runs in parallel. Failed runs
/// are recorded and excluded from the summary statistics.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    let problem = spec.problem()?;
    let (exact, trees) = oracle(spec, &problem)?;
    let scheme = &spec.oracle.quadrature;
    let log_joints = if problem.lib.has_constant() {
        Vec::new()
    } else {
        log_marginal_joints(&problem.lib, &trees, &problem.data, &problem.lm, &problem.pm, scheme)?
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(io_err(o))?;
        write_table(&exact, o, "posterior_exact")?;
        fs::write(o.join("experiment.toml"), spec.to_toml()).map_err(io_err(o))?;
    }
    info!("{}: log evidence {:.10}, {} trees", spec.name, exact.log_evidence.unwrap_or(f64::NAN), trees.len());

    let results: Vec<RunResult> = (0..spec.hyperparameters.runs)
        .into_par_iter()
        .map(|run| single_run(spec, &problem, &exact, &trees, &log_joints, run, out))
        .collect::<Result<_, _>>()?;

    let completed: Vec<&RunSummary> = results.iter().map(|r| &r.summary).filter(|s| s.completed).collect();
    let rows: Vec<RowSummary> = exact
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let qs: Vec<f64> = completed.iter().map(|s| s.q.as_ref().expect("completed")[i]).collect();
            let deltas: Vec<f64> = qs.iter().map(|q| (q - row.probability).abs()).collect();
            let (q25, q75) = iqr(&qs)?;
            Some(RowSummary {
                display: row.display.clone(),
                p: row.probability,
                q_median: median(&qs)?,
                q_q25: q25,
                q_q75: q75,
                median_abs_delta: median(&deltas)?,
            })
        })
        .collect();
    let variational = (!rows.is_empty()).then(|| PosteriorTable {
        rows: exact
            .rows
            .iter()
            .zip(&rows)
            .map(|(e, s)| PosteriorRow { tokens: e.tokens.clone(), display: s.display.clone(), probability: s.q_median })
            .collect(),
        log_evidence: None,
        source: TableSource::Variational,
    });
    let kls: Vec<f64> = completed.iter().filter_map(|s| s.final_kl).collect();
    let comparison = match &variational {
        Some(v) => Some(compare_tables(&exact, v, spec.oracle.compare_tol)?),
        None => None,
    };
    let report = RunReport {
        name: spec.name.clone(),
        max_median_abs_delta: rows.iter().map(|r| r.median_abs_delta).reduce(f64::max),
        median_final_kl: median(&kls),
        rows,
        runs: results.iter().map(|r| r.summary.clone()).collect(),
        comparison,
        variational,
        exact,
        traces: results.into_iter().map(|r| r.traces).collect(),
    };
    if let Some(o) = out {
        write_traces(o, &report.traces)?;
        if let Some(v) = &report.variational {
            write_table(v, o, "posterior_variational")?;
        }
        write_json(&report, &o.join("report.json"))?;
    }
    Ok(report)
}

/// Human-readable summary lines.
pub fn render_report(report: &RunReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{}: {}/{} runs completed", report.name, report.completed_runs(), report.runs.len())?;
    writeln!(out, "{:>14}  {:>12}  {:>12}  {:>27}", "expression", "p", "q median", "q IQR")?;
    for r in &report.rows {
        writeln!(out, "{:>14}  {:>12.8}  {:>12.8}  [{:.8}, {:.8}]", r.display, r.p, r.q_median, r.q_q25, r.q_q75)?;
    }
    if let Some(kl) = report.median_final_kl {
        writeln!(out, "median final KL: {kl:.3e}")?;
    }
    if let Some(c) = &report.comparison {
        writeln!(out, "max |q - p| (medians): {:.3e}  tol {:.1e}  {}", c.max_abs_delta, c.tol, if c.pass { "PASS" } else { "FAIL" })?;
    }
    for r in report.runs.iter().filter(|r| !r.completed) {
        writeln!(out, "run {} failed: {}", r.run, r.error.as_deref().unwrap_or("unknown"))?;
    }
    Ok(())
}
