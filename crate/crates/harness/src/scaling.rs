//! KL divergence against maximum expression size.

use std::fs;
use std::path::Path;

use dvisr_core::expr::enumerate_trees;
use dvisr_core::oracle::{kl_divergence, DiscreteSpace};
use dvisr_core::trainer::{estimate_elbo, train};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, ConfigError, ExperimentSpec};
use crate::experiment::{io_err, write_json, HarnessError};
use crate::stats::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeStatus {
    Ok,
    /// Tree count above the configured budget.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub status: SizeStatus,
    pub seed: u64,
    pub n_trees: Option<usize>,
    pub log_evidence: Option<f64>,
    /// Evidence minus the Monte Carlo ELBO of the final policy.
    pub kl: Option<f64>,
    pub std_error: Option<f64>,
    /// KL by enumerating the final policy over every tree.
    pub exact_kl: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub name: String,
    pub rows: Vec<ScalingRow>,
    /// Spearman correlation of size against estimated KL over completed sizes.
    pub spearman: Option<f64>,
}

fn run_size(spec: &ExperimentSpec, size: usize, budget: usize) -> Result<ScalingRow, HarnessError> {
    let seed = derive_seed(spec.seed, size as u64);
    let mut row = ScalingRow {
        size,
        status: SizeStatus::Ok,
        seed,
        n_trees: None,
        log_evidence: None,
        kl: None,
        std_error: None,
        exact_kl: None,
        error: None,
    };
    let problem = spec.problem_at(size)?;
    if problem.pm.n_expr > budget as f64 {
        row.status = SizeStatus::Skipped;
        return Ok(row);
    }
    let trees = enumerate_trees(&problem.lib, size, Some(&problem.cs));
    row.n_trees = Some(trees.len());
    let space = DiscreteSpace::new(&problem.lib, trees, &problem.data, &problem.lm, &problem.pm)?;
    row.log_evidence = Some(space.log_evidence);
    let cfg = spec.train_config(seed);
    let outcome = match train(&cfg, &problem, Some(space.log_evidence)) {
        Ok(o) => o,
        Err(e) => {
            row.status = SizeStatus::Failed;
            row.error = Some(e.to_string());
            return Ok(row);
        }
    };
    let est = estimate_elbo(&outcome.params, &problem, spec.oracle.elbo_samples, seed)?;
    row.kl = Some(kl_divergence(space.log_evidence, est.mean));
    row.std_error = Some(est.std_error);
    let q = space.policy_probs(&outcome.params, &problem.lib, &problem.cs)?;
    row.exact_kl = Some(space.kl(&q));
    info!("{} size {size}: {} trees, KL {:.3e}", spec.name, space.trees.len(), row.kl.unwrap_or(f64::NAN));
    Ok(row)
}

/// Trains one run per size and reports the final KL at each.
pub fn run_scaling_sweep(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ScalingReport, HarnessError> {
    spec.validate()?;
    let settings = spec
        .scaling
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid(format!("{} has no [scaling] section", spec.name)))?;
    let rows: Vec<ScalingRow> = settings
        .max_sizes
        .par_iter()
        .map(|&size| run_size(spec, size, settings.tree_budget))
        .collect::<Result<_, _>>()?;
    let done: Vec<&ScalingRow> = rows.iter().filter(|r| r.status == SizeStatus::Ok).collect();
    let sizes: Vec<f64> = done.iter().map(|r| r.size as f64).collect();
    let kls: Vec<f64> = done.iter().map(|r| r.kl.expect("completed")).collect();
    let report = ScalingReport { name: spec.name.clone(), spearman: spearman(&sizes, &kls), rows };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(io_err(o))?;
        write_scaling_csv(&report, &o.join("scaling.csv"))?;
        write_json(&report, &o.join("report.json"))?;
        fs::write(o.join("experiment.toml"), spec.to_toml()).map_err(io_err(o))?;
    }
    Ok(report)
}

fn write_scaling_csv(report: &ScalingReport, path: &Path) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Io { path: path.display().to_string(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["size", "status", "trees", "kl", "std_error", "exact_kl"]).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        let status = match r.status {
            SizeStatus::Ok => "ok",
            SizeStatus::Skipped => "skipped",
            SizeStatus::Failed => "failed",
        };
        w.write_record([
            r.size.to_string(),
            status.to_string(),
            r.n_trees.map(|n| n.to_string()).unwrap_or_default(),
            opt(r.kl),
            opt(r.std_error),
            opt(r.exact_kl),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::profile;

    #[test]
    fn size_one_is_exact_and_large_sizes_skip() {
        let mut spec = profile("scaling-fast").unwrap();
        spec.hyperparameters.epochs = 3;
        spec.hyperparameters.samples_per_epoch = 10;
        spec.oracle.elbo_samples = 100;
        spec.scaling = Some(crate::config::ScalingSettings { max_sizes: vec![1, 12], tree_budget: 1000 });
        let dir = tempfile::tempdir().unwrap();
        let report = run_scaling_sweep(&spec, Some(dir.path())).unwrap();
        let one = &report.rows[0];
        assert_eq!(one.status, SizeStatus::Ok);
        assert_eq!(one.n_trees, Some(1));
        assert_eq!(one.exact_kl, Some(0.0));
        assert!(one.kl.unwrap().abs() < 1e-9);
        assert_eq!(report.rows[1].status, SizeStatus::Skipped);
        assert!(dir.path().join("scaling.csv").exists());
    }

    #[test]
    fn requires_a_scaling_section() {
        assert!(run_scaling_sweep(&profile("no-const-quad-fast").unwrap(), None).is_err());
    }
}
