use std::io::stdout;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dvisr_core::oracle::TableSource;
use dvisr_harness::experiment::{oracle, render_report};
use dvisr_harness::tables::{compare_tables, read_table, write_table};
use dvisr_harness::{load_spec, profiles, run_experiment, run_scaling_sweep, ExperimentSpec};

#[derive(Parser)]
#[command(name = "dvisr", version, about = "Variational symbolic regression experiments")]
struct Cli {
    /// Directory under which each experiment writes its outputs.
    #[arg(long, env = "DVISR_OUTPUT_ROOT", default_value = "results", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an experiment's runs and compare against the exact posterior.
    Run {
        /// Built-in profile name or path to a TOML spec.
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// KL divergence against maximum expression size.
    Scaling {
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact posterior only.
    Oracle { spec: String },
    /// Print a built-in profile as TOML.
    DumpProfile {
        /// Omit to list the available profiles.
        name: Option<String>,
        /// Print hyperparameters as table rows instead.
        #[arg(long)]
        table: bool,
    },
    /// Compare two posterior tables (CSV or JSON).
    Compare {
        exact: PathBuf,
        variational: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn resolve(spec: &str, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut s = load_spec(spec).with_context(|| format!("loading {spec}"))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn out_dir(root: &Path, spec: &ExperimentSpec) -> PathBuf {
    spec.output_dir.clone().unwrap_or_else(|| root.join(&spec.name))
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { spec, seed, runs } => {
            let mut s = resolve(&spec, seed)?;
            if let Some(r) = runs {
                s.hyperparameters.runs = r;
            }
            let out = out_dir(&cli.output_root, &s);
            let report = run_experiment(&s, Some(&out))?;
            render_report(&report, &mut stdout())?;
            println!("outputs in {}", out.display());
        }
        Command::Scaling { spec, seed } => {
            let s = resolve(&spec, seed)?;
            let out = out_dir(&cli.output_root, &s);
            let report = run_scaling_sweep(&s, Some(&out))?;
            println!("{:>4}  {:>8}  {:>12}  {:>10}  {:>12}", "size", "trees", "KL", "std err", "exact KL");
            for r in &report.rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
                let trees = r.n_trees.map_or("-".to_string(), |n| n.to_string());
                println!("{:>4}  {:>8}  {:>12}  {:>10}  {:>12}  {:?}", r.size, trees, f(r.kl), f(r.std_error), f(r.exact_kl), r.status);
            }
            if let Some(rho) = report.spearman {
                println!("spearman(size, KL) = {rho:.3}");
            }
            println!("outputs in {}", out.display());
        }
        Command::Oracle { spec } => {
            let s = resolve(&spec, None)?;
            let problem = s.problem()?;
            let (table, _) = oracle(&s, &problem)?;
            let out = out_dir(&cli.output_root, &s);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_table(&table, &out, "posterior_exact")?;
            println!("log evidence {:.12}", table.log_evidence.unwrap_or(f64::NAN));
            for r in &table.rows {
                println!("{:>14}  {:.8}", r.display, r.probability);
            }
        }
        Command::DumpProfile { name: None, .. } => {
            for n in profiles::PROFILE_NAMES {
                println!("{n}");
            }
        }
        Command::DumpProfile { name: Some(name), table } => {
            let s = profiles::profile(&name).with_context(|| format!("no built-in profile {name:?}"))?;
            if table {
                for (row, value) in s.hyperparameters.table_rows() {
                    println!("{row} = {value}");
                }
            } else {
                print!("{}", s.to_toml());
            }
        }
        Command::Compare { exact, variational, tol } => {
            let a = read_table(&exact, TableSource::Exact)?;
            let b = read_table(&variational, TableSource::Variational)?;
            let c = compare_tables(&a, &b, tol)?;
            for r in &c.rows {
                println!("{:>14}  {:.8}  {:.8}  {:.3e}", r.display, r.first, r.second, r.abs_delta);
            }
            println!("max |delta| {:.3e}  tol {:.1e}  {}", c.max_abs_delta, c.tol, if c.pass { "PASS" } else { "FAIL" });
            if !c.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
