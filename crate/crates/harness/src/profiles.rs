//! Built-in experiment profiles.

use dvisr_core::expr::ConstantPosition;

use crate::config::{
    ConstraintFlags, DataGenerator, ExperimentSpec, Hyperparameters, OracleSettings, ScalingSettings, EWMA, GRU, MEAN,
    PLATEAU, RMSPROP,
};

pub const PROFILE_NAMES: [&str; 14] = [
    "no-const-quad",
    "no-const-lin",
    "no-const-const",
    "const-quad",
    "const-lin",
    "const-const",
    "scaling",
    "no-const-quad-fast",
    "no-const-lin-fast",
    "no-const-const-fast",
    "const-quad-fast",
    "const-lin-fast",
    "const-const-fast",
    "scaling-fast",
];

fn base_hyperparameters() -> Hyperparameters {
    Hyperparameters {
        epochs: 250,
        samples_per_epoch: 100,
        runs: 10,
        max_number_of_tokens_per_expression: Some(3),
        rnn_type: GRU.into(),
        number_of_hidden_layers: 1,
        hidden_layer_size: 32,
        optimiser: RMSPROP.into(),
        rmsprop_learning_rate: 1e-2,
        rmsprop_alpha: 0.9,
        rmsprop_epsilon: 1e-6,
        learning_rate_annealer: PLATEAU.into(),
        lra_metric: "-ELBO".into(),
        lra_mode: "min".into(),
        lra_factor: 0.5,
        lra_patience: 15,
        lra_min_lr: 1e-6,
        baseline: EWMA.into(),
        baseline_ewma_alpha: Some(0.25),
        likelihood_standard_deviation: 1.0,
        c_prior_mean: None,
        c_prior_standard_deviation: None,
    }
}

fn no_const(name: &str, data: DataGenerator) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        data,
        library: ["+", "*", "sin", "x_0"].map(String::from).to_vec(),
        seed: 0,
        init_scale: None,
        checkpoint_every: None,
        output_dir: None,
        constraints: ConstraintFlags {
            forbid_inverse_child: false,
            forbid_nested_trig: true,
            forbid_all_constant_children: false,
            constant_child_position: ConstantPosition::Off,
        },
        hyperparameters: base_hyperparameters(),
        oracle: OracleSettings::default(),
        scaling: None,
    }
}

fn with_const(name: &str, data: DataGenerator) -> ExperimentSpec {
    ExperimentSpec {
        library: ["+", "*", "cos", "c", "x_0"].map(String::from).to_vec(),
        constraints: ConstraintFlags {
            forbid_inverse_child: true,
            forbid_nested_trig: true,
            forbid_all_constant_children: true,
            constant_child_position: ConstantPosition::FirstChildOnly,
        },
        hyperparameters: Hyperparameters {
            epochs: 1000,
            samples_per_epoch: 500,
            hidden_layer_size: 64,
            rmsprop_learning_rate: 5e-3,
            lra_patience: 25,
            baseline: MEAN.into(),
            baseline_ewma_alpha: None,
            c_prior_mean: Some(0.0),
            c_prior_standard_deviation: Some(10.0),
            ..base_hyperparameters()
        },
        oracle: OracleSettings { compare_tol: 1e-3, ..OracleSettings::default() },
        ..no_const(name, data)
    }
}

fn scaling() -> ExperimentSpec {
    ExperimentSpec {
        hyperparameters: Hyperparameters {
            epochs: 2000,
            samples_per_epoch: 1000,
            runs: 1,
            max_number_of_tokens_per_expression: None,
            hidden_layer_size: 64,
            rmsprop_learning_rate: 5e-3,
            lra_patience: 50,
            lra_min_lr: 5e-6,
            ..base_hyperparameters()
        },
        scaling: Some(ScalingSettings { max_sizes: (1..=12).collect(), tree_budget: 2_000_000 }),
        ..no_const("scaling", DataGenerator::Quadratic)
    }
}

fn fast(mut spec: ExperimentSpec) -> ExperimentSpec {
    spec.name.push_str("-fast");
    let h = &mut spec.hyperparameters;
    if let Some(s) = spec.scaling.as_mut() {
        h.epochs = 200;
        h.samples_per_epoch = 200;
        s.max_sizes = (1..=8).collect();
    } else if h.c_prior_mean.is_some() {
        h.epochs = 200;
        h.samples_per_epoch = 200;
        h.runs = 3;
        spec.oracle.elbo_samples = 10_000;
    } else {
        h.epochs = 100;
        h.runs = 3;
    }
    spec
}

/// Looks up a built-in profile by name.
pub fn profile(name: &str) -> Option<ExperimentSpec> {
    let (base, is_fast) = match name.strip_suffix("-fast") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let spec = match base {
        "no-const-quad" => no_const(base, DataGenerator::Quadratic),
        "no-const-lin" => no_const(base, DataGenerator::Linear),
        "no-const-const" => no_const(base, DataGenerator::Constant),
        "const-quad" => with_const(base, DataGenerator::Quadratic),
        "const-lin" => with_const(base, DataGenerator::Linear),
        "const-const" => with_const(base, DataGenerator::Constant),
        "scaling" => scaling(),
        _ => return None,
    };
    Some(if is_fast { fast(spec) } else { spec })
}
