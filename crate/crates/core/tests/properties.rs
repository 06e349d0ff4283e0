use dvisr_core::bayes::{LikelihoodModel, PriorMode, PriorModel};
use dvisr_core::expr::{
    completion_deficit, count_trees, enumerate_trees, ConstantPosition, ConstraintSet, Dataset, Expression, PrefixState,
    TokenLibrary,
};
use dvisr_core::nn::NetworkParams;
use dvisr_core::oracle::{exact_posterior, DiscreteSpace};
use dvisr_core::policy::{net_shape, rollout_log_prob, sample_expression, stream_rng};
use proptest::prelude::*;

const LIBRARIES: [&[&str]; 4] = [
    &["+", "*", "sin", "x_0"],
    &["+", "*", "cos", "c", "x_0"],
    &["+", "-", "*", "/", "sin", "cos", "exp", "log", "c", "x_0", "x_1"],
    &["exp", "log", "x_0"],
];

fn constraint_set() -> impl Strategy<Value = ConstraintSet> {
    (1usize..9, any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(max, inv, trig, allc, first)| {
        ConstraintSet {
            max_tokens: max,
            forbid_inverse_child: inv,
            forbid_nested_trig: trig,
            forbid_all_constant_children: allc,
            constant_child_position: if first { ConstantPosition::FirstChildOnly } else { ConstantPosition::Off },
        }
    })
}

fn check_constraints(lib: &TokenLibrary, cs: &ConstraintSet, tokens: &[usize]) {
    // Replaying the prefix must never hit a masked token.
    let mut state = PrefixState::new();
    for &t in tokens {
        assert!(state.allows(lib, cs, t));
        state.push(lib, t, 0.0);
    }
    assert!(state.is_complete());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollouts_complete_within_budget(lib_ix in 0usize..4, cs in constraint_set(), hidden in 1usize..12, seed in any::<u64>()) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[lib_ix]).unwrap();
        let params = NetworkParams::init_uniform(net_shape(&lib, hidden), 1.0, &mut stream_rng(seed, 0, 0));
        // Some combinations admit no complete tree; the sampler must say so.
        let feasible = !enumerate_trees(&lib, cs.max_tokens, Some(&cs)).is_empty();
        for i in 0..160u64 {
            match sample_expression(&params, &lib, &cs, &mut stream_rng(seed, 1, i)) {
                Ok(r) => {
                    prop_assert!(r.expression.len() <= cs.max_tokens);
                    prop_assert_eq!(completion_deficit(&lib, &r.expression.tokens), Some(0));
                    prop_assert_eq!(r.expression.constants.len(), r.expression.skeleton().n_constants(&lib));
                    check_constraints(&lib, &cs, &r.expression.tokens);
                    let lq = rollout_log_prob(&params, &lib, &cs, &r.expression).unwrap();
                    prop_assert!((lq - r.log_q).abs() <= 1e-9 * (1.0 + lq.abs()));
                }
                Err(_) => prop_assert!(!feasible),
            }
        }
    }

    #[test]
    fn constrained_trees_are_a_subset(lib_ix in 0usize..2, cs in constraint_set()) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[lib_ix]).unwrap();
        let max = cs.max_tokens.min(6);
        let cs = ConstraintSet { max_tokens: max, ..cs };
        let all = enumerate_trees(&lib, max, None);
        prop_assert_eq!(all.len() as u128, count_trees(&lib, max));
        let constrained = enumerate_trees(&lib, max, Some(&cs));
        for t in &constrained {
            prop_assert!(all.contains(t));
            check_constraints(&lib, &cs, t.tokens());
        }
    }

    #[test]
    fn policy_sums_to_one_over_the_space(cs in constraint_set(), seed in any::<u64>()) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[0]).unwrap();
        let cs = ConstraintSet { max_tokens: cs.max_tokens.min(6), ..cs };
        let params = NetworkParams::init_uniform(net_shape(&lib, 6), 1.5, &mut stream_rng(seed, 0, 0));
        let total: f64 = enumerate_trees(&lib, cs.max_tokens, Some(&cs))
            .iter()
            .map(|t| rollout_log_prob(&params, &lib, &cs, &t.with_constants(vec![])).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn elbo_never_exceeds_evidence(weights in prop::collection::vec(1e-9f64..1.0, 4), sigma in 0.05f64..20.0) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[0]).unwrap();
        let cs = ConstraintSet { forbid_nested_trig: true, ..ConstraintSet::size_only(3) };
        let data = Dataset::univariate(&(0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>(), |x| x * x);
        let pm = PriorModel::for_library(&lib, 3, PriorMode::UniformOverTrees).unwrap();
        let space = DiscreteSpace::new(&lib, enumerate_trees(&lib, 3, Some(&cs)), &data, &LikelihoodModel::new(sigma).unwrap(), &pm).unwrap();
        let s: f64 = weights.iter().sum();
        let q: Vec<f64> = weights.iter().map(|w| w / s).collect();
        prop_assert!(space.elbo(&q) <= space.log_evidence + 1e-12);
        prop_assert!(space.kl(&q) >= -1e-12);
    }

    #[test]
    fn posterior_ignores_tree_count(factor in 1.0f64..1e6) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[0]).unwrap();
        let cs = ConstraintSet { forbid_nested_trig: true, ..ConstraintSet::size_only(4) };
        let trees = enumerate_trees(&lib, 4, Some(&cs));
        let data = Dataset::univariate(&[0.0, 0.3, 0.6, 0.9], |x| x.sin());
        let lm = LikelihoodModel::new(1.0).unwrap();
        let pm = PriorModel::for_library(&lib, 4, PriorMode::UniformOverTrees).unwrap();
        let scaled = PriorModel { n_expr: pm.n_expr * factor, ..pm };
        let a = exact_posterior(&lib, &trees, &data, &lm, &pm, None).unwrap();
        let b = exact_posterior(&lib, &trees, &data, &lm, &scaled, None).unwrap();
        prop_assert!((b.log_evidence.unwrap() - a.log_evidence.unwrap() + factor.ln()).abs() < 1e-9);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            prop_assert!((ra.probability - rb.probability).abs() < 1e-12);
        }
    }

    #[test]
    fn expression_records_roundtrip(seed in any::<u64>()) {
        let lib = TokenLibrary::from_symbols(LIBRARIES[2]).unwrap();
        let cs = ConstraintSet::size_only(7);
        let params = NetworkParams::init_uniform(net_shape(&lib, 5), 0.7, &mut stream_rng(seed, 0, 0));
        let r = sample_expression(&params, &lib, &cs, &mut stream_rng(seed, 2, 2)).unwrap();
        let json = serde_json::to_string(&r.expression.to_record(&lib)).unwrap();
        let back = Expression::from_record(&lib, &serde_json::from_str(&json).unwrap()).unwrap();
        prop_assert_eq!(back, r.expression);
    }
}

#[test]
fn ten_thousand_rollouts_respect_the_constraints() {
    let lib = TokenLibrary::from_symbols(LIBRARIES[2]).unwrap();
    let cs = ConstraintSet {
        max_tokens: 10,
        forbid_inverse_child: true,
        forbid_nested_trig: true,
        forbid_all_constant_children: true,
        constant_child_position: ConstantPosition::FirstChildOnly,
    };
    let params = NetworkParams::init_uniform(net_shape(&lib, 16), 0.5, &mut stream_rng(1, 0, 0));
    for i in 0..10_000 {
        let r = sample_expression(&params, &lib, &cs, &mut stream_rng(1, 1, i)).unwrap();
        assert!(r.expression.len() <= 10);
        check_constraints(&lib, &cs, &r.expression.tokens);
    }
}
