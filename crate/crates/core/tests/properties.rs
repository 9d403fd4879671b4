//! Randomised invariants across modules.

use diffsim::algorithms::{
    evaluate_gradients, run_methods, step, AlgorithmConfig, Method, NetworkState, RunOptions,
    SampleBlock,
};
use diffsim::linalg::Matrix;
use diffsim::metrics::{aggregate, steady_state};
use diffsim::problems::{make_ls_problem, LsSpec};
use diffsim::runner::ExperimentConfig;
use diffsim::topology::{build_graph, metropolis_weights, TopologyKind, STOCHASTIC_TOL};
use proptest::prelude::*;

fn kind_and_size() -> impl Strategy<Value = (TopologyKind, usize)> {
    prop_oneof![
        (2usize..30).prop_map(|k| (TopologyKind::Line, k)),
        (3usize..30).prop_map(|k| (TopologyKind::Cycle, k)),
        (2usize..6).prop_map(|s| (TopologyKind::Grid, s * s)),
        (2usize..20).prop_map(|k| (TopologyKind::Complete, k)),
        (3usize..20).prop_map(|k| (TopologyKind::Random, k)),
    ]
}

fn network(kind: TopologyKind, k: usize, seed: u64) -> diffsim::topology::CombinationMatrix {
    let p = (kind == TopologyKind::Random).then_some(0.4);
    metropolis_weights(&build_graph(kind, k, p, Some(seed)).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metropolis_weights_are_symmetric_doubly_stochastic(
        (kind, k) in kind_and_size(),
        seed in any::<u64>(),
    ) {
        let c = network(kind, k, seed);
        let a = c.a();
        for i in 0..k {
            let row: f64 = (0..k).map(|j| a.get(i, j)).sum();
            prop_assert!((row - 1.0).abs() <= STOCHASTIC_TOL);
            for j in 0..k {
                prop_assert!(a.get(i, j) >= 0.0);
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        prop_assert!(c.lambda < 1.0);
        prop_assert!(c.lambda_prime >= c.lambda2 && c.lambda_prime < 1.0);
        prop_assert!((c.spectral_gap() - (1.0 - c.lambda)).abs() < 1e-15);
    }

    #[test]
    fn combining_preserves_the_agent_average(
        (kind, k) in kind_and_size(),
        seed in any::<u64>(),
        values in prop::collection::vec(-10.0f64..10.0, 30 * 3),
    ) {
        let c = network(kind, k, seed);
        let input = Matrix::from_vec(k, 3, values[..k * 3].to_vec()).unwrap();
        let mut out = Matrix::zeros(k, 3);
        c.a_sparse().combine_into(&input, &mut out);
        for col in 0..3 {
            let before: f64 = (0..k).map(|r| input[(r, col)]).sum::<f64>() / k as f64;
            let after: f64 = (0..k).map(|r| out[(r, col)]).sum::<f64>() / k as f64;
            prop_assert!((before - after).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_diffusion_forms_agree(
        (kind, k) in kind_and_size(),
        seed in any::<u64>(),
        mu in 0.001f64..0.05,
    ) {
        let p = make_ls_problem(&LsSpec { k, m: 3, seed, ..LsSpec::default() }).unwrap();
        let c = network(kind, k, seed);
        let mut a = NetworkState::new(Method::ExactDiffusion, k, 3);
        let mut b = NetworkState::new(Method::ExactDiffusionPd, k, 3);
        let mut samples = SampleBlock::new(&p);
        let (mut ga, mut gb) = (Matrix::zeros(k, 3), Matrix::zeros(k, 3));
        for i in 0..100 {
            samples.draw(&p, seed, 0, i);
            evaluate_gradients(&p, &a.w, &samples, &mut ga);
            evaluate_gradients(&p, &b.w, &samples, &mut gb);
            step(&mut a, &c, &ga, mu).unwrap();
            step(&mut b, &c, &gb, mu).unwrap();
            prop_assert!(a.w.max_abs_diff(&b.w) <= 1e-9);
        }
        prop_assert!(b.dual_consistency_error(&c).unwrap() <= 1e-9);
    }

    #[test]
    fn tracking_variable_conserves_the_gradient_average(
        (kind, k) in kind_and_size(),
        seed in any::<u64>(),
    ) {
        let p = make_ls_problem(&LsSpec { k, m: 2, seed, ..LsSpec::default() }).unwrap();
        let c = network(kind, k, seed);
        let mut s = NetworkState::new(Method::GradientTracking, k, 2);
        let mut samples = SampleBlock::new(&p);
        let mut g = Matrix::zeros(k, 2);
        for i in 0..50 {
            samples.draw(&p, seed, 1, i);
            evaluate_gradients(&p, &s.w, &samples, &mut g);
            step(&mut s, &c, &g, 0.01).unwrap();
            let (y, gp) = (s.y_track.as_ref().unwrap(), s.g_prev.as_ref().unwrap());
            for col in 0..2 {
                let my: f64 = (0..k).map(|r| y[(r, col)]).sum::<f64>() / k as f64;
                let mg: f64 = (0..k).map(|r| gp[(r, col)]).sum::<f64>() / k as f64;
                prop_assert!((my - mg).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_agent_methods_equal_sgd(seed in any::<u64>(), mu in 0.001f64..0.1) {
        let p = make_ls_problem(&LsSpec { k: 1, m: 3, seed, ..LsSpec::default() }).unwrap();
        let c = metropolis_weights(&build_graph(TopologyKind::Complete, 1, None, None).unwrap()).unwrap();
        let configs: Vec<AlgorithmConfig> = Method::ALL
            .iter()
            .map(|&method| AlgorithmConfig { method, mu, iterations: 200 })
            .collect();
        let traces = run_methods(&configs, &p, &c, seed, 0, RunOptions::default()).unwrap();
        let reference = &traces.last().unwrap().msd;
        for t in &traces {
            prop_assert_eq!(&t.msd, reference);
        }
    }

    #[test]
    fn steady_state_of_a_constant_series_is_that_constant(
        level in 1e-6f64..1e3,
        runs in 1usize..5,
        len in 20usize..400,
    ) {
        let t = aggregate(&vec![vec![level; len]; runs]).unwrap();
        let s = steady_state(&t, 0.1).unwrap();
        prop_assert!((s.mean - level).abs() <= 1e-12 * level);
        prop_assert!(!s.nonstationary);
    }

    #[test]
    fn normalised_config_round_trips(
        k in 1usize..40,
        mu in 1e-5f64..0.5,
        runs in 1usize..100,
        seed in any::<u64>(),
        lo in 0.1f64..2.0,
        width in 0.0f64..2.0,
    ) {
        let text = format!(
            "topology.kind = line\ntopology.K = {k}\nproblem.family = ls\n\
             problem.lambda_range = {lo}, {}\nmethods = d, ed, gt\nmu = {mu}\n\
             iterations = 10\nruns = {runs}\nseed = {seed}\n",
            lo + width
        );
        let c: ExperimentConfig = text.parse().unwrap();
        let again: ExperimentConfig = c.normalized().parse().unwrap();
        prop_assert_eq!(c.digest(), again.digest());
        prop_assert_eq!(c, again);
    }
}
