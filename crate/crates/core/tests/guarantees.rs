use proptest::prelude::*;

use smhe_core::config::Config;
use smhe_core::harness::{self, Experiment, Scenario};
use smhe_core::mhe::{CandidateMode, IterationBudget};

const CONFIG: &str = include_str!("../../../configs/reactor_benchmark.json");

fn setup(a: f64, horizon: usize, mode: CandidateMode, budget: IterationBudget) -> (Experiment, Scenario) {
    let cfg = Config::parse(CONFIG).unwrap();
    let mut exp = cfg.experiment().unwrap();
    exp.estimator.w = cfg.prior_weight(a).unwrap();
    exp.estimator.horizon = horizon;
    exp.estimator.candidate_mode = mode;
    exp.estimator.budget = budget;
    (exp, cfg.scenario().unwrap())
}

#[test]
fn csv_round_trip_preserves_verification() {
    let (exp, sc) = setup(1e-3, 128, CandidateMode::Simple, IterationBudget::Fixed(1));
    let trace = harness::run_closed_loop(&exp, &sc).unwrap();
    let mut buf = Vec::new();
    harness::write_trace_csv(&trace, &mut buf).unwrap();
    let back = harness::read_trace_csv(buf.as_slice(), sc.xhat0.clone()).unwrap();
    assert_eq!(back.xhat, trace.xhat);
    assert_eq!(back.cost, trace.cost);
    assert_eq!(back.horizon, trace.horizon);
    assert_eq!(
        harness::verify_trace(&exp, &back).unwrap(),
        harness::verify_trace(&exp, &trace).unwrap()
    );
    let mut again = Vec::new();
    harness::write_trace_csv(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn short_sweep_has_no_violations() {
    for (a, m, mode) in [
        (1e2, 16, CandidateMode::Simple),
        (1e-3, 128, CandidateMode::Simple),
        (1e-3, 3, CandidateMode::Reinit { depth: 178 }),
    ] {
        let (exp, sc) = setup(a, m, mode, IterationBudget::Fixed(1));
        let s = harness::run_batch(&exp, &sc.with_seed(100), 3).unwrap();
        assert_eq!(s.replicates, 3);
        assert_eq!(
            (s.theorem1_violations, s.lemma1_violations, s.cost_decrease_violations),
            (0, 0, 0),
            "a = {a}, M = {m}"
        );
    }
}

#[test]
fn batch_rows_follow_seeds() {
    let (exp, mut sc) = setup(1e2, 16, CandidateMode::Simple, IterationBudget::Fixed(0));
    sc.t_sim = 40;
    let s = harness::run_batch(&exp, &sc.with_seed(9), 4).unwrap();
    let seeds: Vec<u64> = s.rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![9, 10, 11, 12]);
    let single = harness::run_closed_loop(&exp, &sc.with_seed(11)).unwrap();
    assert_eq!(s.rows[2].sse, harness::sse(&single));
}

#[test]
fn optimized_cost_never_exceeds_candidate_cost() {
    let (exp, sc) = setup(1e-3, 128, CandidateMode::Simple, IterationBudget::Fixed(1));
    let t1 = harness::run_closed_loop(&exp, &sc).unwrap();
    for t in 0..t1.len() {
        assert!(t1.cost[t] <= t1.candidate_cost[t], "t = {t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimates_stay_feasible_and_respect_the_candidate_cost(
        seed in 0u64..10_000,
        iters in 0usize..4,
        horizon in 1usize..20,
    ) {
        let (exp, mut sc) = setup(1e2, horizon, CandidateMode::Simple, IterationBudget::Fixed(iters));
        sc.t_sim = 60;
        let trace = harness::run_closed_loop(&exp, &sc.with_seed(seed)).unwrap();
        prop_assert_eq!(trace.len(), 61);
        for t in 0..trace.len() {
            prop_assert!(exp.observer.contains(&trace.xhat[t]));
            prop_assert!(trace.cost[t] <= trace.candidate_cost[t]);
            prop_assert_eq!(trace.horizon[t], t.min(horizon));
        }
        prop_assert_eq!(harness::check_measurements(&trace, exp.system.as_ref(), 0.0).unwrap(), Vec::<usize>::new());
        prop_assert_eq!(harness::verify_trace(&exp, &trace).unwrap().total(), 0);
    }
}
