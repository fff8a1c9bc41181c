use predopt::instances::{gen_mclsp, gen_msmk, GenConfig, KnapsackInstance, LotSizingInstance};
use predopt::milp::{build_mclsp, build_msmk, fix_variables, mclsp_y, MilpModel, ObjSense, RowSense, SolveStatus, VarKind};
use predopt::solver::{brute_force, solve_mip, BundledSolver, MipSolver, SolverOptions};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()))
}

fn tiny_mclsp() -> LotSizingInstance {
    LotSizingInstance {
        items: 1,
        periods: 2,
        seed: None,
        demand: vec![vec![1, 1]],
        prod_cost: vec![vec![1, 1]],
        setup_cost: vec![vec![10, 10]],
        hold_cost: vec![vec![1, 1]],
        capacity: vec![2, 2],
    }
}

fn tiny_msmk() -> KnapsackInstance {
    KnapsackInstance {
        items: 1,
        periods: 2,
        resources: 1,
        seed: None,
        profit: vec![vec![5, 5]],
        bonus: vec![vec![3]],
        weight: vec![vec![vec![1, 1]]],
        capacity: vec![vec![1, 1]],
    }
}

#[test]
fn binary_knapsack() {
    let mut m = MilpModel::new(ObjSense::Maximize);
    let a = m.add_var("x1", VarKind::Binary, 0.0, 1.0);
    let b = m.add_var("x2", VarKind::Binary, 0.0, 1.0);
    m.objective = vec![(a, 5.0), (b, 4.0)];
    m.add_row(vec![(a, 2.0), (b, 3.0)], RowSense::Le, 4.0);
    let r = solve_mip(&m, &SolverOptions::default()).unwrap();
    assert_eq!(r.solution.status, SolveStatus::Optimal);
    assert!(close(r.solution.objective, 5.0));
    assert_eq!(r.solution.values, vec![1.0, 0.0]);
}

#[test]
fn tiny_lot_sizing() {
    let m = build_mclsp(&tiny_mclsp());
    let r = solve_mip(&m, &SolverOptions::default()).unwrap();
    assert_eq!(r.solution.status, SolveStatus::Optimal);
    assert!(close(r.solution.objective, 13.0), "{}", r.solution.objective);
    assert!(r.solution.bit(mclsp_y(2, 0, 0)));
    assert!(!r.solution.bit(mclsp_y(2, 0, 1)));
    let b = brute_force(&m, 25).unwrap();
    assert!(close(b.objective, 13.0));
}

#[test]
fn no_setups_is_infeasible() {
    let m = build_mclsp(&tiny_mclsp());
    let fixed = fix_variables(&m, &BTreeMap::from([(mclsp_y(2, 0, 0), false), (mclsp_y(2, 0, 1), false)])).unwrap();
    assert_eq!(solve_mip(&fixed, &SolverOptions::default()).unwrap().solution.status, SolveStatus::Infeasible);
    assert_eq!(brute_force(&fixed, 25).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn zero_demand_costs_nothing() {
    let inst = LotSizingInstance {
        demand: vec![vec![0, 0]],
        ..tiny_mclsp()
    };
    let r = solve_mip(&build_mclsp(&inst), &SolverOptions::default()).unwrap();
    assert!(close(r.solution.objective, 0.0));
}

#[test]
fn tiny_knapsack() {
    let m = build_msmk(&tiny_msmk());
    let r = solve_mip(&m, &SolverOptions::default()).unwrap();
    assert!(close(r.solution.objective, 13.0));
    assert!(close(brute_force(&m, 25).unwrap().objective, 13.0));
    // nothing fits: only the stability bonus remains
    let inst = KnapsackInstance {
        capacity: vec![vec![0, 0]],
        ..tiny_msmk()
    };
    let r = solve_mip(&build_msmk(&inst), &SolverOptions::default()).unwrap();
    assert!(close(r.solution.objective, 3.0));
}

#[test]
fn zero_time_limit() {
    let m = build_mclsp(&tiny_mclsp());
    let r = BundledSolver.solve(&m, &SolverOptions::default().with_time_limit(0.0)).unwrap();
    assert_eq!(r.solution.status, SolveStatus::TimeLimit);
}

#[test]
fn random_lot_sizing_matches_oracle() {
    let inst = gen_mclsp(&GenConfig::mclsp(11, 2, 3, 2.0)).unwrap();
    let m = build_mclsp(&inst);
    let a = solve_mip(&m, &SolverOptions::default()).unwrap();
    let b = brute_force(&m, 25).unwrap();
    assert!(close(a.solution.objective, b.objective), "{} vs {}", a.solution.objective, b.objective);
}

fn random_model(seed: u64, kind: u8) -> MilpModel {
    if kind == 0 {
        let periods = 2 + (seed % 5) as usize;
        let items = 1 + (seed / 5 % 3) as usize;
        let ratio = items as f64 * [1.3, 1.8, 3.0][(seed / 15 % 3) as usize];
        build_mclsp(&gen_mclsp(&GenConfig::mclsp(seed, items, periods, ratio)).unwrap())
    } else {
        let periods = 2 + (seed % 3) as usize;
        let items = 1 + (seed / 3 % 4) as usize;
        let resources = 1 + (seed / 12 % 2) as usize;
        build_msmk(&gen_msmk(&GenConfig::msmk(seed, items, periods, resources)).unwrap())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn branch_and_bound_matches_enumeration(seed in 0u64..10_000, kind in 0u8..2) {
        let m = random_model(seed, kind);
        prop_assume!(m.num_binaries() <= 20);
        let a = solve_mip(&m, &SolverOptions::default()).unwrap();
        let b = brute_force(&m, 25).unwrap();
        prop_assert_eq!(a.solution.status, b.status);
        if b.has_values() {
            prop_assert!(close(a.solution.objective, b.objective), "{} vs {}", a.solution.objective, b.objective);
            prop_assert!(m.is_feasible(&a.solution.values));
        }
    }

    #[test]
    fn root_bound_and_trace_are_consistent(seed in 0u64..10_000, kind in 0u8..2) {
        let m = random_model(seed, kind);
        let r = solve_mip(&m, &SolverOptions::default()).unwrap();
        let lp = predopt::solver::solve_lp(&m).unwrap();
        let better = |a: f64, b: f64| match m.sense {
            ObjSense::Minimize => a < b,
            ObjSense::Maximize => a > b,
        };
        if r.solution.has_values() {
            let slack: f64 = if m.sense == ObjSense::Minimize { -1e-6 } else { 1e-6 };
            let relaxed = lp.solution.objective * (1.0 + slack.signum() * 1e-9) + slack;
            prop_assert!(!better(r.solution.objective, relaxed));
        }
        for w in r.trace.windows(2) {
            prop_assert!(better(w[1].incumbent, w[0].incumbent));
        }
        let again = solve_mip(&m, &SolverOptions::default()).unwrap();
        prop_assert_eq!(again.solution, r.solution);
        prop_assert_eq!(again.nodes, r.nodes);
    }
}
