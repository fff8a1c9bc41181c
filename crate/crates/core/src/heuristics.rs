//! Relax-and-fix for lot sizing and LP-guided adaptive fixing for the
//! knapsack family.

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::instances::{KnapsackInstance, LotSizingInstance};
use crate::milp::{build_mclsp, build_msmk, mclsp_y, msmk_x, msmk_y, MilpModel, Solution, SolveStatus, VarKind};
use crate::solver::{MipSolver, SolverError, SolverOptions};

const INT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeuristicStatus {
    Feasible,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicResult {
    pub status: HeuristicStatus,
    pub solution: Solution,
    pub wall_time: f64,
    /// Subproblems solved.
    pub iterations: usize,
}

/// Window width `⌈T/10⌉` and fixing step `⌈T/20⌉`, both at least 1.
pub fn rf_window(periods: usize) -> (usize, usize) {
    (periods.div_ceil(10).max(1), periods.div_ceil(20).max(1))
}

fn failure(start: Instant, iterations: usize) -> HeuristicResult {
    HeuristicResult {
        status: HeuristicStatus::Failure,
        solution: Solution::without_values(SolveStatus::Infeasible),
        wall_time: start.elapsed().as_secs_f64(),
        iterations,
    }
}

/// Accepts `values` only if they pass a full feasibility check of `model`.
fn finish(model: &MilpModel, values: Vec<f64>, start: Instant, iterations: usize) -> HeuristicResult {
    if !model.is_feasible(&values) {
        return failure(start, iterations);
    }
    HeuristicResult {
        status: HeuristicStatus::Feasible,
        solution: Solution {
            objective: model.objective_value(&values),
            values,
            status: SolveStatus::Feasible,
        },
        wall_time: start.elapsed().as_secs_f64(),
        iterations,
    }
}

/// Rolling-horizon relax-and-fix. Setups before the window are frozen,
/// setups inside are integral and later ones are relaxed to `[0, 1]`. No
/// backtracking: an infeasible window ends the run with `Failure`.
pub fn relax_and_fix(
    inst: &LotSizingInstance,
    solver: &dyn MipSolver,
    options: &SolverOptions,
) -> Result<HeuristicResult, SolverError> {
    let start = Instant::now();
    let original = build_mclsp(inst);
    let (ni, nt) = (inst.items, inst.periods);
    let (w, k) = rf_window(nt);
    let mut work = original.clone();
    let mut from = 0;
    let mut iterations = 0;
    loop {
        let end = (from + w).min(nt);
        for i in 0..ni {
            for t in from..nt {
                work.variables[mclsp_y(nt, i, t)].kind = if t < end {
                    VarKind::Binary
                } else {
                    VarKind::Continuous
                };
            }
        }
        let res = solver.solve(&work, options)?;
        iterations += 1;
        if !res.solution.has_values() {
            return Ok(failure(start, iterations));
        }
        if end == nt {
            return Ok(finish(&original, res.solution.values, start, iterations));
        }
        let fix_to = (from + k).min(end);
        for i in 0..ni {
            for t in from..fix_to {
                let v = &mut work.variables[mclsp_y(nt, i, t)];
                let x = res.solution.values[mclsp_y(nt, i, t)].round();
                v.lower = x;
                v.upper = x;
            }
        }
        from = fix_to;
    }
}

/// Progressive LP rounding. Each round solves the LP relaxation with the
/// current fixings, fixes every integral `x`, or, when none is integral, the
/// largest fractional `x` to 1 if the LP stays feasible and to 0 otherwise.
/// Stability indicators are recomputed from the final `x`.
pub fn adaptive_fixing(
    inst: &KnapsackInstance,
    solver: &dyn MipSolver,
    options: &SolverOptions,
) -> Result<HeuristicResult, SolverError> {
    let start = Instant::now();
    let original = build_msmk(inst);
    let (ni, nt) = (inst.items, inst.periods);
    let mut lp = original.clone();
    for v in &mut lp.variables {
        v.kind = VarKind::Continuous;
    }
    let mut free: Vec<usize> = (0..ni * nt).collect();
    let mut iterations = 0;
    let relax = |lp: &MilpModel, iterations: &mut usize| -> Result<Option<Vec<f64>>, SolverError> {
        *iterations += 1;
        let r = solver.solve(lp, options)?;
        Ok(r.solution.has_values().then_some(r.solution.values))
    };
    while !free.is_empty() {
        let Some(x) = relax(&lp, &mut iterations)? else {
            return Ok(failure(start, iterations));
        };
        let mut fixed_any = false;
        free.retain(|&v| {
            let val = x[v];
            let target = if val >= 1.0 - INT_TOL {
                1.0
            } else if val <= INT_TOL {
                0.0
            } else {
                return true;
            };
            lp.variables[v].lower = target;
            lp.variables[v].upper = target;
            fixed_any = true;
            false
        });
        if fixed_any || free.is_empty() {
            continue;
        }
        // all remaining free values are fractional
        let &pick = free
            .iter()
            .max_by(|&&a, &&b| x[a].total_cmp(&x[b]).then(b.cmp(&a)))
            .expect("free is non-empty");
        lp.variables[pick].lower = 1.0;
        lp.variables[pick].upper = 1.0;
        if relax(&lp, &mut iterations)?.is_none() {
            lp.variables[pick].lower = 0.0;
            lp.variables[pick].upper = 0.0;
        }
        free.retain(|&v| v != pick);
    }
    let mut values = vec![0.0; original.num_vars()];
    for v in 0..ni * nt {
        values[v] = lp.variables[v].lower;
    }
    for i in 0..ni {
        for t in 0..nt.saturating_sub(1) {
            let same = values[msmk_x(nt, i, t)] == values[msmk_x(nt, i, t + 1)];
            values[msmk_y(ni, nt, i, t)] = if same { 1.0 } else { 0.0 };
        }
    }
    Ok(finish(&original, values, start, iterations))
}
