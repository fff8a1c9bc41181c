//! Bundled LP/MIP solver, brute-force oracle and the pluggable solver contract.
//!
//! The LP engine is a dense bounded-variable simplex ([`simplex`]); the MIP
//! driver is a best-bound branch-and-bound that plunges depth-first after each
//! branching and re-enters the tree through warm-started dual simplex.

mod bnb;
pub(crate) mod simplex;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::milp::{MilpError, MilpModel, RowSense, Solution, SolveStatus, VarKind, FEAS_TOL};
use simplex::{LpStatus, StandardForm, Tableau};

pub use bnb::solve_mip;

/// Default cap on free binaries for [`brute_force`].
pub const DEFAULT_MAX_BINARIES: usize = 25;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] MilpError),
    #[error("brute force refused: {found} free binaries exceed the limit of {max}")]
    TooManyBinaries { found: usize, max: usize },
    #[error("invalid solver options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    pub rel_gap_tol: f64,
    pub node_limit: Option<u64>,
    /// Reserved for randomized backends; the bundled solver is deterministic.
    pub seed: u64,
    /// Stop at the first incumbent (status `Feasible`).
    pub feasibility_only: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            time_limit: None,
            rel_gap_tol: 1e-6,
            node_limit: None,
            seed: 0,
            feasibility_only: false,
        }
    }
}

impl SolverOptions {
    pub fn with_time_limit(mut self, seconds: f64) -> Self {
        self.time_limit = Some(seconds);
        self
    }

    pub fn feasibility(mut self) -> Self {
        self.feasibility_only = true;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if let Some(t) = self.time_limit {
            if !(t >= 0.0) {
                return Err(SolverError::Options(format!("time limit {t} must be >= 0")));
            }
        }
        if !(self.rel_gap_tol >= 0.0) {
            return Err(SolverError::Options(format!("gap tolerance {} must be >= 0", self.rel_gap_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub elapsed: f64,
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub solution: Solution,
    pub best_bound: f64,
    pub nodes: u64,
    pub wall_time: f64,
    pub trace: Vec<TracePoint>,
}

impl SolveResult {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_trace_csv(&self.trace, out)
    }
}

/// Incumbent trace as `elapsed_s,incumbent` rows.
pub fn write_trace_csv<W: Write>(trace: &[TracePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "elapsed_s,incumbent")?;
    for p in trace {
        writeln!(out, "{},{}", p.elapsed, p.incumbent)?;
    }
    Ok(())
}

/// Contract every MIP backend implements.
pub trait MipSolver: Sync {
    fn name(&self) -> &str;
    fn solve(&self, model: &MilpModel, opts: &SolverOptions) -> Result<SolveResult, SolverError>;
}

/// The in-tree branch-and-bound solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct BundledSolver;

impl MipSolver for BundledSolver {
    fn name(&self) -> &str {
        "bundled-bnb"
    }

    fn solve(&self, model: &MilpModel, opts: &SolverOptions) -> Result<SolveResult, SolverError> {
        solve_mip(model, opts)
    }
}

/// Substitutes fixed columns, turns singleton rows into bounds, and returns
/// a reduced model with the map from reduced to original columns. `None`
/// means the substitution already proved infeasibility.
fn reduce_fixed(model: &MilpModel, lower: &[f64], upper: &[f64]) -> Option<(MilpModel, Vec<usize>, Vec<f64>)> {
    let n = model.num_vars();
    let mut lo = lower.to_vec();
    let mut up = upper.to_vec();
    let fixed = |j: usize, lo: &[f64], up: &[f64]| lo[j] == up[j];
    let mut rows = Vec::new();
    for c in &model.constraints {
        let mut rhs = c.rhs;
        let mut coefs = Vec::with_capacity(c.coefs.len());
        for &(v, a) in &c.coefs {
            if fixed(v, lower, upper) {
                rhs -= a * lower[v];
            } else if a != 0.0 {
                coefs.push((v, a));
            }
        }
        let tol = FEAS_TOL * (1.0 + c.rhs.abs());
        match coefs.len() {
            0 => {
                let ok = match c.sense {
                    RowSense::Le => 0.0 <= rhs + tol,
                    RowSense::Ge => 0.0 >= rhs - tol,
                    RowSense::Eq => rhs.abs() <= tol,
                };
                if !ok {
                    return None;
                }
            }
            1 => {
                let (v, a) = coefs[0];
                let bound = rhs / a;
                let (sets_upper, sets_lower) = match (c.sense, a > 0.0) {
                    (RowSense::Eq, _) => (true, true),
                    (RowSense::Le, true) | (RowSense::Ge, false) => (true, false),
                    _ => (false, true),
                };
                if sets_upper {
                    up[v] = up[v].min(bound);
                }
                if sets_lower {
                    lo[v] = lo[v].max(bound);
                }
            }
            _ => rows.push((coefs, c.sense, rhs)),
        }
    }
    for j in 0..n {
        if lo[j] > up[j] {
            if lo[j] - up[j] > FEAS_TOL * (1.0 + up[j].abs()) {
                return None;
            }
            lo[j] = up[j];
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&j| !fixed(j, lower, upper)).collect();
    let mut index = vec![usize::MAX; n];
    for (k, &j) in keep.iter().enumerate() {
        index[j] = k;
    }
    let mut reduced = MilpModel::new(model.sense);
    for &j in &keep {
        reduced.add_var(model.variables[j].name.clone(), VarKind::Continuous, lo[j], up[j]);
    }
    reduced.objective = model
        .objective
        .iter()
        .filter(|(v, _)| index[*v] != usize::MAX)
        .map(|&(v, c)| (index[v], c))
        .collect();
    for (coefs, sense, rhs) in rows {
        let coefs = coefs.into_iter().map(|(v, a)| (index[v], a)).collect();
        reduced.add_row(coefs, sense, rhs);
    }
    let mut full = lower.to_vec();
    for j in 0..n {
        if !fixed(j, lower, upper) {
            full[j] = f64::NAN;
        }
    }
    Some((reduced, keep, full))
}

/// LP over `model` with integrality dropped, using the given bounds.
fn lp_with_bounds(model: &MilpModel, lower: &[f64], upper: &[f64]) -> (SolveStatus, Vec<f64>) {
    let Some((reduced, keep, mut full)) = reduce_fixed(model, lower, upper) else {
        return (SolveStatus::Infeasible, Vec::new());
    };
    let sf = StandardForm::from_model(&reduced);
    let lo: Vec<f64> = reduced.variables.iter().map(|v| v.lower).collect();
    let up: Vec<f64> = reduced.variables.iter().map(|v| v.upper).collect();
    let mut tab = Tableau::new(&sf, &lo, &up);
    match tab.solve() {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return (SolveStatus::Infeasible, Vec::new()),
        LpStatus::Unbounded => return (SolveStatus::Unbounded, Vec::new()),
        LpStatus::Numerical => return (SolveStatus::NumericalFailure, Vec::new()),
    }
    for (k, x) in tab.x().into_iter().enumerate() {
        full[keep[k]] = x;
    }
    if !lp_feasible(model, &full, lower, upper) {
        return (SolveStatus::NumericalFailure, Vec::new());
    }
    (SolveStatus::Optimal, full)
}

/// Row and bound feasibility, ignoring integrality.
pub(crate) fn lp_feasible(model: &MilpModel, x: &[f64], lower: &[f64], upper: &[f64]) -> bool {
    let bounds_ok = x
        .iter()
        .zip(lower.iter().zip(upper))
        .all(|(&v, (&l, &u))| v >= l - FEAS_TOL * (1.0 + l.abs()) && v <= u + FEAS_TOL * (1.0 + u.abs()));
    bounds_ok
        && model
            .constraints
            .iter()
            .all(|c| c.violation(x) <= FEAS_TOL * (1.0 + c.rhs.abs()))
}

/// Solves the LP relaxation (binaries treated as continuous in their bounds).
pub fn solve_lp(model: &MilpModel) -> Result<SolveResult, SolverError> {
    model.validate()?;
    let start = Instant::now();
    let lower: Vec<f64> = model.variables.iter().map(|v| v.lower).collect();
    let upper: Vec<f64> = model.variables.iter().map(|v| v.upper).collect();
    let (status, values) = lp_with_bounds(model, &lower, &upper);
    let objective = if status == SolveStatus::Optimal {
        model.objective_value(&values)
    } else {
        f64::NAN
    };
    Ok(SolveResult {
        solution: Solution {
            values,
            objective,
            status,
        },
        best_bound: objective,
        nodes: 1,
        wall_time: start.elapsed().as_secs_f64(),
        trace: Vec::new(),
    })
}

/// Exhaustive enumeration over the free binaries. Each assignment's
/// continuous remainder is solved as an LP, or evaluated directly when the
/// model has no continuous variables. Ties keep the first assignment found
/// in Gray-code order.
pub fn brute_force(model: &MilpModel, max_binaries: usize) -> Result<Solution, SolverError> {
    model.validate()?;
    let free: Vec<usize> = model
        .binaries()
        .filter(|&j| model.variables[j].lower < model.variables[j].upper)
        .collect();
    if free.len() > max_binaries {
        return Err(SolverError::TooManyBinaries {
            found: free.len(),
            max: max_binaries,
        });
    }
    let has_continuous = model.variables.iter().any(|v| v.kind == VarKind::Continuous);
    let better = |a: f64, b: f64| match model.sense {
        crate::milp::ObjSense::Minimize => a < b - 1e-9,
        crate::milp::ObjSense::Maximize => a > b + 1e-9,
    };
    let mut lower: Vec<f64> = model.variables.iter().map(|v| v.lower).collect();
    let mut upper: Vec<f64> = model.variables.iter().map(|v| v.upper).collect();
    for &j in &free {
        lower[j] = 0.0;
        upper[j] = 0.0;
    }
    let mut best: Option<Solution> = None;
    let mut unbounded = false;
    let mut numerical = false;
    let total: u64 = 1 << free.len();

    if has_continuous {
        for k in 0..total {
            if k > 0 {
                let bit = k.trailing_zeros() as usize;
                let j = free[bit];
                let v = 1.0 - lower[j];
                lower[j] = v;
                upper[j] = v;
            }
            let (status, values) = lp_with_bounds(model, &lower, &upper);
            match status {
                SolveStatus::Optimal => {
                    let obj = model.objective_value(&values);
                    if best.as_ref().map_or(true, |b| better(obj, b.objective)) {
                        best = Some(Solution {
                            values,
                            objective: obj,
                            status: SolveStatus::Optimal,
                        });
                    }
                }
                SolveStatus::Unbounded => unbounded = true,
                SolveStatus::NumericalFailure => numerical = true,
                _ => {}
            }
        }
    } else {
        // incremental row activities under single-bit Gray-code flips
        let n = model.num_vars();
        let mut rows_of: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, c) in model.constraints.iter().enumerate() {
            for &(v, a) in &c.coefs {
                rows_of[v].push((r, a));
            }
        }
        let mut obj_coef = vec![0.0; n];
        for &(v, c) in &model.objective {
            obj_coef[v] += c;
        }
        let mut x = lower.clone();
        let mut act: Vec<f64> = model.constraints.iter().map(|c| c.activity(&x)).collect();
        let mut obj = model.objective_value(&x);
        let rows_ok = |act: &[f64]| {
            model.constraints.iter().zip(act).all(|(c, &a)| {
                let tol = FEAS_TOL * (1.0 + c.rhs.abs());
                match c.sense {
                    RowSense::Le => a <= c.rhs + tol,
                    RowSense::Ge => a >= c.rhs - tol,
                    RowSense::Eq => (a - c.rhs).abs() <= tol,
                }
            })
        };
        for k in 0..total {
            if k > 0 {
                let j = free[k.trailing_zeros() as usize];
                let delta = if x[j] == 0.0 { 1.0 } else { -1.0 };
                x[j] += delta;
                for &(r, a) in &rows_of[j] {
                    act[r] += a * delta;
                }
                obj += obj_coef[j] * delta;
            }
            if rows_ok(&act) && best.as_ref().map_or(true, |b| better(obj, b.objective)) {
                best = Some(Solution {
                    values: x.clone(),
                    objective: obj,
                    status: SolveStatus::Optimal,
                });
            }
        }
        // recompute exactly to drop incremental drift
        if let Some(b) = best.as_mut() {
            b.objective = model.objective_value(&b.values);
        }
    }
    Ok(match best {
        Some(b) if !unbounded => b,
        _ if unbounded => Solution::without_values(SolveStatus::Unbounded),
        _ if numerical => Solution::without_values(SolveStatus::NumericalFailure),
        _ => Solution::without_values(SolveStatus::Infeasible),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::ObjSense;

    #[test]
    fn single_bound_lp() {
        let mut m = MilpModel::new(ObjSense::Minimize);
        let x = m.add_var("x", VarKind::Continuous, 0.0, f64::INFINITY);
        m.objective = vec![(x, 1.0)];
        m.add_row(vec![(x, 1.0)], RowSense::Ge, 3.0);
        let r = solve_lp(&m).unwrap();
        assert_eq!(r.solution.status, SolveStatus::Optimal);
        assert!((r.solution.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_polytope() {
        let mut m = MilpModel::new(ObjSense::Minimize);
        let x = m.add_var("x", VarKind::Continuous, 0.0, f64::INFINITY);
        m.objective = vec![(x, 1.0)];
        m.add_row(vec![(x, 1.0)], RowSense::Ge, 3.0);
        m.add_row(vec![(x, 1.0)], RowSense::Le, 2.0);
        assert_eq!(solve_lp(&m).unwrap().solution.status, SolveStatus::Infeasible);
        // same contradiction, not reducible to bounds
        let mut m = MilpModel::new(ObjSense::Minimize);
        let a = m.add_var("a", VarKind::Continuous, 0.0, f64::INFINITY);
        let b = m.add_var("b", VarKind::Continuous, 0.0, f64::INFINITY);
        m.objective = vec![(a, 1.0)];
        m.add_row(vec![(a, 1.0), (b, 1.0)], RowSense::Ge, 3.0);
        m.add_row(vec![(a, 1.0), (b, 1.0)], RowSense::Le, 2.0);
        assert_eq!(solve_lp(&m).unwrap().solution.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_lp() {
        let mut m = MilpModel::new(ObjSense::Maximize);
        let a = m.add_var("a", VarKind::Continuous, 0.0, f64::INFINITY);
        let b = m.add_var("b", VarKind::Continuous, 0.0, f64::INFINITY);
        m.objective = vec![(a, 1.0)];
        m.add_row(vec![(a, 1.0), (b, -1.0)], RowSense::Le, 2.0);
        assert_eq!(solve_lp(&m).unwrap().solution.status, SolveStatus::Unbounded);
    }

    #[test]
    fn contradictory_binary_is_infeasible_for_the_oracle() {
        let mut m = MilpModel::new(ObjSense::Minimize);
        let y = m.add_var("y", VarKind::Binary, 0.0, 1.0);
        let x = m.add_var("x", VarKind::Continuous, 0.0, 1.0);
        m.objective = vec![(x, 1.0)];
        // y = 0 needs x >= 2, y = 1 needs x <= -1
        m.add_row(vec![(x, 1.0), (y, 2.0)], RowSense::Ge, 2.0);
        m.add_row(vec![(x, 1.0), (y, 2.0)], RowSense::Le, 1.0);
        assert_eq!(brute_force(&m, 25).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn oracle_refuses_large_models() {
        let mut m = MilpModel::new(ObjSense::Minimize);
        for k in 0..4 {
            m.add_var(format!("b{k}"), VarKind::Binary, 0.0, 1.0);
        }
        assert!(matches!(
            brute_force(&m, 3),
            Err(SolverError::TooManyBinaries { found: 4, max: 3 })
        ));
    }

    #[test]
    fn trace_csv_header() {
        let r = SolveResult {
            solution: Solution::without_values(SolveStatus::Infeasible),
            best_bound: 0.0,
            nodes: 0,
            wall_time: 0.0,
            trace: vec![TracePoint {
                elapsed: 0.5,
                incumbent: 12.0,
            }],
        };
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "elapsed_s,incumbent\n0.5,12\n");
    }
}
