use std::cmp::Ordering;
use std::collections::BinaryHeap;

use web_time::Instant;

use super::simplex::{Basis, LpStatus, StandardForm, Tableau};
use super::{lp_feasible, SolveResult, SolverError, SolverOptions, TracePoint};
use crate::milp::{MilpModel, Solution, SolveStatus};

const INT_TOL: f64 = 1e-6;
/// Refactor the working tableau after this many pivots.
const REFACTOR_EVERY: usize = 400;

struct Node {
    bound: f64,
    seq: u64,
    fixings: Vec<(u32, bool)>,
    basis: Basis,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smallest bound first, then oldest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    sf: &'a StandardForm,
    root_lower: Vec<f64>,
    root_upper: Vec<f64>,
    binaries: Vec<usize>,
}

impl<'a> Search<'a> {
    fn bounds_for(&self, fixings: &[(u32, bool)]) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.root_lower.clone();
        let mut up = self.root_upper.clone();
        for &(j, v) in fixings {
            let x = if v { 1.0 } else { 0.0 };
            lo[j as usize] = x;
            up[j as usize] = x;
        }
        (lo, up)
    }

    /// Solves a node LP from scratch.
    fn cold(&self, fixings: &[(u32, bool)]) -> (LpStatus, Tableau<'a>) {
        let (lo, up) = self.bounds_for(fixings);
        let mut tab = Tableau::new(self.sf, &lo, &up);
        let st = tab.solve();
        (st, tab)
    }

    /// Warm start from a stored basis, falling back to a cold solve.
    fn warm(&self, tab: &mut Tableau<'a>, basis: &Basis, fixings: &[(u32, bool)]) -> LpStatus {
        let (lo, up) = self.bounds_for(fixings);
        if tab.restore(basis, &lo, &up) && tab.is_dual_feasible() {
            let st = tab.dual();
            if st != LpStatus::Numerical {
                return st;
            }
        }
        let (st, fresh) = self.cold(fixings);
        *tab = fresh;
        st
    }

    /// Most fractional binary; ties go to the lowest id.
    fn branching_var(&self, x: &[f64]) -> Option<usize> {
        let mut best = None;
        let mut best_frac = INT_TOL;
        for &j in &self.binaries {
            let f = x[j] - x[j].floor();
            let frac = f.min(1.0 - f);
            if frac > best_frac + 1e-12 {
                best_frac = frac;
                best = Some(j);
            }
        }
        best
    }

    fn rounded(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for &j in &self.binaries {
            v[j] = v[j].round();
        }
        v
    }
}

/// Branch-and-bound over LP relaxations. Nodes are taken best-bound first;
/// after each branching the child on the rounding side of the branching
/// variable is solved immediately on the live tableau.
pub fn solve_mip(model: &MilpModel, opts: &SolverOptions) -> Result<SolveResult, SolverError> {
    model.validate()?;
    opts.validate()?;
    let start = Instant::now();
    let out_of_time = |start: &Instant| opts.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() >= t);
    let sf = StandardForm::from_model(model);
    let search = Search {
        sf: &sf,
        root_lower: model.variables.iter().map(|v| v.lower).collect(),
        root_upper: model.variables.iter().map(|v| v.upper).collect(),
        binaries: model.binaries().collect(),
    };
    let sign = sf.obj_sign;
    let finish = |status: SolveStatus,
                  incumbent: Option<(f64, Vec<f64>)>,
                  bound: f64,
                  nodes: u64,
                  trace: Vec<TracePoint>| {
        let solution = match incumbent {
            Some((_, values)) => Solution {
                objective: model.objective_value(&values),
                values,
                status,
            },
            None => Solution::without_values(status),
        };
        SolveResult {
            solution,
            best_bound: bound * sign + model.offset,
            nodes,
            wall_time: start.elapsed().as_secs_f64(),
            trace,
        }
    };

    if out_of_time(&start) {
        return Ok(finish(SolveStatus::TimeLimit, None, f64::NEG_INFINITY, 0, Vec::new()));
    }

    let (root_status, mut tab) = search.cold(&[]);
    match root_status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Ok(finish(SolveStatus::Infeasible, None, f64::INFINITY, 1, Vec::new())),
        LpStatus::Unbounded => return Ok(finish(SolveStatus::Unbounded, None, f64::NEG_INFINITY, 1, Vec::new())),
        LpStatus::Numerical => return Ok(finish(SolveStatus::NumericalFailure, None, f64::NEG_INFINITY, 1, Vec::new())),
    }

    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut nodes = 0u64;
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut trace = Vec::new();
    let mut current: Option<Vec<(u32, bool)>> = Some(Vec::new());
    let mut root_bound = f64::NEG_INFINITY;
    let gap_abs = |inc: f64| opts.rel_gap_tol * inc.abs().max(1.0);

    loop {
        if let Some(fixings) = current.take() {
            nodes += 1;
            let lp_obj = tab.objective();
            if nodes == 1 {
                root_bound = lp_obj;
            }
            let pruned = incumbent.as_ref().is_some_and(|(inc, _)| lp_obj >= inc - gap_abs(*inc));
            if !pruned {
                let x = tab.x();
                match search.branching_var(&x) {
                    None => {
                        let v = search.rounded(&x);
                        if lp_feasible(model, &v, &search.root_lower, &search.root_upper) {
                            let obj = model.objective_value(&v);
                            let internal = (obj - model.offset) * sign;
                            if incumbent.as_ref().map_or(true, |(inc, _)| internal < *inc) {
                                trace.push(TracePoint {
                                    elapsed: start.elapsed().as_secs_f64(),
                                    incumbent: obj,
                                });
                                incumbent = Some((internal, v));
                                if opts.feasibility_only {
                                    let bound = heap.peek().map_or(lp_obj, |n| n.bound.min(lp_obj));
                                    return Ok(finish(SolveStatus::Feasible, incumbent, bound, nodes, trace));
                                }
                            }
                        }
                    }
                    Some(j) => {
                        let up_first = x[j] >= 0.5;
                        let mut other = fixings.clone();
                        other.push((j as u32, !up_first));
                        heap.push(Node {
                            bound: lp_obj,
                            seq,
                            fixings: other,
                            basis: tab.snapshot(),
                        });
                        seq += 1;
                        let mut dive = fixings;
                        dive.push((j as u32, up_first));
                        let v = if up_first { 1.0 } else { 0.0 };
                        let st = if tab.pivots > REFACTOR_EVERY {
                            let snap = tab.snapshot();
                            search.warm(&mut tab, &snap, &dive)
                        } else {
                            tab.set_bounds(j, v, v);
                            match tab.dual() {
                                LpStatus::Numerical => {
                                    let snap = tab.snapshot();
                                    search.warm(&mut tab, &snap, &dive)
                                }
                                st => st,
                            }
                        };
                        match st {
                            LpStatus::Optimal => current = Some(dive),
                            LpStatus::Infeasible => nodes += 1,
                            LpStatus::Unbounded | LpStatus::Numerical => {
                                let bound = heap.peek().map_or(lp_obj, |n| n.bound);
                                return Ok(finish(SolveStatus::NumericalFailure, incumbent, bound, nodes, trace));
                            }
                        }
                    }
                }
            }
        }

        if current.is_none() {
            // pop the best open node that survives pruning
            loop {
                let Some(top) = heap.peek() else { break };
                if let Some((inc, _)) = &incumbent {
                    if top.bound >= inc - gap_abs(*inc) {
                        heap.clear();
                        break;
                    }
                }
                if limits_hit(opts, nodes, &start) {
                    break;
                }
                let node = heap.pop().expect("peeked");
                match search.warm(&mut tab, &node.basis, &node.fixings) {
                    LpStatus::Optimal => {
                        current = Some(node.fixings);
                        break;
                    }
                    LpStatus::Infeasible => nodes += 1,
                    _ => {
                        let bound = heap.peek().map_or(node.bound, |n| n.bound.min(node.bound));
                        return Ok(finish(SolveStatus::NumericalFailure, incumbent, bound, nodes, trace));
                    }
                }
            }
        }

        if current.is_none() && heap.is_empty() {
            return Ok(match incumbent {
                Some((inc, _)) => finish(SolveStatus::Optimal, incumbent, inc, nodes, trace),
                None => finish(SolveStatus::Infeasible, None, f64::INFINITY, nodes, trace),
            });
        }
        if limits_hit(opts, nodes, &start) {
            let open = heap.peek().map(|n| n.bound);
            let live = current.as_ref().map(|_| tab.objective());
            let mut bound = match (open, live) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => incumbent.as_ref().map_or(root_bound, |(i, _)| *i),
            };
            if let Some((inc, _)) = &incumbent {
                bound = bound.min(*inc);
            }
            let status = if out_of_time(&start) {
                SolveStatus::TimeLimit
            } else {
                SolveStatus::NodeLimit
            };
            return Ok(finish(status, incumbent, bound, nodes, trace));
        }
    }
}

fn limits_hit(opts: &SolverOptions, nodes: u64, start: &Instant) -> bool {
    opts.node_limit.is_some_and(|n| nodes >= n) || opts.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() >= t)
}

