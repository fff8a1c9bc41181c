//! Generic mixed-integer linear models, the two sequential formulations,
//! tight-constraint labeling, relaxation construction and variable fixing.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::{Instance, KnapsackInstance, LotSizingInstance};

/// Absolute feasibility tolerance used across model checks.
pub const FEAS_TOL: f64 = 1e-6;

pub type VarId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum MilpError {
    #[error("constraint {row} references undeclared variable {var}")]
    UnknownVariable { row: usize, var: VarId },
    #[error("binary variable {0} must have bounds within [0, 1]")]
    BadBinaryBounds(VarId),
    #[error("variable {0} has a lower bound above its upper bound or an infinite lower bound")]
    BadBounds(VarId),
    #[error("duplicate constraint tag {0:?}")]
    DuplicateTag(ConstraintTag),
    #[error("variable {0} is not binary and cannot be fixed")]
    NotBinary(VarId),
    #[error("variable {0} is out of range")]
    OutOfRange(VarId),
    #[error("tightness labels require an optimal solution, got {0:?}")]
    NotOptimal(SolveStatus),
    #[error("tightness coefficient {0} outside [0, 1]")]
    BadEta(f64),
    #[error("no label for labelable constraint {0:?}")]
    MissingLabel(ConstraintTag),
    #[error("solution has {found} values, model has {expected} variables")]
    SolutionSize { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjSense {
    Minimize,
    Maximize,
}

/// Identifies a constraint row by its role in a formulation. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintTag {
    Flow { item: usize, period: usize },
    Capacity { period: usize },
    SetupLink { item: usize, period: usize },
    Knapsack { resource: usize, period: usize },
    StabUpper { item: usize, period: usize },
    StabLower { item: usize, period: usize },
    /// Free-form row of a hand-built model.
    Row(usize),
}

impl ConstraintTag {
    /// Rows whose tightness is learned and which relaxations may drop.
    pub fn is_labelable(&self) -> bool {
        matches!(
            self,
            ConstraintTag::Capacity { .. } | ConstraintTag::SetupLink { .. } | ConstraintTag::Knapsack { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coefs: Vec<(VarId, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
    pub tag: ConstraintTag,
}

impl Constraint {
    pub fn activity(&self, values: &[f64]) -> f64 {
        self.coefs.iter().map(|&(v, a)| a * values[v]).sum()
    }

    /// Amount by which `values` violate this row (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let lhs = self.activity(values);
        match self.sense {
            RowSense::Le => (lhs - self.rhs).max(0.0),
            RowSense::Ge => (self.rhs - lhs).max(0.0),
            RowSense::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// Which formulation produced a model, so that indices can be mapped back to
/// `(item, period)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Variables: `y` block, then `x`, then `s`, each `I*T` long, item-major.
    Mclsp { items: usize, periods: usize },
    /// Variables: `x` block (`I*T`), then `y` block (`I*(T-1)`), item-major.
    Msmk { items: usize, periods: usize, resources: usize },
    /// Knapsack relaxation: only the `x` block survives.
    MsmkRelaxed { items: usize, periods: usize, resources: usize },
    Generic,
}

impl Layout {
    /// Ids of the decision binaries that the predictor targets, ordered
    /// `(item, period)` item-major.
    pub fn decision_vars(&self) -> std::ops::Range<VarId> {
        match *self {
            Layout::Mclsp { items, periods } => 0..items * periods,
            Layout::Msmk { items, periods, .. } | Layout::MsmkRelaxed { items, periods, .. } => {
                0..items * periods
            }
            Layout::Generic => 0..0,
        }
    }
}

pub fn mclsp_y(periods: usize, item: usize, t: usize) -> VarId {
    item * periods + t
}
pub fn mclsp_x(items: usize, periods: usize, item: usize, t: usize) -> VarId {
    items * periods + item * periods + t
}
pub fn mclsp_s(items: usize, periods: usize, item: usize, t: usize) -> VarId {
    2 * items * periods + item * periods + t
}
pub fn msmk_x(periods: usize, item: usize, t: usize) -> VarId {
    item * periods + t
}
pub fn msmk_y(items: usize, periods: usize, item: usize, t: usize) -> VarId {
    items * periods + item * (periods - 1) + t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpModel {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<(VarId, f64)>,
    /// Constant added to the objective.
    #[serde(default)]
    pub offset: f64,
    pub sense: ObjSense,
    pub layout: Layout,
}

impl MilpModel {
    pub fn new(sense: ObjSense) -> Self {
        Self {
            variables: Vec::new(),
            constraints: Vec::new(),
            objective: Vec::new(),
            offset: 0.0,
            sense,
            layout: Layout::Generic,
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lower: f64, upper: f64) -> VarId {
        self.variables.push(Variable {
            name: name.into(),
            kind,
            lower,
            upper,
        });
        self.variables.len() - 1
    }

    pub fn add_constraint(&mut self, coefs: Vec<(VarId, f64)>, sense: RowSense, rhs: f64, tag: ConstraintTag) {
        self.constraints.push(Constraint { coefs, sense, rhs, tag });
    }

    /// Adds a row tagged `Row(k)` with `k` its position.
    pub fn add_row(&mut self, coefs: Vec<(VarId, f64)>, sense: RowSense, rhs: f64) {
        let k = self.constraints.len();
        self.add_constraint(coefs, sense, rhs, ConstraintTag::Row(k));
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn binaries(&self) -> impl Iterator<Item = VarId> + '_ {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Binary)
            .map(|(i, _)| i)
    }

    pub fn num_binaries(&self) -> usize {
        self.binaries().count()
    }

    pub fn validate(&self) -> Result<(), MilpError> {
        for (j, v) in self.variables.iter().enumerate() {
            if !(v.lower <= v.upper) || v.lower == f64::NEG_INFINITY || v.lower.is_nan() {
                return Err(MilpError::BadBounds(j));
            }
            if v.kind == VarKind::Binary && (v.lower < 0.0 || v.upper > 1.0) {
                return Err(MilpError::BadBinaryBounds(j));
            }
        }
        let n = self.variables.len();
        let mut seen = HashSet::new();
        for (r, c) in self.constraints.iter().enumerate() {
            if let Some(&(var, _)) = c.coefs.iter().find(|(v, _)| *v >= n) {
                return Err(MilpError::UnknownVariable { row: r, var });
            }
            if !seen.insert(c.tag) {
                return Err(MilpError::DuplicateTag(c.tag));
            }
        }
        if let Some(&(var, _)) = self.objective.iter().find(|(v, _)| *v >= n) {
            return Err(MilpError::UnknownVariable { row: usize::MAX, var });
        }
        Ok(())
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.offset + self.objective.iter().map(|&(v, c)| c * values[v]).sum::<f64>()
    }

    /// Largest bound, integrality or row violation of `values`, with a
    /// description of where it occurs.
    pub fn max_violation(&self, values: &[f64]) -> (f64, String) {
        let mut worst = (0.0, String::new());
        for (j, v) in self.variables.iter().enumerate() {
            let x = values[j];
            let mut viol = (v.lower - x).max(x - v.upper).max(0.0);
            if v.kind == VarKind::Binary {
                viol = viol.max((x - x.round().clamp(0.0, 1.0)).abs());
            }
            if viol > worst.0 {
                worst = (viol, format!("variable {}", v.name));
            }
        }
        for c in &self.constraints {
            let viol = c.violation(values) / (1.0 + c.rhs.abs());
            if viol > worst.0 {
                worst = (viol, format!("constraint {:?}", c.tag));
            }
        }
        worst
    }

    /// Feasibility within [`FEAS_TOL`] (rows scaled by `1 + |rhs|`).
    pub fn is_feasible(&self, values: &[f64]) -> bool {
        values.len() == self.variables.len() && self.max_violation(values).0 <= FEAS_TOL
    }

    /// LP-style text dump, one constraint per line with the tag as comment.
    pub fn to_lp_string(&self) -> String {
        let mut out = String::new();
        let term = |out: &mut String, first: bool, c: f64, name: &str| {
            let sign = if c < 0.0 { "-" } else if first { "" } else { "+" };
            let _ = write!(out, "{}{} {} {}", if first { "" } else { " " }, sign, c.abs(), name);
        };
        out.push_str(match self.sense {
            ObjSense::Minimize => "Minimize\n obj:",
            ObjSense::Maximize => "Maximize\n obj:",
        });
        for (k, &(v, c)) in self.objective.iter().enumerate() {
            out.push(' ');
            term(&mut out, k == 0, c, &self.variables[v].name);
        }
        if self.offset != 0.0 {
            let _ = write!(out, " + {}", self.offset);
        }
        out.push_str("\nSubject To\n");
        for c in &self.constraints {
            out.push(' ');
            for (k, &(v, a)) in c.coefs.iter().enumerate() {
                term(&mut out, k == 0, a, &self.variables[v].name);
            }
            let op = match c.sense {
                RowSense::Le => "<=",
                RowSense::Eq => "=",
                RowSense::Ge => ">=",
            };
            let _ = writeln!(out, " {op} {} \\ {:?}", c.rhs, c.tag);
        }
        out.push_str("Bounds\n");
        for v in &self.variables {
            let _ = writeln!(out, " {} <= {} <= {}", v.lower, v.name, v.upper);
        }
        out.push_str("Binaries\n");
        for v in self.variables.iter().filter(|v| v.kind == VarKind::Binary) {
            let _ = writeln!(out, " {}", v.name);
        }
        out.push_str("End\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    TimeLimit,
    NodeLimit,
    Unbounded,
    NumericalFailure,
}

impl SolveStatus {
    pub fn has_solution(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

/// A value per model variable. `values` is empty when no assignment is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub values: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
}

impl Solution {
    pub fn without_values(status: SolveStatus) -> Self {
        Self {
            values: Vec::new(),
            objective: f64::NAN,
            status,
        }
    }

    pub fn has_values(&self) -> bool {
        !self.values.is_empty()
    }

    /// Rounded value of binary `var`.
    pub fn bit(&self, var: VarId) -> bool {
        self.values[var] >= 0.5
    }
}

pub fn build_model(inst: &Instance) -> MilpModel {
    match inst {
        Instance::Mclsp(i) => build_mclsp(i),
        Instance::Msmk(i) => build_msmk(i),
    }
}

pub fn build_mclsp(inst: &LotSizingInstance) -> MilpModel {
    let (ni, nt) = (inst.items, inst.periods);
    let mut m = MilpModel::new(ObjSense::Minimize);
    m.layout = Layout::Mclsp { items: ni, periods: nt };
    for i in 0..ni {
        for t in 0..nt {
            m.add_var(format!("y_{i}_{t}"), VarKind::Binary, 0.0, 1.0);
        }
    }
    for i in 0..ni {
        for t in 0..nt {
            m.add_var(format!("x_{i}_{t}"), VarKind::Continuous, 0.0, f64::INFINITY);
        }
    }
    for i in 0..ni {
        for t in 0..nt {
            m.add_var(format!("s_{i}_{t}"), VarKind::Continuous, 0.0, f64::INFINITY);
        }
    }
    for i in 0..ni {
        for t in 0..nt {
            m.objective.push((mclsp_x(ni, nt, i, t), inst.prod_cost[i][t] as f64));
            m.objective.push((mclsp_y(nt, i, t), inst.setup_cost[i][t] as f64));
            m.objective.push((mclsp_s(ni, nt, i, t), inst.hold_cost[i][t] as f64));
        }
    }
    // s_{i,t-1} + x_it - s_it = d_it, with s_{i,-1} = 0
    for i in 0..ni {
        for t in 0..nt {
            let mut coefs = Vec::with_capacity(3);
            if t > 0 {
                coefs.push((mclsp_s(ni, nt, i, t - 1), 1.0));
            }
            coefs.push((mclsp_x(ni, nt, i, t), 1.0));
            coefs.push((mclsp_s(ni, nt, i, t), -1.0));
            m.add_constraint(coefs, RowSense::Eq, inst.demand[i][t] as f64, ConstraintTag::Flow { item: i, period: t });
        }
    }
    for t in 0..nt {
        let coefs = (0..ni).map(|i| (mclsp_x(ni, nt, i, t), 1.0)).collect();
        m.add_constraint(coefs, RowSense::Le, inst.capacity[t] as f64, ConstraintTag::Capacity { period: t });
    }
    // x_it <= c_t y_it
    for i in 0..ni {
        for t in 0..nt {
            let coefs = vec![(mclsp_x(ni, nt, i, t), 1.0), (mclsp_y(nt, i, t), -(inst.capacity[t] as f64))];
            m.add_constraint(coefs, RowSense::Le, 0.0, ConstraintTag::SetupLink { item: i, period: t });
        }
    }
    m
}

pub fn build_msmk(inst: &KnapsackInstance) -> MilpModel {
    let (ni, nt, nj) = (inst.items, inst.periods, inst.resources);
    let mut m = MilpModel::new(ObjSense::Maximize);
    m.layout = Layout::Msmk {
        items: ni,
        periods: nt,
        resources: nj,
    };
    for i in 0..ni {
        for t in 0..nt {
            let id = m.add_var(format!("x_{i}_{t}"), VarKind::Binary, 0.0, 1.0);
            m.objective.push((id, inst.profit[i][t] as f64));
        }
    }
    for i in 0..ni {
        for t in 0..nt - 1 {
            let id = m.add_var(format!("y_{i}_{t}"), VarKind::Binary, 0.0, 1.0);
            m.objective.push((id, inst.bonus[i][t] as f64));
        }
    }
    for j in 0..nj {
        for t in 0..nt {
            let coefs = (0..ni).map(|i| (msmk_x(nt, i, t), inst.weight[i][j][t] as f64)).collect();
            m.add_constraint(coefs, RowSense::Le, inst.capacity[j][t] as f64, ConstraintTag::Knapsack { resource: j, period: t });
        }
    }
    // y_it <= 1 - |x_{i,t+1} - x_it| as two rows
    for i in 0..ni {
        for t in 0..nt.saturating_sub(1) {
            let y = msmk_y(ni, nt, i, t);
            let (x0, x1) = (msmk_x(nt, i, t), msmk_x(nt, i, t + 1));
            m.add_constraint(vec![(y, 1.0), (x1, 1.0), (x0, -1.0)], RowSense::Le, 1.0, ConstraintTag::StabUpper { item: i, period: t });
            m.add_constraint(vec![(y, 1.0), (x1, -1.0), (x0, 1.0)], RowSense::Le, 1.0, ConstraintTag::StabLower { item: i, period: t });
        }
    }
    m
}

/// Tight / non-tight labels for the labelable rows of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightLabels {
    pub eta: f64,
    pub labels: BTreeMap<ConstraintTag, bool>,
}

impl TightLabels {
    pub fn is_tight(&self, tag: &ConstraintTag) -> Option<bool> {
        self.labels.get(tag).copied()
    }
}

/// A `<=` row is tight when its positive-coefficient usage reaches `eta` times
/// its effective capacity `rhs - Σ_{a<0} a·x`. This covers `Σx ≤ c`,
/// `x - c·y ≤ 0` and `Σ w·x ≤ c` uniformly.
fn row_is_tight(row: &Constraint, values: &[f64], eta: f64) -> bool {
    let mut usage = 0.0;
    let mut cap = row.rhs;
    for &(v, a) in &row.coefs {
        if a > 0.0 {
            usage += a * values[v];
        } else {
            cap -= a * values[v];
        }
    }
    match row.sense {
        RowSense::Ge => -usage >= eta * -cap - FEAS_TOL,
        _ => usage >= eta * cap - FEAS_TOL,
    }
}

pub fn label_tight(model: &MilpModel, optimal: &Solution, eta: f64) -> Result<TightLabels, MilpError> {
    if optimal.status != SolveStatus::Optimal {
        return Err(MilpError::NotOptimal(optimal.status));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(MilpError::BadEta(eta));
    }
    if optimal.values.len() != model.num_vars() {
        return Err(MilpError::SolutionSize {
            expected: model.num_vars(),
            found: optimal.values.len(),
        });
    }
    let labels = model
        .constraints
        .iter()
        .filter(|c| c.tag.is_labelable())
        .map(|c| (c.tag, row_is_tight(c, &optimal.values, eta)))
        .collect();
    Ok(TightLabels { eta, labels })
}

/// Drops labelable rows predicted non-tight. For the knapsack formulation the
/// stability rows and `y` variables go as well; their best possible bonus
/// (`y = 1`, unconstrained) moves into the objective offset so the relaxation
/// objective still bounds the original.
pub fn build_relaxation(model: &MilpModel, predicted: &TightLabels) -> Result<MilpModel, MilpError> {
    let mut keep = Vec::with_capacity(model.constraints.len());
    for c in &model.constraints {
        if c.tag.is_labelable() {
            match predicted.is_tight(&c.tag) {
                Some(true) => keep.push(c.clone()),
                Some(false) => {}
                None => return Err(MilpError::MissingLabel(c.tag)),
            }
        } else if !matches!(c.tag, ConstraintTag::StabUpper { .. } | ConstraintTag::StabLower { .. })
            || !matches!(model.layout, Layout::Msmk { .. })
        {
            keep.push(c.clone());
        }
    }
    let mut relaxed = MilpModel {
        variables: model.variables.clone(),
        constraints: keep,
        objective: model.objective.clone(),
        offset: model.offset,
        sense: model.sense,
        layout: model.layout,
    };
    if let Layout::Msmk { items, periods, resources } = model.layout {
        let n_x = items * periods;
        let mut bonus = 0.0;
        relaxed.objective.retain(|&(v, c)| {
            if v >= n_x {
                let var = &model.variables[v];
                bonus += match model.sense {
                    ObjSense::Maximize => (c * var.lower).max(c * var.upper),
                    ObjSense::Minimize => (c * var.lower).min(c * var.upper),
                };
                false
            } else {
                true
            }
        });
        relaxed.offset += bonus;
        relaxed.variables.truncate(n_x);
        relaxed.layout = Layout::MsmkRelaxed { items, periods, resources };
    }
    Ok(relaxed)
}

/// Pins each assigned binary to its value.
pub fn fix_variables(model: &MilpModel, assignment: &BTreeMap<VarId, bool>) -> Result<MilpModel, MilpError> {
    let mut fixed = model.clone();
    for (&var, &val) in assignment {
        let v = fixed.variables.get_mut(var).ok_or(MilpError::OutOfRange(var))?;
        if v.kind != VarKind::Binary {
            return Err(MilpError::NotBinary(var));
        }
        let x = if val { 1.0 } else { 0.0 };
        v.lower = x;
        v.upper = x;
    }
    Ok(fixed)
}
