//! Dense bounded-variable simplex tableau.
//!
//! Columns are the structural variables followed by one slack per row. Each
//! row reads `a·x + s = b` with `s ∈ [0, ∞)` for `≤` rows (after negating `≥`
//! rows) and `s ∈ [0, 0]` for equalities. Rows whose initial slack is out of
//! bounds start with an implicit artificial basic variable; artificial columns
//! are never stored because they never re-enter once they leave.

use crate::milp::{MilpModel, ObjSense, RowSense};

pub(crate) const PIV_TOL: f64 = 1e-9;
pub(crate) const OPT_TOL: f64 = 1e-9;
pub(crate) const PRIMAL_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColState {
    Basic,
    Lower,
    Upper,
}

/// `min cost·x` over `A x + s = b` in dense row-major form.
#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub slack_upper: Vec<f64>,
    pub cost: Vec<f64>,
    /// `+1` for minimization, `-1` for maximization.
    pub obj_sign: f64,
}

impl StandardForm {
    pub fn from_model(model: &MilpModel) -> Self {
        let n = model.num_vars();
        let m = model.constraints.len();
        let mut a = vec![0.0; m * n];
        let mut b = vec![0.0; m];
        let mut slack_upper = vec![f64::INFINITY; m];
        for (r, c) in model.constraints.iter().enumerate() {
            let sign = if c.sense == RowSense::Ge { -1.0 } else { 1.0 };
            for &(v, coef) in &c.coefs {
                a[r * n + v] += sign * coef;
            }
            b[r] = sign * c.rhs;
            if c.sense == RowSense::Eq {
                slack_upper[r] = 0.0;
            }
        }
        let obj_sign = match model.sense {
            ObjSense::Minimize => 1.0,
            ObjSense::Maximize => -1.0,
        };
        let mut cost = vec![0.0; n];
        for &(v, c) in &model.objective {
            cost[v] += obj_sign * c;
        }
        Self {
            n,
            m,
            a,
            b,
            slack_upper,
            cost,
            obj_sign,
        }
    }
}

/// Basis snapshot sufficient to rebuild a tableau by refactoring.
#[derive(Debug, Clone)]
pub(crate) struct Basis {
    basis: Vec<u32>,
    at_upper: Vec<u64>,
}

impl Basis {
    fn is_upper(&self, j: usize) -> bool {
        self.at_upper[j / 64] >> (j % 64) & 1 == 1
    }
}

pub(crate) struct Tableau<'a> {
    sf: &'a StandardForm,
    n: usize,
    m: usize,
    w: usize,
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    row_of: Vec<usize>,
    state: Vec<ColState>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    d: Vec<f64>,
    art_sign: Vec<f64>,
    pub pivots: usize,
}

impl<'a> Tableau<'a> {
    /// Slack (or artificial) starting basis with structural columns at their
    /// lower bounds. Lower bounds must be finite.
    pub fn new(sf: &'a StandardForm, lower: &[f64], upper: &[f64]) -> Self {
        let (n, m) = (sf.n, sf.m);
        let w = n + m;
        let total = w + m;
        let mut lo = vec![0.0; total];
        let mut up = vec![0.0; total];
        lo[..n].copy_from_slice(lower);
        up[..n].copy_from_slice(upper);
        for i in 0..m {
            up[n + i] = sf.slack_upper[i];
            up[w + i] = f64::INFINITY;
        }
        let mut t = vec![0.0; m * w];
        let mut beta = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut row_of = vec![usize::MAX; total];
        let mut state = vec![ColState::Lower; total];
        let mut art_sign = vec![1.0; m];
        for i in 0..m {
            let row = &sf.a[i * n..(i + 1) * n];
            let r = sf.b[i] - row.iter().zip(lower).map(|(a, l)| a * l).sum::<f64>();
            let trow = &mut t[i * w..(i + 1) * w];
            trow[..n].copy_from_slice(row);
            trow[n + i] = 1.0;
            if r >= -PRIMAL_TOL && r <= sf.slack_upper[i] + PRIMAL_TOL {
                basis[i] = n + i;
                beta[i] = r.max(0.0).min(sf.slack_upper[i]);
            } else {
                let s = if r < 0.0 { -1.0 } else { 1.0 };
                art_sign[i] = s;
                if s < 0.0 {
                    trow.iter_mut().for_each(|v| *v = -*v);
                }
                basis[i] = w + i;
                beta[i] = r.abs();
            }
            state[basis[i]] = ColState::Basic;
            row_of[basis[i]] = i;
        }
        Self {
            sf,
            n,
            m,
            w,
            t,
            beta,
            basis,
            row_of,
            state,
            lower: lo,
            upper: up,
            d: vec![0.0; w],
            art_sign,
            pivots: 0,
        }
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= self.w
    }

    fn cost_of(&self, j: usize, phase1: bool) -> f64 {
        if phase1 {
            if self.is_artificial(j) {
                1.0
            } else {
                0.0
            }
        } else if j < self.n {
            self.sf.cost[j]
        } else {
            0.0
        }
    }

    fn value(&self, j: usize) -> f64 {
        match self.state[j] {
            ColState::Basic => self.beta[self.row_of[j]],
            ColState::Lower => self.lower[j],
            ColState::Upper => self.upper[j],
        }
    }

    fn compute_reduced_costs(&mut self, phase1: bool) {
        let w = self.w;
        for j in 0..w {
            self.d[j] = self.cost_of(j, phase1);
        }
        for i in 0..self.m {
            let cb = self.cost_of(self.basis[i], phase1);
            if cb != 0.0 {
                let row = &self.t[i * w..(i + 1) * w];
                for (dj, tij) in self.d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
        for i in 0..self.m {
            let b = self.basis[i];
            if b < w {
                self.d[b] = 0.0;
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let w = self.w;
        let piv = self.t[r * w + j];
        {
            let row = &mut self.t[r * w..(r + 1) * w];
            let inv = 1.0 / piv;
            row.iter_mut().for_each(|v| *v *= inv);
            row[j] = 1.0;
        }
        let (before, rest) = self.t.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for other in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = other[j];
            if f != 0.0 {
                for (o, p) in other.iter_mut().zip(prow.iter()) {
                    *o -= f * p;
                }
                other[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for (o, p) in self.d.iter_mut().zip(prow.iter()) {
                *o -= f * p;
            }
            self.d[j] = 0.0;
        }
        let old = self.basis[r];
        self.row_of[old] = usize::MAX;
        self.basis[r] = j;
        self.row_of[j] = r;
        self.state[j] = ColState::Basic;
        self.pivots += 1;
    }

    fn iteration_cap(&self) -> usize {
        50 * (self.m + self.w) + 1000
    }

    /// Primal simplex from a primal-feasible basis.
    fn primal(&mut self) -> LpStatus {
        let (m, w) = (self.m, self.w);
        let mut bland = false;
        let mut streak = 0;
        for _ in 0..self.iteration_cap() {
            // pricing
            let mut enter = None;
            let mut best = 0.0;
            for j in 0..w {
                if self.state[j] == ColState::Basic || self.lower[j] == self.upper[j] {
                    continue;
                }
                let dj = self.d[j];
                let gain = match self.state[j] {
                    ColState::Lower if dj < -OPT_TOL => -dj,
                    ColState::Upper if dj > OPT_TOL => dj,
                    _ => continue,
                };
                if bland {
                    enter = Some(j);
                    break;
                }
                if gain > best {
                    best = gain;
                    enter = Some(j);
                }
            }
            let Some(j) = enter else {
                return LpStatus::Optimal;
            };
            let dir = if self.state[j] == ColState::Lower { 1.0 } else { -1.0 };
            // ratio test
            let mut theta = self.upper[j] - self.lower[j];
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_alpha = 0.0;
            for i in 0..m {
                let alpha = self.t[i * w + j] * dir;
                if alpha.abs() <= PIV_TOL {
                    continue;
                }
                let b = self.basis[i];
                let (limit, to_lower) = if alpha > 0.0 {
                    if self.lower[b] == f64::NEG_INFINITY {
                        continue;
                    }
                    (((self.beta[i] - self.lower[b]) / alpha).max(0.0), true)
                } else {
                    if self.upper[b] == f64::INFINITY {
                        continue;
                    }
                    (((self.upper[b] - self.beta[i]) / -alpha).max(0.0), false)
                };
                let better = match leave {
                    None => limit < theta,
                    Some((li, _)) => {
                        if limit < theta - 1e-12 {
                            true
                        } else if limit <= theta + 1e-12 {
                            if bland {
                                b < self.basis[li]
                            } else {
                                alpha.abs() > leave_alpha
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    theta = limit.min(theta);
                    leave = Some((i, to_lower));
                    leave_alpha = alpha.abs();
                }
            }
            if theta == f64::INFINITY {
                return LpStatus::Unbounded;
            }
            if theta <= 1e-12 {
                streak += 1;
                if streak > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                streak = 0;
            }
            let entering_value = self.value(j) + dir * theta;
            for i in 0..m {
                let a = self.t[i * w + j];
                if a != 0.0 {
                    self.beta[i] -= a * dir * theta;
                }
            }
            match leave {
                None => {
                    self.state[j] = if dir > 0.0 { ColState::Upper } else { ColState::Lower };
                }
                Some((r, to_lower)) => {
                    let out = self.basis[r];
                    self.pivot(r, j);
                    self.beta[r] = entering_value;
                    self.state[out] = if to_lower { ColState::Lower } else { ColState::Upper };
                    if self.is_artificial(out) {
                        self.upper[out] = 0.0;
                        self.state[out] = ColState::Lower;
                    }
                }
            }
        }
        LpStatus::Numerical
    }

    /// Two-phase primal simplex from the starting basis built by [`Tableau::new`].
    pub fn solve(&mut self) -> LpStatus {
        let has_art = self.basis.iter().any(|&b| self.is_artificial(b));
        if has_art {
            self.compute_reduced_costs(true);
            match self.primal() {
                LpStatus::Optimal => {}
                other => return other,
            }
            let infeas: f64 = (0..self.m)
                .filter(|&i| self.is_artificial(self.basis[i]))
                .map(|i| self.beta[i])
                .sum();
            let scale = 1.0 + self.sf.b.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if infeas > 1e-9 * scale {
                return LpStatus::Infeasible;
            }
            self.drive_out_artificials();
        }
        self.compute_reduced_costs(false);
        self.primal()
    }

    fn drive_out_artificials(&mut self) {
        let w = self.w;
        for i in 0..self.m {
            let b = self.basis[i];
            if !self.is_artificial(b) {
                continue;
            }
            let mut best = None;
            let mut best_abs = 1e-7;
            for j in 0..w {
                if self.state[j] != ColState::Basic && self.t[i * w + j].abs() > best_abs {
                    best_abs = self.t[i * w + j].abs();
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                let v = self.value(j);
                self.pivot(i, j);
                self.beta[i] = v;
                self.state[b] = ColState::Lower;
            }
            self.upper[b] = 0.0;
        }
    }

    /// Dual simplex from a dual-feasible basis.
    pub fn dual(&mut self) -> LpStatus {
        let (m, w) = (self.m, self.w);
        let mut bland = false;
        let mut streak = 0;
        for _ in 0..self.iteration_cap() {
            let mut leave = None;
            let mut worst = 0.0;
            for i in 0..m {
                let b = self.basis[i];
                let tol = PRIMAL_TOL * (1.0 + self.beta[i].abs());
                let infeas = if self.beta[i] < self.lower[b] - tol {
                    self.lower[b] - self.beta[i]
                } else if self.beta[i] > self.upper[b] + tol {
                    self.beta[i] - self.upper[b]
                } else {
                    continue;
                };
                let pick = match leave {
                    None => true,
                    Some(li) if bland => b < self.basis[li],
                    Some(_) => infeas > worst,
                };
                if pick {
                    worst = infeas;
                    leave = Some(i);
                }
            }
            let Some(r) = leave else {
                return LpStatus::Optimal;
            };
            let out = self.basis[r];
            let below = self.beta[r] < self.lower[out];
            let target = if below { self.lower[out] } else { self.upper[out] };
            let mut enter = None;
            let mut best_ratio = f64::INFINITY;
            let mut best_alpha = 0.0;
            for j in 0..w {
                if self.state[j] == ColState::Basic || self.lower[j] == self.upper[j] {
                    continue;
                }
                let alpha = self.t[r * w + j];
                if alpha.abs() <= PIV_TOL {
                    continue;
                }
                let eligible = match (self.state[j], below) {
                    (ColState::Lower, true) => alpha < 0.0,
                    (ColState::Upper, true) => alpha > 0.0,
                    (ColState::Lower, false) => alpha > 0.0,
                    (ColState::Upper, false) => alpha < 0.0,
                    _ => false,
                };
                if !eligible {
                    continue;
                }
                let dj = match self.state[j] {
                    ColState::Lower => self.d[j].max(0.0),
                    _ => (-self.d[j]).max(0.0),
                };
                let ratio = dj / alpha.abs();
                let better = if ratio < best_ratio - 1e-12 {
                    true
                } else if ratio <= best_ratio + 1e-12 {
                    if bland {
                        enter.map_or(true, |e| j < e)
                    } else {
                        alpha.abs() > best_alpha
                    }
                } else {
                    false
                };
                if better {
                    best_ratio = ratio.min(best_ratio);
                    best_alpha = alpha.abs();
                    enter = Some(j);
                }
            }
            let Some(j) = enter else {
                return LpStatus::Infeasible;
            };
            if best_ratio <= 1e-12 {
                streak += 1;
                if streak > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                streak = 0;
            }
            let alpha = self.t[r * w + j];
            let delta = (self.beta[r] - target) / alpha;
            let entering_value = self.value(j) + delta;
            for i in 0..m {
                let a = self.t[i * w + j];
                if a != 0.0 {
                    self.beta[i] -= a * delta;
                }
            }
            self.pivot(r, j);
            self.beta[r] = entering_value;
            self.state[out] = if below { ColState::Lower } else { ColState::Upper };
            if self.is_artificial(out) {
                self.upper[out] = 0.0;
                self.state[out] = ColState::Lower;
            }
        }
        LpStatus::Numerical
    }

    /// True when every nonbasic reduced cost has the sign optimality requires.
    pub fn is_dual_feasible(&self) -> bool {
        let tol = 1e-7 * (1.0 + self.sf.cost.iter().fold(0.0f64, |a, c| a.max(c.abs())));
        (0..self.w).all(|j| match self.state[j] {
            ColState::Basic => true,
            _ if self.lower[j] == self.upper[j] => true,
            ColState::Lower => self.d[j] >= -tol,
            ColState::Upper => self.d[j] <= tol,
        })
    }

    /// Changes bounds of a structural column, moving it if nonbasic.
    pub fn set_bounds(&mut self, j: usize, lower: f64, upper: f64) {
        let old = self.value(j);
        self.lower[j] = lower;
        self.upper[j] = upper;
        match self.state[j] {
            ColState::Basic => {}
            st => {
                let (new_state, new_val) = if st == ColState::Upper && upper.is_finite() {
                    (ColState::Upper, upper)
                } else {
                    (ColState::Lower, lower)
                };
                self.state[j] = new_state;
                let delta = new_val - old;
                if delta != 0.0 {
                    let w = self.w;
                    for i in 0..self.m {
                        let a = self.t[i * w + j];
                        if a != 0.0 {
                            self.beta[i] -= a * delta;
                        }
                    }
                }
            }
        }
    }

    /// Structural column values.
    pub fn x(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.value(j)).collect()
    }

    /// Objective in the internal minimization sense.
    pub fn objective(&self) -> f64 {
        (0..self.n).map(|j| self.sf.cost[j] * self.value(j)).sum()
    }

    pub fn snapshot(&self) -> Basis {
        let mut at_upper = vec![0u64; self.w.div_ceil(64)];
        for j in 0..self.w {
            if self.state[j] == ColState::Upper {
                at_upper[j / 64] |= 1 << (j % 64);
            }
        }
        Basis {
            basis: self.basis.iter().map(|&b| b as u32).collect(),
            at_upper,
        }
    }

    /// Rebuilds `B⁻¹[A I]`, basic values and reduced costs for `basis` under
    /// the given structural bounds. Returns false on a singular basis.
    pub fn restore(&mut self, basis: &Basis, lower: &[f64], upper: &[f64]) -> bool {
        let (n, m, w) = (self.n, self.m, self.w);
        self.lower[..n].copy_from_slice(lower);
        self.upper[..n].copy_from_slice(upper);
        for i in 0..m {
            self.upper[w + i] = 0.0;
        }
        let mut t = vec![0.0; m * w];
        let mut rhs = self.sf.b.clone();
        for i in 0..m {
            t[i * w..i * w + n].copy_from_slice(&self.sf.a[i * n..(i + 1) * n]);
            t[i * w + n + i] = 1.0;
        }
        self.state.iter_mut().for_each(|s| *s = ColState::Lower);
        self.row_of.iter_mut().for_each(|r| *r = usize::MAX);
        let mut assigned = vec![false; m];
        let mut new_basis = vec![usize::MAX; m];
        // artificial columns are signed unit vectors on their own row
        for &b in &basis.basis {
            let b = b as usize;
            if b >= w {
                let i = b - w;
                let s = self.art_sign[i];
                if s < 0.0 {
                    t[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = -*v);
                    rhs[i] = -rhs[i];
                }
                assigned[i] = true;
                new_basis[i] = b;
            }
        }
        for &b in &basis.basis {
            let b = b as usize;
            if b >= w {
                continue;
            }
            let mut piv_row = None;
            let mut best = 1e-11;
            for i in 0..m {
                if !assigned[i] && t[i * w + b].abs() > best {
                    best = t[i * w + b].abs();
                    piv_row = Some(i);
                }
            }
            let Some(r) = piv_row else {
                return false;
            };
            assigned[r] = true;
            new_basis[r] = b;
            let inv = 1.0 / t[r * w + b];
            t[r * w..(r + 1) * w].iter_mut().for_each(|v| *v *= inv);
            t[r * w + b] = 1.0;
            rhs[r] *= inv;
            let prow: Vec<f64> = t[r * w..(r + 1) * w].to_vec();
            for i in 0..m {
                if i == r {
                    continue;
                }
                let f = t[i * w + b];
                if f != 0.0 {
                    for (o, p) in t[i * w..(i + 1) * w].iter_mut().zip(&prow) {
                        *o -= f * p;
                    }
                    t[i * w + b] = 0.0;
                    rhs[i] -= f * rhs[r];
                }
            }
        }
        self.t = t;
        self.basis = new_basis;
        for (i, &b) in self.basis.iter().enumerate() {
            self.state[b] = ColState::Basic;
            self.row_of[b] = i;
        }
        for j in 0..w {
            if self.state[j] != ColState::Basic && basis.is_upper(j) && self.upper[j].is_finite() {
                self.state[j] = ColState::Upper;
            }
        }
        for i in 0..m {
            let mut v = rhs[i];
            let row = &self.t[i * w..(i + 1) * w];
            for j in 0..w {
                if self.state[j] != ColState::Basic && row[j] != 0.0 {
                    v -= row[j] * self.value(j);
                }
            }
            self.beta[i] = v;
        }
        self.compute_reduced_costs(false);
        self.pivots = 0;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::{MilpModel, VarKind};

    fn solve_model(model: &MilpModel) -> (LpStatus, Vec<f64>, f64) {
        let sf = StandardForm::from_model(model);
        let lo: Vec<f64> = model.variables.iter().map(|v| v.lower).collect();
        let up: Vec<f64> = model.variables.iter().map(|v| v.upper).collect();
        let mut tab = Tableau::new(&sf, &lo, &up);
        let st = tab.solve();
        (st, tab.x(), tab.objective() * sf.obj_sign)
    }

    #[test]
    fn two_var_lp_vertex() {
        let mut m = MilpModel::new(ObjSense::Maximize);
        let x1 = m.add_var("x1", VarKind::Continuous, 0.0, 1.0);
        let x2 = m.add_var("x2", VarKind::Continuous, 0.0, 1.0);
        m.objective = vec![(x1, 5.0), (x2, 4.0)];
        m.add_row(vec![(x1, 2.0), (x2, 3.0)], RowSense::Le, 4.0);
        let (st, x, obj) = solve_model(&m);
        assert_eq!(st, LpStatus::Optimal);
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 2.0 / 3.0).abs() < 1e-9);
        assert!((obj - 23.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn restore_reproduces_solution() {
        let mut m = MilpModel::new(ObjSense::Minimize);
        let a = m.add_var("a", VarKind::Continuous, 0.0, 10.0);
        let b = m.add_var("b", VarKind::Continuous, 1.0, 10.0);
        m.objective = vec![(a, 2.0), (b, 3.0)];
        m.add_row(vec![(a, 1.0), (b, 1.0)], RowSense::Ge, 4.0);
        m.add_row(vec![(a, 1.0), (b, -1.0)], RowSense::Eq, 1.0);
        let sf = StandardForm::from_model(&m);
        let (lo, up) = (vec![0.0, 1.0], vec![10.0, 10.0]);
        let mut tab = Tableau::new(&sf, &lo, &up);
        assert_eq!(tab.solve(), LpStatus::Optimal);
        let x = tab.x();
        let snap = tab.snapshot();
        let mut other = Tableau::new(&sf, &lo, &up);
        assert!(other.restore(&snap, &lo, &up));
        let y = other.x();
        assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        assert!(other.is_dual_feasible());
        // tighten a bound and recover with the dual simplex
        other.set_bounds(1, 2.0, 10.0);
        assert_eq!(other.dual(), LpStatus::Optimal);
        let z = other.x();
        assert!((z[0] - 3.0).abs() < 1e-9 && (z[1] - 2.0).abs() < 1e-9);
        // a <= 2 forces a + b <= 3
        other.set_bounds(0, 0.0, 2.0);
        assert_eq!(other.dual(), LpStatus::Infeasible);
    }
}
