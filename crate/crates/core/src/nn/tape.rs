//! Reverse-mode autodiff over row-major 2-D tensors.

use serde::{Deserialize, Serialize};

/// Row-major matrix of 64-bit values. Vectors are `1×n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub(crate) type Id = usize;

enum Op {
    Leaf,
    MatMul(Id, Id),
    Add(Id, Id),
    /// `a + bias` with a `1×n` bias broadcast over rows.
    AddRow(Id, Id),
    Mul(Id, Id),
    Sigmoid(Id),
    Tanh(Id),
    Concat(Vec<Id>),
    Slice(Id, usize),
    /// Per-row dot product, `n×1`.
    RowDot(Id, Id),
    SoftmaxRows(Id),
    /// Rows of `x` scaled by column `k` of `w`.
    ScaleByCol { w: Id, k: usize, x: Id },
    /// Gates `[i|f|g|o]` and previous cell state to `[h|c]`.
    Lstm(Id, Id),
    /// Weighted sum of elementwise logistic losses.
    BceLogits { logits: Id, target: Id, weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A computation tape. Nodes are appended in evaluation order.
pub(crate) struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += a · b`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Id {
        self.nodes.push(Node { value, op, tracked });
        self.nodes.len() - 1
    }

    fn tracked(&self, ids: &[Id]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// A parameter leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Id {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Id {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: Id) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        matmul_acc(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.cols);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn add_row(&mut self, a: Id, bias: Id) -> Id {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert!(bv.rows == 1 && bv.cols == av.cols, "bias shape mismatch");
        let mut out = av.clone();
        for row in out.data.chunks_mut(av.cols) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let t = self.tracked(&[a, bias]);
        self.push(out, Op::AddRow(a, bias), t)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::Mul(a, b), t)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let av = &self.nodes[a].value;
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| sigmoid(x)).collect());
        let t = self.tracked(&[a]);
        self.push(out, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let av = &self.nodes[a].value;
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| x.tanh()).collect());
        let t = self.tracked(&[a]);
        self.push(out, Op::Tanh(a), t)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Id]) -> Id {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let t = self.tracked(parts);
        self.push(out, Op::Concat(parts.to_vec()), t)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Id, start: usize, len: usize) -> Id {
        let av = &self.nodes[a].value;
        assert!(start + len <= av.cols, "slice out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::Slice(a, start), t)
    }

    pub fn row_dot(&mut self, a: Id, b: Id) -> Id {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::RowDot(a, b), t)
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let mut out = self.nodes[a].value.clone();
        for row in out.data.chunks_mut(out.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), t)
    }

    pub fn scale_by_col(&mut self, w: Id, k: usize, x: Id) -> Id {
        let (wv, xv) = (&self.nodes[w].value, &self.nodes[x].value);
        assert_eq!(wv.rows, xv.rows, "scale_by_col row mismatch");
        let mut out = xv.clone();
        for r in 0..xv.rows {
            let s = wv.get(r, k);
            for v in &mut out.data[r * xv.cols..(r + 1) * xv.cols] {
                *v *= s;
            }
        }
        let t = self.tracked(&[w, x]);
        self.push(out, Op::ScaleByCol { w, k, x }, t)
    }

    pub fn lstm(&mut self, gates: Id, c_prev: Id) -> Id {
        let (gv, cv) = (&self.nodes[gates].value, &self.nodes[c_prev].value);
        let h = cv.cols;
        assert_eq!(gv.cols, 4 * h, "lstm gate width mismatch");
        assert_eq!(gv.rows, cv.rows, "lstm batch mismatch");
        let mut out = Tensor::zeros(gv.rows, 2 * h);
        for r in 0..gv.rows {
            let g = gv.row(r);
            let cp = cv.row(r);
            let o = &mut out.data[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let ig = sigmoid(g[j]);
                let fg = sigmoid(g[h + j]);
                let gg = g[2 * h + j].tanh();
                let og = sigmoid(g[3 * h + j]);
                let c = fg * cp[j] + ig * gg;
                o[j] = og * c.tanh();
                o[h + j] = c;
            }
        }
        let t = self.tracked(&[gates, c_prev]);
        self.push(out, Op::Lstm(gates, c_prev), t)
    }

    /// `weight · Σ [max(z,0) − z·y + ln(1 + e^{−|z|})]`, a `1×1` node.
    pub fn bce_logits(&mut self, logits: Id, target: Id, weight: f64) -> Id {
        let (zv, yv) = (&self.nodes[logits].value, &self.nodes[target].value);
        assert_eq!(zv.shape(), yv.shape(), "bce shape mismatch");
        let sum: f64 = zv
            .data
            .iter()
            .zip(&yv.data)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let t = self.tracked(&[logits]);
        self.push(Tensor::from_vec(1, 1, vec![weight * sum]), Op::BceLogits { logits, target, weight }, t)
    }

    fn acc(&mut self, id: Id, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].tracked {
            return;
        }
        let n = self.nodes[id].value.data.len();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, root: Id) {
        assert_eq!(self.nodes[root].value.data.len(), 1, "backward needs a scalar root");
        self.grads = vec![None; self.nodes.len()];
        self.grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
    }

    fn backprop_node(&mut self, id: Id, g: &[f64]) {
        // Ops are matched by reference; values are re-borrowed per arm.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows, self.nodes[a].value.cols);
                let n = self.nodes[b].value.cols;
                if self.nodes[a].tracked {
                    let bv = self.nodes[b].value.data.clone();
                    self.acc(a, |ga| matmul_nt_acc(g, &bv, ga, m, n, k));
                }
                if self.nodes[b].tracked {
                    let av = self.nodes[a].value.data.clone();
                    self.acc(b, |gb| matmul_tn_acc(&av, g, gb, m, k, n));
                }
            }
            &Op::Add(a, b) => {
                self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::AddRow(a, bias) => {
                let cols = self.nodes[a].value.cols;
                self.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(bias, |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].tracked {
                    let bv = self.nodes[b].value.data.clone();
                    self.acc(a, |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(g).zip(&bv) {
                            *x += y * z;
                        }
                    });
                }
                if self.nodes[b].tracked {
                    let av = self.nodes[a].value.data.clone();
                    self.acc(b, |gb| {
                        for ((x, y), z) in gb.iter_mut().zip(g).zip(&av) {
                            *x += y * z;
                        }
                    });
                }
            }
            &Op::Sigmoid(a) => {
                let out = self.nodes[id].value.data.clone();
                self.acc(a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(&out) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            &Op::Tanh(a) => {
                let out = self.nodes[id].value.data.clone();
                self.acc(a, |ga| {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(&out) {
                        *x += y * (1.0 - t * t);
                    }
                });
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let cols = self.nodes[id].value.cols;
                let rows = self.nodes[id].value.rows;
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p].value.cols;
                    self.acc(p, |gp| {
                        for r in 0..rows {
                            for (x, y) in gp[r * pc..(r + 1) * pc].iter_mut().zip(&g[r * cols + off..r * cols + off + pc]) {
                                *x += y;
                            }
                        }
                    });
                    off += pc;
                }
            }
            &Op::Slice(a, start) => {
                let (rows, len) = (self.nodes[id].value.rows, self.nodes[id].value.cols);
                let cols = self.nodes[a].value.cols;
                self.acc(a, |ga| {
                    for r in 0..rows {
                        for (x, y) in ga[r * cols + start..r * cols + start + len].iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *x += y;
                        }
                    }
                });
            }
            &Op::RowDot(a, b) => {
                let cols = self.nodes[a].value.cols;
                for (dst, src) in [(a, b), (b, a)] {
                    if !self.nodes[dst].tracked {
                        continue;
                    }
                    let sv = self.nodes[src].value.data.clone();
                    self.acc(dst, |gd| {
                        for (r, gr) in g.iter().enumerate() {
                            for (x, y) in gd[r * cols..(r + 1) * cols].iter_mut().zip(&sv[r * cols..(r + 1) * cols]) {
                                *x += gr * y;
                            }
                        }
                    });
                }
            }
            &Op::SoftmaxRows(a) => {
                let out = self.nodes[id].value.clone();
                self.acc(a, |ga| {
                    for r in 0..out.rows {
                        let y = out.row(r);
                        let gr = &g[r * out.cols..(r + 1) * out.cols];
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..out.cols {
                            ga[r * out.cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            &Op::ScaleByCol { w, k, x } => {
                let xv = self.nodes[x].value.clone();
                let wv = self.nodes[w].value.clone();
                let cols = xv.cols;
                self.acc(x, |gx| {
                    for r in 0..xv.rows {
                        let s = wv.get(r, k);
                        for (p, q) in gx[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *p += s * q;
                        }
                    }
                });
                self.acc(w, |gw| {
                    for r in 0..xv.rows {
                        let d: f64 = xv.row(r).iter().zip(&g[r * cols..(r + 1) * cols]).map(|(p, q)| p * q).sum();
                        gw[r * wv.cols + k] += d;
                    }
                });
            }
            &Op::Lstm(gates, c_prev) => {
                let gv = self.nodes[gates].value.clone();
                let cv = self.nodes[c_prev].value.clone();
                let out = &self.nodes[id].value;
                let h = cv.cols;
                let mut dgates = vec![0.0; gv.data.len()];
                let mut dcp = vec![0.0; cv.data.len()];
                for r in 0..gv.rows {
                    let gr = gv.row(r);
                    let cp = cv.row(r);
                    let orow = out.row(r);
                    let dout = &g[r * 2 * h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let ig = sigmoid(gr[j]);
                        let fg = sigmoid(gr[h + j]);
                        let gg = gr[2 * h + j].tanh();
                        let og = sigmoid(gr[3 * h + j]);
                        let tc = orow[h + j].tanh();
                        let dh = dout[j];
                        let dc = dout[h + j] + dh * og * (1.0 - tc * tc);
                        let base = r * 4 * h;
                        dgates[base + j] = dc * gg * ig * (1.0 - ig);
                        dgates[base + h + j] = dc * cp[j] * fg * (1.0 - fg);
                        dgates[base + 2 * h + j] = dc * ig * (1.0 - gg * gg);
                        dgates[base + 3 * h + j] = dh * tc * og * (1.0 - og);
                        dcp[r * h + j] = dc * fg;
                    }
                }
                self.acc(gates, |x| x.iter_mut().zip(&dgates).for_each(|(p, q)| *p += q));
                self.acc(c_prev, |x| x.iter_mut().zip(&dcp).for_each(|(p, q)| *p += q));
            }
            &Op::BceLogits { logits, target, weight } => {
                let zv = self.nodes[logits].value.data.clone();
                let yv = self.nodes[target].value.data.clone();
                let s = g[0] * weight;
                self.acc(logits, |gz| {
                    for ((x, z), y) in gz.iter_mut().zip(&zv).zip(&yv) {
                        *x += s * (sigmoid(*z) - y);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    /// Central differences on every entry of every parameter leaf.
    fn check(params: &[Tensor], build: impl Fn(&mut Graph, &[Id]) -> Id) {
        let mut g = Graph::new();
        let ids: Vec<Id> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = build(&mut g, &ids);
        g.backward(root);
        let eval = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<Id> = ps.iter().map(|p| g.param(p.clone())).collect();
            let root = build(&mut g, &ids);
            g.value(root).data[0]
        };
        for (pi, p) in params.iter().enumerate() {
            let analytic = g.grad(ids[pi]).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; p.data.len()]);
            for k in 0..p.data.len() {
                let mut plus = params.to_vec();
                plus[pi].data[k] += 1e-6;
                let mut minus = params.to_vec();
                minus[pi].data[k] -= 1e-6;
                let numeric = (eval(&plus) - eval(&minus)) / 2e-6;
                assert!(
                    (numeric - analytic[k]).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} entry {k}: numeric {numeric} analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(2, 1, &[5.0, 6.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data, vec![17.0, 39.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 4));
        let s = g.softmax_rows(a);
        assert!(g.value(s).data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradients_of_every_op() {
        let a = t(2, 3, &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
        let b = t(3, 2, &[0.2, -0.6, 0.4, 0.3, -0.1, 0.8]);
        let bias = t(1, 2, &[0.05, -0.3]);
        let target = t(2, 2, &[1.0, 0.0, 0.05, 0.95]);
        check(&[a, b, bias], |g, p| {
            let m = g.matmul(p[0], p[1]);
            let m = g.add_row(m, p[2]);
            let s = g.sigmoid(m);
            let th = g.tanh(m);
            let prod = g.mul(s, th);
            let sum = g.add(prod, m);
            let cat = g.concat(&[sum, p[0]]);
            let sl = g.slice(cat, 1, 2);
            let sm = g.softmax_rows(sl);
            let rd = g.row_dot(sm, sum);
            let both = g.concat(&[rd, rd]);
            let sc = g.scale_by_col(both, 1, sm);
            let y = g.constant(target.clone());
            g.bce_logits(sc, y, 0.5)
        });
    }

    #[test]
    fn lstm_gradient() {
        let gates = t(2, 8, &[0.1, -0.3, 0.5, 0.2, -0.7, 0.4, 0.9, -0.1, 0.3, 0.2, -0.5, 0.6, 0.1, -0.2, 0.8, 0.0]);
        let c = t(2, 2, &[0.4, -0.6, 0.2, 0.9]);
        let w = t(4, 1, &[0.3, -0.5, 0.7, 0.2]);
        check(&[gates, c, w], |g, p| {
            let hc = g.lstm(p[0], p[1]);
            let z = g.matmul(hc, p[2]);
            let y = g.constant(t(2, 1, &[1.0, 0.0]));
            g.bce_logits(z, y, 1.0)
        });
    }

    #[test]
    fn lstm_zero_state_stays_zero() {
        let mut g = Graph::new();
        let gates = g.constant(Tensor::zeros(1, 12));
        let c = g.constant(Tensor::zeros(1, 3));
        let out = g.lstm(gates, c);
        assert!(g.value(out).data.iter().all(|&v| v == 0.0));
    }
}
