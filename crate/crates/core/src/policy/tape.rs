//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the indices of its inputs. Inputs always precede their consumers,
//! so a single reverse sweep over the node list visits each node once.
//! Column vectors are `n x 1` matrices and scalars are `1 x 1`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const RMS_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gather { table: usize, rows: Vec<usize> },
    SliceRows { src: usize, start: usize },
    RmsNorm { src: usize, inv_rms: Vec<f64> },
    Gelu(usize),
    CausalSoftmax(usize),
    PickLogSoftmax { logits: usize, targets: Vec<usize>, probs: Array2<f64> },
    Exp(usize),
    ExpM1(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    Min(usize, usize),
    Mean(usize),
    Sum(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Min(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::CausalSoftmax(a)
            | Op::Exp(a)
            | Op::ExpM1(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::SliceRows { src, .. } | Op::RmsNorm { src, .. } | Op::Clamp { src, .. } => vec![src],
            Op::PickLogSoftmax { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn column(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap())
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.dot(&self.nodes[ib].value);
        self.push(v, Op::MatMul(ia, ib))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.dot(&self.nodes[ib].value.t());
        self.push(v, Op::MatMulBt(ia, ib))
    }

    fn same_shape(&self, ia: usize, ib: usize) {
        assert_eq!(
            self.nodes[ia].value.dim(),
            self.nodes[ib].value.dim(),
            "elementwise shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib);
        let v = &self.nodes[ia].value + &self.nodes[ib].value;
        self.push(v, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib);
        let v = &self.nodes[ia].value - &self.nodes[ib].value;
        self.push(v, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib);
        let v = &self.nodes[ia].value * &self.nodes[ib].value;
        self.push(v, Op::Mul(ia, ib))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.idx(a), self.idx(row));
        assert_eq!(self.nodes[ir].value.nrows(), 1);
        let v = &self.nodes[ia].value + &self.nodes[ir].value;
        self.push(v, Op::AddRow(ia, ir))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value * c;
        self.push(v, Op::Scale(ia, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value + c;
        self.push(v, Op::AddScalar(ia))
    }

    /// Rows `rows` of `table`, in order.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let it = self.idx(table);
        let t = &self.nodes[it].value;
        let v = t.select(Axis(0), rows);
        self.push(v, Op::Gather { table: it, rows: rows.to_vec() })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        let is = self.idx(src);
        let v = self.nodes[is].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows { src: is, start })
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let x = &self.nodes[is].value;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            row.mapv_inplace(|v| v * r);
            inv.push(r);
        }
        self.push(out, Op::RmsNorm { src: is, inv_rms: inv })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let v = self.nodes[is].value.mapv(gelu);
        self.push(v, Op::Gelu(is))
    }

    /// Row-wise softmax of a square score matrix with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let x = &self.nodes[is].value;
        assert_eq!(x.nrows(), x.ncols(), "causal softmax needs square scores");
        let mut out = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            let row = x.slice(s![i, ..=i]);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - m).exp();
                out[[i, j]] = e;
                z += e;
            }
            for j in 0..=i {
                out[[i, j]] /= z;
            }
        }
        self.push(out, Op::CausalSoftmax(is))
    }

    /// Column of `log_softmax(logits[i])[targets[i]]`.
    pub fn pick_log_softmax(&mut self, logits: Var, targets: &[usize]) -> Var {
        let il = self.idx(logits);
        let x = &self.nodes[il].value;
        assert_eq!(x.nrows(), targets.len());
        let mut probs = Array2::zeros(x.dim());
        let mut out = Array2::zeros((targets.len(), 1));
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let lse = log_sum_exp(row.as_slice().unwrap());
            out[[i, 0]] = row[t] - lse;
            Zip::from(probs.row_mut(i)).and(&row).for_each(|p, &l| *p = (l - lse).exp());
        }
        self.push(out, Op::PickLogSoftmax { logits: il, targets: targets.to_vec(), probs })
    }

    pub fn exp(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let v = self.nodes[is].value.mapv(f64::exp);
        self.push(v, Op::Exp(is))
    }

    /// `exp(x) - 1`, accurate near zero.
    pub fn exp_m1(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let v = self.nodes[is].value.mapv(f64::exp_m1);
        self.push(v, Op::ExpM1(is))
    }

    pub fn clamp(&mut self, src: Var, lo: f64, hi: f64) -> Var {
        let is = self.idx(src);
        let v = self.nodes[is].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { src: is, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib);
        let mut v = self.nodes[ia].value.clone();
        Zip::from(&mut v).and(&self.nodes[ib].value).for_each(|x, &y| *x = x.min(y));
        self.push(v, Op::Min(ia, ib))
    }

    pub fn mean(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let x = &self.nodes[is].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(is))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let is = self.idx(src);
        let v = Array2::from_elem((1, 1), self.nodes[is].value.sum());
        self.push(v, Op::Sum(is))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::Internal("backward from a variable not recorded on this tape".into()));
        }
        if self.nodes[output.index].value.dim() != (1, 1) {
            return Err(Error::Internal("backward needs a scalar objective".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.index + 1];
        grads[output.index] = Some(Array2::ones((1, 1)));
        let mut visited = 0;
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            if node.op.parents().iter().any(|&p| p >= i) {
                return Err(Error::Internal(format!("node {i} depends on a later node")));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads, visited })
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.dot(&val(b).t()));
                }
                if wants(b) {
                    accumulate(grads, b, val(a).t().dot(g));
                }
            }
            &Op::MatMulBt(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.dot(val(b)));
                }
                if wants(b) {
                    accumulate(grads, b, g.t().dot(val(a)));
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, -g);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g * val(b));
                }
                if wants(b) {
                    accumulate(grads, b, g * val(a));
                }
            }
            &Op::AddRow(a, r) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(r) {
                    accumulate(grads, r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Scale(a, c) => accumulate(grads, a, g * c),
            &Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            Op::Gather { table, rows } => {
                let mut d = Array2::zeros(val(*table).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                accumulate(grads, *table, d);
            }
            &Op::SliceRows { src, start } => {
                let mut d = Array2::zeros(val(src).dim());
                d.slice_mut(s![start..start + g.nrows(), ..]).assign(g);
                accumulate(grads, src, d);
            }
            Op::RmsNorm { src, inv_rms } => {
                let y = val(i);
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for (k, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(k);
                    let dot = row.dot(&yr) / n;
                    let r = inv_rms[k];
                    Zip::from(&mut row).and(&yr).for_each(|dv, &yv| *dv = r * (*dv - yv * dot));
                }
                accumulate(grads, *src, d);
            }
            &Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|dv, &x| *dv *= gelu_grad(x));
                accumulate(grads, a, d);
            }
            &Op::CausalSoftmax(a) => {
                let p = val(i);
                let mut d = Array2::zeros(p.dim());
                for r in 0..p.nrows() {
                    let dot: f64 = (0..=r).map(|c| g[[r, c]] * p[[r, c]]).sum();
                    for c in 0..=r {
                        d[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                accumulate(grads, a, d);
            }
            Op::PickLogSoftmax { logits, targets, probs } => {
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g[[r, 0]];
                    let mut row = d.row_mut(r);
                    row.mapv_inplace(|p| -gr * p);
                    row[t] += gr;
                }
                accumulate(grads, *logits, d);
            }
            &Op::Exp(a) => accumulate(grads, a, g * val(i)),
            &Op::ExpM1(a) => accumulate(grads, a, g * &val(i).mapv(|e| e + 1.0)),
            &Op::Clamp { src, lo, hi } => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(src))
                    .for_each(|dv, &x| if !(lo..=hi).contains(&x) { *dv = 0.0 });
                accumulate(grads, src, d);
            }
            &Op::Min(a, b) => {
                let mut da = g.clone();
                let mut db = g.clone();
                Zip::from(&mut da)
                    .and(&mut db)
                    .and(val(a))
                    .and(val(b))
                    .for_each(|ga, gb, &x, &y| if x <= y { *gb = 0.0 } else { *ga = 0.0 });
                if wants(a) {
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    accumulate(grads, b, db);
                }
            }
            &Op::Mean(a) => {
                let x = val(a);
                accumulate(grads, a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            &Op::Sum(a) => accumulate(grads, a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], j: usize, delta: Array2<f64>) {
    match &mut grads[j] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Adjoints from one backward sweep.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array2<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Number of nodes the sweep propagated through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
