//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Values are dynamic-dimension `f64` arrays. Each forward op records its
//! inputs and result; `backward` sweeps the tape once in reverse and
//! accumulates adjoints. Only nodes transitively reachable from a tracked
//! leaf carry gradients, so constants cost nothing on the backward pass.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub usize);

enum Op {
    /// Tracked input (parameter).
    Leaf,
    /// Untracked input.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// mat (n×m) + row vector (m), broadcast over rows.
    AddRowVec(usize, usize),
    /// mat (n×m) + column vector (n), broadcast over columns.
    AddColVec(usize, usize),
    /// 2-D matrix product.
    MatMul(usize, usize),
    /// a · bᵀ for 2-D matrices.
    MatMulBT(usize, usize),
    /// logsumexp over axis 1 of a 2-D matrix → vector of length nrows.
    LseRows(usize),
    /// logsumexp over axis 0 of a 2-D matrix → vector of length ncols.
    LseCols(usize),
    /// vertical concatenation of two 2-D matrices.
    ConcatRows(usize, usize),
    Exp(usize),
    /// ln(max(x, floor))
    LnClamp(usize, f64),
    /// clamp to [lo, hi]
    Clamp(usize, f64, f64),
    Sigmoid(usize),
    Relu(usize),
    /// softmax over the last axis.
    SoftmaxLast(usize),
    /// sum of all entries → scalar (0-d).
    Sum(usize),
    /// scalar (0-d) times tensor, broadcast.
    MulScalarV(usize, usize),
    /// outer product of two 1-D vectors.
    Outer(usize, usize),
    /// mat (m×m) times tensor (r×m×m), broadcast over the first axis.
    MulBcastLast2(usize, usize),
    /// row gather from a 2-D matrix.
    GatherRows(usize, Rc<Vec<usize>>),
    /// scatter-add rows of a 2-D matrix into `nrows` target rows.
    ScatterAddRows(usize, Rc<Vec<usize>>),
    /// per-row scaling by a constant vector.
    ScaleRowsConst(usize, Rc<Vec<f64>>),
    /// diag(vec) · mat where vec is a tracked 1-D vector.
    RowScale(usize, usize),
    /// out_r = Sᵀ P_r S for P (r×m×m), S (m×o) → (r×o×o).
    Project(usize, usize),
    /// out_r = S A_r Sᵀ for constant A (r×o×o), S (m×o) → (r×m×m).
    LiftState(usize, Rc<Arr>),
    /// pick one index of the last axis, dropping that axis.
    SelectLast(usize, usize),
    /// view the same entries under a different shape.
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Arr,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mat<'a>(a: &'a Arr) -> ndarray::ArrayView2<'a, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("expected 2-D value")
}
fn vec1<'a>(a: &'a Arr) -> ndarray::ArrayView1<'a, f64> {
    a.view().into_dimensionality::<ndarray::Ix1>().expect("expected 1-D value")
}

fn logsumexp_axis(a: &ndarray::ArrayView2<f64>, axis: Axis) -> ndarray::Array1<f64> {
    let max = a.fold_axis(axis, f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = ndarray::Array1::zeros(max.len());
    for (i, (lane, &m)) in a.axis_iter(Axis(1 - axis.0)).zip(max.iter()).enumerate() {
        if m == f64::NEG_INFINITY {
            out[i] = f64::NEG_INFINITY;
        } else {
            out[i] = m + lane.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Arr) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowVec(a, b)
            | Op::AddColVec(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulBT(a, b)
            | Op::ConcatRows(a, b)
            | Op::MulScalarV(a, b)
            | Op::Outer(a, b)
            | Op::MulBcastLast2(a, b)
            | Op::RowScale(a, b)
            | Op::Project(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::LseRows(a)
            | Op::LseCols(a)
            | Op::Exp(a)
            | Op::LnClamp(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::SoftmaxLast(a)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::ScaleRowsConst(a, _)
            | Op::LiftState(a, _)
            | Op::SelectLast(a, _)
            | Op::Reshape(a) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(Op::Leaf, value)
    }
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(Op::Const, value)
    }
    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a.0, b.0), v)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a.0, b.0), v)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a.0, b.0), v)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        self.push(Op::Neg(a.0), v)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value * s;
        self.push(Op::Scale(a.0, s), v)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value + s;
        self.push(Op::AddScalar(a.0), v)
    }
    /// 1 - x
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.neg(a);
        self.add_scalar(neg, 1.0)
    }

    pub fn add_row_vec(&mut self, m: Var, row: Var) -> Var {
        let v = &mat(&self.nodes[m.0].value) + &vec1(&self.nodes[row.0].value);
        self.push(Op::AddRowVec(m.0, row.0), v.into_dyn())
    }
    pub fn add_col_vec(&mut self, m: Var, col: Var) -> Var {
        let c = vec1(&self.nodes[col.0].value).insert_axis(Axis(1)).to_owned();
        let v = &mat(&self.nodes[m.0].value) + &c;
        self.push(Op::AddColVec(m.0, col.0), v.into_dyn())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mat(&self.nodes[a.0].value).dot(&mat(&self.nodes[b.0].value));
        self.push(Op::MatMul(a.0, b.0), v.into_dyn())
    }
    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = mat(&self.nodes[a.0].value).dot(&mat(&self.nodes[b.0].value).t());
        self.push(Op::MatMulBT(a.0, b.0), v.into_dyn())
    }

    pub fn lse_rows(&mut self, a: Var) -> Var {
        let v = logsumexp_axis(&mat(&self.nodes[a.0].value), Axis(1));
        self.push(Op::LseRows(a.0), v.into_dyn())
    }
    pub fn lse_cols(&mut self, a: Var) -> Var {
        let v = logsumexp_axis(&mat(&self.nodes[a.0].value), Axis(0));
        self.push(Op::LseCols(a.0), v.into_dyn())
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(
            Axis(0),
            &[mat(&self.nodes[a.0].value), mat(&self.nodes[b.0].value)],
        )
        .expect("concat shape mismatch");
        self.push(Op::ConcatRows(a.0, b.0), v.into_dyn())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(Op::Exp(a.0), v)
    }
    pub fn ln_clamp(&mut self, a: Var, floor: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(floor).ln());
        self.push(Op::LnClamp(a.0, floor), v)
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a.0, lo, hi), v)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a.0), v)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        let last = x.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.push(Op::SoftmaxLast(a.0), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.push(Op::Sum(a.0), v)
    }

    pub fn mul_scalar_v(&mut self, s: Var, t: Var) -> Var {
        let sv = *self.nodes[s.0].value.first().expect("scalar value");
        let v = &self.nodes[t.0].value * sv;
        self.push(Op::MulScalarV(s.0, t.0), v)
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let uu = vec1(&self.nodes[u.0].value).to_owned();
        let vv = vec1(&self.nodes[v.0].value).to_owned();
        let mut out = ndarray::Array2::zeros((uu.len(), vv.len()));
        for i in 0..uu.len() {
            for j in 0..vv.len() {
                out[(i, j)] = uu[i] * vv[j];
            }
        }
        self.push(Op::Outer(u.0, v.0), out.into_dyn())
    }

    /// mat (m×m) ⊙ tensor (r×m×m), broadcasting mat across the first axis.
    pub fn mul_bcast_last2(&mut self, m: Var, t: Var) -> Var {
        let mm = mat(&self.nodes[m.0].value).to_owned();
        let tt = self.nodes[t.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = tt.to_owned();
        for mut slice in out.outer_iter_mut() {
            slice *= &mm;
        }
        self.push(Op::MulBcastLast2(m.0, t.0), out.into_dyn())
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let m = mat(&self.nodes[a.0].value);
        let mut out = ndarray::Array2::zeros((idx.len(), m.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&m.row(i));
        }
        self.push(Op::GatherRows(a.0, idx), out.into_dyn())
    }

    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, nrows: usize) -> Var {
        let m = mat(&self.nodes[a.0].value);
        let mut out = ndarray::Array2::zeros((nrows, m.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &m.row(k);
        }
        self.push(Op::ScatterAddRows(a.0, idx), out.into_dyn())
    }

    pub fn scale_rows_const(&mut self, a: Var, scales: Rc<Vec<f64>>) -> Var {
        let m = mat(&self.nodes[a.0].value);
        let mut out = m.to_owned();
        for (k, mut row) in out.rows_mut().into_iter().enumerate() {
            row *= scales[k];
        }
        self.push(Op::ScaleRowsConst(a.0, scales), out.into_dyn())
    }

    /// diag(vec) · mat
    pub fn row_scale(&mut self, v: Var, m: Var) -> Var {
        let vv = vec1(&self.nodes[v.0].value).to_owned();
        let mut out = mat(&self.nodes[m.0].value).to_owned();
        for (k, mut row) in out.rows_mut().into_iter().enumerate() {
            row *= vv[k];
        }
        self.push(Op::RowScale(v.0, m.0), out.into_dyn())
    }

    /// out_r = Sᵀ P_r S for each relation slice r.
    pub fn project(&mut self, p: Var, s: Var) -> Var {
        let pp = self.nodes[p.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let ss = mat(&self.nodes[s.0].value);
        let o = ss.ncols();
        let r = pp.shape()[0];
        let mut out = ndarray::Array3::zeros((r, o, o));
        for k in 0..r {
            let tmp = ss.t().dot(&pp.index_axis(Axis(0), k));
            out.index_axis_mut(Axis(0), k).assign(&tmp.dot(&ss));
        }
        self.push(Op::Project(p.0, s.0), out.into_dyn())
    }

    /// out_r = S A_r Sᵀ for a constant adjacency tensor A.
    pub fn lift_state(&mut self, s: Var, a: Rc<Arr>) -> Var {
        let ss = mat(&self.nodes[s.0].value);
        let av = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let m = ss.nrows();
        let r = av.shape()[0];
        let mut out = ndarray::Array3::zeros((r, m, m));
        for k in 0..r {
            let tmp = ss.dot(&av.index_axis(Axis(0), k));
            out.index_axis_mut(Axis(0), k).assign(&tmp.dot(&ss.t()));
        }
        self.push(Op::LiftState(s.0, a), out.into_dyn())
    }

    /// same entries, different shape (row-major order preserved).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let v = x
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        self.push(Op::Reshape(a.0), v)
    }

    /// pick index `idx` of the last axis, dropping that axis.
    pub fn select_last(&mut self, a: Var, idx: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let v = x.index_axis(Axis(last), idx).to_owned();
        self.push(Op::SelectLast(a.0, idx), v)
    }

    /// Reverse sweep from `root` (must be scalar). Returns per-node adjoints;
    /// callers read them off for leaf vars via [`Self::grad`].
    pub fn backward(&mut self, root: Var) -> Gradients {
        let mut adj: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.accumulate(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Gradients { adj }
    }

    fn bump(adj: &mut [Option<Arr>], nodes: &[Node], id: usize, delta: Arr) {
        if !nodes[id].needs_grad {
            return;
        }
        match &mut adj[id] {
            Some(a) => *a += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, g: &Arr, adj: &mut [Option<Arr>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                Self::bump(adj, nodes, *a, g.clone());
                Self::bump(adj, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::bump(adj, nodes, *a, g.clone());
                Self::bump(adj, nodes, *b, -g);
            }
            Op::Mul(a, b) => {
                Self::bump(adj, nodes, *a, g * &nodes[*b].value);
                Self::bump(adj, nodes, *b, g * &nodes[*a].value);
            }
            Op::Neg(a) => Self::bump(adj, nodes, *a, -g),
            Op::Scale(a, s) => Self::bump(adj, nodes, *a, g * *s),
            Op::AddScalar(a) => Self::bump(adj, nodes, *a, g.clone()),
            Op::AddRowVec(a, row) => {
                Self::bump(adj, nodes, *a, g.clone());
                let gm = mat(g);
                Self::bump(adj, nodes, *row, gm.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddColVec(a, col) => {
                Self::bump(adj, nodes, *a, g.clone());
                let gm = mat(g);
                Self::bump(adj, nodes, *col, gm.sum_axis(Axis(1)).into_dyn());
            }
            Op::MatMul(a, b) => {
                let gm = mat(g);
                let av = mat(&nodes[*a].value);
                let bv = mat(&nodes[*b].value);
                Self::bump(adj, nodes, *a, gm.dot(&bv.t()).into_dyn());
                Self::bump(adj, nodes, *b, av.t().dot(&gm).into_dyn());
            }
            Op::MatMulBT(a, b) => {
                // out = a bᵀ: da = g b; db = gᵀ a
                let gm = mat(g);
                let av = mat(&nodes[*a].value);
                let bv = mat(&nodes[*b].value);
                Self::bump(adj, nodes, *a, gm.dot(&bv).into_dyn());
                Self::bump(adj, nodes, *b, gm.t().dot(&av).into_dyn());
            }
            Op::LseRows(a) => {
                let x = mat(&nodes[*a].value);
                let out = vec1(&nodes[id].value);
                let gv = vec1(g);
                let mut dx = x.to_owned();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let o = out[i];
                    row.mapv_inplace(|v| (v - o).exp());
                    row *= gv[i];
                }
                Self::bump(adj, nodes, *a, dx.into_dyn());
            }
            Op::LseCols(a) => {
                let x = mat(&nodes[*a].value);
                let out = vec1(&nodes[id].value);
                let gv = vec1(g);
                let mut dx = x.to_owned();
                for (j, mut col) in dx.columns_mut().into_iter().enumerate() {
                    let o = out[j];
                    col.mapv_inplace(|v| (v - o).exp());
                    col *= gv[j];
                }
                Self::bump(adj, nodes, *a, dx.into_dyn());
            }
            Op::ConcatRows(a, b) => {
                let na = mat(&nodes[*a].value).nrows();
                let gm = mat(g);
                Self::bump(adj, nodes, *a, gm.slice(ndarray::s![..na, ..]).to_owned().into_dyn());
                Self::bump(adj, nodes, *b, gm.slice(ndarray::s![na.., ..]).to_owned().into_dyn());
            }
            Op::Exp(a) => Self::bump(adj, nodes, *a, g * &nodes[id].value),
            Op::LnClamp(a, floor) => {
                let x = &nodes[*a].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                    if xv > *floor {
                        *d /= xv;
                    } else {
                        *d = 0.0;
                    }
                });
                Self::bump(adj, nodes, *a, dx);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[*a].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                    if xv < *lo || xv > *hi {
                        *d = 0.0;
                    }
                });
                Self::bump(adj, nodes, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].value;
                Self::bump(adj, nodes, *a, g * &(y * &(1.0 - y)));
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                Self::bump(adj, nodes, *a, dx);
            }
            Op::SoftmaxLast(a) => {
                let y = &nodes[id].value;
                let last = y.ndim() - 1;
                let mut dx = g * y;
                for (mut dlane, ylane) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = dlane.sum();
                    ndarray::Zip::from(&mut dlane).and(&ylane).for_each(|d, &yv| {
                        *d -= dot * yv;
                    });
                }
                Self::bump(adj, nodes, *a, dx);
            }
            Op::Sum(a) => {
                let gs = *g.first().unwrap();
                let shape = nodes[*a].value.raw_dim();
                Self::bump(adj, nodes, *a, Arr::from_elem(shape, gs));
            }
            Op::MulScalarV(s, t) => {
                let sv = *nodes[*s].value.first().unwrap();
                let dot: f64 = (g * &nodes[*t].value).sum();
                Self::bump(adj, nodes, *s, ndarray::arr0(dot).into_dyn());
                Self::bump(adj, nodes, *t, g * sv);
            }
            Op::Outer(u, v) => {
                let gm = mat(g);
                let uv = vec1(&nodes[*u].value);
                let vv = vec1(&nodes[*v].value);
                Self::bump(adj, nodes, *u, gm.dot(&vv).into_dyn());
                Self::bump(adj, nodes, *v, gm.t().dot(&uv).into_dyn());
            }
            Op::MulBcastLast2(m, t) => {
                let gm = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let tv = nodes[*t].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mv = mat(&nodes[*m].value);
                let mut dm = ndarray::Array2::zeros(mv.raw_dim());
                for k in 0..gm.shape()[0] {
                    dm += &(&gm.index_axis(Axis(0), k) * &tv.index_axis(Axis(0), k));
                }
                let mut dt = gm.to_owned();
                for mut slice in dt.outer_iter_mut() {
                    slice *= &mv;
                }
                Self::bump(adj, nodes, *m, dm.into_dyn());
                Self::bump(adj, nodes, *t, dt.into_dyn());
            }
            Op::GatherRows(a, idx) => {
                let gm = mat(g);
                let src = mat(&nodes[*a].value);
                let mut dx = ndarray::Array2::zeros(src.raw_dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &gm.row(k);
                }
                Self::bump(adj, nodes, *a, dx.into_dyn());
            }
            Op::ScatterAddRows(a, idx) => {
                let gm = mat(g);
                let src = mat(&nodes[*a].value);
                let mut dx = ndarray::Array2::zeros(src.raw_dim());
                for (k, &i) in idx.iter().enumerate() {
                    dx.row_mut(k).assign(&gm.row(i));
                }
                Self::bump(adj, nodes, *a, dx.into_dyn());
            }
            Op::ScaleRowsConst(a, scales) => {
                let gm = mat(g);
                let mut dx = gm.to_owned();
                for (k, mut row) in dx.rows_mut().into_iter().enumerate() {
                    row *= scales[k];
                }
                Self::bump(adj, nodes, *a, dx.into_dyn());
            }
            Op::RowScale(v, m) => {
                let gm = mat(g);
                let vv = vec1(&nodes[*v].value);
                let mv = mat(&nodes[*m].value);
                let mut dv = ndarray::Array1::zeros(vv.len());
                for k in 0..vv.len() {
                    dv[k] = gm.row(k).dot(&mv.row(k));
                }
                let mut dm = gm.to_owned();
                for (k, mut row) in dm.rows_mut().into_iter().enumerate() {
                    row *= vv[k];
                }
                Self::bump(adj, nodes, *v, dv.into_dyn());
                Self::bump(adj, nodes, *m, dm.into_dyn());
            }
            Op::Project(p, s) => {
                // out_r = Sᵀ P_r S
                let gm = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let pv = nodes[*p].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let sv = mat(&nodes[*s].value);
                let r = pv.shape()[0];
                let mut dp = ndarray::Array3::zeros(pv.raw_dim());
                let mut ds = ndarray::Array2::zeros(sv.raw_dim());
                for k in 0..r {
                    let gk = gm.index_axis(Axis(0), k);
                    let pk = pv.index_axis(Axis(0), k);
                    // dP_r = S G_r Sᵀ
                    dp.index_axis_mut(Axis(0), k).assign(&sv.dot(&gk).dot(&sv.t()));
                    // dS += P_r S G_rᵀ + P_rᵀ S G_r
                    ds += &pk.dot(&sv).dot(&gk.t());
                    ds += &pk.t().dot(&sv).dot(&gk);
                }
                Self::bump(adj, nodes, *p, dp.into_dyn());
                Self::bump(adj, nodes, *s, ds.into_dyn());
            }
            Op::LiftState(s, a) => {
                // out_r = S A_r Sᵀ with A constant
                let gm = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let sv = mat(&nodes[*s].value);
                let av = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut ds = ndarray::Array2::zeros(sv.raw_dim());
                for k in 0..av.shape()[0] {
                    let gk = gm.index_axis(Axis(0), k);
                    let ak = av.index_axis(Axis(0), k);
                    // d/dS (S A Sᵀ): dS += G S Aᵀ + Gᵀ S A
                    ds += &gk.dot(&sv.dot(&ak.t()));
                    ds += &gk.t().dot(&sv.dot(&ak));
                }
                Self::bump(adj, nodes, *s, ds.into_dyn());
            }
            Op::Reshape(a) => {
                let shape = nodes[*a].value.shape().to_vec();
                let da = g.to_shape(IxDyn(&shape)).expect("reshape grad").to_owned();
                Self::bump(adj, nodes, *a, da);
            }
            Op::SelectLast(a, idx) => {
                let mut da = Arr::zeros(nodes[*a].value.raw_dim());
                let last = da.ndim() - 1;
                da.index_axis_mut(Axis(last), *idx).assign(g);
                Self::bump(adj, nodes, *a, da);
            }
        }
    }
}

pub struct Gradients {
    adj: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, zeros if unreached.
    pub fn grad(&self, tape: &Tape, v: Var) -> Arr {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(tape.nodes[v.0].value.shape())),
        }
    }
    pub fn grad_opt(&self, v: Var) -> Option<&Arr> {
        self.adj[v.0].as_ref()
    }
}
