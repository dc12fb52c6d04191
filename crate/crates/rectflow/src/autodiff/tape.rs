//! Reverse-mode tape.
//!
//! A `Tape` is a write-once arena of evaluated operations. Values are
//! computed eagerly as ops are recorded, and every node remembers its inputs,
//! so a reverse sweep from any scalar (or any node, given a seed cotangent)
//! yields vector-Jacobian products.
//!
//! The property the rest of the crate leans on: `backward` does not compute
//! gradients into plain buffers, it *records the gradient computation as new
//! ops on the same tape*. A gradient is therefore itself differentiable,
//! which is what lets a training loss contain vector-Jacobian products as
//! subexpressions (the matrix-free Gram-matrix products used by the
//! stochastic volume-change estimator) and still admit one final parameter
//! backward pass through them.
//!
//! Tapes are rebuilt per evaluation: construct, record, differentiate, drop.
//! Node indices only grow, and an op may only reference earlier nodes, so the
//! graph is acyclic by construction.

use std::rc::Rc;

use crate::error::Result;
use crate::linalg;

use super::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// External value; `requires_grad` on the node decides whether the
    /// reverse sweep tracks it.
    Leaf,
    /// Identity value, but the reverse sweep contributes nothing through it
    /// and dual-mode tangents are zeroed by the layers that use it.
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Tanh(Var),
    Exp(Var),
    /// y = mul * x + add, with f64 constants; only the slope survives into
    /// the reverse rule.
    AffineConst { x: Var, mul: f64 },
    /// y = x W^T + b with x: [n, in], W: [out, in], b: [out].
    Linear { x: Var, w: Var, b: Var },
    /// C = A B with A: [n, k], B: [k, m].
    MatmulNN(Var, Var),
    /// C = A B^T with A: [n, k], B: [m, k].
    MatmulNT(Var, Var),
    /// C = A^T B with A: [n, k], B: [n, m].
    MatmulTN(Var, Var),
    /// [n, m] -> [m], summing over rows.
    SumRows(Var),
    /// [m] -> [n, m], repeating the vector on every row.
    BroadcastRows { v: Var },
    /// any shape -> scalar [].
    SumAll(Var),
    /// scalar [] -> given shape.
    BroadcastScalar { s: Var },
    /// ([n, m], [n, m]) -> [n], per-row dot product.
    RowDot(Var, Var),
    /// [n, m] scaled per-row by s: [n].
    ScaleRows { m: Var, s: Var },
    /// [n, D] -> [n, idx.len()], selecting columns.
    GatherCols { x: Var, idx: Rc<[usize]> },
    /// [n, idx.len()] -> [n, cols], writing columns, zero elsewhere.
    ScatterCols { x: Var, idx: Rc<[usize]> },
    /// Same data, new shape.
    Reshape(Var),
    /// Upper-triangle entries (row-major over i <= j), each [n], assembled
    /// into a symmetric [n, d*d].
    SymFromEntries { entries: Rc<[Var]>, dim: usize },
    /// [n, d*d] of SPD matrices -> [n] of log-determinants. The per-sample
    /// inverses are saved for the reverse rule, which treats them as
    /// constants: this op supports one order of differentiation, which is
    /// all the volume-change term of the training objective needs.
    LogDetSpd { a: Var, inv: Rc<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: gradient vars per ancestor node.
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the sweep root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.idx()).copied().flatten()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        assert!(self.nodes.len() < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that the reverse sweep ignores (data, probe vectors, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_same_shape(self.value(a), self.value(b), "add", |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_same_shape(self.value(a), self.value(b), "sub", |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_same_shape(self.value(a), self.value(b), "mul", |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn affine_const(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = map(self.value(x), |v| mul * v + add);
        let rg = self.rg(x);
        self.push(value, Op::AffineConst { x, mul }, rg)
    }

    // ---- linear algebra ----

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = (xs.rows(), xs.cols());
        let (o, wi) = (ws.rows(), ws.cols());
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        assert_eq!(bs.shape(), &[o], "linear: bias shape");
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xrow = xs.row(r);
            let orow = &mut out[r * o..(r + 1) * o];
            for (j, slot) in orow.iter_mut().enumerate() {
                let wrow = ws.row(j);
                let mut acc = bs.data()[j];
                for k in 0..i {
                    acc += xrow[k] * wrow[k];
                }
                *slot = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, rg)
    }

    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let (bk, m) = (bv.rows(), bv.cols());
        assert_eq!(k, bk, "matmul_nn: inner dims {k} vs {bk}");
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let arow = av.row(r);
            let orow = &mut out[r * m..(r + 1) * m];
            for (kk, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                let brow = bv.row(kk);
                for j in 0..m {
                    orow[j] += aval * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatmulNN(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let (m, bk) = (bv.rows(), bv.cols());
        assert_eq!(k, bk, "matmul_nt: inner dims {k} vs {bk}");
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let arow = av.row(r);
            let orow = &mut out[r * m..(r + 1) * m];
            for (j, slot) in orow.iter_mut().enumerate() {
                let brow = bv.row(j);
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                *slot = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatmulNT(a, b), rg)
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let (bn, m) = (bv.rows(), bv.cols());
        assert_eq!(n, bn, "matmul_tn: outer dims {n} vs {bn}");
        let mut out = vec![0.0; k * m];
        for r in 0..n {
            let arow = av.row(r);
            let brow = bv.row(r);
            for (kk, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                let orow = &mut out[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += aval * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![k, m], out), Op::MatmulTN(a, b), rg)
    }

    // ---- reductions and broadcasts ----

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (j, v) in av.row(r).iter().enumerate() {
                out[j] += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m], out), Op::SumRows(a), rg)
    }

    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.shape().len(), 1, "broadcast_rows: expects a vector");
        let m = vv.numel();
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(vv.data());
        }
        let rg = self.rg(v);
        self.push(Tensor::new(vec![rows, m], out), Op::BroadcastRows { v }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn broadcast_scalar(&mut self, s: Var, shape: Vec<usize>) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.numel(), 1, "broadcast_scalar: expects a scalar");
        let numel: usize = shape.iter().product();
        let value = Tensor::new(shape, vec![sv.item(); numel]);
        let rg = self.rg(s);
        self.push(value, Op::BroadcastScalar { s }, rg)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot: shape mismatch");
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for r in 0..n {
            let (ar, br) = (av.row(r), bv.row(r));
            let mut acc = 0.0;
            for k in 0..m {
                acc += ar[k] * br[k];
            }
            out[r] = acc;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n], out), Op::RowDot(a, b), rg)
    }

    pub fn scale_rows(&mut self, m: Var, s: Var) -> Var {
        let (mv, sv) = (self.value(m), self.value(s));
        let (n, cols) = (mv.rows(), mv.cols());
        assert_eq!(sv.shape(), &[n], "scale_rows: scale shape");
        let mut out = Vec::with_capacity(n * cols);
        for r in 0..n {
            let f = sv.data()[r];
            out.extend(mv.row(r).iter().map(|v| v * f));
        }
        let rg = self.rg(m) || self.rg(s);
        self.push(Tensor::new(vec![n, cols], out), Op::ScaleRows { m, s }, rg)
    }

    // ---- structural ----

    pub fn gather_cols(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let (n, cols) = (xv.rows(), xv.cols());
        for &c in idx.iter() {
            assert!(c < cols, "gather_cols: column {c} out of {cols}");
        }
        let k = idx.len();
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = xv.row(r);
            out.extend(idx.iter().map(|&c| row[c]));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, k], out), Op::GatherCols { x, idx }, rg)
    }

    pub fn scatter_cols(&mut self, x: Var, idx: Rc<[usize]>, cols: usize) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        assert_eq!(k, idx.len(), "scatter_cols: index count");
        for &c in idx.iter() {
            assert!(c < cols, "scatter_cols: column {c} out of {cols}");
        }
        let mut out = vec![0.0; n * cols];
        for r in 0..n {
            let row = xv.row(r);
            let orow = &mut out[r * cols..(r + 1) * cols];
            for (j, &c) in idx.iter().enumerate() {
                orow[c] = row[j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, cols], out), Op::ScatterCols { x, idx }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Builds a batch of symmetric d x d matrices (flattened to [n, d*d])
    /// from upper-triangle entry vectors, each of shape [n], given row-major
    /// over i <= j.
    pub fn sym_from_entries(&mut self, entries: Rc<[Var]>, dim: usize) -> Var {
        assert_eq!(entries.len(), dim * (dim + 1) / 2, "sym_from_entries: entry count");
        let n = self.value(entries[0]).numel();
        let mut out = vec![0.0; n * dim * dim];
        let mut e = 0;
        for i in 0..dim {
            for j in i..dim {
                let ev = self.value(entries[e]);
                assert_eq!(ev.shape(), &[n], "sym_from_entries: entry shape");
                for (r, &val) in ev.data().iter().enumerate() {
                    out[r * dim * dim + i * dim + j] = val;
                    out[r * dim * dim + j * dim + i] = val;
                }
                e += 1;
            }
        }
        let rg = entries.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(vec![n, dim * dim], out),
            Op::SymFromEntries { entries, dim },
            rg,
        )
    }

    /// Per-sample log det of a batch of SPD matrices given as [n, d*d], via
    /// Cholesky (2 * sum of log diagonal of the factor). Fails on the first
    /// sample whose matrix is not positive definite.
    pub fn logdet_spd(&mut self, a: Var, dim: usize, context: &'static str) -> Result<Var> {
        let av = self.value(a);
        let n = av.rows();
        assert_eq!(av.cols(), dim * dim, "logdet_spd: flattened matrix width");
        let mut out = vec![0.0; n];
        let mut inv = vec![0.0; n * dim * dim];
        for r in 0..n {
            let l = linalg::cholesky_lower(av.row(r), dim, context)?;
            out[r] = linalg::logdet_from_cholesky(&l, dim);
            let inv_r = linalg::spd_inverse_from_cholesky(&l, dim);
            inv[r * dim * dim..(r + 1) * dim * dim].copy_from_slice(&inv_r);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n], out),
            Op::LogDetSpd {
                a,
                inv: Rc::new(Tensor::new(vec![n, dim * dim], inv)),
            },
            rg,
        ))
    }

    // ---- reverse sweep ----

    /// Reverse sweep from `root` with cotangent `seed` (same shape as the
    /// root value). Gradient computations are recorded as new ops, so any
    /// returned gradient var can appear in later expressions and be
    /// differentiated again.
    pub fn backward(&mut self, root: Var, seed: Tensor) -> Gradients {
        self.backward_with_stops(root, seed, &[])
    }

    /// Like `backward`, but does not propagate past any var in `stops`.
    /// Contributions INTO a stop var are still accumulated (its gradient is
    /// readable); the sweep just does not descend into its inputs. Callers
    /// use this to avoid recording gradient ops for subgraphs they will
    /// never read, e.g. a vector-Jacobian product with respect to one
    /// intermediate var only.
    pub fn backward_with_stops(&mut self, root: Var, seed: Tensor, stops: &[Var]) -> Gradients {
        let seed_var = self.constant(seed);
        self.backward_seeded(root, seed_var, stops)
    }

    /// Reverse sweep whose cotangent seed is an existing var. When the seed
    /// itself was computed on the tape, the recorded gradient ops reference
    /// it, so a later sweep differentiates through the seed as well — the
    /// construction behind curvature products like Jᵀ(Jw).
    pub fn backward_seeded(&mut self, root: Var, seed: Var, stops: &[Var]) -> Gradients {
        assert_eq!(
            self.value(seed).shape(),
            self.value(root).shape(),
            "backward: seed shape {:?} vs root shape {:?}",
            self.value(seed).shape(),
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Var>> = vec![None; root.idx() + 1];
        grads[root.idx()] = Some(seed);

        for id in (0..=root.idx()).rev() {
            let Some(cot) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if stops.iter().any(|s| s.idx() == id) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::StopGrad => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, cot);
                    self.accumulate(&mut grads, b, cot);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, cot);
                    let nb = self.neg(cot);
                    self.accumulate(&mut grads, b, nb);
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(cot, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.mul(cot, a);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let g = self.neg(cot);
                    self.accumulate(&mut grads, a, g);
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - tanh^2, reusing the recorded output.
                    let y = Var(id as u32);
                    let y2 = self.mul(y, y);
                    let one_minus = self.affine_const(y2, -1.0, 1.0);
                    let g = self.mul(cot, one_minus);
                    self.accumulate(&mut grads, a, g);
                }
                Op::Exp(a) => {
                    let y = Var(id as u32);
                    let g = self.mul(cot, y);
                    self.accumulate(&mut grads, a, g);
                }
                Op::AffineConst { x, mul } => {
                    let g = self.affine_const(cot, mul, 0.0);
                    self.accumulate(&mut grads, x, g);
                }
                Op::Linear { x, w, b } => {
                    if self.rg(x) {
                        let gx = self.matmul_nn(cot, w);
                        self.accumulate(&mut grads, x, gx);
                    }
                    if self.rg(w) {
                        let gw = self.matmul_tn(cot, x);
                        self.accumulate(&mut grads, w, gw);
                    }
                    if self.rg(b) {
                        let gb = self.sum_rows(cot);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatmulNN(a, b) => {
                    if self.rg(a) {
                        let ga = self.matmul_nt(cot, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.matmul_tn(a, cot);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatmulNT(a, b) => {
                    if self.rg(a) {
                        let ga = self.matmul_nn(cot, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.matmul_tn(cot, a);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatmulTN(a, b) => {
                    if self.rg(a) {
                        let ga = self.matmul_nt(b, cot);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.matmul_nn(a, cot);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.value(a).rows();
                    let g = self.broadcast_rows(cot, rows);
                    self.accumulate(&mut grads, a, g);
                }
                Op::BroadcastRows { v } => {
                    let g = self.sum_rows(cot);
                    self.accumulate(&mut grads, v, g);
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let g = self.broadcast_scalar(cot, shape);
                    self.accumulate(&mut grads, a, g);
                }
                Op::BroadcastScalar { s } => {
                    let g = self.sum_all(cot);
                    self.accumulate(&mut grads, s, g);
                }
                Op::RowDot(a, b) => {
                    if self.rg(a) {
                        let ga = self.scale_rows(b, cot);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.scale_rows(a, cot);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::ScaleRows { m, s } => {
                    if self.rg(m) {
                        let gm = self.scale_rows(cot, s);
                        self.accumulate(&mut grads, m, gm);
                    }
                    if self.rg(s) {
                        let gs = self.row_dot(cot, m);
                        self.accumulate(&mut grads, s, gs);
                    }
                }
                Op::GatherCols { x, idx } => {
                    let cols = self.value(x).cols();
                    let g = self.scatter_cols(cot, idx, cols);
                    self.accumulate(&mut grads, x, g);
                }
                Op::ScatterCols { x, idx } => {
                    let g = self.gather_cols(cot, idx);
                    self.accumulate(&mut grads, x, g);
                }
                Op::Reshape(x) => {
                    let shape = self.value(x).shape().to_vec();
                    let g = self.reshape(cot, shape);
                    self.accumulate(&mut grads, x, g);
                }
                Op::SymFromEntries { entries, dim } => {
                    // Entry (i, j) with i < j appears at two mirrored slots.
                    let mut e = 0;
                    for i in 0..dim {
                        for j in i..dim {
                            let entry = entries[e];
                            e += 1;
                            if !self.rg(entry) {
                                continue;
                            }
                            let n = self.value(entry).numel();
                            let upper = self.gather_cols(cot, Rc::from([i * dim + j]));
                            let g2 = if i == j {
                                upper
                            } else {
                                let lower = self.gather_cols(cot, Rc::from([j * dim + i]));
                                self.add(upper, lower)
                            };
                            let g = self.reshape(g2, vec![n]);
                            self.accumulate(&mut grads, entry, g);
                        }
                    }
                }
                Op::LogDetSpd { a, inv } => {
                    // d/dA log det A = A^{-1} (symmetric); scale each sample's
                    // inverse by its scalar cotangent. The saved inverse
                    // enters as a constant, so this rule is exact to first
                    // order only.
                    let inv_leaf = self.constant((*inv).clone());
                    let g = self.scale_rows(inv_leaf, cot);
                    self.accumulate(&mut grads, a, g);
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], target: Var, contribution: Var) {
        if !self.rg(target) {
            return;
        }
        grads[target.idx()] = Some(match grads[target.idx()] {
            None => contribution,
            Some(existing) => self.add(existing, contribution),
        });
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_same_shape(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_value(tape: &Tape, grads: &Gradients, v: Var) -> Vec<f64> {
        tape.value(grads.get(v).expect("gradient missing")).data().to_vec()
    }

    #[test]
    fn product_rule_hand_check() {
        // f = sum(a * b), df/da = b, df/db = a.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![2.0, 3.0]), true);
        let b = tape.leaf(Tensor::vector(vec![5.0, 7.0]), true);
        let p = tape.mul(a, b);
        let s = tape.sum_all(p);
        assert_eq!(tape.value(s).item(), 31.0);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        assert_eq!(grad_value(&tape, &grads, a), vec![5.0, 7.0]);
        assert_eq!(grad_value(&tape, &grads, b), vec![2.0, 3.0]);
    }

    #[test]
    fn linear_backward_hand_check() {
        // y = x W^T + b, x = [[1, 2]], W = [[3, 4], [5, 6]], b = [0.5, -0.5].
        // y = [[1*3+2*4+0.5, 1*5+2*6-0.5]] = [[11.5, 16.5]].
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true);
        let w = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]), true);
        let b = tape.leaf(Tensor::vector(vec![0.5, -0.5]), true);
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), &[11.5, 16.5]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        // ds/dx = column sums of W = [3+5, 4+6].
        assert_eq!(grad_value(&tape, &grads, x), vec![8.0, 10.0]);
        // ds/dW = outer(ones, x) = [[1, 2], [1, 2]].
        assert_eq!(grad_value(&tape, &grads, w), vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(grad_value(&tape, &grads, b), vec![1.0, 1.0]);
    }

    #[test]
    fn tanh_exp_backward_hand_check() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3]), true);
        let t = tape.tanh(x);
        let e = tape.exp(t);
        let s = tape.sum_all(e);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        let th: f64 = 0.3f64.tanh();
        let expect = th.exp() * (1.0 - th * th);
        let got = grad_value(&tape, &grads, x)[0];
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn gather_scatter_are_transposes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]), true);
        let g = tape.gather_cols(x, Rc::from([2, 0]));
        assert_eq!(tape.value(g).data(), &[3.0, 1.0]);
        let s = tape.row_dot(g, g);
        let sum = tape.sum_all(s);
        let grads = tape.backward(sum, Tensor::scalar(1.0));
        // d/dx of (x2^2 + x0^2) = [2 x0, 0, 2 x2].
        assert_eq!(grad_value(&tape, &grads, x), vec![2.0, 0.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_reverse_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]), true);
        let sq = tape.mul(x, x);
        let frozen = tape.stop_gradient(sq);
        let y = tape.mul(frozen, x); // value 8, gradient should see frozen=4 as constant
        let s = tape.sum_all(y);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        assert_eq!(grad_value(&tape, &grads, x), vec![4.0]);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]), true);
        let unused = tape.leaf(Tensor::vector(vec![1.0]), true);
        let s = tape.sum_all(x);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn second_order_through_recorded_gradient() {
        // y = x^3 recorded as x*x*x; w := dy/dx comes out of a first sweep as
        // new tape ops (3x^2). A second sweep over w must give 6x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.7]), true);
        let x2 = tape.mul(x, x);
        let y = tape.mul(x2, x);
        let first = tape.backward(y, Tensor::vector(vec![1.0]));
        let w = first.get(x).unwrap();
        let wval = tape.value(w).data()[0];
        assert!((wval - 3.0 * 1.7 * 1.7).abs() < 1e-12);
        let second = tape.backward(w, Tensor::vector(vec![1.0]));
        let w2 = second.get(x).unwrap();
        let got = tape.value(w2).data()[0];
        assert!((got - 6.0 * 1.7).abs() < 1e-12, "second derivative {got}");
    }

    #[test]
    fn backward_stops_do_not_descend() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]), true);
        let mid = tape.mul(x, x);
        let out = tape.mul(mid, mid); // x^4
        let sweep = tape.backward_with_stops(out, Tensor::vector(vec![1.0]), &[mid]);
        // Gradient w.r.t. mid is 2*mid = 18; x itself is never reached.
        let gmid = tape.value(sweep.get(mid).unwrap()).data()[0];
        assert_eq!(gmid, 18.0);
        assert!(sweep.get(x).is_none());
    }

    #[test]
    fn logdet_spd_value_and_gradient() {
        // Two samples of diagonal SPD matrices: det = product of diagonal,
        // gradient of logdet wrt diagonal entry a_ii is 1/a_ii.
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 5.0], vec![1.0, 0.0, 0.0, 4.0]]),
            true,
        );
        let ld = tape.logdet_spd(a, 2, "test").unwrap();
        let v = tape.value(ld).data().to_vec();
        assert!((v[0] - (10.0f64).ln()).abs() < 1e-12);
        assert!((v[1] - (4.0f64).ln()).abs() < 1e-12);
        let s = tape.sum_all(ld);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        let g = grad_value(&tape, &grads, a);
        let expect = [0.5, 0.0, 0.0, 0.2, 1.0, 0.0, 0.0, 0.25];
        for (got, want) in g.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn logdet_spd_reports_indefinite_input() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 2.0, 1.0]]));
        match tape.logdet_spd(a, 2, "test") {
            Err(crate::error::Error::NotPositiveDefinite { pivot, .. }) => {
                assert!(pivot <= 0.0)
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn sym_from_entries_mirrors_and_accumulates() {
        let mut tape = Tape::new();
        let d00 = tape.leaf(Tensor::vector(vec![4.0]), true);
        let d01 = tape.leaf(Tensor::vector(vec![1.0]), true);
        let d11 = tape.leaf(Tensor::vector(vec![3.0]), true);
        let a = tape.sym_from_entries(Rc::from([d00, d01, d11]), 2);
        assert_eq!(tape.value(a).data(), &[4.0, 1.0, 1.0, 3.0]);
        // s = sum of all matrix entries: off-diagonal entry contributes twice.
        let s = tape.sum_all(a);
        let grads = tape.backward(s, Tensor::scalar(1.0));
        assert_eq!(grad_value(&tape, &grads, d00), vec![1.0]);
        assert_eq!(grad_value(&tape, &grads, d01), vec![2.0]);
        assert_eq!(grad_value(&tape, &grads, d11), vec![1.0]);
    }

    #[test]
    fn matmul_variants_agree_with_hand_products() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let nn = tape.matmul_nn(a, b);
        assert_eq!(tape.value(nn).data(), &[19.0, 22.0, 43.0, 50.0]);
        let nt = tape.matmul_nt(a, b);
        assert_eq!(tape.value(nt).data(), &[17.0, 23.0, 39.0, 53.0]);
        let tn = tape.matmul_tn(a, b);
        assert_eq!(tape.value(tn).data(), &[26.0, 30.0, 38.0, 44.0]);
    }
}
