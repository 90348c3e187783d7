//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every value created during one forward pass together
//! with the operation that produced it. [`Tape::grad`] walks the record in
//! reverse creation order. Each backward rule is written in terms of the
//! same recorded operations, so with `create_graph` set the gradients are
//! themselves nodes on the tape and can be differentiated again.
//!
//! Node ids are assigned in creation order, which is a topological order of
//! the graph: an operation can only refer to nodes that already exist.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Node {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Square(usize),
    SqrtEps(usize),
    Exp(usize),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Scale(usize, f64),
    /// Input and index into the tape's exponential-mixture table.
    ExpMixture(usize, usize),
    /// `op(a) op(b)` with the flags selecting transposition.
    MatMul(usize, usize, bool, bool),
    Transpose(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    SqDist(usize, usize),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b, _, _) | SqDist(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a)
            | Square(a)
            | SqrtEps(a)
            | Exp(a)
            | Relu(a)
            | Tanh(a)
            | Abs(a)
            | Scale(a, _)
            | ExpMixture(a, _)
            | Transpose(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRow(a)
            | BroadcastCol(a) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward/backward episode.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    records: Vec<Record>,
    params: Vec<Node>,
    param_ids: HashSet<usize>,
    mixtures: Vec<Vec<(f64, f64)>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
            params: Vec::new(),
            param_ids: HashSet::new(),
            mixtures: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check(&self, node: Node) -> Result<()> {
        if node.tape != self.id || node.id >= self.records.len() {
            return Err(Error::UnknownNode(node.id));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Node> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let (op, requires_grad) = if self.recording {
            let rg = op
                .inputs()
                .iter()
                .flatten()
                .any(|&i| self.records[i].requires_grad);
            (op, rg)
        } else {
            (Op::Leaf, false)
        };
        let node = Node {
            tape: self.id,
            id: self.records.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        self.records.push(Record {
            value,
            op,
            requires_grad,
        });
        Ok(node)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Node> {
        let node = self.push(value, Op::Leaf, "leaf")?;
        self.records[node.id].requires_grad = requires_grad;
        Ok(node)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, data: Vec<f64>, shape: (usize, usize)) -> Result<Node> {
        self.leaf(Tensor::new(data, shape)?, false)
    }

    pub fn constant_tensor(&mut self, value: Tensor) -> Result<Node> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Node> {
        self.leaf(Tensor::scalar(value), false)
    }

    /// A differentiable input that is not a trainable parameter.
    pub fn variable(&mut self, value: Tensor) -> Result<Node> {
        self.leaf(value, true)
    }

    /// A differentiable leaf registered as trainable.
    pub fn parameter(&mut self, data: Vec<f64>, shape: (usize, usize)) -> Result<Node> {
        self.parameter_tensor(Tensor::new(data, shape)?)
    }

    pub fn parameter_tensor(&mut self, value: Tensor) -> Result<Node> {
        let node = self.leaf(value, true)?;
        self.register_parameter(node)?;
        Ok(node)
    }

    pub fn register_parameter(&mut self, node: Node) -> Result<()> {
        self.check(node)?;
        if !self.param_ids.insert(node.id) {
            return Err(Error::DuplicateParameter(node.id));
        }
        self.records[node.id].requires_grad = true;
        self.params.push(node);
        Ok(())
    }

    /// Registered parameters in registration order.
    pub fn parameters(&self) -> &[Node] {
        &self.params
    }

    pub fn value(&self, node: Node) -> &Tensor {
        assert!(
            node.tape == self.id && node.id < self.records.len(),
            "node {} does not belong to this tape",
            node.id
        );
        &self.records[node.id].value
    }

    /// The single value of a `1x1` node.
    pub fn item(&self, node: Node) -> f64 {
        let v = self.value(node);
        assert!(v.is_scalar(), "item() on a {}x{} node", v.rows(), v.cols());
        v.data()[0]
    }

    pub fn requires_grad(&self, node: Node) -> bool {
        self.records[node.id].requires_grad
    }

    // ---- elementwise ----
    //
    // Binary operations broadcast any operand dimension of size 1 (rows of
    // a `1 x n`, columns of an `m x 1`, or a scalar).

    fn binary(
        &mut self,
        a: Node,
        b: Node,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.records[a.id].value;
        let vb = &self.records[b.id].value;
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(va.rows(), va.cols(), data)
        } else {
            let dim = |p: usize, q: usize| (p == q || p == 1 || q == 1).then(|| p.max(q));
            let (Some(rows), Some(cols)) = (dim(va.rows(), vb.rows()), dim(va.cols(), vb.cols()))
            else {
                return Err(Error::shape(
                    name,
                    format!("{}x{} vs {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
                ));
            };
            let at = |t: &Tensor, r: usize, c: usize| {
                let r = if t.rows() == 1 { 0 } else { r };
                let c = if t.cols() == 1 { 0 } else { c };
                t.data()[r * t.cols() + c]
            };
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                data.extend((0..cols).map(|c| f(at(va, r, c), at(vb, r, c))));
            }
            Tensor::from_parts(rows, cols, data)
        };
        self.push(out, op, name)
    }

    fn unary(
        &mut self,
        a: Node,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Node> {
        self.check(a)?;
        let out = self.records[a.id].value.map(f);
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, "add", Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, "sub", Op::Sub(a.id, b.id), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, "mul", Op::Mul(a.id, b.id), |x, y| x * y)
    }

    pub fn div(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, "div", Op::Div(a.id, b.id), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "neg", Op::Neg(a.id), |x| -x)
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "square", Op::Square(a.id), |x| x * x)
    }

    /// `sqrt(max(x, 0) + eps)`, finite-derivative square root.
    pub fn sqrt_eps(&mut self, a: Node, eps: f64) -> Result<Node> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(format!("sqrt_eps needs eps > 0, got {eps}")));
        }
        self.unary(a, "sqrt_eps", Op::SqrtEps(a.id), |x| {
            (x.max(0.0) + eps).sqrt()
        })
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "exp", Op::Exp(a.id), f64::exp)
    }

    pub fn relu(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "relu", Op::Relu(a.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "tanh", Op::Tanh(a.id), f64::tanh)
    }

    pub fn abs(&mut self, a: Node) -> Result<Node> {
        self.unary(a, "abs", Op::Abs(a.id), f64::abs)
    }

    /// Multiply by a fixed real.
    pub fn scale(&mut self, a: Node, factor: f64) -> Result<Node> {
        self.unary(a, "scale", Op::Scale(a.id, factor), |x| x * factor)
    }

    /// `sum_k w_k exp(c_k x)` elementwise, for `terms = [(w_k, c_k)]`.
    pub fn exp_mixture(&mut self, a: Node, terms: &[(f64, f64)]) -> Result<Node> {
        self.check(a)?;
        check_terms(terms)?;
        let out = exp_mixture_values(&self.records[a.id].value, terms);
        let index = self.mixtures.len();
        self.mixtures.push(terms.to_vec());
        self.push(out, Op::ExpMixture(a.id, index), "exp_mixture")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) op(b)` where `op` transposes when its flag is set.
    pub fn matmul_t(&mut self, a: Node, ta: bool, b: Node, tb: bool) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let out = self.records[a.id]
            .value
            .matmul_t(ta, &self.records[b.id].value, tb)?;
        self.push(out, Op::MatMul(a.id, b.id, ta, tb), "matmul")
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let out = self.records[a.id].value.transpose();
        self.push(out, Op::Transpose(a.id), "transpose")
    }

    /// Squared Euclidean distances between the rows of `a` (`m x d`) and
    /// the rows of `b` (`n x d`), as an `m x n` matrix.
    pub fn sqdist(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let out = pairwise_sqdist(&self.records[a.id].value, &self.records[b.id].value)?;
        self.push(out, Op::SqDist(a.id, b.id), "sqdist")
    }

    // ---- reductions and expansions ----

    pub fn sum_all(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let s = self.records[a.id].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.id), "sum_all")
    }

    pub fn mean_all(&mut self, a: Node) -> Result<Node> {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Collapse the rows: `m x n -> 1 x n` column sums.
    pub fn sum_rows(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = &self.records[a.id].value;
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let t = Tensor::from_parts(1, v.cols(), out);
        self.push(t, Op::SumRows(a.id), "sum_rows")
    }

    /// Collapse the columns: `m x n -> m x 1` row sums.
    pub fn sum_cols(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = &self.records[a.id].value;
        let out = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let t = Tensor::from_parts(v.rows(), 1, out);
        self.push(t, Op::SumCols(a.id), "sum_cols")
    }

    /// Repeat a `1 x n` row `rows` times.
    pub fn broadcast_row(&mut self, a: Node, rows: usize) -> Result<Node> {
        self.check(a)?;
        if a.rows != 1 || rows == 0 {
            return Err(Error::shape(
                "broadcast_row",
                format!("cannot expand {}x{} to {rows} rows", a.rows, a.cols),
            ));
        }
        let row = self.records[a.id].value.data();
        let mut out = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            out.extend_from_slice(row);
        }
        let t = Tensor::from_parts(rows, a.cols, out);
        self.push(t, Op::BroadcastRow(a.id), "broadcast_row")
    }

    /// Repeat an `m x 1` column `cols` times.
    pub fn broadcast_col(&mut self, a: Node, cols: usize) -> Result<Node> {
        self.check(a)?;
        if a.cols != 1 || cols == 0 {
            return Err(Error::shape(
                "broadcast_col",
                format!("cannot expand {}x{} to {cols} columns", a.rows, a.cols),
            ));
        }
        let col = self.records[a.id].value.data();
        let mut out = Vec::with_capacity(col.len() * cols);
        for &x in col {
            out.extend(std::iter::repeat_n(x, cols));
        }
        let t = Tensor::from_parts(a.rows, cols, out);
        self.push(t, Op::BroadcastCol(a.id), "broadcast_col")
    }

    /// Expand a scalar node to the given shape.
    pub fn expand_scalar(&mut self, a: Node, shape: (usize, usize)) -> Result<Node> {
        let row = self.broadcast_col(a, shape.1)?;
        self.broadcast_row(row, shape.0)
    }

    // ---- differentiation ----

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the returned nodes carry their own producing
    /// operations and can be differentiated again. Nodes in `wrt` that do
    /// not influence `output` receive zero gradients.
    pub fn grad(&mut self, output: Node, wrt: &[Node], create_graph: bool) -> Result<Vec<Node>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !output.is_scalar() {
            return Err(Error::NotScalar {
                rows: output.rows,
                cols: output.cols,
            });
        }

        // Only nodes lying on a path from some `wrt` node to `output` need
        // adjoints.
        let n = output.id + 1;
        let mut on_path = vec![false; n];
        for w in wrt {
            if w.id < n {
                on_path[w.id] = true;
            }
        }
        for id in 0..n {
            if !on_path[id] {
                on_path[id] = self.records[id]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|&i| on_path[i]);
            }
        }

        let saved = self.recording;
        self.recording = create_graph;
        let result = self.backward(output, wrt, &on_path);
        self.recording = saved;
        result
    }

    fn backward(&mut self, output: Node, wrt: &[Node], on_path: &[bool]) -> Result<Vec<Node>> {
        let mut adjoint: Vec<Option<Node>> = vec![None; on_path.len()];
        if on_path[output.id] {
            adjoint[output.id] = Some(self.scalar(1.0)?);
        }
        for id in (0..on_path.len()).rev() {
            if !on_path[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let op = self.records[id].op;
            let out = self.handle(id);
            for (input, contrib) in self.vjp(op, out, g, on_path)? {
                adjoint[input] = Some(match adjoint[input] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => self.constant_tensor(Tensor::zeros(w.rows, w.cols)),
            })
            .collect()
    }

    fn handle(&self, id: usize) -> Node {
        let v = &self.records[id].value;
        Node {
            tape: self.id,
            id,
            rows: v.rows(),
            cols: v.cols(),
        }
    }

    fn mask(&mut self, a: usize, pred: impl Fn(f64) -> f64) -> Result<Node> {
        let m = self.records[a].value.map(pred);
        self.constant_tensor(m)
    }

    /// Reduce a contribution computed at the output shape back to the
    /// shape of a broadcast operand.
    fn unbroadcast(&mut self, contrib: Node, target: usize) -> Result<Node> {
        let t = self.handle(target);
        let mut c = contrib;
        if t.rows == 1 && c.rows > 1 {
            c = self.sum_rows(c)?;
        }
        if t.cols == 1 && c.cols > 1 {
            c = self.sum_cols(c)?;
        }
        Ok(c)
    }

    fn vjp(&mut self, op: Op, out: Node, g: Node, on_path: &[bool]) -> Result<Vec<(usize, Node)>> {
        let mut grads = Vec::with_capacity(2);
        let want = |i: usize| on_path[i];
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    grads.push((a, self.unbroadcast(g, a)?));
                }
                if want(b) {
                    grads.push((b, self.unbroadcast(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    grads.push((a, self.unbroadcast(g, a)?));
                }
                if want(b) {
                    let gb = self.unbroadcast(g, b)?;
                    grads.push((b, self.neg(gb)?));
                }
            }
            Op::Mul(a, b) => {
                let (na, nb) = (self.handle(a), self.handle(b));
                if want(a) {
                    let c = self.mul(g, nb)?;
                    grads.push((a, self.unbroadcast(c, a)?));
                }
                if want(b) {
                    let c = self.mul(g, na)?;
                    grads.push((b, self.unbroadcast(c, b)?));
                }
            }
            Op::Div(a, b) => {
                let nb = self.handle(b);
                if want(a) {
                    let c = self.div(g, nb)?;
                    grads.push((a, self.unbroadcast(c, a)?));
                }
                if want(b) {
                    // d(a/b)/db = -(a/b)/b
                    let go = self.mul(g, out)?;
                    let q = self.div(go, nb)?;
                    let c = self.neg(q)?;
                    grads.push((b, self.unbroadcast(c, b)?));
                }
            }
            Op::Neg(a) => {
                if want(a) {
                    grads.push((a, self.neg(g)?));
                }
            }
            Op::Square(a) => {
                if want(a) {
                    let na = self.handle(a);
                    let c = self.mul(g, na)?;
                    grads.push((a, self.scale(c, 2.0)?));
                }
            }
            Op::SqrtEps(a) => {
                if want(a) {
                    let m = self.mask(a, |x| if x >= 0.0 { 0.5 } else { 0.0 })?;
                    let gm = self.mul(g, m)?;
                    grads.push((a, self.div(gm, out)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    grads.push((a, self.mul(g, out)?));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let m = self.mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 })?;
                    grads.push((a, self.mul(g, m)?));
                }
            }
            Op::Tanh(a) => {
                if want(a) {
                    let sq = self.square(out)?;
                    let one = self.scalar(1.0)?;
                    let d = self.sub(one, sq)?;
                    grads.push((a, self.mul(g, d)?));
                }
            }
            Op::Abs(a) => {
                if want(a) {
                    let m = self.mask(a, |x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })?;
                    grads.push((a, self.mul(g, m)?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    grads.push((a, self.scale(g, c)?));
                }
            }
            Op::ExpMixture(a, index) => {
                if want(a) {
                    let derived: Vec<(f64, f64)> = self.mixtures[index]
                        .iter()
                        .map(|&(w, c)| (w * c, c))
                        .collect();
                    let na = self.handle(a);
                    let d = self.exp_mixture(na, &derived)?;
                    grads.push((a, self.mul(g, d)?));
                }
            }
            Op::MatMul(a, b, ta, tb) => {
                let (na, nb) = (self.handle(a), self.handle(b));
                if want(a) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_t(g, false, nb, true)?,
                        (false, true) => self.matmul_t(g, false, nb, false)?,
                        (true, false) => self.matmul_t(nb, false, g, true)?,
                        (true, true) => self.matmul_t(nb, true, g, true)?,
                    };
                    grads.push((a, c));
                }
                if want(b) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_t(na, true, g, false)?,
                        (false, true) => self.matmul_t(g, true, na, false)?,
                        (true, false) => self.matmul_t(na, false, g, false)?,
                        (true, true) => self.matmul_t(g, true, na, true)?,
                    };
                    grads.push((b, c));
                }
            }
            Op::Transpose(a) => {
                if want(a) {
                    grads.push((a, self.transpose(g)?));
                }
            }
            Op::SumAll(a) => {
                if want(a) {
                    let shape = self.handle(a).shape();
                    grads.push((a, self.expand_scalar(g, shape)?));
                }
            }
            Op::SumRows(a) => {
                if want(a) {
                    let rows = self.handle(a).rows;
                    grads.push((a, self.broadcast_row(g, rows)?));
                }
            }
            Op::SumCols(a) => {
                if want(a) {
                    let cols = self.handle(a).cols;
                    grads.push((a, self.broadcast_col(g, cols)?));
                }
            }
            Op::BroadcastRow(a) => {
                if want(a) {
                    grads.push((a, self.sum_rows(g)?));
                }
            }
            Op::BroadcastCol(a) => {
                if want(a) {
                    grads.push((a, self.sum_cols(g)?));
                }
            }
            Op::SqDist(a, b) => {
                // D_ij = |a_i - b_j|^2
                // dA = 2 (diag(G 1) A - G B),  dB = 2 (diag(G^T 1) B - G^T A)
                let (na, nb) = (self.handle(a), self.handle(b));
                if want(a) {
                    let rs = self.sum_cols(g)?;
                    let left = self.mul(rs, na)?;
                    let right = self.matmul(g, nb)?;
                    let diff = self.sub(left, right)?;
                    grads.push((a, self.scale(diff, 2.0)?));
                }
                if want(b) {
                    let cs = self.sum_rows(g)?;
                    let cs = self.transpose(cs)?;
                    let left = self.mul(cs, nb)?;
                    let right = self.matmul_t(g, true, na, false)?;
                    let diff = self.sub(left, right)?;
                    grads.push((b, self.scale(diff, 2.0)?));
                }
            }
        }
        Ok(grads)
    }
}

fn check_terms(terms: &[(f64, f64)]) -> Result<()> {
    if terms.is_empty() {
        return Err(Error::invalid("exp_mixture needs at least one term"));
    }
    if terms.iter().any(|(w, c)| !w.is_finite() || !c.is_finite()) {
        return Err(Error::invalid("exp_mixture terms must be finite"));
    }
    Ok(())
}

/// How to obtain `exp(c_k x)` for each term: directly, or by squaring the
/// value of an earlier term whose exponent is `c_k / 2^p` (for the usual
/// doubling bandwidth ladders this replaces most calls to `exp`).
fn exp_plan(terms: &[(f64, f64)]) -> Vec<(usize, Option<(usize, u32)>)> {
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&i, &j| terms[i].1.abs().total_cmp(&terms[j].1.abs()));
    let mut plan: Vec<(usize, Option<(usize, u32)>)> = Vec::with_capacity(terms.len());
    for &k in &order {
        let ck = terms[k].1;
        let source = plan
            .iter()
            .filter_map(|&(j, _)| {
                let cj = terms[j].1;
                if cj == 0.0 {
                    return None;
                }
                let r = ck / cj;
                let p = (1..=8u32).find(|&p| r == f64::from(1u32 << p))?;
                (cj * r == ck).then_some((j, p))
            })
            .min_by_key(|&(_, p)| p);
        plan.push((k, source));
    }
    plan
}

/// Plain-array version of [`Tape::exp_mixture`]; both produce the same bits.
pub fn exp_mixture_values(x: &Tensor, terms: &[(f64, f64)]) -> Tensor {
    let mut e: Vec<Vec<f64>> = vec![Vec::new(); terms.len()];
    for (k, source) in exp_plan(terms) {
        e[k] = match source {
            None => {
                let c = terms[k].1;
                x.data().iter().map(|&v| (c * v).exp()).collect()
            }
            Some((j, p)) => {
                let mut v: Vec<f64> = e[j].iter().map(|y| y * y).collect();
                for _ in 1..p {
                    v.iter_mut().for_each(|y| *y *= *y);
                }
                v
            }
        };
    }
    let mut out = vec![0.0; x.len()];
    for (&(w, _), ek) in terms.iter().zip(&e) {
        for (o, v) in out.iter_mut().zip(ek) {
            *o += w * v;
        }
    }
    Tensor::from_parts(x.rows(), x.cols(), out)
}

/// Plain-array squared distances; nonnegative by construction.
pub fn pairwise_sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "sqdist",
            format!("feature dims {} and {} differ", a.cols(), b.cols()),
        ));
    }
    let dim = a.cols();
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for ai in a.data().chunks_exact(dim) {
        for bj in b.data().chunks_exact(dim) {
            let d: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(d);
        }
    }
    Ok(Tensor::from_parts(a.rows(), b.rows(), out))
}
