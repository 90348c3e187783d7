#![allow(dead_code)]

use gamn::nn::{build_generator, build_mapper, Mode, Network};
use gamn::regularizers::{gradient_penalty, interpolate_with};
use gamn::{Node, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROWS: usize = 2;
pub const COLS: usize = 3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(uniform(rng, rows * cols, lo, hi), (rows, cols)).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Central differences of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Expr {
    X,
    Const(Vec<f64>),
    Neg(Box<Expr>),
    Square(Box<Expr>),
    Tanh(Box<Expr>),
    ExpTanh(Box<Expr>),
    Scale(f64, Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// `a / (1 + b^2)`
    SafeDiv(Box<Expr>, Box<Expr>),
    /// `sqrt_eps(a^2 + 1)`
    SoftAbs(Box<Expr>),
    /// `a W` with a fixed 3x3 `W`.
    MatW(Vec<f64>, Box<Expr>),
    /// `(a b^T) K` with a fixed 2x3 `K`.
    OuterT(Vec<f64>, Box<Expr>, Box<Expr>),
    /// `a (a^T b) / 3`
    InnerT(Box<Expr>, Box<Expr>),
    /// `a + column sums of b` (row broadcast).
    RowBcast(Box<Expr>, Box<Expr>),
    /// `a * tanh(row sums of b)` (column broadcast).
    ColBcast(Box<Expr>, Box<Expr>),
    /// A four-term exponential mixture of `-sqdist(a, b)`, times a fixed 2x3 `K`.
    Dist(Vec<f64>, Box<Expr>, Box<Expr>),
    /// `a * (mean of b)` (scalar broadcast).
    ScalarMul(Box<Expr>, Box<Expr>),
}

pub fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    use Expr::*;
    if depth == 0 {
        return if rng.random_bool(0.75) {
            X
        } else {
            Const(uniform(rng, ROWS * COLS, -1.0, 1.0))
        };
    }
    let sub = |rng: &mut ChaCha8Rng| Box::new(random_expr(rng, depth - 1));
    match rng.random_range(0..17) {
        0 => Neg(sub(rng)),
        1 => Square(sub(rng)),
        2 => Tanh(sub(rng)),
        3 => ExpTanh(sub(rng)),
        4 => Scale(rng.random_range(-2.0..2.0), sub(rng)),
        5 => Add(sub(rng), sub(rng)),
        6 => Sub(sub(rng), sub(rng)),
        7 => Mul(sub(rng), sub(rng)),
        8 => SafeDiv(sub(rng), sub(rng)),
        9 => SoftAbs(sub(rng)),
        10 => MatW(uniform(rng, COLS * COLS, -1.0, 1.0), sub(rng)),
        11 => OuterT(uniform(rng, ROWS * COLS, -1.0, 1.0), sub(rng), sub(rng)),
        12 => InnerT(sub(rng), sub(rng)),
        13 => RowBcast(sub(rng), sub(rng)),
        14 => ColBcast(sub(rng), sub(rng)),
        15 => Dist(uniform(rng, ROWS * COLS, -1.0, 1.0), sub(rng), sub(rng)),
        _ => ScalarMul(sub(rng), sub(rng)),
    }
}

pub fn build(tape: &mut Tape, e: &Expr, x: Node) -> Node {
    use Expr::*;
    let t = tape;
    match e {
        X => x,
        Const(v) => t.constant(v.clone(), (ROWS, COLS)).unwrap(),
        Neg(a) => {
            let a = build(t, a, x);
            t.neg(a).unwrap()
        }
        Square(a) => {
            let a = build(t, a, x);
            t.square(a).unwrap()
        }
        Tanh(a) => {
            let a = build(t, a, x);
            t.tanh(a).unwrap()
        }
        ExpTanh(a) => {
            let a = build(t, a, x);
            let th = t.tanh(a).unwrap();
            t.exp(th).unwrap()
        }
        Scale(c, a) => {
            let a = build(t, a, x);
            t.scale(a, *c).unwrap()
        }
        Add(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            t.add(a, b).unwrap()
        }
        Sub(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            t.sub(a, b).unwrap()
        }
        Mul(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            t.mul(a, b).unwrap()
        }
        SafeDiv(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let sq = t.square(b).unwrap();
            let one = t.scalar(1.0).unwrap();
            let den = t.add(sq, one).unwrap();
            t.div(a, den).unwrap()
        }
        SoftAbs(a) => {
            let a = build(t, a, x);
            let sq = t.square(a).unwrap();
            let one = t.scalar(1.0).unwrap();
            let s = t.add(sq, one).unwrap();
            t.sqrt_eps(s, 1e-12).unwrap()
        }
        MatW(w, a) => {
            let a = build(t, a, x);
            let w = t.constant(w.clone(), (COLS, COLS)).unwrap();
            t.matmul(a, w).unwrap()
        }
        OuterT(k, a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let ab = t.matmul_t(a, false, b, true).unwrap();
            let k = t.constant(k.clone(), (ROWS, COLS)).unwrap();
            t.matmul(ab, k).unwrap()
        }
        InnerT(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let atb = t.matmul_t(a, true, b, false).unwrap();
            let p = t.matmul(a, atb).unwrap();
            t.scale(p, 1.0 / 3.0).unwrap()
        }
        RowBcast(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let s = t.sum_rows(b).unwrap();
            t.add(a, s).unwrap()
        }
        ColBcast(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let s = t.sum_cols(b).unwrap();
            let s = t.tanh(s).unwrap();
            t.mul(a, s).unwrap()
        }
        Dist(k, a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let d = t.sqdist(a, b).unwrap();
            let terms = [(1.0, -0.25), (0.5, -1.0), (2.0, -0.0625), (0.7, -0.3)];
            let kern = t.exp_mixture(d, &terms).unwrap();
            let k = t.constant(k.clone(), (ROWS, COLS)).unwrap();
            t.matmul(kern, k).unwrap()
        }
        ScalarMul(a, b) => {
            let (a, b) = (build(t, a, x), build(t, b, x));
            let m = t.mean_all(b).unwrap();
            t.mul(a, m).unwrap()
        }
    }
}

/// A random expression case: the expression, an input point, output
/// weights, and a direction for second-order checks.
pub struct ExprCase {
    pub expr: Expr,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl ExprCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let depth = r.random_range(1..=4);
        ExprCase {
            expr: random_expr(&mut r, depth),
            x: uniform(&mut r, ROWS * COLS, -1.0, 1.0),
            w: uniform(&mut r, ROWS * COLS, -1.0, 1.0),
            v: uniform(&mut r, ROWS * COLS, -1.0, 1.0),
        }
    }

    /// `sum(w * expr(x))` on a fresh tape.
    fn output(&self, tape: &mut Tape, x: &[f64]) -> (Node, Node) {
        let xn = tape
            .variable(Tensor::new(x.to_vec(), (ROWS, COLS)).unwrap())
            .unwrap();
        let e = build(tape, &self.expr, xn);
        let w = tape.constant(self.w.clone(), (ROWS, COLS)).unwrap();
        let we = tape.mul(e, w).unwrap();
        (tape.sum_all(we).unwrap(), xn)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let (out, _) = self.output(&mut tape, x);
        tape.item(out)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let (out, xn) = self.output(&mut tape, x);
        let g = tape.grad(out, &[xn], false).unwrap()[0];
        tape.value(g).data().to_vec()
    }

    /// Gradient of `v . grad(x)` by differentiating the recorded gradient.
    pub fn hessian_vector(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let (out, xn) = self.output(&mut tape, x);
        let g = tape.grad(out, &[xn], true).unwrap()[0];
        let v = tape.constant(self.v.clone(), (ROWS, COLS)).unwrap();
        let gv = tape.mul(g, v).unwrap();
        let s = tape.sum_all(gv).unwrap();
        let h = tape.grad(s, &[xn], false).unwrap()[0];
        tape.value(h).data().to_vec()
    }

    pub fn directional_gradient(&self, x: &[f64]) -> f64 {
        self.gradient(x)
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// (first-order relative error, second-order relative error)
    pub fn check(&self) -> (f64, f64) {
        let fd1 = fd_gradient(&self.x, 1e-6, |p| self.value(p));
        let e1 = rel_err(&self.gradient(&self.x), &fd1);
        let fd2 = fd_gradient(&self.x, 1e-5, |p| self.directional_gradient(p));
        let e2 = rel_err(&self.hessian_vector(&self.x), &fd2);
        (e1, e2)
    }
}

/// Which tiny network a network case differentiates.
#[derive(Debug, Clone, Copy)]
pub enum NetKind {
    /// Layer-norm mapper, loss `sum(w * F(x))`.
    Mapper,
    /// Batch-norm generator in train mode, loss `sum(w * G(z))`.
    Generator,
}

pub struct NetCase {
    pub kind: NetKind,
    pub net: Network,
    pub input: Tensor,
    pub w: Tensor,
}

impl NetCase {
    pub fn new(seed: u64, kind: NetKind) -> Self {
        let mut r = rng(seed);
        let hidden = r.random_range(3..=6);
        let depth = r.random_range(1..=2);
        let rows = r.random_range(3..=5);
        let (net, in_dim) = match kind {
            NetKind::Mapper => (build_mapper(2, hidden, depth, 3, &mut r).unwrap(), 2),
            NetKind::Generator => (build_generator(2, hidden, depth, 2, &mut r).unwrap(), 2),
        };
        let out_dim = net.output_dim;
        let mut net = net;
        // Move norm parameters off their identity initialization.
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        NetCase {
            kind,
            net,
            input: tensor(&mut r, rows, in_dim, -1.5, 1.5),
            w: tensor(&mut r, rows, out_dim, -1.0, 1.0),
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        self.net
            .params()
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect()
    }

    fn set_params(net: &mut Network, flat: &[f64]) {
        let mut i = 0;
        for p in net.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[i..i + n]);
            i += n;
        }
    }

    fn loss(&self, net: &mut Network, tape: &mut Tape) -> (Node, Vec<Node>) {
        let bound = net.bind(tape, true).unwrap();
        let x = tape.constant_tensor(self.input.clone()).unwrap();
        let y = net.forward(tape, &bound, x, Mode::Train).unwrap();
        let w = tape.constant_tensor(self.w.clone()).unwrap();
        let wy = tape.mul(y, w).unwrap();
        (tape.sum_all(wy).unwrap(), bound.parameters().to_vec())
    }

    fn value_at(&self, flat: &[f64]) -> f64 {
        let mut net = self.net.clone();
        Self::set_params(&mut net, flat);
        let mut tape = Tape::new();
        let (out, _) = self.loss(&mut net, &mut tape);
        tape.item(out)
    }

    /// Relative error of parameter gradients against central differences.
    pub fn first_order_error(&self) -> f64 {
        let mut net = self.net.clone();
        let mut tape = Tape::new();
        let (out, params) = self.loss(&mut net, &mut tape);
        let grads = tape.grad(out, &params, false).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|g| tape.value(*g).data().to_vec())
            .collect();
        let fd = fd_gradient(&self.flat_params(), 1e-6, |p| self.value_at(p));
        rel_err(&analytic, &fd)
    }
}

/// Gradient penalty of a tiny layer-norm mapper as a function of its
/// parameters, differentiated through the recorded input gradient.
pub struct GpCase {
    pub net: Network,
    pub x: Tensor,
    pub y: Tensor,
    pub eps: Vec<f64>,
}

impl GpCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let hidden = r.random_range(3..=6);
        let depth = r.random_range(1..=2);
        let rows = r.random_range(3..=5);
        let mut net = build_mapper(2, hidden, depth, 3, &mut r).unwrap();
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        GpCase {
            net,
            x: tensor(&mut r, rows, 2, -1.5, 1.5),
            y: tensor(&mut r, rows, 2, -1.5, 1.5),
            eps: uniform(&mut r, rows, 0.0, 1.0),
        }
    }

    fn gp(&self, net: &mut Network, tape: &mut Tape) -> (Node, Vec<Node>) {
        let bound = net.bind(tape, true).unwrap();
        let xhat = interpolate_with(tape, &self.x, &self.y, &self.eps).unwrap();
        let gp = gradient_penalty(tape, net, &bound, xhat).unwrap();
        (gp, bound.parameters().to_vec())
    }

    pub fn value_at(&self, flat: &[f64]) -> f64 {
        let mut net = self.net.clone();
        NetCase::set_params(&mut net, flat);
        let mut tape = Tape::new();
        let (gp, _) = self.gp(&mut net, &mut tape);
        tape.item(gp)
    }

    pub fn second_order_error(&self) -> f64 {
        let mut net = self.net.clone();
        let mut tape = Tape::new();
        let (gp, params) = self.gp(&mut net, &mut tape);
        let grads = tape.grad(gp, &params, false).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|g| tape.value(*g).data().to_vec())
            .collect();
        let flat: Vec<f64> = self
            .net
            .params()
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect();
        let fd = fd_gradient(&flat, 1e-6, |p| self.value_at(p));
        rel_err(&analytic, &fd)
    }
}

/// Two-layer tanh network `f(x) = sum(w2 * tanh(tanh(x W1) W2))`: second
/// derivative w.r.t. the weights of `v . grad_x f`.
pub struct TanhCase {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub out_w: Vec<f64>,
}

impl TanhCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        TanhCase {
            w1: uniform(&mut r, 3 * 4, -1.0, 1.0),
            w2: uniform(&mut r, 4 * 2, -1.0, 1.0),
            x: uniform(&mut r, 2 * 3, -1.0, 1.0),
            v: uniform(&mut r, 2 * 3, -1.0, 1.0),
            out_w: uniform(&mut r, 2 * 2, -1.0, 1.0),
        }
    }

    /// Returns (v . grad_x f, nodes of W1 and W2) on `tape`.
    fn directional(
        &self,
        tape: &mut Tape,
        w1: &[f64],
        w2: &[f64],
        create: bool,
    ) -> (Node, [Node; 2], Node) {
        let w1n = tape.parameter(w1.to_vec(), (3, 4)).unwrap();
        let w2n = tape.parameter(w2.to_vec(), (4, 2)).unwrap();
        let x = tape
            .variable(Tensor::new(self.x.clone(), (2, 3)).unwrap())
            .unwrap();
        let h = tape.matmul(x, w1n).unwrap();
        let h = tape.tanh(h).unwrap();
        let o = tape.matmul(h, w2n).unwrap();
        let o = tape.tanh(o).unwrap();
        let ow = tape.constant(self.out_w.clone(), (2, 2)).unwrap();
        let f = tape.mul(o, ow).unwrap();
        let f = tape.sum_all(f).unwrap();
        let gx = tape.grad(f, &[x], create).unwrap()[0];
        let v = tape.constant(self.v.clone(), (2, 3)).unwrap();
        let gv = tape.mul(gx, v).unwrap();
        (tape.sum_all(gv).unwrap(), [w1n, w2n], f)
    }

    pub fn second_order_error(&self) -> f64 {
        let mut tape = Tape::new();
        let (d, [w1, w2], _) = self.directional(&mut tape, &self.w1, &self.w2, true);
        let g = tape.grad(d, &[w1, w2], false).unwrap();
        let analytic: Vec<f64> = g
            .iter()
            .flat_map(|n| tape.value(*n).data().to_vec())
            .collect();
        let mut flat = self.w1.clone();
        flat.extend_from_slice(&self.w2);
        let fd = fd_gradient(&flat, 1e-6, |p| {
            let mut t = Tape::new();
            let (d, _, _) = self.directional(&mut t, &p[..12], &p[12..], false);
            t.item(d)
        });
        rel_err(&analytic, &fd)
    }
}
