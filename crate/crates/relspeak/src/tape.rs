//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every forward primitive appends a node recording its inputs and enough
//! saved state to run the backward rule. `backward` replays the tape in
//! reverse, accumulating gradients by summation in tape order, which keeps
//! runs with the same seed bit-identical.
//!
//! Dropout is the only stochastic op; its mask comes from the tape's own
//! ChaCha20 stream so a tape seeded the same way replays identically. In
//! evaluation mode dropout is the identity and records nothing.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{shape_str, Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: usize, b: usize },
    /// [m,n] x [n] -> [m]
    MatVec { a: usize, x: usize },
    /// [m] x [m,n] -> [n]  (A^T x)
    VecMat { x: usize, a: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// add vector to each row of a matrix
    AddRow { m: usize, v: usize },
    /// multiply each row of a matrix by a vector
    MulRow { m: usize, v: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    /// concatenate along axis 0 (vectors end to end, matrices row blocks)
    ConcatRows { a: usize, b: usize },
    /// concatenate matrices along axis 1
    ConcatCols { a: usize, b: usize },
    /// row lookup in a matrix (embedding)
    GatherRow { m: usize, row: usize },
    SoftmaxVec { x: usize },
    /// softmax along axis 1, independently per row
    SoftmaxRows { x: usize },
    LogSoftmaxVec { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    RowSum { m: usize },
    ColSum { m: usize },
    /// single element of a vector
    Pick { x: usize, idx: usize },
    Scale { x: usize, c: f64 },
    Reshape { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    /// Test fixture: forward tanh with a sign error in its backward rule.
    /// Exists only as a negative control for the gradient checker.
    TanhBuggyBackward { x: usize },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha20Rng,
    train_mode: bool,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`. Zero tensors are returned for
    /// requires-grad leaves that do not lie on any path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_seed(0)
    }

    /// `seed` feeds only the dropout stream.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            train_mode: false,
            consumed: false,
        }
    }

    pub fn train_mode(seed: u64) -> Self {
        let mut t = Tape::with_seed(seed);
        t.train_mode = true;
        t
    }

    pub fn is_training(&self) -> bool {
        self.train_mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Shared-ownership leaf; avoids copying large parameter tensors.
    pub fn leaf_shared(&mut self, t: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    // ── Forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(ta.data(), tb.data(), &mut out, m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out).unwrap(),
            Op::MatMul { a: a.0, b: b.0 },
            req,
        ))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.shape().len() != 2 || tx.shape().len() != 1 || ta.shape()[1] != tx.shape()[0] {
            return Err(self.mismatch("matvec", a, x));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            out[i] = dot(row, tx.data());
        }
        let req = self.req(a) || self.req(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec { a: a.0, x: x.0 }, req))
    }

    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        if ta.shape().len() != 2 || tx.shape().len() != 1 || ta.shape()[0] != tx.shape()[0] {
            return Err(self.mismatch("vecmat", x, a));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            let xi = tx.data()[i];
            if xi != 0.0 {
                let row = &ta.data()[i * n..(i + 1) * n];
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += xi * r;
                }
            }
        }
        let req = self.req(a) || self.req(x);
        Ok(self.push(Tensor::vector(out), Op::VecMat { x: x.0, a: a.0 }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "transpose expects a matrix, got {}",
                shape_str(ta.shape())
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let req = self.req(a);
        Ok(self.push(
            Tensor::from_vec(vec![n, m], out).unwrap(),
            Op::Transpose { a: a.0 },
            req,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Add { a: a.0, b: b.0 },
            req,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Mul { a: a.0, b: b.0 },
            req,
        ))
    }

    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(self.mismatch("add_row", m, v));
        }
        let cols = tm.shape()[1];
        let out: Vec<f64> = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tv.data()[i % cols])
            .collect();
        let shape = tm.shape().to_vec();
        let req = self.req(m) || self.req(v);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::AddRow { m: m.0, v: v.0 },
            req,
        ))
    }

    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(self.mismatch("mul_row", m, v));
        }
        let cols = tm.shape()[1];
        let out: Vec<f64> = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tv.data()[i % cols])
            .collect();
        let shape = tm.shape().to_vec();
        let req = self.req(m) || self.req(v);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::MulRow { m: m.0, v: v.0 },
            req,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Tanh { x: x.0 },
            req,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Sigmoid { x: x.0 },
            req,
        )
    }

    /// Deliberately wrong backward rule (negated tanh'), forward identical
    /// to `tanh`. Negative control for gradient-check tests only.
    #[doc(hidden)]
    pub fn tanh_buggy_backward(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::TanhBuggyBackward { x: x.0 },
            req,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (value, op) = match (ta.shape().len(), tb.shape().len()) {
            (1, 1) => {
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                (Tensor::vector(data), Op::ConcatRows { a: a.0, b: b.0 })
            }
            (2, 2) if ta.shape()[1] == tb.shape()[1] => {
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                (
                    Tensor::from_vec(vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1]], data)
                        .unwrap(),
                    Op::ConcatRows { a: a.0, b: b.0 },
                )
            }
            _ => return Err(self.mismatch("concat_rows", a, b)),
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, op, req))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (rows, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_vec(vec![rows, ca + cb], data).unwrap(),
            Op::ConcatCols { a: a.0, b: b.0 },
            req,
        ))
    }

    pub fn gather_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "gather_row expects a matrix, got {}",
                shape_str(tm.shape())
            )));
        }
        if row >= tm.shape()[0] {
            return Err(Error::Invalid(format!(
                "gather_row index {} out of range for {} rows",
                row,
                tm.shape()[0]
            )));
        }
        let cols = tm.shape()[1];
        let data = tm.data()[row * cols..(row + 1) * cols].to_vec();
        let req = self.req(m);
        Ok(self.push(Tensor::vector(data), Op::GatherRow { m: m.0, row }, req))
    }

    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 {
            return Err(Error::Invalid(format!(
                "softmax_vec expects a vector, got {}",
                shape_str(tx.shape())
            )));
        }
        if tx.numel() == 0 {
            return Err(Error::EmptySoftmaxAxis);
        }
        let out = softmax_slice(tx.data());
        let req = self.req(x);
        Ok(self.push(Tensor::vector(out), Op::SoftmaxVec { x: x.0 }, req))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "softmax_rows expects a matrix, got {}",
                shape_str(tx.shape())
            )));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        if cols == 0 {
            return Err(Error::EmptySoftmaxAxis);
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend(softmax_slice(&tx.data()[i * cols..(i + 1) * cols]));
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_vec(vec![rows, cols], out).unwrap(),
            Op::SoftmaxRows { x: x.0 },
            req,
        ))
    }

    pub fn log_softmax_vec(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || tx.numel() == 0 {
            return Err(Error::EmptySoftmaxAxis);
        }
        let max = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = tx.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let out: Vec<f64> = tx.data().iter().map(|v| v - lse).collect();
        let req = self.req(x);
        Ok(self.push(Tensor::vector(out), Op::LogSoftmaxVec { x: x.0 }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, req)
    }

    pub fn row_sum(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape().len() != 2 {
            return Err(Error::Invalid("row_sum expects a matrix".into()));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let out: Vec<f64> = (0..rows)
            .map(|i| tm.data()[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let req = self.req(m);
        Ok(self.push(Tensor::vector(out), Op::RowSum { m: m.0 }, req))
    }

    pub fn col_sum(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape().len() != 2 {
            return Err(Error::Invalid("col_sum expects a matrix".into()));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += tm.data()[i * cols + j];
            }
        }
        let req = self.req(m);
        Ok(self.push(Tensor::vector(out), Op::ColSum { m: m.0 }, req))
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || idx >= tx.numel() {
            return Err(Error::Invalid(format!(
                "pick index {} out of range for shape {}",
                idx,
                shape_str(tx.shape())
            )));
        }
        let v = tx.data()[idx];
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x: x.0, idx }, req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Scale { x: x.0, c },
            req,
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::Invalid(format!(
                "reshape {} -> {} changes element count",
                shape_str(tx.shape()),
                shape_str(&shape)
            )));
        }
        let data = tx.data().to_vec();
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Reshape { x: x.0 },
            req,
        ))
    }

    /// Inverted dropout: keeps each value with probability `1 - rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} not in [0,1)")));
        }
        if !self.train_mode || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_vec(shape, out).unwrap(),
            Op::Dropout { x: x.0, mask },
            req,
        ))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: shape_str(self.value(a).shape()),
            rhs: shape_str(self.value(b).shape()),
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// errors. Every requires-grad leaf gets a gradient, zero if it sits
    /// on no path to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape_str(self.value(loss).shape())));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if let Some(g) = grads[id].take() {
                    Some(Tensor::from_vec(node.value.shape().to_vec(), g).unwrap())
                } else if node.requires_grad && matches!(node.op, Op::Leaf) {
                    Some(Tensor::zeros(node.value.shape().to_vec()))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        let needs = |i: usize| self.nodes[i].requires_grad;
        macro_rules! acc {
            ($target:expr, $update:expr) => {
                if needs($target) {
                    let t = $target;
                    let slot =
                        grads[t].get_or_insert_with(|| vec![0.0; self.nodes[t].value.numel()]);
                    let f: &mut dyn FnMut(&mut [f64]) = &mut $update;
                    f(slot);
                }
            };
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc!(*a, |da: &mut [f64]| {
                    // dA += G B^T
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, d) in darow.iter_mut().enumerate() {
                            *d += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    // dB += A^T G
                    for i in 0..m {
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &aip) in arow.iter().enumerate() {
                            if aip != 0.0 {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::MatVec { a, x } => {
                let (ta, tx) = (val(*a), val(*x));
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                acc!(*a, |da: &mut [f64]| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi != 0.0 {
                            let darow = &mut da[i * n..(i + 1) * n];
                            for (d, &xv) in darow.iter_mut().zip(tx.data()) {
                                *d += gi * xv;
                            }
                        }
                    }
                });
                acc!(*x, |dx: &mut [f64]| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi != 0.0 {
                            let arow = &ta.data()[i * n..(i + 1) * n];
                            for (d, &av) in dx.iter_mut().zip(arow) {
                                *d += gi * av;
                            }
                        }
                    }
                });
            }
            Op::VecMat { x, a } => {
                let (tx, ta) = (val(*x), val(*a));
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                acc!(*x, |dx: &mut [f64]| {
                    for i in 0..m {
                        dx[i] += dot(&ta.data()[i * n..(i + 1) * n], g);
                    }
                });
                acc!(*a, |da: &mut [f64]| {
                    for i in 0..m {
                        let xi = tx.data()[i];
                        if xi != 0.0 {
                            for j in 0..n {
                                da[i * n + j] += xi * g[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                acc!(*a, |da: &mut [f64]| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |da: &mut [f64]| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                acc!(*b, |db: &mut [f64]| for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                acc!(*a, |da: &mut [f64]| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * tb.data()[i];
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[i] * ta.data()[i];
                    }
                });
            }
            Op::AddRow { m, v } => {
                let cols = val(*v).numel();
                acc!(*m, |dm: &mut [f64]| for (d, gv) in dm.iter_mut().zip(g) {
                    *d += gv;
                });
                acc!(*v, |dv: &mut [f64]| {
                    for (i, gv) in g.iter().enumerate() {
                        dv[i % cols] += gv;
                    }
                });
            }
            Op::MulRow { m, v } => {
                let (tm, tv) = (val(*m), val(*v));
                let cols = tv.numel();
                acc!(*m, |dm: &mut [f64]| {
                    for (i, d) in dm.iter_mut().enumerate() {
                        *d += g[i] * tv.data()[i % cols];
                    }
                });
                acc!(*v, |dv: &mut [f64]| {
                    for (i, gv) in g.iter().enumerate() {
                        dv[i % cols] += gv * tm.data()[i];
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &self.nodes[id].value;
                acc!(*x, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let yv = y.data()[i];
                        *d += g[i] * (1.0 - yv * yv);
                    }
                });
            }
            Op::TanhBuggyBackward { x } => {
                let y = &self.nodes[id].value;
                acc!(*x, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let yv = y.data()[i];
                        // sign error, on purpose
                        *d -= g[i] * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                acc!(*x, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let yv = y.data()[i];
                        *d += g[i] * yv * (1.0 - yv);
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let na = val(*a).numel();
                acc!(*a, |da: &mut [f64]| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                acc!(*b, |db: &mut [f64]| {
                    for (d, gv) in db.iter_mut().zip(&g[na..]) {
                        *d += gv;
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (rows, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc!(*a, |da: &mut [f64]| {
                    for i in 0..rows {
                        for j in 0..ca {
                            da[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    for i in 0..rows {
                        for j in 0..cb {
                            db[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::GatherRow { m, row } => {
                let cols = val(*m).shape()[1];
                let row = *row;
                acc!(*m, |dm: &mut [f64]| {
                    for (j, gv) in g.iter().enumerate() {
                        dm[row * cols + j] += gv;
                    }
                });
            }
            Op::SoftmaxVec { x } => {
                let y = &self.nodes[id].value;
                acc!(*x, |dx: &mut [f64]| {
                    softmax_backward(y.data(), g, dx);
                });
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                let cols = y.shape()[1];
                acc!(*x, |dx: &mut [f64]| {
                    for i in 0..y.shape()[0] {
                        let r = i * cols..(i + 1) * cols;
                        softmax_backward(&y.data()[r.clone()], &g[r.clone()], &mut dx[r]);
                    }
                });
            }
            Op::LogSoftmaxVec { x } => {
                let y = &self.nodes[id].value;
                acc!(*x, |dx: &mut [f64]| {
                    let gsum: f64 = g.iter().sum();
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] - y.data()[i].exp() * gsum;
                    }
                });
            }
            Op::Sum { x } => {
                acc!(*x, |dx: &mut [f64]| for d in dx.iter_mut() {
                    *d += g[0];
                });
            }
            Op::Mean { x } => {
                let n = val(*x).numel() as f64;
                acc!(*x, |dx: &mut [f64]| for d in dx.iter_mut() {
                    *d += g[0] / n;
                });
            }
            Op::RowSum { m } => {
                let cols = val(*m).shape()[1];
                acc!(*m, |dm: &mut [f64]| {
                    for (i, d) in dm.iter_mut().enumerate() {
                        *d += g[i / cols];
                    }
                });
            }
            Op::ColSum { m } => {
                let cols = val(*m).shape()[1];
                acc!(*m, |dm: &mut [f64]| {
                    for (i, d) in dm.iter_mut().enumerate() {
                        *d += g[i % cols];
                    }
                });
            }
            Op::Pick { x, idx } => {
                let idx = *idx;
                acc!(*x, |dx: &mut [f64]| {
                    dx[idx] += g[0];
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc!(*x, |dx: &mut [f64]| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Reshape { x } => {
                acc!(*x, |dx: &mut [f64]| for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                });
            }
            Op::Dropout { x, mask } => {
                acc!(*x, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * mask[i];
                    }
                });
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Four independent accumulators break the serial add dependency, which
/// matters: every LSTM gate funnels through this.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let chunks = n / 4 * 4;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < chunks {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// Numerically stable softmax (max subtraction).
fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// dx += y ⊙ (g − (g·y))
fn softmax_backward(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let gy = dot(g, y);
    for (i, d) in dx.iter_mut().enumerate() {
        *d += y[i] * (g[i] - gy);
    }
}
