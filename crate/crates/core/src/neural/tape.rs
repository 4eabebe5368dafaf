//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products. Ops that are
//! expensive to express elementwise (recurrent layers, CTC, the MVDR front-end)
//! plug in through [`Function`] with hand-written backward passes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A differentiable op with a custom backward pass.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// input receives no gradient.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `1 x n` row over every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LogSoftmax(Var),
    /// Inverted-scaling dropout mask.
    Dropout(Var, Vec<f64>),
    Rows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Reshape(Var),
    LogFloor(Var, f64),
    L1 {
        input: Var,
        target: Tensor,
        weights: Vec<f64>,
        count: f64,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = out.row_mut(i);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        r.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name.to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", va.shape(), vb.shape())));
        }
        let out = va.matmul(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng, "matmul"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let d = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
            Tensor::from_vec(va.rows(), va.cols(), d)?
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let d = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(va.rows(), va.cols(), d)?
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng, "mul"))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", vx.shape(), vr.shape())));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng, "add_row"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng, "scale")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng, "tanh")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng, "log_softmax")
    }

    /// Zero each entry with probability `p` and scale survivors by `1/(1-p)`.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let d = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), d)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng, "dropout"))
    }

    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(Error::Shape(format!("rows {start}..{end} of {:?}", v.shape())));
        }
        let out = v.slice_rows(start, end);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rows(x, start), ng, "rows"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng, "concat_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols"))
    }

    /// Same values, row-major, in a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(Error::Shape(format!("cannot reshape {:?} to [{rows}, {cols}]", v.shape())));
        }
        let out = Tensor::from_vec(rows, cols, v.data().to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng, "reshape"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng, "sum")
    }

    /// `ln(max(floor, x))` elementwise.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(out, Op::LogFloor(x, floor), ng, "log_floor")
    }

    /// Mean absolute error over entries with non-zero `mask`; an all-masked
    /// target yields 0.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != target.shape() {
            return Err(Error::Shape(format!("l1_loss {:?} vs {:?}", v.shape(), target.shape())));
        }
        let weights: Vec<f64> = match mask {
            Some(m) if m.len() != v.len() => {
                return Err(Error::Shape("l1_loss mask length".into()));
            }
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; v.len()],
        };
        let count: f64 = weights.iter().sum();
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b).abs())
            .sum();
        let loss = if count > 0.0 { total / count } else { 0.0 };
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                input: x,
                target: target.clone(),
                weights,
                count,
            },
            ng,
            "l1_loss",
        ))
    }

    /// Append a custom op whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        let ng = inputs.iter().any(|v| self.ng(*v));
        let name = func.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            ng,
            name,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                        acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), d)?);
                    }
                    if self.ng(*b) {
                        let d = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                        acc(&mut grads, *b, Tensor::from_vec(g.rows(), g.cols(), d)?);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_rows());
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.map(|v| v * s)),
                Op::Sigmoid(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), d)?);
                }
                Op::Tanh(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), d)?);
                }
                Op::LogSoftmax(x) => {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let gs: f64 = g.row(i).iter().sum();
                        for (dv, y) in d.row_mut(i).iter_mut().zip(node.value.row(i)) {
                            *dv -= y.exp() * gs;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Dropout(x, mask) => {
                    let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), d)?);
                }
                Op::Rows(x, start) => {
                    let src = self.value(*x);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice_rows(off, off + r));
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice_cols(off, off + c));
                        }
                        off += c;
                    }
                }
                Op::Reshape(x) => {
                    let v = self.value(*x);
                    acc(&mut grads, *x, Tensor::from_vec(v.rows(), v.cols(), g.data().to_vec())?);
                }
                Op::Sum(x) => {
                    let v = self.value(*x);
                    acc(&mut grads, *x, Tensor::full(v.rows(), v.cols(), g.item()));
                }
                Op::LogFloor(x, floor) => {
                    let v = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(v.data())
                        .map(|(gv, xv)| if *xv > *floor { gv / xv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(v.rows(), v.cols(), d)?);
                }
                Op::L1 {
                    input,
                    target,
                    weights,
                    count,
                } => {
                    let v = self.value(*input);
                    let s = if *count > 0.0 { g.item() / count } else { 0.0 };
                    let d = v
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(weights)
                        .map(|((a, b), w)| {
                            let diff = a - b;
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            s * w * sign
                        })
                        .collect();
                    acc(&mut grads, *input, Tensor::from_vec(v.rows(), v.cols(), d)?);
                }
                Op::Custom { inputs, func } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = func.backward(&g, &vals, &node.value);
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            if self.ng(*v) {
                                acc(&mut grads, *v, gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let build = |which: u8| {
            let mut t = Tape::new();
            let x = t.param(Tensor::from_vec(1, 3, vec![0.2, -0.4, 1.1]).unwrap());
            let a = t.sigmoid(x);
            let la = t.sum(a);
            let b = t.tanh(x);
            let b2 = t.mul(b, b).unwrap();
            let lb = t.sum(b2);
            let loss = match which {
                0 => la,
                1 => lb,
                _ => t.add(la, lb).unwrap(),
            };
            t.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (ga, gb, gab) = (build(0), build(1), build(2));
        for i in 0..3 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn elementary_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        assert_eq!(t.sigmoid(z).index(), 1);
        assert_eq!(t.value(Var(1)).item(), 0.5);
        let u = t.constant(Tensor::full(2, 5, 0.7));
        let ls = t.log_softmax(u);
        for v in t.value(ls).data() {
            assert!((v + 5f64.ln()).abs() < 1e-12);
        }
        for i in 0..2 {
            let lse: f64 = t.value(ls).row(i).iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn l1_of_identical_is_zero_with_zero_grad() {
        let mut t = Tape::new();
        let v = Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = t.param(v.clone());
        let l = t.l1_loss(x, &v, None).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|d| *d == 0.0));
        let shifted = v.map(|a| a + 0.3);
        let l2 = t.l1_loss(x, &shifted, None).unwrap();
        assert!((t.value(l2).item() - 0.3).abs() < 1e-12);
        let none = t.l1_loss(x, &shifted, Some(&[false; 4])).unwrap();
        assert_eq!(t.value(none).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn detects_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        assert!(t.first_non_finite().is_none());
        let y = t.log_floor(x, 0.0);
        let _ = y;
        assert_eq!(t.first_non_finite(), Some("log_floor"));
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.param(Tensor::full(10, 10, 1.0));
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
        let d = t.dropout(x, 0.5, &mut rng).unwrap();
        assert!(t.value(d).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
    }
}
