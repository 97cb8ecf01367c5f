//! Dense double-precision tensors with a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! are recorded in execution order, so node indices are already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use affmtl::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Log,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Divide-by-N variance.
    VariancePopulation,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Reduce(Var, Reduce, Option<usize>),
    Softmax(Var, usize),
    Broadcast(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SliceLast(Var, usize, usize),
    SelectStep(Var, usize),
    StackSteps(Vec<Var>),
    Mask(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not depend on a trainable leaf, or when it
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Split a shape around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let value = matmul_raw(self.value(a), self.value(b), false, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a rank-1 `bias` along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Dimension {
                op: "add_row",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sb[0];
        let b = &self.value(bias).data;
        let mut value = self.value(x).clone();
        for (i, v) in value.data.iter_mut().enumerate() {
            *v += b[i % n];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v += c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Computes `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let src = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = src.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Sigmoid => |v, _| sigmoid(v),
            Unary::Tanh => |v, _| v.tanh(),
            Unary::LeakyRelu(_) => |v, a| if v > 0.0 { v } else { a * v },
            Unary::Log => |v, _| v.ln(),
            Unary::Exp => |v, _| v.exp(),
        };
        let alpha = match kind {
            Unary::LeakyRelu(a) => a,
            _ => 0.0,
        };
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v, alpha)).collect(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Unary(x, kind), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(alpha))
            .expect("leaky_relu is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    /// Reduces over `axis`, or over every element when `axis` is `None`
    /// (giving a rank-0 result).
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner, out_shape) = match axis {
            None => (1, src.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= src.rank() {
                    return Err(Error::Dimension {
                        op: "reduce",
                        left: src.shape.clone(),
                        right: vec![ax],
                    });
                }
                let (o, n, i) = axis_split(&src.shape, ax);
                let mut s = src.shape.clone();
                s.remove(ax);
                (o, n, i, s)
            }
        };
        if n == 0 {
            return Err(Error::Degenerate {
                op: "reduce",
                msg: "empty reduction extent".into(),
            });
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| src.data[(o * n + k) * inner + i];
                let sum: f64 = (0..n).map(at).sum();
                out[o * inner + i] = match kind {
                    Reduce::Sum => sum,
                    Reduce::Mean => sum / n as f64,
                    Reduce::VariancePopulation => {
                        let mean = sum / n as f64;
                        (0..n).map(|k| (at(k) - mean).powi(2)).sum::<f64>() / n as f64
                    }
                };
            }
        }
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reduce(x, kind, axis), rg))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::Mean, axis)
    }

    pub fn variance(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::VariancePopulation, axis)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::Dimension {
                op: "softmax",
                left: src.shape.clone(),
                right: vec![axis],
            });
        }
        let (outer, n, inner) = axis_split(&src.shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n)
                    .map(|k| src.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data: out,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "broadcast",
                left: self.shape(s).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::full(shape, self.value(s).item());
        let rg = self.rg(&[s]);
        Ok(self.push(value, Op::Broadcast(s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| Error::Dimension {
            op: "reshape",
            left: self.shape(x).to_vec(),
            right: shape.to_vec(),
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Selects entries along the first axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let n = *src.shape.first().unwrap_or(&0);
        if rows.is_empty() {
            return Err(Error::Degenerate {
                op: "gather_rows",
                msg: "no rows selected".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: src.shape.clone(),
                right: vec![bad],
            });
        }
        let width = src.len() / n;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&src.data[r * width..(r + 1) * width]);
        }
        let mut shape = src.shape.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// For a `[n, k]` input, picks column `cols[i]` of row `i`, giving `[n]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || src.shape[0] != cols.len() || cols.iter().any(|&c| c >= src.shape[1])
        {
            return Err(Error::Dimension {
                op: "pick",
                left: src.shape.clone(),
                right: vec![cols.len()],
            });
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| src.at(i, c))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::Pick(x, cols.to_vec()), rg))
    }

    /// Slices `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let n = *src.shape.last().unwrap_or(&0);
        if start + len > n || len == 0 {
            return Err(Error::Dimension {
                op: "slice_last",
                left: src.shape.clone(),
                right: vec![start, len],
            });
        }
        let rows = src.len() / n;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.data[r * n + start..r * n + start + len]);
        }
        let mut shape = src.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast(x, start, len), rg))
    }

    /// Takes timestep `t` of a `[b, s, d]` tensor, giving `[b, d]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 3 || t >= src.shape[1] {
            return Err(Error::Dimension {
                op: "select_step",
                left: src.shape.clone(),
                right: vec![t],
            });
        }
        let (b, s, d) = (src.shape[0], src.shape[1], src.shape[2]);
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let at = (i * s + t) * d;
            data.extend_from_slice(&src.data[at..at + d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, d],
                data,
            },
            Op::SelectStep(x, t),
            rg,
        ))
    }

    /// Stacks `s` tensors of shape `[b, d]` into `[b, s, d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or_else(|| Error::Degenerate {
            op: "stack_steps",
            msg: "no steps".into(),
        })?;
        let sh = self.shape(*first).to_vec();
        if sh.len() != 2 {
            return Err(Error::Dimension {
                op: "stack_steps",
                left: sh,
                right: vec![],
            });
        }
        for &v in steps {
            self.same_shape("stack_steps", *first, v)?;
        }
        let (b, d, s) = (sh[0], sh[1], steps.len());
        let mut data = vec![0.0; b * s * d];
        for (t, &v) in steps.iter().enumerate() {
            let src = &self.value(v).data;
            for i in 0..b {
                let at = (i * s + t) * d;
                data[at..at + d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(steps);
        Ok(self.push(
            Tensor {
                shape: vec![b, s, d],
                data,
            },
            Op::StackSteps(steps.to_vec()),
            rg,
        ))
    }

    /// Multiplies elementwise by a fixed mask.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.len() {
            return Err(Error::Dimension {
                op: "mask",
                left: src.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let data = src.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mask(x, mask), rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `rng` is `None` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mask(x, mask)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "loss does not depend on any trainable input".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&lv.shape));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().enumerate().map(|(i, &x)| f(i, x)).collect(),
        };
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, matmul_raw(g, val(*b), false, true));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, matmul_raw(val(*a), g, true, false));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, map(g, &|_, x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                send(*a, map(g, &|i, x| x * tb.data[i]));
                send(*b, map(g, &|i, x| x * ta.data[i]));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                send(*a, map(g, &|i, x| x / tb.data[i]));
                send(
                    *b,
                    map(g, &|i, x| -x * ta.data[i] / (tb.data[i] * tb.data[i])),
                );
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone());
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for (i, v) in g.data.iter().enumerate() {
                    gb[i % n] += v;
                }
                send(*bias, Tensor::from_vec(gb));
            }
            Op::Scale(x, c) => send(*x, map(g, &|_, v| v * c)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let t = Tensor {
                    shape: val(*x).shape.clone(),
                    data: g.data.clone(),
                };
                send(*x, t)
            }
            Op::Unary(x, kind) => {
                let tx = val(*x);
                let d: Tensor = match kind {
                    Unary::Sigmoid => map(g, &|i, v| v * y.data[i] * (1.0 - y.data[i])),
                    Unary::Tanh => map(g, &|i, v| v * (1.0 - y.data[i] * y.data[i])),
                    Unary::LeakyRelu(a) => {
                        map(g, &|i, v| if tx.data[i] > 0.0 { v } else { v * a })
                    }
                    Unary::Log => map(g, &|i, v| v / tx.data[i]),
                    Unary::Exp => map(g, &|i, v| v * y.data[i]),
                };
                send(*x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let tx = val(*x);
                send(
                    *x,
                    map(g, &|i, v| {
                        let xi = tx.data[i];
                        if xi >= *lo && xi <= *hi {
                            v
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Reduce(x, kind, axis) => {
                let tx = val(*x);
                let (outer, n, inner) = match axis {
                    None => (1, tx.len(), 1),
                    Some(ax) => axis_split(&tx.shape, *ax),
                };
                let mut out = vec![0.0; tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g.data[o * inner + i];
                        let idx = |k: usize| (o * n + k) * inner + i;
                        match kind {
                            Reduce::Sum => (0..n).for_each(|k| out[idx(k)] = gi),
                            Reduce::Mean => (0..n).for_each(|k| out[idx(k)] = gi / n as f64),
                            Reduce::VariancePopulation => {
                                let mean =
                                    (0..n).map(|k| tx.data[idx(k)]).sum::<f64>() / n as f64;
                                for k in 0..n {
                                    out[idx(k)] =
                                        gi * 2.0 * (tx.data[idx(k)] - mean) / n as f64;
                                }
                            }
                        }
                    }
                }
                send(
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(&y.shape, *axis);
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g.data[idx(k)] * y.data[idx(k)]).sum();
                        for k in 0..n {
                            out[idx(k)] = y.data[idx(k)] * (g.data[idx(k)] - dot);
                        }
                    }
                }
                send(
                    *x,
                    Tensor {
                        shape: y.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::Broadcast(s) => {
                let total: f64 = g.data.iter().sum();
                send(
                    *s,
                    Tensor {
                        shape: val(*s).shape.clone(),
                        data: vec![total],
                    },
                );
            }
            Op::GatherRows(x, rows) => {
                let tx = val(*x);
                let width = tx.len() / tx.shape[0];
                let mut out = Tensor::zeros(&tx.shape);
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        out.data[r * width + c] += g.data[j * width + c];
                    }
                }
                send(*x, out);
            }
            Op::Pick(x, cols) => {
                let tx = val(*x);
                let k = tx.shape[1];
                let mut out = Tensor::zeros(&tx.shape);
                for (i, &c) in cols.iter().enumerate() {
                    out.data[i * k + c] += g.data[i];
                }
                send(*x, out);
            }
            Op::SliceLast(x, start, len) => {
                let tx = val(*x);
                let n = *tx.shape.last().unwrap();
                let mut out = Tensor::zeros(&tx.shape);
                for r in 0..tx.len() / n {
                    out.data[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                send(*x, out);
            }
            Op::SelectStep(x, t) => {
                let tx = val(*x);
                let (b, s, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let mut out = Tensor::zeros(&tx.shape);
                for i in 0..b {
                    let at = (i * s + t) * d;
                    out.data[at..at + d].copy_from_slice(&g.data[i * d..(i + 1) * d]);
                }
                send(*x, out);
            }
            Op::StackSteps(steps) => {
                let (b, s, d) = (y.shape[0], y.shape[1], y.shape[2]);
                for (t, &v) in steps.iter().enumerate() {
                    let mut part = Vec::with_capacity(b * d);
                    for i in 0..b {
                        let at = (i * s + t) * d;
                        part.extend_from_slice(&g.data[at..at + d]);
                    }
                    send(
                        v,
                        Tensor {
                            shape: vec![b, d],
                            data: part,
                        },
                    );
                }
            }
            Op::Mask(x, mask) => send(*x, map(g, &|i, v| v * mask[i])),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `op(a) x op(b)` where `op` optionally transposes a rank-2 tensor.
fn matmul_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a.data[p * ac + i] } else { a.data[i * ac + p] };
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b.data[j * bc + p];
                }
            } else {
                let brow = &b.data[p * bc..(p + 1) * bc];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Compares [`Tape::backward`] against central differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every input and returns the
/// worst relative error, using `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
///
/// `f` must be deterministic (evaluation-mode dropout).
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    central_difference_error(inputs, &analytic, eps, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    })
}

/// Worst relative error between `analytic` gradients and central differences
/// of `eval` around `inputs`.
pub fn central_difference_error<E>(
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    eval: E,
) -> Result<f64>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data[i];
            probe[k].data[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].data[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
