use crate::error::{Error, Result};
use crate::numerics::tensor::{
    broadcast_zip, matmul, reduce_to_shape, softmax_rows, sum_axis, Tensor,
};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ConcatRows(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Scale(Var, f64),
    // The constant is not needed for backward (the gradient is 1); it is
    // kept so debug output shows the full operation.
    AddConst(Var, #[allow(dead_code)] f64),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ConcatRows(..) => "concat_rows",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Softmax(..) => "softmax",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumAxis(..) => "sum_axis",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, in creation order, for reverse-mode
/// differentiation. Nodes only reference earlier nodes, so walking the tape
/// backwards is already a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient slot per tape node.
/// Tracked leaves that did not influence the loss hold exact zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by op `{}` at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a leaf. `trainable` decides whether gradients flow to it.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        self.push(value, Op::Leaf, trainable)
    }

    /// Trainable leaf: `backward` will report a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Frozen leaf: treated as data, no gradient reported.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = broadcast_zip(op.name(), self.value(a), self.value(b), f)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Stack `a` on top of `b` (rank-2, equal column counts).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.needs(x);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg(x), x, |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    /// Natural log. Errors on any non-positive input rather than producing
    /// a NaN/-inf that would poison the rest of the computation.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {}", bad)));
        }
        self.unary(Op::Log(x), x, f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x), x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(x, slope), x, |v| {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    /// Clamp into `[lo, hi]`. Gradient is passed through strictly inside the
    /// interval and zero outside (and exactly at the edges).
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp: lo {} > hi {}", lo, hi)));
        }
        self.unary(Op::Clamp(x, lo, hi), x, |v| v.clamp(lo, hi))
    }

    /// Lower clamp only; used to keep probabilities away from `log(0)`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.unary(Op::Clamp(x, lo, f64::INFINITY), x, |v| v.max(lo))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(x, c), x, |v| c * v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddConst(x, c), x, |v| v + c)
    }

    /// Row-wise softmax (rank-1 input is one row).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x))?;
        let rg = self.needs(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::contract("mean_all: empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(x), rg)
    }

    /// Sum a rank-2 tensor along `axis`, producing a rank-1 tensor.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = sum_axis(self.value(x), axis)?;
        let rg = self.needs(x);
        self.push(value, Op::SumAxis(x, axis), rg)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that influences the loss; tracked leaves that do not get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Node { value, .. } = &self.nodes[loss.0];
        if value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at node {} (op `{}`)",
                    i,
                    self.nodes[i].op.name()
                )));
            }
            self.propagate(&self.nodes[i].op, &self.nodes[i].value, &g, &mut grads)?;
        }

        // Untouched trainable leaves still get a (zero) gradient so that
        // optimizers can treat the parameter list uniformly.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul(g, &self.value(b).transpose2d()?)?;
                let db = matmul(&self.value(a).transpose2d()?, g)?;
                self.accum(grads, a, da)?;
                self.accum(grads, b, db)?;
            }
            Op::Add(a, b) => {
                self.accum(grads, a, reduce_to_shape(g, self.shape(a))?)?;
                self.accum(grads, b, reduce_to_shape(g, self.shape(b))?)?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, reduce_to_shape(g, self.shape(a))?)?;
                let neg = g.scale(-1.0);
                self.accum(grads, b, reduce_to_shape(&neg, self.shape(b))?)?;
            }
            Op::Mul(a, b) => {
                let da = broadcast_zip("mul_bwd", g, self.value(b), |x, y| x * y)?;
                self.accum(grads, a, reduce_to_shape(&da, self.shape(a))?)?;
                let db = broadcast_zip("mul_bwd", g, self.value(a), |x, y| x * y)?;
                self.accum(grads, b, reduce_to_shape(&db, self.shape(b))?)?;
            }
            Op::Div(a, b) => {
                let da = broadcast_zip("div_bwd", g, self.value(b), |x, y| x / y)?;
                self.accum(grads, a, reduce_to_shape(&da, self.shape(a))?)?;
                // d(a/b)/db = -a / b^2; reuse out = a/b so this is -out/b.
                let scaled = broadcast_zip("div_bwd", g, out, |x, o| x * o)?;
                let db = broadcast_zip("div_bwd", &scaled, self.value(b), |x, y| -x / y)?;
                self.accum(grads, b, reduce_to_shape(&db, self.shape(b))?)?;
            }
            Op::ConcatRows(a, b) => {
                let (ra, ca) = (self.value(a).rows()?, self.value(a).cols()?);
                let rb = self.value(b).rows()?;
                let split = ra * ca;
                let da = Tensor::new(vec![ra, ca], g.data()[..split].to_vec())?;
                let db = Tensor::new(vec![rb, ca], g.data()[split..].to_vec())?;
                self.accum(grads, a, da)?;
                self.accum(grads, b, db)?;
            }
            Op::Neg(x) => self.accum(grads, x, g.scale(-1.0))?,
            Op::Exp(x) => {
                let dx = broadcast_zip("exp_bwd", g, out, |gi, oi| gi * oi)?;
                self.accum(grads, x, dx)?;
            }
            Op::Log(x) => {
                let dx = broadcast_zip("log_bwd", g, self.value(x), |gi, xi| gi / xi)?;
                self.accum(grads, x, dx)?;
            }
            Op::Tanh(x) => {
                let dx = broadcast_zip("tanh_bwd", g, out, |gi, oi| gi * (1.0 - oi * oi))?;
                self.accum(grads, x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = broadcast_zip("sigmoid_bwd", g, out, |gi, oi| gi * oi * (1.0 - oi))?;
                self.accum(grads, x, dx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let dx = broadcast_zip("leaky_relu_bwd", g, self.value(x), |gi, xi| {
                    if xi >= 0.0 {
                        gi
                    } else {
                        gi * slope
                    }
                })?;
                self.accum(grads, x, dx)?;
            }
            Op::Clamp(x, lo, hi) => {
                let dx = broadcast_zip("clamp_bwd", g, self.value(x), |gi, xi| {
                    if xi > lo && xi < hi {
                        gi
                    } else {
                        0.0
                    }
                })?;
                self.accum(grads, x, dx)?;
            }
            Op::Scale(x, c) => self.accum(grads, x, g.scale(c))?,
            Op::AddConst(x, _) => self.accum(grads, x, g.clone())?,
            Op::Softmax(x) => {
                // Per row: dx = s * (g - <g, s>)
                let (rows, cols) = match out.shape() {
                    [n] => (1usize, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!("softmax output is rank 1 or 2"),
                };
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let s = &out.data()[i * cols..(i + 1) * cols];
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..cols {
                        dx[i * cols + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, x, Tensor::new(out.shape().to_vec(), dx)?)?;
            }
            Op::SumAll(x) => {
                let dx = Tensor::filled(self.shape(x).to_vec(), g.data()[0]);
                self.accum(grads, x, dx)?;
            }
            Op::MeanAll(x) => {
                let n = self.value(x).numel() as f64;
                let dx = Tensor::filled(self.shape(x).to_vec(), g.data()[0] / n);
                self.accum(grads, x, dx)?;
            }
            Op::SumAxis(x, axis) => {
                let (r, c) = (self.value(x).rows()?, self.value(x).cols()?);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = if axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                self.accum(grads, x, Tensor::new(vec![r, c], dx)?)?;
            }
        }
        Ok(())
    }
}

/// Central-difference gradients of `f` with respect to `params`, one tensor
/// of partials per parameter. Intended as an independent oracle for
/// [`Tape::backward`] in tests; `f` must be deterministic.
pub fn numerical_gradient(
    params: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape().to_vec());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}
