//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes once in reverse and accumulates vector-Jacobian products
//! into the inputs. Leaves used more than once accumulate, never overwrite.

use super::real::{gemm, MatView};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is a vector of the trailing dimension, repeated per row.
    Row,
    /// Right operand holds one value.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Gelu,
    Exp,
    Log,
    Softplus,
    Relu,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddConst {
        a: Var,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    SumAll {
        a: Var,
    },
    SumRows {
        a: Var,
    },
    SumCols {
        a: Var,
    },
    RowScale {
        a: Var,
        s: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
        inv_temp: T,
    },
    LogSoftmaxRows {
        a: Var,
        inv_temp: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    MinAll {
        a: Var,
        arg: usize,
    },
    MaxCols {
        a: Var,
        args: Vec<usize>,
    },
    Dot {
        a: Var,
        b: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } | Op::ConcatCols { a, b } => {
                vec![*a, *b]
            }
            Op::Dot { a, b } => vec![*a, *b],
            Op::Linear { x, w, bias } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::RowScale { a, s } => vec![*a, *s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Scale { a, .. }
            | Op::AddConst { a }
            | Op::Unary { a, .. }
            | Op::SumAll { a }
            | Op::SumRows { a }
            | Op::SumCols { a }
            | Op::GatherRows { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::SoftmaxRows { a, .. }
            | Op::LogSoftmaxRows { a, .. }
            | Op::NormalizeRows { a, .. }
            | Op::MinAll { a, .. }
            | Op::MaxCols { a, .. } => vec![*a],
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.var(t.with_grad(true))
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.var(t.with_grad(false))
    }

    /// Shorthand for a constant built from raw parts.
    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a node out as a tensor, gradient included when populated.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone())
            .expect("tape nodes keep valid shapes")
            .with_grad(n.requires_grad);
        if let Some(g) = &n.grad {
            t.set_grad(g.clone()).expect("grad matches value");
        }
        t
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::new(self.value(a), m, k),
            MatView::new(self.value(b), k, n),
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::new(self.value(a), m, k),
            MatView::new(self.value(b), n, k).t(),
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }))
    }

    /// `x[m x k] * w[k x n] + bias[n]`; a vector `x` is treated as one row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (m, k) = rows_cols(&sx);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatView::new(self.value(x), m, k),
            MatView::new(self.value(w), k, n),
            T::one(),
            &mut out,
        );
        let shape = if sx.len() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(shape, out, Op::Linear { x, w, bias }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let s = self.shape(a);
        if shape.iter().product::<usize>() != s.iter().product::<usize>()
            || shape.iter().any(|&d| d == 0)
        {
            return Err(Error::dim("reshape", s, &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape { a }))
    }

    // ---- elementwise ----------------------------------------------------

    fn bcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() == 1 && sb[0] == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            Ok(Bcast::Row)
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_mode(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = match bcast {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => {
                let n = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Binary { kind, a, b, bcast }))
    }

    /// `a + b`; `b` may match `a`, be a trailing-dimension vector, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddConst { a })
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Tanh => x.tanh(),
                Unary::Gelu => {
                    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                    T::of(0.5) * x * (T::one() + u.tanh())
                }
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
                Unary::Relu => x.max(T::zero()),
            }
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary { kind, a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= T::zero()) {
            return Err(Error::Degenerate {
                op: "ln",
                reason: "non-positive argument".into(),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    /// `log(1 + exp(a))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    // ---- shape plumbing -------------------------------------------------

    /// Joins along the trailing dimension; leading shapes must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let (m, p) = rows_cols(&sa);
        let (_, q) = rows_cols(&sb);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        Ok(self.push(shape, out, Op::ConcatCols { a, b }))
    }

    /// Stacks vectors and matrices with a common trailing size into rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows of nothing".into()));
        }
        let n = *self.shape(parts[0]).last().unwrap();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != n || self.shape(p).len() > 2 {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Selects rows (repeats allowed); the result is `[idx.len() x n]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.rc(a);
        if idx.is_empty() {
            return Err(Error::Input("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row {bad} out of range for {m} rows")));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    /// One row of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(a, &[i])?;
        let n = self.shape(r)[1];
        self.reshape(r, vec![n])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Column sums: `[m x n] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            add_into(&mut out, &av[i * n..(i + 1) * n]);
        }
        self.push(vec![n], out, Op::SumRows { a })
    }

    /// Column means: `[m x n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.rc(a);
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::of(m as f64))
    }

    /// Row sums: `[m x n] -> [m]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let out = (0..m)
            .map(|i| av[i * n..(i + 1) * n].iter().copied().sum())
            .collect();
        self.push(vec![m], out, Op::SumCols { a })
    }

    /// Smallest element; the gradient goes to the first minimizer.
    pub fn min(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = 0;
        for (i, &v) in av.iter().enumerate() {
            if v < av[arg] {
                arg = i;
            }
        }
        let v = av[arg];
        self.push(vec![1], vec![v], Op::MinAll { a, arg })
    }

    /// Row-wise maximum: `[m x n] -> [m]`, first maximizer on ties.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut args = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            args.push(arg);
            out.push(row[arg]);
        }
        self.push(vec![m], out, Op::MaxCols { a, args })
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return Err(Error::dim("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(vec![1], vec![s], Op::Dot { a, b }))
    }

    // ---- normalizations -------------------------------------------------

    /// Row-wise `softmax(a / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_temp = check_temperature(temperature)?;
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_into(&av[i * n..(i + 1) * n], inv_temp, &mut out[i * n..(i + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows { a, inv_temp }))
    }

    /// Row-wise `log_softmax(a / temperature)`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: T) -> Result<Var> {
        let inv_temp = check_temperature(temperature)?;
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x)) * inv_temp;
            let lse = row
                .iter()
                .map(|&x| (x * inv_temp - mx).exp())
                .sum::<T>()
                .ln()
                + mx;
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x * inv_temp - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmaxRows { a, inv_temp }))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, rstd }))
    }

    /// Scales each row to unit L2 norm; a zero row is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::zero()) || !nrm.is_finite() {
                return Err(Error::Degenerate {
                    op: "normalize",
                    reason: format!("row {i} has zero or non-finite norm"),
                });
            }
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
            norms.push(nrm);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::NormalizeRows { a, norms }))
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        if self.shape(s) != [m] {
            return Err(Error::dim("row_scale", self.shape(a), self.shape(s)));
        }
        let (av, sv) = (self.value(a), self.value(s));
        let out = av.iter().enumerate().map(|(k, &x)| x * sv[k / n]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::RowScale { a, s }))
    }

    // ---- composites -----------------------------------------------------

    /// `<u, v> / (|u| |v|)` for two vectors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u) != self.shape(v) || self.shape(u).len() != 1 {
            return Err(Error::dim("cosine_similarity", self.shape(u), self.shape(v)));
        }
        let nu = self.normalize_rows(u)?;
        let nv = self.normalize_rows(v)?;
        self.dot(nu, nv)
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let na = self.as_matrix(na)?;
        let nb = self.as_matrix(nb)?;
        self.matmul_nt(na, nb)
    }

    /// Views a vector as a one-row matrix; matrices pass through.
    pub fn as_matrix(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() == 1 {
            let n = self.shape(a)[0];
            self.reshape(a, vec![1, n])
        } else {
            Ok(a)
        }
    }

    // ---- backward -------------------------------------------------------

    /// Differentiates the one-element node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_from(&[(loss, vec![T::one()])])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_from(&mut self, seeds: &[(Var, Vec<T>)]) -> Result<()> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut last = 0;
        for (v, g) in seeds {
            let node = &mut self.nodes[v.0];
            if g.len() != node.value.len() {
                return Err(Error::dim("backward seed", &node.shape, &[g.len()]));
            }
            match &mut node.grad {
                Some(acc) => add_into(acc, g),
                None => node.grad = Some(g.clone()),
            }
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => add_into(g, &contrib),
            None => node.grad = Some(contrib),
        }
    }

    fn acc_with<F: FnOnce(&mut [T])>(&mut self, v: Var, f: F) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(g);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.rc(*a);
                let n = rows_cols(&self.nodes[idx].shape).1;
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    let bv = &self.nodes[b.0].value;
                    let bview = if *trans_b {
                        MatView::new(bv.as_slice(), n, k)
                    } else {
                        MatView::new(bv.as_slice(), k, n).t()
                    };
                    gemm(MatView::new(g, m, n), bview, T::zero(), &mut ga);
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].value;
                    let mut gb = vec![T::zero(); k * n];
                    if *trans_b {
                        gemm(
                            MatView::new(g, m, n).t(),
                            MatView::new(av.as_slice(), m, k),
                            T::zero(),
                            &mut gb,
                        );
                    } else {
                        gemm(
                            MatView::new(av.as_slice(), m, k).t(),
                            MatView::new(g, m, n),
                            T::zero(),
                            &mut gb,
                        );
                    }
                    self.acc(*b, gb);
                }
            }
            Op::Linear { x, w, bias } => {
                let (m, k) = self.rc(*x);
                let n = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(
                        MatView::new(g, m, n),
                        MatView::new(self.nodes[w.0].value.as_slice(), k, n).t(),
                        T::zero(),
                        &mut gx,
                    );
                    self.acc(*x, gx);
                }
                if self.needs(*w) {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    self.acc_with(*w, |gw| {
                        gemm(
                            MatView::new(xv.as_slice(), m, k).t(),
                            MatView::new(g, m, n),
                            T::one(),
                            gw,
                        )
                    });
                    self.nodes[x.0].value = xv;
                }
                if let Some(b) = bias {
                    self.acc_with(*b, |gb| {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (a, b, kind, bcast) = (*a, *b, *kind, *bcast);
                let nb = self.nodes[b.0].value.len();
                let bidx = |i: usize| match bcast {
                    Bcast::Same => i,
                    Bcast::Row => i % nb,
                    Bcast::Scalar => 0,
                };
                if self.needs(a) {
                    let ga: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => {
                            let bv = &self.nodes[b.0].value;
                            g.iter().enumerate().map(|(i, &gi)| gi * bv[bidx(i)]).collect()
                        }
                    };
                    self.acc(a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); nb];
                    let av = &self.nodes[a.0].value;
                    for (i, &gi) in g.iter().enumerate() {
                        let c = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[i],
                        };
                        let j = bidx(i);
                        gb[j] = gb[j] + c;
                    }
                    self.acc(b, gb);
                }
            }
            Op::Scale { a, c } => {
                let ga = g.iter().map(|&x| x * *c).collect();
                self.acc(*a, ga);
            }
            Op::AddConst { a } => self.acc(*a, g.to_vec()),
            Op::Unary { kind, a } => {
                let y = &self.nodes[idx].value;
                let x = &self.nodes[a.0].value;
                let ga: Vec<T> = match kind {
                    Unary::Tanh => g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * gelu_grad(xi))
                        .collect(),
                    Unary::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
                    Unary::Log => g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect(),
                    Unary::Softplus => g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * sigmoid(xi))
                        .collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                };
                self.acc(*a, ga);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].value.len();
                self.acc(*a, vec![g[0]; n]);
            }
            Op::SumRows { a } => {
                let (m, _) = self.rc(*a);
                let mut ga = Vec::with_capacity(m * g.len());
                for _ in 0..m {
                    ga.extend_from_slice(g);
                }
                self.acc(*a, ga);
            }
            Op::SumCols { a } => {
                let (_, n) = self.rc(*a);
                let ga = g.iter().flat_map(|&gi| std::iter::repeat(gi).take(n)).collect();
                self.acc(*a, ga);
            }
            Op::RowScale { a, s } => {
                let (m, n) = self.rc(*a);
                if self.needs(*a) {
                    let sv = &self.nodes[s.0].value;
                    let ga = g.iter().enumerate().map(|(k, &gi)| gi * sv[k / n]).collect();
                    self.acc(*a, ga);
                }
                if self.needs(*s) {
                    let av = &self.nodes[a.0].value;
                    let gs = (0..m)
                        .map(|i| {
                            (0..n)
                                .map(|j| g[i * n + j] * av[i * n + j])
                                .sum::<T>()
                        })
                        .collect();
                    self.acc(*s, gs);
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, p) = self.rc(*a);
                let (_, q) = self.rc(*b);
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::GatherRows { a, idx: rows } => {
                let (_, n) = self.rc(*a);
                self.acc_with(*a, |ga| {
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Transpose { a } => {
                let (m, n) = self.rc(*a);
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(*a, ga);
            }
            Op::Reshape { a } => self.acc(*a, g.to_vec()),
            Op::SoftmaxRows { a, inv_temp } => {
                let (m, n) = self.rc(*a);
                let y = &self.nodes[idx].value;
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = *inv_temp * yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, ga);
            }
            Op::LogSoftmaxRows { a, inv_temp } => {
                let (m, n) = self.rc(*a);
                let y = &self.nodes[idx].value;
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..n {
                        ga[i * n + j] = *inv_temp * (gr[j] - yr[j].exp() * gsum);
                    }
                }
                self.acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let (m, n) = self.rc(*x);
                let xv = &self.nodes[x.0].value;
                let gam = &self.nodes[gamma.0].value;
                let nf = T::of(n as f64);
                let mut xhat = vec![T::zero(); m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mu = row.iter().copied().sum::<T>() / nf;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mu) * rstd[i];
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..n {
                            let gh = g[i * n + j] * gam[j];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[i * n + j];
                        }
                        mean_g = mean_g / nf;
                        mean_gx = mean_gx / nf;
                        for j in 0..n {
                            let gh = g[i * n + j] * gam[j];
                            gx[i * n + j] = rstd[i] * (gh - mean_g - xhat[i * n + j] * mean_gx);
                        }
                    }
                    self.acc(*x, gx);
                }
                self.acc_with(*gamma, |gg| {
                    for (k, &gi) in g.iter().enumerate() {
                        gg[k % n] = gg[k % n] + gi * xhat[k];
                    }
                });
                self.acc_with(*beta, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::NormalizeRows { a, norms } => {
                let (m, n) = self.rc(*a);
                let y = &self.nodes[idx].value;
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc(*a, ga);
            }
            Op::MinAll { a, arg } => {
                let arg = *arg;
                self.acc_with(*a, |ga| ga[arg] = ga[arg] + g[0]);
            }
            Op::MaxCols { a, args } => {
                let (_, n) = self.rc(*a);
                self.acc_with(*a, |ga| {
                    for (i, &j) in args.iter().enumerate() {
                        ga[i * n + j] = ga[i * n + j] + g[i];
                    }
                });
            }
            Op::Dot { a, b } => {
                if self.needs(*a) {
                    let ga = self.nodes[b.0].value.iter().map(|&v| v * g[0]).collect();
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let gb = self.nodes[a.0].value.iter().map(|&v| v * g[0]).collect();
                    self.acc(*b, gb);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_temperature<T: Real>(temperature: T) -> Result<T> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::Input(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(T::one() / temperature)
}

fn softmax_into<T: Real>(x: &[T], inv_temp: T, out: &mut [T]) {
    let mx = x.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v)) * inv_temp;
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v * inv_temp - mx).exp();
        z = z + *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

/// Stabilized `softmax(x / temperature)` outside any tape.
pub fn softmax<T: Real>(x: &[T], temperature: T) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    let inv = check_temperature(temperature)?;
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x, inv, &mut out);
    Ok(out)
}

/// Cosine similarity of two plain slices; zero-norm inputs are errors.
pub fn cosine<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::dim("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (mut dot, mut nu, mut nv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    if !(nu > T::zero()) || !(nv > T::zero()) {
        return Err(Error::Degenerate {
            op: "cosine_similarity",
            reason: "zero-norm vector".into(),
        });
    }
    let c = dot / (nu.sqrt() * nv.sqrt());
    Ok(c.max(-T::one()).min(T::one()))
}
