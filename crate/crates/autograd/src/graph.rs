//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass: each op computes its
//! value eagerly, appends a node, and `backward` replays the nodes in reverse.
//! Most ops work on 2-D `[rows × cols]` tensors.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Relu,
    Exp,
    Log,
    Abs,
    Sin,
    Cos,
    Neg,
    Square,
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }
}

/// Per-channel batch statistics from a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (biased when the batch has one row).
    pub var: Vec<T>,
}

/// Batchnorm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale(Var, T),
    AddScalar(Var),
    Unary(UnKind, Var),
    BoxLocal {
        center: Var,
        yaw: Var,
        log_size: Var,
        points: Var,
    },
    /// GELU keeps `Φ(x)` from the forward pass for its derivative.
    Gelu {
        a: Var,
        cdf: Vec<T>,
    },
    Atan2(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        kind: NormKind,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        taps: usize,
        index: Vec<usize>,
        weight: Vec<T>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Reshape(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    BatchTrain,
    BatchEval,
    Layer,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    first_nonfinite: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn is_matrix(s: &[usize]) -> bool {
    s.len() == 2
}

#[inline]
fn gelu_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

fn map<T: Real>(v: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    v.iter().map(|&x| f(x)).collect()
}

/// `ga += gy · f(src)` elementwise.
fn chain<T: Real>(ga: &mut [T], gy: &[T], src: &[T], f: impl Fn(T) -> T) {
    for ((g, &d), &x) in ga.iter_mut().zip(gy).zip(src) {
        *g = *g + d * f(x);
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.first_nonfinite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(name);
        }
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

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter (sensitivity probes).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push("input", t, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape. Repeated calls return the same node, so
    /// a parameter used twice accumulates both contributions.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push("param", p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_matrix(sa) || !is_matrix(sb) || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul", Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_matrix(sa) || !is_matrix(sb) || sa[1] != sb[1] {
            return Err(dim_err("matmul_nt", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul_nt", Tensor::new(&[n, m], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if !is_matrix(&s) {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        let out = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push("transpose", Tensor::new(&[s[1], s[0]], out)?, Op::Transpose(a), rg))
    }

    /// `x · w + b` with `x: [N×I]`, `w: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if !is_matrix(sx) || !is_matrix(sw) || sx[1] != sw[0] {
            return Err(dim_err("linear", sx, sw));
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != m {
                return Err(dim_err("linear", sw, bv.shape()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push("linear", Tensor::new(&[n, m], out)?, Op::Linear { x, w, b }, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        if is_matrix(sa) {
            let cols = sa[1];
            let row_like = (sb.len() == 1 && sb[0] == cols) || (is_matrix(sb) && sb == [1, cols]);
            if row_like {
                return Ok(Bcast::Row);
            }
            if is_matrix(sb) && sb == [sa[0], 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(dim_err(op, sa, sb))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
            BinKind::Min => "minimum",
            BinKind::Max => "maximum",
        };
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let out: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bc.index(i, cols)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                    BinKind::Min => {
                        if y < x {
                            y
                        } else {
                            x
                        }
                    }
                    BinKind::Max => {
                        if y > x {
                            y
                        } else {
                            x
                        }
                    }
                }
            })
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            name,
            Tensor::new(&shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                bcast: bc,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may be a scalar, a row vector or a column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    /// Elementwise minimum; ties take the left operand.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Min, a, b)
    }

    /// Elementwise maximum; ties take the left operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Max, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a);
        let out: Vec<T> = v.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a);
        let out: Vec<T> = v.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push("add_scalar", t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let name = match kind {
            UnKind::Relu => "relu",
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Abs => "abs",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
            UnKind::Neg => "neg",
            UnKind::Square => "square",
        };
        let v = self.value(a).data();
        let out = match kind {
            UnKind::Relu => map(v, |x| x.max(T::zero())),
            UnKind::Exp => map(v, |x| x.exp()),
            UnKind::Log => map(v, |x| x.ln()),
            UnKind::Abs => map(v, |x| x.abs()),
            UnKind::Sin => map(v, |x| x.sin()),
            UnKind::Cos => map(v, |x| x.cos()),
            UnKind::Neg => map(v, |x| -x),
            UnKind::Square => map(v, |x| x * x),
        };
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(name, t, Op::Unary(kind, a), rg)
    }

    /// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let cdf = map(v, gelu_cdf);
        let out: Vec<T> = v.iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push("gelu", t, Op::Gelu { a, cdf }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnKind::Abs, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnKind::Cos, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, TensorError> {
        let (sy, sx) = (self.shape(y), self.shape(x));
        if sy != sx {
            return Err(dim_err("atan2", sy, sx));
        }
        let out: Vec<T> = self
            .value(y)
            .data()
            .iter()
            .zip(self.value(x).data())
            .map(|(&a, &b)| a.atan2(b))
            .collect();
        let t = Tensor::new(sy, out)?;
        let rg = self.rg(&[y, x]);
        Ok(self.push("atan2", t, Op::Atan2(y, x), rg))
    }

    /// Coordinates of every point in the frame of every box, scaled by the
    /// box size: `R(−yaw)·(p − c) / exp(log_size)`. Boxes are rows of
    /// `center [M×3]`, `yaw [M×1]`, `log_size [M×3]`; the output is
    /// `[M·N×3]` with row `m·N + n` for box `m` and point `n`.
    pub fn box_local(&mut self, center: Var, yaw: Var, log_size: Var, points: Var) -> Result<Var, TensorError> {
        let (sc, sy, ss, sp) = (self.shape(center), self.shape(yaw), self.shape(log_size), self.shape(points));
        let m = sc.first().copied().unwrap_or(0);
        if sc != [m, 3] || sy != [m, 1] || ss != [m, 3] {
            return Err(dim_err("box_local", sc, ss));
        }
        if !is_matrix(sp) || sp[1] != 3 {
            return Err(dim_err("box_local", sp, &[sp[0], 3]));
        }
        let n = sp[0];
        let (c, y, ls, p) = (
            self.value(center).data(),
            self.value(yaw).data(),
            self.value(log_size).data(),
            self.value(points).data(),
        );
        let mut out = vec![T::zero(); m * n * 3];
        for b in 0..m {
            let (sn, cs) = (y[b].sin(), y[b].cos());
            let inv = [(-ls[b * 3]).exp(), (-ls[b * 3 + 1]).exp(), (-ls[b * 3 + 2]).exp()];
            for (k, pt) in p.chunks(3).enumerate() {
                let dx = pt[0] - c[b * 3];
                let dy = pt[1] - c[b * 3 + 1];
                let dz = pt[2] - c[b * 3 + 2];
                let o = &mut out[(b * n + k) * 3..(b * n + k + 1) * 3];
                o[0] = (cs * dx + sn * dy) * inv[0];
                o[1] = (cs * dy - sn * dx) * inv[1];
                o[2] = dz * inv[2];
            }
        }
        let rg = self.rg(&[center, yaw, log_size, points]);
        Ok(self.push(
            "box_local",
            Tensor::new(&[m * n, 3], out)?,
            Op::BoxLocal {
                center,
                yaw,
                log_size,
                points,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s = s + *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push("softmax_rows", t, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + s.ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push("log_softmax_rows", t, Op::LogSoftmaxRows(a), rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a matrix, shape `[1×cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let t = Tensor::new(&[1, c], out).expect("valid");
        let rg = self.rg(&[a]);
        self.push("sum_rows", t, Op::SumRows(a), rg)
    }

    /// Row sums of a matrix, shape `[rows×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let out: Vec<T> = v.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let r = out.len();
        let t = Tensor::new(&[r, 1], out).expect("valid");
        let rg = self.rg(&[a]);
        self.push("sum_cols", t, Op::SumCols(a), rg)
    }

    /// Per-channel batch normalization with affine `gamma`, `beta`. Returns
    /// the batch statistics in training mode so the caller can update its
    /// running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let sx = self.shape(x).to_vec();
        if !is_matrix(&sx) {
            return Err(TensorError::Contract {
                op: "batchnorm",
                msg: format!("expected [N×C], got {sx:?}"),
            });
        }
        let (n, c) = (sx[0], sx[1]);
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(dim_err("batchnorm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64(BN_EPS);
        let xd = self.value(x).data();
        let (mean, var_b, stats, kind) = match mode {
            BnMode::Train => {
                let nt = T::from_f64(n as f64);
                let mut mean = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / nt;
                }
                let mut var = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                let unbiased: Vec<T> = if n > 1 {
                    var.iter().map(|&v| v / T::from_f64((n - 1) as f64)).collect()
                } else {
                    vec![T::zero(); c]
                };
                for v in var.iter_mut() {
                    *v = *v / nt;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), NormKind::BatchTrain)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err("batchnorm", &sx, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None, NormKind::BatchEval)
            }
        };
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xd[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            "batchnorm",
            Tensor::new(&[n, c], out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Per-row layer normalization with per-column affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if !is_matrix(&sx) {
            return Err(TensorError::Contract {
                op: "layernorm",
                msg: format!("expected [N×C], got {sx:?}"),
            });
        }
        let (n, c) = (sx[0], sx[1]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(dim_err("layernorm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64(LN_EPS);
        let ct = T::from_f64(c as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / ct;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ct;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            "layernorm",
            Tensor::new(&[n, c], out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let n = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if !is_matrix(s) || s[0] != n {
                return Err(dim_err("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            "concat_cols",
            Tensor::new(&[n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let c = self.shape(*first)[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if !is_matrix(s) || s[1] != c {
                return Err(dim_err("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push("concat_rows", Tensor::new(&[rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if !is_matrix(&s) || start + len > s[0] || len == 0 {
            return Err(TensorError::Contract {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {s:?}", start + len),
            });
        }
        let out = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push("slice_rows", Tensor::new(&[len, s[1]], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if !is_matrix(&s) || start + len > s[1] || len == 0 {
            return Err(TensorError::Contract {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {s:?}", start + len),
            });
        }
        let out: Vec<T> = (0..s[0])
            .flat_map(|i| self.value(x).row(i)[start..start + len].to_vec())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push("slice_cols", Tensor::new(&[s[0], len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// `out[i] = Σ_t weight[i·taps + t] · x[index[i·taps + t]]` over rows of `x`.
    /// Covers row selection (`taps = 1`, weight 1) and bilinear sampling.
    pub fn gather_rows(
        &mut self,
        x: Var,
        taps: usize,
        index: Vec<usize>,
        weight: Vec<T>,
    ) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if !is_matrix(&s) || taps == 0 || index.len() != weight.len() || index.len() % taps != 0 {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("bad index layout for input {s:?}"),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {s:?}"),
            });
        }
        let (rows, c) = (index.len() / taps, s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * c];
        for i in 0..rows {
            let o = &mut out[i * c..(i + 1) * c];
            for t in 0..taps {
                let w = weight[i * taps + t];
                if w == T::zero() {
                    continue;
                }
                for (ov, &xv) in o.iter_mut().zip(xv.row(index[i * taps + t])) {
                    *ov = *ov + w * xv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            "gather_rows",
            Tensor::new(&[rows, c], out)?,
            Op::Gather {
                x,
                taps,
                index,
                weight,
            },
            rg,
        ))
    }

    /// Selects rows by index.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(x, 1, index.to_vec(), vec![T::one(); index.len()])
    }

    /// Elementwise max over consecutive groups of `group` rows:
    /// `[(N·group)×C] → [N×C]`. Ties pick the earliest row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if !is_matrix(&s) || group == 0 || s[0] % group != 0 {
            return Err(TensorError::Contract {
                op: "group_max",
                msg: format!("{s:?} is not divisible into groups of {group}"),
            });
        }
        let (n, c) = (s[0] / group, s[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = i * group;
                for r in i * group + 1..(i + 1) * group {
                    if xd[r * c + j] > xd[best * c + j] {
                        best = r;
                    }
                }
                out[i * c + j] = xd[best * c + j];
                argmax[i * c + j] = best;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push("group_max", Tensor::new(&[n, c], out)?, Op::GroupMax { x, argmax }, rg))
    }

    /// Unfolds a channels-last image `[h·w × c]` into convolution patches
    /// `[out_h·out_w × kernel²·c]` with zero padding.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s != [geom.h * geom.w, geom.c] {
            return Err(dim_err("im2col", &s, &[geom.h * geom.w, geom.c]));
        }
        let out = kernels::im2col(self.value(x).data(), &geom);
        let shape = [geom.out_h() * geom.out_w(), geom.patch_len()];
        let rg = self.rg(&[x]);
        Ok(self.push("im2col", Tensor::new(&shape, out)?, Op::Im2Col { x, geom }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push("reshape", t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm_nt(gy, bv, ga, n, m, k);
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm_tn(av, gy, gb, n, k, m);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[0]);
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm_nn(gy, bv, ga, n, m, k);
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm_tn(gy, av, gb, n, m, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let t = kernels::transpose(gy, r, c);
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &t);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, k, m) = (sx[0], sx[1], sw[1]);
                let wv = self.value(*w).data();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::gemm_nt(gy, wv, gx, n, m, k);
                }
                let xv = self.value(*x).data();
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::gemm_tn(xv, gy, gw, n, k, m);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in gy.chunks(m) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = self.value(*a).cols();
                let bi = |i: usize| bcast.index(i, cols);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..gy.len() {
                        let y = bv[bi(i)];
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => T::one(),
                            BinKind::Mul => y,
                            BinKind::Div => T::one() / y,
                            BinKind::Min => bool_t(!(y < av[i])),
                            BinKind::Max => bool_t(!(y > av[i])),
                        };
                        ga[i] = ga[i] + gy[i] * d;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gy.len() {
                        let (x, j) = (av[i], bi(i));
                        let y = bv[j];
                        let d = match kind {
                            BinKind::Add => T::one(),
                            BinKind::Sub => -T::one(),
                            BinKind::Mul => x,
                            BinKind::Div => -x / (y * y),
                            BinKind::Min => bool_t(y < x),
                            BinKind::Max => bool_t(y > x),
                        };
                        gb[j] = gb[j] + gy[i] * d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (g, &d) in ga.iter_mut().zip(gy) {
                        *g = *g + d * *c;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
            }
            Op::Unary(kind, a) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    match kind {
                                    UnKind::Relu => chain(ga, gy, xv, |x| bool_t(x > T::zero())),
                        UnKind::Exp => chain(ga, gy, yv, |y| y),
                        UnKind::Log => chain(ga, gy, xv, |x| T::one() / x),
                        UnKind::Abs => chain(ga, gy, xv, |x| x.signum() * bool_t(x != T::zero())),
                        UnKind::Sin => chain(ga, gy, xv, |x| x.cos()),
                        UnKind::Cos => chain(ga, gy, xv, |x| -x.sin()),
                        UnKind::Neg => chain(ga, gy, xv, |_| -T::one()),
                        UnKind::Square => chain(ga, gy, xv, |x| x + x),
                    }
                }
            }
            Op::Gelu { a, cdf } => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..gy.len() {
                        let x = xv[i];
                        ga[i] = ga[i] + gy[i] * (cdf[i] + x * gelu_pdf(x));
                    }
                }
            }
            Op::Atan2(y, x) => {
                let yv = self.value(*y).data();
                let xv = self.value(*x).data();
                let r2: Vec<T> = yv.iter().zip(xv).map(|(&a, &b)| a * a + b * b).collect();
                if let Some(gyv) = self.acc(grads, *y) {
                    for i in 0..gy.len() {
                        gyv[i] = gyv[i] + gy[i] * xv[i] / r2[i];
                    }
                }
                if let Some(gxv) = self.acc(grads, *x) {
                    for i in 0..gy.len() {
                        gxv[i] = gxv[i] - gy[i] * yv[i] / r2[i];
                    }
                }
            }
            Op::BoxLocal {
                center,
                yaw,
                log_size,
                points,
            } => {
                let (_, y, ls, p) = (
                    self.value(*center).data(),
                    self.value(*yaw).data(),
                    self.value(*log_size).data(),
                    self.value(*points).data(),
                );
                let q = node.value.data();
                let (m, n) = (y.len(), p.len() / 3);
                let mut gc = vec![T::zero(); m * 3];
                let mut gyaw = vec![T::zero(); m];
                let mut gls = vec![T::zero(); m * 3];
                let mut gp = vec![T::zero(); n * 3];
                for b in 0..m {
                    let (sn, cs) = (y[b].sin(), y[b].cos());
                    let inv = [(-ls[b * 3]).exp(), (-ls[b * 3 + 1]).exp(), (-ls[b * 3 + 2]).exp()];
                    let s = [ls[b * 3].exp(), ls[b * 3 + 1].exp(), ls[b * 3 + 2].exp()];
                    for k in 0..n {
                        let r = (b * n + k) * 3;
                        let (gq, qv) = (&gy[r..r + 3], &q[r..r + 3]);
                        let gl = [gq[0] * inv[0], gq[1] * inv[1], gq[2] * inv[2]];
                        for a in 0..3 {
                            gls[b * 3 + a] = gls[b * 3 + a] - gq[a] * qv[a];
                        }
                        let (lx, ly) = (qv[0] * s[0], qv[1] * s[1]);
                        gyaw[b] = gyaw[b] + gl[0] * ly - gl[1] * lx;
                        let gd = [cs * gl[0] - sn * gl[1], sn * gl[0] + cs * gl[1], gl[2]];
                        for a in 0..3 {
                            gc[b * 3 + a] = gc[b * 3 + a] - gd[a];
                            gp[k * 3 + a] = gp[k * 3 + a] + gd[a];
                        }
                    }
                }
                for (v, g) in [(*center, gc), (*yaw, gyaw), (*log_size, gls), (*points, gp)] {
                    if let Some(acc) = self.acc(grads, v) {
                        add_into(acc, &g);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g_row, y_row), ga_row) in gy.chunks(c).zip(yv.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: T = g_row.iter().zip(y_row).map(|(&g, &y)| g * y).sum();
                        for j in 0..c {
                            ga_row[j] = ga_row[j] + y_row[j] * (g_row[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g_row, y_row), ga_row) in gy.chunks(c).zip(yv.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: T = g_row.iter().copied().sum();
                        for j in 0..c {
                            ga_row[j] = ga_row[j] + g_row[j] - y_row[j].exp() * s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for g in ga.iter_mut() {
                        *g = *g + gy[0];
                    }
                }
            }
            Op::SumRows(a) => {
                let c = out_shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for row in ga.chunks_mut(c) {
                        add_into(row, gy);
                    }
                }
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, &g) in ga.chunks_mut(c).zip(gy) {
                        for v in row.iter_mut() {
                            *v = *v + g;
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let (n, c) = (out_shape[0], out_shape[1]);
                let g = self.value(*gamma).data();
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in gy.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (row, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    match kind {
                        NormKind::BatchEval => {
                            for i in 0..n {
                                for j in 0..c {
                                    let k = i * c + j;
                                    gx[k] = gx[k] + gy[k] * g[j] * inv_std[j];
                                }
                            }
                        }
                        NormKind::BatchTrain => {
                            let nt = T::from_f64(n as f64);
                            let mut s1 = vec![T::zero(); c];
                            let mut s2 = vec![T::zero(); c];
                            for i in 0..n {
                                for j in 0..c {
                                    let k = i * c + j;
                                    let dh = gy[k] * g[j];
                                    s1[j] = s1[j] + dh;
                                    s2[j] = s2[j] + dh * xhat[k];
                                }
                            }
                            for i in 0..n {
                                for j in 0..c {
                                    let k = i * c + j;
                                    let dh = gy[k] * g[j];
                                    gx[k] = gx[k]
                                        + inv_std[j] / nt * (nt * dh - s1[j] - xhat[k] * s2[j]);
                                }
                            }
                        }
                        NormKind::Layer => {
                            let ct = T::from_f64(c as f64);
                            for i in 0..n {
                                let mut s1 = T::zero();
                                let mut s2 = T::zero();
                                for j in 0..c {
                                    let dh = gy[i * c + j] * g[j];
                                    s1 = s1 + dh;
                                    s2 = s2 + dh * xhat[i * c + j];
                                }
                                for j in 0..c {
                                    let k = i * c + j;
                                    let dh = gy[k] * g[j];
                                    gx[k] = gx[k] + inv_std[i] / ct * (ct * dh - s1 - xhat[k] * s2);
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for (i, row) in gp.chunks_mut(c).enumerate() {
                            add_into(row, &gy[i * total + off..i * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out_shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * c..start * c + gy.len()], gy);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out_shape[1];
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, row) in gy.chunks(len).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + len], row);
                    }
                }
            }
            Op::Gather {
                x,
                taps,
                index,
                weight,
            } => {
                let c = out_shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, row) in gy.chunks(c).enumerate() {
                        for t in 0..*taps {
                            let w = weight[i * taps + t];
                            if w == T::zero() {
                                continue;
                            }
                            let src = index[i * taps + t];
                            for (g, &d) in gx[src * c..(src + 1) * c].iter_mut().zip(row) {
                                *g = *g + w * d;
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                let c = out_shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &d) in gy.iter().enumerate() {
                        let src = argmax[k] * c + k % c;
                        gx[src] = gx[src] + d;
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::col2im_add(gy, geom, gx);
                }
            }
        }
    }
}

#[inline]
fn bool_t<T: Real>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node; `None` if the node does not
    /// influence the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter; zeros when it did not participate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Vec<T> {
        self.params
            .get(&id)
            .and_then(|v| self.wrt(*v))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); store.value(id).numel()])
    }

    /// Gradients for every parameter of the store, in store order.
    pub fn all_params(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }
}

