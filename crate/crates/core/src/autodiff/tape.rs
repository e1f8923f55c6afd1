//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates its primal value eagerly and appends a node to
//! the tape, so nodes are always in topological order. [`Tape::backward`]
//! walks the tape once in reverse. Second derivatives are never needed: the
//! value network builds its input gradient out of ordinary first-order nodes
//! (`tanh` is recorded as a primal op), so losses containing ∇Φ are
//! differentiated by the same single reverse sweep.

use std::fmt;
use std::sync::Arc;

use super::sparse::{BandedLu, SparseMatrix};
use super::tensor::{dot, softplus_sym, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside the tape with a hand-written vector-Jacobian
/// product. The primal output is computed by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the gradient contribution for each input (`None` where
    /// `needs_grad` is false).
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone)]
enum Op {
    Constant,
    Variable,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    ScalarMul(NodeId, NodeId),
    Tanh(NodeId),
    SoftplusSym(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatVecT(NodeId, NodeId),
    Linear(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    SumCols(NodeId),
    SparseMatVec(Arc<SparseMatrix>, NodeId),
    Solve(Arc<BandedLu>, NodeId),
    Slice(NodeId, usize),
    Concat(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    Custom(Arc<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Tanh(..) => "tanh",
            Op::SoftplusSym(..) => "softplus_sym",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::MatVec(..) => "matvec",
            Op::MatVecT(..) => "matvec_t",
            Op::Linear(..) => "linear",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::SumCols(..) => "sum_cols",
            Op::SparseMatVec(..) => "sparse_matvec",
            Op::Solve(..) => "solve",
            Op::Slice(..) => "slice",
            Op::Concat(..) => "concat",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    nonfinite: Option<(usize, &'static str)>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros of length `len` when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() == b.len() && (a.shape() == b.shape() || a.len() == 1) {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(id)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len("add", va, vb)?;
        let v = zip(va, vb, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), self.ng(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len("sub", va, vb)?;
        let v = zip(va, vb, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), self.ng(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len("mul", va, vb)?;
        let v = zip(va, vb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), self.ng(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| c * x);
        self.push(v, Op::Scale(a, c), self.ng(&[a]))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddConst(a), self.ng(&[a]))
    }

    /// `s * v` for a one-element node `s`.
    pub fn scalar_mul(&mut self, s: NodeId, v: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", "first operand must be scalar"));
        }
        let c = self.scalar(s);
        let out = map(self.value(v), |x| c * x);
        Ok(self.push(out, Op::ScalarMul(s, v), self.ng(&[s, v])))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a), self.ng(&[a]))
    }

    /// Elementwise log(eˣ + e⁻ˣ); its derivative is tanh.
    pub fn softplus_sym(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), softplus_sym);
        self.push(v, Op::SoftplusSym(a), self.ng(&[a]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a), self.ng(&[a]))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::ln);
        self.push(v, Op::Ln(a), self.ng(&[a]))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a), self.ng(&[a]))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::abs);
        self.push(v, Op::Abs(a), self.ng(&[a]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a), self.ng(&[a]))
    }

    /// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), self.ng(&[a]))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len("maximum", va, vb)?;
        let v = zip(va, vb, f64::max);
        Ok(self.push(v, Op::Maximum(a, b), self.ng(&[a, b])))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len("minimum", va, vb)?;
        let v = zip(va, vb, f64::min);
        Ok(self.push(v, Op::Minimum(a, b), self.ng(&[a, b])))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.ng(&[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), self.ng(&[a]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("dot", format!("{} vs {}", va.len(), vb.len())));
        }
        let s = dot(va.data(), vb.data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), self.ng(&[a, b])))
    }

    /// `W x` for a matrix `W` (m×k) and vector `x` (k).
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.rank() != 2 || vw.cols() != vx.len() {
            return Err(shape_err(
                "matvec",
                format!("{:?} · {:?}", vw.shape(), vx.shape()),
            ));
        }
        let (m, k) = (vw.rows(), vw.cols());
        let mut y = vec![0.0; m];
        super::tensor::matvec(vw.data(), m, k, vx.data(), &mut y);
        Ok(self.push(Tensor::vector(y), Op::MatVec(w, x), self.ng(&[w, x])))
    }

    /// `Wᵀ v` for a matrix `W` (m×k) and vector `v` (m).
    pub fn matvec_t(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (vw, vv) = (self.value(w), self.value(v));
        if vw.rank() != 2 || vw.rows() != vv.len() {
            return Err(shape_err(
                "matvec_t",
                format!("{:?}ᵀ · {:?}", vw.shape(), vv.shape()),
            ));
        }
        let (m, k) = (vw.rows(), vw.cols());
        let mut y = vec![0.0; k];
        super::tensor::matvec_t(vw.data(), m, k, vv.data(), &mut y);
        Ok(self.push(Tensor::vector(y), Op::MatVecT(w, v), self.ng(&[w, v])))
    }

    /// `X Wᵀ` for a batch `X` (b×k) and weight `W` (o×k).
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 2 || vx.cols() != vw.cols() {
            return Err(shape_err(
                "linear",
                format!("{:?} · {:?}ᵀ", vx.shape(), vw.shape()),
            ));
        }
        let (b, k, o) = (vx.rows(), vx.cols(), vw.rows());
        let (xd, wd) = (vx.data(), vw.data());
        let mut y = vec![0.0; b * o];
        for i in 0..b {
            let xi = &xd[i * k..(i + 1) * k];
            for j in 0..o {
                y[i * o + j] = dot(xi, &wd[j * k..(j + 1) * k]);
            }
        }
        let t = Tensor::matrix(b, o, y)?;
        Ok(self.push(t, Op::Linear(x, w), self.ng(&[x, w])))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, m: NodeId, r: NodeId) -> Result<NodeId> {
        let (vm, vr) = (self.value(m), self.value(r));
        if vm.rank() != 2 || vm.cols() != vr.len() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", vm.shape(), vr.shape()),
            ));
        }
        let c = vm.cols();
        let data = vm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % c])
            .collect();
        let t = Tensor::new(vm.shape(), data)?;
        Ok(self.push(t, Op::AddRow(m, r), self.ng(&[m, r])))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, m: NodeId, r: NodeId) -> Result<NodeId> {
        let (vm, vr) = (self.value(m), self.value(r));
        if vm.rank() != 2 || vm.cols() != vr.len() {
            return Err(shape_err(
                "mul_row",
                format!("{:?} * {:?}", vm.shape(), vr.shape()),
            ));
        }
        let c = vm.cols();
        let data = vm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vr.data()[i % c])
            .collect();
        let t = Tensor::new(vm.shape(), data)?;
        Ok(self.push(t, Op::MulRow(m, r), self.ng(&[m, r])))
    }

    /// Row-wise sums of a matrix (b×c) → vector (b).
    pub fn sum_cols(&mut self, m: NodeId) -> Result<NodeId> {
        let vm = self.value(m);
        if vm.rank() != 2 {
            return Err(shape_err("sum_cols", format!("{:?}", vm.shape())));
        }
        let c = vm.cols();
        let data = vm.data().chunks(c).map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::vector(data), Op::SumCols(m), self.ng(&[m])))
    }

    /// `A x` for a constant sparse matrix.
    pub fn sparse_matvec(&mut self, a: &Arc<SparseMatrix>, x: NodeId) -> Result<NodeId> {
        let y = a.matvec(self.value(x).data())?;
        Ok(self.push(
            Tensor::vector(y),
            Op::SparseMatVec(Arc::clone(a), x),
            self.ng(&[x]),
        ))
    }

    /// Solves `A x = b` with a constant factorization of `A`.
    pub fn solve(&mut self, lu: &Arc<BandedLu>, b: NodeId) -> Result<NodeId> {
        let x = lu.solve(self.value(b).data())?;
        Ok(self.push(
            Tensor::vector(x),
            Op::Solve(Arc::clone(lu), b),
            self.ng(&[b]),
        ))
    }

    /// Contiguous range of the flattened values as a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.len() {
            return Err(shape_err(
                "slice",
                format!("{start}..{} of {}", start + len, va.len()),
            ));
        }
        let v = Tensor::vector(va.data()[start..start + len].to_vec());
        Ok(self.push(v, Op::Slice(a, start), self.ng(&[a])))
    }

    /// Concatenation of flattened values into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().iter().copied())
            .collect();
        let ng = self.ng(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng)
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows() {
            return Err(shape_err(
                "concat_cols",
                format!("{:?} | {:?}", va.shape(), vb.shape()),
            ));
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::matrix(r, ca + cb, data)?;
        Ok(self.push(t, Op::ConcatCols(a, b), self.ng(&[a, b])))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.ng(&[a])))
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId], output: Tensor) -> NodeId {
        let ng = self.ng(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), ng)
    }

    /// Allows another backward pass over the same recorded graph.
    pub fn reset_gradients(&mut self) {
        self.consumed = false;
    }

    /// Reverse sweep from a scalar root. Returns gradients for all leaves
    /// marked trainable that the root depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        self.check_finite()?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Variable => {
                    grads[idx] = Some(g);
                    continue;
                }
                _ => self.propagate(idx, &g, &mut grads),
            }
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Variable) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| &nodes[id.0].value;
        let want = |id: NodeId| nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].needs_grad {
                return;
            }
            let len = nodes[id.0].value.len();
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Constant | Op::Variable => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(vb)
                        .for_each(|((o, gi), y)| *o += gi * y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut()
                        .zip(g)
                        .zip(va)
                        .for_each(|((o, gi), x)| *o += gi * x)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, *c, g)),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, 1.0, g)),
            Op::ScalarMul(s, v) => {
                let c = val(*s).item();
                let vv = val(*v).data();
                acc(*s, &mut |gs| gs[0] += dot(g, vv));
                acc(*v, &mut |gv| axpy(gv, c, g));
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((o, gi), y)| *o += gi * (1.0 - y * y))
            }),
            Op::SoftplusSym(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((o, gi), x)| *o += gi * x.tanh())
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((o, gi), y)| *o += gi * y)
            }),
            Op::Ln(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((o, gi), x)| *o += gi / x)
                })
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((o, gi), x)| *o += 2.0 * gi * x)
                })
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, gi), x)| {
                        if *x > 0.0 {
                            *o += gi
                        } else if *x < 0.0 {
                            *o -= gi
                        }
                    })
                })
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, gi), x)| {
                        if *x > 0.0 {
                            *o += gi
                        }
                    })
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, gi), x)| {
                        if *x >= *lo && *x <= *hi {
                            *o += gi
                        }
                    })
                })
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(nodes[idx].op, Op::Maximum(..));
                let (va, vb) = (val(*a).data(), val(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if pick_a[i] {
                            ga[i] += g[i]
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        if !pick_a[i] {
                            gb[i] += g[i]
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n))
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| axpy(ga, g[0], vb));
                acc(*b, &mut |gb| axpy(gb, g[0], va));
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (val(*w), val(*x));
                let (m, k) = (vw.rows(), vw.cols());
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        if g[r] != 0.0 {
                            axpy(&mut gw[r * k..(r + 1) * k], g[r], vx.data());
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        if g[r] != 0.0 {
                            axpy(gx, g[r], &vw.data()[r * k..(r + 1) * k]);
                        }
                    }
                });
            }
            Op::MatVecT(w, v) => {
                let (vw, vv) = (val(*w), val(*v));
                let (m, k) = (vw.rows(), vw.cols());
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        if vv.data()[r] != 0.0 {
                            axpy(&mut gw[r * k..(r + 1) * k], vv.data()[r], g);
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for r in 0..m {
                        gv[r] += dot(&vw.data()[r * k..(r + 1) * k], g);
                    }
                });
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let (b, k, o) = (vx.rows(), vx.cols(), vw.rows());
                acc(*x, &mut |gx| {
                    for i in 0..b {
                        let gxi = &mut gx[i * k..(i + 1) * k];
                        for j in 0..o {
                            let c = g[i * o + j];
                            if c != 0.0 {
                                axpy(gxi, c, &vw.data()[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..b {
                        let xi = &vx.data()[i * k..(i + 1) * k];
                        for j in 0..o {
                            let c = g[i * o + j];
                            if c != 0.0 {
                                axpy(&mut gw[j * k..(j + 1) * k], c, xi);
                            }
                        }
                    }
                });
            }
            Op::AddRow(m, r) => {
                let c = val(*r).len();
                acc(*m, &mut |gm| axpy(gm, 1.0, g));
                acc(*r, &mut |gr| {
                    g.iter().enumerate().for_each(|(i, gi)| gr[i % c] += gi)
                });
            }
            Op::MulRow(m, r) => {
                let (vm, vr) = (val(*m).data(), val(*r).data());
                let c = vr.len();
                acc(*m, &mut |gm| {
                    gm.iter_mut()
                        .enumerate()
                        .for_each(|(i, o)| *o += g[i] * vr[i % c])
                });
                acc(*r, &mut |gr| {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, gi)| gr[i % c] += gi * vm[i])
                });
            }
            Op::SumCols(m) => {
                let c = val(*m).cols();
                acc(*m, &mut |gm| {
                    gm.iter_mut().enumerate().for_each(|(i, o)| *o += g[i / c])
                });
            }
            Op::SparseMatVec(a, x) => acc(*x, &mut |gx| a.matvec_t_acc(g, gx)),
            Op::Solve(lu, b) => {
                if want(*b) {
                    let adj = lu
                        .solve_transpose(g)
                        .expect("factorization dimension matches its own output");
                    acc(*b, &mut |gb| axpy(gb, 1.0, &adj));
                }
            }
            Op::Slice(a, start) => {
                let s = *start;
                acc(*a, &mut |ga| axpy(&mut ga[s..s + g.len()], 1.0, g));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, &mut |gp| axpy(gp, 1.0, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let r = val(*a).rows();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        axpy(
                            &mut ga[i * ca..(i + 1) * ca],
                            1.0,
                            &g[i * (ca + cb)..i * (ca + cb) + ca],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..r {
                        axpy(
                            &mut gb[i * cb..(i + 1) * cb],
                            1.0,
                            &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)],
                        );
                    }
                });
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| val(*i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|i| want(*i)).collect();
                let contribs = op.vjp(&ins, out, g, &needs);
                for (inp, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        acc(*inp, &mut |gi| axpy(gi, 1.0, &c));
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}
