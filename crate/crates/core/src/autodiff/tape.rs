use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Softplus,
    Tanh,
    /// ELU with unit alpha.
    Elu,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Square,
    /// `x^p`; requires `x > 0`.
    Powf(f64),
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Softplus => "softplus",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Elu => "elu",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::Square => "square",
            UnaryKind::Powf(_) => "powf",
        }
    }

    fn requires_positive(self) -> bool {
        matches!(self, UnaryKind::Sqrt | UnaryKind::Log | UnaryKind::Powf(_))
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Square => x * x,
            UnaryKind::Powf(p) => x.powf(p),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Powf(p) => p * y / x,
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    Unary(Var, UnaryKind),
    /// Right operand broadcast cyclically over the left (equal shape, shape suffix or scalar).
    Binary(Var, Var, BinaryKind),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    TransposeLast2(Var),
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize },
    GatherRows { table: Var, indices: Rc<Vec<usize>> },
    Reshape(Var),
    ShiftTime(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    L1Last(Var),
    MaskedSoftmax(Var),
    PairwiseSqDist(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations supporting one reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn param_grads(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    if nb == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn split_last2(shape: &[usize], op: &str) -> Result<(usize, usize, usize), AutodiffError> {
    if shape.len() < 2 {
        return Err(AutodiffError::Shape(format!(
            "{op} needs rank >= 2, got {shape:?}"
        )));
    }
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), r, c))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        value: Tensor,
        inputs: &[Var],
    ) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf".into() });
        }
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (masks, targets, noise).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                op: "constant".into(),
            });
        }
        self.push(Op::Constant, value, false)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, AutodiffError> {
        let value = store.get(id)?.value.clone();
        self.push(Op::Param(id), value, true)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if kind.requires_positive() && xv.data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: kind.name().into(),
                detail: "input must be strictly positive".into(),
            });
        }
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(kind.name(), Op::Unary(x, kind), value, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Softplus)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn elu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Elu)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Log)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Square)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, AutodiffError> {
        self.unary(x, UnaryKind::Powf(p))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var, AutodiffError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(AutodiffError::Shape(format!(
                "{}: cannot broadcast {:?} onto {:?}",
                kind.name(),
                bv.shape(),
                av.shape()
            )));
        }
        let nb = bv.numel();
        let bd = bv.data();
        if kind == BinaryKind::Div && bd.iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div".into(),
                detail: "division by zero".into(),
            });
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked(kind.name(), Op::Binary(a, b, kind), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, BinaryKind::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, BinaryKind::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, BinaryKind::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked("scalar-mul", Op::ScalarMul(x, c), value, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked("add-scalar", Op::AddScalar(x), value, &[x])
    }

    /// `[..., m, k] x [k, n]` (shared right operand) or `[..., m, k] x [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let (batch, m, k) = split_last2(&ashape, "matmul")?;
        let (bbatch, k2, n) = split_last2(&bshape, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::Shape(format!(
                "matmul: inner dims differ, {ashape:?} x {bshape:?}"
            )));
        }
        let shared_rhs = bshape.len() == 2;
        if !shared_rhs && (bbatch != batch || bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2]) {
            return Err(AutodiffError::Shape(format!(
                "matmul: batch dims differ, {ashape:?} x {bshape:?}"
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_rhs { 0 } else { bi * k * n };
            let o_off = bi * m * n;
            for i in 0..m {
                let orow = &mut out[o_off + i * n..o_off + (i + 1) * n];
                for p in 0..k {
                    let aip = ad[a_off + i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let mut shape = ashape[..ashape.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push_checked("matmul", Op::MatMul { a, b, shared_rhs }, value, &[a, b])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = split_last2(&shape, "transpose")?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let mut oshape = shape.clone();
        let n = oshape.len();
        oshape.swap(n - 1, n - 2);
        let value = Tensor::new(oshape, out)?;
        self.push_checked("transpose", Op::TransposeLast2(x), value, &[x])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.is_empty()
            || ashape.len() != bshape.len()
            || ashape[..ashape.len() - 1] != bshape[..bshape.len() - 1]
        {
            return Err(AutodiffError::Shape(format!(
                "concat: incompatible {ashape:?} and {bshape:?}"
            )));
        }
        let ca = *ashape.last().unwrap();
        let cb = *bshape.last().unwrap();
        let rows = self.nodes[a.0].value.numel() / ca;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = ashape;
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, out)?;
        self.push_checked("concat", Op::ConcatLast(a, b), value, &[a, b])
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| AutodiffError::Shape("slice: scalar input".into()))?;
        if len == 0 || start + len > c {
            return Err(AutodiffError::Shape(format!(
                "slice: range {start}..{} outside last axis {c}",
                start + len
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let rows = xd.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let value = Tensor::new(oshape, out)?;
        self.push_checked("slice", Op::SliceLast { x, start }, value, &[x])
    }

    /// Looks up rows of a `[vocab, d]` table; output shape is `prefix ++ [d]`.
    pub fn gather_rows(
        &mut self,
        table: Var,
        indices: &[usize],
        prefix: &[usize],
    ) -> Result<Var, AutodiffError> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "gather: table must be rank 2, got {tshape:?}"
            )));
        }
        if prefix.iter().product::<usize>() != indices.len() {
            return Err(AutodiffError::Shape(format!(
                "gather: prefix {prefix:?} does not match {} indices",
                indices.len()
            )));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::Index(format!(
                "gather: index {bad} out of range for table of {vocab} rows"
            )));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let op = Op::GatherRows {
            table,
            indices: Rc::new(indices.to_vec()),
        };
        self.push_checked("gather", op, value, &[table])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        self.push_checked("reshape", Op::Reshape(x), value, &[x])
    }

    /// Shifts `[..., T, d]` one step along the time axis: slot 0 gets `fill`,
    /// slot `t` gets input slot `t - 1`.
    pub fn shift_time(&mut self, x: Var, fill: f64) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let (batch, t, d) = split_last2(&shape, "shift")?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![fill; xd.len()];
        for bi in 0..batch {
            let off = bi * t * d;
            out[off + d..off + t * d].copy_from_slice(&xd[off..off + (t - 1) * d]);
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked("shift", Op::ShiftTime(x), value, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push_checked("sum", Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push_checked("mean", Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Shape(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        self.push_checked("sum-axis", Op::SumAxis { x, axis }, value, &[x])
    }

    pub fn l1_norm_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| AutodiffError::Shape("l1-norm: scalar input".into()))?;
        let out = self.nodes[x.0]
            .value
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v.abs()).sum())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        self.push_checked("l1-norm", Op::L1Last(x), value, &[x])
    }

    /// Softmax over the last axis restricted to positions where `mask` is true.
    /// Masked entries are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.numel() {
            return Err(AutodiffError::Shape(format!(
                "masked-softmax: mask has {} entries for shape {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let c = xv.last_dim();
        let mut out = vec![0.0; xv.numel()];
        for ((row, m), o) in xv
            .data()
            .chunks(c)
            .zip(mask.chunks(c))
            .zip(out.chunks_mut(c))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((&v, &keep), slot) in row.iter().zip(m).zip(o.iter_mut()) {
                if keep {
                    *slot = (v - max).exp();
                    total += *slot;
                }
            }
            for slot in o.iter_mut() {
                *slot /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("masked-softmax", Op::MaskedSoftmax(x), value, &[x])
    }

    /// Squared Euclidean distances between rows: `[..., n, d] , [..., m, d] -> [..., n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let (batch, n, d) = split_last2(&ashape, "l2-distance")?;
        let (_, m, d2) = split_last2(&bshape, "l2-distance")?;
        if d != d2 || ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2] {
            return Err(AutodiffError::Shape(format!(
                "l2-distance: incompatible {ashape:?} and {bshape:?}"
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            for i in 0..n {
                let ar = &ad[(bi * n + i) * d..(bi * n + i + 1) * d];
                for j in 0..m {
                    let br = &bd[(bi * m + j) * d..(bi * m + j + 1) * d];
                    out[(bi * n + i) * m + j] =
                        ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
        }
        let mut shape = ashape[..ashape.len() - 2].to_vec();
        shape.extend([n, m]);
        let value = Tensor::new(shape, out)?;
        self.push_checked("l2-distance", Op::PairwiseSqDist(a, b), value, &[a, b])
    }

    /// Reverse pass from a scalar loss. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NotScalar(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Leaf => out
                    .leaves
                    .push((Var(idx), Tensor::new(node.value.shape().to_vec(), g)?)),
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.params.iter_mut().find(|(p, _)| p == id) {
                        Some((_, acc)) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => out.params.push((*id, t)),
                    }
                }
                Op::Unary(x, kind) => {
                    let xd = val(*x).data();
                    let yd = node.value.data();
                    let gx = slot(&mut grads, *x, xd.len());
                    for i in 0..xd.len() {
                        gx[i] += g[i] * kind.derivative(xd[i], yd[i]);
                    }
                }
                Op::Binary(a, b, kind) => {
                    let ad = val(*a).data();
                    let bd = val(*b).data();
                    let nb = bd.len();
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, ad.len());
                        for i in 0..ad.len() {
                            ga[i] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[i],
                                BinaryKind::Mul => g[i] * bd[i % nb],
                                BinaryKind::Div => g[i] / bd[i % nb],
                            };
                        }
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, nb);
                        for i in 0..ad.len() {
                            let y = bd[i % nb];
                            gb[i % nb] += match kind {
                                BinaryKind::Add => g[i],
                                BinaryKind::Sub => -g[i],
                                BinaryKind::Mul => g[i] * ad[i],
                                BinaryKind::Div => -g[i] * ad[i] / (y * y),
                            };
                        }
                    }
                }
                Op::ScalarMul(x, c) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(&g) {
                        *o += gi * c;
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
                Op::MatMul { a, b, shared_rhs } => {
                    let ashape = val(*a).shape();
                    let bshape = val(*b).shape();
                    let (batch, m, k) = split_last2(ashape, "matmul")?;
                    let n = bshape[bshape.len() - 1];
                    let ad = val(*a).data();
                    let bd = val(*b).data();
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, ad.len());
                        for bi in 0..batch {
                            let b_off = if *shared_rhs { 0 } else { bi * k * n };
                            for i in 0..m {
                                let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                                for p in 0..k {
                                    let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
                                    ga[(bi * m + i) * k + p] +=
                                        grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, bd.len());
                        for bi in 0..batch {
                            let b_off = if *shared_rhs { 0 } else { bi * k * n };
                            for i in 0..m {
                                let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                                for p in 0..k {
                                    let aip = ad[(bi * m + i) * k + p];
                                    if aip == 0.0 {
                                        continue;
                                    }
                                    let gbrow = &mut gb[b_off + p * n..b_off + (p + 1) * n];
                                    for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                        *o += aip * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::TransposeLast2(x) => {
                    let oshape = node.value.shape();
                    let (batch, r, c) = split_last2(oshape, "transpose")?;
                    let gx = slot(&mut grads, *x, g.len());
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + j * r + i] += g[off + i * c + j];
                            }
                        }
                    }
                }
                Op::ConcatLast(a, b) => {
                    let ca = val(*a).last_dim();
                    let cb = val(*b).last_dim();
                    let rows = g.len() / (ca + cb);
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, rows * ca);
                        for r in 0..rows {
                            for j in 0..ca {
                                ga[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, rows * cb);
                        for r in 0..rows {
                            for j in 0..cb {
                                gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::SliceLast { x, start } => {
                    let c = val(*x).last_dim();
                    let len = node.value.last_dim();
                    let rows = g.len() / len;
                    let gx = slot(&mut grads, *x, rows * c);
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    let tv = val(*table);
                    let d = tv.last_dim();
                    let gt = slot(&mut grads, *table, tv.numel());
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[row * d + j];
                        }
                    }
                }
                Op::ShiftTime(x) => {
                    let (batch, t, d) = split_last2(node.value.shape(), "shift")?;
                    let gx = slot(&mut grads, *x, g.len());
                    for bi in 0..batch {
                        let off = bi * t * d;
                        for i in 0..(t - 1) * d {
                            gx[off + i] += g[off + d + i];
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    let gx = slot(&mut grads, *x, n);
                    let s = g[0] / n as f64;
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                }
                Op::SumAxis { x, axis } => {
                    let shape = val(*x).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let gx = slot(&mut grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
                Op::L1Last(x) => {
                    let xv = val(*x);
                    let c = xv.last_dim();
                    let xd = xv.data();
                    let gx = slot(&mut grads, *x, xd.len());
                    for (i, (o, &v)) in gx.iter_mut().zip(xd).enumerate() {
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *o += g[i / c] * s;
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let y = node.value.data();
                    let c = node.value.last_dim();
                    let gx = slot(&mut grads, *x, y.len());
                    for ((yr, gr), ox) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ox[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let ashape = val(*a).shape();
                    let (batch, n, d) = split_last2(ashape, "l2-distance")?;
                    let m = val(*b).shape()[val(*b).shape().len() - 2];
                    let ad = val(*a).data();
                    let bd = val(*b).data();
                    let mut ga_buf = vec![0.0; ad.len()];
                    let mut gb_buf = vec![0.0; bd.len()];
                    for bi in 0..batch {
                        for i in 0..n {
                            let ao = (bi * n + i) * d;
                            for j in 0..m {
                                let gij = g[(bi * n + i) * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let bo = (bi * m + j) * d;
                                for p in 0..d {
                                    let diff = 2.0 * gij * (ad[ao + p] - bd[bo + p]);
                                    ga_buf[ao + p] += diff;
                                    gb_buf[bo + p] -= diff;
                                }
                            }
                        }
                    }
                    if needs(*a) {
                        add_into(slot(&mut grads, *a, ad.len()), &ga_buf);
                    }
                    if needs(*b) {
                        add_into(slot(&mut grads, *b, bd.len()), &gb_buf);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
