//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Leaves are
//! either tracked (parameters, inputs we want gradients for) or constants.
//! Applying a [`Primitive`] to inputs appends a node; the node is part of
//! the differentiable record only when at least one input is tracked.
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table indexed by node.

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }
}

/// Primitive operations understood by the tape.
///
/// Elementwise binary kinds require identical shapes; use
/// [`Primitive::Broadcast`] to expand an operand first. Axis-sensitive
/// kinds (softmax, concat, slice) act on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    Multiply,
    Scale(f64),
    MatMul,
    Relu,
    Exp,
    Log,
    Softmax,
    Concat,
    Slice {
        start: usize,
        end: usize,
    },
    Sum,
    Mean,
    Abs,
    /// Inputs `[x (B×C), scale (C), shift (C)]`, normalized with batch statistics.
    BatchNormTrain {
        eps: f64,
    },
    /// Inputs `[x (B×C), scale (C), shift (C)]`, normalized with fixed statistics.
    BatchNormEval {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    /// Numpy-style expansion to `shape` (leading axes added, unit axes repeated).
    Broadcast {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Abs => "abs",
            Primitive::BatchNormTrain { .. } => "batch_norm_train",
            Primitive::BatchNormEval { .. } => "batch_norm_eval",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Reshape { .. } => "reshape",
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

#[derive(Debug)]
enum Saved {
    BatchNorm {
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    tracked: bool,
    saved: Option<Saved>,
}

/// One entry of the differentiable record.
#[derive(Debug, Clone, Copy)]
pub struct RecordEntry<'a> {
    pub op: &'a Primitive,
    pub inputs: &'a [NodeId],
    pub output: NodeId,
}

/// The computation record: every value of a forward pass plus the primitive
/// applications that produced them, in creation (hence topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true, None)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Value of a node named by a record entry.
    pub fn node_value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Primitive applications that carry gradient, in order.
    pub fn record(&self) -> impl Iterator<Item = RecordEntry<'_>> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.op {
                Some(op) if n.tracked => Some(RecordEntry {
                    op,
                    inputs: &n.inputs,
                    output: id,
                }),
                _ => None,
            })
    }

    /// Batch mean and biased variance computed by a `BatchNormTrain` node.
    /// Batch statistics of a node named by a record entry.
    pub fn node_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        self.batch_stats(Var(id))
    }

    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].saved {
            Some(Saved::BatchNorm { mean, var, .. }) => Some((mean, var)),
            None => None,
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<Primitive>,
        inputs: Vec<NodeId>,
        tracked: bool,
        saved: Option<Saved>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            tracked,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = forward(&kind, &self.nodes, inputs)?;
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Some(kind), ids, tracked, saved))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Multiply, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, end }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Broadcast {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    /// `x · w + b` for `x: B×I`, `w: I×O`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let shape = self.shape(xw).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(xw, bb)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(op, node, &self.nodes, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

/// `c = beta·c + op(a)·op(b)` with `op` an optional transpose. Shapes are
/// those of the operands after transposition: `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

fn arity(op: &'static str, inputs: &[Var], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op,
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Strides of `input` laid against `out`, zero on broadcast axes.
fn broadcast_strides(op: &'static str, input: &[usize], out: &[usize]) -> Result<Vec<usize>> {
    if input.len() > out.len() {
        return Err(Error::shape(
            op,
            format!("cannot broadcast {input:?} to {out:?}"),
        ));
    }
    let offset = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let d = input[i];
        let o = out[offset + i];
        if d == o {
            strides[offset + i] = s;
        } else if d != 1 {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {input:?} to {out:?}"),
            ));
        }
        s *= d;
    }
    Ok(strides)
}

/// Visits `(out_index, in_index)` pairs of a broadcast.
fn for_each_broadcast(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            src -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

fn batch_norm_dims(
    op: &'static str,
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
) -> Result<(usize, usize)> {
    let (b, c) = x.as_matrix(op)?;
    if scale.shape != [c] || shift.shape != [c] {
        return Err(Error::shape(
            op,
            format!(
                "affine parameters {:?}/{:?} do not match {c} features",
                scale.shape, shift.shape
            ),
        ));
    }
    Ok((b, c))
}

fn forward(kind: &Primitive, nodes: &[Node], inputs: &[Var]) -> Result<(Tensor, Option<Saved>)> {
    let op = kind.name();
    let val = |i: usize| &nodes[inputs[i].0].value;
    let unary = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        arity(op, inputs, 1)?;
        let x = val(0);
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        })
    };
    let binary = |f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
        arity(op, inputs, 2)?;
        let (a, b) = (val(0), val(1));
        same_shape(op, a, b)?;
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    };

    let out = match kind {
        Primitive::Add => binary(&|x, y| x + y)?,
        Primitive::Subtract => binary(&|x, y| x - y)?,
        Primitive::Multiply => binary(&|x, y| x * y)?,
        Primitive::Scale(s) => {
            let s = *s;
            unary(&move |x| s * x)?
        }
        Primitive::Relu => unary(&|x| x.max(0.0))?,
        Primitive::Exp => unary(&f64::exp)?,
        Primitive::Abs => unary(&f64::abs)?,
        Primitive::Log => {
            arity(op, inputs, 1)?;
            if let Some((i, &x)) = val(0).data.iter().enumerate().find(|(_, &x)| x <= 0.0) {
                return Err(Error::Domain {
                    op,
                    detail: format!("log of non-positive value {x} at index {i}"),
                });
            }
            unary(&f64::ln)?
        }
        Primitive::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (val(0), val(1));
            let (m, k) = a.as_matrix(op)?;
            let (k2, n) = b.as_matrix(op)?;
            if k != k2 {
                return Err(Error::shape(
                    op,
                    format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
                ));
            }
            let mut data = vec![0.0; m * n];
            gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut data);
            Tensor {
                shape: vec![m, n],
                data,
            }
        }
        Primitive::Softmax => {
            arity(op, inputs, 1)?;
            let x = val(0);
            let d = x.last_dim();
            if d == 0 {
                return Err(Error::shape(op, "empty last axis"));
            }
            let mut data = x.data.clone();
            for row in data.chunks_mut(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(Error::shape(op, "nothing to concatenate"));
            }
            let first = val(0);
            let lead = &first.shape[..first.shape.len().saturating_sub(1)];
            let rows: usize = lead.iter().product();
            let mut width = 0;
            for i in 0..inputs.len() {
                let t = val(i);
                if t.shape.len() != first.shape.len() || &t.shape[..lead.len()] != lead {
                    return Err(Error::shape(
                        op,
                        format!(
                            "input {i} has shape {:?}, expected leading {lead:?}",
                            t.shape
                        ),
                    ));
                }
                width += t.last_dim();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for i in 0..inputs.len() {
                    let t = val(i);
                    let w = t.last_dim();
                    data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor { shape, data }
        }
        Primitive::Slice { start, end } => {
            arity(op, inputs, 1)?;
            let x = val(0);
            let d = x.last_dim();
            if start >= end || *end > d || x.shape.is_empty() {
                return Err(Error::shape(
                    op,
                    format!("range {start}..{end} invalid for shape {:?}", x.shape),
                ));
            }
            let w = end - start;
            let data = x
                .data
                .chunks(d)
                .flat_map(|row| row[*start..*end].iter().copied())
                .collect();
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("non-empty") = w;
            Tensor { shape, data }
        }
        Primitive::Sum => {
            arity(op, inputs, 1)?;
            Tensor::scalar(val(0).data.iter().sum())
        }
        Primitive::Mean => {
            arity(op, inputs, 1)?;
            let x = val(0);
            if x.is_empty() {
                return Err(Error::shape(op, "mean of an empty tensor"));
            }
            Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
        }
        Primitive::Broadcast { shape } => {
            arity(op, inputs, 1)?;
            let x = val(0);
            let strides = broadcast_strides(op, &x.shape, shape)?;
            let mut data = vec![0.0; shape.iter().product()];
            for_each_broadcast(shape, &strides, |o, i| data[o] = x.data[i]);
            Tensor {
                shape: shape.clone(),
                data,
            }
        }
        Primitive::Reshape { shape } => {
            arity(op, inputs, 1)?;
            val(0).clone().reshaped(shape)?
        }
        Primitive::BatchNormTrain { eps } => {
            arity(op, inputs, 3)?;
            let (x, scale, shift) = (val(0), val(1), val(2));
            let (b, c) = batch_norm_dims(op, x, scale, shift)?;
            if b == 0 {
                return Err(Error::shape(op, "empty batch"));
            }
            let mut mean = vec![0.0; c];
            for row in x.data.chunks(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; c];
            for row in x.data.chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut normalized = vec![0.0; b * c];
            let mut data = vec![0.0; b * c];
            for r in 0..b {
                for j in 0..c {
                    let xh = (x.data[r * c + j] - mean[j]) * inv_std[j];
                    normalized[r * c + j] = xh;
                    data[r * c + j] = scale.data[j] * xh + shift.data[j];
                }
            }
            let out = Tensor {
                shape: vec![b, c],
                data,
            };
            return Ok((
                out,
                Some(Saved::BatchNorm {
                    normalized,
                    inv_std,
                    mean,
                    var,
                }),
            ));
        }
        Primitive::BatchNormEval { mean, var, eps } => {
            arity(op, inputs, 3)?;
            let (x, scale, shift) = (val(0), val(1), val(2));
            let (_, c) = batch_norm_dims(op, x, scale, shift)?;
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(op, "running statistics width mismatch"));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let data = x
                .data
                .chunks(c)
                .flat_map(|row| {
                    (0..c).map(|j| scale.data[j] * (row[j] - mean[j]) * inv_std[j] + shift.data[j])
                })
                .collect::<Vec<_>>();
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        }
    };
    Ok((out, None))
}

fn backward_node(
    op: &Primitive,
    node: &Node,
    nodes: &[Node],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let inp = |i: usize| &nodes[node.inputs[i]];
    let wants = |i: usize| nodes[node.inputs[i]].tracked;
    let send = |grads: &mut [Option<Vec<f64>>], i: usize, contribution: Vec<f64>| {
        accumulate(&mut grads[node.inputs[i]], contribution);
    };

    match op {
        Primitive::Add => {
            for i in 0..2 {
                if wants(i) {
                    send(grads, i, g.to_vec());
                }
            }
        }
        Primitive::Subtract => {
            if wants(0) {
                send(grads, 0, g.to_vec());
            }
            if wants(1) {
                send(grads, 1, g.iter().map(|v| -v).collect());
            }
        }
        Primitive::Multiply => {
            let (a, b) = (&inp(0).value.data, &inp(1).value.data);
            if wants(0) {
                send(grads, 0, g.iter().zip(b).map(|(g, y)| g * y).collect());
            }
            if wants(1) {
                send(grads, 1, g.iter().zip(a).map(|(g, x)| g * x).collect());
            }
        }
        Primitive::Scale(s) => {
            send(grads, 0, g.iter().map(|v| v * s).collect());
        }
        Primitive::MatMul => {
            let (a, b) = (&inp(0).value, &inp(1).value);
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if wants(0) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b.data, true, 0.0, &mut da);
                send(grads, 0, da);
            }
            if wants(1) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &a.data, true, g, false, 0.0, &mut db);
                send(grads, 1, db);
            }
        }
        Primitive::Relu => {
            let x = &inp(0).value.data;
            send(
                grads,
                0,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Primitive::Exp => {
            let y = &node.value.data;
            send(grads, 0, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Primitive::Log => {
            let x = &inp(0).value.data;
            send(grads, 0, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Primitive::Abs => {
            let x = &inp(0).value.data;
            send(
                grads,
                0,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| g * x.signum() * f64::from(x != 0.0))
                    .collect(),
            );
        }
        Primitive::Softmax => {
            let y = &node.value;
            let d = y.last_dim();
            let mut dx = vec![0.0; y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.data.chunks(d)).zip(g.chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            send(grads, 0, dx);
        }
        Primitive::Concat => {
            let width = node.value.last_dim();
            let rows = node.value.len() / width.max(1);
            let mut offset = 0;
            for i in 0..node.inputs.len() {
                let w = inp(i).value.last_dim();
                if wants(i) {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    send(grads, i, part);
                }
                offset += w;
            }
        }
        Primitive::Slice { start, end } => {
            let x = &inp(0).value;
            let d = x.last_dim();
            let w = end - start;
            let mut dx = vec![0.0; x.len()];
            for (row, gr) in dx.chunks_mut(d).zip(g.chunks(w)) {
                row[*start..*end].copy_from_slice(gr);
            }
            send(grads, 0, dx);
        }
        Primitive::Sum => {
            send(grads, 0, vec![g[0]; inp(0).value.len()]);
        }
        Primitive::Mean => {
            let n = inp(0).value.len();
            send(grads, 0, vec![g[0] / n as f64; n]);
        }
        Primitive::Broadcast { shape } => {
            let x = &inp(0).value;
            let strides =
                broadcast_strides("broadcast", &x.shape, shape).expect("checked in forward");
            let mut dx = vec![0.0; x.len()];
            for_each_broadcast(shape, &strides, |o, i| dx[i] += g[o]);
            send(grads, 0, dx);
        }
        Primitive::Reshape { .. } => {
            send(grads, 0, g.to_vec());
        }
        Primitive::BatchNormTrain { .. } => {
            let Some(Saved::BatchNorm {
                normalized,
                inv_std,
                ..
            }) = &node.saved
            else {
                unreachable!("batch-norm node without saved statistics")
            };
            let scale = &inp(1).value.data;
            let c = scale.len();
            let b = normalized.len() / c;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for r in 0..b {
                for j in 0..c {
                    sum_g[j] += g[r * c + j];
                    sum_gx[j] += g[r * c + j] * normalized[r * c + j];
                }
            }
            if wants(0) {
                let bf = b as f64;
                let mut dx = vec![0.0; b * c];
                for r in 0..b {
                    for j in 0..c {
                        let k = r * c + j;
                        dx[k] = scale[j] * inv_std[j] / bf
                            * (bf * g[k] - sum_g[j] - normalized[k] * sum_gx[j]);
                    }
                }
                send(grads, 0, dx);
            }
            if wants(1) {
                send(grads, 1, sum_gx);
            }
            if wants(2) {
                send(grads, 2, sum_g);
            }
        }
        Primitive::BatchNormEval { mean, var, eps } => {
            let x = &inp(0).value.data;
            let scale = &inp(1).value.data;
            let c = scale.len();
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            if wants(0) {
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(k, g)| g * scale[k % c] * inv_std[k % c])
                    .collect();
                send(grads, 0, dx);
            }
            if wants(1) {
                let mut ds = vec![0.0; c];
                for (k, gv) in g.iter().enumerate() {
                    let j = k % c;
                    ds[j] += gv * (x[k] - mean[j]) * inv_std[j];
                }
                send(grads, 1, ds);
            }
            if wants(2) {
                let mut dh = vec![0.0; c];
                for (k, gv) in g.iter().enumerate() {
                    dh[k % c] += gv;
                }
                send(grads, 2, dh);
            }
        }
    }
}

/// Learning-rate group of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Selector,
    Fusion,
    Backbone,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Selector,
        ParamGroup::Fusion,
        ParamGroup::Backbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Selector => "selector",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Backbone => "backbone",
        }
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn new(value: Tensor, group: ParamGroup) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, group }
    }

    /// Places the current value on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.value.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds the gradient of `var` (if any) into the accumulator.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get_data(var) {
            self.grad.data.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// Central-difference gradient estimate of `f` at `point`.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let x0 = point.data[i];
        probe.data[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!(
                "f is not finite around coordinate {i} ({fp}, {fm})"
            )));
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Elementwise closeness: `|a−b| ≤ abs_tol` or `|a−b| ≤ rel_tol·max(|a|,|b|)`.
/// Returns the worst relative error seen on entries that failed the
/// absolute test, or `None` when everything is within tolerance.
pub fn gradient_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff <= abs_tol {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        if rel > rel_tol {
            worst = Some(worst.map_or(rel, |w: f64| w.max(rel)));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        // constants only: nothing recorded
        assert_eq!(tape.record().count(), 0);
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(tape.record().count(), 1);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, -1000.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::Shape { op: "add", .. })
        ));
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(m, m),
            Err(Error::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1e4]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]));
        let y = tape.softmax(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unused_node_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn record_is_topological() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 1.5]));
        let c = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let y = tape.mul(x, c).unwrap();
        let z = tape.exp(y).unwrap();
        let w = tape.add(z, y).unwrap();
        tape.sum(w).unwrap();
        for entry in tape.record() {
            assert!(entry.inputs.iter().all(|&i| i < entry.output));
        }
        assert_eq!(tape.record().count(), 4);
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut tape = Tape::new();
        let row = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.broadcast(row, &[2, 3]).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = tape.leaf(t(&[2, 1], &[7.0, 8.0]));
        let c = tape.broadcast(col, &[2, 3]).unwrap();
        assert_eq!(tape.value(c).data(), &[7.0, 7.0, 7.0, 8.0, 8.0, 8.0]);
        let s = tape.add(b, c).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(row).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(col).data(), &[3.0, 3.0]);
        assert!(tape.broadcast(row, &[2, 4]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 2, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
        assert!(tape.slice(c, 2, 2).is_err());
    }

    #[test]
    fn batch_norm_eval_with_identity_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let h = tape.constant(Tensor::zeros(&[2]));
        let eps = 1e-5;
        let y = tape
            .apply(
                Primitive::BatchNormEval {
                    mean: vec![0.0; 2],
                    var: vec![1.0 - eps; 2],
                    eps,
                },
                &[x, g, h],
            )
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_examples() {
        let sq = |x: &Tensor| Ok(x.data()[0] * x.data()[0]);
        let g = finite_difference_gradient(sq, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let e = |x: &Tensor| Ok(x.data()[0].exp());
        let g = finite_difference_gradient(e, &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);

        let c = |_: &Tensor| Ok(4.0);
        let g = finite_difference_gradient(c, &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_rejects_bad_inputs() {
        let f = |_: &Tensor| Ok(1.0);
        assert!(finite_difference_gradient(f, &Tensor::scalar(0.0), 0.0).is_err());
        let inf = |_: &Tensor| Ok(f64::INFINITY);
        assert!(matches!(
            finite_difference_gradient(inf, &Tensor::scalar(1.0), 1e-5),
            Err(Error::Oracle(_))
        ));
    }
}
