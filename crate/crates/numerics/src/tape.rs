//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its vector-Jacobian product. Nodes only ever reference earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, axis_split, broadcast_map, broadcast_shape};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op discriminant, used for reporting and for the corrupted-backward
/// negative control of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Gelu,
    Softmax,
    LayerNorm,
    L2Normalize,
    Reshape,
    Permute,
    BroadcastTo,
    IndexSelect,
    Concat,
    CrossEntropy,
    SoftCrossEntropy,
    Sum,
    Mean,
    MeanAxis,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "bmm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::IndexSelect => "index_select",
            OpKind::Concat => "concat",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftCrossEntropy => "soft_cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis => "mean_axis",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 22] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::BatchMatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Exp,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::L2Normalize,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::BroadcastTo,
    OpKind::IndexSelect,
    OpKind::Concat,
    OpKind::CrossEntropy,
    OpKind::SoftCrossEntropy,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::MeanAxis,
];

/// How a per-row loss is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Divides by the number of non-ignored targets.
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        a: Var,
        inv_norm: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    IndexSelect(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        scale: T,
    },
    SoftCrossEntropy {
        logits: Var,
        dist: Vec<T>,
        probs: Vec<T>,
        scale: T,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(..) => OpKind::Exp,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::BroadcastTo(..) => OpKind::BroadcastTo,
            Op::IndexSelect(..) => OpKind::IndexSelect,
            Op::Concat(..) => OpKind::Concat,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SoftCrossEntropy { .. } => OpKind::SoftCrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanAxis(..) => OpKind::MeanAxis,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Large negative logit used for masked attention positions.
pub const MASKED: f64 = -1e9;

/// Recorded computation with values and, after [`Tape::backward`], gradients.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
    first_nonfinite: Option<(usize, OpKind)>,
    corrupt: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
            first_nonfinite: None,
            corrupt: None,
        }
    }

    /// Deliberately breaks the backward rule of one op kind (scales its
    /// upstream gradient by 1.5). Only useful as a negative control.
    pub fn corrupt_backward(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
        self.first_nonfinite = None;
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Errors if any op so far produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((node, kind)) => Err(Error::NonFinite {
                op: kind.name(),
                node,
            }),
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Only leaves keep gradients. `None` before backward, for non-leaf
    /// nodes, and for leaves that do not require grad; zeros for a leaf the
    /// loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.kind()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, OpKind::Leaf));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ---------------------------------------------------------------
    // Linear algebra

    /// `a[.., m, k] x b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] x b[n, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return shape_err("matmul", format!("inner extents differ: {sa:?} x {sb:?}"));
        }
        let rows = numel(&sa) / k;
        let mut out = vec![T::zero(); rows * n];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            b_strides,
            T::zero(),
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                rows,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Batched product `a[B, m, k] x b[B, k, n]` (or `b[B, n, k]^T`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return shape_err("bmm", format!("inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    // ---------------------------------------------------------------
    // Elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, [Var; 2])> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let Some(out_shape) = broadcast_shape(sa, sb) else {
            return shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}"));
        };
        let n = numel(&out_shape);
        let ma = broadcast_map(sa, &out_shape);
        let mb = broadcast_map(sb, &out_shape);
        let out =
            kernels::zip_broadcast(self.value(a).data(), &ma, self.value(b).data(), &mb, n, f);
        Ok((Tensor::from_parts(out_shape, out), [a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &ins))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &ins))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &ins))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * c).collect(),
        );
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|x| x.exp()).collect(),
        );
        self.push(out, Op::Exp(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| kernels::gelu(x)).collect(),
        );
        self.push(out, Op::Gelu(a), &[a])
    }

    // ---------------------------------------------------------------
    // Normalizations

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return invalid("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), &[a]))
    }

    /// Layer norm over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            );
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales each last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let x = self.value(a).data();
        let rows = x.len() / d;
        let tiny = T::lit(1e-12);
        let mut inv_norm = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            let inv = T::one() / norm;
            inv_norm.push(inv);
            out.extend(row.iter().map(|&v| v * inv));
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { a, inv_norm },
            &[a],
        )
    }

    // ---------------------------------------------------------------
    // Layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.numel() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", v.shape()));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            );
        }
        let (out, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute(a, perm.to_vec()),
            &[a],
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return shape_err(
                "transpose",
                format!("rank-2 input expected, got {:?}", self.shape(a)),
            );
        }
        self.permute(a, &[1, 0])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if broadcast_shape(sa, shape).as_deref() != Some(shape) {
            return shape_err("broadcast_to", format!("{sa:?} -> {shape:?}"));
        }
        let map = broadcast_map(sa, shape);
        let out = kernels::expand(self.value(a).data(), &map, numel(shape));
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(a),
            &[a],
        ))
    }

    /// Gathers rows (slices along axis 0). Embedding lookup is this op.
    pub fn index_select(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return shape_err("index_select", "rank-0 input");
        }
        if ids.is_empty() {
            return invalid("index_select", "no indices");
        }
        let rows = shape[0];
        let width = numel(&shape[1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    op: "index_select",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = ids.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect(a, ids.to_vec()),
            &[a],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            parts,
        ))
    }

    // ---------------------------------------------------------------
    // Reductions and losses

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return invalid("mean_axis", format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let scale = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v *= scale;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis(a, axis),
            &[a],
        ))
    }

    /// Cross-entropy of `logits[n, V]` against class ids; `None` targets are
    /// ignored (padding).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            );
        }
        let vocab = shape[1];
        for &t in targets.iter().flatten() {
            if t >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if count == 0 => T::zero(),
            Reduction::Mean => T::one() / T::lit(count as f64),
        };
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &z[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&v| (v - max).exp()).sum::<T>();
            let lse = max + sum.ln();
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
            if let Some(t) = target {
                total += lse - row[*t];
            }
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            &[logits],
        ))
    }

    /// `mean_rows(-sum_c p_c log softmax(logits)_c)` against a constant
    /// target distribution `dist` of the same shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, dist: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || dist.shape() != shape.as_slice() {
            return shape_err(
                "soft_cross_entropy",
                format!("logits {shape:?} vs distribution {:?}", dist.shape()),
            );
        }
        let (rows, width) = (shape[0], shape[1]);
        let z = self.value(logits).data();
        let p = dist.data();
        let scale = T::one() / T::lit(rows as f64);
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z[r * width..(r + 1) * width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..width {
                let logq = row[j] - lse;
                probs[r * width + j] = logq.exp();
                if p[r * width + j] != T::zero() {
                    total -= p[r * width + j] * logq;
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::SoftCrossEntropy {
                logits,
                dist: p.to_vec(),
                probs,
                scale,
            },
            &[logits],
        ))
    }

    // ---------------------------------------------------------------
    // Reverse sweep

    /// Accumulates d(loss)/d(node) into every grad-requiring node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let kind = self.nodes[i].op.kind();
            if kind != OpKind::Leaf {
                if self.corrupt == Some(kind) {
                    let bad = T::lit(1.5);
                    let mut scaled = g.clone();
                    scaled.iter_mut().for_each(|v| *v *= bad);
                    self.backprop(i, &scaled, &mut grads);
                } else {
                    self.backprop(i, &g, &mut grads);
                }
                // Only leaves keep their gradient buffer after the sweep.
                g.clear();
                g.shrink_to_fit();
                grads[i] = None;
                continue;
            }
            grads[i] = Some(std::mem::take(&mut g));
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                rows,
                k,
                n,
                trans_b,
            } => {
                let (rows, k, n) = (*rows, *k, *n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b).data();
                    // dA = G · Bᵀ where B is [k, n]
                    let bt_strides = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(rows, n, k, g, (n as isize, 1), bv, bt_strides, T::one(), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a).data();
                    if *trans_b {
                        // d(Bᵀ) = Gᵀ · A, shape [n, k]
                        T::gemm(
                            n,
                            rows,
                            k,
                            g,
                            (1, n as isize),
                            av,
                            (k as isize, 1),
                            T::one(),
                            gb,
                        );
                    } else {
                        T::gemm(
                            k,
                            rows,
                            n,
                            av,
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            T::one(),
                            gb,
                        );
                    }
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b).data();
                    let bt_strides = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    for t in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n as isize, 1),
                            &bv[t * k * n..(t + 1) * k * n],
                            bt_strides,
                            T::one(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a).data();
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            T::gemm(
                                n,
                                m,
                                k,
                                gt,
                                (1, n as isize),
                                at,
                                (k as isize, 1),
                                T::one(),
                                dst,
                            );
                        } else {
                            T::gemm(
                                k,
                                m,
                                n,
                                at,
                                (1, k as isize),
                                gt,
                                (n as isize, 1),
                                T::one(),
                                dst,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate_b = matches!(node.op, Op::Sub(..));
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::reduce_into(g, &broadcast_map(self.shape(*a), out_shape), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let map = broadcast_map(self.shape(*b), out_shape);
                    if negate_b {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        kernels::reduce_into(&neg, &map, gb);
                    } else {
                        kernels::reduce_into(g, &map, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                let n = g.len();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.nodes[this.0].requires_grad {
                        continue;
                    }
                    let other_map = broadcast_map(self.shape(other), out_shape);
                    let ov = kernels::expand(self.value(other).data(), &other_map, n);
                    let prod: Vec<T> = g.iter().zip(&ov).map(|(&x, &y)| x * y).collect();
                    let this_map = broadcast_map(self.shape(this), out_shape);
                    if let Some(acc) = self.acc(grads, this) {
                        kernels::reduce_into(&prod, &this_map, acc);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, &v) in ga.iter_mut().zip(g) {
                        *d += v * *c;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *d += v * y;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &v), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *d += v * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(out_shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..n {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap_or(&1);
                let rows = g.len() / d;
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gbias) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gbias[j] += g[r * d + j];
                        }
                    }
                }
                let gain_v = self.value(*gain).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gain_v[j];
                            dxhat[j] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * d + j];
                        }
                        mean_d /= dn;
                        mean_dx /= dn;
                        for j in 0..d {
                            gx[r * d + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::L2Normalize { a, inv_norm } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = *out_shape.last().unwrap_or(&1);
                    let y = node.value.data();
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let s = r * d;
                        let dot = (0..d).map(|j| y[s + j] * g[s + j]).sum::<T>();
                        for j in 0..d {
                            ga[s + j] += (g[s + j] - y[s + j] * dot) * inv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, &v) in ga.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Permute(a, perm) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (back, _) = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
                    for (d, v) in ga.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::BroadcastTo(a) => {
                let map = broadcast_map(self.shape(*a), out_shape);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::reduce_into(g, &map, ga);
                }
            }
            Op::IndexSelect(a, ids) => {
                let width = numel(&out_shape[1..]);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, &v) in ga[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            for (d, &v) in gp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += v;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let vocab = probs.len() / targets.len();
                    let s = g[0] * *scale;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..vocab {
                            gl[r * vocab + j] += s * probs[r * vocab + j];
                        }
                        gl[r * vocab + t] -= s;
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                dist,
                probs,
                scale,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let width = *self.shape(*logits).last().unwrap();
                    let s = g[0] * *scale;
                    for r in 0..probs.len() / width {
                        let row = r * width..(r + 1) * width;
                        let mass = dist[row.clone()].iter().copied().sum::<T>();
                        for j in row {
                            gl[j] += s * (probs[j] * mass - dist[j]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let v = g[0] / T::lit(ga.len() as f64);
                    for d in ga.iter_mut() {
                        *d += v;
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                let in_shape = self.shape(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    let (outer, n, inner) = axis_split(&in_shape, *axis);
                    let scale = T::one() / T::lit(n as f64);
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += v * scale;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, zero-initialized on first touch.
    #[allow(clippy::mut_from_ref)]
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }
}
