use std::borrow::Cow;

use super::kernels::{axis_extents, gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose_map};
use super::primitive::PrimitiveOp;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Prim(PrimitiveOp),
    Sub,
}

impl Binary {
    fn eval(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Prim(op) => op.binary(x, y),
            Binary::Sub => x - y,
        }
    }

    fn grad(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Binary::Prim(op) => op.binary_grad(x, y),
            Binary::Sub => (1.0, -1.0),
        }
    }
}

/// Which operand of a binary op, if any, is a 1-D vector broadcast along the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        op: PrimitiveOp,
        x: Var,
    },
    Binary {
        op: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanNorm {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<'a> {
    dims: Vec<usize>,
    values: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Parameters enter by reference, so a tape borrows the parameter store for its lifetime;
/// gradients are read back with [`Tape::grad`] once [`Tape::backward`] has run.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&dims), values.len());
        self.nodes.push(Node {
            dims,
            values: Cow::Owned(values),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Records a borrowed leaf; it requires grad iff the tensor does.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            dims: t.dims().to_vec(),
            values: Cow::Borrowed(t.values()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf; it requires grad iff the tensor does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let dims = t.dims().to_vec();
        self.push(dims, t.into_values(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let dims = t.dims().to_vec();
        self.push(dims, t.into_values(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.node(v).dims
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.dims.clone(), n.values.to_vec()).expect("node extent is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Applies one of the searchable elementwise operations.
    pub fn apply_primitive(&mut self, op: PrimitiveOp, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        match inputs {
            [x] => Ok(self.unary(op, *x)),
            [a, b] => self.binary(Binary::Prim(op), *a, *b),
            _ => unreachable!(),
        }
    }

    fn unary(&mut self, op: PrimitiveOp, x: Var) -> Var {
        let n = self.node(x);
        let values = n.values.iter().map(|&v| op.unary(v)).collect();
        let (dims, rg) = (n.dims.clone(), n.requires_grad);
        self.push(dims, values, Op::Unary { op, x }, rg)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let bcast = if na.dims == nb.dims {
            Broadcast::None
        } else if nb.dims.len() == 1 && na.dims.last() == Some(&nb.dims[0]) {
            Broadcast::Rhs
        } else if na.dims.len() == 1 && nb.dims.last() == Some(&na.dims[0]) {
            Broadcast::Lhs
        } else {
            return Err(Error::Shape(format!(
                "cannot combine {:?} with {:?}",
                na.dims, nb.dims
            )));
        };
        let (dims, values) = match bcast {
            Broadcast::None => (
                na.dims.clone(),
                na.values
                    .iter()
                    .zip(nb.values.iter())
                    .map(|(&x, &y)| op.eval(x, y))
                    .collect(),
            ),
            Broadcast::Rhs => {
                let w = nb.values.len();
                (
                    na.dims.clone(),
                    na.values
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| op.eval(x, nb.values[i % w]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let w = na.values.len();
                (
                    nb.dims.clone(),
                    nb.values
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| op.eval(na.values[i % w], y))
                        .collect(),
                )
            }
        };
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(dims, values, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Prim(PrimitiveOp::Add), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Prim(PrimitiveOp::Mul), a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let n = self.node(x);
        let values = n.values.iter().map(|v| v * c).collect();
        let (dims, rg) = (n.dims.clone(), n.requires_grad);
        self.push(dims, values, Op::Scale { x, c }, rg)
    }

    /// Matrix product over the trailing two axes.
    ///
    /// `b` is either 2-D (shared across every leading index of `a`) or has the same
    /// leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.dims.len() < 2 || nb.dims.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs at least 2-D operands, got {:?} and {:?}",
                na.dims, nb.dims
            )));
        }
        let ra = na.dims.len();
        let rb = nb.dims.len();
        let (m, k) = (na.dims[ra - 2], na.dims[ra - 1]);
        let (kb, n) = (nb.dims[rb - 2], nb.dims[rb - 1]);
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                na.dims, nb.dims
            )));
        }
        let shared_rhs = rb == 2;
        if !shared_rhs && na.dims[..ra - 2] != nb.dims[..rb - 2] {
            return Err(Error::Shape(format!(
                "matmul batch dims differ: {:?} x {:?}",
                na.dims, nb.dims
            )));
        }
        let batch: usize = na.dims[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &na.values[bi * m * k..(bi + 1) * m * k];
            let b_blk = if shared_rhs {
                &nb.values[..]
            } else {
                &nb.values[bi * k * n..(bi + 1) * k * n]
            };
            gemm_acc(
                a_blk,
                b_blk,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut dims = na.dims[..ra - 2].to_vec();
        dims.extend([m, n]);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(
            dims,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let nx = self.node(x);
        if a1 >= nx.dims.len() || a2 >= nx.dims.len() {
            return Err(Error::Shape(format!(
                "axes ({a1}, {a2}) out of range for {:?}",
                nx.dims
            )));
        }
        let (dims, map) = transpose_map(&nx.dims, a1, a2);
        let values = map.iter().map(|&i| nx.values[i]).collect();
        let rg = nx.requires_grad;
        Ok(self.push(dims, values, Op::Permute { x, map }, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let nx = self.node(x);
        if numel(dims) != nx.values.len() || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                nx.dims
            )));
        }
        let values = nx.values.to_vec();
        let rg = nx.requires_grad;
        Ok(self.push(dims.to_vec(), values, Op::Reshape { x }, rg))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let nx = self.node(x);
        if axis >= nx.dims.len() || len == 0 || start + len > nx.dims[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                nx.dims
            )));
        }
        let (outer, full, inner) = axis_extents(&nx.dims, axis);
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            values.extend_from_slice(&nx.values[base..base + len * inner]);
        }
        let mut dims = nx.dims.clone();
        dims[axis] = len;
        let rg = nx.requires_grad;
        Ok(self.push(dims, values, Op::Narrow { x, axis, start }, rg))
    }

    /// Leading block of `x` with the given extent (a view used for weight slicing).
    pub fn leading(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let src = self.dims(x).to_vec();
        if src.len() != dims.len() {
            return Err(Error::Shape(format!("cannot view {src:?} as {dims:?}")));
        }
        let mut v = x;
        for (axis, (&want, &have)) in dims.iter().zip(&src).enumerate() {
            if want > have {
                return Err(Error::Capacity(format!("slice {dims:?} exceeds {src:?}")));
            }
            if want < have {
                v = self.narrow(v, axis, 0, want)?;
            }
        }
        Ok(v)
    }

    /// Rows of a 2-D table; output is `[ids.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if nt.dims.len() != 2 {
            return Err(Error::Shape(format!(
                "gather needs a 2-D table, got {:?}",
                nt.dims
            )));
        }
        let (rows, cols) = (nt.dims[0], nt.dims[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            values.extend_from_slice(&nt.values[i * cols..(i + 1) * cols]);
        }
        let rg = nt.requires_grad;
        Ok(self.push(
            vec![ids.len(), cols],
            values,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer norm eps must be > 0, got {eps}"
            )));
        }
        let (nx, ng, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let w = *nx.dims.last().expect("tensors are at least 1-D");
        if ng.dims != [w] || nb.dims != [w] {
            return Err(Error::Shape(format!(
                "layer norm affine params {:?}/{:?} for width {w}",
                ng.dims, nb.dims
            )));
        }
        let rows = nx.values.len() / w;
        let mut xhat = vec![0.0; nx.values.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; nx.values.len()];
        for r in 0..rows {
            let row = &nx.values[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * ng.values[j] + nb.values[j];
            }
        }
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        let dims = nx.dims.clone();
        let (xhat, inv_std) = if rg {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            dims,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Replaces every element with the mean of its last-axis row.
    pub fn mean_norm(&mut self, x: Var) -> Var {
        let nx = self.node(x);
        let w = *nx.dims.last().expect("tensors are at least 1-D");
        let mut out = Vec::with_capacity(nx.values.len());
        for row in nx.values.chunks(w) {
            let m = row.iter().sum::<f64>() / w as f64;
            out.extend(std::iter::repeat_n(m, w));
        }
        let (dims, rg) = (nx.dims.clone(), nx.requires_grad);
        self.push(dims, out, Op::MeanNorm { x }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.node(x);
        if axis >= nx.dims.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                nx.dims
            )));
        }
        let (outer, len, inner) = axis_extents(&nx.dims, axis);
        let mut out = vec![0.0; nx.values.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| nx.values[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (nx.values[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let (dims, rg) = (nx.dims.clone(), nx.requires_grad);
        Ok(self.push(dims, out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let nx = self.node(x);
        let w = *nx.dims.last().expect("tensors are at least 1-D");
        let mut out = Vec::with_capacity(nx.values.len());
        for row in nx.values.chunks(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let (dims, rg) = (nx.dims.clone(), nx.requires_grad);
        self.push(dims, out, Op::LogSoftmax { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let nx = self.node(x);
        let s = nx.values.iter().sum();
        let rg = nx.requires_grad;
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let nx = self.node(x);
        let s = nx.values.iter().sum::<f64>() / nx.values.len() as f64;
        let rg = nx.requires_grad;
        self.push(vec![1], vec![s], Op::Mean { x }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "mse operands differ: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                ln.dims
            )));
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::Unary { op, x } => {
                    let xv = &self.nodes[x.0].values;
                    self.acc(&mut adj, *x, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * op.unary_grad(xv[i]);
                        }
                    });
                }
                Op::Binary { op, a, b, bcast } => {
                    let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                    let n = g.len();
                    let (wa, wb) = (av.len(), bv.len());
                    // Rows of the broadcast operand's width; the full-size side sees every row.
                    let row = wa.min(wb);
                    let partial = |i: usize| {
                        let ia = if wa == n { i } else { i % row };
                        let ib = if wb == n { i } else { i % row };
                        op.grad(av[ia], bv[ib])
                    };
                    debug_assert!(match bcast {
                        Broadcast::None => wa == n && wb == n,
                        Broadcast::Rhs => wa == n,
                        Broadcast::Lhs => wb == n,
                    });
                    self.acc(&mut adj, *a, |ga| {
                        for (r, gr) in g.chunks(row).enumerate() {
                            let base = r * row;
                            let oa = if wa == n { base } else { 0 };
                            for (j, gv) in gr.iter().enumerate() {
                                ga[oa + j] += gv * partial(base + j).0;
                            }
                        }
                    });
                    self.acc(&mut adj, *b, |gb| {
                        for (r, gr) in g.chunks(row).enumerate() {
                            let base = r * row;
                            let ob = if wb == n { base } else { 0 };
                            for (j, gv) in gr.iter().enumerate() {
                                gb[ob + j] += gv * partial(base + j).1;
                            }
                        }
                    });
                }
                Op::Scale { x, c } => {
                    self.acc(&mut adj, *x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(o, v)| *o += c * v);
                    });
                }
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                    self.acc(&mut adj, a, |ga| {
                        for bi in 0..batch {
                            let b_blk = if shared_rhs {
                                &bv[..]
                            } else {
                                &bv[bi * k * n..(bi + 1) * k * n]
                            };
                            gemm_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                b_blk,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                    self.acc(&mut adj, b, |gb| {
                        for bi in 0..batch {
                            let out = if shared_rhs {
                                &mut gb[..]
                            } else {
                                &mut gb[bi * k * n..(bi + 1) * k * n]
                            };
                            gemm_tn_acc(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                out,
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                Op::Permute { x, map } => {
                    self.acc(&mut adj, *x, |gx| {
                        for (j, &src) in map.iter().enumerate() {
                            gx[src] += g[j];
                        }
                    });
                }
                Op::Reshape { x } => {
                    self.acc(&mut adj, *x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                    });
                }
                &Op::Narrow { x, axis, start } => {
                    let (outer, full, inner) = axis_extents(&self.nodes[x.0].dims, axis);
                    let len = node.dims[axis];
                    self.acc(&mut adj, x, |gx| {
                        for o in 0..outer {
                            let base = o * full * inner + start * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            gx[base..base + len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let cols = self.nodes[table.0].dims[1];
                    self.acc(&mut adj, *table, |gt| {
                        for (r, &i) in ids.iter().enumerate() {
                            gt[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[gamma.0].values;
                    let w = gv.len();
                    let rows = g.len() / w;
                    self.acc(&mut adj, *gamma, |gg| {
                        for r in 0..rows {
                            for j in 0..w {
                                gg[j] += g[r * w + j] * xhat[r * w + j];
                            }
                        }
                    });
                    self.acc(&mut adj, *beta, |gb| {
                        for r in 0..rows {
                            for j in 0..w {
                                gb[j] += g[r * w + j];
                            }
                        }
                    });
                    self.acc(&mut adj, *x, |gx| {
                        let mut dxhat = vec![0.0; w];
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..w {
                                dxhat[j] = g[r * w + j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat[r * w + j];
                            }
                            let scale = inv_std[r] / w as f64;
                            for j in 0..w {
                                gx[r * w + j] +=
                                    scale * (w as f64 * dxhat[j] - s1 - xhat[r * w + j] * s2);
                            }
                        }
                    });
                }
                Op::MeanNorm { x } => {
                    let w = *node.dims.last().unwrap();
                    self.acc(&mut adj, *x, |gx| {
                        for (grow, orow) in g.chunks(w).zip(gx.chunks_mut(w)) {
                            let m = grow.iter().sum::<f64>() / w as f64;
                            orow.iter_mut().for_each(|o| *o += m);
                        }
                    });
                }
                &Op::Softmax { x, axis } => {
                    let y = &node.values;
                    let (outer, len, inner) = axis_extents(&node.dims, axis);
                    self.acc(&mut adj, x, |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| o * len * inner + j * inner + i;
                                let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..len {
                                    gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax { x } => {
                    let y = &node.values;
                    let w = *node.dims.last().unwrap();
                    self.acc(&mut adj, *x, |gx| {
                        for r in 0..g.len() / w {
                            let gs: f64 = g[r * w..(r + 1) * w].iter().sum();
                            for j in 0..w {
                                gx[r * w + j] += g[r * w + j] - y[r * w + j].exp() * gs;
                            }
                        }
                    });
                }
                Op::Sum { x } => {
                    self.acc(&mut adj, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].values.len() as f64;
                    self.acc(&mut adj, *x, |gx| {
                        gx.iter_mut().for_each(|o| *o += g[0] / n)
                    });
                }
            }
        }

        for (idx, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                debug_assert!(matches!(node.op, Op::Leaf));
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let buf = adj[target.0].get_or_insert_with(|| vec![0.0; node.values.len()]);
        f(buf);
    }
}
