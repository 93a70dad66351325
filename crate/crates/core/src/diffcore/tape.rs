//! Reverse-mode autodiff tape over rank-2 tensors.
//!
//! The primitive set is deliberately closed: add, mul, div, matmul, sum,
//! mean, sigmoid, relu, sqrt, cross product, normalize, concatenate,
//! slice and broadcast. The whole fitting objective is expressed in these,
//! which bounds what `backward` has to handle. Subtraction, negation and
//! scaling by a constant are provided as helpers composed from the
//! primitives.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{DiffError, GradMap};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sum { src: NodeId, axis: Option<usize> },
    Mean { src: NodeId, axis: Option<usize> },
    Sigmoid(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Cross(NodeId, NodeId),
    Normalize { src: NodeId, norm: f64 },
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { src: NodeId, axis: usize, start: usize, len: usize },
    Broadcast { src: NodeId, from: (usize, usize) },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Index into the tape's variable table when this leaf is a named parameter.
    var: Option<usize>,
}

/// Records the forward computation; `backward` replays it in reverse to
/// accumulate adjoints. Single-threaded by construction: node order is the
/// evaluation order, which makes gradients bit-reproducible.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    var_names: Vec<String>,
    var_lookup: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, var: None });
        id
    }

    /// A constant leaf: participates in the forward value, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// A leaf bound to a named parameter in `store`. Repeated requests for
    /// the same name return the same node so gradients accumulate in one
    /// place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.var_lookup.get(name) {
            return id;
        }
        let value = store.value(name).expect("unknown parameter").clone();
        let id = NodeId(self.nodes.len());
        let var_idx = self.var_names.len();
        self.var_names.push(name.to_string());
        self.nodes.push(Node { op: Op::Leaf, value, var: Some(var_idx) });
        self.var_lookup.insert(name.to_string(), id);
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn binary_elementwise(&mut self, a: NodeId, b: NodeId, op: &str) -> (usize, usize) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?} (broadcast explicitly)");
        sa
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_elementwise(a, b, "add");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), Tensor::from_vec(r, c, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_elementwise(a, b, "mul");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), Tensor::from_vec(r, c, data))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_elementwise(a, b, "div");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x / y)
            .collect();
        self.push(Op::Div(a, b), Tensor::from_vec(r, c, data))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), value)
    }

    /// Sum over all elements (`axis = None`, result 1x1), down columns
    /// (`axis = Some(0)`, result 1xN) or across rows (`axis = Some(1)`,
    /// result Mx1).
    pub fn sum(&mut self, src: NodeId, axis: Option<usize>) -> NodeId {
        let value = reduce(&self.nodes[src.0].value, axis, false);
        self.push(Op::Sum { src, axis }, value)
    }

    pub fn mean(&mut self, src: NodeId, axis: Option<usize>) -> NodeId {
        let value = reduce(&self.nodes[src.0].value, axis, true);
        self.push(Op::Mean { src, axis }, value)
    }

    pub fn sigmoid(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src.0].value.map(sigmoid_stable);
        self.push(Op::Sigmoid(src), value)
    }

    pub fn relu(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu(src), value)
    }

    pub fn sqrt(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src.0].value.map(f64::sqrt);
        self.push(Op::Sqrt(src), value)
    }

    /// Cross product of two 3-element tensors of identical shape.
    pub fn cross(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.binary_elementwise(a, b, "cross");
        assert_eq!(r * c, 3, "cross requires 3-element tensors");
        let x = self.nodes[a.0].value.data();
        let y = self.nodes[b.0].value.data();
        let value = Tensor::from_vec(r, c, cross3(x, y).to_vec());
        self.push(Op::Cross(a, b), value)
    }

    /// Whole-tensor L2 normalization. Errors out on near-zero input rather
    /// than emitting NaN adjoints.
    pub fn normalize(&mut self, src: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let norm = self.nodes[src.0].value.frobenius_norm();
        if norm <= eps {
            return Err(DiffError::DegenerateNormalize { norm });
        }
        let value = self.nodes[src.0].value.map(|x| x / norm);
        Ok(self.push(Op::Normalize { src, norm }, value))
    }

    /// Concatenate along `axis` (0 stacks rows, 1 extends columns).
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let value = match axis {
            0 => {
                let cols = self.shape(parts[0]).1;
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    assert_eq!(s.1, cols, "concat axis 0: column mismatch");
                    rows += s.0;
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                Tensor::from_vec(rows, cols, data)
            }
            1 => {
                let rows = self.shape(parts[0]).0;
                let total_cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut out = Tensor::zeros(rows, total_cols);
                let mut col0 = 0;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    assert_eq!(t.rows(), rows, "concat axis 1: row mismatch");
                    for i in 0..rows {
                        for j in 0..t.cols() {
                            out.set(i, col0 + j, t.get(i, j));
                        }
                    }
                    col0 += t.cols();
                }
                out
            }
            _ => panic!("concat: axis must be 0 or 1"),
        };
        self.push(Op::Concat { axis, parts: parts.to_vec() }, value)
    }

    /// Contiguous slice of `len` rows (axis 0) or columns (axis 1) from `start`.
    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let t = &self.nodes[src.0].value;
        let value = match axis {
            0 => {
                assert!(start + len <= t.rows(), "slice rows out of range");
                let cols = t.cols();
                Tensor::from_vec(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())
            }
            1 => {
                assert!(start + len <= t.cols(), "slice cols out of range");
                let mut out = Tensor::zeros(t.rows(), len);
                for i in 0..t.rows() {
                    for j in 0..len {
                        out.set(i, j, t.get(i, start + j));
                    }
                }
                out
            }
            _ => panic!("slice: axis must be 0 or 1"),
        };
        self.push(Op::Slice { src, axis, start, len }, value)
    }

    /// Materialize a 1x1, 1xN or Mx1 tensor at the given shape.
    pub fn broadcast(&mut self, src: NodeId, rows: usize, cols: usize) -> NodeId {
        let from = self.shape(src);
        let t = &self.nodes[src.0].value;
        assert!(
            (from.0 == rows || from.0 == 1) && (from.1 == cols || from.1 == 1),
            "broadcast: cannot expand {from:?} to ({rows}, {cols})"
        );
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(
                    i,
                    j,
                    t.get(if from.0 == 1 { 0 } else { i }, if from.1 == 1 { 0 } else { j }),
                );
            }
        }
        self.push(Op::Broadcast { src, from }, out)
    }

    // ----- helpers composed from the primitives -----

    /// a - b, composed as add(a, mul(b, -1)).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.neg(b);
        self.add(a, n)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let k = self.constant_scalar(k);
        let kb = self.broadcast(k, r, c);
        self.mul(a, kb)
    }

    /// Add a constant to every element.
    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let k = self.constant_scalar(k);
        let kb = self.broadcast(k, r, c);
        self.add(a, kb)
    }

    /// Elementwise x * sigmoid(x); the default smooth hidden activation.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Dot product of two same-shape tensors as a 1x1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p, None)
    }

    /// Reverse pass from a scalar loss node. Returns the gradient for every
    /// learnable parameter in `store`; learnables the loss never touched map
    /// to zero tensors.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<GradMap, DiffError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(DiffError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape(),
            });
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let grad = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let keep_for_var = self.nodes[idx].var.is_some();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, &grad);
                    accumulate(&mut adjoints, *b, &grad);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_mul(&grad, &self.nodes[b.0].value);
                    let gb = elementwise_mul(&grad, &self.nodes[a.0].value);
                    accumulate_owned(&mut adjoints, *a, ga);
                    accumulate_owned(&mut adjoints, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let av = &self.nodes[a.0].value;
                    let mut ga = grad.clone();
                    for (g, y) in ga.data_mut().iter_mut().zip(bv.data()) {
                        *g /= y;
                    }
                    let mut gb = grad.clone();
                    for ((g, x), y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *g *= -x / (y * y);
                    }
                    accumulate_owned(&mut adjoints, *a, ga);
                    accumulate_owned(&mut adjoints, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA[i,p] += sum_j g[i,j] B[p,j]; dB[p,j] += sum_i A[i,p] g[i,j]
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    let mut ga = Tensor::zeros(m, k);
                    let mut gb = Tensor::zeros(k, n);
                    for i in 0..m {
                        let g_row = &grad.data()[i * n..(i + 1) * n];
                        let a_row = &av.data()[i * k..(i + 1) * k];
                        let ga_row = &mut ga.data_mut()[i * k..(i + 1) * k];
                        for p in 0..k {
                            let b_row = &bv.data()[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (g, b) in g_row.iter().zip(b_row.iter()) {
                                acc += g * b;
                            }
                            ga_row[p] += acc;
                            let a_ip = a_row[p];
                            if a_ip != 0.0 {
                                let gb_row = &mut gb.data_mut()[p * n..(p + 1) * n];
                                for (gbj, g) in gb_row.iter_mut().zip(g_row.iter()) {
                                    *gbj += a_ip * g;
                                }
                            }
                        }
                    }
                    accumulate_owned(&mut adjoints, *a, ga);
                    accumulate_owned(&mut adjoints, *b, gb);
                }
                Op::Sum { src, axis } => {
                    let g = expand_reduced(&grad, self.shape(*src), *axis, 1.0);
                    accumulate_owned(&mut adjoints, *src, g);
                }
                Op::Mean { src, axis } => {
                    let shape = self.shape(*src);
                    let count = match axis {
                        None => shape.0 * shape.1,
                        Some(0) => shape.0,
                        Some(1) => shape.1,
                        _ => unreachable!(),
                    };
                    let g = expand_reduced(&grad, shape, *axis, 1.0 / count as f64);
                    accumulate_owned(&mut adjoints, *src, g);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let mut g = grad.clone();
                    for (gi, yi) in g.data_mut().iter_mut().zip(y.data()) {
                        *gi *= yi * (1.0 - yi);
                    }
                    accumulate_owned(&mut adjoints, *a, g);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut g = grad.clone();
                    for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                        if *xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate_owned(&mut adjoints, *a, g);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].value;
                    let mut g = grad.clone();
                    for (gi, yi) in g.data_mut().iter_mut().zip(y.data()) {
                        *gi /= 2.0 * yi;
                    }
                    accumulate_owned(&mut adjoints, *a, g);
                }
                Op::Cross(a, b) => {
                    let x = self.nodes[a.0].value.data();
                    let y = self.nodes[b.0].value.data();
                    let shape = self.shape(*a);
                    // d/da (a x b) . g = b x g ; d/db = g x a
                    let ga = cross3(y, grad.data());
                    let gb = cross3(grad.data(), x);
                    accumulate_owned(
                        &mut adjoints,
                        *a,
                        Tensor::from_vec(shape.0, shape.1, ga.to_vec()),
                    );
                    accumulate_owned(
                        &mut adjoints,
                        *b,
                        Tensor::from_vec(shape.0, shape.1, gb.to_vec()),
                    );
                }
                Op::Normalize { src, norm } => {
                    // y = x / |x| ; dx = (g - y (g . y)) / |x|
                    let y = &self.nodes[idx].value;
                    let gy: f64 = grad.data().iter().zip(y.data()).map(|(g, v)| g * v).sum();
                    let mut g = grad.clone();
                    for (gi, yi) in g.data_mut().iter_mut().zip(y.data()) {
                        *gi = (*gi - yi * gy) / norm;
                    }
                    accumulate_owned(&mut adjoints, *src, g);
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        let len = if *axis == 0 { s.0 } else { s.1 };
                        let g = slice_tensor(&grad, *axis, offset, len);
                        accumulate_owned(&mut adjoints, p, g);
                        offset += len;
                    }
                }
                Op::Slice { src, axis, start, len } => {
                    let shape = self.shape(*src);
                    let mut g = Tensor::zeros(shape.0, shape.1);
                    match axis {
                        0 => {
                            for i in 0..*len {
                                for j in 0..shape.1 {
                                    g.set(start + i, j, grad.get(i, j));
                                }
                            }
                        }
                        1 => {
                            for i in 0..shape.0 {
                                for j in 0..*len {
                                    g.set(i, start + j, grad.get(i, j));
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    accumulate_owned(&mut adjoints, *src, g);
                }
                Op::Broadcast { src, from } => {
                    let mut g = Tensor::zeros(from.0, from.1);
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            let ti = if from.0 == 1 { 0 } else { i };
                            let tj = if from.1 == 1 { 0 } else { j };
                            g.set(ti, tj, g.get(ti, tj) + grad.get(i, j));
                        }
                    }
                    accumulate_owned(&mut adjoints, *src, g);
                }
            }
            if keep_for_var {
                adjoints[idx] = Some(grad);
            }
        }

        let mut map = GradMap::new();
        for (name, &id) in &self.var_lookup {
            if store.is_learnable(name) {
                let g = adjoints[id.0].clone().unwrap_or_else(|| {
                    let (r, c) = self.shape(id);
                    Tensor::zeros(r, c)
                });
                map.insert(name.clone(), g);
            }
        }
        for (name, param) in store.iter() {
            if param.learnable && !map.contains_key(name) {
                let (r, c) = param.value.shape();
                map.insert(name.clone(), Tensor::zeros(r, c));
            }
        }
        Ok(map)
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn reduce(t: &Tensor, axis: Option<usize>, mean: bool) -> Tensor {
    let (r, c) = t.shape();
    match axis {
        None => {
            let s: f64 = t.data().iter().sum();
            Tensor::scalar(if mean { s / (r * c) as f64 } else { s })
        }
        Some(0) => {
            let mut out = Tensor::zeros(1, c);
            for i in 0..r {
                for j in 0..c {
                    out.set(0, j, out.get(0, j) + t.get(i, j));
                }
            }
            if mean {
                for v in out.data_mut() {
                    *v /= r as f64;
                }
            }
            out
        }
        Some(1) => {
            let mut out = Tensor::zeros(r, 1);
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..c {
                    s += t.get(i, j);
                }
                out.set(i, 0, if mean { s / c as f64 } else { s });
            }
            out
        }
        _ => panic!("reduce: axis must be 0 or 1"),
    }
}

fn expand_reduced(grad: &Tensor, shape: (usize, usize), axis: Option<usize>, k: f64) -> Tensor {
    let mut out = Tensor::zeros(shape.0, shape.1);
    match axis {
        None => {
            let g = grad.as_scalar() * k;
            out.data_mut().fill(g);
        }
        Some(0) => {
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    out.set(i, j, grad.get(0, j) * k);
                }
            }
        }
        Some(1) => {
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    out.set(i, j, grad.get(i, 0) * k);
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (r, c) = t.shape();
    match axis {
        0 => Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec()),
        1 => {
            let mut out = Tensor::zeros(r, len);
            for i in 0..r {
                for j in 0..len {
                    out.set(i, j, t.get(i, start + j));
                }
            }
            out
        }
        _ => unreachable!(),
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, grad: &Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_assign(grad),
        slot @ None => *slot = Some(grad.clone()),
    }
}

fn accumulate_owned(adjoints: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}
