//! Define-then-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a topologically ordered list of operations. Building a
//! graph only records nodes; [`Graph::evaluate`] binds named inputs and runs
//! the forward pass, and [`Graph::gradients`] accumulates adjoints backwards
//! from a scalar node. Stochastic nodes (dropout, Gaussian noise) draw from
//! a stream seeded by the graph seed and the node id, so re-evaluating the
//! same graph reproduces the same masks. Finite-difference checks rely on
//! that.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// A 1×n matrix.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
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

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input(String),
    MatMul,
    Add,
    /// `m×n + 1×n`, bias broadcast over rows.
    AddRow,
    Sub,
    Mul,
    Affine { scale: f64, shift: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    Tanh,
    Sigmoid,
    /// Along the last axis.
    Softmax,
    Log,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    Dropout { p: f64 },
    Noise { sigma: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Dropout { .. } => "dropout",
            Op::Noise { .. } => "noise",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    label: Option<String>,
}

/// Source of named input tensors for [`Graph::evaluate`].
pub trait Inputs {
    fn get(&self, name: &str) -> Option<&Tensor>;
}

impl Inputs for HashMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        HashMap::get(self, name)
    }
}

impl Inputs for BTreeMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        BTreeMap::get(self, name)
    }
}

impl Inputs for HashMap<&str, &Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        HashMap::get(self, name).copied()
    }
}

/// Looks names up in `first`, then `second`.
pub struct Chain<'a, A: ?Sized, B: ?Sized>(pub &'a A, pub &'a B);

impl<A: Inputs + ?Sized, B: Inputs + ?Sized> Inputs for Chain<'_, A, B> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name).or_else(|| self.1.get(name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
}

pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
    // dropout masks and noise draws, kept for the backward pass
    aux: Vec<Option<Tensor>>,
}

impl Evaluation<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a name used in error messages.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = Some(label.into());
        node
    }

    fn describe(&self, id: usize) -> String {
        let node = &self.nodes[id];
        match (&node.label, &node.op) {
            (Some(l), _) => format!("{l} (#{id} {})", node.op.kind()),
            (None, Op::Input(name)) => format!("input {name:?} (#{id})"),
            (None, op) => format!("#{id} {}", op.kind()),
        }
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()), &[])
    }

    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input(s) if s == name))
            .map(NodeId)
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(s) => Some(s.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow, &[a, bias])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, &[a, b])
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { scale, shift }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        self.push(Op::Dropout { p }, &[x])
    }

    pub fn gaussian_noise(&mut self, x: NodeId, sigma: f64) -> NodeId {
        self.push(Op::Noise { sigma }, &[x])
    }

    fn node_rng(&self, id: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn evaluate<'a, I: Inputs + ?Sized>(&self, inputs: &'a I) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut aux = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let shape_err = |msg: String| Error::Shape {
                node: self.describe(id),
                msg,
            };
            let arg = |k: usize| -> &Tensor { &values[node.inputs[k].0] };
            let out: Cow<'a, Tensor> = match &node.op {
                Op::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::invalid(format!("input {name:?} is not bound")))?;
                    Cow::Borrowed(t)
                }
                Op::MatMul => {
                    let (a, b) = (arg(0), arg(1));
                    match (a.rows_cols(), b.rows_cols()) {
                        (Some((m, k)), Some((k2, n))) if k == k2 => Cow::Owned(Tensor {
                            shape: vec![m, n],
                            data: matmul(&a.data, &b.data, m, k, n),
                        }),
                        _ => return Err(shape_err(format!("cannot multiply {:?} by {:?}", a.shape, b.shape))),
                    }
                }
                Op::Add | Op::Sub | Op::Mul => {
                    let (a, b) = (arg(0), arg(1));
                    if a.shape != b.shape {
                        return Err(shape_err(format!("operands {:?} and {:?} differ", a.shape, b.shape)));
                    }
                    Cow::Owned(match node.op {
                        Op::Add => a.zip(b, |x, y| x + y),
                        Op::Sub => a.zip(b, |x, y| x - y),
                        _ => a.zip(b, |x, y| x * y),
                    })
                }
                Op::AddRow => {
                    let (a, b) = (arg(0), arg(1));
                    match (a.rows_cols(), b.rows_cols()) {
                        (Some((_, n)), Some((1, n2))) if n == n2 => {
                            let mut out = a.clone();
                            for row in out.data.chunks_mut(n) {
                                for (o, &v) in row.iter_mut().zip(&b.data) {
                                    *o += v;
                                }
                            }
                            Cow::Owned(out)
                        }
                        _ => return Err(shape_err(format!("cannot add row {:?} to {:?}", b.shape, a.shape))),
                    }
                }
                Op::Affine { scale, shift } => Cow::Owned(arg(0).map(|x| scale * x + shift)),
                Op::Concat { axis } => Cow::Owned(
                    concat(node.inputs.iter().map(|i| &*values[i.0]), *axis).map_err(shape_err)?,
                ),
                Op::Slice { axis, start, end } => {
                    Cow::Owned(slice(arg(0), *axis, *start, *end).map_err(shape_err)?)
                }
                Op::Reshape(shape) => {
                    let x = arg(0);
                    if shape.iter().product::<usize>() != x.len() {
                        return Err(shape_err(format!("cannot reshape {:?} to {shape:?}", x.shape)));
                    }
                    Cow::Owned(Tensor {
                        shape: shape.clone(),
                        data: x.data.clone(),
                    })
                }
                Op::Tanh => Cow::Owned(arg(0).map(f64::tanh)),
                Op::Sigmoid => Cow::Owned(arg(0).map(sigmoid)),
                Op::Softmax => {
                    let x = arg(0);
                    let width = *x.shape.last().ok_or_else(|| shape_err("softmax of a scalar".into()))?;
                    if width == 0 {
                        return Err(shape_err("softmax over an empty axis".into()));
                    }
                    let mut out = x.clone();
                    out.data.chunks_mut(width).for_each(softmax_in_place);
                    Cow::Owned(out)
                }
                Op::Log => Cow::Owned(arg(0).map(f64::ln)),
                Op::Clamp { lo, hi } => Cow::Owned(arg(0).map(|x| x.clamp(*lo, *hi))),
                Op::Sum => Cow::Owned(Tensor::scalar(arg(0).data.iter().sum())),
                Op::Mean => {
                    let x = arg(0);
                    if x.is_empty() {
                        return Err(shape_err("mean of an empty tensor".into()));
                    }
                    Cow::Owned(Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64))
                }
                Op::Dropout { p } => {
                    let x = arg(0);
                    if !(0.0..1.0).contains(p) {
                        return Err(shape_err(format!("dropout probability {p} outside [0, 1)")));
                    }
                    let mut rng = self.node_rng(id);
                    let keep = 1.0 / (1.0 - p);
                    let mask = Tensor {
                        shape: x.shape.clone(),
                        data: (0..x.len())
                            .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                            .collect(),
                    };
                    let out = x.zip(&mask, |a, m| a * m);
                    aux[id] = Some(mask);
                    Cow::Owned(out)
                }
                Op::Noise { sigma } => {
                    let x = arg(0);
                    let mut rng = self.node_rng(id);
                    let noise = Tensor {
                        shape: x.shape.clone(),
                        data: (0..x.len())
                            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    };
                    let out = x.zip(&noise, |a, n| a + n);
                    aux[id] = Some(noise);
                    Cow::Owned(out)
                }
            };
            if out.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values, aux })
    }

    /// Reverse-mode gradients of the scalar `output` with respect to each
    /// node in `wrt`, in the same order.
    pub fn gradients(&self, eval: &Evaluation<'_>, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let out_value = eval.value(output);
        if out_value.len() != 1 {
            return Err(Error::Shape {
                node: self.describe(output.0),
                msg: format!("gradient source must be scalar, has shape {:?}", out_value.shape),
            });
        }
        // only propagate through nodes that lie on a path from a requested node
        let mut needed = vec![false; self.nodes.len()];
        for w in wrt {
            needed[w.0] = true;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|i| needed[i.0]) {
                needed[id] = true;
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor {
            shape: out_value.shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=output.0).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.backward(id, node, &g, eval);
            for (k, contrib) in contributions.into_iter().enumerate() {
                let Some(contrib) = contrib else { continue };
                let input = node.inputs[k].0;
                if !needed[input] {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            adj[id] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|w| adj[w.0].clone().unwrap_or_else(|| Tensor::zeros(&eval.value(*w).shape)))
            .collect())
    }

    fn backward(&self, id: usize, node: &Node, g: &Tensor, eval: &Evaluation<'_>) -> Vec<Option<Tensor>> {
        let input = |k: usize| eval.value(node.inputs[k]);
        let out = eval.value(NodeId(id));
        match &node.op {
            Op::Input(_) => vec![],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = a.rows_cols().unwrap();
                let n = b.shape[1];
                let da = matmul(&g.data, &transpose(&b.data, k, n), m, n, k);
                let db = matmul(&transpose(&a.data, m, k), &g.data, k, m, n);
                vec![
                    Some(Tensor { shape: a.shape.clone(), data: da }),
                    Some(Tensor { shape: b.shape.clone(), data: db }),
                ]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![Some(g.zip(input(1), |d, b| d * b)), Some(g.zip(input(0), |d, a| d * a))],
            Op::AddRow => {
                let n = input(1).len();
                let mut db = vec![0.0; n];
                for row in g.data.chunks(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor { shape: vec![1, n], data: db })]
            }
            Op::Affine { scale, .. } => vec![Some(g.map(|d| d * scale))],
            Op::Concat { axis } => split_concat_grad(g, node.inputs.iter().map(|i| eval.value(*i)), *axis)
                .into_iter()
                .map(Some)
                .collect(),
            Op::Slice { axis, start, end } => {
                let x = input(0);
                let mut dx = Tensor::zeros(&x.shape);
                let (outer, width, inner) = axis_layout(&x.shape, *axis);
                let span = end - start;
                for o in 0..outer {
                    for s in 0..span {
                        let src = (o * span + s) * inner;
                        let dst = (o * width + start + s) * inner;
                        dx.data[dst..dst + inner].copy_from_slice(&g.data[src..src + inner]);
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape(_) => vec![Some(Tensor {
                shape: input(0).shape.clone(),
                data: g.data.clone(),
            })],
            Op::Tanh => vec![Some(g.zip(out, |d, y| d * (1.0 - y * y)))],
            Op::Sigmoid => vec![Some(g.zip(out, |d, y| d * y * (1.0 - y)))],
            Op::Softmax => {
                let width = *out.shape.last().unwrap();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data.chunks_mut(width).zip(out.data.chunks(width)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::Log => vec![Some(g.zip(input(0), |d, x| d / x))],
            Op::Clamp { lo, hi } => vec![Some(g.zip(input(0), |d, x| if x < *lo || x > *hi { 0.0 } else { d }))],
            Op::Sum => vec![Some(Tensor {
                shape: input(0).shape.clone(),
                data: vec![g.item(); input(0).len()],
            })],
            Op::Mean => {
                let x = input(0);
                vec![Some(Tensor {
                    shape: x.shape.clone(),
                    data: vec![g.item() / x.len() as f64; x.len()],
                })]
            }
            Op::Dropout { .. } => {
                let mask = eval.aux[id].as_ref().expect("dropout mask recorded");
                vec![Some(g.zip(mask, |d, m| d * m))]
            }
            Op::Noise { .. } => vec![Some(g.clone())],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stabilized softmax: `exp(z - max z) / sum exp(z - max z)`.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// `(outer, width, inner)` such that the flat index of `(o, w, i)` is
/// `(o * width + w) * inner + i`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat<'t>(parts: impl Iterator<Item = &'t Tensor>, axis: usize) -> Result<Tensor, String> {
    let parts: Vec<&Tensor> = parts.collect();
    let first = parts.first().ok_or("concat of nothing")?;
    if axis >= first.shape.len() {
        return Err(format!("axis {axis} out of range for {:?}", first.shape));
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in &parts {
        let compatible = p.shape.len() == first.shape.len()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(format!("cannot concatenate {:?} with {:?} on axis {axis}", p.shape, first.shape));
        }
        shape[axis] += p.shape[axis];
    }
    let (outer, _, inner) = axis_layout(&first.shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in &parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

fn split_concat_grad<'t>(g: &Tensor, parts: impl Iterator<Item = &'t Tensor>, axis: usize) -> Vec<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    let (outer, _, inner) = axis_layout(&g.shape, axis);
    let mut grads: Vec<Tensor> = parts.iter().map(|p| Tensor::zeros(&p.shape)).collect();
    let mut offset = 0;
    for o in 0..outer {
        for (p, dg) in parts.iter().zip(grads.iter_mut()) {
            let chunk = p.shape[axis] * inner;
            dg.data[o * chunk..(o + 1) * chunk].copy_from_slice(&g.data[offset..offset + chunk]);
            offset += chunk;
        }
    }
    grads
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor, String> {
    if axis >= x.shape.len() || start > end || end > x.shape[axis] {
        return Err(format!("slice {start}..{end} on axis {axis} out of range for {:?}", x.shape));
    }
    let (outer, width, inner) = axis_layout(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data[(o * width + start) * inner..(o * width + end) * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    Ok(Tensor { shape, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

pub const FD_EPSILON: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Finite-difference stencil used by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`.
    Central { eps: f64 },
    /// Fourth-order central difference
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`. Its larger step keeps
    /// roundoff far below the check tolerance on deep graphs.
    FivePoint { h: f64 },
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil::Central { eps: FD_EPSILON }
    }
}

/// Stencil used for whole-model checks.
pub const MODEL_STENCIL: Stencil = Stencil::FivePoint { h: 1e-3 };

/// Compares `analytic` gradients (one per named input) against central
/// differences of `f` with step [`FD_EPSILON`].
pub fn finite_difference_report<F>(
    inputs: &BTreeMap<String, Tensor>,
    analytic: &[(String, Tensor)],
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    finite_difference_report_with(inputs, analytic, tolerance, Stencil::default(), f)
}

pub fn finite_difference_report_with<F>(
    inputs: &BTreeMap<String, Tensor>,
    analytic: &[(String, Tensor)],
    tolerance: f64,
    stencil: Stencil,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut work = inputs.clone();
    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let mut worst = (0.0, 0, 0.0, 0.0);
        for i in 0..grad.len() {
            let original = work[name].data[i];
            let mut at = |delta: f64, work: &mut BTreeMap<String, Tensor>| -> Result<f64> {
                work.get_mut(name).unwrap().data[i] = original + delta;
                let v = f(work);
                work.get_mut(name).unwrap().data[i] = original;
                v
            };
            let numeric = match stencil {
                Stencil::Central { eps } => (at(eps, &mut work)? - at(-eps, &mut work)?) / (2.0 * eps),
                Stencil::FivePoint { h } => {
                    let (m2, m1) = (at(-2.0 * h, &mut work)?, at(-h, &mut work)?);
                    let (p1, p2) = (at(h, &mut work)?, at(2.0 * h, &mut work)?);
                    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
                }
            };
            let err = relative_error(grad.data[i], numeric);
            if err > worst.0 || i == 0 {
                worst = (err, i, grad.data[i], numeric);
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            passed: worst.0 < tolerance,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

/// Checks the gradient of scalar `output` with respect to every named input
/// in `params` against central finite differences.
pub fn check_gradients(
    graph: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    output: NodeId,
    params: &[&str],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let nodes: Vec<NodeId> = params
        .iter()
        .map(|p| {
            graph
                .input_node(p)
                .ok_or_else(|| Error::invalid(format!("graph has no input named {p:?}")))
        })
        .collect::<Result<_>>()?;
    let eval = graph.evaluate(inputs)?;
    let grads = graph.gradients(&eval, output, &nodes)?;
    let analytic: Vec<(String, Tensor)> = params.iter().map(|p| p.to_string()).zip(grads).collect();
    finite_difference_report(inputs, &analytic, tolerance, |bound| {
        Ok(graph.evaluate(bound)?.value(output).item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn x_plus_x() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let y = g.add(x, x);
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let eval = g.evaluate(&inputs).unwrap();
        assert_eq!(eval.value(y).data(), [2.0, 4.0]);
    }

    #[test]
    fn matmul_shape() {
        let mut g = Graph::new(0);
        let (a, b) = (g.input("a"), g.input("b"));
        let c = g.matmul(a, b);
        let inputs = bind(&[
            ("a", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("b", Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap()),
        ]);
        let eval = g.evaluate(&inputs).unwrap();
        assert_eq!(eval.value(c).shape(), [2, 1]);
        assert_eq!(eval.value(c).data(), [-2.0, -2.0]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new(0);
        let (a, b) = (g.input("a"), g.input("b"));
        let c = g.matmul(a, b);
        g.label(c, "projection");
        let inputs = bind(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 1]))]);
        let err = g.evaluate(&inputs).err().unwrap();
        assert!(err.to_string().contains("projection"), "{err}");
    }

    #[test]
    fn non_finite_names_node() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        g.log(x);
        let err = g.evaluate(&bind(&[("x", Tensor::vector(vec![0.0]))])).err().unwrap();
        assert!(matches!(err, Error::NonFinite { ref node } if node.contains("log")), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let y = g.softmax(x);
        let inputs = bind(&[("x", Tensor::vector(vec![0.0; 3]))]);
        let eval = g.evaluate(&inputs).unwrap();
        for v in eval.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_inputs_stay_finite() {
        let mut z = vec![1000.0, -1000.0, 999.0];
        softmax_in_place(&mut z);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let sq = g.mul(x, x);
        let y = g.sum(sq);
        let inputs = bind(&[("x", Tensor::scalar(3.0))]);
        let eval = g.evaluate(&inputs).unwrap();
        let grads = g.gradients(&eval, y, &[x]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new(0);
        let z = g.input("z");
        let s = g.softmax(z);
        let y = g.sum(s);
        let inputs = bind(&[("z", Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]))]);
        let eval = g.evaluate(&inputs).unwrap();
        let grads = g.gradients(&eval, y, &[z]).unwrap();
        for v in grads[0].data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn gradient_requires_scalar() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let y = g.tanh(x);
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let eval = g.evaluate(&inputs).unwrap();
        assert!(g.gradients(&eval, y, &[x]).is_err());
    }

    #[test]
    fn unrequested_and_disconnected_inputs() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let unused = g.input("u");
        let y = g.sum(x);
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0])), ("u", Tensor::zeros(&[2, 2]))]);
        let eval = g.evaluate(&inputs).unwrap();
        let grads = g.gradients(&eval, y, &[unused, x]).unwrap();
        assert_eq!(grads[0], Tensor::zeros(&[2, 2]));
        assert_eq!(grads[1].data(), [1.0, 1.0]);
    }

    /// Three dense tanh/sigmoid layers exercising most ops.
    fn three_layer(g: &mut Graph) -> NodeId {
        let x = g.input("x");
        let w1 = g.input("w1");
        let b1 = g.input("b1");
        let w2 = g.input("w2");
        let w3 = g.input("w3");
        let h1 = g.matmul(x, w1);
        let h1 = g.add_row(h1, b1);
        let h1 = g.tanh(h1);
        let left = g.slice(h1, 1, 0, 2);
        let right = g.slice(h1, 1, 2, 4);
        let mixed = g.mul(left, right);
        let h1 = g.concat(&[mixed, h1], 1);
        let h2 = g.matmul(h1, w2);
        let h2 = g.sigmoid(h2);
        let h3 = g.matmul(h2, w3);
        let flat = g.reshape(h3, &[3]);
        let p = g.softmax(flat);
        let p = g.clamp(p, 1e-7, 1.0);
        let lp = g.log(p);
        let lp = g.affine(lp, -0.5, 0.1);
        g.mean(lp)
    }

    fn three_layer_inputs(seed: u64) -> BTreeMap<String, Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bind(&[
            ("x", random(&mut rng, &[3, 5])),
            ("w1", random(&mut rng, &[5, 4])),
            ("b1", random(&mut rng, &[1, 4])),
            ("w2", random(&mut rng, &[6, 3])),
            ("w3", random(&mut rng, &[3, 1])),
        ])
    }

    #[test]
    fn three_layer_matches_finite_differences() {
        for seed in 0..5 {
            let mut g = Graph::new(seed);
            let y = three_layer(&mut g);
            let inputs = three_layer_inputs(seed);
            let report = check_gradients(&g, &inputs, y, &["x", "w1", "b1", "w2", "w3"], 1e-4).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn linear_graph_is_nearly_exact() {
        let mut g = Graph::new(0);
        let x = g.input("x");
        let w = g.input("w");
        let y = g.matmul(x, w);
        let y = g.affine(y, 2.0, 1.0);
        let y = g.sum(y);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = bind(&[("x", random(&mut rng, &[2, 3])), ("w", random(&mut rng, &[3, 2]))]);
        let report = check_gradients(&g, &inputs, y, &["x", "w"], 1e-10).unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn dropout_and_noise_masks_are_frozen_per_seed() {
        let mut g = Graph::new(42);
        let x = g.input("x");
        let w = g.input("w");
        let noisy = g.gaussian_noise(x, 0.2);
        let dropped = g.dropout(noisy, 0.5);
        let h = g.matmul(dropped, w);
        let h = g.tanh(h);
        let y = g.sum(h);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = bind(&[("x", random(&mut rng, &[4, 6])), ("w", random(&mut rng, &[6, 2]))]);
        let a = g.evaluate(&inputs).unwrap().value(y).clone();
        let b = g.evaluate(&inputs).unwrap().value(y).clone();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        let report = check_gradients(&g, &inputs, y, &["x", "w"], 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dropout_inverted_scaling() {
        let mut g = Graph::new(5);
        let x = g.input("x");
        let d = g.dropout(x, 0.25);
        let inputs = bind(&[("x", Tensor::vector(vec![1.0; 1000]))]);
        let eval = g.evaluate(&inputs).unwrap();
        let kept = eval.value(d).data().iter().filter(|v| **v != 0.0).count();
        assert!(eval.value(d).data().iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15));
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn corrupted_adjoint_is_flagged() {
        let mut g = Graph::new(0);
        let y = three_layer(&mut g);
        let inputs = three_layer_inputs(11);
        let names = ["w1", "w2"];
        let nodes: Vec<_> = names.iter().map(|n| g.input_node(n).unwrap()).collect();
        let eval = g.evaluate(&inputs).unwrap();
        let mut grads = g.gradients(&eval, y, &nodes).unwrap();
        grads[1].data_mut()[2] *= 1.5;
        let analytic: Vec<_> = names.iter().map(|n| n.to_string()).zip(grads).collect();
        let report = finite_difference_report(&inputs, &analytic, 1e-4, |b| Ok(g.evaluate(b)?.value(y).item())).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|e| e.name.as_str()).collect();
        assert_eq!(failed, ["w2"]);
        assert_eq!(report.entries[1].worst_index, 2);
    }

    #[test]
    fn concat_rows_and_slice_rows() {
        let mut g = Graph::new(0);
        let a = g.input("a");
        let b = g.input("b");
        let c = g.concat(&[a, b], 0);
        let s = g.slice(c, 0, 1, 3);
        let inputs = bind(&[
            ("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
            ("b", Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap()),
        ]);
        let eval = g.evaluate(&inputs).unwrap();
        assert_eq!(eval.value(c).shape(), [3, 2]);
        assert_eq!(eval.value(s).data(), [3.0, 4.0, 5.0, 6.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(z in proptest::collection::vec(-700.0f64..700.0, 1..20)) {
                let mut p = z.clone();
                softmax_in_place(&mut p);
                prop_assert!(p.iter().all(|v| *v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn gradient_is_linear(seed in 0u64..1000) {
                // d(f + g) = df + dg where f, g share the input
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = bind(&[("x", random(&mut rng, &[2, 3])), ("w", random(&mut rng, &[3, 3]))]);
                let build = |g: &mut Graph, which: u8| {
                    let x = g.input("x");
                    let w = g.input("w");
                    let h = g.matmul(x, w);
                    let f = if which == 0 { g.tanh(h) } else { g.sigmoid(h) };
                    g.sum(f)
                };
                let grad_of = |which: Option<u8>| {
                    let mut g = Graph::new(0);
                    let y = match which {
                        Some(k) => build(&mut g, k),
                        None => {
                            let a = build(&mut g, 0);
                            let b = build(&mut g, 1);
                            g.add(a, b)
                        }
                    };
                    let eval = g.evaluate(&inputs).unwrap();
                    // both copies of "w" are separate nodes; sum their adjoints
                    let ws: Vec<_> = (0..g.len()).map(NodeId).filter(|n| g.nodes[n.0].op == Op::Input("w".into())).collect();
                    let grads = g.gradients(&eval, y, &ws).unwrap();
                    grads.into_iter().reduce(|mut a, b| { a.add_assign(&b); a }).unwrap()
                };
                let sum = grad_of(None);
                let (a, b) = (grad_of(Some(0)), grad_of(Some(1)));
                for i in 0..sum.len() {
                    prop_assert!((sum.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn evaluate_is_bitwise_deterministic(seed in 0u64..1000) {
                let mut g = Graph::new(seed);
                let y = three_layer(&mut g);
                let inputs = three_layer_inputs(seed);
                let a = g.evaluate(&inputs).unwrap().value(y).item();
                let b = g.evaluate(&inputs).unwrap().value(y).item();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let inputs = bind(&[("x", Tensor::row(vec![0.7, -1.3]))]);
        let f = |b: &BTreeMap<String, Tensor>| {
            let d = b["x"].data();
            Ok(d[0].powi(4) - 3.0 * d[0] * d[1].powi(3) + d[1])
        };
        let (x, y) = (0.7f64, -1.3f64);
        let exact = Tensor::row(vec![4.0 * x.powi(3) - 3.0 * y.powi(3), -9.0 * x * y * y + 1.0]);
        let report =
            finite_difference_report_with(&inputs, &[("x".into(), exact)], 1e-10, Stencil::FivePoint { h: 1e-2 }, f)
                .unwrap();
        assert!(report.passed(), "{report:?}");
        let wrong = Tensor::row(vec![4.0 * x.powi(3) - 3.0 * y.powi(3), -9.0 * x * y * y + 1.01]);
        let report = finite_difference_report_with(&inputs, &[("x".into(), wrong)], 1e-4, MODEL_STENCIL, f).unwrap();
        assert!(!report.passed());
    }

}
