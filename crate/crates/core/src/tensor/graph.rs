//! Tape-based reverse-mode automatic differentiation over [`Array`]s.
//!
//! A [`Graph`] records every operation in creation order, which is also a
//! topological order, so `backward` is a single reverse sweep. Parameters
//! live outside the graph in a [`ParamStore`]; each forward pass builds a
//! fresh graph and pulls parameters in as leaves with [`Graph::param`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{GradientMap, ParamId, ParamStore};
use crate::tensor::array::{broadcast_map, broadcast_shape, strides, Array};

/// sqrt(2/pi), used by the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Square,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    Huber(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    MatMul(usize, usize),
    Reduce {
        x: usize,
        kind: Reduce,
        keep_shape: Vec<usize>,
        count: usize,
    },
    Max {
        x: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    BroadcastTo(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<(u64, ParamId), usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: GradientMap,
    leaves: HashMap<usize, Array>,
}

impl Gradients {
    pub fn params(&self) -> &GradientMap {
        &self.params
    }

    pub fn into_params(self) -> GradientMap {
        self.params
    }

    /// Gradient of a `requires_grad` leaf (including parameter leaves).
    pub fn wrt(&self, v: Var<'_>) -> Option<&Array> {
        self.leaves.get(&v.id)
    }
}

#[cfg(feature = "fault-injection")]
pub mod fault {
    //! Deliberate backward-rule corruption for negative-control tests.
    use std::cell::Cell;

    thread_local! {
        static CORRUPT_SIGMOID: Cell<bool> = const { Cell::new(false) };
    }

    /// While enabled, sigmoid backward drops the `(1 - y)` factor.
    pub fn corrupt_sigmoid_backward(on: bool) {
        CORRUPT_SIGMOID.with(|c| c.set(on));
    }

    pub(crate) fn sigmoid_corrupted() -> bool {
        CORRUPT_SIGMOID.with(|c| c.get())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Huber(delta) => {
            let a = x.abs();
            if a <= delta {
                0.5 * x * x
            } else {
                delta * (a - 0.5 * delta)
            }
        }
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => {
            #[cfg(feature = "fault-injection")]
            if fault::sigmoid_corrupted() {
                return y;
            }
            y * (1.0 - y)
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Huber(delta) => x.clamp(-delta, delta),
    }
}

fn normalize_axes(op: &'static str, axes: &[usize], shape: &[usize]) -> Result<Vec<usize>> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::InvalidAxis {
            op,
            axis: bad,
            shape: shape.to_vec(),
        });
    }
    Ok(axes)
}

/// (outer, len, inner) decomposition around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `grad` (laid out as `from`) down to shape `to` (broadcast source).
fn unbroadcast(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let map = broadcast_map(to, from);
    let mut out = vec![0.0; to.iter().product()];
    for (g, &j) in grad.iter().zip(&map) {
        out[j] += g;
    }
    out
}

fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    // out flat index -> in flat index
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && &b[..b.len() - 2] != a_batch {
        return Err(mismatch());
    }
    let mut out = a_batch.to_vec();
    out.extend_from_slice(&[m, n]);
    Ok((
        MatMulDims {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || x[1] != w[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let (h, wd, k) = (x[2], x[3], w[2]);
    let fit = |len: usize| -> Option<usize> {
        let padded = len + 2 * pad;
        if stride == 0 || padded < k {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    };
    match (fit(h), fit(wd)) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            h,
            w: wd,
            cout: w[0],
            k,
            oh,
            ow,
        }),
        _ => Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!(
                "kernel {k} with stride {stride}, padding {pad} does not fit input {h}x{wd} \
                 (computed H' = ({h} + 2*{pad} - {k})/{stride} + 1, W' = ({wd} + 2*{pad} - {k})/{stride} + 1)"
            ),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn derived(&self, value: Array, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, rg, None)
    }

    fn val(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false, None)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true, None)
    }

    /// The leaf for a stored parameter; repeated calls with the same store
    /// return the same node, holding the value read on first use.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid(), id);
        if let Some(&node) = self.param_nodes.borrow().get(&key) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true, Some(id));
        self.param_nodes.borrow_mut().insert(key, v.id);
        v
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: shape0,
            });
        }
        let values: Vec<Rc<Array>> = parts.iter().map(|p| self.val(p.id)).collect();
        let mut out_shape = shape0.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = lanes(&shape0, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.derived(
            Array::new(out_shape, data)?,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }

        let mut params = GradientMap::new();
        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let arr = Array::new(node.value.shape().to_vec(), data)?;
            if let Some(pid) = node.param {
                params.insert(pid, arr.clone());
            }
            leaves.insert(i, arr);
        }
        Ok(Gradients { params, leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(x, kind) => {
            let xv = &nodes[*x].value;
            let contrib = g
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                .collect();
            accumulate(grads, nodes, *x, contrib);
        }
        Op::Binary(a, b, kind) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let os = out.shape();
            let amap = broadcast_map(av.shape(), os);
            let bmap = broadcast_map(bv.shape(), os);
            let (ad, bd) = (av.data(), bv.data());
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.numel()];
                for (k, gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => 1.0,
                        Binary::Mul => bd[bmap[k]],
                        Binary::Div => 1.0 / bd[bmap[k]],
                    };
                    ga[amap[k]] += gi * d;
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.numel()];
                for (k, gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => -1.0,
                        Binary::Mul => ad[amap[k]],
                        Binary::Div => {
                            let bk = bd[bmap[k]];
                            -ad[amap[k]] / (bk * bk)
                        }
                    };
                    gb[bmap[k]] += gi * d;
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (d, _) = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.numel()];
                for t in 0..d.batch {
                    let boff = if d.shared_rhs { 0 } else { t * d.k * d.n };
                    gemm_nt_acc(
                        &g[t * d.m * d.n..(t + 1) * d.m * d.n],
                        &bv.data()[boff..boff + d.k * d.n],
                        &mut ga[t * d.m * d.k..(t + 1) * d.m * d.k],
                        d.m,
                        d.k,
                        d.n,
                    );
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.numel()];
                for t in 0..d.batch {
                    let boff = if d.shared_rhs { 0 } else { t * d.k * d.n };
                    gemm_tn_acc(
                        &av.data()[t * d.m * d.k..(t + 1) * d.m * d.k],
                        &g[t * d.m * d.n..(t + 1) * d.m * d.n],
                        &mut gb[boff..boff + d.k * d.n],
                        d.m,
                        d.k,
                        d.n,
                    );
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Reduce {
            x,
            kind,
            keep_shape,
            count,
        } => {
            let xv = &nodes[*x].value;
            let map = broadcast_map(keep_shape, xv.shape());
            let scale = match kind {
                Reduce::Sum => 1.0,
                Reduce::Mean => 1.0 / *count as f64,
            };
            let contrib = map.iter().map(|&j| g[j] * scale).collect();
            accumulate(grads, nodes, *x, contrib);
        }
        Op::Max { x, argmax } => {
            let mut contrib = vec![0.0; nodes[*x].value.numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                contrib[src] += gi;
            }
            accumulate(grads, nodes, *x, contrib);
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            let mut contrib = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        contrib[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, contrib);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            let mut contrib = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        contrib[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                    }
                }
            }
            accumulate(grads, nodes, *x, contrib);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let e = *out.shape().last().expect("rank >= 1");
            let rows = xhat.len() / e;
            let gam = nodes[*gamma].value.data();
            if nodes[*gamma].requires_grad {
                let mut gg = vec![0.0; e];
                for r in 0..rows {
                    for j in 0..e {
                        gg[j] += g[r * e + j] * xhat[r * e + j];
                    }
                }
                accumulate(grads, nodes, *gamma, gg);
            }
            if nodes[*beta].requires_grad {
                let mut gb = vec![0.0; e];
                for r in 0..rows {
                    for j in 0..e {
                        gb[j] += g[r * e + j];
                    }
                }
                accumulate(grads, nodes, *beta, gb);
            }
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let row = r * e..(r + 1) * e;
                    let dxhat: Vec<f64> = row.clone().map(|k| g[k] * gam[k - r * e]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / e as f64;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / e as f64;
                    for (j, k) in row.enumerate() {
                        gx[k] = inv_std[r] * (dxhat[j] - mean_d - xhat[k] * mean_dx);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, g.to_vec());
        }
        Op::BroadcastTo(x) => {
            let xs = nodes[*x].value.shape();
            accumulate(grads, nodes, *x, unbroadcast(g, out.shape(), xs));
        }
        Op::Permute { x, perm } => {
            let map = permute_map(nodes[*x].value.shape(), perm);
            let mut contrib = vec![0.0; g.len()];
            for (gi, &src) in g.iter().zip(&map) {
                contrib[src] = *gi;
            }
            accumulate(grads, nodes, *x, contrib);
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner) = lanes(xs, *axis);
            let take = out.shape()[*axis];
            let mut contrib = vec![0.0; nodes[*x].value.numel()];
            for o in 0..outer {
                let src = o * len * inner + start * inner;
                let dst = o * take * inner;
                contrib[src..src + take * inner].copy_from_slice(&g[dst..dst + take * inner]);
            }
            accumulate(grads, nodes, *x, contrib);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = lanes(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut contrib = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        contrib.extend_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, nodes, p, contrib);
                }
                offset += len;
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let c = conv_geometry(xv.shape(), wv.shape(), *stride, *pad).expect("validated");
            let (xd, wd) = (xv.data(), wv.data());
            let want_x = nodes[*x].requires_grad;
            let want_w = nodes[*w].requires_grad;
            let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
            let mut gw = vec![0.0; if want_w { wd.len() } else { 0 }];
            let mut gb = vec![0.0; c.cout];
            for bi in 0..c.batch {
                for co in 0..c.cout {
                    for oy in 0..c.oh {
                        for ox in 0..c.ow {
                            let gi = g[((bi * c.cout + co) * c.oh + oy) * c.ow + ox];
                            if gi == 0.0 {
                                continue;
                            }
                            gb[co] += gi;
                            for ci in 0..c.cin {
                                for ky in 0..c.k {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= c.h as isize {
                                        continue;
                                    }
                                    for kx in 0..c.k {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= c.w as isize {
                                            continue;
                                        }
                                        let xi = ((bi * c.cin + ci) * c.h + iy as usize) * c.w
                                            + ix as usize;
                                        let wi = ((co * c.cin + ci) * c.k + ky) * c.k + kx;
                                        if want_x {
                                            gx[xi] += gi * wd[wi];
                                        }
                                        if want_w {
                                            gw[wi] += gi * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_x {
                accumulate(grads, nodes, *x, gx);
            }
            if want_w {
                accumulate(grads, nodes, *w, gw);
            }
            if let Some(b) = b {
                accumulate(grads, nodes, *b, gb);
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(&self, kind: Unary) -> Var<'g> {
        let out = self.value().map(|x| unary_forward(kind, x));
        self.graph.derived(out, Op::Unary(self.id, kind), &[self.id])
    }

    fn binary(&self, other: &Var<'g>, kind: Binary, name: &'static str) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        if kind == Binary::Div && b.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let amap = broadcast_map(a.shape(), &shape);
        let bmap = broadcast_map(b.shape(), &shape);
        let (ad, bd) = (a.data(), b.data());
        let data = amap
            .iter()
            .zip(&bmap)
            .map(|(&i, &j)| match kind {
                Binary::Add => ad[i] + bd[j],
                Binary::Sub => ad[i] - bd[j],
                Binary::Mul => ad[i] * bd[j],
                Binary::Div => ad[i] / bd[j],
            })
            .collect();
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::Binary(self.id, other.id, kind),
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Unary::Neg)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Unary::Sqrt))
    }

    /// σ(x) = 1 / (1 + e^{-x}), evaluated without overflow for large |x|.
    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&self) -> Var<'g> {
        self.unary(Unary::Gelu)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Unary::AddScalar(c))
    }

    /// Elementwise Huber penalty of a residual: ½r² for |r| ≤ δ, else δ(|r| − δ/2).
    pub fn huber(&self, delta: f64) -> Result<Var<'g>> {
        if !(delta > 0.0) {
            return Err(Error::Domain {
                op: "huber",
                msg: format!("delta must be positive, got {delta}"),
            });
        }
        Ok(self.unary(Unary::Huber(delta)))
    }

    /// Batched matrix product over the last two axes. The right operand is
    /// either 2-D (shared across the batch) or has the same batch dims.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let (d, shape) = matmul_dims(a.shape(), b.shape())?;
        let mut data = vec![0.0; shape.iter().product()];
        for t in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { t * d.k * d.n };
            gemm_acc(
                &a.data()[t * d.m * d.k..(t + 1) * d.m * d.k],
                &b.data()[boff..boff + d.k * d.n],
                &mut data[t * d.m * d.n..(t + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    fn reduce(&self, axes: &[usize], kind: Reduce, name: &'static str) -> Result<Var<'g>> {
        let x = self.value();
        let axes = normalize_axes(name, axes, x.shape())?;
        let keep_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
        let map = broadcast_map(&keep_shape, x.shape());
        let mut data = vec![0.0; keep_shape.iter().product()];
        for (v, &j) in x.data().iter().zip(&map) {
            data[j] += v;
        }
        if kind == Reduce::Mean {
            for v in &mut data {
                *v /= count as f64;
            }
        }
        Ok(self.graph.derived(
            Array::new(out_shape, data)?,
            Op::Reduce {
                x: self.id,
                kind,
                keep_shape,
                count,
            },
            &[self.id],
        ))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'g>> {
        self.reduce(axes, Reduce::Sum, "sum")
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'g>> {
        self.reduce(axes, Reduce::Mean, "mean")
    }

    pub fn sum_all(&self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes).expect("all axes valid")
    }

    pub fn mean_all(&self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes).expect("all axes valid")
    }

    /// Max over `axes`; the gradient goes to the first maximal element.
    pub fn max(&self, axes: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let axes = normalize_axes("max", axes, x.shape())?;
        let keep_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = broadcast_map(&keep_shape, x.shape());
        let n_out: usize = keep_shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; n_out];
        let mut argmax = vec![usize::MAX; n_out];
        for (src, (&v, &j)) in x.data().iter().zip(&map).enumerate() {
            if argmax[j] == usize::MAX || v > best[j] {
                best[j] = v;
                argmax[j] = src;
            }
        }
        Ok(self.graph.derived(
            Array::new(out_shape, best)?,
            Op::Max { x: self.id, argmax },
            &[self.id],
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Softmax along `axis`, with the lane maximum subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("softmax", axis)?;
        let x = self.value();
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x.data()[at(j)] - m).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[at(j)] /= z;
                }
            }
        }
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::Softmax { x: self.id, axis },
            &[self.id],
        ))
    }

    /// log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("log_softmax", axis)?;
        let x = self.value();
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (x.data()[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    data[at(j)] = x.data()[at(j)] - lse;
                }
            }
        }
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::LogSoftmax { x: self.id, axis },
            &[self.id],
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both of
    /// the last-axis length). Uses the biased variance.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gamma);
        self.same_graph(beta);
        let shape = self.shape();
        let e = *shape.last().ok_or_else(|| Error::InvalidShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [e] || bv.shape() != [e] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gv.shape().to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let x = self.value();
        let rows = x.numel() / e;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * e..(r + 1) * e];
            let mu = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / e as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..e {
                let h = (row[j] - mu) * is;
                xhat[r * e + j] = h;
                data[r * e + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(self.graph.derived(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {:?}", x.shape()),
            });
        }
        let map = permute_map(x.shape(), perm);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        Ok(self.graph.derived(
            Array::new(shape, data)?,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.check_axis("slice", axis)?;
        if start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            });
        }
        let x = self.value();
        let (outer, full, inner) = lanes(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = o * full * inner + start * inner;
            data.extend_from_slice(&x.data()[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.graph.derived(
            Array::new(out_shape, data)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        match broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: x.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_map(x.shape(), shape);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        Ok(self.graph.derived(
            Array::new(shape.to_vec(), data)?,
            Op::BroadcastTo(self.id),
            &[self.id],
        ))
    }

    /// 2-D cross-correlation (no kernel flip). `self` is `[B, C_in, H, W]`,
    /// `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(weight);
        let (xv, wv) = (self.value(), weight.value());
        let c = conv_geometry(xv.shape(), wv.shape(), stride, pad)?;
        let bv = match bias {
            Some(b) => {
                self.same_graph(b);
                let v = b.value();
                if v.shape() != [c.cout] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![c.cout],
                        rhs: v.shape().to_vec(),
                    });
                }
                Some(v)
            }
            None => None,
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; c.batch * c.cout * c.oh * c.ow];
        for bi in 0..c.batch {
            for co in 0..c.cout {
                let b0 = bv.as_ref().map_or(0.0, |b| b.data()[co]);
                for oy in 0..c.oh {
                    for ox in 0..c.ow {
                        let mut acc = b0;
                        for ci in 0..c.cin {
                            for ky in 0..c.k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= c.h as isize {
                                    continue;
                                }
                                for kx in 0..c.k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= c.w as isize {
                                        continue;
                                    }
                                    acc += xd[((bi * c.cin + ci) * c.h + iy as usize) * c.w
                                        + ix as usize]
                                        * wd[((co * c.cin + ci) * c.k + ky) * c.k + kx];
                                }
                            }
                        }
                        out[((bi * c.cout + co) * c.oh + oy) * c.ow + ox] = acc;
                    }
                }
            }
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.graph.derived(
            Array::new(vec![c.batch, c.cout, c.oh, c.ow], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            &parents,
        ))
    }
}
