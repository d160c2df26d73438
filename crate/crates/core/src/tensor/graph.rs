use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
pub use crate::metric::{Kernel, NegativeSets};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kind tag for every differentiable operation; used in diagnostics and to
/// select an operation for fault injection in self-checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Conv2d,
    BroadcastSpatial,
    Concat,
    Sum,
    Mean,
    L2Norm,
    AvgPoolSpatial,
    Gather,
    Similarity,
    SoftmaxLoss,
    SoftTripletLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Conv2d,
        OpKind::BroadcastSpatial,
        OpKind::Concat,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::L2Norm,
        OpKind::AvgPoolSpatial,
        OpKind::Gather,
        OpKind::Similarity,
        OpKind::SoftmaxLoss,
        OpKind::SoftTripletLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Conv2d => "conv2d",
            OpKind::BroadcastSpatial => "broadcast_spatial",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Norm => "l2_norm",
            OpKind::AvgPoolSpatial => "avg_pool_spatial",
            OpKind::Gather => "gather",
            OpKind::Similarity => "similarity",
            OpKind::SoftmaxLoss => "softmax_loss",
            OpKind::SoftTripletLoss => "soft_triplet_loss",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown op `{s}`")))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    stride: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        9 * self.cin
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BroadcastSpatial(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    AvgPoolSpatial(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Similarity {
        a: Var,
        b: Var,
        kernel: Kernel,
    },
    SoftmaxLoss {
        scores: Var,
        sets: NegativeSets,
        probs: Vec<f64>,
    },
    SoftTripletLoss {
        scores: Var,
        pairs: Vec<(usize, usize)>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BroadcastSpatial(_) => OpKind::BroadcastSpatial,
            Op::Concat(..) => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::AvgPoolSpatial(_) => OpKind::AvgPoolSpatial,
            Op::Gather { .. } => OpKind::Gather,
            Op::Similarity { .. } => OpKind::Similarity,
            Op::SoftmaxLoss { .. } => OpKind::SoftmaxLoss,
            Op::SoftTripletLoss { .. } => OpKind::SoftTripletLoss,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the reverse of insertion order is a valid topological order for
/// backpropagation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    fault: Option<OpKind>,
    no_grad: bool,
}

fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || rhs.iter().product::<usize>() == 1 || lhs.ends_with(rhs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are plain constants: nothing is retained
    /// for a backward pass.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    /// Corrupts the backward rule of `kind`. Used by self-checks as a
    /// negative control for the gradient checker.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient (inputs under gradient check).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, !self.no_grad);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        let mut leaves: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        leaves.sort_by_key(|(p, _)| *p);
        leaves.into_iter()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let period = tb.numel();
        let bd = tb.data();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    /// Elementwise `a + b`. `b` may have the shape of a trailing suffix of
    /// `a`'s shape, or a single element, and is then repeated.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise `a - b` with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise `a ⊙ b` with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// 3×3 cross-correlation with zero padding 1.
    ///
    /// `input` is `[N, H, W, Cin]` (or `[H, W, Cin]` for a single map) and
    /// `kernel` is `[3, 3, Cin, Cout]`. Output extent is
    /// `(H - 1) / stride + 1`, so stride 1 preserves the spatial size.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let batched = si.len() == 4;
        let (n, h, w, cin) = match si.as_slice() {
            &[n, h, w, c] => (n, h, w, c),
            &[h, w, c] => (1, h, w, c),
            _ => return Err(Error::dim("conv2d", &si, &sk)),
        };
        if sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != cin || stride == 0 {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
            cout: sk[3],
            stride,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; geom.rows() * geom.cout];
        gemm(
            geom.rows(),
            geom.patch(),
            geom.cout,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            0.0,
            &mut out,
        );
        let shape = if batched {
            vec![n, geom.ho, geom.wo, geom.cout]
        } else {
            vec![geom.ho, geom.wo, geom.cout]
        };
        let rg = self.rg(input) || self.rg(kernel);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Repeats a `[N, d]` (or `[d]`) tensor at every position of an
    /// `h × w` grid, giving `[N, h, w, d]` (or `[h, w, d]`).
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::Argument(format!("broadcast target ({h}, {w}) must be positive")));
        }
        let t = self.value(a);
        let (n, d, shape) = match *t.shape() {
            [n, d] => (n, d, vec![n, h, w, d]),
            [d] => (1, d, vec![h, w, d]),
            _ => return Err(Error::dim("broadcast_spatial", t.shape(), &[h, w])),
        };
        let mut out = Vec::with_capacity(n * h * w * d);
        for row in t.data().chunks(d) {
            for _ in 0..h * w {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BroadcastSpatial(a), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.shape().len(), tb.shape().len());
        if ra != rb || ta.shape()[..ra - 1] != tb.shape()[..rb - 1] {
            return Err(Error::dim("concat", ta.shape(), tb.shape()));
        }
        let (da, db) = (ta.shape()[ra - 1], tb.shape()[rb - 1]);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for (x, y) in ta.data().chunks(da).zip(tb.data().chunks(db)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let mut shape = ta.shape().to_vec();
        shape[ra - 1] = da + db;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Euclidean norm of all elements, as a `[1]` tensor.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).l2_norm();
        let rg = self.rg(a);
        self.push(Tensor::scalar(n), Op::L2Norm(a), rg)
    }

    /// Mean over the two spatial axes: `[N, H, W, C] → [N, C]` or
    /// `[H, W, C] → [C]`.
    pub fn avg_pool_spatial(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, hw, c, shape) = match *t.shape() {
            [n, h, w, c] => (n, h * w, c, vec![n, c]),
            [h, w, c] => (1, h * w, c, vec![c]),
            _ => return Err(Error::dim("avg_pool_spatial", t.shape(), &[])),
        };
        let mut out = vec![0.0; n * c];
        for (b, chunk) in t.data().chunks(hw * c).enumerate() {
            let dst = &mut out[b * c..(b + 1) * c];
            for px in chunk.chunks(c) {
                for (o, v) in dst.iter_mut().zip(px) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o /= hw as f64;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPoolSpatial(a), rg))
    }

    /// Row lookup: `table[V, E]` indexed by `indices` gives `[len, E]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[v, e] = t.shape() else {
            return Err(Error::dim("gather", t.shape(), &[indices.len()]));
        };
        if indices.is_empty() {
            return Err(Error::Argument("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Argument(format!("gather index {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), e], out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Pairwise similarity matrix `S[i][j] = κ(a_i, b_j)` for `a: [B, D]`,
    /// `b: [P, D]`.
    pub fn similarity(&mut self, a: Var, b: Var, kernel: Kernel) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[rows, d], &[cols, d2]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim("similarity", ta.shape(), tb.shape()));
        };
        if d != d2 {
            return Err(Error::dim("similarity", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; rows * cols];
        match kernel {
            Kernel::Dot => gemm(rows, d, cols, ta.data(), false, tb.data(), true, 0.0, &mut out),
            Kernel::NegL2 => {
                for i in 0..rows {
                    for j in 0..cols {
                        out[i * cols + j] = -ta
                            .row(i)
                            .iter()
                            .zip(tb.row(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>();
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::Similarity { a, b, kernel },
            rg,
        ))
    }

    /// Softmax cross-entropy over negative sets:
    /// `mean over (i, m) of [logsumexp_{j ∈ N_i^m} S[i][j] − S[i][pos_i]]`.
    pub fn softmax_loss(&mut self, scores: Var, sets: &NegativeSets) -> Result<Var> {
        let s = self.value(scores);
        let &[rows, cols] = s.shape() else {
            return Err(Error::dim("softmax_loss", s.shape(), &[sets.batch_size()]));
        };
        if rows != sets.batch_size() || sets.num_sets() == 0 {
            return Err(Error::dim("softmax_loss", s.shape(), &[sets.batch_size()]));
        }
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (i, anchor_sets) in sets.iter().enumerate() {
            let row = s.row(i);
            for set in anchor_sets {
                if set.iter().any(|&j| j >= cols) {
                    return Err(Error::Argument(format!("negative set {set:?} exceeds {cols} columns")));
                }
                let max = set.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = set.iter().map(|&j| (row[j] - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                total += max + z.ln() - row[set[0]];
                probs.extend(exps.iter().map(|e| e / z));
            }
        }
        let loss = total / sets.num_sets() as f64;
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxLoss {
                scores,
                sets: sets.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `log(1 + exp(S[i][j] − S[i][i]))` over `(anchor i, negative j)`
    /// pairs.
    pub fn soft_triplet_loss(&mut self, scores: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let s = self.value(scores);
        let &[rows, cols] = s.shape() else {
            return Err(Error::dim("soft_triplet_loss", s.shape(), &[pairs.len()]));
        };
        if pairs.is_empty() {
            return Err(Error::Argument("soft triplet loss over an empty batch".into()));
        }
        if rows > cols {
            return Err(Error::dim("soft_triplet_loss", s.shape(), &[pairs.len()]));
        }
        let mut total = 0.0;
        for &(i, j) in pairs {
            if i >= rows || j >= cols {
                return Err(Error::Argument(format!("pair ({i}, {j}) out of range")));
            }
            total += softplus(s.row(i)[j] - s.row(i)[i]);
        }
        let loss = total / pairs.len() as f64;
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftTripletLoss {
                scores,
                pairs: pairs.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a one-element `target`. Gradients of every
    /// node are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar target, got shape {:?}",
                self.shape(target)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(Tensor::full(self.shape(target), 1.0));
        for idx in (0..=target.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.node_backward(node, &g);
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                for (_, t) in contributions.iter_mut() {
                    for v in t.data_mut() {
                        *v = 1.5 * *v + 0.1;
                    }
                }
            }
            grads[idx] = Some(g);
            for (var, contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, 0.0, &mut da);
                    out.push((*a, Tensor::from_parts(ta.shape().to_vec(), da)));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut db);
                    out.push((*b, Tensor::from_parts(tb.shape().to_vec(), db)));
                }
                out
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let tb = self.value(*b);
                let period = tb.numel();
                let mut db = vec![0.0; period];
                for (i, v) in gd.iter().enumerate() {
                    db[i % period] += sign * v;
                }
                vec![
                    (*a, g.clone()),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
                ]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let period = tb.numel();
                let (ad, bd) = (ta.data(), tb.data());
                let da = gd.iter().enumerate().map(|(i, v)| v * bd[i % period]).collect();
                let mut db = vec![0.0; period];
                for (i, v) in gd.iter().enumerate() {
                    db[i % period] += v * ad[i];
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
                ]
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect();
                vec![(*a, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(v, s)| v * s * (1.0 - s)).collect();
                vec![(*a, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(v, t)| v * (1.0 - t * t)).collect();
                vec![(*a, Tensor::from_parts(g.shape().to_vec(), d))]
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let mut out = Vec::new();
                let tk = self.value(*kernel);
                if self.rg(*kernel) {
                    let mut dk = vec![0.0; geom.patch() * geom.cout];
                    gemm(geom.patch(), geom.rows(), geom.cout, cols, true, gd, false, 0.0, &mut dk);
                    out.push((*kernel, Tensor::from_parts(tk.shape().to_vec(), dk)));
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; geom.rows() * geom.patch()];
                    gemm(geom.rows(), geom.cout, geom.patch(), gd, false, tk.data(), true, 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    out.push((*input, Tensor::from_parts(self.shape(*input).to_vec(), dx)));
                }
                out
            }
            Op::BroadcastSpatial(a) => {
                let ta = self.value(*a);
                let d = *ta.shape().last().expect("rank >= 1");
                let n = ta.numel() / d;
                let per = gd.len() / n;
                let mut da = vec![0.0; ta.numel()];
                for (b, chunk) in gd.chunks(per).enumerate() {
                    let dst = &mut da[b * d..(b + 1) * d];
                    for px in chunk.chunks(d) {
                        for (o, v) in dst.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                }
                vec![(*a, Tensor::from_parts(ta.shape().to_vec(), da))]
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da_w = *ta.shape().last().expect("rank >= 1");
                let db_w = *tb.shape().last().expect("rank >= 1");
                let mut da = Vec::with_capacity(ta.numel());
                let mut db = Vec::with_capacity(tb.numel());
                for row in gd.chunks(da_w + db_w) {
                    da.extend_from_slice(&row[..da_w]);
                    db.extend_from_slice(&row[da_w..]);
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
                ]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), gd[0]))],
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                vec![(*a, Tensor::full(self.shape(*a), gd[0] / n))]
            }
            Op::L2Norm(a) => {
                let ta = self.value(*a);
                let norm = node.value.data()[0];
                let d = if norm > 0.0 {
                    ta.data().iter().map(|x| gd[0] * x / norm).collect()
                } else {
                    vec![0.0; ta.numel()]
                };
                vec![(*a, Tensor::from_parts(ta.shape().to_vec(), d))]
            }
            Op::AvgPoolSpatial(a) => {
                let ta = self.value(*a);
                let c = *ta.shape().last().expect("rank >= 1");
                let n = g.numel() / c;
                let hw = ta.numel() / (n * c);
                let mut da = Vec::with_capacity(ta.numel());
                for b in 0..n {
                    let src = &gd[b * c..(b + 1) * c];
                    for _ in 0..hw {
                        da.extend(src.iter().map(|v| v / hw as f64));
                    }
                }
                vec![(*a, Tensor::from_parts(ta.shape().to_vec(), da))]
            }
            Op::Gather { table, indices } => {
                let tt = self.value(*table);
                let e = tt.shape()[1];
                let mut dt = vec![0.0; tt.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in dt[i * e..(i + 1) * e].iter_mut().zip(&gd[r * e..(r + 1) * e]) {
                        *o += v;
                    }
                }
                vec![(*table, Tensor::from_parts(tt.shape().to_vec(), dt))]
            }
            Op::Similarity { a, b, kernel } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, d, cols) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                let mut da = vec![0.0; rows * d];
                let mut db = vec![0.0; cols * d];
                // Both kernels share the cross terms dS·B and dSᵀ·A.
                gemm(rows, cols, d, gd, false, tb.data(), false, 0.0, &mut da);
                gemm(cols, rows, d, gd, true, ta.data(), false, 0.0, &mut db);
                if *kernel == Kernel::NegL2 {
                    // S_ij = −|a_i − b_j|²: dA_i = 2(Σ_j dS_ij b_j − a_i Σ_j dS_ij),
                    // dB_j = 2(Σ_i dS_ij a_i − b_j Σ_i dS_ij).
                    for i in 0..rows {
                        let rs: f64 = gd[i * cols..(i + 1) * cols].iter().sum();
                        for (o, x) in da[i * d..(i + 1) * d].iter_mut().zip(ta.row(i)) {
                            *o = 2.0 * (*o - x * rs);
                        }
                    }
                    for j in 0..cols {
                        let cs: f64 = (0..rows).map(|i| gd[i * cols + j]).sum();
                        for (o, y) in db[j * d..(j + 1) * d].iter_mut().zip(tb.row(j)) {
                            *o = 2.0 * (*o - y * cs);
                        }
                    }
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), db)),
                ]
            }
            Op::SoftmaxLoss { scores, sets, probs } => {
                let ts = self.value(*scores);
                let cols = ts.shape()[1];
                let scale = gd[0] / sets.num_sets() as f64;
                let mut ds = vec![0.0; ts.numel()];
                let mut p = probs.iter();
                for (i, anchor_sets) in sets.iter().enumerate() {
                    for set in anchor_sets {
                        for &j in set {
                            ds[i * cols + j] += scale * p.next().expect("one prob per member");
                        }
                        ds[i * cols + set[0]] -= scale;
                    }
                }
                vec![(*scores, Tensor::from_parts(ts.shape().to_vec(), ds))]
            }
            Op::SoftTripletLoss { scores, pairs } => {
                let ts = self.value(*scores);
                let cols = ts.shape()[1];
                let scale = gd[0] / pairs.len() as f64;
                let mut ds = vec![0.0; ts.numel()];
                for &(i, j) in pairs {
                    let w = scale * sigmoid(ts.row(i)[j] - ts.row(i)[i]);
                    ds[i * cols + j] += w;
                    ds[i * cols + i] -= w;
                }
                vec![(*scores, Tensor::from_parts(ts.shape().to_vec(), ds))]
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * 3 + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * 3 + kx) * g.cin;
                        for (o, v) in x[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}
