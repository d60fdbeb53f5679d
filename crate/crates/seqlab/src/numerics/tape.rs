//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Nodes are appended in execution order, so a reverse walk of the arena
//! visits them in reverse topological order exactly once. Gradients
//! accumulate additively across uses of a tensor; calling `backward` a
//! second time without `reset_grads` is an error.

use rand::Rng;

use super::kernels as k;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Whether stochastic regularization (dropout) is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    /// a [m,k] times b[n,k] transposed -> [m,n]
    MatmulNt(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    /// batched a [B,m,k] times b[B,n,k] transposed -> [B,m,n]
    BmmNt(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// broadcast add of a row vector over the last axis
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Permute3(TensorId, [usize; 3]),
    Reshape(TensorId),
    Gelu(TensorId),
    Softmax(TensorId, usize),
    LogSoftmax(TensorId, usize),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// (mean, reciprocal std) per lane, saved by the forward pass
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<u32>,
    },
    /// out[r] = x[r, idx[r]]
    SelectPerRow {
        x: TensorId,
        idx: Vec<usize>,
    },
    MeanAll(TensorId),
    StackScalars(Vec<TensorId>),
    Dropout {
        x: TensorId,
        /// entries are 0.0 (dropped) or 1/(1-p) (kept)
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Arena recording every primitive operation for reverse-mode replay.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    backward_done: bool,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode, backward_done: false }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn var(&mut self, t: Tensor) -> TensorId {
        self.push(t.requires_grad(true), Op::Leaf)
    }

    /// Registers a non-differentiable leaf (an input or mask).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t.requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Accumulated gradient of a differentiable node.
    pub fn grad(&self, id: TensorId) -> Result<&[f64]> {
        self.nodes[id.0].value.grad.as_deref().ok_or_else(|| {
            Error::Contract("gradient requested for a node that does not require it".into())
        })
    }

    fn push(&mut self, mut t: Tensor, op: Op) -> TensorId {
        if t.requires_grad {
            t.grad = Some(vec![0.0; t.data.len()]);
        } else {
            t.grad = None;
        }
        self.nodes.push(Node { value: t, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> TensorId {
        let t = Tensor { shape, data, requires_grad: needs, grad: None };
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, kk, n) = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape(format!("matmul of {sa:?} by {sb:?}")));
            }
            (sa[0], sa[1], sb[1])
        };
        let data = k::mm_nn(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(vec![m, n], data, Op::Matmul(a, b), needs))
    }

    /// a [m,k] times the transpose of b [n,k], giving [m,n].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, kk, n) = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(Error::Shape(format!("matmul_nt of {sa:?} by {sb:?}")));
            }
            (sa[0], sa[1], sb[0])
        };
        let mut data = vec![0.0; m * n];
        k::mm_nt_acc(&mut data, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(vec![m, n], data, Op::MatmulNt(a, b), needs))
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (bs, m, kk, n) = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::Shape(format!("bmm of {sa:?} by {sb:?}")));
            }
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            k::mm_nn_acc(
                &mut data[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].value.data[i * m * kk..(i + 1) * m * kk],
                &self.nodes[b.0].value.data[i * kk * n..(i + 1) * kk * n],
                m,
                kk,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(vec![bs, m, n], data, Op::Bmm(a, b), needs))
    }

    /// Batched a [B,m,k] times transposed b [B,n,k], giving [B,m,n].
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (bs, m, kk, n) = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
                return Err(Error::Shape(format!("bmm_nt of {sa:?} by {sb:?}")));
            }
            (sa[0], sa[1], sa[2], sb[1])
        };
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            k::mm_nt_acc(
                &mut data[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].value.data[i * m * kk..(i + 1) * m * kk],
                &self.nodes[b.0].value.data[i * n * kk..(i + 1) * n * kk],
                m,
                kk,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(vec![bs, m, n], data, Op::BmmNt(a, b), needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa != sb {
                return Err(Error::Shape(format!("add of {sa:?} and {sb:?}")));
            }
            sa.clone()
        };
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(shape, data, Op::Add(a, b), needs))
    }

    /// Adds row vector `b` to every row of `a` (broadcast over the last axis).
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, n) = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa.is_empty() || sb.len() != 1 || *sa.last().unwrap() != sb[0] {
                return Err(Error::Shape(format!("add_row of {sa:?} and {sb:?}")));
            }
            (sa.clone(), sb[0])
        };
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<f64> =
            self.nodes[a.0].value.data.iter().enumerate().map(|(i, x)| x + bv[i % n]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(shape, data, Op::AddRow(a, b), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = {
            let sa = &self.nodes[a.0].value.shape;
            let sb = &self.nodes[b.0].value.shape;
            if sa != sb {
                return Err(Error::Shape(format!("mul of {sa:?} and {sb:?}")));
            }
            sa.clone()
        };
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.result(shape, data, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].value.shape.clone();
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.result(shape, data, Op::Scale(a, c), needs)
    }

    pub fn permute3(&mut self, a: TensorId, perm: [usize; 3]) -> Result<TensorId> {
        let s = {
            let sa = &self.nodes[a.0].value.shape;
            if sa.len() != 3 {
                return Err(Error::Shape(format!("permute3 of {sa:?}")));
            }
            let mut check = perm;
            check.sort_unstable();
            if check != [0, 1, 2] {
                return Err(Error::Validation(format!("permute3 with perm {perm:?}")));
            }
            [sa[0], sa[1], sa[2]]
        };
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let mut data = vec![0.0; s[0] * s[1] * s[2]];
        let src = &self.nodes[a.0].value.data;
        for j0 in 0..s[0] {
            for j1 in 0..s[1] {
                for j2 in 0..s[2] {
                    let j = [j0, j1, j2];
                    let dst = (j[perm[0]] * out_shape[1] + j[perm[1]]) * out_shape[2] + j[perm[2]];
                    data[dst] = src[(j0 * s[1] + j1) * s[2] + j2];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.result(out_shape.to_vec(), data, Op::Permute3(a, perm), needs))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::Shape(format!(
                "reshape of {:?} to {shape:?}",
                self.nodes[a.0].value.shape
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        let needs = self.needs(a);
        Ok(self.result(shape.to_vec(), data, Op::Reshape(a), needs))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].value.shape.clone();
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|&x| k::gelu(x)).collect();
        let needs = self.needs(a);
        self.result(shape, data, Op::Gelu(a), needs)
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.lane_normalize(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.lane_normalize(a, axis, true)
    }

    fn lane_normalize(&mut self, a: TensorId, axis: usize, log: bool) -> Result<TensorId> {
        let name = if log { "log_softmax" } else { "softmax" };
        let shape = {
            let sa = &self.nodes[a.0].value.shape;
            if axis >= sa.len() {
                return Err(Error::Shape(format!("{name} axis {axis} of {sa:?}")));
            }
            sa.clone()
        };
        if let Some(bad) = self.nodes[a.0].value.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} of non-finite input {bad}")));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        if log {
            k::for_each_lane(&mut data, &shape, axis, k::log_softmax_lane);
        } else {
            k::for_each_lane(&mut data, &shape, axis, k::softmax_lane);
        }
        let needs = self.needs(a);
        let op = if log { Op::LogSoftmax(a, axis) } else { Op::Softmax(a, axis) };
        Ok(self.result(shape, data, op, needs))
    }

    /// Layer normalization over the last axis with learned affine terms.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (shape, d) = {
            let sx = &self.nodes[x.0].value.shape;
            let sg = &self.nodes[gamma.0].value.shape;
            let sb = &self.nodes[beta.0].value.shape;
            let d = *sx
                .last()
                .ok_or_else(|| Error::Shape("layer_norm of zero-dimensional tensor".into()))?;
            if sg.len() != 1 || sb.len() != 1 || sg[0] != d || sb[0] != d {
                return Err(Error::Shape(format!(
                    "layer_norm of {sx:?} with affine {sg:?}/{sb:?}"
                )));
            }
            (sx.clone(), d)
        };
        let lanes = self.nodes[x.0].value.numel() / d;
        let mut data = self.nodes[x.0].value.data.clone();
        let mut stats = Vec::with_capacity(lanes);
        for l in 0..lanes {
            stats.push(k::layer_norm_lane(&mut data[l * d..(l + 1) * d], eps));
        }
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        for l in 0..lanes {
            for i in 0..d {
                data[l * d + i] = data[l * d + i] * gv[i] + bv[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.result(shape, data, Op::LayerNorm { x, gamma, beta, stats }, needs))
    }

    /// Gathers rows of an embedding table: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (v, d) = {
            let st = &self.nodes[table.0].value.shape;
            if st.len() != 2 {
                return Err(Error::Shape(format!("embedding table of {st:?}")));
            }
            (st[0], st[1])
        };
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut data = vec![0.0; ids.len() * d];
        let tv = &self.nodes[table.0].value.data;
        for (i, &t) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&tv[t as usize * d..(t as usize + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.result(vec![ids.len(), d], data, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// out[r] = x[r, idx[r]] for a 2-D input.
    pub fn select_per_row(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = {
            let sx = &self.nodes[x.0].value.shape;
            if sx.len() != 2 {
                return Err(Error::Shape(format!("select_per_row of {sx:?}")));
            }
            (sx[0], sx[1])
        };
        if idx.len() != r {
            return Err(Error::Shape(format!(
                "select_per_row with {} indices over {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Validation(format!(
                "column index {bad} out of range for width {c}"
            )));
        }
        let xv = &self.nodes[x.0].value.data;
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        let needs = self.needs(x);
        Ok(self.result(vec![r], data, Op::SelectPerRow { x, idx: idx.to_vec() }, needs))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::Shape("mean_all of empty tensor".into()));
        }
        let m = self.nodes[a.0].value.data.iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        Ok(self.result(vec![1], vec![m], Op::MeanAll(a), needs))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Shape("stack_scalars of no inputs".into()));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = &self.nodes[x.0].value;
            if t.numel() != 1 {
                return Err(Error::Shape(format!("stack_scalars input with shape {:?}", t.shape)));
            }
            data.push(t.data[0]);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.result(vec![xs.len()], data, Op::StackScalars(xs.to_vec()), needs))
    }

    /// Inverted dropout. Active only in train mode; in eval mode the input
    /// id is returned unchanged and the RNG is not consumed.
    pub fn dropout(&mut self, a: TensorId, p: f64, rng: &mut impl Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Validation(format!("dropout probability {p}")));
        }
        if self.mode == Mode::Eval {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let data: Vec<f64> =
            self.nodes[a.0].value.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let needs = self.needs(a);
        Ok(self.result(shape, data, Op::Dropout { x: a, mask }, needs))
    }

    /// Zeroes every gradient buffer and re-arms `backward`.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.value.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.backward_done = false;
    }

    /// Reverse pass from a scalar root. Populates `grad` of every
    /// differentiable node the root depends on.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "second backward without reset_grads would double-count gradients".into(),
            ));
        }
        {
            let node = &mut self.nodes[root.0];
            if node.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be scalar, got shape {:?}",
                    node.value.shape
                )));
            }
            match &mut node.value.grad {
                Some(g) => g[0] = 1.0,
                None => {
                    return Err(Error::Contract("backward root does not require gradients".into()))
                }
            }
        }
        self.backward_done = true;
        for i in (0..=root.0).rev() {
            if self.nodes[i].value.grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let dc = node.value.grad.as_deref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, kk) = {
                        let sa = &before[a.0].value.shape;
                        (sa[0], sa[1])
                    };
                    let n = node.value.shape[1];
                    if before[a.0].value.grad.is_some() {
                        let mut da = vec![0.0; m * kk];
                        k::mm_nt_acc(&mut da, dc, &before[b.0].value.data, m, n, kk);
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                    if before[b.0].value.grad.is_some() {
                        let mut db = vec![0.0; kk * n];
                        k::mm_tn_acc(&mut db, &before[a.0].value.data, dc, m, kk, n);
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::MatmulNt(a, b) => {
                    let (m, kk) = {
                        let sa = &before[a.0].value.shape;
                        (sa[0], sa[1])
                    };
                    let n = node.value.shape[1];
                    if before[a.0].value.grad.is_some() {
                        let da = k::mm_nn(dc, &before[b.0].value.data, m, n, kk);
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                    if before[b.0].value.grad.is_some() {
                        let mut db = vec![0.0; n * kk];
                        k::mm_tn_acc(&mut db, dc, &before[a.0].value.data, m, n, kk);
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::Bmm(a, b) => {
                    let (bs, m, kk) = {
                        let sa = &before[a.0].value.shape;
                        (sa[0], sa[1], sa[2])
                    };
                    let n = node.value.shape[2];
                    if before[a.0].value.grad.is_some() {
                        let mut da = vec![0.0; bs * m * kk];
                        for i in 0..bs {
                            k::mm_nt_acc(
                                &mut da[i * m * kk..(i + 1) * m * kk],
                                &dc[i * m * n..(i + 1) * m * n],
                                &before[b.0].value.data[i * kk * n..(i + 1) * kk * n],
                                m,
                                n,
                                kk,
                            );
                        }
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                    if before[b.0].value.grad.is_some() {
                        let mut db = vec![0.0; bs * kk * n];
                        for i in 0..bs {
                            k::mm_tn_acc(
                                &mut db[i * kk * n..(i + 1) * kk * n],
                                &before[a.0].value.data[i * m * kk..(i + 1) * m * kk],
                                &dc[i * m * n..(i + 1) * m * n],
                                m,
                                kk,
                                n,
                            );
                        }
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::BmmNt(a, b) => {
                    let (bs, m, kk) = {
                        let sa = &before[a.0].value.shape;
                        (sa[0], sa[1], sa[2])
                    };
                    let n = node.value.shape[2];
                    if before[a.0].value.grad.is_some() {
                        let mut da = vec![0.0; bs * m * kk];
                        for i in 0..bs {
                            k::mm_nn_acc(
                                &mut da[i * m * kk..(i + 1) * m * kk],
                                &dc[i * m * n..(i + 1) * m * n],
                                &before[b.0].value.data[i * n * kk..(i + 1) * n * kk],
                                m,
                                n,
                                kk,
                            );
                        }
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                    if before[b.0].value.grad.is_some() {
                        let mut db = vec![0.0; bs * n * kk];
                        for i in 0..bs {
                            k::mm_tn_acc(
                                &mut db[i * n * kk..(i + 1) * n * kk],
                                &dc[i * m * n..(i + 1) * m * n],
                                &before[a.0].value.data[i * m * kk..(i + 1) * m * kk],
                                m,
                                n,
                                kk,
                            );
                        }
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::Add(a, b) => {
                    if before[a.0].value.grad.is_some() {
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), dc);
                    }
                    if before[b.0].value.grad.is_some() {
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), dc);
                    }
                }
                Op::AddRow(a, b) => {
                    let n = before[b.0].value.numel();
                    if before[a.0].value.grad.is_some() {
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), dc);
                    }
                    if before[b.0].value.grad.is_some() {
                        let mut db = vec![0.0; n];
                        for (i, &d) in dc.iter().enumerate() {
                            db[i % n] += d;
                        }
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::Mul(a, b) => {
                    if before[a.0].value.grad.is_some() {
                        let da: Vec<f64> =
                            dc.iter().zip(&before[b.0].value.data).map(|(d, v)| d * v).collect();
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                    if before[b.0].value.grad.is_some() {
                        let db: Vec<f64> =
                            dc.iter().zip(&before[a.0].value.data).map(|(d, v)| d * v).collect();
                        add_into(before[b.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::Scale(a, c) => {
                    if before[a.0].value.grad.is_some() {
                        let da: Vec<f64> = dc.iter().map(|d| d * c).collect();
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
                Op::Permute3(a, perm) => {
                    if before[a.0].value.grad.is_some() {
                        let s = {
                            let sa = &before[a.0].value.shape;
                            [sa[0], sa[1], sa[2]]
                        };
                        let os = &node.value.shape;
                        let mut da = vec![0.0; s[0] * s[1] * s[2]];
                        for j0 in 0..s[0] {
                            for j1 in 0..s[1] {
                                for j2 in 0..s[2] {
                                    let j = [j0, j1, j2];
                                    let dst =
                                        (j[perm[0]] * os[1] + j[perm[1]]) * os[2] + j[perm[2]];
                                    da[(j0 * s[1] + j1) * s[2] + j2] = dc[dst];
                                }
                            }
                        }
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
                Op::Reshape(a) => {
                    if before[a.0].value.grad.is_some() {
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), dc);
                    }
                }
                Op::Gelu(a) => {
                    if before[a.0].value.grad.is_some() {
                        let da: Vec<f64> = dc
                            .iter()
                            .zip(&before[a.0].value.data)
                            .map(|(d, &x)| d * k::gelu_grad(x))
                            .collect();
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
                Op::Softmax(a, axis) => {
                    if before[a.0].value.grad.is_some() {
                        let mut da = vec![0.0; node.value.numel()];
                        k::backprop_lanes(
                            &node.value.data,
                            dc,
                            &mut da,
                            &node.value.shape,
                            *axis,
                            |y, dy, dx| {
                                let s: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                                for i in 0..y.len() {
                                    dx[i] = y[i] * (dy[i] - s);
                                }
                            },
                        );
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
                Op::LogSoftmax(a, axis) => {
                    if before[a.0].value.grad.is_some() {
                        let mut da = vec![0.0; node.value.numel()];
                        k::backprop_lanes(
                            &node.value.data,
                            dc,
                            &mut da,
                            &node.value.shape,
                            *axis,
                            |y, dy, dx| {
                                let s: f64 = dy.iter().sum();
                                for i in 0..y.len() {
                                    dx[i] = dy[i] - y[i].exp() * s;
                                }
                            },
                        );
                        add_into(before[a.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let d = *node.value.shape.last().unwrap();
                    let lanes = node.value.numel() / d;
                    let xv = &before[x.0].value.data;
                    let gv = &before[gamma.0].value.data;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for l in 0..lanes {
                        let (mean, rstd) = stats[l];
                        let xs = &xv[l * d..(l + 1) * d];
                        let dys = &dc[l * d..(l + 1) * d];
                        let mut mg = 0.0;
                        let mut mgx = 0.0;
                        for i in 0..d {
                            let xh = (xs[i] - mean) * rstd;
                            let g = dys[i] * gv[i];
                            mg += g;
                            mgx += g * xh;
                            dg[i] += dys[i] * xh;
                            db[i] += dys[i];
                        }
                        mg /= d as f64;
                        mgx /= d as f64;
                        for i in 0..d {
                            let xh = (xs[i] - mean) * rstd;
                            dx[l * d + i] = rstd * (dys[i] * gv[i] - mg - xh * mgx);
                        }
                    }
                    if before[x.0].value.grad.is_some() {
                        add_into(before[x.0].value.grad.as_deref_mut().unwrap(), &dx);
                    }
                    if before[gamma.0].value.grad.is_some() {
                        add_into(before[gamma.0].value.grad.as_deref_mut().unwrap(), &dg);
                    }
                    if before[beta.0].value.grad.is_some() {
                        add_into(before[beta.0].value.grad.as_deref_mut().unwrap(), &db);
                    }
                }
                Op::Embedding { table, ids } => {
                    if before[table.0].value.grad.is_some() {
                        let d = node.value.shape[1];
                        let dt = before[table.0].value.grad.as_deref_mut().unwrap();
                        for (i, &t) in ids.iter().enumerate() {
                            add_into(
                                &mut dt[t as usize * d..(t as usize + 1) * d],
                                &dc[i * d..(i + 1) * d],
                            );
                        }
                    }
                }
                Op::SelectPerRow { x, idx } => {
                    if before[x.0].value.grad.is_some() {
                        let c = before[x.0].value.shape[1];
                        let dx = before[x.0].value.grad.as_deref_mut().unwrap();
                        for (r, &j) in idx.iter().enumerate() {
                            dx[r * c + j] += dc[r];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    if before[a.0].value.grad.is_some() {
                        let n = before[a.0].value.numel() as f64;
                        let d = dc[0] / n;
                        for g in before[a.0].value.grad.as_deref_mut().unwrap() {
                            *g += d;
                        }
                    }
                }
                Op::StackScalars(xs) => {
                    for (i, &x) in xs.iter().enumerate() {
                        if before[x.0].value.grad.is_some() {
                            before[x.0].value.grad.as_deref_mut().unwrap()[0] += dc[i];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if before[x.0].value.grad.is_some() {
                        let da: Vec<f64> = dc.iter().zip(mask).map(|(d, m)| d * m).collect();
                        add_into(before[x.0].value.grad.as_deref_mut().unwrap(), &da);
                    }
                }
            }
        }
        Ok(())
    }
}
