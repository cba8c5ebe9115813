//! Wengert tape: reverse-mode AD via eager operation recording.
//!
//! Every primitive computes its value at insertion time and appends a node,
//! so inputs always reference strictly earlier ids and the backward sweep is
//! a single reverse pass in insertion order. The `Op` enum is the closed
//! primitive set: each variant has its adjoint registered in
//! [`Tape::backward_all`], and nothing else may appear on a tape.
//!
//! Gradient accumulation is sequential in reverse insertion order, which
//! makes forward and backward bit-reproducible for identical tapes.

use std::sync::Arc;

use crate::autodiff::array::{
    conv1d_backward, conv1d_forward, conv_transpose1d_backward, conv_transpose1d_forward,
    conv_transpose1d_out_len, gemm_nn, gemm_nt, gemm_tn, NDArray,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// The closed primitive op set. Input ids always point at earlier nodes.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input or constant; `Tape::leaf` decides whether it wants gradients.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Elementwise max; on ties the full adjoint goes to the FIRST operand.
    Max(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    /// 2-D matrix product.
    MatMul(NodeId, NodeId),
    Conv1d { x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize },
    ConvTranspose1d { x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize },
    Sum(NodeId),
    Mean(NodeId),
    /// Reduce a 2-D array along `axis` (0 or 1).
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    /// Shape change only; the node's value carries the new shape.
    Reshape(NodeId),
    /// 2-D transpose.
    Transpose(NodeId),
    /// 1-D reflect padding (edge sample not repeated).
    PadReflect { x: NodeId, left: usize, right: usize },
    /// 1-D signal -> [n_frames, frame_len] strided windows; reads past the
    /// end of the signal are zeros.
    Frame { x: NodeId, frame_len: usize, hop: usize, n_frames: usize },
    /// [frames, frame_len] -> 1-D by summing windows at hop offsets.
    OverlapAdd { frames: NodeId, hop: usize },
    /// 1-D slice [start, start+len).
    Slice { x: NodeId, start: usize, len: usize },
    /// Row gather from a 2-D table; indices are fixed at insertion.
    Gather { table: NodeId, indices: Arc<[usize]> },
    /// Identity forward, zero adjoint.
    StopGradient(NodeId),
}

struct Node {
    op: Op,
    value: NDArray,
    needs_grad: bool,
}

/// Reverse-mode AD tape over [`NDArray`] values.
///
/// Single-threaded by design; concurrent computations each own a private
/// tape and may share immutable inputs.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NDArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: NDArray, needs_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(at) = value.first_non_finite() {
            return Err(Error::numerical(
                Some(id),
                format!("non-finite value at element {at} produced by {:?}", op_name(&op)),
            ));
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(id))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: NDArray) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        NodeId(id)
    }

    /// Non-differentiable input (weights of frozen models, DFT bases, targets).
    pub fn constant(&mut self, value: NDArray) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: false });
        NodeId(id)
    }

    // ── elementwise binary ────────────────────────────────────────────

    fn binary_values(&self, a: NodeId, b: NodeId, opname: &str) -> Result<(&NDArray, &NDArray)> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.shape() != vb.shape() {
            return Err(Error::contract(format!(
                "{opname}: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Ok((va, vb))
    }

    fn ew2(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = self.binary_values(a, b, name)?;
        let data: Vec<f64> = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let v = NDArray::new(va.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(op, v, ng)
    }

    fn ew1(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let v = NDArray::new(va.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(op, v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "max", Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Neg(a), |x| -x)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.ew1(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.ew1(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.ew1(a, Op::MulScalar(a, c), |x| x * c)
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, va.data(), vb.data(), &mut c);
        let v = NDArray::new(vec![m, n], c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[bias.0].value;
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(Error::contract(format!("conv1d: x {sx:?} incompatible with w {sw:?}")));
        }
        if vb.shape() != [sw[0]] {
            return Err(Error::contract(format!("conv1d: bias {:?} != [{}]", vb.shape(), sw[0])));
        }
        if stride == 0 {
            return Err(Error::contract("conv1d: stride must be positive".to_string()));
        }
        let (cin, l, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
        let y = conv1d_forward(vx.data(), cin, l, vw.data(), cout, k, vb.data(), stride, pad)?;
        let l_out = y.len() / cout;
        let v = NDArray::new(vec![cout, l_out], y);
        let ng = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(Op::Conv1d { x, w, bias, stride, pad }, v, ng)
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[bias.0].value;
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0] {
            return Err(Error::contract(format!(
                "conv_transpose1d: x {sx:?} incompatible with w {sw:?}"
            )));
        }
        if vb.shape() != [sw[1]] {
            return Err(Error::contract(format!(
                "conv_transpose1d: bias {:?} != [{}]",
                vb.shape(),
                sw[1]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv_transpose1d: stride must be positive".to_string()));
        }
        let (cin, l, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
        let y = conv_transpose1d_forward(vx.data(), cin, l, vw.data(), cout, k, vb.data(), stride, pad)?;
        let l_out = y.len() / cout;
        let v = NDArray::new(vec![cout, l_out], y);
        let ng = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(Op::ConvTranspose1d { x, w, bias, stride, pad }, v, ng)
    }

    // ── reductions and shape ops ──────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), NDArray::scalar(s), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::contract("mean of empty array".to_string()));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), NDArray::scalar(s), ng)
    }

    fn axis_reduce(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s = v.shape();
        if s.len() != 2 || axis > 1 {
            return Err(Error::contract(format!(
                "axis reduction needs a 2-D input (got {s:?}, axis {axis})"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = v.data();
        let (out_len, denom) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        if denom == 0 {
            return Err(Error::contract("axis reduction over empty axis".to_string()));
        }
        let mut out = vec![0.0; out_len];
        if axis == 0 {
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += data[r * cols + c];
                }
            }
        } else {
            for r in 0..rows {
                out[r] = data[r * cols..(r + 1) * cols].iter().sum();
            }
        }
        if mean {
            for o in &mut out {
                *o /= denom as f64;
            }
        }
        let ng = self.needs(a);
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        self.push(op, NDArray::new(vec![out_len], out), ng)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(a, axis, true)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        let ng = self.needs(a);
        self.push(Op::Reshape(a), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose needs a 2-D input (got {s:?})")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = v.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = data[r * cols + c];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose(a), NDArray::new(vec![cols, rows], out), ng)
    }

    // ── structural 1-D ops ────────────────────────────────────────────

    pub fn pad_reflect(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 1 {
            return Err(Error::contract("pad_reflect needs a 1-D input".to_string()));
        }
        let l = v.len();
        if left >= l || right >= l {
            return Err(Error::contract(format!(
                "pad_reflect: padding ({left}, {right}) must be shorter than signal ({l})"
            )));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(left + l + right);
        for i in 0..left {
            out.push(d[left - i]);
        }
        out.extend_from_slice(d);
        for i in 0..right {
            out.push(d[l - 2 - i]);
        }
        let ng = self.needs(x);
        self.push(Op::PadReflect { x, left, right }, NDArray::new(vec![left + l + right], out), ng)
    }

    pub fn frame(&mut self, x: NodeId, frame_len: usize, hop: usize, n_frames: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 1 {
            return Err(Error::contract("frame needs a 1-D input".to_string()));
        }
        let l = v.len();
        if hop == 0 || frame_len == 0 || n_frames == 0 {
            return Err(Error::contract("frame: frame_len, hop, n_frames must be positive".to_string()));
        }
        if (n_frames - 1) * hop >= l {
            return Err(Error::contract(format!(
                "frame: {n_frames} frames at hop {hop} start past signal of length {l}"
            )));
        }
        let d = v.data();
        let mut out = vec![0.0; n_frames * frame_len];
        for t in 0..n_frames {
            let start = t * hop;
            let take = frame_len.min(l - start);
            out[t * frame_len..t * frame_len + take].copy_from_slice(&d[start..start + take]);
        }
        let ng = self.needs(x);
        self.push(
            Op::Frame { x, frame_len, hop, n_frames },
            NDArray::new(vec![n_frames, frame_len], out),
            ng,
        )
    }

    pub fn overlap_add(&mut self, frames: NodeId, hop: usize) -> Result<NodeId> {
        let v = &self.nodes[frames.0].value;
        let s = v.shape();
        if s.len() != 2 || hop == 0 {
            return Err(Error::contract("overlap_add needs a 2-D [frames, len] input".to_string()));
        }
        let (t, n) = (s[0], s[1]);
        let out_len = (t - 1) * hop + n;
        let d = v.data();
        let mut out = vec![0.0; out_len];
        for f in 0..t {
            let row = &d[f * n..(f + 1) * n];
            let dst = &mut out[f * hop..f * hop + n];
            for (o, r) in dst.iter_mut().zip(row.iter()) {
                *o += *r;
            }
        }
        let ng = self.needs(frames);
        self.push(Op::OverlapAdd { frames, hop }, NDArray::new(vec![out_len], out), ng)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 1 || start + len > v.len() {
            return Err(Error::contract(format!(
                "slice [{start}, {start}+{len}) out of bounds for length {}",
                v.len()
            )));
        }
        let out = v.data()[start..start + len].to_vec();
        let ng = self.needs(x);
        self.push(Op::Slice { x, start, len }, NDArray::new(vec![len], out), ng)
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[table.0].value;
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::contract("gather needs a 2-D table".to_string()));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather index {bad} out of range {rows}")));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(table);
        self.push(
            Op::Gather { table, indices: indices.to_vec().into() },
            NDArray::new(vec![indices.len(), cols], out),
            ng,
        )
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient(a), v, false)
    }

    // ── evaluation ────────────────────────────────────────────────────

    /// Value at `root`. All intermediates are already cached (eager tape);
    /// non-finite values were rejected at insertion.
    pub fn forward(&self, root: NodeId) -> Result<NDArray> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract(format!("node {} not on tape", root.0)));
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Full reverse sweep from a scalar `root`; returns per-node gradients.
    pub fn backward_all(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract(format!("node {} not on tape", root.0)));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for readout
            }
        }
        Ok(Gradients { grads, tape_len: self.nodes.len() })
    }

    /// ∂root/∂wrt. Nodes not on any path to root get exactly-zero gradients.
    pub fn backward(&self, root: NodeId, wrt: NodeId) -> Result<NDArray> {
        let grads = self.backward_all(root)?;
        Ok(grads.wrt(self, wrt))
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();

        // Adds `contribution` into the gradient slot of `dst`.
        macro_rules! acc {
            ($dst:expr, $contribution:expr) => {{
                let dst: NodeId = $dst;
                if self.nodes[dst.0].needs_grad {
                    let contribution: Vec<f64> = $contribution;
                    match &mut grads[dst.0] {
                        Some(buf) => {
                            for (b, c) in buf.iter_mut().zip(contribution.iter()) {
                                *b += *c;
                            }
                        }
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, g.to_vec());
                acc!(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc!(*a, g.to_vec());
                acc!(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect());
                acc!(*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, g.iter().zip(vb).map(|(&gi, &y)| gi / y).collect());
                acc!(
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect()
                );
            }
            Op::Neg(a) => acc!(*a, g.iter().map(|x| -x).collect()),
            Op::Abs(a) => {
                let va = val(*a);
                // subgradient 0 at x == 0
                acc!(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(&gi, &x)| gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect()
                );
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc!(*a, g.iter().zip(y).map(|(&gi, &yi)| gi / (2.0 * yi)).collect());
            }
            Op::Log(a) => {
                let va = val(*a);
                acc!(*a, g.iter().zip(va).map(|(&gi, &x)| gi / x).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc!(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc!(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc!(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc!(*a, g.iter().zip(va).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect());
            }
            Op::Max(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                // ties route the full adjoint to the first operand
                acc!(
                    *a,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&gi, (&x, &y))| if x >= y { gi } else { 0.0 })
                        .collect()
                );
                acc!(
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&gi, (&x, &y))| if y > x { gi } else { 0.0 })
                        .collect()
                );
            }
            Op::AddScalar(a, _) => acc!(*a, g.to_vec()),
            Op::MulScalar(a, c) => acc!(*a, g.iter().map(|x| x * c).collect()),
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, val(*b), &mut da);
                    acc!(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, val(*a), g, &mut db);
                    acc!(*b, db);
                }
            }
            Op::Conv1d { x, w, bias, stride, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (cin, l, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dw = self.nodes[w.0].needs_grad || self.nodes[bias.0].needs_grad;
                let out = conv1d_backward(
                    val(*x), cin, l, val(*w), cout, k, *stride, *pad, g, need_dx, need_dw,
                );
                if let Some(dx) = out.dx {
                    acc!(*x, dx);
                }
                if let Some(dw) = out.dw {
                    acc!(*w, dw);
                }
                if let Some(db) = out.db {
                    acc!(*bias, db);
                }
            }
            Op::ConvTranspose1d { x, w, bias, stride, pad } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (cin, l, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
                let l_out = conv_transpose1d_out_len(l, k, *stride, *pad)?;
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dw = self.nodes[w.0].needs_grad || self.nodes[bias.0].needs_grad;
                let out = conv_transpose1d_backward(
                    val(*x), cin, l, val(*w), cout, k, *stride, *pad, g, l_out, need_dx, need_dw,
                );
                if let Some(dx) = out.dx {
                    acc!(*x, dx);
                }
                if let Some(dw) = out.dw {
                    acc!(*w, dw);
                }
                if let Some(db) = out.db {
                    acc!(*bias, db);
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                acc!(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                acc!(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let s = self.nodes[a.0].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let denom = if matches!(node.op, Op::MeanAxis(..)) {
                    (if *axis == 0 { rows } else { cols }) as f64
                } else {
                    1.0
                };
                let mut da = vec![0.0; rows * cols];
                if *axis == 0 {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = g[c] / denom;
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = g[r] / denom;
                        }
                    }
                }
                acc!(*a, da);
            }
            Op::Reshape(a) => acc!(*a, g.to_vec()),
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let mut da = vec![0.0; rows * cols];
                for c in 0..cols {
                    for r in 0..rows {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                acc!(*a, da);
            }
            Op::PadReflect { x, left, right } => {
                let l = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; l];
                for (i, di) in dx.iter_mut().enumerate() {
                    *di = g[left + i];
                }
                for i in 0..*left {
                    dx[left - i] += g[i];
                }
                for i in 0..*right {
                    dx[l - 2 - i] += g[left + l + i];
                }
                acc!(*x, dx);
            }
            Op::Frame { x, frame_len, hop, n_frames } => {
                let l = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; l];
                for t in 0..*n_frames {
                    let start = t * hop;
                    let take = (*frame_len).min(l - start);
                    let row = &g[t * frame_len..t * frame_len + take];
                    let dst = &mut dx[start..start + take];
                    for (d, r) in dst.iter_mut().zip(row.iter()) {
                        *d += *r;
                    }
                }
                acc!(*x, dx);
            }
            Op::OverlapAdd { frames, hop } => {
                let s = self.nodes[frames.0].value.shape();
                let (t, n) = (s[0], s[1]);
                let mut df = vec![0.0; t * n];
                for f in 0..t {
                    let dst = &mut df[f * n..(f + 1) * n];
                    let src = &g[f * hop..f * hop + n];
                    dst.copy_from_slice(src);
                }
                acc!(*frames, df);
            }
            Op::Slice { x, start, len } => {
                let l = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; l];
                dx[*start..start + len].copy_from_slice(g);
                acc!(*x, dx);
            }
            Op::Gather { table, indices } => {
                let s = self.nodes[table.0].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let mut dt = vec![0.0; rows * cols];
                for (r, &idx) in indices.iter().enumerate() {
                    let src = &g[r * cols..(r + 1) * cols];
                    let dst = &mut dt[idx * cols..(idx + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += *s;
                    }
                }
                acc!(*table, dt);
            }
            Op::StopGradient(_) => {}
        }
        Ok(())
    }
}

/// Per-node gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    tape_len: usize,
}

impl Gradients {
    /// Gradient at `wrt`, zeros when `wrt` is not an ancestor of the root.
    pub fn wrt(&self, tape: &Tape, wrt: NodeId) -> NDArray {
        assert!(wrt.0 < self.tape_len, "node {} not on tape", wrt.0);
        let shape = tape.shape(wrt).to_vec();
        match &self.grads[wrt.0] {
            Some(g) => NDArray::new(shape, g.clone()),
            None => NDArray::zeros(shape),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Abs(..) => "abs",
        Op::Sqrt(..) => "sqrt",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Max(..) => "max",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MatMul(..) => "matmul",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvTranspose1d { .. } => "conv_transpose1d",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::PadReflect { .. } => "pad_reflect",
        Op::Frame { .. } => "frame",
        Op::OverlapAdd { .. } => "overlap_add",
        Op::Slice { .. } => "slice",
        Op::Gather { .. } => "gather",
        Op::StopGradient(..) => "stop_gradient",
    }
}
