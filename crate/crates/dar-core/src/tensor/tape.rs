//! Define-by-run gradient tape.
//!
//! Every forward call appends a node holding the op, its input ids, and the
//! output buffer; the tape is rebuilt for each forward pass. `needs_grad`
//! propagates forward from trainable leaves (or nodes explicitly marked via
//! [`Tape::require_grad_at`]), and [`Tape::backward`] only differentiates
//! through nodes on a needed path, which is what makes frozen-backbone
//! retraining cheap.

use super::kernels;
use super::{dim_err, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize, spatial: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: F },
    Abs { x: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    MeanRows { x: usize },
    SliceBatch { x: usize, index: usize },
    Relu { x: usize },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    Gap { x: usize },
    SoftmaxRows { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, weights: Option<Vec<F>> },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

/// Reverse-mode tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Register a leaf tensor. Rejects shape/data length mismatches and
    /// non-finite entries.
    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err("leaf", format!("shape {:?} does not cover {} elements", shape, data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite("leaf tensor".into()));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never requires gradients (inputs, constants).
    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar(&self, id: NodeId) -> F {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Mark a node so backward computes its gradient even when no trainable
    /// leaf lies beneath it (GradCAM reads gradients at an interior node).
    pub fn require_grad_at(&mut self, id: NodeId) {
        self.nodes[id.0].needs_grad = true;
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, needs_grad: bool, op: Op<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise and shape ops ───────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, needs, Op::Add { a: a.0, b: b.0 }))
    }

    /// x[batch, channels, spatial...] + bias[channels], broadcasting the bias
    /// over the leading batch axis and any trailing spatial extent.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(dim_err("add_bias", format!("x {:?} bias {:?}", xs, bs)));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let bdat = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * spatial;
                let bv = bdat[c];
                for v in &mut data[off..off + spatial] {
                    *v += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(data, xs, needs, Op::AddBias { x: x.0, bias: bias.0, spatial }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, needs, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId, TensorError> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, shape, needs, Op::Scale { x: x.0, c }))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, shape, needs, Op::Abs { x: x.0 }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<F> = self.data(x).iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, shape, needs, Op::Relu { x: x.0 }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(dim_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, shape, needs, Op::Reshape { x: x.0 }))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_inner(a, b, false)
    }

    /// Matmul whose per-element reduction runs in ascending value order; used
    /// for the attention × value product so the aggregation is bitwise
    /// invariant under key/value row permutations.
    pub fn matmul_value_sorted(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_inner(a, b, true)
    }

    fn matmul_inner(&mut self, a: NodeId, b: NodeId, sorted: bool) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        if sorted {
            kernels::matmul_value_sorted(self.data(a), self.data(b), m, k, n, &mut data);
        } else {
            kernels::matmul(self.data(a), self.data(b), m, k, n, &mut data);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], needs, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("transpose", format!("{:?}", s)));
        }
        let mut data = vec![F::zero(); s[0] * s[1]];
        kernels::transpose(self.data(x), s[0], s[1], &mut data);
        let needs = self.needs(x);
        Ok(self.push(data, vec![s[1], s[0]], needs, Op::Transpose { x: x.0 }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "no parts".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err("concat_cols", format!("{:?}", s)));
            }
            cols += s[1];
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut off = 0usize;
        for &p in parts {
            let pc = self.shape(p)[1];
            for r in 0..rows {
                let src = &self.nodes[p.0].data[r * pc..(r + 1) * pc];
                data[r * cols + off..r * cols + off + pc].copy_from_slice(src);
            }
            off += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![rows, cols], needs, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(dim_err("concat_rows", "no parts".into()));
        }
        let cols = self.shape(parts[0])[1];
        let mut rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err("concat_rows", format!("{:?}", s)));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![rows, cols], needs, Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Mean over the row axis: [rows, cols] -> [cols].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("mean_rows", format!("{:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let inv = F::one() / F::from_f64(rows as f64);
        let xd = self.data(x);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += xd[r * cols + c];
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let needs = self.needs(x);
        Ok(self.push(data, vec![cols], needs, Op::MeanRows { x: x.0 }))
    }

    /// Select one example from a batched tensor: [batch, rest...] -> [rest...].
    pub fn slice_batch(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || index >= s[0] {
            return Err(dim_err("slice_batch", format!("index {} of {:?}", index, s)));
        }
        let rest: usize = s[1..].iter().product();
        let data = self.nodes[x.0].data[index * rest..(index + 1) * rest].to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, s[1..].to_vec(), needs, Op::SliceBatch { x: x.0, index }))
    }

    // ── Convolution stack ───────────────────────────────────────────

    /// Cross-correlation: x[b,cin,h,w] * k[cout,cin,kh,kw] -> [b,cout,oh,ow].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] {
            return Err(dim_err("conv2d", format!("x {:?} k {:?}", xs, ks)));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = kernels::conv_extent(h, kh, stride, pad)
            .ok_or_else(|| dim_err("conv2d", format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad)))?;
        let ow = kernels::conv_extent(w, kw, stride, pad)
            .ok_or_else(|| dim_err("conv2d", format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad)))?;
        let mut data = vec![F::zero(); batch * cout * oh * ow];
        kernels::conv2d_forward(self.data(x), batch, cin, h, w, self.data(k), cout, kh, kw, stride, pad, &mut data, oh, ow);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(data, vec![batch, cout, oh, ow], needs, Op::Conv2d { x: x.0, k: k.0, stride, pad }))
    }

    pub fn maxpool2d(&mut self, x: NodeId, win: usize, stride: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("maxpool2d", format!("{:?}", s)));
        }
        if win == 0 || stride == 0 {
            return Err(TensorError::Config("maxpool2d window and stride must be >= 1".into()));
        }
        let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = kernels::conv_extent(h, win, stride, 0)
            .ok_or_else(|| dim_err("maxpool2d", format!("window {} exceeds input {}", win, h)))?;
        let ow = kernels::conv_extent(w, win, stride, 0)
            .ok_or_else(|| dim_err("maxpool2d", format!("window {} exceeds input {}", win, w)))?;
        let mut data = vec![F::zero(); batch * ch * oh * ow];
        let mut argmax = vec![0usize; batch * ch * oh * ow];
        kernels::maxpool2d_forward(self.data(x), batch * ch, h, w, win, stride, &mut data, &mut argmax, oh, ow);
        let needs = self.needs(x);
        Ok(self.push(data, vec![batch, ch, oh, ow], needs, Op::MaxPool { x: x.0, argmax }))
    }

    /// Per-channel spatial mean: [b,c,h,w] -> [b,c].
    pub fn gap(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("gap", format!("{:?}", s)));
        }
        let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = F::one() / F::from_f64(hw as f64);
        let xd = self.data(x);
        let mut data = vec![F::zero(); batch * ch];
        for i in 0..batch * ch {
            let mut acc = F::zero();
            for &v in &xd[i * hw..(i + 1) * hw] {
                acc += v;
            }
            data[i] = acc * inv;
        }
        let needs = self.needs(x);
        Ok(self.push(data, vec![batch, ch], needs, Op::Gap { x: x.0 }))
    }

    // ── Softmax and loss ────────────────────────────────────────────

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("softmax", format!("{:?}", s)));
        }
        let mut data = vec![F::zero(); s[0] * s[1]];
        kernels::softmax_rows(self.data(x), s[0], s[1], &mut data);
        let needs = self.needs(x);
        Ok(self.push(data, s, needs, Op::SoftmaxRows { x: x.0 }))
    }

    /// Mean over the batch of `w_i * (-log softmax(logits_i)[label_i])`,
    /// computed with max-subtracted log-sum-exp. `weights` defaults to ones.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], weights: Option<&[F]>) -> Result<NodeId, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err("cross_entropy", format!("logits {:?} labels {}", s, labels.len())));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(w) = weights {
            if w.len() != batch {
                return Err(dim_err("cross_entropy", format!("weights {} batch {}", w.len(), batch)));
            }
        }
        for &l in labels {
            if l >= classes {
                return Err(TensorError::LabelOutOfRange { label: l, classes });
            }
        }
        let xd = self.data(logits);
        let mut total = F::zero();
        for b in 0..batch {
            let row = &xd[b * classes..(b + 1) * classes];
            let mut mx = F::neg_infinity();
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut se = F::zero();
            for &v in row {
                se += (v - mx).exp();
            }
            let lse = mx + se.ln();
            let w = weights.map_or(F::one(), |ws| ws[b]);
            total += w * (lse - row[labels[b]]);
        }
        let loss = total / F::from_f64(batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), weights: weights.map(|w| w.to_vec()) },
        ))
    }

    /// Sum of all entries -> scalar [1].
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut acc = F::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![acc], vec![1], needs, Op::Sum { x: x.0 }))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn ensure_grad(&mut self, idx: usize) {
        if self.nodes[idx].grad.is_none() {
            let n = self.nodes[idx].data.len();
            self.nodes[idx].grad = Some(vec![F::zero(); n]);
        }
    }

    /// Distinct mutable references to two nodes (`a != b`).
    fn two_nodes_mut(&mut self, a: usize, b: usize) -> (&mut Node<F>, &mut Node<F>) {
        debug_assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.nodes.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.nodes.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    fn acc(&mut self, idx: usize, contrib: &[F]) {
        self.ensure_grad(idx);
        let g = self.nodes[idx].grad.as_mut().unwrap();
        for (o, &v) in g.iter_mut().zip(contrib) {
            *o += v;
        }
    }

    /// Populate gradients of every needed node reachable from the scalar
    /// `loss`. Errors on a non-scalar loss or a second invocation.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, g: &[F]) {
        // The op holds raw input indices; inputs always precede node i.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    self.acc(a, g);
                }
                if self.nodes[b].needs_grad {
                    self.acc(b, g);
                }
            }
            Op::AddBias { x, bias, spatial } => {
                let (x, bias, spatial) = (*x, *bias, *spatial);
                if self.nodes[x].needs_grad {
                    self.acc(x, g);
                }
                if self.nodes[bias].needs_grad {
                    let channels = self.nodes[bias].data.len();
                    let mut db = vec![F::zero(); channels];
                    let frames = g.len() / (channels * spatial);
                    for f in 0..frames {
                        for (c, dbv) in db.iter_mut().enumerate() {
                            let off = (f * channels + c) * spatial;
                            for &gv in &g[off..off + spatial] {
                                *dbv += gv;
                            }
                        }
                    }
                    self.acc(bias, &db);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da: Vec<F> = g.iter().zip(&self.nodes[b].data).map(|(&gv, &bv)| gv * bv).collect();
                    self.acc(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<F> = g.iter().zip(&self.nodes[a].data).map(|(&gv, &av)| gv * av).collect();
                    self.acc(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.nodes[x].needs_grad {
                    let dx: Vec<F> = g.iter().map(|&gv| gv * c).collect();
                    self.acc(x, &dx);
                }
            }
            Op::Abs { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&gv, &xv)| {
                            if xv > F::zero() {
                                gv
                            } else if xv < F::zero() {
                                -gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    self.acc(x, &dx);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    self.acc(x, &dx);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    self.ensure_grad(a);
                    if a != b {
                        let (na, nb) = self.two_nodes_mut(a, b);
                        kernels::matmul_acc_nt(g, &nb.data, m, k, n, na.grad.as_mut().unwrap());
                    } else {
                        let bd = self.nodes[b].data.clone();
                        kernels::matmul_acc_nt(g, &bd, m, k, n, self.nodes[a].grad.as_mut().unwrap());
                    }
                }
                if self.nodes[b].needs_grad {
                    self.ensure_grad(b);
                    if a != b {
                        let (na, nb) = self.two_nodes_mut(a, b);
                        kernels::matmul_acc_tn(&na.data, g, m, k, n, nb.grad.as_mut().unwrap());
                    } else {
                        let ad = self.nodes[a].data.clone();
                        kernels::matmul_acc_tn(&ad, g, m, k, n, self.nodes[b].grad.as_mut().unwrap());
                    }
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![F::zero(); rows * cols];
                    kernels::transpose(g, rows, cols, &mut dx);
                    self.acc(x, &dx);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    self.acc(x, g);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let cols = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut off = 0usize;
                for p in parts {
                    let pc = self.nodes[p].shape[1];
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![F::zero(); rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc].copy_from_slice(&g[r * cols + off..r * cols + off + pc]);
                        }
                        self.acc(p, &dp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0usize;
                for p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].needs_grad {
                        let dp = g[off..off + len].to_vec();
                        self.acc(p, &dp);
                    }
                    off += len;
                }
            }
            Op::MeanRows { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let (rows, cols) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let inv = F::one() / F::from_f64(rows as f64);
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] * inv;
                        }
                    }
                    self.acc(x, &dx);
                }
            }
            Op::SliceBatch { x, index } => {
                let (x, index) = (*x, *index);
                if self.nodes[x].needs_grad {
                    self.ensure_grad(x);
                    let len = g.len();
                    let gx = self.nodes[x].grad.as_mut().unwrap();
                    for (o, &gv) in gx[index * len..(index + 1) * len].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = self.nodes[x].shape.clone();
                let ks = self.nodes[k].shape.clone();
                let os = self.nodes[i].shape.clone();
                let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let (oh, ow) = (os[2], os[3]);
                if self.nodes[x].needs_grad {
                    self.ensure_grad(x);
                    let (nx, nk) = self.two_nodes_mut(x, k);
                    kernels::conv2d_backward_dx(g, batch, cin, h, w, &nk.data, cout, kh, kw, stride, pad, nx.grad.as_mut().unwrap(), oh, ow);
                }
                if self.nodes[k].needs_grad {
                    self.ensure_grad(k);
                    let (nx, nk) = self.two_nodes_mut(x, k);
                    kernels::conv2d_backward_dk(&nx.data, g, batch, cin, h, w, cout, kh, kw, stride, pad, nk.grad.as_mut().unwrap(), oh, ow);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let argmax = argmax.clone();
                    self.ensure_grad(x);
                    let gx = self.nodes[x].grad.as_mut().unwrap();
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        gx[src] += g[out_idx];
                    }
                }
            }
            Op::Gap { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let s = self.nodes[x].shape.clone();
                    let hw = s[2] * s[3];
                    let inv = F::one() / F::from_f64(hw as f64);
                    self.ensure_grad(x);
                    let gx = self.nodes[x].grad.as_mut().unwrap();
                    for (bc, &gv) in g.iter().enumerate() {
                        let gvi = gv * inv;
                        for o in &mut gx[bc * hw..(bc + 1) * hw] {
                            *o += gvi;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let out = &self.nodes[i].data;
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let srow = &out[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mut dot = F::zero();
                        for (&sv, &gv) in srow.iter().zip(grow) {
                            dot += sv * gv;
                        }
                        for c in 0..cols {
                            dx[r * cols + c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    self.acc(x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels, weights } => {
                let logits = *logits;
                if self.nodes[logits].needs_grad {
                    let labels = labels.clone();
                    let weights = weights.clone();
                    let (batch, classes) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                    let xd = &self.nodes[logits].data;
                    let g0 = g[0] / F::from_f64(batch as f64);
                    let mut dx = vec![F::zero(); batch * classes];
                    for b in 0..batch {
                        let row = &xd[b * classes..(b + 1) * classes];
                        let mut mx = F::neg_infinity();
                        for &v in row {
                            if v > mx {
                                mx = v;
                            }
                        }
                        let mut se = F::zero();
                        for &v in row {
                            se += (v - mx).exp();
                        }
                        let w = weights.as_ref().map_or(F::one(), |ws| ws[b]);
                        for c in 0..classes {
                            let p = (row[c] - mx).exp() / se;
                            let t = if c == labels[b] { F::one() } else { F::zero() };
                            dx[b * classes + c] = g0 * w * (p - t);
                        }
                    }
                    self.acc(logits, &dx);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.nodes[x].needs_grad {
                    let g0 = g[0];
                    let dx = vec![g0; self.nodes[x].data.len()];
                    self.acc(x, &dx);
                }
            }
        }
    }
}
