//! Recorded-tape reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs for the backward pass. Nodes can only reference nodes that
//! already exist, so the tape is topologically ordered by construction and a
//! single reverse sweep visits each node once.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::{dim_err, Tensor, TensorError};

/// Norms at or below this are rejected by [`Tape::l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a model parameter tensor across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernels: NodeId },
    Relu(NodeId),
    MaxPool { input: NodeId, argmax: Vec<usize> },
    AddBias { input: NodeId, bias: NodeId },
    AddChannelBias { input: NodeId, bias: NodeId },
    Mean(NodeId),
    Sum(NodeId),
    L2Normalize { input: NodeId, norm: f64 },
    L2Norm(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Select { input: NodeId, index: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradient of a scalar with respect to every parameter bound on a tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    /// `self += scale * other`; entries missing on one side are treated as zero.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<(), TensorError> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(existing) => {
                    if existing.shape() != g.shape() {
                        return Err(dim_err(
                            "gradient accumulation",
                            format!("{:?} vs {:?} for {id:?}", existing.shape(), g.shape()),
                        ));
                    }
                    existing.add_scaled(g, scale);
                }
                None => {
                    let mut fresh = Tensor::zeros(g.shape());
                    fresh.add_scaled(g, scale);
                    self.grads.insert(*id, fresh);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.nodes.get(id.0).and_then(|n| n.value.item())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<&Node, TensorError> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| TensorError::Contract(format!("node {} is not on this tape", id.0)))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Binds a parameter. Binding the same id twice returns the first node,
    /// so several forward passes on one tape share parameter leaves. Untracked
    /// parameters still appear in [`Tape::backward`]'s output, with zero
    /// gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(Op::Param, value.clone(), trainable);
        self.params.push((id, node));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(dim_err(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bpj) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::from_op("matmul", vec![m, n], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Valid-padding, stride-1 cross-correlation of a `c×h×w` input with
    /// `o×c×kh×kw` kernels.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId) -> Result<NodeId, TensorError> {
        let (iv, kv) = (&self.check(input)?.value, &self.check(kernels)?.value);
        let (c, h, w) = match iv.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err("conv2d", format!("input must be c×h×w, got {s:?}"))),
        };
        let (o, kc, kh, kw) = match kv.shape() {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(dim_err("conv2d", format!("kernels must be 4-D, got {s:?}"))),
        };
        if kc != c {
            return Err(dim_err(
                "conv2d",
                format!("input has {c} channels, kernels expect {kc}"),
            ));
        }
        if h < kh || w < kw {
            return Err(dim_err(
                "conv2d",
                format!("input {h}×{w} is smaller than kernel {kh}×{kw}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (id, kd) = (iv.data(), kv.data());
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                let src = &id[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kd[((oc * c + ic) * kh + ky) * kw + kx];
                        for y in 0..oh {
                            let srow = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            for (dst, s) in plane[y * ow..(y + 1) * ow].iter_mut().zip(srow) {
                                *dst += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_op("conv2d", vec![o, oh, ow], out)?;
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernels.0].requires_grad;
        Ok(self.push(Op::Conv2d { input, kernels }, value, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), data);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Relu(x), value, rg))
    }

    /// Non-overlapping 2×2 max over the two trailing axes of a `c×h×w` tensor.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let (c, h, w) = match xv.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err("maxpool2x2", format!("expected c×h×w, got {s:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err(
                "maxpool2x2",
                format!("spatial dims must be even, got {h}×{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![c, oh, ow], out);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MaxPool { input: x, argmax }, value, rg))
    }

    /// Adds a bias broadcast over the trailing axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xv, bv) = (&self.check(x)?.value, &self.check(bias)?.value);
        let n = *xv.shape().last().expect("tensors have at least one axis");
        if bv.shape() != [n] {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} does not match trailing axis of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::from_op("add_bias", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(Op::AddBias { input: x, bias }, value, rg))
    }

    /// Adds a per-channel bias broadcast over everything after the leading axis.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xv, bv) = (&self.check(x)?.value, &self.check(bias)?.value);
        let c = xv.shape()[0];
        if bv.shape() != [c] {
            return Err(dim_err(
                "add_channel_bias",
                format!("bias {:?} does not match leading axis of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let plane = xv.len() / c;
        let data = xv
            .data()
            .chunks(plane)
            .zip(bv.data())
            .flat_map(|(p, b)| p.iter().map(move |v| v + b))
            .collect();
        let value = Tensor::from_op("add_channel_bias", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(Op::AddChannelBias { input: x, bias }, value, rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let value = Tensor::from_op("mean", vec![1], vec![m])?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Mean(x), value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let s = xv.data().iter().sum::<f64>();
        let value = Tensor::from_op("sum", vec![1], vec![s])?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Sum(x), value, rg))
    }

    /// `v / ‖v‖₂`; fails when the norm is at or below [`NORMALIZE_EPS`].
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let norm = xv.l2_norm();
        if norm.is_nan() || norm <= NORMALIZE_EPS {
            return Err(TensorError::Degenerate {
                norm,
                eta: NORMALIZE_EPS,
            });
        }
        let data = xv.data().iter().map(|v| v / norm).collect();
        let value = Tensor::from_op("l2_normalize", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::L2Normalize { input: x, norm }, value, rg))
    }

    /// `‖v‖₂` as a scalar. The subgradient at the origin is zero.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let value = Tensor::from_op("l2_norm", vec![1], vec![xv.l2_norm()])?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::L2Norm(x), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.check(x)?.value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        if av.shape() != bv.shape() {
            return Err(dim_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_op(op_name, av.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_op("scale", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Scale(x, factor), value, rg))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let data = xv.data().iter().map(|v| v + c).collect();
        let value = Tensor::from_op("add_scalar", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::AddScalar(x), value, rg))
    }

    /// Softmax over all elements, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let data = softmax_values(xv.data());
        let value = Tensor::from_op("softmax", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Softmax(x), value, rg))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let d = xv.data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let data = d.iter().map(|v| v - lse).collect();
        let value = Tensor::from_op("log_softmax", xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::LogSoftmax(x), value, rg))
    }

    /// Picks one flat element as a scalar.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let xv = &self.check(x)?.value;
        let v = *xv.data().get(index).ok_or_else(|| {
            dim_err("select", format!("index {index} out of range for {:?}", xv.shape()))
        })?;
        let value = Tensor::from_parts_unchecked(vec![1], vec![v]);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Select { input: x, index }, value, rg))
    }

    /// Reverse sweep from a scalar node. Returns one gradient per bound
    /// parameter, zero where the parameter does not influence `seed` or was
    /// bound as untracked.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients, TensorError> {
        let seed_node = self.check(seed)?;
        if !seed_node.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                seed_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Tensor::from_parts_unchecked(
            seed_node.value.shape().to_vec(),
            vec![1.0],
        ));

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        for &(pid, node) in &self.params {
            let shape = self.nodes[node.0].value.shape();
            let g = match grads.get(node.0) {
                Some(Some(g)) if self.nodes[node.0].requires_grad => g.clone(),
                _ => Tensor::zeros(shape),
            };
            out.insert(pid, g);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| gd[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * gd[i * n + j];
                            }
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Conv2d { input, kernels } => {
                let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernels.0].value);
                let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let (o, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let (id, kd) = (iv.data(), kv.data());
                if wants(*kernels) {
                    let mut dk = vec![0.0; kv.len()];
                    for oc in 0..o {
                        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let src = &id[ic * h * w..(ic + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut acc = 0.0;
                                    for y in 0..oh {
                                        let srow = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                        let grow = &gplane[y * ow..(y + 1) * ow];
                                        acc += srow.iter().zip(grow).map(|(s, g)| s * g).sum::<f64>();
                                    }
                                    dk[((oc * c + ic) * kh + ky) * kw + kx] = acc;
                                }
                            }
                        }
                    }
                    accumulate(grads, *kernels, kv.shape(), dk);
                }
                if wants(*input) {
                    let mut di = vec![0.0; iv.len()];
                    for oc in 0..o {
                        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let dst = &mut di[ic * h * w..(ic + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wgt = kd[((oc * c + ic) * kh + ky) * kw + kx];
                                    for y in 0..oh {
                                        let drow = &mut dst[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                        for (d, g) in drow.iter_mut().zip(&gplane[y * ow..(y + 1) * ow]) {
                                            *d += wgt * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, iv.shape(), di);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::MaxPool { input, argmax } => {
                let xv = &self.nodes[input.0].value;
                let mut d = vec![0.0; xv.len()];
                for (src, g) in argmax.iter().zip(gd) {
                    d[*src] += g;
                }
                accumulate(grads, *input, xv.shape(), d);
            }
            Op::AddBias { input, bias } => {
                let n = self.nodes[bias.0].value.len();
                if wants(*input) {
                    accumulate(grads, *input, g.shape(), gd.to_vec());
                }
                if wants(*bias) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, &[n], db);
                }
            }
            Op::AddChannelBias { input, bias } => {
                let c = self.nodes[bias.0].value.len();
                if wants(*input) {
                    accumulate(grads, *input, g.shape(), gd.to_vec());
                }
                if wants(*bias) {
                    let db = gd.chunks(gd.len() / c).map(|p| p.iter().sum()).collect();
                    accumulate(grads, *bias, &[c], db);
                }
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                let v = gd[0] / xv.len() as f64;
                accumulate(grads, *x, xv.shape(), vec![v; xv.len()]);
            }
            Op::Sum(x) => {
                let xv = &self.nodes[x.0].value;
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.len()]);
            }
            Op::L2Normalize { input, norm } => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(gd).map(|(a, b)| a * b).sum();
                let d = y.iter().zip(gd).map(|(yi, gi)| (gi - yi * dot) / norm).collect();
                accumulate(grads, *input, node.value.shape(), d);
            }
            Op::L2Norm(x) => {
                let xv = &self.nodes[x.0].value;
                let norm = node.value.data()[0];
                let d = if norm > 0.0 {
                    xv.data().iter().map(|v| gd[0] * v / norm).collect()
                } else {
                    vec![0.0; xv.len()]
                };
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape();
                accumulate(grads, *x, shape, gd.to_vec());
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if wants(*id) {
                        accumulate(grads, *id, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, g.shape(), d);
                }
                if wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, g.shape(), d);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|v| v * factor).collect());
            }
            Op::AddScalar(x) => {
                accumulate(grads, *x, g.shape(), gd.to_vec());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(gd).map(|(a, b)| a * b).sum();
                let d = y.iter().zip(gd).map(|(yi, gi)| yi * (gi - dot)).collect();
                accumulate(grads, *x, g.shape(), d);
            }
            Op::LogSoftmax(x) => {
                let p = softmax_values(self.nodes[x.0].value.data());
                let total: f64 = gd.iter().sum();
                let d = gd.iter().zip(&p).map(|(gi, pi)| gi - pi * total).collect();
                accumulate(grads, *x, g.shape(), d);
            }
            Op::Select { input, index } => {
                let xv = &self.nodes[input.0].value;
                let mut d = vec![0.0; xv.len()];
                d[*index] = gd[0];
                accumulate(grads, *input, xv.shape(), d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts_unchecked(shape.to_vec(), delta)),
    }
}

pub(crate) fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
