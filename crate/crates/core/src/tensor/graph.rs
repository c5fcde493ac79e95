//! Reverse-mode tape. Nodes are appended in execution order, so walking the
//! tape backwards is a valid topological order for the backward pass.

use super::kernels::{self, BatchNormCache, ConvGeometry, SamplePos};
use super::{invalid, shape_err, BatchNormParams, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Statistics observed by a training-mode batch-norm, used to update the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeometry },
    Relu(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BatchNormCache<T> },
    BatchNormInfer { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Upsample(NodeId),
    Sample { map: NodeId, pos: Vec<SamplePos<T>> },
    Correlate { desc: NodeId, map: NodeId },
    Add(NodeId, NodeId),
    Sum(NodeId),
    Scale(NodeId, T),
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Concat(Vec<NodeId>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 3] {
        self.nodes[id.0].value.shape()
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros([0, 0, 0]))
    }

    /// Gradient of the last `backward` root with respect to `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        geom.validate()?;
        let xs = self.shape(x);
        let (oh, ow) = geom.output_hw(xs)?;
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.len() != geom.weight_len() || bv.len() != geom.out_ch {
            return Err(shape_err(
                "conv2d",
                format!("weight {:?} / bias {:?} do not fit {:?}", wv.shape(), bv.shape(), geom),
            ));
        }
        let mut out = vec![T::zero(); geom.out_ch * oh * ow];
        kernels::conv2d_forward(&geom, xs, self.value(x).data(), wv.data(), bv.data(), &mut out);
        let t = Tensor::from_vec([geom.out_ch, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = super::relu(self.value(x));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (shape, out, argmax) = kernels::maxpool2_forward(self.shape(x), self.value(x).data());
        let t = Tensor::from_vec(shape, out).expect("pool shape");
        self.push(t, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        params: &BatchNormParams<T>,
        mode: BatchNormMode,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let shape = self.shape(x);
        let [c, h, w] = shape;
        if h * w == 0 {
            return Err(invalid("batchnorm", "zero spatial extent"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c || params.channels() != c {
            return Err(shape_err(
                "batchnorm",
                format!("input has {} channels, parameters {}", c, params.channels()),
            ));
        }
        let mut out = vec![T::zero(); c * h * w];
        match mode {
            BatchNormMode::Train => {
                let cache = kernels::batchnorm_train_forward(
                    shape,
                    self.value(x).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    params.eps,
                    &mut out,
                );
                let n = h * w;
                let correction = if n > 1 {
                    T::from_usize(n) / T::from_usize(n - 1)
                } else {
                    T::one()
                };
                let stats = BatchStats {
                    mean: cache.mean.clone(),
                    unbiased_var: cache.var.iter().map(|&v| v * correction).collect(),
                };
                let t = Tensor::from_vec(shape, out)?;
                let id = self.push(t, Op::BatchNormTrain { x, gamma, beta, cache }, &[x, gamma, beta]);
                Ok((id, Some(stats)))
            }
            BatchNormMode::Infer => {
                let n = h * w;
                let inv_std: Vec<T> = params
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + params.eps).sqrt())
                    .collect();
                let mut xhat = vec![T::zero(); c * n];
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let bv = self.value(beta).data();
                for ci in 0..c {
                    for i in ci * n..(ci + 1) * n {
                        xhat[i] = (xv[i] - params.running_mean[ci]) * inv_std[ci];
                        out[i] = gv[ci] * xhat[i] + bv[ci];
                    }
                }
                let t = Tensor::from_vec(shape, out)?;
                let id = self.push(t, Op::BatchNormInfer { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
                Ok((id, None))
            }
        }
    }

    pub fn upsample(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let t = super::bilinear_upsample(self.value(x), th, tw)?;
        Ok(self.push(t, Op::Upsample(x), &[x]))
    }

    /// Bilinearly samples `map` at fractional `(x, y)` map coordinates
    /// (clamped to the border). The result has shape `(points, channels, 1)`.
    pub fn sample_points(&mut self, map: NodeId, points: &[(T, T)]) -> NodeId {
        let [c, h, w] = self.shape(map);
        let pos: Vec<_> = points.iter().map(|&(x, y)| kernels::sample_pos(h, w, x, y)).collect();
        let mut out = vec![T::zero(); points.len() * c];
        kernels::sample_forward([c, h, w], self.value(map).data(), &pos, &mut out);
        let t = Tensor::from_vec([points.len(), c, 1], out).expect("sample shape");
        self.push(t, Op::Sample { map, pos }, &[map])
    }

    /// 1x1 correlation of `k` descriptors `(k, c, 1)` against a `(c, h, w)`
    /// map, giving `(k, h, w)`.
    pub fn correlate(&mut self, desc: NodeId, map: NodeId) -> Result<NodeId> {
        let ds = self.shape(desc);
        let [c, h, w] = self.shape(map);
        if ds[1] * ds[2] != c {
            return Err(shape_err(
                "correlate_1x1",
                format!("descriptors {:?} vs map with {} channels", ds, c),
            ));
        }
        let k = ds[0];
        let mut out = vec![T::zero(); k * h * w];
        kernels::correlate_forward(k, c, h * w, self.value(desc).data(), self.value(map).data(), &mut out);
        let t = Tensor::from_vec([k, h, w], out)?;
        Ok(self.push(t, Op::Correlate { desc, map }, &[desc, map]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::full([1, 1, 1], s), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let t = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.push(t, Op::Scale(x, factor), &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = super::softmax2d(self.value(x));
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Mean over channels of `-log softmax(logits[k])[target_k]`, where the
    /// softmax runs over each channel's spatial plane and targets are `(x, y)`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let [k, h, w] = self.shape(logits);
        if targets.len() != k || k == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} maps", targets.len(), k),
            ));
        }
        let mut flat = Vec::with_capacity(k);
        for &(x, y) in targets {
            if x >= w || y >= h {
                return Err(invalid(
                    "cross_entropy",
                    format!("target ({}, {}) outside {}x{} map", x, y, w, h),
                ));
            }
            flat.push(y * w + x);
        }
        let hw = h * w;
        let mut loss = T::zero();
        for (plane, &t) in self.value(logits).data().chunks(hw).zip(&flat) {
            loss += kernels::log_sum_exp(plane) - plane[t];
        }
        loss = loss / T::from_usize(k);
        Ok(self.push(
            Tensor::full([1, 1, 1], loss),
            Op::CrossEntropy { logits, targets: flat },
            &[logits],
        ))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1] != first[1] || s[2] != first[2] {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", s, first)));
            }
            c += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec([c, first[1], first[2]], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Runs reverse-mode differentiation from a single-element `root`.
    /// Gradients of every node that depends on a `requires_grad` leaf are
    /// stored on the node's tensor; previous gradients are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(invalid(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.zero_grad();
            if let Some(g) = g {
                *node.value.grad_mut_or_zero() = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        let buf = |grads: &mut [Option<Vec<T>>], id: NodeId| -> Option<Vec<T>> {
            if !nodes[id.0].needs_grad {
                return None;
            }
            Some(grads[id.0].take().unwrap_or_else(|| vec![T::zero(); nodes[id.0].value.len()]))
        };
        macro_rules! put {
            ($id:expr, $v:expr) => {
                if let Some(v) = $v {
                    grads[$id.0] = Some(v);
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (mut dx, mut dw, mut db) = (buf(grads, *x), buf(grads, *w), buf(grads, *b));
                kernels::conv2d_backward(
                    geom,
                    nodes[x.0].value.shape(),
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    kernels::ConvGrads {
                        input: dx.as_deref_mut(),
                        weight: dw.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                put!(x, dx);
                put!(w, dw);
                put!(b, db);
            }
            Op::Relu(x) => {
                if let Some(mut dx) = buf(grads, *x) {
                    for ((d, &gi), &xv) in dx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        if xv > T::zero() {
                            *d += gi;
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(mut dx) = buf(grads, *x) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (mut dx, mut dg, mut db) = (buf(grads, *x), buf(grads, *gamma), buf(grads, *beta));
                kernels::batchnorm_train_backward(
                    nodes[x.0].value.shape(),
                    cache,
                    nodes[gamma.0].value.data(),
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put!(x, dx);
                put!(gamma, dg);
                put!(beta, db);
            }
            Op::BatchNormInfer { x, gamma, beta, xhat, inv_std } => {
                let [c, h, w] = nodes[x.0].value.shape();
                let n = h * w;
                let gv = nodes[gamma.0].value.data();
                let (mut dx, mut dg, mut db) = (buf(grads, *x), buf(grads, *gamma), buf(grads, *beta));
                for ci in 0..c {
                    let range = ci * n..(ci + 1) * n;
                    if let Some(dx) = dx.as_mut() {
                        let k = gv[ci] * inv_std[ci];
                        for j in range.clone() {
                            dx[j] += k * g[j];
                        }
                    }
                    if let Some(dg) = dg.as_mut() {
                        let mut s = T::zero();
                        for j in range.clone() {
                            s += g[j] * xhat[j];
                        }
                        dg[ci] += s;
                    }
                    if let Some(db) = db.as_mut() {
                        let mut s = T::zero();
                        for j in range {
                            s += g[j];
                        }
                        db[ci] += s;
                    }
                }
                put!(x, dx);
                put!(gamma, dg);
                put!(beta, db);
            }
            Op::Upsample(x) => {
                if let Some(mut dx) = buf(grads, *x) {
                    let [_, th, tw] = nodes[i].value.shape();
                    kernels::upsample_backward(nodes[x.0].value.shape(), th, tw, g, &mut dx);
                    grads[x.0] = Some(dx);
                }
            }
            Op::Sample { map, pos } => {
                if let Some(mut dm) = buf(grads, *map) {
                    kernels::sample_backward(nodes[map.0].value.shape(), pos, g, &mut dm);
                    grads[map.0] = Some(dm);
                }
            }
            Op::Correlate { desc, map } => {
                let [c, h, w] = nodes[map.0].value.shape();
                let k = nodes[desc.0].value.shape()[0];
                let (mut dd, mut dm) = (buf(grads, *desc), buf(grads, *map));
                kernels::correlate_backward(
                    k,
                    c,
                    h * w,
                    nodes[desc.0].value.data(),
                    nodes[map.0].value.data(),
                    g,
                    dd.as_deref_mut(),
                    dm.as_deref_mut(),
                );
                put!(desc, dd);
                put!(map, dm);
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(mut d) = buf(grads, *id) {
                        for (di, &gi) in d.iter_mut().zip(g) {
                            *di += gi;
                        }
                        grads[id.0] = Some(d);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(mut dx) = buf(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Scale(x, f) => {
                if let Some(mut dx) = buf(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += *f * gi;
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::Softmax(x) => {
                if let Some(mut dx) = buf(grads, *x) {
                    kernels::softmax_backward(nodes[x.0].value.shape(), nodes[i].value.data(), g, &mut dx);
                    grads[x.0] = Some(dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if let Some(mut dx) = buf(grads, *logits) {
                    let shape = nodes[logits.0].value.shape();
                    let hw = shape[1] * shape[2];
                    let scale = g[0] / T::from_usize(targets.len());
                    let mut probs = vec![T::zero(); hw];
                    for (k, (plane, &t)) in nodes[logits.0].value.data().chunks(hw).zip(targets).enumerate() {
                        kernels::softmax_forward([1, shape[1], shape[2]], plane, &mut probs);
                        probs[t] -= T::one();
                        for (d, &p) in dx[k * hw..(k + 1) * hw].iter_mut().zip(&probs) {
                            *d += scale * p;
                        }
                    }
                    grads[logits.0] = Some(dx);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for id in parts {
                    let n = nodes[id.0].value.len();
                    if wants(*id) {
                        let mut d = buf(grads, *id).expect("wants grad");
                        for (di, &gi) in d.iter_mut().zip(&g[offset..offset + n]) {
                            *di += gi;
                        }
                        grads[id.0] = Some(d);
                    }
                    offset += n;
                }
            }
        }
    }
}
