use std::sync::Arc;

use super::{AdError, Tensor};
use crate::scalar::Scalar;

pub type NodeId = usize;

enum Op<T> {
    Leaf,
    /// [m, k] x [k, n] -> [m, n]
    MatMul(NodeId, NodeId),
    /// [m, k] x [k] -> [m]
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise `mul * x + add`; the shift has zero gradient but stays
    /// recorded so the node describes the full op.
    Affine {
        x: NodeId,
        mul: T,
        #[allow(dead_code)]
        add: T,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// x [Ci,D,H,W], w [Co,Ci,kd,kh,kw], bias [Co], stride 1.
    Conv3d { x: NodeId, w: NodeId, b: NodeId, pad: [usize; 3] },
    /// x [Ci,L], w [Co,Ci,k], bias [Co], stride 1.
    Conv1d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    /// Transposed 1D convolution: x [Ci,L], w [Ci,Co,k], bias [Co].
    ConvT1d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    /// 1-D concatenation.
    Concat(Vec<NodeId>),
    /// 1-D slice [start, start+len).
    Slice { x: NodeId, start: usize },
    /// Same payload, new shape.
    Reshape(NodeId),
    /// Mean over all elements -> scalar.
    Mean(NodeId),
    /// Sum of smooth-L1 over elementwise residuals -> scalar.
    SmoothL1 { a: NodeId, b: NodeId, delta: T },
    /// x [C,L], gamma [C], beta [C]: per-channel affine modulation.
    Film { x: NodeId, gamma: NodeId, beta: NodeId },
    /// x [C,L], weight [C], bias [C]; per-group statistics saved for backward.
    GroupNorm { x: NodeId, w: NodeId, b: NodeId, groups: usize, mean: Vec<T>, rstd: Vec<T> },
}

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node; `None` when the loss does not reach it.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient with unreached entries materialized as zeros.
    pub fn get_or_zeros(&self, id: NodeId, numel: usize) -> Vec<T> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); numel],
        }
    }
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; inputs always precede their consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AdError {
    AdError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor as a leaf; the payload is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.payload(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Constant leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId, AdError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_vec(&mut self, data: Vec<T>) -> NodeId {
        let n = data.len();
        self.push(Arc::new(data), vec![n], false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].value.len()
    }

    fn push(&mut self, value: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, shape, requires_grad, op });
        id
    }

    fn push_op(&mut self, value: Vec<T>, shape: Vec<usize>, inputs: &[NodeId], op: Op<T>) -> NodeId {
        let requires = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Arc::new(value), shape, requires, op)
    }

    // ---- elementwise and linear ops ------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let v: Vec<T> =
            self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push_op(v, shape, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let v: Vec<T> =
            self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push_op(v, shape, &[a, b], Op::Mul(a, b)))
    }

    /// Elementwise `mul * x + add`; covers negation, scaling, and constant shifts.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let v: Vec<T> = self.nodes[x].value.iter().map(|&t| mul * t + add).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(v, shape, &[x], Op::Affine { x, mul, add })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v: Vec<T> = self.nodes[x].value.iter().map(|&t| if t > T::zero() { t } else { T::zero() }).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(v, shape, &[x], Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v: Vec<T> = self.nodes[x].value.iter().map(|&t| t.tanh()).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(v, shape, &[x], Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let v: Vec<T> = self.nodes[x].value.iter().map(|&t| one / (one + (-t).exp())).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(v, shape, &[x], Op::Sigmoid(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &ap) in arow.iter().enumerate() {
                T::vaxpy(orow, ap, &bv[p * n..(p + 1) * n]);
            }
        }
        Ok(self.push_op(out, vec![m, n], &[a, b], Op::MatMul(a, b)))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, AdError> {
        let (sw, sx) = (&self.nodes[w].shape, &self.nodes[x].shape);
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(shape_err("matvec", format!("{sw:?} x {sx:?}")));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (&self.nodes[w].value, &self.nodes[x].value);
        let out: Vec<T> = (0..m).map(|i| dot(&wv[i * k..(i + 1) * k], xv)).collect();
        Ok(self.push_op(out, vec![m], &[w, x], Op::MatVec(w, x)))
    }

    /// `W x + b` for a 1-D input.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, AdError> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::InvalidArg { op: "concat", detail: "no inputs".into() });
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.nodes[p].shape.len() != 1 {
                return Err(shape_err("concat", format!("expects vectors, got {:?}", self.nodes[p].shape)));
            }
            out.extend_from_slice(&self.nodes[p].value);
        }
        let n = out.len();
        Ok(self.push_op(out, vec![n], parts, Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let sx = &self.nodes[x].shape;
        if sx.len() != 1 || start + len > sx[0] {
            return Err(shape_err("slice", format!("[{start}, {start}+{len}) of {sx:?}")));
        }
        let v = self.nodes[x].value[start..start + len].to_vec();
        Ok(self.push_op(v, vec![len], &[x], Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} values) into {shape:?}", self.nodes[x].shape, self.nodes[x].value.len()),
            ));
        }
        let v = Arc::clone(&self.nodes[x].value);
        let requires = self.nodes[x].requires_grad;
        Ok(self.push(v, shape, requires, Op::Reshape(x)))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let sum = self.nodes[x].value.iter().fold(T::zero(), |acc, &v| acc + v);
        let v = vec![sum / T::of(n as f64)];
        self.push_op(v, vec![1], &[x], Op::Mean(x))
    }

    /// Smooth-L1 distance summed over elements:
    /// `0.5 r^2 / delta` for `|r| < delta`, else `|r| - 0.5 delta`.
    pub fn smooth_l1(&mut self, a: NodeId, b: NodeId, delta: T) -> Result<NodeId, AdError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                "smooth_l1",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        if delta <= T::zero() {
            return Err(AdError::InvalidArg { op: "smooth_l1", detail: format!("delta {delta} <= 0") });
        }
        let half = T::of(0.5);
        let mut total = T::zero();
        for (&x, &y) in self.nodes[a].value.iter().zip(self.nodes[b].value.iter()) {
            let r = x - y;
            total = total
                + if r.abs() < delta { half * r * r / delta } else { r.abs() - half * delta };
        }
        Ok(self.push_op(vec![total], vec![1], &[a, b], Op::SmoothL1 { a, b, delta }))
    }

    /// Feature-wise linear modulation: `y[c, l] = gamma[c] * x[c, l] + beta[c]`.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, AdError> {
        let sx = self.nodes[x].shape.clone();
        if sx.len() != 2
            || self.nodes[gamma].shape != [sx[0]]
            || self.nodes[beta].shape != [sx[0]]
        {
            return Err(shape_err(
                "film",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    sx, self.nodes[gamma].shape, self.nodes[beta].shape
                ),
            ));
        }
        let (c, l) = (sx[0], sx[1]);
        let (xv, gv, bv) = (&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value);
        let mut out = vec![T::zero(); c * l];
        for ch in 0..c {
            for j in 0..l {
                out[ch * l + j] = gv[ch] * xv[ch * l + j] + bv[ch];
            }
        }
        Ok(self.push_op(out, sx, &[x, gamma, beta], Op::Film { x, gamma, beta }))
    }

    /// Group normalization over `[C, L]` with affine parameters per channel.
    /// `groups == 1` is layer normalization over the whole tensor.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        groups: usize,
        eps: T,
    ) -> Result<NodeId, AdError> {
        let sx = self.nodes[x].shape.clone();
        if sx.len() != 2 || self.nodes[w].shape != [sx[0]] || self.nodes[b].shape != [sx[0]] {
            return Err(shape_err(
                "group_norm",
                format!("x {:?}, weight {:?}, bias {:?}", sx, self.nodes[w].shape, self.nodes[b].shape),
            ));
        }
        let (c, l) = (sx[0], sx[1]);
        if groups == 0 || c % groups != 0 {
            return Err(AdError::InvalidArg {
                op: "group_norm",
                detail: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        let cs = c / groups;
        let gn = T::of((cs * l) as f64);
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let mut out = vec![T::zero(); c * l];
        let mut means = vec![T::zero(); groups];
        let mut rstds = vec![T::zero(); groups];
        for g in 0..groups {
            let ch0 = g * cs;
            let mut sum = T::zero();
            let mut sum2 = T::zero();
            for ch in ch0..ch0 + cs {
                for j in 0..l {
                    let v = xv[ch * l + j];
                    sum += v;
                    sum2 += v * v;
                }
            }
            let mean = sum / gn;
            let var = sum2 / gn - mean * mean;
            let rstd = T::one() / (var + eps).sqrt();
            means[g] = mean;
            rstds[g] = rstd;
            for ch in ch0..ch0 + cs {
                for j in 0..l {
                    let xhat = (xv[ch * l + j] - mean) * rstd;
                    out[ch * l + j] = xhat * wv[ch] + bv[ch];
                }
            }
        }
        Ok(self.push_op(
            out,
            sx,
            &[x, w, b],
            Op::GroupNorm { x, w, b, groups, mean: means, rstd: rstds },
        ))
    }

    // ---- convolutions ---------------------------------------------------

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: [usize; 3],
    ) -> Result<NodeId, AdError> {
        let sx = self.nodes[x].shape.clone();
        let sw = self.nodes[w].shape.clone();
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[1] || self.nodes[b].shape != [sw[0]] {
            return Err(shape_err(
                "conv3d",
                format!("x {:?}, w {:?}, bias {:?}", sx, sw, self.nodes[b].shape),
            ));
        }
        let (ci, d, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kd, kh, kw) = (sw[0], sw[2], sw[3], sw[4]);
        let od = (d + 2 * pad[0]).checked_sub(kd - 1).filter(|&v| v > 0);
        let oh = (h + 2 * pad[1]).checked_sub(kh - 1).filter(|&v| v > 0);
        let ow = (wd + 2 * pad[2]).checked_sub(kw - 1).filter(|&v| v > 0);
        let (Some(od), Some(oh), Some(ow)) = (od, oh, ow) else {
            return Err(shape_err("conv3d", format!("kernel {sw:?} too large for input {sx:?} with pad {pad:?}")));
        };
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let p = od * oh * ow;
        let kk = ci * kd * kh * kw;
        let cols = im2col_3d(xv, ci, d, h, wd, [kd, kh, kw], pad, [od, oh, ow]);
        let mut out = vec![T::zero(); co * p];
        for o in 0..co {
            let orow = &mut out[o * p..(o + 1) * p];
            orow.iter_mut().for_each(|v| *v = bv[o]);
            let wrow = &wv[o * kk..(o + 1) * kk];
            for (kr, &wk) in wrow.iter().enumerate() {
                T::vaxpy(orow, wk, &cols[kr * p..(kr + 1) * p]);
            }
        }
        Ok(self.push_op(out, vec![co, od, oh, ow], &[x, w, b], Op::Conv3d { x, w, b, pad }))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> Result<NodeId, AdError> {
        let sx = self.nodes[x].shape.clone();
        let sw = self.nodes[w].shape.clone();
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] || self.nodes[b].shape != [sw[0]] {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}, bias {:?}", sx, sw, self.nodes[b].shape),
            ));
        }
        let (ci, l) = (sx[0], sx[1]);
        let (co, k) = (sw[0], sw[2]);
        let Some(ol) = (l + 2 * pad).checked_sub(k - 1).filter(|&v| v > 0) else {
            return Err(shape_err("conv1d", format!("kernel {k} too large for length {l} with pad {pad}")));
        };
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let kk = ci * k;
        let cols = im2col_1d(xv, ci, l, k, pad, ol);
        let mut out = vec![T::zero(); co * ol];
        for o in 0..co {
            let wrow = &wv[o * kk..(o + 1) * kk];
            for j in 0..ol {
                out[o * ol + j] = bv[o] + dot(wrow, &cols[j * kk..(j + 1) * kk]);
            }
        }
        Ok(self.push_op(out, vec![co, ol], &[x, w, b], Op::Conv1d { x, w, b, pad }))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    ) -> Result<NodeId, AdError> {
        let sx = self.nodes[x].shape.clone();
        let sw = self.nodes[w].shape.clone();
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0] || self.nodes[b].shape != [sw[1]] {
            return Err(shape_err(
                "conv_transpose1d",
                format!("x {:?}, w {:?}, bias {:?}", sx, sw, self.nodes[b].shape),
            ));
        }
        let (ci, l) = (sx[0], sx[1]);
        let (co, k) = (sw[1], sw[2]);
        let Some(ol) = (l + k - 1).checked_sub(2 * pad).filter(|&v| v > 0) else {
            return Err(shape_err("conv_transpose1d", format!("pad {pad} too large for length {l}, kernel {k}")));
        };
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let kk = ci * k;
        // Transposed-weight view [Co][Ci*k] so each output is one long dot.
        let mut wt = vec![T::zero(); co * kk];
        for i in 0..ci {
            for o in 0..co {
                for a in 0..k {
                    wt[o * kk + i * k + a] = wv[(i * co + o) * k + a];
                }
            }
        }
        // Patch per output position: x[i, j - a + pad] over (i, a).
        let mut out = vec![T::zero(); co * ol];
        let mut patch = vec![T::zero(); kk];
        for j in 0..ol {
            patch.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..ci {
                for a in 0..k {
                    if let Some(t) = (j + pad).checked_sub(a).filter(|&v| v < l) {
                        patch[i * k + a] = xv[i * l + t];
                    }
                }
            }
            for o in 0..co {
                out[o * ol + j] = bv[o] + dot(&wt[o * kk..(o + 1) * kk], &patch);
            }
        }
        Ok(self.push_op(out, vec![co, ol], &[x, w, b], Op::ConvT1d { x, w, b, pad }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. Rejects non-scalar losses and a
    /// second invocation on the same graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, AdError> {
        if self.spent {
            return Err(AdError::BackwardSpent);
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(AdError::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        if !self.nodes[loss].requires_grad {
            return Err(AdError::NoGradPath);
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gout = grads[id].take().unwrap();
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn acc<'g>(grads: &'g mut [Option<Vec<T>>], id: NodeId, numel: usize) -> &'g mut [T] {
        grads[id].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn propagate(&self, id: NodeId, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(src, _other) in &[(*a, *b), (*b, *a)] {
                    if self.needs(src) {
                        let g = Self::acc(grads, src, gout.len());
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = Arc::clone(&self.nodes[*b].value);
                    let g = Self::acc(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(&self.nodes[*a].value);
                    let g = Self::acc(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Affine { x, mul, .. } => {
                if self.needs(*x) {
                    let g = Self::acc(grads, *x, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += *mul * go;
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let g = Self::acc(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        if xv[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let yv = Arc::clone(&self.nodes[id].value);
                    let g = Self::acc(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * (T::one() - yv[i] * yv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yv = Arc::clone(&self.nodes[id].value);
                    let g = Self::acc(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * yv[i] * (T::one() - yv[i]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.needs(*a) {
                    let bv = Arc::clone(&self.nodes[*b].value);
                    let g = Self::acc(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            g[i * k + p] += dot(&gout[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(&self.nodes[*a].value);
                    let g = Self::acc(grads, *b, k * n);
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            T::vaxpy(&mut g[p * n..(p + 1) * n], av[i * k + p], go);
                        }
                    }
                }
            }
            Op::MatVec(w, x) => {
                let (m, k) = (self.nodes[*w].shape[0], self.nodes[*w].shape[1]);
                if self.needs(*w) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let g = Self::acc(grads, *w, m * k);
                    for i in 0..m {
                        T::vaxpy(&mut g[i * k..(i + 1) * k], gout[i], &xv);
                    }
                }
                if self.needs(*x) {
                    let wv = Arc::clone(&self.nodes[*w].value);
                    let g = Self::acc(grads, *x, k);
                    for i in 0..m {
                        T::vaxpy(g, gout[i], &wv[i * k..(i + 1) * k]);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.needs(p) {
                        let g = Self::acc(grads, p, n);
                        for i in 0..n {
                            g[i] += gout[off + i];
                        }
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.len();
                    let g = Self::acc(grads, *x, n);
                    for (i, &go) in gout.iter().enumerate() {
                        g[start + i] += go;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let g = Self::acc(grads, *x, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.len();
                    let scale = gout[0] / T::of(n as f64);
                    let g = Self::acc(grads, *x, n);
                    for gi in g.iter_mut() {
                        *gi += scale;
                    }
                }
            }
            Op::SmoothL1 { a, b, delta } => {
                let av = Arc::clone(&self.nodes[*a].value);
                let bv = Arc::clone(&self.nodes[*b].value);
                let go = gout[0];
                let psi = |r: T| {
                    if r.abs() < *delta {
                        r / *delta
                    } else if r > T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    }
                };
                if self.needs(*a) {
                    let g = Self::acc(grads, *a, av.len());
                    for i in 0..av.len() {
                        g[i] += go * psi(av[i] - bv[i]);
                    }
                }
                if self.needs(*b) {
                    let g = Self::acc(grads, *b, bv.len());
                    for i in 0..bv.len() {
                        g[i] -= go * psi(av[i] - bv[i]);
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let c = self.nodes[*gamma].value.len();
                let l = self.nodes[*x].shape[1];
                if self.needs(*x) {
                    let gv = Arc::clone(&self.nodes[*gamma].value);
                    let g = Self::acc(grads, *x, c * l);
                    for ch in 0..c {
                        for j in 0..l {
                            g[ch * l + j] += gout[ch * l + j] * gv[ch];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let g = Self::acc(grads, *gamma, c);
                    for ch in 0..c {
                        let mut s = T::zero();
                        for j in 0..l {
                            s += gout[ch * l + j] * xv[ch * l + j];
                        }
                        g[ch] += s;
                    }
                }
                if self.needs(*beta) {
                    let g = Self::acc(grads, *beta, c);
                    for ch in 0..c {
                        let mut s = T::zero();
                        for j in 0..l {
                            s += gout[ch * l + j];
                        }
                        g[ch] += s;
                    }
                }
            }
            Op::GroupNorm { x, w, b, groups, mean, rstd } => {
                let c = self.nodes[*x].shape[0];
                let l = self.nodes[*x].shape[1];
                let cs = c / groups;
                let gn = T::of((cs * l) as f64);
                let xv = Arc::clone(&self.nodes[*x].value);
                let wv = Arc::clone(&self.nodes[*w].value);
                if self.needs(*w) || self.needs(*b) {
                    for ch in 0..c {
                        let g = ch / cs;
                        let (mu, rs) = (mean[g], rstd[g]);
                        let mut sw = T::zero();
                        let mut sb = T::zero();
                        for j in 0..l {
                            let xhat = (xv[ch * l + j] - mu) * rs;
                            sw += gout[ch * l + j] * xhat;
                            sb += gout[ch * l + j];
                        }
                        if self.needs(*w) {
                            Self::acc(grads, *w, c)[ch] += sw;
                        }
                        if self.needs(*b) {
                            Self::acc(grads, *b, c)[ch] += sb;
                        }
                    }
                }
                if self.needs(*x) {
                    let g = Self::acc(grads, *x, c * l);
                    for grp in 0..*groups {
                        let (mu, rs) = (mean[grp], rstd[grp]);
                        // Means of (w*gout) and (w*gout*xhat) over the group.
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for ch in grp * cs..(grp + 1) * cs {
                            for j in 0..l {
                                let dxh = gout[ch * l + j] * wv[ch];
                                let xhat = (xv[ch * l + j] - mu) * rs;
                                m1 += dxh;
                                m2 += dxh * xhat;
                            }
                        }
                        m1 = m1 / gn;
                        m2 = m2 / gn;
                        for ch in grp * cs..(grp + 1) * cs {
                            for j in 0..l {
                                let dxh = gout[ch * l + j] * wv[ch];
                                let xhat = (xv[ch * l + j] - mu) * rs;
                                g[ch * l + j] += rs * (dxh - m1 - xhat * m2);
                            }
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, pad } => {
                let sx = &self.nodes[*x].shape;
                let sw = &self.nodes[*w].shape;
                let so = &self.nodes[id].shape;
                let (ci, d, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kd, kh, kw) = (sw[0], sw[2], sw[3], sw[4]);
                let (od, oh, ow) = (so[1], so[2], so[3]);
                let p = od * oh * ow;
                let kk = ci * kd * kh * kw;
                if self.needs(*b) {
                    let g = Self::acc(grads, *b, co);
                    for o in 0..co {
                        let mut s = T::zero();
                        for v in &gout[o * p..(o + 1) * p] {
                            s += *v;
                        }
                        g[o] += s;
                    }
                }
                if self.needs(*w) || self.needs(*x) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let cols = im2col_3d(&xv, ci, d, h, wd, [kd, kh, kw], *pad, [od, oh, ow]);
                    if self.needs(*w) {
                        let g = Self::acc(grads, *w, co * kk);
                        for o in 0..co {
                            let go = &gout[o * p..(o + 1) * p];
                            for kr in 0..kk {
                                g[o * kk + kr] += dot(go, &cols[kr * p..(kr + 1) * p]);
                            }
                        }
                    }
                    if self.needs(*x) {
                        let wv = Arc::clone(&self.nodes[*w].value);
                        let mut dcols = vec![T::zero(); kk * p];
                        for o in 0..co {
                            let go = &gout[o * p..(o + 1) * p];
                            let wrow = &wv[o * kk..(o + 1) * kk];
                            for (kr, &wk) in wrow.iter().enumerate() {
                                T::vaxpy(&mut dcols[kr * p..(kr + 1) * p], wk, go);
                            }
                        }
                        let g = Self::acc(grads, *x, ci * d * h * wd);
                        col2im_3d(&dcols, g, ci, d, h, wd, [kd, kh, kw], *pad, [od, oh, ow]);
                    }
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let (ci, l) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let (co, k) = (self.nodes[*w].shape[0], self.nodes[*w].shape[2]);
                let ol = self.nodes[id].shape[1];
                let kk = ci * k;
                if self.needs(*b) {
                    let g = Self::acc(grads, *b, co);
                    for o in 0..co {
                        let mut s = T::zero();
                        for v in &gout[o * ol..(o + 1) * ol] {
                            s += *v;
                        }
                        g[o] += s;
                    }
                }
                if self.needs(*w) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let cols = im2col_1d(&xv, ci, l, k, *pad, ol);
                    let g = Self::acc(grads, *w, co * kk);
                    for o in 0..co {
                        for j in 0..ol {
                            T::vaxpy(
                                &mut g[o * kk..(o + 1) * kk],
                                gout[o * ol + j],
                                &cols[j * kk..(j + 1) * kk],
                            );
                        }
                    }
                }
                if self.needs(*x) {
                    let wv = Arc::clone(&self.nodes[*w].value);
                    let mut dcols = vec![T::zero(); ol * kk];
                    for o in 0..co {
                        let wrow = &wv[o * kk..(o + 1) * kk];
                        for j in 0..ol {
                            T::vaxpy(&mut dcols[j * kk..(j + 1) * kk], gout[o * ol + j], wrow);
                        }
                    }
                    let g = Self::acc(grads, *x, ci * l);
                    col2im_1d(&dcols, g, ci, l, k, *pad, ol);
                }
            }
            Op::ConvT1d { x, w, b, pad } => {
                let (ci, l) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let (co, k) = (self.nodes[*w].shape[1], self.nodes[*w].shape[2]);
                let ol = self.nodes[id].shape[1];
                if self.needs(*b) {
                    let g = Self::acc(grads, *b, co);
                    for o in 0..co {
                        let mut s = T::zero();
                        for v in &gout[o * ol..(o + 1) * ol] {
                            s += *v;
                        }
                        g[o] += s;
                    }
                }
                if self.needs(*w) {
                    let xv = Arc::clone(&self.nodes[*x].value);
                    let kk = ci * k;
                    let mut dwt = vec![T::zero(); co * kk];
                    let mut patch = vec![T::zero(); kk];
                    for j in 0..ol {
                        patch.iter_mut().for_each(|v| *v = T::zero());
                        for i in 0..ci {
                            for a in 0..k {
                                if let Some(t) = (j + *pad).checked_sub(a).filter(|&v| v < l) {
                                    patch[i * k + a] = xv[i * l + t];
                                }
                            }
                        }
                        for o in 0..co {
                            T::vaxpy(&mut dwt[o * kk..(o + 1) * kk], gout[o * ol + j], &patch);
                        }
                    }
                    let g = Self::acc(grads, *w, ci * co * k);
                    for i in 0..ci {
                        for o in 0..co {
                            for a in 0..k {
                                g[(i * co + o) * k + a] += dwt[o * kk + i * k + a];
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let wv = Arc::clone(&self.nodes[*w].value);
                    let ck = co * k;
                    let mut gpatch = vec![T::zero(); ck];
                    let g = Self::acc(grads, *x, ci * l);
                    for t in 0..l {
                        gpatch.iter_mut().for_each(|v| *v = T::zero());
                        for o in 0..co {
                            for a in 0..k {
                                if let Some(j) = (t + a).checked_sub(*pad).filter(|&v| v < ol) {
                                    gpatch[o * k + a] = gout[o * ol + j];
                                }
                            }
                        }
                        for i in 0..ci {
                            g[i * l + t] += dot(&wv[i * ck..(i + 1) * ck], &gpatch);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    T::vdot(a, b)
}

/// Gathers conv input patches into a row-major [K, P] matrix (K = taps,
/// P = output positions), zero-filling padded taps.
#[allow(clippy::too_many_arguments)]
fn im2col_3d<T: Scalar>(
    xv: &[T],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
) -> Vec<T> {
    let (od, oh, ow) = (out[0], out[1], out[2]);
    let p = od * oh * ow;
    let kk = ci * k[0] * k[1] * k[2];
    let mut cols = vec![T::zero(); kk * p];
    let mut krow = 0usize;
    for i in 0..ci {
        for a in 0..k[0] {
            for bb in 0..k[1] {
                for c in 0..k[2] {
                    let row = &mut cols[krow * p..(krow + 1) * p];
                    krow += 1;
                    let mut pos = 0usize;
                    for zo in 0..od {
                        let Some(zi) = (zo + a).checked_sub(pad[0]).filter(|&v| v < d) else {
                            pos += oh * ow;
                            continue;
                        };
                        for yo in 0..oh {
                            let Some(yi) = (yo + bb).checked_sub(pad[1]).filter(|&v| v < h) else {
                                pos += ow;
                                continue;
                            };
                            let base = ((i * d + zi) * h + yi) * w;
                            for xo in 0..ow {
                                if let Some(xi) = (xo + c).checked_sub(pad[2]).filter(|&v| v < w) {
                                    row[pos] = xv[base + xi];
                                }
                                pos += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}


/// Position-major patch matrix for 1D conv: `cols[pos * K + k]` with
/// K = Ci * kernel, zero-filled at padded taps.
fn im2col_1d<T: Scalar>(xv: &[T], ci: usize, l: usize, k: usize, pad: usize, ol: usize) -> Vec<T> {
    let kk = ci * k;
    let mut cols = vec![T::zero(); ol * kk];
    for j in 0..ol {
        let patch = &mut cols[j * kk..(j + 1) * kk];
        for i in 0..ci {
            for a in 0..k {
                if let Some(t) = (j + a).checked_sub(pad).filter(|&v| v < l) {
                    patch[i * k + a] = xv[i * l + t];
                }
            }
        }
    }
    cols
}

fn col2im_1d<T: Scalar>(dcols: &[T], dx: &mut [T], ci: usize, l: usize, k: usize, pad: usize, ol: usize) {
    let kk = ci * k;
    for j in 0..ol {
        let patch = &dcols[j * kk..(j + 1) * kk];
        for i in 0..ci {
            for a in 0..k {
                if let Some(t) = (j + a).checked_sub(pad).filter(|&v| v < l) {
                    dx[i * l + t] += patch[i * k + a];
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_3d<T: Scalar>(
    dcols: &[T],
    dx: &mut [T],
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
) {
    let (od, oh, ow) = (out[0], out[1], out[2]);
    let p = od * oh * ow;
    let mut krow = 0usize;
    for i in 0..ci {
        for a in 0..k[0] {
            for bb in 0..k[1] {
                for c in 0..k[2] {
                    let row = &dcols[krow * p..(krow + 1) * p];
                    krow += 1;
                    let mut pos = 0usize;
                    for zo in 0..od {
                        let Some(zi) = (zo + a).checked_sub(pad[0]).filter(|&v| v < d) else {
                            pos += oh * ow;
                            continue;
                        };
                        for yo in 0..oh {
                            let Some(yi) = (yo + bb).checked_sub(pad[1]).filter(|&v| v < h) else {
                                pos += ow;
                                continue;
                            };
                            let base = ((i * d + zi) * h + yi) * w;
                            for xo in 0..ow {
                                if let Some(xi) = (xo + c).checked_sub(pad[2]).filter(|&v| v < w) {
                                    dx[base + xi] += row[pos];
                                }
                                pos += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}
