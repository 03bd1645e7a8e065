//! Eager reverse-mode autodiff tape.
//!
//! Values are computed as nodes are added; [`Graph::backward`] walks the
//! tape in reverse. Only nodes that depend on a parameter carry gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind, OneHotTarget};
use crate::ops::{self, ConvGeometry, Dims5};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Softmax(NodeId),
    Mean(NodeId),
    /// Scalar loss of a probability node, with its precomputed gradient.
    Loss {
        x: NodeId,
        grad: Tensor,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Named trainable leaf. Registering the same name twice returns the
    /// existing node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::shape(format!("input (B, {}, X, Y, Z)", ws.get(1).copied().unwrap_or(0)), xs));
        }
        let kernel = [ws[2], ws[3], ws[4]];
        for a in 0..3 {
            if xs[2 + a] + 2 * pad[a] < kernel[a] {
                return Err(Error::shape(format!("spatial extent >= kernel {kernel:?}"), xs));
            }
        }
        let geom = ConvGeometry { kernel, stride, pad };
        let out = ops::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution with kernel size equal to `stride`.
    pub fn conv_transpose3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: [usize; 3]) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[0] || ws[2..] != stride[..] {
            return Err(Error::shape(format!("weight (I={}, O, {stride:?})", xs.get(1).copied().unwrap_or(0)), ws));
        }
        let out = ops::conv_transpose3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b, stride }, rg))
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (out, xhat, inv_std) =
            ops::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v *= slope;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Concatenates two (B, C, ...) tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(sa, sb));
        }
        let (ca, cb, bsz) = (sa[1], sb[1], sa[0]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(bsz * (ca + cb) * inner);
        for i in 0..bsz {
            data.extend_from_slice(&self.value(a).data()[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&self.value(b).data()[i * cb * inner..(i + 1) * cb * inner]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(a, b), rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = ops::softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Scalar loss of the probability node `probs` against `target`.
    pub fn loss(&mut self, probs: NodeId, kind: LossKind, target: &OneHotTarget, cfg: &LossConfig) -> Result<NodeId> {
        let eval = losses::evaluate(kind, self.value(probs), target, cfg)?;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(eval.value), Op::Loss { x: probs, grad: eval.grad }, rg))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut v = 0.0;
        for &(id, w) in terms {
            if self.value(id).numel() != 1 {
                return Err(Error::shape("scalar", self.value(id).shape()));
            }
            v += w * self.value(id).item();
        }
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Gradient of the scalar node `loss` with respect to every registered
    /// parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("scalar loss", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                }
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) = ops::conv3d_backward(self.value(*x), self.value(*w), &gy, geom, self.rg(*x));
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        acc(&mut grads, b, gb);
                    }
                }
                Op::ConvTranspose { x, w, b, stride } => {
                    let (gx, gw, gb) =
                        ops::conv_transpose3d_backward(self.value(*x), self.value(*w), &gy, *stride, self.rg(*x));
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        acc(&mut grads, b, gb);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (gx, gg, gb) = ops::instance_norm_backward(&gy, xhat, inv_std, self.value(*gamma));
                    if self.rg(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*gamma) {
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, gb);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let mut g = gy;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, gy.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, gy);
                    }
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (ca, cb) = (sa[1], sb[1]);
                    let inner: usize = sa[2..].iter().product();
                    let mut ga = Vec::with_capacity(self.value(*a).numel());
                    let mut gb = Vec::with_capacity(self.value(*b).numel());
                    for bi in 0..sa[0] {
                        let base = bi * (ca + cb) * inner;
                        ga.extend_from_slice(&gy.data()[base..base + ca * inner]);
                        gb.extend_from_slice(&gy.data()[base + ca * inner..base + (ca + cb) * inner]);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, Tensor::from_vec(sa, ga)?);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, Tensor::from_vec(sb, gb)?);
                    }
                }
                Op::Softmax(x) => {
                    let g = ops::softmax_backward(&node.value, &gy);
                    acc(&mut grads, *x, g);
                }
                Op::Mean(x) => {
                    let v = self.value(*x);
                    let g = Tensor::full(v.shape(), gy.item() / v.numel() as f64);
                    acc(&mut grads, *x, g);
                }
                Op::Loss { x, grad } => {
                    let mut g = grad.clone();
                    g.scale(gy.item());
                    acc(&mut grads, *x, g);
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        if self.rg(id) {
                            acc(&mut grads, id, Tensor::scalar(w * gy.item()));
                        }
                    }
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (name.clone(), g)
            })
            .collect())
    }
}

/// Spatial dims of a (B, C, X, Y, Z) node value.
pub fn spatial(t: &Tensor) -> [usize; 3] {
    Dims5::of(t).s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv_mean_gradient() {
        // loss = mean(w * x + b) over voxels: d/dw = mean(x), d/db = 1
        let x = Tensor::from_vec(&[1, 1, 2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x);
        let w = g.param("w", &Tensor::full(&[1, 1, 1, 1, 1], 0.7));
        let b = g.param("b", &Tensor::zeros(&[1]));
        let y = g.conv3d(xi, w, Some(b), [1, 1, 1], [0, 0, 0]).unwrap();
        let l = g.mean(y);
        let grads = g.backward(l).unwrap();
        assert!((grads["w"].item() - 3.0).abs() < 1e-15);
        assert!((grads["b"].item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::full(&[1, 1, 1, 1, 1], 2.0));
        let _unused = g.param("unused", &Tensor::full(&[3], 5.0));
        let l = g.mean(a);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["a"].item(), 1.0);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::full(&[1, 1, 1, 1, 2], 1.0));
        let b = g.param("b", &Tensor::full(&[1, 2, 1, 1, 2], 1.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 1, 1, 2]);
        let l = g.mean(c);
        let grads = g.backward(l).unwrap();
        assert!(grads["a"].data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(grads["b"].data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }
}
