//! Reverse-mode differentiation over a closed operator set.
//!
//! A [`Tape`] is an append-only list of nodes. Every node owns its forward
//! value and remembers which earlier nodes it was computed from, so node ids
//! are topologically ordered by construction. [`Tape::backward`] walks the
//! ids once, from the output down to zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, LayerNormCache};
use crate::real::Real;
use crate::tensor::{self, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geo: ConvGeometry,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        gamma: NodeId,
        beta: NodeId,
        x: NodeId,
        cache: LayerNormCache<T>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        s: NodeId,
    },
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    AvgPool {
        x: NodeId,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Gelu { x } | Op::SliceChannels { x, .. } | Op::AvgPool { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Mul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::ScaleChannels { x, s } => vec![*x, *s],
            Op::Concat { parts } => parts.clone(),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mul { .. } => "mul",
            Op::Add { .. } => "add",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Concat { .. } => "concat",
            Op::AvgPool { .. } => "avg_pool",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation counts gathered by an instrumented tape, keyed by scope label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiplies actually performed by the counting convolution kernel.
    pub macs: BTreeMap<String, u64>,
    /// One per produced element for normalization, activation, and
    /// elementwise arithmetic (pooling counts one per input element).
    pub elementwise: BTreeMap<String, u64>,
}

impl OpCounts {
    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.elementwise.values().sum()
    }
}

#[derive(Debug, Clone)]
struct Counter {
    scope: String,
    counts: OpCounts,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    counter: Option<Counter>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: None,
        }
    }

    /// A tape that runs convolutions through the multiply-counting
    /// reference kernel and tallies every operation.
    pub fn counting() -> Self {
        Self {
            nodes: Vec::new(),
            counter: Some(Counter {
                scope: String::new(),
                counts: OpCounts::default(),
            }),
        }
    }

    /// Label under which subsequent operations are counted.
    pub fn set_scope(&mut self, label: &str) {
        if let Some(c) = &mut self.counter {
            c.scope.clear();
            c.scope.push_str(label);
        }
    }

    pub fn counts(&self) -> Option<&OpCounts> {
        self.counter.as_ref().map(|c| &c.counts)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownNode {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.check(id)?;
        Ok(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> Result<Shape> {
        Ok(self.value(id)?.shape())
    }

    /// Operation tag and inputs of a node, for inspection.
    pub fn describe(&self, id: NodeId) -> Result<(&'static str, Vec<NodeId>)> {
        self.check(id)?;
        let op = &self.nodes[id.0].op;
        Ok((op.tag(), op.inputs()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn count_elementwise(&mut self, n: usize) {
        if let Some(c) = &mut self.counter {
            *c.counts.elementwise.entry(c.scope.clone()).or_default() += n as u64;
        }
    }

    fn count_macs(&mut self, n: u64) {
        if let Some(c) = &mut self.counter {
            *c.counts.macs.entry(c.scope.clone()).or_default() += n;
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geo: ConvGeometry,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let bv = b.map(|b| &self.nodes[b.0].value);
        let value = if self.counter.is_some() {
            let (out, macs) = kernels::conv2d_counting(xv, wv, bv, geo)?;
            self.count_macs(macs);
            out
        } else {
            kernels::conv2d(xv, wv, bv, geo)?
        };
        Ok(self.push(value, Op::Conv2d { x, w, b, geo }))
    }

    /// Affine map over channels of a `(B, C, 1, 1)` input. `w` is shaped
    /// `(C_out, C, 1, 1)` and `b` is `(1, C_out, 1, 1)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        if s.height != 1 || s.width != 1 {
            return Err(Error::Shape(format!(
                "linear expects (B, C, 1, 1), got {s}"
            )));
        }
        self.conv2d(x, w, Some(b), ConvGeometry::new(1, 0, 1))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::gelu(self.value(x)?);
        self.count_elementwise(value.numel());
        Ok(self.push(value, Op::Gelu { x }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.check(gamma)?;
        self.check(beta)?;
        let (value, cache) = kernels::layer_norm_channels(
            self.value(x)?,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        self.count_elementwise(value.numel());
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(b)?;
        let value = kernels::zip_map(self.value(a)?, &self.nodes[b.0].value, |x, y| x * y)?;
        self.count_elementwise(value.numel());
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(b)?;
        let value = kernels::zip_map(self.value(a)?, &self.nodes[b.0].value, |x, y| x + y)?;
        self.count_elementwise(value.numel());
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(s)?;
        let value = kernels::scale_channels(self.value(x)?, &self.nodes[s.0].value)?;
        self.count_elementwise(value.numel());
        Ok(self.push(value, Op::ScaleChannels { x, s }))
    }

    pub fn split_channels(&mut self, x: NodeId, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let parts = tensor::split_channels(self.value(x)?, sizes)?;
        let mut start = 0;
        let mut ids = Vec::with_capacity(parts.len());
        for (part, &len) in parts.into_iter().zip(sizes) {
            ids.push(self.push(part, Op::SliceChannels { x, start }));
            start += len;
        }
        Ok(ids)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = tensor::concat_channels(&values)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.value(x)?;
        let n = input.numel();
        let value = kernels::global_avg_pool(input);
        self.count_elementwise(n);
        Ok(self.push(value, Op::AvgPool { x }))
    }

    /// Gradient of `<seed, output>` with respect to every node that
    /// `output` depends on.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        self.check(output)?;
        seed.expect_shape(self.nodes[output.0].value.shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.axpy(T::one(), &g).expect("gradient shape"),
                None => *slot = Some(g),
            }
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |n: NodeId| &self.nodes[n.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geo } => {
                    let cg = kernels::conv2d_backward(val(*x), val(*w), &g, *geo);
                    accumulate(&mut grads[x.0], cg.input);
                    accumulate(&mut grads[w.0], cg.weight);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], cg.bias);
                    }
                }
                Op::Gelu { x } => {
                    accumulate(&mut grads[x.0], kernels::gelu_backward(val(*x), &g));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let lg = kernels::layer_norm_backward(cache, val(*gamma), &g);
                    accumulate(&mut grads[x.0], lg.input);
                    accumulate(&mut grads[gamma.0], lg.gamma);
                    accumulate(&mut grads[beta.0], lg.beta);
                }
                Op::Mul { a, b } => {
                    let ga = kernels::zip_map(&g, val(*b), |x, y| x * y)?;
                    let gb = kernels::zip_map(&g, val(*a), |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::ScaleChannels { x, s } => {
                    let (gx, gs) = kernels::scale_channels_backward(val(*x), val(*s), &g);
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[s.0], gs);
                }
                Op::SliceChannels { x, start } => {
                    let xs = val(*x).shape();
                    let gs = g.shape();
                    let mut gx = Tensor::zeros(xs);
                    let n = gs.channels * gs.plane();
                    for b in 0..xs.batch {
                        let dst = xs.index(b, *start, 0, 0);
                        gx.data_mut()[dst..dst + n].copy_from_slice(&g.data()[b * n..(b + 1) * n]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Concat { parts } => {
                    let sizes: Vec<usize> =
                        parts.iter().map(|p| val(*p).shape().channels).collect();
                    for (p, gp) in parts.iter().zip(tensor::split_channels(&g, &sizes)?) {
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::AvgPool { x } => {
                    let gx = kernels::global_avg_pool_backward(val(*x).shape(), &g);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward sweep. Only leaf gradients are retained.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; a zero tensor if the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Result<Tensor<T>> {
        let shape = *self.shapes.get(id.0).ok_or(Error::UnknownNode {
            id: id.0,
            len: self.shapes.len(),
        })?;
        Ok(self
            .grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(shape)))
    }

    /// Whether the output depended on this leaf at all.
    pub fn reached(&self, id: NodeId) -> bool {
        matches!(self.grads.get(id.0), Some(Some(_)))
    }
}
