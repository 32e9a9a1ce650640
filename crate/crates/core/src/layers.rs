//! Parameterized building blocks: convolution, LayerNorm, linear.

use crate::autograd::NodeId;
use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::params::{Category, Graph, Init, ParamId};
use crate::real::Real;
use crate::tensor::Shape;

pub const LN_EPS: f64 = 1e-6;

/// Convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geo: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        category: Category,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geo: ConvGeometry,
    ) -> Result<Self> {
        let weight = init.weight(
            &format!("{name}.weight"),
            category,
            Shape::new(out_channels, in_channels / geo.groups, kernel, kernel),
        )?;
        let bias = init.constant(
            &format!("{name}.bias"),
            category,
            Shape::vector(out_channels),
            0.0,
        )?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geo,
        })
    }

    /// 1x1 convolution, no grouping.
    pub fn pointwise<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        category: Category,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Self::new(
            init,
            name,
            category,
            in_channels,
            out_channels,
            1,
            ConvGeometry::new(1, 0, 1),
        )
    }

    /// Stride-1, same-padded depthwise convolution.
    pub fn depthwise<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        category: Category,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(
            init,
            name,
            category,
            channels,
            channels,
            kernel,
            ConvGeometry::same(kernel, channels),
        )
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.conv2d(x, w, Some(b), self.geo)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels / self.geo.groups) * self.kernel * self.kernel
            + self.out_channels
    }

    /// Multiply-accumulates for an input of the given spatial size, and the
    /// output size.
    pub fn macs(&self, height: usize, width: usize) -> Result<(u64, usize, usize)> {
        let ho = crate::kernels::conv_out_extent(
            height,
            self.kernel,
            self.geo.stride,
            self.geo.padding,
        )?;
        let wo =
            crate::kernels::conv_out_extent(width, self.kernel, self.geo.stride, self.geo.padding)?;
        let per_out = (self.in_channels / self.geo.groups * self.kernel * self.kernel) as u64;
        Ok(((ho * wo * self.out_channels) as u64 * per_out, ho, wo))
    }
}

/// LayerNorm over the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        category: Category,
        channels: usize,
    ) -> Result<Self> {
        let gamma = init.constant(
            &format!("{name}.gamma"),
            category,
            Shape::vector(channels),
            1.0,
        )?;
        let beta = init.constant(
            &format!("{name}.beta"),
            category,
            Shape::vector(channels),
            0.0,
        )?;
        Ok(Self {
            gamma,
            beta,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gamma, beta, T::from_f64(LN_EPS))
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer over `(B, C, 1, 1)` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        category: Category,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = init.weight(
            &format!("{name}.weight"),
            category,
            Shape::new(out_features, in_features, 1, 1),
        )?;
        let bias = init.constant(
            &format!("{name}.bias"),
            category,
            Shape::vector(out_features),
            0.0,
        )?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}
