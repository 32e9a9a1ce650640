//! Layer Operator and the N-layer Receptive Field Aggregator.
//!
//! The input is split along channels into `N + 1` heads `A_1, H_1..H_N`
//! (in that order). Each head gets its own 1x1 projection. Layer operator
//! `n` consumes the running tensor `A_n` (`n * C/(N+1)` channels) and the
//! fresh head `H_n` and produces `A_{n+1}` with one more head's worth of
//! channels:
//!
//! ```text
//! a1 = P_a1(A_n)   a2 = P_a2(A_n)   h = P_h(H_n)
//! amp = a2 * gelu(DW_K(a1))
//! dis = P_fuse(DW_K(h) + DW_k(h))            (sum topology)
//! dis = P_fuse(DW_k(DW_K(h)))                (sequential topology)
//! A_{n+1} = concat(amp, dis)
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Category, Graph, Init};
use crate::real::Real;

/// How the discriminator combines its two depthwise convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisTopology {
    /// `DW_K(h) + DW_k(h)`.
    #[default]
    Sum,
    /// `DW_k(DW_K(h))`.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// `K_n = 2n + 5`.
    Formula,
    Explicit,
}

/// Large kernel of layer `n` (1-based) under the formula schedule.
pub fn kernel_schedule(n: usize, layer_count: usize) -> Result<usize> {
    if n == 0 || n > layer_count {
        return Err(Error::config(
            "layer index",
            format!("{n} outside 1..={layer_count}"),
        ));
    }
    Ok(2 * n + 5)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfaConfig {
    pub layer_count: usize,
    pub channels: usize,
    pub large_kernels: Vec<usize>,
    pub small_kernel: usize,
    pub schedule: ScheduleMode,
    pub dis_topology: DisTopology,
    /// Give the amplifier output its own 1x1 projection before concatenation.
    pub amp_projection: bool,
}

impl RfaConfig {
    /// Kernels `2n + 5`, small kernel 3.
    pub fn formula(layer_count: usize, channels: usize) -> Result<Self> {
        let large_kernels = (1..=layer_count)
            .map(|n| kernel_schedule(n, layer_count))
            .collect::<Result<_>>()?;
        let cfg = Self {
            layer_count,
            channels,
            large_kernels,
            small_kernel: 3,
            schedule: ScheduleMode::Formula,
            dis_topology: DisTopology::Sum,
            amp_projection: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn explicit(channels: usize, large_kernels: &[usize], small_kernel: usize) -> Result<Self> {
        let cfg = Self {
            layer_count: large_kernels.len(),
            channels,
            large_kernels: large_kernels.to_vec(),
            small_kernel,
            schedule: ScheduleMode::Explicit,
            dis_topology: DisTopology::Sum,
            amp_projection: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_topology(mut self, topology: DisTopology) -> Self {
        self.dis_topology = topology;
        self
    }

    /// Channels per head, `C / (N + 1)`.
    pub fn head_channels(&self) -> usize {
        self.channels / (self.layer_count + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_count;
        if n == 0 {
            return Err(Error::config("rfa.layer_count", "must be positive"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(n + 1) {
            return Err(Error::config(
                "channels",
                format!(
                    "{} is not divisible by layer_count + 1 = {}",
                    self.channels,
                    n + 1
                ),
            ));
        }
        if self.large_kernels.len() != n {
            return Err(Error::config(
                "rfa.schedule",
                format!("has {} kernels for {n} layers", self.large_kernels.len()),
            ));
        }
        for &k in self.large_kernels.iter().chain([&self.small_kernel]) {
            if k < 3 || k % 2 == 0 {
                return Err(Error::config(
                    "rfa kernel",
                    format!("{k} must be odd and at least 3"),
                ));
            }
        }
        let min_large = *self.large_kernels.iter().min().expect("n > 0");
        if self.small_kernel > min_large {
            return Err(Error::config(
                "rfa.small_kernel",
                format!(
                    "{} exceeds the smallest large kernel {min_large}",
                    self.small_kernel
                ),
            ));
        }
        if self.schedule == ScheduleMode::Formula {
            for (i, &k) in self.large_kernels.iter().enumerate() {
                if k != 2 * (i + 1) + 5 {
                    return Err(Error::config(
                        "rfa.schedule",
                        format!("formula mode requires K_{} = {}, got {k}", i + 1, 2 * i + 7),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Receptive-field extents implied by a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TheoreticalRf {
    /// Side of the support box of the amplifier output group (first
    /// `N/(N+1)` of the output channels).
    pub amp_chain_rf: usize,
    /// Support side of each layer's discriminator output.
    pub dis_rf_per_layer: Vec<usize>,
}

impl TheoreticalRf {
    /// Support side of the last `C/(N+1)` output channels.
    pub fn dis_group_rf(&self) -> usize {
        *self.dis_rf_per_layer.last().expect("at least one layer")
    }
}

/// Support sizes by tracking the widest path into each running tensor.
/// Under the sum topology this reduces to `1 + sum(K_n - 1)` and `K_n`.
pub fn theoretical_rf(cfg: &RfaConfig) -> TheoreticalRf {
    propagate_support(cfg, &vec![1; cfg.layer_count + 1])
}

/// Support sides of the two output groups when input head `i` (in
/// `A_1, H_1..H_N` order) already has support side `head_support[i]`.
/// Chaining aggregators feeds `[amp; N]` followed by `dis` into the next.
pub fn propagate_support(cfg: &RfaConfig, head_support: &[usize]) -> TheoreticalRf {
    assert_eq!(
        head_support.len(),
        cfg.layer_count + 1,
        "one support per head"
    );
    let k = cfg.small_kernel;
    let dis_rf = |big: usize| match cfg.dis_topology {
        DisTopology::Sum => big.max(k),
        DisTopology::Sequential => big + k - 1,
    };
    let mut running = head_support[0];
    let mut amp = running;
    let mut dis_rf_per_layer = Vec::with_capacity(cfg.layer_count);
    for (&big, &head) in cfg.large_kernels.iter().zip(&head_support[1..]) {
        amp = running + big - 1;
        let d = dis_rf(big) + head - 1;
        dis_rf_per_layer.push(d);
        running = amp.max(d);
    }
    TheoreticalRf {
        amp_chain_rf: amp,
        dis_rf_per_layer,
    }
}

/// Parameters of layer operator `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOperator {
    pub n: usize,
    pub proj_a1: Conv2d,
    pub proj_a2: Conv2d,
    pub proj_h: Conv2d,
    pub dw_large_amp: Conv2d,
    pub dw_large_dis: Conv2d,
    pub dw_small_dis: Conv2d,
    pub fuse_dis: Conv2d,
    pub proj_amp: Option<Conv2d>,
    topology: DisTopology,
}

/// Intermediate outputs of one layer operator.
#[derive(Debug, Clone, Copy)]
pub struct LayerOperatorOutput {
    pub amp: NodeId,
    pub dis: NodeId,
    pub out: NodeId,
}

impl LayerOperator {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        prefix: &str,
        n: usize,
        cfg: &RfaConfig,
    ) -> Result<Self> {
        let c = cfg.head_channels();
        let running = n * c;
        let big = cfg.large_kernels[n - 1];
        let cat = Category::Rfa;
        let name = |s: &str| format!("{prefix}.lo{n}.{s}");
        Ok(Self {
            n,
            proj_a1: Conv2d::pointwise(init, &name("proj_a1"), cat, running, running)?,
            proj_a2: Conv2d::pointwise(init, &name("proj_a2"), cat, running, running)?,
            proj_h: Conv2d::pointwise(init, &name("proj_h"), cat, c, c)?,
            dw_large_amp: Conv2d::depthwise(init, &name("dw_large_amp"), cat, running, big)?,
            dw_large_dis: Conv2d::depthwise(init, &name("dw_large_dis"), cat, c, big)?,
            dw_small_dis: Conv2d::depthwise(init, &name("dw_small_dis"), cat, c, cfg.small_kernel)?,
            fuse_dis: Conv2d::pointwise(init, &name("fuse_dis"), cat, c, c)?,
            proj_amp: if cfg.amp_projection {
                Some(Conv2d::pointwise(
                    init,
                    &name("proj_amp"),
                    cat,
                    running,
                    running,
                )?)
            } else {
                None
            },
            topology: cfg.dis_topology,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        running: NodeId,
        head: NodeId,
    ) -> Result<LayerOperatorOutput> {
        let rc = g.tape.shape(running)?.channels;
        let hc = g.tape.shape(head)?.channels;
        if rc != self.proj_a1.in_channels || hc != self.proj_h.in_channels {
            return Err(Error::Shape(format!(
                "layer operator {} expects {} + {} channels, got {rc} + {hc}",
                self.n, self.proj_a1.in_channels, self.proj_h.in_channels
            )));
        }
        let a1 = self.proj_a1.forward(g, running)?;
        let a2 = self.proj_a2.forward(g, running)?;
        let h = self.proj_h.forward(g, head)?;

        let large = self.dw_large_amp.forward(g, a1)?;
        let gate = g.tape.gelu(large)?;
        let mut amp = g.tape.mul(a2, gate)?;
        if let Some(p) = &self.proj_amp {
            amp = p.forward(g, amp)?;
        }

        let mixed = match self.topology {
            DisTopology::Sum => {
                let wide = self.dw_large_dis.forward(g, h)?;
                let narrow = self.dw_small_dis.forward(g, h)?;
                g.tape.add(wide, narrow)?
            }
            DisTopology::Sequential => {
                let wide = self.dw_large_dis.forward(g, h)?;
                self.dw_small_dis.forward(g, wide)?
            }
        };
        let dis = self.fuse_dis.forward(g, mixed)?;
        let out = g.tape.concat_channels(&[amp, dis])?;
        Ok(LayerOperatorOutput { amp, dis, out })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [
            &self.proj_a1,
            &self.proj_a2,
            &self.proj_h,
            &self.dw_large_amp,
            &self.dw_large_dis,
            &self.dw_small_dis,
            &self.fuse_dis,
        ]
        .into_iter()
        .chain(self.proj_amp.as_ref())
    }

    /// Multiply-accumulates at the given spatial size (stride 1 throughout).
    pub fn macs(&self, height: usize, width: usize) -> Result<u64> {
        self.convs()
            .map(|c| c.macs(height, width).map(|(m, _, _)| m))
            .sum()
    }

    /// Elementwise operations: GELU, product, and the discriminator sum.
    pub fn elementwise_ops(&self, height: usize, width: usize) -> u64 {
        let plane = (height * width) as u64;
        let running = self.proj_a1.out_channels as u64;
        let head = self.proj_h.out_channels as u64;
        let dis_sum = match self.topology {
            DisTopology::Sum => head * plane,
            DisTopology::Sequential => 0,
        };
        2 * running * plane + dis_sum
    }
}

/// Receptive Field Aggregator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Rfa {
    pub cfg: RfaConfig,
    pub head_projections: Vec<Conv2d>,
    pub layers: Vec<LayerOperator>,
}

/// Output of [`Rfa::forward_traced`].
#[derive(Debug, Clone)]
pub struct RfaTrace {
    pub output: NodeId,
    /// Channels of the running tensor after each layer operator.
    pub running_channels: Vec<usize>,
    pub layers: Vec<LayerOperatorOutput>,
}

impl Rfa {
    pub fn new<T: Real>(init: &mut Init<'_, T>, prefix: &str, cfg: &RfaConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.head_channels();
        let head_projections = (0..=cfg.layer_count)
            .map(|i| Conv2d::pointwise(init, &format!("{prefix}.heads.{i}"), Category::Rfa, c, c))
            .collect::<Result<_>>()?;
        let layers = (1..=cfg.layer_count)
            .map(|n| LayerOperator::new(init, prefix, n, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            head_projections,
            layers,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(g, x)?.output)
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<RfaTrace> {
        let shape = g.tape.shape(x)?;
        let n_heads = self.cfg.layer_count + 1;
        if shape.channels != self.cfg.channels {
            return Err(Error::Shape(format!(
                "aggregator expects {} channels, got {}",
                self.cfg.channels, shape.channels
            )));
        }
        let c = self.cfg.head_channels();
        let heads = g.tape.split_channels(x, &vec![c; n_heads])?;
        let projected = heads
            .iter()
            .zip(&self.head_projections)
            .map(|(&h, p)| p.forward(g, h))
            .collect::<Result<Vec<_>>>()?;

        let mut running = projected[0];
        let mut running_channels = Vec::with_capacity(self.layers.len());
        let mut layers = Vec::with_capacity(self.layers.len());
        for (lo, &head) in self.layers.iter().zip(&projected[1..]) {
            let out = lo.forward(g, running, head)?;
            running = out.out;
            let channels = g.tape.shape(running)?.channels;
            assert_eq!(
                channels,
                (lo.n + 1) * c,
                "channel pyramid broken at layer {}",
                lo.n
            );
            running_channels.push(channels);
            layers.push(out);
        }
        Ok(RfaTrace {
            output: running,
            running_channels,
            layers,
        })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.head_projections
            .iter()
            .chain(self.layers.iter().flat_map(|l| l.convs()))
    }

    pub fn macs(&self, height: usize, width: usize) -> Result<u64> {
        self.convs()
            .map(|c| c.macs(height, width).map(|(m, _, _)| m))
            .sum()
    }

    pub fn elementwise_ops(&self, height: usize, width: usize) -> u64 {
        self.layers
            .iter()
            .map(|l| l.elementwise_ops(height, width))
            .sum()
    }
}
