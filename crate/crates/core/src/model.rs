//! Full network: stem, four stages of basic blocks with downsampling in
//! between, and a pooled classification head.

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{Category, Graph, Init, ParamId, ParamStore, WeightInit};
use crate::real::Real;
use crate::rfa::{Rfa, RfaConfig};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const IN_CHANNELS: usize = 3;

/// Total downsampling factor from input to the last stage.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    /// Aggregator template; its channel count is replaced per stage.
    pub rfa: RfaConfig,
    pub ffn_ratio: f64,
    pub num_classes: usize,
    pub layer_scale_init: f64,
}

impl ModelConfig {
    /// Small four-stage network used by tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            stage_channels: [8, 16, 24, 32],
            stage_depths: [1, 1, 2, 1],
            rfa: RfaConfig::formula(3, 8).expect("valid template"),
            ffn_ratio: 4.0,
            num_classes: 10,
            layer_scale_init: 1e-6,
        }
    }

    pub fn ffn_hidden(&self, channels: usize) -> usize {
        (self.ffn_ratio * channels as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let heads = self.rfa.layer_count + 1;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % heads != 0 {
                return Err(Error::config(
                    format!("model.stage_channels[{i}]"),
                    format!("{c} is not divisible by rfa.layer_count + 1 = {heads}"),
                ));
            }
            self.rfa.with_channels(c)?;
            if self.ffn_hidden(c) == 0 {
                return Err(Error::config(
                    "model.ffn_ratio",
                    "gives an empty hidden layer",
                ));
            }
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::config(
                format!("model.stage_depths[{i}]"),
                "must be positive",
            ));
        }
        if !self.stage_channels[0].is_multiple_of(2) {
            return Err(Error::config(
                "model.stage_channels[0]",
                "must be even (the first stem convolution has half as many channels)",
            ));
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_ratio > 0.0) {
            return Err(Error::config("model.ffn_ratio", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        if !self.layer_scale_init.is_finite() {
            return Err(Error::config("model.layer_scale_init", "must be finite"));
        }
        Ok(())
    }
}

/// Checks that an input extent survives the stem and three downsamples.
pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    for (name, v) in [("height", height), ("width", width)] {
        if v == 0 || v % TOTAL_STRIDE != 0 {
            return Err(Error::Input(format!(
                "input {name} {v} is not a positive multiple of {TOTAL_STRIDE}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

/// Three residual components: aggregator, depthwise 3x3, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub channels: usize,
    pub rfa_norm: LayerNorm,
    pub rfa: Rfa,
    pub rfa_scale: ParamId,
    pub local_norm: LayerNorm,
    pub local_conv: Conv2d,
    pub local_scale: ParamId,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
    pub ffn_scale: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub norm: LayerNorm,
    pub fc: Linear,
}

const STRIDE2: ConvGeometry = ConvGeometry::new(2, 1, 1);

impl BasicBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        prefix: &str,
        channels: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        let scale = |init: &mut Init<'_, T>, s: &str, cat| {
            init.constant(&name(s), cat, Shape::vector(channels), cfg.layer_scale_init)
        };
        let hidden = cfg.ffn_hidden(channels);
        Ok(Self {
            channels,
            rfa_norm: LayerNorm::new(init, &name("rfa.norm"), Category::Rfa, channels)?,
            rfa: Rfa::new(init, &name("rfa"), &cfg.rfa.with_channels(channels)?)?,
            rfa_scale: scale(init, "rfa.scale", Category::Rfa)?,
            local_norm: LayerNorm::new(init, &name("local.norm"), Category::SmallConv, channels)?,
            local_conv: Conv2d::depthwise(
                init,
                &name("local.dw3x3"),
                Category::SmallConv,
                channels,
                3,
            )?,
            local_scale: scale(init, "local.scale", Category::SmallConv)?,
            ffn_norm: LayerNorm::new(init, &name("ffn.norm"), Category::Ffn, channels)?,
            ffn_in: Conv2d::pointwise(init, &name("ffn.fc1"), Category::Ffn, channels, hidden)?,
            ffn_out: Conv2d::pointwise(init, &name("ffn.fc2"), Category::Ffn, hidden, channels)?,
            ffn_scale: scale(init, "ffn.scale", Category::Ffn)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = g.tape.shape(x)?.channels;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, got {c}",
                self.channels
            )));
        }
        g.set_scope(Category::Rfa);
        let t = self.rfa_norm.forward(g, x)?;
        let t = self.rfa.forward(g, t)?;
        let y1 = residual(g, x, t, self.rfa_scale)?;

        g.set_scope(Category::SmallConv);
        let t = self.local_norm.forward(g, y1)?;
        let t = self.local_conv.forward(g, t)?;
        let y2 = residual(g, y1, t, self.local_scale)?;

        g.set_scope(Category::Ffn);
        let t = self.ffn_norm.forward(g, y2)?;
        let t = self.ffn_in.forward(g, t)?;
        let t = g.tape.gelu(t)?;
        let t = self.ffn_out.forward(g, t)?;
        residual(g, y2, t, self.ffn_scale)
    }
}

fn residual<T: Real>(
    g: &mut Graph<'_, T>,
    skip: NodeId,
    branch: NodeId,
    scale: ParamId,
) -> Result<NodeId> {
    let s = g.param(scale);
    let scaled = g.tape.scale_channels(branch, s)?;
    g.tape.add(skip, scaled)
}

/// Anything that maps a `(B, C, H, W)` input to a feature map on a tape.
pub trait Network<T: Real> {
    fn store(&self) -> &ParamStore<T>;

    fn in_channels(&self) -> usize;

    /// Output feature map whose center unit defines the receptive field.
    fn features(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId>;

    /// Input-pixel spacing between neighbouring feature-map units. Feature
    /// unit `i` is centered on input pixel `i * stride`.
    fn feature_stride(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Stem,
    pub stages: Vec<Vec<BasicBlock>>,
    pub downsamples: Vec<Downsample>,
    pub head: Head,
}

impl<T: Real> Model<T> {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm.
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build_with(cfg, rng, WeightInit::default())
    }

    pub fn build_with(cfg: &ModelConfig, rng: &mut Rng, weights: WeightInit) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
            weights,
        };
        let sd = Category::StemDownsample;
        let [c0, ..] = cfg.stage_channels;
        let stem = Stem {
            conv1: Conv2d::new(&mut init, "stem.conv1", sd, IN_CHANNELS, c0 / 2, 3, STRIDE2)?,
            norm1: LayerNorm::new(&mut init, "stem.norm1", sd, c0 / 2)?,
            conv2: Conv2d::new(&mut init, "stem.conv2", sd, c0 / 2, c0, 3, STRIDE2)?,
            norm2: LayerNorm::new(&mut init, "stem.norm2", sd, c0)?,
        };
        let mut stages = Vec::with_capacity(4);
        let mut downsamples = Vec::with_capacity(3);
        for (i, (&c, &depth)) in cfg.stage_channels.iter().zip(&cfg.stage_depths).enumerate() {
            if i > 0 {
                let prev = cfg.stage_channels[i - 1];
                let name = format!("down{i}");
                downsamples.push(Downsample {
                    norm: LayerNorm::new(&mut init, &format!("{name}.norm"), sd, prev)?,
                    conv: Conv2d::new(&mut init, &format!("{name}.conv"), sd, prev, c, 3, STRIDE2)?,
                });
            }
            let blocks = (0..depth)
                .map(|j| BasicBlock::new(&mut init, &format!("stage{i}.block{j}"), c, cfg))
                .collect::<Result<_>>()?;
            stages.push(blocks);
        }
        let c_last = cfg.stage_channels[3];
        let head = Head {
            norm: LayerNorm::new(&mut init, "head.norm", Category::Head, c_last)?,
            fc: Linear::new(
                &mut init,
                "head.fc",
                Category::Head,
                c_last,
                cfg.num_classes,
            )?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            stages,
            downsamples,
            head,
        })
    }

    pub fn stem_forward(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = g.tape.shape(x)?;
        if s.channels != IN_CHANNELS {
            return Err(Error::Shape(format!(
                "stem expects {IN_CHANNELS} input channels, got {}",
                s.channels
            )));
        }
        if s.height % 4 != 0 || s.width % 4 != 0 {
            return Err(Error::Shape(format!(
                "stem input {}x{} is not divisible by 4",
                s.height, s.width
            )));
        }
        g.set_scope(Category::StemDownsample);
        let st = &self.stem;
        let t = st.conv1.forward(g, x)?;
        let t = st.norm1.forward(g, t)?;
        let t = g.tape.gelu(t)?;
        let t = st.conv2.forward(g, t)?;
        st.norm2.forward(g, t)
    }

    /// Downsample between stage `i` and stage `i + 1` (`i` in `0..3`).
    pub fn downsample_forward(&self, i: usize, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = g.tape.shape(x)?;
        if s.height % 2 != 0 || s.width % 2 != 0 {
            return Err(Error::Shape(format!(
                "downsample input {}x{} has an odd extent",
                s.height, s.width
            )));
        }
        let d = self
            .downsamples
            .get(i)
            .ok_or_else(|| Error::Shape(format!("no downsample after stage {i}")))?;
        g.set_scope(Category::StemDownsample);
        let t = d.norm.forward(g, x)?;
        d.conv.forward(g, t)
    }

    /// Stage outputs, from the first to the last stage.
    pub fn stage_outputs(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<Vec<NodeId>> {
        let s = g.tape.shape(x)?;
        check_input_size(s.height, s.width)?;
        let mut t = self.stem_forward(g, x)?;
        let mut outs = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                t = self.downsample_forward(i - 1, g, t)?;
            }
            for b in blocks {
                t = b.forward(g, t)?;
            }
            outs.push(t);
        }
        Ok(outs)
    }

    /// Logits node shaped `(B, num_classes, 1, 1)`.
    pub fn logits(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let feats = self.features(g, x)?;
        g.set_scope(Category::Head);
        let t = g.tape.global_avg_pool(feats)?;
        let t = self.head.norm.forward(g, t)?;
        self.head.fc.forward(g, t)
    }

    /// Convenience forward pass returning logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let xin = g.input(x.clone());
        let out = self.logits(&mut g, xin)?;
        Ok(g.tape.value(out)?.clone())
    }

    /// One SGD step on softmax cross-entropy; returns the loss before the step.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: T) -> Result<T> {
        let (loss, grads) = {
            let mut g = Graph::new(&self.store);
            let xin = g.input(x.clone());
            let out = self.logits(&mut g, xin)?;
            let (loss, dlogits) = softmax_cross_entropy(g.tape.value(out)?, labels)?;
            let grads = g.tape.backward(out, &dlogits)?;
            (loss, g.param_grads(&grads)?)
        };
        self.store.sgd_step(&grads, lr)?;
        Ok(loss)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BasicBlock> {
        self.stages.iter().flatten()
    }
}

impl<T: Real> Network<T> for Model<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn in_channels(&self) -> usize {
        IN_CHANNELS
    }

    fn features(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(*self.stage_outputs(g, x)?.last().expect("four stages"))
    }

    fn feature_stride(&self) -> usize {
        TOTAL_STRIDE
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. `logits` is `(B, K, 1, 1)`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.height != 1 || s.width != 1 || labels.len() != s.batch {
        return Err(Error::Shape(format!(
            "logits {s} do not match {} labels",
            labels.len()
        )));
    }
    let k = s.channels;
    let inv_b = T::one() / T::from_usize(s.batch);
    let mut grad = Tensor::zeros(s);
    let mut loss = T::zero();
    for (b, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if label >= k {
            return Err(Error::Input(format!("label {label} outside 0..{k}")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[label]) * inv_b;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.data_mut()[b * k + j] = (p - target) * inv_b;
        }
    }
    Ok((loss, grad))
}
