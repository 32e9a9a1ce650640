//! Empirical receptive-field support: the bounding box of input positions
//! with a nonzero gradient from one output unit.
//!
//! Runs in `f64` with weights drawn away from zero and zero biases, so an
//! exactly-zero gradient means "not connected" rather than cancellation.

use std::ops::Range;

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamStore, WeightInit};
use crate::rfa::{propagate_support, theoretical_rf, Rfa, RfaConfig, TheoreticalRf};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Weight distribution used for support measurements.
pub const GENERIC_WEIGHTS: WeightInit = WeightInit::Uniform { lo: 0.1, hi: 0.3 };

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: Range<usize>,
}

impl ChannelGroup {
    pub fn new(name: &str, channels: Range<usize>) -> Self {
        Self {
            name: name.to_owned(),
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportBox {
    pub group: String,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// For each channel group, seeds the center output pixel of every channel
/// in the group and returns the bounding box of nonzero input gradient.
pub fn empirical_rf_support<F>(
    store: &ParamStore<f64>,
    f: F,
    input: Shape,
    groups: &[ChannelGroup],
    rng: &mut Rng,
) -> Result<Vec<SupportBox>>
where
    F: Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>,
{
    let x = Tensor::random_uniform(input, 0.1, 0.3, rng);
    let mut boxes = Vec::with_capacity(groups.len());
    for group in groups {
        let mut g = Graph::new(store);
        let xin = g.input(x.clone());
        let out = f(&mut g, xin)?;
        let os = g.tape.shape(out)?;
        if group.channels.end > os.channels || group.channels.is_empty() {
            return Err(Error::Shape(format!(
                "group {} channels {:?} outside output {os}",
                group.name, group.channels
            )));
        }
        let (ch, cw) = (os.height / 2, os.width / 2);
        let mut seed = Tensor::zeros(os);
        for b in 0..os.batch {
            for c in group.channels.clone() {
                seed.set(b, c, ch, cw, 1.0);
            }
        }
        let grads = g.tape.backward(out, &seed)?;
        let gx = grads.wrt(xin)?;
        boxes.push(bounding_box(&gx, &group.name)?);
    }
    Ok(boxes)
}

fn bounding_box(grad: &Tensor<f64>, group: &str) -> Result<SupportBox> {
    let s = grad.shape();
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                for w in 0..s.width {
                    if grad.get(b, c, h, w) != 0.0 {
                        top = top.min(h);
                        bottom = bottom.max(h);
                        left = left.min(w);
                        right = right.max(w);
                    }
                }
            }
        }
    }
    if top == usize::MAX {
        return Err(Error::Degenerate(format!(
            "group {group} has empty support"
        )));
    }
    if top == 0 || left == 0 || bottom + 1 == s.height || right + 1 == s.width {
        return Err(Error::SupportClipped {
            group: group.to_owned(),
            height: s.height,
            width: s.width,
        });
    }
    Ok(SupportBox {
        group: group.to_owned(),
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

/// Theoretical and measured support of `depth` chained aggregators.
#[derive(Debug, Clone)]
pub struct RfaSupportReport {
    pub theoretical: TheoreticalRf,
    /// `amp` and `dis` output groups, in that order.
    pub measured: Vec<SupportBox>,
}

impl RfaSupportReport {
    pub fn passes(&self) -> bool {
        let want = [
            self.theoretical.amp_chain_rf,
            self.theoretical.dis_group_rf(),
        ];
        self.measured
            .iter()
            .zip(want)
            .all(|(b, w)| b.height == w && b.width == w)
    }
}

/// Builds `depth` aggregators with generic weights, chains them on a
/// `size x size` input, and compares the measured output-group supports with
/// the predicted ones.
pub fn rfa_support(
    cfg: &RfaConfig,
    depth: usize,
    size: usize,
    seed: u64,
) -> Result<RfaSupportReport> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let stack = {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            weights: GENERIC_WEIGHTS,
        };
        (0..depth)
            .map(|i| Rfa::new(&mut init, &format!("rfa{i}"), cfg))
            .collect::<Result<Vec<_>>>()?
    };

    let n = cfg.layer_count;
    let mut theoretical = theoretical_rf(cfg);
    for _ in 1..depth {
        let mut heads = vec![theoretical.amp_chain_rf; n];
        heads.push(theoretical.dis_group_rf());
        theoretical = propagate_support(cfg, &heads);
    }

    let c = cfg.head_channels();
    let groups = [
        ChannelGroup::new("amp", 0..n * c),
        ChannelGroup::new("dis", n * c..cfg.channels),
    ];
    let measured = empirical_rf_support(
        &store,
        |g, x| stack.iter().try_fold(x, |t, r| r.forward(g, t)),
        Shape::new(1, cfg.channels, size, size),
        &groups,
        &mut rng,
    )?;
    Ok(RfaSupportReport {
        theoretical,
        measured,
    })
}
