//! Parameter and multiply-accumulate accounting, bucketed by category.
//!
//! "FLOPs" here means MACs: one fused multiply-add is counted once.
//! Normalization, activation, and elementwise arithmetic are counted as one
//! op per element and reported separately.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autograd::OpCounts;
use crate::error::Result;
use crate::model::{check_input_size, BasicBlock, Model, Network, IN_CHANNELS};
use crate::params::{Category, Graph};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostEntry {
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl std::ops::AddAssign for CostEntry {
    fn add_assign(&mut self, o: Self) {
        self.params += o.params;
        self.macs += o.macs;
        self.elementwise += o.elementwise;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub per_category: BTreeMap<Category, CostEntry>,
}

impl CostBreakdown {
    fn empty() -> Self {
        Self {
            per_category: Category::ALL
                .into_iter()
                .map(|c| (c, CostEntry::default()))
                .collect(),
        }
    }

    pub fn get(&self, c: Category) -> CostEntry {
        self.per_category.get(&c).copied().unwrap_or_default()
    }

    fn entry(&mut self, c: Category) -> &mut CostEntry {
        self.per_category.entry(c).or_default()
    }

    pub fn total(&self) -> CostEntry {
        let mut t = CostEntry::default();
        for e in self.per_category.values() {
            t += *e;
        }
        t
    }

    /// Merge the params of `self` with the compute counts of `other`.
    pub fn with_compute(mut self, other: &CostBreakdown) -> Self {
        for (c, e) in &other.per_category {
            let mine = self.entry(*c);
            mine.macs = e.macs;
            mine.elementwise = e.elementwise;
        }
        self
    }

    /// Columns: `category,params,macs,elementwise_ops`; one row per category
    /// followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,params,macs,elementwise_ops\n");
        for c in Category::ALL {
            let e = self.get(c);
            let _ = writeln!(s, "{},{},{},{}", c, e.params, e.macs, e.elementwise);
        }
        let t = self.total();
        let _ = writeln!(s, "total,{},{},{}", t.params, t.macs, t.elementwise);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>12} {:>16} {:>16}\n",
            "category", "params", "MACs", "elementwise"
        );
        let row = |s: &mut String, name: &str, e: CostEntry| {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>16} {:>16}",
                name, e.params, e.macs, e.elementwise
            );
        };
        for c in Category::ALL {
            row(&mut s, c.as_str(), self.get(c));
        }
        row(&mut s, "total", self.total());
        let t = self.total();
        let _ = writeln!(
            s,
            "= {:.3}M params, {:.3}G MACs",
            t.params as f64 / 1e6,
            t.macs as f64 / 1e9
        );
        s
    }
}

/// Parameter counts from enumerating every stored element.
pub fn count_params<T: Real>(model: &Model<T>) -> CostBreakdown {
    let mut out = CostBreakdown::empty();
    for (_, p) in model.store.iter() {
        out.entry(p.category).params += p.value.numel() as u64;
    }
    out
}

fn block_compute(
    block: &BasicBlock,
    hidden: usize,
    h: usize,
    w: usize,
    out: &mut CostBreakdown,
) -> Result<()> {
    let plane = (h * w) as u64;
    let c = block.channels as u64;
    // LayerNorm, channel scale and residual add per component.
    let wrapper = 3 * c * plane;

    let rfa = out.entry(Category::Rfa);
    rfa.macs += block.rfa.macs(h, w)?;
    rfa.elementwise += wrapper + block.rfa.elementwise_ops(h, w);

    let local = out.entry(Category::SmallConv);
    local.macs += block.local_conv.macs(h, w)?.0;
    local.elementwise += wrapper;

    let ffn = out.entry(Category::Ffn);
    ffn.macs += block.ffn_in.macs(h, w)?.0 + block.ffn_out.macs(h, w)?.0;
    ffn.elementwise += wrapper + hidden as u64 * plane;
    Ok(())
}

/// MACs and elementwise op counts for one `height x width` image, derived
/// from layer shapes.
pub fn count_flops<T: Real>(
    model: &Model<T>,
    height: usize,
    width: usize,
) -> Result<CostBreakdown> {
    check_input_size(height, width)?;
    let mut out = CostBreakdown::empty();
    let cfg = &model.cfg;

    let stem = &model.stem;
    let (m1, h1, w1) = stem.conv1.macs(height, width)?;
    let (m2, h2, w2) = stem.conv2.macs(h1, w1)?;
    let sd = out.entry(Category::StemDownsample);
    sd.macs += m1 + m2;
    sd.elementwise +=
        (2 * stem.conv1.out_channels * h1 * w1 + stem.conv2.out_channels * h2 * w2) as u64;

    let (mut h, mut w) = (h2, w2);
    for (i, blocks) in model.stages.iter().enumerate() {
        if i > 0 {
            let d = &model.downsamples[i - 1];
            let (m, ho, wo) = d.conv.macs(h, w)?;
            let sd = out.entry(Category::StemDownsample);
            sd.macs += m;
            sd.elementwise += (d.conv.in_channels * h * w) as u64;
            (h, w) = (ho, wo);
        }
        let hidden = cfg.ffn_hidden(cfg.stage_channels[i]);
        for b in blocks {
            block_compute(b, hidden, h, w, &mut out)?;
        }
    }

    let c_last = cfg.stage_channels[3];
    let head = out.entry(Category::Head);
    head.macs += (model.head.fc.in_features * model.head.fc.out_features) as u64;
    head.elementwise += (c_last * h * w + c_last) as u64;
    Ok(out)
}

/// Runs one feature pass of `net` on an instrumented tape, whose
/// convolutions evaluate every kernel tap over an explicitly zero-padded
/// input and count each multiply. Counts are keyed by category label.
pub fn count_instrumented<T: Real, N: Network<T>>(
    net: &N,
    height: usize,
    width: usize,
) -> Result<OpCounts> {
    let mut g = Graph::counting(net.store());
    let x = Tensor::random_uniform(
        [1, net.in_channels(), height, width],
        0.0,
        1.0,
        &mut Rng::new(0),
    );
    let x = g.input(x);
    net.features(&mut g, x)?;
    Ok(g.tape.counts().cloned().unwrap_or_default())
}

/// Instrumented counts for a full model including its classification head.
pub fn count_model_instrumented<T: Real>(
    model: &Model<T>,
    height: usize,
    width: usize,
) -> Result<OpCounts> {
    let mut g = Graph::counting(&model.store);
    let x = Tensor::random_uniform([1, IN_CHANNELS, height, width], 0.0, 1.0, &mut Rng::new(0));
    let x = g.input(x);
    model.logits(&mut g, x)?;
    Ok(g.tape.counts().cloned().unwrap_or_default())
}

/// Lift instrumented counts into a breakdown (params left at zero).
pub fn breakdown_from_counts(counts: &OpCounts) -> CostBreakdown {
    let mut out = CostBreakdown::empty();
    for (label, &m) in &counts.macs {
        if let Some(c) = Category::parse(label) {
            out.entry(c).macs += m;
        }
    }
    for (label, &n) in &counts.elementwise {
        if let Some(c) = Category::parse(label) {
            out.entry(c).elementwise += n;
        }
    }
    out
}
