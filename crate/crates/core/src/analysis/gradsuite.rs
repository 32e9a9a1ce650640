//! The 64-bit finite-difference suite behind `uniconv grad-check`: every
//! tape operator, then one layer operator, one aggregator, one basic block
//! and a full model built from the given configuration.

use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::kernels::ConvGeometry;
use crate::layers::LN_EPS;
use crate::model::{BasicBlock, Model, ModelConfig};
use crate::params::{Init, ParamStore, WeightInit};
use crate::rfa::{LayerOperator, Rfa};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

/// Normalization couples every channel, so single input coordinates can
/// receive almost perfectly cancelled gradients for some projections.
const LN_MIN_GRAD: f64 = 1e-3;
const COMPOSITE_PROBES: usize = 24;
const MODEL_PROBES: usize = 8;
const COMPOSITE_WEIGHTS: WeightInit = WeightInit::FanIn;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn pass(&self) -> bool {
        self.report.max_rel_err <= self.tol
    }
}

/// Runs the suite. Composite checks use the configuration's aggregator
/// settings at reduced width; the full model check runs at `input_size`.
pub fn grad_check_suite(
    cfg: &ModelConfig,
    input_size: usize,
    seed: u64,
) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, tol: f64, report: GradCheckReport| {
        out.push(SuiteEntry {
            name: name.to_owned(),
            tol,
            report,
        })
    };
    let op = GradCheck::new(STEP, OP_TOL);
    let x = Shape::new(2, 4, 7, 7);
    let v4 = Shape::vector(4);
    let v8 = Shape::vector(8);

    let geo = ConvGeometry::new(1, 1, 1);
    push(
        "conv2d",
        OP_TOL,
        op.run(
            &[x, Shape::new(3, 4, 3, 3), Shape::vector(3)],
            &mut rng,
            |t, i| t.conv2d(i[0], i[1], Some(i[2]), geo),
        )?,
    );
    let geo = ConvGeometry::new(2, 1, 2);
    push(
        "conv2d_strided_grouped",
        OP_TOL,
        op.run(
            &[x, Shape::new(6, 2, 3, 3), Shape::vector(6)],
            &mut rng,
            |t, i| t.conv2d(i[0], i[1], Some(i[2]), geo),
        )?,
    );
    let geo = ConvGeometry::same(7, 4);
    push(
        "conv2d_depthwise_7x7",
        OP_TOL,
        op.run(&[x, Shape::new(4, 1, 7, 7), v4], &mut rng, |t, i| {
            t.conv2d(i[0], i[1], Some(i[2]), geo)
        })?,
    );
    push(
        "gelu",
        OP_TOL,
        op.clone()
            .min_abs_input(1e-3)
            .run(&[x], &mut rng, |t, i| t.gelu(i[0]))?,
    );
    push(
        "layer_norm",
        OP_TOL,
        op.clone().min_abs_grad(LN_MIN_GRAD).run(
            &[x.with_channels(8), v8, v8],
            &mut rng,
            |t, i| t.layer_norm(i[0], i[1], i[2], LN_EPS),
        )?,
    );
    push(
        "mul",
        OP_TOL,
        op.run(&[x, x], &mut rng, |t, i| t.mul(i[0], i[1]))?,
    );
    push(
        "add",
        OP_TOL,
        op.run(&[x, x], &mut rng, |t, i| t.add(i[0], i[1]))?,
    );
    push(
        "scale_channels",
        OP_TOL,
        op.run(&[x, v4], &mut rng, |t, i| t.scale_channels(i[0], i[1]))?,
    );
    push(
        "split_concat",
        OP_TOL,
        op.run(&[x, x.with_channels(1)], &mut rng, |t, i| {
            let p = t.split_channels(i[0], &[1, 3])?;
            let q = t.mul(p[0], i[1])?;
            t.concat_channels(&[p[1], q])
        })?,
    );
    push(
        "global_avg_pool",
        OP_TOL,
        op.run(&[x], &mut rng, |t, i| t.global_avg_pool(i[0]))?,
    );
    push(
        "linear",
        OP_TOL,
        op.run(
            &[
                Shape::new(2, 4, 1, 1),
                Shape::new(3, 4, 1, 1),
                Shape::vector(3),
            ],
            &mut rng,
            |t, i| t.linear(i[0], i[1], i[2]),
        )?,
    );

    let composite = GradCheck::new(STEP, COMPOSITE_TOL).max_probes(COMPOSITE_PROBES);
    let n = cfg.rfa.layer_count;
    let head = (8 / (n + 1)).max(1);
    let width = (n + 1) * head;
    let rfa_cfg = cfg.rfa.with_channels(width)?;

    let mut store = ParamStore::new();
    let lo = LayerOperator::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            weights: COMPOSITE_WEIGHTS,
        },
        "lo",
        n,
        &rfa_cfg,
    )?;
    let input = Tensor::random_uniform([1, width, 15, 15], -1.0, 1.0, &mut rng);
    push(
        "layer_operator",
        COMPOSITE_TOL,
        composite.run_module(&store, input, &mut rng, |g, x| {
            let parts = g.tape.split_channels(x, &[n * head, head])?;
            Ok(lo.forward(g, parts[0], parts[1])?.out)
        })?,
    );

    let mut store = ParamStore::new();
    let rfa = Rfa::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            weights: COMPOSITE_WEIGHTS,
        },
        "rfa",
        &rfa_cfg,
    )?;
    let input = Tensor::random_uniform([1, width, 31, 31], -1.0, 1.0, &mut rng);
    push(
        "rfa",
        COMPOSITE_TOL,
        composite.run_module(&store, input, &mut rng, |g, x| rfa.forward(g, x))?,
    );

    let block_cfg = ModelConfig {
        layer_scale_init: 1.0,
        ..cfg.clone()
    };
    let mut store = ParamStore::new();
    let block = BasicBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            weights: COMPOSITE_WEIGHTS,
        },
        "block",
        width,
        &block_cfg,
    )?;
    let input = Tensor::random_uniform([1, width, 16, 16], -1.0, 1.0, &mut rng);
    push(
        "basic_block",
        COMPOSITE_TOL,
        composite.run_module(&store, input, &mut rng, |g, x| block.forward(g, x))?,
    );

    let model = Model::<f64>::build(cfg, &mut rng)?;
    let input = Tensor::random_uniform([1, 3, input_size, input_size], 0.0, 1.0, &mut rng);
    let full = GradCheck::new(STEP, MODEL_TOL).max_probes(MODEL_PROBES);
    push(
        "full_model",
        MODEL_TOL,
        full.run_module(&model.store, input, &mut rng, |g, x| model.logits(g, x))?,
    );
    Ok(out)
}
