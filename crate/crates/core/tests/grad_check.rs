use uniconv::gradcheck::GradCheck;
use uniconv::kernels::ConvGeometry;
use uniconv::layers::LN_EPS;
use uniconv::model::BasicBlock;
use uniconv::params::Init;
use uniconv::rfa::LayerOperator;
use uniconv::{
    DisTopology, Model, ModelConfig, ParamStore, Rfa, RfaConfig, Rng, Shape, Tensor, WeightInit,
};

const OP_TOL: f64 = 1e-5;
const EPS: f64 = 1e-4;
const SHAPES_PER_OP: usize = 10;

fn check() -> GradCheck {
    GradCheck::new(EPS, OP_TOL)
}

fn random_shape(rng: &mut Rng, channels: usize) -> Shape {
    Shape::new(
        1 + rng.below(2),
        channels,
        3 + rng.below(6),
        3 + rng.below(6),
    )
}

fn assert_pass(name: &str, r: &uniconv::gradcheck::GradCheckReport) {
    assert!(
        r.pass,
        "{name}: max_rel_err {:e} ({:?})",
        r.max_rel_err, r.per_input
    );
}

#[test]
fn conv2d_variants() {
    let mut rng = Rng::new(1);
    // (c_in, c_out, kernel, stride, padding, groups)
    let variants = [
        (3, 4, 3, 1, 1, 1),
        (4, 6, 3, 2, 1, 2),
        (5, 5, 7, 1, 3, 5),
        (4, 3, 1, 1, 0, 1),
        (2, 4, 5, 2, 0, 2),
    ];
    for &(ci, co, k, stride, pad, groups) in &variants {
        for _ in 0..SHAPES_PER_OP {
            let mut xs = random_shape(&mut rng, ci);
            xs.height += k;
            xs.width += k;
            let geo = ConvGeometry::new(stride, pad, groups);
            let r = check()
                .run(
                    &[xs, Shape::new(co, ci / groups, k, k), Shape::vector(co)],
                    &mut rng,
                    |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), geo),
                )
                .unwrap();
            assert_pass(&format!("conv {ci}->{co} k{k} s{stride} g{groups}"), &r);
        }
    }
}

#[test]
fn depthwise_7x7() {
    let mut rng = Rng::new(2);
    let r = check()
        .run(
            &[
                Shape::new(1, 3, 9, 9),
                Shape::new(3, 1, 7, 7),
                Shape::vector(3),
            ],
            &mut rng,
            |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), ConvGeometry::same(7, 3)),
        )
        .unwrap();
    assert_pass("dw7x7", &r);
}

#[test]
fn gelu() {
    let mut rng = Rng::new(3);
    for _ in 0..SHAPES_PER_OP {
        let s = random_shape(&mut rng, 3);
        let r = check()
            .min_abs_input(1e-3)
            .run(&[s], &mut rng, |t, ids| t.gelu(ids[0]))
            .unwrap();
        assert_pass("gelu", &r);
    }
}

#[test]
fn layer_norm() {
    let mut rng = Rng::new(4);
    for _ in 0..SHAPES_PER_OP {
        let c = 3 + rng.below(6);
        let s = random_shape(&mut rng, c);
        let c = Shape::vector(s.channels);
        let r = check()
            .run(&[s, c, c], &mut rng, |t, ids| {
                t.layer_norm(ids[0], ids[1], ids[2], LN_EPS)
            })
            .unwrap();
        assert_pass("layer_norm", &r);
    }
}

#[test]
fn layer_norm_with_gradient_floor() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let c = Shape::vector(8);
        let r = check()
            .min_abs_grad(1e-3)
            .run(&[Shape::new(2, 8, 7, 7), c, c], &mut rng, |t, ids| {
                t.layer_norm(ids[0], ids[1], ids[2], LN_EPS)
            })
            .unwrap();
        assert_pass("layer_norm", &r);
        let (a, b) = r.worst_pairs[0];
        assert!(a.abs() >= 1e-3 && b.abs() > 0.0);
    }
}

#[test]
fn elementwise_mul_and_add() {
    let mut rng = Rng::new(5);
    for _ in 0..SHAPES_PER_OP {
        let s = random_shape(&mut rng, 3);
        let r = GradCheck::new(EPS, 1e-6)
            .run(&[s, s], &mut rng, |t, ids| t.mul(ids[0], ids[1]))
            .unwrap();
        assert!(r.max_rel_err < 1e-7, "mul {:e}", r.max_rel_err);
        let r = GradCheck::new(EPS, 1e-6)
            .run(&[s, s], &mut rng, |t, ids| t.add(ids[0], ids[1]))
            .unwrap();
        assert_pass("add", &r);
    }
}

#[test]
fn scale_channels() {
    let mut rng = Rng::new(6);
    for _ in 0..SHAPES_PER_OP {
        let s = random_shape(&mut rng, 4);
        let r = check()
            .run(&[s, Shape::vector(4)], &mut rng, |t, ids| {
                t.scale_channels(ids[0], ids[1])
            })
            .unwrap();
        assert_pass("scale_channels", &r);
    }
}

#[test]
fn split_and_concat() {
    let mut rng = Rng::new(7);
    for _ in 0..SHAPES_PER_OP {
        let s = random_shape(&mut rng, 6);
        let r = check()
            .run(&[s, s.with_channels(2)], &mut rng, |t, ids| {
                let parts = t.split_channels(ids[0], &[1, 2, 3])?;
                let prod = t.mul(parts[1], ids[1])?;
                t.concat_channels(&[parts[2], prod, parts[0]])
            })
            .unwrap();
        assert_pass("split/concat", &r);
    }
}

#[test]
fn pool_and_linear() {
    let mut rng = Rng::new(8);
    for _ in 0..SHAPES_PER_OP {
        let s = random_shape(&mut rng, 5);
        let r = GradCheck::new(EPS, 1e-6)
            .run(&[s], &mut rng, |t, ids| t.global_avg_pool(ids[0]))
            .unwrap();
        assert_pass("global_avg_pool", &r);
        let r = GradCheck::new(EPS, 1e-6)
            .run(
                &[
                    Shape::new(s.batch, 5, 1, 1),
                    Shape::new(3, 5, 1, 1),
                    Shape::vector(3),
                ],
                &mut rng,
                |t, ids| t.linear(ids[0], ids[1], ids[2]),
            )
            .unwrap();
        assert_pass("linear", &r);
    }
}

/// Weights large enough that every path contributes well above rounding.
const CHECK_WEIGHTS: WeightInit = WeightInit::Uniform { lo: -0.5, hi: 0.5 };

fn composite(tol: f64) -> GradCheck {
    GradCheck::new(EPS, tol).max_probes(24)
}

#[test]
fn layer_operator() {
    let mut rng = Rng::new(9);
    let cfg = RfaConfig::formula(3, 8).unwrap();
    for (n, topology) in [
        (1, DisTopology::Sum),
        (2, DisTopology::Sum),
        (2, DisTopology::Sequential),
    ] {
        let cfg = cfg.clone().with_topology(topology);
        let mut store = ParamStore::new();
        let lo = LayerOperator::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                weights: CHECK_WEIGHTS,
            },
            "lo",
            n,
            &cfg,
        )
        .unwrap();
        let x = Tensor::random_uniform([1, (n + 1) * 2, 13, 13], -1.0, 1.0, &mut rng);
        let r = composite(1e-4)
            .run_module(&store, x, &mut rng, |g, x| {
                let parts = g.tape.split_channels(x, &[n * 2, 2])?;
                Ok(lo.forward(g, parts[0], parts[1])?.out)
            })
            .unwrap();
        assert_pass(&format!("layer operator {n} {topology:?}"), &r);
    }
}

#[test]
fn receptive_field_aggregator() {
    let mut rng = Rng::new(10);
    let cfg = RfaConfig::formula(3, 8).unwrap();
    let mut store = ParamStore::new();
    let rfa = Rfa::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            weights: CHECK_WEIGHTS,
        },
        "rfa",
        &cfg,
    )
    .unwrap();
    let x = Tensor::random_uniform([1, 8, 31, 31], -1.0, 1.0, &mut rng);
    let r = composite(1e-4)
        .run_module(&store, x, &mut rng, |g, x| rfa.forward(g, x))
        .unwrap();
    assert_pass("rfa", &r);
}

#[test]
fn basic_block() {
    let mut rng = Rng::new(11);
    let cfg = ModelConfig {
        layer_scale_init: 1.0,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::new();
    let block = BasicBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            weights: CHECK_WEIGHTS,
        },
        "block",
        8,
        &cfg,
    )
    .unwrap();
    let x = Tensor::random_uniform([1, 8, 16, 16], -1.0, 1.0, &mut rng);
    let r = composite(1e-4)
        .run_module(&store, x, &mut rng, |g, x| block.forward(g, x))
        .unwrap();
    assert_pass("basic block", &r);
}

#[test]
fn full_tiny_model() {
    let mut rng = Rng::new(12);
    let cfg = ModelConfig::tiny();
    let model =
        Model::<f64>::build_with(&cfg, &mut rng, WeightInit::TruncNormal { std: 0.02 }).unwrap();
    let x = Tensor::random_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let r = GradCheck::new(EPS, 1e-3)
        .max_probes(8)
        .run_module(&model.store, x, &mut rng, |g, x| model.logits(g, x))
        .unwrap();
    assert_pass("tiny model", &r);
}
