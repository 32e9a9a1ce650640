use uniconv::model::softmax_cross_entropy;
use uniconv::{Error, Graph, Model, ModelConfig, Rng, Shape, Tensor};

fn tiny<T: uniconv::Real>(seed: u64) -> Model<T> {
    Model::build(&ModelConfig::tiny(), &mut Rng::new(seed)).unwrap()
}

#[test]
fn logits_shape_and_finiteness() {
    let m = tiny::<f32>(0);
    let x = Tensor::random_uniform([2, 3, 64, 64], 0.0, 1.0, &mut Rng::new(1));
    let y = m.forward(&x).unwrap();
    assert_eq!(y.shape(), Shape::new(2, 10, 1, 1));
    assert!(y.is_finite());
}

#[test]
fn stage_extents_follow_stride_law() {
    let m = tiny::<f32>(0);
    let mut g = Graph::new(&m.store);
    let x = g.input(Tensor::zeros([1, 3, 64, 64]));
    let outs = m.stage_outputs(&mut g, x).unwrap();
    for (i, &o) in outs.iter().enumerate() {
        let s = g.tape.shape(o).unwrap();
        assert_eq!(
            (s.channels, s.height, s.width),
            (m.cfg.stage_channels[i], 64 / (4 << i), 64 / (4 << i))
        );
    }
}

#[test]
fn stem_and_downsample_shapes() {
    let mut cfg = ModelConfig::tiny();
    cfg.stage_channels = [64, 128, 256, 512];
    let m = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
    let mut g = Graph::new(&m.store);
    let x = g.input(Tensor::zeros([1, 3, 224, 224]));
    let s = m.stem_forward(&mut g, x).unwrap();
    assert_eq!(g.tape.shape(s).unwrap(), Shape::new(1, 64, 56, 56));
    let d = m.downsample_forward(0, &mut g, s).unwrap();
    assert_eq!(g.tape.shape(d).unwrap(), Shape::new(1, 128, 28, 28));

    let small = g.input(Tensor::zeros([1, 64, 2, 2]));
    let d = m.downsample_forward(0, &mut g, small).unwrap();
    assert_eq!(g.tape.shape(d).unwrap(), Shape::new(1, 128, 1, 1));
    let odd = g.input(Tensor::zeros([1, 64, 3, 3]));
    assert!(m.downsample_forward(0, &mut g, odd).is_err());

    let m = tiny::<f32>(0);
    let mut g = Graph::new(&m.store);
    let x = g.input(Tensor::zeros([1, 3, 64, 64]));
    let s = m.stem_forward(&mut g, x).unwrap();
    assert_eq!(g.tape.shape(s).unwrap(), Shape::new(1, 8, 16, 16));
    let bad = g.input(Tensor::zeros([1, 3, 30, 30]));
    assert!(m.stem_forward(&mut g, bad).is_err());
    assert!(matches!(
        m.forward(&Tensor::zeros([1, 3, 48, 48])),
        Err(Error::Input(_))
    ));
}

#[test]
fn zero_layer_scales_make_blocks_identity() {
    let mut m = tiny::<f64>(2);
    let names: Vec<String> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".scale"))
        .map(|(_, p)| p.name.clone())
        .collect();
    assert_eq!(names.len(), 3 * 5);
    for n in &names {
        let id = m.store.find(n).unwrap();
        *m.store.get_mut(id) = Tensor::zeros(m.store.get(id).shape());
    }
    for block in m.blocks() {
        let mut g = Graph::new(&m.store);
        let c = block.channels;
        let x = Tensor::random_normal([2, c, 8, 8], 1.0, &mut Rng::new(3));
        let xin = g.input(x.clone());
        let y = block.forward(&mut g, xin).unwrap();
        assert_eq!(g.tape.value(y).unwrap(), &x);
    }
}

#[test]
fn layer_scale_bounds_branch_output() {
    let m = tiny::<f64>(2);
    for (_, p) in m.store.iter().filter(|(_, p)| p.name.ends_with(".scale")) {
        assert!(p.value.data().iter().all(|&v| v == 1e-6));
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let m = tiny::<f64>(4);
    let mut rng = Rng::new(5);
    let a = Tensor::<f64>::random_uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let b = Tensor::<f64>::random_uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let stack = |p: &Tensor<f64>, q: &Tensor<f64>| {
        Tensor::new([2, 3, 32, 32], [p.data(), q.data()].concat()).unwrap()
    };
    let (ab, ba) = (stack(&a, &b), stack(&b, &a));
    let (yab, yba) = (m.forward(&ab).unwrap(), m.forward(&ba).unwrap());
    assert_eq!(&yab.data()[..10], &yba.data()[10..]);
    assert_eq!(&yab.data()[10..], &yba.data()[..10]);
}

#[test]
fn building_is_deterministic() {
    let (a, b) = (tiny::<f32>(9), tiny::<f32>(9));
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, tiny::<f32>(10).store);
}

#[test]
fn initialization_policy() {
    let m = tiny::<f32>(1);
    for (_, p) in m.store.iter() {
        let d = p.value.data();
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gamma") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        } else if p.name.ends_with(".weight") {
            assert!(d.iter().all(|&v| v.abs() <= 0.04), "{}", p.name);
        }
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = ModelConfig::tiny();
    cfg.stage_channels[0] = 10;
    let err = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap_err();
    assert!(err.to_string().contains("stage_channels"), "{err}");
    let mut cfg = ModelConfig::tiny();
    cfg.num_classes = 0;
    assert!(Model::<f32>::build(&cfg, &mut Rng::new(0))
        .unwrap_err()
        .to_string()
        .contains("num_classes"));
    let mut cfg = ModelConfig::tiny();
    cfg.stage_depths[1] = 0;
    assert!(Model::<f32>::build(&cfg, &mut Rng::new(0))
        .unwrap_err()
        .to_string()
        .contains("stage_depths[1]"));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut m = tiny::<f32>(3);
    let before = m.store.clone();
    let x = Tensor::random_uniform([2, 3, 32, 32], 0.0, 1.0, &mut Rng::new(0));
    m.train_step(&x, &[0, 1], 0.0).unwrap();
    assert_eq!(m.store, before);
}

#[test]
fn cross_entropy_checks_labels() {
    let logits = Tensor::<f64>::zeros([2, 10, 1, 1]);
    let (loss, grad) = softmax_cross_entropy(&logits, &[3, 7]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    assert!((grad.get(0, 3, 0, 0) - (0.1 - 1.0) / 2.0).abs() < 1e-15);
    assert!(softmax_cross_entropy(&logits, &[3, 10]).is_err());
    assert!(softmax_cross_entropy(&logits, &[3]).is_err());
}

#[test]
fn small_sgd_step_descends() {
    let mut m = tiny::<f64>(0);
    let x = Tensor::random_uniform([4, 3, 32, 32], 0.0, 1.0, &mut Rng::new(1));
    let labels = [0, 1, 2, 3];
    let first = m.train_step(&x, &labels, 1e-3).unwrap();
    let second = m.train_step(&x, &labels, 0.0).unwrap();
    assert!(second < first, "{first} -> {second}");
}
