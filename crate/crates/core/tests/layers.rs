use autodiff::gradcheck::{check_gradients, DEFAULT_EPS};
use autodiff::{Float, Padding, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splinenet::decisions::{DecisionKind, DiffusionSchedule};
use splinenet::layers::{ExecPath, KnotRank, ModelKind, SplineLayerConfig};
use splinenet::models::{LayerSpec, ModelSpec, Network};
use splinenet::Error;

fn small_spec(cfg: &SplineLayerConfig) -> ModelSpec {
    let dense_cfg = SplineLayerConfig { rank: KnotRank::R4, ..cfg.clone() };
    ModelSpec {
        name: "small".into(),
        input: vec![6, 6, 2],
        layers: vec![
            LayerSpec::Conv { filters: 3, kernel: 3, spline: Some(cfg.clone()) },
            LayerSpec::Relu,
            LayerSpec::Conv { filters: 4, kernel: 3, spline: Some(cfg.clone()) },
            LayerSpec::MaxPool,
            LayerSpec::Dense { units: 5, spline: Some(dense_cfg) },
            LayerSpec::Dense { units: 3, spline: None },
        ],
    }
}

fn all_configs() -> Vec<SplineLayerConfig> {
    let mut out = Vec::new();
    for model in [ModelKind::Dynamic, ModelKind::Hierarchical] {
        for decision in [DecisionKind::Dot, DecisionKind::Conv] {
            for rank in [KnotRank::R3, KnotRank::R4] {
                for knots in [2, 3, 5] {
                    let mut cfg = SplineLayerConfig::new(model, decision, rank, knots);
                    cfg.diffusion = DiffusionSchedule::Constant(0.875);
                    out.push(cfg);
                }
            }
        }
    }
    out
}

/// Larger decision weights so positions spread over the whole interval.
fn spread_params<T: Float>(net: &Network, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
    let mut params: Vec<Tensor<T>> = net.init_params(0.05, rng).unwrap();
    for (spec, p) in net.param_specs().iter().zip(params.iter_mut()) {
        if spec.name.contains("theta") {
            *p = Tensor::from_fn(spec.shape.clone(), |_| T::cst(rng.random_range(-4.0..4.0)));
        }
        if spec.name.contains("bias") {
            *p = Tensor::from_fn(spec.shape.clone(), |_| T::cst(rng.random_range(-0.1..0.1)));
        }
    }
    params
}

fn rel_diff<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    a.max_abs_diff(b) / scale.max(1e-30)
}

fn check_paths<T: Float>(tol: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for cfg in all_configs() {
        let net = Network::build(&small_spec(&cfg)).unwrap();
        let params = spread_params::<T>(&net, &mut rng);
        let x = Tensor::from_fn([4, 6, 6, 2], |_| T::cst(rng.random_range(-1.0..1.0)));
        let (a, pa) = net.predict(&params, &x, ExecPath::Batched).unwrap();
        let (b, pb) = net.predict(&params, &x, ExecPath::PerSample).unwrap();
        assert_eq!(a.shape(), &[4, 3]);
        for n in 0..4 {
            let row = |t: &Tensor<T>| Tensor::from_fn([3], |j| t.at(&[n, j]));
            let r = rel_diff(&row(&a), &row(&b));
            assert!(r <= tol, "{cfg:?}: sample {n} rel diff {r}");
        }
        for (p, q) in pa.iter().zip(&pb) {
            assert!(rel_diff(p, q) <= tol, "{cfg:?}: positions differ");
        }
    }
}

#[test]
fn batched_and_per_sample_paths_agree_f64() {
    check_paths::<f64>(1e-10, 1);
}

#[test]
fn batched_and_per_sample_paths_agree_f32() {
    check_paths::<f32>(1e-5, 2);
}

/// Spline layer parameters reconstructed for a direct per-sample oracle:
/// conv of each sample with its own weights from `SplineBank`.
#[test]
fn conv_layer_matches_explicit_weight_generation() {
    use splinenet::spline::SplineBank;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rank in [KnotRank::R3, KnotRank::R4] {
        let cfg = SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Dot, rank, 4);
        let spec = ModelSpec {
            name: "one".into(),
            input: vec![5, 5, 2],
            layers: vec![LayerSpec::Conv { filters: 4, kernel: 3, spline: Some(cfg) }],
        };
        let net = Network::build(&spec).unwrap();
        let params = spread_params::<f64>(&net, &mut rng);
        let x = Tensor::from_fn([3, 5, 5, 2], |_| rng.random_range(-1.0..1.0));
        let (y, pos) = net.predict(&params, &x, ExecPath::Batched).unwrap();
        let [w, b] = [&params[0], &params[1]];
        for n in 0..3 {
            let xn = Tensor::from_fn([1, 5, 5, 2], |i| x.data()[n * 50 + i]);
            let (wn, bn) = match rank {
                KnotRank::R4 => {
                    let phi = pos[0].at(&[n, 0]);
                    let wb = SplineBank::new(w.clone().reshape([4, 72]).unwrap(), 3).unwrap();
                    let bb = SplineBank::new(b.clone(), 3).unwrap();
                    (wb.eval(phi).unwrap().into_data(), bb.eval(phi).unwrap().into_data())
                }
                KnotRank::R3 => {
                    let mut wn = vec![0.0; 72];
                    let mut bn = vec![0.0; 4];
                    for j in 0..4 {
                        let phi = pos[0].at(&[n, j]);
                        let wb = SplineBank::new(Tensor::from_fn([4, 18], |i| w.data()[i * 4 + j]), 3).unwrap();
                        let bb = SplineBank::new(Tensor::from_fn([4], |k| b.data()[k * 4 + j]), 3).unwrap();
                        for (e, v) in wb.eval(phi).unwrap().data().iter().enumerate() {
                            wn[e * 4 + j] = *v;
                        }
                        bn[j] = bb.eval(phi).unwrap().item();
                    }
                    (wn, bn)
                }
            };
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(xn);
            let wv = tape.constant(Tensor::new([3, 3, 2, 4], wn).unwrap());
            let bv = tape.constant(Tensor::new([4], bn).unwrap());
            let o = tape.conv2d(xv, wv, 1, Padding::Same).unwrap();
            let o = tape.add_bias(o, bv).unwrap();
            let got = Tensor::from_fn([100], |i| y.data()[n * 100 + i]);
            let want = tape.value(o).clone().reshape([100]).unwrap();
            assert!(rel_diff(&want, &got) <= 1e-10, "{rank:?} sample {n}");
        }
    }
}

#[test]
fn identical_knots_give_plain_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cfg in all_configs() {
        let spline = Network::build(&small_spec(&cfg)).unwrap();
        let mut plain_spec = small_spec(&cfg);
        for l in &mut plain_spec.layers {
            match l {
                LayerSpec::Conv { spline, .. } | LayerSpec::Dense { spline, .. } => *spline = None,
                _ => {}
            }
        }
        let plain = Network::build(&plain_spec).unwrap();
        let base: Vec<Tensor<f64>> = plain.init_params(0.05, &mut rng).unwrap();
        let params = spread_params::<f64>(&spline, &mut rng);
        let params = spline.degenerate_from(&params, &plain, &base).unwrap();
        let x = Tensor::from_fn([3, 6, 6, 2], |_| rng.random_range(-1.0..1.0));
        let (want, _) = plain.predict(&base, &x, ExecPath::Batched).unwrap();
        for path in [ExecPath::Batched, ExecPath::PerSample] {
            let (got, _) = spline.predict(&params, &x, path).unwrap();
            assert!(want.max_abs_diff(&got) <= 1e-12, "{cfg:?} {path:?} {}", want.max_abs_diff(&got));
        }
    }
}

#[test]
fn frozen_decisions_share_one_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Dot, KnotRank::R4, 3);
    let spec =
        ModelSpec { name: "dense".into(), input: vec![2, 2, 1], layers: vec![LayerSpec::Dense { units: 3, spline: Some(cfg) }] };
    let net = Network::build(&spec).unwrap();
    let mut params: Vec<Tensor<f64>> = net.init_params(0.05, &mut rng).unwrap();
    let theta = net.param_specs().iter().position(|p| p.name == "dense1.theta").unwrap();
    params[theta] = Tensor::zeros(params[theta].shape().to_vec());
    let x = Tensor::from_fn([5, 2, 2, 1], |_| rng.random_range(-1.0..1.0));
    let (y, pos) = net.predict(&params, &x, ExecPath::Batched).unwrap();
    assert!(pos[0].data().iter().all(|&p| p == 0.5));
    let w = splinenet::spline::SplineBank::new(params[0].clone(), 2).unwrap().eval(0.5).unwrap();
    for n in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| x.data()[n * 4 + i] * w.at(&[i, j])).sum();
            assert!((y.at(&[n, j]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn rank3_with_one_filter_is_rank4() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mk = |rank| ModelSpec {
        name: "f1".into(),
        input: vec![4, 4, 2],
        layers: vec![LayerSpec::Conv {
            filters: 1,
            kernel: 3,
            spline: Some(SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Conv, rank, 4)),
        }],
    };
    let r3 = Network::build(&mk(KnotRank::R3)).unwrap();
    let r4 = Network::build(&mk(KnotRank::R4)).unwrap();
    let params = spread_params::<f64>(&r3, &mut rng);
    let x = Tensor::from_fn([3, 4, 4, 2], |_| rng.random_range(-1.0..1.0));
    let (a, _) = r3.predict(&params, &x, ExecPath::PerSample).unwrap();
    let (b, _) = r4.predict(&params, &x, ExecPath::PerSample).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tied_positions_index_all_filters_alike() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Dot, KnotRank::R3, 3);
    let spec = ModelSpec {
        name: "tied".into(),
        input: vec![3, 3, 1],
        layers: vec![LayerSpec::Conv { filters: 4, kernel: 3, spline: Some(cfg) }],
    };
    let net = Network::build(&spec).unwrap();
    let mut params = spread_params::<f64>(&net, &mut rng);
    let row: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
    params[2] = Tensor::from_fn([9, 4], |i| row[i / 4]);
    let x = Tensor::from_fn([2, 3, 3, 1], |_| rng.random_range(-1.0..1.0));
    let (_, pos) = net.predict(&params, &x, ExecPath::Batched).unwrap();
    for n in 0..2 {
        assert!((0..4).all(|j| pos[0].at(&[n, j]) == pos[0].at(&[n, 0])));
    }
}

#[test]
fn endpoint_position_uses_first_knot() {
    // A hugely negative decision drives the sigmoid to 0 in f64.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Conv, KnotRank::R4, 3);
    let spec = ModelSpec {
        name: "end".into(),
        input: vec![4, 4, 1],
        layers: vec![LayerSpec::Conv { filters: 2, kernel: 3, spline: Some(cfg) }],
    };
    let net = Network::build(&spec).unwrap();
    let mut params = spread_params::<f64>(&net, &mut rng);
    params[2] = Tensor::full([1, 1, 1, 1], -1e6);
    let x = Tensor::ones([1, 4, 4, 1]);
    let (y, pos) = net.predict(&params, &x, ExecPath::Batched).unwrap();
    assert_eq!(pos[0].item(), 0.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let w = tape.constant(Tensor::from_fn([3, 3, 1, 2], |i| params[0].data()[i]));
    let b = tape.constant(Tensor::from_fn([2], |i| params[1].data()[i]));
    let o = tape.conv2d(xv, w, 1, Padding::Same).unwrap();
    let o = tape.add_bias(o, b).unwrap();
    assert!(tape.value(o).max_abs_diff(&y) <= 1e-15);
}

#[test]
fn invalid_configurations() {
    let mut cfg = SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Dot, KnotRank::R3, 3);
    let spec = ModelSpec {
        name: "bad".into(),
        input: vec![4, 4, 1],
        layers: vec![LayerSpec::Dense { units: 2, spline: Some(cfg.clone()) }],
    };
    assert!(matches!(Network::build(&spec), Err(Error::Config(_))));
    cfg.degree = 3;
    cfg.knots = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert_eq!(SplineLayerConfig::new(ModelKind::Dynamic, DecisionKind::Dot, KnotRank::R4, 2).degree, 1);
}

/// Two spline layers without kinks: rank-3 conv then dense, so positions
/// pass through a learned match matrix.
#[test]
fn two_layer_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for model in [ModelKind::Dynamic, ModelKind::Hierarchical] {
        for decision in [DecisionKind::Dot, DecisionKind::Conv] {
            let mut cfg = SplineLayerConfig::new(model, decision, KnotRank::R3, 4);
            cfg.diffusion = DiffusionSchedule::Constant(0.875);
            let dense = SplineLayerConfig { rank: KnotRank::R4, ..cfg.clone() };
            let spec = ModelSpec {
                name: "grad".into(),
                input: vec![4, 4, 2],
                layers: vec![
                    LayerSpec::Conv { filters: 2, kernel: 3, spline: Some(cfg) },
                    LayerSpec::Dense { units: 3, spline: Some(dense) },
                    LayerSpec::Dense { units: 3, spline: None },
                ],
            };
            let net = Network::build(&spec).unwrap();
            let params = spread_params::<f64>(&net, &mut rng);
            let x = Tensor::from_fn([2, 4, 4, 2], |_| rng.random_range(-1.0..1.0));
            let mut inputs = params.clone();
            inputs.push(x);
            let np = params.len();
            let report = check_gradients(&inputs, DEFAULT_EPS, |t, v: &[Var]| {
                let out = net.forward(t, &v[..np], v[np], None, ExecPath::Batched)?;
                let loss = t.softmax_cross_entropy(out.logits, &[0, 2])?;
                let pos: Vec<Var> = out.positions.iter().map(|p| t.sum(p.phi)).collect();
                let mut total = loss;
                for p in pos {
                    total = t.add(total, p)?;
                }
                Ok::<_, Error>(total)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{model:?} {decision:?}: {report:?}");
        }
    }
}
