use gamn::nn::{build_mapper, Layer, LinearLayer, Network, Role};
use gamn::regularizers::{
    classical_l2, gradient_penalty, interpolate, interpolate_with, l1_reg, l2_reg,
    mapper_regularizer, RegConfig, RegKind,
};
use gamn::trainer::{TrainConfig, Trainer};
use gamn::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_mapper(weight: Tensor) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (i, o) = weight.shape();
    let mut lin = LinearLayer::new(i, o, &mut rng);
    lin.weight = weight;
    Network {
        role: Role::Mapper,
        input_dim: i,
        output_dim: o,
        layers: vec![Layer::Linear(lin)],
    }
}

fn gp_value(mapper: &mut Network, points: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let bound = mapper.bind(&mut tape, true).unwrap();
    let xhat = tape.variable(points.clone()).unwrap();
    let gp = gradient_penalty(&mut tape, mapper, &bound, xhat).unwrap();
    tape.item(gp)
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    Tensor::new(
        (0..shape.0 * shape.1)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        shape,
    )
    .unwrap()
}

#[test]
fn gp_scalar_linear_examples() {
    let x = Tensor::new(vec![0.3, -1.0, 2.0], (3, 1)).unwrap();
    assert!(gp_value(&mut linear_mapper(Tensor::scalar(1.0)), &x) < 1e-20);
    assert!((gp_value(&mut linear_mapper(Tensor::scalar(2.0)), &x) - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gp_on_scaled_linear_mappers(seed in any::<u64>(), d in 1usize..4, out in 1usize..5, c in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // grad_x sum_i F(x)[i] = W 1, so normalize the row sums to unit length.
        let w = random(&mut rng, (d, out));
        let sums: Vec<f64> = (0..d).map(|r| w.row(r).iter().sum()).collect();
        let norm = sums.iter().map(|s| s * s).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let unit = w.map(|v| v / norm);
        let x = random(&mut rng, (5, d));
        prop_assert!(gp_value(&mut linear_mapper(unit.clone()), &x) < 1e-20);
        let scaled = unit.map(|v| c * v);
        let want = ((c * c + 1e-12f64).sqrt() - 1.0).powi(2);
        prop_assert!((gp_value(&mut linear_mapper(scaled), &x) - want).abs() < 1e-9);
    }

    #[test]
    fn gp_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mapper = build_mapper(2, 6, 2, 3, &mut rng).unwrap();
        let x = random(&mut rng, (4, 2));
        prop_assert!(gp_value(&mut mapper, &x) >= 0.0);
    }

    #[test]
    fn norm_penalties_are_homogeneous(seed in any::<u64>(), s in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = [random(&mut rng, (1, 3)), random(&mut rng, (2, 2))];
        let eval = |scale: f64| {
            let mut tape = Tape::new();
            let nodes: Vec<_> = params.iter().map(|p| tape.parameter_tensor(p.map(|v| scale * v)).unwrap()).collect();
            let l1 = l1_reg(&mut tape, &nodes).unwrap();
            let l2 = l2_reg(&mut tape, &nodes).unwrap();
            (tape.item(l1), tape.item(l2))
        };
        let (a1, a2) = eval(1.0);
        let (b1, b2) = eval(s);
        prop_assert!((b1 - s * a1).abs() <= 1e-12 * (1.0 + b1.abs()));
        prop_assert!((b2 - s * s * a2).abs() <= 1e-12 * (1.0 + b2.abs()));
    }

    #[test]
    fn interpolation_stays_on_segments(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, (6, 2));
        let y = random(&mut rng, (6, 2));
        let draw = |seed: u64| {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = interpolate(&mut tape, &x, &y, &mut r).unwrap();
            tape.value(n).clone()
        };
        let a = draw(seed);
        let b = draw(seed);
        prop_assert_eq!(&a, &b);
        for r in 0..6 {
            // One weight per row: the offset from y is parallel to x - y.
            let t = (a.get(r, 0) - y.get(r, 0)) / (x.get(r, 0) - y.get(r, 0));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&t));
            prop_assert!((a.get(r, 1) - (t * x.get(r, 1) + (1.0 - t) * y.get(r, 1))).abs() < 1e-9);
        }
    }
}

#[test]
fn norm_penalty_hand_values() {
    let mut tape = Tape::new();
    let p = tape.parameter(vec![1.0, 2.0], (1, 2)).unwrap();
    let z = tape.parameter(vec![0.0; 3], (1, 3)).unwrap();
    let l2 = l2_reg(&mut tape, &[p]).unwrap();
    let l1 = l1_reg(&mut tape, &[p]).unwrap();
    let zl2 = l2_reg(&mut tape, &[z]).unwrap();
    let zl1 = l1_reg(&mut tape, &[z]).unwrap();
    let zc = classical_l2(&mut tape, &[z]).unwrap();
    assert_eq!(tape.item(l2), 5.0);
    assert_eq!(tape.item(l1), 3.0);
    assert_eq!(
        (tape.item(zl2), tape.item(zl1), tape.item(zc)),
        (0.0, 0.0, 0.0)
    );
    assert!(l1_reg(&mut tape, &[]).is_err());
}

#[test]
fn classical_dominates_norm_penalty_on_a_mapper() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mapper = build_mapper(2, 8, 2, 3, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = mapper.bind(&mut tape, true).unwrap();
    let norm = l2_reg(&mut tape, &bound.norm_parameters()).unwrap();
    let all = classical_l2(&mut tape, bound.parameters()).unwrap();
    assert!(tape.item(all) >= tape.item(norm));
    // gamma = 1, beta = 0 for 2 layers of width 8.
    assert_eq!(tape.item(norm), 16.0);
}

#[test]
fn interpolation_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, (3, 2));
    let y = random(&mut rng, (3, 2));
    let mut tape = Tape::new();
    let a = interpolate_with(&mut tape, &x, &y, &[1.0; 3]).unwrap();
    let b = interpolate_with(&mut tape, &x, &y, &[0.0; 3]).unwrap();
    assert_eq!(tape.value(a), &x);
    assert_eq!(tape.value(b), &y);
    assert!(interpolate_with(&mut tape, &x, &random(&mut rng, (2, 2)), &[0.5; 3]).is_err());
}

#[test]
fn regularizers_have_no_generator_gradient() {
    let kinds = [
        RegKind::GradientPenalty,
        RegKind::L1,
        RegKind::L2,
        RegKind::ClassicalL2,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in kinds {
        let mut trainer = Trainer::new(TrainConfig {
            hidden: 8,
            depth: 2,
            batch_size: 8,
            eval_samples: 8,
            reg: RegConfig::new(kind, 1.0).unwrap(),
            ..TrainConfig::default()
        })
        .unwrap();
        let (generator, mapper) = trainer.networks_mut();
        let mut generator = generator.clone();
        let mut mapper = mapper.unwrap().clone();

        // Generator parameters live on the same tape as the regularizer.
        let mut tape = Tape::new();
        let gb = generator.bind(&mut tape, true).unwrap();
        let mb = mapper.bind(&mut tape, true).unwrap();
        let z = tape.constant_tensor(random(&mut rng, (8, 2))).unwrap();
        let y = generator
            .forward(&mut tape, &gb, z, gamn::nn::Mode::Train)
            .unwrap();
        let y = tape.value(y).clone();
        let x = random(&mut rng, (8, 2));
        let reg = mapper_regularizer(&mut tape, kind, &mut mapper, &mb, &x, &y, &mut rng)
            .unwrap()
            .unwrap();
        let grads = tape.grad(reg, gb.parameters(), false).unwrap();
        for g in grads {
            assert!(tape.value(g).data().iter().all(|v| *v == 0.0), "{kind}");
        }
        let mgrads = tape.grad(reg, mb.parameters(), false).unwrap();
        assert!(
            mgrads
                .iter()
                .any(|g| tape.value(*g).data().iter().any(|v| *v != 0.0)),
            "{kind}"
        );
    }
}

#[test]
fn generator_update_ignores_the_regularizer() {
    let base = TrainConfig {
        hidden: 8,
        depth: 2,
        batch_size: 8,
        eval_samples: 8,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, (8, 2));
    let z = random(&mut rng, (8, 2));
    let grads = |reg: RegConfig| {
        let mut t = Trainer::new(TrainConfig {
            reg,
            ..base.clone()
        })
        .unwrap();
        let (report, g) = t.generator_objective(&x, &z).unwrap();
        (report.objective.to_bits(), g)
    };
    let reference = grads(RegConfig::new(RegKind::None, 0.0).unwrap());
    for kind in [
        RegKind::GradientPenalty,
        RegKind::L1,
        RegKind::L2,
        RegKind::ClassicalL2,
    ] {
        assert_eq!(
            grads(RegConfig::new(kind, 100.0).unwrap()),
            reference,
            "{kind}"
        );
    }
}
