use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Max relative error between the tape gradient and central differences.
fn fd_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let r = build(&mut t, &vs).unwrap();
        t.value(r).item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[test]
fn primitive_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![4.0, -9.0]));
    let y = tape.signed_sqrt(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, -3.0]);

    let z = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(z, 0).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let n = tape.l2_normalize(v, 0).unwrap();
    let got = tape.value(n).data();
    assert!((got[0] - 0.6).abs() < 1e-8 && (got[1] - 0.8).abs() < 1e-8);
}

#[test]
fn shape_errors_name_the_kind() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.mul(a, c).is_err());
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.ln(x), Err(AutodiffError::Domain { op: "log", .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.tanh(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0]);

    let mut tape = Tape::new();
    let z = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let l = tape.cross_entropy(z, &[0], &[1.0]).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(z).unwrap(), &[-0.5, 0.5]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_roots() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(AutodiffError::NotScalar(_))));
    let mut other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::ForeignVar);
}

#[test]
fn signed_sqrt_gradient_at_zero_is_finite() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0]));
    let y = tape.signed_sqrt(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap()[0], 1.0 / (2.0 * SIGNED_SQRT_FLOOR));
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap(), &[7.0]);
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let build = |tape: &mut Tape, x: Var| {
        let t = tape.tanh(x).unwrap();
        let r1 = tape.sum(t).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        let r2 = weighted_sum(tape, s, 5).unwrap();
        (r1, r2)
    };
    let mut tape = Tape::new();
    let x = tape.param(a0.clone());
    let (r1, r2) = build(&mut tape, x);
    let both = tape.add(r1, r2).unwrap();
    let joint = tape.backward(both).unwrap().get(x).unwrap().to_vec();
    let g1 = tape.backward(r1).unwrap().get(x).unwrap().to_vec();
    let g2 = tape.backward(r2).unwrap().get(x).unwrap().to_vec();
    for ((j, a), b) in joint.iter().zip(&g1).zip(&g2) {
        assert!((j - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    type Case = (&'static str, Vec<Vec<usize>>, (f64, f64), Box<Build>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                weighted_sum(t, o, 1)
            }),
        ),
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                weighted_sum(t, o, 2)
            }),
        ),
        (
            "add_bias",
            vec![vec![3, 4], vec![4]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                weighted_sum(t, o, 3)
            }),
        ),
        (
            "sub",
            vec![vec![2, 5], vec![2, 5]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.sub(v[0], v[1])?;
                weighted_sum(t, o, 4)
            }),
        ),
        (
            "mul",
            vec![vec![2, 5], vec![2, 5]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1])?;
                weighted_sum(t, o, 5)
            }),
        ),
        (
            "scale_rows",
            vec![vec![3, 4], vec![3, 1]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.scale_rows(v[0], v[1])?;
                weighted_sum(t, o, 6)
            }),
        ),
        (
            "scale",
            vec![vec![6]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.scale(v[0], -2.5)?;
                weighted_sum(t, o, 7)
            }),
        ),
        (
            "tanh",
            vec![vec![2, 3]],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let o = t.tanh(v[0])?;
                weighted_sum(t, o, 8)
            }),
        ),
        (
            "sigmoid",
            vec![vec![2, 3]],
            (-3.0, 3.0),
            Box::new(|t, v| {
                let o = t.sigmoid(v[0])?;
                weighted_sum(t, o, 9)
            }),
        ),
        (
            "relu",
            vec![vec![2, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.relu(v[0])?;
                weighted_sum(t, o, 10)
            }),
        ),
        (
            "softmax_axis1",
            vec![vec![3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let o = t.softmax(v[0], 1)?;
                weighted_sum(t, o, 11)
            }),
        ),
        (
            "softmax_axis0",
            vec![vec![3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let o = t.softmax(v[0], 0)?;
                weighted_sum(t, o, 12)
            }),
        ),
        (
            "signed_sqrt",
            vec![vec![2, 4]],
            (0.2, 2.0),
            Box::new(|t, v| {
                let n = t.scale(v[0], -1.0)?;
                let c = t.concat(&[v[0], n], 1)?;
                let o = t.signed_sqrt(c)?;
                weighted_sum(t, o, 13)
            }),
        ),
        (
            "l2_normalize",
            vec![vec![3, 4]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.l2_normalize(v[0], 1)?;
                weighted_sum(t, o, 14)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.concat(&[v[0], v[1]], 1)?;
                weighted_sum(t, o, 15)
            }),
        ),
        (
            "concat_axis0",
            vec![vec![2, 3], vec![1, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.concat(&[v[0], v[1]], 0)?;
                weighted_sum(t, o, 16)
            }),
        ),
        (
            "log",
            vec![vec![5]],
            (0.3, 3.0),
            Box::new(|t, v| {
                let o = t.ln(v[0])?;
                weighted_sum(t, o, 17)
            }),
        ),
        (
            "cross_entropy",
            vec![vec![3, 5]],
            (-2.0, 2.0),
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 4, 0], &[0.5, 1.0, 0.25])),
        ),
        (
            "mean",
            vec![vec![2, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let s = t.mul(v[0], v[0])?;
                t.mean(s)
            }),
        ),
        (
            "sum",
            vec![vec![2, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let s = t.tanh(v[0])?;
                t.sum(s)
            }),
        ),
        (
            "clamp",
            vec![vec![8]],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let o = t.clamp(v[0], -0.9, 0.9)?;
                weighted_sum(t, o, 18)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.reshape(v[0], vec![3, 4])?;
                let o = t.softmax(o, 1)?;
                weighted_sum(t, o, 19)
            }),
        ),
        (
            "repeat_rows",
            vec![vec![2, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.repeat_rows(v[0], 3)?;
                weighted_sum(t, o, 20)
            }),
        ),
        (
            "segment_sum",
            vec![vec![6, 2]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.segment_sum(v[0], 3)?;
                weighted_sum(t, o, 21)
            }),
        ),
        (
            "slice_cols",
            vec![vec![3, 5]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.slice_cols(v[0], 1, 3)?;
                weighted_sum(t, o, 22)
            }),
        ),
        (
            "gather",
            vec![vec![4, 3]],
            (-1.0, 1.0),
            Box::new(|t, v| {
                let o = t.gather(v[0], &[2, 0, 2, 3])?;
                weighted_sum(t, o, 23)
            }),
        ),
    ];
    for (name, shapes, (lo, hi), build) in &cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, *lo, *hi)).collect();
            let err = fd_error(&inputs, build.as_ref());
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn composite_three_layer_network_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[4, 5], -1.0, 1.0),
            random(&mut rng, &[5, 6], -1.0, 1.0),
            random(&mut rng, &[6], -0.5, 0.5),
            random(&mut rng, &[6, 4], -1.0, 1.0),
            random(&mut rng, &[4, 3], -1.0, 1.0),
        ];
        let build: Box<Build> = Box::new(|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h)?;
            let h = t.matmul(h, v[3])?;
            let h = t.sigmoid(h)?;
            let h = t.matmul(h, v[4])?;
            t.cross_entropy(h, &[0, 2, 1, 1], &[0.25; 4])
        });
        let err = fd_error(&inputs, build.as_ref());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn lstm_step_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 3], 0.7));
    let h = tape.constant(Tensor::zeros(&[1, 2]));
    let c = tape.constant(Tensor::zeros(&[1, 2]));
    let cell = LstmVars {
        weight: tape.constant(Tensor::zeros(&[5, 8])),
        bias: tape.constant(Tensor::zeros(&[8])),
    };
    let (h2, c2) = lstm_step(&mut tape, x, h, c, cell).unwrap();
    assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(c2).data(), &[0.0, 0.0]);

    let mut bias = vec![0.0; 8];
    bias[2] = 10.0;
    bias[3] = 10.0;
    let c = tape.constant(Tensor::filled(&[1, 2], 1.0));
    let cell = LstmVars {
        weight: tape.constant(Tensor::zeros(&[5, 8])),
        bias: tape.constant(Tensor::vector(bias)),
    };
    let (_, c2) = lstm_step(&mut tape, x, h, c, cell).unwrap();
    for v in tape.value(c2).data() {
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn lstm_step_rejects_bad_dims() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let h = tape.constant(Tensor::zeros(&[1, 2]));
    let c = tape.constant(Tensor::zeros(&[1, 2]));
    let cell = LstmVars {
        weight: tape.constant(Tensor::zeros(&[4, 8])),
        bias: tape.constant(Tensor::zeros(&[8])),
    };
    assert!(lstm_step(&mut tape, x, h, c, cell).is_err());
}

#[test]
fn lstm_step_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let inputs = vec![
            random(&mut rng, &[2, 3], -1.0, 1.0),
            random(&mut rng, &[2, 4], -1.0, 1.0),
            random(&mut rng, &[2, 4], -1.0, 1.0),
            random(&mut rng, &[7, 16], -0.8, 0.8),
            random(&mut rng, &[16], -0.5, 0.5),
        ];
        let build: Box<Build> = Box::new(|t, v| {
            let cell = LstmVars { weight: v[3], bias: v[4] };
            let (h, c) = lstm_step(t, v[0], v[1], v[2], cell)?;
            let both = t.concat(&[h, c], 1)?;
            weighted_sum(t, both, 99)
        });
        let err = fd_error(&inputs, build.as_ref());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-30.0f64..30.0, 2..20)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(values));
        let s = tape.softmax(x, 0).unwrap();
        let out = tape.value(s).data();
        prop_assert!(out.iter().all(|v| *v >= 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-5.0f64..5.0, 2..10), shift in -10.0f64..10.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(values.clone()));
        let y = tape.constant(Tensor::vector(values.iter().map(|v| v + shift).collect()));
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(y, 0).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
