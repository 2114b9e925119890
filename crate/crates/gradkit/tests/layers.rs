use qbe_gradkit::gradcheck::check_network;
use qbe_gradkit::{
    backward, forward, infer, GradError, LayerSpec, Mode, NetworkParams, NetworkSpec, Padding, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_params(spec: &NetworkSpec, seed: u64) -> NetworkParams<f64> {
    let mut p: NetworkParams<f64> = NetworkParams::init(spec, &mut rng(seed));
    // Perturb gains and biases away from their 1/0 defaults.
    let mut r = rng(seed + 1);
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    p
}

#[test]
fn identity_network_passes_input_through() {
    let spec = NetworkSpec::new(vec![3], vec![]).unwrap();
    let p = NetworkParams::<f32>::init(&spec, &mut rng(0));
    let y = infer(&spec, &p, Tensor::vector(vec![1.0f32, 2.0, 3.0])).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn identity_linear_layer() {
    let spec = NetworkSpec::new(vec![2], vec![LayerSpec::Linear { inputs: 2, outputs: 2 }]).unwrap();
    let p = NetworkParams::from_tensors(vec![
        Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::zeros(&[2]),
    ]);
    let y = infer(&spec, &p, Tensor::vector(vec![5.0f32, -3.0])).unwrap();
    assert_eq!(y.data(), &[5.0, -3.0]);
}

#[test]
fn all_ones_valid_conv_sums_nine() {
    let spec = NetworkSpec::new(
        vec![1, 5, 5],
        vec![LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: Padding::Valid,
        }],
    )
    .unwrap();
    let p = NetworkParams::from_tensors(vec![Tensor::filled(&[1, 1, 3, 3], 1.0f32), Tensor::zeros(&[1])]);
    let y = infer(&spec, &p, Tensor::filled(&[1, 5, 5], 1.0f32)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3]);
    assert!(y.data().iter().all(|v| *v == 9.0));
}

#[test]
fn linear_weight_gradient_is_outer_product_with_ones() {
    let spec = NetworkSpec::new(vec![0, 3], vec![LayerSpec::Linear { inputs: 3, outputs: 2 }]).unwrap();
    let p = random_params(&spec, 4);
    let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap();
    let (y, tape) = forward(&spec, &p, x, Mode::Eval, &mut rng(0)).unwrap();
    let g = backward(&spec, &p, tape, &Tensor::filled(y.shape(), 1.0)).unwrap();
    assert_eq!(g.params.tensors[0].data(), &[0.5, -2.0, 3.0, 0.5, -2.0, 3.0]);
    assert_eq!(g.params.tensors[1].data(), &[1.0, 1.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let spec = NetworkSpec::new(vec![3], vec![LayerSpec::Relu]).unwrap();
    let p = NetworkParams::<f64>::zeros_like(&spec);
    let (_, tape) = forward(&spec, &p, Tensor::vector(vec![-1.0, 0.0, 2.0]), Mode::Eval, &mut rng(0)).unwrap();
    let g = backward(&spec, &p, tape, &Tensor::filled(&[3], 1.0)).unwrap();
    assert_eq!(g.input.data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    let conv = |padding| LayerSpec::Conv2d {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 1,
        padding,
    };
    let cases: Vec<(&str, NetworkSpec, Vec<usize>)> = vec![
        ("linear", NetworkSpec::new(vec![0, 5], vec![LayerSpec::Linear { inputs: 5, outputs: 4 }]).unwrap(), vec![3, 5]),
        ("relu", NetworkSpec::new(vec![0, 6], vec![LayerSpec::Relu]).unwrap(), vec![2, 6]),
        ("layernorm", NetworkSpec::new(vec![0, 7], vec![LayerSpec::LayerNorm { dim: 7 }]).unwrap(), vec![3, 7]),
        ("conv-same", NetworkSpec::new(vec![2, 5, 6], vec![conv(Padding::Same)]).unwrap(), vec![2, 5, 6]),
        ("conv-valid", NetworkSpec::new(vec![2, 5, 6], vec![conv(Padding::Valid)]).unwrap(), vec![2, 5, 6]),
        ("maxpool", NetworkSpec::new(vec![2, 5, 7], vec![LayerSpec::MaxPool2d { size: 2, stride: 2 }]).unwrap(), vec![2, 5, 7]),
        ("dropout", NetworkSpec::new(vec![0, 8], vec![LayerSpec::Dropout { p: 0.3 }]).unwrap(), vec![4, 8]),
        ("softmax", NetworkSpec::new(vec![0, 4], vec![LayerSpec::Softmax]).unwrap(), vec![3, 4]),
        (
            "stack",
            NetworkSpec::new(
                vec![1, 6, 8],
                vec![
                    LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: Padding::Same },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { size: 2, stride: 2 },
                    LayerSpec::Dropout { p: 0.2 },
                    LayerSpec::Linear { inputs: 24, outputs: 5 },
                    LayerSpec::LayerNorm { dim: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Linear { inputs: 5, outputs: 3 },
                    LayerSpec::Softmax,
                ],
            )
            .unwrap(),
            vec![1, 6, 8],
        ),
    ];
    for (i, (name, spec, shape)) in cases.into_iter().enumerate() {
        let params = random_params(&spec, 10 + i as u64);
        let x = random_tensor(&shape, 100 + i as u64);
        let r = check_network(&spec, &params, &x, Mode::Train, 7, 1e-4, 400).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-3, "{name}: max relative error {}", r.max_rel_error);
    }
}

#[test]
fn dropout_is_identity_in_eval_and_unbiased_in_train() {
    let spec = NetworkSpec::new(vec![0], vec![LayerSpec::Dropout { p: 0.1 }]).unwrap();
    let p = NetworkParams::<f32>::zeros_like(&spec);
    let x = Tensor::filled(&[20_000], 1.0f32);
    let (y, _) = forward(&spec, &p, x.clone(), Mode::Eval, &mut rng(1)).unwrap();
    assert_eq!(y, x);
    let (y, _) = forward(&spec, &p, x, Mode::Train, &mut rng(1)).unwrap();
    let mean = y.data().iter().map(|v| f64::from(*v)).sum::<f64>() / 20_000.0;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(y.data().iter().any(|v| *v == 0.0));
}

#[test]
fn maxpool_routes_gradient_to_one_element_per_window() {
    let spec = NetworkSpec::new(vec![1, 4, 4], vec![LayerSpec::MaxPool2d { size: 2, stride: 2 }]).unwrap();
    let p = NetworkParams::<f32>::zeros_like(&spec);
    let (y, tape) = forward(&spec, &p, Tensor::filled(&[1, 4, 4], 3.0f32), Mode::Eval, &mut rng(0)).unwrap();
    assert!(y.data().iter().all(|v| *v == 3.0));
    let g = backward(&spec, &p, tape, &Tensor::filled(&[1, 2, 2], 1.0)).unwrap();
    let nonzero: Vec<usize> = g.input.data().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    assert_eq!(nonzero, vec![0, 2, 8, 10]);
}

#[test]
fn stale_tape_is_rejected() {
    let spec = NetworkSpec::new(vec![0, 2], vec![LayerSpec::Linear { inputs: 2, outputs: 2 }]).unwrap();
    let mut p = NetworkParams::<f32>::init(&spec, &mut rng(0));
    let (y, tape) = forward(&spec, &p, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), Mode::Eval, &mut rng(0)).unwrap();
    p.bump_version();
    let err = backward(&spec, &p, tape, &Tensor::filled(y.shape(), 1.0)).unwrap_err();
    assert!(matches!(err, GradError::StaleTape));

    let other = NetworkSpec::new(vec![0, 2], vec![LayerSpec::Linear { inputs: 2, outputs: 2 }, LayerSpec::Relu]).unwrap();
    let (_, tape) = forward(&spec, &p, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), Mode::Eval, &mut rng(0)).unwrap();
    assert!(matches!(backward(&other, &p, tape, &Tensor::filled(&[1, 2], 1.0)), Err(GradError::StaleTape)));
}

#[test]
fn forward_is_deterministic_under_seed() {
    let spec = NetworkSpec::new(
        vec![0, 16],
        vec![LayerSpec::Linear { inputs: 16, outputs: 16 }, LayerSpec::Dropout { p: 0.5 }],
    )
    .unwrap();
    let p = NetworkParams::<f32>::init(&spec, &mut rng(0));
    let x = random_tensor(&[4, 16], 3).cast::<f32>();
    let (a, _) = forward(&spec, &p, x.clone(), Mode::Train, &mut rng(9)).unwrap();
    let (b, _) = forward(&spec, &p, x, Mode::Train, &mut rng(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_input_shape_is_reported() {
    let spec = NetworkSpec::new(vec![1, 8, 8], vec![LayerSpec::MaxPool2d { size: 2, stride: 2 }]).unwrap();
    let p = NetworkParams::<f32>::zeros_like(&spec);
    let err = infer(&spec, &p, Tensor::zeros(&[1, 8, 9])).unwrap_err();
    assert!(matches!(err, GradError::ShapeMismatch { .. }));
}
