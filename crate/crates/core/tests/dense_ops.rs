use proptest::prelude::*;
use rand::Rng;
use sparsecast::tensor::*;
use testkit::cases::*;
use testkit::oracle::*;
use testkit::random::*;

fn oracle_for(x: &DenseTensor<f64>, spec: &ConvSpec, w: &KernelWeights<f64>) -> Vec<f64> {
    let s = x.shape();
    conv3d_oracle(
        x.data(),
        [s[0], s[1], s[2], s[3], s[4]],
        &w.weights,
        w.bias.as_deref(),
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
    )
    .0
}

#[test]
fn conv3d_zero_input_gives_zero_output() {
    let spec = ConvSpec::same(3, 4).without_bias();
    let w = random_weights(&mut rng(1), spec);
    let x = DenseTensor::<f64>::zeros(&[2, 3, 4, 5, 6]);
    let y = conv3d_forward(&x, &spec, &w).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 5, 6]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_identity_kernel_is_exact() {
    let spec = ConvSpec::same(3, 3).without_bias();
    let w = KernelWeights::<f64>::identity(spec).unwrap();
    let x = random_tensor(&mut rng(2), &[2, 3, 4, 5, 6]);
    assert_eq!(conv3d_forward(&x, &spec, &w).unwrap(), x);
}

#[test]
fn conv3d_matches_nested_loop_oracle() {
    let mut r = rng(3);
    let spec = ConvSpec::same(2, 3);
    let x = random_tensor(&mut r, &[1, 2, 3, 4, 4]);
    let w = random_weights(&mut r, spec);
    let y = conv3d_forward(&x, &spec, &w).unwrap();
    assert_rel_close(y.data(), &oracle_for(&x, &spec, &w), 1e-6, "conv3d");
}

#[test]
fn conv3d_random_geometries_match_oracle() {
    let mut r = rng(4);
    for case in 0..60 {
        let kernel = [1 + 2 * r.gen_range(0..2), 1 + 2 * r.gen_range(0..2), r.gen_range(1..4)];
        let stride = [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3)];
        let padding = [kernel[0] / 2, kernel[1] / 2, r.gen_range(0..2)];
        let spec = ConvSpec {
            kernel,
            stride,
            padding,
            in_channels: r.gen_range(1..4),
            out_channels: r.gen_range(1..4),
            has_bias: r.gen_bool(0.5),
        };
        let dims = [
            r.gen_range(1..3),
            spec.in_channels,
            r.gen_range(kernel[0]..7),
            r.gen_range(kernel[1]..7),
            r.gen_range(kernel[2]..7),
        ];
        let x = random_tensor(&mut r, &dims);
        let w = random_weights(&mut r, spec);
        let y = conv3d_forward(&x, &spec, &w).unwrap();
        assert_rel_close(y.data(), &oracle_for(&x, &spec, &w), 1e-6, &format!("case {case}"));
    }
}

#[test]
fn conv2d_matches_oracle_and_identity() {
    let mut r = rng(5);
    let spec = ConvSpec::same_2d(2, 3);
    let x = random_tensor(&mut r, &[1, 2, 5, 5]);
    let w = random_weights(&mut r, spec);
    let y = conv2d_forward(&x, &spec, &w).unwrap();
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
    let x5 = x.reshape(&[1, 2, 1, 5, 5]).unwrap();
    assert_rel_close(y.data(), &oracle_for(&x5, &spec, &w), 1e-6, "conv2d");

    let zero = DenseTensor::<f64>::zeros(&[1, 2, 5, 5]);
    let spec0 = spec.without_bias();
    let w0 = random_weights(&mut r, spec0);
    assert!(conv2d_forward(&zero, &spec0, &w0)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let id_spec = ConvSpec::same_2d(2, 2).without_bias();
    let id = KernelWeights::identity(id_spec).unwrap();
    assert_eq!(conv2d_forward(&x, &id_spec, &id).unwrap(), x);
    assert!(conv2d_forward(&x, &ConvSpec::same(2, 3), &KernelWeights::zeros(ConvSpec::same(2, 3))).is_err());
}

#[test]
fn conv_transpose_matches_oracle() {
    let mut r = rng(6);
    for _ in 0..30 {
        let spec = ConvSpec::upsample(r.gen_range(1..4), r.gen_range(1..4));
        let dims = [
            r.gen_range(1..3),
            spec.in_channels,
            r.gen_range(1..4),
            r.gen_range(1..4),
            r.gen_range(1..4),
        ];
        let out_sp = [
            2 * dims[2] - r.gen_range(0..2),
            2 * dims[3] - r.gen_range(0..2),
            2 * dims[4] - r.gen_range(0..2),
        ];
        let x = random_tensor(&mut r, &dims);
        let w = random_weights(&mut r, spec);
        let y = conv_transpose3d_forward(&x, &spec, &w, out_sp).unwrap();
        let want = conv_transpose3d_oracle(
            x.data(),
            dims,
            &w.weights,
            w.bias.as_deref(),
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.padding,
            out_sp,
        );
        assert_rel_close(y.data(), &want, 1e-9, "conv_transpose");
    }
}

#[test]
fn maxpool_matches_oracle() {
    let mut r = rng(7);
    for _ in 0..30 {
        let dims = [
            r.gen_range(1..3),
            r.gen_range(1..3),
            r.gen_range(1..5),
            r.gen_range(1..6),
            r.gen_range(1..6),
        ];
        let x = random_tensor(&mut r, &dims);
        let got = maxpool3d_forward(&x).unwrap();
        let (want, od) = maxpool_oracle(x.data(), dims);
        assert_eq!(got.output.shape(), &od);
        assert_eq!(got.output.data(), &want[..]);
    }
}

#[test]
fn conv3d_is_linear() {
    let mut r = rng(8);
    let spec = ConvSpec::same(2, 2).without_bias();
    let w = random_weights(&mut r, spec);
    let x = random_tensor(&mut r, &[1, 2, 3, 4, 5]);
    let y = random_tensor(&mut r, &[1, 2, 3, 4, 5]);
    let (a, b) = (0.7, -1.3);
    let mix = DenseTensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let lhs = conv3d_forward(&mix, &spec, &w).unwrap();
    let cx = conv3d_forward(&x, &spec, &w).unwrap();
    let cy = conv3d_forward(&y, &spec, &w).unwrap();
    let rhs: Vec<f64> = cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect();
    assert_rel_close(lhs.data(), &rhs, 1e-5, "linearity");
}

#[test]
fn conv3d_backward_trivial_cases() {
    let spec = ConvSpec::same(2, 2);
    let w = KernelWeights::<f64>::identity(spec.without_bias()).unwrap();
    let w = KernelWeights {
        spec,
        bias: Some(vec![0.0; 2]),
        ..w
    };
    let x = random_tensor(&mut rng(9), &[1, 2, 3, 3, 3]);

    let zero = DenseTensor::zeros(&[1, 2, 3, 3, 3]);
    let g = conv3d_backward(&zero, &x, &spec, &w).unwrap();
    assert!(g.input.data().iter().all(|&v| v == 0.0));
    assert!(g.params.values().all(|&v| v == 0.0));

    let mut one = DenseTensor::<f64>::zeros(&[1, 2, 3, 3, 3]);
    // Channel 1, center voxel.
    one.data_mut()[27 + 13] = 1.0;
    let g = conv3d_backward(&one, &x, &spec, &w).unwrap();
    let nz: Vec<usize> = (0..54).filter(|&i| g.input.data()[i] != 0.0).collect();
    assert_eq!(nz, vec![27 + 13]);
    assert_eq!(g.input.data()[27 + 13], 1.0);

    let bad = DenseTensor::zeros(&[1, 2, 3, 3, 2]);
    assert!(conv3d_backward(&bad, &x, &spec, &w).is_err());
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    for seed in 0..20 {
        conv_grad_case(100 + seed, ConvSpec::same(2, 2), [1, 2, 3, 3, 3], None);
    }
    let strided = ConvSpec {
        stride: [1, 2, 2],
        ..ConvSpec::same(2, 3)
    };
    conv_grad_case(99, strided, [2, 2, 2, 5, 4], None);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..20 {
        conv2d_grad_case(200 + seed);
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    for seed in 0..20 {
        conv_grad_case(300 + seed, ConvSpec::upsample(2, 2), [1, 2, 1, 2, 3], Some([1, 4, 5]));
    }
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    for seed in 0..20 {
        maxpool_grad_case(400 + seed);
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..20 {
        elementwise_grad_case(500 + seed);
    }
}

#[test]
fn mse_matches_scalar_loop() {
    let mut r = rng(600);
    let a = random_tensor(&mut r, &[3, 4, 5]);
    let b = random_tensor(&mut r, &[3, 4, 5]);
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    let want = sum / a.len() as f64;
    let got = mse_loss(&a, &b).unwrap().loss;
    assert!((got - want).abs() <= 1e-6 * want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_spec_preserves_shape(b in 1usize..3, c in 1usize..3, t in 1usize..7, h in 1usize..7, w in 1usize..7) {
        let spec = ConvSpec::same(c, 2);
        let x = DenseTensor::<f32>::filled(&[b, c, t, h, w], 1.0);
        let wt = KernelWeights::<f32>::zeros(spec);
        let y = conv3d_forward(&x, &spec, &wt).unwrap();
        prop_assert_eq!(y.shape(), &[b, 2, t, h, w][..]);
        let spec2 = ConvSpec::same_2d(c, 2);
        let x2 = DenseTensor::<f32>::filled(&[b, c, h, w], 1.0);
        let y2 = conv2d_forward(&x2, &spec2, &KernelWeights::zeros(spec2)).unwrap();
        prop_assert_eq!(y2.shape(), &[b, 2, h, w][..]);
    }

    #[test]
    fn conv3d_oracle_equivalence(seed in 0u64..10_000, t in 1usize..7, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let spec = ConvSpec::same(r.gen_range(1..4), r.gen_range(1..4));
        let x = random_tensor(&mut r, &[1, spec.in_channels, t, h, w]);
        let wt = random_weights(&mut r, spec);
        let y = conv3d_forward(&x, &spec, &wt).unwrap();
        let want = oracle_for(&x, &spec, &wt);
        prop_assert!(max_relative_diff(y.data(), &want, 1e-12) <= 1e-6);
    }

    #[test]
    fn stack_unstack_bit_identity(b in 1usize..3, c in 1usize..5, t in 1usize..5, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        let x = random_tensor(&mut rng(seed), &[b, c, t, h, w]).cast::<f32>();
        let back = unstack_time_channels(&stack_time_channels(&x).unwrap(), t).unwrap();
        prop_assert_eq!(back, x);
    }
}
