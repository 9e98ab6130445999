use rand::Rng;
use sparsecast::models::*;
use sparsecast::sparse::{dense_to_sparse, sparse_to_dense, SparseConvMode};
use sparsecast::tensor::{DenseTensor, Real};
use testkit::cases::*;
use testkit::oracle::*;
use testkit::random::*;

fn perturb<T: Real>(state: &mut ModelState<T>, name: &str, delta: f64) {
    let w = state.params.get_mut(name).unwrap();
    for v in w.values_mut() {
        *v += T::from_f64(delta);
    }
}

#[test]
fn every_kind_predicts_six_frames() {
    let mut r = rng(1);
    for kind in ModelKind::ALL {
        let state = ModelState::<f64>::init(kind.default_config(), 1).unwrap();
        let x = random_history(&mut r, [1, 8, 12, 16, 16], 0.2);
        let y = forward(&state, &x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 6, 16, 16], "{kind}");
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let mut r = rng(2);
    for kind in ModelKind::ALL {
        let state = ModelState::<f64>::zeros(kind.default_config()).unwrap();
        let x = random_history(&mut r, [2, 8, 12, 8, 8], 0.5);
        let y = forward(&state, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let state = ModelState::<f32>::init(ModelKind::ResNet2D.default_config(), 0).unwrap();
    assert!(forward(&state, &DenseTensor::zeros(&[1, 8, 11, 4, 4])).is_err());
    assert!(forward(&state, &DenseTensor::zeros(&[1, 7, 12, 4, 4])).is_err());
    let other = ModelState::<f32>::init(ModelKind::Conv3DUNet.default_config(), 0).unwrap();
    assert!(sparse_unet_forward(
        &other,
        &dense_to_sparse(&DenseTensor::zeros(&[1, 96, 1, 4, 4]), 0.0).unwrap()
    )
    .is_err());
}

#[test]
fn sequential_output_is_causal() {
    let mut r = rng(3);
    let config = ModelKind::ResNet3D.default_config();
    let state = ModelState::<f64>::init(config, 3).unwrap();
    let x = random_history(&mut r, [1, 8, 12, 8, 8], 0.5);
    let base = forward(&state, &x).unwrap();
    let mut poked = state.clone();
    perturb(&mut poked, "seq3", 0.01);
    let after = forward(&poked, &x).unwrap();
    let frame = |y: &DenseTensor<f64>, k: usize| sparsecast::tensor::slice_time(y, k, 1).unwrap();
    for k in 0..6 {
        let same = frame(&base, k).data() == frame(&after, k).data();
        assert_eq!(same, k < 2, "frame {}", k + 1);
    }

    let features = resnet_features(&state, &x).unwrap();
    let a = sequential_output_block(&state, &features, &x).unwrap();
    assert_eq!(a.data(), base.data());
    let shifted = features.map(|v| v + 0.1);
    let b = sequential_output_block(&state, &shifted, &x).unwrap();
    for k in 0..6 {
        assert_ne!(frame(&a, k).data(), frame(&b, k).data(), "frame {}", k + 1);
    }
}

#[test]
fn last_observed_prior_changes_only_through_the_chain() {
    let mut r = rng(4);
    let ModelConfig::ResNet(c) = ModelKind::ResNet3D.default_config() else {
        unreachable!()
    };
    let zero = ModelState::<f64>::init(ModelConfig::ResNet(c), 4).unwrap();
    let mut last = zero.clone();
    last.config = ModelConfig::ResNet(ResNet3DConfig {
        prior_frame: PriorFrame::LastObserved,
        ..c
    });
    let x = random_history(&mut r, [1, 8, 12, 6, 6], 0.5);
    assert_ne!(forward(&zero, &x).unwrap().data(), forward(&last, &x).unwrap().data());
}

#[test]
fn conv_output_block_contract() {
    let config = ModelKind::ResNet3DConvOutput.default_config();
    let state = ModelState::<f32>::zeros(config).unwrap();
    let features = DenseTensor::<f32>::filled(&[2, 16, 12, 5, 7], 1.0);
    let y = conv_output_block(&state, &features).unwrap();
    assert_eq!(y.shape(), &[2, 8, 6, 5, 7]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    let bad = DenseTensor::<f32>::filled(&[2, 15, 12, 5, 7], 1.0);
    assert!(conv_output_block(&state, &bad).is_err());
}

#[test]
fn unet_backends_share_parameter_layout() {
    let sparse = ModelKind::SparseUNet.default_config().param_specs();
    let dense = ModelKind::Conv3DUNet.default_config().param_specs();
    assert_eq!(sparse, dense);
    let names: Vec<&str> = sparse.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"enc0.conv1") && names.contains(&"dec2.up") && names.contains(&"head"));
    assert_eq!(sparse[0].1.in_channels, 96);
    assert_eq!(sparse.last().unwrap().1.out_channels, 48);
}

fn unet_pair(config: UNetConfig, seed: u64) -> (ModelState<f64>, ModelState<f64>) {
    let mut sparse = ModelState::<f64>::init(ModelConfig::UNet(config), seed).unwrap();
    for w in sparse.params.values_mut() {
        if let Some(b) = &mut w.bias {
            b.fill(0.0);
        }
    }
    let mut dense = sparse.clone();
    dense.config = ModelConfig::UNet(UNetConfig {
        backend: UNetBackend::Dense3D,
        ..config
    });
    (sparse, dense)
}

#[test]
fn generalized_sparse_unet_matches_dense_unet() {
    let mut r = rng(5);
    let config = UNetConfig {
        sparse_mode: SparseConvMode::Generalized,
        ..UNetConfig::default()
    };
    for (i, density) in [0.02, 0.1, 0.3].into_iter().enumerate() {
        let (sparse, dense) = unet_pair(config, 50 + i as u64);
        let x = random_history(&mut r, [2, 8, 12, 13, 16], density);
        let folded = fold_history(&x).unwrap();
        let want = conv3d_unet_forward(&dense, &folded).unwrap();
        let s = sparse_unet_forward(&sparse, &dense_to_sparse(&folded, 0.0).unwrap()).unwrap();
        let got = sparse_to_dense(&s).unwrap();
        assert_rel_close(got.data(), want.data(), 1e-4, "64-bit");

        // 32-bit, against the output's scale.
        let (s32, d32) = (sparse.cast::<f32>(), dense.cast::<f32>());
        let f32in = folded.cast::<f32>();
        let want = conv3d_unet_forward(&d32, &f32in).unwrap();
        let got = sparse_to_dense(&sparse_unet_forward(&s32, &dense_to_sparse(&f32in, 0.0).unwrap()).unwrap()).unwrap();
        let scale = want.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-4 * scale, "32-bit err {err} scale {scale}");
    }
}

#[test]
fn submanifold_unet_keeps_input_coordinates() {
    let mut r = rng(6);
    let state = ModelState::<f32>::init(ModelKind::SparseUNet.default_config(), 6).unwrap();
    let x = random_history(&mut r, [2, 8, 12, 20, 17], 0.05).cast::<f32>();
    let s = dense_to_sparse(&fold_history(&x).unwrap(), 0.0).unwrap();
    let y = sparse_unet_forward(&state, &s).unwrap();
    assert_eq!(y.coords(), s.coords());
    assert_eq!(y.channels(), 48);

    let pred = forward(&state, &x).unwrap();
    let active: usize = s.nnz() * 48;
    assert!(pred.count_nonzero() <= active);

    let empty = dense_to_sparse(&DenseTensor::<f32>::zeros(&[1, 96, 1, 8, 8]), 0.0).unwrap();
    assert!(sparse_unet_forward(&state, &empty).unwrap().is_empty());
    let pred = forward(&state, &DenseTensor::zeros(&[1, 8, 12, 8, 8])).unwrap();
    assert!(pred.data().iter().all(|&v| v == 0.0));
}

#[test]
fn warm_up_swap_keeps_backbone() {
    let mut r = rng(7);
    let warm = ModelState::<f64>::init(ModelKind::ResNet3DConvOutput.default_config(), 7).unwrap();
    let swapped = warm_up_swap(&warm, 99).unwrap();
    assert_eq!(swapped.config.kind(), Some(ModelKind::ResNet3D));
    for name in ["stem", "block0.conv1", "block3.conv2"] {
        let (a, b) = (warm.param(name).unwrap(), swapped.param(name).unwrap());
        assert!(a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let before = output_block_names(&warm.config);
    let after = output_block_names(&swapped.config);
    assert!(before.iter().all(|n| !after.contains(n)));

    let x = random_history(&mut r, [1, 8, 12, 6, 6], 0.5);
    assert_eq!(
        resnet_features(&warm, &x).unwrap(),
        resnet_features(&swapped, &x).unwrap()
    );
    assert_ne!(
        forward(&warm, &x).unwrap().data(),
        forward(&swapped, &x).unwrap().data()
    );

    assert!(warm_up_swap(&swapped, 1).is_err());
    let unet = ModelState::<f64>::init(ModelKind::SparseUNet.default_config(), 1).unwrap();
    assert!(warm_up_swap(&unet, 1).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(8);
    let x = random_history(&mut r, [2, 8, 12, 12, 12], 0.1).cast::<f32>();
    for kind in ModelKind::ALL {
        let state = ModelState::<f32>::init(kind.default_config(), 8).unwrap();
        let a = forward(&state, &x).unwrap();
        let b = forward(&state, &x).unwrap();
        assert!(
            a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
            "{kind}"
        );
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        for seed in 0..20 {
            model_grad_case(kind, 1000 + seed);
        }
    }
}

#[test]
fn stem_weight_gradient_on_small_grid() {
    let mut r = rng(9);
    let state = ModelState::<f64>::init(ModelKind::ResNet3D.default_config(), 9).unwrap();
    let x = random_history(&mut r, [1, 8, 12, 4, 4], 1.0);
    let target = DenseTensor::from_fn(&[1, 8, 6, 4, 4], |_| r.gen_range(-1.0..1.0));
    let g = loss_and_grads(&state, &x, &target).unwrap();
    let analytic = g.grads.get("stem").unwrap().weights[17];
    let loss = |s: &ModelState<f64>| {
        let y = forward(s, &x).unwrap();
        y.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / y.len() as f64
    };
    let h = 1e-5;
    let (mut p, mut m) = (state.clone(), state.clone());
    p.params.get_mut("stem").unwrap().weights[17] += h;
    m.params.get_mut("stem").unwrap().weights[17] -= h;
    let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
    assert!(
        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()),
        "{analytic} vs {numeric}"
    );
}

#[test]
fn last_frame_loss_reaches_first_sequential_layer() {
    let mut r = rng(10);
    let state = ModelState::<f64>::init(toy_config(ModelKind::ResNet3D), 10).unwrap();
    let x = random_history(&mut r, [1, 2, 3, 4, 4], 1.0);
    // Target equals the prediction except on the last frame.
    let mut target = forward(&state, &x).unwrap();
    let n = target.len();
    for v in &mut target.data_mut()[n / 2..] {
        *v += 1.0;
    }
    let g = loss_and_grads(&state, &x, &target).unwrap();
    let seq1 = g.grads.get("seq1").unwrap();
    assert!(seq1.values().any(|&v| v.abs() > 1e-9));
}

#[test]
fn checkpoint_round_trips_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in ModelKind::ALL.into_iter().enumerate() {
        let mut s = ModelState::<f32>::init(toy_config(kind), i as u64).unwrap();
        s.step = 7 * i as u64;
        let path = dir.path().join(format!("{kind}.ckpt"));
        write_checkpoint(&path, &s).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), s);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut r = rng(11);
    for _ in 0..20 {
        checkpoint_round_trip_case(&mut r);
    }
}
