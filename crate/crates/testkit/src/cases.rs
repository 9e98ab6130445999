//! One randomized check per function. Each draws its own inputs and panics on
//! the first mismatch.

use std::collections::BTreeSet;
use std::path::Path;

use rand::rngs::StdRng;
use rand::Rng;
use sparsecast::data::{decode_day_file, read_day_file, write_day_file, DayHeader};
use sparsecast::models::{
    decode_checkpoint, encode_checkpoint, forward, loss_and_grads, ModelConfig, ModelKind, ModelState, ResNet3DConfig,
    UNetConfig,
};
use sparsecast::sparse::*;
use sparsecast::tensor::*;

use crate::oracle::{assert_grad_close, assert_rel_close, finite_diff, project};
use crate::random::*;

type Triple = (usize, [u32; 4], [u32; 4]);

fn rulebook_triples(rb: &Rulebook, input: &SparseTensor<f64>) -> BTreeSet<Triple> {
    let mut out = BTreeSet::new();
    for (k, pairs) in rb.pairs().iter().enumerate() {
        for &(i, o) in pairs {
            let fresh = out.insert((k, input.coords()[i as usize], rb.out_coords()[o as usize]));
            assert!(fresh, "duplicate pair in tap {k}");
        }
    }
    out
}

/// Brute force over (input voxel x tap) for a forward convolution.
pub fn brute_force_rulebook(
    input: &SparseTensor<f64>,
    spec: &ConvSpec,
    mode: SparseConvMode,
) -> (BTreeSet<[u32; 4]>, BTreeSet<Triple>) {
    let s = input.dense_shape();
    let out_dims = match mode {
        SparseConvMode::Submanifold => [s[1], s[2], s[3]],
        SparseConvMode::Generalized => spec.output_dims([s[1], s[2], s[3]]).unwrap(),
    };
    let members: BTreeSet<[u32; 4]> = input.coords().iter().copied().collect();
    let mut outs = BTreeSet::new();
    let mut triples = BTreeSet::new();
    for c in input.coords() {
        for (k, d) in spec.offsets().iter().enumerate() {
            let mut o = [c[0], 0, 0, 0];
            let mut ok = true;
            for a in 0..3 {
                let v = c[a + 1] as isize - d[a];
                let st = spec.stride[a] as isize;
                if v < 0 || v % st != 0 || v / st >= out_dims[a] as isize {
                    ok = false;
                    break;
                }
                o[a + 1] = (v / st) as u32;
            }
            if !ok || (mode == SparseConvMode::Submanifold && !members.contains(&o)) {
                continue;
            }
            outs.insert(o);
            triples.insert((k, *c, o));
        }
    }
    if mode == SparseConvMode::Submanifold {
        outs = members;
    }
    (outs, triples)
}

/// A random pattern of up to 9 sites; `case % 3` picks submanifold,
/// generalized, or generalized with spatial stride 2.
pub fn rulebook_case(r: &mut StdRng, case: usize) {
    let shape = [
        r.gen_range(1..3),
        r.gen_range(1..5),
        r.gen_range(1..7),
        r.gen_range(1..7),
    ];
    let n = r.gen_range(0..10);
    let input = random_pattern(r, shape, n);
    let (mode, spec) = match case % 3 {
        0 => (SparseConvMode::Submanifold, ConvSpec::same(1, 1)),
        1 => (SparseConvMode::Generalized, ConvSpec::same(1, 1)),
        _ => (
            SparseConvMode::Generalized,
            ConvSpec {
                stride: [1, 2, 2],
                ..ConvSpec::same(1, 1)
            },
        ),
    };
    let rb = build_rulebook(&input, &spec, mode).unwrap();
    let (outs, triples) = brute_force_rulebook(&input, &spec, mode);
    let got_outs: BTreeSet<_> = rb.out_coords().iter().copied().collect();
    assert_eq!(got_outs, outs, "case {case}: output coordinate set");
    assert_eq!(rulebook_triples(&rb, &input), triples, "case {case}: pairs");
    assert!(rb.out_coords().windows(2).all(|w| w[0] < w[1]));
    if mode == SparseConvMode::Submanifold {
        let center = spec.center_offset().unwrap();
        let ident: Vec<(u32, u32)> = (0..input.nnz() as u32).map(|i| (i, i)).collect();
        assert_eq!(rb.pairs()[center], ident);
    }
}

/// Upsampling rulebook onto a random target coordinate set.
pub fn transposed_rulebook_case(r: &mut StdRng) {
    let spec = ConvSpec::upsample(1, 1);
    let coarse = [1, 1, r.gen_range(1..4), r.gen_range(1..4)];
    let fine = [
        1,
        1,
        coarse[2] * 2 - r.gen_range(0..2),
        coarse[3] * 2 - r.gen_range(0..2),
    ];
    let (n_in, n_tgt) = (r.gen_range(0..5), r.gen_range(1..12));
    let input = random_pattern(r, coarse, n_in);
    let target = random_pattern(r, fine, n_tgt);
    let rb = build_transposed_rulebook(&input, &spec, target.coords(), fine).unwrap();
    let targets: BTreeSet<_> = target.coords().iter().copied().collect();
    let mut want = BTreeSet::new();
    for c in input.coords() {
        for (k, d) in spec.offsets().iter().enumerate() {
            let o = [0usize, 1, 2].map(|a| c[a + 1] as isize * 2 + d[a]);
            if o.iter().any(|&v| v < 0) {
                continue;
            }
            let oc = [c[0], o[0] as u32, o[1] as u32, o[2] as u32];
            if targets.contains(&oc) {
                want.insert((k, *c, oc));
            }
        }
    }
    assert_eq!(rulebook_triples(&rb, &input), want);
    assert_eq!(rb.out_coords(), target.coords());
}

/// Random shape (at most 8 per axis), channels and weights at `density`:
/// submanifold output equals dense conv at the input sites, generalized output
/// (no bias) equals dense conv everywhere.
pub fn dense_equivalence_case(r: &mut StdRng, density: f64, tol: f64) {
    let shape = [
        r.gen_range(1..3),
        r.gen_range(1..9),
        r.gen_range(1..9),
        r.gen_range(1..9),
    ];
    let cin = r.gen_range(1..4);
    let input = random_sparse(r, shape, cin, density);
    let spec = ConvSpec::same(cin, r.gen_range(1..4));
    let w = random_weights(r, spec);
    let dense_in = sparse_to_dense(&input).unwrap();
    let dense_out = conv3d_forward(&dense_in, &spec, &w).unwrap();

    let rb = build_rulebook(&input, &spec, SparseConvMode::Submanifold).unwrap();
    let sub = sparse_conv_forward(&input, &w, &rb).unwrap();
    assert_eq!(sub.coords(), input.coords());
    let at_sites = gather_dense_rows(&dense_out, &sub).unwrap();
    assert_rel_close(sub.feats(), &at_sites, tol, "submanifold");

    let spec0 = spec.without_bias();
    let w0 = KernelWeights {
        spec: spec0,
        weights: w.weights.clone(),
        bias: None,
    };
    let rb = build_rulebook(&input, &spec0, SparseConvMode::Generalized).unwrap();
    let gen = sparse_conv_forward(&input, &w0, &rb).unwrap();
    let want = conv3d_forward(&dense_in, &spec0, &w0).unwrap();
    assert_rel_close(sparse_to_dense(&gen).unwrap().data(), want.data(), tol, "generalized");
}

fn weight_fd(w: &KernelWeights<f64>, mut f: impl FnMut(&KernelWeights<f64>) -> f64) -> Vec<f64> {
    let flat: Vec<f64> = w.values().copied().collect();
    finite_diff(&flat, 1e-5, |p| {
        let mut wp = w.clone();
        for (d, s) in wp.values_mut().zip(p) {
            *d = *s;
        }
        f(&wp)
    })
}

fn tensor_fd(x: &DenseTensor<f64>, mut f: impl FnMut(&DenseTensor<f64>) -> f64) -> Vec<f64> {
    finite_diff(x.data(), 1e-5, |p| {
        f(&DenseTensor::new(x.shape().to_vec(), p.to_vec()).unwrap())
    })
}

/// Input and weight gradients of a 3D convolution, or of a transposed one
/// when `transposed` gives the output spatial size.
pub fn conv_grad_case(seed: u64, spec: ConvSpec, dims: [usize; 5], transposed: Option<[usize; 3]>) {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &dims);
    let w = random_weights(&mut r, spec);
    let forward = |x: &DenseTensor<f64>, w: &KernelWeights<f64>| match transposed {
        None => conv3d_forward(x, &spec, w).unwrap(),
        Some(sp) => conv_transpose3d_forward(x, &spec, w, sp).unwrap(),
    };
    let y = forward(&x, &w);
    let proj = random_vec(&mut r, y.len());
    let gout = DenseTensor::new(y.shape().to_vec(), proj.clone()).unwrap();
    let grads = match transposed {
        None => conv3d_backward(&gout, &x, &spec, &w).unwrap(),
        Some(_) => conv_transpose3d_backward(&gout, &x, &spec, &w).unwrap(),
    };
    let num_x = tensor_fd(&x, |xp| project(forward(xp, &w).data(), &proj));
    assert_grad_close(grads.input.data(), &num_x, 1e-6, "grad input");
    let num_w = weight_fd(&w, |wp| project(forward(&x, wp).data(), &proj));
    let analytic: Vec<f64> = grads.params.values().copied().collect();
    assert_grad_close(&analytic, &num_w, 1e-6, "grad weights");
}

pub fn conv2d_grad_case(seed: u64) {
    let mut r = rng(seed);
    let spec = ConvSpec::same_2d(2, 2);
    let x = random_tensor(&mut r, &[1, 2, 4, 4]);
    let w = random_weights(&mut r, spec);
    let y = conv2d_forward(&x, &spec, &w).unwrap();
    let proj = random_vec(&mut r, y.len());
    let gout = DenseTensor::new(y.shape().to_vec(), proj.clone()).unwrap();
    let g = conv2d_backward(&gout, &x, &spec, &w).unwrap();
    assert_eq!(g.input.shape(), x.shape());
    let num = tensor_fd(&x, |xp| project(conv2d_forward(xp, &spec, &w).unwrap().data(), &proj));
    assert_grad_close(g.input.data(), &num, 1e-6, "conv2d input");
    let num_w = weight_fd(&w, |wp| project(conv2d_forward(&x, &spec, wp).unwrap().data(), &proj));
    let analytic: Vec<f64> = g.params.values().copied().collect();
    assert_grad_close(&analytic, &num_w, 1e-6, "conv2d weights");
}

pub fn maxpool_grad_case(seed: u64) {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[1, 2, 2, 3, 3]);
    let res = maxpool3d_forward(&x).unwrap();
    let proj = random_vec(&mut r, res.output.len());
    let gout = DenseTensor::new(res.output.shape().to_vec(), proj.clone()).unwrap();
    let g = maxpool3d_backward(&gout, &res.argmax, x.shape()).unwrap();
    let num = tensor_fd(&x, |xp| project(maxpool3d_forward(xp).unwrap().output.data(), &proj));
    assert_grad_close(g.data(), &num, 1e-6, "maxpool");
}

/// ReLU, residual add, MSE and the time broadcast used by the output block.
pub fn elementwise_grad_case(seed: u64) {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 3, 1, 2, 2]);
    let target = random_tensor(&mut r, &[2, 3, 1, 2, 2]);
    let proj = random_vec(&mut r, x.len());
    let gout = DenseTensor::new(x.shape().to_vec(), proj.clone()).unwrap();

    let g = relu_backward(&gout, &x).unwrap();
    let num = tensor_fd(&x, |xp| project(relu_forward(xp).data(), &proj));
    assert_grad_close(g.data(), &num, 1e-6, "relu");

    let (ga, gb) = add_backward(&gout);
    let num = tensor_fd(&x, |xp| project(add_forward(xp, &target).unwrap().data(), &proj));
    assert_grad_close(ga.data(), &num, 1e-6, "add lhs");
    assert_eq!(ga, gb);

    let m = mse_loss(&x, &target).unwrap();
    let num = tensor_fd(&x, |xp| mse_loss(xp, &target).unwrap().loss);
    assert_grad_close(m.grad.data(), &num, 1e-6, "mse");

    let frame = random_tensor(&mut r, &[2, 3, 1, 2, 2]);
    let bproj = random_vec(&mut r, 2 * 3 * 4 * 4);
    let bg = DenseTensor::new(vec![2, 3, 4, 2, 2], bproj.clone()).unwrap();
    let g = broadcast_time_backward(&bg).unwrap();
    let num = tensor_fd(&frame, |fp| project(broadcast_time(fp, 4).unwrap().data(), &bproj));
    assert_grad_close(g.data(), &num, 1e-6, "broadcast_time");
}

/// Sparse convolution (submanifold for even seeds, generalized for odd) or
/// sparse transposed convolution.
pub fn sparse_conv_grad_case(seed: u64, transposed: bool) {
    let mut r = rng(seed);
    let (input, spec, target, tshape) = if transposed {
        let coarse = random_sparse(&mut r, [1, 1, 2, 3], 2, 0.6);
        let tgt = random_pattern(&mut r, [1, 1, 4, 6], 10);
        (coarse, ConvSpec::upsample(2, 2), tgt.coords().to_vec(), [1, 1, 4, 6])
    } else {
        (
            random_sparse(&mut r, [1, 2, 3, 3], 2, 0.5),
            ConvSpec::same(2, 2),
            vec![],
            [0; 4],
        )
    };
    let w = random_weights(&mut r, spec);
    let mode = if seed.is_multiple_of(2) {
        SparseConvMode::Submanifold
    } else {
        SparseConvMode::Generalized
    };
    let run = |inp: &SparseTensor<f64>, w: &KernelWeights<f64>| -> (SparseTensor<f64>, Rulebook) {
        if transposed {
            sparse_transposed_conv(inp, w, &target, tshape).unwrap()
        } else {
            let rb = build_rulebook(inp, &spec, mode).unwrap();
            (sparse_conv_forward(inp, w, &rb).unwrap(), rb)
        }
    };
    let (out, rb) = run(&input, &w);
    let proj = random_vec(&mut r, out.feats().len());
    let g = if transposed {
        sparse_transposed_conv_backward(&proj, &input, &w, &rb).unwrap()
    } else {
        sparse_conv_backward(&proj, &input, &w, &rb).unwrap()
    };
    let num = finite_diff(input.feats(), 1e-5, |p| {
        let inp = input.with_feats(p.to_vec(), input.channels()).unwrap();
        project(run(&inp, &w).0.feats(), &proj)
    });
    assert_grad_close(&g.input, &num, 1e-6, "sparse input grad");
    let num = weight_fd(&w, |wp| project(run(&input, wp).0.feats(), &proj));
    let analytic: Vec<f64> = g.params.values().copied().collect();
    assert_grad_close(&analytic, &num, 1e-6, "sparse weight grad");
}

pub fn sparse_pool_relu_grad_case(seed: u64) {
    let mut r = rng(seed);
    let s = random_sparse(&mut r, [1, 2, 4, 4], 2, 0.5);
    let res = sparse_maxpool_with_routing(&s);
    let proj = random_vec(&mut r, res.output.feats().len());
    let g = sparse_maxpool_backward(&proj, &res.argmax, s.nnz(), 2).unwrap();
    let num = finite_diff(s.feats(), 1e-5, |p| {
        project(sparse_maxpool(&s.with_feats(p.to_vec(), 2).unwrap()).feats(), &proj)
    });
    assert_grad_close(&g, &num, 1e-6, "sparse maxpool");

    let proj = random_vec(&mut r, s.feats().len());
    let g = sparse_relu_backward(&proj, &s).unwrap();
    let num = finite_diff(s.feats(), 1e-5, |p| {
        project(sparse_relu(&s.with_feats(p.to_vec(), 2).unwrap()).feats(), &proj)
    });
    assert_grad_close(&g, &num, 1e-6, "sparse relu");
}

/// Every model kind shrunk to 2 channels, 3 history and 2 forecast frames.
pub fn toy_config(kind: ModelKind) -> ModelConfig {
    match kind.default_config() {
        ModelConfig::ResNet(c) => ModelConfig::ResNet(ResNet3DConfig {
            in_channels: 2,
            stem_hidden: 3,
            num_residual_blocks: 1,
            history: 3,
            horizon: 2,
            ..c
        }),
        ModelConfig::UNet(c) => ModelConfig::UNet(UNetConfig {
            levels: 2,
            base_channels: 2,
            in_channels: 2,
            out_channels: 2,
            history: 3,
            horizon: 2,
            ..c
        }),
    }
}

/// Loss gradient of a toy-size model against central differences on three
/// random entries of every parameter.
pub fn model_grad_case(kind: ModelKind, seed: u64) {
    let mut r = rng(seed);
    let config = toy_config(kind);
    let mut state = ModelState::<f64>::init(config, seed).unwrap();
    // Larger biases keep pre-activations away from the ReLU kink.
    for w in state.params.values_mut() {
        if let Some(b) = &mut w.bias {
            for v in b.iter_mut() {
                *v += r.gen_range(-0.5..0.5);
            }
        }
    }
    let x = random_history(&mut r, [2, 2, 3, 5, 6], 0.6);
    let target = DenseTensor::from_fn(&[2, 2, 2, 5, 6], |_| r.gen_range(-1.0..1.0));
    let out = loss_and_grads(&state, &x, &target).unwrap();
    let loss = |s: &ModelState<f64>| {
        let y = forward(s, &x).unwrap();
        let n = y.len() as f64;
        y.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    };
    assert!((loss(&state) - out.loss).abs() <= 1e-12 * out.loss.max(1.0));

    let h = 1e-5;
    let mut kinks = 0;
    for (name, w) in &state.params {
        let grad = out.grads.get(name).unwrap();
        let n = w.param_count();
        let mut checked = 0;
        while checked < 3 {
            let i = r.gen_range(0..n);
            let shifted = |d: f64| {
                let mut s = state.clone();
                *s.params.get_mut(name).unwrap().values_mut().nth(i).unwrap() += d;
                loss(&s)
            };
            let (up, mid, down) = (shifted(h), loss(&state), shifted(-h));
            // A ReLU or max-pool switch inside [-h, h] makes the two one-sided
            // slopes disagree; the loss is not differentiable there.
            let (right, left) = ((up - mid) / h, (mid - down) / h);
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()) + 1e-7 {
                kinks += 1;
                assert!(kinks <= 10, "{kind} seed {seed}: too many non-differentiable probes");
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = *grad.values().nth(i).unwrap();
            assert_grad_close(
                &[analytic],
                &[numeric],
                1e-6,
                &format!("{kind} seed {seed} {name}[{i}]"),
            );
            checked += 1;
        }
    }
}

/// Random header and payload written to `dir`, then decoded whole and read
/// back through a random frame range.
pub fn day_file_round_trip_case(r: &mut StdRng, dir: &Path, i: usize) {
    let h = DayHeader::new(
        r.gen(),
        r.gen_range(2000..2100),
        r.gen_range(0..7),
        r.gen_range(1..40),
        r.gen_range(1..9),
        r.gen_range(1..9),
    );
    let payload: Vec<u8> = (0..h.payload_len()).map(|_| r.gen()).collect();
    let path = dir.join(format!("{i}.t4cd"));
    write_day_file(&path, &h, &payload).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(decode_day_file(&bytes).unwrap(), (h, payload.clone()));
    let reader = read_day_file(&path).unwrap();
    assert_eq!(*reader.header(), h);
    let t = h.timesteps as usize;
    let start = r.gen_range(0..t);
    let count = r.gen_range(0..=t - start);
    let fl = h.frame_len();
    assert_eq!(
        reader.read_frames(start, count).unwrap(),
        payload[start * fl..(start + count) * fl]
    );
    assert!(reader.read_frames(start, t - start + 1).is_err());
}

fn random_f32(r: &mut StdRng) -> f32 {
    match r.gen_range(0..4) {
        0 => 0.0,
        1 => f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff),
        _ => r.gen_range(-300.0..300.0),
    }
}

/// A random toy-size model of a random kind with arbitrary bit patterns in
/// its parameters.
pub fn checkpoint_round_trip_case(r: &mut StdRng) {
    let kind = ModelKind::ALL[r.gen_range(0..ModelKind::ALL.len())];
    let config = if r.gen_bool(0.5) {
        toy_config(kind)
    } else {
        kind.default_config()
    };
    let mut state = ModelState::<f32>::init(config, r.gen()).unwrap();
    for w in state.params.values_mut() {
        for v in w.values_mut() {
            *v = random_f32(r);
        }
    }
    state.step = r.gen();
    let bytes = encode_checkpoint(&state).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, state.config);
    assert_eq!(back.step, state.step);
    for (name, w) in &state.params {
        let got: Vec<u32> = back.params[name].values().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = w.values().map(|v| v.to_bits()).collect();
        assert_eq!(got, want, "{name}");
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}

/// Random-rank dense tensor and random sparse tensor through their debug dumps.
pub fn dump_round_trip_case(r: &mut StdRng, dir: &Path, i: usize) {
    let rank = r.gen_range(1..6);
    let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..5)).collect();
    let n = shape.iter().product();
    let dense = DenseTensor::new(shape, (0..n).map(|_| random_f32(r)).collect()).unwrap();
    let path = dir.join(format!("{i}.dense"));
    write_dense_dump(&path, &dense).unwrap();
    let back = read_dense_dump(&path).unwrap();
    assert_eq!(back.shape(), dense.shape());
    assert!(back
        .data()
        .iter()
        .zip(dense.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let shape = [
        r.gen_range(1..3),
        r.gen_range(1..5),
        r.gen_range(1..9),
        r.gen_range(1..9),
    ];
    let channels = r.gen_range(1..5);
    let density = r.gen_range(0.0..0.5);
    let mut sparse = random_sparse(r, shape, channels, density).cast::<f32>();
    for v in sparse.feats_mut() {
        *v = random_f32(r);
    }
    let path = dir.join(format!("{i}.sparse"));
    write_sparse_dump(&path, &sparse).unwrap();
    let back = read_sparse_dump(&path).unwrap();
    assert_eq!(back.coords(), sparse.coords());
    assert_eq!(back.channels(), sparse.channels());
    assert_eq!(back.dense_shape(), sparse.dense_shape());
    assert!(back
        .feats()
        .iter()
        .zip(sparse.feats())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

/// One 8x8 Moscow batch whose target keeps only cells active in the history.
pub fn overfit_batch(dir: &Path) -> sparsecast::data::Batch {
    use sparsecast::data::*;
    let config = GeneratorConfig {
        cities: vec![table_profile("MOS").unwrap()],
        timesteps: 40,
        height: 8,
        width: 8,
        seed: 1,
    };
    let manifest = write_corpus(&config, 1, dir).unwrap();
    let plan = plan_epoch(&manifest, 3, PlanConfig::default()).unwrap();
    let mut batch = iterate_batches(&plan, LoaderConfig::default())
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    batch.restrict_target_to_input_support();
    batch
}

/// Trains `kind` for `steps` Adam steps on `batch` alone and returns the
/// initial loss and the lowest loss seen, including after the last step.
pub fn overfit_case(kind: ModelKind, batch: &sparsecast::data::Batch, steps: usize, lr: f64) -> (f64, f64) {
    use sparsecast::train::*;
    let config = TrainConfig {
        epochs: steps,
        learning_rate: lr,
        seed: 5,
        deterministic: true,
        ..Default::default()
    };
    let out = train(kind.default_config(), &config, &mut FixedBatches(vec![batch.clone()])).unwrap();
    let last = loss_and_grads(&out.last, &batch.input, &batch.target).unwrap().loss;
    let best = out.records.iter().map(|r| r.train_mse).fold(last, f64::min);
    (out.records[0].train_mse, best)
}
