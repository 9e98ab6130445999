use std::sync::Arc;

use super::{ModelConfig, ModelState, UNetBackend, UNetConfig};
use crate::error::{Error, Result};
use crate::sparse::{
    align_backward, align_to, build_rulebook, dense_to_sparse, gather_dense_rows, sparse_concat, sparse_conv_backward,
    sparse_conv_forward, sparse_maxpool_backward, sparse_maxpool_with_routing, sparse_relu, sparse_relu_backward,
    sparse_split_feats, sparse_to_dense, sparse_transposed_conv, union_coords, upsample_reach, Rulebook,
    SparseConvMode, SparseTensor,
};
use crate::tensor::{
    concat_channels, conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward,
    maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward, split_channels, ConvSpec, DenseTensor,
    GradientTape, Real,
};

/// Stride-2 upsampling on `(h, w)` only; time is folded into channels.
fn up_spec(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec {
        kernel: [1, 3, 3],
        stride: [1, 2, 2],
        padding: [0, 1, 1],
        in_channels: cin,
        out_channels: cout,
        has_bias: true,
    }
}

pub(super) fn param_specs(c: &UNetConfig) -> Vec<(String, ConvSpec)> {
    let conv = ConvSpec::same_2d;
    let mut specs = Vec::new();
    let mut cin = c.in_channels * c.history;
    for l in 0..c.levels {
        specs.push((format!("enc{l}.conv1"), conv(cin, c.width(l))));
        specs.push((format!("enc{l}.conv2"), conv(c.width(l), c.width(l))));
        cin = c.width(l);
    }
    let wb = c.width(c.levels);
    specs.push(("bottleneck.conv1".into(), conv(cin, wb)));
    specs.push(("bottleneck.conv2".into(), conv(wb, wb)));
    for l in (0..c.levels).rev() {
        specs.push((format!("dec{l}.up"), up_spec(c.width(l + 1), c.width(l))));
        specs.push((format!("dec{l}.conv1"), conv(2 * c.width(l), c.width(l))));
        specs.push((format!("dec{l}.conv2"), conv(c.width(l), c.width(l))));
    }
    specs.push(("head".into(), conv(c.width(0), c.out_channels * c.horizon)));
    specs
}

/// `[B, C, T, H, W] -> [B, C*T, 1, H, W]` (channel `c * T + t`).
pub fn fold_history<T: Real>(x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, c, t, h, w] = x.dims5("fold_history")?;
    x.reshape(&[b, c * t, 1, h, w])
}

/// `[B, C*T, 1, H, W] -> [B, C, T, H, W]`.
pub fn unfold_prediction<T: Real>(y: &DenseTensor<T>, channels: usize, horizon: usize) -> Result<DenseTensor<T>> {
    let [b, ct, t, h, w] = y.dims5("unfold_prediction")?;
    if t != 1 || ct != channels * horizon {
        return Err(Error::shape(
            "unfold_prediction",
            "channels",
            channels * horizon,
            ct * t,
        ));
    }
    y.reshape(&[b, channels, horizon, h, w])
}

fn unet_config<T: Real>(state: &ModelState<T>, backend: UNetBackend) -> Result<&UNetConfig> {
    match &state.config {
        ModelConfig::UNet(c) if c.backend == backend => Ok(c),
        _ => Err(Error::ModelMismatch(format!("state is not a {backend:?} unet"))),
    }
}

// ---------------------------------------------------------------- dense

struct DConv<T> {
    input: DenseTensor<T>,
    pre: DenseTensor<T>,
}

struct DEnc<T> {
    conv1: DConv<T>,
    conv2: DConv<T>,
    argmax: Vec<usize>,
    skip_shape: Vec<usize>,
}

struct DDec<T> {
    up_input: DenseTensor<T>,
    conv1: DConv<T>,
    conv2: DConv<T>,
}

pub(super) struct DenseCache<T> {
    enc: Vec<DEnc<T>>,
    bottleneck: [DConv<T>; 2],
    /// Indexed by level.
    dec: Vec<DDec<T>>,
    head_input: DenseTensor<T>,
}

fn dconv_relu<T: Real>(state: &ModelState<T>, name: &str, x: DenseTensor<T>) -> Result<(DenseTensor<T>, DConv<T>)> {
    let w = state.param(name)?;
    let pre = conv3d_forward(&x, &w.spec, w)?;
    Ok((relu_forward(&pre), DConv { input: x, pre }))
}

fn dconv_relu_back<T: Real>(
    state: &ModelState<T>,
    name: &str,
    cache: &DConv<T>,
    grad: &DenseTensor<T>,
    tape: &mut GradientTape<T>,
) -> Result<DenseTensor<T>> {
    let w = state.param(name)?;
    let g = relu_backward(grad, &cache.pre)?;
    let g = conv3d_backward(&g, &cache.input, &w.spec, w)?;
    tape.accumulate(name, g.params)?;
    Ok(g.input)
}

fn dense_forward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    x: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, DenseCache<T>)> {
    let mut a = x.clone();
    let mut enc = Vec::with_capacity(c.levels);
    let mut skips = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        let (h, conv1) = dconv_relu(state, &format!("enc{l}.conv1"), a)?;
        let (h, conv2) = dconv_relu(state, &format!("enc{l}.conv2"), h)?;
        let pool = maxpool3d_forward(&h)?;
        enc.push(DEnc {
            conv1,
            conv2,
            argmax: pool.argmax,
            skip_shape: h.shape().to_vec(),
        });
        skips.push(h);
        a = pool.output;
    }
    let (h, b1) = dconv_relu(state, "bottleneck.conv1", a)?;
    let (mut a, b2) = dconv_relu(state, "bottleneck.conv2", h)?;
    let mut dec: Vec<Option<DDec<T>>> = (0..c.levels).map(|_| None).collect();
    for l in (0..c.levels).rev() {
        let skip = &skips[l];
        let sd = skip.dims5("unet skip")?;
        let w = state.param(&format!("dec{l}.up"))?;
        let up = conv_transpose3d_forward(&a, &w.spec, w, [sd[2], sd[3], sd[4]])?;
        let cat = concat_channels(&[&up, skip])?;
        let (h, conv1) = dconv_relu(state, &format!("dec{l}.conv1"), cat)?;
        let (h, conv2) = dconv_relu(state, &format!("dec{l}.conv2"), h)?;
        dec[l] = Some(DDec {
            up_input: a,
            conv1,
            conv2,
        });
        a = h;
    }
    let w = state.param("head")?;
    let out = conv3d_forward(&a, &w.spec, w)?;
    Ok((
        out,
        DenseCache {
            enc,
            bottleneck: [b1, b2],
            dec: dec.into_iter().map(|d| d.expect("every level decoded")).collect(),
            head_input: a,
        },
    ))
}

fn dense_backward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    cache: &DenseCache<T>,
    grad: &DenseTensor<T>,
    tape: &mut GradientTape<T>,
) -> Result<()> {
    let w = state.param("head")?;
    let g = conv3d_backward(grad, &cache.head_input, &w.spec, w)?;
    tape.accumulate("head", g.params)?;
    let mut g = g.input;
    let mut skip_grads = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        let d = &cache.dec[l];
        let g2 = dconv_relu_back(state, &format!("dec{l}.conv2"), &d.conv2, &g, tape)?;
        let g1 = dconv_relu_back(state, &format!("dec{l}.conv1"), &d.conv1, &g2, tape)?;
        let mut parts = split_channels(&g1, &[c.width(l), c.width(l)])?;
        skip_grads.push(parts.pop().expect("two parts"));
        let name = format!("dec{l}.up");
        let w = state.param(&name)?;
        let gu = conv_transpose3d_backward(&parts[0], &d.up_input, &w.spec, w)?;
        tape.accumulate(&name, gu.params)?;
        g = gu.input;
    }
    let g = dconv_relu_back(state, "bottleneck.conv2", &cache.bottleneck[1], &g, tape)?;
    let mut g = dconv_relu_back(state, "bottleneck.conv1", &cache.bottleneck[0], &g, tape)?;
    for l in (0..c.levels).rev() {
        let e = &cache.enc[l];
        let mut gs = maxpool3d_backward(&g, &e.argmax, &e.skip_shape)?;
        for (a, b) in gs.data_mut().iter_mut().zip(skip_grads[l].data()) {
            *a += *b;
        }
        let g2 = dconv_relu_back(state, &format!("enc{l}.conv2"), &e.conv2, &gs, tape)?;
        g = dconv_relu_back(state, &format!("enc{l}.conv1"), &e.conv1, &g2, tape)?;
    }
    Ok(())
}

/// Dense UNet over a folded `[B, C*12, 1, H, W]` history; returns the
/// `[B, C*6, 1, H, W]` head output.
pub fn conv3d_unet_forward<T: Real>(state: &ModelState<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let c = unet_config(state, UNetBackend::Dense3D)?;
    Ok(dense_forward(c, state, x)?.0)
}

// --------------------------------------------------------------- sparse

struct SConv<T> {
    input: SparseTensor<T>,
    pre: SparseTensor<T>,
    rb: Arc<Rulebook>,
}

struct SEnc<T> {
    conv1: SConv<T>,
    conv2: SConv<T>,
    argmax: Vec<u32>,
    rows: usize,
}

struct SDec<T> {
    up_input: SparseTensor<T>,
    up_rb: Rulebook,
    skip_src: Vec<u32>,
    skip_rows: usize,
    conv1: SConv<T>,
    conv2: SConv<T>,
}

pub(super) struct SparseCache<T> {
    enc: Vec<SEnc<T>>,
    bottleneck: [SConv<T>; 2],
    dec: Vec<SDec<T>>,
    head: SConv<T>,
}

/// Rulebooks for stride-1 layers. Submanifold layers at one resolution share a
/// coordinate set, so their rulebook is built once per level.
struct Plans {
    mode: SparseConvMode,
    levels: Vec<Option<Arc<Rulebook>>>,
}

impl Plans {
    fn get<T: Real>(&mut self, level: usize, x: &SparseTensor<T>, spec: &ConvSpec) -> Result<Arc<Rulebook>> {
        match self.mode {
            SparseConvMode::Generalized => Ok(Arc::new(build_rulebook(x, spec, self.mode)?)),
            SparseConvMode::Submanifold => {
                if let Some(rb) = &self.levels[level] {
                    return Ok(Arc::clone(rb));
                }
                let rb = Arc::new(build_rulebook(x, spec, self.mode)?);
                self.levels[level] = Some(Arc::clone(&rb));
                Ok(rb)
            }
        }
    }
}

fn sconv<T: Real>(
    state: &ModelState<T>,
    plans: &mut Plans,
    level: usize,
    name: &str,
    x: SparseTensor<T>,
) -> Result<SConv<T>> {
    let w = state.param(name)?;
    let rb = plans.get(level, &x, &w.spec)?;
    let pre = sparse_conv_forward(&x, w, &rb)?;
    Ok(SConv { input: x, pre, rb })
}

fn sconv_relu<T: Real>(
    state: &ModelState<T>,
    plans: &mut Plans,
    level: usize,
    name: &str,
    x: SparseTensor<T>,
) -> Result<(SparseTensor<T>, SConv<T>)> {
    let cache = sconv(state, plans, level, name, x)?;
    Ok((sparse_relu(&cache.pre), cache))
}

fn sconv_back<T: Real>(
    state: &ModelState<T>,
    name: &str,
    cache: &SConv<T>,
    grad: &[T],
    relu: bool,
    tape: &mut GradientTape<T>,
) -> Result<Vec<T>> {
    let w = state.param(name)?;
    let g = if relu {
        sparse_relu_backward(grad, &cache.pre)?
    } else {
        grad.to_vec()
    };
    let g = sparse_conv_backward(&g, &cache.input, w, &cache.rb)?;
    tape.accumulate(name, g.params)?;
    Ok(g.input)
}

fn sparse_forward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    x: &SparseTensor<T>,
) -> Result<(SparseTensor<T>, SparseCache<T>)> {
    let mut plans = Plans {
        mode: c.sparse_mode,
        levels: vec![None; c.levels + 1],
    };
    let mut a = x.clone();
    let mut enc = Vec::with_capacity(c.levels);
    let mut skips = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        let (h, conv1) = sconv_relu(state, &mut plans, l, &format!("enc{l}.conv1"), a)?;
        let (h, conv2) = sconv_relu(state, &mut plans, l, &format!("enc{l}.conv2"), h)?;
        let pool = sparse_maxpool_with_routing(&h);
        enc.push(SEnc {
            conv1,
            conv2,
            argmax: pool.argmax,
            rows: h.nnz(),
        });
        skips.push(h);
        a = pool.output;
    }
    let (h, b1) = sconv_relu(state, &mut plans, c.levels, "bottleneck.conv1", a)?;
    let (mut a, b2) = sconv_relu(state, &mut plans, c.levels, "bottleneck.conv2", h)?;
    let mut dec: Vec<Option<SDec<T>>> = (0..c.levels).map(|_| None).collect();
    for l in (0..c.levels).rev() {
        let skip = &skips[l];
        let w = state.param(&format!("dec{l}.up"))?;
        let target = match c.sparse_mode {
            SparseConvMode::Submanifold => skip.coords().to_vec(),
            SparseConvMode::Generalized => {
                union_coords(skip.coords(), &upsample_reach(&a, &w.spec, skip.dense_shape()))
            }
        };
        let (up, up_rb) = sparse_transposed_conv(&a, w, &target, skip.dense_shape())?;
        let (skip_al, skip_src) = align_to(skip, &target)?;
        let cat = sparse_concat(&up, &skip_al)?;
        let (h, conv1) = sconv_relu(state, &mut plans, l, &format!("dec{l}.conv1"), cat)?;
        let (h, conv2) = sconv_relu(state, &mut plans, l, &format!("dec{l}.conv2"), h)?;
        dec[l] = Some(SDec {
            up_input: a,
            up_rb,
            skip_src,
            skip_rows: skip.nnz(),
            conv1,
            conv2,
        });
        a = h;
    }
    let head = sconv(state, &mut plans, 0, "head", a)?;
    Ok((
        head.pre.clone(),
        SparseCache {
            enc,
            bottleneck: [b1, b2],
            dec: dec.into_iter().map(|d| d.expect("every level decoded")).collect(),
            head,
        },
    ))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

fn sparse_backward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    cache: &SparseCache<T>,
    grad: &[T],
    tape: &mut GradientTape<T>,
) -> Result<()> {
    let mut g = sconv_back(state, "head", &cache.head, grad, false, tape)?;
    let mut skip_grads = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        let d = &cache.dec[l];
        let g2 = sconv_back(state, &format!("dec{l}.conv2"), &d.conv2, &g, true, tape)?;
        let g1 = sconv_back(state, &format!("dec{l}.conv1"), &d.conv1, &g2, true, tape)?;
        let rows = d.conv1.input.nnz();
        let (g_up, g_skip) = sparse_split_feats(&g1, rows, [c.width(l), c.width(l)]);
        skip_grads.push(align_backward(&g_skip, &d.skip_src, d.skip_rows, c.width(l)));
        let name = format!("dec{l}.up");
        let w = state.param(&name)?;
        let gu = sparse_conv_backward(&g_up, &d.up_input, w, &d.up_rb)?;
        tape.accumulate(&name, gu.params)?;
        g = gu.input;
    }
    let g2 = sconv_back(state, "bottleneck.conv2", &cache.bottleneck[1], &g, true, tape)?;
    let mut g = sconv_back(state, "bottleneck.conv1", &cache.bottleneck[0], &g2, true, tape)?;
    for l in (0..c.levels).rev() {
        let e = &cache.enc[l];
        let mut gs = sparse_maxpool_backward(&g, &e.argmax, e.rows, c.width(l))?;
        add_into(&mut gs, &skip_grads[l]);
        let g2 = sconv_back(state, &format!("enc{l}.conv2"), &e.conv2, &gs, true, tape)?;
        g = sconv_back(state, &format!("enc{l}.conv1"), &e.conv1, &g2, true, tape)?;
    }
    Ok(())
}

/// Sparse UNet over a folded history (`C*12` feature channels per site);
/// returns the `C*6`-channel head output on the network's output coordinates.
pub fn sparse_unet_forward<T: Real>(state: &ModelState<T>, x: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    let c = unet_config(state, UNetBackend::Sparse)?;
    Ok(sparse_forward(c, state, x)?.0)
}

// -------------------------------------------------------------- dispatch

pub(super) enum Cache<T> {
    Dense(DenseCache<T>),
    Sparse {
        output: SparseTensor<T>,
        cache: Box<SparseCache<T>>,
    },
}

pub(super) fn forward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    x: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, Cache<T>)> {
    let folded = fold_history(x)?;
    match c.backend {
        UNetBackend::Dense3D => {
            let (y, cache) = dense_forward(c, state, &folded)?;
            Ok((unfold_prediction(&y, c.out_channels, c.horizon)?, Cache::Dense(cache)))
        }
        UNetBackend::Sparse => {
            let s = dense_to_sparse(&folded, T::zero())?;
            let (output, cache) = sparse_forward(c, state, &s)?;
            let y = sparse_to_dense(&output)?;
            Ok((
                unfold_prediction(&y, c.out_channels, c.horizon)?,
                Cache::Sparse {
                    output,
                    cache: Box::new(cache),
                },
            ))
        }
    }
}

pub(super) fn backward<T: Real>(
    c: &UNetConfig,
    state: &ModelState<T>,
    cache: &Cache<T>,
    grad: &DenseTensor<T>,
    tape: &mut GradientTape<T>,
) -> Result<()> {
    let [b, ch, t, h, w] = grad.dims5("unet backward")?;
    let folded = grad.reshape(&[b, ch * t, 1, h, w])?;
    match cache {
        Cache::Dense(cache) => dense_backward(c, state, cache, &folded, tape),
        Cache::Sparse { output, cache } => {
            let g = gather_dense_rows(&folded, output)?;
            sparse_backward(c, state, cache, &g, tape)
        }
    }
}
