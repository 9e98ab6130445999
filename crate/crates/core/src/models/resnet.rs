use super::{ConvDim, ModelState, OutputMode, PriorFrame, ResNet3DConfig};
use crate::error::Result;
use crate::tensor::{
    add_forward, broadcast_time, broadcast_time_backward, concat_channels, concat_time, conv3d_backward,
    conv3d_forward, relu_backward, relu_forward, slice_time, split_channels, ConvSpec, DenseTensor, GradientTape, Real,
};

fn trunk_spec(c: &ResNet3DConfig, cin: usize, cout: usize) -> ConvSpec {
    match c.conv_dim {
        ConvDim::D3 => ConvSpec::same(cin, cout),
        ConvDim::D2 => ConvSpec::same_2d(cin, cout),
    }
}

/// Time extent of the trunk's feature maps.
fn feature_frames(c: &ResNet3DConfig) -> usize {
    match c.conv_dim {
        ConvDim::D3 => c.history,
        ConvDim::D2 => 1,
    }
}

/// Output-stage kernel: spans the whole feature time axis and emits one frame.
fn output_spec(c: &ResNet3DConfig, cin: usize, cout: usize) -> ConvSpec {
    ConvSpec {
        kernel: [feature_frames(c), 3, 3],
        stride: [1; 3],
        padding: [0, 1, 1],
        in_channels: cin,
        out_channels: cout,
        has_bias: true,
    }
}

pub(super) fn backbone_names(c: &ResNet3DConfig) -> Vec<String> {
    let mut names = vec!["stem".to_owned()];
    for i in 0..c.num_residual_blocks {
        names.push(format!("block{i}.conv1"));
        names.push(format!("block{i}.conv2"));
    }
    names
}

pub(super) fn param_specs(c: &ResNet3DConfig) -> Vec<(String, ConvSpec)> {
    let stem_in = match c.conv_dim {
        ConvDim::D3 => c.in_channels,
        ConvDim::D2 => c.in_channels * c.history,
    };
    let hid = c.stem_hidden;
    let mut specs = vec![("stem".to_owned(), trunk_spec(c, stem_in, hid))];
    for i in 0..c.num_residual_blocks {
        specs.push((format!("block{i}.conv1"), trunk_spec(c, hid, hid)));
        specs.push((format!("block{i}.conv2"), trunk_spec(c, hid, hid)));
    }
    match c.output_mode {
        OutputMode::ConvOutput => specs.push(("head".into(), output_spec(c, hid, c.in_channels * c.horizon))),
        OutputMode::Sequential => {
            for k in 1..=c.horizon {
                specs.push((format!("seq{k}"), output_spec(c, hid + c.in_channels, c.in_channels)));
            }
        }
    }
    specs
}

fn conv<T: Real>(state: &ModelState<T>, name: &str, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let w = state.param(name)?;
    conv3d_forward(x, &w.spec, w)
}

fn conv_back<T: Real>(
    state: &ModelState<T>,
    name: &str,
    grad: &DenseTensor<T>,
    x: &DenseTensor<T>,
    tape: &mut GradientTape<T>,
) -> Result<DenseTensor<T>> {
    let w = state.param(name)?;
    let g = conv3d_backward(grad, x, &w.spec, w)?;
    tape.accumulate(name, g.params)?;
    Ok(g.input)
}

struct BlockCache<T> {
    input: DenseTensor<T>,
    pre1: DenseTensor<T>,
    act1: DenseTensor<T>,
    sum: DenseTensor<T>,
}

pub(super) struct Cache<T> {
    trunk_input: DenseTensor<T>,
    stem_pre: DenseTensor<T>,
    blocks: Vec<BlockCache<T>>,
    features: DenseTensor<T>,
    /// Inputs of the output layers (one for the one-layer head, six for the chain).
    head_inputs: Vec<DenseTensor<T>>,
}

fn trunk_input<T: Real>(c: &ResNet3DConfig, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    match c.conv_dim {
        ConvDim::D3 => Ok(x.clone()),
        ConvDim::D2 => {
            let [b, ch, t, h, w] = x.dims5("resnet input")?;
            x.reshape(&[b, ch * t, 1, h, w])
        }
    }
}

/// Stem pre-activation, trunk output and per-block caches.
type Trunk<T> = (DenseTensor<T>, DenseTensor<T>, Vec<BlockCache<T>>);

fn trunk<T: Real>(c: &ResNet3DConfig, state: &ModelState<T>, x: &DenseTensor<T>) -> Result<Trunk<T>> {
    let stem_pre = conv(state, "stem", x)?;
    let mut a = relu_forward(&stem_pre);
    let mut blocks = Vec::with_capacity(c.num_residual_blocks);
    for i in 0..c.num_residual_blocks {
        let pre1 = conv(state, &format!("block{i}.conv1"), &a)?;
        let act1 = relu_forward(&pre1);
        let pre2 = conv(state, &format!("block{i}.conv2"), &act1)?;
        let sum = add_forward(&pre2, &a)?;
        let next = relu_forward(&sum);
        blocks.push(BlockCache {
            input: a,
            pre1,
            act1,
            sum,
        });
        a = next;
    }
    Ok((stem_pre, a, blocks))
}

/// Output of the stem and residual blocks.
pub fn resnet_features<T: Real>(state: &ModelState<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let super::ModelConfig::ResNet(c) = &state.config else {
        return Err(crate::Error::ModelMismatch(
            "resnet_features needs a residual network".into(),
        ));
    };
    Ok(trunk(c, state, &trunk_input(c, x)?)?.1)
}

fn prior_frame<T: Real>(c: &ResNet3DConfig, history: &DenseTensor<T>, like: [usize; 5]) -> Result<DenseTensor<T>> {
    match c.prior_frame {
        PriorFrame::Zero => Ok(DenseTensor::zeros(&[like[0], c.in_channels, 1, like[3], like[4]])),
        PriorFrame::LastObserved => slice_time(history, c.history - 1, 1),
    }
}

fn sequential<T: Real>(
    c: &ResNet3DConfig,
    state: &ModelState<T>,
    features: &DenseTensor<T>,
    history: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, Vec<DenseTensor<T>>)> {
    let fd = features.dims5("sequential_output_block")?;
    let mut prev = prior_frame(c, history, fd)?;
    let mut frames = Vec::with_capacity(c.horizon);
    let mut inputs = Vec::with_capacity(c.horizon);
    for k in 1..=c.horizon {
        let input = concat_channels(&[features, &broadcast_time(&prev, fd[2])?])?;
        prev = conv(state, &format!("seq{k}"), &input)?;
        frames.push(prev.clone());
        inputs.push(input);
    }
    let refs: Vec<&DenseTensor<T>> = frames.iter().collect();
    Ok((concat_time(&refs)?, inputs))
}

/// Six chained output layers; layer `k` sees the trunk features and frame `k - 1`.
pub fn sequential_output_block<T: Real>(
    state: &ModelState<T>,
    features: &DenseTensor<T>,
    history: &DenseTensor<T>,
) -> Result<DenseTensor<T>> {
    let super::ModelConfig::ResNet(c) = &state.config else {
        return Err(crate::Error::ModelMismatch(
            "sequential output needs a residual network".into(),
        ));
    };
    Ok(sequential(c, state, features, history)?.0)
}

fn reshape_head<T: Real>(c: &ResNet3DConfig, y: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, _, _, h, w] = y.dims5("conv_output_block")?;
    y.reshape(&[b, c.in_channels, c.horizon, h, w])
}

/// One convolution emitting all frames as `8 * 6` channels, reshaped to `[B, 8, 6, H, W]`.
pub fn conv_output_block<T: Real>(state: &ModelState<T>, features: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let super::ModelConfig::ResNet(c) = &state.config else {
        return Err(crate::Error::ModelMismatch(
            "conv output needs a residual network".into(),
        ));
    };
    reshape_head(c, &conv(state, "head", features)?)
}

pub(super) fn forward<T: Real>(
    c: &ResNet3DConfig,
    state: &ModelState<T>,
    x: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, Cache<T>)> {
    let input = trunk_input(c, x)?;
    let (stem_pre, features, blocks) = trunk(c, state, &input)?;
    let (pred, head_inputs) = match c.output_mode {
        OutputMode::ConvOutput => (
            reshape_head(c, &conv(state, "head", &features)?)?,
            vec![features.clone()],
        ),
        OutputMode::Sequential => sequential(c, state, &features, x)?,
    };
    Ok((
        pred,
        Cache {
            trunk_input: input,
            stem_pre,
            blocks,
            features,
            head_inputs,
        },
    ))
}

pub(super) fn backward<T: Real>(
    c: &ResNet3DConfig,
    state: &ModelState<T>,
    cache: &Cache<T>,
    grad: &DenseTensor<T>,
    tape: &mut GradientTape<T>,
) -> Result<()> {
    let fd = cache.features.dims5("resnet backward")?;
    let mut g_feat = match c.output_mode {
        OutputMode::ConvOutput => {
            let g = grad.reshape(&[fd[0], c.in_channels * c.horizon, 1, fd[3], fd[4]])?;
            conv_back(state, "head", &g, &cache.head_inputs[0], tape)?
        }
        OutputMode::Sequential => {
            let mut g_feat = DenseTensor::zeros(&fd);
            let mut carry: Option<DenseTensor<T>> = None;
            for k in (1..=c.horizon).rev() {
                let mut g_out = slice_time(grad, k - 1, 1)?;
                if let Some(carry) = &carry {
                    for (a, b) in g_out.data_mut().iter_mut().zip(carry.data()) {
                        *a += *b;
                    }
                }
                let g_in = conv_back(state, &format!("seq{k}"), &g_out, &cache.head_inputs[k - 1], tape)?;
                let parts = split_channels(&g_in, &[c.stem_hidden, c.in_channels])?;
                for (a, b) in g_feat.data_mut().iter_mut().zip(parts[0].data()) {
                    *a += *b;
                }
                carry = Some(broadcast_time_backward(&parts[1])?);
            }
            g_feat
        }
    };
    for (i, blk) in cache.blocks.iter().enumerate().rev() {
        let g_sum = relu_backward(&g_feat, &blk.sum)?;
        let g_act1 = conv_back(state, &format!("block{i}.conv2"), &g_sum, &blk.act1, tape)?;
        let g_pre1 = relu_backward(&g_act1, &blk.pre1)?;
        let mut g_in = conv_back(state, &format!("block{i}.conv1"), &g_pre1, &blk.input, tape)?;
        for (a, b) in g_in.data_mut().iter_mut().zip(g_sum.data()) {
            *a += *b;
        }
        g_feat = g_in;
    }
    let g_stem = relu_backward(&g_feat, &cache.stem_pre)?;
    conv_back(state, "stem", &g_stem, &cache.trunk_input, tape)?;
    Ok(())
}
